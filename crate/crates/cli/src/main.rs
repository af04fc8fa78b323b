use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use humocon_core::evalsuite::{
    evaluate, finite_diff_check, report, retrieval_eval, retrieval_from_features, run_ablation, AblationOptions,
    AblationRowKind, FdSelector,
};
use humocon_core::export::{export_features, load_bundle};
use humocon_core::synthkit::{dataset_hash, generate_dataset, read_dataset, write_dataset, PairedSample, SceneSpec};
use humocon_core::trainer::{pretrain, StageSelect, TrainConfig, Trainer};
use humocon_core::{Error, Result};

#[derive(Parser)]
#[command(name = "humocon", version, about = "Motion/video encoder pre-training on synthetic paired data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired motion/video dataset.
    GenData(GenData),
    /// Train stage 1, stage 2 or both.
    Pretrain(Pretrain),
    /// Held-out metrics of a checkpoint, or retrieval over an exported bundle.
    Eval(Eval),
    /// Train and compare loss-term ablation rows over several seeds.
    Ablate(Ablate),
    /// Write per-sample codes and aligned features for a dataset.
    Export(Export),
    /// Summarise a results directory into text and plots.
    Report(Report),
    /// Compare analytic gradients with central differences.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config layered over the desk preset; `preset = "full-scale"` switches the base.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none() && self.overrides.is_empty()
    }

    fn load(&self, scene: &SceneSpec) -> Result<TrainConfig> {
        TrainConfig::load(self.config.as_deref(), &self.overrides, scene)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
    /// Iteration count for every selected stage.
    #[arg(long)]
    iters: Option<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Eval {
    /// Checkpoint to evaluate.
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    checkpoint: Option<PathBuf>,
    /// Exported bundle whose aligned features are scored instead.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Held-out dataset; alignment maps come from here.
    #[arg(long)]
    data: PathBuf,
    /// Where to write eval.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset. Defaults to 100 pairs generated with the training
    /// scene and its seed plus 1000.
    #[arg(long)]
    held_out: Option<PathBuf>,
    /// Comma-separated rows: full, wo-rec, wo-dis-act, wo-act, wo-dis, wo-align.
    #[arg(long, value_delimiter = ',', default_value = "full,wo-rec,wo-dis-act,wo-act,wo-dis,wo-align")]
    rows: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Directory for ablation.json, ablation.txt and per-run metrics.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Export {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// When given, the resulting config must hash to the checkpoint's.
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Report {
    /// Results directory holding metrics.jsonl and/or ablation.json.
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    /// linear, discriminator-score, second-order-act, rec-loss, straight-through or all.
    #[arg(long, default_value = "all")]
    selector: String,
    /// Overrides each path's default tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenData) -> Result<bool> {
    let spec = SceneSpec { seed: a.seed, ..SceneSpec::default() };
    info!("generating {} pairs with seed {}", a.count, a.seed);
    let samples = generate_dataset(&spec, a.count)?;
    let manifest = write_dataset(&samples, &spec, &a.out)?;
    println!("format   {}", manifest.format);
    println!("count    {}", manifest.count);
    println!("seed     {}", manifest.seed);
    println!("sha256   {}", dataset_hash(&a.out)?);
    Ok(true)
}

fn run_pretrain(a: Pretrain) -> Result<bool> {
    let (manifest, data) = read_dataset(&a.data)?;
    let mut cfg = a.cfg.load(&manifest.spec)?;
    cfg.model.check_scene(&manifest.spec)?;
    let select = match a.stage {
        StageArg::One => StageSelect::One,
        StageArg::Two => StageSelect::Two,
        StageArg::All => StageSelect::All,
    };
    if let Some(n) = a.iters {
        if matches!(select, StageSelect::One | StageSelect::All) {
            cfg.stage1.iters = n;
        }
        if matches!(select, StageSelect::Two | StageSelect::All) {
            cfg.stage2.iters = n;
        }
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    info!("seed {} drives every random draw; config {}", cfg.seed, &cfg.hash()[..12]);
    let t = pretrain(cfg, &data, select, &a.out)?;
    println!("stage {} step {} checkpoint {}", t.stage, t.step, a.out.join(format!("stage{}.ckpt", t.stage)).display());
    Ok(true)
}

fn run_eval(a: Eval) -> Result<bool> {
    let (_, data) = read_dataset(&a.data)?;
    let body = if let Some(dir) = &a.features {
        let bundle = load_bundle(dir)?;
        if bundle.samples.len() != data.len() {
            return Err(Error::Input(format!("bundle has {} samples, dataset {}", bundle.samples.len(), data.len())));
        }
        let video: Vec<_> = bundle.samples.iter().map(|s| s.video_aligned.clone()).collect();
        let motion: Vec<_> = bundle.samples.iter().map(|s| s.motion_aligned.clone()).collect();
        let maps: Vec<_> = bundle.samples.iter().map(|s| data[s.index].align_map.clone()).collect();
        let r = retrieval_from_features(&video, &motion, &maps)?;
        println!("retrieval top1 {:.4} top5 {:.4} (chance {:.4})", r.top1, r.top5, r.chance);
        serde_json::json!({ "retrieval": r })
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires one source");
        let t = Trainer::load(path)?;
        let metrics = evaluate(&t.model, &t.config, &data, a.batch)?;
        let r = retrieval_eval(&t.model, &t.config, &data)?;
        println!("retrieval top1 {:.4} top5 {:.4} (chance {:.4})", r.top1, r.top5, r.chance);
        println!("rec_mse {:.6} velocity_mse {:.6}", metrics.rec_mse, metrics.velocity_mse);
        println!("perplexity motion {:.3} video {:.3}", metrics.perplexity_motion, metrics.perplexity_video);
        serde_json::json!({ "metrics": metrics, "retrieval": r })
    };
    if let Some(out) = &a.out {
        write_json(&out.join("eval.json"), &body)?;
    }
    Ok(true)
}

fn held_out(a: &Ablate, spec: &SceneSpec) -> Result<Vec<PairedSample>> {
    match &a.held_out {
        Some(dir) => Ok(read_dataset(dir)?.1),
        None => generate_dataset(&SceneSpec { seed: spec.seed + 1000, ..spec.clone() }, 100),
    }
}

fn run_ablate(a: Ablate) -> Result<bool> {
    let (manifest, data) = read_dataset(&a.data)?;
    let base = a.cfg.load(&manifest.spec)?;
    base.model.check_scene(&manifest.spec)?;
    let rows = a
        .rows
        .iter()
        .map(|r| AblationRowKind::parse(r).ok_or_else(|| Error::Config(format!("unknown ablation row {r:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let held = held_out(&a, &manifest.spec)?;
    info!("ablation over seeds {:?}, rows {}", a.seeds, rows.iter().map(|r| r.name()).collect::<Vec<_>>().join(", "));
    let opts = AblationOptions { threads: a.threads, metrics_dir: Some(a.out.clone()) };
    let table = run_ablation(&base, &rows, &a.seeds, &data, &held, &opts)?;
    table.write(&a.out)?;
    print!("{}", table.to_text());
    let failed: Vec<_> = table.rows.iter().filter(|r| r.error.is_some()).map(|r| r.kind.name()).collect();
    if !failed.is_empty() {
        eprintln!("error: rows failed: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn run_export(a: Export) -> Result<bool> {
    let (manifest, data) = read_dataset(&a.data)?;
    let expected = if a.cfg.is_empty() { None } else { Some(a.cfg.load(&manifest.spec)?) };
    let bundle = export_features(&a.checkpoint, expected.as_ref(), &manifest.spec, &data, Some(dataset_hash(&a.data)?), &a.out)?;
    println!("exported {} samples to {}", bundle.manifest.samples, a.out.display());
    println!("checkpoint {}", bundle.manifest.checkpoint_hash);
    println!("config     {}", bundle.manifest.config_hash);
    Ok(true)
}

fn run_report(a: Report) -> Result<bool> {
    let out = report(&a.dir)?;
    for w in &out.warnings {
        warn!("{w}");
    }
    print!("{}", out.summary);
    Ok(true)
}

fn run_gradcheck(a: Gradcheck) -> Result<bool> {
    let selectors = if a.selector == "all" {
        FdSelector::ALL.to_vec()
    } else {
        vec![FdSelector::parse(&a.selector).ok_or_else(|| Error::Config(format!("unknown selector {:?}", a.selector)))?]
    };
    let mut ok = true;
    for s in selectors {
        let r = finite_diff_check(s, a.tolerance, a.seed)?;
        println!(
            "{} {:<20} rel {:.3e} abs {:.3e} tol {:.1e} over {} coordinates",
            if r.passed { "PASS" } else { "FAIL" },
            s.name(),
            r.max_rel_error,
            r.max_abs_error,
            r.tolerance,
            r.coordinates
        );
        ok &= r.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Export(a) => run_export(a),
        Command::Report(a) => run_report(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
