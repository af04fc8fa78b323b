//! Loss-term ablation grid. Each seed trains stage 1 once; every row then
//! continues from that shared checkpoint with its own stage-2 toggles.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalMetrics};
use crate::error::{Error, Result};
use crate::synthkit::PairedSample;
use crate::trainer::{LossConfig, LossReport, MetricsWriter, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationRowKind {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "w/o rec")]
    WoRec,
    #[serde(rename = "w/o dis&act")]
    WoDisAct,
    #[serde(rename = "w/o act")]
    WoAct,
    #[serde(rename = "w/o dis")]
    WoDis,
    #[serde(rename = "w/o align")]
    WoAlign,
}

impl AblationRowKind {
    pub const ALL: [Self; 6] = [Self::Full, Self::WoRec, Self::WoDisAct, Self::WoAct, Self::WoDis, Self::WoAlign];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WoRec => "w/o rec",
            Self::WoDisAct => "w/o dis&act",
            Self::WoAct => "w/o act",
            Self::WoDis => "w/o dis",
            Self::WoAlign => "w/o align",
        }
    }

    /// Accepts the display name or a slug such as `wo-dis-act`.
    pub fn parse(s: &str) -> Option<Self> {
        let norm = |x: &str| x.to_ascii_lowercase().replace("w/o", "wo").replace(['&', ' ', '_'], "-");
        Self::ALL.into_iter().find(|k| norm(k.name()) == norm(s) || k.slug() == s)
    }

    /// File-name friendly form.
    pub fn slug(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WoRec => "wo-rec",
            Self::WoDisAct => "wo-dis-act",
            Self::WoAct => "wo-act",
            Self::WoDis => "wo-dis",
            Self::WoAlign => "wo-align",
        }
    }

    /// Switches off this row's terms; the rest follow the base config.
    pub fn apply(self, loss: &mut LossConfig) {
        match self {
            Self::Full => {}
            Self::WoRec => loss.rec = false,
            Self::WoDisAct => {
                loss.dis = false;
                loss.act = false;
            }
            Self::WoAct => loss.act = false,
            Self::WoDis => loss.dis = false,
            Self::WoAlign => loss.align = false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowStats {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl RowStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std: var.sqrt(), n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: AblationRowKind,
    pub seeds: Vec<u64>,
    /// Held-out metrics per seed, in `seeds` order.
    pub per_seed: Vec<EvalMetrics>,
    pub rec_mse: RowStats,
    pub velocity_mse: RowStats,
    pub retrieval_top1: RowStats,
    pub perplexity: RowStats,
    /// Set when any seed of this row failed; the statistics then cover the
    /// seeds that finished.
    pub error: Option<String>,
}

/// One directional claim between two rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub claim: String,
    pub metric: String,
    pub better: AblationRowKind,
    pub worse: AblationRowKind,
    pub better_mean: f64,
    pub worse_mean: f64,
    /// Required relative margin, 0 for a plain strict ordering.
    pub margin: f64,
    pub holds: bool,
}

/// Stage-1 reconstruction at the start and end of training, averaged over a
/// window of steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub seed: u64,
    pub rec_motion_start: f64,
    pub rec_motion_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub comparisons: Vec<Comparison>,
    pub stage1: Vec<Stage1Summary>,
}

pub const MIN_SEEDS: usize = 3;
const STAGE1_WINDOW: usize = 50;

/// Where each job writes its metrics stream, when requested.
fn metrics_path(dir: &Path, seed: u64, what: &str) -> PathBuf {
    dir.join(format!("seed{seed}")).join(format!("{what}.jsonl"))
}

fn train_logged(trainer: &mut Trainer, data: &[PairedSample], log: Option<PathBuf>) -> Result<Vec<LossReport>> {
    let mut writer = match &log {
        Some(p) => {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
            Some(MetricsWriter::append(p)?)
        }
        None => None,
    };
    let mut reports = Vec::new();
    trainer.run_stage(data, |r| {
        if let Some(w) = writer.as_mut() {
            w.write(r)?;
        }
        reports.push(r.clone());
        Ok(())
    })?;
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    Ok(reports)
}

/// Runs `jobs` on up to `threads` workers. Results keep job order.
fn parallel<T: Send, R: Send>(jobs: Vec<T>, threads: usize, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    let n = jobs.len();
    let slots: Vec<Mutex<Option<T>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let out: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let job = slots[i].lock().unwrap().take().expect("each job runs once");
                *out[i].lock().unwrap() = Some(f(job));
            });
        }
    });
    out.into_iter().map(|m| m.into_inner().unwrap().expect("every job finished")).collect()
}

#[derive(Clone, Debug, Default)]
pub struct AblationOptions {
    /// Worker threads; results do not depend on this.
    pub threads: usize,
    /// Per-run metrics streams go under `<dir>/seed<s>/`.
    pub metrics_dir: Option<PathBuf>,
}

/// Trains every row for every seed on `train` and evaluates on `held_out`.
pub fn run_ablation(
    base: &TrainConfig,
    rows: &[AblationRowKind],
    seeds: &[u64],
    train: &[PairedSample],
    held_out: &[PairedSample],
    opts: &AblationOptions,
) -> Result<AblationTable> {
    if rows.is_empty() {
        return Err(Error::Config("ablation needs at least one row".into()));
    }
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Config(format!("ablation needs at least {MIN_SEEDS} seeds, got {}", seeds.len())));
    }
    let mut unique = seeds.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != seeds.len() {
        return Err(Error::Config("ablation seeds must be distinct".into()));
    }
    if held_out.is_empty() || train.is_empty() {
        return Err(Error::Input("ablation needs training and held-out samples".into()));
    }
    base.validate()?;
    let dir = opts.metrics_dir.as_deref();

    let stage1 = parallel(seeds.to_vec(), opts.threads, |seed| -> Result<(Trainer, Stage1Summary)> {
        let mut t = Trainer::new(TrainConfig { seed, ..base.clone() })?;
        t.begin_stage(1)?;
        let reports = train_logged(&mut t, train, dir.map(|d| metrics_path(d, seed, "stage1")))?;
        let rec: Vec<f64> = reports.iter().filter_map(|r| r.parts.rec_motion).collect();
        let w = STAGE1_WINDOW.min(rec.len()).max(1);
        let avg = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
        let summary = Stage1Summary {
            seed,
            rec_motion_start: avg(&rec[..w.min(rec.len())]),
            rec_motion_end: avg(&rec[rec.len().saturating_sub(w)..]),
        };
        Ok((t, summary))
    });

    let mut jobs = Vec::new();
    for (s, r) in stage1.iter().enumerate() {
        for &kind in rows {
            jobs.push((s, kind, r.as_ref().map(|(t, _)| t).map_err(|e| e.to_string())));
        }
    }
    let results = parallel(jobs, opts.threads, |(s, kind, start)| -> std::result::Result<EvalMetrics, String> {
        let mut t = start?.clone();
        let seed = seeds[s];
        let mut cfg = TrainConfig { seed, ..base.clone() };
        kind.apply(&mut cfg.loss);
        t.config = cfg;
        t.config_hash = t.config.hash();
        let mut run = || -> Result<EvalMetrics> {
            t.begin_stage(2)?;
            train_logged(&mut t, train, dir.map(|d| metrics_path(d, seed, kind.slug())))?;
            evaluate(&t.model, &t.config, held_out, 16)
        };
        run().map_err(|e| format!("seed {seed}: {e}"))
    });

    let mut table_rows = Vec::with_capacity(rows.len());
    for (ri, &kind) in rows.iter().enumerate() {
        let mut ok_seeds = Vec::new();
        let mut per_seed = Vec::new();
        let mut errors = Vec::new();
        for (si, &seed) in seeds.iter().enumerate() {
            match &results[si * rows.len() + ri] {
                Ok(m) => {
                    ok_seeds.push(seed);
                    per_seed.push(m.clone());
                }
                Err(e) => errors.push(e.clone()),
            }
        }
        let stat = |f: fn(&EvalMetrics) -> f64| RowStats::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        table_rows.push(AblationRow {
            kind,
            seeds: ok_seeds,
            rec_mse: stat(|m| m.rec_mse),
            velocity_mse: stat(|m| m.velocity_mse),
            retrieval_top1: stat(|m| m.retrieval_top1),
            perplexity: stat(|m| m.perplexity),
            per_seed,
            error: (!errors.is_empty()).then(|| errors.join("; ")),
        });
    }
    let comparisons = comparisons(&table_rows);
    let stage1 = stage1.into_iter().filter_map(|r| r.ok().map(|(_, s)| s)).collect();
    Ok(AblationTable { rows: table_rows, comparisons, stage1 })
}

/// Directional claims among whichever of the rows are present and complete.
pub fn comparisons(rows: &[AblationRow]) -> Vec<Comparison> {
    let find = |k: AblationRowKind| rows.iter().find(|r| r.kind == k && r.error.is_none() && r.rec_mse.n > 0);
    let mut out = Vec::new();
    use AblationRowKind::*;
    if let (Some(full), Some(wo)) = (find(Full), find(WoAlign)) {
        let (b, w) = (full.retrieval_top1.mean, wo.retrieval_top1.mean);
        out.push(Comparison {
            claim: "full retrieval top1 exceeds w/o align by at least 5% relative".into(),
            metric: "retrieval_top1".into(),
            better: Full,
            worse: WoAlign,
            better_mean: b,
            worse_mean: w,
            margin: 0.05,
            holds: b > w && b >= 1.05 * w,
        });
    }
    if let (Some(full), Some(wo)) = (find(Full), find(WoAct)) {
        let (b, w) = (full.velocity_mse.mean, wo.velocity_mse.mean);
        out.push(Comparison {
            claim: "full velocity MSE below w/o act by at least 10% relative".into(),
            metric: "velocity_mse".into(),
            better: Full,
            worse: WoAct,
            better_mean: b,
            worse_mean: w,
            margin: 0.10,
            holds: b < w && b <= 0.9 * w,
        });
    }
    if let (Some(wo_dis), Some(wo_act)) = (find(WoDis), find(WoAct)) {
        let (b, w) = (wo_dis.velocity_mse.mean, wo_act.velocity_mse.mean);
        out.push(Comparison {
            claim: "removing dis degrades velocity MSE less than removing act".into(),
            metric: "velocity_mse".into(),
            better: WoDis,
            worse: WoAct,
            better_mean: b,
            worse_mean: w,
            margin: 0.0,
            holds: b < w,
        });
    }
    out
}

impl AblationTable {
    /// Rows ranked by retrieval top1, failed rows last, then the claims.
    pub fn to_text(&self) -> String {
        let mut order: Vec<&AblationRow> = self.rows.iter().collect();
        order.sort_by(|a, b| {
            (a.error.is_some(), -a.retrieval_top1.mean)
                .partial_cmp(&(b.error.is_some(), -b.retrieval_top1.mean))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut s = String::new();
        let pm = |r: &RowStats, p: usize| format!("{:.p$} ± {:.p$}", r.mean, r.std);
        let _ = writeln!(s, "{:<4} {:<12} {:>22} {:>22} {:>20} {:>18} {:>6}", "rank", "row", "rec_mse", "velocity_mse", "retrieval_top1", "perplexity", "seeds");
        for (i, r) in order.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<4} {:<12} {:>22} {:>22} {:>20} {:>18} {:>6}",
                i + 1,
                r.kind.name(),
                pm(&r.rec_mse, 6),
                pm(&r.velocity_mse, 6),
                pm(&r.retrieval_top1, 4),
                pm(&r.perplexity, 2),
                r.seeds.len()
            );
            if let Some(e) = &r.error {
                let _ = writeln!(s, "     failed: {e}");
            }
        }
        if !self.comparisons.is_empty() {
            s.push('\n');
        }
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "[{}] {} ({}: {:.6} vs {:.6})",
                if c.holds { "PASS" } else { "FAIL" },
                c.claim,
                c.metric,
                c.better_mean,
                c.worse_mean
            );
        }
        s
    }

    /// Writes `ablation.json` and `ablation.txt` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("ablation.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("ablation.txt");
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("ablation.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::integrity(&path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(kind: AblationRowKind, vel: f64, top1: f64) -> AblationRow {
        let one = |v| RowStats::of(&[v, v, v]);
        AblationRow {
            kind,
            seeds: vec![1, 2, 3],
            per_seed: vec![],
            rec_mse: one(0.1),
            velocity_mse: one(vel),
            retrieval_top1: one(top1),
            perplexity: one(10.0),
            error: None,
        }
    }

    #[test]
    fn names_parse_back() {
        for k in AblationRowKind::ALL {
            assert_eq!(AblationRowKind::parse(k.name()), Some(k));
            assert_eq!(AblationRowKind::parse(k.slug()), Some(k));
        }
        assert_eq!(AblationRowKind::parse("wo_dis_act"), Some(AblationRowKind::WoDisAct));
        assert_eq!(AblationRowKind::parse("nope"), None);
    }

    #[test]
    fn row_toggles() {
        let mut l = LossConfig::default();
        AblationRowKind::WoDisAct.apply(&mut l);
        assert!(l.rec && !l.dis && !l.act && l.align);
    }

    #[test]
    fn stats_use_sample_std() {
        let s = RowStats::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 3));
        assert_eq!(RowStats::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn margins_are_relative() {
        use AblationRowKind::*;
        let rows = [row(Full, 0.9, 0.22), row(WoAlign, 1.0, 0.20), row(WoAct, 1.0, 0.2), row(WoDis, 0.95, 0.2)];
        let c = comparisons(&rows);
        assert_eq!(c.len(), 3);
        assert!(c[0].holds, "10% above");
        assert!(c[1].holds);
        assert!(c[2].holds);
        let rows = [row(Full, 0.95, 0.209), row(WoAlign, 1.0, 0.20), row(WoAct, 1.0, 0.2)];
        let c = comparisons(&rows);
        assert!(!c[0].holds && !c[1].holds);
    }

    #[test]
    fn single_row_has_no_comparisons() {
        assert!(comparisons(&[row(AblationRowKind::Full, 1.0, 0.1)]).is_empty());
    }
}
