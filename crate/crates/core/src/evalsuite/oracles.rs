//! Plain-loop reference computations used to cross-check the implementation.
//! Nothing here calls into the rest of the crate.

/// Exhaustive nearest-code scan over row-major `features` (`n × d`) and
/// `codes` (`k × d`). Strict `<` keeps the first of equal distances.
pub fn nearest_code_scan(features: &[f64], codes: &[f64], d: usize) -> Vec<usize> {
    let k = codes.len() / d;
    let mut out = Vec::with_capacity(features.len() / d);
    let mut i = 0;
    while i + d <= features.len() {
        let mut best = usize::MAX;
        let mut best_dist = f64::INFINITY;
        for j in 0..k {
            let mut s = 0.0;
            for t in 0..d {
                let diff = features[i + t] - codes[j * d + t];
                s += diff * diff;
            }
            if s < best_dist {
                best_dist = s;
                best = j;
            }
        }
        out.push(best);
        i += d;
    }
    out
}

/// `−ln softmax(logits)[target]`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &l in logits {
        if l > m {
            m = l;
        }
    }
    let mut z = 0.0;
    for &l in logits {
        z += (l - m).exp();
    }
    -(logits[target] - m - z.ln())
}

pub fn mean_squared_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

/// InfoNCE over a row-major `t × k` similarity matrix: mean over rows of
/// `−ln(exp(s[i][pos_i]/ε) / Σ_j exp(s[i][j]/ε))`.
pub fn info_nce(sim: &[f64], k: usize, positives: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    for (i, &p) in positives.iter().enumerate() {
        let row: Vec<f64> = sim[i * k..(i + 1) * k].iter().map(|s| s / eps).collect();
        total += softmax_cross_entropy(&row, p);
    }
    total / positives.len() as f64
}

/// Geometric bound for a code tracking a fixed target under EMA decay γ:
/// `γⁿ · initial_distance`.
pub fn ema_envelope(gamma: f64, steps: u32, initial_distance: f64) -> f64 {
    let mut g = 1.0;
    for _ in 0..steps {
        g *= gamma;
    }
    g * initial_distance
}

/// `mean ± sigmas · sqrt(p(1−p)/trials)` for a binomial success rate `p`.
pub fn binomial_band(p: f64, trials: usize, sigmas: f64) -> (f64, f64) {
    let sd = (p * (1.0 - p) / trials as f64).sqrt();
    (p - sigmas * sd, p + sigmas * sd)
}

/// Central finite differences of `f` at `x`.
pub fn central_differences(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-30)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-30)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_toy() {
        let l = softmax_cross_entropy(&[0.5, -0.5], 0);
        assert!((l - 0.31326168751822286).abs() < 1e-15);
    }

    #[test]
    fn scan_prefers_first_tie() {
        assert_eq!(nearest_code_scan(&[0.0, 1.0], &[1.0, 0.0, -1.0, 0.0], 2), vec![0]);
    }
}
