//! Small statistics toolbox: exact binomial tails, mean/std aggregation,
//! and the report formatting conventions used across the lab.

/// Natural log of the gamma function (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + (i + 1) as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// One-sided exact binomial tail: P[X >= k] for X ~ Bin(n, p).
pub fn binom_tail_geq(n: u64, k: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for i in k..=n {
        let ln_term = ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln();
        sum += ln_term.exp();
    }
    sum.min(1.0)
}

/// One-sided exact binomial tail: P[X <= k].
pub fn binom_tail_leq(n: u64, k: u64, p: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    1.0 - binom_tail_geq(n, k + 1, p)
}

/// Exact two-sided acceptance check: is `correct` inside the central
/// `1 - alpha` region of Bin(n, p)? Used for negative controls.
pub fn within_binomial_ci(correct: u64, n: u64, p: f64, alpha: f64) -> bool {
    let upper = binom_tail_geq(n, correct, p);
    let lower = binom_tail_leq(n, correct, p);
    upper > alpha / 2.0 && lower > alpha / 2.0
}

/// Mean and population standard deviation (divide by n, not n-1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "mean_std of empty slice");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Accuracy presentation convention: percent with one decimal, e.g. "44.5 ± 0.8".
pub fn format_mean_std_pct(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.1}", mean * 100.0, std * 100.0)
}

/// Chance rate for m balanced classes, e.g. "33.3%" for m = 3.
pub fn format_chance_rate(m: usize) -> String {
    format!("{:.1}%", 100.0 / m as f64)
}
