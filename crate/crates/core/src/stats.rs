//! Small numeric and distributional helpers.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

/// Compensated (Neumaier) summation in iteration order.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with the n-1 denominator.
pub fn sample_var(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0)
}

/// Linear-interpolation quantile (type 7) of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior mean and equal-tail interval at `level` (e.g. 0.95).
pub fn summarize(values: &mut [f64], level: f64) -> (f64, f64, f64) {
    let m = mean(values);
    values.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0;
    (m, quantile_sorted(values, tail), quantile_sorted(values, 1.0 - tail))
}

/// One-sample Kolmogorov-Smirnov statistic against a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            let lo = f - i as f64 / n;
            let hi = (i as f64 + 1.0) / n - f;
            lo.max(hi)
        })
        .fold(0.0, f64::max)
}

/// Log of a Gamma(shape, 1) draw; stays finite for tiny shapes where the
/// draw itself underflows.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let g = Gamma::new(shape + 1.0, 1.0).expect("valid gamma shape").sample(rng);
        let u: f64 = rng.random::<f64>();
        // Gamma(a) = Gamma(a+1) * U^(1/a)
        g.ln() + u.max(f64::MIN_POSITIVE).ln() / shape
    } else {
        Gamma::new(shape, 1.0).expect("valid gamma shape").sample(rng).ln()
    }
}

/// Gamma draw with the shape-rate parameterization.
pub fn sample_gamma_rate<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    (sample_log_gamma(shape, rng) - rate.ln()).exp()
}

/// Inverse-gamma draw with shape `shape` and scale (rate of the
/// reciprocal) `scale`.
pub fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    (scale.ln() - sample_log_gamma(shape, rng)).exp()
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// log density of Gamma(shape, rate) at x.
pub fn gamma_log_density(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// log density of InvGamma(shape, scale) at x.
pub fn inv_gamma_log_density(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}
