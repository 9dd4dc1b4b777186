//! Multinomial No-U-Turn sampler with a diagonal metric, plus the warmup
//! machinery (dual-averaging step size, windowed variance estimation).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::stats::{log_sum_exp, std_normal};

/// A differentiable log density on `R^d`.
pub trait LogDensity {
    fn dim(&self) -> usize;
    /// Returns `log p(q)` and writes its gradient; `-inf` marks an invalid point.
    fn logp_grad(&mut self, q: &[f64], grad: &mut [f64]) -> f64;
}

/// Position with cached log density and gradient.
#[derive(Debug, Clone)]
pub struct State {
    pub q: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl State {
    pub fn new<T: LogDensity + ?Sized>(target: &mut T, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let logp = target.logp_grad(&q, &mut grad);
        Self { q, grad, logp }
    }
}

/// Per-transition diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    pub accept_prob: f64,
    pub divergent: bool,
    pub depth: usize,
    pub n_leapfrog: usize,
    pub energy: f64,
    pub step_size: f64,
}

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

/// NUTS transition kernel.
#[derive(Debug, Clone)]
pub struct Nuts {
    pub step_size: f64,
    /// Diagonal of the inverse metric.
    pub inv_metric: Vec<f64>,
    pub max_depth: usize,
    pub max_delta_h: f64,
}

struct Tree<'a, T: ?Sized, R: ?Sized> {
    target: &'a mut T,
    rng: &'a mut R,
    inv_metric: &'a [f64],
    eps: f64,
    h0: f64,
    max_delta_h: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

/// Ends and summaries of a subtree.
struct Subtree {
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    rho: Vec<f64>,
    log_sum_weight: f64,
    propose: Point,
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl<T: LogDensity + ?Sized, R: Rng + ?Sized> Tree<'_, T, R> {
    fn hamiltonian(&self, z: &Point) -> f64 {
        let kinetic: f64 = z.p.iter().zip(self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>() * 0.5;
        let h = -z.logp + kinetic;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn sharp(&self, z: &Point) -> Vec<f64> {
        z.p.iter().zip(self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn leapfrog(&mut self, z: &mut Point) {
        let half = 0.5 * self.eps;
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += half * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(self.inv_metric) {
            *q += self.eps * m * p;
        }
        z.logp = self.target.logp_grad(&z.q, &mut z.grad);
        if z.logp.is_finite() {
            for (p, g) in z.p.iter_mut().zip(&z.grad) {
                *p += half * g;
            }
        }
    }

    /// Builds a subtree of `2^depth` leapfrog steps continuing from `z`.
    /// Returns `None` if the subtree diverged or made a U-turn.
    fn build(&mut self, depth: usize, z: &mut Point) -> Option<Subtree> {
        if depth == 0 {
            self.leapfrog(z);
            self.n_leapfrog += 1;
            let h = if z.logp.is_finite() { self.hamiltonian(z) } else { f64::INFINITY };
            if h - self.h0 > self.max_delta_h {
                self.divergent = true;
            }
            let log_w = self.h0 - h;
            self.sum_metro_prob += if log_w > 0.0 { 1.0 } else { log_w.exp() };
            if self.divergent {
                return None;
            }
            let sharp = self.sharp(z);
            return Some(Subtree {
                p_sharp_beg: sharp.clone(),
                p_sharp_end: sharp,
                p_beg: z.p.clone(),
                p_end: z.p.clone(),
                rho: z.p.clone(),
                log_sum_weight: log_w,
                propose: z.clone(),
            });
        }
        let init = self.build(depth - 1, z)?;
        let fin = self.build(depth - 1, z)?;
        let log_sum_weight = log_sum_exp(init.log_sum_weight, fin.log_sum_weight);
        let propose = if fin.log_sum_weight > log_sum_weight {
            fin.propose
        } else {
            let accept = (fin.log_sum_weight - log_sum_weight).exp();
            if self.rng.random::<f64>() < accept {
                fin.propose
            } else {
                init.propose
            }
        };
        let rho = add(&init.rho, &fin.rho);
        let mut ok = criterion(&init.p_sharp_beg, &fin.p_sharp_end, &rho);
        ok &= criterion(&init.p_sharp_beg, &fin.p_sharp_beg, &add(&init.rho, &fin.p_beg));
        ok &= criterion(&init.p_sharp_end, &fin.p_sharp_end, &add(&fin.rho, &init.p_end));
        if !ok {
            return None;
        }
        Some(Subtree {
            p_sharp_beg: init.p_sharp_beg,
            p_sharp_end: fin.p_sharp_end,
            p_beg: init.p_beg,
            p_end: fin.p_end,
            rho,
            log_sum_weight,
            propose,
        })
    }
}

impl Nuts {
    pub fn new(dim: usize, step_size: f64, max_depth: usize) -> Self {
        Self { step_size, inv_metric: vec![1.0; dim], max_depth, max_delta_h: 1000.0 }
    }

    fn sample_momentum<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.inv_metric.iter().map(|m| std_normal(rng) / m.sqrt()).collect()
    }

    /// One NUTS transition from `state`, which is updated in place.
    pub fn transition<T: LogDensity + ?Sized, R: Rng + ?Sized>(
        &self,
        target: &mut T,
        state: &mut State,
        rng: &mut R,
    ) -> TransitionStats {
        let p0 = self.sample_momentum(rng);
        let start = Point { q: state.q.clone(), p: p0, grad: state.grad.clone(), logp: state.logp };
        let mut tree = Tree {
            target,
            rng,
            inv_metric: &self.inv_metric,
            eps: self.step_size,
            h0: 0.0,
            max_delta_h: self.max_delta_h,
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
            divergent: false,
        };
        tree.h0 = tree.hamiltonian(&start);
        let sharp0 = tree.sharp(&start);

        let mut z_fwd = start.clone();
        let mut z_bck = start.clone();
        let mut sample = start.clone();
        // Momenta and sharp momenta at the outer and inner ends of the
        // forward and backward halves of the trajectory.
        let (mut p_fwd_fwd, mut p_bck_bck) = (start.p.clone(), start.p.clone());
        let (mut ps_fwd_fwd, mut ps_bck_bck) = (sharp0.clone(), sharp0);
        let (mut p_fwd_bck, mut p_bck_fwd, mut ps_fwd_bck, mut ps_bck_fwd): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
        let mut rho = start.p.clone();
        let mut log_sum_weight = 0.0;
        let mut depth = 0;

        while depth < self.max_depth {
            let forward = tree.rng.random::<f64>() > 0.5;
            let (rho_fwd, rho_bck, sub);
            if forward {
                rho_bck = rho.clone();
                p_bck_fwd = p_fwd_fwd.clone();
                ps_bck_fwd = ps_fwd_fwd.clone();
                tree.eps = self.step_size;
                let result = tree.build(depth, &mut z_fwd);
                let Some(s) = result else { break };
                p_fwd_bck = s.p_beg.clone();
                p_fwd_fwd = s.p_end.clone();
                ps_fwd_bck = s.p_sharp_beg.clone();
                ps_fwd_fwd = s.p_sharp_end.clone();
                rho_fwd = s.rho.clone();
                sub = s;
            } else {
                rho_fwd = rho.clone();
                p_fwd_bck = p_bck_bck.clone();
                ps_fwd_bck = ps_bck_bck.clone();
                tree.eps = -self.step_size;
                let result = tree.build(depth, &mut z_bck);
                let Some(s) = result else { break };
                p_bck_fwd = s.p_beg.clone();
                p_bck_bck = s.p_end.clone();
                ps_bck_fwd = s.p_sharp_beg.clone();
                ps_bck_bck = s.p_sharp_end.clone();
                rho_bck = s.rho.clone();
                sub = s;
            }
            depth += 1;
            if sub.log_sum_weight > log_sum_weight {
                sample = sub.propose;
            } else {
                let accept = (sub.log_sum_weight - log_sum_weight).exp();
                if tree.rng.random::<f64>() < accept {
                    sample = sub.propose;
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, sub.log_sum_weight);
            rho = add(&rho_bck, &rho_fwd);
            let mut ok = criterion(&ps_bck_bck, &ps_fwd_fwd, &rho);
            ok &= criterion(&ps_bck_bck, &ps_fwd_bck, &add(&rho_bck, &p_fwd_bck));
            ok &= criterion(&ps_bck_fwd, &ps_fwd_fwd, &add(&rho_fwd, &p_bck_fwd));
            if !ok {
                break;
            }
        }
        let n_leapfrog = tree.n_leapfrog;
        let accept_prob = if n_leapfrog > 0 { tree.sum_metro_prob / n_leapfrog as f64 } else { 0.0 };
        let energy = tree.hamiltonian(&sample);
        let divergent = tree.divergent;
        state.q = sample.q;
        state.grad = sample.grad;
        state.logp = sample.logp;
        TransitionStats { accept_prob, divergent, depth, n_leapfrog, energy, step_size: self.step_size }
    }

    /// Heuristic initial step size: doubles or halves until the one-step
    /// acceptance crosses 0.8.
    pub fn init_step_size<T: LogDensity + ?Sized, R: Rng + ?Sized>(
        &mut self,
        target: &mut T,
        state: &State,
        rng: &mut R,
    ) {
        if !(self.step_size > 0.0 && self.step_size <= 1e7) || !state.logp.is_finite() {
            return;
        }
        let threshold = 0.8f64.ln();
        let delta = self.one_step_delta(target, state, rng);
        let up = delta > threshold;
        for _ in 0..100 {
            let delta = self.one_step_delta(target, state, rng);
            if (up && !(delta > threshold)) || (!up && !(delta < threshold)) {
                break;
            }
            if up {
                self.step_size *= 2.0;
            } else {
                self.step_size *= 0.5;
            }
            if self.step_size > 1e7 || self.step_size < 1e-12 {
                break;
            }
        }
    }

    /// Energy change `H0 − H` of a single leapfrog step with fresh momentum.
    fn one_step_delta<T: LogDensity + ?Sized, R: Rng + ?Sized>(
        &self,
        target: &mut T,
        state: &State,
        rng: &mut R,
    ) -> f64 {
        let p = self.sample_momentum(rng);
        let mut z = Point { q: state.q.clone(), p, grad: state.grad.clone(), logp: state.logp };
        let mut tree = Tree {
            target,
            rng,
            inv_metric: &self.inv_metric,
            eps: self.step_size,
            h0: 0.0,
            max_delta_h: self.max_delta_h,
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
            divergent: false,
        };
        let h0 = tree.hamiltonian(&z);
        tree.leapfrog(&mut z);
        let h = if z.logp.is_finite() { tree.hamiltonian(&z) } else { f64::INFINITY };
        h0 - h
    }
}

/// Nesterov dual averaging of `log ε`.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    pub target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
}

impl DualAveraging {
    pub fn new(target: f64, step_size: f64) -> Self {
        let mut da = Self { target, gamma: 0.05, t0: 10.0, kappa: 0.75, mu: 0.0, s_bar: 0.0, x_bar: 0.0, counter: 0.0 };
        da.restart(step_size);
        da
    }

    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.s_bar = 0.0;
        self.x_bar = 0.0;
        self.counter = 0.0;
    }

    /// Updates with an observed acceptance statistic; returns the next step size.
    pub fn learn(&mut self, accept_prob: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_prob.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    /// Step size to use after adaptation ends.
    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Running mean and variance per coordinate.
#[derive(Debug, Clone)]
pub struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Sample variance shrunk towards `1e-3`, as in common NUTS warmups.
    pub fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Warmup phases: an initial step-size-only buffer (15%), metric
/// estimation windows of doubling length up to 75% of warmup, and a final
/// step-size-only stretch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarmupSchedule {
    pub windows: Vec<(usize, usize)>,
}

impl WarmupSchedule {
    pub fn new(n_warmup: usize) -> Self {
        let init_end = (n_warmup * 15) / 100;
        let slow_end = (n_warmup * 75) / 100;
        let mut windows = Vec::new();
        if n_warmup >= 20 && slow_end > init_end {
            let mut size = ((n_warmup as f64 * 0.025).round() as usize).max(5);
            let mut start = init_end;
            while start < slow_end {
                let mut end = start + size;
                if end + 2 * size > slow_end {
                    end = slow_end;
                }
                windows.push((start, end));
                start = end;
                size *= 2;
            }
        }
        Self { windows }
    }

    /// Whether iteration `it` feeds the variance estimator.
    pub fn in_window(&self, it: usize) -> bool {
        self.windows.iter().any(|&(s, e)| it >= s && it < e)
    }

    /// Whether a window closes after iteration `it`.
    pub fn window_ends_at(&self, it: usize) -> bool {
        self.windows.iter().any(|&(_, e)| it + 1 == e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::stats::{mean, sample_var};

    struct Gaussian {
        sd: Vec<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.sd.len()
        }
        fn logp_grad(&mut self, q: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for ((g, &x), &s) in grad.iter_mut().zip(q).zip(&self.sd) {
                lp -= 0.5 * x * x / (s * s);
                *g = -x / (s * s);
            }
            lp
        }
    }

    #[test]
    fn schedule_covers_slow_phase() {
        let s = WarmupSchedule::new(1000);
        assert_eq!(s.windows.first().unwrap().0, 150);
        assert_eq!(s.windows.last().unwrap().1, 750);
        for w in s.windows.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        assert!(WarmupSchedule::new(10).windows.is_empty());
    }

    #[test]
    fn samples_anisotropic_gaussian() {
        let mut target = Gaussian { sd: vec![1.0, 10.0, 0.1] };
        let mut rng = stream(5, &[]);
        let mut nuts = Nuts::new(3, 0.1, 10);
        nuts.inv_metric = vec![1.0, 100.0, 0.01];
        let mut state = State::new(&mut target, vec![0.5, -1.0, 0.05]);
        nuts.init_step_size(&mut target, &state, &mut rng);
        let mut da = DualAveraging::new(0.8, nuts.step_size);
        for _ in 0..300 {
            let s = nuts.transition(&mut target, &mut state, &mut rng);
            nuts.step_size = da.learn(s.accept_prob);
        }
        nuts.step_size = da.final_step_size();
        let mut xs = vec![Vec::new(); 3];
        for _ in 0..4000 {
            let s = nuts.transition(&mut target, &mut state, &mut rng);
            assert!(!s.divergent);
            for (v, x) in xs.iter_mut().zip(&state.q) {
                v.push(*x);
            }
        }
        for (v, sd) in xs.iter().zip([1.0, 10.0, 0.1]) {
            assert!(mean(v).abs() < 0.15 * sd, "mean {}", mean(v));
            let ratio = sample_var(v).sqrt() / sd;
            assert!((ratio - 1.0).abs() < 0.1, "sd ratio {ratio}");
        }
    }

    #[test]
    fn welford_matches_two_pass() {
        let data = [[1.0, 2.0], [3.0, -1.0], [4.5, 0.0], [0.2, 0.3]];
        let mut w = Welford::new(2);
        for d in &data {
            w.add(d);
        }
        let col: Vec<f64> = data.iter().map(|d| d[0]).collect();
        let n = 4.0;
        let expected = (n / (n + 5.0)) * sample_var(&col) + 1e-3 * 5.0 / (n + 5.0);
        assert!((w.regularized_variance()[0] - expected).abs() < 1e-12);
    }
}
