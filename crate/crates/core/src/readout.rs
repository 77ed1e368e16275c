//! Per-pixel readout likelihoods.
//!
//! Model A marginalizes the Poisson photon count against the calibrated
//! Gaussian readout density. Model B treats the readout itself as Poisson
//! with mean `μ + N_b`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use statrs::function::gamma::ln_gamma;

use crate::detector::NoiseParams;

/// Minimum Simpson node count for the readout integral.
const SIMPSON_MIN_NODES: usize = 129;
const SIMPSON_MAX_NODES: usize = 4097;
/// Readout integration half-width in units of the widest readout sigma.
const READOUT_SIGMAS: f64 = 10.0;
const MU_FLOOR: f64 = 1e-100;
/// Log-term drop below the running maximum at which window extension stops.
const EXTEND_CUTOFF: f64 = 40.0;
const GAMMA_GRID_MIN: f64 = 1e-6;
const GAMMA_POINTS_PER_DECADE: f64 = 24.0;

/// Photon counts summed for mean `mu`: `mu ± (8 sqrt(mu) + 20)`.
pub fn poisson_window(mu: f64) -> (u64, u64) {
    let half = 8.0 * mu.sqrt() + 20.0;
    let lo = (mu - half).floor().max(0.0) as u64;
    let hi = (mu + half).ceil() as u64;
    (lo, hi)
}

/// `ln Γ(x + 1)`: exact for `x < 100`, Stirling series above.
pub fn ln_factorial(x: f64) -> f64 {
    if x >= 100.0 {
        stirling_ln_factorial(x)
    } else {
        ln_gamma(x + 1.0)
    }
}

/// Stirling series for `ln x!`.
pub fn stirling_ln_factorial(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    x * x.ln() - x + 0.5 * (2.0 * PI * x).ln() + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}

/// Model B pixel log-likelihood `X ln μ̃ - μ̃ - ln Γ(X+1)` and its derivative
/// in `μ̃`. `x` must be non-negative.
pub fn poisson_log_prob(x: f64, mu: f64) -> (f64, f64) {
    let mu = mu.max(MU_FLOOR);
    (x * mu.ln() - mu - ln_factorial(x), x / mu - 1.0)
}

/// Model A likelihood evaluator with count tables and a tabulated
/// information attenuation factor.
#[derive(Debug, Clone)]
pub struct ReadoutModel {
    noise: NoiseParams,
    /// Per count: `1/(2v)`, `ln sqrt(2π v)`, `ln N!`.
    half_inv_var: Vec<f64>,
    ln_norm: Vec<f64>,
    ln_fact: Vec<f64>,
    max_mean: f64,
    gamma: OnceLock<GammaTable>,
}

#[derive(Debug, Clone)]
struct GammaTable {
    log_mu: Vec<f64>,
    log_gamma: Vec<f64>,
}

impl ReadoutModel {
    /// Tables cover means up to `max_mean`; larger means fall back to direct
    /// evaluation.
    pub fn new(noise: NoiseParams, max_mean: f64) -> Self {
        let max_mean = max_mean.max(1.0);
        let (_, hi) = poisson_window(max_mean);
        let top = (hi as f64 + 10.0 * noise.readout_variance(hi as f64).sqrt()) as usize + 1;
        let mut half_inv_var = Vec::with_capacity(top + 1);
        let mut ln_norm = Vec::with_capacity(top + 1);
        let mut ln_fact = Vec::with_capacity(top + 1);
        for n in 0..=top {
            let v = noise.readout_variance(n as f64);
            half_inv_var.push(0.5 / v);
            ln_norm.push(0.5 * (2.0 * PI * v).ln());
            ln_fact.push(ln_gamma(n as f64 + 1.0));
        }
        Self {
            noise,
            half_inv_var,
            ln_norm,
            ln_fact,
            max_mean,
            gamma: OnceLock::new(),
        }
    }

    /// Attenuation on a log grid, built on first use.
    fn gamma_table(&self) -> &GammaTable {
        self.gamma.get_or_init(|| {
            let lo = GAMMA_GRID_MIN.ln();
            let hi = self.max_mean.ln();
            let n = (((hi - lo) / std::f64::consts::LN_10 * GAMMA_POINTS_PER_DECADE).ceil() as usize).max(4);
            let step = (hi - lo) / n as f64;
            // two nodes past the top keep the interpolation stencil interior
            let log_mu: Vec<f64> = (0..=n + 2).map(|i| lo + step * i as f64).collect();
            let log_gamma = log_mu
                .iter()
                .map(|&l| self.attenuation_direct(l.exp()).ln())
                .collect();
            GammaTable { log_mu, log_gamma }
        })
    }

    pub fn noise(&self) -> &NoiseParams {
        &self.noise
    }

    fn half_inv_var(&self, n: u64) -> f64 {
        self.half_inv_var
            .get(n as usize)
            .copied()
            .unwrap_or_else(|| 0.5 / self.noise.readout_variance(n as f64))
    }

    fn ln_norm(&self, n: u64) -> f64 {
        self.ln_norm
            .get(n as usize)
            .copied()
            .unwrap_or_else(|| 0.5 * (2.0 * PI * self.noise.readout_variance(n as f64)).ln())
    }

    fn ln_fact(&self, n: u64) -> f64 {
        self.ln_fact
            .get(n as usize)
            .copied()
            .unwrap_or_else(|| ln_gamma(n as f64 + 1.0))
    }

    /// Model A pixel log-likelihood `ln Σ_N P(N|μ) R(X|N)` and its derivative
    /// in `μ`. With noise disabled this is the continuous Poisson likelihood.
    ///
    /// The sum runs over the Poisson window and is extended past either end
    /// while terms stay within `e^-40` of the largest, so readouts far from
    /// the mean are still summed where their mass is.
    pub fn log_prob(&self, x: f64, mu: f64) -> (f64, f64) {
        if !self.noise.enabled {
            return poisson_log_prob(x.max(0.0), mu);
        }
        let mu = mu.max(MU_FLOOR);
        let ln_mu = mu.ln();
        let (lo, hi) = poisson_window(mu);
        let d = x - self.noise.b_mean;
        let term = |n: u64| {
            let r = d - n as f64;
            n as f64 * ln_mu - mu - self.ln_fact(n) - r * r * self.half_inv_var(n) - self.ln_norm(n)
        };
        let mut terms: Vec<f64> = (lo..=hi).map(term).collect();
        let mut max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut hi = hi;
        loop {
            let t = term(hi + 1);
            if t < max - EXTEND_CUTOFF && t < *terms.last().expect("non-empty") {
                break;
            }
            hi += 1;
            max = max.max(t);
            terms.push(t);
        }
        let mut lo = lo;
        let mut front = Vec::new();
        while lo > 0 {
            let t = term(lo - 1);
            let edge = front.last().copied().unwrap_or(terms[0]);
            if t < max - EXTEND_CUTOFF && t < edge {
                break;
            }
            lo -= 1;
            max = max.max(t);
            front.push(t);
        }
        let mut s = 0.0;
        let mut sn = 0.0;
        for (i, &t) in front.iter().rev().chain(terms.iter()).enumerate() {
            let e = (t - max).exp();
            s += e;
            sn += e * (lo + i as u64) as f64;
        }
        (max + s.ln(), sn / (s * mu) - 1.0)
    }

    /// Information attenuation `γ(μ)`: the per-pixel Fisher information of
    /// the noisy readout divided by the noiseless `1/μ`.
    pub fn attenuation(&self, mu: f64) -> f64 {
        if !self.noise.enabled {
            return 1.0;
        }
        if !(mu > 0.0) {
            return 0.0;
        }
        if mu > self.max_mean {
            return self.attenuation_direct(mu);
        }
        let table = self.gamma_table();
        let g = &table.log_mu;
        let l = mu.ln();
        if l < g[0] {
            // γ is linear in μ near zero
            return table.log_gamma[0].exp() * mu / GAMMA_GRID_MIN;
        }
        let h = g[1] - g[0];
        let pos = ((l - g[0]) / h).min((g.len() - 1) as f64);
        let i = (pos.floor() as usize).min(g.len() - 2);
        let t = pos - i as f64;
        let y = |k: isize| {
            let k = k.clamp(0, g.len() as isize - 1) as usize;
            table.log_gamma[k]
        };
        let i = i as isize;
        let (p0, p1, p2, p3) = (y(i - 1), y(i), y(i + 1), y(i + 2));
        // Catmull-Rom in (ln μ, ln γ)
        let v = p1
            + 0.5
                * t
                * (p2 - p0 + t * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + t * (3.0 * (p1 - p2) + p3 - p0)));
        v.exp()
    }

    /// `γ(μ)` by composite Simpson over the readout range.
    pub fn attenuation_direct(&self, mu: f64) -> f64 {
        if !self.noise.enabled {
            return 1.0;
        }
        if !(mu > 0.0) {
            return 0.0;
        }
        let (lo, hi) = poisson_window(mu);
        let ln_mu = mu.ln();
        let counts: Vec<(f64, f64)> = (lo..=hi)
            .map(|n| {
                let nf = n as f64;
                ((nf * ln_mu - mu - self.ln_fact(n)).exp(), nf)
            })
            .collect();
        let s_max = self.noise.readout_variance(hi as f64).sqrt();
        let s_min = self.noise.readout_variance(lo as f64).sqrt().max(1e-3);
        let a = lo as f64 + self.noise.b_mean - READOUT_SIGMAS * s_max;
        let b = hi as f64 + self.noise.b_mean + READOUT_SIGMAS * s_max;
        let mut nodes = ((b - a) / (0.25 * s_min)).ceil() as usize;
        nodes = nodes.clamp(SIMPSON_MIN_NODES, SIMPSON_MAX_NODES) | 1;
        let step = (b - a) / (nodes - 1) as f64;
        let mut acc = 0.0;
        for i in 0..nodes {
            let x = a + step * i as f64;
            let mut p = 0.0;
            let mut q = 0.0;
            for (n, &(pn, nf)) in (lo..=hi).zip(&counts) {
                let r = x - nf - self.noise.b_mean;
                let dens = (-r * r * self.half_inv_var(n) - self.ln_norm(n)).exp() * pn;
                p += dens;
                q += dens * (nf - mu);
            }
            let f = if p > 0.0 { q * q / p } else { 0.0 };
            let wt = if i == 0 || i == nodes - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += wt * f;
        }
        acc * step / 3.0 / mu
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn stirling_close_to_exact_above_threshold() {
        for x in [100.0, 100.5, 250.0, 1e4, 3.3e5] {
            let d = (stirling_ln_factorial(x) - ln_gamma(x + 1.0)).abs();
            assert!(d < 1e-3, "{x}: {d}");
        }
    }

    #[test]
    fn model_a_reduces_to_poisson_without_noise() {
        let m = ReadoutModel::new(NoiseParams::disabled(), 100.0);
        let (l, d) = m.log_prob(7.0, 5.0);
        assert_relative_eq!(l, 7.0 * 5f64.ln() - 5.0 - ln_gamma(8.0), max_relative = 1e-14);
        assert_relative_eq!(d, 7.0 / 5.0 - 1.0, max_relative = 1e-14);
        assert_eq!(m.attenuation(3.0), 1.0);
    }

    #[test]
    fn model_a_derivative_matches_finite_differences() {
        let m = ReadoutModel::new(NoiseParams::default(), 200.0);
        for (x, mu) in [(520.0, 3.0), (640.0, 120.0), (500.0, 0.2), (900.0, 150.0), (515.0, 1e-4)] {
            let (_, d) = m.log_prob(x, mu);
            let h = 1e-5 * mu.max(1e-2);
            let fd = (m.log_prob(x, mu + h).0 - m.log_prob(x, mu - h).0) / (2.0 * h);
            assert_relative_eq!(d, fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn model_a_density_is_normalized() {
        let noise = NoiseParams::default();
        let m = ReadoutModel::new(noise, 100.0);
        for mu in [0.5, 20.0, 90.0] {
            let (lo, hi) = poisson_window(mu);
            let s = noise.readout_variance(hi as f64).sqrt();
            let gl = crate::quadrature::GaussLegendre::new(48);
            let a = lo as f64 + noise.b_mean - 10.0 * s;
            let b = hi as f64 + noise.b_mean + 10.0 * s;
            let panels = 64;
            let h = (b - a) / panels as f64;
            let total: f64 = (0..panels)
                .map(|i| gl.integrate(a + i as f64 * h, a + (i + 1) as f64 * h, |x| m.log_prob(x, mu).0.exp()))
                .sum();
            assert!((total - 1.0).abs() < 1e-10, "{mu}: {total}");
        }
    }

    #[test]
    fn attenuation_bounds_and_table() {
        let m = ReadoutModel::new(NoiseParams::default(), 300.0);
        for mu in [1e-4, 1e-2, 0.3, 1.0, 7.0, 40.0, 150.0, 290.0] {
            let direct = m.attenuation_direct(mu);
            let table = m.attenuation(mu);
            assert!(direct > 0.0 && direct < 1.0, "{mu}: {direct}");
            assert_relative_eq!(table, direct, max_relative = 1e-4);
        }
        // beyond the table the direct path is used
        assert_eq!(m.attenuation(500.0), m.attenuation_direct(500.0));
        // near zero the factor is linear in the mean
        let r = m.attenuation(2e-7) / m.attenuation(1e-7);
        assert_relative_eq!(r, 2.0, max_relative = 1e-3);
    }

    #[test]
    fn attenuation_matches_brute_force_expectation() {
        // Fisher information of the readout density by quadrature of the
        // squared log-density derivative.
        let noise = NoiseParams::default();
        let m = ReadoutModel::new(noise, 100.0);
        let mu = 25.0;
        let (lo, hi) = poisson_window(mu);
        let s = noise.readout_variance(hi as f64).sqrt();
        let a = lo as f64 + noise.b_mean - 10.0 * s;
        let b = hi as f64 + noise.b_mean + 10.0 * s;
        let gl = crate::quadrature::GaussLegendre::new(48);
        let panels = 64;
        let h = (b - a) / panels as f64;
        let info: f64 = (0..panels)
            .map(|i| {
                gl.integrate(a + i as f64 * h, a + (i + 1) as f64 * h, |x| {
                    let (l, d) = m.log_prob(x, mu);
                    l.exp() * d * d
                })
            })
            .sum();
        assert_relative_eq!(info * mu, m.attenuation_direct(mu), max_relative = 1e-8);
    }
}
