//! Gauss–Legendre rules and the adaptive polar cubature used for the
//! brute-force Fisher integrals.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre order must be at least 1");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Controls for the adaptive polar cubature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationSpec {
    /// Relative tolerance per output component.
    pub rel_tol: f64,
    /// Integration disk radius in units of the local beam radius.
    pub radius_factor: f64,
    /// Node budget is `max_radial * max_angular` evaluations.
    pub max_radial: usize,
    pub max_angular: usize,
}

impl Default for IntegrationSpec {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            radius_factor: 10.0,
            max_radial: 4096,
            max_angular: 512,
        }
    }
}

impl IntegrationSpec {
    fn budget(&self) -> usize {
        self.max_radial.saturating_mul(self.max_angular)
    }
}

const LOW_ORDER: usize = 8;
const HIGH_ORDER: usize = 12;
const INITIAL_RADIAL: usize = 32;
const INITIAL_ANGULAR: usize = 16;

#[derive(Debug, Clone)]
struct Panel<const D: usize> {
    r: (f64, f64),
    phi: (f64, f64),
    high: [f64; D],
    low: [f64; D],
}

impl<const D: usize> Panel<D> {
    fn err(&self, c: usize) -> f64 {
        (self.high[c] - self.low[c]).abs()
    }
}

struct Rules {
    low: GaussLegendre,
    high: GaussLegendre,
}

fn product_rule<const D: usize, F>(
    rule: &GaussLegendre,
    r: (f64, f64),
    phi: (f64, f64),
    f: &F,
) -> [f64; D]
where
    F: Fn(f64, f64) -> [f64; D],
{
    let mut acc = [0.0; D];
    for (rr, wr) in rule.mapped(r.0, r.1) {
        for (pp, wp) in rule.mapped(phi.0, phi.1) {
            let v = f(rr, pp);
            let w = wr * wp * rr;
            for c in 0..D {
                acc[c] += w * v[c];
            }
        }
    }
    acc
}

fn eval_panel<const D: usize, F>(rules: &Rules, r: (f64, f64), phi: (f64, f64), f: &F) -> Panel<D>
where
    F: Fn(f64, f64) -> [f64; D],
{
    Panel {
        r,
        phi,
        high: product_rule(&rules.high, r, phi, f),
        low: product_rule(&rules.low, r, phi, f),
    }
}

/// Integrates `f(r, φ)` over the disk of the given radius (the `r dr dφ`
/// Jacobian is applied here). Panels are split into quarters until every
/// component's summed error estimate is below `rel_tol * scale[c]`, where
/// `scale` maps the running estimate to a per-component magnitude.
pub fn integrate_disk<const D: usize, F, S>(
    f: F,
    radius: f64,
    spec: &IntegrationSpec,
    scale: S,
) -> Result<[f64; D]>
where
    F: Fn(f64, f64) -> [f64; D],
    S: Fn(&[f64; D]) -> [f64; D],
{
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidInput(format!("integration radius {radius}")));
    }
    let rules = Rules {
        low: GaussLegendre::new(LOW_ORDER),
        high: GaussLegendre::new(HIGH_ORDER),
    };
    let per_panel = LOW_ORDER * LOW_ORDER + HIGH_ORDER * HIGH_ORDER;
    let dr = radius / INITIAL_RADIAL as f64;
    let dp = 2.0 * PI / INITIAL_ANGULAR as f64;
    let mut panels: Vec<Panel<D>> = Vec::with_capacity(INITIAL_RADIAL * INITIAL_ANGULAR);
    for i in 0..INITIAL_RADIAL {
        for j in 0..INITIAL_ANGULAR {
            let r = (i as f64 * dr, (i + 1) as f64 * dr);
            let phi = (j as f64 * dp, (j + 1) as f64 * dp);
            panels.push(eval_panel(&rules, r, phi, &f));
        }
    }
    let mut evaluations = panels.len() * per_panel;

    loop {
        let mut high = [0.0; D];
        let mut low = [0.0; D];
        let mut err = [0.0; D];
        for p in &panels {
            for c in 0..D {
                high[c] += p.high[c];
                low[c] += p.low[c];
                err[c] += p.err(c);
            }
        }
        let s = scale(&high);
        let limit: [f64; D] = std::array::from_fn(|c| spec.rel_tol * s[c].abs());
        if (0..D).all(|c| err[c] <= limit[c]) {
            return Ok(high);
        }
        if evaluations >= spec.budget() {
            return Err(Error::QuadratureNonConvergence {
                last: high.to_vec(),
                previous: low.to_vec(),
            });
        }

        let priority = |p: &Panel<D>| -> f64 {
            (0..D)
                .map(|c| {
                    if limit[c] > 0.0 {
                        p.err(c) / limit[c]
                    } else if p.err(c) > 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max)
        };
        let mut order: Vec<(usize, f64)> = panels
            .iter()
            .enumerate()
            .map(|(i, p)| (i, priority(p)))
            .collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let n_split = (panels.len() / 16).max(1);
        let mut split: Vec<usize> = order
            .iter()
            .take(n_split)
            .filter(|(_, pr)| *pr > 0.0)
            .map(|(i, _)| *i)
            .collect();
        if split.is_empty() {
            split.push(order[0].0);
        }
        split.sort_unstable();

        let mut next = Vec::with_capacity(panels.len() + 3 * split.len());
        let mut k = 0;
        for (i, p) in panels.into_iter().enumerate() {
            if k < split.len() && split[k] == i {
                k += 1;
                let rm = 0.5 * (p.r.0 + p.r.1);
                let pm = 0.5 * (p.phi.0 + p.phi.1);
                for r in [(p.r.0, rm), (rm, p.r.1)] {
                    for phi in [(p.phi.0, pm), (pm, p.phi.1)] {
                        next.push(eval_panel(&rules, r, phi, &f));
                    }
                }
                evaluations += 4 * per_panel;
            } else {
                next.push(p);
            }
        }
        panels = next;
    }
}

/// Tensor-product Gauss–Legendre nodes on the unit square `[-1/2, 1/2]²`,
/// weights summing to 1.
#[derive(Debug, Clone)]
pub struct SquareRule {
    pub offsets: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

impl SquareRule {
    pub fn new(order: usize, subdivisions: usize) -> Self {
        let gl = GaussLegendre::new(order);
        let s = subdivisions.max(1);
        let mut axis = Vec::with_capacity(order * s);
        for cell in 0..s {
            let a = -0.5 + cell as f64 / s as f64;
            let b = a + 1.0 / s as f64;
            axis.extend(gl.mapped(a, b));
        }
        let mut offsets = Vec::with_capacity(axis.len() * axis.len());
        let mut weights = Vec::with_capacity(axis.len() * axis.len());
        for &(y, wy) in &axis {
            for &(x, wx) in &axis {
                offsets.push((x, y));
                weights.push(wx * wy);
            }
        }
        Self { offsets, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}
