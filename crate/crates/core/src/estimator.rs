//! Maximum-likelihood localization by Fisher scoring.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::beam::{BeamGeometry, ModeSpec, Pose};
use crate::detector::{self, DetectorModel, Frame, PixelMeanMap};
use crate::error::{Error, Result};
use crate::fisher::{self, FisherMatrix, Parameterization, PixelModel, PixelatedSetup};
use crate::readout::{poisson_log_prob, ReadoutModel};

/// Statistical model of the readouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodModel {
    /// Calibrated Poisson-Gaussian readout, photon count known.
    #[default]
    A,
    /// Poisson readout with photon count and background as nuisance parameters.
    B,
}

impl LikelihoodModel {
    fn pixel_model(self) -> PixelModel {
        match self {
            LikelihoodModel::A => PixelModel::A,
            LikelihoodModel::B => PixelModel::B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorOptions {
    pub model: LikelihoodModel,
    pub parameterization: Parameterization,
    /// Convergence threshold on the scaled step (lengths / w0, counts / N).
    pub tol: f64,
    pub max_iter: usize,
    /// Levenberg-style damping added to the Fisher diagonal, relative.
    pub damping: f64,
    /// Photon count per frame: fixed for model A, the scale for model B.
    pub photons: f64,
    /// Sign of the focal distance picked by the initializer for single modes.
    pub branch: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            model: LikelihoodModel::A,
            parameterization: Parameterization::Xyz,
            tol: 1e-6,
            max_iter: 100,
            damping: 0.0,
            photons: 1e4,
            branch: 1.0,
        }
    }
}

impl EstimatorOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || !(self.damping >= 0.0) || !(self.photons > 0.0) {
            return Err(Error::InvalidInput(format!("estimator options {self:?}")));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        match self.model {
            LikelihoodModel::A => 3,
            LikelihoodModel::B => 5,
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.parameterization.labels(self.model.pixel_model())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub loglik: f64,
    pub scaled_step: f64,
    pub halvings: usize,
    pub singular: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub labels: Vec<String>,
    pub theta_hat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_loglik: f64,
    pub fisher_at_solution: FisherMatrix,
    pub diagnostics: Vec<StepRecord>,
}

/// A model bound to a mode, geometry, detector and options. Holds the
/// readout tables so many frames can share them.
#[derive(Debug, Clone)]
pub struct Estimator {
    spec: ModeSpec,
    geom: BeamGeometry,
    detector: DetectorModel,
    opts: EstimatorOptions,
    readout: ReadoutModel,
}

const MAX_HALVINGS: usize = 10;
const MAX_SINGULAR: usize = 3;
const SINGULAR_RCOND: f64 = 1e-12;

impl Estimator {
    pub fn new(spec: &ModeSpec, geom: &BeamGeometry, detector: &DetectorModel, opts: &EstimatorOptions) -> Result<Self> {
        opts.validate()?;
        if opts.parameterization == Parameterization::Xyw && !spec.is_single_mode() {
            return Err(Error::InvalidInput(
                "width parameterization needs a single LG mode".into(),
            ));
        }
        Ok(Self {
            spec: spec.clone(),
            geom: *geom,
            detector: *detector,
            opts: *opts,
            readout: ReadoutModel::new(detector.noise, opts.photons),
        })
    }

    pub fn options(&self) -> &EstimatorOptions {
        &self.opts
    }

    pub fn spec(&self) -> &ModeSpec {
        &self.spec
    }

    pub fn geometry(&self) -> &BeamGeometry {
        &self.geom
    }

    pub fn detector(&self) -> &DetectorModel {
        &self.detector
    }

    /// Single modes are even in `z`, so an xyz fit stays on its initial side.
    fn keeps_branch(&self, init: &[f64], cand: &[f64]) -> bool {
        !(self.opts.parameterization == Parameterization::Xyz && self.spec.is_single_mode())
            || init[2] == 0.0
            || cand[2] * init[2] > 0.0
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.opts.n_params() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("parameter vector {theta:?}")));
        }
        if self.opts.parameterization == Parameterization::Xyw && !(theta[2] > 0.0) {
            return Err(Error::InvalidInput(format!("beam radius {}", theta[2])));
        }
        if self.opts.model == LikelihoodModel::B && !(theta[3] > 0.0 && theta[4] >= 0.0) {
            return Err(Error::InvalidInput(format!("counts N={} N_b={}", theta[3], theta[4])));
        }
        Ok(())
    }

    fn photons(&self, theta: &[f64]) -> f64 {
        match self.opts.model {
            LikelihoodModel::A => self.opts.photons,
            LikelihoodModel::B => theta[3],
        }
    }

    /// Signal means (without background) and their gradient over the three
    /// position parameters.
    pub fn signal_means(&self, theta: &[f64], with_gradient: bool) -> Result<PixelMeanMap> {
        self.check_theta(theta)?;
        let n = self.photons(theta);
        match self.opts.parameterization {
            Parameterization::Xyz => Ok(detector::expected_pixel_means(
                &self.spec,
                &self.geom,
                &Pose::new(theta[0], theta[1], theta[2]),
                &self.detector,
                n,
                with_gradient,
            )),
            Parameterization::Xyw => detector::expected_pixel_means_width(
                &self.spec,
                theta[0],
                theta[1],
                theta[2],
                &self.detector,
                n,
                with_gradient,
            ),
        }
    }

    fn background(&self, theta: &[f64]) -> f64 {
        match self.opts.model {
            LikelihoodModel::A => 0.0,
            LikelihoodModel::B => theta[4],
        }
    }

    fn pixel_terms(&self, frame: &Frame, map: &PixelMeanMap, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let bg = self.background(theta);
        let mut ll = 0.0;
        let mut dmu = Vec::with_capacity(map.values.len());
        for (k, (&x, &mu)) in frame.readouts.iter().zip(&map.values).enumerate() {
            let (l, d) = match self.opts.model {
                LikelihoodModel::A => self.readout.log_prob(x, mu),
                LikelihoodModel::B => {
                    if x < 0.0 {
                        return Err(Error::PoissonSupport { pixel: k, value: x });
                    }
                    poisson_log_prob(x, mu + bg)
                }
            };
            ll += l;
            dmu.push(d);
        }
        Ok((ll, dmu))
    }

    pub fn log_likelihood(&self, frame: &Frame, theta: &[f64]) -> Result<f64> {
        frame.check_matches(&self.detector)?;
        let map = self.signal_means(theta, false)?;
        Ok(self.pixel_terms(frame, &map, theta)?.0)
    }

    fn score_from(&self, map: &PixelMeanMap, dmu: &[f64], theta: &[f64]) -> Vec<f64> {
        let n = self.opts.n_params();
        let mut s = vec![0.0; n];
        for (k, &d) in dmu.iter().enumerate() {
            let g = map.grad(k);
            for c in 0..3 {
                s[c] += d * g[c];
            }
            if n == 5 {
                s[3] += d * map.values[k] / theta[3];
                s[4] += d;
            }
        }
        s
    }

    pub fn score(&self, frame: &Frame, theta: &[f64]) -> Result<Vec<f64>> {
        frame.check_matches(&self.detector)?;
        let map = self.signal_means(theta, true)?;
        let (_, dmu) = self.pixel_terms(frame, &map, theta)?;
        Ok(self.score_from(&map, &dmu, theta))
    }

    fn fisher_from(&self, map: &PixelMeanMap, theta: &[f64]) -> FisherMatrix {
        let pose = Pose::new(theta[0], theta[1], theta[2]);
        let setup = PixelatedSetup::new(pose, self.photons(theta), self.opts.model.pixel_model())
            .with_parameterization(self.opts.parameterization)
            .with_background(self.background(theta));
        fisher::pixelated_from_map(map, &setup, Some(&self.readout))
    }

    /// Expected information per photon at `theta`.
    pub fn fisher(&self, theta: &[f64]) -> Result<FisherMatrix> {
        let map = self.signal_means(theta, true)?;
        Ok(self.fisher_from(&map, theta))
    }

    fn scales(&self) -> Vec<f64> {
        let w0 = self.geom.waist();
        let mut s = vec![w0, w0, w0];
        if self.opts.n_params() == 5 {
            s.push(self.opts.photons);
            s.push(self.opts.photons);
        }
        s
    }

    /// Fisher scoring `θ ← θ + F⁻¹ ∂ln L` with step halving whenever the
    /// likelihood would decrease.
    pub fn fit(&self, frame: &Frame, init: &[f64]) -> Result<EstimateResult> {
        frame.check_matches(&self.detector)?;
        self.check_theta(init)?;
        let n = self.opts.n_params();
        let scales = self.scales();
        let scaled = |step: &DVector<f64>| {
            step.iter()
                .zip(&scales)
                .map(|(s, c)| (s / c).abs())
                .fold(0.0, f64::max)
        };

        let mut theta = init.to_vec();
        let mut map = self.signal_means(&theta, true)?;
        let (mut ll, mut dmu) = self.pixel_terms(frame, &map, &theta)?;
        let mut history = Vec::new();
        let mut converged = false;
        let mut singular_run = 0;
        let mut iterations = 0;

        while iterations < self.opts.max_iter {
            iterations += 1;
            let score = DVector::from_vec(self.score_from(&map, &dmu, &theta));
            let info = self.fisher_from(&map, &theta).matrix() * self.photons(&theta);
            let (step, singular) = scoring_step(&info, &score, self.opts.damping);
            if singular {
                singular_run += 1;
                if singular_run >= MAX_SINGULAR {
                    return Err(Error::SingularFisher {
                        direction: format!("{} consecutive singular iterations", MAX_SINGULAR),
                    });
                }
            } else {
                singular_run = 0;
            }

            let mut t = 1.0;
            let mut accepted = None;
            let mut halvings = 0;
            loop {
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
                if self.check_theta(&cand).is_ok() && self.keeps_branch(init, &cand) {
                    let cmap = self.signal_means(&cand, true)?;
                    let (cll, cdmu) = self.pixel_terms(frame, &cmap, &cand)?;
                    if cll >= ll {
                        accepted = Some((cand, cmap, cll, cdmu));
                        break;
                    }
                }
                if halvings == MAX_HALVINGS {
                    break;
                }
                halvings += 1;
                t *= 0.5;
            }
            let size = t * scaled(&step);
            match accepted {
                Some((cand, cmap, cll, cdmu)) => {
                    theta = cand;
                    map = cmap;
                    ll = cll;
                    dmu = cdmu;
                    history.push(StepRecord {
                        iteration: iterations,
                        loglik: ll,
                        scaled_step: size,
                        halvings,
                        singular,
                    });
                    if size < self.opts.tol {
                        converged = true;
                        break;
                    }
                }
                None => {
                    history.push(StepRecord {
                        iteration: iterations,
                        loglik: ll,
                        scaled_step: 0.0,
                        halvings,
                        singular,
                    });
                    // no ascent along a step already below tolerance: at the maximum
                    converged = scaled(&step) < self.opts.tol * (1u64 << MAX_HALVINGS) as f64;
                    break;
                }
            }
        }
        debug_assert_eq!(theta.len(), n);
        let fisher_at_solution = self.fisher_from(&map, &theta);
        Ok(EstimateResult {
            labels: self.opts.labels(),
            theta_hat: theta,
            converged,
            iterations,
            final_loglik: ll,
            fisher_at_solution,
            diagnostics: history,
        })
    }

    /// Starting point from frame moments; see [`initialize`].
    pub fn initialize(&self, frame: &Frame) -> Result<Vec<f64>> {
        initialize(frame, &self.detector, &self.spec, &self.geom, &self.opts)
    }

    /// Initializes and fits.
    pub fn fit_frame(&self, frame: &Frame) -> Result<EstimateResult> {
        let init = self.initialize(frame)?;
        self.fit(frame, &init)
    }
}

/// Solves `(F + λ diag F) δ = s`; falls back to a pseudo-inverse when `F`
/// is numerically singular.
fn scoring_step(info: &DMatrix<f64>, score: &DVector<f64>, damping: f64) -> (DVector<f64>, bool) {
    let mut m = info.clone();
    for i in 0..m.nrows() {
        m[(i, i)] *= 1.0 + damping;
    }
    // equilibrate so mixed units do not dominate the conditioning test
    let d: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)].abs().sqrt().max(1e-300)).collect();
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / (d[i] * d[j]));
    let rhs = DVector::from_fn(score.len(), |i, _| score[i] / d[i]);
    let svd = scaled.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let singular = !(smin > SINGULAR_RCOND * smax);
    let y = if singular {
        svd.solve(&rhs, SINGULAR_RCOND * smax).unwrap_or_else(|_| DVector::zeros(rhs.len()))
    } else {
        match scaled.cholesky() {
            Some(c) => c.solve(&rhs),
            None => svd.solve(&rhs, SINGULAR_RCOND * smax).unwrap_or_else(|_| DVector::zeros(rhs.len())),
        }
    };
    (DVector::from_fn(y.len(), |i, _| y[i] / d[i]), singular)
}

pub fn log_likelihood(
    frame: &Frame,
    theta: &[f64],
    spec: &ModeSpec,
    geom: &BeamGeometry,
    detector: &DetectorModel,
    opts: &EstimatorOptions,
) -> Result<f64> {
    Estimator::new(spec, geom, detector, opts)?.log_likelihood(frame, theta)
}

pub fn score(
    frame: &Frame,
    theta: &[f64],
    spec: &ModeSpec,
    geom: &BeamGeometry,
    detector: &DetectorModel,
    opts: &EstimatorOptions,
) -> Result<Vec<f64>> {
    Estimator::new(spec, geom, detector, opts)?.score(frame, theta)
}

pub fn fisher_scoring_fit(
    frame: &Frame,
    init: &[f64],
    spec: &ModeSpec,
    geom: &BeamGeometry,
    detector: &DetectorModel,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    Estimator::new(spec, geom, detector, opts)?.fit(frame, init)
}

/// Moments of the background-subtracted frame inside a circular window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMoments {
    pub x: f64,
    pub y: f64,
    /// Per-axis variance, pixel-corrected.
    pub variance: f64,
    /// Orientation of the second-moment ellipse, in `(-π/2, π/2]`.
    pub orientation: f64,
    pub anisotropy: f64,
    pub net_signal: f64,
}

const WINDOW_SIGMAS: f64 = 4.0;

/// Centroid and second moments of `values - offset`, refined over a window
/// of `4σ̂` around the centroid. Negative values are kept so background
/// noise averages out instead of inflating the moments.
pub fn frame_moments(values: &[f64], offset: f64, detector: &DetectorModel) -> Result<FrameMoments> {
    let s: Vec<f64> = values.iter().map(|v| v - offset).collect();
    let net: f64 = s.iter().sum();
    if !(net > 0.0) {
        return Err(Error::NoSignal(format!("net signal {net} after background subtraction")));
    }
    let centers: Vec<(f64, f64)> = (0..detector.len()).map(|k| detector.pixel_center(k)).collect();
    let moments = |window: Option<(f64, f64, f64)>| {
        let mut m = [0.0f64; 6];
        for (k, &v) in s.iter().enumerate() {
            let (x, y) = centers[k];
            if let Some((cx, cy, r)) = window {
                if (x - cx).powi(2) + (y - cy).powi(2) > r * r {
                    continue;
                }
            }
            m[0] += v;
            m[1] += v * x;
            m[2] += v * y;
            m[3] += v * x * x;
            m[4] += v * y * y;
            m[5] += v * x * y;
        }
        m
    };
    let finish = |m: [f64; 6]| -> Option<FrameMoments> {
        if !(m[0] > 0.0) {
            return None;
        }
        let (cx, cy) = (m[1] / m[0], m[2] / m[0]);
        let vxx = m[3] / m[0] - cx * cx;
        let vyy = m[4] / m[0] - cy * cy;
        let vxy = m[5] / m[0] - cx * cy;
        let pitch = detector.pixel_pitch();
        let variance = (0.5 * (vxx + vyy) - pitch * pitch / 12.0).max(pitch * pitch / 12.0);
        let diff = vxx - vyy;
        Some(FrameMoments {
            x: cx,
            y: cy,
            variance,
            orientation: 0.5 * (2.0 * vxy).atan2(diff),
            anisotropy: (diff * diff + 4.0 * vxy * vxy).sqrt() / (vxx + vyy).max(1e-300),
            net_signal: m[0],
        })
    };
    let mut est = finish(moments(None)).ok_or_else(|| Error::NoSignal("no positive pixels".into()))?;
    for _ in 0..8 {
        let r = WINDOW_SIGMAS * (2.0 * est.variance).sqrt();
        match finish(moments(Some((est.x, est.y, r)))) {
            Some(next) => {
                let moved = (next.x - est.x).abs() + (next.y - est.y).abs() + (next.variance - est.variance).abs().sqrt();
                est = next;
                if moved < 1e-12 * detector.pixel_pitch() {
                    break;
                }
            }
            None => break,
        }
    }
    Ok(est)
}

/// Starting parameters from the frame: centroid for `(x, y)`, the second
/// moment for the width (`w = 2σ̂/sqrt(2p+|l|+1)` in the mode average), the
/// width hyperbola on the chosen branch for single-mode `z`, and the pattern
/// orientation for rotation modes.
pub fn initialize(
    frame: &Frame,
    detector: &DetectorModel,
    spec: &ModeSpec,
    geom: &BeamGeometry,
    opts: &EstimatorOptions,
) -> Result<Vec<f64>> {
    frame.check_matches(detector)?;
    let noise = &detector.noise;
    let (offset, background) = match opts.model {
        LikelihoodModel::A => (noise.offset(), 0.0),
        LikelihoodModel::B => {
            let b = border_level(&frame.readouts, detector);
            (b, b)
        }
    };
    let m = frame_moments(&frame.readouts, offset, detector)?;
    let w_hat = 2.0 * m.variance.sqrt() / spec.beam_quality().sqrt();
    let third = match opts.parameterization {
        Parameterization::Xyw => w_hat,
        Parameterization::Xyz => {
            if spec.is_rotation_mode() {
                z_from_orientation(m.orientation, spec, geom, detector)?
            } else {
                let ratio = (w_hat / geom.waist()).max(1.0 + 1e-6);
                let branch = if opts.branch < 0.0 { -1.0 } else { 1.0 };
                branch * geom.rayleigh_range() * (ratio * ratio - 1.0).sqrt().max(0.05)
            }
        }
    };
    let mut theta = vec![m.x, m.y, third];
    if opts.model == LikelihoodModel::B {
        let net: f64 = frame.readouts.iter().map(|v| v - background).sum();
        theta.push(net.max(1.0));
        theta.push(background.max(0.0));
    }
    Ok(theta)
}

/// Mean readout over the outermost ring of pixels.
fn border_level(values: &[f64], detector: &DetectorModel) -> f64 {
    let (r, c) = (detector.rows(), detector.cols());
    let mut s = 0.0;
    let mut n = 0usize;
    for i in 0..r {
        for j in 0..c {
            if i == 0 || j == 0 || i + 1 == r || j + 1 == c {
                s += values[i * c + j];
                n += 1;
            }
        }
    }
    s / n as f64
}

/// Focal distance whose modelled pattern orientation best matches the
/// observed one, on a grid over `±3 z_R`.
fn z_from_orientation(observed: f64, spec: &ModeSpec, geom: &BeamGeometry, detector: &DetectorModel) -> Result<f64> {
    let zr = geom.rayleigh_range();
    let mut best = (f64::INFINITY, 0.0);
    let steps = 60;
    for i in 0..=steps {
        let z = zr * (-3.0 + 6.0 * i as f64 / steps as f64);
        let pose = Pose::new(0.0, 0.0, z);
        let local = detector.with_center_offset(0.0, 0.0);
        let map = detector::expected_pixel_means(spec, geom, &pose, &local, 1.0, false);
        let m = frame_moments(&map.values, 0.0, &local)?;
        // orientation is defined modulo π
        let mut d = (m.orientation - observed).rem_euclid(std::f64::consts::PI);
        d = d.min(std::f64::consts::PI - d);
        if d < best.0 {
            best = (d, z);
        }
    }
    Ok(best.1)
}

/// Focal distance from a fitted width on branch `sign(branch)`, with the
/// propagated variance `var_w / (dw/dz)²`.
pub fn axial_from_width(w_hat: f64, var_w: f64, geom: &BeamGeometry, branch: f64) -> Result<(f64, f64)> {
    let w0 = geom.waist();
    if w_hat < w0 {
        return Err(Error::BelowWaist { w_hat, w0 });
    }
    if w_hat == w0 {
        return Err(Error::AtFocus);
    }
    let sign = if branch < 0.0 { -1.0 } else { 1.0 };
    let z = sign * geom.rayleigh_range() * ((w_hat / w0).powi(2) - 1.0).sqrt();
    let slope = geom.width_slope_at(z);
    Ok((z, var_w / (slope * slope)))
}
