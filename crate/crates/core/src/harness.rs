//! Monte Carlo experiments: grouped variance against the CRB, PSNR and
//! beam-quality diagnostics, information sweeps and likelihood profiles.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{BeamGeometry, ModeSpec, Pose};
use crate::detector::{self, DetectorModel, Frame, NoiseParams, PixelMeanMap};
use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorOptions, LikelihoodModel};
use crate::fisher::{self, FisherMatrix, Parameterization, PixelModel, PixelatedSetup};
use crate::quadrature::IntegrationSpec;

/// One incoherent component of a simulated truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mode: ModeSpec,
}

/// Incoherent LG00 + LG01 mixture whose beam quality is `m2`; its
/// second-moment divergence is `m2` times that of a Gaussian with the same
/// second-moment waist.
pub fn width_mismatch_mixture(m2: f64) -> Result<Vec<MixtureComponent>> {
    if !(1.0..=3.0).contains(&m2) {
        return Err(Error::InvalidInput(format!("mixture beam quality {m2} outside [1, 3]")));
    }
    let a = (m2 - 1.0) / 2.0;
    Ok(vec![
        MixtureComponent {
            weight: 1.0 - a,
            mode: ModeSpec::lg(0, 0),
        },
        MixtureComponent {
            weight: a,
            mode: ModeSpec::lg(0, 1),
        },
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PixelPitch,
    /// Values are target SNRs, reached by scaling the detector noise
    /// amplitude at the configured photon count.
    Snr,
    ZPlane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

fn default_photons() -> f64 {
    1e4
}
fn default_frames() -> usize {
    200
}
fn default_groups() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: ModeSpec,
    pub geometry: BeamGeometry,
    pub detector: DetectorModel,
    #[serde(default = "default_photons")]
    pub photons: f64,
    /// Focal distances `z_e` of the simulated planes, µm.
    pub z_planes: Vec<f64>,
    #[serde(default = "default_frames")]
    pub frames_per_plane: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default)]
    pub paired_beams: bool,
    #[serde(default)]
    pub seed: u64,
    /// True lateral position, µm.
    #[serde(default)]
    pub lateral_offset: [f64; 2],
    /// Fit options; `photons` is overwritten by the config's photon count.
    #[serde(default)]
    pub estimator: EstimatorOptions,
    /// Simulate from this incoherent mixture instead of `mode`.
    #[serde(default)]
    pub truth_mixture: Option<Vec<MixtureComponent>>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn new(mode: ModeSpec, geometry: BeamGeometry, detector: DetectorModel, z_planes: Vec<f64>) -> Self {
        Self {
            mode,
            geometry,
            detector,
            photons: default_photons(),
            z_planes,
            frames_per_plane: default_frames(),
            groups: default_groups(),
            paired_beams: false,
            seed: 0,
            lateral_offset: [0.0, 0.0],
            estimator: EstimatorOptions::default(),
            truth_mixture: None,
            sweep: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.photons > 0.0 && self.photons.is_finite()) {
            return Err(Error::InvalidInput(format!("photons {}", self.photons)));
        }
        if self.groups < 2 || !self.frames_per_plane.is_multiple_of(self.groups) || self.frames_per_plane / self.groups < 2 {
            return Err(Error::InvalidInput(format!(
                "{} frames per plane cannot form {} groups of at least 2",
                self.frames_per_plane, self.groups
            )));
        }
        if self.z_planes.iter().any(|z| !z.is_finite()) || self.lateral_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pose".into()));
        }
        if let Some(mix) = &self.truth_mixture {
            if mix.is_empty() || mix.iter().any(|c| !(c.weight >= 0.0)) || !(mix.iter().map(|c| c.weight).sum::<f64>() > 0.0) {
                return Err(Error::InvalidInput("mixture weights must be non-negative with a positive sum".into()));
            }
        }
        self.detector.noise.validate()?;
        self.estimator_options().validate()
    }

    pub fn estimator_options(&self) -> EstimatorOptions {
        EstimatorOptions {
            photons: self.photons,
            ..self.estimator
        }
    }

    pub fn pose(&self, z: f64) -> Pose {
        Pose::new(self.lateral_offset[0], self.lateral_offset[1], z)
    }

    /// Noise-free signal means of the simulated truth.
    pub fn truth_means(&self, pose: &Pose) -> PixelMeanMap {
        match &self.truth_mixture {
            None => detector::expected_pixel_means(&self.mode, &self.geometry, pose, &self.detector, self.photons, false),
            Some(mix) => {
                let total: f64 = mix.iter().map(|c| c.weight).sum();
                let mut out: Option<PixelMeanMap> = None;
                for c in mix {
                    let m = detector::expected_pixel_means(
                        &c.mode,
                        &self.geometry,
                        pose,
                        &self.detector,
                        self.photons * c.weight / total,
                        false,
                    );
                    match &mut out {
                        None => out = Some(m),
                        Some(acc) => acc.values.iter_mut().zip(&m.values).for_each(|(a, b)| *a += b),
                    }
                }
                out.expect("non-empty mixture")
            }
        }
    }

    /// Simulated frame for `plane`, `stack` (0, or 1 for the second beam) and
    /// `frame`; the index layout keeps every frame on its own stream.
    pub fn frame_index(&self, plane: usize, stack: usize, frame: usize) -> u64 {
        ((plane * 2 + stack) * self.frames_per_plane + frame) as u64
    }
}

/// Grouped statistics of one parameter stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedVariance {
    pub variance: f64,
    pub error: f64,
    pub group_variances: Vec<f64>,
}

/// Splits `values` into `groups` consecutive groups and averages the group
/// sample variances; `None` entries (failed fits) are left out. The error
/// bar is the standard deviation of the group variances over `sqrt(groups)`.
pub fn grouped_variance(values: &[Option<f64>], groups: usize, scale: f64) -> Result<GroupedVariance> {
    if groups < 2 || !values.len().is_multiple_of(groups) {
        return Err(Error::InvalidInput(format!("{} values in {} groups", values.len(), groups)));
    }
    let size = values.len() / groups;
    let mut vars = Vec::with_capacity(groups);
    for g in values.chunks(size) {
        let xs: Vec<f64> = g.iter().flatten().copied().collect();
        if xs.len() < 2 {
            continue;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        vars.push(var * scale);
    }
    if vars.len() < 2 {
        return Err(Error::FitFailed("fewer than two groups hold two successful fits".into()));
    }
    let g = vars.len() as f64;
    let mean = vars.iter().sum::<f64>() / g;
    let sd = (vars.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (g - 1.0)).sqrt();
    Ok(GroupedVariance {
        variance: mean,
        error: sd / g.sqrt(),
        group_variances: vars,
    })
}

/// Per-parameter grouped variances of single or paired estimate streams.
/// Paired streams use `var(left - right) / 2`.
pub fn grouped_statistics(
    left: &[Option<Vec<f64>>],
    right: Option<&[Option<Vec<f64>>]>,
    n_params: usize,
    groups: usize,
) -> Result<Vec<GroupedVariance>> {
    (0..n_params)
        .map(|i| {
            let stream: Vec<Option<f64>> = match right {
                None => left.iter().map(|t| t.as_ref().map(|t| t[i])).collect(),
                Some(right) => {
                    if right.len() != left.len() {
                        return Err(Error::InvalidInput("paired streams differ in length".into()));
                    }
                    left.iter()
                        .zip(right)
                        .map(|(a, b)| match (a, b) {
                            (Some(a), Some(b)) => Some(a[i] - b[i]),
                            _ => None,
                        })
                        .collect()
                }
            };
            grouped_variance(&stream, groups, if right.is_some() { 0.5 } else { 1.0 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneReport {
    pub z: f64,
    pub fits: usize,
    pub converged_fraction: f64,
    pub degraded: bool,
    pub mean: Vec<f64>,
    /// NaN (serialized as null) when too few fits converged to form groups.
    pub variance: Vec<f64>,
    pub variance_error: Vec<f64>,
    /// Practical bound from the pixelated information of the fitted model.
    /// Infinite entries (serialized as null) mark unidentifiable directions.
    pub crb_practical: Vec<f64>,
    /// Ideal-intensity bound on the three position parameters.
    pub crb_ideal: Vec<f64>,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub labels: Vec<String>,
    pub mode: String,
    pub photons: f64,
    pub frames_per_plane: usize,
    pub groups: usize,
    pub paired_beams: bool,
    pub seed: u64,
    pub degraded: bool,
    pub planes: Vec<PlaneReport>,
}

/// Fraction of non-converged fits above which a plane is flagged.
pub const DEGRADED_FRACTION: f64 = 0.05;

fn crb_diag_or_inf(f: &FisherMatrix, photons: f64) -> Vec<f64> {
    match fisher::crb(f, photons) {
        Ok(r) => r.diag(),
        Err(_) => vec![f64::INFINITY; f.dim()],
    }
}

/// Ideal-intensity information of the position parameters at `z`.
pub fn ideal_information(spec: &ModeSpec, geom: &BeamGeometry, z: f64, param: Parameterization) -> Result<FisherMatrix> {
    match (spec.single(), param) {
        (Some((l, p)), Parameterization::Xyz) => Ok(fisher::cfi_ideal_lg(l, p, geom, z)),
        (Some((l, p)), Parameterization::Xyw) => Ok(fisher::cfi_ideal_lg_width(l, p, geom.width_at(-z))),
        (None, Parameterization::Xyz) => fisher::cfi_ideal_numeric(spec, geom, z, &IntegrationSpec::default()),
        (None, Parameterization::Xyw) => Err(Error::InvalidInput("width parameterization needs a single LG mode".into())),
    }
}

/// Practical information of the fitted model at the true pose, per photon.
pub fn practical_information(config: &ExperimentConfig, z: f64) -> Result<FisherMatrix> {
    let opts = config.estimator_options();
    let model = match opts.model {
        LikelihoodModel::A if config.detector.noise.enabled => PixelModel::A,
        LikelihoodModel::A => PixelModel::Noiseless,
        LikelihoodModel::B => PixelModel::B,
    };
    let setup = PixelatedSetup::new(config.pose(z), config.photons, model)
        .with_parameterization(opts.parameterization)
        .with_background(config.detector.noise.offset());
    fisher::cfi_pixelated(&config.mode, &config.geometry, &config.detector, &setup)
}

/// Per frame: estimate and iteration count, or `None` when the fit failed.
type StackFits = Vec<Option<(Vec<f64>, usize)>>;

fn fit_stack(config: &ExperimentConfig, est: &Estimator, map: &PixelMeanMap, plane: usize, stack: usize) -> StackFits {
    (0..config.frames_per_plane)
        .into_par_iter()
        .map(|i| {
            let idx = config.frame_index(plane, stack, i);
            let frame = detector::sample_frame_indexed(config.seed, idx, map, &config.detector.noise);
            match est.fit_frame(&frame) {
                Ok(r) if r.converged => Some((r.theta_hat, r.iterations)),
                _ => None,
            }
        })
        .collect()
}

/// Simulates, fits and summarizes every plane of the experiment. Each
/// plane is fitted on the branch of its nominal `z`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<VarianceReport> {
    config.validate()?;
    let opts = config.estimator_options();
    let n = opts.n_params();
    let stacks = if config.paired_beams { 2 } else { 1 };
    let mut planes = Vec::with_capacity(config.z_planes.len());
    for (p, &z) in config.z_planes.iter().enumerate() {
        // the nominal stage position picks the branch; the configured one is kept at focus
        let branch = if z == 0.0 { opts.branch } else { z.signum() };
        let est = Estimator::new(&config.mode, &config.geometry, &config.detector, &EstimatorOptions { branch, ..opts })?;
        let map = config.truth_means(&config.pose(z));
        let fits: Vec<StackFits> = (0..stacks).map(|s| fit_stack(config, &est, &map, p, s)).collect();
        let thetas: Vec<Vec<Option<Vec<f64>>>> = fits
            .iter()
            .map(|s| s.iter().map(|f| f.as_ref().map(|(t, _)| t.clone())).collect())
            .collect();
        let ok: Vec<&(Vec<f64>, usize)> = fits.iter().flatten().flatten().collect();
        let total = config.frames_per_plane * stacks;
        let converged_fraction = ok.len() as f64 / total as f64;
        let stats = match grouped_statistics(&thetas[0], thetas.get(1).map(|v| v.as_slice()), n, config.groups) {
            Ok(s) => s,
            // too few successful fits to form groups; the plane is reported degraded
            Err(Error::FitFailed(_)) => vec![
                GroupedVariance {
                    variance: f64::NAN,
                    error: f64::NAN,
                    group_variances: Vec::new(),
                };
                n
            ],
            Err(e) => return Err(e),
        };
        let mean = (0..n)
            .map(|i| ok.iter().map(|(t, _)| t[i]).sum::<f64>() / ok.len().max(1) as f64)
            .collect();
        let mean_iterations = ok.iter().map(|(_, it)| *it as f64).sum::<f64>() / ok.len().max(1) as f64;
        let practical = practical_information(config, z)?;
        let ideal = ideal_information(&config.mode, &config.geometry, z, opts.parameterization)?;
        planes.push(PlaneReport {
            z,
            fits: total,
            converged_fraction,
            degraded: 1.0 - converged_fraction > DEGRADED_FRACTION,
            mean,
            variance: stats.iter().map(|s| s.variance).collect(),
            variance_error: stats.iter().map(|s| s.error).collect(),
            crb_practical: crb_diag_or_inf(&practical, config.photons),
            crb_ideal: crb_diag_or_inf(&ideal, config.photons),
            mean_iterations,
        });
    }
    Ok(VarianceReport {
        labels: opts.labels(),
        mode: config.mode.descriptor(),
        photons: config.photons,
        frames_per_plane: config.frames_per_plane,
        groups: config.groups,
        paired_beams: config.paired_beams,
        seed: config.seed,
        degraded: planes.iter().any(|p| p.degraded),
        planes,
    })
}

/// Peak signal-to-noise ratio in dB with `MAX_K` the reference maximum;
/// identical images give `f64::INFINITY`.
pub fn psnr(observed: &[f64], reference: &[f64]) -> Result<f64> {
    if observed.len() != reference.len() || observed.is_empty() {
        return Err(Error::InvalidInput(format!(
            "image sizes {} and {}",
            observed.len(),
            reference.len()
        )));
    }
    let mse = observed.iter().zip(reference).map(|(x, k)| (x - k).powi(2)).sum::<f64>() / observed.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let max = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(10.0 * (max * max / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrReference {
    /// Least-squares model fit to the observed mean image.
    #[default]
    Fitted,
    /// Noise-free truth, for pure simulation.
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsnrPoint {
    pub z: f64,
    pub psnr_db: f64,
}

/// Least-squares fit of `A · μ(x, y, z) / N` to `image` by Gauss-Newton,
/// starting at `init`. Returns the fitted image.
fn least_squares_reference(est: &Estimator, image: &[f64], init: &[f64]) -> Result<Vec<f64>> {
    let model = |theta: &[f64]| -> Result<(PixelMeanMap, f64, f64)> {
        let map = est.signal_means(&theta[..3], true)?;
        let num: f64 = map.values.iter().zip(image).map(|(m, x)| m * x).sum();
        let den: f64 = map.values.iter().map(|m| m * m).sum();
        let a = if den > 0.0 { num / den } else { 0.0 };
        let sse = map.values.iter().zip(image).map(|(m, x)| (x - a * m).powi(2)).sum();
        Ok((map, a, sse))
    };
    let mut theta = init[..3].to_vec();
    let (mut map, mut a, mut sse) = model(&theta)?;
    let scale = [est.geometry().waist(), est.geometry().waist(), est.geometry().rayleigh_range()];
    for _ in 0..50 {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for (k, x) in image.iter().enumerate() {
            let g = map.grad(k);
            let j = Vector3::new(a * g[0], a * g[1], a * g[2]);
            jtj += j * j.transpose();
            jtr += j * (x - a * map.values[k]);
        }
        let Some(step) = jtj.try_inverse().map(|inv| inv * jtr) else {
            break;
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..20 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(v, s)| v + t * s).collect();
            if let Ok((cm, ca, cs)) = model(&cand) {
                if cs <= sse {
                    (theta, map, a, sse) = (cand, cm, ca, cs);
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        let size = (0..3).map(|i| (t * step[i] / scale[i]).abs()).fold(0.0, f64::max);
        if !improved || size < 1e-9 {
            break;
        }
    }
    Ok(map.values.iter().map(|m| a * m).collect())
}

/// PSNR of the background-subtracted, unit-sum mean image of each plane
/// against its reference.
pub fn psnr_profile(config: &ExperimentConfig, reference: PsnrReference) -> Result<Vec<PsnrPoint>> {
    config.validate()?;
    let opts = EstimatorOptions {
        model: LikelihoodModel::A,
        parameterization: Parameterization::Xyz,
        ..config.estimator_options()
    };
    let est = Estimator::new(&config.mode, &config.geometry, &config.detector, &opts)?;
    let offset = config.detector.noise.offset();
    config
        .z_planes
        .iter()
        .enumerate()
        .map(|(p, &z)| {
            let truth = config.truth_means(&config.pose(z));
            let frames: Vec<Frame> = (0..config.frames_per_plane)
                .into_par_iter()
                .map(|i| detector::sample_frame_indexed(config.seed, config.frame_index(p, 0, i), &truth, &config.detector.noise))
                .collect();
            let f = frames.len() as f64;
            let mut mean: Vec<f64> = (0..truth.values.len())
                .map(|k| frames.iter().map(|fr| fr.readouts[k]).sum::<f64>() / f - offset)
                .collect();
            let total: f64 = mean.iter().sum();
            if !(total > 0.0) {
                return Err(Error::NoSignal(format!("mean image at z={z} has no net signal")));
            }
            mean.iter_mut().for_each(|v| *v /= total);
            let reference_image = match reference {
                PsnrReference::Analytic => {
                    let s = truth.total();
                    truth.values.iter().map(|m| m / s).collect()
                }
                PsnrReference::Fitted => {
                    let mean_frame = Frame {
                        rows: truth.rows,
                        cols: truth.cols,
                        readouts: mean.iter().map(|v| v * config.photons + offset).collect(),
                        seed: None,
                        frame_index: 0,
                    };
                    let init = est.initialize(&mean_frame)?;
                    least_squares_reference(&est, &mean, &init)?
                }
            };
            Ok(PsnrPoint {
                z,
                psnr_db: psnr(&mean, &reference_image)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthSample {
    pub z: f64,
    pub w: f64,
    /// Variance of `w`; zero for exact data.
    pub var_w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamQualityFit {
    pub w0: f64,
    pub z0: f64,
    pub rayleigh_range: f64,
    /// Fitted divergence over that of the ideal mode with the fitted waist.
    pub divergence_ratio: f64,
    /// `2p + |l| + 1` of the nominal mode.
    pub m2_theory: f64,
    /// Second-moment beam-quality factor implied by the fit.
    pub m2: f64,
}

/// Weighted least-squares hyperbola `w²(z) = w0²[1 + ((z - z0)/z_R')²]`
/// through beam-radius samples of an `LG_{lp}` beam.
pub fn fit_beam_quality(samples: &[WidthSample], l: i32, p: u32, wavelength: f64) -> Result<BeamQualityFit> {
    if !(wavelength > 0.0) {
        return Err(Error::InvalidInput(format!("wavelength {wavelength}")));
    }
    if samples.iter().any(|s| !(s.w > 0.0 && s.z.is_finite() && s.var_w >= 0.0)) {
        return Err(Error::InvalidInput("width samples need finite z, w > 0 and var_w ≥ 0".into()));
    }
    let mut zs: Vec<f64> = samples.iter().map(|s| s.z).collect();
    zs.sort_by(f64::total_cmp);
    zs.dedup();
    if zs.len() < 4 {
        return Err(Error::InvalidInput(format!("{} distinct planes, need at least 4", zs.len())));
    }
    let weighted = samples.iter().all(|s| s.var_w > 0.0);
    // centre z for conditioning
    let zc = samples.iter().map(|s| s.z).sum::<f64>() / samples.len() as f64;
    let zspan = samples.iter().map(|s| (s.z - zc).abs()).fold(0.0, f64::max);
    let mut a = DMatrix::<f64>::zeros(samples.len(), 3);
    let mut b = DVector::<f64>::zeros(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let u = (s.z - zc) / zspan;
        let sw = if weighted { 1.0 / (2.0 * s.w * s.var_w.sqrt()) } else { 1.0 };
        a[(i, 0)] = sw;
        a[(i, 1)] = sw * u;
        a[(i, 2)] = sw * u * u;
        b[i] = sw * s.w * s.w;
    }
    let c = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::FitFailed(format!("hyperbola fit: {e}")))?;
    let (c0, c1, c2) = (c[0], c[1] / zspan, c[2] / (zspan * zspan));
    if !(c2 > 0.0) {
        return Err(Error::FitFailed("width samples do not open upward".into()));
    }
    let z0 = zc - c1 / (2.0 * c2);
    let w0sq = c0 - c1 * c1 / (4.0 * c2);
    if !(w0sq > 0.0) {
        return Err(Error::FitFailed(format!("fitted waist² {w0sq} is not positive")));
    }
    let w0 = w0sq.sqrt();
    let zr = w0 / c2.sqrt();
    let reach = samples.iter().map(|s| (s.z - z0).abs()).fold(0.0, f64::max);
    if reach <= zr {
        return Err(Error::FitFailed(format!(
            "samples reach {reach:.4e} from the waist, inside the fitted Rayleigh range {zr:.4e}"
        )));
    }
    let ratio = std::f64::consts::PI * w0 * w0 / (wavelength * zr);
    let m2_theory = 2.0 * p as f64 + l.unsigned_abs() as f64 + 1.0;
    Ok(BeamQualityFit {
        w0,
        z0,
        rayleigh_range: zr,
        divergence_ratio: ratio,
        m2_theory,
        m2: ratio * m2_theory,
    })
}

/// Rows of an information sweep. Columns are listed in [`SWEEP_COLUMNS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// `value, snr, w_over_pitch, cfi_* (pixelated, per photon), ideal_* (per
/// photon), qfi_*, ratio_* = cfi/qfi`.
pub const SWEEP_COLUMNS: [&str; 15] = [
    "value", "snr", "w_over_pitch", "cfi_x", "cfi_y", "cfi_z", "ideal_x", "ideal_y", "ideal_z", "qfi_x", "qfi_y",
    "qfi_z", "ratio_x", "ratio_y", "ratio_z",
];

/// Pixelated CFI, ideal CFI and QFI along one axis, at the first z plane
/// (or each swept plane) and the config's photon count.
pub fn sweep(config: &ExperimentConfig) -> Result<SweepTable> {
    let spec = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("config has no sweep section".into()))?;
    if spec.values.is_empty() || spec.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("sweep values must be finite and non-empty".into()));
    }
    if spec.axis != SweepAxis::ZPlane && spec.values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidInput("pitch and SNR sweeps need positive values".into()));
    }
    let z0 = *config
        .z_planes
        .first()
        .ok_or_else(|| Error::InvalidInput("config has no z planes".into()))?;
    let qfi = match fisher::qfi(&config.mode, &config.geometry) {
        Ok(q) => q,
        Err(Error::NoClosedForm(_)) => fisher::qfi_numeric(&config.mode, &config.geometry, z0, &IntegrationSpec::default())?,
        Err(e) => return Err(e),
    };
    let q = qfi.diag();
    let noise = config.detector.noise;
    let model = if noise.enabled { PixelModel::A } else { PixelModel::Noiseless };
    let span = config.detector.pixel_pitch() * config.detector.rows().max(config.detector.cols()) as f64;
    let (cx, cy) = config.detector.center_offset();
    let rows = spec
        .values
        .iter()
        .map(|&v| {
            let (det, z) = match spec.axis {
                SweepAxis::PixelPitch => (DetectorModel::covering(v, span, noise)?.with_center_offset(cx, cy), z0),
                SweepAxis::Snr => {
                    let map = detector::expected_pixel_means(&config.mode, &config.geometry, &config.pose(z0), &config.detector, config.photons, false);
                    let k = noise_scale_for_snr(&map, &noise, v)?;
                    (config.detector.with_noise(noise.amplitude_scaled(k)), z0)
                }
                SweepAxis::ZPlane => (config.detector, v),
            };
            let setup = PixelatedSetup::new(config.pose(z), config.photons, model);
            let cfi = fisher::cfi_pixelated(&config.mode, &config.geometry, &det, &setup)?.diag();
            let ideal = ideal_information(&config.mode, &config.geometry, z, Parameterization::Xyz)?.diag();
            let map = detector::expected_pixel_means(&config.mode, &config.geometry, &config.pose(z), &det, config.photons, false);
            let snr = if noise.enabled { detector::snr(&map, &det.noise)? } else { f64::INFINITY };
            let w_over_pitch = config.geometry.width_at(-z) / det.pixel_pitch();
            let mut row = vec![v, snr, w_over_pitch];
            row.extend_from_slice(&cfi);
            row.extend_from_slice(&ideal);
            row.extend_from_slice(&q);
            row.extend((0..3).map(|i| cfi[i] / q[i]));
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        axis: spec.axis,
        columns: SWEEP_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}

/// Noise amplitude factor at which the map reaches `target` SNR, by
/// bisection in `ln k` over `[1e-3, 1e3]`.
fn noise_scale_for_snr(map: &PixelMeanMap, noise: &NoiseParams, target: f64) -> Result<f64> {
    if !noise.enabled {
        return Err(Error::InvalidInput("an SNR sweep needs detector noise".into()));
    }
    let snr_at = |ln_k: f64| detector::snr(map, &noise.amplitude_scaled(ln_k.exp()));
    let (mut lo, mut hi) = (1e-3f64.ln(), 1e3f64.ln());
    if !(snr_at(lo)? >= target && snr_at(hi)? <= target) {
        return Err(Error::InvalidInput(format!("target SNR {target} outside the reachable range")));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if snr_at(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityProfile {
    pub z: Vec<f64>,
    pub mean_loglik: Vec<f64>,
    /// Standard error of each mean.
    pub stderr: Vec<f64>,
}

impl AmbiguityProfile {
    /// Grid index of the largest mean log-likelihood.
    pub fn argmax(&self) -> usize {
        self.mean_loglik
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

/// Mean log-likelihood over `frames` simulated frames at the true lateral
/// position as a function of hypothesized `z`. Model B profiles use the true
/// photon count and the noise offset as background.
#[allow(clippy::too_many_arguments)]
pub fn ambiguity_scan(
    spec: &ModeSpec,
    geom: &BeamGeometry,
    detector: &DetectorModel,
    truth: &Pose,
    z_grid: &[f64],
    opts: &EstimatorOptions,
    frames: usize,
    seed: u64,
) -> Result<AmbiguityProfile> {
    if z_grid.len() < 2 || frames == 0 {
        return Err(Error::InvalidInput("ambiguity scan needs a grid and at least one frame".into()));
    }
    let reach = z_grid.iter().map(|z| z.abs()).fold(0.0, f64::max);
    let symmetric = z_grid
        .iter()
        .zip(z_grid.iter().rev())
        .all(|(a, b)| (a + b).abs() <= 1e-9 * reach.max(1.0));
    if !symmetric || z_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("z grid must be increasing and symmetric about 0".into()));
    }
    let est = Estimator::new(spec, geom, detector, opts)?;
    let map = detector::expected_pixel_means(spec, geom, truth, detector, opts.photons, false);
    let frames: Vec<Frame> = (0..frames as u64)
        .into_par_iter()
        .map(|i| detector::sample_frame_indexed(seed, i, &map, &detector.noise))
        .collect();
    let per_z: Vec<(f64, f64)> = z_grid
        .par_iter()
        .map(|&z| {
            let mut theta = vec![truth.x, truth.y, z];
            if opts.model == LikelihoodModel::B {
                theta.extend([opts.photons, detector.noise.offset()]);
            }
            let lls = frames
                .iter()
                .map(|f| est.log_likelihood(f, &theta))
                .collect::<Result<Vec<f64>>>()?;
            let n = lls.len() as f64;
            let mean = lls.iter().sum::<f64>() / n;
            let var = if lls.len() > 1 {
                lls.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Ok((mean, (var / n).sqrt()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AmbiguityProfile {
        z: z_grid.to_vec(),
        mean_loglik: per_z.iter().map(|v| v.0).collect(),
        stderr: per_z.iter().map(|v| v.1).collect(),
    })
}
