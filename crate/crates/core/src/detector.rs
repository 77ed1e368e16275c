//! Pixel grid, expected counts, the readout noise law and frame sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::beam::{BeamGeometry, IntensityModel, ModeSpec, Pose};
use crate::error::{Error, Result};
use crate::quadrature::SquareRule;

/// Nodes per axis of the per-pixel Gauss-Legendre rule.
pub const PIXEL_ORDER: usize = 6;

/// Calibrated readout noise: a Gaussian offset `N(b_mean, b_sigma²)` plus a
/// signal-dependent Gaussian with `ln σ_c² = c_alpha ln N + c_beta`.
///
/// With `enabled = false` the detector is an ideal photon counter: `X = N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    pub b_mean: f64,
    pub b_sigma: f64,
    pub c_alpha: f64,
    pub c_beta: f64,
    pub enabled: bool,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            b_mean: 515.6,
            b_sigma: 7.1,
            c_alpha: 1.4,
            c_beta: -0.7,
            enabled: true,
        }
    }
}

impl NoiseParams {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.b_sigma >= 0.0
            && self.b_mean.is_finite()
            && self.b_sigma.is_finite()
            && self.c_alpha.is_finite()
            && self.c_beta.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("noise parameters {self:?}")))
        }
    }

    /// `σ_c²(n)`, zero for `n <= 0`.
    /// Both noise standard deviations multiplied by `k`; the offset is kept.
    pub fn amplitude_scaled(&self, k: f64) -> Self {
        Self {
            b_sigma: self.b_sigma * k,
            c_beta: self.c_beta + 2.0 * k.ln(),
            ..*self
        }
    }

    pub fn signal_variance(&self, n: f64) -> f64 {
        if n > 0.0 {
            (self.c_alpha * n.ln() + self.c_beta).exp()
        } else {
            0.0
        }
    }

    /// Variance of the readout given `n` photons.
    pub fn readout_variance(&self, n: f64) -> f64 {
        self.b_sigma * self.b_sigma + self.signal_variance(n)
    }

    /// Readout offset added to the photon count (0 when disabled).
    pub fn offset(&self) -> f64 {
        if self.enabled {
            self.b_mean
        } else {
            0.0
        }
    }

    /// Total readout variance for mean count `mu` under the analytic-moment
    /// convention (`σ_c` evaluated at `mu`).
    pub fn total_variance(&self, mu: f64) -> f64 {
        if self.enabled {
            mu + self.readout_variance(mu)
        } else {
            mu
        }
    }
}

/// Readout density `R(X | N)`: Gaussian with mean `N + b_mean` and variance
/// `b_sigma² + σ_c²(N)`. Evaluates the noise law regardless of `enabled`.
pub fn response_density(noise: &NoiseParams, x: f64, n: f64) -> f64 {
    let v = noise.readout_variance(n);
    let d = x - n - noise.b_mean;
    (-0.5 * d * d / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

/// Square pixel grid. Pixel `(i, j)` (row `i`, column `j`) is centred at
/// `center_offset + ((j - (cols-1)/2), (i - (rows-1)/2)) * pitch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetector", into = "RawDetector")]
pub struct DetectorModel {
    pixel_pitch: f64,
    rows: usize,
    cols: usize,
    center_offset: (f64, f64),
    pub noise: NoiseParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetector {
    pixel_pitch_um: f64,
    rows: usize,
    cols: usize,
    #[serde(default)]
    center_offset_um: (f64, f64),
    #[serde(default)]
    noise: NoiseParams,
}

impl TryFrom<RawDetector> for DetectorModel {
    type Error = Error;
    fn try_from(r: RawDetector) -> Result<Self> {
        let mut d = Self::new(r.pixel_pitch_um, r.rows, r.cols, r.noise)?;
        d.center_offset = r.center_offset_um;
        Ok(d)
    }
}

impl From<DetectorModel> for RawDetector {
    fn from(d: DetectorModel) -> Self {
        Self {
            pixel_pitch_um: d.pixel_pitch,
            rows: d.rows,
            cols: d.cols,
            center_offset_um: d.center_offset,
            noise: d.noise,
        }
    }
}

impl DetectorModel {
    pub fn new(pixel_pitch: f64, rows: usize, cols: usize, noise: NoiseParams) -> Result<Self> {
        if !(pixel_pitch > 0.0 && pixel_pitch.is_finite()) {
            return Err(Error::InvalidInput(format!("pixel pitch {pixel_pitch}")));
        }
        if rows == 0 || cols == 0 || rows * cols < 4 {
            return Err(Error::InvalidInput(format!("grid {rows}x{cols} has fewer than 4 pixels")));
        }
        noise.validate()?;
        Ok(Self {
            pixel_pitch,
            rows,
            cols,
            center_offset: (0.0, 0.0),
            noise,
        })
    }

    /// Square grid of `n x n` pixels covering at least `span` micrometres.
    pub fn covering(pixel_pitch: f64, span: f64, noise: NoiseParams) -> Result<Self> {
        let n = ((span / pixel_pitch).ceil() as usize).max(2);
        Self::new(pixel_pitch, n, n, noise)
    }

    pub fn with_center_offset(mut self, x: f64, y: f64) -> Self {
        self.center_offset = (x, y);
        self
    }

    pub fn with_noise(mut self, noise: NoiseParams) -> Self {
        self.noise = noise;
        self
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn center_offset(&self) -> (f64, f64) {
        self.center_offset
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Centre of pixel `k` in row-major order.
    pub fn pixel_center(&self, k: usize) -> (f64, f64) {
        let (i, j) = (k / self.cols, k % self.cols);
        (
            self.center_offset.0 + (j as f64 - 0.5 * (self.cols as f64 - 1.0)) * self.pixel_pitch,
            self.center_offset.1 + (i as f64 - 0.5 * (self.rows as f64 - 1.0)) * self.pixel_pitch,
        )
    }

    /// Same detector with every length multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        let mut d = Self::new(self.pixel_pitch * s, self.rows, self.cols, self.noise)?;
        d.center_offset = (self.center_offset.0 * s, self.center_offset.1 * s);
        Ok(d)
    }
}

/// Expected photon counts per pixel and, optionally, their derivatives with
/// respect to `n_params` parameters (stored pixel-major).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMeanMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub n_params: usize,
    pub gradient: Vec<f64>,
}

impl PixelMeanMap {
    pub fn has_gradient(&self) -> bool {
        self.n_params > 0
    }

    /// `∂μ_k/∂θ` for pixel `k`.
    pub fn grad(&self, k: usize) -> &[f64] {
        &self.gradient[k * self.n_params..(k + 1) * self.n_params]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Mean map with every value multiplied by `s` (gradients too).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * s).collect(),
            gradient: self.gradient.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }
}

/// How finely a pixel must be split so sub-pixels are at most `w/4` wide.
fn subdivisions(pitch: f64, w: f64) -> usize {
    ((4.0 * pitch / w).ceil() as usize).max(1)
}

/// Integrates `f(x, y) -> (I, ∂I)` over every pixel with the fixed per-pixel
/// rule and multiplies by `photons`.
pub(crate) fn integrate_pixels<F>(
    detector: &DetectorModel,
    local_width: f64,
    photons: f64,
    order: usize,
    with_gradient: bool,
    f: F,
) -> PixelMeanMap
where
    F: Fn(f64, f64, bool) -> (f64, [f64; 3]),
{
    let rule = SquareRule::new(order, subdivisions(detector.pixel_pitch, local_width));
    let area = detector.pixel_pitch * detector.pixel_pitch;
    let n = detector.len();
    let mut values = Vec::with_capacity(n);
    let mut gradient = Vec::with_capacity(if with_gradient { 3 * n } else { 0 });
    for k in 0..n {
        let (cx, cy) = detector.pixel_center(k);
        let mut v = 0.0;
        let mut g = [0.0; 3];
        for (&(ox, oy), &wt) in rule.offsets.iter().zip(&rule.weights) {
            let (i, di) = f(cx + ox * detector.pixel_pitch, cy + oy * detector.pixel_pitch, with_gradient);
            v += wt * i;
            if with_gradient {
                for c in 0..3 {
                    g[c] += wt * di[c];
                }
            }
        }
        let s = photons * area;
        values.push(s * v);
        if with_gradient {
            gradient.extend(g.iter().map(|x| s * x));
        }
    }
    PixelMeanMap {
        rows: detector.rows,
        cols: detector.cols,
        values,
        n_params: if with_gradient { 3 } else { 0 },
        gradient,
    }
}

/// `μ_k = N ∬_{A_k} I dx dy`, with gradients over `(x_e, y_e, z_e)`.
pub fn expected_pixel_means(
    spec: &ModeSpec,
    geom: &BeamGeometry,
    pose: &Pose,
    detector: &DetectorModel,
    photons: f64,
    with_gradient: bool,
) -> PixelMeanMap {
    expected_pixel_means_with_order(spec, geom, pose, detector, photons, with_gradient, PIXEL_ORDER)
}

pub fn expected_pixel_means_with_order(
    spec: &ModeSpec,
    geom: &BeamGeometry,
    pose: &Pose,
    detector: &DetectorModel,
    photons: f64,
    with_gradient: bool,
    order: usize,
) -> PixelMeanMap {
    let w = geom.width_at(-pose.z);
    let model = IntensityModel::focal(spec, geom, pose);
    integrate_pixels(detector, w, photons, order, with_gradient, |x, y, g| {
        if g {
            model.intensity_and_gradient(x, y)
        } else {
            (model.intensity(x, y), [0.0; 3])
        }
    })
}

/// Single-mode means parameterized by the local radius, gradients over
/// `(x_e, y_e, w)`.
pub fn expected_pixel_means_width(
    spec: &ModeSpec,
    x_e: f64,
    y_e: f64,
    w: f64,
    detector: &DetectorModel,
    photons: f64,
    with_gradient: bool,
) -> Result<PixelMeanMap> {
    if !spec.is_single_mode() {
        return Err(Error::InvalidInput(
            "width parameterization needs a single LG mode".into(),
        ));
    }
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::InvalidInput(format!("beam radius {w}")));
    }
    let model = IntensityModel::width(spec, x_e, y_e, w);
    Ok(integrate_pixels(detector, w, photons, PIXEL_ORDER, with_gradient, |x, y, g| {
        if g {
            model.intensity_and_gradient(x, y)
        } else {
            (model.intensity(x, y), [0.0; 3])
        }
    }))
}

/// A single detector readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub rows: usize,
    pub cols: usize,
    pub readouts: Vec<f64>,
    pub seed: Option<u64>,
    pub frame_index: u64,
}

impl Frame {
    /// Frame holding the expected readouts of a mean map (no noise drawn).
    pub fn from_means(map: &PixelMeanMap, noise: &NoiseParams) -> Self {
        let off = noise.offset();
        Self {
            rows: map.rows,
            cols: map.cols,
            readouts: map.values.iter().map(|m| m + off).collect(),
            seed: None,
            frame_index: 0,
        }
    }

    pub fn check_matches(&self, detector: &DetectorModel) -> Result<()> {
        if self.rows != detector.rows()
            || self.cols != detector.cols()
            || self.readouts.len() != detector.len()
        {
            return Err(Error::InvalidInput(format!(
                "frame {}x{} does not match detector {}x{}",
                self.rows,
                self.cols,
                detector.rows(),
                detector.cols()
            )));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one frame. Pixel `k` draws from stream `k` of this key, so
/// a frame is identical whatever order its pixels are sampled in.
pub fn frame_rng(seed: u64, frame_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(frame_index)))
}

/// Draws frame 0 of `seed`.
pub fn sample_frame(seed: u64, mean_map: &PixelMeanMap, noise: &NoiseParams) -> Frame {
    sample_frame_indexed(seed, 0, mean_map, noise)
}

/// `N_k ~ Poisson(μ_k)`, then `X_k = N_k + N(b_mean, b_sigma²) + N(0, σ_c²(N_k))`.
pub fn sample_frame_indexed(seed: u64, frame_index: u64, mean_map: &PixelMeanMap, noise: &NoiseParams) -> Frame {
    let base = frame_rng(seed, frame_index);
    let readouts = mean_map
        .values
        .iter()
        .enumerate()
        .map(|(k, &mu)| {
            let mut rng = base.clone();
            rng.set_stream(k as u64);
            rng.set_word_pos(0);
            let n = if mu > 0.0 {
                Poisson::new(mu).expect("positive finite mean").sample(&mut rng)
            } else {
                0.0
            };
            if noise.enabled {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                n + noise.b_mean + noise.b_sigma * z1 + noise.signal_variance(n).sqrt() * z2
            } else {
                n
            }
        })
        .collect();
    Frame {
        rows: mean_map.rows,
        cols: mean_map.cols,
        readouts,
        seed: Some(seed),
        frame_index,
    }
}

/// Mean over signal-bearing pixels (`μ_k` above 1% of the peak) of
/// `μ_k / sqrt(μ_k + b_sigma² + σ_c²(μ_k))`.
pub fn snr(mean_map: &PixelMeanMap, noise: &NoiseParams) -> Result<f64> {
    let peak = mean_map.max();
    if !(peak > 0.0) {
        return Err(Error::NoSignal("mean map has no positive pixel".into()));
    }
    let (sum, count) = mean_map
        .values
        .iter()
        .filter(|&&m| m > 0.01 * peak)
        .fold((0.0, 0usize), |(s, c), &m| (s + m / noise.total_variance(m).sqrt(), c + 1));
    if count == 0 {
        return Err(Error::NoSignal("no signal-bearing pixels".into()));
    }
    Ok(sum / count as f64)
}
