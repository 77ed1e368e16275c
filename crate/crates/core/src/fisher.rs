//! Quantum and classical Fisher information for 3D localization, and the
//! Cramér-Rao bound.
//!
//! Every [`FisherMatrix`] is per detected photon; the bound for `N` photons
//! is `F⁻¹ / N`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beam::{self, BeamGeometry, ModeSpec, Pose};
use crate::detector::{self, DetectorModel, PixelMeanMap};
use crate::error::{Error, Result};
use crate::quadrature::{integrate_disk, IntegrationSpec};
use crate::readout::ReadoutModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherKind {
    Qfi,
    CfiIdeal,
    CfiPixelatedNoiseless,
    CfiPixelatedA,
    CfiPixelatedB,
}

/// Per-pixel statistics entering the pixelated information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelModel {
    Noiseless,
    A,
    B,
}

/// Which third coordinate is estimated: focal distance or local radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Xyz,
    Xyw,
}

impl Parameterization {
    pub fn labels(&self, model: PixelModel) -> Vec<String> {
        let third = match self {
            Parameterization::Xyz => "z_e",
            Parameterization::Xyw => "w",
        };
        let mut l = vec!["x_e".to_string(), "y_e".to_string(), third.to_string()];
        if model == PixelModel::B {
            l.push("N".into());
            l.push("N_b".into());
        }
        l
    }
}

/// Symmetric information matrix with its parameter labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub kind: FisherKind,
    /// Pixels left out of the sum because their mean was (near) zero.
    #[serde(default)]
    pub skipped_pixels: usize,
}

impl FisherMatrix {
    pub fn from_matrix(labels: Vec<String>, m: &DMatrix<f64>, kind: FisherKind) -> Self {
        let values = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect();
        Self {
            labels,
            values,
            kind,
            skipped_pixels: 0,
        }
    }

    pub fn diagonal(labels: &[&str], diag: &[f64], kind: FisherKind) -> Self {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag));
        Self::from_matrix(labels.iter().map(|s| s.to_string()).collect(), &m, kind)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.values[i][j])
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.values[i][i]).collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }
}

const XYZ: [&str; 3] = ["x_e", "y_e", "z_e"];
const XYW: [&str; 3] = ["x_e", "y_e", "w"];

/// Closed-form quantum Fisher information.
///
/// Single mode `LG_{lp}`: `diag(4(2p+|l|+1)/w0², same, [2p(p+|l|)+2p+|l|+1]/z_R²)`.
/// Two-component `p = 0` rotation mode: lateral `2(|l|+|l'|+2)/w0²` (the
/// orientation average of the lateral entries) and axial
/// `[4+2(|l|+|l'|)+(|l|-|l'|)²]/(4 z_R²)`.
pub fn qfi(spec: &ModeSpec, geom: &BeamGeometry) -> Result<FisherMatrix> {
    let w0 = geom.waist();
    let zr = geom.rayleigh_range();
    let c = spec.components();
    let (lat, ax) = match c {
        [m] => {
            let (l, p) = (m.l.unsigned_abs() as f64, m.p as f64);
            (
                4.0 * (2.0 * p + l + 1.0) / (w0 * w0),
                (2.0 * p * (p + l) + 2.0 * p + l + 1.0) / (zr * zr),
            )
        }
        [a, b] if a.p == 0 && b.p == 0 && a.l != b.l && spec.is_rotation_mode() => {
            let (l1, l2) = (a.l.unsigned_abs() as f64, b.l.unsigned_abs() as f64);
            if (a.weight.norm_sqr() - 0.5).abs() > 1e-12 {
                return Err(Error::NoClosedForm(format!(
                    "{} with unequal weights",
                    spec.descriptor()
                )));
            }
            (
                2.0 * (l1 + l2 + 2.0) / (w0 * w0),
                (4.0 + 2.0 * (l1 + l2) + (l1 - l2).powi(2)) / (4.0 * zr * zr),
            )
        }
        _ => return Err(Error::NoClosedForm(spec.descriptor())),
    };
    Ok(FisherMatrix::diagonal(&XYZ, &[lat, lat, ax], FisherKind::Qfi))
}

/// Quantum Fisher information of the full complex field by quadrature,
/// `4 Re[<∂iψ|∂jψ> - <∂iψ|ψ><ψ|∂jψ>]`.
pub fn qfi_numeric(spec: &ModeSpec, geom: &BeamGeometry, z_e: f64, quad: &IntegrationSpec) -> Result<FisherMatrix> {
    let pose = Pose::new(0.0, 0.0, z_e);
    let w = geom.width_at(-z_e);
    let (w0, zr) = (geom.waist(), geom.rayleigh_range());
    let unit = [w0, w0, zr];
    // components: <∂i|∂j> (6 real parts), <ψ|∂i> (3 complex = 6 reals)
    let v: [f64; 12] = integrate_disk(
        |r, phi| {
            let (a, g) = beam::field_and_gradient(spec, geom, &pose, r * phi.cos(), r * phi.sin());
            let g: [Complex64; 3] = std::array::from_fn(|i| g[i] * unit[i]);
            let inner = |i: usize, j: usize| (g[i].conj() * g[j]).re;
            let proj: [Complex64; 3] = std::array::from_fn(|i| a.conj() * g[i]);
            [
                inner(0, 0),
                inner(1, 1),
                inner(2, 2),
                inner(0, 1),
                inner(0, 2),
                inner(1, 2),
                proj[0].re,
                proj[0].im,
                proj[1].re,
                proj[1].im,
                proj[2].re,
                proj[2].im,
            ]
        },
        quad.radius_factor * w,
        quad,
        |v| {
            let s = v[0].abs().max(v[1].abs()).max(v[2].abs()).max(1e-300);
            [s; 12]
        },
    )?;
    let proj: [Complex64; 3] = std::array::from_fn(|i| Complex64::new(v[6 + 2 * i], v[7 + 2 * i]));
    let idx = |i: usize, j: usize| match (i.min(j), i.max(j)) {
        (0, 0) => 0,
        (1, 1) => 1,
        (2, 2) => 2,
        (0, 1) => 3,
        (0, 2) => 4,
        _ => 5,
    };
    let m = DMatrix::from_fn(3, 3, |i, j| {
        // <∂iψ|ψ><ψ|∂jψ> = conj(<ψ|∂iψ>) <ψ|∂jψ>
        let q = 4.0 * (v[idx(i, j)] - (proj[i].conj() * proj[j]).re);
        q / (unit[i] * unit[j])
    });
    Ok(FisherMatrix::from_matrix(
        XYZ.iter().map(|s| s.to_string()).collect(),
        &symmetrize(m),
        FisherKind::Qfi,
    ))
}

/// Closed-form ideal-intensity CFI of `LG_{lp}` at focal distance `z_e`:
/// `diag(4(2p+1)/w², same, 4[2p(p+|l|)+2p+|l|+1]/R²)`.
pub fn cfi_ideal_lg(l: i32, p: u32, geom: &BeamGeometry, z_e: f64) -> FisherMatrix {
    let dz = -z_e;
    let bp = beam::geometry_at(geom, dz);
    let (la, pf) = (l.unsigned_abs() as f64, p as f64);
    let lat = 4.0 * (2.0 * pf + 1.0) / (bp.w * bp.w);
    let ax = 4.0 * (2.0 * pf * (pf + la) + 2.0 * pf + la + 1.0) * bp.inv_curvature * bp.inv_curvature;
    FisherMatrix::diagonal(&XYZ, &[lat, lat, ax], FisherKind::CfiIdeal)
}

/// Closed-form ideal CFI of `LG_{lp}` over `(x_e, y_e, w)`.
pub fn cfi_ideal_lg_width(l: i32, p: u32, w: f64) -> FisherMatrix {
    let (la, pf) = (l.unsigned_abs() as f64, p as f64);
    let lat = 4.0 * (2.0 * pf + 1.0) / (w * w);
    let ax = 4.0 * (2.0 * pf * (pf + la) + 2.0 * pf + la + 1.0) / (w * w);
    FisherMatrix::diagonal(&XYW, &[lat, lat, ax], FisherKind::CfiIdeal)
}

/// Intensity floor relative to the peak below which `1/I` integrands are
/// treated as zero.
pub const INTENSITY_FLOOR: f64 = 1e-15;

/// Upper bound of the peak intensity at the plane, by sampling.
fn peak_intensity(spec: &ModeSpec, geom: &BeamGeometry, pose: &Pose, radius: f64) -> f64 {
    let model = beam::IntensityModel::focal(spec, geom, pose);
    let mut peak: f64 = 0.0;
    for i in 0..=96 {
        let r = radius * i as f64 / 96.0 * 0.5;
        for j in 0..48 {
            let phi = 2.0 * PI * j as f64 / 48.0;
            peak = peak.max(model.intensity(pose.x + r * phi.cos(), pose.y + r * phi.sin()));
        }
    }
    peak
}

/// `∬ (∂_i I)(∂_j I)/I dx dy` over a disk of `radius_factor · w(z_e)` by
/// adaptive polar cubature.
pub fn cfi_ideal_numeric(
    spec: &ModeSpec,
    geom: &BeamGeometry,
    z_e: f64,
    quad: &IntegrationSpec,
) -> Result<FisherMatrix> {
    let pose = Pose::new(0.0, 0.0, z_e);
    let w = geom.width_at(-z_e);
    let radius = quad.radius_factor * w;
    let (w0, zr) = (geom.waist(), geom.rayleigh_range());
    let unit = [w0, w0, zr];
    let floor = INTENSITY_FLOOR * peak_intensity(spec, geom, &pose, radius);
    let model = beam::IntensityModel::focal(spec, geom, &pose);
    let v: [f64; 6] = integrate_disk(
        |r, phi| {
            let (i, g) = model.intensity_and_gradient(r * phi.cos(), r * phi.sin());
            if i < floor {
                return [0.0; 6];
            }
            let g: [f64; 3] = std::array::from_fn(|c| g[c] * unit[c]);
            let inv = 1.0 / i;
            [
                g[0] * g[0] * inv,
                g[1] * g[1] * inv,
                g[2] * g[2] * inv,
                g[0] * g[1] * inv,
                g[0] * g[2] * inv,
                g[1] * g[2] * inv,
            ]
        },
        radius,
        quad,
        |v| {
            let s = v[0].abs().max(v[1].abs()).max(v[2].abs());
            // floor so vanishing entries converge to an absolute tolerance
            let d = |x: f64| x.abs().max(1e-6 * s).max(1e-300);
            [
                d(v[0]),
                d(v[1]),
                d(v[2]),
                (d(v[0]) * d(v[1])).sqrt(),
                (d(v[0]) * d(v[2])).sqrt(),
                (d(v[1]) * d(v[2])).sqrt(),
            ]
        },
    )?;
    let m = DMatrix::from_row_slice(3, 3, &[v[0], v[3], v[4], v[3], v[1], v[5], v[4], v[5], v[2]]);
    let m = DMatrix::from_fn(3, 3, |i, j| m[(i, j)] / (unit[i] * unit[j]));
    Ok(FisherMatrix::from_matrix(
        XYZ.iter().map(|s| s.to_string()).collect(),
        &m,
        FisherKind::CfiIdeal,
    ))
}

/// True pose and photon budget of a pixelated information computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelatedSetup {
    pub pose: Pose,
    pub photons: f64,
    pub model: PixelModel,
    pub parameterization: Parameterization,
    /// Background per pixel for Model B.
    pub background: f64,
}

impl PixelatedSetup {
    pub fn new(pose: Pose, photons: f64, model: PixelModel) -> Self {
        Self {
            pose,
            photons,
            model,
            parameterization: Parameterization::Xyz,
            background: 0.0,
        }
    }

    pub fn with_parameterization(mut self, p: Parameterization) -> Self {
        self.parameterization = p;
        self
    }

    pub fn with_background(mut self, b: f64) -> Self {
        self.background = b;
        self
    }
}

/// Pixel means with gradient in the requested parameterization.
pub(crate) fn pixel_means(
    spec: &ModeSpec,
    geom: &BeamGeometry,
    detector: &DetectorModel,
    pose: &Pose,
    photons: f64,
    param: Parameterization,
) -> Result<PixelMeanMap> {
    match param {
        Parameterization::Xyz => Ok(detector::expected_pixel_means(spec, geom, pose, detector, photons, true)),
        Parameterization::Xyw => {
            let w = geom.width_at(-pose.z);
            detector::expected_pixel_means_width(spec, pose.x, pose.y, w, detector, photons, true)
        }
    }
}

/// Information summed over pixels, per photon.
///
/// Noiseless: `Σ (1/μ_k) ∂μ_k ∂μ_k`. Model A: the noiseless kernel times the
/// readout attenuation `γ(μ_k)`. Model B: Poisson kernel with mean
/// `μ_k + N_b` over `(x, y, z|w, N, N_b)`.
pub fn cfi_pixelated(
    spec: &ModeSpec,
    geom: &BeamGeometry,
    detector: &DetectorModel,
    setup: &PixelatedSetup,
) -> Result<FisherMatrix> {
    if !(setup.photons > 0.0) {
        return Err(Error::InvalidInput(format!("photon count {}", setup.photons)));
    }
    let map = pixel_means(spec, geom, detector, &setup.pose, setup.photons, setup.parameterization)?;
    let readout = match setup.model {
        PixelModel::A => Some(ReadoutModel::new(detector.noise, map.max())),
        _ => None,
    };
    Ok(pixelated_from_map(&map, setup, readout.as_ref()))
}

pub(crate) fn pixelated_from_map(
    map: &PixelMeanMap,
    setup: &PixelatedSetup,
    readout: Option<&ReadoutModel>,
) -> FisherMatrix {
    let n_theta = if setup.model == PixelModel::B { 5 } else { 3 };
    let threshold = 1e-12 * setup.photons;
    let mut f = DMatrix::<f64>::zeros(n_theta, n_theta);
    let mut skipped = 0;
    let mut g = vec![0.0; n_theta];
    for (k, &mu) in map.values.iter().enumerate() {
        g[..3].copy_from_slice(map.grad(k));
        let (mean, weight) = match setup.model {
            PixelModel::Noiseless => {
                if mu < threshold {
                    skipped += 1;
                    continue;
                }
                (mu, 1.0)
            }
            PixelModel::A => {
                let gamma = readout.expect("model A needs a readout model").attenuation(mu);
                if !(gamma > 0.0 && mu > 0.0) {
                    skipped += 1;
                    continue;
                }
                (mu, gamma)
            }
            PixelModel::B => {
                let m = mu + setup.background;
                if m < threshold {
                    skipped += 1;
                    continue;
                }
                g[3] = mu / setup.photons;
                g[4] = 1.0;
                (m, 1.0)
            }
        };
        let s = weight / mean;
        for i in 0..n_theta {
            for j in i..n_theta {
                f[(i, j)] += s * g[i] * g[j];
            }
        }
    }
    for i in 0..n_theta {
        for j in 0..i {
            f[(i, j)] = f[(j, i)];
        }
    }
    f /= setup.photons;
    let kind = match setup.model {
        PixelModel::Noiseless => FisherKind::CfiPixelatedNoiseless,
        PixelModel::A => FisherKind::CfiPixelatedA,
        PixelModel::B => FisherKind::CfiPixelatedB,
    };
    let mut out = FisherMatrix::from_matrix(setup.parameterization.labels(setup.model), &f, kind);
    out.skipped_pixels = skipped;
    out
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Cramér-Rao covariance bound `F⁻¹/N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrbReport {
    pub labels: Vec<String>,
    pub covariance_lower_bound: Vec<Vec<f64>>,
    pub photons: f64,
}

impl CrbReport {
    pub fn diag(&self) -> Vec<f64> {
        (0..self.labels.len())
            .map(|i| self.covariance_lower_bound[i][i])
            .collect()
    }
}

/// Relative eigenvalue threshold below which `F` counts as singular.
const SINGULAR_RTOL: f64 = 1e-12;

pub fn crb(f: &FisherMatrix, photons: f64) -> Result<CrbReport> {
    if !(photons > 0.0 && photons.is_finite()) {
        return Err(Error::InvalidInput(format!("photon count {photons}")));
    }
    let m = symmetrize(f.matrix());
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let (imin, &lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty matrix");
    if !(lmin > SINGULAR_RTOL * max) || max == 0.0 {
        let v = eig.eigenvectors.column(imin);
        let direction = f
            .labels
            .iter()
            .zip(v.iter())
            .filter(|(_, c)| c.abs() > 1e-6)
            .map(|(l, c)| format!("{c:+.4}*{l}"))
            .collect::<Vec<_>>()
            .join(" ");
        return Err(Error::SingularFisher { direction });
    }
    let inv = m
        .cholesky()
        .ok_or_else(|| Error::SingularFisher {
            direction: "not positive definite".into(),
        })?
        .inverse()
        / photons;
    Ok(CrbReport {
        labels: f.labels.clone(),
        covariance_lower_bound: (0..inv.nrows())
            .map(|i| (0..inv.ncols()).map(|j| inv[(i, j)]).collect())
            .collect(),
        photons,
    })
}
