//! Laguerre-Gaussian fields and their superpositions at the detection plane.
//!
//! The detection plane sits at `z = 0` and the focal plane at `z_e`, so every
//! z-dependent quantity is evaluated at the plane offset `dz = -z_e`. All
//! lengths are micrometres, all angles radians.

use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Wavelength and waist radius. The Rayleigh range is always derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry", into = "RawGeometry")]
pub struct BeamGeometry {
    wavelength: f64,
    waist: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    wavelength_um: f64,
    waist_um: f64,
}

impl TryFrom<RawGeometry> for BeamGeometry {
    type Error = Error;
    fn try_from(raw: RawGeometry) -> Result<Self> {
        Self::new(raw.wavelength_um, raw.waist_um)
    }
}

impl From<BeamGeometry> for RawGeometry {
    fn from(g: BeamGeometry) -> Self {
        Self {
            wavelength_um: g.wavelength,
            waist_um: g.waist,
        }
    }
}

impl BeamGeometry {
    pub fn new(wavelength: f64, waist: f64) -> Result<Self> {
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(Error::InvalidInput(format!("wavelength {wavelength}")));
        }
        if !(waist > 0.0 && waist.is_finite()) {
            return Err(Error::InvalidInput(format!("waist {waist}")));
        }
        Ok(Self { wavelength, waist })
    }

    /// Geometry with the given waist and Rayleigh range (wavelength derived).
    pub fn from_rayleigh_range(waist: f64, rayleigh_range: f64) -> Result<Self> {
        Self::new(PI * waist * waist / rayleigh_range, waist)
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn waist(&self) -> f64 {
        self.waist
    }

    pub fn rayleigh_range(&self) -> f64 {
        PI * self.waist * self.waist / self.wavelength
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Beam radius `w(dz)`.
    pub fn width_at(&self, dz: f64) -> f64 {
        let zr = self.rayleigh_range();
        self.waist * (1.0 + (dz / zr) * (dz / zr)).sqrt()
    }

    /// `dw/d(dz)`.
    pub fn width_slope_at(&self, dz: f64) -> f64 {
        let zr = self.rayleigh_range();
        self.waist * self.waist * dz / (zr * zr * self.width_at(dz))
    }

    /// Same geometry with every length multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.wavelength * s, self.waist * s)
    }
}

/// One LG term of a superposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeComponent {
    pub l: i32,
    pub p: u32,
    pub weight: Complex64,
}

impl ModeComponent {
    pub fn new(l: i32, p: u32, weight: Complex64) -> Self {
        Self { l, p, weight }
    }

    /// Order of the Gouy phase, `2p + |l| + 1`.
    pub fn gouy_order(&self) -> f64 {
        (2 * self.p + self.l.unsigned_abs() + 1) as f64
    }
}

/// Precomputed per-component constants.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Term {
    m: u32,
    sign: f64,
    p: u32,
    /// weight * sqrt(2 p!/(π (p+m)!)) * sqrt(2)^m
    coeff: Complex64,
    gouy: f64,
}

/// Normalized superposition of LG modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModeSpec", into = "RawModeSpec")]
pub struct ModeSpec {
    components: Vec<ModeComponent>,
    terms: Vec<Term>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModeSpec {
    components: Vec<ModeComponent>,
}

impl TryFrom<RawModeSpec> for ModeSpec {
    type Error = Error;
    fn try_from(raw: RawModeSpec) -> Result<Self> {
        Self::new(raw.components)
    }
}

impl From<ModeSpec> for RawModeSpec {
    fn from(s: ModeSpec) -> Self {
        Self {
            components: s.components,
        }
    }
}

const NORMALIZATION_TOL: f64 = 1e-12;

impl ModeSpec {
    /// Validates `Σ|weight|² = 1` within 1e-12.
    pub fn new(components: Vec<ModeComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("mode spec has no components".into()));
        }
        let norm: f64 = components.iter().map(|c| c.weight.norm_sqr()).sum();
        if (norm - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidInput(format!(
                "mode weights have squared norm {norm}, expected 1"
            )));
        }
        let terms = components.iter().map(prepare_term).collect();
        Ok(Self { components, terms })
    }

    /// Rescales the weights to unit norm.
    pub fn normalized(components: Vec<ModeComponent>) -> Result<Self> {
        let norm: f64 = components
            .iter()
            .map(|c| c.weight.norm_sqr())
            .sum::<f64>()
            .sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidInput("mode weights are all zero".into()));
        }
        Self::new(
            components
                .into_iter()
                .map(|c| ModeComponent {
                    weight: c.weight / norm,
                    ..c
                })
                .collect(),
        )
    }

    /// Single `LG_{l,p}` mode.
    pub fn lg(l: i32, p: u32) -> Self {
        Self::new(vec![ModeComponent::new(l, p, Complex64::new(1.0, 0.0))])
            .expect("unit weight is normalized")
    }

    /// Equal-weight, in-phase superposition.
    pub fn equal_superposition(modes: &[(i32, u32)]) -> Result<Self> {
        Self::normalized(
            modes
                .iter()
                .map(|&(l, p)| ModeComponent::new(l, p, Complex64::new(1.0, 0.0)))
                .collect(),
        )
    }

    pub fn components(&self) -> &[ModeComponent] {
        &self.components
    }

    pub fn is_single_mode(&self) -> bool {
        self.components.len() == 1
    }

    /// `(l, p)` when this is a single LG mode.
    pub fn single(&self) -> Option<(i32, u32)> {
        match self.components.as_slice() {
            [c] => Some((c.l, c.p)),
            _ => None,
        }
    }

    /// The constant ratio `V = Δ(2p+|l|) / Δl` shared by consecutive
    /// components, when it exists.
    pub fn rotation_rate(&self) -> Option<f64> {
        if self.components.len() < 2 {
            return None;
        }
        let mut rate: Option<f64> = None;
        for pair in self.components.windows(2) {
            let dl = pair[1].l - pair[0].l;
            if dl == 0 {
                return None;
            }
            let dg = pair[1].gouy_order() - pair[0].gouy_order();
            let v = dg / dl as f64;
            match rate {
                None => rate = Some(v),
                Some(r) if (r - v).abs() <= 1e-12 * r.abs().max(1.0) => {}
                Some(_) => return None,
            }
        }
        rate
    }

    pub fn is_rotation_mode(&self) -> bool {
        self.rotation_rate().is_some()
    }

    /// Incoherent average of `2p+|l|+1`; the width-from-moment scale factor.
    pub fn beam_quality(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight.norm_sqr() * c.gouy_order())
            .sum()
    }

    /// Compact text form such as `LG(0,0)+LG(2,0)`.
    pub fn descriptor(&self) -> String {
        self.components
            .iter()
            .map(|c| format!("LG({},{})", c.l, c.p))
            .collect::<Vec<_>>()
            .join("+")
    }
}

fn prepare_term(c: &ModeComponent) -> Term {
    let m = c.l.unsigned_abs();
    // p!/(p+m)!
    let ratio: f64 = (c.p + 1..=c.p + m).map(|k| 1.0 / k as f64).product();
    let norm = (2.0 * ratio / PI).sqrt() * SQRT_2.powi(m as i32);
    Term {
        m,
        sign: if c.l < 0 { -1.0 } else { 1.0 },
        p: c.p,
        coeff: c.weight * norm,
        gouy: c.gouy_order(),
    }
}

/// Generalized Laguerre polynomial `L_p^α(t)` by upward recurrence in `p`.
pub fn laguerre(p: u32, alpha: f64, t: f64) -> f64 {
    if p == 0 {
        return 1.0;
    }
    let mut l0 = 1.0;
    let mut l1 = 1.0 + alpha - t;
    for k in 1..p {
        let kf = k as f64;
        let l2 = ((2.0 * kf + 1.0 + alpha - t) * l1 - (kf + alpha) * l0) / (kf + 1.0);
        l0 = l1;
        l1 = l2;
    }
    l1
}

/// Point source position: lateral `x, y` and the signed focal distance `z`
/// of the detection plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Local beam parameters at a plane offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamFrameParams {
    pub w: f64,
    /// `1/R`; zero at the focal plane.
    pub inv_curvature: f64,
    /// `arctan(dz/z_R)`; multiply by `2p+|l|+1` for a component's Gouy phase.
    pub gouy: f64,
}

pub fn geometry_at(geom: &BeamGeometry, dz: f64) -> BeamFrameParams {
    let zr = geom.rayleigh_range();
    BeamFrameParams {
        w: geom.width_at(dz),
        inv_curvature: dz / (dz * dz + zr * zr),
        gouy: (dz / zr).atan(),
    }
}

/// Transverse amplitude (without curvature phase) and its partial derivatives
/// with respect to the local offsets, the beam radius and the Gouy angle.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Amplitude {
    pub a: Complex64,
    pub d_dx: Complex64,
    pub d_dy: Complex64,
    pub d_w: Complex64,
    pub d_gouy: Complex64,
}

/// Per-plane constants of a superposition: `coeff · w^-(m+1) · e^{-i g ζ}`
/// for every component.
#[derive(Debug, Clone)]
pub(crate) struct Plane<'a> {
    spec: &'a ModeSpec,
    inv_w: f64,
    common: Vec<Complex64>,
}

impl<'a> Plane<'a> {
    pub(crate) fn new(spec: &'a ModeSpec, w: f64, gouy: f64) -> Self {
        let inv_w = 1.0 / w;
        let common = spec
            .terms
            .iter()
            .map(|t| t.coeff * inv_w.powi(t.m as i32 + 1) * Complex64::from_polar(1.0, -t.gouy * gouy))
            .collect();
        Self { spec, inv_w, common }
    }

    pub(crate) fn eval(&self, dx: f64, dy: f64, grad: bool) -> Amplitude {
        let inv_w = self.inv_w;
        let t = 2.0 * (dx * dx + dy * dy) * inv_w * inv_w;
        let ex = (-0.5 * t).exp();
        let mut out = Amplitude::default();
        for (term, &common) in self.spec.terms.iter().zip(&self.common) {
            let m = term.m;
            let zeta = Complex64::new(dx, -term.sign * dy);
            let mut zeta_m1 = Complex64::new(1.0, 0.0);
            for _ in 1..m {
                zeta_m1 *= zeta;
            }
            let zeta_m = if m == 0 { zeta_m1 } else { zeta_m1 * zeta };
            let lag = laguerre(term.p, m as f64, t);
            let h = lag * ex;
            let f = common * zeta_m * h;
            out.a += f;
            if grad {
                let lag1 = if term.p == 0 {
                    0.0
                } else {
                    laguerre(term.p - 1, m as f64 + 1.0, t)
                };
                let hp = (-lag1 - 0.5 * lag) * ex;
                let mf = m as f64;
                let radial = zeta_m * hp * (4.0 * inv_w * inv_w);
                let ang = if m == 0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    zeta_m1 * (mf * h)
                };
                out.d_dx += common * (ang + radial * dx);
                out.d_dy += common * (ang * (-I * term.sign) + radial * dy);
                out.d_w += -(mf + 1.0) * inv_w * f + common * zeta_m * hp * (-2.0 * t * inv_w);
                out.d_gouy += -I * term.gouy * f;
            }
        }
        out
    }
}

pub(crate) fn amplitude(spec: &ModeSpec, w: f64, gouy: f64, dx: f64, dy: f64, grad: bool) -> Amplitude {
    Plane::new(spec, w, gouy).eval(dx, dy, grad)
}

/// Intensity model with every per-plane quantity precomputed, for evaluating
/// many points of one pose.
#[derive(Debug, Clone)]
pub struct IntensityModel<'a> {
    plane: Plane<'a>,
    x_e: f64,
    y_e: f64,
    /// Chain factors `(dw/dθ₃, dζ/dθ₃)` for the third parameter.
    chain: (f64, f64),
}

impl<'a> IntensityModel<'a> {
    /// Parameters `(x_e, y_e, z_e)`.
    pub fn focal(spec: &'a ModeSpec, geom: &BeamGeometry, pose: &Pose) -> Self {
        let dz = -pose.z;
        let bp = geometry_at(geom, dz);
        // a single mode's Gouy phase is global; dropping it keeps I exactly even in z
        let (gouy, chain) = if spec.is_single_mode() {
            (0.0, (axial_chain(geom, dz).0, 0.0))
        } else {
            (bp.gouy, axial_chain(geom, dz))
        };
        Self {
            plane: Plane::new(spec, bp.w, gouy),
            x_e: pose.x,
            y_e: pose.y,
            chain,
        }
    }

    /// Parameters `(x_e, y_e, w)`; the Gouy phase is dropped, so this is
    /// only meaningful for single modes.
    pub fn width(spec: &'a ModeSpec, x_e: f64, y_e: f64, w: f64) -> Self {
        Self {
            plane: Plane::new(spec, w, 0.0),
            x_e,
            y_e,
            chain: (1.0, 0.0),
        }
    }

    pub fn intensity(&self, x: f64, y: f64) -> f64 {
        self.plane.eval(x - self.x_e, y - self.y_e, false).a.norm_sqr()
    }

    pub fn intensity_and_gradient(&self, x: f64, y: f64) -> (f64, [f64; 3]) {
        let amp = self.plane.eval(x - self.x_e, y - self.y_e, true);
        let a = amp.a;
        let (dw, dg) = self.chain;
        let third = amp.d_w * dw + amp.d_gouy * dg;
        (
            a.norm_sqr(),
            [
                -2.0 * re_conj_mul(a, amp.d_dx),
                -2.0 * re_conj_mul(a, amp.d_dy),
                2.0 * re_conj_mul(a, third),
            ],
        )
    }
}

#[inline]
fn re_conj_mul(a: Complex64, b: Complex64) -> f64 {
    a.re * b.re + a.im * b.im
}

/// Complex field at `(x, y)` on the detection plane, including the curvature
/// and propagation phases.
pub fn field_amplitude(spec: &ModeSpec, geom: &BeamGeometry, pose: &Pose, x: f64, y: f64) -> Complex64 {
    let dz = -pose.z;
    let bp = geometry_at(geom, dz);
    let (dx, dy) = (x - pose.x, y - pose.y);
    let amp = amplitude(spec, bp.w, bp.gouy, dx, dy, false);
    let k = geom.wavenumber();
    let phi = 0.5 * k * (dx * dx + dy * dy) * bp.inv_curvature - k * dz;
    amp.a * Complex64::from_polar(1.0, phi)
}

/// Field and its derivatives with respect to `(x_e, y_e, z_e)`.
pub fn field_and_gradient(
    spec: &ModeSpec,
    geom: &BeamGeometry,
    pose: &Pose,
    x: f64,
    y: f64,
) -> (Complex64, [Complex64; 3]) {
    let dz = -pose.z;
    let zr = geom.rayleigh_range();
    let bp = geometry_at(geom, dz);
    let (dx, dy) = (x - pose.x, y - pose.y);
    let amp = amplitude(spec, bp.w, bp.gouy, dx, dy, true);
    let k = geom.wavenumber();
    let r2 = dx * dx + dy * dy;
    let phi = 0.5 * k * r2 * bp.inv_curvature - k * dz;
    let rot = Complex64::from_polar(1.0, phi);
    let den = dz * dz + zr * zr;
    let dq_ddz = (zr * zr - dz * dz) / (den * den);
    let dphi = [
        -k * bp.inv_curvature * dx,
        -k * bp.inv_curvature * dy,
        -(0.5 * k * r2 * dq_ddz - k),
    ];
    let (dw, dg) = axial_chain(geom, dz);
    let da = [-amp.d_dx, -amp.d_dy, amp.d_w * dw + amp.d_gouy * dg];
    let grad = std::array::from_fn(|i| rot * (da[i] + I * dphi[i] * amp.a));
    (amp.a * rot, grad)
}

/// `(dw/dz_e, dζ/dz_e)` at plane offset `dz = -z_e`.
fn axial_chain(geom: &BeamGeometry, dz: f64) -> (f64, f64) {
    let zr = geom.rayleigh_range();
    (-geom.width_slope_at(dz), -zr / (zr * zr + dz * dz))
}

pub fn intensity(spec: &ModeSpec, geom: &BeamGeometry, pose: &Pose, x: f64, y: f64) -> f64 {
    IntensityModel::focal(spec, geom, pose).intensity(x, y)
}

/// Intensity and its gradient with respect to `(x_e, y_e, z_e)`.
pub fn intensity_and_gradient(
    spec: &ModeSpec,
    geom: &BeamGeometry,
    pose: &Pose,
    x: f64,
    y: f64,
) -> (f64, [f64; 3]) {
    IntensityModel::focal(spec, geom, pose).intensity_and_gradient(x, y)
}

/// Intensity of a single LG mode parameterized by its local radius `w`
/// instead of the focal distance, with gradient over `(x_e, y_e, w)`.
pub fn intensity_and_gradient_width(
    spec: &ModeSpec,
    x_e: f64,
    y_e: f64,
    w: f64,
    x: f64,
    y: f64,
) -> Result<(f64, [f64; 3])> {
    if !spec.is_single_mode() {
        return Err(Error::InvalidInput(
            "width parameterization needs a single LG mode".into(),
        ));
    }
    if !(w > 0.0) {
        return Err(Error::InvalidInput(format!("beam radius {w}")));
    }
    Ok(IntensityModel::width(spec, x_e, y_e, w).intensity_and_gradient(x, y))
}

/// Rotation of a rotation mode's pattern relative to the focal plane,
/// `V·arctan(dz/z_R)`. With this crate's phase conventions the pattern at
/// `dz` is the focal pattern turned clockwise by this angle.
pub fn rotation_angle(spec: &ModeSpec, geom: &BeamGeometry, dz: f64) -> Result<f64> {
    let v = spec.rotation_rate().ok_or(Error::NotRotationMode)?;
    Ok(v * (dz / geom.rayleigh_range()).atan())
}
