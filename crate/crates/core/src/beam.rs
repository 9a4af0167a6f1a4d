//! Grating output-beam profiles and their mapping to ion Rabi frequencies.
//!
//! Two intensity models are provided: a single focused Gaussian and a
//! two-beamlet interference surrogate that reproduces a double-peaked output
//! with a central dip. Along the scan axis the two-beamlet field is
//!
//! ```text
//! E(x) = g(x - x1) + a exp(i phi) g(x - x2),   g(u) = exp(-u^2 / w^2)
//! ```
//!
//! with `x1,2 = center -/+ separation / 2`, and the intensity is
//! `peak * |E|^2`. The Rabi frequency scales with the field amplitude,
//! i.e. with the square root of the intensity.

use std::f64::consts::{PI, TAU};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{multi_start, LmConfig, ResidualModel};

/// Probe wavelength of the clock transition, m.
pub const DEFAULT_WAVELENGTH: f64 = 435e-9;
/// Default beamlet waist for the two-beamlet surrogate, m.
pub const DEFAULT_BEAMLET_WAIST: f64 = 0.9e-6;
/// Minimum number of scan points accepted by [`fit_profile`].
pub const MIN_SCAN_POINTS: usize = 7;

const UM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileMode {
    SingleGaussian,
    TwoBeamlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GratingOutputModel {
    /// Emission angle, degrees. Metadata only; no projection is applied.
    pub emission_angle: f64,
    /// Beam (or beamlet) waist, m.
    pub waist: f64,
    /// Height of the focus above the chip, m.
    pub focus_height: f64,
    /// Peak intensity of one beamlet (or of the single beam), W/m^2 or relative.
    pub peak_intensity: f64,
    pub mode: ProfileMode,
    /// Position of the profile center along the scan axis, m.
    pub center: f64,
    pub beamlet_separation: f64,
    pub beamlet_phase: f64,
    pub beamlet_amplitude_ratio: f64,
    pub wavelength: f64,
}

impl GratingOutputModel {
    pub fn single_gaussian(center: f64, waist: f64, peak_intensity: f64) -> Result<Self> {
        let m = Self {
            emission_angle: 63.0,
            waist,
            focus_height: 20e-6,
            peak_intensity,
            mode: ProfileMode::SingleGaussian,
            center,
            beamlet_separation: 0.0,
            beamlet_phase: 0.0,
            beamlet_amplitude_ratio: 0.0,
            wavelength: DEFAULT_WAVELENGTH,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn two_beamlet(
        center: f64,
        separation: f64,
        waist: f64,
        phase: f64,
        ratio: f64,
        peak_intensity: f64,
    ) -> Result<Self> {
        let m = Self {
            emission_angle: 63.0,
            waist,
            focus_height: 20e-6,
            peak_intensity,
            mode: ProfileMode::TwoBeamlet,
            center,
            beamlet_separation: separation,
            beamlet_phase: phase,
            beamlet_amplitude_ratio: ratio,
            wavelength: DEFAULT_WAVELENGTH,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.waist > 0.0) {
            return Err(Error::invalid(format!("waist must be positive, got {}", self.waist)));
        }
        if !(self.focus_height > 0.0) {
            return Err(Error::invalid(format!(
                "focus height must be positive, got {}",
                self.focus_height
            )));
        }
        if !(self.beamlet_amplitude_ratio >= 0.0) {
            return Err(Error::invalid(format!(
                "beamlet amplitude ratio must be >= 0, got {}",
                self.beamlet_amplitude_ratio
            )));
        }
        if !(self.peak_intensity >= 0.0) {
            return Err(Error::invalid("peak intensity must be >= 0"));
        }
        Ok(())
    }

    /// Intensity along the scan axis for either mode.
    pub fn intensity(&self, x: f64) -> Result<f64> {
        match self.mode {
            ProfileMode::SingleGaussian => {
                gaussian_intensity(x - self.center, 0.0, self.waist, self.wavelength, self.peak_intensity)
            }
            ProfileMode::TwoBeamlet => two_beamlet_intensity(x, self),
        }
    }
}

pub fn rayleigh_range(waist: f64, wavelength: f64) -> f64 {
    PI * waist * waist / wavelength
}

/// Paraxial Gaussian-beam irradiance at transverse offset `r` and axial
/// distance `z` from the focus.
pub fn gaussian_intensity(r: f64, z: f64, waist: f64, wavelength: f64, peak: f64) -> Result<f64> {
    if !(wavelength > 0.0) {
        return Err(Error::invalid(format!("wavelength must be positive, got {wavelength}")));
    }
    if !(waist > wavelength / PI) {
        return Err(Error::invalid(format!(
            "waist {waist} m is below the paraxial limit lambda/pi = {} m",
            wavelength / PI
        )));
    }
    let zr = rayleigh_range(waist, wavelength);
    let wz2 = waist * waist * (1.0 + (z / zr).powi(2));
    Ok(peak * waist * waist / wz2 * (-2.0 * r * r / wz2).exp())
}

/// Interference of two displaced Gaussian beamlets.
pub fn two_beamlet_intensity(x: f64, model: &GratingOutputModel) -> Result<f64> {
    if model.mode != ProfileMode::TwoBeamlet {
        return Err(Error::invalid("model is not in two-beamlet mode"));
    }
    model.validate()?;
    Ok(model.peak_intensity
        * field_sq(
            x,
            model.center,
            model.beamlet_separation,
            model.waist,
            model.beamlet_phase,
            model.beamlet_amplitude_ratio,
        ))
}

fn field_sq(x: f64, center: f64, sep: f64, waist: f64, phase: f64, ratio: f64) -> f64 {
    let g1 = (-((x - center + sep / 2.0) / waist).powi(2)).exp();
    let g2 = (-((x - center - sep / 2.0) / waist).powi(2)).exp();
    (g1 * g1 + ratio * ratio * g2 * g2 + 2.0 * ratio * g1 * g2 * phase.cos()).max(0.0)
}

/// Calibration pair tying an intensity to a measured Rabi frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiReference {
    /// rad/s
    pub rabi_ref: f64,
    pub intensity_ref: f64,
}

impl RabiReference {
    /// 2pi x 121.1 kHz at 300 nW/um^2 (3e5 W/m^2).
    pub fn waveguide_peak() -> Self {
        Self {
            rabi_ref: TAU * 121.1e3,
            intensity_ref: 300e-9 / 1e-12,
        }
    }
}

/// `Omega = rabi_ref * sqrt(intensity / intensity_ref)`.
pub fn rabi_from_intensity(intensity: f64, reference: &RabiReference) -> Result<f64> {
    if !(reference.intensity_ref > 0.0) {
        return Err(Error::invalid("reference intensity must be positive"));
    }
    if !(intensity >= 0.0) {
        return Err(Error::invalid(format!("intensity must be >= 0, got {intensity}")));
    }
    Ok(reference.rabi_ref * (intensity / reference.intensity_ref).sqrt())
}

/// `Omega = pi / t_pi`.
pub fn pi_time_to_rabi(t_pi: f64) -> Result<f64> {
    if !(t_pi > 0.0 && t_pi.is_finite()) {
        return Err(Error::invalid(format!("pi time must be positive, got {t_pi}")));
    }
    Ok(PI / t_pi)
}

pub fn rabi_to_pi_time(rabi: f64) -> Result<f64> {
    if !(rabi > 0.0 && rabi.is_finite()) {
        return Err(Error::invalid(format!("Rabi frequency must be positive, got {rabi}")));
    }
    Ok(PI / rabi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    /// Position along the trap axis, m.
    pub position: f64,
    /// rad/s
    pub rabi: f64,
    pub rabi_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiPositionScan {
    points: Vec<ScanPoint>,
}

impl RabiPositionScan {
    pub fn new(points: Vec<ScanPoint>) -> Result<Self> {
        for w in points.windows(2) {
            if !(w[1].position > w[0].position) {
                return Err(Error::invalid(format!(
                    "positions must be strictly increasing ({} m after {} m)",
                    w[1].position, w[0].position
                )));
            }
        }
        if let Some(p) = points.iter().find(|p| p.rabi_err.is_some_and(|e| !(e > 0.0))) {
            return Err(Error::invalid(format!(
                "Rabi error must be positive at {} m",
                p.position
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[ScanPoint] {
        &self.points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum ProfileFlag {
    Degenerate,
    /// Second beamlet amplitude collapsed; the profile is a single beam.
    BeamletVanishes,
    /// Beamlets overlap so closely that they act as one.
    BeamletsMerged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileFitReport {
    pub mode: ProfileMode,
    pub param_names: Vec<String>,
    /// SI units (m, rad, rad/s).
    pub values: Vec<f64>,
    pub std_errs: Vec<f64>,
    pub reference: RabiReference,
    pub chi2: f64,
    pub dof: usize,
    /// rad/s
    pub residual_rms: f64,
    /// Intensity maxima of the fitted model, highest first, m.
    pub peaks: Vec<f64>,
    pub peak_separation: Option<f64>,
    /// `1 - I_dip / min(I_peak)` between the two highest maxima.
    pub dip_depth: Option<f64>,
    pub iterations: usize,
    pub starts: usize,
    pub flags: Vec<ProfileFlag>,
}

impl ProfileFitReport {
    pub fn has_flag(&self, f: &ProfileFlag) -> bool {
        self.flags.contains(f)
    }
}

/// Scan fit in scaled units: positions in um, Rabi frequencies divided by
/// the largest observed value.
struct ProfileProblem {
    mode: ProfileMode,
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl ProfileProblem {
    /// Relative field amplitude `|E|` at `x` for parameter vector `p`.
    fn amplitude(&self, p: &[f64], x: f64) -> f64 {
        match self.mode {
            ProfileMode::SingleGaussian => p[0] * (-((x - p[1]) / p[2]).powi(2)).exp(),
            ProfileMode::TwoBeamlet => p[0] * field_sq(x, p[1], p[2], p[3], p[4], p[5]).sqrt(),
        }
    }
}

impl ResidualModel for ProfileProblem {
    fn n_params(&self) -> usize {
        match self.mode {
            ProfileMode::SingleGaussian => 3,
            ProfileMode::TwoBeamlet => 6,
        }
    }

    fn residuals(&self, p: &[f64]) -> Option<DVector<f64>> {
        let waist = match self.mode {
            ProfileMode::SingleGaussian => p[2],
            ProfileMode::TwoBeamlet => p[3],
        };
        if !(waist > 0.0) {
            return None;
        }
        Some(DVector::from_iterator(
            self.x.len(),
            self.x
                .iter()
                .zip(&self.y)
                .zip(&self.w)
                .map(|((x, y), w)| (y - self.amplitude(p, *x)) * w),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct ProfileFitOptions {
    pub separation_seeds_um: Vec<f64>,
    pub phase_seeds: Vec<f64>,
    pub waist_seeds_um: Vec<f64>,
    pub lm: LmConfig,
    pub reference_intensity: f64,
}

impl Default for ProfileFitOptions {
    fn default() -> Self {
        Self {
            separation_seeds_um: vec![0.8, 1.4, 2.0, 3.0],
            phase_seeds: vec![0.0, PI / 2.0, PI, 3.0 * PI / 2.0],
            waist_seeds_um: vec![0.6, 1.0, 1.6],
            lm: LmConfig::default(),
            reference_intensity: 1.0,
        }
    }
}

/// Fits an intensity model (through the square-root Rabi mapping) to a
/// Rabi-frequency scan. The returned model carries relative intensity with
/// `peak_intensity = reference_intensity`; the fitted Rabi scale is the
/// reference pair in the report.
pub fn fit_profile(
    scan: &RabiPositionScan,
    mode: ProfileMode,
    opts: &ProfileFitOptions,
) -> Result<(GratingOutputModel, ProfileFitReport)> {
    let pts = scan.points();
    if pts.len() < MIN_SCAN_POINTS {
        return Err(Error::invalid(format!(
            "need at least {MIN_SCAN_POINTS} scan points, got {}",
            pts.len()
        )));
    }
    let with_err = pts.iter().filter(|p| p.rabi_err.is_some()).count();
    if with_err != 0 && with_err != pts.len() {
        return Err(Error::invalid(
            "either every point or no point may carry an uncertainty",
        ));
    }
    let y_scale = pts.iter().map(|p| p.rabi.abs()).fold(0.0, f64::max);
    if !(y_scale > 0.0) {
        return Err(Error::Degenerate("all Rabi frequencies are zero".into()));
    }
    let prob = ProfileProblem {
        mode,
        x: pts.iter().map(|p| p.position / UM).collect(),
        y: pts.iter().map(|p| p.rabi / y_scale).collect(),
        w: pts.iter().map(|p| p.rabi_err.map_or(1.0, |e| y_scale / e)).collect(),
    };

    let starts = profile_starts(&prob, opts);
    let res = multi_start(&prob, &starts, &opts.lm)?;
    let mut cov = res.covariance();
    if with_err == 0 {
        let dof = res.dof();
        let s = if dof > 0 { res.chi2 / dof as f64 } else { 0.0 };
        if let Some(c) = cov.as_mut() {
            *c *= s;
        }
    }

    let mut p = res.params.clone();
    let mut flags = Vec::new();
    if cov.is_none() {
        flags.push(ProfileFlag::Degenerate);
    }
    let (names, model) = match mode {
        ProfileMode::SingleGaussian => {
            p[0] = p[0].abs();
            let model = GratingOutputModel::single_gaussian(p[1] * UM, p[2] * UM, opts.reference_intensity)?;
            (vec!["rabi_scale", "center", "waist"], model)
        }
        ProfileMode::TwoBeamlet => {
            canonicalize_beamlets(&mut p);
            let model =
                GratingOutputModel::two_beamlet(p[1] * UM, p[2] * UM, p[3] * UM, p[4], p[5], opts.reference_intensity)?;
            if p[5] < 1e-3 || p[5] > 1e3 {
                flags.push(ProfileFlag::BeamletVanishes);
            }
            if p[2] < 0.05 * p[3] {
                flags.push(ProfileFlag::BeamletsMerged);
            }
            (
                vec![
                    "rabi_scale",
                    "center",
                    "separation",
                    "waist",
                    "phase",
                    "amplitude_ratio",
                ],
                model,
            )
        }
    };

    // unit conversion back to SI
    let unit = |name: &str| match name {
        "rabi_scale" => y_scale,
        "center" | "separation" | "waist" => UM,
        _ => 1.0,
    };
    let values: Vec<f64> = names.iter().zip(&p).map(|(n, v)| v * unit(n)).collect();
    let std_errs: Vec<f64> = names
        .iter()
        .enumerate()
        .map(|(i, n)| cov.as_ref().map_or(f64::NAN, |c| c[(i, i)].max(0.0).sqrt() * unit(n)))
        .collect();

    let reference = RabiReference {
        rabi_ref: values[0],
        intensity_ref: opts.reference_intensity,
    };
    let residual_rms = {
        let ss: f64 = pts
            .iter()
            .map(|pt| {
                let m = rabi_from_intensity(model.intensity(pt.position).unwrap_or(0.0), &reference).unwrap_or(0.0);
                (pt.rabi - m).powi(2)
            })
            .sum();
        (ss / pts.len() as f64).sqrt()
    };

    let lo = pts[0].position - 2.0 * model.waist;
    let hi = pts[pts.len() - 1].position + 2.0 * model.waist;
    let peaks = find_maxima(|x| model.intensity(x).unwrap_or(0.0), lo, hi, model.waist / 200.0);
    let (peak_separation, dip_depth) = if peaks.len() >= 2 {
        let (a, b) = (peaks[0].min(peaks[1]), peaks[0].max(peaks[1]));
        let ia = model.intensity(a)?;
        let ib = model.intensity(b)?;
        let dip = golden_min(|x| model.intensity(x).unwrap_or(0.0), a, b);
        let idip = model.intensity(dip)?;
        (Some(b - a), Some(1.0 - idip / ia.min(ib)))
    } else {
        (None, None)
    };

    let report = ProfileFitReport {
        mode,
        param_names: names.iter().map(|s| s.to_string()).collect(),
        values,
        std_errs,
        reference,
        // unweighted fits ran on max-normalized values
        chi2: if with_err == 0 {
            res.chi2 * y_scale * y_scale
        } else {
            res.chi2
        },
        dof: res.dof(),
        residual_rms,
        peaks,
        peak_separation,
        dip_depth,
        iterations: res.iterations,
        starts: starts.len(),
        flags,
    };
    Ok((model, report))
}

/// Maps equivalent two-beamlet parameterizations onto `separation >= 0`,
/// `ratio >= 0`, `phase` in `[0, 2pi)`.
fn canonicalize_beamlets(p: &mut [f64]) {
    // p = [scale, center, sep, waist, phase, ratio]
    if p[5] < 0.0 {
        p[5] = -p[5];
        p[4] += PI;
    }
    if p[2] < 0.0 {
        // swap which beamlet is the reference
        p[2] = -p[2];
        if p[5] > 0.0 {
            p[0] *= p[5];
            p[5] = 1.0 / p[5];
        }
        p[4] = -p[4];
    }
    p[0] = p[0].abs();
    p[4] = p[4].rem_euclid(TAU);
}

fn profile_starts(prob: &ProfileProblem, opts: &ProfileFitOptions) -> Vec<Vec<f64>> {
    // weighted centroid of the intensity-like signal
    let wsum: f64 = prob.y.iter().map(|y| y * y).sum();
    let centroid = if wsum > 0.0 {
        prob.x.iter().zip(&prob.y).map(|(x, y)| x * y * y).sum::<f64>() / wsum
    } else {
        prob.x.iter().sum::<f64>() / prob.x.len() as f64
    };
    let ymax = prob.y.iter().copied().fold(0.0, f64::max);
    let mut starts = Vec::new();
    match prob.mode {
        ProfileMode::SingleGaussian => {
            for &w in &opts.waist_seeds_um {
                starts.push(vec![ymax, centroid, w]);
            }
        }
        ProfileMode::TwoBeamlet => {
            for &s in &opts.separation_seeds_um {
                for &ph in &opts.phase_seeds {
                    for &w in &opts.waist_seeds_um {
                        starts.push(vec![ymax, centroid, s, w, ph, 1.0]);
                    }
                }
            }
        }
    }
    starts
}

/// Local maxima of `f` on `[lo, hi]`, refined, sorted by height descending.
fn find_maxima(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).ceil() as usize;
    let xs: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).collect();
    let ys: Vec<f64> = xs.iter().map(|x| f(*x)).collect();
    let mut out: Vec<(f64, f64)> = Vec::new();
    for i in 1..xs.len().saturating_sub(1) {
        if ys[i] > ys[i - 1] && ys[i] >= ys[i + 1] {
            let x = golden_min(|x| -f(x), xs[i - 1], xs[i + 1]);
            out.push((x, f(x)));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out.into_iter().map(|(x, _)| x).collect()
}

/// Golden-section minimum of a unimodal function on `[a, b]`.
fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() <= 1e-15 * (a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}
