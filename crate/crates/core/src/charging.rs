//! Photo-induced charging and discharging of the trap surface, seen as a
//! drift of the axial secular frequency.
//!
//! While the light is on the frequency follows two saturating exponentials
//! of opposite sign (a fast metal effect and a slow dielectric effect):
//!
//! ```text
//! f_q(t)  = f0 + df1 (1 - exp(-(t - t_on)/T1)) - df2 (1 - exp(-(t - t_on)/T2))
//! ```
//!
//! and after turn-off it relaxes back towards `f0`:
//!
//! ```text
//! f_dq(t) = f0 - df3 exp(-(t - t_off)/T3) - df4 exp(-(t - t_off)/T4)
//! ```
//!
//! Amplitudes may take either sign. The fast/slow ordering `T1 < T2`,
//! `T3 < T4` fixes the labelling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{multi_start, weighted_linear_fit, LmConfig, LmResult, ResidualModel};

/// Time-constant seeds (s) for the multi-start search.
pub const DEFAULT_SEED_GRID: [f64; 5] = [1.0, 10.0, 100.0, 1e3, 1e4];

/// Relative standard error above which a time constant is reported as weakly identified.
pub const DEFAULT_WEAK_REL_ERR: f64 = 0.25;

/// Largest |correlation| of a time constant with any other parameter before
/// it is reported as weakly identified.
pub const DEFAULT_WEAK_CORRELATION: f64 = 0.95;

/// Field per unit frequency offset: 2.4 kV/cm cancels 0.1 MHz.
pub const DEFAULT_FIELD_SENSITIVITY: f64 = 2.4e5 / 1e5;

/// Minimum number of points in a fit window.
pub const MIN_FIT_POINTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargingModelParams {
    pub df1: f64,
    pub df2: f64,
    pub t1: f64,
    pub t2: f64,
    pub t_on: f64,
    pub f0: f64,
}

impl ChargingModelParams {
    pub fn new(df1: f64, df2: f64, t1: f64, t2: f64, t_on: f64, f0: f64) -> Result<Self> {
        check_time_constants("T1", t1, "T2", t2)?;
        check_f0(f0)?;
        Ok(Self {
            df1,
            df2,
            t1,
            t2,
            t_on,
            f0,
        })
    }

    /// Frequency shift relative to `f0` at time `t`.
    pub fn shift_at(&self, t: f64) -> Result<f64> {
        Ok(charging_freq(t, self)? - self.f0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DischargeModelParams {
    pub df3: f64,
    pub df4: f64,
    pub t3: f64,
    pub t4: f64,
    pub t_off: f64,
    pub f0: f64,
}

impl DischargeModelParams {
    pub fn new(df3: f64, df4: f64, t3: f64, t4: f64, t_off: f64, f0: f64) -> Result<Self> {
        check_time_constants("T3", t3, "T4", t4)?;
        check_f0(f0)?;
        Ok(Self {
            df3,
            df4,
            t3,
            t4,
            t_off,
            f0,
        })
    }
}

fn check_time_constants(fast_name: &str, fast: f64, slow_name: &str, slow: f64) -> Result<()> {
    if !(fast > 0.0 && slow > 0.0 && fast.is_finite() && slow.is_finite()) {
        return Err(Error::invalid(format!("{fast_name} and {slow_name} must be positive")));
    }
    if !(fast < slow) {
        return Err(Error::invalid(format!(
            "{fast_name} ({fast} s) must be shorter than {slow_name} ({slow} s)"
        )));
    }
    Ok(())
}

fn check_f0(f0: f64) -> Result<()> {
    if !(f0.is_finite() && f0 > 0.0) {
        return Err(Error::invalid(format!("f0 must be positive, got {f0}")));
    }
    Ok(())
}

pub fn charging_freq(t: f64, p: &ChargingModelParams) -> Result<f64> {
    if t < p.t_on {
        return Err(Error::invalid(format!("t = {t} s precedes turn-on at {} s", p.t_on)));
    }
    let u = t - p.t_on;
    // grouped so the long-time limit is exactly f0 + settled_offset
    Ok(p.f0 + (p.df1 * -(-u / p.t1).exp_m1() - p.df2 * -(-u / p.t2).exp_m1()))
}

pub fn discharge_freq(t: f64, p: &DischargeModelParams) -> Result<f64> {
    if t < p.t_off {
        return Err(Error::invalid(format!("t = {t} s precedes turn-off at {} s", p.t_off)));
    }
    let v = t - p.t_off;
    Ok(p.f0 - p.df3 * (-v / p.t3).exp() - p.df4 * (-v / p.t4).exp())
}

/// Settled offset with the light on, `df1 - df2`.
pub fn settled_offset(p: &ChargingModelParams) -> f64 {
    p.df1 - p.df2
}

/// Linear estimate of the field (V/m) that cancels a frequency offset (Hz).
pub fn compensation_field(offset: f64, sensitivity: f64) -> Result<f64> {
    if !(sensitivity > 0.0) {
        return Err(Error::invalid(format!(
            "field sensitivity must be positive, got {sensitivity}"
        )));
    }
    Ok(offset * sensitivity)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DutyCycle {
    /// Light-on time per cycle, s.
    pub probe_time: f64,
    pub duty_fraction: f64,
}

impl DutyCycle {
    pub fn new(probe_time: f64, duty_fraction: f64) -> Result<Self> {
        if !(probe_time > 0.0) {
            return Err(Error::invalid(format!("probe time must be positive, got {probe_time}")));
        }
        if !(duty_fraction > 0.0 && duty_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "duty fraction must be in (0, 1], got {duty_fraction}"
            )));
        }
        Ok(Self {
            probe_time,
            duty_fraction,
        })
    }

    pub fn cycle_period(&self) -> f64 {
        self.probe_time / self.duty_fraction
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    /// Equivalent continuous illumination, s.
    pub exposure: f64,
    pub cycle_period: f64,
}

/// Continuous-equivalent exposure under pulsed illumination. Assumes the
/// charging responds linearly to the time-averaged light.
pub fn effective_exposure(duty: &DutyCycle, wall_time: f64) -> Result<Exposure> {
    if !(wall_time >= 0.0) {
        return Err(Error::invalid(format!("wall time must be >= 0, got {wall_time}")));
    }
    Ok(Exposure {
        exposure: wall_time * duty.duty_fraction,
        cycle_period: duty.cycle_period(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqPoint {
    pub time: f64,
    pub freq: f64,
    pub freq_err: Option<f64>,
}

/// Secular frequency record with the intervals during which light was on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySeries {
    points: Vec<FreqPoint>,
    light_on_intervals: Vec<(f64, f64)>,
}

impl FrequencySeries {
    pub fn new(points: Vec<FreqPoint>, light_on_intervals: Vec<(f64, f64)>) -> Result<Self> {
        for (i, w) in points.windows(2).enumerate() {
            if !(w[1].time > w[0].time) {
                return Err(Error::invalid(format!(
                    "times must be strictly increasing (row {} at {} s after {} s)",
                    i + 1,
                    w[1].time,
                    w[0].time
                )));
            }
        }
        if let Some(p) = points.iter().find(|p| !(p.freq > 0.0)) {
            return Err(Error::invalid(format!(
                "frequency must be positive, got {} at t = {}",
                p.freq, p.time
            )));
        }
        if let Some(p) = points.iter().find(|p| p.freq_err.is_some_and(|e| !(e > 0.0))) {
            return Err(Error::invalid(format!(
                "frequency error must be positive at t = {}",
                p.time
            )));
        }
        for &(a, b) in &light_on_intervals {
            if !(b > a) {
                return Err(Error::invalid(format!(
                    "light-on interval ({a}, {b}) is empty or reversed"
                )));
            }
        }
        Ok(Self {
            points,
            light_on_intervals,
        })
    }

    pub fn points(&self) -> &[FreqPoint] {
        &self.points
    }

    pub fn light_on_intervals(&self) -> &[(f64, f64)] {
        &self.light_on_intervals
    }

    /// Mean frequency before `t`, if any points exist there.
    pub fn baseline_before(&self, t: f64) -> Option<f64> {
        let pre: Vec<f64> = self.points.iter().filter(|p| p.time < t).map(|p| p.freq).collect();
        (!pre.is_empty()).then(|| pre.iter().sum::<f64>() / pre.len() as f64)
    }

    fn first_light_on(&self) -> Option<f64> {
        self.light_on_intervals
            .iter()
            .map(|iv| iv.0)
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
    }

    /// End of the light-on interval starting at (or containing) `t_on`.
    fn light_off_after(&self, t_on: f64) -> Option<f64> {
        self.light_on_intervals
            .iter()
            .filter(|(a, b)| *a <= t_on + 1e-9 && *b > t_on)
            .map(|iv| iv.1)
            .next()
    }

    /// Next turn-on strictly after `t`.
    fn light_on_after(&self, t: f64) -> Option<f64> {
        self.light_on_intervals
            .iter()
            .map(|iv| iv.0)
            .filter(|a| *a > t)
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
    }

    fn window(&self, start: f64, end: Option<f64>) -> Vec<FreqPoint> {
        self.points
            .iter()
            .filter(|p| p.time >= start && end.is_none_or(|e| p.time <= e))
            .copied()
            .collect()
    }
}

/// How the unshifted frequency `f0` is treated in a fit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum F0Mode {
    /// Baseline mean when pre-illumination data exist, otherwise fitted.
    #[default]
    Auto,
    /// Mean of the points before the first turn-on.
    Baseline,
    Fixed(f64),
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "flag", content = "detail", rename_all = "snake_case")]
pub enum FitFlag {
    /// Covariance is singular; some parameter combination is unconstrained.
    Degenerate,
    /// Time constant with a large relative error, or nearly collinear with
    /// another parameter.
    WeaklyIdentified(String),
    /// Fitted time constant longer than the observed window.
    BeyondWindow(String),
    /// Discharge amplitudes put the frequency above `f0`; sign convention applied.
    DischargeAboveBaseline,
    /// Residuals fail the normality check.
    NonNormalResiduals,
}

/// Outcome of a charging or discharging fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpFitReport {
    pub param_names: Vec<String>,
    pub values: Vec<f64>,
    /// Square roots of the covariance diagonal; NaN where undefined.
    pub std_errs: Vec<f64>,
    pub covariance: Option<Vec<Vec<f64>>>,
    pub chi2: f64,
    pub dof: usize,
    pub residual_rms: f64,
    pub n_points: usize,
    pub f0_mode: String,
    pub iterations: usize,
    pub starts: usize,
    pub flags: Vec<FitFlag>,
}

impl ExpFitReport {
    pub fn std_err_of(&self, name: &str) -> Option<f64> {
        let i = self.param_names.iter().position(|n| n == name)?;
        Some(self.std_errs[i])
    }

    pub fn has_flag(&self, flag: &FitFlag) -> bool {
        self.flags.contains(flag)
    }
}

#[derive(Debug, Clone)]
pub struct ChargingFitOptions {
    pub f0: F0Mode,
    pub seed_grid: Vec<f64>,
    pub weak_rel_err: f64,
    pub weak_correlation: f64,
    pub lm: LmConfig,
}

impl Default for ChargingFitOptions {
    fn default() -> Self {
        Self {
            f0: F0Mode::Auto,
            seed_grid: DEFAULT_SEED_GRID.to_vec(),
            weak_rel_err: DEFAULT_WEAK_REL_ERR,
            weak_correlation: DEFAULT_WEAK_CORRELATION,
            lm: LmConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DischargeFitOptions {
    pub f0: F0Mode,
    /// Charging shift at turn-off; when set, `df3 + df4 = -shift` is imposed.
    pub continuity: Option<f64>,
    pub seed_grid: Vec<f64>,
    pub weak_rel_err: f64,
    pub weak_correlation: f64,
    pub lm: LmConfig,
}

impl Default for DischargeFitOptions {
    fn default() -> Self {
        Self {
            f0: F0Mode::Auto,
            continuity: None,
            seed_grid: DEFAULT_SEED_GRID.to_vec(),
            weak_rel_err: DEFAULT_WEAK_REL_ERR,
            weak_correlation: DEFAULT_WEAK_CORRELATION,
            lm: LmConfig::default(),
        }
    }
}

/// Which family of exponentials a fit uses.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    /// `f0 + a (1 - e1) - b (1 - e2)`
    Charging,
    /// `f0 - a e1 - b e2`
    Discharge,
}

impl Shape {
    /// Basis functions multiplying the two amplitudes.
    fn basis(self, u: f64, t_fast: f64, t_slow: f64) -> (f64, f64) {
        let e1 = (-u / t_fast).exp();
        let e2 = (-u / t_slow).exp();
        match self {
            Shape::Charging => (1.0 - e1, -(1.0 - e2)),
            Shape::Discharge => (-e1, -e2),
        }
    }

    /// d(basis)/dT for each term.
    fn basis_dt(self, u: f64, t_fast: f64, t_slow: f64) -> (f64, f64) {
        let e1 = (-u / t_fast).exp();
        let e2 = (-u / t_slow).exp();
        let d1 = e1 * u / (t_fast * t_fast);
        let d2 = e2 * u / (t_slow * t_slow);
        match self {
            Shape::Charging => (-d1, d2),
            Shape::Discharge => (-d1, -d2),
        }
    }
}

/// Two-exponential model on a window of points.
///
/// Free parameters, in order: `a`, `b` (omitted when tied by continuity),
/// `T_fast`, `T_slow`, and `f0` when free.
struct TwoExpProblem {
    shape: Shape,
    u: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    f0_fixed: Option<f64>,
    /// With continuity: `a + b = -tie` (discharge) so `b = -tie - a`.
    tie: Option<f64>,
}

impl TwoExpProblem {
    fn unpack(&self, p: &[f64]) -> (f64, f64, f64, f64, f64) {
        let mut it = p.iter().copied();
        let a = it.next().unwrap();
        let b = match self.tie {
            Some(s) => -s - a,
            None => it.next().unwrap(),
        };
        let tf = it.next().unwrap();
        let ts = it.next().unwrap();
        let f0 = self.f0_fixed.unwrap_or_else(|| it.next().unwrap());
        (a, b, tf, ts, f0)
    }

    fn model(&self, p: &[f64], u: f64) -> f64 {
        let (a, b, tf, ts, f0) = self.unpack(p);
        let (g1, g2) = self.shape.basis(u, tf, ts);
        f0 + a * g1 + b * g2
    }
}

impl ResidualModel for TwoExpProblem {
    fn n_params(&self) -> usize {
        2 + usize::from(self.tie.is_none()) + 1 + usize::from(self.f0_fixed.is_none())
    }

    fn residuals(&self, p: &[f64]) -> Option<DVector<f64>> {
        let (_, _, tf, ts, _) = self.unpack(p);
        if !(tf > 0.0 && ts > 0.0) {
            return None;
        }
        Some(DVector::from_iterator(
            self.u.len(),
            self.u
                .iter()
                .zip(&self.y)
                .zip(&self.w)
                .map(|((u, y), w)| (y - self.model(p, *u)) * w),
        ))
    }

    fn jacobian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
        let (a, b, tf, ts, _) = self.unpack(p);
        if !(tf > 0.0 && ts > 0.0) {
            return None;
        }
        let k = self.n_params();
        let mut jac = DMatrix::zeros(self.u.len(), k);
        for (i, (&u, &w)) in self.u.iter().zip(&self.w).enumerate() {
            let (g1, g2) = self.shape.basis(u, tf, ts);
            let (d1, d2) = self.shape.basis_dt(u, tf, ts);
            let mut col = 0;
            if self.tie.is_some() {
                jac[(i, col)] = -(g1 - g2) * w;
                col += 1;
            } else {
                jac[(i, col)] = -g1 * w;
                jac[(i, col + 1)] = -g2 * w;
                col += 2;
            }
            jac[(i, col)] = -a * d1 * w;
            jac[(i, col + 1)] = -b * d2 * w;
            col += 2;
            if self.f0_fixed.is_none() {
                jac[(i, col)] = -w;
            }
        }
        Some(jac)
    }
}

/// Amplitudes (and `f0` when free) by linear least squares at fixed time
/// constants, packed as a full parameter vector.
fn linear_solve(prob: &TwoExpProblem, tf: f64, ts: f64) -> Option<Vec<f64>> {
    let n = prob.u.len();
    let free_f0 = prob.f0_fixed.is_none();
    let n_amp = if prob.tie.is_some() { 1 } else { 2 };
    let k = n_amp + usize::from(free_f0);
    let mut design = DMatrix::zeros(n, k);
    let mut rhs = Vec::with_capacity(n);
    for (i, &u) in prob.u.iter().enumerate() {
        let (g1, g2) = prob.shape.basis(u, tf, ts);
        let mut y = prob.y[i] - prob.f0_fixed.unwrap_or(0.0);
        match prob.tie {
            Some(s) => {
                design[(i, 0)] = g1 - g2;
                y -= -s * g2;
            }
            None => {
                design[(i, 0)] = g1;
                design[(i, 1)] = g2;
            }
        }
        if free_f0 {
            design[(i, n_amp)] = 1.0;
        }
        rhs.push(y);
    }
    let sig: Vec<f64> = prob.w.iter().map(|w| 1.0 / w).collect();
    let lin = weighted_linear_fit(&design, &rhs, Some(&sig)).ok()?.params;
    Some(pack(&lin, n_amp, tf, ts, free_f0))
}

fn pack(lin: &[f64], n_amp: usize, tf: f64, ts: f64, free_f0: bool) -> Vec<f64> {
    let mut start = lin[..n_amp].to_vec();
    start.push(tf);
    start.push(ts);
    if free_f0 {
        start.push(lin[n_amp]);
    }
    start
}

/// The same problem with amplitudes eliminated: only `ln T_fast`, `ln T_slow`
/// remain free. Much less prone to sliding into the `T_fast = T_slow` valley.
struct ProjectedProblem<'a>(&'a TwoExpProblem);

impl ResidualModel for ProjectedProblem<'_> {
    fn n_params(&self) -> usize {
        2
    }

    fn residuals(&self, p: &[f64]) -> Option<DVector<f64>> {
        let (tf, ts) = (p[0].exp(), p[1].exp());
        if !(tf.is_finite() && ts.is_finite() && tf > 0.0 && ts > 0.0) {
            return None;
        }
        self.0.residuals(&linear_solve(self.0, tf, ts)?)
    }
}

/// Start for the full fit: time constants refined on the projected problem
/// from the seed pair, then amplitudes solved linearly.
fn projected_seed(prob: &TwoExpProblem, tf: f64, ts: f64, lm: &LmConfig) -> Vec<f64> {
    let (mut tf, mut ts) = (tf, ts);
    // only a seed: the full fit polishes it
    let rough = LmConfig {
        max_iter: lm.max_iter.min(60),
        xtol: lm.xtol.max(1e-7),
        ftol: lm.ftol.max(1e-10),
        ..*lm
    };
    if let Some(r) = crate::lsq::levenberg_marquardt(&ProjectedProblem(prob), &[tf.ln(), ts.ln()], &rough) {
        (tf, ts) = (r.params[0].exp(), r.params[1].exp());
    }
    linear_solve(prob, tf, ts).unwrap_or_else(|| {
        let free_f0 = prob.f0_fixed.is_none();
        let n_amp = if prob.tie.is_some() { 1 } else { 2 };
        let mut v = vec![0.0; n_amp + usize::from(free_f0)];
        if free_f0 {
            v[n_amp] = prob.y.iter().sum::<f64>() / prob.y.len() as f64;
        }
        pack(&v, n_amp, tf, ts, free_f0)
    })
}

/// Decades past the top of the grid, up to the observed span, so slow
/// constants in long records still get a nearby seed.
fn extend_grid(grid: &[f64], span: f64) -> Vec<f64> {
    let mut out = grid.to_vec();
    let mut top = grid.iter().copied().fold(0.0, f64::max);
    while top > 0.0 && top < span {
        top *= 10.0;
        out.push(top);
    }
    out
}

fn seed_pairs(grid: &[f64]) -> Vec<(f64, f64)> {
    let mut pairs = Vec::new();
    for (i, &a) in grid.iter().enumerate() {
        for &b in &grid[i + 1..] {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if lo < hi {
                pairs.push((lo, hi));
            }
        }
    }
    pairs
}

struct RawFit {
    res: LmResult,
    covariance: Option<DMatrix<f64>>,
    starts: usize,
    span: f64,
}

fn resolve_f0(series: &FrequencySeries, mode: F0Mode) -> Result<(Option<f64>, String)> {
    let first_on = series.first_light_on();
    let baseline = first_on.and_then(|t| series.baseline_before(t));
    match mode {
        F0Mode::Fixed(v) => {
            check_f0(v)?;
            Ok((Some(v), "fixed".into()))
        }
        F0Mode::Free => Ok((None, "free".into())),
        F0Mode::Baseline => baseline
            .map(|v| (Some(v), "baseline".into()))
            .ok_or_else(|| Error::invalid("no pre-illumination points to form a baseline")),
        F0Mode::Auto => Ok(match baseline {
            Some(v) => (Some(v), "baseline".into()),
            None => (None, "free".into()),
        }),
    }
}

fn run_two_exp(
    shape: Shape,
    pts: &[FreqPoint],
    origin: f64,
    f0_fixed: Option<f64>,
    tie: Option<f64>,
    grid: &[f64],
    lm: &LmConfig,
) -> Result<RawFit> {
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::invalid(format!(
            "need at least {MIN_FIT_POINTS} points in the fit window, got {}",
            pts.len()
        )));
    }
    let with_err = pts.iter().filter(|p| p.freq_err.is_some()).count();
    if with_err != 0 && with_err != pts.len() {
        return Err(Error::invalid(
            "either every point or no point may carry an uncertainty",
        ));
    }
    let prob = TwoExpProblem {
        shape,
        u: pts.iter().map(|p| p.time - origin).collect(),
        y: pts.iter().map(|p| p.freq).collect(),
        w: pts.iter().map(|p| p.freq_err.map_or(1.0, |e| 1.0 / e)).collect(),
        f0_fixed,
        tie,
    };
    let span = prob.u.iter().copied().fold(0.0, f64::max);
    let grid = extend_grid(grid, span);
    let starts: Vec<Vec<f64>> = seed_pairs(&grid)
        .into_iter()
        .map(|(tf, ts)| projected_seed(&prob, tf, ts, lm))
        .collect();
    if starts.is_empty() {
        return Err(Error::invalid("seed grid needs at least two distinct time constants"));
    }
    let res = multi_start(&prob, &starts, lm)?;
    let mut covariance = res.covariance();
    if with_err == 0 {
        let dof = res.dof();
        let scale = if dof > 0 { res.chi2 / dof as f64 } else { 0.0 };
        if let Some(c) = covariance.as_mut() {
            *c *= scale;
        }
    }
    Ok(RawFit {
        res,
        covariance,
        starts: starts.len(),
        span,
    })
}

/// Canonical parameter vector `[a, b, T_fast, T_slow, f0]` with its covariance,
/// after undoing the continuity tie and fixed `f0`, and ordering the time
/// constants.
fn canonicalize(
    shape: Shape,
    raw: &RawFit,
    f0_fixed: Option<f64>,
    tie: Option<f64>,
) -> ([f64; 5], Option<DMatrix<f64>>) {
    let p = &raw.res.params;
    let k = p.len();
    // linear map from free params to [a, b, tf, ts, f0]
    let mut map = DMatrix::zeros(5, k);
    let mut vals = [0.0; 5];
    let mut col = 0;
    vals[0] = p[col];
    map[(0, col)] = 1.0;
    match tie {
        Some(s) => {
            vals[1] = -s - p[col];
            map[(1, col)] = -1.0;
            col += 1;
        }
        None => {
            vals[1] = p[col + 1];
            map[(1, col + 1)] = 1.0;
            col += 2;
        }
    }
    vals[2] = p[col];
    map[(2, col)] = 1.0;
    vals[3] = p[col + 1];
    map[(3, col + 1)] = 1.0;
    col += 2;
    match f0_fixed {
        Some(v) => vals[4] = v,
        None => {
            vals[4] = p[col];
            map[(4, col)] = 1.0;
        }
    }
    let mut cov = raw.covariance.as_ref().map(|c| &map * c * map.transpose());

    if vals[2] > vals[3] {
        // relabel the fast and slow terms
        let sign = match shape {
            // a(1-e1) - b(1-e2) = (-b)(1-e2) - (-a)(1-e1)
            Shape::Charging => -1.0,
            Shape::Discharge => 1.0,
        };
        let perm = DMatrix::from_row_slice(
            5,
            5,
            &[
                0.0, sign, 0.0, 0.0, 0.0, //
                sign, 0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        );
        let v = DVector::from_row_slice(&vals);
        let nv = &perm * v;
        vals.copy_from_slice(nv.as_slice());
        cov = cov.map(|c| &perm * c * perm.transpose());
    }
    (vals, cov)
}

fn build_report(
    names: [&str; 5],
    vals: [f64; 5],
    cov: Option<DMatrix<f64>>,
    raw: &RawFit,
    f0_mode: String,
    weak_rel_err: f64,
    weak_correlation: f64,
) -> ExpFitReport {
    let std_errs: Vec<f64> = (0..5)
        .map(|i| cov.as_ref().map_or(f64::NAN, |c| c[(i, i)].max(0.0).sqrt()))
        .collect();
    let mut flags = Vec::new();
    if cov.is_none() {
        flags.push(FitFlag::Degenerate);
    }
    for i in [2, 3] {
        let rel = std_errs[i] / vals[i];
        let max_corr = cov.as_ref().map_or(0.0, |c| {
            (0..5)
                .filter(|&j| j != i && c[(j, j)] > 0.0 && c[(i, i)] > 0.0)
                .map(|j| (c[(i, j)] / (c[(i, i)] * c[(j, j)]).sqrt()).abs())
                .fold(0.0, f64::max)
        });
        if cov.is_some() && (!(rel <= weak_rel_err) || max_corr > weak_correlation) {
            flags.push(FitFlag::WeaklyIdentified(names[i].to_string()));
        }
        if vals[i] > raw.span {
            flags.push(FitFlag::BeyondWindow(names[i].to_string()));
        }
    }
    let n = raw.res.n_obs;
    // chi2 is weighted; rms is reported in Hz
    ExpFitReport {
        param_names: names.iter().map(|s| s.to_string()).collect(),
        values: vals.to_vec(),
        std_errs,
        covariance: cov.map(|c| (0..5).map(|i| (0..5).map(|j| c[(i, j)]).collect()).collect()),
        chi2: raw.res.chi2,
        dof: raw.res.dof(),
        residual_rms: 0.0,
        n_points: n,
        f0_mode,
        iterations: raw.res.iterations,
        starts: raw.starts,
        flags,
    }
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Fits the light-on model to the points from `t_on` to the end of that
/// light-on interval (or the end of the series).
pub fn fit_charging(
    series: &FrequencySeries,
    t_on: f64,
    opts: &ChargingFitOptions,
) -> Result<(ChargingModelParams, ExpFitReport)> {
    let end = series.light_off_after(t_on);
    let pts = series.window(t_on, end);
    let (f0_fixed, f0_mode) = resolve_f0(series, opts.f0)?;
    let raw = run_two_exp(Shape::Charging, &pts, t_on, f0_fixed, None, &opts.seed_grid, &opts.lm)?;
    let (vals, cov) = canonicalize(Shape::Charging, &raw, f0_fixed, None);
    let mut report = build_report(
        ["df1", "df2", "T1", "T2", "f0"],
        vals,
        cov,
        &raw,
        f0_mode,
        opts.weak_rel_err,
        opts.weak_correlation,
    );
    if !(vals[4] > 0.0) {
        return Err(Error::Degenerate(format!("fitted f0 {} is not positive", vals[4])));
    }
    let params = ChargingModelParams {
        df1: vals[0],
        df2: vals[1],
        t1: vals[2],
        t2: vals[3],
        t_on,
        f0: vals[4],
    };
    report.residual_rms = rms(pts.iter().map(|p| p.freq - charging_freq(p.time, &params).unwrap()));
    Ok((params, report))
}

/// Fits the relaxation model to the points from `t_off` to the next turn-on
/// (or the end of the series).
pub fn fit_discharge(
    series: &FrequencySeries,
    t_off: f64,
    opts: &DischargeFitOptions,
) -> Result<(DischargeModelParams, ExpFitReport)> {
    let end = series.light_on_after(t_off);
    let pts: Vec<FreqPoint> = series
        .window(t_off, end)
        .into_iter()
        .filter(|p| end.is_none_or(|e| p.time < e))
        .collect();
    let (f0_fixed, f0_mode) = resolve_f0(series, opts.f0)?;
    let raw = run_two_exp(
        Shape::Discharge,
        &pts,
        t_off,
        f0_fixed,
        opts.continuity,
        &opts.seed_grid,
        &opts.lm,
    )?;
    let (vals, cov) = canonicalize(Shape::Discharge, &raw, f0_fixed, opts.continuity);
    let mut report = build_report(
        ["df3", "df4", "T3", "T4", "f0"],
        vals,
        cov,
        &raw,
        f0_mode,
        opts.weak_rel_err,
        opts.weak_correlation,
    );
    if !(vals[4] > 0.0) {
        return Err(Error::Degenerate(format!("fitted f0 {} is not positive", vals[4])));
    }
    if vals[0] + vals[1] < 0.0 {
        report.flags.push(FitFlag::DischargeAboveBaseline);
    }
    let params = DischargeModelParams {
        df3: vals[0],
        df4: vals[1],
        t3: vals[2],
        t4: vals[3],
        t_off,
        f0: vals[4],
    };
    report.residual_rms = rms(pts.iter().map(|p| p.freq - discharge_freq(p.time, &params).unwrap()));
    Ok((params, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `(time, data - model)` over the settled window, Hz.
    pub residuals: Vec<(f64, f64)>,
    pub mean: f64,
    /// Sample standard deviation of the residuals, Hz.
    pub sigma: f64,
    pub histogram: Vec<HistogramBin>,
    pub jarque_bera: f64,
    pub normal: bool,
}

/// 95% quantile of chi-square with two degrees of freedom.
const JB_CRITICAL: f64 = 5.991_464_547_107_979;

/// Residual scatter about a charging fit after the slow component has
/// settled. The window starts `settle_after` past `t_on`, default five slow
/// time constants.
pub fn settled_stability(
    series: &FrequencySeries,
    fit: &ChargingModelParams,
    settle_after: Option<f64>,
) -> Result<StabilityReport> {
    let delay = settle_after.unwrap_or(5.0 * fit.t1.max(fit.t2));
    let start = fit.t_on + delay;
    let end = series.light_off_after(fit.t_on);
    let residuals: Vec<(f64, f64)> = series
        .points()
        .iter()
        .filter(|p| p.time > start && end.is_none_or(|e| p.time <= e))
        .map(|p| Ok((p.time, p.freq - charging_freq(p.time, fit)?)))
        .collect::<Result<_>>()?;
    if residuals.len() < 3 {
        return Err(Error::invalid(format!(
            "settled window after t = {start} s holds {} points; need at least 3",
            residuals.len()
        )));
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().map(|r| r.1).sum::<f64>() / n;
    let m2 = residuals.iter().map(|r| (r.1 - mean).powi(2)).sum::<f64>() / n;
    let m3 = residuals.iter().map(|r| (r.1 - mean).powi(3)).sum::<f64>() / n;
    let m4 = residuals.iter().map(|r| (r.1 - mean).powi(4)).sum::<f64>() / n;
    let sigma = (m2 * n / (n - 1.0)).sqrt();
    let (jarque_bera, normal) = if m2 > 0.0 {
        let skew = m3 / m2.powf(1.5);
        let kurt = m4 / (m2 * m2) - 3.0;
        let jb = n / 6.0 * (skew * skew + kurt * kurt / 4.0);
        (jb, jb <= JB_CRITICAL)
    } else {
        (0.0, true)
    };
    Ok(StabilityReport {
        histogram: histogram(residuals.iter().map(|r| r.1)),
        residuals,
        mean,
        sigma,
        jarque_bera,
        normal,
    })
}

/// Equal-width bins over the data range; Sturges' rule for the bin count.
fn histogram(values: impl Iterator<Item = f64> + Clone) -> Vec<HistogramBin> {
    let n = values.clone().count();
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let bins = ((n as f64).log2().ceil() as usize + 1).max(1);
    if !(hi > lo) {
        return vec![HistogramBin { lo, hi, count: n }];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            count,
        })
        .collect()
}
