//! Seeded synthetic experiments with projection and measurement noise.
//!
//! Every point draws from `CounterRng::new(seed, stream).fork(index)`, with a
//! fixed stream per experiment kind, so a point's draws do not depend on the
//! order in which points are generated.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::beam::{rabi_from_intensity, GratingOutputModel, RabiPositionScan, RabiReference, ScanPoint};
use crate::charging::{
    charging_freq, discharge_freq, ChargingModelParams, DischargeModelParams, FreqPoint, FrequencySeries,
};
use crate::error::{Error, Result};
use crate::heating::{HeatingPoint, HeatingSeries};
use crate::rng::CounterRng;
use crate::thermometry::{
    nbar_with_uncertainty, sideband_excitation, MatrixElementModel, RabiParams, SidebandObservation, SidebandOrder,
    ThermalMotionalState,
};
use crate::units::{hz_to_angular, make_trap_context, TrapContext};

const STREAM_SIDEBAND: u64 = 1;
const STREAM_CHARGING: u64 = 2;
const STREAM_POSITION: u64 = 3;

pub const DEFAULT_SHOTS: u32 = 500;
pub const DEFAULT_LAMB_DICKE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Repetitions per sideband; `None` returns exact probabilities.
    pub shots: Option<u32>,
    pub trap: TrapContext,
    pub rabi: RabiParams,
    pub initial_nbar: f64,
    /// quanta/s
    pub heating_rate: f64,
    pub charging: ChargingModelParams,
    pub discharge: DischargeModelParams,
    /// Gaussian sigma on each frequency reading, Hz.
    pub noise_floor: f64,
    /// Sideband pulse length, s; defaults to the ground-state blue pi time.
    pub probe_time: Option<f64>,
    /// Relative Gaussian sigma on each simulated Rabi frequency.
    pub rabi_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let trap = make_trap_context("Yb-171", hz_to_angular(5.329e6), hz_to_angular(12.7e6), 20e-6)
            .expect("built-in context is valid");
        let f0 = 5.329e6;
        let charging = ChargingModelParams::new(151e3, 50e3, 21.0, 900.0, 400.0, f0).expect("valid");
        let turn_off = charging.shift_at(2400.0).expect("after turn-on");
        // split the step at turn-off so the discharge starts where charging ended
        let df3 = -turn_off * 0.56;
        let discharge = DischargeModelParams::new(df3, -turn_off - df3, 360.0, 18000.0, 2400.0, f0).expect("valid");
        Self {
            seed: 0,
            shots: Some(DEFAULT_SHOTS),
            trap,
            rabi: RabiParams::new(TAU * 121.1e3, DEFAULT_LAMB_DICKE, MatrixElementModel::FirstOrderLd).expect("valid"),
            initial_nbar: 0.1,
            heating_rate: 780.0,
            charging,
            discharge,
            noise_floor: 1e3,
            probe_time: None,
            rabi_noise: 0.05,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == Some(0) {
            return Err(Error::invalid("shots must be >= 1"));
        }
        if !(self.initial_nbar >= 0.0 && self.initial_nbar.is_finite()) {
            return Err(Error::invalid(format!(
                "initial nbar must be >= 0, got {}",
                self.initial_nbar
            )));
        }
        if !(self.heating_rate >= 0.0 && self.heating_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "heating rate must be >= 0, got {}",
                self.heating_rate
            )));
        }
        if !(self.noise_floor >= 0.0) {
            return Err(Error::invalid("noise floor must be >= 0"));
        }
        if !(self.rabi_noise >= 0.0) {
            return Err(Error::invalid("Rabi noise must be >= 0"));
        }
        if let Some(t) = self.probe_time {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("probe time must be positive, got {t}")));
            }
        }
        Ok(())
    }

    pub fn probe_time(&self) -> f64 {
        self.probe_time.unwrap_or_else(|| self.rabi.ground_state_blue_pi_time())
    }

    pub fn nbar_at(&self, wait_time: f64) -> f64 {
        self.initial_nbar + self.heating_rate * wait_time
    }
}

fn sideband_point(cfg: &SimConfig, wait_time: f64, index: u64) -> Result<SidebandObservation> {
    if !(wait_time >= 0.0 && wait_time.is_finite()) {
        return Err(Error::invalid(format!("wait time must be >= 0, got {wait_time}")));
    }
    let state = ThermalMotionalState::new(cfg.nbar_at(wait_time))?;
    let t = cfg.probe_time();
    let red = sideband_excitation(&state, &cfg.rabi, t, SidebandOrder::Red)?;
    let blue = sideband_excitation(&state, &cfg.rabi, t, SidebandOrder::Blue)?;
    let (red, blue) = match cfg.shots {
        None => (red, blue),
        Some(n) => {
            let mut rng = CounterRng::new(cfg.seed, STREAM_SIDEBAND).fork(index);
            let r = rng.binomial(n, red) as f64 / n as f64;
            let b = rng.binomial(n, blue) as f64 / n as f64;
            (r, b)
        }
    };
    SidebandObservation::new(t, red, blue, cfg.shots)
}

/// Red and blue sideband readout after heating for `wait_time`.
pub fn simulate_sideband_scan(cfg: &SimConfig, wait_time: f64) -> Result<SidebandObservation> {
    cfg.validate()?;
    sideband_point(cfg, wait_time, 0)
}

/// Sideband readouts at each wait time; point `i` uses generator fork `i`.
pub fn simulate_sideband_series(cfg: &SimConfig, wait_times: &[f64]) -> Result<Vec<(f64, SidebandObservation)>> {
    cfg.validate()?;
    for w in wait_times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::invalid("wait times must be strictly increasing"));
        }
    }
    wait_times
        .iter()
        .enumerate()
        .map(|(i, &t)| Ok((t, sideband_point(cfg, t, i as u64)?)))
        .collect()
}

/// Sideband thermometry at each wait time, with propagated errors.
pub fn simulate_heating_series(cfg: &SimConfig, wait_times: &[f64]) -> Result<HeatingSeries> {
    let points = simulate_sideband_series(cfg, wait_times)?
        .into_iter()
        .map(|(t, obs)| {
            let (nbar, err) = nbar_with_uncertainty(&obs)?;
            let nbar_err = cfg.shots.map(|n| {
                if err > 0.0 {
                    err
                } else {
                    // a zero red count gives zero first-order spread; use one count instead
                    let floor = SidebandObservation {
                        p_red: 1.0 / n as f64,
                        ..obs
                    };
                    nbar_with_uncertainty(&floor).map(|v| v.1).unwrap_or(f64::NAN)
                }
            });
            Ok(HeatingPoint {
                wait_time: t,
                nbar,
                nbar_err,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    HeatingSeries::new(points, Some(cfg.trap.clone()))
}

/// Secular frequency sampled every `sample_interval` from 0 to `total`:
/// baseline before the light-on window, the charging curve inside it and
/// the discharge curve after it. An empty window gives a flat baseline.
pub fn simulate_charging_series(
    cfg: &SimConfig,
    sample_interval: f64,
    on_window: (f64, f64),
    total: f64,
) -> Result<FrequencySeries> {
    cfg.validate()?;
    if !(sample_interval > 0.0) {
        return Err(Error::invalid(format!(
            "sample interval must be positive, got {sample_interval}"
        )));
    }
    let (on, off) = on_window;
    if !(on >= 0.0 && off >= on && off <= total) {
        return Err(Error::invalid(format!(
            "light-on window ({on}, {off}) must lie within [0, {total}]"
        )));
    }
    let lit = off > on;
    let charging = ChargingModelParams {
        t_on: on,
        ..cfg.charging
    };
    let discharge = DischargeModelParams {
        t_off: off,
        ..cfg.discharge
    };
    let base = CounterRng::new(cfg.seed, STREAM_CHARGING);
    let n = (total / sample_interval + 1e-9).floor() as u64;
    let points = (0..=n)
        .map(|i| {
            let t = i as f64 * sample_interval;
            let clean = if !lit || t < on {
                charging.f0
            } else if t <= off {
                charging_freq(t, &charging)?
            } else {
                discharge_freq(t, &discharge)?
            };
            let freq = if cfg.noise_floor > 0.0 {
                base.fork(i).normal(clean, cfg.noise_floor)
            } else {
                clean
            };
            Ok(FreqPoint {
                time: t,
                freq,
                freq_err: (cfg.noise_floor > 0.0).then_some(cfg.noise_floor),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let intervals = if lit { vec![(on, off)] } else { Vec::new() };
    FrequencySeries::new(points, intervals)
}

/// Rabi frequency along the scan axis from the beam model, with
/// multiplicative Gaussian noise. `reference` ties the model intensity to a
/// Rabi frequency.
pub fn simulate_position_scan(
    cfg: &SimConfig,
    beam: &GratingOutputModel,
    reference: &RabiReference,
    positions: &[f64],
) -> Result<RabiPositionScan> {
    cfg.validate()?;
    let base = CounterRng::new(cfg.seed, STREAM_POSITION);
    let points = positions
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let clean = rabi_from_intensity(beam.intensity(x)?, reference)?;
            let rabi = if cfg.rabi_noise > 0.0 {
                clean * (1.0 + cfg.rabi_noise * base.fork(i as u64).standard_normal())
            } else {
                clean
            };
            Ok(ScanPoint {
                position: x,
                rabi,
                rabi_err: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RabiPositionScan::new(points)
}
