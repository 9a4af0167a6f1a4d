//! Thermal motional states, sideband Rabi frequencies and the red/blue
//! sideband-asymmetry estimate of the mean occupation.
//!
//! For a thermal state the red-sideband excitation at any probe time is
//! exactly `nbar / (nbar + 1)` times the blue-sideband excitation, since the
//! red transition `n -> n-1` shares its coupling with the blue transition
//! `n-1 -> n` and `p_n / p_{n-1} = nbar / (nbar + 1)`. The estimator below
//! inverts that ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tail probability left out when truncating the thermal Fock distribution.
pub const FOCK_TAIL: f64 = 1e-12;

/// Thermal state of one motional mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalMotionalState {
    nbar: f64,
}

impl ThermalMotionalState {
    pub fn new(nbar: f64) -> Result<Self> {
        if !(nbar.is_finite() && nbar >= 0.0) {
            return Err(Error::invalid(format!("mean occupation must be >= 0, got {nbar}")));
        }
        Ok(Self { nbar })
    }

    pub fn nbar(&self) -> f64 {
        self.nbar
    }

    /// Boltzmann ratio `p_{n+1} / p_n = nbar / (nbar + 1)`.
    pub fn boltzmann_ratio(&self) -> f64 {
        self.nbar / (self.nbar + 1.0)
    }

    /// Smallest `N` with `sum_{n<=N} p_n >= 1 - FOCK_TAIL`.
    pub fn cutoff(&self) -> u32 {
        let r = self.boltzmann_ratio();
        if r == 0.0 {
            return 0;
        }
        // P(n <= N) = 1 - r^(N+1)
        let n = (FOCK_TAIL.ln() / r.ln()).ceil() as i64 - 1;
        let mut n = n.max(0) as u32;
        // guard against rounding at the boundary
        while r.powi(n as i32 + 1) > FOCK_TAIL {
            n += 1;
        }
        n
    }

    /// Fock probabilities `p_0..=p_cutoff`, built by recurrence.
    pub fn fock_distribution(&self) -> Vec<f64> {
        let r = self.boltzmann_ratio();
        let n_max = self.cutoff() as usize;
        let mut out = Vec::with_capacity(n_max + 1);
        let mut p = 1.0 / (self.nbar + 1.0);
        for _ in 0..=n_max {
            out.push(p);
            p *= r;
        }
        out
    }
}

/// Thermal occupation probability `nbar^n / (nbar+1)^(n+1)`.
pub fn fock_probability(state: &ThermalMotionalState, n: u32) -> f64 {
    let nbar = state.nbar;
    if nbar == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    // log form keeps large n finite
    ((n as f64) * nbar.ln() - (n as f64 + 1.0) * (nbar + 1.0).ln()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SidebandOrder {
    /// Removes one quantum, `n -> n-1`.
    Red,
    /// Adds one quantum, `n -> n+1`.
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MatrixElementModel {
    /// `Omega0 * eta * sqrt(n_>)`.
    #[default]
    FirstOrderLd,
    /// Full Debye-Waller and generalized-Laguerre coupling.
    ExactLaguerre,
}

/// Carrier Rabi frequency, Lamb-Dicke parameter and coupling model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiParams {
    /// Carrier Rabi frequency, rad/s.
    pub base_rabi: f64,
    pub lamb_dicke: f64,
    pub model: MatrixElementModel,
}

impl RabiParams {
    pub fn new(base_rabi: f64, lamb_dicke: f64, model: MatrixElementModel) -> Result<Self> {
        if !(base_rabi.is_finite() && base_rabi > 0.0) {
            return Err(Error::invalid(format!(
                "carrier Rabi frequency must be positive, got {base_rabi}"
            )));
        }
        if !(lamb_dicke > 0.0 && lamb_dicke < 1.0) {
            return Err(Error::invalid(format!(
                "Lamb-Dicke parameter must lie in (0, 1), got {lamb_dicke}"
            )));
        }
        Ok(Self {
            base_rabi,
            lamb_dicke,
            model,
        })
    }

    /// Blue-sideband pi time of the motional ground state.
    pub fn ground_state_blue_pi_time(&self) -> f64 {
        let omega = coupling(self, 0);
        std::f64::consts::PI / omega
    }
}

/// Generalized Laguerre polynomial `L_n^alpha(x)` by the three-term recurrence.
pub fn generalized_laguerre(n: u32, alpha: f64, x: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = 1.0 + alpha - x;
    for k in 1..n {
        let k = k as f64;
        let next = ((2.0 * k + 1.0 + alpha - x) * cur - (k + alpha) * prev) / (k + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// Rabi frequency of the `n <-> n+1` transition (symmetric in direction).
fn coupling(params: &RabiParams, n_lower: u32) -> f64 {
    let eta = params.lamb_dicke;
    let n_upper = n_lower as f64 + 1.0;
    match params.model {
        MatrixElementModel::FirstOrderLd => params.base_rabi * eta * n_upper.sqrt(),
        MatrixElementModel::ExactLaguerre => {
            let eta2 = eta * eta;
            let lag = generalized_laguerre(n_lower, 1.0, eta2);
            (params.base_rabi * (-eta2 / 2.0).exp() * eta * lag / n_upper.sqrt()).abs()
        }
    }
}

/// Sideband Rabi frequency starting from Fock state `n`.
pub fn sideband_rabi_frequency(params: &RabiParams, n: u32, order: SidebandOrder) -> Result<f64> {
    match order {
        SidebandOrder::Blue => Ok(coupling(params, n)),
        SidebandOrder::Red => {
            if n == 0 {
                return Err(Error::invalid("red sideband needs n >= 1"));
            }
            Ok(coupling(params, n - 1))
        }
    }
}

/// Thermally averaged sideband excitation probability after a square pulse
/// of length `probe_time`.
pub fn sideband_excitation(
    state: &ThermalMotionalState,
    params: &RabiParams,
    probe_time: f64,
    order: SidebandOrder,
) -> Result<f64> {
    if !(probe_time.is_finite() && probe_time >= 0.0) {
        return Err(Error::invalid(format!("probe time must be >= 0, got {probe_time}")));
    }
    let dist = state.fock_distribution();
    let start = match order {
        SidebandOrder::Blue => 0,
        SidebandOrder::Red => 1,
    };
    let total = dist
        .iter()
        .enumerate()
        .skip(start)
        .map(|(n, &p)| {
            let omega = sideband_rabi_frequency(params, n as u32, order).expect("n in range");
            let s = (omega * probe_time / 2.0).sin();
            p * s * s
        })
        .sum();
    Ok(total)
}

/// Mean occupation from the red/blue excitation ratio.
pub fn nbar_from_asymmetry(ratio: f64) -> Result<f64> {
    if ratio.is_nan() || ratio < 0.0 {
        return Err(Error::invalid(format!("sideband ratio must be >= 0, got {ratio}")));
    }
    if ratio >= 1.0 {
        return Err(Error::NonThermal(ratio));
    }
    Ok(ratio / (1.0 - ratio))
}

/// One red/blue sideband measurement at a fixed probe time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SidebandObservation {
    pub probe_time: f64,
    pub p_red: f64,
    pub p_blue: f64,
    /// Repetitions per sideband; `None` means exact (noise-free) probabilities.
    pub shots: Option<u32>,
}

impl SidebandObservation {
    pub fn new(probe_time: f64, p_red: f64, p_blue: f64, shots: Option<u32>) -> Result<Self> {
        for (label, p) in [("p_red", p_red), ("p_blue", p_blue)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{label} must be in [0, 1], got {p}")));
            }
        }
        if shots == Some(0) {
            return Err(Error::invalid("shots must be >= 1"));
        }
        if !(probe_time.is_finite() && probe_time >= 0.0) {
            return Err(Error::invalid(format!("probe time must be >= 0, got {probe_time}")));
        }
        Ok(Self {
            probe_time,
            p_red,
            p_blue,
            shots,
        })
    }
}

/// Mean occupation and its standard error from binomial projection noise on
/// both sidebands, propagated to first order.
pub fn nbar_with_uncertainty(obs: &SidebandObservation) -> Result<(f64, f64)> {
    if obs.p_blue == 0.0 {
        return Err(Error::invalid("blue sideband excitation is zero; ratio undefined"));
    }
    let ratio = obs.p_red / obs.p_blue;
    let nbar = nbar_from_asymmetry(ratio)?;
    let Some(shots) = obs.shots else {
        return Ok((nbar, 0.0));
    };
    let n = shots as f64;
    let var_red = obs.p_red * (1.0 - obs.p_red) / n;
    let var_blue = obs.p_blue * (1.0 - obs.p_blue) / n;
    // r = pr/pb, dr/dpr = 1/pb, dr/dpb = -pr/pb^2; dnbar/dr = 1/(1-r)^2
    let var_ratio = var_red / (obs.p_blue * obs.p_blue) + var_blue * obs.p_red * obs.p_red / obs.p_blue.powi(4);
    let dn_dr = 1.0 / (1.0 - ratio).powi(2);
    Ok((nbar, dn_dr * var_ratio.sqrt()))
}

/// Standard error [`nbar_with_uncertainty`] would report for a state of mean
/// occupation `nbar`, evaluated at the expected (noise-free) excitations.
pub fn predicted_nbar_uncertainty(nbar: f64, params: &RabiParams, probe_time: f64, shots: u32) -> Result<f64> {
    let state = ThermalMotionalState::new(nbar)?;
    let red = sideband_excitation(&state, params, probe_time, SidebandOrder::Red)?;
    let blue = sideband_excitation(&state, params, probe_time, SidebandOrder::Blue)?;
    let obs = SidebandObservation::new(probe_time, red, blue, Some(shots))?;
    Ok(nbar_with_uncertainty(&obs)?.1)
}
