//! Structured fit reports with provenance.
//!
//! Reports serialize to JSON with a fixed key order (struct field order,
//! sorted maps), so identical inputs give byte-identical files.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beam::{ProfileFitReport, ProfileFlag};
use crate::charging::{ExpFitReport, FitFlag};
use crate::error::{Error, Result};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub value: f64,
    pub std_err: Option<f64>,
    pub unit: String,
}

impl ParamEstimate {
    pub fn new(name: &str, value: f64, std_err: f64, unit: &str) -> Self {
        Self {
            name: name.to_string(),
            value,
            std_err: std_err.is_finite().then_some(std_err),
            unit: unit.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the input file, or of the canonical argument record when
    /// there is no input file.
    pub input_digest: String,
    pub seed: Option<u64>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: String,
    pub parameters: Vec<ParamEstimate>,
    pub residual_rms: Option<f64>,
    pub chi2: Option<f64>,
    pub dof: Option<usize>,
    pub flags: Vec<String>,
    /// Derived scalars (e.g. settled offset, spectral density).
    pub derived: BTreeMap<String, f64>,
    pub provenance: Provenance,
}

impl FitReport {
    pub fn new(model: &str, provenance: Provenance) -> Self {
        Self {
            model: model.to_string(),
            parameters: Vec::new(),
            residual_rms: None,
            chi2: None,
            dof: None,
            flags: Vec::new(),
            derived: BTreeMap::new(),
            provenance,
        }
    }

    pub fn param(mut self, name: &str, value: f64, std_err: f64, unit: &str) -> Self {
        self.parameters.push(ParamEstimate::new(name, value, std_err, unit));
        self
    }

    /// Non-finite values are dropped so the report stays loadable.
    pub fn derive(mut self, key: &str, value: f64) -> Self {
        if value.is_finite() {
            self.derived.insert(key.to_string(), value);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&ParamEstimate> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn from_exp_fit(model: &str, fit: &ExpFitReport, provenance: Provenance) -> Self {
        let mut r = Self::new(model, provenance);
        for ((name, v), e) in fit.param_names.iter().zip(&fit.values).zip(&fit.std_errs) {
            let unit = if name.starts_with('T') { "s" } else { "Hz" };
            r.parameters.push(ParamEstimate::new(name, *v, *e, unit));
        }
        r.residual_rms = Some(fit.residual_rms).filter(|v| v.is_finite());
        r.chi2 = Some(fit.chi2).filter(|v| v.is_finite());
        r.dof = Some(fit.dof);
        r.flags = fit.flags.iter().map(exp_flag_label).collect();
        r
    }

    pub fn from_profile_fit(fit: &ProfileFitReport, provenance: Provenance) -> Self {
        let model = match fit.mode {
            crate::beam::ProfileMode::SingleGaussian => "beam-profile/single-gaussian",
            crate::beam::ProfileMode::TwoBeamlet => "beam-profile/two-beamlet",
        };
        let mut r = Self::new(model, provenance);
        for ((name, v), e) in fit.param_names.iter().zip(&fit.values).zip(&fit.std_errs) {
            let unit = match name.as_str() {
                "rabi_scale" => "rad/s",
                "center" | "separation" | "waist" => "m",
                "phase" => "rad",
                _ => "",
            };
            r.parameters.push(ParamEstimate::new(name, *v, *e, unit));
        }
        r.residual_rms = Some(fit.residual_rms).filter(|v| v.is_finite());
        r.chi2 = Some(fit.chi2).filter(|v| v.is_finite());
        r.dof = Some(fit.dof);
        r.flags = fit
            .flags
            .iter()
            .map(|f| match f {
                ProfileFlag::Degenerate => "degenerate".to_string(),
                ProfileFlag::BeamletVanishes => "beamlet_vanishes".to_string(),
                ProfileFlag::BeamletsMerged => "beamlets_merged".to_string(),
            })
            .collect();
        for (i, p) in fit.peaks.iter().take(2).enumerate() {
            r = r.derive(&format!("peak_{}", i + 1), *p);
        }
        if let Some(s) = fit.peak_separation {
            r = r.derive("peak_separation", s);
        }
        if let Some(d) = fit.dip_depth {
            r = r.derive("dip_depth", d);
        }
        r
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("report encoding: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<report>".into(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

pub fn exp_flag_label(flag: &FitFlag) -> String {
    match flag {
        FitFlag::Degenerate => "degenerate".into(),
        FitFlag::WeaklyIdentified(p) => format!("weakly_identified:{p}"),
        FitFlag::BeyondWindow(p) => format!("beyond_window:{p}"),
        FitFlag::DischargeAboveBaseline => "discharge_above_baseline".into(),
        FitFlag::NonNormalResiduals => "non_normal_residuals".into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
