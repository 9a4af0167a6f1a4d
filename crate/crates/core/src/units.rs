//! Physical constants, ion species and the trap context shared by every analysis.
//!
//! Frequencies are stored as angular frequencies (rad/s). Conversion helpers
//! accept ordinary frequencies in Hz at the edges.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant, J s (CODATA 2018, exact).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Elementary charge, C (exact).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Unified atomic mass unit, kg (CODATA 2018).
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;

/// RF drive of the characterized trap, Hz.
pub const DEFAULT_RF_DRIVE_HZ: f64 = 74.5e6;

/// Converts an ordinary frequency in Hz to rad/s.
pub fn hz_to_angular(hz: f64) -> f64 {
    TAU * hz
}

/// Converts rad/s to Hz.
pub fn angular_to_hz(omega: f64) -> f64 {
    omega / TAU
}

/// Dimension tags for the handful of quantities this crate passes around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dimension {
    Frequency,
    Time,
    Length,
    Field,
    Decibel,
    QuantaPerTime,
}

impl Dimension {
    pub fn name(self) -> &'static str {
        match self {
            Dimension::Frequency => "frequency",
            Dimension::Time => "time",
            Dimension::Length => "length",
            Dimension::Field => "field",
            Dimension::Decibel => "dB",
            Dimension::QuantaPerTime => "quanta-per-time",
        }
    }
}

/// A real value tagged with its dimension. Sums and differences across
/// different dimensions are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub dim: Dimension,
}

impl Quantity {
    pub fn new(value: f64, dim: Dimension) -> Self {
        Self { value, dim }
    }

    fn same_dim(&self, other: &Quantity) -> Result<()> {
        if self.dim == other.dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                left: self.dim.name(),
                right: other.dim.name(),
            })
        }
    }

    pub fn try_add(self, other: Quantity) -> Result<Quantity> {
        self.same_dim(&other)?;
        Ok(Quantity::new(self.value + other.value, self.dim))
    }

    pub fn try_sub(self, other: Quantity) -> Result<Quantity> {
        self.same_dim(&other)?;
        Ok(Quantity::new(self.value - other.value, self.dim))
    }

    /// Dimensionless ratio of two like quantities.
    pub fn try_ratio(self, other: Quantity) -> Result<f64> {
        self.same_dim(&other)?;
        Ok(self.value / other.value)
    }

    pub fn scale(self, factor: f64) -> Quantity {
        Quantity::new(self.value * factor, self.dim)
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]", self.value, self.dim.name())
    }
}

/// An ion species: label, mass in kg and charge in C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    pub name: String,
    pub mass: f64,
    pub charge: f64,
}

impl IonSpecies {
    /// Singly charged ion of the given isotope mass (in u).
    pub fn singly_charged(name: &str, mass_u: f64) -> Result<Self> {
        Self::new(name, mass_u * ATOMIC_MASS_UNIT, 1)
    }

    pub fn new(name: &str, mass_kg: f64, charge_state: i32) -> Result<Self> {
        if !(mass_kg.is_finite() && mass_kg > 0.0) {
            return Err(Error::invalid(format!(
                "species {name}: mass must be positive, got {mass_kg}"
            )));
        }
        if charge_state == 0 {
            return Err(Error::invalid(format!("species {name}: charge state must be nonzero")));
        }
        Ok(Self {
            name: name.to_string(),
            mass: mass_kg,
            charge: charge_state as f64 * ELEMENTARY_CHARGE,
        })
    }

    pub fn mass_u(&self) -> f64 {
        self.mass / ATOMIC_MASS_UNIT
    }

    pub fn yb171() -> Self {
        Self::singly_charged("Yb-171", 170.936).expect("built-in species")
    }

    pub fn ca40() -> Self {
        Self::singly_charged("Ca-40", 39.963).expect("built-in species")
    }
}

/// Lookup table of known species. Starts with the built-ins and can be
/// extended or overridden from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesTable {
    entries: BTreeMap<String, IonSpecies>,
}

impl Default for SpeciesTable {
    fn default() -> Self {
        let mut entries = BTreeMap::new();
        for s in [IonSpecies::yb171(), IonSpecies::ca40()] {
            entries.insert(s.name.clone(), s);
        }
        Self { entries }
    }
}

impl SpeciesTable {
    pub fn get(&self, name: &str) -> Result<&IonSpecies> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownSpecies(name.to_string()))
    }

    pub fn insert(&mut self, species: IonSpecies) {
        self.entries.insert(species.name.clone(), species);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Allowed range for the axial secular frequency, rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyWindow {
    pub min: f64,
    pub max: f64,
}

impl Default for FrequencyWindow {
    fn default() -> Self {
        Self {
            min: hz_to_angular(0.1e6),
            max: hz_to_angular(20e6),
        }
    }
}

/// Species plus trap frequencies and ion height for one measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapContext {
    pub species: IonSpecies,
    /// Axial secular frequency, rad/s.
    pub axial_freq: f64,
    /// Radial secular frequency, rad/s.
    pub radial_freq: f64,
    /// RF drive frequency, Hz.
    pub rf_drive_freq: f64,
    /// Ion to electrode-surface distance, m.
    pub ion_surface_distance: f64,
}

impl TrapContext {
    pub fn new(
        species: IonSpecies,
        axial_freq: f64,
        radial_freq: f64,
        rf_drive_freq: f64,
        ion_surface_distance: f64,
        window: FrequencyWindow,
    ) -> Result<Self> {
        for (label, v) in [
            ("axial frequency", axial_freq),
            ("radial frequency", radial_freq),
            ("rf drive frequency", rf_drive_freq),
            ("ion-surface distance", ion_surface_distance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{label} must be positive, got {v}")));
            }
        }
        if axial_freq < window.min || axial_freq > window.max {
            return Err(Error::invalid(format!(
                "axial frequency 2pi x {:.6e} Hz outside plausibility window [2pi x {:.3e}, 2pi x {:.3e}] Hz",
                angular_to_hz(axial_freq),
                angular_to_hz(window.min),
                angular_to_hz(window.max)
            )));
        }
        Ok(Self {
            species,
            axial_freq,
            radial_freq,
            rf_drive_freq,
            ion_surface_distance,
        })
    }

    /// Same context at another axial frequency.
    pub fn with_axial_freq(&self, axial_freq: f64) -> Result<Self> {
        Self::new(
            self.species.clone(),
            axial_freq,
            self.radial_freq,
            self.rf_drive_freq,
            self.ion_surface_distance,
            FrequencyWindow::default(),
        )
    }
}

/// Builds a validated context from the built-in species table with the
/// default RF drive and plausibility window.
pub fn make_trap_context(species_name: &str, axial_freq: f64, radial_freq: f64, distance: f64) -> Result<TrapContext> {
    make_trap_context_in(
        &SpeciesTable::default(),
        species_name,
        axial_freq,
        radial_freq,
        distance,
    )
}

pub fn make_trap_context_in(
    table: &SpeciesTable,
    species_name: &str,
    axial_freq: f64,
    radial_freq: f64,
    distance: f64,
) -> Result<TrapContext> {
    let species = table.get(species_name)?.clone();
    TrapContext::new(
        species,
        axial_freq,
        radial_freq,
        DEFAULT_RF_DRIVE_HZ,
        distance,
        FrequencyWindow::default(),
    )
}

/// Total of a chain of gains/losses in dB.
pub fn db_chain(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::invalid("db_chain needs at least one term"));
    }
    if let Some(bad) = losses.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite dB term {bad}")));
    }
    Ok(losses.iter().sum())
}
