//! Grating-coupler output: Gaussian beams, the two-beamlet interference
//! surrogate, Rabi frequency from intensity, and profile fits to a Rabi
//! frequency scan across the beam.
//!
//! Run with: `cargo run --example beam_profile`

use std::f64::consts::{PI, TAU};

use trapchar::beam::*;
use trapchar::sim::{simulate_position_scan, SimConfig};

fn main() -> trapchar::Result<()> {
    let zr = rayleigh_range(DEFAULT_BEAMLET_WAIST, DEFAULT_WAVELENGTH);
    println!("0.9 um waist at 435 nm: Rayleigh range {:.2} um", zr * 1e6);
    for z in [0.0, zr, 2.0 * zr] {
        let i = gaussian_intensity(0.0, z, DEFAULT_BEAMLET_WAIST, DEFAULT_WAVELENGTH, 1.0)?;
        println!("  on-axis intensity at z = {:.2} um: {i:.3}", z * 1e6);
    }

    let pi_rabi = pi_time_to_rabi(4.13e-6)?;
    println!("4.13 us pi time -> 2pi x {:.2} kHz", pi_rabi / TAU / 1e3);
    let reference = RabiReference::waveguide_peak();
    println!(
        "quarter intensity -> 2pi x {:.2} kHz",
        rabi_from_intensity(reference.intensity_ref / 4.0, &reference)? / TAU / 1e3
    );

    // two beamlets 1.8 um apart, nearly out of phase
    let beam = GratingOutputModel::two_beamlet(11e-6, 1.8e-6, 0.9e-6, 0.95 * PI, 0.9, 1.0)?;
    let reference = RabiReference {
        rabi_ref: TAU * 121.1e3,
        intensity_ref: 1.0,
    };
    let xs: Vec<f64> = (0..49).map(|i| 5e-6 + i as f64 * 0.25e-6).collect();
    let cfg = SimConfig {
        seed: 4,
        rabi_noise: 0.05,
        ..SimConfig::default()
    };
    let scan = simulate_position_scan(&cfg, &beam, &reference, &xs)?;

    for mode in [ProfileMode::SingleGaussian, ProfileMode::TwoBeamlet] {
        let (model, report) = fit_profile(&scan, mode, &ProfileFitOptions::default())?;
        println!(
            "{mode:?}: rms residual 2pi x {:.2} kHz on {} dof, flags {:?}",
            report.residual_rms / TAU / 1e3,
            report.dof,
            report.flags
        );
        let peaks: Vec<String> = report.peaks.iter().map(|p| format!("{:.2}", p * 1e6)).collect();
        println!("  peaks at {} um", peaks.join(", "));
        if mode == ProfileMode::TwoBeamlet {
            println!(
                "  separation {:.2} um, waist {:.2} um, phase {:.2} pi, ratio {:.2}",
                model.beamlet_separation * 1e6,
                model.waist * 1e6,
                model.beamlet_phase / PI,
                model.beamlet_amplitude_ratio
            );
            if let (Some(s), Some(d)) = (report.peak_separation, report.dip_depth) {
                println!("  peak spacing {:.2} um, dip depth {:.0}%", s * 1e6, d * 100.0);
            }
        }
    }
    Ok(())
}
