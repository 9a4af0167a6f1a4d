//! Sideband thermometry: thermal state, sideband excitation and the
//! red/blue asymmetry estimate of the mean phonon number.
//!
//! Run with: `cargo run --example sideband_thermometry`

use std::f64::consts::TAU;

use trapchar::thermometry::*;

fn main() -> trapchar::Result<()> {
    let state = ThermalMotionalState::new(3.0)?;
    println!(
        "nbar = 3: cutoff n = {}, p(0..4) = {:.4?}",
        state.cutoff(),
        &state.fock_distribution()[..4]
    );

    for model in [MatrixElementModel::FirstOrderLd, MatrixElementModel::ExactLaguerre] {
        let p = RabiParams::new(TAU * 121.1e3, 0.1, model)?;
        let t = p.ground_state_blue_pi_time();
        let red = sideband_excitation(&state, &p, t, SidebandOrder::Red)?;
        let blue = sideband_excitation(&state, &p, t, SidebandOrder::Blue)?;
        println!(
            "{model:?}: probe {:.1} us, P_red {red:.4}, P_blue {blue:.4}, ratio {:.6} (expect 0.75)",
            t * 1e6,
            red / blue
        );
    }

    // Rabi frequencies climb with n on the blue sideband
    let p = RabiParams::new(TAU * 121.1e3, 0.1, MatrixElementModel::ExactLaguerre)?;
    print!("blue Rabi / 2pi (kHz) for n = 0..5:");
    for n in 0..5 {
        print!(
            " {:.2}",
            sideband_rabi_frequency(&p, n, SidebandOrder::Blue)? / TAU / 1e3
        );
    }
    println!();

    // Doppler-cooled and sideband-cooled regimes
    println!("ratio 0.75 -> nbar {}", nbar_from_asymmetry(0.75)?);
    println!("ratio 1/11 -> nbar {}", nbar_from_asymmetry(1.0 / 11.0)?);

    let obs = SidebandObservation::new(p.ground_state_blue_pi_time(), 0.075, 0.75, Some(400))?;
    let (nbar, err) = nbar_with_uncertainty(&obs)?;
    println!("400 shots, P_red 0.075, P_blue 0.75 -> nbar {nbar:.4} +- {err:.4}");

    // projection-noise error expected before taking data
    let pred = predicted_nbar_uncertainty(0.1, &p, obs.probe_time, 500)?;
    println!("expected sigma at nbar 0.1 with 500 shots: {pred:.4}");
    Ok(())
}
