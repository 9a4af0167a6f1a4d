//! Light-induced charging: two-exponential fits to the secular frequency
//! while the light is on and after it is switched off, settled stability,
//! the compensating field and pulsed exposure.
//!
//! Run with: `cargo run --example charging_dynamics`

use trapchar::charging::*;
use trapchar::sim::{simulate_charging_series, SimConfig};

fn main() -> trapchar::Result<()> {
    let cfg = SimConfig {
        seed: 1,
        ..SimConfig::default()
    };
    // sampled every 15 s, light on from 400 s to 2400 s
    let series = simulate_charging_series(&cfg, 15.0, (400.0, 2400.0), 4900.0)?;
    println!(
        "{} points, light on {:?}",
        series.points().len(),
        series.light_on_intervals()
    );

    let (on, report) = fit_charging(&series, 400.0, &ChargingFitOptions::default())?;
    println!(
        "charging: df1 {:.1} kHz, df2 {:.1} kHz, T1 {:.1} s, T2 {:.0} s, f0 {:.4} MHz",
        on.df1 / 1e3,
        on.df2 / 1e3,
        on.t1,
        on.t2,
        on.f0 / 1e6
    );
    println!(
        "  settled offset {:.1} kHz, residual rms {:.0} Hz, {} starts, flags {:?}",
        settled_offset(&on) / 1e3,
        report.residual_rms,
        report.starts,
        report.flags
    );
    if let Some(e) = report.std_err_of("T1") {
        println!("  T1 = {:.1} +- {e:.1} s", on.t1);
    }

    let (off, report) = fit_discharge(&series, 2400.0, &DischargeFitOptions::default())?;
    println!(
        "discharge: df3 {:.1} kHz, df4 {:.1} kHz, T3 {:.0} s, T4 {:.0} s",
        off.df3 / 1e3,
        off.df4 / 1e3,
        off.t3,
        off.t4
    );
    // 2500 s of record cannot pin an 18000 s constant
    println!("  flags {:?}", report.flags);

    // tie the discharge amplitudes to the shift at turn-off
    let tied = DischargeFitOptions {
        continuity: Some(on.shift_at(2400.0)?),
        ..DischargeFitOptions::default()
    };
    let (tied_fit, r) = fit_discharge(&series, 2400.0, &tied)?;
    println!(
        "  with continuity: df3 + df4 = {:.1} kHz, dof {} -> {}",
        (tied_fit.df3 + tied_fit.df4) / 1e3,
        report.dof,
        r.dof
    );

    // stability once the slow constant has settled
    let long_cfg = SimConfig {
        seed: 2,
        noise_floor: 900.0,
        ..SimConfig::default()
    };
    let long = simulate_charging_series(&long_cfg, 15.0, (400.0, 8200.0), 8200.0)?;
    let (fit, _) = fit_charging(&long, 400.0, &ChargingFitOptions::default())?;
    let st = settled_stability(&long, &fit, None)?;
    println!(
        "settled: {} points, sigma {:.0} Hz (injected 900), normal residuals: {}",
        st.residuals.len(),
        st.sigma,
        st.normal
    );

    let field = compensation_field(settled_offset(&on), DEFAULT_FIELD_SENSITIVITY)?;
    println!("compensating field: {:.2} kV/cm", field / 1e5);

    let duty = DutyCycle::new(15e-6, 0.0061)?;
    let ex = effective_exposure(&duty, 3600.0)?;
    println!(
        "15 us pulses at 0.61% duty: period {:.2} ms, one hour = {:.1} s continuous",
        ex.cycle_period * 1e3,
        ex.exposure
    );
    Ok(())
}
