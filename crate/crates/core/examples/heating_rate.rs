//! Heating-rate analysis: linear fit of nbar against wait time, field-noise
//! spectral density, cross-species normalization, the frequency power law
//! and a flatness test over ion position.
//!
//! Run with: `cargo run --example heating_rate`

use trapchar::heating::*;
use trapchar::rng::CounterRng;
use trapchar::sim::{simulate_heating_series, SimConfig, DEFAULT_SHOTS};
use trapchar::thermometry::predicted_nbar_uncertainty;
use trapchar::units::*;

fn main() -> trapchar::Result<()> {
    let cfg = SimConfig {
        seed: 7,
        ..SimConfig::default()
    };
    let waits: Vec<f64> = (0..6).map(|i| i as f64 * 0.4e-3).collect();
    let series = simulate_heating_series(&cfg, &waits)?;
    println!("wait (ms)  nbar     err");
    for p in series.points() {
        println!(
            "{:>8.1}  {:.4}  {:.4}",
            p.wait_time * 1e3,
            p.nbar,
            p.nbar_err.unwrap_or(f64::NAN)
        );
    }

    let plain = fit_heating_rate(&series)?;
    println!("plain fit:      {:.0} +- {:.0} quanta/s", plain.ndot, plain.ndot_err);

    // weights from the model's own nbar, not the noisy points
    let (probe, shots) = (cfg.probe_time(), cfg.shots.unwrap_or(DEFAULT_SHOTS));
    let fit = fit_heating_rate_reweighted(&series, |n| {
        predicted_nbar_uncertainty(n.max(0.0), &cfg.rabi, probe, shots)
    })?;
    println!(
        "reweighted fit: {:.0} +- {:.0} quanta/s (true 780)",
        fit.ndot, fit.ndot_err
    );

    let ctx = series.context.clone().expect("simulated series carry a context");
    let s_e = spectral_density_from_rate(&fit, &ctx)?;
    println!("S_E = {s_e:.3e} V^2/m^2/Hz");

    let ca = IonSpecies::ca40();
    let norm = normalize_rate(
        &HeatingRateResult::from_rate(780.0, 0.0)?,
        &ctx,
        &ca,
        hz_to_angular(1e6),
    )?;
    println!("780 q/s for Yb-171 at 5.329 MHz is {norm:.2} q/s for Ca-40 at 1 MHz");

    // rate against trap frequency, 10% scatter
    let mut rng = CounterRng::new(3, 0);
    let f_mhz: Vec<f64> = (0..7).map(|i| 2.5 + 0.45 * i as f64).collect();
    let rates: Vec<f64> = f_mhz
        .iter()
        .map(|f| 4000.0 * f.powf(-2.2) * (1.0 + 0.1 * rng.standard_normal()))
        .collect();
    let errs: Vec<f64> = rates.iter().map(|r| 0.1 * r).collect();
    let law = fit_power_law(&f_mhz, &rates, Some(&errs))?;
    println!("rate ~ f^-k with k = {:.2} +- {:.2}", law.exponent, law.exponent_err);

    // rates along the trap axis
    let scan: Vec<(f64, HeatingRateResult)> = [-100.0, -50.0, 0.0, 50.0, 100.0]
        .iter()
        .zip([770.0, 795.0, 781.0, 760.0, 802.0])
        .map(|(x, r)| Ok((*x * 1e-6, HeatingRateResult::from_rate(r, 25.0)?)))
        .collect::<trapchar::Result<_>>()?;
    let summary = position_scan_summary(&scan)?;
    println!(
        "position scan: mean {:.0} +- {:.0}, chi2 p = {:.2}, flat = {}",
        summary.mean, summary.std_err, summary.p_value, summary.flat
    );
    Ok(())
}
