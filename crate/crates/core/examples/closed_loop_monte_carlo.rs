//! Closed-loop Monte Carlo: simulate with known truth, fit, and look at
//! coverage and bias over many seeds. Each seed is an independent,
//! reproducible stream, so the loop can be split across threads freely.
//!
//! Run with: `cargo run --release --example closed_loop_monte_carlo`

use std::thread;

use trapchar::heating::fit_heating_rate_reweighted;
use trapchar::sim::{simulate_heating_series, SimConfig, DEFAULT_SHOTS};
use trapchar::thermometry::predicted_nbar_uncertainty;

fn run(seeds: std::ops::Range<u64>) -> Vec<(f64, f64)> {
    let waits: Vec<f64> = (0..6).map(|i| i as f64 * 0.4e-3).collect();
    seeds
        .map(|seed| {
            let cfg = SimConfig {
                seed,
                ..SimConfig::default()
            };
            let series = simulate_heating_series(&cfg, &waits).expect("valid config");
            let probe = cfg.probe_time();
            let fit = fit_heating_rate_reweighted(&series, |n| {
                predicted_nbar_uncertainty(n.max(0.0), &cfg.rabi, probe, DEFAULT_SHOTS)
            })
            .expect("fit");
            (fit.ndot, fit.ndot_err)
        })
        .collect()
}

fn main() {
    let truth = SimConfig::default().heating_rate;
    let handles: Vec<_> = (0..4u64)
        .map(|k| thread::spawn(move || run(k * 250..(k + 1) * 250)))
        .collect();
    let fits: Vec<(f64, f64)> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();

    // same answers when run serially
    assert_eq!(fits, run(0..1000));

    let n = fits.len() as f64;
    let mean = fits.iter().map(|f| f.0).sum::<f64>() / n;
    for k in [1.0, 2.0, 3.0] {
        let inside = fits.iter().filter(|(r, e)| (r - truth).abs() <= k * e).count();
        println!("within {k} sigma: {:.1}%", 100.0 * inside as f64 / n);
    }
    let spread = (fits.iter().map(|f| (f.0 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let typical_err = fits.iter().map(|f| f.1).sum::<f64>() / n;
    println!("mean rate {mean:.1} q/s (bias {:+.2}%)", 100.0 * (mean / truth - 1.0));
    println!("scatter {spread:.1} q/s vs mean reported error {typical_err:.1} q/s");
}
