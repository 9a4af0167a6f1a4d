//! Datasets on disk and structured reports: unit-tagged CSV headers,
//! metadata lines, positional origins, and JSON reports with provenance.
//!
//! Run with: `cargo run --example dataset_and_reports`

use std::path::Path;

use trapchar::charging::{fit_charging, ChargingFitOptions};
use trapchar::dataset::*;
use trapchar::report::*;
use trapchar::sim::{simulate_charging_series, SimConfig};

fn main() -> trapchar::Result<()> {
    let dir = std::env::temp_dir().join("trapchar-dataset-example");
    std::fs::create_dir_all(&dir).map_err(|source| trapchar::Error::Io {
        path: dir.clone(),
        source,
    })?;

    // columns may carry any supported unit; loads come back in SI
    let text = "\
# species: Yb-171
# axial_freq_hz: 5.329e6
time:ms,nbar,nbar_err
0,0.11,0.02
0.5,0.52,0.05
1.0,0.88,0.06
";
    let ds = parse_dataset(text, DatasetKind::Heating, Path::new("inline.csv"))?;
    let series = ds.to_heating_series()?;
    println!(
        "heating rows: {:?}",
        series.points().iter().map(|p| p.wait_time).collect::<Vec<_>>()
    );

    // positions measured from the loading hole are flipped onto the grating axis
    let scan = "\
# origin: loading_hole
pos:um,rabi:kHz
63,3
64,8
65,20
66,40
67,64
69,118
71,60
";
    let ds = parse_dataset(scan, DatasetKind::PositionScan, Path::new("scan.csv"))?;
    let first = ds.to_position_scan()?.points()[0];
    println!(
        "first scan point: {:.1} um, 2pi x {:.0} kHz",
        first.position * 1e6,
        first.rabi / std::f64::consts::TAU / 1e3
    );

    match parse_dataset(
        "time:s,nbar\n0,0.1\n2,0.5\n1,0.3\n",
        DatasetKind::Heating,
        Path::new("bad.csv"),
    ) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }

    // simulate, write, read back, fit, report
    let cfg = SimConfig {
        seed: 9,
        ..SimConfig::default()
    };
    let sim = simulate_charging_series(&cfg, 15.0, (400.0, 2400.0), 4900.0)?;
    let path = dir.join("charging.csv");
    write_dataset(&path, &Dataset::from_frequency_series(&sim))?;
    let loaded = load_dataset(&path, DatasetKind::Charging)?.to_frequency_series()?;
    println!("round trip equal: {}", loaded.points() == sim.points());

    let (fit, exp) = fit_charging(&loaded, 400.0, &ChargingFitOptions::default())?;
    let bytes = std::fs::read(&path).map_err(|source| trapchar::Error::Io {
        path: path.clone(),
        source,
    })?;
    let provenance = Provenance {
        input_digest: sha256_hex(&bytes),
        seed: Some(cfg.seed),
        version: TOOLKIT_VERSION.into(),
    };
    let report = FitReport::from_exp_fit("charging", &exp, provenance).derive("settled_offset", fit.df1 - fit.df2);
    let json = report.to_json()?;
    println!("{json}");
    assert_eq!(FitReport::from_json(&json)?, report);
    Ok(())
}
