use std::path::Path;
use std::process::{Command, Output};

use trapchar::dataset::{load_dataset, DatasetKind};
use trapchar::report::FitReport;

fn trapchar(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trapchar"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn heating_simulate_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let listed = stdout(&trapchar(
        &[
            "--seed",
            "7",
            "--out-dir",
            "out",
            "simulate",
            "heating",
            "--rate",
            "0.78e3",
        ],
        d,
    ));
    assert_eq!(
        listed.trim(),
        Path::new("out").join("heating.csv").display().to_string()
    );
    let r = FitReport::from_json(&stdout(&trapchar(&["fit-heating", "--input", "out/heating.csv"], d))).unwrap();
    let ndot = r.get("ndot").unwrap();
    let err = ndot.std_err.unwrap();
    assert!((ndot.value - 780.0).abs() < 4.0 * err, "{} +- {err}", ndot.value);
    assert!(r.derived["field_noise_psd"] > 0.0);
    assert_eq!(r.provenance.input_digest.len(), 64);
}

#[test]
fn charging_fit_reports_offset_and_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stdout(&trapchar(&["--seed", "3", "--out-dir", ".", "simulate", "charging"], d));
    let listed = stdout(&trapchar(
        &[
            "--out-dir",
            "fits",
            "fit-charging",
            "--t-on",
            "400",
            "--input",
            "charging.csv",
        ],
        d,
    ));
    assert_eq!(listed.lines().count(), 2);
    let r = FitReport::from_json(&std::fs::read_to_string(d.join("fits/fit_charging.json")).unwrap()).unwrap();
    for name in ["df1", "df2", "T1", "T2", "f0"] {
        assert!(r.get(name).is_some(), "{name}");
    }
    let offset = r.get("df1").unwrap().value - r.get("df2").unwrap().value;
    assert!((offset / 101e3 - 1.0).abs() < 0.02, "{offset}");
    let table = std::fs::read_to_string(d.join("fits/fit_charging_table.csv")).unwrap();
    assert!(table.starts_with("time:s,freq:Hz,model:Hz,residual:Hz\n"));

    let dis = FitReport::from_json(&stdout(&trapchar(
        &["fit-discharge", "--t-off", "2400", "--input", "charging.csv"],
        d,
    )))
    .unwrap();
    assert!(dis.flags.iter().any(|f| f == "weakly_identified:T4"), "{:?}", dis.flags);
}

#[test]
fn thermometry_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let r = FitReport::from_json(&stdout(&trapchar(
        &["thermometry", "--p-red", "0.075", "--p-blue", "0.75", "--shots", "400"],
        dir.path(),
    )))
    .unwrap();
    let nbar = r.get("nbar").unwrap();
    assert!((nbar.value - 1.0 / 9.0).abs() < 1e-12);
    assert!(nbar.std_err.unwrap() > 0.0);
}

#[test]
fn normalize_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let r = FitReport::from_json(&stdout(&trapchar(
        &["normalize", "--rate", "780", "--freq-hz", "5.329e6"],
        dir.path(),
    )))
    .unwrap();
    let expected = 780.0 * (170.936_323 / 39.962_591) * 5.329f64.powi(2);
    let got = r.parameters[0].value;
    assert!((got / expected - 1.0).abs() < 1e-4, "{got} vs {expected}");
}

#[test]
fn beam_profile_from_simulated_scan() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stdout(&trapchar(&["--seed", "1", "--out-dir", ".", "simulate", "position"], d));
    let r = FitReport::from_json(&stdout(&trapchar(&["beam-profile", "--input", "position.csv"], d))).unwrap();
    assert_eq!(r.model, "beam-profile/two-beamlet");
    let sep = r.get("separation").unwrap().value;
    assert!((sep / 1.8e-6 - 1.0).abs() < 0.1, "{sep}");
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for run in ["a", "b"] {
        stdout(&trapchar(
            &[
                "--seed",
                "11",
                "--out-dir",
                run,
                "simulate",
                "charging",
                "--noise",
                "900",
            ],
            d,
        ));
        let input = format!("{run}/charging.csv");
        stdout(&trapchar(
            &["--out-dir", run, "fit-charging", "--t-on", "400", "--input", &input],
            d,
        ));
    }
    for f in ["charging.csv", "fit_charging.json", "fit_charging_table.csv"] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        let b = std::fs::read(d.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn written_datasets_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stdout(&trapchar(
        &[
            "--seed",
            "5",
            "--out-dir",
            ".",
            "simulate",
            "sideband",
            "--waits",
            "0,1e-3",
            "--shots",
            "200",
        ],
        d,
    ));
    let ds = load_dataset(&d.join("sideband.csv"), DatasetKind::SidebandScan).unwrap();
    assert_eq!(ds.to_sideband_observations().unwrap().len(), 2);
}

#[test]
fn report_subcommand_tabulates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stdout(&trapchar(
        &["--out-dir", ".", "normalize", "--rate", "780", "--freq-hz", "5.329e6"],
        d,
    ));
    stdout(&trapchar(
        &[
            "--out-dir",
            ".",
            "thermometry",
            "--p-red",
            "0.1",
            "--p-blue",
            "0.5",
            "--shots",
            "100",
        ],
        d,
    ));
    let t = stdout(&trapchar(
        &["--format", "table", "report", "normalize.json", "thermometry.json"],
        d,
    ));
    assert!(t.starts_with("model,parameter,value,std_err,unit\n"));
    assert!(t.lines().count() >= 3);
}

#[test]
fn failures_emit_error_records() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let o = trapchar(&["fit-heating", "--input", "missing.csv"], d);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_json(&o)["error"], "io");

    let o = trapchar(&["no-such-command"], d);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "usage");

    std::fs::write(d.join("bad.csv"), "time:s,nbar\n0,0.1\n2e-3,0.5\n1e-3,0.3\n").unwrap();
    let o = trapchar(&["fit-heating", "--input", "bad.csv"], d);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"], "parse");
    assert_eq!(e["line"], 4);

    let o = trapchar(
        &["normalize", "--rate", "780", "--freq-hz", "5e6", "--species", "Xe-999"],
        d,
    );
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(trapchar(&["--help"], d).status.code(), Some(0));
}

#[test]
fn config_file_adds_species() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("trap.toml"), "[[species]]\nname = \"Sr-88\"\nmass_u = 87.9056\n").unwrap();
    let r = FitReport::from_json(&stdout(&trapchar(
        &[
            "--config",
            "trap.toml",
            "normalize",
            "--rate",
            "100",
            "--species",
            "Sr-88",
            "--freq-hz",
            "1e6",
        ],
        d,
    )))
    .unwrap();
    let expected = 100.0 * 87.9056 / 39.962_591;
    assert!((r.parameters[0].value / expected - 1.0).abs() < 1e-4);

    std::fs::write(d.join("typo.toml"), "[sim]\nsede = 3\n").unwrap();
    let o = trapchar(
        &["--config", "typo.toml", "normalize", "--rate", "1", "--freq-hz", "1e6"],
        d,
    );
    assert_eq!(o.status.code(), Some(2));
}
