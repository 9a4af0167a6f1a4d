//! Command-line front end. Each subcommand loads or simulates a dataset,
//! runs one analysis, and emits a JSON fit report and/or a plot-ready table.
//!
//! Exit codes: 0 success, 2 validation error, 3 fit non-convergence,
//! 4 I/O error. Failures print a one-line JSON error record on stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use crate::beam::{fit_profile, GratingOutputModel, ProfileFitOptions, ProfileMode, RabiReference};
use crate::charging::{
    charging_freq, compensation_field, discharge_freq, fit_charging, fit_discharge, settled_offset, settled_stability,
    ChargingFitOptions, DischargeFitOptions, F0Mode, DEFAULT_FIELD_SENSITIVITY,
};
use crate::dataset::{fmt_num, load_dataset, write_atomic, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::heating::{
    fit_heating_rate, fit_heating_rate_reweighted, normalization_factor, spectral_density_from_rate, HeatingRateResult,
};
use crate::report::{sha256_hex, FitReport, Provenance, TOOLKIT_VERSION};
use crate::sim::{
    simulate_charging_series, simulate_heating_series, simulate_position_scan, simulate_sideband_series, SimConfig,
};
use crate::thermometry::{
    nbar_with_uncertainty, predicted_nbar_uncertainty, MatrixElementModel, RabiParams, SidebandObservation,
};
use crate::units::{hz_to_angular, make_trap_context_in, IonSpecies, SpeciesTable};

#[derive(Debug, Parser)]
#[command(
    name = "trapchar",
    version,
    about = "Surface ion trap characterization: simulate, fit, report"
)]
pub struct Cli {
    /// Seed for simulated noise (recorded in report provenance).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with extra species and simulation defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Write artifacts here instead of printing to stdout.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Report)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Report,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    #[command(subcommand)]
    Simulate(SimTarget),
    /// Straight-line heating-rate fit of nbar against wait time.
    FitHeating(FitHeatingArgs),
    /// Two-exponential fit of the light-on frequency shift.
    FitCharging(FitChargingArgs),
    /// Two-exponential fit of the relaxation after the light turns off.
    FitDischarge(FitDischargeArgs),
    /// Mean occupation from red/blue sideband excitations.
    Thermometry(ThermometryArgs),
    /// Beam-profile fit of a Rabi-frequency position scan.
    BeamProfile(BeamProfileArgs),
    /// Rescale a heating rate to another species and secular frequency.
    Normalize(NormalizeArgs),
    /// Re-load reports and print them.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum SimTarget {
    Heating(SimHeatingArgs),
    Charging(SimChargingArgs),
    Sideband(SimSidebandArgs),
    Position(SimPositionArgs),
}

#[derive(Debug, Args)]
pub struct SimHeatingArgs {
    /// Heating rate, quanta/s.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub initial_nbar: Option<f64>,
    /// Shots per sideband; 0 gives exact probabilities.
    #[arg(long)]
    pub shots: Option<u32>,
    #[arg(long, default_value_t = 6)]
    pub points: usize,
    /// Longest wait, s.
    #[arg(long, default_value_t = 2e-3)]
    pub span: f64,
}

#[derive(Debug, Args)]
pub struct SimChargingArgs {
    #[arg(long, default_value_t = 15.0)]
    pub interval: f64,
    #[arg(long, default_value_t = 400.0)]
    pub t_on: f64,
    /// Light-on duration, s.
    #[arg(long, default_value_t = 2000.0)]
    pub duration: f64,
    /// Total record length, s.
    #[arg(long, default_value_t = 4900.0)]
    pub total: f64,
    /// Frequency noise sigma, Hz.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimSidebandArgs {
    /// Wait times, s (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub waits: Vec<f64>,
    #[arg(long)]
    pub shots: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SimPositionArgs {
    #[arg(long, default_value_t = 5.0)]
    pub start_um: f64,
    #[arg(long, default_value_t = 17.0)]
    pub stop_um: f64,
    #[arg(long, default_value_t = 0.25)]
    pub step_um: f64,
    /// Relative Rabi-frequency noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 11.0)]
    pub center_um: f64,
    #[arg(long, default_value_t = 1.8)]
    pub separation_um: f64,
    #[arg(long, default_value_t = 0.9)]
    pub waist_um: f64,
    /// Relative beamlet phase, rad.
    #[arg(long, default_value_t = 0.95 * std::f64::consts::PI)]
    pub phase: f64,
    #[arg(long, default_value_t = 0.9)]
    pub ratio: f64,
    /// Rabi frequency at unit beamlet intensity, kHz.
    #[arg(long, default_value_t = 121.1)]
    pub rabi_khz: f64,
}

#[derive(Debug, Args)]
pub struct FitHeatingArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Reweight with the projection-noise model at this many shots.
    #[arg(long)]
    pub reweight_shots: Option<u32>,
}

#[derive(Debug, Clone, Copy)]
pub struct F0Arg(pub F0Mode);

impl std::str::FromStr for F0Arg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(F0Arg(match s {
            "auto" => F0Mode::Auto,
            "baseline" => F0Mode::Baseline,
            "free" => F0Mode::Free,
            v => F0Mode::Fixed(
                v.parse()
                    .map_err(|_| format!("expected auto, baseline, free or Hz, got {v:?}"))?,
            ),
        }))
    }
}

#[derive(Debug, Args)]
pub struct FitChargingArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub t_on: f64,
    /// auto | baseline | free | fixed value in Hz.
    #[arg(long, default_value = "auto")]
    pub f0: F0Arg,
    /// Start of the settled window after turn-on, s.
    #[arg(long)]
    pub settle_after: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitDischargeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub t_off: f64,
    #[arg(long, default_value = "auto")]
    pub f0: F0Arg,
    /// Charging shift at turn-off, Hz; ties df3 + df4 to its negative.
    #[arg(long)]
    pub continuity: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ThermometryArgs {
    #[arg(long, conflicts_with = "input", requires = "p_blue")]
    pub p_red: Option<f64>,
    #[arg(long, conflicts_with = "input", requires = "p_red")]
    pub p_blue: Option<f64>,
    #[arg(long)]
    pub shots: Option<u32>,
    /// Sideband-scan dataset instead of single values.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    TwoBeamlet,
    SingleGaussian,
}

#[derive(Debug, Args)]
pub struct BeamProfileArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::TwoBeamlet)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    /// Heating rate, quanta/s.
    #[arg(long)]
    pub rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub rate_err: f64,
    #[arg(long, default_value = "Yb-171")]
    pub species: String,
    /// Secular frequency of the measurement, Hz.
    #[arg(long)]
    pub freq_hz: f64,
    #[arg(long, default_value = "Ca-40")]
    pub ref_species: String,
    #[arg(long, default_value_t = 1e6)]
    pub ref_freq_hz: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

/// Optional TOML configuration.
///
/// ```toml
/// [[species]]
/// name = "Sr-88"
/// mass_u = 87.9056
///
/// [sim]
/// shots = 500
/// lamb_dicke = 0.1
/// ```
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub species: Vec<SpeciesEntry>,
    #[serde(default)]
    pub sim: SimOverrides,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesEntry {
    pub name: String,
    pub mass_u: f64,
    #[serde(default = "one")]
    pub charge: i32,
}

fn one() -> i32 {
    1
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOverrides {
    pub species: Option<String>,
    pub axial_freq_hz: Option<f64>,
    pub radial_freq_hz: Option<f64>,
    pub distance_um: Option<f64>,
    pub shots: Option<u32>,
    pub base_rabi_khz: Option<f64>,
    pub lamb_dicke: Option<f64>,
    pub exact_matrix_elements: Option<bool>,
    pub probe_time_us: Option<f64>,
    pub initial_nbar: Option<f64>,
    pub heating_rate: Option<f64>,
    pub noise_floor: Option<f64>,
    pub rabi_noise: Option<f64>,
}

struct Context {
    seed: Option<u64>,
    table: SpeciesTable,
    sim: SimConfig,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Context> {
    let cfg: ConfigFile = match path {
        None => ConfigFile::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            toml::from_str(&text).map_err(|e| {
                let (line, column) = e.span().map(|s| line_col(&text, s.start)).unwrap_or((0, 0));
                Error::Parse {
                    path: p.to_path_buf(),
                    line,
                    column,
                    message: e.message().to_string(),
                }
            })?
        }
    };
    let mut table = SpeciesTable::default();
    for s in &cfg.species {
        table.insert(IonSpecies::new(
            &s.name,
            s.mass_u * crate::units::ATOMIC_MASS_UNIT,
            s.charge,
        )?);
    }
    let o = &cfg.sim;
    let mut sim = SimConfig::default();
    if o.species.is_some() || o.axial_freq_hz.is_some() || o.radial_freq_hz.is_some() || o.distance_um.is_some() {
        sim.trap = make_trap_context_in(
            &table,
            o.species.as_deref().unwrap_or(&sim.trap.species.name),
            o.axial_freq_hz.map_or(sim.trap.axial_freq, hz_to_angular),
            o.radial_freq_hz.map_or(sim.trap.radial_freq, hz_to_angular),
            o.distance_um.map_or(sim.trap.ion_surface_distance, |d| d * 1e-6),
        )?;
    }
    if let Some(s) = o.shots {
        sim.shots = (s > 0).then_some(s);
    }
    let model = match o.exact_matrix_elements {
        Some(true) => MatrixElementModel::ExactLaguerre,
        Some(false) => MatrixElementModel::FirstOrderLd,
        None => sim.rabi.model,
    };
    sim.rabi = RabiParams::new(
        o.base_rabi_khz.map_or(sim.rabi.base_rabi, |k| hz_to_angular(k * 1e3)),
        o.lamb_dicke.unwrap_or(sim.rabi.lamb_dicke),
        model,
    )?;
    sim.probe_time = o.probe_time_us.map(|t| t * 1e-6).or(sim.probe_time);
    sim.initial_nbar = o.initial_nbar.unwrap_or(sim.initial_nbar);
    sim.heating_rate = o.heating_rate.unwrap_or(sim.heating_rate);
    sim.noise_floor = o.noise_floor.unwrap_or(sim.noise_floor);
    sim.rabi_noise = o.rabi_noise.unwrap_or(sim.rabi_noise);
    sim.seed = seed.unwrap_or(0);
    sim.validate()?;
    Ok(Context { seed, table, sim })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// What a command produced.
#[derive(Default)]
struct Artifacts {
    name: String,
    report: Option<FitReport>,
    table: Option<String>,
    dataset: Option<Dataset>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let record = json!({
                "error": "usage",
                "exit_code": 2,
                "message": e.to_string().trim(),
            });
            let _ = writeln!(stderr, "{record}");
            return 2;
        }
    };
    match execute(&cli).and_then(|a| emit(&cli, &a, stdout)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_record(&e));
            e.exit_code()
        }
    }
}

/// Machine-readable description of an error.
pub fn error_record(e: &Error) -> serde_json::Value {
    let mut rec = json!({
        "error": e.kind(),
        "exit_code": e.exit_code(),
        "message": e.to_string(),
    });
    let obj = rec.as_object_mut().expect("object");
    match e {
        Error::Parse { path, line, column, .. } => {
            obj.insert("path".into(), json!(path.display().to_string()));
            obj.insert("line".into(), json!(line));
            obj.insert("column".into(), json!(column));
        }
        Error::Io { path, .. } => {
            obj.insert("path".into(), json!(path.display().to_string()));
        }
        Error::NonConvergence {
            starts,
            best_chi2,
            best_params,
            ..
        } => {
            obj.insert("starts".into(), json!(starts));
            obj.insert("best_chi2".into(), json!(best_chi2.is_finite().then_some(*best_chi2)));
            obj.insert("best_params".into(), json!(best_params));
        }
        _ => {}
    }
    rec
}

fn execute(cli: &Cli) -> Result<Artifacts> {
    let ctx = load_config(cli.config.as_deref(), cli.seed)?;
    match &cli.command {
        Command::Simulate(target) => simulate(&ctx, target),
        Command::FitHeating(a) => cmd_fit_heating(&ctx, a),
        Command::FitCharging(a) => cmd_fit_charging(&ctx, a),
        Command::FitDischarge(a) => cmd_fit_discharge(&ctx, a),
        Command::Thermometry(a) => cmd_thermometry(&ctx, a),
        Command::BeamProfile(a) => cmd_beam_profile(&ctx, a),
        Command::Normalize(a) => cmd_normalize(&ctx, a),
        Command::Report(a) => cmd_report(a),
    }
}

fn emit(cli: &Cli, a: &Artifacts, stdout: &mut dyn Write) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    if let Some(dir) = &cli.out_dir {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::new();
        if let Some(ds) = &a.dataset {
            let p = dir.join(format!("{}.csv", a.name));
            write_atomic(&p, ds.to_csv_string().as_bytes())?;
            written.push(p);
        }
        if let Some(r) = &a.report {
            let p = dir.join(format!("{}.json", a.name));
            write_atomic(&p, r.to_json()?.as_bytes())?;
            written.push(p);
        }
        if let Some(t) = &a.table {
            let p = dir.join(format!("{}_table.csv", a.name));
            write_atomic(&p, t.as_bytes())?;
            written.push(p);
        }
        for p in written {
            writeln!(stdout, "{}", p.display()).map_err(io(Path::new("<stdout>")))?;
        }
        return Ok(());
    }
    let text = match (&a.dataset, cli.format, &a.report, &a.table) {
        (Some(ds), _, _, _) => ds.to_csv_string(),
        (None, Format::Report, Some(r), _) => r.to_json()?,
        (None, _, _, Some(t)) => t.clone(),
        (None, _, Some(r), None) => r.to_json()?,
        _ => String::new(),
    };
    stdout.write_all(text.as_bytes()).map_err(io(Path::new("<stdout>")))
}

fn provenance_for_file(ctx: &Context, path: &Path) -> Result<Provenance> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Provenance {
        input_digest: sha256_hex(&bytes),
        seed: ctx.seed,
        version: TOOLKIT_VERSION.into(),
    })
}

fn provenance_for_args(ctx: &Context, record: &str) -> Provenance {
    Provenance {
        input_digest: sha256_hex(record.as_bytes()),
        seed: ctx.seed,
        version: TOOLKIT_VERSION.into(),
    }
}

fn simulate(ctx: &Context, target: &SimTarget) -> Result<Artifacts> {
    let mut cfg = ctx.sim.clone();
    let (name, dataset) = match target {
        SimTarget::Heating(a) => {
            if let Some(r) = a.rate {
                cfg.heating_rate = r;
            }
            if let Some(n) = a.initial_nbar {
                cfg.initial_nbar = n;
            }
            if let Some(s) = a.shots {
                cfg.shots = (s > 0).then_some(s);
            }
            if a.points < 2 || !(a.span > 0.0) {
                return Err(Error::invalid("need at least 2 points and a positive span"));
            }
            let waits: Vec<f64> = (0..a.points)
                .map(|i| a.span * i as f64 / (a.points - 1) as f64)
                .collect();
            let s = simulate_heating_series(&cfg, &waits)?;
            ("heating", Dataset::from_heating_series(&s))
        }
        SimTarget::Charging(a) => {
            if let Some(n) = a.noise {
                cfg.noise_floor = n;
            }
            let s = simulate_charging_series(&cfg, a.interval, (a.t_on, a.t_on + a.duration), a.total)?;
            ("charging", Dataset::from_frequency_series(&s))
        }
        SimTarget::Sideband(a) => {
            if let Some(s) = a.shots {
                cfg.shots = (s > 0).then_some(s);
            }
            let obs = simulate_sideband_series(&cfg, &a.waits)?;
            ("sideband", Dataset::from_sideband_observations(&obs))
        }
        SimTarget::Position(a) => {
            if let Some(n) = a.noise {
                cfg.rabi_noise = n;
            }
            if !(a.step_um > 0.0 && a.stop_um > a.start_um) {
                return Err(Error::invalid("position range must be increasing with a positive step"));
            }
            let n = ((a.stop_um - a.start_um) / a.step_um + 1e-9).floor() as usize;
            let xs: Vec<f64> = (0..=n).map(|i| (a.start_um + i as f64 * a.step_um) * 1e-6).collect();
            let beam = GratingOutputModel::two_beamlet(
                a.center_um * 1e-6,
                a.separation_um * 1e-6,
                a.waist_um * 1e-6,
                a.phase,
                a.ratio,
                1.0,
            )?;
            let reference = RabiReference {
                rabi_ref: hz_to_angular(a.rabi_khz * 1e3),
                intensity_ref: 1.0,
            };
            let scan = simulate_position_scan(&cfg, &beam, &reference, &xs)?;
            ("position", Dataset::from_position_scan(&scan))
        }
    };
    Ok(Artifacts {
        name: name.into(),
        dataset: Some(dataset),
        ..Default::default()
    })
}

fn cmd_fit_heating(ctx: &Context, a: &FitHeatingArgs) -> Result<Artifacts> {
    let ds = load_dataset(&a.input, DatasetKind::Heating)?;
    let mut series = ds.to_heating_series()?;
    series.context = ds.trap_context_in(&ctx.table)?;
    let fit: HeatingRateResult = match a.reweight_shots {
        None => fit_heating_rate(&series)?,
        Some(shots) => {
            if shots == 0 {
                return Err(Error::invalid("reweight shots must be >= 1"));
            }
            let probe = ctx.sim.probe_time();
            fit_heating_rate_reweighted(&series, |n| predicted_nbar_uncertainty(n, &ctx.sim.rabi, probe, shots))?
        }
    };
    let mut r = FitReport::new("heating-rate", provenance_for_file(ctx, &a.input)?)
        .param("ndot", fit.ndot, fit.ndot_err, "1/s")
        .param("intercept", fit.intercept, fit.intercept_err, "")
        .derive("ndot_per_ms", fit.ndot * 1e-3);
    r.chi2 = Some(fit.chi2);
    r.dof = Some(fit.dof);
    r.residual_rms = Some(rms(series
        .points()
        .iter()
        .map(|p| p.nbar - fit.intercept - fit.ndot * p.wait_time)));
    if let Some(tc) = &series.context {
        if fit.ndot >= 0.0 {
            r = r.derive("field_noise_psd", spectral_density_from_rate(&fit, tc)?);
        }
    }
    let mut t = String::from("time:s,nbar,nbar_err,model\n");
    for p in series.points() {
        let _ = writeln!(
            t,
            "{},{},{},{}",
            fmt_num(p.wait_time),
            fmt_num(p.nbar),
            p.nbar_err.map_or(String::new(), fmt_num),
            fmt_num(fit.intercept + fit.ndot * p.wait_time)
        );
    }
    Ok(Artifacts {
        name: "fit_heating".into(),
        report: Some(r),
        table: Some(t),
        dataset: None,
    })
}

fn overlay_table(rows: impl Iterator<Item = (f64, f64, f64)>) -> String {
    let mut t = String::from("time:s,freq:Hz,model:Hz,residual:Hz\n");
    for (time, f, m) in rows {
        let _ = writeln!(t, "{},{},{},{}", fmt_num(time), fmt_num(f), fmt_num(m), fmt_num(f - m));
    }
    t
}

fn cmd_fit_charging(ctx: &Context, a: &FitChargingArgs) -> Result<Artifacts> {
    let series = load_dataset(&a.input, DatasetKind::Charging)?.to_frequency_series()?;
    let opts = ChargingFitOptions {
        f0: a.f0.0,
        ..Default::default()
    };
    let (p, fit) = fit_charging(&series, a.t_on, &opts)?;
    let mut r = FitReport::from_exp_fit("charging", &fit, provenance_for_file(ctx, &a.input)?);
    let offset = settled_offset(&p);
    r = r.derive("t_on", a.t_on).derive("settled_offset", offset).derive(
        "compensation_field",
        compensation_field(offset.abs(), DEFAULT_FIELD_SENSITIVITY)?,
    );
    if let Some(end) = series
        .points()
        .iter()
        .filter(|q| q.time >= a.t_on)
        .map(|q| q.time)
        .next_back()
    {
        r = r.derive("shift_at_last_point", p.shift_at(end)?);
    }
    if let Ok(st) = settled_stability(&series, &p, a.settle_after) {
        r = r.derive("settled_sigma", st.sigma).derive("settled_mean", st.mean);
        if !st.normal {
            r.flags.push("non_normal_residuals".into());
        }
    }
    let rows: Vec<(f64, f64, f64)> = series
        .points()
        .iter()
        .filter(|q| q.time >= a.t_on)
        .filter(|q| {
            series
                .light_on_intervals()
                .iter()
                .any(|(s, e)| q.time >= *s && q.time <= *e)
                || series.light_on_intervals().is_empty()
        })
        .map(|q| Ok((q.time, q.freq, charging_freq(q.time, &p)?)))
        .collect::<Result<_>>()?;
    Ok(Artifacts {
        name: "fit_charging".into(),
        report: Some(r),
        table: Some(overlay_table(rows.into_iter())),
        dataset: None,
    })
}

fn cmd_fit_discharge(ctx: &Context, a: &FitDischargeArgs) -> Result<Artifacts> {
    let series = load_dataset(&a.input, DatasetKind::Charging)?.to_frequency_series()?;
    let opts = DischargeFitOptions {
        f0: a.f0.0,
        continuity: a.continuity,
        ..Default::default()
    };
    let (p, fit) = fit_discharge(&series, a.t_off, &opts)?;
    let r = FitReport::from_exp_fit("discharge", &fit, provenance_for_file(ctx, &a.input)?)
        .derive("t_off", a.t_off)
        .derive("step_at_turn_off", -(p.df3 + p.df4));
    let next_on = series
        .light_on_intervals()
        .iter()
        .map(|iv| iv.0)
        .filter(|s| *s > a.t_off)
        .fold(f64::INFINITY, f64::min);
    let rows: Vec<(f64, f64, f64)> = series
        .points()
        .iter()
        .filter(|q| q.time >= a.t_off && q.time < next_on)
        .map(|q| Ok((q.time, q.freq, discharge_freq(q.time, &p)?)))
        .collect::<Result<_>>()?;
    Ok(Artifacts {
        name: "fit_discharge".into(),
        report: Some(r),
        table: Some(overlay_table(rows.into_iter())),
        dataset: None,
    })
}

fn cmd_thermometry(ctx: &Context, a: &ThermometryArgs) -> Result<Artifacts> {
    let (obs, prov) = match (&a.input, a.p_red, a.p_blue) {
        (Some(path), _, _) => {
            let mut obs = load_dataset(path, DatasetKind::SidebandScan)?.to_sideband_observations()?;
            if let Some(s) = a.shots {
                for (_, o) in &mut obs {
                    o.shots = Some(s);
                }
            }
            (obs, provenance_for_file(ctx, path)?)
        }
        (None, Some(r), Some(b)) => {
            let o = SidebandObservation::new(0.0, r, b, a.shots)?;
            let record = format!(
                "thermometry p_red={} p_blue={} shots={}",
                fmt_num(r),
                fmt_num(b),
                a.shots.map_or("exact".to_string(), |s| s.to_string())
            );
            (vec![(0.0, o)], provenance_for_args(ctx, &record))
        }
        _ => return Err(Error::invalid("give --p-red and --p-blue, or --input")),
    };
    let mut r = FitReport::new("sideband-thermometry", prov);
    let mut t = String::from("wait:s,ratio,nbar,nbar_err\n");
    let single = obs.len() == 1;
    for (i, (w, o)) in obs.iter().enumerate() {
        let (n, e) = nbar_with_uncertainty(o)?;
        let name = if single {
            "nbar".to_string()
        } else {
            format!("nbar_{}", i + 1)
        };
        r = r.param(&name, n, if o.shots.is_some() { e } else { f64::NAN }, "");
        let _ = writeln!(
            t,
            "{},{},{},{}",
            fmt_num(*w),
            fmt_num(o.p_red / o.p_blue),
            fmt_num(n),
            fmt_num(e)
        );
    }
    if single {
        let o = &obs[0].1;
        r = r.derive("ratio", o.p_red / o.p_blue);
    }
    Ok(Artifacts {
        name: "thermometry".into(),
        report: Some(r),
        table: Some(t),
        dataset: None,
    })
}

fn cmd_beam_profile(ctx: &Context, a: &BeamProfileArgs) -> Result<Artifacts> {
    let scan = load_dataset(&a.input, DatasetKind::PositionScan)?.to_position_scan()?;
    let mode = match a.mode {
        ModeArg::TwoBeamlet => ProfileMode::TwoBeamlet,
        ModeArg::SingleGaussian => ProfileMode::SingleGaussian,
    };
    let (model, fit) = fit_profile(&scan, mode, &ProfileFitOptions::default())?;
    let r = FitReport::from_profile_fit(&fit, provenance_for_file(ctx, &a.input)?);
    let mut t = String::from("pos:m,rabi:rad/s,model:rad/s\n");
    for p in scan.points() {
        let m = crate::beam::rabi_from_intensity(model.intensity(p.position)?, &fit.reference)?;
        let _ = writeln!(t, "{},{},{}", fmt_num(p.position), fmt_num(p.rabi), fmt_num(m));
    }
    Ok(Artifacts {
        name: "beam_profile".into(),
        report: Some(r),
        table: Some(t),
        dataset: None,
    })
}

fn cmd_normalize(ctx: &Context, a: &NormalizeArgs) -> Result<Artifacts> {
    let source = make_trap_context_in(
        &ctx.table,
        &a.species,
        hz_to_angular(a.freq_hz),
        hz_to_angular(a.freq_hz),
        50e-6,
    )?;
    let reference = ctx.table.get(&a.ref_species)?;
    let factor = normalization_factor(&source, reference, hz_to_angular(a.ref_freq_hz))?;
    let rate = HeatingRateResult::from_rate(a.rate, a.rate_err)?;
    let record = format!(
        "normalize rate={} rate_err={} species={} freq_hz={} ref_species={} ref_freq_hz={}",
        fmt_num(a.rate),
        fmt_num(a.rate_err),
        a.species,
        fmt_num(a.freq_hz),
        a.ref_species,
        fmt_num(a.ref_freq_hz)
    );
    let mut r = FitReport::new("normalized-heating-rate", provenance_for_args(ctx, &record))
        .param("ndot", a.rate * factor, a.rate_err * factor, "1/s")
        .derive("factor", factor);
    if a.rate >= 0.0 {
        r = r.derive("field_noise_psd", spectral_density_from_rate(&rate, &source)?);
    }
    let t = format!(
        "species,freq:Hz,ndot:1/s,ref_species,ref_freq:Hz,ndot_ref:1/s\n{},{},{},{},{},{}\n",
        a.species,
        fmt_num(a.freq_hz),
        fmt_num(a.rate),
        a.ref_species,
        fmt_num(a.ref_freq_hz),
        fmt_num(a.rate * factor)
    );
    Ok(Artifacts {
        name: "normalize".into(),
        report: Some(r),
        table: Some(t),
        dataset: None,
    })
}

fn cmd_report(a: &ReportArgs) -> Result<Artifacts> {
    let mut reports = Vec::new();
    for path in &a.files {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        let r = FitReport::from_json(&text).map_err(|e| match e {
            Error::Parse {
                line, column, message, ..
            } => Error::Parse {
                path: path.clone(),
                line,
                column,
                message,
            },
            other => other,
        })?;
        reports.push(r);
    }
    let mut t = String::from("model,parameter,value,std_err,unit\n");
    for r in &reports {
        for p in &r.parameters {
            let _ = writeln!(
                t,
                "{},{},{},{},{}",
                r.model,
                p.name,
                fmt_num(p.value),
                p.std_err.map_or(String::new(), fmt_num),
                p.unit
            );
        }
        let derived: BTreeMap<_, _> = r.derived.iter().collect();
        for (k, v) in derived {
            let _ = writeln!(t, "{},{},{},,", r.model, k, fmt_num(*v));
        }
    }
    // a single report is echoed in normalized form; several become the table
    let report = (reports.len() == 1).then(|| reports.remove(0));
    Ok(Artifacts {
        name: "report".into(),
        report,
        table: Some(t),
        dataset: None,
    })
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}
