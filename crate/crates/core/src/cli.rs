//! Command-line front end. [`run_command`] parses `argv`, runs one
//! subcommand and returns the process exit code.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::detector;
use crate::error::Error;
use crate::estimator::{EstimateResult, Estimator, EstimatorOptions};
use crate::fisher::{self, FisherMatrix, Parameterization};
use crate::harness::{self, ExperimentConfig, VarianceReport};
use crate::lgis::{self, LgisError, LgisHeader, LgisStack};
use crate::quadrature::IntegrationSpec;

/// JSON run configuration; mirrors [`ExperimentConfig`] and rejects unknown keys.
pub type RunConfig = ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Parser)]
#[command(name = "lgloc", version, about = "LG-mode localization: simulation, fitting and information bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate every configured plane into one LGIS stack (requires --out).
    ///
    /// Frames are stored plane by plane, `frames_per_plane` each.
    Simulate(CommonArgs),
    /// Fit each frame of an LGIS stack; writes one EstimateResult per line.
    ///
    /// JSON lines carry `frame` plus the result fields. CSV columns:
    /// frame, converged, iterations, final_loglik, then one column per
    /// parameter label.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        /// LGIS stack to fit.
        #[arg(long)]
        input: PathBuf,
    },
    /// Information and bound tables at each configured plane.
    ///
    /// CSV columns: z, quantity, parameter, value. Quantities: qfi,
    /// cfi_ideal, cfi_pixelated, crb_ideal, crb_practical (diagonals; CRBs
    /// for the configured photon count, inf when unbounded).
    Crb(CommonArgs),
    /// Information sweep over the configured axis.
    ///
    /// CSV columns: value, snr, w_over_pitch, cfi_x, cfi_y, cfi_z, ideal_x,
    /// ideal_y, ideal_z, qfi_x, qfi_y, qfi_z, ratio_x, ratio_y, ratio_z
    /// (information per photon; ratio = pixelated CFI / QFI).
    Sweep(CommonArgs),
    /// Monte Carlo variance report against the CRB.
    ///
    /// CSV columns: z, parameter, variance, variance_error, mean,
    /// crb_practical, crb_ideal, converged_fraction, degraded.
    Report(CommonArgs),
}

/// Failure carried to the exit-code contract.
#[derive(Debug)]
pub struct CliError {
    pub exit: i32,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_CONFIG,
            code: "config",
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_IO,
            code: "io",
            message: message.into(),
        }
    }

    /// One-line JSON diagnostic.
    pub fn diagnostic(&self) -> String {
        serde_json::json!({"error": self.code, "exit": self.exit, "message": self.message}).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let exit = match &e {
            Error::InvalidInput(_) => EXIT_CONFIG,
            Error::Lgis(_) => EXIT_IO,
            _ => EXIT_NUMERIC,
        };
        Self {
            exit,
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl From<LgisError> for CliError {
    fn from(e: LgisError) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs `argv` (including the program name) and returns the exit code.
/// Errors print the usage or message followed by a JSON diagnostic line.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let _ = e.print();
            eprintln!("{}", CliError::config(e.kind().to_string()).diagnostic());
            return EXIT_CONFIG;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            e.exit
        }
    }
}

fn dispatch(command: &Command) -> CliResult<()> {
    match command {
        Command::Simulate(c) => simulate(c),
        Command::Fit { common, input } => fit(common, input),
        Command::Crb(c) => crb(c),
        Command::Sweep(c) => sweep(c),
        Command::Report(c) => report(c),
    }
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn required_config(common: &CommonArgs) -> CliResult<RunConfig> {
    let path = common.config.as_ref().ok_or_else(|| CliError::config("--config is required"))?;
    let mut config = load_config(path)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn emit(common: &CommonArgs, bytes: &[u8]) -> CliResult<()> {
    match &common.out {
        Some(p) => fs::write(p, bytes).map_err(|e| CliError::io(format!("{}: {e}", p.display()))),
        None => io::stdout().write_all(bytes).map_err(|e| CliError::io(e.to_string())),
    }
}

fn json_bytes<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

/// Shortest representation that parses back to the same `f64`.
fn num(v: f64) -> String {
    format!("{v}")
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| CliError::io(e.to_string());
    w.write_record(header).map_err(io_err)?;
    for r in rows {
        w.write_record(r).map_err(io_err)?;
    }
    w.into_inner().map_err(|e| CliError::io(e.to_string()))
}

fn simulate(common: &CommonArgs) -> CliResult<()> {
    let config = required_config(common)?;
    if common.out.is_none() {
        return Err(CliError::config("simulate writes a binary stack and needs --out"));
    }
    let mut frames = Vec::with_capacity(config.z_planes.len() * config.frames_per_plane);
    for (p, &z) in config.z_planes.iter().enumerate() {
        let map = config.truth_means(&config.pose(z));
        for i in 0..config.frames_per_plane {
            let mut f = detector::sample_frame_indexed(config.seed, config.frame_index(p, 0, i), &map, &config.detector.noise);
            f.frame_index = frames.len() as u64;
            frames.push(f);
        }
    }
    let mut header = LgisHeader::new(&config.detector, frames.len());
    header.seed = Some(config.seed);
    header.mode = Some(config.mode.clone());
    header.geometry = Some(config.geometry);
    header.photons = Some(config.photons);
    if let [z] = config.z_planes[..] {
        header.pose = Some(config.pose(z));
    }
    let stack = LgisStack::from_frames(header, &frames)?;
    emit(common, &stack.to_bytes()?)
}

#[derive(Serialize)]
struct FitLine<'a> {
    frame: usize,
    #[serde(flatten)]
    result: &'a EstimateResult,
}

fn fit(common: &CommonArgs, input: &Path) -> CliResult<()> {
    let stack = lgis::read_lgis(input)?;
    let h = &stack.header;
    let (spec, geom, detector, opts) = match &common.config {
        Some(_) => {
            let c = required_config(common)?;
            if c.detector.rows() != h.rows || c.detector.cols() != h.cols {
                return Err(CliError::config(format!(
                    "config detector {}x{} does not match the stack {}x{}",
                    c.detector.rows(),
                    c.detector.cols(),
                    h.rows,
                    h.cols
                )));
            }
            let opts = c.estimator_options();
            (c.mode, c.geometry, c.detector, opts)
        }
        None => {
            let missing = |what: &str| CliError::config(format!("stack header lacks {what}; pass --config"));
            let spec = h.mode.clone().ok_or_else(|| missing("mode"))?;
            let geom = h.geometry.ok_or_else(|| missing("geometry"))?;
            let noise = h.noise.ok_or_else(|| missing("noise"))?;
            let det = detector::DetectorModel::new(h.pitch_um, h.rows, h.cols, noise)?;
            let opts = EstimatorOptions {
                photons: h.photons.ok_or_else(|| missing("photons"))?,
                ..EstimatorOptions::default()
            };
            (spec, geom, det, opts)
        }
    };
    let est = Estimator::new(&spec, &geom, &detector, &opts)?;
    let results = stack
        .frames()
        .iter()
        .map(|f| est.fit_frame(f))
        .collect::<crate::Result<Vec<_>>>()?;
    let bytes = match common.format {
        Format::Json => {
            let mut out = Vec::new();
            for (i, r) in results.iter().enumerate() {
                serde_json::to_writer(&mut out, &FitLine { frame: i, result: r }).map_err(|e| CliError::io(e.to_string()))?;
                out.push(b'\n');
            }
            out
        }
        Format::Csv => {
            let labels = opts.labels();
            let mut header = vec!["frame", "converged", "iterations", "final_loglik"];
            header.extend(labels.iter().map(|s| s.as_str()));
            let rows: Vec<Vec<String>> = results
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let mut row = vec![i.to_string(), r.converged.to_string(), r.iterations.to_string(), num(r.final_loglik)];
                    row.extend(r.theta_hat.iter().map(|v| num(*v)));
                    row
                })
                .collect();
            csv_bytes(&header, &rows)?
        }
    };
    emit(common, &bytes)
}

#[derive(Debug, Serialize)]
struct CrbPlane {
    z: f64,
    qfi: FisherMatrix,
    cfi_ideal: FisherMatrix,
    cfi_pixelated: FisherMatrix,
    crb_ideal: Vec<f64>,
    crb_practical: Vec<f64>,
}

fn crb_or_inf(f: &FisherMatrix, photons: f64) -> Vec<f64> {
    fisher::crb(f, photons).map(|r| r.diag()).unwrap_or_else(|_| vec![f64::INFINITY; f.dim()])
}

fn crb(common: &CommonArgs) -> CliResult<()> {
    let c = required_config(common)?;
    let param = c.estimator.parameterization;
    let planes = c
        .z_planes
        .iter()
        .map(|&z| {
            let qfi = match fisher::qfi(&c.mode, &c.geometry) {
                Err(Error::NoClosedForm(_)) => fisher::qfi_numeric(&c.mode, &c.geometry, z, &IntegrationSpec::default()),
                other => other,
            }?;
            let cfi_ideal = harness::ideal_information(&c.mode, &c.geometry, z, param)?;
            let cfi_pixelated = harness::practical_information(&c, z)?;
            Ok(CrbPlane {
                z,
                crb_ideal: crb_or_inf(&cfi_ideal, c.photons),
                crb_practical: crb_or_inf(&cfi_pixelated, c.photons),
                qfi,
                cfi_ideal,
                cfi_pixelated,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let bytes = match common.format {
        Format::Json => json_bytes(&planes)?,
        Format::Csv => {
            let mut rows = Vec::new();
            for p in &planes {
                let mut push = |quantity: &str, labels: &[String], values: &[f64]| {
                    for (l, v) in labels.iter().zip(values) {
                        rows.push(vec![num(p.z), quantity.to_string(), l.clone(), num(*v)]);
                    }
                };
                push("qfi", &p.qfi.labels, &p.qfi.diag());
                push("cfi_ideal", &p.cfi_ideal.labels, &p.cfi_ideal.diag());
                push("cfi_pixelated", &p.cfi_pixelated.labels, &p.cfi_pixelated.diag());
                push("crb_ideal", &p.cfi_ideal.labels, &p.crb_ideal);
                push("crb_practical", &p.cfi_pixelated.labels, &p.crb_practical);
            }
            csv_bytes(&["z", "quantity", "parameter", "value"], &rows)?
        }
    };
    emit(common, &bytes)
}

fn sweep(common: &CommonArgs) -> CliResult<()> {
    let c = required_config(common)?;
    let table = harness::sweep(&c)?;
    let bytes = match common.format {
        Format::Json => json_bytes(&table)?,
        Format::Csv => {
            let header: Vec<&str> = table.columns.iter().map(|s| s.as_str()).collect();
            let rows: Vec<Vec<String>> = table.rows.iter().map(|r| r.iter().map(|v| num(*v)).collect()).collect();
            csv_bytes(&header, &rows)?
        }
    };
    emit(common, &bytes)
}

fn report_rows(r: &VarianceReport) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for p in &r.planes {
        for (i, label) in r.labels.iter().enumerate() {
            rows.push(vec![
                num(p.z),
                label.clone(),
                num(p.variance[i]),
                num(p.variance_error[i]),
                num(p.mean[i]),
                num(p.crb_practical[i]),
                num(p.crb_ideal.get(i).copied().unwrap_or(f64::NAN)),
                num(p.converged_fraction),
                p.degraded.to_string(),
            ]);
        }
    }
    rows
}

fn report(common: &CommonArgs) -> CliResult<()> {
    let c = required_config(common)?;
    if c.estimator.parameterization == Parameterization::Xyw && !c.mode.is_single_mode() {
        return Err(CliError::config("width parameterization needs a single LG mode"));
    }
    let r = harness::run_experiment(&c)?;
    let bytes = match common.format {
        Format::Json => json_bytes(&r)?,
        Format::Csv => csv_bytes(
            &[
                "z",
                "parameter",
                "variance",
                "variance_error",
                "mean",
                "crb_practical",
                "crb_ideal",
                "converged_fraction",
                "degraded",
            ],
            &report_rows(&r),
        )?,
    };
    emit(common, &bytes)
}
