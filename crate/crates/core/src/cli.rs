//! Command-line driver: verification oracles, engine and pipeline benchmarks, the
//! model curve, and config-file training.
//!
//! Every command is also callable as a library function taking its argument struct,
//! so the benchmarks can be driven from tests without spawning processes.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 usage or input error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    fused_backward, fused_backward_into, fused_forward, fused_forward_into, record_like, serial_backward,
    serial_backward_into, serial_forward, serial_forward_into, FusedForwardRecord,
};
use crate::network::{
    backward_pass, forward_pass, rate_cross_entropy, train, Dataset, EpochMetrics, ExecutionMode, SpikingNet,
    TrainConfig, TrainSummary,
};
use crate::neuron::{backward_scalar, forward_scalar, LifParams, LifState, MembraneGrad};
use crate::pipeline::{emit_model_curve, pipeline_forward, speedup_mu, PipelinePlan, SpeedupModel};
use crate::tensor::TimeMajorTensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const WARMUPS: usize = 2;

#[derive(Debug, Parser)]
#[command(
    name = "tfsnn",
    version,
    about = "Temporal fusion and time-pipelined execution for LIF spiking networks",
    after_help = "Benchmark speedups compare this crate's serial and fused engines with each other; \
                  they do not measure framework overhead."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-check every engine against the reference paths.
    Verify(VerifyArgs),
    /// Time serial vs fused LIF forward+backward over a list of sequence lengths.
    BenchFusion(BenchFusionArgs),
    /// Time the pipelined forward pass over a list of worker counts.
    BenchPipeline(BenchPipelineArgs),
    /// Tabulate the analytic speedup model.
    ModelCurve(ModelCurveArgs),
    /// Train the reference MLP from a key=value config file.
    Train(TrainArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineChoice {
    Serial,
    Fused,
    Pipeline,
}

impl std::str::FromStr for EngineChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        <Self as ValueEnum>::from_str(s, false)
    }
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random cases per suite.
    #[arg(long, default_value_t = 50)]
    pub cases: usize,
    /// Directory for dumps of a failing case.
    #[arg(long, default_value = "verify-failures")]
    pub out: PathBuf,
    /// Offset added to the leak factor of the engines under test (fault-injection fixture).
    #[arg(long, hide = true)]
    pub inject_fault_k_tau: Option<f32>,
}

impl Default for VerifyArgs {
    fn default() -> Self {
        Self { seed: 0, cases: 50, out: PathBuf::from("verify-failures"), inject_fault_k_tau: None }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BenchFusionArgs {
    /// Comma-separated sequence lengths.
    #[arg(long = "time-steps", value_delimiter = ',', default_value = "8,16,32,64,128,256")]
    pub time_steps: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
}

impl Default for BenchFusionArgs {
    fn default() -> Self {
        Self {
            time_steps: vec![8, 16, 32, 64, 128, 256],
            width: 100_000,
            batch: 1,
            reps: 100,
            seed: 0,
            out: None,
            format: OutputFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BenchPipelineArgs {
    /// Comma-separated worker counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,8")]
    pub workers: Vec<usize>,
    #[arg(long = "time-steps", default_value_t = 64)]
    pub time_steps: usize,
    #[arg(long, default_value_t = 100_000)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Injected per-hop delay in microseconds.
    #[arg(long = "inject-tc-us", default_value_t = 0.0)]
    pub inject_tc_us: f64,
    /// Size the injected delay as T_s / ratio, with T_s the measured single-worker time.
    /// Overrides --inject-tc-us.
    #[arg(long)]
    pub tc_ratio: Option<f64>,
    /// Column chunks per boundary handoff.
    #[arg(long, default_value_t = 16)]
    pub chunks: usize,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run worker counts above the available hardware parallelism instead of skipping them.
    #[arg(long)]
    pub oversubscribe: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
}

impl Default for BenchPipelineArgs {
    fn default() -> Self {
        Self {
            workers: vec![1, 2, 3, 4, 5, 6, 8],
            time_steps: 64,
            width: 100_000,
            batch: 1,
            inject_tc_us: 0.0,
            tc_ratio: None,
            chunks: 16,
            reps: 10,
            seed: 0,
            oversubscribe: false,
            out: None,
            format: OutputFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelCurveArgs {
    /// Comma-separated T_s / T_c ratios.
    #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 16)]
    pub k_max: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// key=value config file.
    pub config: PathBuf,
    /// Override the config's engine.
    #[arg(long, value_enum)]
    pub engine: Option<EngineChoice>,
    /// Override the config's pipeline worker count.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics stream destination (stdout if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command. Never panics on
/// bad input; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let echo: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, echo, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(command: Command, echo: Vec<String>, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Verify(a) => {
            let outcome = cmd_verify(&a, err)?;
            writeln!(out, "{} suites, {} cases, {} mismatches", outcome.suites_run, outcome.cases_run, outcome.mismatches.len())?;
            Ok(if outcome.mismatches.is_empty() { EXIT_OK } else { EXIT_MISMATCH })
        }
        Command::BenchFusion(a) => {
            let report = cmd_bench_fusion(&a, echo)?;
            emit_report(&report, a.format, a.out.as_deref(), out)?;
            Ok(EXIT_OK)
        }
        Command::BenchPipeline(a) => {
            let report = cmd_bench_pipeline(&a, echo, err)?;
            emit_report(&report, a.format, a.out.as_deref(), out)?;
            Ok(EXIT_OK)
        }
        Command::ModelCurve(a) => {
            let rows = emit_model_curve(&a.ratios, a.k_max)?;
            with_sink(a.out.as_deref(), out, |w| match a.format {
                OutputFormat::Csv => write_csv(w, &rows),
                OutputFormat::Json => {
                    serde_json::to_writer_pretty(&mut *w, &rows)?;
                    writeln!(w)?;
                    Ok(())
                }
            })?;
            Ok(EXIT_OK)
        }
        Command::Train(a) => {
            let mut file = TrainFile::load(&a.config)?;
            if let Some(e) = a.engine {
                file.engine = e;
            }
            if let Some(w) = a.workers {
                file.workers = w;
            }
            if let Some(s) = a.seed {
                file.train.seed = s;
            }
            with_sink(a.out.as_deref(), out, |w| cmd_train(&file, w).map(|_| ()))?;
            Ok(EXIT_OK)
        }
    }
}

fn with_sink(path: Option<&Path>, stdout: &mut dyn Write, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => f(stdout),
    }
}

fn write_csv<R: Serialize>(w: &mut dyn Write, rows: &[R]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for row in rows {
        csv.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSummary {
    pub available_parallelism: usize,
    pub clock: String,
    pub os: String,
    pub arch: String,
}

impl EnvSummary {
    pub fn current() -> Self {
        Self {
            available_parallelism: available_lanes(),
            clock: "std::time::Instant (monotonic)".into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

pub fn available_lanes() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport<R> {
    pub command: Vec<String>,
    pub environment: EnvSummary,
    pub reps: usize,
    pub warmups: usize,
    pub aggregation: String,
    pub rows: Vec<R>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionRow {
    pub t_len: usize,
    pub width: usize,
    pub batch: usize,
    pub reps: usize,
    pub seed: u64,
    pub serial_s: f64,
    pub fused_s: f64,
    pub speedup: f64,
    pub serial_checksum: u64,
    pub fused_checksum: u64,
    pub serial_samples_s: Vec<f64>,
    pub fused_samples_s: Vec<f64>,
}

/// CSV view of a [`FusionRow`] without the per-sample arrays.
#[derive(Serialize)]
struct FusionCsvRow {
    t_len: usize,
    width: usize,
    batch: usize,
    reps: usize,
    seed: u64,
    serial_s: f64,
    fused_s: f64,
    speedup: f64,
    serial_checksum: u64,
    fused_checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineRow {
    pub k: usize,
    pub t_len: usize,
    pub width: usize,
    pub batch: usize,
    pub chunks: usize,
    pub reps: usize,
    pub seed: u64,
    pub inject_tc_us: f64,
    pub wall_s: f64,
    /// Single-worker wall time over this row's wall time.
    pub measured_mu: f64,
    /// Model prediction with T_s = measured single-worker time and T_c = injected delay.
    pub predicted_mu: Option<f64>,
    /// measured_mu / predicted_mu.
    pub ratio: Option<f64>,
    pub checksum: u64,
    pub samples_s: Vec<f64>,
}

#[derive(Serialize)]
struct PipelineCsvRow {
    k: usize,
    t_len: usize,
    width: usize,
    batch: usize,
    chunks: usize,
    reps: usize,
    seed: u64,
    inject_tc_us: f64,
    wall_s: f64,
    measured_mu: f64,
    predicted_mu: Option<f64>,
    ratio: Option<f64>,
    checksum: u64,
}

trait CsvRow {
    type Flat: Serialize;
    fn flat(&self) -> Self::Flat;
}

impl CsvRow for FusionRow {
    type Flat = FusionCsvRow;
    fn flat(&self) -> FusionCsvRow {
        FusionCsvRow {
            t_len: self.t_len,
            width: self.width,
            batch: self.batch,
            reps: self.reps,
            seed: self.seed,
            serial_s: self.serial_s,
            fused_s: self.fused_s,
            speedup: self.speedup,
            serial_checksum: self.serial_checksum,
            fused_checksum: self.fused_checksum,
        }
    }
}

impl CsvRow for PipelineRow {
    type Flat = PipelineCsvRow;
    fn flat(&self) -> PipelineCsvRow {
        PipelineCsvRow {
            k: self.k,
            t_len: self.t_len,
            width: self.width,
            batch: self.batch,
            chunks: self.chunks,
            reps: self.reps,
            seed: self.seed,
            inject_tc_us: self.inject_tc_us,
            wall_s: self.wall_s,
            measured_mu: self.measured_mu,
            predicted_mu: self.predicted_mu,
            ratio: self.ratio,
            checksum: self.checksum,
        }
    }
}

fn emit_report<R: Serialize + CsvRow>(
    report: &BenchReport<R>,
    format: OutputFormat,
    path: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<()> {
    with_sink(path, stdout, |w| match format {
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut *w, report)?;
            writeln!(w)?;
            Ok(())
        }
        OutputFormat::Csv => {
            let flat: Vec<R::Flat> = report.rows.iter().map(CsvRow::flat).collect();
            write_csv(w, &flat)
        }
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
    }
    Ok(())
}

// ---------------------------------------------------------------- bench-fusion

fn bench_input(rng: &mut ChaCha8Rng, t: usize, b: usize, n: usize) -> Result<(TimeMajorTensor, TimeMajorTensor)> {
    let x = TimeMajorTensor::from_fn(t, b, n, |_, _, _| rng.gen_range(0.0f32..0.4))?;
    let g_y = TimeMajorTensor::from_fn(t, b, n, |_, _, _| rng.gen_range(-1.0f32..1.0))?;
    Ok((x, g_y))
}

type ForwardInto = fn(&TimeMajorTensor, &LifState, &mut FusedForwardRecord, &LifParams) -> Result<()>;
type BackwardInto =
    fn(&TimeMajorTensor, &FusedForwardRecord, &MembraneGrad, &mut TimeMajorTensor, &LifParams) -> Result<MembraneGrad>;

const SERIAL: (ForwardInto, BackwardInto) = (serial_forward_into, serial_backward_into);
const FUSED: (ForwardInto, BackwardInto) = (fused_forward_into, fused_backward_into);

/// Output buffers and inputs for one benchmark case, allocated outside the timed region.
struct BenchCase {
    x: TimeMajorTensor,
    g_y: TimeMajorTensor,
    carry: LifState,
    g_carry: MembraneGrad,
    rec: FusedForwardRecord,
    g_x: TimeMajorTensor,
}

impl BenchCase {
    /// Times one forward+backward and returns `(seconds, output checksum)`.
    fn run(&mut self, engine: (ForwardInto, BackwardInto), p: &LifParams) -> Result<(f64, u64)> {
        let start = Instant::now();
        engine.0(&self.x, &self.carry, &mut self.rec, p)?;
        engine.1(&self.g_y, &self.rec, &self.g_carry, &mut self.g_x, p)?;
        let elapsed = start.elapsed().as_secs_f64();
        Ok((elapsed, self.rec.y_hist.checksum() ^ self.g_x.checksum().rotate_left(1)))
    }
}

/// Serial vs fused forward+backward of one LIF layer, per sequence length.
pub fn cmd_bench_fusion(args: &BenchFusionArgs, command: Vec<String>) -> Result<BenchReport<FusionRow>> {
    check_positive("width", args.width)?;
    check_positive("batch", args.batch)?;
    check_positive("reps", args.reps)?;
    if args.time_steps.is_empty() || args.time_steps.contains(&0) {
        return Err(Error::InvalidParameter("time-steps must be a non-empty list of positive lengths".into()));
    }
    let p = LifParams::default();
    let mut rows = Vec::with_capacity(args.time_steps.len());
    for &t in &args.time_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ t as u64);
        let (x, g_y) = bench_input(&mut rng, t, args.batch, args.width)?;
        let mut case = BenchCase {
            carry: LifState::initial(args.batch, args.width, &p),
            g_carry: MembraneGrad::zeros(args.batch, args.width),
            rec: record_like(&x)?,
            g_x: TimeMajorTensor::zeros(t, args.batch, args.width)?,
            x,
            g_y,
        };

        for _ in 0..WARMUPS {
            case.run(SERIAL, &p)?;
            case.run(FUSED, &p)?;
        }
        let mut serial = Vec::with_capacity(args.reps);
        let mut fused = Vec::with_capacity(args.reps);
        let (mut serial_checksum, mut fused_checksum) = (0, 0);
        for _ in 0..args.reps {
            let (s, c) = case.run(SERIAL, &p)?;
            serial.push(s);
            serial_checksum = c;
            let (f, c) = case.run(FUSED, &p)?;
            fused.push(f);
            fused_checksum = c;
        }
        let (serial_s, fused_s) = (mean(&serial), mean(&fused));
        rows.push(FusionRow {
            t_len: t,
            width: args.width,
            batch: args.batch,
            reps: args.reps,
            seed: args.seed,
            serial_s,
            fused_s,
            speedup: serial_s / fused_s,
            serial_checksum,
            fused_checksum,
            serial_samples_s: serial,
            fused_samples_s: fused,
        });
    }
    Ok(BenchReport {
        command,
        environment: EnvSummary::current(),
        reps: args.reps,
        warmups: WARMUPS,
        aggregation: "mean".into(),
        rows,
    })
}

// ---------------------------------------------------------------- bench-pipeline

fn time_pipeline(net: &SpikingNet, x: &TimeMajorTensor, plan: &PipelinePlan, reps: usize) -> Result<(Vec<f64>, u64)> {
    for _ in 0..WARMUPS {
        pipeline_forward(net, x, plan)?;
    }
    let mut samples = Vec::with_capacity(reps);
    let mut checksum = 0;
    for _ in 0..reps {
        let start = Instant::now();
        let run = pipeline_forward(net, x, plan)?;
        samples.push(start.elapsed().as_secs_f64());
        checksum = run.output.checksum();
    }
    Ok((samples, checksum))
}

/// Wall time of the pipelined forward pass of a single LIF layer for each worker count.
/// Worker counts above the hardware parallelism are skipped with a warning on `warn`
/// unless `oversubscribe` is set.
pub fn cmd_bench_pipeline(
    args: &BenchPipelineArgs,
    command: Vec<String>,
    warn: &mut dyn Write,
) -> Result<BenchReport<PipelineRow>> {
    check_positive("width", args.width)?;
    check_positive("batch", args.batch)?;
    check_positive("reps", args.reps)?;
    check_positive("chunks", args.chunks)?;
    if args.workers.is_empty() || args.workers.contains(&0) {
        return Err(Error::InvalidParameter("workers must be a non-empty list of positive counts".into()));
    }
    if let Some(&k) = args.workers.iter().max().filter(|&&k| k > args.time_steps) {
        return Err(Error::InvalidParameter(format!("{k} workers exceed {} time steps", args.time_steps)));
    }
    if !(args.inject_tc_us >= 0.0 && args.inject_tc_us.is_finite()) {
        return Err(Error::InvalidParameter("inject-tc-us must be finite and >= 0".into()));
    }
    if let Some(r) = args.tc_ratio {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidParameter("tc-ratio must be finite and > 0".into()));
        }
    }

    let p = LifParams::default();
    let net = SpikingNet::lif_only(args.width, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (x, _) = bench_input(&mut rng, args.time_steps, args.batch, args.width)?;

    // Single-worker reference time, measured without injected delay (there are no hops).
    let single = PipelinePlan::new(args.time_steps, 1)?;
    let (t1_samples, t1_checksum) = time_pipeline(&net, &x, &single, args.reps)?;
    let t_s = mean(&t1_samples);
    let tc_us = match args.tc_ratio {
        Some(r) => t_s * 1e6 / r,
        None => args.inject_tc_us,
    };
    let model = if tc_us > 0.0 { Some(SpeedupModel::new(t_s, tc_us * 1e-6)?) } else { None };

    let lanes = available_lanes();
    let mut rows = Vec::with_capacity(args.workers.len());
    for &k in &args.workers {
        if k > lanes && !args.oversubscribe {
            writeln!(warn, "warning: skipping k={k}: only {lanes} hardware lanes available (use --oversubscribe to run it)")?;
            continue;
        }
        let (samples, checksum, wall_s) = if k == 1 {
            (t1_samples.clone(), t1_checksum, t_s)
        } else {
            let plan = PipelinePlan::new(args.time_steps, k)?
                .with_comm_delay(Duration::from_secs_f64(tc_us * 1e-6))
                .with_column_chunks(args.chunks)?;
            let (s, c) = time_pipeline(&net, &x, &plan, args.reps)?;
            let m = mean(&s);
            (s, c, m)
        };
        if checksum != t1_checksum {
            return Err(Error::Worker { worker: k, reason: "pipelined output differs from single-worker output".into() });
        }
        let measured_mu = t_s / wall_s;
        let predicted_mu = model.as_ref().map(|m| speedup_mu(m, k));
        rows.push(PipelineRow {
            k,
            t_len: args.time_steps,
            width: args.width,
            batch: args.batch,
            chunks: args.chunks,
            reps: args.reps,
            seed: args.seed,
            inject_tc_us: tc_us,
            wall_s,
            measured_mu,
            predicted_mu,
            ratio: predicted_mu.map(|pm| measured_mu / pm),
            checksum,
            samples_s: samples,
        });
    }
    Ok(BenchReport {
        command,
        environment: EnvSummary::current(),
        reps: args.reps,
        warmups: WARMUPS,
        aggregation: "mean".into(),
        rows,
    })
}

// ---------------------------------------------------------------- verify

/// A verification mismatch: which suite and case, which output, and where it first differs.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub suite: &'static str,
    pub case: usize,
    pub field: String,
    /// First differing `(t, b, n)` in time-major order, if the field is a tensor.
    pub position: Option<(usize, usize, usize)>,
    pub expected: f32,
    pub actual: f32,
    pub dumped: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyOutcome {
    pub suites_run: usize,
    pub cases_run: usize,
    pub mismatches: Vec<Mismatch>,
}

/// First `(t, b, n)` at which the two tensors differ bitwise.
pub fn first_difference(expected: &TimeMajorTensor, actual: &TimeMajorTensor) -> Option<(usize, usize, usize)> {
    let step = expected.step_len();
    let i = expected.data().iter().zip(actual.data()).position(|(a, b)| a.to_bits() != b.to_bits())?;
    let (t, r) = (i / step, i % step);
    Some((t, r / expected.width(), r % expected.width()))
}

fn slice_diff(expected: &[f32], actual: &[f32]) -> Option<usize> {
    if expected.len() != actual.len() {
        return Some(expected.len().min(actual.len()));
    }
    expected.iter().zip(actual).position(|(a, b)| a.to_bits() != b.to_bits())
}

/// Column-at-a-time scalar interpreter of the LIF recurrences.
fn interpret_forward(x: &TimeMajorTensor, carry: &LifState, p: &LifParams) -> (TimeMajorTensor, TimeMajorTensor) {
    let (t_len, b, n) = (x.t_len(), x.batch(), x.width());
    let mut v_hist = vec![0.0f32; t_len * b * n];
    let mut y_hist = vec![0.0f32; t_len * b * n];
    for c in 0..b * n {
        let (mut v, mut y) = (carry.v()[c], carry.y()[c]);
        for t in 0..t_len {
            (v, y) = forward_scalar(v, y, x.data()[t * b * n + c], p);
            v_hist[t * b * n + c] = v;
            y_hist[t * b * n + c] = y;
        }
    }
    let mk = |d| TimeMajorTensor::from_vec(t_len, b, n, d).expect("shape");
    (mk(v_hist), mk(y_hist))
}

fn interpret_backward(
    g_y: &TimeMajorTensor,
    v_hist: &TimeMajorTensor,
    y_hist: &TimeMajorTensor,
    g_carry: &[f32],
    p: &LifParams,
) -> TimeMajorTensor {
    let (t_len, b, n) = (g_y.t_len(), g_y.batch(), g_y.width());
    let mut g_x = vec![0.0f32; t_len * b * n];
    for (c, &carry) in g_carry.iter().enumerate().take(b * n) {
        let mut g = carry;
        for t in (0..t_len).rev() {
            let i = t * b * n + c;
            g = backward_scalar(g, g_y.data()[i], v_hist.data()[i], y_hist.data()[i], p);
            g_x[i] = g;
        }
    }
    TimeMajorTensor::from_vec(t_len, b, n, g_x).expect("shape")
}

struct LifCase {
    x: TimeMajorTensor,
    g_y: TimeMajorTensor,
    carry: LifState,
    g_carry: MembraneGrad,
}

fn random_lif_case(rng: &mut ChaCha8Rng, max_t: usize, max_b: usize, max_n: usize, p: &LifParams) -> Result<LifCase> {
    let t = rng.gen_range(1..=max_t);
    let b = rng.gen_range(1..=max_b);
    let n = rng.gen_range(1..=max_n);
    let v_th = p.v_th;
    let x = TimeMajorTensor::from_fn(t, b, n, |_, _, _| match rng.gen_range(0..8) {
        0 => 0.0,
        1 => v_th,
        _ => rng.gen_range(-0.3f32..0.8),
    })?;
    let g_y = TimeMajorTensor::from_fn(t, b, n, |_, _, _| rng.gen_range(-1.0f32..1.0))?;
    let v = (0..b * n).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
    let y = (0..b * n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let g = (0..b * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Ok(LifCase { x, g_y, carry: LifState::from_parts(b, n, v, y)?, g_carry: MembraneGrad::from_vec(b, n, g)? })
}

struct Verifier<'a> {
    out_dir: &'a Path,
    log: &'a mut dyn Write,
    mismatches: Vec<Mismatch>,
}

impl Verifier<'_> {
    /// Records a mismatch if the tensors differ, dumping `input` (truncated to the
    /// failing step when `causal`), `expected` and `actual`.
    #[allow(clippy::too_many_arguments)]
    fn tensors(
        &mut self,
        suite: &'static str,
        case: usize,
        field: &str,
        input: &TimeMajorTensor,
        expected: &TimeMajorTensor,
        actual: &TimeMajorTensor,
        causal: bool,
    ) -> Result<bool> {
        let Some((t, b, n)) = first_difference(expected, actual) else {
            return Ok(true);
        };
        std::fs::create_dir_all(self.out_dir)?;
        let stem = format!("{suite}-case{case}-{field}");
        let input = if causal { input.time_slice(0, t + 1)? } else { input.clone() };
        let mut dumped = Vec::new();
        for (tag, tensor) in [("input", &input), ("expected", expected), ("actual", actual)] {
            let path = self.out_dir.join(format!("{stem}-{tag}.bin"));
            tensor.save(&path)?;
            dumped.push(path);
        }
        let (e, a) = (expected.get(t, b, n), actual.get(t, b, n));
        writeln!(
            self.log,
            "mismatch: suite {suite} case {case} field {field} first differs at (t, b, n) = ({t}, {b}, {n}): expected {e:e}, got {a:e}; case dumped to {}",
            self.out_dir.join(format!("{stem}-*.bin")).display()
        )?;
        self.mismatches.push(Mismatch {
            suite,
            case,
            field: field.into(),
            position: Some((t, b, n)),
            expected: e,
            actual: a,
            dumped,
        });
        Ok(false)
    }

    fn slices(&mut self, suite: &'static str, case: usize, field: &str, expected: &[f32], actual: &[f32]) -> Result<bool> {
        let Some(i) = slice_diff(expected, actual) else {
            return Ok(true);
        };
        let (e, a) = (expected.get(i).copied().unwrap_or(f32::NAN), actual.get(i).copied().unwrap_or(f32::NAN));
        writeln!(self.log, "mismatch: suite {suite} case {case} field {field} first differs at column {i}: expected {e:e}, got {a:e}")?;
        self.mismatches.push(Mismatch {
            suite,
            case,
            field: field.into(),
            position: None,
            expected: e,
            actual: a,
            dumped: Vec::new(),
        });
        Ok(false)
    }
}

/// Runs the engine-equivalence, scalar-interpreter, pipeline and segmentation suites.
/// Mismatch diagnostics go to `log`; each suite stops at its first failing case.
pub fn cmd_verify(args: &VerifyArgs, log: &mut dyn Write) -> Result<VerifyOutcome> {
    if args.cases == 0 {
        writeln!(log, "warning: --cases 0: no verification suites run")?;
        return Ok(VerifyOutcome::default());
    }
    let p = LifParams::default();
    let mut under_test = p;
    if let Some(dk) = args.inject_fault_k_tau {
        under_test.k_tau += dk;
    }
    let mut v = Verifier { out_dir: &args.out, log, mismatches: Vec::new() };
    let mut cases_run = 0;

    // fused vs serial
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for case in 0..args.cases {
        cases_run += 1;
        let c = random_lif_case(&mut rng, 48, 4, 300, &p)?;
        let s = serial_forward(&c.x, &c.carry, &p)?;
        let f = fused_forward(&c.x, &c.carry, &under_test)?;
        let (sg, sc) = serial_backward(&c.g_y, &s, &c.g_carry, &p)?;
        let (fg, fc) = fused_backward(&c.g_y, &s, &c.g_carry, &under_test)?;
        let ok = v.tensors("fused-vs-serial", case, "v_hist", &c.x, &s.v_hist, &f.v_hist, true)?
            && v.tensors("fused-vs-serial", case, "y_hist", &c.x, &s.y_hist, &f.y_hist, true)?
            && v.tensors("fused-vs-serial", case, "g_x", &c.g_y, &sg, &fg, false)?
            && v.slices("fused-vs-serial", case, "grad_carry_out", sc.values(), fc.values())?;
        if !ok {
            break;
        }
    }

    // scalar interpreter
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
    for case in 0..args.cases {
        cases_run += 1;
        let c = random_lif_case(&mut rng, 48, 4, 300, &p)?;
        let (v_ref, y_ref) = interpret_forward(&c.x, &c.carry, &p);
        let g_ref = interpret_backward(&c.g_y, &v_ref, &y_ref, c.g_carry.values(), &p);
        let f = fused_forward(&c.x, &c.carry, &under_test)?;
        let fused_ref = FusedForwardRecord { y_hist: y_ref.clone(), v_hist: v_ref.clone(), final_state: f.final_state.clone() };
        let (fg, _) = fused_backward(&c.g_y, &fused_ref, &c.g_carry, &under_test)?;
        let ok = v.tensors("scalar-interpreter", case, "v_hist", &c.x, &v_ref, &f.v_hist, true)?
            && v.tensors("scalar-interpreter", case, "y_hist", &c.x, &y_ref, &f.y_hist, true)?
            && v.tensors("scalar-interpreter", case, "g_x", &c.g_y, &g_ref, &fg, false)?;
        if !ok {
            break;
        }
    }

    // pipeline vs single worker
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(2));
    for case in 0..args.cases {
        cases_run += 1;
        let t = rng.gen_range(4..=24);
        let b = rng.gen_range(1..=4);
        let widths = [rng.gen_range(1..=12), rng.gen_range(1..=16), rng.gen_range(2..=5)];
        let net = SpikingNet::mlp(&widths, under_test, rng.gen())?;
        let x = TimeMajorTensor::from_fn(t, b, widths[0], |_, _, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })?;
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..widths[2])).collect();
        let (y1, tr1) = forward_pass(&net, &x, &ExecutionMode::Fused)?;
        let (_, g_y) = rate_cross_entropy(&y1, &labels)?;
        let (g1, gx1) = backward_pass(&net, &g_y, &tr1, &ExecutionMode::Fused)?;
        let k = rng.gen_range(2..=4);
        let mode = ExecutionMode::Pipeline(PipelinePlan::new(t, k)?);
        let (yk, trk) = forward_pass(&net, &x, &mode)?;
        let (gk, gxk) = backward_pass(&net, &g_y, &trk, &mode)?;
        let mut ok = v.tensors("pipeline-vs-single", case, "output", &x, &y1, &yk, true)?
            && v.tensors("pipeline-vs-single", case, "g_x", &g_y, &gx1, &gxk, false)?;
        for (i, (a, b)) in g1.affine.iter().zip(&gk.affine).enumerate() {
            ok = ok
                && v.slices("pipeline-vs-single", case, &format!("affine{i}.weights"), &a.weights, &b.weights)?
                && v.slices("pipeline-vs-single", case, &format!("affine{i}.bias"), &a.bias, &b.bias)?;
        }
        if !ok {
            break;
        }
    }

    // segmentation round trip
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(3));
    for case in 0..args.cases {
        cases_run += 1;
        let c = random_lif_case(&mut rng, 48, 4, 200, &p)?;
        let whole = serial_forward(&c.x, &c.carry, &p)?;
        let (whole_g, whole_gc) = serial_backward(&c.g_y, &whole, &c.g_carry, &p)?;
        let t_len = c.x.t_len();
        let mut cuts: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..=t_len)).collect();
        cuts.extend([0, t_len]);
        cuts.sort_unstable();
        cuts.dedup();

        let mut carry = c.carry.clone();
        let mut records = Vec::new();
        for w in cuts.windows(2) {
            let rec = fused_forward(&c.x.time_slice(w[0], w[1])?, &carry, &under_test)?;
            carry = rec.final_state.clone();
            records.push(rec);
        }
        let mut g_carry = c.g_carry.clone();
        let mut g_parts = vec![None; records.len()];
        for (i, w) in cuts.windows(2).enumerate().rev() {
            let (g, gc) = fused_backward(&c.g_y.time_slice(w[0], w[1])?, &records[i], &g_carry, &under_test)?;
            g_parts[i] = Some(g);
            g_carry = gc;
        }
        let v_chain = TimeMajorTensor::concat_time(records.iter().map(|r| &r.v_hist))?;
        let y_chain = TimeMajorTensor::concat_time(records.iter().map(|r| &r.y_hist))?;
        let g_chain = TimeMajorTensor::concat_time(g_parts.iter().flatten())?;
        let ok = v.tensors("segmentation", case, "v_hist", &c.x, &whole.v_hist, &v_chain, true)?
            && v.tensors("segmentation", case, "y_hist", &c.x, &whole.y_hist, &y_chain, true)?
            && v.slices("segmentation", case, "final_v", whole.final_state.v(), carry.v())?
            && v.tensors("segmentation", case, "g_x", &c.g_y, &whole_g, &g_chain, false)?
            && v.slices("segmentation", case, "grad_carry_out", whole_gc.values(), g_carry.values())?;
        if !ok {
            break;
        }
    }

    Ok(VerifyOutcome { suites_run: 4, cases_run, mismatches: v.mismatches })
}

// ---------------------------------------------------------------- train

/// A parsed training config file: one `key = value` per line, `#` comments.
///
/// Keys: `learning_rate`, `time_steps`, `batch`, `epochs`, `seed` (the training
/// hyperparameters), `engine` (`serial | fused | pipeline`), `workers`, and the blob
/// task: `samples`, `width`, `classes`, `spread`, `hidden`, `test_fraction`, plus an
/// optional `data` path to a saved dataset that replaces the generated blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainFile {
    pub train: TrainConfig,
    pub engine: EngineChoice,
    pub workers: usize,
    pub samples: usize,
    pub width: usize,
    pub classes: usize,
    pub spread: f32,
    pub hidden: usize,
    pub test_fraction: f32,
    pub data: Option<PathBuf>,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            engine: EngineChoice::Fused,
            workers: 2,
            samples: 500,
            width: 16,
            classes: 2,
            spread: 0.15,
            hidden: 128,
            test_fraction: 0.2,
            data: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config { line, reason: format!("{key}: {e}") })
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainFile::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Config { line, reason: format!("expected key = value, got '{body}'") })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config { line, reason: format!("duplicate key '{key}'") });
            }
            match key {
                "learning_rate" => cfg.train.learning_rate = parse_value(line, key, value)?,
                "time_steps" => cfg.train.t_len = parse_value(line, key, value)?,
                "batch" => cfg.train.batch = parse_value(line, key, value)?,
                "epochs" => cfg.train.epochs = parse_value(line, key, value)?,
                "seed" => cfg.train.seed = parse_value(line, key, value)?,
                "engine" => cfg.engine = parse_value(line, key, value)?,
                "workers" => cfg.workers = parse_value(line, key, value)?,
                "samples" => cfg.samples = parse_value(line, key, value)?,
                "width" => cfg.width = parse_value(line, key, value)?,
                "classes" => cfg.classes = parse_value(line, key, value)?,
                "spread" => cfg.spread = parse_value(line, key, value)?,
                "hidden" => cfg.hidden = parse_value(line, key, value)?,
                "test_fraction" => cfg.test_fraction = parse_value(line, key, value)?,
                "data" => cfg.data = Some(PathBuf::from(value)),
                other => return Err(Error::Config { line, reason: format!("unknown key '{other}'") }),
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn mode(&self) -> Result<ExecutionMode> {
        Ok(match self.engine {
            EngineChoice::Serial => ExecutionMode::Serial,
            EngineChoice::Fused => ExecutionMode::Fused,
            EngineChoice::Pipeline => ExecutionMode::Pipeline(PipelinePlan::new(self.train.t_len, self.workers)?),
        })
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let data = match &self.data {
            Some(path) => Dataset::load(path)?,
            None => Dataset::blobs(self.samples, self.width, self.classes, self.spread, self.train.seed)?,
        };
        data.split(self.test_fraction)
    }
}

/// One line of the training metrics stream: a bare [`EpochMetrics`] object per epoch,
/// then `{"summary": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrainEvent {
    Epoch(EpochMetrics),
    Summary(SummaryLine),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryLine {
    pub summary: TrainSummary,
}

/// Trains the reference MLP `[width, hidden, classes]` and writes one JSON
/// [`TrainEvent`] per line: one per epoch, then the summary.
pub fn cmd_train(file: &TrainFile, out: &mut dyn Write) -> Result<TrainSummary> {
    let (train_set, test_set) = file.datasets()?;
    let mut net = SpikingNet::mlp(
        &[train_set.width(), file.hidden, train_set.classes()],
        LifParams::default(),
        file.train.seed,
    )?;
    let mode = file.mode()?;
    let summary = train(&mut net, &train_set, &test_set, &file.train, &mode, |m| {
        serde_json::to_writer(&mut *out, &TrainEvent::Epoch(m.clone()))?;
        writeln!(out)?;
        Ok(())
    })?;
    serde_json::to_writer(&mut *out, &TrainEvent::Summary(SummaryLine { summary: summary.clone() }))?;
    writeln!(out)?;
    Ok(summary)
}
