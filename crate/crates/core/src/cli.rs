//! Command-line front end.
//!
//! `verify` writes one JSON record per input line, `bench` a runtime CSV,
//! `gen` a seeded model file and `oracle-check` a JSONL comparison against
//! the reference analyzer. Images are independent and run concurrently on
//! one worker pool; row parallelism inside an analysis shares that pool.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::analyzer::{analyze, verify_box, AnalysisOptions, Verdict};
use crate::backsub::{BacksubOptions, DEFAULT_MEMORY_BUDGET};
use crate::decimal::parse_decimal;
use crate::error::{Error, Result};
use crate::gen::{generate_from_str, parse_shape};
use crate::interval::{Endpoint, Rational};
use crate::network::{forward_eval, load_inputs, load_model, save_model, write_model, InputBox, InputRecord, Network};
use crate::oracle::{attack, reference_analyze, reference_verify};

#[derive(Debug, Parser)]
#[command(name = "polyverify", version, about = "Floating-point-sound robustness verifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Verify every input of a CSV file; writes JSONL.
    Verify(RunArgs),
    /// Time every input; writes `index,runtime_ns,early_term_fraction`.
    Bench(RunArgs),
    /// Generate a seeded model file.
    Gen(GenArgs),
    /// Compare the engine with the exact reference analyzer and attack
    /// every verified region; writes JSONL.
    OracleCheck(OracleArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// `f64` endpoints widened outward after every operation.
    Widened,
    /// Exact rational endpoints.
    Rational,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    /// L∞ radius as a decimal string.
    #[arg(long)]
    pub epsilon: String,
    #[arg(long, value_enum, default_value_t = Mode::Widened)]
    pub mode: Mode,
    #[arg(long)]
    pub no_early_term: bool,
    /// Rows per backsubstitution chunk; derived from the memory budget when unset.
    #[arg(long)]
    pub chunk_rows: Option<usize>,
    /// Bytes for one chunk's coefficient buffers.
    #[arg(long, default_value_t = DEFAULT_MEMORY_BUDGET)]
    pub memory_budget: usize,
    /// Worker threads; all cores when unset.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output file; stdout when unset.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: u64,
    /// e.g. "conv 3x3x8 s1 p1; relu; dense 10".
    #[arg(long)]
    pub arch: String,
    /// `WxHxC` or `N`.
    #[arg(long)]
    pub input_shape: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Attack samples per verified region.
    #[arg(long, default_value_t = 11_000)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl RunArgs {
    fn options(&self) -> AnalysisOptions {
        AnalysisOptions {
            backsub: BacksubOptions {
                early_term: !self.no_early_term,
                chunk_rows: self.chunk_rows,
                memory_budget: self.memory_budget,
                ..Default::default()
            },
            // images already share the pool
            workers: None,
            ..Default::default()
        }
    }

    fn epsilon(&self) -> Result<Rational> {
        parse_decimal(&self.epsilon).map_err(|e| Error::Config(format!("--epsilon: {e}")))
    }
}

/// One line of the `verify` report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyRecord {
    pub index: usize,
    pub candidate: bool,
    /// `verified`, `unknown` or `skipped`.
    pub verdict: String,
    /// Lower bounds on `o_label - o_j`, rounded down; `null` at the label,
    /// for unbounded margins and for skipped inputs.
    pub margins: Vec<Option<f64>>,
    pub runtime_ns: u64,
    pub rows_terminated: usize,
    /// Rows entered into backsubstitution.
    pub rows: usize,
}

impl VerifyRecord {
    pub fn early_term_fraction(&self) -> f64 {
        if self.rows == 0 {
            0.0
        } else {
            self.rows_terminated as f64 / self.rows as f64
        }
    }
}

/// Whether the exact output at the center strictly favours the label.
pub fn is_candidate(net: &Network, rec: &InputRecord) -> Result<bool> {
    if rec.label >= net.output_size() {
        return Err(Error::LabelOutOfRange {
            label: rec.label,
            classes: net.output_size(),
        });
    }
    let out = forward_eval::<Rational>(net, &rec.pixels)?.pop().unwrap();
    Ok(out.iter().enumerate().all(|(j, o)| j == rec.label || *o < out[rec.label]))
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn verify_one<T: Endpoint>(
    net: &Network,
    index: usize,
    rec: &InputRecord,
    eps: &Rational,
    opts: &AnalysisOptions,
) -> Result<VerifyRecord> {
    let start = Instant::now();
    if !is_candidate(net, rec)? {
        return Ok(VerifyRecord {
            index,
            candidate: false,
            verdict: "skipped".into(),
            margins: Vec::new(),
            runtime_ns: start.elapsed().as_nanos() as u64,
            rows_terminated: 0,
            rows: 0,
        });
    }
    let region = InputBox::new(rec.pixels.clone(), eps.clone())?;
    let v: Verdict<T> = verify_box(net, &region, rec.label, opts)?;
    Ok(VerifyRecord {
        index,
        candidate: true,
        verdict: if v.verified() { "verified" } else { "unknown" }.into(),
        margins: v.margins_f64(),
        runtime_ns: start.elapsed().as_nanos() as u64,
        rows_terminated: v.stats.rows_terminated_early,
        rows: v.stats.rows,
    })
}

/// Runs `verify` on every input, in input order.
pub fn verify_records(args: &RunArgs) -> Result<Vec<VerifyRecord>> {
    let net = load_model(&args.model)?;
    let inputs = load_inputs(&args.inputs)?;
    let eps = args.epsilon()?;
    let opts = args.options();
    pool(args.workers)?.install(|| {
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, rec)| match args.mode {
                Mode::Widened => verify_one::<f64>(&net, i, rec, &eps, &opts),
                Mode::Rational => verify_one::<Rational>(&net, i, rec, &eps, &opts),
            })
            .collect()
    })
}

/// One line of the `oracle-check` report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleRecord {
    pub index: usize,
    pub candidate: bool,
    /// Engine bounds in rational mode equal the reference's at every neuron.
    pub bounds_equal: bool,
    pub verified: bool,
    pub reference_verified: bool,
    /// A point of a verified region that the network misclassifies.
    pub counterexample: Option<Vec<f64>>,
}

impl OracleRecord {
    pub fn ok(&self) -> bool {
        self.bounds_equal && self.verified == self.reference_verified && self.counterexample.is_none()
    }
}

pub fn oracle_records(args: &OracleArgs) -> Result<Vec<OracleRecord>> {
    let run = &args.run;
    let net = load_model(&run.model)?;
    let inputs = load_inputs(&run.inputs)?;
    let eps = run.epsilon()?;
    let opts = run.options();
    pool(run.workers)?.install(|| {
        inputs
            .par_iter()
            .enumerate()
            .map(|(index, rec)| {
                let candidate = is_candidate(&net, rec)?;
                let region = InputBox::new(rec.pixels.clone(), eps.clone())?;
                let engine = analyze::<Rational>(&net, &region, &opts)?;
                let reference = reference_analyze(&net, &region)?;
                let bounds_equal = (0..net.len()).all(|k| engine.bounds(k) == reference[k].as_slice());
                let v: Verdict<Rational> = verify_box(&net, &region, rec.label, &opts)?;
                let reference_verified = reference_verify(&net, &region, rec.label)?;
                let counterexample = if v.verified() {
                    attack(&net, &rec.pixels, &eps, rec.label, args.budget, args.seed ^ index as u64)?.map(|a| a.point)
                } else {
                    None
                };
                Ok(OracleRecord {
                    index,
                    candidate,
                    bounds_equal,
                    verified: v.verified(),
                    reference_verified,
                    counterexample,
                })
            })
            .collect()
    })
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        })?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    let io = |source| Error::Io {
        path: path.map(Path::to_path_buf).unwrap_or_else(|| "<stdout>".into()),
        source,
    };
    let mut w = open_out(path)?;
    w.write_all(text.as_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

fn jsonl<R: Serialize>(records: &[R]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable record") + "\n")
        .collect()
}

/// The `bench` CSV; an empty input set yields an empty file.
pub fn bench_csv(records: &[VerifyRecord]) -> String {
    if records.is_empty() {
        return String::new();
    }
    let mut s = String::from("index,runtime_ns,early_term_fraction\n");
    for r in records {
        s += &format!("{},{},{}\n", r.index, r.runtime_ns, r.early_term_fraction());
    }
    s
}

/// Executes a parsed command. Returns the process exit code.
pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Verify(args) => {
            let recs = verify_records(&args)?;
            emit(args.out.as_deref(), &jsonl(&recs))?;
            Ok(0)
        }
        Command::Bench(args) => {
            let recs = verify_records(&args)?;
            emit(args.out.as_deref(), &bench_csv(&recs))?;
            Ok(0)
        }
        Command::Gen(args) => {
            let net = generate_from_str(args.seed, parse_shape(&args.input_shape)?, &args.arch)?;
            match &args.out {
                Some(p) => save_model(&net, p)?,
                None => emit(None, &write_model(&net))?,
            }
            Ok(0)
        }
        Command::OracleCheck(args) => {
            let recs = oracle_records(&args)?;
            emit(args.run.out.as_deref(), &jsonl(&recs))?;
            Ok(if recs.iter().all(OracleRecord::ok) { 0 } else { 1 })
        }
    }
}

/// Parses `std::env::args`, runs, and maps errors to exit codes: clap's
/// usage errors exit 2, configuration and input errors exit 1.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
