//! `openrc`: run open ratio consensus scenarios and write CSV traces.
//!
//! Exit codes: 0 success, 2 usage or parse error, 3 invariant or validation
//! failure, 4 internal error.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use openrc_core::engine::{self, EngineError, RunOptions, RunReport};
use openrc_core::output::{write_metrics_csv, write_states_csv};
use openrc_core::scenario::{self, stream_rng, EventSampler, Scenario, ScenarioError, Stream};
use openrc_core::topology::{ActivationVector, OpenDigraph};

const BUILTIN_PAPER: &str = "builtin:paper";

#[derive(Parser)]
#[command(name = "openrc", version, about = "Open ratio consensus simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics.csv, run.meta and optionally states.csv.
    Run {
        /// Scenario file, or `builtin:paper` for the reference experiment.
        scenario: String,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write the per-agent trace states.csv.
        #[arg(long)]
        emit_states: bool,
        /// Check invariants every round and fail on violation.
        #[arg(long)]
        check: bool,
        /// Cross-validate against the matrix-form recursion.
        #[arg(long)]
        oracle: bool,
        /// Exchange acknowledgements only when the activation changes.
        #[arg(long)]
        cache_feedback: bool,
    },
    /// Print a random strongly connected pool graph as `edge i j` lines.
    Graph {
        pool: usize,
        extra_edge_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse a scenario and dry-run its event schedule.
    Validate {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
    fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Parse { .. } | ScenarioError::InvalidArgument(_) => {
                Failure::usage(e.to_string())
            }
            ScenarioError::Topology(_) => Failure::usage(e.to_string()),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Scenario(inner) => inner.into(),
            EngineError::InvalidState(_) => Failure::internal(e.to_string()),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::internal(format!("{}: {e}", path.display()))
}

/// Scenario text and parsed scenario for a path or the built-in keyword.
fn load(spec: &str, seed: Option<u64>) -> Result<(String, Scenario), Failure> {
    let text = if spec == BUILTIN_PAPER {
        scenario::PAPER_SCENARIO.to_string()
    } else {
        fs::read_to_string(spec).map_err(|e| Failure::usage(format!("{spec}: {e}")))?
    };
    let mut sc =
        scenario::parse_scenario(&text).map_err(|e| Failure::usage(format!("{spec}: {e}")))?;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    Ok((text, sc))
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
) -> Result<(), Failure> {
    let file = fs::File::create(path).map_err(|e| io_failure(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| io_failure(path, e))
}

fn opt_float(v: Option<f64>) -> String {
    v.map_or_else(|| "not-computed".to_string(), |v| format!("{v:e}"))
}

#[allow(clippy::too_many_arguments)]
fn write_meta(
    path: &Path,
    spec: &str,
    text: &str,
    sc: &Scenario,
    opts: &RunOptions,
    report: Option<&RunReport>,
    status: &str,
) -> Result<(), Failure> {
    let hash = hex::encode(Sha256::digest(text.as_bytes()));
    write_file(path, |w| {
        writeln!(w, "scenario={spec}")?;
        writeln!(w, "scenario_sha256={hash}")?;
        writeln!(w, "seed={}", sc.seed)?;
        writeln!(w, "rounds={}", sc.rounds)?;
        writeln!(w, "pool={}", sc.pool_size)?;
        writeln!(w, "check={}", opts.check)?;
        writeln!(w, "oracle={}", opts.oracle)?;
        writeln!(w, "emit_states={}", opts.record_states)?;
        writeln!(w, "cache_feedback={}", opts.cache_feedback)?;
        if let Some(r) = report {
            writeln!(w, "arrivals={}", r.arrivals)?;
            writeln!(w, "departures={}", r.departures)?;
            writeln!(w, "skipped_events={}", r.skipped_events)?;
            writeln!(w, "degeneracy_flags={}", r.degeneracy_flags)?;
            writeln!(w, "max_mass_residual_x={:e}", r.max_mass_residual_x)?;
            writeln!(w, "max_mass_residual_y={:e}", r.max_mass_residual_y)?;
            writeln!(
                w,
                "max_column_deviation={}",
                opt_float(r.max_column_deviation)
            )?;
            writeln!(
                w,
                "max_oracle_deviation={}",
                opt_float(r.max_oracle_deviation)
            )?;
        }
        writeln!(w, "status={status}")?;
        w.flush()
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    spec: &str,
    seed: Option<u64>,
    out: &Path,
    emit_states: bool,
    check: bool,
    oracle: bool,
    cache_feedback: bool,
) -> Result<(), Failure> {
    let (text, sc) = load(spec, seed)?;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let opts = RunOptions {
        check,
        oracle,
        record_states: emit_states,
        cache_feedback,
    };
    let meta = out.join("run.meta");
    let result = match engine::run(&sc, opts) {
        Ok(r) => r,
        Err(e) => {
            let failure = Failure::from(e);
            write_meta(
                &meta,
                spec,
                &text,
                &sc,
                &opts,
                None,
                &format!("failed: {}", failure.message),
            )?;
            return Err(failure);
        }
    };
    let metrics_path = out.join("metrics.csv");
    write_file(&metrics_path, |w| write_metrics_csv(w, &result.metrics))?;
    if let Some(rows) = &result.states {
        let states_path = out.join("states.csv");
        write_file(&states_path, |w| write_states_csv(w, rows))?;
    }
    write_meta(&meta, spec, &text, &sc, &opts, Some(&result.report), "ok")?;
    if let Some(last) = result.metrics.last() {
        log::info!(
            "k={} n={} xbar={} err={:e}",
            last.k,
            last.n,
            last.x_bar,
            last.err
        );
    }
    Ok(())
}

fn cmd_graph(pool: usize, extra_edge_prob: f64, seed: u64) -> Result<(), Failure> {
    if pool == 0 {
        return Err(Failure::usage("pool must be at least 1"));
    }
    let g = OpenDigraph::generate(pool, extra_edge_prob, &mut stream_rng(seed, Stream::Graph))
        .map_err(|e| Failure::usage(e.to_string()))?;
    let connected = g.is_active_strongly_connected(&ActivationVector::all(pool));
    let stdout = io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    let res = (|| {
        writeln!(
            w,
            "# pool {pool}, extra_edge_prob {extra_edge_prob}, seed {seed}, {} edges, strongly connected: {}",
            g.edge_count(),
            if connected { "yes" } else { "no" }
        )?;
        for (i, j) in g.edges() {
            writeln!(w, "edge {i} {j}")?;
        }
        w.flush()
    })();
    res.map_err(|e| Failure::internal(e.to_string()))?;
    if connected {
        Ok(())
    } else {
        Err(Failure::invalid(
            "generated graph is not strongly connected",
        ))
    }
}

fn cmd_validate(spec: &str, seed: Option<u64>) -> Result<(), Failure> {
    let (_, sc) = load(spec, seed)?;
    let setup = sc.setup()?;
    let mut activation = setup.initial.clone();
    let mut sampler = EventSampler::from_seed(sc.seed);
    let (mut arrivals, mut departures) = (0usize, 0usize);
    for k in 0..sc.rounds {
        let ev = sampler.sample_round_events(&sc, k, &activation, &setup.graph)?;
        arrivals += ev.arrivals.len();
        departures += ev.departures.len();
        activation = activation.transition(&ev.departures, &ev.arriving_ids());
    }
    println!(
        "ok: {} rounds, {} arrivals, {} departures, {} skipped churn draws, final n={}",
        sc.rounds,
        arrivals,
        departures,
        sampler.skipped(),
        activation.count()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            emit_states,
            check,
            oracle,
            cache_feedback,
        } => cmd_run(
            &scenario,
            seed,
            &out,
            emit_states,
            check,
            oracle,
            cache_feedback,
        ),
        Command::Graph {
            pool,
            extra_edge_prob,
            seed,
        } => cmd_graph(pool, extra_edge_prob, seed),
        Command::Validate { scenario, seed } => cmd_validate(&scenario, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("openrc: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
