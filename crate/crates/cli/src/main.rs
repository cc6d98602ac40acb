use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use seqdose::calibrate::{calibrate_thresholds, CalibrationSpec};
use seqdose::conductor::JsonlStore;
use seqdose::ocsim::{emit_report, run_scenario, ReportFormat, ScenarioConfig};
use seqdose::simon::{simon_oc, simon_search, SimonDesign, SimonOc};

#[derive(Parser)]
#[command(name = "seqdose", version, about = "Integrated Phase I-II trial design toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimonFormat {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Cmd {
    /// Optimal and minimax Simon two-stage designs with exact characteristics.
    Simon {
        #[arg(long)]
        p0: f64,
        #[arg(long)]
        p1: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0.2)]
        beta: f64,
        #[arg(long, default_value_t = 100)]
        n_max: u32,
        /// Extra response rates to tabulate, comma separated.
        #[arg(long, value_delimiter = ',')]
        at: Vec<f64>,
        #[arg(long, value_enum, default_value_t = SimonFormat::Text)]
        format: SimonFormat,
    },
    /// Monte Carlo operating characteristics of a scenario file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides n_reps in the scenario.
        #[arg(long)]
        reps: Option<usize>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Bootstrap calibration of the stopping bounds.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n_boot: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Serve the trial conduct HTTP API.
    Serve {
        /// Directory holding the event logs.
        #[arg(long, default_value = "trials")]
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Bearer token required on trial routes; falls back to SEQDOSE_TOKEN.
        #[arg(long, env = "SEQDOSE_TOKEN")]
        token: Option<String>,
    },
}

#[derive(Serialize)]
struct SimonRow {
    p: f64,
    #[serde(flatten)]
    oc: SimonOc,
}

#[derive(Serialize)]
struct SimonDesignReport {
    design: SimonDesign,
    oc: Vec<SimonRow>,
}

#[derive(Serialize)]
struct SimonReport {
    p0: f64,
    p1: f64,
    alpha: f64,
    beta: f64,
    optimal: SimonDesignReport,
    minimax: SimonDesignReport,
}

fn write_out(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut s = std::io::stdout().lock();
            s.write_all(bytes)?;
            if !bytes.ends_with(b"\n") {
                s.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn simon_text(r: &SimonReport) -> String {
    let mut s = format!(
        "Simon two-stage designs for p0 = {}, p1 = {}, alpha = {}, beta = {}\n",
        r.p0, r.p1, r.alpha, r.beta
    );
    for (name, d) in [("optimal", &r.optimal), ("minimax", &r.minimax)] {
        s.push_str(&format!(
            "\n{name}: n1/n2/r1/r = {} (n = {})\n{:>8}  {:>10}  {:>8}  {:>8}\n",
            d.design,
            d.design.n(),
            "p",
            "P(reject)",
            "EN",
            "PET"
        ));
        for row in &d.oc {
            s.push_str(&format!(
                "{:>8.3}  {:>10.4}  {:>8.2}  {:>8.4}\n",
                row.p, row.oc.reject_prob, row.oc.expected_n, row.oc.pet
            ));
        }
    }
    s
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simon {
            p0,
            p1,
            alpha,
            beta,
            n_max,
            at,
            format,
        } => {
            let found = simon_search(p0, p1, alpha, beta, n_max)?;
            let mut ps = vec![p0, p1];
            ps.extend(at);
            let table = |d: SimonDesign| SimonDesignReport {
                design: d,
                oc: ps.iter().map(|&p| SimonRow { p, oc: simon_oc(&d, p) }).collect(),
            };
            let report = SimonReport {
                p0,
                p1,
                alpha,
                beta,
                optimal: table(found.optimal),
                minimax: table(found.minimax),
            };
            let bytes = match format {
                SimonFormat::Json => serde_json::to_vec_pretty(&report)?,
                SimonFormat::Text => simon_text(&report).into_bytes(),
            };
            write_out(None, &bytes)
        }
        Cmd::Simulate {
            config,
            reps,
            seed,
            out,
            format,
            threads,
        } => {
            set_threads(threads)?;
            let mut cfg = ScenarioConfig::from_json(&read(&config)?)?;
            if let Some(n) = reps {
                cfg.n_reps = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_scenario(&cfg)?;
            let format = match format {
                Format::Json => ReportFormat::Json,
                Format::Csv => ReportFormat::Csv,
                Format::Table => ReportFormat::Table,
            };
            write_out(out.as_deref(), &emit_report(&report, format)?)
        }
        Cmd::Calibrate {
            config,
            n_boot,
            seed,
            out,
            threads,
        } => {
            set_threads(threads)?;
            let mut spec: CalibrationSpec =
                serde_json::from_str(&read(&config)?).context("parsing calibration spec")?;
            if let Some(n) = n_boot {
                spec.n_boot = n;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let result = calibrate_thresholds(&spec)?;
            write_out(out.as_deref(), &serde_json::to_vec_pretty(&result)?)
        }
        Cmd::Serve { dir, addr, token } => {
            let store = JsonlStore::open(&dir).with_context(|| format!("opening {}", dir.display()))?;
            if token.is_none() {
                eprintln!("warning: no token set, trial routes are unauthenticated");
            }
            eprintln!("listening on http://{addr}");
            tokio::runtime::Runtime::new()?.block_on(seqdose_api::serve(addr, store, token))?;
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
