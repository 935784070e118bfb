use std::fs::{self, File};
use std::io::{self, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use deskquic::inspect::{decode_datagram, parse_hex, DecodeOptions};
use deskquic::protection::SuiteKind;
use deskquic::scenario::{run, RunOptions, RunResult, Scenario, ScenarioError};
use deskquic::trace::write_jsonl;

const EXIT_VALIDATION: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "deskquic", version, about = "Run QUIC scenarios over a simulated network and decode packets")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run one or more scenario documents.
    Run {
        /// Scenario file (JSON). Repeat to run a batch.
        #[arg(long, required = true)]
        scenario: Vec<PathBuf>,
        /// Overrides the document's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Trace file; a directory when several scenarios run.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Print only the outcome line.
        #[arg(long)]
        quiet: bool,
        /// Overrides the document's stop_after_ms.
        #[arg(long)]
        stop_after_ms: Option<u64>,
        /// Scenarios run in parallel, each in its own world.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Dissect one datagram given as hex.
    Decode {
        /// Hex bytes; "-" reads hex from stdin. Omit with --file.
        hex: Option<String>,
        /// Raw datagram bytes from a file.
        #[arg(long, conflicts_with = "hex")]
        file: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        dcid_len: usize,
        /// Protection suite of non-Initial packets: null or toy.
        #[arg(long)]
        suite: Option<String>,
        /// Hex. Original destination connection id for Initial and Retry
        /// packets, traffic secret for the others.
        #[arg(long)]
        key_seed: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run {
            scenario,
            seed,
            trace_out,
            quiet,
            stop_after_ms,
            jobs,
        } => run_cmd(&scenario, seed, trace_out.as_deref(), quiet, stop_after_ms, jobs),
        Cmd::Decode {
            hex,
            file,
            dcid_len,
            suite,
            key_seed,
        } => decode_cmd(hex, file, dcid_len, suite, key_seed),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> Result<Scenario, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Scenario::from_json(&text).map_err(|e| match e {
        ScenarioError::Parse(m) => format!("{}: {m}", path.display()),
        other => format!("{}: {other}", path.display()),
    })
}

fn name_of(path: &Path, s: &Scenario) -> String {
    if !s.name.is_empty() {
        return s.name.clone();
    }
    path.file_stem().map_or_else(|| "scenario".into(), |n| n.to_string_lossy().into_owned())
}

fn run_cmd(
    paths: &[PathBuf],
    seed: Option<u64>,
    trace_out: Option<&Path>,
    quiet: bool,
    stop_after_ms: Option<u64>,
    jobs: usize,
) -> Result<u8> {
    let mut scenarios = Vec::new();
    for p in paths {
        match load(p) {
            Ok(mut s) => {
                s.name = name_of(p, &s);
                scenarios.push(s);
            }
            Err(msg) => {
                eprintln!("invalid scenario: {msg}");
                return Ok(EXIT_VALIDATION);
            }
        }
    }
    let opts = RunOptions { seed, stop_after_ms };
    if let Some(n) = stop_after_ms.filter(|n| *n == 0) {
        eprintln!("invalid scenario: --stop-after-ms: must be positive, got {n}");
        return Ok(EXIT_VALIDATION);
    }
    let batch = scenarios.len() > 1;
    if batch {
        if let Some(dir) = trace_out {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }

    let results: Vec<Mutex<Option<RunResult>>> = scenarios.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, scenarios.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(s) = scenarios.get(i) else { break };
                *results[i].lock().expect("no poisoned runs") = Some(run(s, &opts));
            });
        }
    });

    let mut code = 0u8;
    for (s, slot) in scenarios.iter().zip(results) {
        let r = slot.into_inner().expect("no poisoned runs").expect("every scenario ran");
        if let Some(out) = trace_out {
            let path = if batch { out.join(format!("{}.jsonl", s.name)) } else { out.to_path_buf() };
            let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_jsonl(BufWriter::new(f), &r.header, &r.trace).with_context(|| format!("writing {}", path.display()))?;
        }
        let exit = r.outcome.exit_code() as u8;
        code = code.max(exit);
        if quiet {
            println!("{}: {} ({})", s.name, r.summary.outcome, r.summary.detail);
        } else {
            let mut v = serde_json::to_value(&r.summary)?;
            if let Some(obj) = v.as_object_mut() {
                obj.insert("scenario".into(), s.name.clone().into());
                obj.insert("seed".into(), r.header.seed.into());
            }
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
    }
    Ok(code)
}

fn decode_cmd(
    hex: Option<String>,
    file: Option<PathBuf>,
    dcid_len: usize,
    suite: Option<String>,
    key_seed: Option<String>,
) -> Result<u8> {
    let suite = match suite.as_deref().map(|s| (s, SuiteKind::from_name(s))) {
        None => None,
        Some((_, Some(k))) => Some(k),
        Some((s, None)) => {
            eprintln!("unknown suite {s:?}; expected null or toy");
            return Ok(EXIT_VALIDATION);
        }
    };
    let key_seed = match key_seed.as_deref().map(parse_hex).transpose() {
        Ok(k) => k,
        Err(e) => {
            eprintln!("--key-seed: {e}");
            return Ok(EXIT_VALIDATION);
        }
    };
    let bytes = match (hex, file) {
        (_, Some(path)) => fs::read(&path).with_context(|| format!("reading {}", path.display()))?,
        (Some(h), None) => {
            let text = if h == "-" {
                let mut s = String::new();
                io::stdin().read_to_string(&mut s)?;
                s
            } else {
                h
            };
            match parse_hex(&text) {
                Ok(b) => b,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(EXIT_VALIDATION);
                }
            }
        }
        (None, None) => {
            eprintln!("nothing to decode: give HEX or --file");
            return Ok(EXIT_VALIDATION);
        }
    };
    let opts = DecodeOptions {
        dcid_len,
        suite,
        key_seed,
    };
    match decode_datagram(&bytes, &opts) {
        Ok(text) => {
            print!("{text}");
            Ok(0)
        }
        Err(e) => {
            eprintln!("{e}");
            Ok(EXIT_VALIDATION)
        }
    }
}
