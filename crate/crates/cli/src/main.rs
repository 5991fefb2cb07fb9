//! `upret` command line: generate / train / evaluate / selftest.
//!
//! Configuration is a flat key=value file; command-line flags override
//! file values. Every command validates its full configuration before any
//! side effect.
//!
//! Exit codes: 0 ok, 1 selftest failure, 2 config error, 3 I/O error,
//! 4 numeric abort, 5 checkpoint/corpus incompatibility.

mod selftest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use upret_core::checkpoint::Checkpoint;
use upret_core::config::{apply_corpus_kv, TrainConfig};
use upret_core::error::Error;
use upret_core::metrics::Direction;
use upret_core::synth::{generate_corpus, CorpusSpec};
use upret_core::trainer::{evaluate_checkpoint, train};
use upret_core::uprf::{load_corpus, write_corpus};

const EXIT_SELFTEST: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_INCOMPATIBLE: u8 = 5;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidArg { .. } => EXIT_CONFIG,
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::BadVersion { .. }
        | Error::Truncated { .. }
        | Error::Corrupt { .. }
        | Error::Manifest { .. } => EXIT_IO,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Incompatible { .. } => EXIT_INCOMPATIBLE,
        _ => EXIT_CONFIG,
    }
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code_for(err))
}

const USAGE: &str = "usage: upret <command> [flags]

commands:
  generate   --out DIR [--config FILE] [key overrides]
  train      --corpus MANIFEST --out DIR [--config FILE] [--resume CKPT] [key overrides]
  evaluate   --checkpoint CKPT --corpus MANIFEST [--split test] [--direction t2v|v2t]
  selftest   [--inject-bad-eta]

flag overrides mirror config keys: --lr, --batch, --epochs, --seed, --k,
--eta, --lambda-ot, --lambda-d, --tau, --threads, and the corpus keys
(--pairs, --vocab, --dim, --rho, --noise, ...). UPRET_THREADS sets the
default worker count.";

/// Key=value pairs accumulated from file then flags (flags win).
struct RawConfig {
    pairs: Vec<(String, String)>,
}

impl RawConfig {
    fn from_sources(config_path: Option<&Path>, flag_pairs: Vec<(String, String)>) -> Result<Self, Error> {
        let mut pairs = Vec::new();
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(Error::Config {
                        msg: format!("{}:{}: expected key=value", path.display(), lineno + 1),
                    });
                };
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        pairs.extend(flag_pairs);
        Ok(Self { pairs })
    }
}

/// Fully resolved run settings.
struct Resolved {
    train: TrainConfig,
    corpus_spec: CorpusSpec,
    paths: BTreeMap<String, String>,
}

const PATH_KEYS: &[&str] = &["out", "corpus", "checkpoint", "resume", "split", "direction"];

fn resolve(raw: RawConfig) -> Result<Resolved, Error> {
    let mut train = TrainConfig::default();
    if let Ok(threads) = std::env::var("UPRET_THREADS") {
        train.threads = threads
            .parse()
            .map_err(|_| Error::Config { msg: format!("UPRET_THREADS: cannot parse `{threads}`") })?;
    }
    let mut corpus_spec = CorpusSpec::default();
    let mut paths = BTreeMap::new();
    for (key, value) in raw.pairs {
        let known_train = train.apply_kv(&key, &value)?;
        let known_corpus = apply_corpus_kv(&mut corpus_spec, &key, &value)?;
        if known_train || known_corpus {
            continue;
        }
        if PATH_KEYS.contains(&key.as_str()) {
            paths.insert(key, value);
            continue;
        }
        return Err(Error::Config { msg: format!("unknown key `{key}`") });
    }
    Ok(Resolved { train, corpus_spec, paths })
}

struct Cli {
    command: String,
    config_path: Option<PathBuf>,
    flag_pairs: Vec<(String, String)>,
    inject_bad_eta: bool,
}

fn parse_args(args: &[String]) -> Result<Cli, Error> {
    if args.is_empty() {
        return Err(Error::Config { msg: format!("missing command\n{USAGE}") });
    }
    let command = args[0].clone();
    let mut config_path = None;
    let mut flag_pairs = Vec::new();
    let mut inject_bad_eta = false;

    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        let Some(name) = flag.strip_prefix("--") else {
            return Err(Error::Config { msg: format!("unexpected argument `{flag}`") });
        };
        if name == "inject-bad-eta" {
            inject_bad_eta = true;
            i += 1;
            continue;
        }
        let Some(value) = args.get(i + 1) else {
            return Err(Error::Config { msg: format!("flag --{name} needs a value") });
        };
        if name == "config" {
            config_path = Some(PathBuf::from(value));
        } else {
            flag_pairs.push((name.replace('-', "_"), value.clone()));
        }
        i += 2;
    }
    Ok(Cli { command, config_path, flag_pairs, inject_bad_eta })
}

fn require_path<'a>(resolved: &'a Resolved, key: &str) -> Result<&'a str, Error> {
    resolved
        .paths
        .get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Config { msg: format!("missing required `{key}` (flag --{key})") })
}

fn cmd_generate(resolved: &Resolved) -> Result<(), Error> {
    let out = PathBuf::from(require_path(resolved, "out")?);
    resolved.corpus_spec.validate()?;

    let corpus = generate_corpus(&resolved.corpus_spec)?;
    let manifest = write_corpus(&out, &corpus)?;
    println!(
        "corpus: pairs={} train={} val={} test={} dim={} vocab={} rho={} noise={}",
        corpus.total_pairs(),
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        corpus.dim,
        resolved.corpus_spec.vocab,
        resolved.corpus_spec.rho,
        resolved.corpus_spec.noise,
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn cmd_train(resolved: &Resolved) -> Result<u8, Error> {
    let manifest = PathBuf::from(require_path(resolved, "corpus")?);
    let out = PathBuf::from(require_path(resolved, "out")?);
    for warning in resolved.train.validate()? {
        eprintln!("warning: {warning}");
    }
    let resume = match resolved.paths.get("resume") {
        Some(path) => Some(Checkpoint::load(Path::new(path))?),
        None => None,
    };

    let corpus = load_corpus(&manifest)?;
    let outcome = train(&resolved.train, &corpus, resume)?;

    std::fs::create_dir_all(&out)?;
    let ckpt_path = out.join("checkpoint.uprc");
    outcome.checkpoint.save(&ckpt_path)?;
    let log_path = out.join("train_log.tsv");
    let mut log_text = String::new();
    for line in &outcome.log {
        log_text.push_str(&line.tsv_line());
        log_text.push('\n');
    }
    std::fs::write(&log_path, log_text)?;

    for line in &outcome.log {
        println!("{}", line.tsv_line());
    }
    if outcome.sinkhorn_failures > 0 {
        eprintln!("warning: {} sinkhorn solves hit the iteration cap", outcome.sinkhorn_failures);
    }
    println!("checkpoint: {}", ckpt_path.display());
    println!("log: {}", log_path.display());

    if let Some(step) = outcome.nan_abort_step {
        eprintln!("error: non-finite loss at step {step}; wrote last good checkpoint");
        return Ok(EXIT_NUMERIC);
    }
    Ok(0)
}

fn cmd_evaluate(resolved: &Resolved) -> Result<(), Error> {
    let ckpt_path = PathBuf::from(require_path(resolved, "checkpoint")?);
    let manifest = PathBuf::from(require_path(resolved, "corpus")?);
    let split = resolved.paths.get("split").map(|s| s.as_str()).unwrap_or("test");
    let direction: Option<Direction> = match resolved.paths.get("direction") {
        Some(d) => Some(d.parse()?),
        None => None,
    };

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let corpus = load_corpus(&manifest)?;
    let samples = corpus.split(split)?;
    let (t2v, v2t) = evaluate_checkpoint(&ckpt, corpus.dim, samples)?;

    for report in [&t2v, &v2t] {
        if direction.is_none() || direction == Some(report.direction) {
            println!("{report}");
            println!("{}", report.machine_lines());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(cli) => cli,
        Err(e) => return fail(&e),
    };

    if cli.command == "selftest" {
        return match selftest::run(cli.inject_bad_eta) {
            Ok(()) => ExitCode::SUCCESS,
            Err(failed) => {
                eprintln!("selftest failed: {}", failed.join(", "));
                ExitCode::from(EXIT_SELFTEST)
            }
        };
    }

    let resolved = match RawConfig::from_sources(cli.config_path.as_deref(), cli.flag_pairs).and_then(resolve) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };

    let result = match cli.command.as_str() {
        "generate" => cmd_generate(&resolved).map(|()| 0),
        "train" => cmd_train(&resolved),
        "evaluate" => cmd_evaluate(&resolved).map(|()| 0),
        other => {
            let err = Error::Config { msg: format!("unknown command `{other}`\n{USAGE}") };
            return fail(&err);
        }
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code),
        Err(e) => fail(&e),
    }
}
