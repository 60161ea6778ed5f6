//! Command-line driver. Every subcommand reads a text config; numeric
//! settings never come from flags.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mmfa_core::config::{EvalConfig, RunConfig};
use mmfa_core::data::{
    generate_synthetic, read_dataset, write_dataset, Dataset, DATASET_MAGIC, DATASET_VERSION,
};
use mmfa_core::diffcore::CheckOptions;
use mmfa_core::eval::{full_report, EvalReport};
use mmfa_core::model::{
    init_model, load_checkpoint, save_checkpoint, ModelState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
use mmfa_core::train::{
    gradient_check_suite, metrics_csv, run_training_with, step_log_csv, TrainOutcome,
};

pub const PROVENANCE_FILE: &str = "provenance.cfg";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

#[derive(Debug)]
pub enum CliError {
    /// Bad command line: unknown subcommand or flag, wrong arity.
    Usage(String),
    Core(mmfa_core::Error),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A check ran to completion and did not pass.
    Failed(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl From<mmfa_core::Error> for CliError {
    fn from(e: mmfa_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

const USAGE: &str = "\
usage: mmfa <command> [args]

commands:
  gen-data <config> <out>                 generate a synthetic dataset file
  train <config> <data> <out-dir>         train; writes checkpoints, metrics.csv, steps.csv
  extract <ckpt> <data> <out-features>    write the codes of every sample as CSV
  eval <ckpt> <data> <report-out> [--config <config>]
                                          evaluate on the unseen domain; writes JSON and CSV
  grad-check <config>                     finite-difference check of every loss
  ablate <config> <out-dir>               train and evaluate the five component rows

Exit status: 0 success, 1 validation error, 2 runtime error.
Config files hold `key = value` lines and `#` comments. Keys and defaults:
";

pub fn usage() -> String {
    let mut s = USAGE.to_string();
    for line in RunConfig::default().to_text().lines() {
        let _ = writeln!(s, "  {line}");
    }
    s
}

/// Run one command; returns the process exit code.
pub fn dispatch<S: AsRef<str>>(argv: &[S]) -> i32 {
    let args: Vec<&str> = argv.iter().map(AsRef::as_ref).collect();
    match run(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(args: &[&str]) -> Result<()> {
    let Some((&cmd, rest)) = args.split_first() else {
        return Err(CliError::Usage(format!("missing command\n{}", usage())));
    };
    if matches!(cmd, "help") || args.iter().any(|a| matches!(*a, "--help" | "-h")) {
        print!("{}", usage());
        return Ok(());
    }
    let (positional, config_flag) = split_flags(cmd, rest)?;
    let want = |n: usize| -> Result<()> {
        if positional.len() != n {
            return Err(CliError::Usage(format!(
                "`{cmd}` takes {n} arguments, got {}",
                positional.len()
            )));
        }
        Ok(())
    };
    if config_flag.is_some() && cmd != "eval" {
        return Err(CliError::Usage(format!(
            "unknown flag `--config` for `{cmd}`"
        )));
    }
    let p = |i: usize| Path::new(positional[i]);
    match cmd {
        "gen-data" => {
            want(2)?;
            gen_data(p(0), p(1))
        }
        "train" => {
            want(3)?;
            train(p(0), p(1), p(2))
        }
        "extract" => {
            want(3)?;
            extract(p(0), p(1), p(2))
        }
        "eval" => {
            want(3)?;
            eval(p(0), p(1), p(2), config_flag.as_deref())
        }
        "grad-check" => {
            want(1)?;
            grad_check(p(0))
        }
        "ablate" => {
            want(2)?;
            ablate(p(0), p(1))
        }
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn split_flags<'a>(cmd: &str, rest: &[&'a str]) -> Result<(Vec<&'a str>, Option<PathBuf>)> {
    let mut positional = Vec::new();
    let mut config = None;
    let mut it = rest.iter();
    while let Some(&a) = it.next() {
        match a {
            "--config" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage("`--config` needs a path".into()))?;
                config = Some(PathBuf::from(v));
            }
            flag if flag.starts_with("--") => {
                return Err(CliError::Usage(format!(
                    "unknown flag `{flag}` for `{cmd}`"
                )));
            }
            _ => positional.push(a),
        }
    }
    Ok((positional, config))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// The full configuration as a loadable config file, preceded by the
/// format versions as comments. Feeding it back reproduces the run.
pub fn provenance(cfg: &RunConfig, command: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# command: {command}");
    let _ = writeln!(s, "# dataset format: {DATASET_MAGIC} v{DATASET_VERSION}");
    let _ = writeln!(
        s,
        "# checkpoint format: {CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"
    );
    let _ = writeln!(
        s,
        "# seeds: model {} train {} data {} eval {}",
        cfg.model.seed, cfg.train.seed, cfg.data.seed, cfg.eval.protocol.seed
    );
    s.push_str(&cfg.to_text());
    s
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let ds = generate_synthetic(&cfg.data)?;
    write_dataset(&ds, out)?;
    println!(
        "wrote {} samples over {} domains to {}",
        ds.len(),
        ds.domain_names.len(),
        out.display()
    );
    Ok(())
}

/// Train on the source domains of `ds`, writing checkpoints, logs and
/// provenance into `dir`.
fn train_into(cfg: &RunConfig, ds: &Dataset, dir: &Path, command: &str) -> Result<TrainOutcome> {
    create_dir(dir)?;
    write_file(
        &dir.join(PROVENANCE_FILE),
        provenance(cfg, command).as_bytes(),
    )?;
    let every = cfg.train.checkpoint_every;
    let outcome = run_training_with(
        init_model(&cfg.model)?,
        &ds.sources(),
        &cfg.train,
        |epoch, state| {
            if every > 0 && (epoch + 1) % every == 0 {
                save_checkpoint(state, &dir.join(format!("epoch-{:04}.ckpt", epoch + 1)))?;
            }
            Ok(())
        },
    )?;
    save_checkpoint(&outcome.state, &dir.join(FINAL_CHECKPOINT))?;
    write_file(
        &dir.join("metrics.csv"),
        metrics_csv(&outcome.metrics).as_bytes(),
    )?;
    write_file(
        &dir.join("steps.csv"),
        step_log_csv(&outcome.steps).as_bytes(),
    )?;
    Ok(outcome)
}

fn train(config: &Path, data: &Path, dir: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let ds = read_dataset(data)?;
    let outcome = train_into(&cfg, &ds, dir, "train")?;
    if let Some(last) = outcome.metrics.last() {
        println!("epoch {} total {:.6}", last.epoch, last.total);
    }
    println!("wrote {}", dir.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn check_compatible(state: &ModelState, ds: &Dataset) -> Result<()> {
    if state.config.input != ds.mode {
        return Err(mmfa_core::Error::Config(format!(
            "checkpoint input {:?} does not match dataset input {:?}",
            state.config.input, ds.mode
        ))
        .into());
    }
    Ok(())
}

fn extract(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let ds = read_dataset(data)?;
    check_compatible(&state, &ds)?;
    let codes = state.embed(&ds.samples)?;
    let width = codes.shape()[1];
    let mut s = String::from("index,identity,domain");
    for j in 0..width {
        let _ = write!(s, ",h{j}");
    }
    s.push('\n');
    for (i, row) in codes.data().chunks(width).enumerate() {
        let _ = write!(s, "{i},{},{}", ds.identities[i], ds.domains[i]);
        for v in row {
            let _ = write!(s, ",{v:e}");
        }
        s.push('\n');
    }
    write_file(out, s.as_bytes())?;
    println!(
        "wrote {} codes of width {width} to {}",
        ds.len(),
        out.display()
    );
    Ok(())
}

fn write_report(report: &EvalReport, json: &Path) -> Result<()> {
    write_file(json, report.to_json()?.as_bytes())?;
    write_file(&json.with_extension("csv"), report.to_csv().as_bytes())
}

fn print_report(report: &EvalReport) {
    print!("rank-1 {:.4}  mAP {:.4}", report.rank(1), report.map);
    if let Some(a) = report.domain_probe_accuracy {
        print!("  domain probe {a:.4}");
    }
    println!();
}

fn eval(ckpt: &Path, data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let eval_cfg = match config {
        Some(p) => RunConfig::from_file(p)?.eval,
        None => EvalConfig::default(),
    };
    let state = load_checkpoint(ckpt)?;
    let ds = read_dataset(data)?;
    check_compatible(&state, &ds)?;
    let report = full_report(&state, &ds, &eval_cfg)?;
    write_report(&report, out)?;
    print_report(&report);
    Ok(())
}

fn grad_check(config: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let opts = CheckOptions {
        seed: cfg.train.seed,
        ..CheckOptions::default()
    };
    let reports = gradient_check_suite(&cfg.train, cfg.model.seed, opts)?;
    let mut failed = Vec::new();
    for (name, r) in &reports {
        println!(
            "{name:<16} max relative error {:.3e}  {}",
            r.max_rel(),
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn ablate(config: &Path, dir: &Path) -> Result<()> {
    let base = RunConfig::from_file(config)?;
    create_dir(dir)?;
    let mut summary = String::from("row,name,rank1,rank5,rank10,map,domain_probe\n");
    for (i, row) in base.ablation_rows().iter().enumerate() {
        let cfg = &row.config;
        let ds = generate_synthetic(&cfg.data)?;
        let sub = dir.join(format!("{i}-{}", row_slug(row.name)));
        let outcome = train_into(cfg, &ds, &sub, &format!("ablate row {}", row.name))?;
        let report = full_report(&outcome.state, &ds, &cfg.eval)?;
        write_report(&report, &sub.join("report.json"))?;
        let probe = report
            .domain_probe_accuracy
            .map(|a| a.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            summary,
            "{i},{},{},{},{},{},{probe}",
            row.name,
            rank_or_blank(&report, 1),
            rank_or_blank(&report, 5),
            rank_or_blank(&report, 10),
            report.map
        );
        print!("{:<10} ", row.name);
        print_report(&report);
        std::io::stdout().flush().ok();
    }
    write_file(&dir.join("summary.csv"), summary.as_bytes())
}

fn rank_or_blank(report: &EvalReport, r: usize) -> String {
    report
        .cmc
        .get(r - 1)
        .map(f64::to_string)
        .unwrap_or_default()
}

fn row_slug(name: &str) -> String {
    name.trim_start_matches('+').to_ascii_lowercase()
}
