//! Command-line driver: `train`, `generate`, `bench`, `flops`, `eval` and
//! `gradcheck` over a flat run-config file.

pub mod config;
mod commands;

use clap::{Arg, ArgAction, ArgMatches, Command};

pub use commands::run_matches;
use config::{RawConfig, KEYS};

/// Process exit status for an error.
pub fn exit_code(e: &epas::Error) -> i32 {
    use epas::Error::*;
    match e {
        Config(_) | Request(_) | Shape(_) | Index(_) => 2,
        NonFinite(_) => 3,
        Io(_) | Json(_) | Ingest(_) | Checkpoint(_) => 4,
    }
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// `--config` plus one flag per config key.
fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(Arg::new("config").long("config").short('c').value_name("FILE").help("run-config file"));
    KEYS.iter().fold(cmd, |cmd, k| {
        cmd.arg(Arg::new(k.name).long(flag_name(k.name)).value_name("VALUE").help(k.help).help_heading("Config keys"))
    })
}

/// File values overridden by flag values.
pub fn raw_config(m: &ArgMatches) -> epas::Result<RawConfig> {
    let mut raw = match m.get_one::<String>("config") {
        Some(p) => RawConfig::load(std::path::Path::new(p))?,
        None => RawConfig::default(),
    };
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            raw.set(k.name, v, &format!("flag --{}", flag_name(k.name)))?;
        }
    }
    Ok(raw)
}

pub fn command() -> Command {
    let ckpt = || Arg::new("ckpt").long("ckpt").value_name("PATH").required(true).help("checkpoint file");
    let env_note = "EPAS_PRECISION=f32|f64 overrides the precision key or the checkpoint's stored precision.";
    Command::new("epas")
        .about("Progressive QK activation sharing for decoder-only transformers")
        .after_help(env_note)
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("train")
                .about("Train a model; writes run.cfg, metrics.jsonl and checkpoints under out_dir")
                .arg(Arg::new("resume").long("resume").value_name("CKPT").help("continue from a checkpoint"))
                .arg(Arg::new("until").long("until").value_name("STEP").help("stop after this many steps"))
                .arg(Arg::new("quiet").long("quiet").short('q').action(ArgAction::SetTrue)),
        ))
        .subcommand(config_args(
            Command::new("flops")
                .about("Analytic FLOPs per sample with and without sharing")
                .arg(Arg::new("mode").long("mode").default_value("train").value_parser(["train", "forward"]))
                .arg(Arg::new("seq").long("seq").value_name("N").help("sequence length [default: max_seq]"))
                .arg(Arg::new("share-count").long("share-count").value_name("K").help("sharing layers [default: |target|]"))
                .arg(
                    Arg::new("counting")
                        .long("counting")
                        .default_value("full")
                        .value_parser(["full", "causal-half"])
                        .help("attention score/mix product counting"),
                )
                .arg(Arg::new("kv").long("kv").action(ArgAction::SetTrue).help("machine-readable key=value output")),
        ))
        .subcommand(config_args(
            Command::new("gradcheck")
                .about("Finite-difference check of the model gradients in 64-bit precision")
                .arg(Arg::new("share").long("share").default_value("0").help("deepest layers of the target region sharing"))
                .arg(Arg::new("seq").long("seq").default_value("16"))
                .arg(Arg::new("n-seq").long("n-seq").default_value("1"))
                .arg(Arg::new("h").long("h").default_value("1e-5").help("finite-difference step"))
                .arg(Arg::new("tol").long("tol").default_value("1e-4")),
        ))
        .subcommand(
            Command::new("generate")
                .about("Decode text from a checkpoint")
                .arg(ckpt())
                .arg(Arg::new("prompt").long("prompt").default_value("\n"))
                .arg(Arg::new("max-new").long("max-new").default_value("128"))
                .arg(Arg::new("share-layers").long("share-layers").default_value("0"))
                .arg(Arg::new("temperature").long("temperature").help("sample instead of greedy decoding"))
                .arg(Arg::new("seed").long("seed").default_value("0")),
        )
        .subcommand(
            Command::new("bench")
                .about("Generation throughput per sharing count, as CSV")
                .arg(ckpt())
                .arg(Arg::new("ks").long("ks").value_name("LIST").help("sharing counts [default: 0, |region|/2, |region|]"))
                .arg(Arg::new("prompt-len").long("prompt-len").default_value("64"))
                .arg(Arg::new("gen-len").long("gen-len").default_value("256"))
                .arg(Arg::new("repeats").long("repeats").default_value("5"))
                .arg(Arg::new("seed").long("seed").default_value("0"))
                .arg(Arg::new("out").long("out").value_name("CSV").help("also write the table here")),
        )
        .subcommand(
            Command::new("eval")
                .about("Validation loss of one checkpoint at several sharing counts")
                .arg(ckpt())
                .arg(Arg::new("share-layers").long("share-layers").default_value("0").value_name("LIST"))
                .arg(
                    Arg::new("force-region")
                        .long("force-region")
                        .action(ArgAction::SetTrue)
                        .help("allow sharing on a checkpoint trained without it, over the default region"),
                )
                .arg(Arg::new("corpus").long("corpus").help("override the checkpoint's corpus path"))
                .arg(Arg::new("eval-windows").long("eval-windows").help("validation windows, 0 for all")),
        )
}

/// Parses `args` and runs the subcommand; returns the exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let m = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_matches(&m) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
