use std::path::{Path, PathBuf};

use clap::ArgMatches;
use epas::flops::{flops_with_counting, AttentionCounting, Mode};
use epas::infer::{bench_throughput, generate, to_csv, BenchConfig, GenRequest, Sampling};
use epas::model::{check_model_gradients, ModelConfig, ShareSet};
use epas::numcore::{DType, Float, GradCheckOptions};
use epas::schedule::default_target;
use epas::train::{evaluate, stored_dtype, tokenize, Checkpoint, Dataset, Trainer, BOS};
use epas::{Error, Result};

use crate::config::{RunConfig, PRECISION_ENV};
use crate::raw_config;

pub fn run_matches(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("train", sub)) => train(sub),
        Some(("flops", sub)) => flops(sub),
        Some(("gradcheck", sub)) => gradcheck(sub),
        Some(("generate", sub)) => dispatch_ckpt(sub, generate_cmd::<f32>, generate_cmd::<f64>),
        Some(("bench", sub)) => dispatch_ckpt(sub, bench_cmd::<f32>, bench_cmd::<f64>),
        Some(("eval", sub)) => dispatch_ckpt(sub, eval_cmd::<f32>, eval_cmd::<f64>),
        _ => Err(Error::Config("unknown subcommand".into())),
    }
}

fn arg<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> Result<Option<T>> {
    m.get_one::<String>(name)
        .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("flag --{name}: cannot parse `{v}`"))))
        .transpose()
}

fn req<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> Result<T> {
    arg(m, name)?.ok_or_else(|| Error::Config(format!("flag --{name} is required")))
}

fn list(m: &ArgMatches, name: &str) -> Result<Option<Vec<usize>>> {
    m.get_one::<String>(name)
        .map(|v| {
            v.split(',')
                .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("flag --{name}: bad entry `{x}`"))))
                .collect()
        })
        .transpose()
}

fn train(m: &ArgMatches) -> Result<()> {
    let cfg = RunConfig::resolve(&raw_config(m)?)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("run.cfg"), cfg.echo())?;
    match cfg.precision {
        DType::F32 => train_as::<f32>(m, &cfg),
        DType::F64 => train_as::<f64>(m, &cfg),
    }
}

fn train_as<T: Float>(m: &ArgMatches, cfg: &RunConfig) -> Result<()> {
    let mut trainer = match m.get_one::<String>("resume") {
        Some(p) => Trainer::<T>::resume(Checkpoint::load(Path::new(p), Some(&cfg.model))?, cfg.train.clone())?,
        None => Trainer::<T>::new(cfg.model.clone(), cfg.train.clone())?,
    };
    let until: usize = arg(m, "until")?.unwrap_or(cfg.train.steps);
    let quiet = m.get_flag("quiet");
    let every = (cfg.train.steps / 20).max(1);
    let recs = trainer.run_until(until, |r| {
        if !quiet && (r.step % every == 0 || r.val_loss.is_some()) {
            let val = r.val_loss.map_or(String::new(), |v| format!(" val {v:.4}"));
            eprintln!(
                "step {:>6} loss {:.4}{val} shared {} lr {:.2e} {:.0} tok/s",
                r.step, r.loss, r.share_count, r.lr, r.tokens_per_sec
            );
        }
    })?;
    if let Some(last) = recs.last() {
        println!("steps={} loss={:?} val_loss={:?}", trainer.step, last.loss, last.val_loss);
    }
    Ok(())
}

fn flops(m: &ArgMatches) -> Result<()> {
    let cfg = RunConfig::resolve(&raw_config(m)?)?;
    let mode = Mode::parse(m.get_one::<String>("mode").expect("default")).expect("validated by clap");
    let counting = match m.get_one::<String>("counting").map(String::as_str) {
        Some("causal-half") => AttentionCounting::CausalHalf,
        _ => AttentionCounting::Full,
    };
    let seq = arg(m, "seq")?.unwrap_or(cfg.model.max_seq);
    let k = match arg(m, "share-count")? {
        Some(k) => k,
        None => cfg.train.schedule.as_ref().map_or(0, |s| s.target.len()),
    };
    let report = flops_with_counting(&cfg.model, seq, k, mode, counting)?;
    if m.get_flag("kv") {
        print!("preset={}\n{}", cfg.preset, report.key_values());
    } else {
        let note = if ModelConfig::preset_is_reconstructed(&cfg.preset) { " (reconstructed shape)" } else { "" };
        println!("preset {}{note}", cfg.preset);
        print!("{report}");
    }
    Ok(())
}

fn gradcheck(m: &ArgMatches) -> Result<()> {
    let cfg = RunConfig::resolve(&raw_config(m)?)?;
    let k: usize = req(m, "share")?;
    let target = cfg.train.schedule.as_ref().map_or_else(|| default_target(&cfg.model), |s| s.target.clone());
    let share = ShareSet::deepest(&target, k)?;
    let opts = GradCheckOptions {
        h: req(m, "h")?,
        tol: req(m, "tol")?,
        seed: cfg.train.seed,
        ..GradCheckOptions::default()
    };
    let seq: usize = req(m, "seq")?;
    let n_seq: usize = req(m, "n-seq")?;
    let report = check_model_gradients(&cfg.model, &share, seq, n_seq, cfg.train.seed, &opts)?;
    let layers: Vec<String> = share.iter().map(|l| l.to_string()).collect();
    println!("share_set=[{}] seq={seq} n_seq={n_seq} h={:e}", layers.join(","), opts.h);
    for p in &report.params {
        println!("  {:<22} coords {:>5}  max_rel_err {:.3e}", p.name, p.checked, p.max_rel_err);
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!("max_rel_err={:.3e} tol={:e} {verdict}", report.max_rel_err, report.tol);
    if report.passed() {
        Ok(())
    } else {
        let (name, i) = report.worst.clone().unwrap_or_default();
        Err(Error::NonFinite(format!(
            "gradient check failed: max rel err {:.3e} at {name}[{i}]",
            report.max_rel_err
        )))
    }
}

fn dispatch_ckpt(
    m: &ArgMatches,
    f32_cmd: fn(&ArgMatches, Checkpoint<f32>) -> Result<()>,
    f64_cmd: fn(&ArgMatches, Checkpoint<f64>) -> Result<()>,
) -> Result<()> {
    let path = PathBuf::from(m.get_one::<String>("ckpt").expect("required"));
    let dtype = match std::env::var(PRECISION_ENV) {
        Ok(v) => DType::parse(&v)
            .ok_or_else(|| Error::Config(format!("{PRECISION_ENV}: expected f32 or f64, got `{v}`")))?,
        Err(_) => stored_dtype(&path)?,
    };
    match dtype {
        DType::F32 => f32_cmd(m, Checkpoint::load(&path, None)?),
        DType::F64 => f64_cmd(m, Checkpoint::load(&path, None)?),
    }
}

fn decode_text(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < BOS).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn generate_cmd<T: Float>(m: &ArgMatches, ckpt: Checkpoint<T>) -> Result<()> {
    let text = m.get_one::<String>("prompt").expect("default");
    let prompt = tokenize(text.as_bytes()).unwrap_or_else(|| vec![BOS]);
    let sampling = match arg::<f64>(m, "temperature")? {
        Some(temperature) => Sampling::Temperature { temperature, seed: req(m, "seed")? },
        None => Sampling::Greedy,
    };
    let request = GenRequest {
        prompt,
        max_new_tokens: req(m, "max-new")?,
        share_layers: req(m, "share-layers")?,
        sampling,
    };
    let out = generate(&ckpt.params, &ckpt.model, ckpt.region(), &request)?;
    println!("{text}{}", decode_text(&out.tokens));
    eprintln!(
        "generated {} tokens with {} sharing layers: {:.1} tok/s, {} MACs",
        out.tokens.len(),
        request.share_layers,
        out.tokens_per_sec(),
        out.gen_macs
    );
    Ok(())
}

fn bench_cmd<T: Float>(m: &ArgMatches, ckpt: Checkpoint<T>) -> Result<()> {
    let r = ckpt.region().len();
    let mut ks = list(m, "ks")?.unwrap_or_else(|| vec![0, r / 2, r]);
    ks.dedup();
    let bench = BenchConfig {
        ks,
        prompt_len: req(m, "prompt-len")?,
        gen_len: req(m, "gen-len")?,
        repeats: req(m, "repeats")?,
        seed: req(m, "seed")?,
    };
    let rows = bench_throughput(&ckpt.params, &ckpt.model, ckpt.region(), &bench)?;
    let csv = to_csv(&rows);
    print!("{csv}");
    if let Some(p) = m.get_one::<String>("out") {
        std::fs::write(p, &csv)?;
    }
    Ok(())
}

fn eval_cmd<T: Float>(m: &ArgMatches, ckpt: Checkpoint<T>) -> Result<()> {
    let ks = list(m, "share-layers")?.unwrap_or_else(|| vec![0]);
    let region: Vec<usize> = match (ckpt.region().is_empty(), m.get_flag("force-region")) {
        (true, true) => default_target(&ckpt.model),
        _ => ckpt.region().to_vec(),
    };
    let mut tc = ckpt
        .train
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no training config to rebuild the split".into()))?;
    if let Some(c) = m.get_one::<String>("corpus") {
        tc.corpus = PathBuf::from(c);
    }
    if let Some(n) = arg::<usize>(m, "eval-windows")? {
        tc.eval_windows = (n > 0).then_some(n);
    }
    let data = Dataset::load(&tc.corpus, tc.seq_len, tc.stride, tc.val_frac, tc.seed)?;
    let windows = data.val_windows(tc.eval_windows);
    println!("k,share_layers,loss");
    for k in ks {
        let share = ShareSet::deepest(&region, k).map_err(|_| {
            let hint = if ckpt.region().is_empty() { "; pass --force-region to use the default region" } else { "" };
            Error::Request(format!("{k} sharing layers exceed the trained region of {}{hint}", region.len()))
        })?;
        let loss = evaluate(&ckpt.params, &ckpt.model, &share, &windows, tc.seq_len + 1, tc.batch_size)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} with {k} sharing layers")));
        }
        let layers: Vec<String> = share.iter().map(|l| l.to_string()).collect();
        println!("{k},{},{loss:?}", layers.join(" "));
    }
    Ok(())
}
