//! Flat `key = value` run configuration with a typed schema.
//!
//! Every key is also a command-line flag (`n_layers` is `--n-layers`).
//! Values from flags override the file; the fully resolved configuration is
//! echoed back in the same format, so a run can be repeated from its echo.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use epas::model::{ModelConfig, ShareKind, PRESETS};
use epas::numcore::DType;
use epas::schedule::{default_target, target_for_fraction, SharingSchedule};
use epas::train::TrainConfig;
use epas::{Error, Result};

pub const PRECISION_ENV: &str = "EPAS_PRECISION";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    Path,
    IntList,
}

impl Kind {
    fn describe(self) -> &'static str {
        match self {
            Kind::Int => "a non-negative integer",
            Kind::Float => "a number",
            Kind::Bool => "true or false",
            Kind::Str => "a string",
            Kind::Path => "a path",
            Kind::IntList => "a comma-separated integer list",
        }
    }

    fn check(self, v: &str) -> bool {
        match self {
            Kind::Int => v.parse::<u64>().is_ok(),
            Kind::Float => v.parse::<f64>().is_ok(),
            Kind::Bool => matches!(v, "true" | "false"),
            Kind::Str | Kind::Path => true,
            Kind::IntList => v.is_empty() || v.split(',').all(|x| x.trim().parse::<usize>().is_ok()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const fn key(name: &'static str, kind: Kind, help: &'static str) -> Key {
    Key { name, kind, help }
}

pub const KEYS: &[Key] = &[
    key("preset", Kind::Str, "model preset: toy, tinyllama-1.1b, llama-7b, llama-125m, llama-3b"),
    key("n_layers", Kind::Int, "decoder layers"),
    key("d_model", Kind::Int, "hidden width"),
    key("n_heads", Kind::Int, "query heads"),
    key("n_kv_heads", Kind::Int, "key/value heads"),
    key("d_ff", Kind::Int, "feed-forward width"),
    key("vocab_size", Kind::Int, "vocabulary size"),
    key("max_seq", Kind::Int, "longest supported sequence"),
    key("rope_theta", Kind::Float, "rotary base"),
    key("norm_eps", Kind::Float, "RMSNorm epsilon"),
    key("share_kind", Kind::Str, "shared activations (qk)"),
    key("include_last_layer", Kind::Bool, "allow the last layer to share"),
    key("steps", Kind::Int, "training steps"),
    key("batch_size", Kind::Int, "sequences per step"),
    key("seq_len", Kind::Int, "tokens per training sequence"),
    key("lr", Kind::Float, "peak learning rate"),
    key("min_lr_frac", Kind::Float, "final learning rate as a fraction of the peak"),
    key("warmup", Kind::Int, "linear warmup steps"),
    key("weight_decay", Kind::Float, "decoupled weight decay"),
    key("beta1", Kind::Float, "Adam beta1"),
    key("beta2", Kind::Float, "Adam beta2"),
    key("eps", Kind::Float, "Adam epsilon"),
    key("grad_clip", Kind::Float, "global gradient-norm clip, 0 disables"),
    key("seed", Kind::Int, "initialization, split and batch seed"),
    key("corpus", Kind::Path, "training text"),
    key("stride", Kind::Int, "token distance between window starts"),
    key("val_frac", Kind::Float, "fraction of windows held out"),
    key("eval_interval", Kind::Int, "validate every N steps, 0 only at the end"),
    key("eval_windows", Kind::Int, "validation windows per evaluation, 0 for all"),
    key("checkpoint_interval", Kind::Int, "checkpoint every N steps, 0 only at the end"),
    key("sharing", Kind::Bool, "enable progressive sharing"),
    key("interval", Kind::Int, "steps between growth events"),
    key("growth", Kind::Int, "layers switched per growth event"),
    key("target", Kind::IntList, "target region, ascending layer indices"),
    key("share_frac", Kind::Float, "target region as the deepest floor(frac*L) layers"),
    key("precision", Kind::Str, "f32 or f64"),
    key("out_dir", Kind::Path, "directory for every artifact of the run"),
];

pub fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Raw, type-checked values by key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig(pub BTreeMap<String, String>);

impl RawConfig {
    /// Sets `key` after checking it exists and `value` parses as its kind.
    /// `origin` names the source in error messages.
    pub fn set(&mut self, name: &str, value: &str, origin: &str) -> Result<()> {
        let k = lookup(name).ok_or_else(|| Error::Config(format!("unknown key `{name}` ({origin})")))?;
        let value = value.trim();
        if !k.kind.check(value) {
            return Err(Error::Config(format!(
                "key `{name}` ({origin}): expected {}, got `{value}`",
                k.kind.describe()
            )));
        }
        self.0.insert(name.to_string(), value.to_string());
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut raw = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1))
            })?;
            raw.set(k.trim(), v, &format!("{origin}:{}", i + 1))?;
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    fn num<T: std::str::FromStr>(&self, name: &str) -> Option<T> {
        self.get(name).and_then(|v| v.parse().ok())
    }

    fn list(&self, name: &str) -> Option<Vec<usize>> {
        self.get(name).map(|v| {
            v.split(',').filter(|x| !x.trim().is_empty()).map(|x| x.trim().parse().expect("checked")).collect()
        })
    }
}

fn within(section: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{section}: {msg}")),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: DType,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Fills defaults, applies `raw` and the precision environment override,
    /// and validates the result.
    pub fn resolve(raw: &RawConfig) -> Result<Self> {
        Self::resolve_with_env(raw, std::env::var(PRECISION_ENV).ok().as_deref())
    }

    pub fn resolve_with_env(raw: &RawConfig, env_precision: Option<&str>) -> Result<Self> {
        let preset = raw.get("preset").unwrap_or("toy").to_string();
        let mut m = ModelConfig::preset(&preset).ok_or_else(|| {
            Error::Config(format!("key `preset`: unknown preset `{preset}`, expected one of {}", PRESETS.join(", ")))
        })?;
        macro_rules! over {
            ($target:expr, $name:literal) => {
                if let Some(v) = raw.num($name) {
                    $target = v;
                }
            };
        }
        over!(m.n_layers, "n_layers");
        over!(m.d_model, "d_model");
        over!(m.n_heads, "n_heads");
        over!(m.n_kv_heads, "n_kv_heads");
        over!(m.d_ff, "d_ff");
        over!(m.vocab_size, "vocab_size");
        over!(m.max_seq, "max_seq");
        over!(m.rope_theta, "rope_theta");
        over!(m.norm_eps, "norm_eps");
        over!(m.include_last_layer, "include_last_layer");
        if let Some(k) = raw.get("share_kind") {
            m.share_kind = ShareKind::parse(k)
                .ok_or_else(|| Error::Config(format!("key `share_kind`: unknown value `{k}`")))?;
        }
        m.validate().map_err(|e| within("model", e))?;

        let out_dir = PathBuf::from(raw.get("out_dir").unwrap_or("runs/default"));
        let mut t = TrainConfig {
            metrics_path: Some(out_dir.join("metrics.jsonl")),
            checkpoint_dir: Some(out_dir.clone()),
            ..TrainConfig::default()
        };
        over!(t.steps, "steps");
        over!(t.batch_size, "batch_size");
        over!(t.seq_len, "seq_len");
        over!(t.lr, "lr");
        over!(t.min_lr_frac, "min_lr_frac");
        over!(t.warmup, "warmup");
        over!(t.weight_decay, "weight_decay");
        over!(t.beta1, "beta1");
        over!(t.beta2, "beta2");
        over!(t.eps, "eps");
        over!(t.grad_clip, "grad_clip");
        over!(t.seed, "seed");
        over!(t.stride, "stride");
        over!(t.val_frac, "val_frac");
        over!(t.eval_interval, "eval_interval");
        over!(t.checkpoint_interval, "checkpoint_interval");
        if let Some(p) = raw.get("corpus") {
            t.corpus = PathBuf::from(p);
        }
        if let Some(n) = raw.num::<usize>("eval_windows") {
            t.eval_windows = (n > 0).then_some(n);
        }

        let sharing = raw.num::<bool>("sharing").unwrap_or(true);
        t.schedule = if sharing {
            let target = match (raw.list("target"), raw.num::<f64>("share_frac")) {
                (Some(list), _) => list,
                (None, Some(frac)) => {
                    if !(0.0..=1.0).contains(&frac) {
                        return Err(Error::Config(format!("key `share_frac`: {frac} outside [0, 1]")));
                    }
                    target_for_fraction(&m, frac, false)
                }
                (None, None) => default_target(&m),
            };
            let s = SharingSchedule::new(
                raw.num("interval").unwrap_or(500),
                raw.num("growth").unwrap_or(1),
                target,
                m.n_layers,
            );
            s.validate(&m).map_err(|e| within("schedule", e))?;
            Some(s)
        } else {
            None
        };

        let prec = env_precision.or(raw.get("precision")).unwrap_or("f32");
        let precision = DType::parse(prec)
            .ok_or_else(|| Error::Config(format!("key `precision`: expected f32 or f64, got `{prec}`")))?;
        t.validate(&m).map_err(|e| within("train", e))?;
        Ok(Self { preset, model: m, train: t, precision, out_dir })
    }

    /// Canonical text of every key, in schema order.
    pub fn echo(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let sched = t.schedule.as_ref();
        let mut s = String::from("# effective run configuration\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("preset", self.preset.clone());
        put("n_layers", m.n_layers.to_string());
        put("d_model", m.d_model.to_string());
        put("n_heads", m.n_heads.to_string());
        put("n_kv_heads", m.n_kv_heads.to_string());
        put("d_ff", m.d_ff.to_string());
        put("vocab_size", m.vocab_size.to_string());
        put("max_seq", m.max_seq.to_string());
        put("rope_theta", format!("{:?}", m.rope_theta));
        put("norm_eps", format!("{:?}", m.norm_eps));
        put("share_kind", m.share_kind.name().to_string());
        put("include_last_layer", m.include_last_layer.to_string());
        put("steps", t.steps.to_string());
        put("batch_size", t.batch_size.to_string());
        put("seq_len", t.seq_len.to_string());
        put("lr", format!("{:?}", t.lr));
        put("min_lr_frac", format!("{:?}", t.min_lr_frac));
        put("warmup", t.warmup.to_string());
        put("weight_decay", format!("{:?}", t.weight_decay));
        put("beta1", format!("{:?}", t.beta1));
        put("beta2", format!("{:?}", t.beta2));
        put("eps", format!("{:?}", t.eps));
        put("grad_clip", format!("{:?}", t.grad_clip));
        put("seed", t.seed.to_string());
        put("corpus", t.corpus.display().to_string());
        put("stride", t.stride.to_string());
        put("val_frac", format!("{:?}", t.val_frac));
        put("eval_interval", t.eval_interval.to_string());
        put("eval_windows", t.eval_windows.unwrap_or(0).to_string());
        put("checkpoint_interval", t.checkpoint_interval.to_string());
        put("sharing", sched.is_some().to_string());
        if let Some(sc) = sched {
            put("interval", sc.interval.to_string());
            put("growth", sc.growth.to_string());
            put("target", list(&sc.target));
        }
        put("precision", self.precision.name().to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }
}
