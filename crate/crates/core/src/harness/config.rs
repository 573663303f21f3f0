use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LoraConfig, ModelConfig};
use crate::numerics::Precision;
use crate::obfmat::KeySpec;
use crate::partition::KeyPolicy;

/// Environment variable that overrides the configured precision.
pub const PRECISION_ENV: &str = "OBFT_PRECISION";

/// The key grid swept by default: 1, 8, 32, 128, 1e3, 1e4 and raw keys.
pub fn default_kappas() -> Vec<KeySpec> {
    vec![
        KeySpec::Kappa(1.0),
        KeySpec::Kappa(8.0),
        KeySpec::Kappa(32.0),
        KeySpec::Kappa(128.0),
        KeySpec::Kappa(1e3),
        KeySpec::Kappa(1e4),
        KeySpec::Raw,
    ]
}

/// Everything an experiment run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Preset name; inline dimensions below override it.
    pub model: String,
    pub n_layer: Option<usize>,
    pub n_head: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub vocab_size: Option<usize>,
    pub context_len: Option<usize>,
    pub attn_dropout: f64,
    pub key_policy: KeyPolicy,
    pub key_kind: KeySpec,
    pub kappas: Vec<KeySpec>,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    /// Byte corpus; the vendored text when unset.
    pub corpus: Option<PathBuf>,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub eval_windows: usize,
    pub lora: LoraConfig,
    pub repetitions: usize,
    /// Max abs logit difference accepted by the equivalence check; the
    /// precision's default when unset.
    pub tolerance: Option<f64>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "toy".into(),
            n_layer: None,
            n_head: None,
            d_model: None,
            d_ff: None,
            vocab_size: None,
            context_len: None,
            attn_dropout: 0.0,
            key_policy: KeyPolicy::PerBlock,
            key_kind: KeySpec::Orthogonal,
            kappas: default_kappas(),
            seeds: vec![0],
            precision: Precision::F32,
            corpus: None,
            steps: 200,
            lr: 3e-5,
            batch_size: 1,
            seq_len: 64,
            eval_windows: 2,
            lora: LoraConfig::default(),
            repetitions: 5,
            tolerance: None,
            output: None,
        }
    }
}

fn parse_seeds(v: &str) -> std::result::Result<Vec<u64>, String> {
    if let Some((a, b)) = v.split_once("..") {
        let a: u64 = a
            .trim()
            .parse()
            .map_err(|e| format!("bad seed range start: {e}"))?;
        let b: u64 = b
            .trim()
            .parse()
            .map_err(|e| format!("bad seed range end: {e}"))?;
        return Ok((a..b).collect());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| format!("bad seed {s:?}: {e}"))
        })
        .collect()
}

/// Comma-separated κ values; `raw`/`random` and `orthogonal` are accepted.
pub fn parse_kappas(v: &str) -> std::result::Result<Vec<KeySpec>, String> {
    v.split(',').map(|s| s.trim().parse::<KeySpec>()).collect()
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "model" | "preset" => {
                if ModelConfig::preset(v).is_none() {
                    return Err(format!("unknown model preset {v:?}"));
                }
                self.model = v.into();
            }
            "n_layer" => self.n_layer = Some(num(v)?),
            "n_head" => self.n_head = Some(num(v)?),
            "d_model" => self.d_model = Some(num(v)?),
            "d_ff" => self.d_ff = Some(num(v)?),
            "vocab_size" => self.vocab_size = Some(num(v)?),
            "context_len" => self.context_len = Some(num(v)?),
            "attn_dropout" => self.attn_dropout = num(v)?,
            "key_policy" => self.key_policy = v.parse()?,
            "key_kind" => self.key_kind = v.parse()?,
            "kappas" => self.kappas = parse_kappas(v)?,
            "seeds" => self.seeds = parse_seeds(v)?,
            "precision" => self.precision = v.parse()?,
            "corpus" => self.corpus = Some(PathBuf::from(v)),
            "steps" => self.steps = num(v)?,
            "lr" => self.lr = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "seq_len" => self.seq_len = num(v)?,
            "eval_windows" => self.eval_windows = num(v)?,
            "lora_rank" => self.lora.rank = num(v)?,
            "lora_alpha" => self.lora.alpha = num(v)?,
            "lora_dropout" => self.lora.dropout = num(v)?,
            "repetitions" => self.repetitions = num(v)?,
            "tolerance" => self.tolerance = Some(num(v)?),
            "output" => self.output = Some(PathBuf::from(v)),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.kappas.is_empty() {
            return bad("kappas must not be empty".into());
        }
        for k in &self.kappas {
            if let KeySpec::Kappa(x) = k {
                if !(*x >= 1.0) || !x.is_finite() {
                    return bad(format!("kappa {x} must be >= 1"));
                }
            }
        }
        if self.batch_size == 0 || self.repetitions == 0 || self.eval_windows == 0 {
            return bad("batch_size, repetitions and eval_windows must be >= 1".into());
        }
        if self.seq_len == 0 {
            return bad("seq_len must be >= 1".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!(
                "lr {} must be a finite non-negative number",
                self.lr
            ));
        }
        self.lora.validate()?;
        let m = self.model_config()?;
        if self.seq_len > m.context_len {
            return bad(format!(
                "seq_len {} exceeds context {}",
                self.seq_len, m.context_len
            ));
        }
        Ok(())
    }

    /// The resolved model shape.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.model)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset {:?}", self.model)))?;
        if let Some(v) = self.n_layer {
            m.n_layer = v;
        }
        if let Some(v) = self.n_head {
            m.n_head = v;
        }
        if let Some(v) = self.d_model {
            m.d_model = v;
            m.d_ff = 4 * v;
        }
        if let Some(v) = self.d_ff {
            m.d_ff = v;
        }
        if let Some(v) = self.vocab_size {
            m.vocab_size = v;
        }
        if let Some(v) = self.context_len {
            m.context_len = v;
        }
        m.attn_dropout = self.attn_dropout;
        m.precision = self.precision;
        m.validate()?;
        Ok(m)
    }

    /// Canonical `key=value` lines, sorted by key. Output location is left
    /// out since it does not affect results.
    pub fn canonical(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
        let kappas: Vec<String> = self.kappas.iter().map(KeySpec::label).collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut pairs = vec![
            ("attn_dropout", self.attn_dropout.to_string()),
            ("batch_size", self.batch_size.to_string()),
            (
                "corpus",
                self.corpus
                    .as_ref()
                    .map_or("-".into(), |p| p.display().to_string()),
            ),
            ("context_len", opt(self.context_len)),
            ("d_ff", opt(self.d_ff)),
            ("d_model", opt(self.d_model)),
            ("eval_windows", self.eval_windows.to_string()),
            ("kappas", kappas.join(",")),
            ("key_kind", self.key_kind.label()),
            ("key_policy", self.key_policy.to_string()),
            ("lora_alpha", self.lora.alpha.to_string()),
            ("lora_dropout", self.lora.dropout.to_string()),
            ("lora_rank", self.lora.rank.to_string()),
            ("lr", self.lr.to_string()),
            ("model", self.model.clone()),
            ("n_head", opt(self.n_head)),
            ("n_layer", opt(self.n_layer)),
            ("precision", self.precision.to_string()),
            ("repetitions", self.repetitions.to_string()),
            ("seeds", seeds.join(",")),
            ("seq_len", self.seq_len.to_string()),
            ("steps", self.steps.to_string()),
            (
                "tolerance",
                self.tolerance.map_or("-".into(), |t| t.to_string()),
            ),
            ("vocab_size", opt(self.vocab_size)),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn digest(&self) -> String {
        let d = Sha256::digest(self.canonical().as_bytes());
        hex::encode(&d[..8])
    }

    /// Applies `OBFT_PRECISION` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(p) = std::env::var(PRECISION_ENV) {
            self.precision = p
                .parse()
                .map_err(|e: String| Error::InvalidArgument(format!("{PRECISION_ENV}: {e}")))?;
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment. Errors name the line.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Config {
            line: i + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        cfg.set(k, v).map_err(err)?;
    }
    Ok(cfg)
}

/// Reads a config file, then applies the precision override.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    cfg.apply_env()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.lr, 3e-5);
        assert_eq!(c.batch_size, 1);
        assert_eq!(
            (c.lora.rank, c.lora.alpha, c.lora.dropout),
            (16, 32.0, 0.05)
        );
    }

    #[test]
    fn parses_values_and_comments() {
        let c = parse_config(
            "# sweep\nmodel = tiny\nkappas = 1, 8, raw # grid\nseeds = 0..3\nprecision=f64\nlr=0.1\n",
        )
        .unwrap();
        assert_eq!(c.model, "tiny");
        assert_eq!(
            c.kappas,
            vec![KeySpec::Kappa(1.0), KeySpec::Kappa(8.0), KeySpec::Raw]
        );
        assert_eq!(c.seeds, vec![0, 1, 2]);
        assert_eq!(c.precision, Precision::F64);
        assert_eq!(c.lr, 0.1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_config("lr = 1\n\nbogus line\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 3, .. }), "{e}");
        let e = parse_config("colour = red").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
        let e = parse_config("steps = -4").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let mut c = ExperimentConfig::default();
        c.kappas = vec![KeySpec::Kappa(0.5)];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.seeds.clear();
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn digest_ignores_output_but_not_settings() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output = Some("x.csv".into());
        assert_eq!(a.digest(), b.digest());
        b.lr = 0.5;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 16);
    }

    #[test]
    fn inline_dims_override_preset() {
        let c = parse_config("model = toy\nd_model = 64\nn_layer = 2").unwrap();
        let m = c.model_config().unwrap();
        assert_eq!((m.n_layer, m.d_model, m.d_ff, m.n_head), (2, 64, 256, 4));
    }
}
