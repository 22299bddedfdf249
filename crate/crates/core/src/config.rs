//! Flat `key=value` configuration files and the named profiles.
//!
//! Blank lines and lines starting with `#` are ignored. A `profile=<name>`
//! line selects the base values (`desk` when absent); every other key
//! overrides one field. Unknown keys are rejected.
//!
//! | key | meaning | desk default |
//! |-----|---------|--------------|
//! | `layers` | propagation layers J | 2 |
//! | `levels` | quantizer levels L | 4 |
//! | `codes` | codes per level K | 96 |
//! | `dim_v`, `dim_t` | visual / textual widths | 16, 32 |
//! | `alpha` | commitment weight | 0.25 |
//! | `beta` | cross-modal loss weight | 0.1 |
//! | `batch_size`, `lr`, `epochs`, `seed` | stage-one optimization | 1024, 1e-3, 10, 0 |
//! | `freeze_items` | keep item base vectors at their features | false |
//! | `rq_users` | include user residuals in the quantization loss | true |
//! | `quantized_scores` | score with reconstructions (false: continuous ablation) | true |
//! | `ema_decay`, `dead_code_window` | codebook EMA λ and reset window T (0 disables) | 0.99, 200 |
//! | `eval_negatives` | sampled negatives per held-out positive | 100 |
//! | `users`, `items` | entity counts for parameter reports only | unset |
//! | `gamma` | consistency reward weight | 0.5 |
//! | `stage2_lr`, `stage2_batch`, `stage2_epochs` | stage-two optimization | 1e-5, 8, 20 |
//! | `noise_scale`, `explore_scale` | corruption σ and generation noise | 0.1, 0.1 |
//! | `vocab`, `seq_len` | toy text vocabulary V and length S | 64, 8 |
//! | `image_dim`, `shared_dim` | toy image width and similarity-space width | 32, 16 |
//! | `history_cap`, `heldout_fraction` | R_p history length N and held-out user share | 16, 0.2 |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: format!("expected key=value, found {line:?}"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOneConfig {
    pub layers: usize,
    pub levels: usize,
    pub codes: usize,
    pub dim_v: usize,
    pub dim_t: usize,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_items: bool,
    pub rq_users: bool,
    pub quantized_scores: bool,
    pub ema_decay: f64,
    pub dead_code_window: u32,
    pub eval_negatives: usize,
    pub users: Option<usize>,
    pub items: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTwoConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub noise_scale: f64,
    pub explore_scale: f64,
    pub vocab: usize,
    pub seq_len: usize,
    pub image_dim: usize,
    pub shared_dim: usize,
    pub history_cap: usize,
    pub heldout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub profile: String,
    pub stage1: StageOneConfig,
    pub stage2: StageTwoConfig,
}

impl Config {
    pub fn profile(name: &str) -> Result<Self> {
        let stage2 = StageTwoConfig {
            gamma: 0.5,
            lr: 1e-5,
            batch_size: 8,
            epochs: 20,
            noise_scale: 0.1,
            explore_scale: 0.1,
            vocab: 64,
            seq_len: 8,
            image_dim: 32,
            shared_dim: 16,
            history_cap: 16,
            heldout_fraction: 0.2,
        };
        let desk = StageOneConfig {
            layers: 2,
            levels: 4,
            codes: 96,
            dim_v: 16,
            dim_t: 32,
            alpha: 0.25,
            beta: 0.1,
            batch_size: 1024,
            lr: 1e-3,
            epochs: 10,
            seed: 0,
            freeze_items: false,
            rq_users: true,
            quantized_scores: true,
            ema_decay: 0.99,
            dead_code_window: 200,
            eval_negatives: 100,
            users: None,
            items: None,
        };
        let stage1 = match name {
            "desk" => desk,
            "tiny" => StageOneConfig {
                codes: 24,
                batch_size: 256,
                ..desk
            },
            "full" => StageOneConfig {
                dim_v: 768,
                dim_t: 4096,
                ..desk
            },
            other => return Err(Error::Config(format!("unknown profile {other:?}"))),
        };
        let cfg = Config {
            profile: name.to_string(),
            stage1,
            stage2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let mut cfg = Config::profile(kv.get("profile").map_or("desk", String::as_str))?;
        for (k, v) in &kv {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// A profile name or the path of a config file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if matches!(spec, "desk" | "tiny" | "full") {
            return Config::profile(spec);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        let s1 = &mut self.stage1;
        let s2 = &mut self.stage2;
        match key {
            "layers" => s1.layers = p(key, value)?,
            "levels" => s1.levels = p(key, value)?,
            "codes" => s1.codes = p(key, value)?,
            "dim_v" => s1.dim_v = p(key, value)?,
            "dim_t" => s1.dim_t = p(key, value)?,
            "alpha" => s1.alpha = p(key, value)?,
            "beta" => s1.beta = p(key, value)?,
            "batch_size" => s1.batch_size = p(key, value)?,
            "lr" => s1.lr = p(key, value)?,
            "epochs" => s1.epochs = p(key, value)?,
            "seed" => s1.seed = p(key, value)?,
            "freeze_items" => s1.freeze_items = p(key, value)?,
            "rq_users" => s1.rq_users = p(key, value)?,
            "quantized_scores" => s1.quantized_scores = p(key, value)?,
            "ema_decay" => s1.ema_decay = p(key, value)?,
            "dead_code_window" => s1.dead_code_window = p(key, value)?,
            "eval_negatives" => s1.eval_negatives = p(key, value)?,
            "users" => s1.users = Some(p(key, value)?),
            "items" => s1.items = Some(p(key, value)?),
            "gamma" => s2.gamma = p(key, value)?,
            "stage2_lr" => s2.lr = p(key, value)?,
            "stage2_batch" => s2.batch_size = p(key, value)?,
            "stage2_epochs" => s2.epochs = p(key, value)?,
            "noise_scale" => s2.noise_scale = p(key, value)?,
            "explore_scale" => s2.explore_scale = p(key, value)?,
            "vocab" => s2.vocab = p(key, value)?,
            "seq_len" => s2.seq_len = p(key, value)?,
            "image_dim" => s2.image_dim = p(key, value)?,
            "shared_dim" => s2.shared_dim = p(key, value)?,
            "history_cap" => s2.history_cap = p(key, value)?,
            "heldout_fraction" => s2.heldout_fraction = p(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        let positive = [
            ("levels", s1.levels),
            ("codes", s1.codes),
            ("dim_v", s1.dim_v),
            ("dim_t", s1.dim_t),
            ("batch_size", s1.batch_size),
            ("eval_negatives", s1.eval_negatives),
            ("stage2_batch", s2.batch_size),
            ("vocab", s2.vocab),
            ("seq_len", s2.seq_len),
            ("image_dim", s2.image_dim),
            ("shared_dim", s2.shared_dim),
            ("history_cap", s2.history_cap),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        let non_negative = [
            ("alpha", s1.alpha),
            ("beta", s1.beta),
            ("lr", s1.lr),
            ("gamma", s2.gamma),
            ("stage2_lr", s2.lr),
            ("noise_scale", s2.noise_scale),
            ("explore_scale", s2.explore_scale),
        ];
        if let Some((k, v)) = non_negative.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("{k} must be finite and >= 0, got {v}")));
        }
        if !(0.0..=1.0).contains(&s1.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", s1.ema_decay)));
        }
        if !(0.0..1.0).contains(&s2.heldout_fraction) {
            return Err(Error::Config("heldout_fraction must be in [0, 1)".into()));
        }
        if s2.noise_scale == 0.0 {
            return Err(Error::Config("noise_scale must be positive".into()));
        }
        Ok(())
    }

    /// Every field as `key=value` lines; `Config::parse` reads it back.
    pub fn to_text(&self) -> String {
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("profile", self.profile.clone());
        put("layers", s1.layers.to_string());
        put("levels", s1.levels.to_string());
        put("codes", s1.codes.to_string());
        put("dim_v", s1.dim_v.to_string());
        put("dim_t", s1.dim_t.to_string());
        put("alpha", s1.alpha.to_string());
        put("beta", s1.beta.to_string());
        put("batch_size", s1.batch_size.to_string());
        put("lr", s1.lr.to_string());
        put("epochs", s1.epochs.to_string());
        put("seed", s1.seed.to_string());
        put("freeze_items", s1.freeze_items.to_string());
        put("rq_users", s1.rq_users.to_string());
        put("quantized_scores", s1.quantized_scores.to_string());
        put("ema_decay", s1.ema_decay.to_string());
        put("dead_code_window", s1.dead_code_window.to_string());
        put("eval_negatives", s1.eval_negatives.to_string());
        if let Some(u) = s1.users {
            put("users", u.to_string());
        }
        if let Some(i) = s1.items {
            put("items", i.to_string());
        }
        put("gamma", s2.gamma.to_string());
        put("stage2_lr", s2.lr.to_string());
        put("stage2_batch", s2.batch_size.to_string());
        put("stage2_epochs", s2.epochs.to_string());
        put("noise_scale", s2.noise_scale.to_string());
        put("explore_scale", s2.explore_scale.to_string());
        put("vocab", s2.vocab.to_string());
        put("seq_len", s2.seq_len.to_string());
        put("image_dim", s2.image_dim.to_string());
        put("shared_dim", s2.shared_dim.to_string());
        put("history_cap", s2.history_cap.to_string());
        put("heldout_fraction", s2.heldout_fraction.to_string());
        out
    }
}
