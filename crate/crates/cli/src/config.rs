//! Run configuration: presets, the flat `key = value` format and the digest
//! embedded in every artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use omreid::assembler::TokenizerConfig;
use omreid::encoder::EncoderConfig;
use omreid::fusion::MixtureConfig;
use omreid::model::ModelConfig;
use omreid::optim::LrSchedule;
use omreid::synthgen::{self, SynthConfig};
use omreid::train::TrainConfig;
use omreid::{Error, Modality, Result};

pub const ENV_SEED: &str = "OMREID_SEED";
pub const ENV_OUT: &str = "OMREID_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// A few minutes on one desktop.
    Desk,
    /// CLIP-B/16 scale.
    Full,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config(format!("unknown preset {s:?} (desk | full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    // Dataset.
    pub n_identities: usize,
    pub views: usize,
    pub n_cameras: usize,
    pub train_fraction: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    // Encoder towers.
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub text_width: usize,
    pub text_heads: usize,
    pub mlp_ratio: usize,
    pub rank: usize,
    pub projection_dim: usize,
    pub routing: bool,
    // Feature mixture.
    pub fm_hidden: usize,
    pub fm_heads: usize,
    pub fm_mlp_ratio: usize,
    // Objective and optimization.
    pub alpha: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_ids: usize,
    pub warmup_epochs: f64,
    pub lr_start: f64,
    pub lr_base: f64,
    pub lr_fast: f64,
    pub augment: bool,
    pub crop_pad: usize,
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Full => Self::full(),
        }
    }

    /// 30 synthetic identities and 2-layer towers.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 0,
            out_dir: PathBuf::from("out"),
            n_identities: 30,
            views: 4,
            n_cameras: 2,
            train_fraction: 2.0 / 3.0,
            image_height: 32,
            image_width: 16,
            patch_size: 8,
            vocab_size: 64,
            max_text_len: 24,
            layers: 2,
            width: 64,
            heads: 4,
            text_width: 64,
            text_heads: 4,
            mlp_ratio: 4,
            rank: 2,
            projection_dim: 32,
            routing: true,
            fm_hidden: 32,
            fm_heads: 4,
            fm_mlp_ratio: 4,
            alpha: 1.0,
            tau: 0.02,
            epochs: 30,
            batch_ids: 16,
            warmup_epochs: 3.0,
            lr_start: 3e-5,
            lr_base: 3e-4,
            lr_fast: 3e-3,
            augment: true,
            crop_pad: 0,
            checkpoint_every: 10,
        }
    }

    /// CLIP-B/16 towers, 384×128 images, 77-token texts and the 60-epoch
    /// schedule.
    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            n_identities: 1000,
            views: 4,
            train_fraction: 0.6,
            image_height: 384,
            image_width: 128,
            patch_size: 16,
            vocab_size: 49408,
            max_text_len: 77,
            layers: 12,
            width: 768,
            heads: 12,
            text_width: 512,
            text_heads: 8,
            rank: 4,
            projection_dim: 512,
            fm_hidden: 512,
            fm_heads: 8,
            epochs: 60,
            batch_ids: 64,
            warmup_epochs: 5.0,
            lr_start: 1e-6,
            lr_base: 1e-5,
            lr_fast: 5e-5,
            crop_pad: omreid::augment::CROP_PAD,
            checkpoint_every: 5,
            ..Self::desk()
        }
    }

    /// Parses the flat format: one `key = value` per line, `#` starts a
    /// comment. A `preset` key selects the defaults the other keys override;
    /// unknown and repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", no + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() || v.contains('=') || ["[", "{"].iter().any(|b| v.starts_with(b)) {
                return Err(Error::Config(format!("line {}: expected a flat `key = value`", no + 1)));
            }
            if pairs.insert(k.to_string(), (no + 1, v.to_string())).is_some() {
                return Err(Error::Config(format!("line {}: key `{k}` repeated", no + 1)));
            }
        }
        let mut cfg = match pairs.remove("preset") {
            Some((_, v)) => Self::preset(v.parse()?),
            None => Self::desk(),
        };
        for (k, (no, v)) in &pairs {
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {no}: {}", strip(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `OMREID_SEED` and `OMREID_OUT` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(ENV_SEED) {
            self.set("seed", &v)?;
        }
        if let Ok(v) = std::env::var(ENV_OUT) {
            self.out_dir = PathBuf::from(v);
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}` has invalid value {v:?}")))
        }
        match key {
            "preset" => return Err(Error::Config("`preset` must come from the file, not an override".into())),
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "n_identities" => self.n_identities = num(key, value)?,
            "views" => self.views = num(key, value)?,
            "n_cameras" => self.n_cameras = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "image_height" => self.image_height = num(key, value)?,
            "image_width" => self.image_width = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "max_text_len" => self.max_text_len = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "text_width" => self.text_width = num(key, value)?,
            "text_heads" => self.text_heads = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "rank" => self.rank = num(key, value)?,
            "projection_dim" => self.projection_dim = num(key, value)?,
            "routing" => self.routing = num(key, value)?,
            "fm_hidden" => self.fm_hidden = num(key, value)?,
            "fm_heads" => self.fm_heads = num(key, value)?,
            "fm_mlp_ratio" => self.fm_mlp_ratio = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_ids" => self.batch_ids = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "lr_start" => self.lr_start = num(key, value)?,
            "lr_base" => self.lr_base = num(key, value)?,
            "lr_fast" => self.lr_fast = num(key, value)?,
            "augment" => self.augment = num(key, value)?,
            "crop_pad" => self.crop_pad = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every setting that influences results, one `key = value` per line in
    /// key order. Seed and output directory are left out; artifacts record
    /// the seed separately.
    pub fn canonical(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("preset", self.preset.to_string());
        kv.insert("n_identities", self.n_identities.to_string());
        kv.insert("views", self.views.to_string());
        kv.insert("n_cameras", self.n_cameras.to_string());
        kv.insert("train_fraction", format!("{:?}", self.train_fraction));
        kv.insert("image_height", self.image_height.to_string());
        kv.insert("image_width", self.image_width.to_string());
        kv.insert("patch_size", self.patch_size.to_string());
        kv.insert("vocab_size", self.vocab_size.to_string());
        kv.insert("max_text_len", self.max_text_len.to_string());
        kv.insert("layers", self.layers.to_string());
        kv.insert("width", self.width.to_string());
        kv.insert("heads", self.heads.to_string());
        kv.insert("text_width", self.text_width.to_string());
        kv.insert("text_heads", self.text_heads.to_string());
        kv.insert("mlp_ratio", self.mlp_ratio.to_string());
        kv.insert("rank", self.rank.to_string());
        kv.insert("projection_dim", self.projection_dim.to_string());
        kv.insert("routing", self.routing.to_string());
        kv.insert("fm_hidden", self.fm_hidden.to_string());
        kv.insert("fm_heads", self.fm_heads.to_string());
        kv.insert("fm_mlp_ratio", self.fm_mlp_ratio.to_string());
        kv.insert("alpha", format!("{:?}", self.alpha));
        kv.insert("tau", format!("{:?}", self.tau));
        kv.insert("epochs", self.epochs.to_string());
        kv.insert("batch_ids", self.batch_ids.to_string());
        kv.insert("warmup_epochs", format!("{:?}", self.warmup_epochs));
        kv.insert("lr_start", format!("{:?}", self.lr_start));
        kv.insert("lr_base", format!("{:?}", self.lr_base));
        kv.insert("lr_fast", format!("{:?}", self.lr_fast));
        kv.insert("augment", self.augment.to_string());
        kv.insert("crop_pad", self.crop_pad.to_string());
        kv.insert("checkpoint_every", self.checkpoint_every.to_string());
        kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::canonical`].
    pub fn digest(&self) -> String {
        omreid::dataset::sha256_hex(self.canonical().as_bytes())[..16].to_string()
    }

    pub fn n_train_identities(&self) -> usize {
        (self.n_identities as f64 * self.train_fraction).round() as usize
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_identities: self.n_identities,
            views: self.views,
            height: self.image_height,
            width: self.image_width,
            patch_size: self.patch_size,
            vocab_size: self.vocab_size,
            n_cameras: self.n_cameras,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let tower = |width: usize, heads: usize, experts: Vec<Modality>| EncoderConfig {
            layers: self.layers,
            width,
            heads,
            mlp_ratio: self.mlp_ratio,
            rank: self.rank,
            expert_modalities: experts,
            projection_dim: self.projection_dim,
            fused_qkv: true,
        };
        ModelConfig {
            tokenizer: TokenizerConfig {
                image_height: self.image_height,
                image_width: self.image_width,
                patch_size: self.patch_size,
                width: self.width,
                text_width: self.text_width,
                vocab_size: self.vocab_size,
                max_text_len: self.max_text_len,
                bos_id: synthgen::BOS,
                eos_id: synthgen::EOS,
                replicate_gray_to_rgb: false,
            },
            visual: tower(self.width, self.heads, Modality::VISUAL.to_vec()),
            text: tower(self.text_width, self.text_heads, Vec::new()),
            mixture: MixtureConfig {
                hidden: self.fm_hidden,
                heads: self.fm_heads,
                mlp_ratio: self.fm_mlp_ratio,
            },
            n_classes: self.n_train_identities(),
            routing: self.routing,
            mask_id: synthgen::MASK,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_ids: self.batch_ids,
            schedule: LrSchedule {
                lr_start: self.lr_start,
                lr_base: self.lr_base,
                lr_fast: self.lr_fast,
                warmup_epochs: self.warmup_epochs,
            },
            alpha: self.alpha,
            tau: self.tau,
            seed: self.seed,
            augment: self.augment,
            crop_pad: self.crop_pad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        let model = self.model_config();
        model.visual.validate()?;
        model.text.validate()?;
        model.mixture.validate()?;
        omreid::synthgen::split_identities(&(0..self.n_identities).collect::<Vec<_>>(), self.train_fraction, self.seed)?;
        if self.max_text_len < self.synth_config().max_text_len() {
            return Err(Error::Config(format!(
                "max_text_len {} is shorter than the longest synthetic text ({})",
                self.max_text_len,
                self.synth_config().max_text_len()
            )));
        }
        let positive = [
            ("alpha", self.alpha >= 0.0),
            ("tau", self.tau > 0.0),
            ("lr_start", self.lr_start >= 0.0),
            ("lr_base", self.lr_base > 0.0),
            ("lr_fast", self.lr_fast > 0.0),
            ("warmup_epochs", self.warmup_epochs >= 0.0),
            ("epochs", self.epochs > 0),
            ("batch_ids", self.batch_ids >= 2 && self.batch_ids <= self.n_train_identities()),
        ];
        for (key, ok) in positive {
            if !ok {
                return Err(Error::Config(format!("`{key}` is out of range")));
            }
        }
        omreid::model::Model::new(model)?;
        Ok(())
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::full().validate().unwrap();
    }

    #[test]
    fn parse_overrides_preset() {
        let cfg = RunConfig::parse("# run\npreset = desk\nepochs = 5 # short\nalpha = 0.5\n").unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.layers, 2);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in ["nope = 1", "epochs = 1\nepochs = 2", "epochs", "epochs = x", "tau = 0", "opt = {a = 1}"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn digest_ignores_seed_and_output() {
        let a = RunConfig::desk();
        let b = RunConfig {
            seed: 9,
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig { rank: 4, ..a.clone() };
        assert_ne!(a.digest(), c.digest());
        assert_eq!(RunConfig::parse(&a.canonical()).unwrap(), a);
    }
}
