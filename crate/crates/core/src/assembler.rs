//! Per-modality tokenizers.
//!
//! Each visual modality owns a patch projection, a layer norm, a class token
//! and a positional table; nothing is shared between them. Text goes through
//! a vocabulary table plus positions. Every batch carries the control signal
//! that selects its expert in the routed encoder.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::modality::Modality;
use crate::nn;
use crate::params::{ParamStore, Session, INIT_STD};
use crate::tensor::{Axis, Tensor, Var};

/// Pixel standardization applied before the patch projection.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct VisualSample {
    pub modality: Modality,
    pub image: Image,
    pub identity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextSample {
    pub token_ids: Vec<usize>,
    pub identity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Visual(VisualSample),
    Text(TextSample),
}

impl Sample {
    pub fn modality(&self) -> Modality {
        match self {
            Sample::Visual(v) => v.modality,
            Sample::Text(_) => Modality::Text,
        }
    }

    pub fn identity(&self) -> usize {
        match self {
            Sample::Visual(v) => v.identity,
            Sample::Text(t) => t.identity,
        }
    }
}

/// Binary expert-activation signal for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlSignal {
    pub modality: Modality,
    pub active: bool,
}

impl ControlSignal {
    pub fn on(modality: Modality) -> Self {
        Self {
            modality,
            active: true,
        }
    }

    pub fn off(modality: Modality) -> Self {
        Self {
            modality,
            active: false,
        }
    }
}

/// Token embeddings of one single-modality group, rows stacked sample after
/// sample; `lengths[i]` is the token count of sample `i`.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub embeddings: Var,
    pub control: ControlSignal,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    /// Visual token width `D_e`; must equal the visual tower width.
    pub width: usize,
    /// Text token width; must equal the text tower width.
    pub text_width: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub bos_id: usize,
    pub eos_id: usize,
    /// Feed 1-channel modalities to a 3-channel projection by replication.
    pub replicate_gray_to_rgb: bool,
}

/// `(H/P)·(W/P) + 1` tokens, the extra one being the class token.
pub fn visual_token_count(height: usize, width: usize, patch: usize) -> Result<usize> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Invalid(format!(
            "image {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok((height / patch) * (width / patch) + 1)
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        visual_token_count(self.image_height, self.image_width, self.patch_size)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.bos_id >= self.vocab_size || self.eos_id >= self.vocab_size || self.bos_id == self.eos_id {
            return Err(Error::Config(format!(
                "flag ids {}/{} invalid for vocabulary of {}",
                self.bos_id, self.eos_id, self.vocab_size
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must leave room for both flags".into()));
        }
        Ok(())
    }

    pub fn visual_tokens(&self) -> usize {
        visual_token_count(self.image_height, self.image_width, self.patch_size).unwrap_or(0)
    }

    /// Input length of the patch projection for modality `m`.
    pub fn patch_dim(&self, m: Modality) -> usize {
        let ch = if self.replicate_gray_to_rgb { 3 } else { m.channels() };
        self.patch_size * self.patch_size * ch
    }
}

fn prefix(m: Modality) -> String {
    format!("tok.{}", m.code())
}

/// The five tokenizers.
#[derive(Debug, Clone)]
pub struct Assembler {
    pub cfg: TokenizerConfig,
}

impl Assembler {
    pub fn new(cfg: TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let d = self.cfg.width;
        for m in Modality::VISUAL {
            let p = prefix(m);
            let pdim = self.cfg.patch_dim(m);
            store.init_normal(seed, &format!("{p}.proj"), &[pdim, d], nn::fan_in_std(pdim));
            nn::init_layer_norm(store, &format!("{p}.ln"), d);
            store.init_normal(seed, &format!("{p}.cls"), &[1, d], nn::fan_in_std(d));
            store.init_normal(seed, &format!("{p}.pos"), &[self.cfg.visual_tokens(), d], nn::fan_in_std(d));
        }
        let dt = self.cfg.text_width;
        store.init_normal(seed, "tok.T.embed", &[self.cfg.vocab_size, dt], INIT_STD);
        store.init_normal(seed, "tok.T.pos", &[self.cfg.max_text_len, dt], INIT_STD / 2.0);
    }

    /// Flattened patches of one image in row-major patch order, each patch
    /// laid out as (row, column, channel). Pixels are standardized with
    /// [`PIXEL_MEAN`] and [`PIXEL_STD`].
    pub fn patches(&self, image: &Image) -> Vec<f64> {
        let img = if self.cfg.replicate_gray_to_rgb { image.to_rgb() } else { image.clone() };
        let p = self.cfg.patch_size;
        let mut out = Vec::with_capacity(img.data().len());
        for gy in 0..img.height() / p {
            for gx in 0..img.width() / p {
                for py in 0..p {
                    for px in 0..p {
                        let px = img.pixel(gy * p + py, gx * p + px);
                        out.extend(px.iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
                    }
                }
            }
        }
        out
    }

    /// Projects patches, normalizes them, prepends the class token and adds
    /// positions. All samples must share one visual modality.
    pub fn tokenize_visual(&self, s: &mut Session, samples: &[&VisualSample]) -> Result<TokenBatch> {
        let Some(first) = samples.first() else {
            return Err(Error::Invalid("empty visual batch".into()));
        };
        let m = first.modality;
        if !m.is_visual() {
            return Err(Error::Invalid(format!("modality {m} is not visual")));
        }
        let (h, w) = (self.cfg.image_height, self.cfg.image_width);
        let n = visual_token_count(h, w, self.cfg.patch_size)?;
        let np = n - 1;
        let pdim = self.cfg.patch_dim(m);
        let mut raw = Vec::with_capacity(samples.len() * np * pdim);
        for sample in samples {
            if sample.modality != m {
                return Err(Error::Invalid(format!(
                    "mixed modalities {m} and {} in one visual batch",
                    sample.modality
                )));
            }
            let img = &sample.image;
            if img.height() != h || img.width() != w || img.channels() != m.channels() {
                return Err(Error::Invalid(format!(
                    "{m} image is {}x{}x{}, expected {h}x{w}x{}",
                    img.height(),
                    img.width(),
                    img.channels(),
                    m.channels()
                )));
            }
            raw.extend(self.patches(img));
        }
        let p = prefix(m);
        let patches = s.constant(Tensor::matrix(samples.len() * np, pdim, raw)?);
        let proj = s.param(&format!("{p}.proj"))?;
        let x = s.graph.matmul(patches, proj)?;
        let x = nn::layer_norm(s, &format!("{p}.ln"), x)?;
        let cls = s.param(&format!("{p}.cls"))?;
        let with_cls = s.graph.concat(&[cls, x], Axis::Rows)?;
        let mut order = Vec::with_capacity(samples.len() * n);
        for b in 0..samples.len() {
            order.push(0);
            order.extend((0..np).map(|j| 1 + b * np + j));
        }
        let tokens = s.graph.gather_rows(with_cls, &order)?;
        let pos = s.param(&format!("{p}.pos"))?;
        let pos_ids: Vec<usize> = (0..samples.len()).flat_map(|_| 0..n).collect();
        let pos = s.graph.gather_rows(pos, &pos_ids)?;
        let embeddings = s.graph.add(tokens, pos)?;
        Ok(TokenBatch {
            embeddings,
            control: ControlSignal::on(m),
            lengths: vec![n; samples.len()],
        })
    }

    pub fn check_text(&self, sample: &TextSample) -> Result<()> {
        let ids = &sample.token_ids;
        if ids.len() < 2 || ids.len() > self.cfg.max_text_len {
            return Err(Error::Invalid(format!(
                "text of {} tokens outside [2, {}]",
                ids.len(),
                self.cfg.max_text_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        if ids[0] != self.cfg.bos_id || ids[ids.len() - 1] != self.cfg.eos_id {
            return Err(Error::Invalid("text must start with the begin flag and end with the end flag".into()));
        }
        Ok(())
    }

    /// Vocabulary lookup plus positions. Over-long sequences are rejected.
    pub fn tokenize_text(&self, s: &mut Session, samples: &[&TextSample]) -> Result<TokenBatch> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty text batch".into()));
        }
        let mut ids = Vec::new();
        let mut pos_ids = Vec::new();
        let mut lengths = Vec::with_capacity(samples.len());
        for sample in samples {
            self.check_text(sample)?;
            ids.extend_from_slice(&sample.token_ids);
            pos_ids.extend(0..sample.token_ids.len());
            lengths.push(sample.token_ids.len());
        }
        let table = s.param("tok.T.embed")?;
        let x = s.graph.embedding(table, &ids)?;
        let pos = s.param("tok.T.pos")?;
        let pos = s.graph.gather_rows(pos, &pos_ids)?;
        let embeddings = s.graph.add(x, pos)?;
        Ok(TokenBatch {
            embeddings,
            control: ControlSignal::on(Modality::Text),
            lengths,
        })
    }

    /// Tokenizes a mixed batch, one [`TokenBatch`] per modality present.
    pub fn assemble(&self, s: &mut Session, samples: &[Sample]) -> Result<Vec<(TokenBatch, Vec<usize>)>> {
        let mut out = Vec::new();
        for (m, idx) in group_by_modality(samples)? {
            let batch = if m.is_visual() {
                let vis: Vec<&VisualSample> = idx
                    .iter()
                    .map(|&i| match &samples[i] {
                        Sample::Visual(v) => v,
                        Sample::Text(_) => unreachable!("grouped by modality"),
                    })
                    .collect();
                self.tokenize_visual(s, &vis)?
            } else {
                let txt: Vec<&TextSample> = idx
                    .iter()
                    .map(|&i| match &samples[i] {
                        Sample::Text(t) => t,
                        Sample::Visual(_) => unreachable!("grouped by modality"),
                    })
                    .collect();
                self.tokenize_text(s, &txt)?
            };
            out.push((batch, idx));
        }
        Ok(out)
    }
}

/// Sample indices per modality, groups in canonical modality order and
/// indices in input order.
pub fn group_by_modality(samples: &[Sample]) -> Result<Vec<(Modality, Vec<usize>)>> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut groups: Vec<(Modality, Vec<usize>)> = Vec::new();
    for m in Modality::ALL {
        let idx: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.modality() == m)
            .map(|(i, _)| i)
            .collect();
        if !idx.is_empty() {
            groups.push((m, idx));
        }
    }
    Ok(groups)
}
