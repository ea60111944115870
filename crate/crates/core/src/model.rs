//! The full network: tokenizers, the two towers, the feature mixture and
//! the shared identity classifier.

use std::collections::BTreeMap;

use crate::assembler::{Assembler, Sample, TextSample, TokenizerConfig, VisualSample};
use crate::augment::TextVocab;
use crate::dataset::{Payload, SampleRecord};
use crate::encoder::{EncoderConfig, Encoded, TowerSet};
use crate::error::{Error, Result};
use crate::fusion::{FeatureMixture, MemberSequences, MixtureConfig, ModalityCombo};
use crate::modality::Modality;
use crate::objective::{self, BatchPack, LossReport};
use crate::params::{ParamStore, Session};
use crate::tensor::{Axis, Tensor, Var};

pub const CLASSIFIER: &str = "cls";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub visual: EncoderConfig,
    pub text: EncoderConfig,
    pub mixture: MixtureConfig,
    /// Number of training identities seen by the classifier.
    pub n_classes: usize,
    /// Expert routing on the visual tower.
    pub routing: bool,
    pub mask_id: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub assembler: Assembler,
    pub towers: TowerSet,
    pub mixture: FeatureMixture,
}

/// Converts a stored record into an assembler sample labelled `identity`.
pub fn to_sample(rec: &SampleRecord, identity: usize) -> Sample {
    match &rec.payload {
        Payload::Image(img) => Sample::Visual(VisualSample {
            modality: rec.modality,
            image: img.clone(),
            identity,
        }),
        Payload::Text(ids) => Sample::Text(TextSample {
            token_ids: ids.clone(),
            identity,
        }),
    }
}

/// Encoded sample kept for evaluation: pooled vector and token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEmbedding {
    pub pooled: Vec<f64>,
    pub sequence: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.tokenizer.width != cfg.visual.width || cfg.tokenizer.text_width != cfg.text.width {
            return Err(Error::Config(format!(
                "token widths {}/{} must match tower widths {}/{}",
                cfg.tokenizer.width, cfg.tokenizer.text_width, cfg.visual.width, cfg.text.width
            )));
        }
        if cfg.n_classes < 2 {
            return Err(Error::Config("need at least 2 training identities".into()));
        }
        let assembler = Assembler::new(cfg.tokenizer.clone())?;
        let towers = TowerSet::new(cfg.visual.clone(), cfg.text.clone(), cfg.routing)?;
        let mixture = FeatureMixture::new(cfg.mixture.clone(), towers.projection_dim())?;
        Ok(Self {
            cfg,
            assembler,
            towers,
            mixture,
        })
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.assembler.init_params(&mut store, seed);
        self.towers.init_params(&mut store, seed);
        self.mixture.init_params(&mut store, seed);
        objective::init_classifier(&mut store, seed, CLASSIFIER, self.towers.projection_dim(), self.cfg.n_classes);
        store
    }

    pub fn text_vocab(&self) -> TextVocab {
        TextVocab {
            size: self.cfg.tokenizer.vocab_size,
            mask_id: self.cfg.mask_id,
            first_word: self.cfg.mask_id + 1,
        }
    }

    /// Tokenizes and encodes samples of one modality.
    pub fn encode(&self, s: &mut Session, samples: &[Sample]) -> Result<Encoded> {
        let groups = self.assembler.assemble(s, samples)?;
        if groups.len() != 1 {
            return Err(Error::Invalid("encode expects samples of a single modality".into()));
        }
        self.towers.encode(s, &groups[0].0)
    }

    /// One training objective evaluation. `batch[m][i]` is the modality-`m`
    /// sample of tuple `i`; `labels[i]` its class.
    pub fn objective(&self, s: &mut Session, batch: &BTreeMap<Modality, Vec<Sample>>, labels: &[usize], alpha: f64, tau: f64) -> Result<(Var, LossReport)> {
        let mut encoded = BTreeMap::new();
        for m in Modality::ALL {
            let samples = batch
                .get(&m)
                .ok_or_else(|| Error::Invalid(format!("training batch lacks {m} samples")))?;
            if samples.len() != labels.len() {
                return Err(Error::Invalid(format!("{m} has {} samples for {} labels", samples.len(), labels.len())));
            }
            encoded.insert(m, self.encode(s, samples)?);
        }
        let gallery = encoded[&Modality::Rgb].pooled;
        let members: BTreeMap<Modality, MemberSequences> = Modality::QUERY
            .iter()
            .map(|&m| {
                let e = &encoded[&m];
                (m, MemberSequences { sequence: e.sequence, lengths: e.lengths.clone() })
            })
            .collect();
        let fused = self.mixture.fuse_all(s, &members)?;
        let pack = BatchPack {
            gallery,
            fused,
            labels: labels.to_vec(),
        };
        objective::total_objective(s, &pack, alpha, tau, CLASSIFIER)
    }

    /// Encodes every record with frozen weights, `chunk` samples of one
    /// modality at a time. Output order follows `records`.
    pub fn embed(&self, store: &ParamStore, records: &[SampleRecord], chunk: usize) -> Result<Vec<SampleEmbedding>> {
        let mut out: Vec<Option<SampleEmbedding>> = vec![None; records.len()];
        for m in Modality::ALL {
            let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].modality == m).collect();
            for part in idx.chunks(chunk.max(1)) {
                let samples: Vec<Sample> = part.iter().map(|&i| to_sample(&records[i], records[i].identity)).collect();
                let mut s = Session::frozen(store);
                let e = self.encode(&mut s, &samples)?;
                let seq = s.graph.value(e.sequence);
                let pooled = s.graph.value(e.pooled);
                let mut offset = 0;
                for (k, &i) in part.iter().enumerate() {
                    let len = e.lengths[k];
                    let rows: Vec<f64> = seq.data()[offset * seq.cols()..(offset + len) * seq.cols()].to_vec();
                    out[i] = Some(SampleEmbedding {
                        pooled: pooled.row(k).to_vec(),
                        sequence: Tensor::matrix(len, seq.cols(), rows)?,
                    });
                    offset += len;
                }
            }
        }
        Ok(out.into_iter().map(|e| e.expect("every record embedded")).collect())
    }

    /// Fused vectors for a list of tuples, each mapping the combo's members
    /// to sample embeddings. Returns a `tuples × D` matrix.
    pub fn fuse(&self, store: &ParamStore, combo: &ModalityCombo, tuples: &[BTreeMap<Modality, &SampleEmbedding>], chunk: usize) -> Result<Tensor> {
        let d = self.towers.projection_dim();
        let mut data = Vec::with_capacity(tuples.len() * d);
        for part in tuples.chunks(chunk.max(1)) {
            let mut s = Session::frozen(store);
            let mut members = BTreeMap::new();
            for &m in combo.members() {
                let mut rows = Vec::new();
                let mut lengths = Vec::with_capacity(part.len());
                for t in part {
                    let e = t.get(&m).ok_or_else(|| Error::Invalid(format!("query tuple lacks {m} for {combo}")))?;
                    rows.push(s.constant(e.sequence.clone()));
                    lengths.push(e.sequence.rows());
                }
                let sequence = if rows.len() == 1 { rows[0] } else { s.graph.concat(&rows, Axis::Rows)? };
                members.insert(m, MemberSequences { sequence, lengths });
            }
            let v = self.mixture.fuse(&mut s, &members, combo)?;
            data.extend_from_slice(s.graph.value(v).data());
        }
        Ok(Tensor::matrix(tuples.len(), d, data)?)
    }
}
