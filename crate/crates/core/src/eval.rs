//! Evaluation of a trained model on a test split.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::fusion::ModalityCombo;
use crate::model::{Model, SampleEmbedding};
use crate::modality::Modality;
use crate::params::ParamStore;
use crate::protocol::{self, MetricsReport, QuerySet, QuerySetReport, RankingList};
use crate::tensor::Tensor;

pub const EMBED_CHUNK: usize = 32;
const BASELINE_TRIALS: usize = 200;

/// How a multi-modal query becomes one ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FusionMode {
    /// Rank with the feature-mixture vector of the whole combination.
    Mixture,
    /// Sum per-modality cosine similarities of the pooled vectors.
    Superposition,
}

/// Representation of a single-modality query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SingletonMode {
    Mixture,
    /// The pooled special-token output of the tower.
    Pooled,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Mixture => "fm",
            FusionMode::Superposition => "superposition",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm" => Ok(Self::Mixture),
            "superposition" => Ok(Self::Superposition),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?} (fm | superposition)"))),
        }
    }
}

impl fmt::Display for SingletonMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SingletonMode::Mixture => "fm",
            SingletonMode::Pooled => "cls",
        })
    }
}

impl FromStr for SingletonMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm" => Ok(Self::Mixture),
            "cls" => Ok(Self::Pooled),
            _ => Err(Error::Config(format!("unknown singleton mode {s:?} (fm | cls)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub fusion: FusionMode,
    pub singleton: SingletonMode,
    pub seed: u64,
    pub config_digest: String,
}

/// Embedded test split, ready for any number of query sets.
pub struct EmbeddedSplit<'a> {
    pub records: &'a [SampleRecord],
    pub embeddings: Vec<SampleEmbedding>,
    pub gallery: Vec<usize>,
    pub gallery_matrix: Tensor,
    pub gallery_ids: Vec<usize>,
}

impl<'a> EmbeddedSplit<'a> {
    pub fn new(model: &Model, store: &ParamStore, records: &'a [SampleRecord]) -> Result<Self> {
        let embeddings = model.embed(store, records, EMBED_CHUNK)?;
        let gallery: Vec<usize> = (0..records.len()).filter(|&i| records[i].modality == Modality::Rgb).collect();
        if gallery.is_empty() {
            return Err(Error::Data("test split has no RGB gallery samples".into()));
        }
        let d = embeddings[gallery[0]].pooled.len();
        let data: Vec<f64> = gallery.iter().flat_map(|&i| embeddings[i].pooled.clone()).collect();
        let gallery_matrix = Tensor::matrix(gallery.len(), d, data)?;
        let gallery_ids = gallery.iter().map(|&i| records[i].identity).collect();
        Ok(Self {
            records,
            embeddings,
            gallery,
            gallery_matrix,
            gallery_ids,
        })
    }

    fn pooled_matrix(&self, idx: &[usize]) -> Result<Tensor> {
        let d = self.gallery_matrix.cols();
        let data = idx.iter().flat_map(|&i| self.embeddings[i].pooled.clone()).collect();
        Ok(Tensor::matrix(idx.len(), d, data)?)
    }

    /// Rankings of every tuple of `set` against the gallery.
    pub fn rank_set(&self, model: &Model, store: &ParamStore, set: &QuerySet, opts: &EvalOptions) -> Result<Vec<RankingList>> {
        let combo = set.combo();
        let single = combo.len() == 1;
        if opts.fusion == FusionMode::Superposition || (single && opts.singleton == SingletonMode::Pooled) {
            let per_modality = combo
                .members()
                .iter()
                .map(|m| {
                    let idx: Vec<usize> = set.tuples.iter().map(|t| t.samples[m]).collect();
                    self.pooled_matrix(&idx)
                })
                .collect::<Result<Vec<_>>>()?;
            return protocol::superposition_search(&per_modality, &self.gallery_matrix);
        }
        let tuples: Vec<BTreeMap<Modality, &SampleEmbedding>> = set
            .tuples
            .iter()
            .map(|t| t.samples.iter().map(|(&m, &i)| (m, &self.embeddings[i])).collect())
            .collect();
        let fused = model.fuse(store, &combo, &tuples, EMBED_CHUNK)?;
        protocol::rank(&fused, &self.gallery_matrix)
    }

    pub fn query_sets(&self, seed: u64) -> Result<Vec<QuerySet>> {
        let meta: Vec<(usize, Modality)> = self.records.iter().map(|r| (r.identity, r.modality)).collect();
        protocol::build_query_sets(&meta, seed)
    }
}

/// Builds all query sets, ranks them and scores them.
pub fn evaluate(model: &Model, store: &ParamStore, records: &[SampleRecord], opts: &EvalOptions) -> Result<MetricsReport> {
    let split = EmbeddedSplit::new(model, store, records)?;
    let sets = split.query_sets(opts.seed)?;
    let mut reports = Vec::with_capacity(sets.len());
    for set in &sets {
        let rankings = split.rank_set(model, store, set, opts)?;
        let query_ids: Vec<usize> = set.tuples.iter().map(|t| t.identity).collect();
        let scores = protocol::cmc_map_minp(&rankings, &query_ids, &split.gallery_ids)?;
        reports.push(QuerySetReport {
            name: set.name(),
            mode: set.mode,
            scores,
        });
    }
    let mm1_ids: Vec<usize> = sets
        .iter()
        .filter(|s| s.mode == 1)
        .flat_map(|s| s.tuples.iter().map(|t| t.identity))
        .collect();
    let baseline = protocol::random_baseline_map(&mm1_ids, &split.gallery_ids, BASELINE_TRIALS, opts.seed)?;
    Ok(MetricsReport {
        seed: opts.seed,
        config_digest: opts.config_digest.clone(),
        fusion: opts.fusion.to_string(),
        singleton: opts.singleton.to_string(),
        gallery_size: split.gallery.len(),
        random_baseline_map: baseline,
        modes: protocol::mode_averages(&reports),
        query_sets: reports,
    })
}

/// Top-`k` gallery entries of one query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopK {
    pub query: BTreeMap<String, usize>,
    pub identity: usize,
    pub gallery_ids: Vec<usize>,
    pub gallery_samples: Vec<usize>,
    pub affinities: Vec<f64>,
    pub hits: Vec<bool>,
}

/// Ranked lists for the query set whose primary is the first member given
/// and whose supplements are the rest.
pub fn rank_query(
    model: &Model,
    store: &ParamStore,
    records: &[SampleRecord],
    members: &[Modality],
    k: usize,
    opts: &EvalOptions,
) -> Result<Vec<TopK>> {
    let combo = ModalityCombo::new(members)?;
    let split = EmbeddedSplit::new(model, store, records)?;
    let set = split
        .query_sets(opts.seed)?
        .into_iter()
        .find(|s| s.primary == members[0] && s.combo() == combo)
        .ok_or_else(|| Error::Invalid(format!("no query set for {combo}")))?;
    let rankings = split.rank_set(model, store, &set, opts)?;
    Ok(rankings
        .iter()
        .zip(&set.tuples)
        .map(|(r, t)| {
            let top: Vec<usize> = r.order.iter().take(k).copied().collect();
            TopK {
                query: t.samples.iter().map(|(m, &i)| (m.code().to_string(), i)).collect(),
                identity: t.identity,
                gallery_ids: top.iter().map(|&g| split.gallery_ids[g]).collect(),
                gallery_samples: top.iter().map(|&g| split.gallery[g]).collect(),
                affinities: r.affinities.iter().take(k).copied().collect(),
                hits: top.iter().map(|&g| split.gallery_ids[g] == t.identity).collect(),
            }
        })
        .collect())
}
