//! Training loop: identity-balanced batches of full five-modality tuples,
//! augmentation from keyed streams, Adam with two learning-rate groups.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::assembler::Sample;
use crate::augment::{augment_image, augment_text};
use crate::dataset::{Payload, SampleRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::modality::Modality;
use crate::optim::{param_group, Adam, LrSchedule};
use crate::params::{ParamStore, Session};
use crate::rng;

const TAG_ORDER: u64 = 21;
const TAG_PICK: u64 = 22;
const TAG_AUG: u64 = 23;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch, one tuple each.
    pub batch_ids: usize,
    pub schedule: LrSchedule,
    pub alpha: f64,
    pub tau: f64,
    pub seed: u64,
    pub augment: bool,
    /// Padding of the random crop, in pixels.
    pub crop_pad: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr_base: f64,
    pub lr_fast: f64,
    pub sdm: f64,
    pub ic: f64,
    pub loss: f64,
}

/// Training samples indexed by identity and modality, with class labels
/// assigned in ascending identity order.
#[derive(Debug, Clone)]
pub struct TrainPool<'a> {
    pub labels: BTreeMap<usize, usize>,
    pub views: usize,
    by_key: BTreeMap<(usize, Modality), Vec<&'a SampleRecord>>,
}

impl<'a> TrainPool<'a> {
    pub fn new(samples: &'a [SampleRecord]) -> Result<Self> {
        let mut by_key: BTreeMap<(usize, Modality), Vec<&SampleRecord>> = BTreeMap::new();
        for s in samples {
            by_key.entry((s.identity, s.modality)).or_default().push(s);
        }
        let ids: BTreeSet<usize> = samples.iter().map(|s| s.identity).collect();
        for &id in &ids {
            for m in Modality::ALL {
                if !by_key.contains_key(&(id, m)) {
                    return Err(Error::Data(format!("training identity {id} has no {m} sample")));
                }
            }
        }
        if ids.len() < 2 {
            return Err(Error::Data("training needs at least 2 identities".into()));
        }
        let views = by_key.values().map(Vec::len).max().unwrap_or(1);
        let labels = ids.iter().enumerate().map(|(label, &id)| (id, label)).collect();
        Ok(Self { labels, views, by_key })
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    fn ids(&self) -> Vec<usize> {
        self.labels.keys().copied().collect()
    }
}

/// Identity batches of one epoch: `views` shuffled passes over the
/// identities, cut into groups of `p`. A short final group is topped up
/// from the start of its pass.
pub fn epoch_batches(ids: &[usize], p: usize, views: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let p = p.min(ids.len()).max(1);
    let mut out = Vec::new();
    for round in 0..views {
        let mut order = ids.to_vec();
        order.shuffle(&mut rng::stream(&[seed, TAG_ORDER, epoch as u64, round as u64]));
        for start in (0..order.len()).step_by(p) {
            let mut batch: Vec<usize> = order[start..(start + p).min(order.len())].to_vec();
            let mut k = 0;
            while batch.len() < p {
                batch.push(order[k]);
                k += 1;
            }
            out.push(batch);
        }
    }
    out
}

pub fn steps_per_epoch(n_ids: usize, p: usize, views: usize) -> usize {
    let p = p.min(n_ids).max(1);
    views * n_ids.div_ceil(p)
}

/// Assembles one batch: a random view per identity and modality, then
/// augmentation.
pub fn make_batch(model: &Model, pool: &TrainPool, ids: &[usize], cfg: &TrainConfig, global_step: usize) -> (BTreeMap<Modality, Vec<Sample>>, Vec<usize>) {
    let mut batch: BTreeMap<Modality, Vec<Sample>> = BTreeMap::new();
    let labels = ids.iter().map(|id| pool.labels[id]).collect();
    for &id in ids {
        for m in Modality::ALL {
            let key = [cfg.seed, TAG_PICK, global_step as u64, id as u64, m.index() as u64];
            let options = &pool.by_key[&(id, m)];
            let rec = options[rng::stream(&key).random_range(0..options.len())];
            let mut aug = rng::stream(&[cfg.seed, TAG_AUG, global_step as u64, id as u64, m.index() as u64]);
            let payload = match (&rec.payload, cfg.augment) {
                (Payload::Image(img), true) => Payload::Image(augment_image(img, cfg.crop_pad, &mut aug)),
                (Payload::Text(t), true) => Payload::Text(augment_text(t, model.text_vocab(), &mut aug)),
                (p, false) => p.clone(),
            };
            let r = SampleRecord { payload, ..rec.clone() };
            batch.entry(m).or_default().push(crate::model::to_sample(&r, pool.labels[&id]));
        }
    }
    (batch, labels)
}

/// One optimizer step at fractional epoch `epoch_pos`.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    batch: &BTreeMap<Modality, Vec<Sample>>,
    labels: &[usize],
    cfg: &TrainConfig,
    epoch_pos: f64,
) -> Result<crate::objective::LossReport> {
    let (grads, report) = {
        let mut s = Session::new(store);
        let (loss, report) = model.objective(&mut s, batch, labels, cfg.alpha, cfg.tau)?;
        (s.backward(loss)?, report)
    };
    for (name, g) in &grads {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    adam.step(store, &grads, |name| cfg.schedule.rate(epoch_pos, param_group(name)))?;
    Ok(report)
}

/// Runs `cfg.epochs` epochs. `on_step` sees every step record;
/// `on_epoch` runs after each finished epoch (1-based) and may persist state.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    samples: &[SampleRecord],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
    mut on_epoch: impl FnMut(usize, &ParamStore, &Adam) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let pool = TrainPool::new(samples)?;
    if pool.n_classes() != model.cfg.n_classes {
        return Err(Error::Config(format!(
            "model classifies {} identities, training split has {}",
            model.cfg.n_classes,
            pool.n_classes()
        )));
    }
    let ids = pool.ids();
    let per_epoch = steps_per_epoch(ids.len(), cfg.batch_ids, pool.views);
    let mut history = Vec::with_capacity(cfg.epochs * per_epoch);
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        for (k, batch_ids) in epoch_batches(&ids, cfg.batch_ids, pool.views, cfg.seed, epoch).iter().enumerate() {
            let pos = epoch as f64 + k as f64 / per_epoch as f64;
            let (batch, labels) = make_batch(model, &pool, batch_ids, cfg, global);
            let report = train_step(model, store, adam, &batch, &labels, cfg, pos)?;
            let rec = StepRecord {
                epoch,
                step: global,
                lr_base: cfg.schedule.base(pos),
                lr_fast: cfg.schedule.fast(pos),
                sdm: report.sdm_total,
                ic: report.ic_total,
                loss: report.combined,
            };
            on_step(&rec);
            history.push(rec);
            global += 1;
        }
        on_epoch(epoch + 1, store, adam)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_have_constant_size_and_distinct_ids() {
        let ids: Vec<usize> = (0..20).collect();
        let batches = epoch_batches(&ids, 16, 4, 3, 0);
        assert_eq!(batches.len(), steps_per_epoch(20, 16, 4));
        assert_eq!(batches.len(), 8);
        for b in &batches {
            assert_eq!(b.len(), 16);
            let set: BTreeSet<usize> = b.iter().copied().collect();
            assert_eq!(set.len(), 16);
        }
        assert_eq!(batches, epoch_batches(&ids, 16, 4, 3, 0));
        assert_ne!(batches, epoch_batches(&ids, 16, 4, 3, 1));
    }
}
