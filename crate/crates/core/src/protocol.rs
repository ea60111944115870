//! Evaluation protocol: query-set construction for the four search modes,
//! cosine ranking against the RGB gallery, CMC / mAP / mINP, the
//! similarity-superposition baseline and the text entropy statistic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ModalityCombo;
use crate::modality::Modality;
use crate::rng;
use crate::tensor::Tensor;

const TAG_QUERY: u64 = 11;
const TAG_BASELINE: u64 = 12;
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

/// One query: sample indices per modality, all of one identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTuple {
    pub samples: BTreeMap<Modality, usize>,
    pub identity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySet {
    /// Number of modalities per query, 1 to 4.
    pub mode: usize,
    pub primary: Modality,
    pub supplements: Vec<Modality>,
    pub tuples: Vec<QueryTuple>,
}

impl QuerySet {
    /// Primary first, then supplements, e.g. `T+I+C`.
    pub fn name(&self) -> String {
        std::iter::once(self.primary)
            .chain(self.supplements.iter().copied())
            .map(|m| m.code().to_string())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn combo(&self) -> ModalityCombo {
        let mut members = vec![self.primary];
        members.extend(&self.supplements);
        ModalityCombo::new(&members).expect("query set modalities are distinct query modalities")
    }
}

fn subsets(items: &[Modality], k: usize) -> Vec<Vec<Modality>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, &m) in items.iter().enumerate() {
        for mut rest in subsets(&items[i + 1..], k - 1) {
            rest.insert(0, m);
            out.push(rest);
        }
    }
    out
}

/// `(primary, supplements)` pairs of every query set, modes 1 to 4.
pub fn query_set_layout() -> Vec<(usize, Modality, Vec<Modality>)> {
    let mut out = Vec::new();
    for mode in 1..=Modality::QUERY.len() {
        for primary in Modality::QUERY {
            let others: Vec<Modality> = Modality::QUERY.iter().copied().filter(|&m| m != primary).collect();
            for supp in subsets(&others, mode - 1) {
                out.push((mode, primary, supp));
            }
        }
    }
    out
}

/// Builds the 4 + 12 + 12 + 4 query sets over `samples`, given as
/// `(identity, modality)` pairs. Every sample of the primary modality opens
/// one tuple; each supplement is drawn uniformly from the same identity's
/// samples of that modality.
pub fn build_query_sets(samples: &[(usize, Modality)], seed: u64) -> Result<Vec<QuerySet>> {
    let mut by_key: BTreeMap<(usize, Modality), Vec<usize>> = BTreeMap::new();
    for (i, &(id, m)) in samples.iter().enumerate() {
        by_key.entry((id, m)).or_default().push(i);
    }
    let identities: Vec<usize> = {
        let mut v: Vec<usize> = samples.iter().map(|s| s.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    for &id in &identities {
        for m in Modality::ALL {
            if !by_key.contains_key(&(id, m)) {
                return Err(Error::Data(format!("identity {id} has no {m} sample")));
            }
        }
    }
    let mut sets = Vec::new();
    for (mode, primary, supplements) in query_set_layout() {
        let mask = supplements.iter().fold(0u64, |acc, m| acc | 1 << m.index());
        let mut tuples = Vec::new();
        for (i, &(id, m)) in samples.iter().enumerate() {
            if m != primary {
                continue;
            }
            let mut r = rng::stream(&[seed, TAG_QUERY, primary.index() as u64, mask, i as u64]);
            let mut chosen = BTreeMap::from([(primary, i)]);
            for &s in &supplements {
                let pool = &by_key[&(id, s)];
                chosen.insert(s, *pool.choose(&mut r).expect("pool is nonempty"));
            }
            tuples.push(QueryTuple {
                samples: chosen,
                identity: id,
            });
        }
        sets.push(QuerySet {
            mode,
            primary,
            supplements,
            tuples,
        });
    }
    Ok(sets)
}

/// Gallery indices by descending affinity; ties go to the lower index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingList {
    pub query: usize,
    pub order: Vec<usize>,
    /// Affinity of each entry of `order`.
    pub affinities: Vec<f64>,
}

fn unit_rows(t: &Tensor, what: &str) -> Result<Vec<Vec<f64>>> {
    let (r, c) = t.dims2()?;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(r);
    for i in 0..r {
        let row = t.row(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Numeric(format!("{what} row {i} has norm {n}; cosine is undefined")));
        }
        out.push(row.iter().map(|v| v / n).collect());
        debug_assert_eq!(out[i].len(), c);
    }
    Ok(out)
}

/// Cosine similarity of every query row against every gallery row.
pub fn cosine_matrix(queries: &Tensor, gallery: &Tensor) -> Result<Vec<Vec<f64>>> {
    if gallery.rows() == 0 {
        return Err(Error::Invalid("empty gallery".into()));
    }
    if queries.cols() != gallery.cols() {
        return Err(Error::Invalid(format!(
            "query width {} does not match gallery width {}",
            queries.cols(),
            gallery.cols()
        )));
    }
    let q = unit_rows(queries, "query")?;
    let g = unit_rows(gallery, "gallery")?;
    Ok(q.iter()
        .map(|qr| g.iter().map(|gr| qr.iter().zip(gr).map(|(a, b)| a * b).sum()).collect())
        .collect())
}

/// Sorts one similarity row into a ranking list.
pub fn rank_row(query: usize, sims: &[f64]) -> RankingList {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let affinities = order.iter().map(|&j| sims[j]).collect();
    RankingList {
        query,
        order,
        affinities,
    }
}

pub fn rank(queries: &Tensor, gallery: &Tensor) -> Result<Vec<RankingList>> {
    let sims = cosine_matrix(queries, gallery)?;
    Ok(sims.iter().enumerate().map(|(i, row)| rank_row(i, row)).collect())
}

/// Sums the per-modality cosine matrices elementwise, then ranks.
pub fn superposition_search(per_modality: &[Tensor], gallery: &Tensor) -> Result<Vec<RankingList>> {
    let Some((first, rest)) = per_modality.split_first() else {
        return Err(Error::Invalid("superposition needs at least one modality".into()));
    };
    let mut total = cosine_matrix(first, gallery)?;
    for q in rest {
        if q.rows() != first.rows() {
            return Err(Error::Invalid("modalities disagree on the number of queries".into()));
        }
        let s = cosine_matrix(q, gallery)?;
        for (tr, sr) in total.iter_mut().zip(&s) {
            tr.iter_mut().zip(sr).for_each(|(a, b)| *a += b);
        }
    }
    Ok(total.iter().enumerate().map(|(i, row)| rank_row(i, row)).collect())
}

/// Retrieval scores of one query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// CMC at ranks 1, 5 and 10.
    pub cmc: [f64; 3],
    pub map: f64,
    pub minp: f64,
    pub queries: usize,
}

/// CMC@k, mAP and mINP. Precision is taken at each relevant item's rank
/// without interpolation; INP is `#relevant / rank of the last relevant`.
pub fn cmc_map_minp(rankings: &[RankingList], query_ids: &[usize], gallery_ids: &[usize]) -> Result<Scores> {
    if rankings.is_empty() {
        return Err(Error::Invalid("no rankings to score".into()));
    }
    let mut hits = [0usize; 3];
    let (mut ap_sum, mut inp_sum) = (0.0, 0.0);
    for r in rankings {
        let qid = *query_ids
            .get(r.query)
            .ok_or_else(|| Error::Invalid(format!("ranking refers to unknown query {}", r.query)))?;
        let relevant = gallery_ids.iter().filter(|&&g| g == qid).count();
        if relevant == 0 {
            return Err(Error::Data(format!("query {} (identity {qid}) has no gallery match", r.query)));
        }
        if r.order.len() != gallery_ids.len() {
            return Err(Error::Invalid("ranking length differs from gallery size".into()));
        }
        let mut found = 0usize;
        let mut first = None;
        let mut last = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &g) in r.order.iter().enumerate() {
            if gallery_ids[g] == qid {
                found += 1;
                first.get_or_insert(pos + 1);
                last = pos + 1;
                precision_sum += found as f64 / (pos + 1) as f64;
            }
        }
        let first = first.expect("at least one relevant item");
        for (h, &k) in hits.iter_mut().zip(&CMC_RANKS) {
            if first <= k {
                *h += 1;
            }
        }
        ap_sum += precision_sum / relevant as f64;
        inp_sum += relevant as f64 / last as f64;
    }
    let n = rankings.len() as f64;
    Ok(Scores {
        cmc: hits.map(|h| h as f64 / n),
        map: ap_sum / n,
        minp: inp_sum / n,
        queries: rankings.len(),
    })
}

/// Mean AP of uniformly random rankings, estimated from `trials` shuffles
/// per query.
pub fn random_baseline_map(query_ids: &[usize], gallery_ids: &[usize], trials: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut r = rng::stream(&[seed, TAG_BASELINE]);
    for _ in 0..trials {
        let rankings: Vec<RankingList> = (0..query_ids.len())
            .map(|q| {
                let mut order: Vec<usize> = (0..gallery_ids.len()).collect();
                order.shuffle(&mut r);
                RankingList {
                    query: q,
                    affinities: vec![0.0; order.len()],
                    order,
                }
            })
            .collect();
        total += cmc_map_minp(&rankings, query_ids, gallery_ids)?.map;
    }
    Ok(total / trials as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySetReport {
    pub name: String,
    pub mode: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAverage {
    pub mode: String,
    pub sets: usize,
    pub cmc: [f64; 3],
    pub map: f64,
    pub minp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_digest: String,
    pub fusion: String,
    pub singleton: String,
    pub gallery_size: usize,
    pub random_baseline_map: f64,
    pub query_sets: Vec<QuerySetReport>,
    pub modes: Vec<ModeAverage>,
}

/// Arithmetic means over the query sets of each mode.
pub fn mode_averages(sets: &[QuerySetReport]) -> Vec<ModeAverage> {
    let mut out = Vec::new();
    for mode in 1..=Modality::QUERY.len() {
        let members: Vec<&QuerySetReport> = sets.iter().filter(|s| s.mode == mode).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mut cmc = [0.0; 3];
        for s in &members {
            cmc.iter_mut().zip(&s.scores.cmc).for_each(|(a, b)| *a += b);
        }
        out.push(ModeAverage {
            mode: format!("MM-{mode}"),
            sets: members.len(),
            cmc: cmc.map(|v| v / n),
            map: members.iter().map(|s| s.scores.map).sum::<f64>() / n,
            minp: members.iter().map(|s| s.scores.minp).sum::<f64>() / n,
        });
    }
    out
}

impl MetricsReport {
    pub fn mode(&self, mode: usize) -> Option<&ModeAverage> {
        self.modes.iter().find(|m| m.mode == format!("MM-{mode}"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed {}  config {}  fusion {}  singleton {}", self.seed, self.config_digest, self.fusion, self.singleton);
        let _ = writeln!(out, "gallery {}  random-ranking mAP {:.2}", self.gallery_size, 100.0 * self.random_baseline_map);
        let _ = writeln!(out, "{:<10} {:>6} {:>6} {:>6} {:>6} {:>6}", "query", "R1", "R5", "R10", "mAP", "mINP");
        for s in &self.query_sets {
            let c = s.scores.cmc;
            let _ = writeln!(
                out,
                "{:<10} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2}",
                s.name,
                100.0 * c[0],
                100.0 * c[1],
                100.0 * c[2],
                100.0 * s.scores.map,
                100.0 * s.scores.minp
            );
        }
        for m in &self.modes {
            let _ = writeln!(
                out,
                "{:<10} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2}",
                m.mode,
                100.0 * m.cmc[0],
                100.0 * m.cmc[1],
                100.0 * m.cmc[2],
                100.0 * m.map,
                100.0 * m.minp
            );
        }
        out
    }
}

/// Shannon entropy statistics of a text corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub texts: usize,
    pub mean_entropy_bits: f64,
    /// Per-text entropy in bits, in input order.
    pub per_text: Vec<f64>,
}

/// Entropy in bits of a sequence's own word-frequency distribution.
pub fn word_entropy<T: Ord>(words: &[T]) -> Result<f64> {
    if words.is_empty() {
        return Err(Error::Invalid("empty text".into()));
    }
    let mut counts: BTreeMap<&T, usize> = BTreeMap::new();
    for w in words {
        *counts.entry(w).or_insert(0) += 1;
    }
    let n = words.len() as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

pub fn text_entropy<T: Ord>(texts: &[Vec<T>]) -> Result<EntropyStats> {
    if texts.is_empty() {
        return Err(Error::Invalid("no texts".into()));
    }
    let per_text = texts
        .iter()
        .enumerate()
        .map(|(i, t)| word_entropy(t).map_err(|_| Error::Invalid(format!("text {i} is empty"))))
        .collect::<Result<Vec<f64>>>()?;
    Ok(EntropyStats {
        texts: texts.len(),
        mean_entropy_bits: per_text.iter().sum::<f64>() / per_text.len() as f64,
        per_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        let layout = query_set_layout();
        let per_mode: Vec<usize> = (1..=4).map(|k| layout.iter().filter(|l| l.0 == k).count()).collect();
        assert_eq!(per_mode, vec![4, 12, 12, 4]);
    }

    #[test]
    fn hand_computed_single_query() {
        // Gallery identities [B, A, A] ranked in index order, query A.
        let r = RankingList {
            query: 0,
            order: vec![0, 1, 2],
            affinities: vec![0.0; 3],
        };
        let s = cmc_map_minp(&[r], &[1], &[2, 1, 1]).unwrap();
        assert_eq!(s.cmc[0], 0.0);
        assert!((s.map - 7.0 / 12.0).abs() < 1e-15);
        assert!((s.minp - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let r = rank_row(0, &[0.5, 0.9, 0.5, 0.9]);
        assert_eq!(r.order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn zero_norm_is_rejected() {
        let q = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(rank(&q, &g).is_err());
        assert!(rank(&g, &q).is_err());
    }

    #[test]
    fn entropy_hand_cases() {
        assert_eq!(word_entropy(&[4, 4, 4]).unwrap(), 0.0);
        assert!((word_entropy(&[1, 2]).unwrap() - 1.0).abs() < 1e-12);
        assert!((word_entropy(&["a", "a", "b", "c"]).unwrap() - 1.5).abs() < 1e-12);
        assert!(word_entropy::<usize>(&[]).is_err());
    }
}
