//! Retrieval objective: similarity distribution matching between every fused
//! query combination and the RGB gallery vectors, plus identity
//! classification of all representation families through one shared
//! classifier.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::ModalityCombo;
use crate::nn;
use crate::params::{ParamStore, Session};
use crate::tensor::{Axis, Graph, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.02;
pub const DEFAULT_ALPHA: f64 = 1.0;
const NORM_EPS: f64 = 1e-12;

/// Row-normalized same-identity indicator between `row_labels` and
/// `col_labels`.
pub fn match_distribution(row_labels: &[usize], col_labels: &[usize]) -> Result<Tensor> {
    let (r, c) = (row_labels.len(), col_labels.len());
    let mut data = vec![0.0; r * c];
    for (i, &a) in row_labels.iter().enumerate() {
        let pos: Vec<usize> = (0..c).filter(|&j| col_labels[j] == a).collect();
        if pos.is_empty() {
            return Err(Error::Invalid(format!("row {i} (identity {a}) has no positive pair")));
        }
        for j in pos.iter() {
            data[i * c + j] = 1.0 / pos.len() as f64;
        }
    }
    Ok(Tensor::matrix(r, c, data)?)
}

/// Symmetric SDM: for each direction, the mean over rows of
/// `KL(softmax(cos/τ) ‖ q)` where `q` spreads mass evenly over same-identity
/// columns; the result is the average of both directions. Row `i` of
/// `queries` and of `targets` both carry `labels[i]`.
pub fn sdm_loss(g: &mut Graph, queries: Var, targets: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Invalid(format!("similarity matching needs at least 2 rows, got {n}")));
    }
    if g.value(queries).rows() != n || g.value(targets).rows() != n {
        return Err(Error::Invalid("query/target rows do not match the label count".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let q_dist = match_distribution(labels, labels)?;
    let qn = g.l2_normalize_rows(queries, NORM_EPS)?;
    let tn = g.l2_normalize_rows(targets, NORM_EPS)?;
    let tt = g.transpose(tn)?;
    let sim = g.matmul(qn, tt)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let p_fwd = g.softmax(logits, Axis::Cols)?;
    let l_fwd = g.kl_div(p_fwd, &q_dist)?;
    let logits_t = g.transpose(logits)?;
    let p_bwd = g.softmax(logits_t, Axis::Cols)?;
    let l_bwd = g.kl_div(p_bwd, &q_dist.transpose()?)?;
    let both = g.add(l_fwd, l_bwd)?;
    Ok(g.scale(both, 0.5)?)
}

/// Cross-entropy of the shared linear classifier `{name}.w`, `{name}.b`
/// over the rows of `reps`.
pub fn ic_loss(s: &mut Session, reps: Var, labels: &[usize], classifier: &str) -> Result<Var> {
    let n_classes = s.store().get(&format!("{classifier}.b"))?.len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Invalid(format!("label {bad} outside {n_classes} training identities")));
    }
    let logits = nn::linear(s, classifier, reps)?;
    Ok(s.graph.cross_entropy(logits, labels)?)
}

pub fn init_classifier(store: &mut ParamStore, seed: u64, name: &str, dim: usize, n_classes: usize) {
    nn::init_linear(store, seed, name, dim, n_classes, crate::params::INIT_STD);
}

/// Everything one step of the objective needs: gallery vectors `z^R`, one
/// fused batch per combination, and identity labels shared by all rows.
pub struct BatchPack {
    pub gallery: Var,
    pub fused: BTreeMap<ModalityCombo, Var>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub sdm_total: f64,
    pub ic_total: f64,
    pub alpha: f64,
    pub combined: f64,
    /// Per family: `R` for the gallery vectors, otherwise the combo key.
    pub sdm_terms: BTreeMap<String, f64>,
    pub ic_terms: BTreeMap<String, f64>,
}

/// `Σ_c SDM(z^c, z^R) + α · (IC(z^R) + Σ_c IC(z^c))`.
pub fn total_objective(s: &mut Session, pack: &BatchPack, alpha: f64, tau: f64, classifier: &str) -> Result<(Var, LossReport)> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::Invalid(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    if pack.fused.is_empty() {
        return Err(Error::Invalid("no fused combinations".into()));
    }
    let mut sdm_vars = Vec::new();
    let mut ic_vars = Vec::new();
    let mut sdm_terms = BTreeMap::new();
    let mut ic_terms = BTreeMap::new();

    let ic_r = ic_loss(s, pack.gallery, &pack.labels, classifier)?;
    ic_terms.insert("R".to_string(), s.graph.value(ic_r).item());
    ic_vars.push(ic_r);
    for (combo, &z) in &pack.fused {
        let named = |e: Error| Error::Invalid(format!("combination {combo}: {e}"));
        let sdm = sdm_loss(&mut s.graph, z, pack.gallery, &pack.labels, tau).map_err(named)?;
        sdm_terms.insert(combo.key(), s.graph.value(sdm).item());
        sdm_vars.push(sdm);
        let ic = ic_loss(s, z, &pack.labels, classifier).map_err(named)?;
        ic_terms.insert(combo.key(), s.graph.value(ic).item());
        ic_vars.push(ic);
    }
    let sdm_cat = s.graph.concat(&sdm_vars, Axis::Rows)?;
    let sdm = s.graph.sum(sdm_cat)?;
    let ic_cat = s.graph.concat(&ic_vars, Axis::Rows)?;
    let ic = s.graph.sum(ic_cat)?;
    let weighted = s.graph.scale(ic, alpha)?;
    let combined = s.graph.add(sdm, weighted)?;
    let report = LossReport {
        sdm_total: s.graph.value(sdm).item(),
        ic_total: s.graph.value(ic).item(),
        alpha,
        combined: s.graph.value(combined).item(),
        sdm_terms,
        ic_terms,
    };
    if !report.combined.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite: {}", report.combined)));
    }
    Ok((combined, report))
}
