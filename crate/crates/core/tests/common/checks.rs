//! Property checks shared by the core tests and the acceptance suite. Each
//! function panics with a diagnostic on the first violation.

use std::collections::BTreeMap;

use num_rational::Ratio;
use omreid::assembler::Sample;
use omreid::model::{Model, ModelConfig};
use omreid::objective::sdm_loss;
use omreid::params::{ParamStore, Session};
use omreid::protocol::{
    cmc_map_minp, query_set_layout, rank, rank_row, superposition_search, word_entropy, RankingList, CMC_RANKS,
};
use omreid::rng;
use omreid::tensor::{grad_check, relative_error, Axis, Graph, Tensor, Var, LN_EPS};
use omreid::Modality;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

// Routing.

fn expert_of(name: &str) -> Option<Modality> {
    let rest = name.split(".expert.").nth(1)?;
    Modality::from_code(rest.chars().next()?)
}

/// Pooled and sequence outputs of one modality's samples, as raw bits.
fn encode_bits(model: &Model, store: &ParamStore, samples: &[Sample]) -> Vec<u64> {
    let mut s = Session::frozen(store);
    let e = model.encode(&mut s, samples).unwrap();
    let mut out: Vec<u64> = s.graph.value(e.sequence).data().iter().map(|v| v.to_bits()).collect();
    out.extend(s.graph.value(e.pooled).data().iter().map(|v| v.to_bits()));
    out
}

fn randomize_experts(store: &ParamStore, only: Option<Modality>, seed: u64) -> ParamStore {
    let mut out = store.clone();
    for (name, t) in store.iter() {
        if let Some(m) = expert_of(name) {
            if only.is_none_or(|o| o == m) {
                out.insert(name.clone(), Tensor::randn(t.shape(), 0.5, &mut rng::stream(&[seed, rng::hash_str(name)])));
            }
        }
    }
    out
}

/// Zero-init equivalence, locality and gradient isolation on a tiny config.
pub fn routing_case(layers: usize, width: usize, rank: usize, seed: u64) {
    let mut cfg = super::tiny_config(3, layers, rank);
    cfg.tokenizer.width = width;
    cfg.visual.width = width;
    let (batch, _) = super::tiny_batch(3, seed);
    routing_check(cfg, &batch, seed);
}

/// Zero-init equivalence, locality and gradient isolation for `cfg`, whose
/// geometry must fit `batch`.
pub fn routing_check(cfg: ModelConfig, batch: &BTreeMap<Modality, Vec<Sample>>, seed: u64) {
    let routed = Model::new(ModelConfig { routing: true, ..cfg.clone() }).unwrap();
    let plain = Model::new(ModelConfig { routing: false, ..cfg }).unwrap();
    let store = routed.init_params(seed);

    for m in Modality::VISUAL {
        assert_eq!(
            encode_bits(&routed, &store, &batch[&m]),
            encode_bits(&plain, &store, &batch[&m]),
            "{m}: zero-initialized experts changed the output"
        );
        // Rewriting every other modality's experts leaves m untouched.
        let live = randomize_experts(&store, Some(m), seed);
        let mut others = live.clone();
        for o in Modality::VISUAL.iter().filter(|&&o| o != m) {
            others = randomize_experts(&others, Some(*o), seed ^ 0x5eed);
        }
        let base = encode_bits(&routed, &live, &batch[&m]);
        assert_eq!(base, encode_bits(&routed, &others, &batch[&m]), "{m}: other experts leaked in");
        assert_ne!(base, encode_bits(&plain, &live, &batch[&m]), "{m}: own expert had no effect");
    }

    let store = randomize_experts(&store, None, seed);
    for m in Modality::VISUAL {
        let mut s = Session::new(&store);
        s.bind_all().unwrap();
        let e = routed.encode(&mut s, &batch[&m]).unwrap();
        let sq = s.graph.mul(e.pooled, e.pooled).unwrap();
        let loss = s.graph.sum(sq).unwrap();
        let grads = s.backward(loss).unwrap();
        let mut own = 0.0;
        for (name, g) in &grads {
            match expert_of(name) {
                Some(o) if o == m => own += g.data().iter().map(|v| v.abs()).sum::<f64>(),
                Some(_) => assert!(g.data().iter().all(|&v| v == 0.0), "{name} leaked gradient from {m}"),
                None => {}
            }
        }
        assert!(own > 0.0, "{m}: own expert got no gradient");
    }
}

// Autodiff.

type Op = fn(&mut Graph, Var) -> omreid::tensor::Result<Var>;

/// `Σ op(x) ⊙ W` for a fixed random `W`, so every output element matters.
fn weighted(op: Op, x: &Tensor, seed: u64) -> impl Fn(&mut Graph, Var) -> omreid::tensor::Result<Var> {
    let x = x.clone();
    move |g: &mut Graph, v: Var| {
        let y = op(g, v)?;
        let shape = g.value(y).shape().to_vec();
        let w = Tensor::randn(&shape, 1.0, &mut rng::stream(&[seed, 99, x.len() as u64]));
        let wv = g.constant(w);
        let p = g.mul(y, wv)?;
        g.sum(p)
    }
}

fn other(g: &mut Graph, shape: &[usize], tag: u64) -> Var {
    g.constant(Tensor::randn(shape, 1.0, &mut rng::stream(&[tag, 7])))
}

/// Every tape primitive with its input shape.
pub fn primitives() -> Vec<(&'static str, Op, Vec<usize>)> {
    vec![
        ("add", |g, x| { let c = other(g, &[3, 4], 1); g.add(x, c) }, vec![3, 4]),
        ("sub", |g, x| { let c = other(g, &[3, 4], 2); g.sub(c, x) }, vec![3, 4]),
        ("mul", |g, x| { let c = other(g, &[3, 4], 3); g.mul(x, c) }, vec![3, 4]),
        ("mul self", |g, x| g.mul(x, x), vec![3, 4]),
        ("scale", |g, x| g.scale(x, -2.5), vec![3, 4]),
        ("gelu", |g, x| g.gelu(x), vec![3, 4]),
        ("add_row x", |g, x| { let r = other(g, &[4], 4); g.add_row(x, r) }, vec![3, 4]),
        ("add_row row", |g, r| { let x = other(g, &[3, 4], 5); g.add_row(x, r) }, vec![4]),
        ("mul_row x", |g, x| { let r = other(g, &[4], 6); g.mul_row(x, r) }, vec![3, 4]),
        ("mul_row row", |g, r| { let x = other(g, &[3, 4], 7); g.mul_row(x, r) }, vec![4]),
        ("matmul left", |g, a| { let b = other(g, &[4, 2], 8); g.matmul(a, b) }, vec![3, 4]),
        ("matmul right", |g, b| { let a = other(g, &[3, 4], 9); g.matmul(a, b) }, vec![4, 2]),
        ("transpose", |g, x| g.transpose(x), vec![3, 4]),
        ("reshape", |g, x| g.reshape(x, &[2, 6]), vec![3, 4]),
        ("layer_norm", |g, x| g.layer_norm(x, LN_EPS), vec![3, 5]),
        ("softmax cols", |g, x| g.softmax(x, Axis::Cols), vec![3, 4]),
        ("softmax rows", |g, x| g.softmax(x, Axis::Rows), vec![3, 4]),
        ("l2_normalize_rows", |g, x| g.l2_normalize_rows(x, 1e-12), vec![3, 4]),
        ("embedding", |g, t| g.embedding(t, &[2, 0, 2, 4]), vec![5, 3]),
        ("concat rows", |g, x| { let c = other(g, &[2, 4], 10); g.concat(&[x, c, x], Axis::Rows) }, vec![3, 4]),
        ("concat cols", |g, x| { let c = other(g, &[3, 2], 11); g.concat(&[c, x], Axis::Cols) }, vec![3, 4]),
        ("slice", |g, x| g.slice(x, 1, 2, 1, 3), vec![3, 4]),
        ("gather_rows", |g, x| g.gather_rows(x, &[2, 0, 0, 1]), vec![3, 4]),
        ("mean_pool rows", |g, x| g.mean_pool(x, Axis::Rows), vec![3, 4]),
        ("mean_pool cols", |g, x| g.mean_pool(x, Axis::Cols), vec![3, 4]),
        ("segment_mean", |g, x| g.segment_mean(x, &[2, 1, 3]), vec![6, 3]),
        ("sum", |g, x| g.sum(x), vec![3, 4]),
        ("cross_entropy", |g, x| g.cross_entropy(x, &[1, 0, 3]), vec![3, 4]),
        ("kl_div", |g, x| {
            let p = g.softmax(x, Axis::Cols)?;
            let q = Tensor::matrix(2, 3, vec![0.5, 0.5, 0.0, 0.2, 0.3, 0.5]).unwrap();
            g.kl_div(p, &q)
        }, vec![2, 3]),
    ]
}

/// Finite-difference check of the primitive called `name`.
pub fn gradcheck_primitive(name: &str, seeds: u64) {
    let (_, op, shape) = primitives().into_iter().find(|p| p.0 == name).expect("known primitive");
    for seed in 0..seeds {
        let x = Tensor::randn(&shape, 1.0, &mut rng::stream(&[seed, 1]));
        let r = grad_check(weighted(op, &x, seed), &x, FD_STEP, FD_TOL).unwrap();
        assert!(r.passed(), "{name} seed {seed}: rel err {} at {}", r.max_rel_error, r.worst_index);
    }
}

/// Parameters with random experts, so expert paths carry gradient too.
fn perturbed_params(model: &Model, seed: u64) -> ParamStore {
    let base = model.init_params(seed);
    let mut store = ParamStore::new();
    for (name, t) in base.iter() {
        let t = if name.ends_with(".down") {
            Tensor::randn(t.shape(), 0.3, &mut rng::stream(&[seed, rng::hash_str(name)]))
        } else {
            t.clone()
        };
        store.insert(name.clone(), t);
    }
    store
}

/// Encode, fuse and objective gradients against central differences on two
/// random elements of every parameter tensor.
pub fn gradcheck_end_to_end(seed: u64) {
    let (batch, labels) = super::tiny_batch(3, 4);
    let model = super::tiny_model(3);
    let loss_at = |store: &ParamStore| {
        let mut s = Session::frozen(store);
        let (l, _) = model.objective(&mut s, &batch, &labels, 1.0, 0.02).unwrap();
        s.graph.value(l).item()
    };
    let store = perturbed_params(&model, seed);
    let grads = {
        let mut s = Session::new(&store);
        let (l, _) = model.objective(&mut s, &batch, &labels, 1.0, 0.02).unwrap();
        s.backward(l).unwrap()
    };
    let mut pick = rng::stream(&[seed, 5]);
    let mut worst = (0.0, String::new());
    for (name, t) in store.iter() {
        let g = &grads[name];
        for _ in 0..2 {
            let i = pick.random_range(0..t.len());
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= FD_STEP;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * FD_STEP);
            let e = relative_error(g.data()[i], numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]: analytic {} numeric {numeric}", g.data()[i]));
            }
        }
    }
    assert!(worst.0 <= FD_TOL, "seed {seed}: rel err {} at {}", worst.0, worst.1);
}

// Protocol.

type Q = Ratio<i64>;

/// Exact CMC@{1,5,10}, mAP and mINP by definition.
fn metrics_oracle(rankings: &[Vec<usize>], query_ids: &[usize], gallery_ids: &[usize]) -> ([Q; 3], Q, Q) {
    let n = Q::from_integer(rankings.len() as i64);
    let mut cmc = [Q::from_integer(0); 3];
    let (mut map, mut minp) = (Q::from_integer(0), Q::from_integer(0));
    for (q, order) in rankings.iter().enumerate() {
        let rel: Vec<bool> = order.iter().map(|&g| gallery_ids[g] == query_ids[q]).collect();
        let total = rel.iter().filter(|&&r| r).count() as i64;
        let first = rel.iter().position(|&r| r).unwrap() + 1;
        let last = rel.iter().rposition(|&r| r).unwrap() + 1;
        for (c, &k) in cmc.iter_mut().zip(&CMC_RANKS) {
            if first <= k {
                *c += Q::from_integer(1) / n;
            }
        }
        let mut ap = Q::from_integer(0);
        for k in 1..=rel.len() {
            if rel[k - 1] {
                let hits = rel[..k].iter().filter(|&&r| r).count() as i64;
                ap += Q::new(hits, k as i64);
            }
        }
        map += ap / Q::from_integer(total) / n;
        minp += Q::new(total, last as i64) / n;
    }
    (cmc, map, minp)
}

/// Nearest `f64` to an exact ratio.
fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// One random instance with a gallery of at most 10, scored both ways. The
/// library accumulates in floating point, so equality is to the nearest
/// representable value of the exact rational.
pub fn metrics_instance(instance: u64) {
    let mut r = rng::stream(&[instance, 500]);
    let gallery_size = r.random_range(1..=10);
    let n_ids = r.random_range(1..=3);
    let mut gallery_ids: Vec<usize> = (0..gallery_size).map(|_| r.random_range(0..n_ids)).collect();
    gallery_ids[0] = 0;
    let mut present = gallery_ids.clone();
    present.sort_unstable();
    present.dedup();
    let n_queries = r.random_range(1..=5);
    let query_ids: Vec<usize> = (0..n_queries).map(|_| present[r.random_range(0..present.len())]).collect();
    let orders: Vec<Vec<usize>> = (0..n_queries)
        .map(|_| {
            let sims: Vec<f64> = (0..gallery_size).map(|_| r.random_range(0..4) as f64).collect();
            rank_row(0, &sims).order
        })
        .collect();
    let rankings: Vec<RankingList> = orders
        .iter()
        .enumerate()
        .map(|(q, o)| RankingList {
            query: q,
            order: o.clone(),
            affinities: vec![0.0; o.len()],
        })
        .collect();
    let got = cmc_map_minp(&rankings, &query_ids, &gallery_ids).unwrap();
    let (cmc, map, minp) = metrics_oracle(&orders, &query_ids, &gallery_ids);
    for k in 0..3 {
        assert!((got.cmc[k] - to_f64(cmc[k])).abs() <= 1e-12, "instance {instance}: CMC@{}", CMC_RANKS[k]);
    }
    assert!((got.map - to_f64(map)).abs() <= 1e-12, "instance {instance}: mAP {} vs {map}", got.map);
    assert!((got.minp - to_f64(minp)).abs() <= 1e-12, "instance {instance}: mINP {} vs {minp}", got.minp);
}

pub fn query_layout_counts() {
    let layout = query_set_layout();
    let counts: Vec<usize> = (1..=4).map(|k| layout.iter().filter(|l| l.0 == k).count()).collect();
    assert_eq!(counts, vec![4, 12, 12, 4]);
}

pub fn superposition_single(seed: u64) {
    let q = Tensor::randn(&[5, 4], 1.0, &mut rng::stream(&[seed, 1]));
    let g = Tensor::randn(&[7, 4], 1.0, &mut rng::stream(&[seed, 2]));
    assert_eq!(superposition_search(std::slice::from_ref(&q), &g).unwrap(), rank(&q, &g).unwrap());
}

// Objective.

fn sdm_value(q: &Tensor, t: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let tv = g.constant(t.clone());
    let l = sdm_loss(&mut g, qv, tv, labels, tau).unwrap();
    g.value(l).item()
}

fn rescale_rows(x: &Tensor, r: &mut impl Rng) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for i in 0..x.rows() {
        let s = 10f64.powf(r.random_range(-2.0..2.0));
        out.data_mut()[i * cols..(i + 1) * cols].iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Positive per-row rescaling of either side leaves SDM unchanged.
pub fn sdm_scale_invariance(seed: u64) {
    let mut r = rng::stream(&[seed, 600]);
    let n = r.random_range(2..7);
    let labels: Vec<usize> = (0..n).map(|i| i % (n - 1)).collect();
    let q = Tensor::randn(&[n, 5], 1.0, &mut r);
    let t = Tensor::randn(&[n, 5], 1.0, &mut r);
    let tau = r.random_range(0.02..1.0);
    let base = sdm_value(&q, &t, &labels, tau);
    assert!(base >= 0.0);
    let (qs, ts) = (rescale_rows(&q, &mut r), rescale_rows(&t, &mut r));
    let scaled = sdm_value(&qs, &ts, &labels, tau);
    assert!((scaled - base).abs() <= 1e-9, "seed {seed}: {base} became {scaled}");
}

/// The combined loss equals SDM + α·IC for every α.
pub fn loss_decomposition(seed: u64) {
    let (batch, labels) = super::tiny_batch(4, 2);
    let model = super::tiny_model(4);
    let store = model.init_params(seed);
    let mut reference = None;
    for alpha in [0.0, 0.5, 1.0, 2.0] {
        let mut s = Session::frozen(&store);
        let (l, r) = model.objective(&mut s, &batch, &labels, alpha, 0.02).unwrap();
        let combined = s.graph.value(l).item();
        assert!((combined - (r.sdm_total + alpha * r.ic_total)).abs() <= 1e-9, "alpha {alpha}");
        assert_eq!(combined, r.combined);
        assert_eq!(r.sdm_terms.len(), 15);
        assert_eq!(r.ic_terms.len(), 16);
        assert!((r.sdm_terms.values().sum::<f64>() - r.sdm_total).abs() <= 1e-9);
        assert!((r.ic_terms.values().sum::<f64>() - r.ic_total).abs() <= 1e-9);
        // Neither part depends on alpha.
        let parts = (r.sdm_total, r.ic_total);
        assert_eq!(*reference.get_or_insert(parts), parts);
    }
}

// Entropy.

pub fn entropy_hand_cases() {
    assert!((word_entropy(&[7, 7, 7]).unwrap() - 0.0).abs() <= 1e-12);
    assert!((word_entropy(&[1, 2]).unwrap() - 1.0).abs() <= 1e-12);
    assert!((word_entropy(&[1, 1, 2, 3]).unwrap() - 1.5).abs() <= 1e-12);
    assert!(word_entropy::<u32>(&[]).is_err());
}
