//! Layer building blocks shared by the encoder towers and the feature mixture.

use crate::error::Result;
use crate::params::{ParamStore, Session};
use crate::tensor::{Axis, Var, LN_EPS};

/// `N(0, d_in^-1)`, the scale that keeps activations of unit size.
pub fn fan_in_std(d_in: usize) -> f64 {
    (d_in as f64).powf(-0.5)
}

pub fn init_linear(store: &mut ParamStore, seed: u64, name: &str, d_in: usize, d_out: usize, std: f64) {
    store.init_normal(seed, &format!("{name}.w"), &[d_in, d_out], std);
    store.init_const(&format!("{name}.b"), &[d_out], 0.0);
}

/// `x · W + b` with parameters `{name}.w` and `{name}.b`.
pub fn linear(s: &mut Session, name: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{name}.w"))?;
    let b = s.param(&format!("{name}.b"))?;
    let y = s.graph.matmul(x, w)?;
    Ok(s.graph.add_row(y, b)?)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.init_const(&format!("{name}.g"), &[dim], 1.0);
    store.init_const(&format!("{name}.b"), &[dim], 0.0);
}

/// Row-wise layer norm followed by the affine map `{name}.g`, `{name}.b`.
pub fn layer_norm(s: &mut Session, name: &str, x: Var) -> Result<Var> {
    let g = s.param(&format!("{name}.g"))?;
    let b = s.param(&format!("{name}.b"))?;
    let y = s.graph.layer_norm(x, LN_EPS)?;
    let y = s.graph.mul_row(y, g)?;
    Ok(s.graph.add_row(y, b)?)
}

/// Scaled dot-product attention, independently inside each row segment and
/// each head. `q`, `k`, `v` are `N×d` with `N = Σ lengths`.
pub fn attention(s: &mut Session, q: Var, k: Var, v: Var, lengths: &[usize], heads: usize) -> Result<Var> {
    let d = s.graph.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let g = &mut s.graph;
    let mut segments = Vec::with_capacity(lengths.len());
    let mut offset = 0;
    for &len in lengths {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, offset, len, h * dh, dh)?;
            let kh = g.slice(k, offset, len, h * dh, dh)?;
            let vh = g.slice(v, offset, len, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let p = g.softmax(scores, Axis::Cols)?;
            per_head.push(g.matmul(p, vh)?);
        }
        segments.push(if heads == 1 { per_head[0] } else { g.concat(&per_head, Axis::Cols)? });
        offset += len;
    }
    if segments.len() == 1 {
        Ok(segments[0])
    } else {
        Ok(g.concat(&segments, Axis::Rows)?)
    }
}

/// Splits a fused `N×3d` projection into `q`, `k`, `v`.
pub fn split_qkv(s: &mut Session, qkv: Var) -> Result<(Var, Var, Var)> {
    let t = s.graph.value(qkv);
    let (n, c) = (t.rows(), t.cols());
    let d = c / 3;
    let q = s.graph.slice(qkv, 0, n, 0, d)?;
    let k = s.graph.slice(qkv, 0, n, d, d)?;
    let v = s.graph.slice(qkv, 0, n, 2 * d, d)?;
    Ok((q, k, v))
}

/// Row indices of the first (or last) token of every segment.
pub fn segment_heads(lengths: &[usize], last: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut offset = 0;
    for &len in lengths {
        out.push(if last { offset + len - 1 } else { offset });
        offset += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn attention_is_segment_local() {
        let mut store = ParamStore::new();
        store.init_normal(1, "x", &[5, 4], 1.0);
        let x = store.get("x").unwrap().clone();
        let run = |data: &Tensor| {
            let mut st = ParamStore::new();
            st.insert("x", data.clone());
            let mut s = Session::frozen(&st);
            let v = s.param("x").unwrap();
            let out = attention(&mut s, v, v, v, &[2, 3], 2).unwrap();
            s.graph.value(out).clone()
        };
        let base = run(&x);
        let mut changed = x.clone();
        // Perturb a row of the second segment only.
        changed.data_mut()[4 * 4] += 1.0;
        let after = run(&changed);
        assert!(base.data()[..8].iter().zip(&after.data()[..8]).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_ne!(base.data()[8..], after.data()[8..]);
    }

    #[test]
    fn segment_heads_picks_boundaries() {
        assert_eq!(segment_heads(&[3, 2, 4], false), vec![0, 3, 5]);
        assert_eq!(segment_heads(&[3, 2, 4], true), vec![2, 4, 8]);
    }
}
