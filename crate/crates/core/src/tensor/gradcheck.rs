use super::{Graph, Result, Tensor, Var};

/// Magnitude below which gradient comparisons become absolute rather than
/// relative.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Elements whose perturbed evaluations or gradients were not finite.
    pub non_finite: Vec<usize>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_empty() && self.max_rel_error <= self.tolerance
    }
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).item())
}

/// Compares the tape gradient of the scalar function `f` at `x` with central
/// differences `(f(x+h) − f(x−h)) / 2h`, element by element.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(v)
        .map_or_else(|| vec![0.0; x.len()], |t| t.data().to_vec());

    let mut numeric = Vec::with_capacity(x.len());
    let mut non_finite = Vec::new();
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (eval(&f, &plus)?, eval(&f, &minus)?);
        let n = (fp - fm) / (2.0 * step);
        if !n.is_finite() || !analytic[i].is_finite() {
            non_finite.push(i);
        } else {
            let e = relative_error(analytic[i], n);
            if e > max_rel_error {
                max_rel_error = e;
                worst_index = i;
            }
        }
        numeric.push(n);
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        non_finite,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{Axis, LN_EPS};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    #[test]
    fn identity_has_zero_error() {
        // Dyadic point and step keep x ± h and the difference exact.
        let x = Tensor::scalar(0.75);
        let r = grad_check(|_, v| Ok(v), &x, 2f64.powi(-17), TOL).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn softmax_sum_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let r = grad_check(
            |g, v| {
                let s = g.softmax(v, Axis::Cols)?;
                g.sum(s)
            },
            &x,
            STEP,
            TOL,
        )
        .unwrap();
        // Only rounding of f(x ± h) ≈ 1 remains.
        assert!(r.max_rel_error < 1e-7, "{}", r.max_rel_error);
        assert!(r.analytic.iter().all(|a| a.abs() < 1e-15));
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w2 = Tensor::randn(&[5, 2], 0.5, &mut rng);
        let w1 = Tensor::randn(&[4, 5], 0.5, &mut rng);
        let r = grad_check(
            |g, w| {
                let xi = g.constant(x.clone());
                let w2v = g.constant(w2.clone());
                let h = g.matmul(xi, w)?;
                let h = g.gelu(h)?;
                let o = g.matmul(h, w2v)?;
                let o = g.mul(o, o)?;
                g.sum(o)
            },
            &w1,
            STEP,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "max rel err {}", r.max_rel_error);
    }

    #[test]
    fn non_finite_elements_are_flagged() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let big = g.scale(v, 1e308)?;
                let sq = g.mul(big, big)?;
                g.sum(sq)
            },
            &x,
            STEP,
            TOL,
        )
        .unwrap();
        assert!(!r.non_finite.is_empty());
        assert!(!r.passed());
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let r = grad_check(
            |g, v| {
                let y = g.layer_norm(v, LN_EPS)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                g.sum(p)
            },
            &x,
            STEP,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "{}", r.max_rel_error);
    }
}
