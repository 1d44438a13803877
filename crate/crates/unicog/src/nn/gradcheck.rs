//! Central finite-difference gradient oracle.
//!
//! Used by tests to validate the analytic backward pass over every parameter
//! of small models. Kept independent of the graph's backward code: it only
//! perturbs parameter values and re-evaluates a scalar loss closure.

use crate::nn::graph::{Grads, ParamSet};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative-error floor: gradients smaller than this in magnitude are compared
/// absolutely, which makes the check equivalent to rtol 1e-4 with atol 1e-7.
pub const DEFAULT_REL_FLOOR: f64 = 1e-3;

/// Central finite differences of `loss_fn` with respect to every parameter.
/// The parameter set is restored to its original values afterwards.
pub fn finite_difference_grads<F>(
    params: &mut ParamSet,
    mut loss_fn: F,
    step: f64,
) -> Vec<Vec<f64>>
where
    F: FnMut(&ParamSet) -> f64,
{
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).numel();
        let mut grad = Vec::with_capacity(n);
        for j in 0..n {
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + step;
            let fp = loss_fn(params);
            params.get_mut(id).data_mut()[j] = orig - step;
            let fm = loss_fn(params);
            params.get_mut(id).data_mut()[j] = orig;
            grad.push((fp - fm) / (2.0 * step));
        }
        out.push(grad);
    }
    out
}

/// Max over all parameters of |a - b| / max(|a|, |b|, floor).
pub fn max_rel_error(params: &ParamSet, analytic: &Grads, fd: &[Vec<f64>], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (id, _) in params.iter() {
        let a = analytic.get(id);
        let b = &fd[id.0];
        assert_eq!(a.len(), b.len());
        for (&av, &bv) in a.iter().zip(b) {
            let denom = av.abs().max(bv.abs()).max(floor);
            worst = worst.max((av - bv).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::{Grads, Graph, ParamSet};
    use crate::nn::tensor::Tensor;
    use crate::rng::Rng;

    /// FD vs analytic for a composite touching most ops.
    #[test]
    fn composite_ops_gradcheck() {
        let mut rng = Rng::new(21);
        let mut ps = ParamSet::new();
        let w = ps.register("w", Tensor::randn(&[4, 6], 0.5, &mut rng));
        let b = ps.register("b", Tensor::randn(&[4], 0.5, &mut rng));
        let gamma = ps.register("gamma", Tensor::randn(&[6], 0.3, &mut rng));
        let beta = ps.register("beta", Tensor::randn(&[6], 0.3, &mut rng));
        let x_val = Tensor::randn(&[3, 6], 1.0, &mut rng);

        let build = |ps: &ParamSet| -> f64 {
            let mut g = Graph::new(ps);
            let x = g.input(x_val.clone());
            let gamma_n = g.param(gamma);
            let beta_n = g.param(beta);
            let xn = g.layer_norm(x, gamma_n, beta_n);
            let wn = g.param(w);
            let bn = g.param(b);
            let y = g.linear(xn, wn, Some(bn));
            let a = g.gelu(y);
            let s = g.softmax(a);
            let lp = g.log_softmax(a);
            let picked = g.pick_neg_log_prob(lp, &[0, 2, 1]);
            let s_sum = g.sum_squares(s);
            let p_sum = g.sum(picked);
            let m = g.mean_rows(a);
            let m_sum = g.sum_squares(m);
            let t1 = g.add(s_sum, p_sum);
            let t2 = g.add(t1, m_sum);
            g.val(t2).item()
        };

        // Analytic pass.
        let mut grads = Grads::zeros(&ps);
        {
            let mut g = Graph::new(&ps);
            let x = g.input(x_val.clone());
            let gamma_n = g.param(gamma);
            let beta_n = g.param(beta);
            let xn = g.layer_norm(x, gamma_n, beta_n);
            let wn = g.param(w);
            let bn = g.param(b);
            let y = g.linear(xn, wn, Some(bn));
            let a = g.gelu(y);
            let s = g.softmax(a);
            let lp = g.log_softmax(a);
            let picked = g.pick_neg_log_prob(lp, &[0, 2, 1]);
            let s_sum = g.sum_squares(s);
            let p_sum = g.sum(picked);
            let m = g.mean_rows(a);
            let m_sum = g.sum_squares(m);
            let t1 = g.add(s_sum, p_sum);
            let t2 = g.add(t1, m_sum);
            g.backward(t2, &mut grads).unwrap();
        }

        let fd = finite_difference_grads(&mut ps, build, DEFAULT_FD_STEP);
        let err = max_rel_error(&ps, &grads, &fd, DEFAULT_REL_FLOOR);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn matmul_variants_gradcheck() {
        let mut rng = Rng::new(22);
        let mut ps = ParamSet::new();
        let a = ps.register("a", Tensor::randn(&[3, 4], 0.7, &mut rng));
        let b = ps.register("b", Tensor::randn(&[4, 2], 0.7, &mut rng));
        let c = ps.register("c", Tensor::randn(&[5, 4], 0.7, &mut rng));

        let build = |ps: &ParamSet| -> f64 {
            let mut g = Graph::new(ps);
            let an = g.param(a);
            let bn = g.param(b);
            let cn = g.param(c);
            let ab = g.matmul(an, bn); // [3,2]
            let ac = g.matmul_nt(an, cn); // [3,5]
            let s1 = g.sum_squares(ab);
            let s2 = g.sum_squares(ac);
            let t = g.add(s1, s2);
            g.val(t).item()
        };

        let mut grads = Grads::zeros(&ps);
        {
            let mut g = Graph::new(&ps);
            let an = g.param(a);
            let bn = g.param(b);
            let cn = g.param(c);
            let ab = g.matmul(an, bn);
            let ac = g.matmul_nt(an, cn);
            let s1 = g.sum_squares(ab);
            let s2 = g.sum_squares(ac);
            let t = g.add(s1, s2);
            g.backward(t, &mut grads).unwrap();
        }

        let fd = finite_difference_grads(&mut ps, build, DEFAULT_FD_STEP);
        let err = max_rel_error(&ps, &grads, &fd, DEFAULT_REL_FLOOR);
        assert!(err < 1e-4, "max relative error {err}");
    }
}
