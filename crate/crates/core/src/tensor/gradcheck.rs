//! Central finite differences, the independent oracle for [`Graph::backward`].
//!
//! [`Graph::backward`]: super::Graph::backward

use super::{Graph, Rng, Tensor, Var};
use crate::error::Result;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element `i` of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let idx: Vec<usize> = (0..x.numel()).collect();
    finite_diff_at(&mut f, x, h, &idx).map(|vals| Tensor::from_raw(x.shape(), vals))
}

/// Central differences at selected flat indices only.
pub fn finite_diff_at<F>(f: &mut F, x: &Tensor<f64>, h: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Values below this magnitude are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest [`rel_error`] over paired values.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_error(x, y)).fold(0.0, f64::max)
}

/// Outcome of [`check_graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest [`rel_error`] over all probed elements.
    pub max_rel_error: f64,
    /// Number of probed elements.
    pub probed: usize,
}

/// Compares [`Graph::backward`] with central differences for a function of
/// several tensors. The scalar loss is `sum(f(inputs) ⊙ R)` with a fixed
/// random `R`. At most `max_probes` elements per input are probed (chosen at
/// random when the input is larger); `usize::MAX` probes every element.
pub fn check_graph<F>(inputs: &[Tensor<f64>], f: F, seed: u64, h: f64, max_probes: usize) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = Rng::new(seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let weights = Tensor::randn(g.shape(out), &mut rng);
    let w = g.input(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };

    let mut worst: f64 = 0.0;
    let mut probed = 0;
    for (i, (x, v)) in inputs.iter().zip(&vars).enumerate() {
        let n = x.numel();
        let idx: Vec<usize> =
            if n <= max_probes { (0..n).collect() } else { (0..max_probes).map(|_| rng.below(n)).collect() };
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(gr) => idx.iter().map(|&k| gr.data()[k]).collect(),
            None => vec![0.0; idx.len()],
        };
        // Outputs are differenced elementwise before weighting so that a
        // large loss does not swamp small derivatives with roundoff.
        let mut xs = inputs.to_vec();
        let mut numeric = Vec::with_capacity(idx.len());
        for &k in &idx {
            let orig = x.data()[k];
            xs[i].data_mut()[k] = orig + h;
            let plus = eval(&xs)?;
            xs[i].data_mut()[k] = orig - h;
            let minus = eval(&xs)?;
            xs[i].data_mut()[k] = orig;
            let d: f64 =
                plus.data().iter().zip(minus.data()).zip(weights.data()).map(|((p, m), r)| (p - m) * r).sum();
            numeric.push(d / (2.0 * h));
        }
        worst = worst.max(max_rel_error(&analytic, &numeric));
        probed += idx.len();
    }
    Ok(GradCheck { max_rel_error: worst, probed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_vec([1, 1, 2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 7.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_of_matmul_agrees_with_backward() {
        let mut rng = Rng::new(11);
        let a = Tensor::randn([1, 1, 3, 4], &mut rng);
        let b = Tensor::randn([1, 1, 4, 5], &mut rng);
        let r = check_graph(
            &[a, b],
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                g.softmax(m)
            },
            0,
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert_eq!(r.probed, 32);
        assert!(r.max_rel_error <= 1e-5, "{}", r.max_rel_error);
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!(rel_error(1e-9, 2e-9) < 1e-2);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }
}
