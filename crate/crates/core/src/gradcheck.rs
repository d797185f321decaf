//! Central finite-difference checks of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error between analytic and numeric gradients of
/// `build(graph, inputs) -> scalar` with respect to every input tensor.
///
/// The relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn max_relative_error<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let mut worst = 0.0f64;
    for (n, &v) in vars.iter().enumerate() {
        let analytic = g.grad_wrt(out, v)?;
        for i in 0..inputs[n].len() {
            let mut plus = inputs.to_vec();
            plus[n].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[n].data_mut()[i] -= STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
    }

    fn check<F>(inputs: &[Tensor], build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let err = max_relative_error(inputs, build).unwrap();
        assert!(err < TOLERANCE, "relative error {err}");
    }

    /// Reduces an arbitrary tensor to a scalar with non-uniform weights so
    /// that every output element contributes a distinct gradient.
    fn weighted_sum(g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let w = g.input(Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?);
        let m = g.mul(x, w)?;
        g.sum(m)
    }

    #[test]
    fn matmul_add_sub_mul() {
        let a = rand_tensor(&[3, 4], 1, -1.0, 1.0);
        let b = rand_tensor(&[4, 2], 2, -1.0, 1.0);
        let c = rand_tensor(&[3, 2], 3, -1.0, 1.0);
        check(&[a, b, c], |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let s = g.sub(m, v[2])?;
            let p = g.mul(s, v[2])?;
            let q = g.add(p, m)?;
            weighted_sum(g, q)
        });
    }

    #[test]
    fn bias_scale_and_activations() {
        for kind in Activation::ALL {
            let x = rand_tensor(&[2, 3], 4, -0.6, 0.6);
            let b = rand_tensor(&[3], 5, -0.05, 0.05);
            check(&[x, b], |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                let y = g.scale(y, 1.5)?;
                let y = g.unary(kind, y)?;
                weighted_sum(g, y)
            });
        }
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::matrix(1, 4, vec![-0.7, -0.2, 0.3, 1.1]).unwrap();
        check(&[x], |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn concat_slice_gather_rows() {
        let a = rand_tensor(&[3, 2], 6, -1.0, 1.0);
        let b = rand_tensor(&[3, 3], 7, -1.0, 1.0);
        check(&[a, b], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]])?;
            let s = g.slice_cols(c, 1, 4)?;
            let r = g.concat_rows(&[s, s])?;
            let gth = g.gather_rows(r, vec![Some(5), None, Some(0), Some(0), Some(3)])?;
            weighted_sum(g, gth)
        });
    }

    #[test]
    fn causal_convolution() {
        let x = rand_tensor(&[12, 2], 8, -1.0, 1.0);
        let k = rand_tensor(&[2, 2, 3], 9, -1.0, 1.0);
        for d in [1, 2, 5] {
            check(&[x.clone(), k.clone()], |g, v| {
                let y = g.causal_conv(v[0], v[1], d, 6)?;
                let y = g.tanh(y)?;
                weighted_sum(g, y)
            });
        }
    }

    #[test]
    fn pinball_away_from_kinks() {
        let pred = Tensor::matrix(3, 2, vec![0.1, 0.9, -0.4, 0.2, 1.5, 2.0]).unwrap();
        check(&[pred], |g, v| {
            let t = g.tanh(v[0])?;
            g.pinball_loss(t, vec![0.5, -0.8, 0.3], vec![1.0, 0.5, 0.0, 1.0, 2.0, 1.0], vec![0.1, 0.9])
        });
    }

    #[test]
    fn gaussian_likelihood() {
        let mu = rand_tensor(&[4, 1], 10, -1.0, 1.0);
        let s = rand_tensor(&[4, 1], 11, -1.0, 1.0);
        check(&[mu, s], |g, v| {
            let sigma = g.softplus(v[1])?;
            g.gaussian_nll(v[0], sigma, vec![0.3, -0.2, 1.4, 0.0], vec![1.0, 1.0, 0.0, 2.0])
        });
    }

    #[test]
    fn lstm_cell_composite() {
        let x = rand_tensor(&[2, 3], 12, -1.0, 1.0);
        let w = rand_tensor(&[3, 2], 13, -1.0, 1.0);
        let c = rand_tensor(&[2, 2], 14, -1.0, 1.0);
        check(&[x, w, c], |g, v| {
            let pre = g.matmul(v[0], v[1])?;
            let gate = g.sigmoid(pre)?;
            let cand = g.tanh(pre)?;
            let keep = g.mul(gate, v[2])?;
            let write = g.mul(gate, cand)?;
            let cell = g.add(keep, write)?;
            let h = g.tanh(cell)?;
            weighted_sum(g, h)
        });
    }
}
