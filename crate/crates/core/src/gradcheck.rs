//! Central finite-difference checks of reverse-mode gradients in `f64`.

use crate::error::Result;
use crate::tensor::{Graph, OpSpec, Rng, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients for one case.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over all
    /// checked inputs.
    pub rel_err: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

/// Compares the reverse-mode gradient of `f` with central differences of
/// step `h`. `f` maps the leaf handles to a scalar loss.
pub fn check_fn<F>(name: &str, inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t)).collect::<Result<_>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.variable(t)).collect::<Result<_>>()?;
        let l = f(&mut g, &vars)?;
        Ok(g.item(l))
    };

    let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            diff2 += (analytic[j] - numeric).powi(2);
            an2 += analytic[j].powi(2);
            nu2 += numeric.powi(2);
        }
    }
    let denom = an2.sqrt().max(nu2.sqrt()).max(1e-12);
    Ok(GradCheck { name: name.to_string(), rel_err: diff2.sqrt() / denom })
}

/// Loss `Σ op(inputs) ⊙ R` with a fixed random weighting `R`, so every
/// output element contributes a distinct cotangent.
pub fn check_op(spec: &OpSpec, inputs: &[Tensor<f64>], seed: u64, h: f64) -> Result<GradCheck> {
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect::<Result<_>>()?;
        let out = g.apply(spec, &vars)?;
        let mut rng = Rng::new(seed ^ 0x5eed);
        Tensor::<f64>::randn(g.shape(out).to_vec(), 1.0, &mut rng)
    };
    check_fn(spec.name(), inputs, h, |g, vars| {
        let out = g.apply(spec, vars)?;
        let w = g.constant(&weights)?;
        let prod = g.mul(out, w)?;
        g.sum_all(prod)
    })
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero so finite differences never straddle the
/// leaky-relu kink.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.normal();
            if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A shuffled, well-separated sequence so no finite-difference step
/// changes the sort order.
fn separated(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let d = *shape.last().unwrap();
    let rows: usize = shape.iter().product::<usize>() / d;
    let mut data = Vec::new();
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..d).map(|i| i as f64 * 0.1 + rng.uniform() * 0.05).collect();
        rng.shuffle(&mut row);
        data.extend(row);
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One randomized case per operation in the closed set (some operations
/// get several layouts).
pub fn op_cases(seed: u64) -> Vec<(OpSpec, Vec<Tensor<f64>>)> {
    let mut r = Rng::new(seed);
    vec![
        (OpSpec::Matmul, vec![randn(&[2, 3, 4], &mut r), randn(&[2, 4, 5], &mut r)]),
        (OpSpec::Matmul, vec![randn(&[3, 4], &mut r), randn(&[2, 4, 2], &mut r)]),
        (OpSpec::Conv2d { stride: 1 }, vec![randn(&[2, 3, 5, 4], &mut r), randn(&[2, 3, 3, 3], &mut r)]),
        (OpSpec::Conv2d { stride: 1 }, vec![randn(&[2, 2, 4, 4], &mut r), randn(&[2, 3, 2, 3, 3], &mut r)]),
        (OpSpec::Conv2d { stride: 2 }, vec![randn(&[1, 2, 6, 6], &mut r), randn(&[3, 2, 3, 3], &mut r)]),
        (OpSpec::Conv1x1, vec![randn(&[2, 3, 3, 4], &mut r), randn(&[4, 3], &mut r)]),
        (OpSpec::Conv1x1, vec![randn(&[2, 3, 2, 2], &mut r), randn(&[2, 2, 3], &mut r)]),
        (OpSpec::Linear { bias: true }, vec![randn(&[3, 4], &mut r), randn(&[5, 4], &mut r), randn(&[5], &mut r)]),
        (OpSpec::Add, vec![randn(&[2, 3, 4], &mut r), randn(&[3, 1], &mut r)]),
        (OpSpec::Mul, vec![randn(&[2, 3, 4], &mut r), randn(&[1, 3, 4], &mut r)]),
        (OpSpec::Scale(-0.7), vec![randn(&[6], &mut r)]),
        (OpSpec::Softmax, vec![randn(&[3, 6], &mut r)]),
        (OpSpec::LeakyRelu, vec![away_from_zero(&[20], &mut r)]),
        (OpSpec::Upsample2x, vec![randn(&[2, 3, 4], &mut r)]),
        (OpSpec::Mean { axes: vec![1], keepdim: true }, vec![randn(&[2, 3, 4], &mut r)]),
        (OpSpec::Sum { axes: vec![0, 2], keepdim: false }, vec![randn(&[2, 3, 4], &mut r)]),
        (OpSpec::L2Normalize { eps: 1e-8 }, vec![randn(&[3, 5], &mut r)]),
        (OpSpec::Concat { axis: 1 }, vec![randn(&[2, 3], &mut r), randn(&[2, 2], &mut r)]),
        (OpSpec::SortLastAxis, vec![separated(&[3, 7], &mut r)]),
        (OpSpec::CosineSimilarity, vec![randn(&[3, 5], &mut r), randn(&[3, 5], &mut r)]),
        (OpSpec::BoxFilter3x3, vec![randn(&[2, 4, 5], &mut r)]),
        (OpSpec::IndexSelect { axis: 1, indices: vec![2, 0, 2] }, vec![randn(&[2, 3, 2], &mut r)]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..3 {
            for (spec, inputs) in op_cases(seed) {
                let r = check_op(&spec, &inputs, seed, 1e-3).unwrap();
                assert!(r.passes(1e-4), "{} seed {seed}: rel err {:.3e}", r.name, r.rel_err);
            }
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = Rng::new(11);
        let x = randn(&[2, 3, 4], &mut rng);
        let w = randn(&[2, 2, 4], &mut rng);
        let r = check_fn("reshape/transpose/narrow", &[x], 1e-3, |g, v| {
            let a = g.reshape(v[0], &[4, 3, 2])?;
            let b = g.transpose(a, 0, 2)?;
            let c = g.narrow(b, 1, 1, 2)?;
            let wc = g.constant(&w)?;
            let p = g.mul(c, wc)?;
            g.sum_all(p)
        })
        .unwrap();
        assert!(r.passes(1e-4), "rel err {:.3e}", r.rel_err);
    }

    #[test]
    fn checker_detects_wrong_gradients() {
        // A loss whose graph is cut (constant path) has zero analytic
        // gradient but a nonzero numeric one.
        let mut rng = Rng::new(5);
        let x = randn(&[4], &mut rng);
        let r = check_fn("cut", &[x.clone()], 1e-3, |g, v| {
            let c = g.constant(&g.tensor(v[0]))?;
            let sq = g.mul(c, c)?;
            g.sum_all(sq)
        })
        .unwrap();
        assert!(!r.passes(1e-4));
    }
}
