use super::{Tape, Tensor, Var};
use crate::error::Result;

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars)?.value().item()
}

/// Central-difference gradient of a scalar closure with respect to every input.
pub fn numeric_gradient<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compares tape gradients against central differences.
///
/// Returns the maximum over all input coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    let numeric = numeric_gradient(&f, inputs, eps)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max((av - nv).abs() / nv.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;
    const EPS: f64 = 1e-5;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn check<F>(name: &str, f: F, shapes: &[&[usize]])
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let err = gradcheck(&f, &inputs, EPS).unwrap();
            assert!(err < TOL, "{name} trial {trial}: {err:e}");
        }
    }

    // Weighted sum so the upstream gradient is not uniform.
    fn wsum<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let w = t.constant(Tensor::from_fn(&shape, |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0));
        Ok(x.mul(w)?.sum())
    }

    #[test]
    fn elementwise_ops() {
        check("add", |t, v| wsum(t, v[0].add(v[1])?), &[&[3, 4], &[4]]);
        check("sub", |t, v| wsum(t, v[0].sub(v[1])?), &[&[2, 1, 3], &[4, 1]]);
        check("mul", |t, v| wsum(t, v[0].mul(v[1])?), &[&[3, 4], &[3, 1]]);
        check("div", |t, v| wsum(t, v[0].div(v[1].square().add_scalar(0.5))?), &[&[3, 4], &[4]]);
        check("neg/scale", |t, v| wsum(t, v[0].neg().scale(2.5).add_scalar(1.0)), &[&[5]]);
        check("exp", |t, v| wsum(t, v[0].exp()), &[&[5]]);
        check("ln", |t, v| wsum(t, v[0].square().add_scalar(0.2).ln()), &[&[5]]);
        check("sqrt", |t, v| wsum(t, v[0].square().add_scalar(0.3).sqrt()), &[&[5]]);
        check("sin/cos", |t, v| wsum(t, v[0].sin().mul(v[0].cos())?), &[&[6]]);
        check("mean", |_, v| Ok(v[0].square().mean()), &[&[2, 3]]);
    }

    #[test]
    fn relu_away_from_kink() {
        // Shift inputs so no coordinate sits within EPS of zero.
        check(
            "relu",
            |t, v| {
                let sign = t.constant(Tensor::from_fn(&[6], |i| if i % 2 == 0 { 1.0 } else { -1.0 }));
                wsum(t, v[0].square().add_scalar(0.01).mul(sign)?.relu())
            },
            &[&[6]],
        );
    }

    #[test]
    fn matmul_chain() {
        check(
            "matmul",
            |t, v| wsum(t, v[0].matmul(v[1])?.matmul(v[2])?),
            &[&[3, 4], &[4, 5], &[5, 2]],
        );
        check("batched matmul", |t, v| wsum(t, v[0].matmul(v[1])?), &[&[2, 3, 4], &[4, 2]]);
    }

    #[test]
    fn softmax_log_composite() {
        check("softmax+log", |t, v| wsum(t, v[0].softmax(1)?.ln()), &[&[3, 5]]);
        check("softmax axis0", |t, v| wsum(t, v[0].softmax(0)?), &[&[4, 3]]);
    }

    #[test]
    fn shape_ops() {
        check("reshape", |t, v| wsum(t, v[0].reshape(&[6, 2])?.square()), &[&[3, 4]]);
        check("permute", |t, v| wsum(t, v[0].permute(&[2, 0, 1])?.square()), &[&[2, 3, 4]]);
        check("sum_axis", |t, v| wsum(t, v[0].sum_axis(1, false)?.square()), &[&[3, 4]]);
        check("sum_axis keep", |t, v| wsum(t, v[0].sum_axis(0, true)?.square()), &[&[3, 4]]);
        check("gather", |t, v| wsum(t, v[0].index_select(0, &[2, 0, 2, 1])?.square()), &[&[3, 4]]);
        check(
            "concat",
            |t, v| wsum(t, t.concat(&[v[0], v[1].square()], 1)?),
            &[&[3, 2], &[3, 4]],
        );
    }

    #[test]
    fn layer_norm_grad() {
        check("layer_norm", |t, v| wsum(t, v[0].layer_norm(1e-5)?), &[&[3, 6]]);
    }

    #[test]
    fn bilinear_wrt_grid_and_coords() {
        fn f<'t>(t: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
            let grid = v[0];
            // Map raw inputs into strictly interior, non-lattice coordinates.
            let frac = v[1].sin().scale(0.3).add_scalar(0.5);
            let base = t.constant(Tensor::new(&[3, 2], vec![0., 1., 2., 0., 1., 2.]).unwrap());
            let coords = frac.add(base)?;
            let (s, flags) = t.bilinear_sample(grid, coords)?;
            assert!(flags.iter().all(|&b| b));
            wsum(t, s)
        }
        check("bilinear", f, &[&[4, 4, 3], &[3, 2]]);
    }
}
