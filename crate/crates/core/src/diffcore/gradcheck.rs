use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor3;
use crate::error::{Error, Result};

/// Builds a graph from named inputs and returns its output node.
pub trait GraphBuilder: Fn(&mut Graph, &ParamStore) -> Result<Var> {}
impl<F: Fn(&mut Graph, &ParamStore) -> Result<Var>> GraphBuilder for F {}

/// Evaluates `build` on `inputs`, returning the graph and its output node.
pub fn evaluate(build: impl GraphBuilder, inputs: &ParamStore) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let out = build(&mut g, inputs)?;
    Ok((g, out))
}

/// Gradients of `seed · output` with respect to every bound input that is
/// marked as requiring a gradient.
pub fn gradient(
    build: impl GraphBuilder,
    inputs: &ParamStore,
    seed: &Tensor3,
) -> Result<ParamStore> {
    let (g, out) = evaluate(&build, inputs)?;
    let grads = g.backward(out, seed)?;
    let mut result = ParamStore::new();
    for (name, &v) in g.bound_params() {
        let t = inputs.get(name)?;
        if t.requires_grad() {
            result.insert(name.clone(), grads.get_or_zeros(v, t.dims()));
        }
    }
    Ok(result)
}

/// Fixed pseudo-random seed tensor so that non-scalar outputs reduce to a
/// scalar objective with no accidental cancellations.
pub fn probe_seed(dims: [usize; 3]) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
}

fn objective(build: &impl GraphBuilder, inputs: &ParamStore, seed: &Tensor3) -> Result<f64> {
    let (g, out) = evaluate(build, inputs)?;
    Ok(g.value(out).dot(seed))
}

/// Largest relative disagreement between reverse-mode gradients and central
/// differences with step `eps`, over every entry of every gradient-tracked
/// input:
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check(
    build: impl GraphBuilder,
    inputs: &ParamStore,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {eps}")));
    }
    let (g, out) = evaluate(&build, inputs)?;
    let dims = g.dims(out);
    let seed = if dims == [1, 1, 1] {
        Tensor3::full(dims, 1.0)
    } else {
        probe_seed(dims)
    };
    drop(g);
    let analytic = gradient(&build, inputs, &seed)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.clone();
    for (name, grad) in analytic.iter() {
        for idx in 0..grad.len() {
            let orig = inputs.get(name)?.data()[idx];
            probe.get_mut(name)?.data_mut()[idx] = orig + eps;
            let plus = objective(&build, &probe, &seed)?;
            probe.get_mut(name)?.data_mut()[idx] = orig - eps;
            let minus = objective(&build, &probe, &seed)?;
            probe.get_mut(name)?.data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[idx];
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("finite difference of `{name}`")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
