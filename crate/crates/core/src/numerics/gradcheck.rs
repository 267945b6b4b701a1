use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::rng::Sampler;
use crate::error::{Error, Result};

/// Central-difference step on 64-bit reals.
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let loss = f(&mut g)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    Ok(v)
}

/// Compares autodiff gradients with central differences at `n_coords` sampled
/// coordinates of `params`, returning the max of `|ad - fd| / (|fd| + 1e-8)`.
///
/// Frozen parameters must come back without a gradient; any gradient on a frozen
/// parameter is reported as an error.
pub fn check_gradient<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    n_coords: usize,
    seed: u64,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        g.backward(loss)?
    };
    for &id in params {
        if store.get(id).frozen && grads.get(id).is_some() {
            return Err(Error::State(format!(
                "frozen parameter {} received a gradient",
                store.get(id).name
            )));
        }
    }
    let live: Vec<ParamId> = params.iter().copied().filter(|&id| !store.get(id).frozen).collect();
    if live.is_empty() {
        return Ok(GradCheck { max_rel_error: 0.0, coords_checked: 0 });
    }
    let sizes: Vec<usize> = live.iter().map(|&id| store.tensor(id).numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut sampler = Sampler::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_coords {
        let mut flat = sampler.below(total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let id = live[which];
        let ad = grads.get(id).map(|g| g[flat]).unwrap_or(0.0);
        let orig = store.tensor(id).data()[flat];
        store.tensor_mut(id).data_mut()[flat] = orig + FD_STEP;
        let up = eval(store, &f);
        store.tensor_mut(id).data_mut()[flat] = orig - FD_STEP;
        let down = eval(store, &f);
        store.tensor_mut(id).data_mut()[flat] = orig;
        let fd = (up? - down?) / (2.0 * FD_STEP);
        let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(GradCheck { max_rel_error: worst, coords_checked: n_coords })
}
