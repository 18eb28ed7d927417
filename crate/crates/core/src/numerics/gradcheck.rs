//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check every coordinate when the model has at most this many scalars,
    /// otherwise a seeded sample of this size.
    pub max_coords: usize,
    /// Lower bound of the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_coords: 400,
            denom_floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    /// Parameters whose worst coordinate exceeds the tolerance.
    pub fn failing(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.max_rel_err >= self.tolerance)
            .map(|p| p.name.as_str())
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient produced by `loss_and_grad` with central
/// differences of `loss`. `loss_and_grad` must leave gradients in the store.
pub fn grad_check<L, G>(store: &mut ParamStore, mut loss: L, mut loss_and_grad: G, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore) -> Result<f64>,
    G: FnMut(&mut ParamStore) -> Result<f64>,
{
    store.zero_grad();
    let base = loss_and_grad(store)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check base point".into()));
    }
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|p| p.grad.as_ref().map(|g| g.data().to_vec()).ok_or_else(|| Error::MissingGrad(p.name.clone())))
        .collect::<Result<_>>()?;

    let sizes: Vec<usize> = store.iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let flat: Vec<usize> = if total <= cfg.max_coords {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked = sample(&mut rng, total, cfg.max_coords).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut params: Vec<ParamCheck> = store
        .iter()
        .map(|p| ParamCheck {
            name: p.name.clone(),
            coords_checked: 0,
            max_rel_err: 0.0,
            worst_coord: 0,
        })
        .collect();

    let mut offsets = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for s in &sizes {
        offsets.push(acc);
        acc += s;
    }

    for f in flat {
        let p = offsets.partition_point(|&o| o <= f) - 1;
        let coord = f - offsets[p];
        let id = super::params::ParamId(p);
        let orig = store.get(id).value.data()[coord];

        store.get_mut(id).value.data_mut()[coord] = orig + cfg.epsilon;
        let plus = loss(store)?;
        store.get_mut(id).value.data_mut()[coord] = orig - cfg.epsilon;
        let minus = loss(store)?;
        store.get_mut(id).value.data_mut()[coord] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("{}[{coord}]", params[p].name)));
        }

        let numeric = (plus - minus) / (2.0 * cfg.epsilon);
        let err = relative_error(analytic[p][coord], numeric, cfg.denom_floor);
        let entry = &mut params[p];
        entry.coords_checked += 1;
        if entry.coords_checked == 1 || err > entry.max_rel_err {
            entry.max_rel_err = err;
            entry.worst_coord = coord;
        }
    }

    let coords_checked = params.iter().map(|p| p.coords_checked).sum();
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        coords_checked,
        max_rel_err,
        tolerance: cfg.tolerance,
    })
}

/// [`grad_check`] for a loss recorded on a fresh tape by `build`, which must
/// return a scalar node.
pub fn grad_check_tape<F>(store: &mut ParamStore, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check(
        store,
        |s| {
            let mut tape = Tape::new();
            let out = build(&mut tape, s)?;
            Ok(tape.value(out).data()[0])
        },
        |s| {
            let mut tape = Tape::new();
            let out = build(&mut tape, s)?;
            let grads = tape.backward(out)?;
            grads.accumulate_into(&tape, s);
            Ok(tape.value(out).data()[0])
        },
        cfg,
    )
}
