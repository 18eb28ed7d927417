//! Retrieval losses over user-tower positions: dense all-action, last-position
//! all-action and next-action, with uniform and in-batch negatives.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;

use crate::datasynth::{is_positive_with, ActionRecord, DAY, DEFAULT_CLICK_MIN_DURATION};
use crate::encoder::InputMatrix;
use crate::error::{Error, Result};
use crate::numerics::{RetrievalTerm, Tape, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossKind {
    DenseAllAction,
    AllAction,
    NextAction,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::DenseAllAction, LossKind::AllAction, LossKind::NextAction];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::DenseAllAction => "dense_all_action",
            LossKind::AllAction => "all_action",
            LossKind::NextAction => "next_action",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind `{s}` (dense_all_action, all_action, next_action)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub loss_kind: LossKind,
    pub window_days: i64,
    pub temperature: f64,
    pub n_random_negatives: usize,
    pub use_in_batch_negatives: bool,
    pub click_min_duration: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::DenseAllAction,
            window_days: 28,
            temperature: 0.1,
            n_random_negatives: 128,
            use_in_batch_negatives: true,
            click_min_duration: DEFAULT_CLICK_MIN_DURATION,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.window_days <= 0 {
            return Err(Error::Config(format!("window_days must be positive, got {}", self.window_days)));
        }
        Ok(())
    }
}

/// Target pin ids per row of an input window; empty for padding rows and
/// positions without targets. Duplicates are kept.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PositionTargets {
    pub per_position: Vec<Vec<u32>>,
}

impl PositionTargets {
    pub fn n_pairs(&self) -> usize {
        self.per_position.iter().map(Vec::len).sum()
    }

    pub fn all_pins(&self) -> impl Iterator<Item = u32> + '_ {
        self.per_position.iter().flatten().copied()
    }
}

fn row_timestamps(window: &InputMatrix) -> impl Iterator<Item = Option<i64>> + '_ {
    window.actions.iter().map(|a| a.map(|a| a.timestamp))
}

/// Positives of `history` (ascending) in `(t_i, t_i + window]` for every valid row.
pub fn build_position_targets(window: &InputMatrix, history: &[ActionRecord], cfg: &ObjectiveConfig) -> PositionTargets {
    let span = cfg.window_days * DAY;
    let per_position = row_timestamps(window)
        .map(|t| match t {
            None => Vec::new(),
            Some(t) => {
                let start = history.partition_point(|a| a.timestamp <= t);
                history[start..]
                    .iter()
                    .take_while(|a| a.timestamp <= t + span)
                    .filter(|a| is_positive_with(a, cfg.click_min_duration))
                    .map(|a| a.pin_id)
                    .collect()
            }
        })
        .collect();
    PositionTargets { per_position }
}

/// The first positive strictly after each valid row, without a window.
pub fn build_next_action_targets(window: &InputMatrix, history: &[ActionRecord], click_min_duration: f64) -> PositionTargets {
    let per_position = row_timestamps(window)
        .map(|t| match t {
            None => Vec::new(),
            Some(t) => {
                let start = history.partition_point(|a| a.timestamp <= t);
                history[start..]
                    .iter()
                    .find(|a| is_positive_with(a, click_min_duration))
                    .map(|a| vec![a.pin_id])
                    .unwrap_or_default()
            }
        })
        .collect();
    PositionTargets { per_position }
}

/// Targets the configured loss trains on.
pub fn targets_for(window: &InputMatrix, history: &[ActionRecord], cfg: &ObjectiveConfig) -> PositionTargets {
    match cfg.loss_kind {
        LossKind::DenseAllAction => build_position_targets(window, history, cfg),
        LossKind::NextAction => build_next_action_targets(window, history, cfg.click_min_duration),
        LossKind::AllAction => {
            let mut t = build_position_targets(window, history, cfg);
            let last = window.last_valid();
            for (i, v) in t.per_position.iter_mut().enumerate() {
                if Some(i) != last {
                    v.clear();
                }
            }
            t
        }
    }
}

/// Uniform random negatives per example, excluding every target of that
/// example. Draws come from the `(seed, NEGATIVES, step, example)` stream.
pub fn sample_negatives(
    targets: &[PositionTargets],
    n_pins: usize,
    cfg: &ObjectiveConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<Vec<u32>>> {
    if cfg.n_random_negatives >= n_pins {
        return Err(Error::Config(format!(
            "n_random_negatives {} must be below the corpus size {n_pins}",
            cfg.n_random_negatives
        )));
    }
    targets
        .iter()
        .enumerate()
        .map(|(b, t)| {
            let excluded: BTreeSet<u32> = t.all_pins().collect();
            let available = n_pins - excluded.iter().filter(|&&p| (p as usize) < n_pins).count();
            let want = cfg.n_random_negatives.min(available);
            let mut r = rng::stream(seed, &[rng::NEGATIVES, step, b as u64]);
            let mut picked = BTreeSet::new();
            if want * 2 <= available {
                while picked.len() < want {
                    let p = r.random_range(0..n_pins as u32);
                    if !excluded.contains(&p) {
                        picked.insert(p);
                    }
                }
            } else {
                let pool: Vec<u32> = (0..n_pins as u32).filter(|p| !excluded.contains(p)).collect();
                picked.extend(rand::seq::index::sample(&mut r, pool.len(), want).iter().map(|i| pool[i]));
            }
            Ok(picked.into_iter().collect())
        })
        .collect()
}

/// `-log(exp(u·p/τ) / (exp(u·p/τ) + Σ_j exp(u·n_j/τ)))`, computed stably.
pub fn softmax_retrieval_loss(u: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let sp = dot(u, positive);
    let sn: Vec<f64> = negatives.iter().map(|n| dot(u, n)).collect();
    let m = sn.iter().copied().fold(sp, f64::max);
    let z = (sp - m).exp() + sn.iter().map(|s| (s - m).exp()).sum::<f64>();
    Ok(m + z.ln() - sp)
}

/// One example's retrieval terms over its local candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleTerms {
    /// Indices into [`BatchTerms::candidates`].
    pub local: Rc<[usize]>,
    pub terms: Rc<[RetrievalTerm]>,
}

/// Candidate pins and per-example terms for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTerms {
    /// Sorted unique pin ids scored in this batch.
    pub candidates: Vec<u32>,
    pub examples: Vec<ExampleTerms>,
    pub n_pairs: usize,
}

/// Resolves targets and negatives into terms. Each position's negatives are
/// its example's random negatives plus (optionally) every other example's
/// targets, minus the position's own targets.
pub fn build_batch_terms(targets: &[PositionTargets], random_negatives: &[Vec<u32>], use_in_batch: bool) -> Result<BatchTerms> {
    if targets.len() != random_negatives.len() {
        return Err(Error::shape("batch negatives", &[random_negatives.len()], &[targets.len()]));
    }
    let mut target_count: BTreeMap<u32, usize> = BTreeMap::new();
    let example_pins: Vec<BTreeSet<u32>> = targets.iter().map(|t| t.all_pins().collect()).collect();
    for pins in &example_pins {
        for &p in pins {
            *target_count.entry(p).or_default() += 1;
        }
    }
    let mut all: BTreeSet<u32> = target_count.keys().copied().collect();
    all.extend(random_negatives.iter().flatten().copied());
    let candidates: Vec<u32> = all.into_iter().collect();
    let global = |p: u32| candidates.binary_search(&p).expect("candidate present");

    let mut examples = Vec::with_capacity(targets.len());
    let mut n_pairs = 0;
    for (b, t) in targets.iter().enumerate() {
        let mut base: BTreeSet<u32> = random_negatives[b].iter().copied().collect();
        if use_in_batch {
            // Pins targeted by some other example.
            base.extend(
                target_count
                    .iter()
                    .filter(|(p, &c)| c > usize::from(example_pins[b].contains(p)))
                    .map(|(p, _)| *p),
            );
        }
        let mut local_pins: BTreeSet<u32> = base.clone();
        local_pins.extend(example_pins[b].iter().copied());
        let local_pins: Vec<u32> = local_pins.into_iter().collect();
        let local = |p: u32| local_pins.binary_search(&p).expect("local candidate present");
        let base_local: Rc<[usize]> = base.iter().map(|&p| local(p)).collect();

        let mut terms = Vec::new();
        for (row, pos_targets) in t.per_position.iter().enumerate() {
            if pos_targets.is_empty() {
                continue;
            }
            let own: BTreeSet<u32> = pos_targets.iter().copied().collect();
            let negatives = if own.iter().any(|p| base.contains(p)) {
                base.iter().filter(|p| !own.contains(p)).map(|&p| local(p)).collect()
            } else {
                base_local.clone()
            };
            for &p in pos_targets {
                terms.push(RetrievalTerm {
                    row,
                    positive: local(p),
                    negatives: negatives.clone(),
                });
            }
        }
        n_pairs += terms.len();
        examples.push(ExampleTerms {
            local: local_pins.iter().map(|&p| global(p)).collect(),
            terms: terms.into(),
        });
    }
    Ok(BatchTerms {
        candidates,
        examples,
        n_pairs,
    })
}

/// Pair-level mean of the retrieval loss. `user_outputs[b]` is example `b`'s
/// `[L × d_e]` tower output and `pin_out` the `[C × d_e]` pin-tower output in
/// `terms.candidates` order.
pub fn record_loss(tape: &mut Tape, user_outputs: &[Var], pin_out: Var, terms: &BatchTerms, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if user_outputs.len() != terms.examples.len() {
        return Err(Error::shape("record_loss", &[user_outputs.len()], &[terms.examples.len()]));
    }
    if terms.n_pairs == 0 {
        return Err(Error::SkipBatch);
    }
    let mut total: Option<Var> = None;
    for (u, ex) in user_outputs.iter().zip(&terms.examples) {
        if ex.terms.is_empty() {
            continue;
        }
        let cands = tape.gather_rows(pin_out, ex.local.clone())?;
        let scores = tape.matmul_nt(*u, cands)?;
        let nll = tape.retrieval_nll(scores, ex.terms.clone(), tau)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, nll)?,
            None => nll,
        });
    }
    let total = total.expect("n_pairs > 0");
    Ok(tape.scale(total, 1.0 / terms.n_pairs as f64))
}
