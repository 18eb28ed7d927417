//! Offline metrics: retrieval recall@k over an exhaustive pin index, AUC, and
//! the multi-seed loss comparison.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use crate::datasynth::{generate_world, split_corpus, CutPolicy, World, WorldConfig, DAY};
use crate::encoder::build_input_matrix;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::objective::LossKind;
use crate::train::{pin_feature_matrix, split_users, train_towers, TrainConfig};

pub const RECALL_KS: [usize; 3] = [1, 10, 100];
pub const EVAL_WINDOW_DAYS: i64 = 14;

/// Pin ids ordered by descending score, ties by ascending id.
pub fn rank_pins(user: &[f64], index: &Tensor) -> Vec<u32> {
    // `+ 0.0` folds -0.0 into 0.0 so signed zeros tie under total_cmp.
    let scores: Vec<f64> = (0..index.rows()).map(|p| crate::numerics::tensor::dot(user, index.row(p)) + 0.0).collect();
    let mut order: Vec<u32> = (0..index.rows() as u32).collect();
    order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    order
}

/// `|top-k ∩ positives| / min(k, |positives|)` over distinct positive pins.
pub fn recall_at_k(user: &[f64], positives: &BTreeSet<u32>, index: &Tensor, k: usize) -> Result<f64> {
    if index.rows() == 0 {
        return Err(Error::Eval("empty pin index".into()));
    }
    recall_from_ranking(&rank_pins(user, index), positives, k)
}

pub fn recall_from_ranking(ranking: &[u32], positives: &BTreeSet<u32>, k: usize) -> Result<f64> {
    if positives.is_empty() || k == 0 {
        return Err(Error::Eval("recall needs k >= 1 and at least one positive".into()));
    }
    let hits = ranking.iter().take(k).filter(|p| positives.contains(p)).count();
    Ok(hits as f64 / k.min(positives.len()) as f64)
}

/// Exact rank-statistic AUC; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval("AUC is undefined with a single class".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Eval("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie groups.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pin-tower outputs for every corpus pin, row = pin id.
pub fn pin_index(world: &World, params: &ParamStore) -> Result<Tensor> {
    let ids: Vec<u32> = (0..world.pins.len() as u32).collect();
    model::pin_embeddings(params, &pin_feature_matrix(world, &ids)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallReport {
    /// `(k, mean recall@k)` in ascending k.
    pub recall: Vec<(usize, f64)>,
    pub users: usize,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// Held-out users: inputs up to `horizon_end − window`, positives in the
/// final `window_days`. Users without inputs or positives are skipped.
pub fn evaluate_retrieval(
    world: &World,
    params: &ParamStore,
    cfg: &ModelConfig,
    held_out_fraction: f64,
    window_days: i64,
    ks: &[usize],
) -> Result<RecallReport> {
    let index = pin_index(world, params)?;
    let cut = world.horizon_end() - window_days * DAY;
    let (_, held) = split_users(world.users.len(), held_out_fraction);
    let users = &world.users[held.start as usize..held.end as usize];
    let mut sums = vec![0.0; ks.len()];
    let mut counted = 0usize;
    for ex in split_corpus(users, &CutPolicy::Fixed(cut), window_days)? {
        if ex.inputs.is_empty() || ex.targets.is_empty() {
            continue;
        }
        let w = build_input_matrix(&ex.inputs, &world.pins, cut, &cfg.encoder())?;
        let out = model::user_embeddings(params, &cfg.transformer, &w.features, &w.valid)?;
        let user = out.latest().expect("window has a valid row");
        let ranking = rank_pins(user, &index);
        let positives: BTreeSet<u32> = ex.targets.iter().map(|a| a.pin_id).collect();
        for (s, &k) in sums.iter_mut().zip(ks) {
            *s += recall_from_ranking(&ranking, &positives, k)?;
        }
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Eval("no held-out user has inputs and future positives".into()));
    }
    Ok(RecallReport {
        recall: ks.iter().zip(&sums).map(|(&k, s)| (k, s / counted as f64)).collect(),
        users: counted,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub metric: String,
    pub model: String,
    pub seed: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub model: String,
    pub seed: u64,
    pub reason: String,
}

/// Per-model, per-seed metrics plus failed runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub failures: Vec<RunFailure>,
}

impl EvalReport {
    pub fn value(&self, metric: &str, model: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.model == model && r.seed == seed)
            .map(|r| r.value)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.seed).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// `metric,model,seed,value` lines.
    pub fn machine_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.metric, r.model, r.seed, r.value);
        }
        for f in &self.failures {
            let _ = writeln!(s, "failed,{},{},{}", f.model, f.seed, f.reason.replace(',', ";"));
        }
        s
    }

    /// Mean and range per (metric, model).
    pub fn table(&self) -> String {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.model.clone(), r.metric.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let mut s = format!("{:<18} {:<12} {:>9} {:>9} {:>9} {:>5}\n", "model", "metric", "mean", "min", "max", "runs");
        for (model, metric) in keys {
            let vals: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.model == model && r.metric == metric)
                .map(|r| r.value)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(s, "{model:<18} {metric:<12} {mean:>9.4} {min:>9.4} {max:>9.4} {:>5}", vals.len());
        }
        for f in &self.failures {
            let _ = writeln!(s, "FAILED {} seed {}: {}", f.model, f.seed, f.reason);
        }
        s
    }
}

/// Trains the towers under each loss kind on the same seeded corpus and
/// steps, and reports held-out recall@k per seed.
pub fn compare_losses(seeds: &[u64], world_cfg: &WorldConfig, train_cfg: &TrainConfig, kinds: &[LossKind]) -> Result<EvalReport> {
    if seeds.len() < 3 {
        return Err(Error::Config("compare_losses needs at least three seeds".into()));
    }
    let mut report = EvalReport::default();
    for &seed in seeds {
        let world = generate_world(&WorldConfig {
            seed,
            ..world_cfg.clone()
        })?;
        for &kind in kinds {
            let mut cfg = train_cfg.clone();
            cfg.seed = seed;
            cfg.objective.loss_kind = kind;
            let started = Instant::now();
            let outcome = train_towers(&world, &cfg, |_| {}).and_then(|o| {
                evaluate_retrieval(&world, &o.params, &cfg.model, cfg.held_out_fraction, EVAL_WINDOW_DAYS, &RECALL_KS)
            });
            match outcome {
                Ok(rec) => {
                    for (k, v) in rec.recall {
                        report.rows.push(EvalRow {
                            metric: format!("recall@{k}"),
                            model: kind.name().into(),
                            seed,
                            value: v,
                        });
                    }
                    report.rows.push(EvalRow {
                        metric: "runtime_s".into(),
                        model: kind.name().into(),
                        seed,
                        value: started.elapsed().as_secs_f64(),
                    });
                }
                Err(e @ (Error::NonFinite(_) | Error::Eval(_))) => report.failures.push(RunFailure {
                    model: kind.name().into(),
                    seed,
                    reason: e.to_string(),
                }),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}
