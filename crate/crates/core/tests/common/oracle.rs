//! Independent brute-force reference for the retrieval objectives.

use std::collections::BTreeSet;

use rand::Rng;
use seqrank::datasynth::{ActionRecord, ActionType, Pin, Surface, T0};
use seqrank::encoder::{build_input_matrix, EncoderConfig, InputMatrix};
use seqrank::numerics::{Tape, Tensor};
use seqrank::objective::{build_batch_terms, record_loss, sample_negatives, targets_for, LossKind, ObjectiveConfig};

use super::rng;

pub struct LossInstance {
    pub pins: Vec<Pin>,
    pub histories: Vec<Vec<ActionRecord>>,
    pub windows: Vec<InputMatrix>,
    pub cfg: ObjectiveConfig,
    /// Stand-in tower outputs, one `[M × d_e]` matrix per example.
    pub user_rows: Vec<Tensor>,
    pub pin_vecs: Vec<Vec<f64>>,
    pub seed: u64,
}

fn unit(r: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

const DAY: i64 = 86_400;

pub fn random_instance(seed: u64) -> LossInstance {
    let mut r = rng(seed);
    let n_pins = r.random_range(12..20usize);
    let d_pin = 4;
    let d_e = 3;
    let pins: Vec<Pin> = (0..n_pins)
        .map(|i| Pin {
            pin_id: i as u32,
            topic_id: 0,
            embedding: unit(&mut r, d_pin),
        })
        .collect();
    let m = r.random_range(1..=8usize);
    let enc = EncoderConfig {
        max_actions: m,
        d_pin,
        d_h: 4,
    };
    let n_users = r.random_range(1..=3usize);
    let mut histories = Vec::new();
    let mut windows = Vec::new();
    for _ in 0..n_users {
        let n = r.random_range(3..14usize);
        let mut t = T0;
        let mut h = Vec::new();
        for _ in 0..n {
            t += r.random_range(0..3 * DAY);
            let action_type = ActionType::ALL[r.random_range(0..6)];
            h.push(ActionRecord {
                pin_id: r.random_range(0..n_pins as u32),
                timestamp: t,
                action_type,
                duration: if r.random_bool(0.5) { r.random_range(0.0..9.0) } else { r.random_range(10.0..60.0) },
                surface: Surface::ALL[r.random_range(0..3)],
            });
        }
        let cut = h[r.random_range(0..n)].timestamp;
        windows.push(build_input_matrix(&h, &pins, cut, &enc).unwrap());
        histories.push(h);
    }
    let user_rows = windows
        .iter()
        .map(|w| {
            let rows: Vec<Vec<f64>> = w.valid.iter().map(|&v| if v { unit(&mut r, d_e) } else { vec![0.0; d_e] }).collect();
            Tensor::from_rows(&rows).unwrap()
        })
        .collect();
    let cfg = ObjectiveConfig {
        loss_kind: LossKind::DenseAllAction,
        window_days: r.random_range(1..=4),
        temperature: [0.1, 0.5, 1.0][r.random_range(0..3)],
        n_random_negatives: r.random_range(0..=8usize),
        use_in_batch_negatives: r.random_bool(0.5),
        ..ObjectiveConfig::default()
    };
    let pin_vecs = (0..n_pins).map(|_| unit(&mut r, d_e)).collect();
    LossInstance {
        pins,
        histories,
        windows,
        cfg,
        user_rows,
        pin_vecs,
        seed,
    }
}

fn oracle_positive(a: &ActionRecord) -> bool {
    match a.action_type {
        ActionType::Repin | ActionType::Reaction | ActionType::Comment => true,
        ActionType::Click => a.duration >= 10.0,
        _ => false,
    }
}

/// Targets per window row by exhaustive scan of the history.
pub fn oracle_targets(w: &InputMatrix, history: &[ActionRecord], kind: LossKind, window_days: i64) -> Vec<Vec<u32>> {
    let last = w.valid.iter().rposition(|&v| v);
    (0..w.valid.len())
        .map(|i| {
            let Some(a_i) = w.actions[i] else { return Vec::new() };
            let t = a_i.timestamp;
            let mut out = Vec::new();
            match kind {
                LossKind::NextAction => {
                    let mut best: Option<&ActionRecord> = None;
                    for a in history {
                        if a.timestamp > t && oracle_positive(a) && best.is_none() {
                            best = Some(a);
                        }
                    }
                    out.extend(best.map(|a| a.pin_id));
                }
                LossKind::DenseAllAction | LossKind::AllAction => {
                    if kind == LossKind::AllAction && Some(i) != last {
                        return out;
                    }
                    for a in history {
                        if a.timestamp > t && a.timestamp <= t + window_days * DAY && oracle_positive(a) {
                            out.push(a.pin_id);
                        }
                    }
                }
            }
            out
        })
        .collect()
}

pub fn library_random_negatives(inst: &LossInstance, kind: LossKind) -> Vec<Vec<u32>> {
    let cfg = ObjectiveConfig {
        loss_kind: kind,
        ..inst.cfg.clone()
    };
    let targets: Vec<_> = inst.windows.iter().zip(&inst.histories).map(|(w, h)| targets_for(w, h, &cfg)).collect();
    sample_negatives(&targets, inst.pins.len(), &cfg, inst.seed, 0).unwrap()
}

/// Library loss; `None` when the batch has no contributing pairs.
pub fn library_loss(inst: &LossInstance, kind: LossKind) -> Option<f64> {
    let cfg = ObjectiveConfig {
        loss_kind: kind,
        ..inst.cfg.clone()
    };
    let targets: Vec<_> = inst.windows.iter().zip(&inst.histories).map(|(w, h)| targets_for(w, h, &cfg)).collect();
    let negs = library_random_negatives(inst, kind);
    let terms = build_batch_terms(&targets, &negs, cfg.use_in_batch_negatives).unwrap();
    let mut tape = Tape::new();
    let users: Vec<_> = inst.user_rows.iter().map(|u| tape.leaf(u.clone())).collect();
    let cand_rows: Vec<Vec<f64>> = terms.candidates.iter().map(|&p| inst.pin_vecs[p as usize].clone()).collect();
    let pin_out = if cand_rows.is_empty() {
        tape.leaf(Tensor::zeros(&[1, 3]))
    } else {
        tape.leaf(Tensor::from_rows(&cand_rows).unwrap())
    };
    match record_loss(&mut tape, &users, pin_out, &terms, cfg.temperature) {
        Ok(v) => Some(tape.value(v).data()[0]),
        Err(seqrank::Error::SkipBatch) => None,
        Err(e) => panic!("{e}"),
    }
}

/// Brute-force pair-level mean over (example, position, target).
pub fn oracle_loss(inst: &LossInstance, kind: LossKind) -> Option<f64> {
    let targets: Vec<Vec<Vec<u32>>> = inst
        .windows
        .iter()
        .zip(&inst.histories)
        .map(|(w, h)| oracle_targets(w, h, kind, inst.cfg.window_days))
        .collect();
    let random = library_random_negatives(inst, kind);
    let tau = inst.cfg.temperature;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for b in 0..targets.len() {
        let own_all: BTreeSet<u32> = targets[b].iter().flatten().copied().collect();
        assert!(random[b].iter().all(|p| !own_all.contains(p)), "random negative collides with a target");
        let mut others = BTreeSet::new();
        if inst.cfg.use_in_batch_negatives {
            for (b2, t2) in targets.iter().enumerate() {
                if b2 != b {
                    others.extend(t2.iter().flatten().copied());
                }
            }
        }
        for (i, ts) in targets[b].iter().enumerate() {
            let own: BTreeSet<u32> = ts.iter().copied().collect();
            let negs: BTreeSet<u32> = random[b].iter().chain(&others).copied().filter(|p| !own.contains(p)).collect();
            let u = inst.user_rows[b].row(i);
            for &a in ts {
                let sp = dot(u, &inst.pin_vecs[a as usize]) / tau;
                let mut z = sp.exp();
                for &n in &negs {
                    z += (dot(u, &inst.pin_vecs[n as usize]) / tau).exp();
                }
                total += z.ln() - sp;
                pairs += 1;
            }
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}
