//! Real-time ranker: the last `P` actions pass through a bidirectional MHSA
//! block, then join a candidate-pin token and a long-term user token inside a
//! transformer encoder whose candidate output is squashed to an engagement
//! probability. Time-window masks hide actions newer than `T_mask`.

use std::collections::HashMap;
use std::rc::Rc;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::datasynth::{is_positive, ActionRecord, ActionType, Pin, Surface, World, DAY, T0};
use crate::encoder::{build_input_matrix, d_feat, encode_action};
use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::model::{self, affine, ffn_block, full_mask, layer_norm_params, linear, mhsa_block, norm, ModelConfig};
use crate::numerics::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::rng;
use crate::train::split_users;

pub const RANKER: &str = "ranker";
/// Mask sentinel that hides every action.
pub const MASK_ALL: i64 = i64::MAX;
const ROLE_CANDIDATE: usize = 0;
const ROLE_LONG_TERM: usize = 1;
const ROLE_REALTIME: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct RealtimeConfig {
    /// `P`, the number of most recent actions kept.
    pub max_realtime: usize,
    /// Inference-time `T_mask` in seconds.
    pub mask_window_seconds: i64,
    pub d_pin: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
}

impl Default for RealtimeConfig {
    fn default() -> Self {
        Self {
            max_realtime: 32,
            mask_window_seconds: 3600,
            d_pin: 16,
            d_e: 16,
            d_h: 32,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 64,
        }
    }
}

impl RealtimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_realtime == 0 {
            return Err(Error::Config("P must be at least 1".into()));
        }
        if self.mask_window_seconds < 0 {
            return Err(Error::Config("T_mask must be non-negative".into()));
        }
        if [self.d_pin, self.d_e, self.d_h, self.n_layers, self.d_ffn].contains(&0) {
            return Err(Error::Config("ranker dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_h % self.n_heads != 0 {
            return Err(Error::Config(format!("d_h {} not divisible by {} heads", self.d_h, self.n_heads)));
        }
        Ok(())
    }
}

/// One scoring request.
#[derive(Clone, Debug, PartialEq)]
pub struct RankRequest {
    /// Unit-norm long-term user embedding.
    pub long_term: Vec<f64>,
    pub realtime: Vec<ActionRecord>,
    pub candidate: u32,
    pub request_time: i64,
}

/// `valid[i]` iff `actions[i].timestamp <= request_time − t_mask`.
pub fn time_window_mask(actions: &[ActionRecord], request_time: i64, t_mask: i64) -> Vec<bool> {
    let limit = request_time.saturating_sub(t_mask);
    actions.iter().map(|a| t_mask != MASK_ALL && a.timestamp <= limit).collect()
}

/// Real-time token features: `[P × d_feat]`, right-aligned, the `P` most
/// recent actions that survive the time-window mask. Masked actions take no
/// slot and are never read; padding rows are zero.
pub fn realtime_features(actions: &[ActionRecord], pins: &[Pin], request_time: i64, t_mask: i64, cfg: &RealtimeConfig) -> Result<(Tensor, Vec<bool>)> {
    let p = cfg.max_realtime;
    let mut kept: Vec<&ActionRecord> = actions
        .iter()
        .zip(time_window_mask(actions, request_time, t_mask))
        .filter_map(|(a, v)| v.then_some(a))
        .collect();
    kept.sort_by_key(|a| a.timestamp);
    let kept = &kept[kept.len().saturating_sub(p)..];
    let mut features = Tensor::zeros(&[p, d_feat(cfg.d_pin)]);
    let mut valid = vec![false; p];
    let offset = p - kept.len();
    for (i, a) in kept.iter().enumerate() {
        let pin = pins
            .get(a.pin_id as usize)
            .ok_or_else(|| Error::Config(format!("unknown pin {}", a.pin_id)))?;
        let row = features.row_mut(offset + i);
        row.copy_from_slice(&encode_action(a, pin, request_time)?);
        scale_pin(&mut row[..cfg.d_pin]);
        valid[offset + i] = true;
    }
    Ok((features, valid))
}

/// Unit-norm pin embeddings have coordinates of order `1/sqrt(d_pin)`; lift
/// them to the scale of the other action features.
fn scale_pin(v: &mut [f64]) {
    let f = (v.len() as f64).sqrt();
    v.iter_mut().for_each(|x| *x *= f);
}

pub fn init_ranker(cfg: &RealtimeConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut r = rng::stream(seed, &[rng::RANKER, rng::INIT]);
    let mut s = ParamStore::new();
    let d = cfg.d_h;
    affine(&mut s, &format!("{RANKER}/rt/input_proj"), d_feat(cfg.d_pin), d, &mut r)?;
    model::init_mhsa(&mut s, &format!("{RANKER}/rt/mhsa"), d, &mut r)?;
    affine(&mut s, &format!("{RANKER}/candidate_proj"), cfg.d_pin, d, &mut r)?;
    affine(&mut s, &format!("{RANKER}/long_term_proj"), cfg.d_e, d, &mut r)?;
    s.insert_normal(&format!("{RANKER}/type"), &[3, d], crate::encoder::INIT_STD, &mut r)?;
    for l in 0..cfg.n_layers {
        model::init_mhsa(&mut s, &format!("{RANKER}/layer{l}/mhsa"), d, &mut r)?;
        model::init_ffn(&mut s, &format!("{RANKER}/layer{l}/ffn"), d, cfg.d_ffn, &mut r)?;
    }
    layer_norm_params(&mut s, &format!("{RANKER}/final_ln"), d)?;
    affine(&mut s, &format!("{RANKER}/head"), d, 1, &mut r)?;
    // Fan-in scaling: std 1/sqrt(d_in) for every weight matrix.
    for p in s.iter_mut().filter(|p| p.name.ends_with("/w")) {
        let f = 1.0 / ((p.value.rows() as f64).sqrt() * crate::encoder::INIT_STD);
        p.value.data_mut().iter_mut().for_each(|v| *v *= f);
    }
    Ok(s)
}

/// `[P × d_h]`: projection, one non-causal PreNorm MHSA block over valid
/// tokens, masked rows zeroed.
pub fn realtime_encode(tape: &mut Tape, store: &ParamStore, cfg: &RealtimeConfig, features: &Tensor, valid: &[bool]) -> Result<Var> {
    if valid.len() != features.rows() {
        return Err(Error::shape("realtime_encode validity", &[valid.len()], &[features.rows()]));
    }
    if !valid.iter().any(|&v| v) {
        return Ok(tape.leaf(Tensor::zeros(&[features.rows(), cfg.d_h])));
    }
    let x = tape.leaf(features.clone());
    let x = linear(tape, store, &format!("{RANKER}/rt/input_proj"), x)?;
    let x = mhsa_block(tape, store, &format!("{RANKER}/rt/mhsa"), x, &full_mask(valid), cfg.n_heads)?;
    let keep: Rc<[f64]> = valid.iter().map(|&v| v as u8 as f64).collect();
    tape.row_scale(x, keep)
}

/// Pre-sigmoid engagement logit, `[1 × 1]`.
pub fn ranker_logit(tape: &mut Tape, store: &ParamStore, cfg: &RealtimeConfig, req: &RankRequest, pins: &[Pin], t_mask: i64) -> Result<Var> {
    if req.long_term.len() != cfg.d_e {
        return Err(Error::Config(format!(
            "long-term embedding of length {} required, got {}",
            cfg.d_e,
            req.long_term.len()
        )));
    }
    if let Some(a) = req.realtime.iter().find(|a| a.timestamp > req.request_time) {
        return Err(Error::TemporalOrder {
            action_ts: a.timestamp,
            ref_time: req.request_time,
        });
    }
    let cand = pins
        .get(req.candidate as usize)
        .ok_or_else(|| Error::Config(format!("unknown candidate pin {}", req.candidate)))?;
    let (features, rt_valid) = realtime_features(&req.realtime, pins, req.request_time, t_mask, cfg)?;

    let mut c = cand.embedding.clone();
    scale_pin(&mut c);
    let c = tape.leaf(Tensor::new(vec![1, cfg.d_pin], c)?);
    let c = linear(tape, store, &format!("{RANKER}/candidate_proj"), c)?;
    let u = tape.leaf(Tensor::new(vec![1, cfg.d_e], req.long_term.clone())?);
    let u = linear(tape, store, &format!("{RANKER}/long_term_proj"), u)?;
    let rt = realtime_encode(tape, store, cfg, &features, &rt_valid)?;
    let x = tape.concat_rows(&[c, u, rt])?;

    let roles: Rc<[usize]> = [ROLE_CANDIDATE, ROLE_LONG_TERM]
        .into_iter()
        .chain(std::iter::repeat_n(ROLE_REALTIME, cfg.max_realtime))
        .collect();
    let table = tape.param_named(store, &format!("{RANKER}/type"))?;
    let types = tape.gather_rows(table, roles)?;
    let mut x = tape.add(x, types)?;

    let valid: Vec<bool> = [true, true].into_iter().chain(rt_valid).collect();
    let mask = full_mask(&valid);
    for l in 0..cfg.n_layers {
        x = mhsa_block(tape, store, &format!("{RANKER}/layer{l}/mhsa"), x, &mask, cfg.n_heads)?;
        x = ffn_block(tape, store, &format!("{RANKER}/layer{l}/ffn"), x)?;
    }
    let head = tape.gather_rows(x, Rc::from([ROLE_CANDIDATE]))?;
    let head = norm(tape, store, &format!("{RANKER}/final_ln"), head)?;
    linear(tape, store, &format!("{RANKER}/head"), head)
}

/// Engagement probability in (0, 1).
pub fn rank_score(store: &ParamStore, cfg: &RealtimeConfig, req: &RankRequest, pins: &[Pin], t_mask: i64) -> Result<f64> {
    let mut tape = Tape::new();
    let z = ranker_logit(&mut tape, store, cfg, req, pins, t_mask)?;
    Ok(sigmoid(tape.value(z).data()[0]))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Long-term embeddings refreshed daily: the user tower over every action
/// strictly before the UTC day containing the request.
pub struct LongTermEmbedder<'a> {
    world: &'a World,
    params: &'a ParamStore,
    cfg: &'a ModelConfig,
    cache: HashMap<(u32, i64), Option<Rc<[f64]>>>,
}

impl<'a> LongTermEmbedder<'a> {
    pub fn new(world: &'a World, params: &'a ParamStore, cfg: &'a ModelConfig) -> Self {
        Self {
            world,
            params,
            cfg,
            cache: HashMap::new(),
        }
    }

    pub fn day_start(t: i64) -> i64 {
        T0 + (t - T0).div_euclid(DAY) * DAY
    }

    /// `None` when the user has no action before that day.
    pub fn get(&mut self, user_id: u32, request_time: i64) -> Result<Option<Rc<[f64]>>> {
        let day = Self::day_start(request_time);
        if let Some(hit) = self.cache.get(&(user_id, day)) {
            return Ok(hit.clone());
        }
        let user = self
            .world
            .users
            .get(user_id as usize)
            .ok_or_else(|| Error::Config(format!("unknown user {user_id}")))?;
        let value = if user.actions.first().is_some_and(|a| a.timestamp < day) {
            let w = build_input_matrix(&user.actions, &self.world.pins, day - 1, &self.cfg.encoder())?;
            let out = model::user_embeddings(self.params, &self.cfg.transformer, &w.features, &w.valid)?;
            Some(Rc::from(out.latest().expect("window has a valid row")))
        } else {
            None
        };
        self.cache.insert((user_id, day), value.clone());
        Ok(value)
    }
}

/// A replayed engagement: `actions[index]` of `user_id` is the candidate,
/// earlier actions the real-time sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankEvent {
    pub user_id: u32,
    pub index: usize,
    pub label: bool,
}

/// Events of `users` at or after `from_time` that have some earlier-day history.
pub fn replay_events(world: &World, users: std::ops::Range<u32>, from_time: i64) -> Vec<RankEvent> {
    let mut out = Vec::new();
    for uid in users {
        let actions = &world.users[uid as usize].actions;
        let Some(first) = actions.first() else { continue };
        for (index, a) in actions.iter().enumerate() {
            if a.timestamp >= from_time && first.timestamp < LongTermEmbedder::day_start(a.timestamp) {
                out.push(RankEvent {
                    user_id: uid,
                    index,
                    label: is_positive(a),
                });
            }
        }
    }
    out
}

/// The request an event replays, given its long-term embedding.
pub fn event_request(world: &World, e: &RankEvent, long_term: &[f64]) -> RankRequest {
    let actions = &world.users[e.user_id as usize].actions;
    let target = actions[e.index];
    RankRequest {
        long_term: long_term.to_vec(),
        realtime: actions[..e.index].to_vec(),
        candidate: target.pin_id,
        request_time: target.timestamp,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankerTrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// `T_mask` values sampled uniformly per training example.
    pub train_masks: Vec<i64>,
    pub held_out_fraction: f64,
}

impl Default for RankerTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            train_masks: vec![0, 3600, DAY],
            held_out_fraction: 0.2,
        }
    }
}

impl RankerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_masks.is_empty() || self.train_masks.iter().any(|&t| t < 0) {
            return Err(Error::Config("ranker training needs batch_size > 0 and non-negative T_mask choices".into()));
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::Config("held_out_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RankerOutcome {
    pub params: ParamStore,
    /// Mean BCE per step.
    pub losses: Vec<f64>,
}

/// Trains on `events` with binary cross-entropy, sampling one `T_mask` per
/// example from `cfg.train_masks`.
pub fn train_ranker_on(
    world: &World,
    events: &[RankEvent],
    long_term: &mut LongTermEmbedder<'_>,
    cfg: &RealtimeConfig,
    tcfg: &RankerTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<RankerOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if events.is_empty() {
        return Err(Error::Config("ranker training corpus is empty".into()));
    }
    let mut params = init_ranker(cfg, tcfg.seed)?;
    let mut adam = Adam::new(tcfg.adam);
    let mut losses = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let mut r = rng::stream(tcfg.seed, &[rng::RANKER, rng::BATCHES, step as u64]);
        let mut tape = Tape::new();
        let mut logits = Vec::with_capacity(tcfg.batch_size);
        let mut labels = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            let e = events[r.random_range(0..events.len())];
            let t_mask = *tcfg.train_masks.choose(&mut r).expect("non-empty");
            let actions = &world.users[e.user_id as usize].actions;
            let lt = long_term
                .get(e.user_id, actions[e.index].timestamp)?
                .ok_or_else(|| Error::Config("event without long-term history".into()))?;
            let req = event_request(world, &e, &lt);
            logits.push(ranker_logit(&mut tape, &params, cfg, &req, &world.pins, t_mask)?);
            labels.push(e.label as u8 as f64);
        }
        let z = tape.concat_rows(&logits)?;
        let total = tape.bce_with_logits(z, labels.into())?;
        let loss = tape.scale(total, 1.0 / tcfg.batch_size as f64);
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("ranker step {step}")));
        }
        let grads = tape.backward(loss)?;
        params.zero_grad();
        grads.accumulate_into(&tape, &mut params);
        adam.step(&mut params)?;
        on_step(step, value);
        losses.push(value);
    }
    params.clear_grad();
    Ok(RankerOutcome { params, losses })
}

/// Trains on every replayed event of the non-held-out users.
pub fn train_ranker(
    world: &World,
    long_term: &mut LongTermEmbedder<'_>,
    cfg: &RealtimeConfig,
    tcfg: &RankerTrainConfig,
    on_step: impl FnMut(usize, f64),
) -> Result<RankerOutcome> {
    let (train, _) = split_users(world.users.len(), tcfg.held_out_fraction);
    let events = replay_events(world, train, i64::MIN);
    train_ranker_on(world, &events, long_term, cfg, tcfg, on_step)
}

/// AUC of `rank_score` against event labels under inference mask `t_mask`.
pub fn ranker_auc(
    world: &World,
    events: &[RankEvent],
    long_term: &mut LongTermEmbedder<'_>,
    params: &ParamStore,
    cfg: &RealtimeConfig,
    t_mask: i64,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(events.len());
    let mut labels = Vec::with_capacity(events.len());
    for e in events {
        let actions = &world.users[e.user_id as usize].actions;
        let Some(lt) = long_term.get(e.user_id, actions[e.index].timestamp)? else { continue };
        scores.push(rank_score(params, cfg, &event_request(world, e, &lt), &world.pins, t_mask)?);
        labels.push(e.label);
    }
    auc(&scores, &labels)
}

/// Held-out users' events in the final `window_days`.
pub fn held_out_events(world: &World, held_out_fraction: f64, window_days: i64) -> Vec<RankEvent> {
    let (_, held) = split_users(world.users.len(), held_out_fraction);
    replay_events(world, held, world.horizon_end() - window_days * DAY)
}

/// 1-based ranks of `scores` (descending, ties by position).
fn ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        out[i] = r + 1;
    }
    out
}

/// Mean rank improvement of the category-`category` probes after appending
/// one repin of `engaged_pin` at `request_time − 1`.
pub fn responsiveness(
    params: &ParamStore,
    cfg: &RealtimeConfig,
    base: &RankRequest,
    pins: &[Pin],
    probe_pins: &[u32],
    category: u32,
    engaged_pin: u32,
    t_mask: i64,
) -> Result<f64> {
    let topic = |p: u32| {
        pins.get(p as usize)
            .map(|pin| pin.topic_id)
            .ok_or_else(|| Error::Config(format!("unknown probe pin {p}")))
    };
    let topics = probe_pins.iter().map(|&p| topic(p)).collect::<Result<Vec<_>>>()?;
    let distinct: std::collections::BTreeSet<u32> = topics.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Config("probe set must span at least two categories".into()));
    }
    if !distinct.contains(&category) || topic(engaged_pin)? != category {
        return Err(Error::Config(format!("probe set and engaged pin must include category {category}")));
    }
    let score_all = |req: &RankRequest| -> Result<Vec<f64>> {
        probe_pins
            .iter()
            .map(|&p| rank_score(params, cfg, &RankRequest { candidate: p, ..req.clone() }, pins, t_mask))
            .collect()
    };
    let before = ranks(&score_all(base)?);
    let mut engaged = base.clone();
    engaged.realtime.push(ActionRecord {
        pin_id: engaged_pin,
        timestamp: base.request_time - 1,
        action_type: ActionType::Repin,
        duration: 30.0,
        surface: Surface::Homefeed,
    });
    let after = ranks(&score_all(&engaged)?);
    let deltas: Vec<f64> = topics
        .iter()
        .zip(before.iter().zip(&after))
        .filter(|(&t, _)| t == category)
        .map(|(_, (&b, &a))| b as f64 - a as f64)
        .collect();
    Ok(deltas.iter().sum::<f64>() / deltas.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub n_users: usize,
    pub n_categories: usize,
    pub pins_per_category: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_categories: 6,
            pins_per_category: 4,
        }
    }
}

/// Mean responsiveness over held-out users probed at the horizon end, each
/// with a random probe set and category drawn from the `(seed, PROBE)` stream.
pub fn mean_responsiveness(
    world: &World,
    long_term: &mut LongTermEmbedder<'_>,
    params: &ParamStore,
    cfg: &RealtimeConfig,
    held_out_fraction: f64,
    probe: &ProbeConfig,
    seed: u64,
    t_mask: i64,
) -> Result<f64> {
    let n_topics = world.config.n_topics as u32;
    if probe.n_categories < 2 || probe.n_categories as u32 > n_topics {
        return Err(Error::Config("probe needs between 2 and n_topics categories".into()));
    }
    let mut by_topic: Vec<Vec<u32>> = vec![Vec::new(); n_topics as usize];
    for p in &world.pins {
        by_topic[p.topic_id as usize].push(p.pin_id);
    }
    let (_, held) = split_users(world.users.len(), held_out_fraction);
    let request_time = world.horizon_end();
    let mut r = rng::stream(seed, &[rng::PROBE]);
    let mut total = 0.0;
    let mut n = 0usize;
    for uid in held {
        if n == probe.n_users {
            break;
        }
        let Some(lt) = long_term.get(uid, request_time)? else { continue };
        let topics: Vec<u32> = rand::seq::index::sample(&mut r, n_topics as usize, probe.n_categories)
            .into_iter()
            .map(|t| t as u32)
            .collect();
        let mut probes = Vec::new();
        for (i, &t) in topics.iter().enumerate() {
            let k = probe.pins_per_category + usize::from(i == 0);
            probes.extend(by_topic[t as usize].choose_multiple(&mut r, k).copied());
        }
        let category = topics[0];
        // The first sampled pin of the probed category is the engagement, not a probe.
        let engaged = probes.remove(0);
        let base = RankRequest {
            long_term: lt.to_vec(),
            realtime: world.users[uid as usize].actions.clone(),
            candidate: probes[0],
            request_time,
        };
        total += responsiveness(params, cfg, &base, &world.pins, &probes, category, engaged, t_mask)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Eval("no held-out user has long-term history".into()));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(ts: i64) -> ActionRecord {
        ActionRecord {
            pin_id: 0,
            timestamp: ts,
            action_type: ActionType::Repin,
            duration: 1.0,
            surface: Surface::Search,
        }
    }

    #[test]
    fn mask_predicate() {
        let t = 100_000;
        let a = [act(t - 10), act(t - 7200)];
        assert_eq!(time_window_mask(&a, t, 3600), vec![false, true]);
        assert_eq!(time_window_mask(&a, t, 0), vec![true, true]);
        assert_eq!(time_window_mask(&a, t, MASK_ALL), vec![false, false]);
    }

    #[test]
    fn ranks_are_one_based() {
        assert_eq!(ranks(&[0.1, 0.9, 0.5]), vec![3, 1, 2]);
    }
}
