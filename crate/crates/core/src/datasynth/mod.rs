//! Seeded synthetic world: topic-clustered pins and users whose drifting
//! interest mixtures drive session-structured engagement histories.

pub mod io;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use io::{
    parse_action_line, parse_pin_line, parse_user_line, read_world, render_action_line, render_pin_line,
    render_user_line, write_world, CORPUS_FILE, META_FILE, PINS_FILE, USERS_FILE,
};

/// 2022-01-01T00:00:00Z, the first second of every synthetic horizon.
pub const T0: i64 = 1_640_995_200;
pub const DAY: i64 = 86_400;
pub const DEFAULT_CLICK_MIN_DURATION: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Repin,
    Click,
    Closeup,
    Hide,
    Reaction,
    Comment,
}

impl ActionType {
    pub const ALL: [ActionType; 6] = [
        ActionType::Repin,
        ActionType::Click,
        ActionType::Closeup,
        ActionType::Hide,
        ActionType::Reaction,
        ActionType::Comment,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionType::Repin => "repin",
            ActionType::Click => "click",
            ActionType::Closeup => "closeup",
            ActionType::Hide => "hide",
            ActionType::Reaction => "reaction",
            ActionType::Comment => "comment",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    Homefeed,
    RelatedPins,
    Search,
}

impl Surface {
    pub const ALL: [Surface; 3] = [Surface::Homefeed, Surface::RelatedPins, Surface::Search];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Surface::Homefeed => "homefeed",
            Surface::RelatedPins => "related_pins",
            Surface::Search => "search",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pin {
    pub pin_id: u32,
    pub topic_id: u32,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionRecord {
    pub pin_id: u32,
    pub timestamp: i64,
    pub action_type: ActionType,
    pub duration: f64,
    pub surface: Surface,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user_id: u32,
    pub interest_mixture: Vec<f64>,
    pub drift_rate: f64,
    pub actions: Vec<ActionRecord>,
}

/// Generator knobs. Counts and `horizon_days` are the primary inputs; the rest
/// shape the behaviour model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_topics: usize,
    pub n_pins: usize,
    pub n_users: usize,
    pub d_pin: usize,
    pub horizon_days: u32,
    /// Mixture interpolation speed per day towards the user's second mixture.
    pub drift_rate: f64,
    /// Norm of the noise added to a topic centroid before renormalising.
    pub pin_spread: f64,
    /// Popularity sharpness over cosine to the centroid.
    pub popularity_kappa: f64,
    /// Log-normal sigma of per-pin intrinsic popularity.
    pub popularity_sigma: f64,
    pub sessions_per_day: f64,
    pub mean_session_actions: f64,
    /// Probability that the next in-session action keeps the session topic.
    pub session_stickiness: f64,
    /// Probability of drawing a topic uniformly instead of from the mixture.
    pub explore_prob: f64,
    /// Short-term intent: in-session pins of the session's opening topic have
    /// alignment raised to `a + boost · (1 − a)`.
    pub session_boost: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_topics: 16,
            n_pins: 2000,
            n_users: 500,
            d_pin: 16,
            horizon_days: 180,
            drift_rate: 0.002,
            pin_spread: 0.6,
            popularity_kappa: 4.0,
            popularity_sigma: 1.0,
            sessions_per_day: 0.8,
            mean_session_actions: 4.0,
            session_stickiness: 0.7,
            explore_prob: 0.05,
            session_boost: 0.4,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_topics == 0 || self.n_pins == 0 || self.n_users == 0 || self.horizon_days == 0 {
            return bad("topic, pin, user counts and horizon must be positive");
        }
        if self.d_pin < 2 {
            return bad("d_pin must be at least 2");
        }
        if self.n_topics > self.n_pins {
            return bad("n_topics exceeds n_pins");
        }
        if self.horizon_days > 365 {
            return bad("horizon_days exceeds 365");
        }
        if self.n_pins > u32::MAX as usize || self.n_users > u32::MAX as usize {
            return bad("counts exceed u32 ids");
        }
        let probs = [self.session_stickiness, self.explore_prob, self.session_boost];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("session_stickiness, explore_prob and session_boost must lie in [0, 1]");
        }
        let nonneg = [self.drift_rate, self.pin_spread, self.popularity_kappa, self.popularity_sigma];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("drift_rate, pin_spread and popularity parameters must be finite and >= 0");
        }
        if !(self.sessions_per_day > 0.0 && self.sessions_per_day.is_finite()) {
            return bad("sessions_per_day must be positive");
        }
        if !(self.mean_session_actions >= 1.0 && self.mean_session_actions.is_finite()) {
            return bad("mean_session_actions must be at least 1");
        }
        Ok(())
    }

    pub fn horizon_end(&self) -> i64 {
        T0 + self.horizon_days as i64 * DAY
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub pins: Vec<Pin>,
    pub users: Vec<UserHistory>,
}

impl World {
    pub fn horizon_end(&self) -> i64 {
        self.config.horizon_end()
    }

    pub fn pin(&self, id: u32) -> Option<&Pin> {
        self.pins.get(id as usize)
    }
}

pub fn is_positive(a: &ActionRecord) -> bool {
    is_positive_with(a, DEFAULT_CLICK_MIN_DURATION)
}

/// Repins, reactions and comments always count; clicks only when long enough.
pub fn is_positive_with(a: &ActionRecord, click_min_duration: f64) -> bool {
    match a.action_type {
        ActionType::Repin | ActionType::Reaction | ActionType::Comment => true,
        ActionType::Click => a.duration >= click_min_duration,
        ActionType::Closeup | ActionType::Hide => false,
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..d).map(|_| normal.sample(rng) * scale).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn sparse_mixture(rng: &mut ChaCha8Rng, n_topics: usize) -> Vec<f64> {
    let k = rng.random_range(1..=3usize.min(n_topics));
    let picks = rand::seq::index::sample(rng, n_topics, k);
    let gamma = Gamma::new(1.0, 1.0).expect("gamma(1,1)");
    let mut mix = vec![0.0; n_topics];
    let mut total = 0.0;
    for t in picks.iter() {
        let w = gamma.sample(rng) + 1e-3;
        mix[t] = w;
        total += w;
    }
    mix.iter_mut().for_each(|w| *w /= total);
    mix
}

struct TopicPins {
    members: Vec<u32>,
    sampler: WeightedIndex<f64>,
}

fn build_pins(cfg: &WorldConfig) -> (Vec<Pin>, Vec<TopicPins>) {
    let mut rng = rng::stream(cfg.seed, &[rng::PINS]);
    let centroids: Vec<Vec<f64>> = (0..cfg.n_topics)
        .map(|_| {
            let mut c = unit_gaussian(&mut rng, cfg.d_pin, 1.0);
            normalize(&mut c);
            c
        })
        .collect();
    let per_dim = cfg.pin_spread / (cfg.d_pin as f64).sqrt();
    let mut pins = Vec::with_capacity(cfg.n_pins);
    let mut weights: Vec<Vec<f64>> = vec![Vec::new(); cfg.n_topics];
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); cfg.n_topics];
    let pop = Normal::new(0.0, cfg.popularity_sigma.max(f64::MIN_POSITIVE)).expect("popularity normal");
    for id in 0..cfg.n_pins {
        let topic = id % cfg.n_topics;
        let c = &centroids[topic];
        let noise = unit_gaussian(&mut rng, cfg.d_pin, per_dim);
        let mut e: Vec<f64> = c.iter().zip(&noise).map(|(a, b)| a + b).collect();
        normalize(&mut e);
        let cos: f64 = e.iter().zip(c).map(|(a, b)| a * b).sum();
        let z = if cfg.popularity_sigma > 0.0 { pop.sample(&mut rng) } else { 0.0 };
        weights[topic].push((cfg.popularity_kappa * cos + z).exp());
        members[topic].push(id as u32);
        pins.push(Pin {
            pin_id: id as u32,
            topic_id: topic as u32,
            embedding: e,
        });
    }
    let topics = members
        .into_iter()
        .zip(weights)
        .map(|(members, w)| TopicPins {
            members,
            sampler: WeightedIndex::new(w).expect("positive finite weights"),
        })
        .collect();
    (pins, topics)
}

fn sample_topic(rng: &mut ChaCha8Rng, mix: &[f64], explore: f64) -> usize {
    if rng.random_bool(explore) {
        return rng.random_range(0..mix.len());
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (t, &w) in mix.iter().enumerate() {
        acc += w;
        if u < acc {
            return t;
        }
    }
    mix.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn sample_engagement(rng: &mut ChaCha8Rng, alignment: f64) -> (ActionType, f64) {
    let p_pos = 0.15 + 0.6 * alignment;
    let p_hide = 0.35 * (1.0 - alignment);
    let p_closeup = 0.15;
    let u: f64 = rng.random();
    let exp = |mean: f64, rng: &mut ChaCha8Rng| Exp::new(1.0 / mean).expect("positive mean").sample(rng);
    if u < p_pos {
        let v: f64 = rng.random();
        if v < 0.45 {
            (ActionType::Repin, exp(15.0, rng))
        } else if v < 0.7 {
            (ActionType::Click, DEFAULT_CLICK_MIN_DURATION + exp(45.0, rng))
        } else if v < 0.9 {
            (ActionType::Reaction, exp(5.0, rng))
        } else {
            (ActionType::Comment, 20.0 + exp(40.0, rng))
        }
    } else if u < p_pos + p_hide {
        (ActionType::Hide, exp(3.0, rng))
    } else if u < p_pos + p_hide + p_closeup {
        (ActionType::Closeup, exp(20.0, rng))
    } else {
        // Bounce: a click that does not qualify as positive.
        (ActionType::Click, rng.random_range(0.0..DEFAULT_CLICK_MIN_DURATION * 0.99))
    }
}

fn sample_surface(rng: &mut ChaCha8Rng) -> Surface {
    let u: f64 = rng.random();
    if u < 0.6 {
        Surface::Homefeed
    } else if u < 0.85 {
        Surface::RelatedPins
    } else {
        Surface::Search
    }
}

fn round_duration(d: f64) -> f64 {
    (d * 1000.0).round() / 1000.0
}

fn generate_user(cfg: &WorldConfig, user_id: u32, pins: &[Pin], topics: &[TopicPins]) -> UserHistory {
    let mut rng = rng::stream(cfg.seed, &[rng::USERS, user_id as u64]);
    let start = sparse_mixture(&mut rng, cfg.n_topics);
    let target = sparse_mixture(&mut rng, cfg.n_topics);
    let rate = cfg.sessions_per_day * rng.random_range(0.5..1.5);
    let gap = Exp::new(rate / DAY as f64).expect("positive session rate");
    let in_session_gap = Exp::new(1.0 / 60.0).expect("positive gap rate");
    let continue_p = 1.0 - 1.0 / cfg.mean_session_actions;
    let end = cfg.horizon_end();

    let mut actions = Vec::new();
    let mut t = T0 as f64 + gap.sample(&mut rng);
    while (t as i64) < end {
        let days = (t - T0 as f64) / DAY as f64;
        let lambda = (cfg.drift_rate * days).min(1.0);
        let mix: Vec<f64> = start.iter().zip(&target).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
        let peak = mix.iter().cloned().fold(0.0, f64::max);
        let mut topic = sample_topic(&mut rng, &mix, cfg.explore_prob);
        let session_topic = topic as u32;
        let mut ts = t;
        loop {
            let tp = &topics[topic];
            let pin = &pins[tp.members[tp.sampler.sample(&mut rng)] as usize];
            let mut alignment = mix[pin.topic_id as usize] / peak;
            if pin.topic_id == session_topic {
                alignment += cfg.session_boost * (1.0 - alignment);
            }
            let (action_type, duration) = sample_engagement(&mut rng, alignment);
            actions.push(ActionRecord {
                pin_id: pin.pin_id,
                timestamp: ts as i64,
                action_type,
                duration: round_duration(duration),
                surface: sample_surface(&mut rng),
            });
            if !rng.random_bool(continue_p) {
                break;
            }
            ts += 5.0 + in_session_gap.sample(&mut rng);
            if ts as i64 >= end {
                break;
            }
            if !rng.random_bool(cfg.session_stickiness) {
                topic = sample_topic(&mut rng, &mix, cfg.explore_prob);
            }
        }
        t += gap.sample(&mut rng);
    }
    actions.sort_by_key(|a| a.timestamp);

    UserHistory {
        user_id,
        interest_mixture: start,
        drift_rate: cfg.drift_rate,
        actions,
    }
}

/// Builds the full world. A pure function of the config; each user draws from
/// its own `(seed, user_id)` stream.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let (pins, topics) = build_pins(cfg);
    let users = (0..cfg.n_users as u32).map(|u| generate_user(cfg, u, &pins, &topics)).collect();
    Ok(World {
        config: cfg.clone(),
        pins,
        users,
    })
}

/// Where each user's input window ends.
#[derive(Clone, Debug, PartialEq)]
pub enum CutPolicy {
    Fixed(i64),
    /// Users absent from the map are not emitted.
    PerUser(BTreeMap<u32, i64>),
}

impl CutPolicy {
    pub fn cut_for(&self, user_id: u32) -> Option<i64> {
        match self {
            CutPolicy::Fixed(t) => Some(*t),
            CutPolicy::PerUser(m) => m.get(&user_id).copied(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub user_id: u32,
    pub cut_time: i64,
    pub inputs: Vec<ActionRecord>,
    pub targets: Vec<ActionRecord>,
}

pub fn split_corpus(users: &[UserHistory], cut: &CutPolicy, window_days: i64) -> Result<Vec<TrainingExample>> {
    split_corpus_with(users, cut, window_days, DEFAULT_CLICK_MIN_DURATION)
}

pub fn split_corpus_with(
    users: &[UserHistory],
    cut: &CutPolicy,
    window_days: i64,
    click_min_duration: f64,
) -> Result<Vec<TrainingExample>> {
    if window_days <= 0 {
        return Err(Error::Config(format!("window_days must be positive, got {window_days}")));
    }
    let window = window_days * DAY;
    Ok(users
        .iter()
        .filter_map(|u| {
            let cut_time = cut.cut_for(u.user_id)?;
            let inputs = u.actions.iter().filter(|a| a.timestamp <= cut_time).copied().collect();
            let targets = u
                .actions
                .iter()
                .filter(|a| a.timestamp > cut_time && a.timestamp <= cut_time + window)
                .filter(|a| is_positive_with(a, click_min_duration))
                .copied()
                .collect();
            Some(TrainingExample {
                user_id: u.user_id,
                cut_time,
                inputs,
                targets,
            })
        })
        .collect())
}
