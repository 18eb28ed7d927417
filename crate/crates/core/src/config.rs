//! Flat `key = value` run configuration shared by every subcommand.
//! Precedence: flag > file > default.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::datasynth::WorldConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerConfig};
use crate::numerics::AdamConfig;
use crate::objective::{LossKind, ObjectiveConfig};
use crate::realtime::{RankerTrainConfig, RealtimeConfig};
use crate::train::TrainConfig;

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed"),
    ("n_users", "500", "synthetic users"),
    ("n_pins", "2000", "synthetic pins"),
    ("n_topics", "16", "pin topics (categories)"),
    ("d_pin", "16", "pin content embedding width"),
    ("horizon_days", "180", "simulated days"),
    ("drift_rate", "0.002", "daily interest drift"),
    ("pin_spread", "0.6", "pin noise around its topic centroid"),
    ("popularity_kappa", "4", "popularity sharpness"),
    ("popularity_sigma", "1", "log-normal popularity sigma"),
    ("sessions_per_day", "0.8", "mean sessions per user per day"),
    ("mean_session_actions", "4", "mean actions per session"),
    ("session_stickiness", "0.7", "probability a session keeps its topic"),
    ("explore_prob", "0.05", "probability of a uniform topic draw"),
    ("session_boost", "0.4", "in-session alignment boost for the opening topic"),
    ("max_actions", "32", "M, user sequence length (full scale 255)"),
    ("d_h", "32", "transformer width"),
    ("d_e", "16", "shared embedding width"),
    ("n_layers", "2", "user tower layers"),
    ("n_heads", "2", "user tower heads"),
    ("d_ffn", "64", "feed-forward width"),
    ("loss", "dense_all_action", "dense_all_action | all_action | next_action"),
    ("window_days", "28", "future window for targets"),
    ("temperature", "0.1", "softmax temperature"),
    ("negatives", "128", "uniform random negatives per example"),
    ("in_batch_negatives", "true", "add other examples' targets as negatives"),
    ("click_min_duration", "10", "seconds for a click to count as positive"),
    ("steps", "1500", "two-tower training steps"),
    ("batch_size", "16", "two-tower batch size"),
    ("lr", "0.002", "two-tower learning rate"),
    ("held_out_fraction", "0.2", "last fraction of user ids never trained on"),
    ("max_realtime", "32", "P, real-time actions (full scale 100)"),
    ("tmask", "3600", "inference time-window mask in seconds"),
    ("train_tmasks", "0,3600,86400", "T_mask values sampled during ranker training"),
    ("ranker_d_h", "32", "ranker width"),
    ("ranker_layers", "1", "ranker encoder layers"),
    ("ranker_heads", "2", "ranker heads"),
    ("ranker_d_ffn", "64", "ranker feed-forward width"),
    ("ranker_steps", "2000", "ranker training steps (0 skips the ranker)"),
    ("ranker_batch_size", "32", "ranker batch size"),
    ("ranker_lr", "0.001", "ranker learning rate"),
    ("seeds", "1,2,3", "seeds for the loss comparison"),
    ("eval_window_days", "14", "held-out future window"),
    ("corpus", "corpus", "corpus directory"),
    ("out", "out", "output directory"),
    ("checkpoint", "", "checkpoint path (empty: <out>/checkpoint.dsq)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub realtime: RealtimeConfig,
    pub ranker: RankerTrainConfig,
    pub seeds: Vec<u64>,
    pub eval_window_days: i64,
    pub corpus: String,
    pub out: String,
    pub checkpoint: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            realtime: RealtimeConfig::default(),
            ranker: RankerTrainConfig::default(),
            seeds: Vec::new(),
            eval_window_days: 0,
            corpus: String::new(),
            out: String::new(),
            checkpoint: String::new(),
        };
        for (k, v, _) in KEYS {
            c.set(k, v).expect("documented default parses");
        }
        c
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| num(key, x)).collect()
}

impl RunConfig {
    pub fn is_key(key: &str) -> bool {
        KEYS.iter().any(|(k, _, _)| *k == key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let w = &mut self.world;
        let t = &mut self.train;
        let m: &mut ModelConfig = &mut t.model;
        let tf: &mut TransformerConfig = &mut m.transformer;
        let o: &mut ObjectiveConfig = &mut t.objective;
        let r = &mut self.realtime;
        let rk = &mut self.ranker;
        let v = value.trim();
        match key {
            "seed" => {
                let s = num(key, v)?;
                w.seed = s;
                t.seed = s;
                rk.seed = s;
            }
            "n_users" => w.n_users = num(key, v)?,
            "n_pins" => w.n_pins = num(key, v)?,
            "n_topics" => w.n_topics = num(key, v)?,
            "d_pin" => {
                let d = num(key, v)?;
                w.d_pin = d;
                m.d_pin = d;
                r.d_pin = d;
            }
            "horizon_days" => w.horizon_days = num(key, v)?,
            "drift_rate" => w.drift_rate = num(key, v)?,
            "pin_spread" => w.pin_spread = num(key, v)?,
            "popularity_kappa" => w.popularity_kappa = num(key, v)?,
            "popularity_sigma" => w.popularity_sigma = num(key, v)?,
            "sessions_per_day" => w.sessions_per_day = num(key, v)?,
            "mean_session_actions" => w.mean_session_actions = num(key, v)?,
            "session_stickiness" => w.session_stickiness = num(key, v)?,
            "explore_prob" => w.explore_prob = num(key, v)?,
            "session_boost" => w.session_boost = num(key, v)?,
            "max_actions" => m.max_actions = num(key, v)?,
            "d_h" => tf.d_h = num(key, v)?,
            "d_e" => {
                let d = num(key, v)?;
                tf.d_e = d;
                r.d_e = d;
            }
            "n_layers" => tf.n_layers = num(key, v)?,
            "n_heads" => tf.n_heads = num(key, v)?,
            "d_ffn" => tf.d_ffn = num(key, v)?,
            "loss" => o.loss_kind = v.parse::<LossKind>()?,
            "window_days" => o.window_days = num(key, v)?,
            "temperature" => o.temperature = num(key, v)?,
            "negatives" => o.n_random_negatives = num(key, v)?,
            "in_batch_negatives" => o.use_in_batch_negatives = num(key, v)?,
            "click_min_duration" => o.click_min_duration = num(key, v)?,
            "steps" => t.steps = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.adam = AdamConfig { lr: num(key, v)?, ..t.adam },
            "held_out_fraction" => {
                let f = num(key, v)?;
                t.held_out_fraction = f;
                rk.held_out_fraction = f;
            }
            "max_realtime" => r.max_realtime = num(key, v)?,
            "tmask" => r.mask_window_seconds = num(key, v)?,
            "train_tmasks" => rk.train_masks = list(key, v)?,
            "ranker_d_h" => r.d_h = num(key, v)?,
            "ranker_layers" => r.n_layers = num(key, v)?,
            "ranker_heads" => r.n_heads = num(key, v)?,
            "ranker_d_ffn" => r.d_ffn = num(key, v)?,
            "ranker_steps" => rk.steps = num(key, v)?,
            "ranker_batch_size" => rk.batch_size = num(key, v)?,
            "ranker_lr" => rk.adam = AdamConfig { lr: num(key, v)?, ..rk.adam },
            "seeds" => self.seeds = list(key, v)?,
            "eval_window_days" => self.eval_window_days = num(key, v)?,
            "corpus" => self.corpus = v.to_string(),
            "out" => self.out = v.to_string(),
            "checkpoint" => self.checkpoint = v.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment. Unknown and
    /// repeated keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (key, value, line) in parse_pairs(text)? {
            if !seen.insert(key.clone()) {
                return Err(Error::parse(line, format!("key `{key}` repeated")));
            }
            self.set(&key, &value).map_err(|e| Error::parse(line, e.to_string()))?;
        }
        Ok(())
    }

    /// Checks every section and the dimensions shared between them.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.realtime.validate()?;
        self.ranker.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.eval_window_days <= 0 {
            return Err(Error::Config("eval_window_days must be positive".into()));
        }
        Ok(())
    }

    /// Round-trippable `key = value` text of the effective configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn get(&self, key: &str) -> String {
        let t = &self.train;
        let tf = &t.model.transformer;
        let o = &t.objective;
        let r = &self.realtime;
        let rk = &self.ranker;
        let w = &self.world;
        let join = |v: &[i64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match key {
            "seed" => w.seed.to_string(),
            "n_users" => w.n_users.to_string(),
            "n_pins" => w.n_pins.to_string(),
            "n_topics" => w.n_topics.to_string(),
            "d_pin" => w.d_pin.to_string(),
            "horizon_days" => w.horizon_days.to_string(),
            "drift_rate" => w.drift_rate.to_string(),
            "pin_spread" => w.pin_spread.to_string(),
            "popularity_kappa" => w.popularity_kappa.to_string(),
            "popularity_sigma" => w.popularity_sigma.to_string(),
            "sessions_per_day" => w.sessions_per_day.to_string(),
            "mean_session_actions" => w.mean_session_actions.to_string(),
            "session_stickiness" => w.session_stickiness.to_string(),
            "explore_prob" => w.explore_prob.to_string(),
            "session_boost" => w.session_boost.to_string(),
            "max_actions" => t.model.max_actions.to_string(),
            "d_h" => tf.d_h.to_string(),
            "d_e" => tf.d_e.to_string(),
            "n_layers" => tf.n_layers.to_string(),
            "n_heads" => tf.n_heads.to_string(),
            "d_ffn" => tf.d_ffn.to_string(),
            "loss" => o.loss_kind.name().to_string(),
            "window_days" => o.window_days.to_string(),
            "temperature" => o.temperature.to_string(),
            "negatives" => o.n_random_negatives.to_string(),
            "in_batch_negatives" => o.use_in_batch_negatives.to_string(),
            "click_min_duration" => o.click_min_duration.to_string(),
            "steps" => t.steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.adam.lr.to_string(),
            "held_out_fraction" => t.held_out_fraction.to_string(),
            "max_realtime" => r.max_realtime.to_string(),
            "tmask" => r.mask_window_seconds.to_string(),
            "train_tmasks" => join(&rk.train_masks),
            "ranker_d_h" => r.d_h.to_string(),
            "ranker_layers" => r.n_layers.to_string(),
            "ranker_heads" => r.n_heads.to_string(),
            "ranker_d_ffn" => r.d_ffn.to_string(),
            "ranker_steps" => rk.steps.to_string(),
            "ranker_batch_size" => rk.batch_size.to_string(),
            "ranker_lr" => rk.adam.lr.to_string(),
            "seeds" => self.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            "eval_window_days" => self.eval_window_days.to_string(),
            "corpus" => self.corpus.clone(),
            "out" => self.out.clone(),
            "checkpoint" => self.checkpoint.clone(),
            _ => String::new(),
        }
    }
}

/// `(key, value, line)` triples of a `key = value` text.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got `{line}`")))?;
        let k = k.trim();
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(Error::parse(i + 1, format!("bad key `{k}`")));
        }
        out.push((k.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.render()).unwrap();
        assert_eq!(c, d);
        assert_eq!(KEYS.len(), KEYS.iter().map(|k| k.0).collect::<BTreeSet<_>>().len());
    }

    #[test]
    fn rejects_unknown_and_repeated() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("steps = 1\nsteps = 2").is_err());
        assert!(c.apply_text("steps").is_err());
        assert!(c.apply_text("loss = nope").is_err());
    }
}
