//! Action features and the right-aligned input window.

use std::f64::consts::TAU;
use std::rc::Rc;

use rand::Rng;

use crate::datasynth::{ActionRecord, ActionType, Pin, Surface, DAY};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const N_TIME_FEATURES: usize = 4;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Maximum actions per window (`M`).
    pub max_actions: usize,
    pub d_pin: usize,
    pub d_h: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            max_actions: 64,
            d_pin: 16,
            d_h: 32,
        }
    }
}

impl EncoderConfig {
    pub fn d_feat(&self) -> usize {
        d_feat(self.d_pin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_actions == 0 || self.d_pin < 2 || self.d_h == 0 {
            return Err(Error::Config("encoder needs M >= 1, d_pin >= 2, d_h >= 1".into()));
        }
        Ok(())
    }
}

pub fn d_feat(d_pin: usize) -> usize {
    d_pin + ActionType::ALL.len() + Surface::ALL.len() + 1 + N_TIME_FEATURES
}

/// One feature slot group of the action vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSlot {
    pub name: &'static str,
    pub start: usize,
    pub width: usize,
    pub encoding: &'static str,
}

pub fn feature_layout(d_pin: usize) -> Vec<FeatureSlot> {
    let groups: [(&'static str, usize, &'static str); 8] = [
        ("pin_embedding", d_pin, "synthetic unit-norm pin content embedding"),
        ("action_type", ActionType::ALL.len(), "one-hot: repin, click, closeup, hide, reaction, comment"),
        ("surface", Surface::ALL.len(), "one-hot: homefeed, related_pins, search"),
        ("duration", 1, "log1p(duration seconds)"),
        ("age", 1, "log1p(ref_time - timestamp, seconds)"),
        ("hour_sin", 1, "sin(2π · second_of_day / 86400)"),
        ("hour_cos", 1, "cos(2π · second_of_day / 86400)"),
        ("day_of_week", 1, "weekday / 7, Monday = 0, UTC"),
    ];
    let mut start = 0;
    groups
        .into_iter()
        .map(|(name, width, encoding)| {
            let slot = FeatureSlot { name, start, width, encoding };
            start += width;
            slot
        })
        .collect()
}

/// Markdown table of [`feature_layout`], the content of `FEATURES.md`.
pub fn features_markdown(d_pin: usize) -> String {
    let mut s = format!(
        "# Action feature layout\n\nGenerated by `seqrank::encoder::features_markdown({d_pin})`; d_feat = {}.\n\n",
        d_feat(d_pin)
    );
    s.push_str("| columns | feature | width | encoding |\n|---|---|---|---|\n");
    for f in feature_layout(d_pin) {
        let cols = if f.width == 1 {
            f.start.to_string()
        } else {
            format!("{}..{}", f.start, f.start + f.width - 1)
        };
        s.push_str(&format!("| {cols} | {} | {} | {} |\n", f.name, f.width, f.encoding));
    }
    s
}

pub fn encode_action(a: &ActionRecord, pin: &Pin, ref_time: i64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(d_feat(pin.embedding.len()));
    encode_action_into(a, pin, ref_time, &mut out)?;
    Ok(out)
}

fn encode_action_into(a: &ActionRecord, pin: &Pin, ref_time: i64, out: &mut Vec<f64>) -> Result<()> {
    if pin.pin_id != a.pin_id {
        return Err(Error::Config(format!("pin {} given for action on pin {}", pin.pin_id, a.pin_id)));
    }
    if a.timestamp > ref_time {
        return Err(Error::TemporalOrder {
            action_ts: a.timestamp,
            ref_time,
        });
    }
    out.extend_from_slice(&pin.embedding);
    out.extend(ActionType::ALL.iter().map(|&t| (t == a.action_type) as u8 as f64));
    out.extend(Surface::ALL.iter().map(|&s| (s == a.surface) as u8 as f64));
    out.push(a.duration.ln_1p());
    out.push(((ref_time - a.timestamp) as f64).ln_1p());
    let angle = TAU * a.timestamp.rem_euclid(DAY) as f64 / DAY as f64;
    out.push(angle.sin());
    out.push(angle.cos());
    // 1970-01-01 was a Thursday.
    out.push(((a.timestamp.div_euclid(DAY) + 3).rem_euclid(7)) as f64 / 7.0);
    Ok(())
}

/// A right-aligned window of at most `M` actions.
#[derive(Clone, Debug, PartialEq)]
pub struct InputMatrix {
    /// `[M × d_feat]`, padding rows zero.
    pub features: Tensor,
    pub valid: Vec<bool>,
    /// The action at each row, `None` for padding.
    pub actions: Vec<Option<ActionRecord>>,
}

impl InputMatrix {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn last_valid(&self) -> Option<usize> {
        self.valid.iter().rposition(|&v| v)
    }
}

/// Keeps the `M` most recent actions at or before `cut_time`, ascending by
/// timestamp (ties keep storage order) and right-aligned.
pub fn build_input_matrix(actions: &[ActionRecord], pins: &[Pin], cut_time: i64, cfg: &EncoderConfig) -> Result<InputMatrix> {
    cfg.validate()?;
    let mut eligible: Vec<&ActionRecord> = actions.iter().filter(|a| a.timestamp <= cut_time).collect();
    if eligible.is_empty() {
        return Err(Error::EmptyInput(cut_time));
    }
    eligible.sort_by_key(|a| a.timestamp);
    let kept = &eligible[eligible.len().saturating_sub(cfg.max_actions)..];
    let m = cfg.max_actions;
    let width = cfg.d_feat();
    let pad = m - kept.len();

    let mut data = vec![0.0; pad * width];
    data.reserve(kept.len() * width);
    for a in kept {
        let pin = pins
            .get(a.pin_id as usize)
            .ok_or_else(|| Error::Config(format!("unknown pin {}", a.pin_id)))?;
        if pin.embedding.len() != cfg.d_pin {
            return Err(Error::shape("encode_action", &[pin.embedding.len()], &[cfg.d_pin]));
        }
        encode_action_into(a, pin, cut_time, &mut data)?;
    }
    let mut actions_out = vec![None; pad];
    actions_out.extend(kept.iter().map(|a| Some(**a)));
    let mut valid = vec![false; pad];
    valid.extend(std::iter::repeat_n(true, kept.len()));
    Ok(InputMatrix {
        features: Tensor::new(vec![m, width], data)?,
        valid,
        actions: actions_out,
    })
}

/// Registers `{prefix}/input_proj/{w,b}` and `{prefix}/pos`.
pub fn init_params<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    store.insert_normal(&format!("{prefix}/input_proj/w"), &[cfg.d_feat(), cfg.d_h], INIT_STD, rng)?;
    store.insert_zeros(&format!("{prefix}/input_proj/b"), &[cfg.d_h])?;
    store.insert_normal(&format!("{prefix}/pos"), &[cfg.max_actions, cfg.d_h], INIT_STD, rng)?;
    Ok(())
}

pub fn apply_positional_encoding(tape: &mut Tape, x: Var, pos: Var) -> Result<Var> {
    tape.add(x, pos)
}

/// Projects `L ≤ M` feature rows to `d_h` and adds positional rows `0..L`.
pub fn embed(tape: &mut Tape, store: &ParamStore, prefix: &str, features: &Tensor) -> Result<Var> {
    let w = tape.param_named(store, &format!("{prefix}/input_proj/w"))?;
    let b = tape.param_named(store, &format!("{prefix}/input_proj/b"))?;
    let pos = tape.param_named(store, &format!("{prefix}/pos"))?;
    let rows = features.rows();
    let table_rows = tape.value(pos).rows();
    if rows > table_rows {
        return Err(Error::shape("positional_encoding", &[rows], &[table_rows]));
    }
    let x = tape.leaf(features.clone());
    let h = tape.matmul(x, w)?;
    let h = tape.add_row(h, b)?;
    let pos = if rows == table_rows {
        pos
    } else {
        tape.gather_rows(pos, (0..rows).collect::<Rc<[usize]>>())?
    };
    apply_positional_encoding(tape, h, pos)
}
