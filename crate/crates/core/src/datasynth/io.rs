//! On-disk corpus: one JSON object per line, fixed field order.
//!
//! A world directory holds `meta.json` (generator config), `pins.jsonl`,
//! `users.jsonl` and `corpus.jsonl`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActionRecord, ActionType, Pin, Surface, UserHistory, World, WorldConfig};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const PINS_FILE: &str = "pins.jsonl";
pub const USERS_FILE: &str = "users.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionLine {
    user_id: u32,
    pin_id: u32,
    ts: i64,
    #[serde(rename = "type")]
    kind: ActionType,
    dur: f64,
    surface: Surface,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PinLine {
    pin_id: u32,
    topic: u32,
    embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserLine {
    user_id: u32,
    drift_rate: f64,
    interest_mixture: Vec<f64>,
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain structs serialise")
}

pub fn render_action_line(user_id: u32, a: &ActionRecord) -> String {
    json_line(&ActionLine {
        user_id,
        pin_id: a.pin_id,
        ts: a.timestamp,
        kind: a.action_type,
        dur: a.duration,
        surface: a.surface,
    })
}

pub fn render_pin_line(p: &Pin) -> String {
    json_line(&PinLine {
        pin_id: p.pin_id,
        topic: p.topic_id,
        embedding: p.embedding.clone(),
    })
}

pub fn render_user_line(u: &UserHistory) -> String {
    json_line(&UserLine {
        user_id: u.user_id,
        drift_rate: u.drift_rate,
        interest_mixture: u.interest_mixture.clone(),
    })
}

fn from_json<'a, T: Deserialize<'a>>(s: &'a str, line: usize) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::parse(line, e.to_string()))
}

/// Parses one corpus line into `(user_id, action)`.
pub fn parse_action_line(s: &str, line: usize) -> Result<(u32, ActionRecord)> {
    let l: ActionLine = from_json(s, line)?;
    if !l.dur.is_finite() || l.dur < 0.0 {
        return Err(Error::parse(line, format!("duration {} is not a finite non-negative number", l.dur)));
    }
    Ok((
        l.user_id,
        ActionRecord {
            pin_id: l.pin_id,
            timestamp: l.ts,
            action_type: l.kind,
            duration: l.dur,
            surface: l.surface,
        },
    ))
}

pub fn parse_pin_line(s: &str, line: usize) -> Result<Pin> {
    let l: PinLine = from_json(s, line)?;
    let norm = l.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
    if l.embedding.len() < 2 || !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
        return Err(Error::parse(line, "pin embedding must be a unit vector of width >= 2"));
    }
    Ok(Pin {
        pin_id: l.pin_id,
        topic_id: l.topic,
        embedding: l.embedding,
    })
}

/// Parses one user line; the returned history has no actions yet.
pub fn parse_user_line(s: &str, line: usize) -> Result<UserHistory> {
    let l: UserLine = from_json(s, line)?;
    let total: f64 = l.interest_mixture.iter().sum();
    if l.interest_mixture.iter().any(|w| !w.is_finite() || *w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::parse(line, "interest mixture must be a probability vector"));
    }
    if !l.drift_rate.is_finite() || l.drift_rate < 0.0 {
        return Err(Error::parse(line, "drift_rate must be finite and >= 0"));
    }
    Ok(UserHistory {
        user_id: l.user_id,
        interest_mixture: l.interest_mixture,
        drift_rate: l.drift_rate,
        actions: Vec::new(),
    })
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        w.write_all(l.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_world(world: &World, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = serde_json::to_string_pretty(&world.config).expect("config serialises");
    fs::write(dir.join(META_FILE), meta + "\n")?;
    write_lines(&dir.join(PINS_FILE), world.pins.iter().map(render_pin_line))?;
    write_lines(&dir.join(USERS_FILE), world.users.iter().map(render_user_line))?;
    write_lines(
        &dir.join(CORPUS_FILE),
        world
            .users
            .iter()
            .flat_map(|u| u.actions.iter().map(move |a| render_action_line(u.user_id, a))),
    )
}

fn for_each_line(path: &Path, mut f: impl FnMut(&str, usize) -> Result<()>) -> Result<()> {
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            f(&line, i + 1)?;
        }
    }
    Ok(())
}

pub fn read_world(dir: &Path) -> Result<World> {
    let meta = fs::read_to_string(dir.join(META_FILE))?;
    let config: WorldConfig =
        serde_json::from_str(&meta).map_err(|e| Error::parse(0, format!("{META_FILE}: {e}")))?;
    config.validate()?;

    let mut pins = Vec::new();
    for_each_line(&dir.join(PINS_FILE), |s, line| {
        let p = parse_pin_line(s, line)?;
        if p.pin_id as usize != pins.len() {
            return Err(Error::parse(line, format!("expected pin_id {}, got {}", pins.len(), p.pin_id)));
        }
        if p.topic_id as usize >= config.n_topics || p.embedding.len() != config.d_pin {
            return Err(Error::parse(line, "pin topic or embedding width disagrees with meta.json"));
        }
        pins.push(p);
        Ok(())
    })?;
    if pins.len() != config.n_pins {
        return Err(Error::parse(0, format!("{PINS_FILE} holds {} pins, meta says {}", pins.len(), config.n_pins)));
    }

    let mut users: Vec<UserHistory> = Vec::new();
    for_each_line(&dir.join(USERS_FILE), |s, line| {
        let u = parse_user_line(s, line)?;
        if u.user_id as usize != users.len() || u.interest_mixture.len() != config.n_topics {
            return Err(Error::parse(line, "user ids must be contiguous and mixtures n_topics wide"));
        }
        users.push(u);
        Ok(())
    })?;
    if users.len() != config.n_users {
        return Err(Error::parse(0, format!("{USERS_FILE} holds {} users, meta says {}", users.len(), config.n_users)));
    }

    for_each_line(&dir.join(CORPUS_FILE), |s, line| {
        let (uid, a) = parse_action_line(s, line)?;
        if a.pin_id as usize >= pins.len() {
            return Err(Error::parse(line, format!("unknown pin {}", a.pin_id)));
        }
        let user = users
            .get_mut(uid as usize)
            .ok_or_else(|| Error::parse(line, format!("unknown user {uid}")))?;
        if user.actions.last().is_some_and(|prev| prev.timestamp > a.timestamp) {
            return Err(Error::parse(line, format!("timestamps of user {uid} decrease")));
        }
        user.actions.push(a);
        Ok(())
    })?;

    Ok(World { config, pins, users })
}
