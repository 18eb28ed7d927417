//! User tower (causal PreNorm transformer) and pin tower (MLP), both emitting
//! L2-normalised embeddings in one space.

use std::rc::Rc;

use rand::Rng;

use crate::encoder::{self, EncoderConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const USER_TOWER: &str = "user_tower";
pub const PIN_TOWER: &str = "pin_tower";
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_h: usize,
    pub d_ffn: usize,
    pub d_e: usize,
    /// Accepted for completeness; only 0 is supported.
    pub dropout_rate: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_h: 32,
            d_ffn: 64,
            d_e: 16,
            dropout_rate: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_h == 0 || self.d_h % self.n_heads != 0 {
            return Err(Error::Config(format!("d_h {} not divisible by n_heads {}", self.d_h, self.n_heads)));
        }
        if self.d_e < 2 || self.d_ffn == 0 {
            return Err(Error::Config("d_e must be >= 2 and d_ffn >= 1".into()));
        }
        if self.dropout_rate != 0.0 {
            return Err(Error::Config("dropout is not supported; set dropout_rate = 0".into()));
        }
        Ok(())
    }
}

/// Everything needed to build both towers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub max_actions: usize,
    pub d_pin: usize,
    pub transformer: TransformerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_actions: 32,
            d_pin: 16,
            transformer: TransformerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            max_actions: self.max_actions,
            d_pin: self.d_pin,
            d_h: self.transformer.d_h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.transformer.validate()
    }
}

/// `allowed[i*L + j]` iff `j <= i` and `valid[j]`.
pub fn causal_mask(valid: &[bool]) -> Vec<bool> {
    let l = valid.len();
    (0..l * l).map(|k| (k % l) <= (k / l) && valid[k % l]).collect()
}

/// `allowed[i*L + j]` iff `valid[j]`.
pub fn full_mask(valid: &[bool]) -> Vec<bool> {
    let l = valid.len();
    (0..l * l).map(|k| valid[k % l]).collect()
}

pub(crate) fn affine<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<()> {
    store.insert_normal(&format!("{prefix}/w"), &[d_in, d_out], INIT_STD, rng)?;
    store.insert_zeros(&format!("{prefix}/b"), &[d_out])?;
    Ok(())
}

pub(crate) fn layer_norm_params(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert_full(&format!("{prefix}/g"), &[d], 1.0)?;
    store.insert_zeros(&format!("{prefix}/b"), &[d])?;
    Ok(())
}

pub fn init_mhsa<R: Rng>(store: &mut ParamStore, prefix: &str, d_h: usize, rng: &mut R) -> Result<()> {
    layer_norm_params(store, &format!("{prefix}/ln"), d_h)?;
    for slot in ["q", "k", "v", "o"] {
        affine(store, &format!("{prefix}/{slot}"), d_h, d_h, rng)?;
    }
    Ok(())
}

pub fn init_ffn<R: Rng>(store: &mut ParamStore, prefix: &str, d_h: usize, d_ffn: usize, rng: &mut R) -> Result<()> {
    layer_norm_params(store, &format!("{prefix}/ln"), d_h)?;
    affine(store, &format!("{prefix}/fc1"), d_h, d_ffn, rng)?;
    affine(store, &format!("{prefix}/fc2"), d_ffn, d_h, rng)?;
    Ok(())
}

pub fn init_user_tower<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let t = &cfg.transformer;
    encoder::init_params(store, USER_TOWER, &cfg.encoder(), rng)?;
    for l in 0..t.n_layers {
        init_mhsa(store, &format!("{USER_TOWER}/layer{l}/mhsa"), t.d_h, rng)?;
        init_ffn(store, &format!("{USER_TOWER}/layer{l}/ffn"), t.d_h, t.d_ffn, rng)?;
    }
    layer_norm_params(store, &format!("{USER_TOWER}/final_ln"), t.d_h)?;
    affine(store, &format!("{USER_TOWER}/head/fc1"), t.d_h, t.d_h, rng)?;
    affine(store, &format!("{USER_TOWER}/head/fc2"), t.d_h, t.d_e, rng)?;
    Ok(())
}

pub fn init_pin_tower<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    affine(store, &format!("{PIN_TOWER}/fc1"), cfg.d_pin, cfg.transformer.d_h, rng)?;
    affine(store, &format!("{PIN_TOWER}/fc2"), cfg.transformer.d_h, cfg.transformer.d_e, rng)?;
    Ok(())
}

/// Both towers, initialised from the `(seed, INIT)` stream.
pub fn init_two_tower(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = crate::rng::stream(seed, &[crate::rng::INIT]);
    let mut store = ParamStore::new();
    init_user_tower(&mut store, cfg, &mut rng)?;
    init_pin_tower(&mut store, cfg, &mut rng)?;
    Ok(store)
}

pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param_named(store, &format!("{prefix}/w"))?;
    let b = tape.param_named(store, &format!("{prefix}/b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub(crate) fn norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param_named(store, &format!("{prefix}/g"))?;
    let b = tape.param_named(store, &format!("{prefix}/b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// `x + MHSA(LayerNorm(x))` with an explicit `[L×L]` allow-mask. Rows whose
/// mask row is empty receive no attention output (residual only).
pub fn mhsa_block(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, allowed: &[bool], n_heads: usize) -> Result<Var> {
    let l = tape.value(x).rows();
    let d_h = tape.value(x).cols();
    if allowed.len() != l * l {
        return Err(Error::shape("mhsa_block mask", &[allowed.len()], &[l * l]));
    }
    if n_heads == 0 || d_h % n_heads != 0 {
        return Err(Error::Config(format!("d_h {d_h} not divisible by {n_heads} heads")));
    }
    let d_k = d_h / n_heads;
    let h = norm(tape, store, &format!("{prefix}/ln"), x)?;
    let q = linear(tape, store, &format!("{prefix}/q"), h)?;
    let k = linear(tape, store, &format!("{prefix}/k"), h)?;
    let v = linear(tape, store, &format!("{prefix}/v"), h)?;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let qh = tape.slice_cols(q, head * d_k, d_k)?;
        let kh = tape.slice_cols(k, head * d_k, d_k)?;
        let vh = tape.slice_cols(v, head * d_k, d_k)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.masked_softmax(s, allowed)?;
        heads.push(tape.matmul(a, vh)?);
    }
    let cat = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let o = linear(tape, store, &format!("{prefix}/o"), cat)?;
    tape.add(x, o)
}

/// `x + fc2(gelu(fc1(LayerNorm(x))))`.
pub fn ffn_block(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = norm(tape, store, &format!("{prefix}/ln"), x)?;
    let h = linear(tape, store, &format!("{prefix}/fc1"), h)?;
    let h = tape.gelu(h);
    let h = linear(tape, store, &format!("{prefix}/fc2"), h)?;
    tape.add(x, h)
}

fn zero_invalid(tape: &mut Tape, x: Var, valid: &[bool]) -> Result<Var> {
    if valid.iter().all(|&v| v) {
        return Ok(x);
    }
    let f: Rc<[f64]> = valid.iter().map(|&v| v as u8 as f64).collect();
    tape.row_scale(x, f)
}

/// Records the user tower on `tape`. `features` holds `L ≤ M` rows; the output
/// is `[L × d_e]` with unit-norm valid rows and zero invalid rows.
pub fn user_tower_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &TransformerConfig,
    features: &Tensor,
    valid: &[bool],
) -> Result<Var> {
    if valid.len() != features.rows() {
        return Err(Error::shape("user_tower validity", &[valid.len()], &[features.rows()]));
    }
    let mask = causal_mask(valid);
    let mut x = encoder::embed(tape, store, USER_TOWER, features)?;
    for l in 0..cfg.n_layers {
        x = mhsa_block(tape, store, &format!("{USER_TOWER}/layer{l}/mhsa"), x, &mask, cfg.n_heads)?;
        x = ffn_block(tape, store, &format!("{USER_TOWER}/layer{l}/ffn"), x)?;
    }
    let x = norm(tape, store, &format!("{USER_TOWER}/final_ln"), x)?;
    let x = linear(tape, store, &format!("{USER_TOWER}/head/fc1"), x)?;
    let x = tape.gelu(x);
    let x = linear(tape, store, &format!("{USER_TOWER}/head/fc2"), x)?;
    let x = tape.l2_normalize(x);
    zero_invalid(tape, x, valid)
}

/// Records the pin tower on `tape`: `[n × d_pin] → [n × d_e]`, unit rows.
pub fn pin_tower_forward(tape: &mut Tape, store: &ParamStore, pin_embeddings: &Tensor) -> Result<Var> {
    let x = tape.leaf(pin_embeddings.clone());
    let h = linear(tape, store, &format!("{PIN_TOWER}/fc1"), x)?;
    let h = tape.gelu(h);
    let h = linear(tape, store, &format!("{PIN_TOWER}/fc2"), h)?;
    Ok(tape.l2_normalize(h))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserTowerOutput {
    pub embeddings: Tensor,
    pub valid: Vec<bool>,
}

impl UserTowerOutput {
    /// The embedding at the most recent valid position.
    pub fn latest(&self) -> Option<&[f64]> {
        self.valid.iter().rposition(|&v| v).map(|i| self.embeddings.row(i))
    }
}

/// Inference-only user tower.
pub fn user_embeddings(store: &ParamStore, cfg: &TransformerConfig, features: &Tensor, valid: &[bool]) -> Result<UserTowerOutput> {
    let mut tape = Tape::new();
    let out = user_tower_forward(&mut tape, store, cfg, features, valid)?;
    Ok(UserTowerOutput {
        embeddings: tape.value(out).clone(),
        valid: valid.to_vec(),
    })
}

/// Inference-only pin tower.
pub fn pin_embeddings(store: &ParamStore, pin_embeddings: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = pin_tower_forward(&mut tape, store, pin_embeddings)?;
    Ok(tape.value(out).clone())
}
