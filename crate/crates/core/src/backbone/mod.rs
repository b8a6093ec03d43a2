//! Per-correspondence classifier: perception layer, optional LFC block,
//! context-normalized residual blocks and a `relu(tanh(·))` head.
//!
//! Parameters are looked up by name under a prefix, so two stages can share a
//! [`ParamSet`]:
//!
//! | name | dims |
//! |------|------|
//! | `perc.w`, `perc.b` | `in × d`, `1 × d` |
//! | `lfc.w{h}` | `2d × d/h` per head |
//! | `lfc.wout`, `lfc.wprime` | `d × d`, `k × d` |
//! | `res{i}.w1`, `res{i}.b1`, `res{i}.w2`, `res{i}.b2` | `d × d`, `1 × d` |
//! | `head.w`, `head.b` | `d × 1`, `1 × 1` |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lfc::{lfc_block, LfcError, LfcVars};
use crate::numgrad::{Graph, NumError, ParamSet, ParamVars, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} input channels, got {got}")]
    InputWidth { expected: usize, got: usize },
    #[error(transparent)]
    Lfc(#[from] LfcError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub d: usize,
    pub blocks: usize,
    pub lfc_enabled: bool,
    pub lfc_k: usize,
    pub lfc_heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { in_channels: 4, d: 32, blocks: 6, lfc_enabled: true, lfc_k: 9, lfc_heads: 2 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: String| Err(BackboneError::InvalidConfig(m));
        if self.in_channels == 0 || self.d == 0 {
            return bad("input and hidden widths must be positive".into());
        }
        if self.blocks == 0 {
            return bad("need at least one residual block".into());
        }
        if self.lfc_k == 0 || self.lfc_heads == 0 {
            return bad("LFC neighbour and head counts must be positive".into());
        }
        if !self.d.is_multiple_of(self.lfc_heads) {
            return bad(format!("width {} not divisible by {} heads", self.d, self.lfc_heads));
        }
        Ok(())
    }

    /// Names (without prefix) and dims of every parameter tensor, in
    /// initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d;
        let mut out = vec![("perc.w".to_string(), vec![self.in_channels, d]), ("perc.b".to_string(), vec![1, d])];
        if self.lfc_enabled {
            for h in 0..self.lfc_heads {
                out.push((format!("lfc.w{h}"), vec![2 * d, d / self.lfc_heads]));
            }
            out.push(("lfc.wout".to_string(), vec![d, d]));
            out.push(("lfc.wprime".to_string(), vec![self.lfc_k, d]));
        }
        for i in 0..self.blocks {
            out.push((format!("res{i}.w1"), vec![d, d]));
            out.push((format!("res{i}.b1"), vec![1, d]));
            out.push((format!("res{i}.w2"), vec![d, d]));
            out.push((format!("res{i}.b2"), vec![1, d]));
        }
        out.push(("head.w".to_string(), vec![d, 1]));
        out.push(("head.b".to_string(), vec![1, 1]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, dims)| dims.iter().product::<usize>()).sum()
    }

    /// Scalars added by the LFC block: per-head projections, output mix and
    /// fusion projection.
    pub fn lfc_param_count(&self) -> usize {
        2 * self.d * self.d + self.d * self.d + self.lfc_k * self.d
    }

    /// Uniform `±√(1/fanIn)` initialization; `fanIn` is the input width of the
    /// layer a tensor belongs to.
    pub fn init_params(&self, prefix: &str, rng: &mut ChaCha8Rng, into: &mut ParamSet) {
        for (name, dims) in self.param_shapes() {
            let fan_in = self.fan_in(&name);
            let bound = (1.0 / fan_in as f64).sqrt();
            let n = dims.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
            into.insert(format!("{prefix}{name}"), Tensor::new(&dims, data).expect("valid dims"));
        }
    }

    fn fan_in(&self, name: &str) -> usize {
        if name.starts_with("perc.") {
            self.in_channels
        } else if name.starts_with("lfc.w") && !name.starts_with("lfc.wout") && !name.starts_with("lfc.wprime") {
            2 * self.d
        } else {
            self.d
        }
    }

    /// Fresh parameters from `seed`.
    pub fn seeded_params(&self, prefix: &str, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        self.init_params(prefix, &mut ChaCha8Rng::seed_from_u64(seed), &mut p);
        p
    }
}

/// Graph handles of one backbone's parameters.
pub struct Scope<'a> {
    vars: &'a ParamVars,
    prefix: &'a str,
}

impl<'a> Scope<'a> {
    pub fn new(vars: &'a ParamVars, prefix: &'a str) -> Self {
        Self { vars, prefix }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars.var(&format!("{}{}", self.prefix, name))
    }
}

/// Shared affine lift `x W + b`.
pub fn perception(g: &mut Graph, x: Var, s: &Scope) -> Result<Var, BackboneError> {
    let h = g.matmul(x, s.var("perc.w"))?;
    Ok(g.add_row(h, s.var("perc.b"))?)
}

/// `f + MLP(CN(f))` with a two-layer relu MLP.
pub fn residual_block(g: &mut Graph, f: Var, s: &Scope, i: usize) -> Result<Var, BackboneError> {
    let n = g.context_normalize(f)?;
    let h = g.matmul(n, s.var(&format!("res{i}.w1")))?;
    let h = g.add_row(h, s.var(&format!("res{i}.b1")))?;
    let h = g.relu(h);
    let h = g.matmul(h, s.var(&format!("res{i}.w2")))?;
    let h = g.add_row(h, s.var(&format!("res{i}.b2")))?;
    Ok(g.add(f, h)?)
}

/// Logits `o` (N × 1) and probabilities `p = relu(tanh(o))`.
pub fn predict_head(g: &mut Graph, f: Var, s: &Scope) -> Result<(Var, Var), BackboneError> {
    let o = g.matmul(f, s.var("head.w"))?;
    let o = g.add_row(o, s.var("head.b"))?;
    let t = g.tanh(o);
    Ok((o, g.relu(t)))
}

/// Outputs of one sub-network pass.
pub struct BackboneOutput {
    pub logits: Var,
    pub p: Var,
    pub features: Var,
}

pub fn forward(g: &mut Graph, cfg: &BackboneConfig, x: Var, s: &Scope) -> Result<BackboneOutput, BackboneError> {
    let width = g.value(x).cols();
    if width != cfg.in_channels {
        return Err(BackboneError::InputWidth { expected: cfg.in_channels, got: width });
    }
    let mut f = perception(g, x, s)?;
    if cfg.lfc_enabled {
        let vars = LfcVars {
            heads: (0..cfg.lfc_heads).map(|h| s.var(&format!("lfc.w{h}"))).collect(),
            wout: s.var("lfc.wout"),
            wprime: s.var("lfc.wprime"),
        };
        f = lfc_block(g, f, &vars, cfg.lfc_k)?;
    }
    for i in 0..cfg.blocks {
        f = residual_block(g, f, s, i)?;
    }
    let (logits, p) = predict_head(g, f, s)?;
    Ok(BackboneOutput { logits, p, features: f })
}
