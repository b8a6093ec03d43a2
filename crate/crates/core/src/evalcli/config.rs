//! `key=value` configuration files for training runs and ablation grids.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors.

use std::collections::BTreeSet;

use crate::backbone::BackboneConfig;
use crate::pipeline::{LossConfig, ModelConfig, SiameseMode};
use crate::trainer::TrainConfig;

use super::EvalError;

/// `(line number, key, value)` triples in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, EvalError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| EvalError::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !seen.insert(k.clone()) {
            return Err(EvalError::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
        out.push((i + 1, k, v));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, EvalError> {
    v.parse().map_err(|_| EvalError::Config(format!("line {line}: bad value {v:?} for {key}")))
}

pub fn parse_switch(v: &str) -> Option<bool> {
    match v {
        "on" | "true" | "1" => Some(true),
        "off" | "false" | "0" => Some(false),
        _ => None,
    }
}

fn switch(line: usize, key: &str, v: &str) -> Result<bool, EvalError> {
    parse_switch(v).ok_or_else(|| EvalError::Config(format!("line {line}: bad switch {v:?} for {key}")))
}

fn list<T>(line: usize, key: &str, v: &str, f: impl Fn(&str) -> Result<T, EvalError>) -> Result<Vec<T>, EvalError> {
    let items: Vec<T> = v.split(',').map(|s| f(s.trim())).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(EvalError::Config(format!("line {line}: empty list for {key}")));
    }
    Ok(items)
}

/// Everything needed to train one model.
#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Stage template; input widths are set per stage.
    pub backbone: BackboneConfig,
    pub init_seed: u64,
    pub checkpoint_every: Option<usize>,
}


impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(&self.backbone)
    }

    /// Applies one key; returns `false` if the key is not a run setting.
    fn apply(&mut self, line: usize, key: &str, v: &str) -> Result<bool, EvalError> {
        match key {
            "lr" => self.train.lr = parse(line, key, v)?,
            "beta1" => self.train.beta1 = parse(line, key, v)?,
            "beta2" => self.train.beta2 = parse(line, key, v)?,
            "eps" => self.train.eps = parse(line, key, v)?,
            "batch_size" => self.train.batch_size = parse(line, key, v)?,
            "iterations" => self.train.iterations = parse(line, key, v)?,
            "seed" => self.train.seed = parse(line, key, v)?,
            "grad_clip" => self.train.grad_clip = if v == "off" { None } else { Some(parse(line, key, v)?) },
            "lambda" => self.loss.lambda = parse(line, key, v)?,
            "siamese" => self.loss.siamese = parse(line, key, v)?,
            "class_balance" => self.loss.class_balance = switch(line, key, v)?,
            "d" => self.backbone.d = parse(line, key, v)?,
            "blocks" => self.backbone.blocks = parse(line, key, v)?,
            "lfc" => self.backbone.lfc_enabled = switch(line, key, v)?,
            "k" => self.backbone.lfc_k = parse(line, key, v)?,
            "heads" => self.backbone.lfc_heads = parse(line, key, v)?,
            "init_seed" => self.init_seed = parse(line, key, v)?,
            "checkpoint_every" => self.checkpoint_every = Some(parse(line, key, v)?),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_pairs(text)? {
            if !cfg.apply(line, &k, &v)? {
                return Err(EvalError::Config(format!("line {line}: unknown key {k}")));
            }
        }
        Ok(cfg)
    }
}

/// Ablation grid: one trained model per `(lfc, siamese, k, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub run: RunConfig,
    pub lfc: Vec<bool>,
    pub siamese: Vec<SiameseMode>,
    pub k: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Samples held out from the end of the dataset for evaluation.
    pub holdout: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            lfc: vec![false, true],
            siamese: SiameseMode::ALL.to_vec(),
            k: vec![3, 6, 9, 12],
            seeds: vec![0, 1, 2],
            holdout: None,
        }
    }
}

impl GridConfig {
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_pairs(text)? {
            match k.as_str() {
                "lfc" => cfg.lfc = list(line, &k, &v, |s| switch(line, &k, s))?,
                "siamese" => cfg.siamese = list(line, &k, &v, |s| parse(line, &k, s))?,
                "k" => cfg.k = list(line, &k, &v, |s| parse(line, &k, s))?,
                "seeds" => cfg.seeds = list(line, &k, &v, |s| parse(line, &k, s))?,
                "holdout" => cfg.holdout = Some(parse(line, &k, &v)?),
                _ => {
                    if !cfg.run.apply(line, &k, &v)? {
                        return Err(EvalError::Config(format!("line {line}: unknown key {k}")));
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn cell_count(&self) -> usize {
        self.lfc.len() * self.siamese.len() * self.k.len() * self.seeds.len()
    }
}
