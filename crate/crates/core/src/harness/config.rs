//! Flat `section.key = value` experiment configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Lists are comma separated and also accept `a-b` ranges. Two
//! values may be written as `auto` (stored as 0) and are filled in by
//! [`ExperimentConfig::resolved`]: `pe.fire_l_init` becomes the longest
//! training sequence and `pe.randomized_lmax` four times that (or the
//! longest evaluation sequence, if larger).

use std::fmt::Display;
use std::str::FromStr;

use crate::datagen::{render, AdditionExample, FormatSpec, Orientation, HINT_ALPHABET};
use crate::error::{Error, Result};
use crate::model::{LossMask, ModelConfig};
use crate::posenc::PeVariant;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub format: FormatSpec,
    /// Training operands have 1..=max_train_len digits.
    pub max_train_len: usize,
    pub train_count: usize,
    /// Held-out training-distribution examples scored at each evaluation point.
    pub valid_count: usize,
    /// Seed of the generated datasets (batch order uses `train.data_seed`).
    pub gen_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub lengths: Vec<usize>,
    pub n_per_length: usize,
    pub seed: u64,
    /// Also decode the test set at every training evaluation point.
    pub track_steps: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub weight_seeds: Vec<u64>,
    pub data_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Tokens in the longest rendering (including `<eos>`) of `len`-digit
/// operands, before space augmentation.
pub fn sequence_len(len: usize, fmt: &FormatSpec) -> Result<usize> {
    let nines = vec![9u8; len.max(1)];
    let ex = AdditionExample::new(nines.clone(), nines)?;
    Ok(render(&ex, fmt, 0)?.tokens.len() + 1)
}

fn augmented_len(len: usize, fmt: &FormatSpec) -> Result<usize> {
    let base = sequence_len(len, fmt)?;
    if !fmt.space_augment {
        return Ok(base);
    }
    let nines = vec![9u8; len.max(1)];
    let ex = AdditionExample::new(nines.clone(), nines)?;
    let gaps = render(&ex, fmt, 0)?.answer_start - 1;
    Ok(base + gaps * fmt.space_max_run)
}

impl ExperimentConfig {
    /// 2 layers, width 128, 4 heads, FIRE, reversed format with index
    /// hints, operands of 1-5 digits, evaluation on 1-8 digits.
    pub fn desk() -> Self {
        let mut model = ModelConfig::desk();
        model.pe.fire_l_init = 0.0;
        model.pe.randomized_lmax = 0;
        Self {
            model,
            train: TrainConfig::default(),
            data: DataConfig {
                format: FormatSpec::default(),
                max_train_len: 5,
                train_count: 100_000,
                valid_count: 512,
                gen_seed: 1,
            },
            eval: EvalConfig {
                lengths: (1..=8).collect(),
                n_per_length: 200,
                seed: 2,
                track_steps: true,
            },
            sweep: SweepConfig {
                weight_seeds: vec![0, 1, 2],
                data_seeds: vec![0],
            },
        }
    }

    /// Format used for test sets: the training format without filler.
    pub fn eval_format(&self) -> FormatSpec {
        FormatSpec {
            space_augment: false,
            ..self.data.format.clone()
        }
    }

    /// Copy with `auto` values replaced by their derived settings.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        let train_len = sequence_len(self.data.max_train_len, &self.data.format)?;
        if c.model.pe.fire_l_init <= 0.0 {
            c.model.pe.fire_l_init = train_len as f64;
        }
        if c.model.pe.randomized_lmax == 0 {
            let eval_fmt = self.eval_format();
            let longest_eval = match self.eval.lengths.iter().max() {
                Some(&l) => sequence_len(l, &eval_fmt)?,
                None => 0,
            };
            c.model.pe.randomized_lmax = (4 * train_len).max(longest_eval);
        }
        Ok(c)
    }

    /// Every violated constraint, each naming its key.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.model.problems();
        p.retain(|m| !m.starts_with("pe.randomized_lmax"));
        p.extend(self.train.problems());
        let fmt = &self.data.format;
        if !(0.0..=1.0).contains(&fmt.space_prob) {
            p.push("data.space_prob: must be in [0, 1]".into());
        }
        if fmt.space_max_run == 0 {
            p.push("data.space_max_run: must be at least 1".into());
        }
        // One extra answer digit must still fit the hint alphabet.
        let fits = |l: usize| (1..HINT_ALPHABET).contains(&l);
        if !fits(self.data.max_train_len) {
            p.push(format!("data.max_train_len: must be in 1..={}", HINT_ALPHABET - 1));
        }
        if self.data.train_count == 0 {
            p.push("data.train_count: must be positive".into());
        }
        if self.eval.lengths.is_empty() {
            p.push("eval.lengths: must not be empty".into());
        }
        if let Some(&l) = self.eval.lengths.iter().find(|&&l| !fits(l)) {
            p.push(format!("eval.lengths: {l} is outside 1..={}", HINT_ALPHABET - 1));
        }
        if self.eval.n_per_length == 0 {
            p.push("eval.n_per_length: must be positive".into());
        }
        if self.sweep.weight_seeds.is_empty() {
            p.push("sweep.weight_seeds: must not be empty".into());
        }
        if self.sweep.data_seeds.is_empty() {
            p.push("sweep.data_seeds: must not be empty".into());
        }
        if self.model.pe.fire_l_init < 0.0 || !self.model.pe.fire_l_init.is_finite() {
            p.push("pe.fire_l_init: must be positive or auto".into());
        }
        if !(self.model.pe.fire_c_init > 0.0) {
            p.push("pe.fire_c_init: must be positive".into());
        }
        for (key, v) in [
            ("pe.kerple_r1_init", self.model.pe.kerple_r1_init),
            ("pe.kerple_r2_init", self.model.pe.kerple_r2_init),
            ("pe.rope_base", self.model.pe.rope_base),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("{key}: must be positive"));
            }
        }
        if let Some(s) = &self.model.pe.alibi_slopes {
            if s.len() != self.model.n_heads {
                p.push(format!(
                    "pe.alibi_slopes: {} slopes for {} heads",
                    s.len(),
                    self.model.n_heads
                ));
            }
        }
        if self.model.pe.variant == PeVariant::T5Bucket && (self.model.pe.t5_k < 2 || self.model.pe.t5_l1 <= self.model.pe.t5_k) {
            p.push("pe.t5_k: need 2 <= t5_k < t5_l1".into());
        }
        if p.iter().any(|m| m.starts_with("data.") || m.starts_with("eval.")) {
            return p;
        }
        let train_len = augmented_len(self.data.max_train_len, fmt);
        let eval_fmt = self.eval_format();
        let eval_len = self
            .eval
            .lengths
            .iter()
            .map(|&l| sequence_len(l, &eval_fmt))
            .collect::<Result<Vec<_>>>();
        match (train_len, eval_len) {
            (Ok(t), Ok(e)) => {
                let longest = e.into_iter().max().unwrap_or(0).max(t);
                if longest > self.model.max_seq_len {
                    p.push(format!(
                        "model.max_seq_len: {} is shorter than the longest sequence ({longest} tokens)",
                        self.model.max_seq_len
                    ));
                }
                if self.model.pe.randomized && self.model.pe.randomized_lmax != 0 && self.model.pe.randomized_lmax < t {
                    p.push(format!(
                        "pe.randomized_lmax: {} is shorter than the longest training sequence ({t} tokens)",
                        self.model.pe.randomized_lmax
                    ));
                }
            }
            (Err(e), _) | (_, Err(e)) => p.push(format!("data: {e}")),
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    /// All keys with their current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let pe = &m.pe;
        let t = &self.train;
        let d = &self.data;
        let f = &d.format;
        let auto = |v: String, is_auto: bool| if is_auto { "auto".to_string() } else { v };
        vec![
            ("model.n_layers", m.n_layers.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.max_seq_len", m.max_seq_len.to_string()),
            ("model.tie_embeddings", m.tie_embeddings.to_string()),
            ("pe.variant", pe.variant.as_str().to_string()),
            ("pe.rope_base", pe.rope_base.to_string()),
            (
                "pe.alibi_slopes",
                pe.alibi_slopes.as_ref().map_or("auto".to_string(), |s| join(s)),
            ),
            ("pe.kerple_r1_init", pe.kerple_r1_init.to_string()),
            ("pe.kerple_r2_init", pe.kerple_r2_init.to_string()),
            ("pe.t5_k", pe.t5_k.to_string()),
            ("pe.t5_l1", pe.t5_l1.to_string()),
            ("pe.fire_c_init", pe.fire_c_init.to_string()),
            ("pe.fire_l_init", auto(pe.fire_l_init.to_string(), pe.fire_l_init == 0.0)),
            ("pe.randomized", pe.randomized.to_string()),
            (
                "pe.randomized_lmax",
                auto(pe.randomized_lmax.to_string(), pe.randomized_lmax == 0),
            ),
            ("pe.randomize_eval", pe.randomize_eval.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.lr_peak", t.lr_peak.to_string()),
            ("train.lr_floor_ratio", t.lr_floor_ratio.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.dropout", t.dropout.to_string()),
            ("train.adam_beta1", t.adam_beta1.to_string()),
            ("train.adam_beta2", t.adam_beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.weight_seed", t.weight_seed.to_string()),
            ("train.data_seed", t.data_seed.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.loss_mask", t.loss_mask.as_str().to_string()),
            ("data.orientation", f.orientation.as_str().to_string()),
            ("data.index_hints", f.index_hints.to_string()),
            ("data.space_augment", f.space_augment.to_string()),
            ("data.space_prob", f.space_prob.to_string()),
            ("data.space_max_run", f.space_max_run.to_string()),
            ("data.pad_answer", f.pad_answer.to_string()),
            ("data.max_train_len", d.max_train_len.to_string()),
            ("data.train_count", d.train_count.to_string()),
            ("data.valid_count", d.valid_count.to_string()),
            ("data.gen_seed", d.gen_seed.to_string()),
            ("eval.lengths", join(&self.eval.lengths)),
            ("eval.n_per_length", self.eval.n_per_length.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            ("eval.track_steps", self.eval.track_steps.to_string()),
            ("sweep.weight_seeds", join(&self.sweep.weight_seeds)),
            ("sweep.data_seeds", join(&self.sweep.data_seeds)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::desk().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Sets one key; the message names the key on failure.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let bad = |e: String| format!("{key}: {e}");
        let m = &mut self.model;
        let pe = &mut m.pe;
        let t = &mut self.train;
        let d = &mut self.data;
        let f = &mut d.format;
        match key {
            "model.n_layers" => m.n_layers = num(v).map_err(bad)?,
            "model.d_model" => m.d_model = num(v).map_err(bad)?,
            "model.n_heads" => m.n_heads = num(v).map_err(bad)?,
            "model.d_ff" => m.d_ff = num(v).map_err(bad)?,
            "model.vocab_size" => m.vocab_size = num(v).map_err(bad)?,
            "model.max_seq_len" => m.max_seq_len = num(v).map_err(bad)?,
            "model.tie_embeddings" => m.tie_embeddings = num(v).map_err(bad)?,
            "pe.variant" => pe.variant = v.parse().map_err(|e: Error| bad(e.to_string()))?,
            "pe.rope_base" => pe.rope_base = num(v).map_err(bad)?,
            "pe.alibi_slopes" => {
                pe.alibi_slopes = if v == "auto" { None } else { Some(list(v).map_err(bad)?) }
            }
            "pe.kerple_r1_init" => pe.kerple_r1_init = num(v).map_err(bad)?,
            "pe.kerple_r2_init" => pe.kerple_r2_init = num(v).map_err(bad)?,
            "pe.t5_k" => pe.t5_k = num(v).map_err(bad)?,
            "pe.t5_l1" => pe.t5_l1 = num(v).map_err(bad)?,
            "pe.fire_c_init" => pe.fire_c_init = num(v).map_err(bad)?,
            "pe.fire_l_init" => pe.fire_l_init = if v == "auto" { 0.0 } else { num(v).map_err(bad)? },
            "pe.randomized" => pe.randomized = num(v).map_err(bad)?,
            "pe.randomized_lmax" => pe.randomized_lmax = if v == "auto" { 0 } else { num(v).map_err(bad)? },
            "pe.randomize_eval" => pe.randomize_eval = num(v).map_err(bad)?,
            "train.steps" => t.steps = num(v).map_err(bad)?,
            "train.batch_size" => t.batch_size = num(v).map_err(bad)?,
            "train.warmup_steps" => t.warmup_steps = num(v).map_err(bad)?,
            "train.lr_peak" => t.lr_peak = num(v).map_err(bad)?,
            "train.lr_floor_ratio" => t.lr_floor_ratio = num(v).map_err(bad)?,
            "train.weight_decay" => t.weight_decay = num(v).map_err(bad)?,
            "train.dropout" => t.dropout = num(v).map_err(bad)?,
            "train.adam_beta1" => t.adam_beta1 = num(v).map_err(bad)?,
            "train.adam_beta2" => t.adam_beta2 = num(v).map_err(bad)?,
            "train.adam_eps" => t.adam_eps = num(v).map_err(bad)?,
            "train.weight_seed" => t.weight_seed = num(v).map_err(bad)?,
            "train.data_seed" => t.data_seed = num(v).map_err(bad)?,
            "train.eval_every" => t.eval_every = num(v).map_err(bad)?,
            "train.checkpoint_every" => t.checkpoint_every = num(v).map_err(bad)?,
            "train.grad_clip" => t.grad_clip = num(v).map_err(bad)?,
            "train.loss_mask" => t.loss_mask = v.parse::<LossMask>().map_err(|e| bad(e.to_string()))?,
            "data.orientation" => f.orientation = v.parse::<Orientation>().map_err(|e| bad(e.to_string()))?,
            "data.index_hints" => f.index_hints = num(v).map_err(bad)?,
            "data.space_augment" => f.space_augment = num(v).map_err(bad)?,
            "data.space_prob" => f.space_prob = num(v).map_err(bad)?,
            "data.space_max_run" => f.space_max_run = num(v).map_err(bad)?,
            "data.pad_answer" => f.pad_answer = num(v).map_err(bad)?,
            "data.max_train_len" => d.max_train_len = num(v).map_err(bad)?,
            "data.train_count" => d.train_count = num(v).map_err(bad)?,
            "data.valid_count" => d.valid_count = num(v).map_err(bad)?,
            "data.gen_seed" => d.gen_seed = num(v).map_err(bad)?,
            "eval.lengths" => self.eval.lengths = list(v).map_err(bad)?,
            "eval.n_per_length" => self.eval.n_per_length = num(v).map_err(bad)?,
            "eval.seed" => self.eval.seed = num(v).map_err(bad)?,
            "eval.track_steps" => self.eval.track_steps = num(v).map_err(bad)?,
            "sweep.weight_seeds" => self.sweep.weight_seeds = list(v).map_err(bad)?,
            "sweep.data_seeds" => self.sweep.data_seeds = list(v).map_err(bad)?,
            _ => return Err(format!("{key}: unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Unknown keys, bad
    /// values, repeated keys and constraint violations of the result are
    /// all reported together.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`, got {line:?}", n + 1));
                continue;
            };
            let k = k.trim();
            if seen.contains(&k) {
                problems.push(format!("{k}: set more than once"));
                continue;
            }
            seen.push(k);
            if let Err(e) = self.set(k, v) {
                problems.push(e);
            }
        }
        self.finish(problems)
    }

    fn finish(&self, mut problems: Vec<String>) -> Result<()> {
        problems.extend(self.problems());
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Parses a config file; keys not mentioned keep their desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Applies `key=value` overrides, reporting every bad one.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        let problems = overrides.iter().filter_map(|(k, v)| self.set(k, v).err()).collect();
        self.finish(problems)
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

trait Stepped: Sized {
    fn range(a: &str, b: &str) -> Option<Vec<Self>>;
}

impl Stepped for usize {
    fn range(a: &str, b: &str) -> Option<Vec<Self>> {
        let (a, b) = (a.parse::<usize>().ok()?, b.parse::<usize>().ok()?);
        (a <= b).then(|| (a..=b).collect())
    }
}

impl Stepped for u64 {
    fn range(a: &str, b: &str) -> Option<Vec<Self>> {
        let (a, b) = (a.parse::<u64>().ok()?, b.parse::<u64>().ok()?);
        (a <= b && b - a < 1_000_000).then(|| (a..=b).collect())
    }
}

impl Stepped for f64 {
    fn range(_: &str, _: &str) -> Option<Vec<Self>> {
        None
    }
}

fn list<T: FromStr + Stepped>(v: &str) -> std::result::Result<Vec<T>, String> {
    let mut out = Vec::new();
    for part in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Ok(x) = part.parse() {
            out.push(x);
            continue;
        }
        let r = part.split_once('-').and_then(|(a, b)| T::range(a.trim(), b.trim()));
        out.extend(r.ok_or_else(|| format!("cannot parse list item {part:?}"))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_resolves_to_training_length() {
        let c = ExperimentConfig::desk().resolved().unwrap();
        // 5-digit operands with hints: 20 + 2 question tokens, 12 answer tokens, eos.
        assert_eq!(c.model.pe.fire_l_init, 35.0);
        assert_eq!(c.model.pe.randomized_lmax, 140);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn lists_accept_ranges() {
        let mut c = ExperimentConfig::desk();
        c.set("eval.lengths", "1-3, 7").unwrap();
        assert_eq!(c.eval.lengths, vec![1, 2, 3, 7]);
        assert!(c.set("eval.lengths", "3-1").is_err());
    }

    #[test]
    fn every_problem_is_reported() {
        let err = ExperimentConfig::parse("pe.variant = sinusoid\ntrain.steps = 0\nbogus = 1\nmodel.d_model = x\n")
            .unwrap_err();
        let Error::Validation(p) = err else { panic!() };
        assert!(p[0].starts_with("pe.variant"));
        assert!(p[1].starts_with("bogus"));
        assert!(p[2].starts_with("model.d_model"));
        assert!(p[3..].iter().any(|m| m.starts_with("train.steps")));
    }
}
