//! AdamW training with warmup + cosine decay, seed-determined batch order,
//! checkpoints and a CSV metric stream.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC};
pub use optim::{adamw_update, clip_grads, grad_norm, lr_at, AdamW, Grads, OptimState};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::datagen::{Rendered, TokenId};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, init_params, next_token_targets, Batch, LossMask, ModelConfig};
use crate::numerics::{ParamStore, RngStream, Tape};
use crate::posenc::PositionMap;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub lr_peak: f64,
    pub lr_floor_ratio: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_seed: u64,
    pub data_seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub loss_mask: LossMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch_size: 64,
            warmup_steps: 500,
            lr_peak: 3e-4,
            lr_floor_ratio: 0.1,
            weight_decay: 0.1,
            dropout: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_seed: 0,
            data_seed: 0,
            eval_every: 500,
            checkpoint_every: 1000,
            grad_clip: 0.0,
            loss_mask: LossMask::Full,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.steps == 0 {
            p.push("train.steps: must be positive".into());
        }
        if self.batch_size == 0 {
            p.push("train.batch_size: must be positive".into());
        }
        if self.warmup_steps > self.steps {
            p.push(format!(
                "train.warmup_steps: {} exceeds steps {}",
                self.warmup_steps, self.steps
            ));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            p.push("train.lr_peak: must be positive".into());
        }
        if !(self.lr_floor_ratio > 0.0 && self.lr_floor_ratio <= 1.0) {
            p.push("train.lr_floor_ratio: must be in (0, 1]".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            p.push("train.weight_decay: must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            p.push("train.dropout: must be in [0, 1)".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                p.push(format!("train.{name}: must be in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            p.push("train.adam_eps: must be positive".into());
        }
        if self.eval_every == 0 {
            p.push("train.eval_every: must be positive".into());
        }
        if self.checkpoint_every == 0 {
            p.push("train.checkpoint_every: must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            p.push("train.grad_clip: must be non-negative".into());
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

    /// Learning rate at schedule position `step` (0..=steps).
    pub fn lr(&self, step: u64) -> Result<f64> {
        lr_at(step, self.steps, self.warmup_steps, self.lr_peak, self.lr_floor_ratio)
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// A training sequence (rendered example followed by `<eos>`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub answer_start: usize,
}

impl From<&Rendered> for TrainExample {
    fn from(r: &Rendered) -> Self {
        Self {
            tokens: r.with_eos(),
            answer_start: r.answer_start,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub next_token_acc: f64,
    pub lr: f64,
}

impl MetricRow {
    pub const HEADER: &'static str = "step,split,loss,next_token_acc,lr";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.split, self.loss, self.next_token_acc, self.lr)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse(format!("metrics row {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            split: f[1].to_string(),
            loss: f[2].parse().map_err(|_| bad())?,
            next_token_acc: f[3].parse().map_err(|_| bad())?,
            lr: f[4].parse().map_err(|_| bad())?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MetricRow::HEADER) {
        return Err(Error::Parse(format!("{}: missing metrics header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(MetricRow::parse).collect()
}

const STREAM_ORDER: u64 = 0x0D3E;
const STREAM_POSITIONS: u64 = 0x9051;
const STREAM_DROPOUT: u64 = 0xD809;

/// Example order: one permutation per epoch from a `data_seed`-keyed
/// stream, consumed `batch_size` at a time across epoch boundaries.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    n: usize,
    batch_size: usize,
    root: RngStream,
    cache: Vec<(u64, Vec<usize>)>,
}

impl BatchOrder {
    pub fn new(n: usize, batch_size: usize, data_seed: u64) -> Self {
        Self {
            n,
            batch_size,
            root: RngStream::new(data_seed, STREAM_ORDER),
            cache: Vec::new(),
        }
    }

    fn epoch(&mut self, e: u64) -> &[usize] {
        if let Some(i) = self.cache.iter().position(|(k, _)| *k == e) {
            return &self.cache[i].1;
        }
        if self.cache.len() >= 2 {
            self.cache.remove(0);
        }
        let perm = self.root.fork(e).permutation(self.n);
        self.cache.push((e, perm));
        &self.cache.last().unwrap().1
    }

    /// Dataset indices of the batch for update `step` (0-based).
    pub fn indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.n as u64;
        (0..self.batch_size as u64)
            .map(|i| {
                let g = step * self.batch_size as u64 + i;
                self.epoch(g / n)[(g % n) as usize]
            })
            .collect()
    }
}

/// Receives the update count and the current parameters.
pub type EvalHook<'a> = dyn FnMut(u64, &ParamStore<f32>) -> Result<()> + 'a;

/// Hooks and persistence for [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `metrics.csv`, `ckpt/` and failure diagnostics.
    pub out_dir: Option<&'a Path>,
    /// Stored verbatim in every checkpoint.
    pub config_text: String,
    /// Held-out sequences scored (teacher-forced) at each evaluation point.
    pub validation: Option<&'a [TrainExample]>,
    pub resume: Option<Checkpoint>,
    /// Called with the update count and current parameters at each
    /// evaluation point.
    pub on_eval: Option<&'a mut EvalHook<'a>>,
    /// Stop once this many updates have been taken.
    pub stop_after: Option<u64>,
}

pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub state: OptimState<f32>,
    pub metrics: Vec<MetricRow>,
}

fn build_batch(
    model: &ModelConfig,
    examples: &[&TrainExample],
    mut pos_rng: Option<&mut RngStream>,
) -> Result<(Batch, Vec<usize>)> {
    let mut batch = Batch::new();
    let mut starts = Vec::with_capacity(examples.len());
    for ex in examples {
        let pm = match pos_rng.as_deref_mut() {
            Some(rng) => model.pe.positions(ex.tokens.len(), Some(rng))?,
            None => PositionMap::identity(ex.tokens.len()),
        };
        batch.push(&ex.tokens, pm)?;
        starts.push(ex.answer_start);
    }
    Ok((batch, starts))
}

/// Teacher-forced loss and next-token accuracy over `examples`.
pub fn score(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    examples: &[TrainExample],
    mask: LossMask,
    chunk: usize,
) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut counted) = (0.0, 0usize, 0usize);
    for part in examples.chunks(chunk.max(1)) {
        let refs: Vec<&TrainExample> = part.iter().collect();
        let (batch, starts) = build_batch(model, &refs, None)?;
        let mut tape = Tape::new();
        let vars = params.to_tape(&mut tape, false);
        let logits = forward_on_tape(&mut tape, model, &vars, &batch, None)?;
        let (targets, m) = next_token_targets(&batch, &starts, mask);
        let (_, stats) = tape.cross_entropy(logits, &targets, &m)?;
        loss += stats.loss * stats.counted as f64;
        correct += stats.correct;
        counted += stats.counted;
    }
    if counted == 0 {
        return Err(Error::EmptyData("no scored positions".into()));
    }
    Ok((loss / counted as f64, correct as f64 / counted as f64))
}

fn write_diagnostics(dir: &Path, step: u64, lr: f64, err: &Error, params: &ParamStore<f32>) {
    let mut text = format!("step: {step}\nlr: {lr}\nerror: {err}\n");
    for (name, t) in params.iter() {
        let non_finite = t.data().iter().filter(|x| !x.is_finite()).count();
        text.push_str(&format!("{name}: norm {} non_finite {non_finite}\n", t.sum_sq().sqrt()));
    }
    let _ = fs::write(dir.join("diagnostics.txt"), text);
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("ckpt").join(format!("step_{step:06}.ckpt"))
}

/// Trains from `weight_seed` (or `opts.resume`) for `cfg.steps` updates.
///
/// Update `s` (0-based) uses the batch [`BatchOrder::indices`]`(s)` and
/// learning rate `lr(s + 1)`, so the final update runs at the floor rate.
/// Every random choice is keyed by the seeds and the update index, which
/// makes a resumed run identical to an uninterrupted one.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &[TrainExample],
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let mut problems = model.problems();
    problems.extend(cfg.problems());
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyData("training set is empty".into()));
    }
    let (mut params, mut state) = match opts.resume.take() {
        Some(ck) => (ck.params, ck.state),
        None => {
            let p = init_params::<f32>(model, cfg.weight_seed)?;
            let s = OptimState::new(&p);
            (p, s)
        }
    };
    let start = state.step;
    let end = opts.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let hp = cfg.adamw();
    let mut order = BatchOrder::new(dataset.len(), cfg.batch_size, cfg.data_seed);
    let pos_root = RngStream::new(cfg.data_seed, STREAM_POSITIONS);
    let drop_root = RngStream::new(cfg.weight_seed, STREAM_DROPOUT);

    let mut metrics = Vec::new();
    let mut sink = match opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let kept: Vec<MetricRow> = if start > 0 && path.exists() {
                read_metrics(&path)?.into_iter().filter(|r| r.step <= start).collect()
            } else {
                Vec::new()
            };
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{}", MetricRow::HEADER).map_err(|e| Error::io(&path, e))?;
            for r in &kept {
                writeln!(w, "{}", r.to_csv()).map_err(|e| Error::io(&path, e))?;
            }
            Some((w, path))
        }
        None => None,
    };
    let mut emit = |row: MetricRow, sink: &mut Option<(BufWriter<File>, PathBuf)>| -> Result<()> {
        if let Some((w, path)) = sink {
            writeln!(w, "{}", row.to_csv()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        metrics.push(row);
        Ok(())
    };

    for s in start..end {
        let lr = cfg.lr(s + 1)?;
        let step_result = (|| -> Result<(f64, f64)> {
            let idx = order.indices(s);
            let examples: Vec<&TrainExample> = idx.iter().map(|&i| &dataset[i]).collect();
            let mut pos_rng = pos_root.fork(s);
            let randomize = model.pe.randomized.then_some(&mut pos_rng);
            let (batch, starts) = build_batch(model, &examples, randomize)?;
            let mut tape = Tape::new();
            let vars = params.to_tape(&mut tape, true);
            let mut drop_rng = drop_root.fork(s);
            let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut drop_rng));
            let logits = forward_on_tape(&mut tape, model, &vars, &batch, dropout)?;
            let (targets, mask) = next_token_targets(&batch, &starts, cfg.loss_mask);
            let (loss, stats) = tape.cross_entropy(logits, &targets, &mask)?;
            tape.backward(loss)?;
            let mut grads: Grads<f32> = vars
                .iter()
                .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.to_vec())))
                .collect();
            if cfg.grad_clip > 0.0 {
                clip_grads(&mut grads, cfg.grad_clip);
            }
            adamw_update(&mut params, &grads, &mut state, lr, &hp)?;
            Ok((stats.loss, stats.accuracy()))
        })();
        let (loss, acc) = match step_result {
            Ok(v) => v,
            Err(e) => {
                if let Some(dir) = opts.out_dir {
                    write_diagnostics(dir, s + 1, lr, &e, &params);
                }
                return Err(e);
            }
        };
        let done = s + 1;
        emit(
            MetricRow {
                step: done,
                split: "train".into(),
                loss,
                next_token_acc: acc,
                lr,
            },
            &mut sink,
        )?;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            if let Some(val) = opts.validation.filter(|v| !v.is_empty()) {
                let (loss, acc) = score(&params, model, val, cfg.loss_mask, cfg.batch_size)?;
                emit(
                    MetricRow {
                        step: done,
                        split: "valid".into(),
                        loss,
                        next_token_acc: acc,
                        lr,
                    },
                    &mut sink,
                )?;
            }
            if let Some((w, path)) = &mut sink {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(hook) = opts.on_eval.as_deref_mut() {
                hook(done, &params)?;
            }
        }
        if let Some(dir) = opts.out_dir {
            if done % cfg.checkpoint_every == 0 || done == cfg.steps {
                let ck = Checkpoint {
                    config_text: opts.config_text.clone(),
                    params: params.clone(),
                    state: state.clone(),
                };
                save_checkpoint(&ck, &checkpoint_path(dir, done))?;
            }
        }
    }
    if let Some((w, path)) = &mut sink {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    Ok(TrainOutcome {
        params,
        state,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_order_is_seeded_and_covers_epochs() {
        let mut a = BatchOrder::new(10, 4, 1);
        let mut b = BatchOrder::new(10, 4, 1);
        let mut c = BatchOrder::new(10, 4, 2);
        let first: Vec<usize> = (0..5).flat_map(|s| a.indices(s)).collect();
        assert_eq!(first, (0..5).flat_map(|s| b.indices(s)).collect::<Vec<_>>());
        assert_ne!(a.indices(0), c.indices(0));
        let mut e0 = first[..10].to_vec();
        e0.sort();
        assert_eq!(e0, (0..10).collect::<Vec<_>>());
        assert_eq!(a.indices(1), first[4..8]);
    }

    #[test]
    fn config_problems_are_named() {
        let cfg = TrainConfig {
            steps: 10,
            warmup_steps: 20,
            lr_floor_ratio: 0.0,
            ..TrainConfig::default()
        };
        let p = cfg.problems();
        assert!(p.iter().any(|s| s.starts_with("train.warmup_steps")));
        assert!(p.iter().any(|s| s.starts_with("train.lr_floor_ratio")));
    }

    #[test]
    fn metric_row_round_trip() {
        let r = MetricRow {
            step: 3,
            split: "train".into(),
            loss: 1.2345678901234567,
            next_token_acc: 0.5,
            lr: 2.9999999999999997e-5,
        };
        assert_eq!(MetricRow::parse(&r.to_csv()).unwrap(), r);
    }
}
