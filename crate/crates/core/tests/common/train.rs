//! Shared training fixtures: a small model, tiny datasets and the
//! closed-form optimizer oracle.

use std::time::Instant;

use lengen::datagen::{generate_split, FormatSpec, SplitSpec};
use lengen::model::{LossMask, ModelConfig};
use lengen::numerics::{ParamStore, Tensor};
use lengen::posenc::{PeSpec, PeVariant};
use lengen::trainer::{adamw_update, score, train, AdamW, Grads, OptimState, TrainConfig, TrainExample, TrainOptions};

pub fn small_model() -> ModelConfig {
    let mut pe = PeSpec::new(PeVariant::Fire);
    pe.fire_l_init = 20.0;
    ModelConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        d_ff: 128,
        max_seq_len: 64,
        pe,
        ..ModelConfig::desk()
    }
}

pub fn examples(count: usize, max_len: usize, seed: u64) -> Vec<TrainExample> {
    generate_split(&SplitSpec::Train { count, max_len }, &FormatSpec::default(), seed)
        .unwrap()
        .iter()
        .map(|l| TrainExample::from(&l.rendered))
        .collect()
}

pub fn short_run(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        warmup_steps: steps / 10,
        lr_peak: 3e-3,
        eval_every: steps,
        checkpoint_every: steps,
        ..TrainConfig::default()
    }
}

/// Trains the small model on 32 examples for 200 steps and returns the
/// teacher-forced answer accuracy on those same examples with the runtime
/// in seconds.
pub fn memorize() -> (f64, f64) {
    let t0 = Instant::now();
    let model = small_model();
    let data = examples(32, 3, 21);
    let cfg = TrainConfig {
        batch_size: 32,
        lr_peak: 1e-2,
        weight_decay: 0.0,
        loss_mask: LossMask::Answer,
        ..short_run(200)
    };
    let out = train(&model, &cfg, &data, TrainOptions::default()).unwrap();
    let (_, acc) = score(&out.params, &model, &data, LossMask::Answer, 32).unwrap();
    (acc, t0.elapsed().as_secs_f64())
}

/// Runs `steps` AdamW updates on a decayed and an exempt tensor with fixed
/// gradients and compares against the update rule written out in scalar
/// arithmetic. Returns the worst absolute difference.
pub fn adamw_closed_form(steps: usize) -> f64 {
    let hp = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.1,
    };
    let init = [("layers.0.attn.wq", vec![0.5, -1.25, 2.0]), ("pe.fire.c", vec![0.75, -0.3, 1.1])];
    let mut params = ParamStore::<f64>::new();
    for (name, v) in &init {
        params.insert(*name, Tensor::new([3], v.clone()).unwrap()).unwrap();
    }
    let mut state = OptimState::new(&params);
    let grad = |t: usize, k: usize| ((t * 3 + k) as f64 * 0.37).sin() - 0.2;
    let lr = |t: usize| 1e-3 * (1.0 + t as f64);
    let mut worst = 0.0f64;
    let mut oracle: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> =
        init.iter().map(|(_, v)| (v.clone(), vec![0.0; 3], vec![0.0; 3])).collect();
    for t in 0..steps {
        let mut grads = Grads::new();
        for (name, _) in &init {
            grads.insert(name.to_string(), (0..3).map(|k| grad(t, k)).collect());
        }
        adamw_update(&mut params, &grads, &mut state, lr(t), &hp).unwrap();
        let n = (t + 1) as f64;
        for (i, (name, _)) in init.iter().enumerate() {
            let decay = if name.starts_with("pe.") { 0.0 } else { hp.weight_decay };
            let (p, m, v) = &mut oracle[i];
            for k in 0..3 {
                let g = grad(t, k);
                m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g;
                v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g * g;
                let mhat = m[k] / (1.0 - hp.beta1.powf(n));
                let vhat = v[k] / (1.0 - hp.beta2.powf(n));
                p[k] = p[k] * (1.0 - lr(t) * decay) - lr(t) * mhat / (vhat.sqrt() + hp.eps);
                worst = worst.max((params.get(name).unwrap().data()[k] - p[k]).abs());
            }
        }
    }
    worst
}
