//! Finite-difference checks of every differentiable op and of whole
//! models, in float64. Each check returns its worst relative error.

use super::{check_gradients, check_param_gradients, jitter, random_projection};
use lengen::datagen::{generate_split, FormatSpec, SplitSpec};
use lengen::model::{forward_on_tape, init_params, next_token_targets, Batch, LossMask, ModelConfig};
use lengen::numerics::{geglu_ffn, ParamStore, RngStream, Tensor};
use lengen::posenc::{PeSpec, PeVariant, PositionMap};

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut RngStream::new(seed, 1))
}

pub fn matmul() -> f64 {
    check_gradients(&[randn(&[5, 7], 1), randn(&[7, 3], 2)], EPS, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        random_projection(t, y, 3)
    })
}

pub fn matmul_nt_and_bmm() -> f64 {
    let mut worst = check_gradients(&[randn(&[4, 6], 4), randn(&[5, 6], 5)], EPS, |t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        random_projection(t, y, 6)
    });
    for trans in [false, true] {
        let b = if trans { randn(&[2, 3, 4], 8) } else { randn(&[2, 4, 3], 8) };
        worst = worst.max(check_gradients(&[randn(&[2, 5, 4], 7), b], EPS, |t, v| {
            let y = t.bmm(v[0], v[1], trans, 0.7).unwrap();
            random_projection(t, y, 9)
        }));
    }
    worst
}

pub fn softmax_with_bias() -> f64 {
    [vec![3, 5, 5], vec![5, 5]]
        .into_iter()
        .map(|bias_shape| {
            check_gradients(&[randn(&[3, 5, 5], 10), randn(&bias_shape, 11)], EPS, |t, v| {
                let y = t.biased_causal_softmax(v[0], Some(v[1])).unwrap();
                random_projection(t, y, 12)
            })
        })
        .fold(0.0, f64::max)
}

pub fn rmsnorm() -> f64 {
    let gain = Tensor::from_fn([6], |i| 0.5 + i as f64 * 0.3);
    check_gradients(&[randn(&[4, 6], 13), gain], EPS, |t, v| {
        let y = t.rmsnorm(v[0], v[1], 1e-6).unwrap();
        random_projection(t, y, 14)
    })
}

pub fn geglu() -> f64 {
    let inputs = [randn(&[3, 4], 15), randn(&[4, 6], 16), randn(&[4, 6], 17), randn(&[6, 4], 18)];
    check_gradients(&inputs, EPS, |t, v| {
        let y = geglu_ffn(t, v[0], v[1], v[2], v[3]).unwrap();
        random_projection(t, y, 19)
    })
}

pub fn elementwise_and_layout() -> f64 {
    check_gradients(&[randn(&[3, 4], 20), randn(&[3, 4], 21)], EPS, |t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let m = t.mul(a, v[1]).unwrap();
        let s = t.scale(m, -1.5).unwrap();
        let sp = t.softplus(s).unwrap();
        let g = t.gelu(sp).unwrap();
        let top = t.slice_rows(g, 0, 2).unwrap();
        let bottom = t.slice_rows(v[0], 1, 2).unwrap();
        let cat = t.concat_rows(&[bottom, top]).unwrap();
        let h = t.split_heads(cat, 2).unwrap();
        let merged = t.merge_heads(h).unwrap();
        random_projection(t, merged, 22)
    })
}

/// Inputs stay at least 0.3 away from zero, well beyond the probe step.
pub fn relu() -> f64 {
    let x = Tensor::new([2, 3], vec![0.5, -0.7, 1.2, -2.0, 0.3, 0.9]).unwrap();
    check_gradients(&[x], EPS, |t, v| {
        let y = t.relu(v[0]).unwrap();
        random_projection(t, y, 23)
    })
}

pub fn embedding_and_rope() -> f64 {
    check_gradients(&[randn(&[7, 4], 24)], EPS, |t, v| {
        let e = t.embedding(v[0], &[3, 1, 3, 6]).unwrap();
        let r = t.rope(e, &[0, 2, 5, 9], 2, 10_000.0).unwrap();
        random_projection(t, r, 25)
    })
}

pub fn cross_entropy() -> f64 {
    check_gradients(&[randn(&[5, 9], 26)], EPS, |t, v| {
        t.cross_entropy(v[0], &[1, 8, 0, 3, 3], &[true, true, false, true, true]).unwrap().0
    })
}

pub fn ops() -> Vec<(&'static str, f64)> {
    vec![
        ("matmul", matmul()),
        ("matmul_nt/bmm", matmul_nt_and_bmm()),
        ("biased_causal_softmax", softmax_with_bias()),
        ("rmsnorm", rmsnorm()),
        ("geglu", geglu()),
        ("elementwise/layout", elementwise_and_layout()),
        ("relu", relu()),
        ("embedding/rope", embedding_and_rope()),
        ("cross_entropy", cross_entropy()),
    ]
}

pub fn tiny(variant: PeVariant, tie: bool) -> ModelConfig {
    let mut pe = PeSpec::new(variant);
    pe.fire_l_init = 6.0;
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 64,
        pe,
        tie_embeddings: tie,
        ..ModelConfig::desk()
    }
}

/// Moves every FIRE hidden unit away from the ReLU kink over the whole input
/// range [0, 1]: even units always active, odd units always inactive. Central
/// differences are then valid at the prescribed step.
fn clear_relu_kinks(params: &mut ParamStore<f64>) {
    let w1 = params.get("pe.fire.w1").unwrap().data().to_vec();
    let b1 = params.get_mut("pe.fire.b1").unwrap();
    for (k, b) in b1.data_mut().iter_mut().enumerate() {
        let reach = w1[k].abs() + 0.1;
        *b = if k % 2 == 0 { b.abs() + reach } else { -(b.abs() + reach) };
    }
}

/// Worst error per parameter for a 2-layer width-16 model under every
/// positional encoding, alternating tied and untied embeddings. The batch
/// packs two sequences, one of them on non-consecutive positions.
pub fn full_models() -> Vec<(String, f64)> {
    let lines = generate_split(&SplitSpec::Train { count: 2, max_len: 2 }, &FormatSpec::default(), 3).unwrap();
    let mut out = Vec::new();
    for (i, variant) in PeVariant::ALL.into_iter().enumerate() {
        let cfg = tiny(variant, i % 2 == 0);
        let mut params = init_params::<f64>(&cfg, 7).unwrap();
        jitter(&mut params, 0.1, 8);
        if variant == PeVariant::Fire {
            clear_relu_kinks(&mut params);
        }
        let mut batch = Batch::new();
        let mut starts = Vec::new();
        for (k, l) in lines.iter().enumerate() {
            let tokens = l.rendered.with_eos();
            let n = tokens.len();
            let pm = if k == 0 {
                PositionMap::identity(n)
            } else {
                PositionMap::new((0..n).map(|p| 3 * p + 1).collect()).unwrap()
            };
            batch.push(&tokens, pm).unwrap();
            starts.push(l.rendered.answer_start);
        }
        let (targets, mask) = next_token_targets(&batch, &starts, LossMask::Full);
        let report = check_param_gradients(&params, EPS, 6, |tape, vars| {
            let logits = forward_on_tape(tape, &cfg, vars, &batch, None).unwrap();
            tape.cross_entropy(logits, &targets, &mask).unwrap().0
        });
        out.extend(report.into_iter().map(|(name, err)| (format!("{variant} {name}"), err)));
    }
    out
}
