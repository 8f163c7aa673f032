//! Decoder-only transformer with additive attention bias or rotary
//! positions, RMSNorm before and after every sublayer, and a GeGLU FFN.
//!
//! Training runs on a [`Tape`] over a [`Batch`] of independent sequences
//! stored back to back; attention never crosses sequence boundaries.
//! Greedy decoding uses a separate eager path with a key/value cache.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use crate::datagen::{TokenId, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::numerics::{gelu_scalar, gemm, geglu_ffn, rope_tables, ParamStore, Real, RngStream, Tape, Tensor, Var};
use crate::posenc::{bias_on_tape, build_bias, init_pe_params, pe_param_shapes, PeSpec, PeVariant, PositionMap};

pub const NORM_EPS: f64 = 1e-6;
pub const EMBED: &str = "embed";
pub const HEAD: &str = "head";
pub const FINAL_NORM: &str = "final_norm";

const LAYER_PARAMS: [&str; 11] = [
    "attn.norm_in",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "attn.norm_out",
    "ffn.norm_in",
    "ffn.w",
    "ffn.v",
    "ffn.wout",
    "ffn.norm_out",
];

pub fn layer_param(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

/// Whether AdamW weight decay applies to a parameter: norm gains and
/// positional-encoding parameters are exempt.
pub fn decays(name: &str) -> bool {
    !(name.starts_with("pe.") || name.ends_with("norm_in") || name.ends_with("norm_out") || name == FINAL_NORM)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub pe: PeSpec,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// About half a million parameters; trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 256,
            pe: PeSpec::default(),
            tie_embeddings: true,
        }
    }

    /// Six blocks of width 512 with eight heads: roughly 25M parameters.
    pub fn paper_25m() -> Self {
        Self {
            n_layers: 6,
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            max_seq_len: 2048,
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Every violated constraint, prefixed with its field name.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                p.push(format!("model.{name}: must be positive"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            p.push(format!(
                "model.n_heads: d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.pe.variant == PeVariant::Rope && self.n_heads > 0 && !self.head_dim().is_multiple_of(2) {
            p.push(format!("model.n_heads: head dimension {} must be even for rope", self.head_dim()));
        }
        if self.vocab_size != VOCAB_SIZE {
            p.push(format!("model.vocab_size: must be {VOCAB_SIZE}, got {}", self.vocab_size));
        }
        if self.pe.randomized && self.pe.randomized_lmax == 0 {
            p.push("pe.randomized_lmax: must be positive".into());
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

    /// Name and shape of every parameter, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![(EMBED.to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            for name in LAYER_PARAMS {
                let shape = match name {
                    "attn.norm_in" | "attn.norm_out" | "ffn.norm_in" | "ffn.norm_out" => vec![d],
                    "ffn.w" | "ffn.v" => vec![d, f],
                    "ffn.wout" => vec![f, d],
                    _ => vec![d, d],
                };
                out.push((layer_param(l, name), shape));
            }
        }
        out.push((FINAL_NORM.to_string(), vec![d]));
        if !self.tie_embeddings {
            out.push((HEAD.to_string(), vec![d, v]));
        }
        for (name, shape) in pe_param_shapes(&self.pe, self.n_heads) {
            out.push((name.to_string(), shape));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

const STREAM_INIT: u64 = 0x1417;

/// Deterministic parameters for `weight_seed`: linear maps normal with
/// std `1/sqrt(fan_in)`, embedding std 0.02, norm gains 1.
pub fn init_params<T: Real>(cfg: &ModelConfig, weight_seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let root = RngStream::new(weight_seed, STREAM_INIT);
    let mut store = ParamStore::new();
    let pe_names: Vec<&str> = pe_param_shapes(&cfg.pe, cfg.n_heads).iter().map(|(n, _)| *n).collect();
    for (i, (name, shape)) in cfg.param_shapes().into_iter().enumerate() {
        if pe_names.contains(&name.as_str()) {
            continue;
        }
        let mut rng = root.fork(i as u64);
        let t = if name == EMBED {
            Tensor::randn(shape, 0.02, &mut rng)
        } else if shape.len() == 1 {
            Tensor::full(shape, T::one())
        } else {
            let std = 1.0 / (shape[0] as f64).sqrt();
            Tensor::randn(shape, std, &mut rng)
        };
        store.insert(name, t)?;
    }
    let mut rng = root.fork(u64::MAX);
    for (name, t) in init_pe_params(&cfg.pe, cfg.n_heads, &mut rng)? {
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Independent sequences laid out back to back.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    ids: Vec<TokenId>,
    offsets: Vec<usize>,
    posmaps: Vec<PositionMap>,
}

impl Batch {
    pub fn new() -> Self {
        Self {
            ids: Vec::new(),
            offsets: vec![0],
            posmaps: Vec::new(),
        }
    }

    pub fn single(ids: &[TokenId], posmap: PositionMap) -> Result<Self> {
        let mut b = Self::new();
        b.push(ids, posmap)?;
        Ok(b)
    }

    pub fn push(&mut self, ids: &[TokenId], posmap: PositionMap) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Argument("empty sequence".into()));
        }
        if posmap.len() != ids.len() {
            return Err(Error::dim(
                "batch",
                format!("{} tokens but {} positions", ids.len(), posmap.len()),
            ));
        }
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.ids.extend_from_slice(ids);
        self.offsets.push(self.ids.len());
        self.posmaps.push(posmap);
        Ok(())
    }

    /// Number of sequences.
    pub fn len(&self) -> usize {
        self.posmaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posmaps.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn total_tokens(&self) -> usize {
        self.ids.len()
    }

    pub fn segment(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn posmap(&self, i: usize) -> &PositionMap {
        &self.posmaps[i]
    }
}

/// Which next-token predictions count towards the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMask {
    /// Every position that has a successor.
    Full,
    /// Only positions whose successor is in the answer (or is `<eos>`).
    Answer,
}

impl LossMask {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMask::Full => "full",
            LossMask::Answer => "answer",
        }
    }
}

impl std::str::FromStr for LossMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossMask::Full),
            "answer" => Ok(LossMask::Answer),
            _ => Err(Error::Configuration(format!("unknown loss mask {s:?}"))),
        }
    }
}

/// Shifted targets and loss mask for a batch; `answer_starts[i]` is the
/// index of the first answer token of sequence `i`.
pub fn next_token_targets(batch: &Batch, answer_starts: &[usize], mode: LossMask) -> (Vec<u32>, Vec<bool>) {
    let mut targets = vec![0; batch.total_tokens()];
    let mut mask = vec![false; batch.total_tokens()];
    for s in 0..batch.len() {
        let seg = batch.segment(s);
        for t in seg.start..seg.end - 1 {
            targets[t] = batch.ids[t + 1];
            mask[t] = match mode {
                LossMask::Full => true,
                LossMask::Answer => t + 1 - seg.start >= answer_starts[s],
            };
        }
    }
    (targets, mask)
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
}

/// Records the forward pass and returns logits `[total_tokens×V]`.
///
/// `dropout` is `(rate, rng)`; it is applied to each sublayer output just
/// before the residual add.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &BTreeMap<String, Var>,
    batch: &Batch,
    mut dropout: Option<(f64, &mut RngStream)>,
) -> Result<Var> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let heads = cfg.n_heads;
    let mut segments = Vec::with_capacity(batch.len());
    let mut biases: Vec<Var> = Vec::new();
    let mut slots: HashMap<&[usize], usize> = HashMap::new();
    for s in 0..batch.len() {
        let seg = batch.segment(s);
        if seg.len() > cfg.max_seq_len {
            return Err(Error::Capacity(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                seg.len(),
                cfg.max_seq_len
            )));
        }
        let pm = batch.posmap(s);
        let slot = match slots.get(pm.positions()) {
            Some(&i) => Some(i),
            None => match bias_on_tape(tape, &cfg.pe, vars, pm, heads)? {
                Some(b) => {
                    biases.push(b);
                    slots.insert(pm.positions(), biases.len() - 1);
                    Some(biases.len() - 1)
                }
                None => None,
            },
        };
        segments.push(Segment {
            start: seg.start,
            len: seg.len(),
            bias: slot,
        });
    }
    let all_positions: Vec<usize> = (0..batch.len())
        .flat_map(|s| batch.posmap(s).positions().iter().copied())
        .collect();

    let embed = var(vars, EMBED)?;
    let mut x = tape.embedding(embed, batch.ids())?;
    for l in 0..cfg.n_layers {
        let p = |name: &str| var(vars, &layer_param(l, name));
        let h = tape.rmsnorm(x, p("attn.norm_in")?, NORM_EPS)?;
        let mut q = tape.matmul(h, p("attn.wq")?)?;
        let mut k = tape.matmul(h, p("attn.wk")?)?;
        let v = tape.matmul(h, p("attn.wv")?)?;
        if cfg.pe.variant == PeVariant::Rope {
            q = tape.rope(q, &all_positions, heads, cfg.pe.rope_base)?;
            k = tape.rope(k, &all_positions, heads, cfg.pe.rope_base)?;
        }
        let a = segmented_attention(tape, q, k, v, &segments, &biases, heads)?;
        let a = tape.matmul(a, p("attn.wo")?)?;
        let a = tape.rmsnorm(a, p("attn.norm_out")?, NORM_EPS)?;
        let a = apply_dropout(tape, a, &mut dropout)?;
        x = tape.add(x, a)?;

        let h = tape.rmsnorm(x, p("ffn.norm_in")?, NORM_EPS)?;
        let f = geglu_ffn(tape, h, p("ffn.w")?, p("ffn.v")?, p("ffn.wout")?)?;
        let f = tape.rmsnorm(f, p("ffn.norm_out")?, NORM_EPS)?;
        let f = apply_dropout(tape, f, &mut dropout)?;
        x = tape.add(x, f)?;
    }
    let x = tape.rmsnorm(x, var(vars, FINAL_NORM)?, NORM_EPS)?;
    if cfg.tie_embeddings {
        tape.matmul_nt(x, embed)
    } else {
        tape.matmul(x, var(vars, HEAD)?)
    }
}

/// Eager logits `[n×V]` for one sequence.
pub fn forward_logits<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    ids: &[TokenId],
    posmap: &PositionMap,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, false);
    let batch = Batch::single(ids, posmap.clone())?;
    let logits = forward_on_tape(&mut tape, cfg, &vars, &batch, None)?;
    Ok(tape.value(logits).clone())
}

fn apply_dropout<T: Real>(tape: &mut Tape<T>, x: Var, dropout: &mut Option<(f64, &mut RngStream)>) -> Result<Var> {
    let Some((rate, rng)) = dropout else {
        return Ok(x);
    };
    let rate = *rate;
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..tape.value(x).numel())
        .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep })
        .collect();
    let out: Vec<T> = tape.value(x).data().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
    let shape = tape.shape(x).to_vec();
    tape.custom(
        "dropout",
        Tensor::new(shape, out)?,
        &[x],
        Box::new(move |_inp, _out, g, _| vec![Some(g.iter().zip(&mask).map(|(a, m)| *a * *m).collect())]),
    )
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    start: usize,
    len: usize,
    bias: Option<usize>,
}

fn gather_head<T: Real>(src: &[T], d: usize, seg: Segment, h: usize, dh: usize, dst: &mut [T]) {
    for t in 0..seg.len {
        let row = (seg.start + t) * d + h * dh;
        dst[t * dh..(t + 1) * dh].copy_from_slice(&src[row..row + dh]);
    }
}

fn scatter_head<T: Real>(src: &[T], d: usize, seg: Segment, h: usize, dh: usize, dst: &mut [T]) {
    for t in 0..seg.len {
        let row = (seg.start + t) * d + h * dh;
        dst[row..row + dh].copy_from_slice(&src[t * dh..(t + 1) * dh]);
    }
}

/// Causal multi-head attention of `q, k, v [T×d]` within each segment,
/// `softmax(q kᵀ/√dh + bias) v`; `biases[slot]` is `[heads×n×n]`.
fn segmented_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    segments: &[Segment],
    biases: &[Var],
    heads: usize,
) -> Result<Var> {
    let (rows, d) = (tape.shape(q)[0], tape.shape(q)[1]);
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    for s in segments {
        if let Some(b) = s.bias {
            if tape.shape(biases[b]) != [heads, s.len, s.len] {
                return Err(Error::dim("attention", "bias shape does not match segment"));
            }
        }
    }
    let segments = segments.to_vec();
    let (qv, kv, vv) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let bias_vals: Vec<&[T]> = biases.iter().map(|&b| tape.value(b).data()).collect();
    let mut out = vec![T::zero(); rows * d];
    let mut probs: Vec<Vec<T>> = Vec::with_capacity(segments.len());
    let max_n = segments.iter().map(|s| s.len).max().unwrap_or(0);
    let mut qh = vec![T::zero(); max_n * dh];
    let mut kh = vec![T::zero(); max_n * dh];
    let mut vh = vec![T::zero(); max_n * dh];
    let mut oh = vec![T::zero(); max_n * dh];
    for &seg in &segments {
        let n = seg.len;
        let mut p = vec![T::zero(); heads * n * n];
        for h in 0..heads {
            gather_head(qv, d, seg, h, dh, &mut qh);
            gather_head(kv, d, seg, h, dh, &mut kh);
            gather_head(vv, d, seg, h, dh, &mut vh);
            let ph = &mut p[h * n * n..(h + 1) * n * n];
            gemm(n, dh, n, scale, &qh, false, &kh, true, ph, false);
            let bh = seg.bias.map(|b| &bias_vals[b][h * n * n..(h + 1) * n * n]);
            for i in 0..n {
                let row = &mut ph[i * n..(i + 1) * n];
                if let Some(bh) = bh {
                    for j in 0..=i {
                        row[j] += bh[i * n + j];
                    }
                }
                let mx = row[..=i].iter().fold(T::neg_infinity(), |m, &z| m.max(z));
                let mut sum = T::zero();
                for z in &mut row[..=i] {
                    *z = (*z - mx).exp();
                    sum += *z;
                }
                for z in &mut row[..=i] {
                    *z /= sum;
                }
                row[i + 1..].iter_mut().for_each(|z| *z = T::zero());
            }
            gemm(n, n, dh, T::one(), ph, false, &vh, false, &mut oh, false);
            scatter_head(&oh, d, seg, h, dh, &mut out);
        }
        probs.push(p);
    }
    let n_bias = biases.len();
    let mut parents = vec![q, k, v];
    parents.extend_from_slice(biases);
    tape.custom(
        "attention",
        Tensor::new([rows, d], out)?,
        &parents,
        Box::new(move |inp, _out, g, needs| {
            let (qv, kv, vv) = (inp[0].data(), inp[1].data(), inp[2].data());
            let mut dq = vec![T::zero(); rows * d];
            let mut dk = vec![T::zero(); rows * d];
            let mut dv = vec![T::zero(); rows * d];
            let mut dbias: Vec<Option<Vec<T>>> = (0..n_bias)
                .map(|b| needs[3 + b].then(|| vec![T::zero(); inp[3 + b].numel()]))
                .collect();
            let mut qh = vec![T::zero(); max_n * dh];
            let mut kh = vec![T::zero(); max_n * dh];
            let mut vh = vec![T::zero(); max_n * dh];
            let mut goh = vec![T::zero(); max_n * dh];
            let mut tmp = vec![T::zero(); max_n * dh];
            let mut ds = vec![T::zero(); max_n * max_n];
            for (seg, p) in segments.iter().zip(&probs) {
                let n = seg.len;
                for h in 0..heads {
                    gather_head(qv, d, *seg, h, dh, &mut qh);
                    gather_head(kv, d, *seg, h, dh, &mut kh);
                    gather_head(vv, d, *seg, h, dh, &mut vh);
                    gather_head(g, d, *seg, h, dh, &mut goh);
                    let ph = &p[h * n * n..(h + 1) * n * n];
                    gemm(n, n, dh, T::one(), ph, true, &goh, false, &mut tmp, false);
                    scatter_head(&tmp, d, *seg, h, dh, &mut dv);
                    let ds = &mut ds[..n * n];
                    gemm(n, dh, n, T::one(), &goh, false, &vh, true, ds, false);
                    for i in 0..n {
                        let row = &mut ds[i * n..(i + 1) * n];
                        let pr = &ph[i * n..(i + 1) * n];
                        let dot: T = (0..=i).map(|j| row[j] * pr[j]).sum();
                        for j in 0..=i {
                            row[j] = pr[j] * (row[j] - dot);
                        }
                        row[i + 1..].iter_mut().for_each(|z| *z = T::zero());
                    }
                    if let Some(Some(db)) = seg.bias.map(|b| dbias[b].as_mut()) {
                        for (acc, x) in db[h * n * n..(h + 1) * n * n].iter_mut().zip(ds.iter()) {
                            *acc += *x;
                        }
                    }
                    gemm(n, n, dh, scale, ds, false, &kh, false, &mut tmp, false);
                    scatter_head(&tmp, d, *seg, h, dh, &mut dq);
                    gemm(n, n, dh, scale, ds, true, &qh, false, &mut tmp, false);
                    scatter_head(&tmp, d, *seg, h, dh, &mut dk);
                }
            }
            let mut res = vec![Some(dq), Some(dk), Some(dv)];
            res.extend(dbias);
            res
        }),
    )
}

/// One greedy-decoding request. `posmap`, when given, must cover the prompt
/// plus `max_new` tokens; the identity map is used otherwise.
#[derive(Clone, Debug)]
pub struct DecodeRequest {
    pub prompt: Vec<TokenId>,
    pub posmap: Option<PositionMap>,
}

struct LayerWeights<'a, T: Real> {
    norm_in: &'a [T],
    wq: &'a [T],
    wk: &'a [T],
    wv: &'a [T],
    wo: &'a [T],
    norm_out: &'a [T],
    ffn_norm_in: &'a [T],
    w: &'a [T],
    v: &'a [T],
    wout: &'a [T],
    ffn_norm_out: &'a [T],
}

fn rmsnorm_rows<T: Real>(x: &[T], gain: &[T], d: usize) -> Vec<T> {
    let eps = T::lit(NORM_EPS);
    let dt = T::lit(d as f64);
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = row.iter().map(|v| *v * *v).sum::<T>() / dt;
        let inv = T::one() / (ms + eps).sqrt();
        for ((o, v), g) in o.iter_mut().zip(row).zip(gain) {
            *o = *v * inv * *g;
        }
    }
    out
}

fn rope_rows<T: Real>(x: &mut [T], positions: &[usize], d: usize, heads: usize, base: f64) {
    let dh = d / heads;
    let half = dh / 2;
    let (cos, sin) = rope_tables::<T>(positions, dh, base);
    for (t, row) in x.chunks_mut(d).enumerate() {
        for h in 0..heads {
            for i in 0..half {
                let (c, s) = (cos[t * half + i], sin[t * half + i]);
                let o = h * dh + 2 * i;
                let (x0, x1) = (row[o], row[o + 1]);
                row[o] = x0 * c - x1 * s;
                row[o + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Argmax with ties resolved towards the lowest id.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of every prompt until `stop` or `max_new` tokens.
/// The returned answers exclude `stop`.
pub fn greedy_decode_batch<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    requests: &[DecodeRequest],
    max_new: usize,
    stop: TokenId,
) -> Result<Vec<Vec<TokenId>>> {
    cfg.validate()?;
    let (d, heads, f, vocab) = (cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.vocab_size);
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let embed = params.get(EMBED)?.data();
    let head = if cfg.tie_embeddings {
        None
    } else {
        Some(params.get(HEAD)?.data())
    };
    let final_norm = params.get(FINAL_NORM)?.data();
    let layers = (0..cfg.n_layers)
        .map(|l| {
            let p = |n: &str| params.get(&layer_param(l, n)).map(|t| t.data());
            Ok(LayerWeights {
                norm_in: p("attn.norm_in")?,
                wq: p("attn.wq")?,
                wk: p("attn.wk")?,
                wv: p("attn.wv")?,
                wo: p("attn.wo")?,
                norm_out: p("attn.norm_out")?,
                ffn_norm_in: p("ffn.norm_in")?,
                w: p("ffn.w")?,
                v: p("ffn.v")?,
                wout: p("ffn.wout")?,
                ffn_norm_out: p("ffn.norm_out")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    struct State<T: Real> {
        tokens: Vec<TokenId>,
        prompt_len: usize,
        positions: Vec<usize>,
        bias: Option<std::rc::Rc<Tensor<T>>>,
        keys: Vec<Vec<T>>,
        values: Vec<Vec<T>>,
        done: bool,
    }
    let mut bias_cache: HashMap<Vec<usize>, Option<std::rc::Rc<Tensor<T>>>> = HashMap::new();
    let mut states = Vec::with_capacity(requests.len());
    for r in requests {
        if r.prompt.is_empty() {
            return Err(Error::Argument("empty prompt".into()));
        }
        let total = r.prompt.len() + max_new;
        if total > cfg.max_seq_len {
            return Err(Error::Capacity(format!(
                "prompt of {} tokens plus {max_new} new exceeds max_seq_len {}",
                r.prompt.len(),
                cfg.max_seq_len
            )));
        }
        let positions: Vec<usize> = match &r.posmap {
            Some(pm) if pm.len() < total => {
                return Err(Error::Capacity(format!(
                    "position map covers {} of {total} tokens",
                    pm.len()
                )))
            }
            Some(pm) => pm.positions()[..total].to_vec(),
            None => (0..total).collect(),
        };
        let bias = match bias_cache.get(&positions) {
            Some(b) => b.clone(),
            None => {
                let pm = PositionMap::new(positions.clone())?;
                let b = build_bias(&cfg.pe, params, &pm, heads)?.map(std::rc::Rc::new);
                bias_cache.insert(positions.clone(), b.clone());
                b
            }
        };
        states.push(State {
            tokens: r.prompt.clone(),
            prompt_len: r.prompt.len(),
            positions,
            bias,
            keys: vec![Vec::with_capacity(total * d); cfg.n_layers],
            values: vec![Vec::with_capacity(total * d); cfg.n_layers],
            done: false,
        });
    }

    let mut t = 0;
    loop {
        let active: Vec<usize> = (0..states.len())
            .filter(|&i| !states[i].done && t < states[i].tokens.len())
            .collect();
        if active.is_empty() {
            break;
        }
        let b = active.len();
        let mut x = vec![T::zero(); b * d];
        for (r, &i) in active.iter().enumerate() {
            let id = states[i].tokens[t] as usize;
            if id >= vocab {
                return Err(Error::Vocabulary(format!("#{id}")));
            }
            x[r * d..(r + 1) * d].copy_from_slice(&embed[id * d..(id + 1) * d]);
        }
        let pos: Vec<usize> = active.iter().map(|&i| states[i].positions[t]).collect();
        for (l, lw) in layers.iter().enumerate() {
            let h = rmsnorm_rows(&x, lw.norm_in, d);
            let mut q = vec![T::zero(); b * d];
            let mut k = vec![T::zero(); b * d];
            let mut v = vec![T::zero(); b * d];
            gemm(b, d, d, T::one(), &h, false, lw.wq, false, &mut q, false);
            gemm(b, d, d, T::one(), &h, false, lw.wk, false, &mut k, false);
            gemm(b, d, d, T::one(), &h, false, lw.wv, false, &mut v, false);
            if cfg.pe.variant == PeVariant::Rope {
                rope_rows(&mut q, &pos, d, heads, cfg.pe.rope_base);
                rope_rows(&mut k, &pos, d, heads, cfg.pe.rope_base);
            }
            let mut att = vec![T::zero(); b * d];
            let mut scores = vec![T::zero(); t + 1];
            for (r, &i) in active.iter().enumerate() {
                let st = &mut states[i];
                st.keys[l].extend_from_slice(&k[r * d..(r + 1) * d]);
                st.values[l].extend_from_slice(&v[r * d..(r + 1) * d]);
                let (keys, values) = (&st.keys[l], &st.values[l]);
                for hh in 0..heads {
                    let qh = &q[r * d + hh * dh..r * d + (hh + 1) * dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kh = &keys[j * d + hh * dh..j * d + (hh + 1) * dh];
                        *s = qh.iter().zip(kh).map(|(a, b)| *a * *b).sum::<T>() * scale;
                    }
                    if let Some(bias) = &st.bias {
                        let n = st.positions.len();
                        let row = &bias.data()[(hh * n + t) * n..(hh * n + t) * n + t + 1];
                        scores.iter_mut().zip(row).for_each(|(s, b)| *s += *b);
                    }
                    let mx = scores.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
                    let mut sum = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    let o = &mut att[r * d + hh * dh..r * d + (hh + 1) * dh];
                    for (j, s) in scores.iter().enumerate() {
                        let w = *s / sum;
                        let vh = &values[j * d + hh * dh..j * d + (hh + 1) * dh];
                        o.iter_mut().zip(vh).for_each(|(o, v)| *o += w * *v);
                    }
                }
            }
            let mut a = vec![T::zero(); b * d];
            gemm(b, d, d, T::one(), &att, false, lw.wo, false, &mut a, false);
            let a = rmsnorm_rows(&a, lw.norm_out, d);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += *a);

            let h = rmsnorm_rows(&x, lw.ffn_norm_in, d);
            let mut gate = vec![T::zero(); b * f];
            let mut lin = vec![T::zero(); b * f];
            gemm(b, d, f, T::one(), &h, false, lw.w, false, &mut gate, false);
            gemm(b, d, f, T::one(), &h, false, lw.v, false, &mut lin, false);
            gate.iter_mut().zip(&lin).for_each(|(g, l)| *g = gelu_scalar(*g) * *l);
            let mut o = vec![T::zero(); b * d];
            gemm(b, f, d, T::one(), &gate, false, lw.wout, false, &mut o, false);
            let o = rmsnorm_rows(&o, lw.ffn_norm_out, d);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += *o);
        }
        let want: Vec<usize> = (0..b).filter(|&r| t + 1 >= states[active[r]].prompt_len).collect();
        if !want.is_empty() {
            let xs = rmsnorm_rows(&x, final_norm, d);
            let mut rows = Vec::with_capacity(want.len() * d);
            for &r in &want {
                rows.extend_from_slice(&xs[r * d..(r + 1) * d]);
            }
            let mut logits = vec![T::zero(); want.len() * vocab];
            match head {
                None => gemm(want.len(), d, vocab, T::one(), &rows, false, embed, true, &mut logits, false),
                Some(hw) => gemm(want.len(), d, vocab, T::one(), &rows, false, hw, false, &mut logits, false),
            }
            for (w, &r) in want.iter().enumerate() {
                let row = &logits[w * vocab..(w + 1) * vocab];
                if let Some(bad) = row.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        op: "decode",
                        index: bad,
                        value: row[bad].as_f64(),
                    });
                }
                let st = &mut states[active[r]];
                let next = argmax(row) as TokenId;
                if next == stop {
                    st.done = true;
                } else {
                    st.tokens.push(next);
                    if st.tokens.len() - st.prompt_len >= max_new {
                        st.done = true;
                    }
                }
            }
        }
        t += 1;
    }
    Ok(states.into_iter().map(|s| s.tokens[s.prompt_len..].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{EOS, EQUALS};

    fn tiny(variant: PeVariant) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 64,
            pe: PeSpec::new(variant),
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn desk_parameter_count() {
        let cfg = ModelConfig {
            pe: PeSpec::new(PeVariant::NoPe),
            ..ModelConfig::desk()
        };
        let (v, d, f, l) = (117, 128, 512, 2);
        assert_eq!(cfg.param_count(), v * d + l * (4 * d * d + 3 * d * f + 4 * d) + d);
        let store = init_params::<f32>(&cfg, 0).unwrap();
        assert_eq!(store.total_elements(), cfg.param_count());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny(PeVariant::Fire);
        let a = init_params::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, init_params::<f32>(&cfg, 3).unwrap());
        assert_ne!(a.fingerprint(), init_params::<f32>(&cfg, 4).unwrap().fingerprint());
    }

    #[test]
    fn bad_config_lists_every_field() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 4,
            vocab_size: 30,
            ..ModelConfig::desk()
        };
        let Err(Error::Validation(p)) = cfg.validate() else { panic!() };
        assert!(p.iter().any(|s| s.starts_with("model.n_heads")));
        assert!(p.iter().any(|s| s.starts_with("model.vocab_size")));
    }

    #[test]
    fn decode_matches_full_forward() {
        for variant in PeVariant::ALL {
            let cfg = tiny(variant);
            let params = init_params::<f64>(&cfg, 1).unwrap();
            let prompt: Vec<TokenId> = vec![3, 4, 10, 5, 6, EQUALS];
            let out = greedy_decode_batch(
                &params,
                &cfg,
                &[DecodeRequest {
                    prompt: prompt.clone(),
                    posmap: None,
                }],
                5,
                EOS,
            )
            .unwrap();
            let mut seq = prompt.clone();
            for _ in 0..5 {
                let logits = forward_logits(&params, &cfg, &seq, &PositionMap::identity(seq.len())).unwrap();
                let v = cfg.vocab_size;
                let next = argmax(&logits.data()[(seq.len() - 1) * v..]) as TokenId;
                if next == EOS {
                    break;
                }
                seq.push(next);
            }
            assert_eq!(out[0], seq[prompt.len()..], "{variant}");
        }
    }

    #[test]
    fn batch_equals_separate_sequences() {
        let cfg = tiny(PeVariant::KerpleLog);
        let params = init_params::<f64>(&cfg, 2).unwrap();
        let a: Vec<TokenId> = vec![1, 2, 3, 10, 4];
        let b: Vec<TokenId> = vec![7, 8, 11];
        let mut batch = Batch::new();
        batch.push(&a, PositionMap::identity(a.len())).unwrap();
        batch.push(&b, PositionMap::identity(b.len())).unwrap();
        let mut tape = Tape::new();
        let vars = params.to_tape(&mut tape, false);
        let out = forward_on_tape(&mut tape, &cfg, &vars, &batch, None).unwrap();
        let joint = tape.value(out).data().to_vec();
        let la = forward_logits(&params, &cfg, &a, &PositionMap::identity(a.len())).unwrap();
        let lb = forward_logits(&params, &cfg, &b, &PositionMap::identity(b.len())).unwrap();
        let sep: Vec<f64> = la.data().iter().chain(lb.data()).copied().collect();
        for (x, y) in joint.iter().zip(&sep) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_and_masks() {
        let mut batch = Batch::new();
        batch.push(&[1, 2, 3, 4], PositionMap::identity(4)).unwrap();
        batch.push(&[5, 6], PositionMap::identity(2)).unwrap();
        let (t, m) = next_token_targets(&batch, &[2, 1], LossMask::Full);
        assert_eq!(t, vec![2, 3, 4, 0, 6, 0]);
        assert_eq!(m, vec![true, true, true, false, true, false]);
        let (_, m) = next_token_targets(&batch, &[2, 1], LossMask::Answer);
        assert_eq!(m, vec![false, true, true, false, true, false]);
    }

    #[test]
    fn too_long_is_capacity_error() {
        let cfg = tiny(PeVariant::NoPe);
        let params = init_params::<f32>(&cfg, 0).unwrap();
        let ids = vec![1; 65];
        assert!(matches!(
            forward_logits(&params, &cfg, &ids, &PositionMap::identity(65)),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn decay_exemptions() {
        assert!(decays("layers.0.attn.wq"));
        assert!(decays(EMBED));
        assert!(!decays("layers.1.ffn.norm_out"));
        assert!(!decays(FINAL_NORM));
        assert!(!decays("pe.fire.w1"));
    }
}
