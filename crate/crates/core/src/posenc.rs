//! Positional encodings: additive attention biases (Alibi, KerpleLog, T5
//! buckets, FIRE), rotary embeddings, and randomized position maps.
//!
//! Additive variants produce a bias `B[h][a][b] = b(pos[a], pos[b])` that is
//! added to the pre-softmax attention logits. RoPE instead rotates queries
//! and keys. NoPE contributes nothing beyond the causal mask.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{rope_tables, softplus_inverse, ParamStore, Real, RngStream, Tape, Tensor, Var};

pub const FIRE_HIDDEN: usize = 32;

pub const KERPLE_R1: &str = "pe.kerple.r1";
pub const KERPLE_R2: &str = "pe.kerple.r2";
pub const T5_TABLE: &str = "pe.t5.table";
pub const FIRE_W1: &str = "pe.fire.w1";
pub const FIRE_B1: &str = "pe.fire.b1";
pub const FIRE_W2: &str = "pe.fire.w2";
pub const FIRE_B2: &str = "pe.fire.b2";
pub const FIRE_C: &str = "pe.fire.c";
pub const FIRE_L: &str = "pe.fire.l";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeVariant {
    NoPe,
    Rope,
    Alibi,
    KerpleLog,
    T5Bucket,
    Fire,
}

impl PeVariant {
    pub const ALL: [PeVariant; 6] = [
        PeVariant::NoPe,
        PeVariant::Rope,
        PeVariant::Alibi,
        PeVariant::KerpleLog,
        PeVariant::T5Bucket,
        PeVariant::Fire,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PeVariant::NoPe => "nope",
            PeVariant::Rope => "rope",
            PeVariant::Alibi => "alibi",
            PeVariant::KerpleLog => "kerple_log",
            PeVariant::T5Bucket => "t5",
            PeVariant::Fire => "fire",
        }
    }

    /// Whether the variant is realised as an additive bias matrix.
    pub fn is_additive(self) -> bool {
        matches!(
            self,
            PeVariant::Alibi | PeVariant::KerpleLog | PeVariant::T5Bucket | PeVariant::Fire
        )
    }
}

impl fmt::Display for PeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PeVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown positional encoding {s:?}")))
    }
}

/// Positional-encoding choice and its hyperparameters. Learnable values
/// (Kerple scalars, T5 table, FIRE MLP and scalars) live in the model's
/// parameter store under the `pe.*` names.
#[derive(Clone, Debug, PartialEq)]
pub struct PeSpec {
    pub variant: PeVariant,
    pub rope_base: f64,
    /// Per-head Alibi slopes; `None` selects `2^(-8h/H)` for `h = 1..=H`.
    pub alibi_slopes: Option<Vec<f64>>,
    pub kerple_r1_init: f64,
    pub kerple_r2_init: f64,
    /// Bucket count minus one.
    pub t5_k: usize,
    /// Distance from which every pair shares the last bucket.
    pub t5_l1: usize,
    pub fire_c_init: f64,
    pub fire_l_init: f64,
    pub randomized: bool,
    pub randomized_lmax: usize,
    /// Also sample random positions when evaluating.
    pub randomize_eval: bool,
}

impl Default for PeSpec {
    fn default() -> Self {
        Self {
            variant: PeVariant::Fire,
            rope_base: 10_000.0,
            alibi_slopes: None,
            kerple_r1_init: 1.0,
            kerple_r2_init: 1.0,
            t5_k: 31,
            t5_l1: 128,
            fire_c_init: 1.0,
            fire_l_init: 64.0,
            randomized: false,
            randomized_lmax: 256,
            randomize_eval: false,
        }
    }
}

impl PeSpec {
    pub fn new(variant: PeVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn slopes(&self, heads: usize) -> Vec<f64> {
        self.alibi_slopes.clone().unwrap_or_else(|| alibi_slopes(heads))
    }

    /// Positions for an `n`-token sequence: random when randomization is on
    /// and `rng` is supplied, identity otherwise.
    pub fn positions(&self, n: usize, rng: Option<&mut RngStream>) -> Result<PositionMap> {
        match rng {
            Some(rng) if self.randomized => sample_positions(n, self.randomized_lmax, rng),
            _ => Ok(PositionMap::identity(n)),
        }
    }
}

/// Strictly increasing position index per token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PositionMap {
    positions: Vec<usize>,
}

impl PositionMap {
    pub fn identity(n: usize) -> Self {
        Self {
            positions: (0..n).collect(),
        }
    }

    pub fn new(positions: Vec<usize>) -> Result<Self> {
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(format!(
                "positions must be strictly increasing: {positions:?}"
            )));
        }
        Ok(Self { positions })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.positions.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn max_position(&self) -> Option<usize> {
        self.positions.last().copied()
    }
}

/// Geometric slopes `2^(-8h/H)`, `h = 1..=H`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / heads as f64))
        .collect()
}

pub fn bias_alibi(i: usize, j: usize, r: f64) -> f64 {
    -r * i.abs_diff(j) as f64
}

pub fn bias_kerple_log(i: usize, j: usize, r1: f64, r2: f64) -> Result<f64> {
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::Parameter(format!(
            "kerple scalars must be positive, got r1={r1}, r2={r2}"
        )));
    }
    Ok(-r1 * (r2 * i.abs_diff(j) as f64).ln_1p())
}

fn check_t5(k: usize, l1: usize) -> Result<usize> {
    let buckets = k + 1;
    if buckets < 2 || !buckets.is_multiple_of(2) {
        return Err(Error::Parameter(format!("t5 bucket count K+1={buckets} must be even")));
    }
    let half = buckets / 2;
    if l1 <= half {
        return Err(Error::Parameter(format!(
            "t5 max distance L1={l1} must exceed (K+1)/2={half}"
        )));
    }
    Ok(half)
}

/// Log-binned bucket index for a non-negative distance: exact below
/// `(K+1)/2`, logarithmic up to `L1`, `K` from `L1` on.
pub fn t5_bucket(distance: usize, k: usize, l1: usize) -> Result<usize> {
    let half = check_t5(k, l1)?;
    Ok(bucket_unchecked(distance, k, l1, half))
}

fn bucket_unchecked(distance: usize, k: usize, l1: usize, half: usize) -> usize {
    if distance < half {
        distance
    } else if distance < l1 {
        let h = half as f64;
        let log_ratio = (2.0 * distance as f64 / (k + 1) as f64).ln() / (2.0 * l1 as f64 / (k + 1) as f64).ln();
        (half + (h * log_ratio).floor() as usize).min(k)
    } else {
        k
    }
}

pub fn bias_t5_bucket(distance: usize, k: usize, l1: usize, table: &[f64]) -> Result<f64> {
    if table.len() != k + 1 {
        return Err(Error::Parameter(format!(
            "t5 table has {} entries, expected K+1={}",
            table.len(),
            k + 1
        )));
    }
    Ok(table[t5_bucket(distance, k, l1)?])
}

/// One head's FIRE network: `1 → hidden (ReLU) → 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FireMlp {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl FireMlp {
    pub fn eval(&self, x: f64) -> f64 {
        self.b2
            + self
                .w1
                .iter()
                .zip(&self.b1)
                .zip(&self.w2)
                .map(|((w1, b1), w2)| w2 * (w1 * x + b1).max(0.0))
                .sum::<f64>()
    }

    /// Head `h` of the `pe.fire.*` tensors in `params`.
    pub fn from_params<T: Real>(params: &ParamStore<T>, h: usize) -> Result<Self> {
        let row = |name: &str| -> Result<Vec<f64>> {
            let t = params.get(name)?;
            let hid = t.shape()[1];
            Ok(t.data()[h * hid..(h + 1) * hid].iter().map(|x| x.as_f64()).collect())
        };
        Ok(Self {
            w1: row(FIRE_W1)?,
            b1: row(FIRE_B1)?,
            w2: row(FIRE_W2)?,
            b2: params.get(FIRE_B2)?.data()[h].as_f64(),
        })
    }
}

/// `ψ(x) = log(c·x + 1)`.
pub fn fire_psi(x: f64, c: f64) -> f64 {
    (c * x).ln_1p()
}

/// Normalised log-distance fed to the FIRE network for query `i`, key `j`.
pub fn fire_input(i: usize, j: usize, c: f64, l: f64) -> Result<f64> {
    if !(c > 0.0 && l > 0.0) {
        return Err(Error::Parameter(format!(
            "fire scalars must be positive, got c={c}, L={l}"
        )));
    }
    if j > i {
        return Err(Error::Argument(format!("fire bias is causal: key {j} after query {i}")));
    }
    Ok(fire_psi((i - j) as f64, c) / fire_psi(l.max(i as f64), c))
}

pub fn bias_fire(i: usize, j: usize, mlp: &FireMlp, c: f64, l: f64) -> Result<f64> {
    Ok(mlp.eval(fire_input(i, j, c, l)?))
}

/// Rotates each plane `(2t, 2t+1)` of `vec` by `position · base^(−2t/d)`.
pub fn rope_apply<T: Real>(vec: &Tensor<T>, position: usize, base: f64) -> Result<Tensor<T>> {
    let d = vec.numel();
    if vec.rank() != 1 || !d.is_multiple_of(2) {
        return Err(Error::dim("rope_apply", format!("need an even-length vector, got {:?}", vec.shape())));
    }
    let (cos, sin) = rope_tables::<T>(&[position], d, base);
    let x = vec.data();
    let mut out = vec![T::zero(); d];
    for t in 0..d / 2 {
        out[2 * t] = x[2 * t] * cos[t] - x[2 * t + 1] * sin[t];
        out[2 * t + 1] = x[2 * t] * sin[t] + x[2 * t + 1] * cos[t];
    }
    Tensor::new([d], out)
}

/// Uniformly random strictly increasing `n`-subset of `[0, lmax)`.
pub fn sample_positions(n: usize, lmax: usize, rng: &mut RngStream) -> Result<PositionMap> {
    if n > lmax {
        return Err(Error::Capacity(format!(
            "cannot place {n} tokens in {lmax} positions"
        )));
    }
    let mut positions = rand::seq::index::sample(rng, lmax, n).into_vec();
    positions.sort_unstable();
    Ok(PositionMap { positions })
}

/// Shapes of the learnable tensors a variant adds for `heads` heads.
pub fn pe_param_shapes(spec: &PeSpec, heads: usize) -> Vec<(&'static str, Vec<usize>)> {
    match spec.variant {
        PeVariant::NoPe | PeVariant::Rope | PeVariant::Alibi => vec![],
        PeVariant::KerpleLog => vec![(KERPLE_R1, vec![heads]), (KERPLE_R2, vec![heads])],
        PeVariant::T5Bucket => vec![(T5_TABLE, vec![heads, spec.t5_k + 1])],
        PeVariant::Fire => vec![
            (FIRE_W1, vec![heads, FIRE_HIDDEN]),
            (FIRE_B1, vec![heads, FIRE_HIDDEN]),
            (FIRE_W2, vec![heads, FIRE_HIDDEN]),
            (FIRE_B2, vec![heads]),
            (FIRE_C, vec![1]),
            (FIRE_L, vec![1]),
        ],
    }
}

/// Initial values of the learnable PE tensors. Positive scalars are stored
/// as softplus pre-images. FIRE's output layer starts at zero so the
/// initial bias is zero.
pub fn init_pe_params<T: Real>(spec: &PeSpec, heads: usize, rng: &mut RngStream) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::new();
    match spec.variant {
        PeVariant::NoPe | PeVariant::Rope | PeVariant::Alibi => {}
        PeVariant::KerpleLog => {
            let r1 = T::lit(softplus_inverse(spec.kerple_r1_init));
            let r2 = T::lit(softplus_inverse(spec.kerple_r2_init));
            out.push((KERPLE_R1.into(), Tensor::full([heads], r1)));
            out.push((KERPLE_R2.into(), Tensor::full([heads], r2)));
        }
        PeVariant::T5Bucket => {
            check_t5(spec.t5_k, spec.t5_l1)?;
            out.push((T5_TABLE.into(), Tensor::zeros([heads, spec.t5_k + 1])));
        }
        PeVariant::Fire => {
            let a = (6.0 / (1.0 + FIRE_HIDDEN as f64)).sqrt();
            out.push((FIRE_W1.into(), Tensor::uniform([heads, FIRE_HIDDEN], -a, a, rng)));
            out.push((FIRE_B1.into(), Tensor::uniform([heads, FIRE_HIDDEN], -a, a, rng)));
            out.push((FIRE_W2.into(), Tensor::zeros([heads, FIRE_HIDDEN])));
            out.push((FIRE_B2.into(), Tensor::zeros([heads])));
            out.push((FIRE_C.into(), Tensor::scalar(T::lit(softplus_inverse(spec.fire_c_init)))));
            out.push((FIRE_L.into(), Tensor::scalar(T::lit(softplus_inverse(spec.fire_l_init)))));
        }
    }
    Ok(out)
}

fn lookup(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Configuration(format!("positional encoding parameter {name} missing")))
}

/// Records the attention bias for one sequence on `tape`.
///
/// Returns `None` when the variant adds no bias (NoPE, RoPE). The result is
/// `[heads×n×n]`; entries above the diagonal are left at zero or unspecified
/// and are masked by the softmax.
pub fn bias_on_tape<T: Real>(
    tape: &mut Tape<T>,
    spec: &PeSpec,
    vars: &BTreeMap<String, Var>,
    posmap: &PositionMap,
    heads: usize,
) -> Result<Option<Var>> {
    let pos = posmap.positions();
    let n = pos.len();
    match spec.variant {
        PeVariant::NoPe | PeVariant::Rope => Ok(None),
        PeVariant::Alibi => {
            let slopes = spec.slopes(heads);
            if slopes.len() != heads {
                return Err(Error::Configuration(format!(
                    "{} alibi slopes for {heads} heads",
                    slopes.len()
                )));
            }
            let mut out = vec![T::zero(); heads * n * n];
            for (h, r) in slopes.iter().enumerate() {
                for a in 0..n {
                    for b in 0..n {
                        out[(h * n + a) * n + b] = T::lit(bias_alibi(pos[a], pos[b], *r));
                    }
                }
            }
            Ok(Some(tape.constant(Tensor::new([heads, n, n], out)?)))
        }
        PeVariant::KerpleLog => {
            let r1 = lookup(vars, KERPLE_R1)?;
            let r2 = lookup(vars, KERPLE_R2)?;
            let r1 = tape.softplus(r1)?;
            let r2 = tape.softplus(r2)?;
            kerple_op(tape, r1, r2, pos, heads).map(Some)
        }
        PeVariant::T5Bucket => {
            let table = lookup(vars, T5_TABLE)?;
            t5_op(tape, table, pos, heads, spec.t5_k, spec.t5_l1).map(Some)
        }
        PeVariant::Fire => {
            let c = lookup(vars, FIRE_C)?;
            let l = lookup(vars, FIRE_L)?;
            let c = tape.softplus(c)?;
            let l = tape.softplus(l)?;
            let u = fire_features_op(tape, c, l, pos)?;
            let mlp = [FIRE_W1, FIRE_B1, FIRE_W2, FIRE_B2]
                .map(|name| lookup(vars, name))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            fire_mlp_op(tape, u, &mlp, heads).map(Some)
        }
    }
}

/// Eager bias matrix `[heads×n×n]` for a sequence. NoPE yields zeros;
/// RoPE yields `None` since it acts on queries and keys instead.
pub fn build_bias<T: Real>(
    spec: &PeSpec,
    params: &ParamStore<T>,
    posmap: &PositionMap,
    heads: usize,
) -> Result<Option<Tensor<T>>> {
    let n = posmap.len();
    match spec.variant {
        PeVariant::Rope => Ok(None),
        PeVariant::NoPe => Ok(Some(Tensor::zeros([heads, n, n]))),
        _ => {
            for (name, shape) in pe_param_shapes(spec, heads) {
                let t = params.get(name).map_err(|_| {
                    Error::Configuration(format!("{} bias needs parameter {name}", spec.variant))
                })?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Configuration(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
            }
            let mut tape = Tape::new();
            let vars = params.to_tape(&mut tape, false);
            let v = bias_on_tape(&mut tape, spec, &vars, posmap, heads)?;
            Ok(v.map(|v| tape.value(v).clone()))
        }
    }
}

fn check_heads<T: Real>(tape: &Tape<T>, op: &'static str, v: Var, heads: usize) -> Result<()> {
    if tape.shape(v)[0] != heads {
        return Err(Error::dim(op, format!("parameter shape {:?} for {heads} heads", tape.shape(v))));
    }
    Ok(())
}

fn kerple_op<T: Real>(tape: &mut Tape<T>, r1: Var, r2: Var, pos: &[usize], heads: usize) -> Result<Var> {
    check_heads(tape, "kerple_bias", r1, heads)?;
    check_heads(tape, "kerple_bias", r2, heads)?;
    let n = pos.len();
    let dist: Vec<T> = (0..n * n).map(|e| T::lit(pos[e / n].abs_diff(pos[e % n]) as f64)).collect();
    let (r1v, r2v) = (tape.value(r1).data().to_vec(), tape.value(r2).data().to_vec());
    let mut out = vec![T::zero(); heads * n * n];
    for h in 0..heads {
        for (e, d) in dist.iter().enumerate() {
            out[h * n * n + e] = -r1v[h] * (r2v[h] * *d).ln_1p();
        }
    }
    tape.custom(
        "kerple_bias",
        Tensor::from_parts(vec![heads, n, n], out),
        &[r1, r2],
        Box::new(move |inp, _out, g, _| {
            let (r1v, r2v) = (inp[0].data(), inp[1].data());
            let mut d1 = vec![T::zero(); heads];
            let mut d2 = vec![T::zero(); heads];
            for h in 0..heads {
                for (e, d) in dist.iter().enumerate() {
                    let go = g[h * n * n + e];
                    d1[h] -= go * (r2v[h] * *d).ln_1p();
                    d2[h] -= go * r1v[h] * *d / (T::one() + r2v[h] * *d);
                }
            }
            vec![Some(d1), Some(d2)]
        }),
    )
}

fn t5_op<T: Real>(tape: &mut Tape<T>, table: Var, pos: &[usize], heads: usize, k: usize, l1: usize) -> Result<Var> {
    check_heads(tape, "t5_bias", table, heads)?;
    let half = check_t5(k, l1)?;
    let nb = k + 1;
    if tape.shape(table) != [heads, nb] {
        return Err(Error::dim("t5_bias", format!("table shape {:?}", tape.shape(table))));
    }
    let n = pos.len();
    let buckets: Vec<usize> = (0..n * n)
        .map(|e| bucket_unchecked(pos[e / n].abs_diff(pos[e % n]), k, l1, half))
        .collect();
    let tv = tape.value(table).data();
    let out: Vec<T> = (0..heads * n * n)
        .map(|i| tv[(i / (n * n)) * nb + buckets[i % (n * n)]])
        .collect();
    tape.custom(
        "t5_bias",
        Tensor::from_parts(vec![heads, n, n], out),
        &[table],
        Box::new(move |_inp, _out, g, _| {
            let mut d = vec![T::zero(); heads * nb];
            for h in 0..heads {
                for (e, &b) in buckets.iter().enumerate() {
                    d[h * nb + b] += g[h * n * n + e];
                }
            }
            vec![Some(d)]
        }),
    )
}

/// `u[a][b] = ψ(p_a − p_b) / ψ(max(L, p_a))` on the causal triangle, zero above it.
fn fire_features_op<T: Real>(tape: &mut Tape<T>, c: Var, l: Var, pos: &[usize]) -> Result<Var> {
    let n = pos.len();
    let pos = pos.to_vec();
    let (cv, lv) = (tape.value(c).data()[0], tape.value(l).data()[0]);
    let mut u = vec![T::zero(); n * n];
    for a in 0..n {
        let den = (cv * lv.max(T::lit(pos[a] as f64))).ln_1p();
        for b in 0..=a {
            u[a * n + b] = (cv * T::lit((pos[a] - pos[b]) as f64)).ln_1p() / den;
        }
    }
    tape.custom(
        "fire_features",
        Tensor::from_parts(vec![n, n], u),
        &[c, l],
        Box::new(move |inp, _out, g, _| {
            let (c, l) = (inp[0].data()[0], inp[1].data()[0]);
            let (mut dc, mut dl) = (T::zero(), T::zero());
            for a in 0..n {
                let pa = T::lit(pos[a] as f64);
                let l_active = l > pa;
                let m = if l_active { l } else { pa };
                let den = (c * m).ln_1p();
                let dden_dc = m / (T::one() + c * m);
                for b in 0..=a {
                    let go = g[a * n + b];
                    if go == T::zero() {
                        continue;
                    }
                    let d = T::lit((pos[a] - pos[b]) as f64);
                    let num = (c * d).ln_1p();
                    dc += go * (d / (T::one() + c * d) / den - num * dden_dc / (den * den));
                    if l_active {
                        dl -= go * num * (c / (T::one() + c * l)) / (den * den);
                    }
                }
            }
            vec![Some(vec![dc]), Some(vec![dl])]
        }),
    )
}

/// Per-head `b2 + Σ_k w2_k·relu(w1_k·u + b1_k)` over the causal triangle of `u`.
fn fire_mlp_op<T: Real>(tape: &mut Tape<T>, u: Var, mlp: &[Var], heads: usize) -> Result<Var> {
    let [w1, b1, w2, b2] = [mlp[0], mlp[1], mlp[2], mlp[3]];
    for v in [w1, b1, w2] {
        if tape.shape(v) != [heads, FIRE_HIDDEN] {
            return Err(Error::dim("fire_mlp", format!("parameter shape {:?}", tape.shape(v))));
        }
    }
    check_heads(tape, "fire_mlp", b2, heads)?;
    let n = tape.shape(u)[0];
    let hid = FIRE_HIDDEN;
    let uv = tape.value(u).data();
    let (w1v, b1v, w2v, b2v) = (
        tape.value(w1).data(),
        tape.value(b1).data(),
        tape.value(w2).data(),
        tape.value(b2).data(),
    );
    let mut out = vec![T::zero(); heads * n * n];
    for h in 0..heads {
        let (w1h, b1h, w2h) = (&w1v[h * hid..][..hid], &b1v[h * hid..][..hid], &w2v[h * hid..][..hid]);
        for a in 0..n {
            for b in 0..=a {
                let x = uv[a * n + b];
                let mut acc = b2v[h];
                for k in 0..hid {
                    let pre = w1h[k] * x + b1h[k];
                    if pre > T::zero() {
                        acc += w2h[k] * pre;
                    }
                }
                out[(h * n + a) * n + b] = acc;
            }
        }
    }
    tape.custom(
        "fire_mlp",
        Tensor::from_parts(vec![heads, n, n], out),
        &[u, w1, b1, w2, b2],
        Box::new(move |inp, _out, g, needs| {
            let uv = inp[0].data();
            let (w1v, b1v, w2v) = (inp[1].data(), inp[2].data(), inp[3].data());
            let mut du = vec![T::zero(); n * n];
            let mut dw1 = vec![T::zero(); heads * hid];
            let mut db1 = vec![T::zero(); heads * hid];
            let mut dw2 = vec![T::zero(); heads * hid];
            let mut db2 = vec![T::zero(); heads];
            for h in 0..heads {
                for a in 0..n {
                    for b in 0..=a {
                        let go = g[(h * n + a) * n + b];
                        if go == T::zero() {
                            continue;
                        }
                        let x = uv[a * n + b];
                        db2[h] += go;
                        for k in 0..hid {
                            let i = h * hid + k;
                            let pre = w1v[i] * x + b1v[i];
                            if pre > T::zero() {
                                dw2[i] += go * pre;
                                let dpre = go * w2v[i];
                                dw1[i] += dpre * x;
                                db1[i] += dpre;
                                du[a * n + b] += dpre * w1v[i];
                            }
                        }
                    }
                }
            }
            vec![
                needs[0].then_some(du),
                Some(dw1),
                Some(db1),
                Some(dw2),
                Some(db2),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alibi_examples() {
        assert_eq!(bias_alibi(5, 5, 0.7), 0.0);
        assert_eq!(bias_alibi(7, 3, 0.5), -2.0);
    }

    #[test]
    fn kerple_examples() {
        assert_eq!(bias_kerple_log(4, 4, 0.3, 2.0).unwrap(), 0.0);
        let v = bias_kerple_log(3, 2, 1.0, std::f64::consts::E - 1.0).unwrap();
        assert!((v + 1.0).abs() < 1e-15);
        assert!(bias_kerple_log(3, 2, 0.0, 1.0).is_err());
        assert!(bias_kerple_log(3, 2, 1.0, -1.0).is_err());
    }

    #[test]
    fn t5_branches() {
        let table: Vec<f64> = (0..32).map(|i| i as f64 * 10.0).collect();
        assert_eq!(bias_t5_bucket(0, 31, 128, &table).unwrap(), 0.0);
        assert_eq!(bias_t5_bucket(300, 31, 128, &table).unwrap(), 310.0);
        assert!(t5_bucket(3, 30, 128).is_err());
        assert!(t5_bucket(3, 31, 16).is_err());
    }

    #[test]
    fn fire_diagonal_is_network_at_zero() {
        let mlp = FireMlp {
            w1: vec![0.5, -1.0],
            b1: vec![0.2, 0.3],
            w2: vec![1.5, -2.0],
            b2: 0.1,
        };
        let f0 = mlp.eval(0.0);
        for i in [0, 3, 17, 200] {
            assert_eq!(bias_fire(i, i, &mlp, 0.7, 9.5).unwrap(), f0);
        }
        assert!(bias_fire(3, 1, &mlp, 0.0, 1.0).is_err());
        assert!(bias_fire(3, 1, &mlp, 1.0, -1.0).is_err());
    }

    #[test]
    fn rope_identity_at_zero_and_odd_rejected() {
        let v = Tensor::<f64>::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rope_apply(&v, 0, 10_000.0).unwrap(), v);
        let odd = Tensor::<f64>::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(rope_apply(&odd, 1, 10_000.0).is_err());
    }

    #[test]
    fn sample_positions_forced_and_capacity() {
        let mut rng = RngStream::new(1, 2);
        assert_eq!(sample_positions(10, 10, &mut rng).unwrap(), PositionMap::identity(10));
        let p = sample_positions(3, 10, &mut rng).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.positions().windows(2).all(|w| w[0] < w[1]));
        assert!(p.positions().iter().all(|&x| x < 10));
        assert!(matches!(sample_positions(11, 10, &mut rng), Err(Error::Capacity(_))));
    }

    #[test]
    fn alibi_identity_matrix() {
        let spec = PeSpec {
            alibi_slopes: Some(vec![1.0]),
            ..PeSpec::new(PeVariant::Alibi)
        };
        let b = build_bias::<f64>(&spec, &ParamStore::new(), &PositionMap::identity(4), 1)
            .unwrap()
            .unwrap();
        let want: [&[f64]; 4] = [&[0.0], &[-1.0, 0.0], &[-2.0, -1.0, 0.0], &[-3.0, -2.0, -1.0, 0.0]];
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(b.at(&[0, i, j]), *v);
            }
        }
    }

    #[test]
    fn nope_is_zero_and_rope_has_no_bias() {
        let p = ParamStore::<f32>::new();
        let z = build_bias(&PeSpec::new(PeVariant::NoPe), &p, &PositionMap::identity(5), 2)
            .unwrap()
            .unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        assert!(build_bias(&PeSpec::new(PeVariant::Rope), &p, &PositionMap::identity(5), 2)
            .unwrap()
            .is_none());
    }

    #[test]
    fn missing_parameters_are_a_configuration_error() {
        let p = ParamStore::<f32>::new();
        let err = build_bias(&PeSpec::new(PeVariant::Fire), &p, &PositionMap::identity(3), 2).unwrap_err();
        assert!(matches!(err, Error::Configuration(_)));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in PeVariant::ALL {
            assert_eq!(v.as_str().parse::<PeVariant>().unwrap(), v);
        }
        assert!("sinusoidal".parse::<PeVariant>().is_err());
    }

    #[test]
    fn position_map_rejects_non_increasing() {
        assert!(PositionMap::new(vec![0, 2, 2]).is_err());
        assert!(PositionMap::new(vec![1, 4, 9]).unwrap().max_position() == Some(9));
    }
}
