//! Positional-encoding golden checks. Every check compares the library
//! against a formula written out here, and returns a short summary or
//! the first discrepancy.

use std::collections::BTreeMap;

use lengen::numerics::{ParamStore, RngStream, Tensor};
use lengen::posenc::{
    build_bias, init_pe_params, rope_apply, t5_bucket, PeSpec, PeVariant, PositionMap, FIRE_B1, FIRE_B2, FIRE_C,
    FIRE_L, FIRE_W1, FIRE_W2, KERPLE_R1, KERPLE_R2, T5_TABLE,
};

pub type Check = Result<String, String>;

const HEADS: usize = 4;

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn pe_params(spec: &PeSpec, seed: u64) -> ParamStore<f64> {
    let mut rng = RngStream::new(seed, 3);
    let mut p = ParamStore::new();
    for (name, t) in init_pe_params::<f64>(spec, HEADS, &mut rng).unwrap() {
        // Move every learnable value off its initial constant.
        let noise = Tensor::<f64>::randn(t.shape().to_vec(), 0.5, &mut rng);
        let mut t = t;
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
        p.insert(name, t).unwrap();
    }
    p
}

fn bias(spec: &PeSpec, params: &ParamStore<f64>, n: usize) -> Vec<f64> {
    build_bias(spec, params, &PositionMap::identity(n), HEADS)
        .unwrap()
        .expect("additive variant")
        .data()
        .to_vec()
}

fn at(b: &[f64], n: usize, h: usize, i: usize, j: usize) -> f64 {
    b[(h * n + i) * n + j]
}

/// Causal entries equal `oracle(h, i, j)`, the diagonal is zero and every
/// causal diagonal is constant.
fn relative_check(name: &str, b: &[f64], n: usize, tol: f64, oracle: impl Fn(usize, usize, usize) -> f64) -> Check {
    for h in 0..HEADS {
        for i in 0..n {
            if at(b, n, h, i, i) != 0.0 {
                return Err(format!("{name}: B[{h}][{i}][{i}] = {} is not zero", at(b, n, h, i, i)));
            }
            for j in 0..=i {
                let (got, want) = (at(b, n, h, i, j), oracle(h, i, j));
                if (got - want).abs() > tol * (1.0 + want.abs()) {
                    return Err(format!("{name}: B[{h}][{i}][{j}] = {got}, formula gives {want}"));
                }
                if i + 1 < n && at(b, n, h, i + 1, j + 1) != got {
                    return Err(format!("{name}: not Toeplitz at ({i},{j})"));
                }
            }
        }
    }
    Ok(format!("{name}: {HEADS} heads x {n} positions match, zero diagonal, Toeplitz"))
}

pub fn alibi() -> Check {
    let n = 24;
    let spec = PeSpec::new(PeVariant::Alibi);
    let b = bias(&spec, &ParamStore::new(), n);
    // Slopes 2^(-8h/H) for h = 1..=H.
    relative_check("alibi", &b, n, 1e-12, |h, i, j| {
        -(2f64.powf(-8.0 * (h + 1) as f64 / HEADS as f64)) * (i - j) as f64
    })
}

pub fn kerple_log() -> Check {
    let n = 24;
    let spec = PeSpec::new(PeVariant::KerpleLog);
    let p = pe_params(&spec, 11);
    let b = bias(&spec, &p, n);
    let r1: Vec<f64> = p.get(KERPLE_R1).unwrap().data().iter().map(|&x| softplus(x)).collect();
    let r2: Vec<f64> = p.get(KERPLE_R2).unwrap().data().iter().map(|&x| softplus(x)).collect();
    relative_check("kerple_log", &b, n, 1e-12, |h, i, j| -r1[h] * (1.0 + r2[h] * (i - j) as f64).ln())
}

/// Bucket of distance `d` by exact integer arithmetic: below `(K+1)/2` the
/// distance itself; then `(K+1)/2 + m` with `m` the largest integer such
/// that `(2d/(K+1))^((K+1)/2) >= (2·L1/(K+1))^m`; `K` from `L1` on.
/// Valid for K=31, L1=128, where both sides are powers of two times
/// `d^16` and fit in 128 bits.
fn t5_oracle(d: usize) -> usize {
    const HALF: u32 = 16;
    if d < HALF as usize {
        return d;
    }
    if d >= 128 {
        return 31;
    }
    // (d/16)^16 >= 8^m  <=>  d^16 >= 2^(64 + 3m)
    let lhs = (d as u128).pow(HALF);
    let m = (0..HALF).rev().find(|&m| lhs >= 1u128 << (64 + 3 * m)).unwrap_or(0);
    HALF as usize + m as usize
}

pub fn t5_bucket_brute_force() -> Check {
    for d in 0..=512 {
        let got = t5_bucket(d, 31, 128).map_err(|e| e.to_string())?;
        let want = t5_oracle(d);
        if got != want {
            return Err(format!("t5: distance {d} lands in bucket {got}, formula gives {want}"));
        }
    }
    let n = 40;
    let mut spec = PeSpec::new(PeVariant::T5Bucket);
    spec.t5_k = 31;
    spec.t5_l1 = 16 + 8;
    let p = pe_params(&spec, 12);
    let table = p.get(T5_TABLE).unwrap().data().to_vec();
    let b = bias(&spec, &p, n);
    for h in 0..HEADS {
        for i in 0..n {
            for j in 0..=i {
                let want = table[h * 32 + t5_bucket(i - j, 31, 24).unwrap()];
                if at(&b, n, h, i, j) != want {
                    return Err(format!("t5: B[{h}][{i}][{j}] is not the table entry of its bucket"));
                }
                if i + 1 < n && at(&b, n, h, i + 1, j + 1) != at(&b, n, h, i, j) {
                    return Err(format!("t5: not Toeplitz at ({i},{j})"));
                }
            }
        }
    }
    Ok("t5: distances 0..=512 match the integer oracle (K=31, L1=128); bias is table lookup, Toeplitz".into())
}

struct Mlp {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl Mlp {
    fn head(p: &ParamStore<f64>, h: usize) -> Self {
        let row = |name: &str| p.get(name).unwrap().data()[h * 32..(h + 1) * 32].to_vec();
        Self {
            w1: row(FIRE_W1),
            b1: row(FIRE_B1),
            w2: row(FIRE_W2),
            b2: p.get(FIRE_B2).unwrap().data()[h],
        }
    }

    fn f(&self, x: f64) -> f64 {
        let mut y = self.b2;
        for k in 0..self.w1.len() {
            let a = self.w1[k] * x + self.b1[k];
            if a > 0.0 {
                y += self.w2[k] * a;
            }
        }
        y
    }
}

pub fn fire() -> Check {
    let n = 20;
    let mut spec = PeSpec::new(PeVariant::Fire);
    spec.fire_l_init = 6.0;
    let p = pe_params(&spec, 13);
    let c = softplus(p.get(FIRE_C).unwrap().data()[0]);
    let l = softplus(p.get(FIRE_L).unwrap().data()[0]);
    let b = bias(&spec, &p, n);
    let psi = |x: f64| (c * x + 1.0).ln();
    let mut witness = None;
    for h in 0..HEADS {
        let mlp = Mlp::head(&p, h);
        for i in 0..n {
            let diag = at(&b, n, h, i, i);
            if (diag - mlp.f(0.0)).abs() > 1e-9 {
                return Err(format!("fire: B[{h}][{i}][{i}] = {diag}, f(0) = {}", mlp.f(0.0)));
            }
            for j in 0..=i {
                let want = mlp.f(psi((i - j) as f64) / psi(l.max(i as f64)));
                let got = at(&b, n, h, i, j);
                if (got - want).abs() > 1e-9 * (1.0 + want.abs()) {
                    return Err(format!("fire: B[{h}][{i}][{j}] = {got}, formula gives {want}"));
                }
                if witness.is_none() && i + 1 < n && (at(&b, n, h, i + 1, j + 1) - got).abs() > 1e-6 {
                    witness = Some((h, i, j));
                }
            }
        }
    }
    match witness {
        Some((h, i, j)) => Ok(format!(
            "fire: diagonal equals f(0), entries match the formula; non-Toeplitz witness B[{h}][{i}][{j}] != B[{h}][{}][{}]",
            i + 1,
            j + 1
        )),
        None => Err("fire: no non-Toeplitz witness found".into()),
    }
}

/// Largest change of `<rope(q, m), rope(k, n)>` under a common shift.
pub fn rope_shift_invariance() -> Check {
    let d = 16;
    let mut rng = RngStream::new(14, 1);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let q = Tensor::<f64>::randn([d], 1.0, &mut rng);
        let k = Tensor::<f64>::randn([d], 1.0, &mut rng);
        let m = rng.below(300) as usize;
        let n = rng.below(300) as usize;
        let s = 1 + rng.below(2000) as usize;
        let dot = |a: usize, b: usize| -> f64 {
            let qa = rope_apply(&q, a, 10_000.0).unwrap();
            let kb = rope_apply(&k, b, 10_000.0).unwrap();
            qa.data().iter().zip(kb.data()).map(|(x, y)| x * y).sum()
        };
        let diff = (dot(m, n) - dot(m + s, n + s)).abs();
        if diff > 1e-5 {
            return Err(format!("rope: trial {trial} logit moved by {diff} under shift {s}"));
        }
        worst = worst.max(diff);
    }
    Ok(format!("rope: 50 random shifts change logits by at most {worst:.2e}"))
}

/// Frequency of each of the ten position pairs for `n = 2`, `Lmax = 5`.
pub fn position_frequencies(draws: usize) -> BTreeMap<Vec<usize>, f64> {
    let mut spec = PeSpec::new(PeVariant::Fire);
    spec.randomized = true;
    spec.randomized_lmax = 5;
    let mut rng = RngStream::new(15, 1);
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for _ in 0..draws {
        let pm = spec.positions(2, Some(&mut rng)).unwrap();
        *counts.entry(pm.positions().to_vec()).or_default() += 1;
    }
    counts.into_iter().map(|(k, c)| (k, c as f64 / draws as f64)).collect()
}

pub fn randomized_uniformity() -> Check {
    let freq = position_frequencies(100_000);
    if freq.len() != 10 {
        return Err(format!("randomized positions: {} distinct pairs, expected 10", freq.len()));
    }
    let mut worst = 0.0f64;
    for (pair, f) in &freq {
        if pair[0] >= pair[1] || pair[1] >= 5 {
            return Err(format!("randomized positions: invalid pair {pair:?}"));
        }
        worst = worst.max((f - 0.1).abs());
    }
    if worst > 0.01 {
        return Err(format!("randomized positions: frequency off by {worst} (> 0.01)"));
    }
    Ok(format!("randomized positions: 10 pairs, max deviation {worst:.4} over 100k draws"))
}

pub fn suite() -> Vec<(&'static str, Check)> {
    vec![
        ("alibi", alibi()),
        ("kerple_log", kerple_log()),
        ("t5", t5_bucket_brute_force()),
        ("fire", fire()),
        ("rope", rope_shift_invariance()),
        ("randomized", randomized_uniformity()),
    ]
}
