//! Central finite-difference oracle for tape ops (64-bit).
//!
//! Each case builds `loss = Σ (op(inputs) ⊙ w)` with a fixed random weight
//! tensor `w`, then compares the tape's analytic gradient for every input
//! against `(L(x+ε) − L(x−ε)) / 2ε` element by element.

use std::sync::Arc;

use abbrex_numerics::{Segment, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

/// Builds the op under test from its leaf inputs.
pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect(),
    )
    .unwrap()
}

fn loss_of(inputs: &[Tensor<f64>], build: &Build, weights: &mut Option<Tensor<f64>>, seed: u64) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars);
    let loss = if tape.value(out).len() == 1 {
        out
    } else {
        let w = weights.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
            rand_tensor(&mut rng, tape.value(out).shape(), 1.0)
        });
        let wv = tape.constant(w.clone()).unwrap();
        let prod = tape.mul(out, wv).unwrap();
        tape.sum(prod).unwrap()
    };
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss).unwrap();
    (value, vars.iter().map(|&v| grads.get(v)).collect())
}

/// Norm-wise relative error between analytic and numeric gradients over all
/// inputs.
pub fn check(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let mut weights = None;
    let (_, analytic) = loss_of(inputs, build, &mut weights, seed);
    let mut diff2 = 0.0;
    let mut norm_a = 0.0;
    let mut norm_n = 0.0;
    for (i, inp) in inputs.iter().enumerate() {
        for j in 0..inp.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            let lp = loss_of(&plus, build, &mut weights, seed).0;
            let lm = loss_of(&minus, build, &mut weights, seed).0;
            let numeric = (lp - lm) / (2.0 * EPS);
            let a = analytic[i].data()[j];
            diff2 += (a - numeric) * (a - numeric);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    let denom = norm_a.sqrt().max(norm_n.sqrt()).max(1e-8);
    diff2.sqrt() / denom
}

/// Random segment tiling of `n` rows.
pub fn random_segments(rng: &mut ChaCha8Rng, n: usize) -> Arc<[Segment]> {
    let mut segs = Vec::new();
    let mut start = 0;
    while start < n {
        let len = rng.gen_range(1..=(n - start));
        segs.push(Segment { start, len });
        start += len;
    }
    segs.into()
}

pub const OPS: &[&str] = &[
    "add",
    "mul",
    "scale",
    "add_bias",
    "matmul",
    "gelu",
    "layer_norm",
    "softmax",
    "causal_attention",
    "gather_rows",
    "concat_rows",
    "cross_entropy",
    "sum",
    "dropout",
    "composition",
];

/// Runs one randomized case of `op`; returns the relative error.
pub fn run_case(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(1..5);
    let c = rng.gen_range(1..6);
    match op {
        "add" | "mul" => {
            let a = rand_tensor(&mut rng, &[r, c], 1.0);
            let b = rand_tensor(&mut rng, &[r, c], 1.0);
            let is_add = op == "add";
            check(&[a, b], &move |t: &mut Tape<f64>, v: &[Var]| {
                if is_add { t.add(v[0], v[1]).unwrap() } else { t.mul(v[0], v[1]).unwrap() }
            }, seed)
        }
        "scale" => {
            let a = rand_tensor(&mut rng, &[r, c], 1.0);
            let s = rng.gen_range(-3.0..3.0);
            check(&[a], &move |t: &mut Tape<f64>, v: &[Var]| t.scale(v[0], s).unwrap(), seed)
        }
        "add_bias" => {
            let a = rand_tensor(&mut rng, &[r, c], 1.0);
            let b = rand_tensor(&mut rng, &[c], 1.0);
            check(&[a, b], &|t: &mut Tape<f64>, v: &[Var]| t.add_bias(v[0], v[1]).unwrap(), seed)
        }
        "matmul" => {
            let k = rng.gen_range(1..6);
            let a = rand_tensor(&mut rng, &[r, k], 1.0);
            let b = rand_tensor(&mut rng, &[k, c], 1.0);
            check(&[a, b], &|t: &mut Tape<f64>, v: &[Var]| t.matmul(v[0], v[1]).unwrap(), seed)
        }
        "gelu" => {
            let a = rand_tensor(&mut rng, &[r, c], 3.0);
            check(&[a], &|t: &mut Tape<f64>, v: &[Var]| t.gelu(v[0]).unwrap(), seed)
        }
        "layer_norm" => {
            let d = rng.gen_range(2..7);
            let x = rand_tensor(&mut rng, &[r, d], 2.0);
            let g = rand_tensor(&mut rng, &[d], 1.5);
            let b = rand_tensor(&mut rng, &[d], 1.0);
            check(&[x, g, b], &|t: &mut Tape<f64>, v: &[Var]| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(), seed)
        }
        "softmax" => {
            let rank = rng.gen_range(1..4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
            let axis = rng.gen_range(0..rank);
            let x = rand_tensor(&mut rng, &shape, 2.0);
            check(&[x], &move |t: &mut Tape<f64>, v: &[Var]| t.softmax(v[0], axis).unwrap(), seed)
        }
        "causal_attention" => {
            let heads = rng.gen_range(1..3);
            let hd = rng.gen_range(1..4);
            let d = heads * hd;
            let n = rng.gen_range(1..6);
            let segs = random_segments(&mut rng, n);
            let x = rand_tensor(&mut rng, &[n, 3 * d], 1.5);
            check(&[x], &move |t: &mut Tape<f64>, v: &[Var]| {
                t.causal_attention(v[0], segs.clone(), heads).unwrap()
            }, seed)
        }
        "gather_rows" => {
            let table = rand_tensor(&mut rng, &[r, c], 1.0);
            let n = rng.gen_range(1..7);
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..r)).collect();
            check(&[table], &move |t: &mut Tape<f64>, v: &[Var]| t.gather_rows(v[0], &ids).unwrap(), seed)
        }
        "concat_rows" => {
            let r2 = rng.gen_range(1..4);
            let a = rand_tensor(&mut rng, &[r, c], 1.0);
            let b = rand_tensor(&mut rng, &[r2, c], 1.0);
            check(&[a, b], &|t: &mut Tape<f64>, v: &[Var]| t.concat_rows(&[v[0], v[1], v[0]]).unwrap(), seed)
        }
        "cross_entropy" => {
            let vsz = rng.gen_range(2..9);
            let logits = rand_tensor(&mut rng, &[r, vsz], 3.0);
            let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..vsz)).collect();
            let mut mask: Vec<bool> = (0..r).map(|_| rng.gen_bool(0.6)).collect();
            mask[0] = true;
            check(&[logits], &move |t: &mut Tape<f64>, v: &[Var]| {
                t.cross_entropy(v[0], &targets, &mask).unwrap()
            }, seed)
        }
        "sum" => {
            let a = rand_tensor(&mut rng, &[r, c], 1.0);
            check(&[a], &|t: &mut Tape<f64>, v: &[Var]| t.sum(v[0]).unwrap(), seed)
        }
        "dropout" => {
            let a = rand_tensor(&mut rng, &[r, c], 1.0);
            let p = rng.gen_range(0.05..0.9);
            check(&[a], &move |t: &mut Tape<f64>, v: &[Var]| {
                // identical mask on every evaluation
                let mut mrng = ChaCha8Rng::seed_from_u64(seed);
                t.dropout(v[0], p, &mut mrng).unwrap()
            }, seed)
        }
        "composition" => {
            // embedding → 3 dense layers with gelu/layer norm/attention →
            // masked cross-entropy
            let vocab = rng.gen_range(3..7);
            let d = 2 * rng.gen_range(1..3);
            let n = rng.gen_range(2..6);
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
            let segs = random_segments(&mut rng, n);
            let inputs = vec![
                rand_tensor(&mut rng, &[vocab, d], 1.0),
                rand_tensor(&mut rng, &[d, 3 * d], 0.8),
                rand_tensor(&mut rng, &[d], 1.0),
                rand_tensor(&mut rng, &[d], 0.5),
                rand_tensor(&mut rng, &[d, d], 0.8),
                rand_tensor(&mut rng, &[d], 0.5),
                rand_tensor(&mut rng, &[d, vocab], 0.8),
            ];
            let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0 || i + 1 == n).collect();
            check(&inputs, &move |t: &mut Tape<f64>, v: &[Var]| {
                let x = t.gather_rows(v[0], &ids).unwrap();
                let qkv = t.matmul(x, v[1]).unwrap();
                let att = t.causal_attention(qkv, segs.clone(), 2).unwrap();
                let h = t.add(att, x).unwrap();
                let h = t.layer_norm(h, v[2], v[3], 1e-5).unwrap();
                let f = t.matmul(h, v[4]).unwrap();
                let f = t.add_bias(f, v[5]).unwrap();
                let f = t.gelu(f).unwrap();
                let logits = t.matmul(f, v[6]).unwrap();
                t.cross_entropy(logits, &targets, &mask).unwrap()
            }, seed)
        }
        other => panic!("unknown op {other}"),
    }
}
