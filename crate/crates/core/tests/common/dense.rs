//! Naive reference implementations of the transformer pieces and a
//! finite-difference gradient checker, shared by the backbone tests and the
//! acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcqa_core::autograd::{Graph, NodeId};
use pcqa_core::backbone::{Attention, Decoder, DecoderConfig, TransformerBlock};
use pcqa_core::nn::{LayerNorm, Linear};
use pcqa_core::params::{Initializer, ParamId, ParamStore};
use pcqa_core::patches::MaskPlan;
use pcqa_core::tensor::Tensor;

pub type M = Vec<Vec<f64>>;

pub fn to_m(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_diff(a: &M, b: &Tensor<f64>) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.shape());
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(r, c)).abs());
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Replaces every parameter with uniform noise so LayerNorm gains, biases and
/// the mask token are all non-trivial.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let (r, c) = store.get(id).shape();
        *store.get_mut(id) = random_tensor(rng, r, c, scale);
    }
}

pub fn p(store: &ParamStore<f64>, id: ParamId) -> M {
    to_m(store.get(id))
}

pub fn dense_linear(x: &M, w: &M, b: &M) -> M {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| {
                    let mut acc = b[0][j];
                    for (i, xi) in row.iter().enumerate() {
                        acc += xi * w[i][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn lin(x: &M, l: &Linear, s: &ParamStore<f64>) -> M {
    dense_linear(x, &p(s, l.w), &p(s, l.b))
}

pub fn dense_ln(x: &M, ln: &LayerNorm, s: &ParamStore<f64>) -> M {
    let (g, b) = (p(s, ln.gamma), p(s, ln.beta));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * g[0][j] + b[0][j])
                .collect()
        })
        .collect()
}

pub fn dense_gelu(x: &M) -> M {
    x.iter()
        .map(|row| {
            row.iter()
                .map(|&v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt())))
                .collect()
        })
        .collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// Multi-head attention written out index by index.
pub fn dense_attention(xq: &M, xk: &M, xv: &M, a: &Attention, s: &ParamStore<f64>) -> (M, Vec<M>) {
    let q = lin(xq, &a.q, s);
    let k = lin(xk, &a.k, s);
    let v = lin(xv, &a.v, s);
    let hd = a.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut merged = vec![vec![0.0; a.heads * hd]; q.len()];
    let mut weights = Vec::new();
    for h in 0..a.heads {
        let mut w = vec![vec![0.0; k.len()]; q.len()];
        for i in 0..q.len() {
            for j in 0..k.len() {
                let mut dot = 0.0;
                for c in 0..hd {
                    dot += q[i][h * hd + c] * k[j][h * hd + c];
                }
                w[i][j] = dot * scale;
            }
            let m = w[i].iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = w[i].iter().map(|x| (x - m).exp()).sum();
            for j in 0..k.len() {
                w[i][j] = (w[i][j] - m).exp() / z;
            }
            for c in 0..hd {
                merged[i][h * hd + c] = (0..k.len()).map(|j| w[i][j] * v[j][h * hd + c]).sum();
            }
        }
        weights.push(w);
    }
    (lin(&merged, &a.out, s), weights)
}

pub fn dense_block(x: &M, b: &TransformerBlock, s: &ParamStore<f64>) -> M {
    let n1 = dense_ln(x, &b.ln1, s);
    let (att, _) = dense_attention(&n1, &n1, &n1, &b.attn, s);
    let h = add(&att, x);
    let n2 = dense_ln(&h, &b.ln2, s);
    let mlp = lin(&dense_gelu(&lin(&n2, &b.fc1, s)), &b.fc2, s);
    add(&mlp, &h)
}

pub fn dense_decoder(latent: &M, d: &Decoder, plan: &MaskPlan, pe: &Tensor<f64>, s: &ParamStore<f64>) -> M {
    let projected = lin(latent, &d.embed, s);
    let token = p(s, d.mask_token)[0].clone();
    let mut x: M = (0..plan.total)
        .map(|pos| match plan.visible_idx.iter().position(|&v| v == pos) {
            Some(slot) => projected[slot].clone(),
            None => token.clone(),
        })
        .collect();
    x = add(&x, &to_m(pe));
    for b in &d.blocks {
        x = dense_block(&x, b, s);
    }
    x
}

pub fn block_fixture(seed: u64, width: usize, heads: usize) -> (ParamStore<f64>, TransformerBlock) {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let block = TransformerBlock::new(&mut store, &mut init, "blk", width, heads, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10C);
    randomize(&mut store, &mut rng, 0.4);
    (store, block)
}

pub fn decoder_fixture(seed: u64) -> (ParamStore<f64>, Decoder) {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let cfg = DecoderConfig {
        depth: 2,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
    };
    let dec = Decoder::new(&mut store, &mut init, "dec", 12, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEC);
    randomize(&mut store, &mut rng, 0.3);
    (store, dec)
}

pub fn attention_fixture(seed: u64) -> (ParamStore<f64>, Attention) {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let attn = Attention::new(&mut store, &mut init, "mca", 8, 8, 8, 10, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA);
    randomize(&mut store, &mut rng, 0.5);
    (store, attn)
}

/// Gradients of `Σ out ⊙ r` for a fixed random `r`: the backward pass seeded
/// with `r` against central differences.
pub fn check_gradients(
    store: &mut ParamStore<f64>,
    input: &Tensor<f64>,
    build: &dyn Fn(&mut Graph<'_, f64>, NodeId) -> NodeId,
    seed: u64,
    h: f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, x_grad, p_grads) = {
        let mut g = Graph::new(store);
        let x = g.input_with_grad(input.clone());
        let out = build(&mut g, x);
        let (rows, cols) = g.shape(out);
        let r = random_tensor(&mut rng, rows, cols, 1.0);
        let grads = g.backward(out, r.clone());
        let x_grad = grads.node(x).expect("input gradient").clone();
        let p: Vec<Option<Tensor<f64>>> = store.ids().map(|id| grads.params.get(id).cloned()).collect();
        (r, x_grad, p)
    };
    let forward = |store: &ParamStore<f64>, x: &Tensor<f64>| -> Tensor<f64> {
        let mut g = Graph::new(store);
        let xi = g.input(x.clone());
        let out = build(&mut g, xi);
        g.value(out).clone()
    };
    // difference the outputs before contracting so the large sum does not cancel
    let central = |up: Tensor<f64>, down: Tensor<f64>| -> f64 {
        up.data()
            .iter()
            .zip(down.data())
            .zip(r.data())
            .map(|((u, d), w)| (u - d) * w)
            .sum::<f64>()
            / (2.0 * h)
    };
    // absolute floor: rounding noise of the differences grows with the number
    // of contracted outputs
    let floor = 1e-7 * (r.len() as f64).sqrt();
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
    let mut worst: f64 = 0.0;
    for k in 0..input.len() {
        let mut up = input.clone();
        up.data_mut()[k] += h;
        let mut down = input.clone();
        down.data_mut()[k] -= h;
        let fd = central(forward(store, &up), forward(store, &down));
        worst = worst.max(rel(fd, x_grad.data()[k]));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        for _ in 0..4.min(n) {
            let k = rng.random_range(0..n);
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = forward(store, input);
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = forward(store, input);
            store.get_mut(id).data_mut()[k] = orig;
            let fd = central(up, down);
            let an = p_grads[id.index()].as_ref().map_or(0.0, |t| t.data()[k]);
            worst = worst.max(rel(fd, an));
        }
    }
    worst
}

