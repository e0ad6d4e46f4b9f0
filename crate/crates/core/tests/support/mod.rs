//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use moelab_core::diffcore::Tensor;
use moelab_core::model::{ModelConfig, ModelParams, RoutingMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny(mode: RoutingMode) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.routing_mode = mode;
    if mode == RoutingMode::Dense {
        cfg.num_experts = 1;
    }
    cfg
}

pub fn params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Parameters with larger weights so that routing and attention are far from
/// uniform and test differences are visible.
pub fn spiky_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = params(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

pub fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn matmul(a: &[Vec<f64>], b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (k, n) = (b.shape()[0], b.shape()[1]);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| (0..k).map(|i| row[i] * b.data()[i * n + j]).sum())
                .collect()
        })
        .collect()
}

fn rmsnorm(x: &[Vec<f64>], gain: &Tensor<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + 1e-5).sqrt();
            row.iter().zip(gain.data()).map(|(v, g)| v * inv * g).collect()
        })
        .collect()
}

fn add(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (r, s) in a.iter_mut().zip(b) {
        for (x, y) in r.iter_mut().zip(s) {
            *x += y;
        }
    }
}

/// The dense transformer written out with plain loops: every layer applies
/// its first expert's FFN to every token.
pub fn dense_oracle(p: &ModelParams<f64>, tokens: &[usize]) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let (d, n) = (cfg.model_dim, tokens.len());
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d)
                .map(|c| p.tok_emb.data()[id * d + c] + p.pos_emb.data()[t * d + c])
                .collect()
        })
        .collect();
    let dh = cfg.head_dim();
    for l in &p.layers {
        let xn = rmsnorm(&x, &l.attn_norm);
        let (q, k, v) = (matmul(&xn, &l.wq), matmul(&xn, &l.wk), matmul(&xn, &l.wv));
        let mut att = vec![vec![0.0; d]; n];
        for h in 0..cfg.num_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - m).exp() / z;
                    for c in cols.clone() {
                        att[i][c] += w * v[j][c];
                    }
                }
            }
        }
        add(&mut x, &matmul(&att, &l.wo));
        let hn = rmsnorm(&x, &l.ffn_norm);
        let e = &l.bank.experts[0];
        let gate = matmul(&hn, &e.w_gate);
        let up = matmul(&hn, &e.w_up);
        let inner: Vec<Vec<f64>> = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| g.iter().zip(u).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect())
            .collect();
        add(&mut x, &matmul(&inner, &e.w_down));
    }
    matmul(&rmsnorm(&x, &p.final_norm), &p.lm_head)
}

/// Copies each layer's first expert into every slot of an `E`-expert bank
/// with the given router, yielding an MoE model that must match the dense one.
pub fn duplicate_into(dense: &ModelParams<f64>, cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut moe = spiky_params(cfg, seed);
    moe.tok_emb = dense.tok_emb.clone();
    moe.pos_emb = dense.pos_emb.clone();
    moe.final_norm = dense.final_norm.clone();
    moe.lm_head = dense.lm_head.clone();
    for (m, d) in moe.layers.iter_mut().zip(&dense.layers) {
        m.attn_norm = d.attn_norm.clone();
        m.wq = d.wq.clone();
        m.wk = d.wk.clone();
        m.wv = d.wv.clone();
        m.wo = d.wo.clone();
        m.ffn_norm = d.ffn_norm.clone();
        for e in m.bank.experts.iter_mut() {
            *e = d.bank.experts[0].clone();
        }
    }
    moe
}

pub fn max_diff(a: &Tensor<f64>, b: &[Vec<f64>]) -> f64 {
    let n = a.shape()[1];
    b.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, v)| (r, c, *v)))
        .map(|(r, c, v)| (a.data()[r * n + c] - v).abs())
        .fold(0.0, f64::max)
}
