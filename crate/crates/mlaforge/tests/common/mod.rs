//! Shared test oracles, written independently of the library's engine:
//! a per-token, per-head reference forward pass in f64, and a two-sided
//! Jacobi eigenvalue solver for Gram matrices. These exist so the library
//! can be checked against a second route, not against itself.

#![allow(dead_code)]

use mlaforge::lowrank::SvdMode;
use mlaforge::rope::Strategy;
use mlaforge::tensorio::{Checkpoint, CheckpointKind, ModelConfig, TensorStore};

pub fn toy_config(n_g: usize) -> ModelConfig {
    ModelConfig {
        d: 64,
        n_h: 4,
        n_g,
        d_h: 16,
        n_layers: 2,
        rope_base: 1e4,
        vocab: 256,
        strategy: Strategy::Uniform,
        r: 1,
        d_kv_per_head: 8,
        svd_mode: SvdMode::Joint,
    }
}

pub fn toy_checkpoint(n_g: usize, seed: u64) -> Checkpoint {
    let cfg = toy_config(n_g);
    let store = mlaforge::tensorio::init_toy(&cfg, seed).unwrap();
    Checkpoint { config: cfg, kind: CheckpointKind::Full, conversion: None, store }
}

/// Everything the reference forward produces: logits plus the pre-rotation
/// query/key vectors per layer and position.
pub struct OracleOut {
    /// `[pos][vocab]`
    pub logits: Vec<Vec<f64>>,
    /// `[layer][pos][n_h * d_h]`
    pub q_pre: Vec<Vec<Vec<f64>>>,
    /// `[layer][pos][n_g * d_h]`
    pub k_pre: Vec<Vec<Vec<f64>>>,
}

fn mat_rows(store: &TensorStore, name: &str) -> Vec<Vec<f64>> {
    let m = store.get_as_f64(name).unwrap();
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn vec_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec_mat(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (xk, w_row) in x.iter().zip(w) {
        for j in 0..cols {
            out[j] += xk * w_row[j];
        }
    }
    out
}

fn ref_rms_norm(x: &[f64], w: &[f64]) -> Vec<f64> {
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(w).map(|(v, g)| v * inv * g).collect()
}

/// Rotate pair `k` of a head-width vector by `pos * theta_k`, via an explicit
/// rotation-matrix product.
fn ref_rotate(head: &mut [f64], pos: usize, k: usize, theta: f64) {
    let angle = pos as f64 * theta;
    let rot = [[angle.cos(), -angle.sin()], [angle.sin(), angle.cos()]];
    let chunk = [head[2 * k], head[2 * k + 1]];
    head[2 * k] = rot[0][0] * chunk[0] + rot[0][1] * chunk[1];
    head[2 * k + 1] = rot[1][0] * chunk[0] + rot[1][1] * chunk[1];
}

/// Naive reference forward over an unconverted checkpoint. `sets`, when
/// given, is the retained-subspace set per `[layer][group]`; `None` keeps
/// every subspace rotating (full RoPE).
pub fn oracle_forward(
    cfg: &ModelConfig,
    store: &TensorStore,
    tokens: &[u32],
    sets: Option<&Vec<Vec<Vec<usize>>>>,
) -> OracleOut {
    let thetas: Vec<f64> = (0..cfg.d_h / 2)
        .map(|k| cfg.rope_base.powf(-2.0 * k as f64 / cfg.d_h as f64))
        .collect();
    let embed = mat_rows(store, "embed");
    let lm_head = mat_rows(store, "lm_head");
    let group_of = |h: usize| h * cfg.n_g / cfg.n_h;

    let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| embed[t as usize].clone()).collect();
    let mut q_pre = Vec::new();
    let mut k_pre = Vec::new();

    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("L{l}.{s}");
        let norm1 = mat_rows(store, &p("norm1"))[0].clone();
        let norm2 = mat_rows(store, &p("norm2"))[0].clone();
        let wq = mat_rows(store, &p("Wq"));
        let wk = mat_rows(store, &p("Wk"));
        let wv = mat_rows(store, &p("Wv"));
        let wo = mat_rows(store, &p("Wo"));
        let up = mat_rows(store, &p("mlp.up"));
        let down = mat_rows(store, &p("mlp.down"));

        let normed: Vec<Vec<f64>> = xs.iter().map(|x| ref_rms_norm(x, &norm1)).collect();
        let mut qs: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &wq)).collect();
        let mut ks: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &wk)).collect();
        let vs: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &wv)).collect();
        q_pre.push(qs.clone());
        k_pre.push(ks.clone());

        for (pos, q) in qs.iter_mut().enumerate() {
            for h in 0..cfg.n_h {
                let head = &mut q[h * cfg.d_h..(h + 1) * cfg.d_h];
                match sets {
                    None => (0..cfg.d_h / 2).for_each(|k| ref_rotate(head, pos, k, thetas[k])),
                    Some(s) => s[l][group_of(h)]
                        .iter()
                        .for_each(|&k| ref_rotate(head, pos, k, thetas[k])),
                }
            }
        }
        for (pos, kv) in ks.iter_mut().enumerate() {
            for g in 0..cfg.n_g {
                let head = &mut kv[g * cfg.d_h..(g + 1) * cfg.d_h];
                match sets {
                    None => (0..cfg.d_h / 2).for_each(|k| ref_rotate(head, pos, k, thetas[k])),
                    Some(s) => {
                        s[l][g].iter().for_each(|&k| ref_rotate(head, pos, k, thetas[k]))
                    }
                }
            }
        }

        let scale = 1.0 / (cfg.d_h as f64).sqrt();
        for i in 0..xs.len() {
            let mut ctx = vec![0.0; cfg.n_h * cfg.d_h];
            for h in 0..cfg.n_h {
                let g = group_of(h);
                let q_h = &qs[i][h * cfg.d_h..(h + 1) * cfg.d_h];
                let raw: Vec<f64> = (0..=i)
                    .map(|j| scale * vec_dot(q_h, &ks[j][g * cfg.d_h..(g + 1) * cfg.d_h]))
                    .collect();
                let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = raw.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    let a = e / z;
                    for (t, vv) in ctx[h * cfg.d_h..(h + 1) * cfg.d_h]
                        .iter_mut()
                        .zip(&vs[j][g * cfg.d_h..(g + 1) * cfg.d_h])
                    {
                        *t += a * vv;
                    }
                }
            }
            let attn = vec_mat(&ctx, &wo);
            for (x, a) in xs[i].iter_mut().zip(attn) {
                *x += a;
            }
        }

        for x in &mut xs {
            let normed = ref_rms_norm(x, &norm2);
            let mut hidden = vec_mat(&normed, &up);
            for v in &mut hidden {
                *v = *v / (1.0 + (-*v).exp());
            }
            let out = vec_mat(&hidden, &down);
            for (xi, oi) in x.iter_mut().zip(out) {
                *xi += oi;
            }
        }
    }

    let logits = xs.iter().map(|x| vec_mat(x, &lm_head)).collect();
    OracleOut { logits, q_pre, k_pre }
}

/// Eigenvalues of a symmetric matrix by two-sided Jacobi, descending.
pub fn sym_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..200 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(a[p][q].abs());
            }
        }
        if off < 1e-13 {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[p][i];
                    let aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig
}

/// Gram matrix `A^T A` of a row-major f64 matrix.
pub fn gram(a: &mlaforge::Mat64) -> Vec<Vec<f64>> {
    let n = a.cols();
    let mut g = vec![vec![0.0; n]; n];
    for p in 0..n {
        for q in 0..n {
            let mut s = 0.0;
            for i in 0..a.rows() {
                s += a.get(i, p) * a.get(i, q);
            }
            g[p][q] = s;
        }
    }
    g
}

pub fn max_abs_diff_f32_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (&x, &y)| m.max((x as f64 - y).abs()))
}

/// Deterministic token sequences for tests that do not go through a corpus
/// file.
pub fn test_tokens(vocab: usize, seed: u64, n: usize, len: usize) -> Vec<Vec<u32>> {
    mlaforge::tensorio::gen_corpus(vocab, seed, n, len).sequences
}
