//! Head-wise 2-norm contribution statistics over a calibration corpus.
//!
//! For every layer and frequency subspace the score is the mean over all
//! tokens of `|q_chunk| * |k_chunk|`, computed from pre-RoPE activations
//! (the rotations are norm-preserving per chunk, so pre- and post-RoPE
//! scores coincide). Under GQA, query-head scores are averaged within each
//! kv group and shared across it.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::forward_full_traced;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Model;
use crate::tensorio::{Checkpoint, CheckpointKind, ModelConfig, TokenCorpus};

/// Mean per-subspace contribution scores, `[layer][group][subspace]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub config_digest: String,
    pub corpus_digest: String,
    pub seq_len: usize,
    pub n_samples: usize,
    pub scores: Vec<Vec<Vec<f64>>>,
}

impl NormStats {
    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn n_groups(&self) -> usize {
        self.scores.first().map_or(0, |l| l.len())
    }

    pub fn n_subspaces(&self) -> usize {
        self.scores.first().and_then(|l| l.first()).map_or(0, |g| g.len())
    }

    /// Dimension and sanity checks against the model the stats will steer.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.n_layers() != cfg.n_layers
            || self.scores.iter().any(|l| l.len() != cfg.n_g)
            || self
                .scores
                .iter()
                .flatten()
                .any(|g| g.len() != cfg.subspaces())
        {
            return Err(Error::Schema(format!(
                "stats cover {}x{}x{} layer/group/subspace, model needs {}x{}x{}",
                self.n_layers(),
                self.n_groups(),
                self.n_subspaces(),
                cfg.n_layers,
                cfg.n_g,
                cfg.subspaces()
            )));
        }
        if self.scores.iter().flatten().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Schema("scores must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Run the toy model over the corpus and accumulate the mean per-subspace
/// contribution scores. Deterministic: per-sequence partial sums are reduced
/// in corpus order no matter how many workers ran them.
pub fn compute_norm_stats(ckpt: &Checkpoint, corpus: &TokenCorpus) -> Result<NormStats> {
    if ckpt.kind != CheckpointKind::Full {
        return Err(Error::Usage(
            "calibration needs an unconverted full-RoPE checkpoint".into(),
        ));
    }
    if corpus.sequences.is_empty() {
        return Err(Error::Format("calibration corpus is empty".into()));
    }
    let cfg = &ckpt.config;
    corpus.check_vocab(cfg.vocab)?;
    let model: Model<f64> = Model::from_checkpoint(ckpt)?;

    let partials: Vec<Result<Vec<Vec<Vec<f64>>>>> = corpus
        .sequences
        .par_iter()
        .map(|seq| sequence_sums(&model, seq))
        .collect();

    let n_heads_per_group = cfg.n_h / cfg.n_g;
    let mut totals = vec![vec![vec![0.0f64; cfg.subspaces()]; cfg.n_h]; cfg.n_layers];
    for partial in partials {
        let partial = partial?;
        for (t_l, p_l) in totals.iter_mut().zip(partial) {
            for (t_h, p_h) in t_l.iter_mut().zip(p_l) {
                for (t, p) in t_h.iter_mut().zip(p_h) {
                    *t += p;
                }
            }
        }
    }

    let tokens_total = (corpus.sequences.len() * corpus.seq_len) as f64;
    let scores = (0..cfg.n_layers)
        .map(|l| {
            (0..cfg.n_g)
                .map(|g| {
                    (0..cfg.subspaces())
                        .map(|k| {
                            let mut s = 0.0;
                            for h in g * n_heads_per_group..(g + 1) * n_heads_per_group {
                                s += totals[l][h][k] / tokens_total;
                            }
                            s / n_heads_per_group as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    Ok(NormStats {
        config_digest: cfg.digest(),
        corpus_digest: corpus.digest(),
        seq_len: corpus.seq_len,
        n_samples: corpus.sequences.len(),
        scores,
    })
}

/// Per-sequence sums of `|q_chunk| * |k_chunk|` over positions, per layer and
/// query head.
fn sequence_sums(model: &Model<f64>, seq: &[u32]) -> Result<Vec<Vec<Vec<f64>>>> {
    let cfg = &model.cfg;
    let (_, traces) = forward_full_traced(model, seq)?;
    let mut sums = vec![vec![vec![0.0f64; cfg.subspaces()]; cfg.n_h]; cfg.n_layers];
    for (l, (q, k)) in traces.iter().enumerate() {
        for i in 0..seq.len() {
            let q_row = q.row(i);
            let k_row = k.row(i);
            for h in 0..cfg.n_h {
                let g = cfg.group_of(h);
                for sub in 0..cfg.subspaces() {
                    let q0 = q_row[h * cfg.d_h + 2 * sub];
                    let q1 = q_row[h * cfg.d_h + 2 * sub + 1];
                    let k0 = k_row[g * cfg.d_h + 2 * sub];
                    let k1 = k_row[g * cfg.d_h + 2 * sub + 1];
                    sums[l][h][sub] +=
                        (q0 * q0 + q1 * q1).sqrt() * (k0 * k0 + k1 * k1).sqrt();
                }
            }
        }
    }
    Ok(sums)
}

pub fn save_stats(stats: &NormStats, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_vec_pretty(stats)
        .map_err(|e| Error::Format(format!("stats JSON: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_stats(path: impl AsRef<Path>) -> Result<NormStats> {
    let bytes = std::fs::read(path)?;
    let stats: NormStats =
        serde_json::from_slice(&bytes).map_err(|e| Error::Schema(format!("stats JSON: {e}")))?;
    Ok(stats)
}

/// Helper used by tests and planted-model constructions: scale the columns
/// of a per-head projection belonging to one frequency subspace.
pub fn scale_subspace_columns(w: &mut Matrix<f32>, d_h: usize, subspace: usize, factor: f32) {
    let n_heads = w.cols() / d_h;
    for i in 0..w.rows() {
        let row = w.row_mut(i);
        for h in 0..n_heads {
            row[h * d_h + 2 * subspace] *= factor;
            row[h * d_h + 2 * subspace + 1] *= factor;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::SvdMode;
    use crate::rope::Strategy;
    use crate::tensorio::{gen_corpus, init_toy, Tensor};

    fn toy_checkpoint(n_g: usize, seed: u64) -> Checkpoint {
        let cfg = ModelConfig {
            d: 32,
            n_h: 4,
            n_g,
            d_h: 8,
            n_layers: 2,
            rope_base: 1e4,
            vocab: 64,
            strategy: Strategy::TwoNorm,
            r: 1,
            d_kv_per_head: 4,
            svd_mode: SvdMode::Joint,
        };
        let store = init_toy(&cfg, seed).unwrap();
        Checkpoint { config: cfg, kind: CheckpointKind::Full, conversion: None, store }
    }

    #[test]
    fn zeroed_subspace_scores_exactly_zero() {
        let mut ckpt = toy_checkpoint(2, 5);
        for l in 0..ckpt.config.n_layers {
            for name in [format!("L{l}.Wq"), format!("L{l}.Wk")] {
                let mut w = ckpt.store.get_f32(&name).unwrap().clone();
                scale_subspace_columns(&mut w, ckpt.config.d_h, 1, 0.0);
                ckpt.store.insert(name, Tensor::F32(w));
            }
        }
        let corpus = gen_corpus(64, 1, 4, 16);
        let stats = compute_norm_stats(&ckpt, &corpus).unwrap();
        for layer in &stats.scores {
            for group in layer {
                assert_eq!(group[1], 0.0);
                assert!(group[0] > 0.0);
            }
        }
    }

    #[test]
    fn duplicated_corpus_leaves_scores_unchanged() {
        let ckpt = toy_checkpoint(2, 9);
        let corpus = gen_corpus(64, 2, 4, 12);
        let mut doubled = corpus.clone();
        doubled.sequences.extend(corpus.sequences.clone());
        let a = compute_norm_stats(&ckpt, &corpus).unwrap();
        let b = compute_norm_stats(&ckpt, &doubled).unwrap();
        for (la, lb) in a.scores.iter().zip(&b.scores) {
            for (ga, gb) in la.iter().zip(lb) {
                for (x, y) in ga.iter().zip(gb) {
                    assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let ckpt = toy_checkpoint(2, 13);
        let corpus = gen_corpus(64, 3, 6, 10);
        let a = compute_norm_stats(&ckpt, &corpus).unwrap();
        let b = compute_norm_stats(&ckpt, &corpus).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_converted_checkpoint_and_empty_corpus() {
        let mut ckpt = toy_checkpoint(2, 1);
        ckpt.kind = CheckpointKind::Mla;
        let corpus = gen_corpus(64, 1, 2, 8);
        assert!(compute_norm_stats(&ckpt, &corpus).is_err());

        let ckpt = toy_checkpoint(2, 1);
        let empty = TokenCorpus { seq_len: 8, sequences: vec![] };
        assert!(compute_norm_stats(&ckpt, &empty).is_err());
    }

    #[test]
    fn stats_roundtrip_and_schema_check() {
        let ckpt = toy_checkpoint(2, 21);
        let corpus = gen_corpus(64, 4, 3, 8);
        let stats = compute_norm_stats(&ckpt, &corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        save_stats(&stats, &path).unwrap();
        let loaded = load_stats(&path).unwrap();
        assert_eq!(loaded, stats);
        assert!(loaded.validate(&ckpt.config).is_ok());

        let mut wrong = ckpt.config.clone();
        wrong.n_layers = 3;
        assert!(matches!(loaded.validate(&wrong), Err(Error::Schema(_))));
    }

    #[test]
    fn scale_covariance_on_scaled_layer() {
        // Scaling W_q of layer 0 scales layer-0 scores by the same factor
        // and leaves the layer-0 ranking unchanged.
        let ckpt = toy_checkpoint(2, 33);
        let corpus = gen_corpus(64, 5, 4, 10);
        let base = compute_norm_stats(&ckpt, &corpus).unwrap();

        let mut scaled = ckpt.clone();
        let w = scaled.store.get_f32("L0.Wq").unwrap().scale(4.0);
        scaled.store.insert("L0.Wq", Tensor::F32(w));
        let got = compute_norm_stats(&scaled, &corpus).unwrap();

        for g in 0..2 {
            for k in 0..4 {
                let expect = base.scores[0][g][k] * 4.0;
                let rel = (got.scores[0][g][k] - expect).abs() / expect.max(1e-30);
                assert!(rel < 1e-9, "group {g} subspace {k}: {} vs {expect}", got.scores[0][g][k]);
            }
            let rank = |v: &Vec<f64>| {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
                idx
            };
            assert_eq!(rank(&base.scores[0][g]), rank(&got.scores[0][g]));
        }
    }

    #[test]
    fn permuting_subspace_columns_permutes_scores() {
        // Swap subspaces 0 and 2 in Wq and Wk of a single-layer model; the
        // pre-RoPE scores must swap identically.
        let mut cfg = toy_checkpoint(2, 41).config;
        cfg.n_layers = 1;
        let store = init_toy(&cfg, 41).unwrap();
        let ckpt = Checkpoint { config: cfg, kind: CheckpointKind::Full, conversion: None, store };
        let corpus = gen_corpus(64, 6, 4, 10);
        let base = compute_norm_stats(&ckpt, &corpus).unwrap();

        let mut permuted = ckpt.clone();
        for name in ["L0.Wq", "L0.Wk"] {
            let w = permuted.store.get_f32(name).unwrap();
            let d_h = permuted.config.d_h;
            let n_heads = w.cols() / d_h;
            let mut cols: Vec<usize> = (0..w.cols()).collect();
            for h in 0..n_heads {
                cols.swap(h * d_h, h * d_h + 4);
                cols.swap(h * d_h + 1, h * d_h + 5);
            }
            permuted.store.insert(name, Tensor::F32(w.select_cols(&cols)));
        }
        let got = compute_norm_stats(&permuted, &corpus).unwrap();
        for g in 0..2 {
            assert!((got.scores[0][g][0] - base.scores[0][g][2]).abs() < 1e-12);
            assert!((got.scores[0][g][2] - base.scores[0][g][0]).abs() < 1e-12);
            assert!((got.scores[0][g][1] - base.scores[0][g][1]).abs() < 1e-12);
        }
    }
}
