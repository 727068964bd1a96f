//! The checkpoint conversion pipeline: pick retained subspaces, split the
//! query/key projections into RoPE and NoPE column blocks, factorize the
//! NoPE key and value projections into latent form, and assemble the
//! converted store.
//!
//! All factorization math runs in 64-bit; results are cast to 32-bit only
//! when the converted store is assembled.

use rayon::prelude::*;

use crate::calib::NormStats;
use crate::error::{Error, Result};
use crate::lowrank::{factor_joint, factor_per_head, factor_split, LayerFactors, SvdMode};
use crate::rope::{
    select_two_norm, select_two_norm_global, split_projection, ProjRole, RopeSelection, Strategy,
};
use crate::tensorio::{
    Checkpoint, CheckpointKind, ConversionMeta, ModelConfig, Tensor, TensorStore, U32Tensor,
};
use crate::Mat64;

/// Conversion parameters; `None` fields inherit the checkpoint config.
#[derive(Debug, Clone, Default)]
pub struct ConvertOptions {
    pub strategy: Option<Strategy>,
    pub r: Option<usize>,
    pub d_kv_per_head: Option<usize>,
    pub svd_mode: Option<SvdMode>,
    /// Force one global two-norm set instead of per-layer, per-group sets.
    pub two_norm_global: bool,
    /// Factorize each kv head separately instead of merging heads.
    pub per_head: bool,
}

/// Convert a full-RoPE checkpoint into latent-attention form.
pub fn convert_checkpoint(
    src: &Checkpoint,
    stats: Option<&NormStats>,
    opts: &ConvertOptions,
) -> Result<Checkpoint> {
    if src.kind != CheckpointKind::Full {
        return Err(Error::Usage("conversion needs an unconverted checkpoint".into()));
    }
    let mut cfg = src.config.clone();
    if let Some(s) = opts.strategy {
        cfg.strategy = s;
    }
    if let Some(r) = opts.r {
        cfg.r = r;
    }
    if let Some(dkv) = opts.d_kv_per_head {
        cfg.d_kv_per_head = dkv;
    }
    if let Some(mode) = opts.svd_mode {
        cfg.svd_mode = mode;
    }
    cfg.validate()?;

    let sel = build_selection(&cfg, stats, opts)?;
    let stats_corpus_digest = match cfg.strategy {
        Strategy::TwoNorm => stats.map(|s| s.corpus_digest.clone()),
        _ => None,
    };
    convert_with_selection(src, &cfg, &sel, opts.per_head, stats_corpus_digest)
}

/// Resolve the retained-subspace selection for a conversion config.
pub fn build_selection(
    cfg: &ModelConfig,
    stats: Option<&NormStats>,
    opts: &ConvertOptions,
) -> Result<RopeSelection> {
    match cfg.strategy {
        Strategy::TwoNorm => {
            let stats = stats.ok_or_else(|| {
                Error::Usage("strategy two_norm needs calibration stats (--stats)".into())
            })?;
            stats.validate(cfg)?;
            if opts.two_norm_global {
                select_two_norm_global(stats, cfg.r)
            } else {
                select_two_norm(stats, cfg.r)
            }
        }
        formula => RopeSelection::formula(formula, cfg.r, cfg.d_h, cfg.n_layers, cfg.n_g),
    }
}

/// Conversion body shared by the CLI path and tests that construct their own
/// selections.
pub fn convert_with_selection(
    src: &Checkpoint,
    cfg: &ModelConfig,
    sel: &RopeSelection,
    per_head: bool,
    stats_corpus_digest: Option<String>,
) -> Result<Checkpoint> {
    sel.validate_dims(cfg.n_layers, cfg.n_g)?;
    if sel.r != cfg.r || sel.d_h != cfg.d_h {
        return Err(Error::Shape(format!(
            "selection r={} d_h={} does not match config r={} d_h={}",
            sel.r, sel.d_h, cfg.r, cfg.d_h
        )));
    }

    struct LayerOut {
        wq_rope: Mat64,
        wq_nope: Mat64,
        wk_rope: Mat64,
        factors: LayerFactors,
    }

    let layer_outs: Vec<Result<LayerOut>> = (0..cfg.n_layers)
        .into_par_iter()
        .map(|l| {
            let wq = src.store.get_as_f64(&format!("L{l}.Wq"))?;
            let wk = src.store.get_as_f64(&format!("L{l}.Wk"))?;
            let wv = src.store.get_as_f64(&format!("L{l}.Wv"))?;
            let (wq_rope, wq_nope) = split_projection(&wq, sel, l, ProjRole::Q, cfg.n_g)?;
            let (wk_rope, wk_nope) = split_projection(&wk, sel, l, ProjRole::K, cfg.n_g)?;
            let factors = if per_head {
                factor_per_head(&wk_nope, &wv, cfg.n_g, cfg.d_kv_per_head, cfg.svd_mode)?
            } else {
                match cfg.svd_mode {
                    SvdMode::Joint => factor_joint(&wk_nope, &wv, cfg.d_kv_total())?,
                    SvdMode::Split => factor_split(&wk_nope, &wv, cfg.d_kv_total())?,
                }
            };
            Ok(LayerOut { wq_rope, wq_nope, wk_rope, factors })
        })
        .collect();

    let mut store = TensorStore::new();
    store.insert("embed", src.store.get("embed")?.clone());
    let mut discarded_sq = Vec::with_capacity(cfg.n_layers);
    let mut input_sq = Vec::with_capacity(cfg.n_layers);
    for (l, out) in layer_outs.into_iter().enumerate() {
        let out = out?;
        let p = |s: &str| format!("L{l}.{s}");
        store.insert(p("norm1"), src.store.get(&p("norm1"))?.clone());
        store.insert_f32(p("Wq_rope"), out.wq_rope.cast());
        store.insert_f32(p("Wq_nope"), out.wq_nope.cast());
        store.insert_f32(p("Wk_rope"), out.wk_rope.cast());
        store.insert_f32(p("Wdkv"), out.factors.w_dkv.cast());
        store.insert_f32(p("Wuk"), out.factors.w_uk.cast());
        store.insert_f32(p("Wuv"), out.factors.w_uv.cast());
        let s_data: Vec<u32> = (0..cfg.n_g)
            .flat_map(|g| sel.set(l, g).iter().map(|&k| k as u32))
            .collect();
        store.insert(
            p("S"),
            Tensor::U32(U32Tensor { rows: cfg.n_g, cols: cfg.r, data: s_data }),
        );
        store.insert(p("Wo"), src.store.get(&p("Wo"))?.clone());
        store.insert(p("norm2"), src.store.get(&p("norm2"))?.clone());
        store.insert(p("mlp.up"), src.store.get(&p("mlp.up"))?.clone());
        store.insert(p("mlp.down"), src.store.get(&p("mlp.down"))?.clone());
        discarded_sq.push(out.factors.discarded_sq);
        input_sq.push(out.factors.input_sq);
    }
    store.insert("lm_head", src.store.get("lm_head")?.clone());

    Ok(Checkpoint {
        config: cfg.clone(),
        kind: CheckpointKind::Mla,
        conversion: Some(ConversionMeta {
            per_head,
            discarded_sq,
            input_sq,
            stats_corpus_digest,
        }),
        store,
    })
}

/// Largest latent width that keeps the requested factorization exact on
/// generic weights, per kv head. For `joint` that is the full rank of the
/// concatenated block; `split` only reaches exactness when the halves can
/// cover both blocks' ranks.
pub fn full_rank_d_kv_per_head(cfg: &ModelConfig, mode: SvdMode) -> usize {
    let d_c = cfg.d_c();
    match mode {
        SvdMode::Joint => {
            let total = cfg.d.min(cfg.n_g * (d_c + cfg.d_h));
            total / cfg.n_g
        }
        SvdMode::Split => {
            let half = cfg
                .d
                .min(cfg.n_g * d_c)
                .min(cfg.n_g * cfg.d_h);
            2 * (half / cfg.n_g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::{init_toy, load_checkpoint, save_checkpoint};

    fn toy_checkpoint(n_g: usize, seed: u64) -> Checkpoint {
        let cfg = ModelConfig {
            d: 32,
            n_h: 4,
            n_g,
            d_h: 8,
            n_layers: 2,
            rope_base: 1e4,
            vocab: 64,
            strategy: Strategy::Uniform,
            r: 1,
            d_kv_per_head: 4,
            svd_mode: SvdMode::Joint,
        };
        let store = init_toy(&cfg, seed).unwrap();
        Checkpoint { config: cfg, kind: CheckpointKind::Full, conversion: None, store }
    }

    #[test]
    fn converted_checkpoint_has_mla_manifest_and_roundtrips() {
        let src = toy_checkpoint(2, 3);
        let conv = convert_checkpoint(&src, None, &ConvertOptions::default()).unwrap();
        assert_eq!(conv.kind, CheckpointKind::Mla);
        assert!(conv.store.contains("L0.Wdkv"));
        assert!(conv.store.contains("L1.S"));
        assert!(!conv.store.contains("L0.Wq"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conv.mlaf");
        save_checkpoint(&conv, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.store, conv.store);
        assert_eq!(loaded.conversion, conv.conversion);
    }

    #[test]
    fn two_norm_without_stats_is_an_error() {
        let src = toy_checkpoint(2, 3);
        let opts =
            ConvertOptions { strategy: Some(Strategy::TwoNorm), ..ConvertOptions::default() };
        assert!(matches!(convert_checkpoint(&src, None, &opts), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_r_pure_nope_conversion_runs() {
        let src = toy_checkpoint(2, 5);
        let opts = ConvertOptions { r: Some(0), ..ConvertOptions::default() };
        let conv = convert_checkpoint(&src, None, &opts).unwrap();
        assert_eq!(conv.store.get("L0.Wk_rope").unwrap().shape(), [32, 0]);
        assert_eq!(conv.store.get("L0.S").unwrap().shape(), [2, 0]);
    }

    #[test]
    fn full_rank_widths() {
        let cfg = toy_checkpoint(2, 0).config;
        // d=32, n_g=2, d_h=8, r=1: joint rank = min(32, 2*(6+8)) = 28 -> 14/head.
        assert_eq!(full_rank_d_kv_per_head(&cfg, SvdMode::Joint), 14);
        let mut r0 = cfg.clone();
        r0.r = 0;
        // split: min(32, 2*8, 2*8) = 16 -> 8 per head, doubled = 16.
        assert_eq!(full_rank_d_kv_per_head(&r0, SvdMode::Split), 16);
    }

    #[test]
    fn rank_bounds_rejected() {
        let src = toy_checkpoint(2, 7);
        let opts = ConvertOptions { d_kv_per_head: Some(200), ..ConvertOptions::default() };
        assert!(convert_checkpoint(&src, None, &opts).is_err());
    }
}
