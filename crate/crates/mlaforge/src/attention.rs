//! Four interchangeable attention forward paths and incremental decoding.
//!
//! * `forward_full` - full-RoPE MHA/GQA over the source weights.
//! * `forward_partial` - same weights, rotation restricted to a retained
//!   subspace selection.
//! * `forward_mla_naive` - converted weights; reconstructs NoPE keys and
//!   values from the latent before attending.
//! * `forward_mla_absorbed` - converted weights; never materializes keys or
//!   values, scoring and weighting directly in latent space through the
//!   pre-merged projection products.
//!
//! All paths share the block plumbing, apply `1/sqrt(d_h)` to the summed
//! scores, and mask strictly causally, so they are comparable logit-for-logit.

use crate::cachemodel::{quant_roundtrip, QuantSpec, QuantizedRows};
use crate::error::{Error, Result};
use crate::linalg::{dot, softmax_in_place, Matrix, Scalar};
use crate::model::{rms_norm, row_matmul, FullLayer, Layers, MlaLayer, Model};
use crate::rope::RopeSelection;

/// Quantization applied to cached latent rows; the RoPE key rows join in
/// only when `include_rope` is set.
#[derive(Debug, Clone, Copy)]
pub struct CacheQuant {
    pub spec: QuantSpec,
    pub include_rope: bool,
}

/// Batched forward output.
#[derive(Debug, Clone)]
pub struct ForwardOut<T> {
    /// `seq x vocab`.
    pub logits: Matrix<T>,
    /// Per layer: the attention block output (post `W_o`, pre residual),
    /// `seq x d`.
    pub attn_out: Vec<Matrix<T>>,
}

/// Full-RoPE forward over an unconverted checkpoint.
pub fn forward_full<T: Scalar>(m: &Model<T>, tokens: &[u32]) -> Result<ForwardOut<T>> {
    let layers = require_full(m)?;
    Ok(batched_full(m, layers, tokens, None, false)?.0)
}

/// Full forward that also captures pre-RoPE query/key activations per layer
/// (the calibration hook).
pub fn forward_full_traced<T: Scalar>(
    m: &Model<T>,
    tokens: &[u32],
) -> Result<(ForwardOut<T>, Vec<(Matrix<T>, Matrix<T>)>)> {
    let layers = require_full(m)?;
    batched_full(m, layers, tokens, None, true)
}

/// Partial-RoPE forward: rotation only on the retained subspaces; with all
/// subspaces retained this is bit-identical to [`forward_full`].
pub fn forward_partial<T: Scalar>(
    m: &Model<T>,
    sel: &RopeSelection,
    tokens: &[u32],
) -> Result<ForwardOut<T>> {
    let layers = require_full(m)?;
    if sel.d_h != m.cfg.d_h {
        return Err(Error::Shape(format!(
            "selection d_h {} does not match model d_h {}",
            sel.d_h, m.cfg.d_h
        )));
    }
    sel.validate_dims(m.cfg.n_layers, m.cfg.n_g)?;
    Ok(batched_full(m, layers, tokens, Some(sel), false)?.0)
}

/// Converted-model forward that materializes `k_nope = c . W_uk` and
/// `v = c . W_uv` before attending.
pub fn forward_mla_naive<T: Scalar>(
    m: &Model<T>,
    tokens: &[u32],
    quant: Option<CacheQuant>,
) -> Result<ForwardOut<T>> {
    let layers = require_mla(m)?;
    batched_mla(m, layers, tokens, false, quant)
}

/// Converted-model forward through the pre-merged products: scores come from
/// `c_q . c^T`, outputs from latent-space weighting folded into `W_o`.
pub fn forward_mla_absorbed<T: Scalar>(
    m: &Model<T>,
    tokens: &[u32],
    quant: Option<CacheQuant>,
) -> Result<ForwardOut<T>> {
    let layers = require_mla(m)?;
    batched_mla(m, layers, tokens, true, quant)
}

fn require_full<'a, T>(m: &'a Model<T>) -> Result<&'a [FullLayer<T>]> {
    match &m.layers {
        Layers::Full(l) => Ok(l),
        Layers::Mla(_) => Err(Error::Usage(
            "this forward path needs an unconverted checkpoint".into(),
        )),
    }
}

fn require_mla<'a, T>(m: &'a Model<T>) -> Result<&'a [MlaLayer<T>]> {
    match &m.layers {
        Layers::Mla(l) => Ok(l),
        Layers::Full(_) => Err(Error::Usage(
            "this forward path needs a converted checkpoint".into(),
        )),
    }
}

fn embed_tokens<T: Scalar>(m: &Model<T>, tokens: &[u32]) -> Result<Matrix<T>> {
    let mut x = Matrix::zeros(tokens.len(), m.cfg.d);
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(&m.embed_row(t)?);
    }
    Ok(x)
}

fn score_scale<T: Scalar>(d_h: usize) -> T {
    T::one() / T::from(d_h).unwrap().sqrt()
}

fn add_rows<T: Scalar>(x: &mut Matrix<T>, delta: &Matrix<T>) {
    for (xi, &di) in x.data_mut().iter_mut().zip(delta.data()) {
        *xi += di;
    }
}

fn roundtrip_generic<T: Scalar>(m: &Matrix<T>, spec: &QuantSpec) -> Matrix<T> {
    quant_roundtrip(&m.cast::<f32>(), spec).cast::<T>()
}

fn batched_full<T: Scalar>(
    m: &Model<T>,
    layers: &[FullLayer<T>],
    tokens: &[u32],
    sel: Option<&RopeSelection>,
    trace_qk: bool,
) -> Result<(ForwardOut<T>, Vec<(Matrix<T>, Matrix<T>)>)> {
    let cfg = &m.cfg;
    let (seq, d_h) = (tokens.len(), cfg.d_h);
    let mut x = embed_tokens(m, tokens)?;
    let scale = score_scale::<T>(d_h);
    let all_subs: Vec<usize> = (0..cfg.subspaces()).collect();

    let mut attn_outs = Vec::with_capacity(layers.len());
    let mut traces = Vec::new();
    for (l, lw) in layers.iter().enumerate() {
        let mut xn = Matrix::zeros(seq, cfg.d);
        for i in 0..seq {
            xn.row_mut(i).copy_from_slice(&rms_norm(x.row(i), &lw.norm1));
        }
        let mut q = xn.matmul(&lw.wq)?;
        let mut k = xn.matmul(&lw.wk)?;
        let v = xn.matmul(&lw.wv)?;
        if trace_qk {
            traces.push((q.clone(), k.clone()));
        }

        for i in 0..seq {
            let q_row = q.row_mut(i);
            for h in 0..cfg.n_h {
                let subs = sel.map_or(&all_subs[..], |s| s.set(l, cfg.group_of(h)));
                m.spectrum.apply(&mut q_row[h * d_h..(h + 1) * d_h], i, subs);
            }
            let k_row = k.row_mut(i);
            for g in 0..cfg.n_g {
                let subs = sel.map_or(&all_subs[..], |s| s.set(l, g));
                m.spectrum.apply(&mut k_row[g * d_h..(g + 1) * d_h], i, subs);
            }
        }

        let mut ctx = Matrix::zeros(seq, cfg.n_h * d_h);
        for h in 0..cfg.n_h {
            let g = cfg.group_of(h);
            for i in 0..seq {
                let q_ih = &q.row(i)[h * d_h..(h + 1) * d_h];
                let mut scores: Vec<T> = (0..=i)
                    .map(|j| dot(q_ih, &k.row(j)[g * d_h..(g + 1) * d_h]) * scale)
                    .collect();
                softmax_in_place(&mut scores);
                let out = &mut ctx.row_mut(i)[h * d_h..(h + 1) * d_h];
                for (j, &a) in scores.iter().enumerate() {
                    let v_j = &v.row(j)[g * d_h..(g + 1) * d_h];
                    for (o, &vv) in out.iter_mut().zip(v_j) {
                        *o += a * vv;
                    }
                }
            }
        }
        let attn = ctx.matmul(&lw.wo)?;
        add_rows(&mut x, &attn);
        attn_outs.push(attn);

        for i in 0..seq {
            m.mlp_block(x.row_mut(i), &lw.norm2, &lw.mlp_up, &lw.mlp_down);
        }
    }
    let logits = x.matmul(&m.lm_head)?;
    Ok((ForwardOut { logits, attn_out: attn_outs }, traces))
}

fn batched_mla<T: Scalar>(
    m: &Model<T>,
    layers: &[MlaLayer<T>],
    tokens: &[u32],
    absorbed: bool,
    quant: Option<CacheQuant>,
) -> Result<ForwardOut<T>> {
    let cfg = &m.cfg;
    let (seq, d_h, d_r, d_c) = (tokens.len(), cfg.d_h, cfg.d_r(), cfg.d_c());
    let d_kv = cfg.d_kv_total();
    let mut x = embed_tokens(m, tokens)?;
    let scale = score_scale::<T>(d_h);

    let mut attn_outs = Vec::with_capacity(layers.len());
    for lw in layers {
        let mut xn = Matrix::zeros(seq, cfg.d);
        for i in 0..seq {
            xn.row_mut(i).copy_from_slice(&rms_norm(x.row(i), &lw.norm1));
        }
        let mut q_rope = xn.matmul(&lw.wq_rope)?;
        let q_nope = xn.matmul(&lw.wq_nope)?;
        let mut k_rope = xn.matmul(&lw.wk_rope)?;
        let mut c = xn.matmul(&lw.wdkv)?;

        for i in 0..seq {
            let q_row = q_rope.row_mut(i);
            for h in 0..cfg.n_h {
                let s = &lw.sets[cfg.group_of(h)];
                m.spectrum.apply_packed(&mut q_row[h * d_r..(h + 1) * d_r], i, s);
            }
            let k_row = k_rope.row_mut(i);
            for g in 0..cfg.n_g {
                m.spectrum.apply_packed(&mut k_row[g * d_r..(g + 1) * d_r], i, &lw.sets[g]);
            }
        }

        // Cached rows travel through the codec exactly as a quantized cache
        // would store them.
        if let Some(qc) = &quant {
            c = roundtrip_generic(&c, &qc.spec);
            if qc.include_rope && d_r > 0 {
                k_rope = roundtrip_generic(&k_rope, &qc.spec);
            }
        }

        let attn = if absorbed {
            let mut out = Matrix::zeros(seq, cfg.d);
            for h in 0..cfg.n_h {
                let g = cfg.group_of(h);
                let c_q = xn.matmul(&lw.absorbed_q[h])?;
                let mut o_lat = Matrix::zeros(seq, d_kv);
                for i in 0..seq {
                    let q_ih = &q_rope.row(i)[h * d_r..(h + 1) * d_r];
                    let mut scores: Vec<T> = (0..=i)
                        .map(|j| {
                            (dot(q_ih, &k_rope.row(j)[g * d_r..(g + 1) * d_r])
                                + dot(c_q.row(i), c.row(j)))
                                * scale
                        })
                        .collect();
                    softmax_in_place(&mut scores);
                    let acc = o_lat.row_mut(i);
                    for (j, &a) in scores.iter().enumerate() {
                        for (o, &cv) in acc.iter_mut().zip(c.row(j)) {
                            *o += a * cv;
                        }
                    }
                }
                add_rows(&mut out, &o_lat.matmul(&lw.absorbed_o[h])?);
            }
            out
        } else {
            let k_nope = c.matmul(&lw.wuk)?;
            let v = c.matmul(&lw.wuv)?;
            let mut ctx = Matrix::zeros(seq, cfg.n_h * d_h);
            for h in 0..cfg.n_h {
                let g = cfg.group_of(h);
                for i in 0..seq {
                    let q_rope_ih = &q_rope.row(i)[h * d_r..(h + 1) * d_r];
                    let q_nope_ih = &q_nope.row(i)[h * d_c..(h + 1) * d_c];
                    let mut scores: Vec<T> = (0..=i)
                        .map(|j| {
                            (dot(q_rope_ih, &k_rope.row(j)[g * d_r..(g + 1) * d_r])
                                + dot(q_nope_ih, &k_nope.row(j)[g * d_c..(g + 1) * d_c]))
                                * scale
                        })
                        .collect();
                    softmax_in_place(&mut scores);
                    let out = &mut ctx.row_mut(i)[h * d_h..(h + 1) * d_h];
                    for (j, &a) in scores.iter().enumerate() {
                        let v_j = &v.row(j)[g * d_h..(g + 1) * d_h];
                        for (o, &vv) in out.iter_mut().zip(v_j) {
                            *o += a * vv;
                        }
                    }
                }
            }
            ctx.matmul(&lw.wo)?
        };
        add_rows(&mut x, &attn);
        attn_outs.push(attn);
        for i in 0..seq {
            m.mlp_block(x.row_mut(i), &lw.norm2, &lw.mlp_up, &lw.mlp_down);
        }
    }
    let logits = x.matmul(&m.lm_head)?;
    Ok(ForwardOut { logits, attn_out: attn_outs })
}

// ---------------------------------------------------------------------------
// Incremental decoding

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeVariant {
    Full,
    Partial,
    MlaNaive,
    MlaAbsorbed,
}

/// Cache layout requested for decoding.
#[derive(Debug, Clone, Copy)]
pub enum CacheConfig {
    /// Post-RoPE keys and values per kv head.
    Full,
    /// Packed RoPE key rows plus exact latent rows.
    Latent,
    /// Latent rows group-affine coded; RoPE keys coded too when
    /// `include_rope` is set.
    Quantized(CacheQuant),
}

#[derive(Debug, Clone)]
enum RopeRows<T> {
    Plain(Vec<Vec<T>>),
    Coded(QuantizedRows),
}

impl<T: Scalar> RopeRows<T> {
    fn push(&mut self, row: Vec<T>) {
        match self {
            RopeRows::Plain(rows) => rows.push(row),
            RopeRows::Coded(q) => {
                let row32: Vec<f32> = row.iter().map(|&v| v.to_f32().unwrap()).collect();
                q.push(&row32);
            }
        }
    }

    fn row(&self, i: usize) -> Vec<T> {
        match self {
            RopeRows::Plain(rows) => rows[i].clone(),
            RopeRows::Coded(q) => q.row(i).iter().map(|&v| T::from(v).unwrap()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Full { k: Vec<Vec<T>>, v: Vec<Vec<T>> },
    Latent { k_rope: Vec<Vec<T>>, c: Vec<Vec<T>> },
    Quant { k_rope: RopeRows<T>, c: QuantizedRows },
}

/// Incremental decoding state: one growing cache per layer plus the variant
/// it was built for. Rows are append-only.
#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    variant: DecodeVariant,
    sel: Option<RopeSelection>,
    layers: Vec<LayerCache<T>>,
    len: usize,
}

impl<T: Scalar> DecodeState<T> {
    pub fn new(
        m: &Model<T>,
        variant: DecodeVariant,
        cache: CacheConfig,
        sel: Option<RopeSelection>,
    ) -> Result<DecodeState<T>> {
        let cfg = &m.cfg;
        match (&m.layers, variant) {
            (Layers::Full(_), DecodeVariant::Full | DecodeVariant::Partial) => {}
            (Layers::Mla(_), DecodeVariant::MlaNaive | DecodeVariant::MlaAbsorbed) => {}
            _ => {
                return Err(Error::Usage(
                    "decode variant incompatible with checkpoint kind".into(),
                ))
            }
        }
        if variant == DecodeVariant::Partial {
            let s = sel
                .as_ref()
                .ok_or_else(|| Error::Usage("partial decoding needs a rope selection".into()))?;
            s.validate_dims(cfg.n_layers, cfg.n_g)?;
        }
        let layers = (0..cfg.n_layers)
            .map(|_| match (variant, cache) {
                (DecodeVariant::Full | DecodeVariant::Partial, CacheConfig::Full) => {
                    Ok(LayerCache::Full { k: Vec::new(), v: Vec::new() })
                }
                (DecodeVariant::MlaNaive | DecodeVariant::MlaAbsorbed, CacheConfig::Latent) => {
                    Ok(LayerCache::Latent { k_rope: Vec::new(), c: Vec::new() })
                }
                (
                    DecodeVariant::MlaNaive | DecodeVariant::MlaAbsorbed,
                    CacheConfig::Quantized(qc),
                ) => Ok(LayerCache::Quant {
                    k_rope: if qc.include_rope {
                        RopeRows::Coded(QuantizedRows::new(qc.spec, cfg.n_g * cfg.d_r()))
                    } else {
                        RopeRows::Plain(Vec::new())
                    },
                    c: QuantizedRows::new(qc.spec, cfg.d_kv_total()),
                }),
                _ => Err(Error::Usage("cache layout incompatible with decode variant".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DecodeState { variant, sel, layers, len: 0 })
    }

    /// Number of positions decoded so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Advance one token: appends exactly one row per layer cache and returns
/// the logits for the next position.
pub fn decode_step<T: Scalar>(
    m: &Model<T>,
    st: &mut DecodeState<T>,
    token: u32,
) -> Result<Vec<T>> {
    let cfg = &m.cfg;
    let pos = st.len;
    let d_h = cfg.d_h;
    let scale = score_scale::<T>(d_h);
    let all_subs: Vec<usize> = (0..cfg.subspaces()).collect();
    let mut x = m.embed_row(token)?;

    match (&m.layers, st.variant) {
        (Layers::Full(layers), DecodeVariant::Full | DecodeVariant::Partial) => {
            for (l, lw) in layers.iter().enumerate() {
                let xn = rms_norm(&x, &lw.norm1);
                let mut q = row_matmul(&xn, &lw.wq);
                let mut k = row_matmul(&xn, &lw.wk);
                let v = row_matmul(&xn, &lw.wv);
                for h in 0..cfg.n_h {
                    let subs = match (&st.sel, st.variant) {
                        (Some(s), DecodeVariant::Partial) => s.set(l, cfg.group_of(h)),
                        _ => &all_subs,
                    };
                    m.spectrum.apply(&mut q[h * d_h..(h + 1) * d_h], pos, subs);
                }
                for g in 0..cfg.n_g {
                    let subs = match (&st.sel, st.variant) {
                        (Some(s), DecodeVariant::Partial) => s.set(l, g),
                        _ => &all_subs,
                    };
                    m.spectrum.apply(&mut k[g * d_h..(g + 1) * d_h], pos, subs);
                }
                let LayerCache::Full { k: k_cache, v: v_cache } = &mut st.layers[l] else {
                    return Err(Error::Usage("cache/variant mismatch".into()));
                };
                k_cache.push(k);
                v_cache.push(v);

                let mut ctx = vec![T::zero(); cfg.n_h * d_h];
                for h in 0..cfg.n_h {
                    let g = cfg.group_of(h);
                    let q_h = &q[h * d_h..(h + 1) * d_h];
                    let mut scores: Vec<T> = (0..=pos)
                        .map(|j| dot(q_h, &k_cache[j][g * d_h..(g + 1) * d_h]) * scale)
                        .collect();
                    softmax_in_place(&mut scores);
                    let out = &mut ctx[h * d_h..(h + 1) * d_h];
                    for (j, &a) in scores.iter().enumerate() {
                        let v_j = &v_cache[j][g * d_h..(g + 1) * d_h];
                        for (o, &vv) in out.iter_mut().zip(v_j) {
                            *o += a * vv;
                        }
                    }
                }
                let attn = row_matmul(&ctx, &lw.wo);
                for (xi, ai) in x.iter_mut().zip(attn) {
                    *xi += ai;
                }
                m.mlp_block(&mut x, &lw.norm2, &lw.mlp_up, &lw.mlp_down);
            }
        }
        (Layers::Mla(layers), DecodeVariant::MlaNaive | DecodeVariant::MlaAbsorbed) => {
            let absorbed = st.variant == DecodeVariant::MlaAbsorbed;
            let (d_r, d_c, d_kv) = (cfg.d_r(), cfg.d_c(), cfg.d_kv_total());
            for (l, lw) in layers.iter().enumerate() {
                let xn = rms_norm(&x, &lw.norm1);
                let mut q_rope = row_matmul(&xn, &lw.wq_rope);
                let q_nope = row_matmul(&xn, &lw.wq_nope);
                let mut k_rope = row_matmul(&xn, &lw.wk_rope);
                let c_row = row_matmul(&xn, &lw.wdkv);
                for h in 0..cfg.n_h {
                    let s = &lw.sets[cfg.group_of(h)];
                    m.spectrum.apply_packed(&mut q_rope[h * d_r..(h + 1) * d_r], pos, s);
                }
                for g in 0..cfg.n_g {
                    m.spectrum.apply_packed(&mut k_rope[g * d_r..(g + 1) * d_r], pos, &lw.sets[g]);
                }

                // Append, then read everything back through the cache so the
                // current row sees the same codec the history did.
                let (k_rows, c_rows): (Vec<Vec<T>>, Vec<Vec<T>>) = match &mut st.layers[l] {
                    LayerCache::Latent { k_rope: ks, c: cs } => {
                        ks.push(k_rope);
                        cs.push(c_row);
                        (ks.clone(), cs.clone())
                    }
                    LayerCache::Quant { k_rope: ks, c: cs } => {
                        ks.push(k_rope);
                        let c32: Vec<f32> =
                            c_row.iter().map(|&v| v.to_f32().unwrap()).collect();
                        cs.push(&c32);
                        let k_back = (0..=pos).map(|j| ks.row(j)).collect();
                        let c_back = (0..=pos)
                            .map(|j| cs.row(j).iter().map(|&v| T::from(v).unwrap()).collect())
                            .collect();
                        (k_back, c_back)
                    }
                    LayerCache::Full { .. } => {
                        return Err(Error::Usage("cache/variant mismatch".into()))
                    }
                };

                let attn = if absorbed {
                    let mut out = vec![T::zero(); cfg.d];
                    for h in 0..cfg.n_h {
                        let g = cfg.group_of(h);
                        let c_q = row_matmul(&xn, &lw.absorbed_q[h]);
                        let q_h = &q_rope[h * d_r..(h + 1) * d_r];
                        let mut scores: Vec<T> = (0..=pos)
                            .map(|j| {
                                (dot(q_h, &k_rows[j][g * d_r..(g + 1) * d_r])
                                    + dot(&c_q, &c_rows[j]))
                                    * scale
                            })
                            .collect();
                        softmax_in_place(&mut scores);
                        let mut o_lat = vec![T::zero(); d_kv];
                        for (j, &a) in scores.iter().enumerate() {
                            for (o, &cv) in o_lat.iter_mut().zip(&c_rows[j]) {
                                *o += a * cv;
                            }
                        }
                        let head_out = row_matmul(&o_lat, &lw.absorbed_o[h]);
                        for (o, hv) in out.iter_mut().zip(head_out) {
                            *o += hv;
                        }
                    }
                    out
                } else {
                    let k_nope_rows: Vec<Vec<T>> =
                        c_rows.iter().map(|c| row_matmul(c, &lw.wuk)).collect();
                    let v_rows: Vec<Vec<T>> =
                        c_rows.iter().map(|c| row_matmul(c, &lw.wuv)).collect();
                    let mut ctx = vec![T::zero(); cfg.n_h * d_h];
                    for h in 0..cfg.n_h {
                        let g = cfg.group_of(h);
                        let q_rope_h = &q_rope[h * d_r..(h + 1) * d_r];
                        let q_nope_h = &q_nope[h * d_c..(h + 1) * d_c];
                        let mut scores: Vec<T> = (0..=pos)
                            .map(|j| {
                                (dot(q_rope_h, &k_rows[j][g * d_r..(g + 1) * d_r])
                                    + dot(q_nope_h, &k_nope_rows[j][g * d_c..(g + 1) * d_c]))
                                    * scale
                            })
                            .collect();
                        softmax_in_place(&mut scores);
                        let out = &mut ctx[h * d_h..(h + 1) * d_h];
                        for (j, &a) in scores.iter().enumerate() {
                            let v_j = &v_rows[j][g * d_h..(g + 1) * d_h];
                            for (o, &vv) in out.iter_mut().zip(v_j) {
                                *o += a * vv;
                            }
                        }
                    }
                    row_matmul(&ctx, &lw.wo)
                };
                for (xi, ai) in x.iter_mut().zip(attn) {
                    *xi += ai;
                }
                m.mlp_block(&mut x, &lw.norm2, &lw.mlp_up, &lw.mlp_down);
            }
        }
        _ => return Err(Error::Usage("decode variant incompatible with checkpoint kind".into())),
    }

    st.len += 1;
    Ok(row_matmul(&x, &m.lm_head))
}
