//! Toy decoder weights and block plumbing shared by every forward path.
//!
//! The block is pre-norm: RMSNorm -> attention -> residual -> RMSNorm ->
//! two-layer SiLU MLP -> residual, with untied embedding and lm head. The
//! conversion never touches anything here except the attention projections.

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Scalar};
use crate::rope::FreqSpectrum;
use crate::tensorio::{Checkpoint, CheckpointKind, ModelConfig};

pub const RMS_EPS: f64 = 1e-5;

pub fn rms_norm<T: Scalar>(x: &[T], w: &[T]) -> Vec<T> {
    let n = T::from(x.len()).unwrap();
    let eps = T::from(RMS_EPS).unwrap();
    let inv = T::one() / (dot(x, x) / n + eps).sqrt();
    x.iter().zip(w).map(|(&xi, &wi)| xi * inv * wi).collect()
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// `x . w` for a single row, accumulating in ascending inner index like the
/// batched matmul does, so single-step and batched paths agree bitwise.
pub fn row_matmul<T: Scalar>(x: &[T], w: &Matrix<T>) -> Vec<T> {
    debug_assert_eq!(x.len(), w.rows());
    let mut out = vec![T::zero(); w.cols()];
    for (k, &xk) in x.iter().enumerate() {
        let w_row = w.row(k);
        for (j, o) in out.iter_mut().enumerate() {
            *o += xk * w_row[j];
        }
    }
    out
}

/// Unconverted attention projections of one layer.
#[derive(Debug, Clone)]
pub struct FullLayer<T> {
    pub norm1: Vec<T>,
    pub norm2: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub mlp_up: Matrix<T>,
    pub mlp_down: Matrix<T>,
}

/// Converted latent-attention weights of one layer, including the products
/// pre-merged at load time for the absorbed path.
#[derive(Debug, Clone)]
pub struct MlaLayer<T> {
    pub norm1: Vec<T>,
    pub norm2: Vec<T>,
    pub wq_rope: Matrix<T>,
    pub wq_nope: Matrix<T>,
    pub wk_rope: Matrix<T>,
    pub wdkv: Matrix<T>,
    pub wuk: Matrix<T>,
    pub wuv: Matrix<T>,
    pub wo: Matrix<T>,
    pub mlp_up: Matrix<T>,
    pub mlp_down: Matrix<T>,
    /// Retained subspaces per kv group.
    pub sets: Vec<Vec<usize>>,
    /// Per query head: `W_q_nope^(h) . W_uk^(g)T`, `d x D_kv`.
    pub absorbed_q: Vec<Matrix<T>>,
    /// Per query head: `W_uv^(g) . W_o[head rows]`, `D_kv x d`.
    pub absorbed_o: Vec<Matrix<T>>,
}

#[derive(Debug, Clone)]
pub enum Layers<T> {
    Full(Vec<FullLayer<T>>),
    Mla(Vec<MlaLayer<T>>),
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub embed: Matrix<T>,
    pub lm_head: Matrix<T>,
    pub layers: Layers<T>,
    pub spectrum: FreqSpectrum<T>,
}

impl<T: Scalar> Model<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model<T>> {
        let cfg = ckpt.config.clone();
        let store = &ckpt.store;
        let as_t = |name: &str| -> Result<Matrix<T>> { Ok(store.get_f32(name)?.cast()) };
        let as_vec = |name: &str| -> Result<Vec<T>> { Ok(as_t(name)?.data().to_vec()) };

        let layers = match ckpt.kind {
            CheckpointKind::Full => {
                let mut layers = Vec::with_capacity(cfg.n_layers);
                for l in 0..cfg.n_layers {
                    let p = |s: &str| format!("L{l}.{s}");
                    layers.push(FullLayer {
                        norm1: as_vec(&p("norm1"))?,
                        norm2: as_vec(&p("norm2"))?,
                        wq: as_t(&p("Wq"))?,
                        wk: as_t(&p("Wk"))?,
                        wv: as_t(&p("Wv"))?,
                        wo: as_t(&p("Wo"))?,
                        mlp_up: as_t(&p("mlp.up"))?,
                        mlp_down: as_t(&p("mlp.down"))?,
                    });
                }
                Layers::Full(layers)
            }
            CheckpointKind::Mla => {
                let mut layers = Vec::with_capacity(cfg.n_layers);
                for l in 0..cfg.n_layers {
                    let p = |s: &str| format!("L{l}.{s}");
                    let sel = store.get_u32(&p("S"))?;
                    if sel.rows != cfg.n_g || sel.cols != cfg.r {
                        return Err(Error::Manifest {
                            name: p("S"),
                            detail: format!(
                                "selection shape {}x{} does not match n_g={} r={}",
                                sel.rows, sel.cols, cfg.n_g, cfg.r
                            ),
                        });
                    }
                    let sets: Vec<Vec<usize>> = (0..cfg.n_g)
                        .map(|g| {
                            sel.data[g * cfg.r..(g + 1) * cfg.r]
                                .iter()
                                .map(|&v| v as usize)
                                .collect()
                        })
                        .collect();
                    for set in &sets {
                        if set.iter().any(|&k| k >= cfg.subspaces())
                            || set.windows(2).any(|w| w[0] >= w[1])
                        {
                            return Err(Error::Format(format!(
                                "layer {l}: malformed retained subspace set {set:?}"
                            )));
                        }
                    }

                    let wq_nope = as_t(&p("Wq_nope"))?;
                    let wuk = as_t(&p("Wuk"))?;
                    let wuv = as_t(&p("Wuv"))?;
                    let wo = as_t(&p("Wo"))?;
                    let d_c = cfg.d_c();
                    let mut absorbed_q = Vec::with_capacity(cfg.n_h);
                    let mut absorbed_o = Vec::with_capacity(cfg.n_h);
                    for h in 0..cfg.n_h {
                        let g = cfg.group_of(h);
                        let wq_nope_h = wq_nope.col_block(h * d_c, (h + 1) * d_c);
                        let wuk_g = wuk.col_block(g * d_c, (g + 1) * d_c);
                        absorbed_q.push(wq_nope_h.matmul(&wuk_g.transpose())?);
                        let wuv_g = wuv.col_block(g * cfg.d_h, (g + 1) * cfg.d_h);
                        let wo_h = wo.row_block(h * cfg.d_h, (h + 1) * cfg.d_h);
                        absorbed_o.push(wuv_g.matmul(&wo_h)?);
                    }

                    layers.push(MlaLayer {
                        norm1: as_vec(&p("norm1"))?,
                        norm2: as_vec(&p("norm2"))?,
                        wq_rope: as_t(&p("Wq_rope"))?,
                        wq_nope,
                        wk_rope: as_t(&p("Wk_rope"))?,
                        wdkv: as_t(&p("Wdkv"))?,
                        wuk,
                        wuv,
                        wo,
                        mlp_up: as_t(&p("mlp.up"))?,
                        mlp_down: as_t(&p("mlp.down"))?,
                        sets,
                        absorbed_q,
                        absorbed_o,
                    });
                }
                Layers::Mla(layers)
            }
        };

        Ok(Model {
            spectrum: FreqSpectrum::new(cfg.d_h, cfg.rope_base)?,
            embed: as_t("embed")?,
            lm_head: as_t("lm_head")?,
            cfg,
            layers,
        })
    }

    pub fn kind(&self) -> CheckpointKind {
        match self.layers {
            Layers::Full(_) => CheckpointKind::Full,
            Layers::Mla(_) => CheckpointKind::Mla,
        }
    }

    pub fn embed_row(&self, token: u32) -> Result<Vec<T>> {
        if token as usize >= self.cfg.vocab {
            return Err(Error::Format(format!(
                "token id {token} exceeds vocab {}",
                self.cfg.vocab
            )));
        }
        Ok(self.embed.row(token as usize).to_vec())
    }

    /// Residual MLP half-block: `x += down(silu(up(rms_norm(x))))`.
    pub fn mlp_block(&self, x: &mut [T], norm2: &[T], up: &Matrix<T>, down: &Matrix<T>) {
        let normed = rms_norm(x, norm2);
        let mut hidden = row_matmul(&normed, up);
        for v in &mut hidden {
            *v = silu(*v);
        }
        let out = row_matmul(&hidden, down);
        for (xi, oi) in x.iter_mut().zip(out) {
            *xi += oi;
        }
    }
}
