//! Low-rank factorization of the NoPE key projection and the value
//! projection into latent down/up matrices.
//!
//! Two routes share one output contract: `joint` factorizes the column
//! concatenation `[W_k_nope, W_v]` at rank `D_kv`, `split` factorizes the two
//! blocks independently at rank `D_kv/2` each and packages the pieces
//! block-diagonally so downstream attention code is mode-agnostic. Both
//! balance the square-root of the singular values onto the down and up
//! factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{thin_svd, Matrix};
use crate::Mat64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdMode {
    Split,
    Joint,
}

impl SvdMode {
    pub fn parse(s: &str) -> Result<SvdMode> {
        match s {
            "split" => Ok(SvdMode::Split),
            "joint" => Ok(SvdMode::Joint),
            other => Err(Error::Usage(format!("unknown svd mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SvdMode::Split => "split",
            SvdMode::Joint => "joint",
        }
    }
}

/// Latent factors of one layer.
///
/// Whatever the mode, `x . w_dkv` is the latent row and `w_uk`/`w_uv` expand
/// it back to the NoPE keys and values of every kv head.
#[derive(Debug, Clone)]
pub struct LayerFactors {
    pub mode: SvdMode,
    /// `d x D_kv` down projection.
    pub w_dkv: Mat64,
    /// `D_kv x (n_g * d_c)` key up projection.
    pub w_uk: Mat64,
    /// `D_kv x (n_g * d_h)` value up projection.
    pub w_uv: Mat64,
    /// Squared singular values discarded by each truncated SVD: one entry for
    /// `joint`, two (`k` then `v`) for `split`.
    pub discarded_sq: Vec<f64>,
    /// Squared Frobenius norms of the corresponding inputs, for relative
    /// error reporting.
    pub input_sq: Vec<f64>,
}

impl LayerFactors {
    pub fn d_kv_total(&self) -> usize {
        self.w_dkv.cols()
    }

    pub fn total_discarded_sq(&self) -> f64 {
        self.discarded_sq.iter().sum()
    }

    pub fn total_input_sq(&self) -> f64 {
        self.input_sq.iter().sum()
    }
}

fn check_inputs(w_k_nope: &Mat64, w_v: &Mat64) -> Result<()> {
    if w_k_nope.rows() != w_v.rows() {
        return Err(Error::Shape(format!(
            "row mismatch between key ({}) and value ({}) projections",
            w_k_nope.rows(),
            w_v.rows()
        )));
    }
    Ok(())
}

/// Jointly factorize `[W_k_nope, W_v]` at rank `d_kv_total`.
pub fn factor_joint(w_k_nope: &Mat64, w_v: &Mat64, d_kv_total: usize) -> Result<LayerFactors> {
    check_inputs(w_k_nope, w_v)?;
    let concat = w_k_nope.hcat(w_v)?;
    let max_rank = concat.rows().min(concat.cols());
    if d_kv_total == 0 || d_kv_total > max_rank {
        return Err(Error::Config(format!(
            "joint rank {d_kv_total} out of range 1..={max_rank} for {}x{} input",
            concat.rows(),
            concat.cols()
        )));
    }
    let svd = thin_svd(&concat, d_kv_total)?;
    let (down, up) = balance_sqrt(&svd.u, &svd.sigma, &svd.vt);
    let w_uk = up.col_block(0, w_k_nope.cols());
    let w_uv = up.col_block(w_k_nope.cols(), up.cols());
    Ok(LayerFactors {
        mode: SvdMode::Joint,
        w_dkv: down,
        w_uk,
        w_uv,
        discarded_sq: vec![svd.discarded_sq_sum],
        input_sq: vec![concat.frob_sq()],
    })
}

/// Independently factorize `W_k_nope` and `W_v` at rank `d_kv_total/2` each,
/// then package block-diagonally.
pub fn factor_split(w_k_nope: &Mat64, w_v: &Mat64, d_kv_total: usize) -> Result<LayerFactors> {
    check_inputs(w_k_nope, w_v)?;
    if d_kv_total == 0 || d_kv_total % 2 != 0 {
        return Err(Error::Config(format!(
            "split mode needs a positive even latent width, got {d_kv_total}"
        )));
    }
    let half = d_kv_total / 2;
    for (name, w) in [("key", w_k_nope), ("value", w_v)] {
        let max_rank = w.rows().min(w.cols());
        if half > max_rank {
            return Err(Error::Config(format!(
                "split rank {half} exceeds max rank {max_rank} of the {name} block"
            )));
        }
    }
    let svd_k = thin_svd(w_k_nope, half)?;
    let svd_v = thin_svd(w_v, half)?;
    let (w_dk, uk) = balance_sqrt(&svd_k.u, &svd_k.sigma, &svd_k.vt);
    let (w_dv, uv) = balance_sqrt(&svd_v.u, &svd_v.sigma, &svd_v.vt);

    // c = [x . w_dk, x . w_dv]; zero blocks keep the up projections acting on
    // their own half of the latent.
    let w_dkv = w_dk.hcat(&w_dv)?;
    let mut w_uk = Matrix::zeros(d_kv_total, w_k_nope.cols());
    for i in 0..half {
        w_uk.row_mut(i).copy_from_slice(uk.row(i));
    }
    let mut w_uv = Matrix::zeros(d_kv_total, w_v.cols());
    for i in 0..half {
        w_uv.row_mut(half + i).copy_from_slice(uv.row(i));
    }
    Ok(LayerFactors {
        mode: SvdMode::Split,
        w_dkv,
        w_uk,
        w_uv,
        discarded_sq: vec![svd_k.discarded_sq_sum, svd_v.discarded_sq_sum],
        input_sq: vec![w_k_nope.frob_sq(), w_v.frob_sq()],
    })
}

/// Ablation route: factorize each kv head's `[W_k_nope^(g), W_v^(g)]` block
/// on its own at rank `d_kv_per_head`, assembling the per-head pieces
/// block-diagonally into the merged layer shapes.
pub fn factor_per_head(
    w_k_nope: &Mat64,
    w_v: &Mat64,
    n_groups: usize,
    d_kv_per_head: usize,
    mode: SvdMode,
) -> Result<LayerFactors> {
    check_inputs(w_k_nope, w_v)?;
    if n_groups == 0 || w_k_nope.cols() % n_groups != 0 || w_v.cols() % n_groups != 0 {
        return Err(Error::Shape("projection widths not divisible by group count".into()));
    }
    let d_c = w_k_nope.cols() / n_groups;
    let d_h = w_v.cols() / n_groups;
    let d = w_k_nope.rows();
    let total = n_groups * d_kv_per_head;

    let mut w_dkv = Matrix::zeros(d, total);
    let mut w_uk = Matrix::zeros(total, w_k_nope.cols());
    let mut w_uv = Matrix::zeros(total, w_v.cols());
    let mut discarded_sq = Vec::new();
    let mut input_sq = Vec::new();
    for g in 0..n_groups {
        let k_g = w_k_nope.col_block(g * d_c, (g + 1) * d_c);
        let v_g = w_v.col_block(g * d_h, (g + 1) * d_h);
        let f = match mode {
            SvdMode::Joint => factor_joint(&k_g, &v_g, d_kv_per_head)?,
            SvdMode::Split => factor_split(&k_g, &v_g, d_kv_per_head)?,
        };
        for i in 0..d {
            for j in 0..d_kv_per_head {
                w_dkv.set(i, g * d_kv_per_head + j, f.w_dkv.get(i, j));
            }
        }
        for i in 0..d_kv_per_head {
            for j in 0..d_c {
                w_uk.set(g * d_kv_per_head + i, g * d_c + j, f.w_uk.get(i, j));
            }
            for j in 0..d_h {
                w_uv.set(g * d_kv_per_head + i, g * d_h + j, f.w_uv.get(i, j));
            }
        }
        discarded_sq.extend(f.discarded_sq);
        input_sq.extend(f.input_sq);
    }
    Ok(LayerFactors { mode, w_dkv, w_uk, w_uv, discarded_sq, input_sq })
}

/// Spread `sqrt(sigma)` onto both factors: `down = U sqrt(S)`,
/// `up = sqrt(S) V^T`.
fn balance_sqrt(u: &Mat64, sigma: &[f64], vt: &Mat64) -> (Mat64, Mat64) {
    let roots: Vec<f64> = sigma.iter().map(|&s| s.sqrt()).collect();
    let mut down = u.clone();
    for i in 0..down.rows() {
        let row = down.row_mut(i);
        for (j, &rt) in roots.iter().enumerate() {
            row[j] *= rt;
        }
    }
    let mut up = vt.clone();
    for (i, &rt) in roots.iter().enumerate() {
        for v in up.row_mut(i) {
            *v *= rt;
        }
    }
    (down, up)
}

/// Per-layer reconstruction errors of a set of factors against the matrices
/// they were built from.
#[derive(Debug, Clone, Serialize)]
pub struct ReconRow {
    pub layer: usize,
    pub frob_sq_k: f64,
    pub frob_sq_v: f64,
    pub frob_sq_total: f64,
    pub max_abs: f64,
    /// `frob_sq_total / (|W_k_nope|_F^2 + |W_v|_F^2)`.
    pub relative: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconReport {
    pub rows: Vec<ReconRow>,
}

impl ReconReport {
    pub fn total_frob_sq(&self) -> f64 {
        self.rows.iter().map(|r| r.frob_sq_total).sum()
    }
}

/// Recompute reconstruction errors with explicit products, one row per layer.
pub fn reconstruction_report(
    factors: &[LayerFactors],
    originals: &[(Mat64, Mat64)],
) -> Result<ReconReport> {
    if factors.len() != originals.len() {
        return Err(Error::Shape(format!(
            "{} factor sets vs {} original layers",
            factors.len(),
            originals.len()
        )));
    }
    let mut rows = Vec::with_capacity(factors.len());
    for (layer, (f, (w_k_nope, w_v))) in factors.iter().zip(originals).enumerate() {
        let k_hat = f.w_dkv.matmul(&f.w_uk)?;
        let v_hat = f.w_dkv.matmul(&f.w_uv)?;
        let k_diff = w_k_nope.sub(&k_hat)?;
        let v_diff = w_v.sub(&v_hat)?;
        let frob_sq_k = k_diff.frob_sq();
        let frob_sq_v = v_diff.frob_sq();
        let total = frob_sq_k + frob_sq_v;
        let denom = w_k_nope.frob_sq() + w_v.frob_sq();
        rows.push(ReconRow {
            layer,
            frob_sq_k,
            frob_sq_v,
            frob_sq_total: total,
            max_abs: k_diff.max_abs().max(v_diff.max_abs()),
            relative: if denom > 0.0 { total / denom } else { 0.0 },
        });
    }
    Ok(ReconReport { rows })
}
