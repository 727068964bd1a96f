//! Rotary-embedding mechanics and the full-to-partial RoPE selection
//! strategies.
//!
//! A head dimension `d_h` is viewed as `d_h/2` frequency subspaces; subspace
//! `k` occupies the adjacent coordinate pair `(2k, 2k+1)` and rotates by
//! `pos * theta_k` with `theta_k = base^(-2k/d_h)`. Partial RoPE keeps the
//! rotation on a retained set `S` of subspaces and leaves the rest
//! position-agnostic.

use serde::{Deserialize, Serialize};

use crate::calib::NormStats;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Scalar};

/// Which subspaces keep their rotation when converting full RoPE to partial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// The `r` fastest-rotating subspaces.
    High,
    /// The `r` slowest-rotating subspaces.
    Low,
    /// `r` subspaces at equidistant intervals.
    Uniform,
    /// Top `r` by calibrated query/key 2-norm contribution.
    TwoNorm,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "high" => Ok(Strategy::High),
            "low" => Ok(Strategy::Low),
            "uniform" => Ok(Strategy::Uniform),
            "two_norm" => Ok(Strategy::TwoNorm),
            other => Err(Error::Usage(format!("unknown strategy `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::High => "high",
            Strategy::Low => "low",
            Strategy::Uniform => "uniform",
            Strategy::TwoNorm => "two_norm",
        }
    }
}

/// Rotation frequencies for one head width.
#[derive(Debug, Clone)]
pub struct FreqSpectrum<T> {
    d_h: usize,
    thetas: Vec<T>,
}

impl<T: Scalar> FreqSpectrum<T> {
    /// `theta_k = base^(-2k/d_h)` for `0 <= k < d_h/2`. Requires even `d_h`
    /// and `base > 1` so the spectrum is strictly decreasing from 1.
    pub fn new(d_h: usize, base: f64) -> Result<Self> {
        if d_h == 0 || d_h % 2 != 0 {
            return Err(Error::Config(format!("d_h must be even and positive, got {d_h}")));
        }
        if base <= 1.0 {
            return Err(Error::Config(format!("rope base must exceed 1, got {base}")));
        }
        let thetas = (0..d_h / 2)
            .map(|k| T::from(base.powf(-2.0 * k as f64 / d_h as f64)).unwrap())
            .collect();
        Ok(FreqSpectrum { d_h, thetas })
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn theta(&self, k: usize) -> T {
        self.thetas[k]
    }

    /// Rotate the chunks of a `d_h`-wide vector listed in `subspaces`; the
    /// rest stay untouched (NoPE).
    pub fn apply(&self, x: &mut [T], pos: usize, subspaces: &[usize]) {
        debug_assert_eq!(x.len(), self.d_h);
        let p = T::from(pos).unwrap();
        for &k in subspaces {
            let angle = p * self.thetas[k];
            rotate_pair(&mut x[2 * k..2 * k + 2], angle);
        }
    }

    /// Rotate a packed vector of `|s|` retained chunks; pair `j` uses the
    /// frequency of the original subspace `s[j]`.
    pub fn apply_packed(&self, x: &mut [T], pos: usize, s: &[usize]) {
        debug_assert_eq!(x.len(), 2 * s.len());
        let p = T::from(pos).unwrap();
        for (j, &k) in s.iter().enumerate() {
            let angle = p * self.thetas[k];
            rotate_pair(&mut x[2 * j..2 * j + 2], angle);
        }
    }
}

#[inline]
fn rotate_pair<T: Scalar>(pair: &mut [T], angle: T) {
    let (c, s) = (angle.cos(), angle.sin());
    let (a, b) = (pair[0], pair[1]);
    pair[0] = c * a - s * b;
    pair[1] = s * a + c * b;
}

/// `S_high = { k | 0 <= k < r }`.
pub fn select_high(r: usize, d_h: usize) -> Result<Vec<usize>> {
    check_r(r, d_h)?;
    Ok((0..r).collect())
}

/// `S_low = { k | d_h/2 - r <= k < d_h/2 }`.
pub fn select_low(r: usize, d_h: usize) -> Result<Vec<usize>> {
    check_r(r, d_h)?;
    Ok((d_h / 2 - r..d_h / 2).collect())
}

/// `S_uniform = { floor(k * d_h / (2r)) | 0 <= k < r }`, empty when `r = 0`.
pub fn select_uniform(r: usize, d_h: usize) -> Result<Vec<usize>> {
    check_r(r, d_h)?;
    Ok((0..r).map(|k| k * d_h / (2 * r)).collect())
}

fn check_r(r: usize, d_h: usize) -> Result<()> {
    if r > d_h / 2 {
        return Err(Error::Config(format!("r = {r} exceeds subspace count {}", d_h / 2)));
    }
    Ok(())
}

/// Per-layer, per-kv-group retained subspace sets, plus the index maps they
/// induce on head coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RopeSelection {
    pub strategy: Strategy,
    pub r: usize,
    pub d_h: usize,
    /// `sets[layer][group]` is sorted ascending with exactly `r` entries.
    pub sets: Vec<Vec<Vec<usize>>>,
}

impl RopeSelection {
    /// One formula-driven set replicated across layers and groups (the
    /// high/low/uniform strategies).
    pub fn formula(
        strategy: Strategy,
        r: usize,
        d_h: usize,
        n_layers: usize,
        n_groups: usize,
    ) -> Result<RopeSelection> {
        let set = match strategy {
            Strategy::High => select_high(r, d_h)?,
            Strategy::Low => select_low(r, d_h)?,
            Strategy::Uniform => select_uniform(r, d_h)?,
            Strategy::TwoNorm => {
                return Err(Error::Config("two_norm selection requires calibration stats".into()))
            }
        };
        Ok(RopeSelection {
            strategy,
            r,
            d_h,
            sets: vec![vec![set; n_groups]; n_layers],
        })
    }

    /// All subspaces retained (the full-RoPE limit).
    pub fn full(d_h: usize, n_layers: usize, n_groups: usize) -> RopeSelection {
        RopeSelection::formula(Strategy::High, d_h / 2, d_h, n_layers, n_groups)
            .expect("r = d_h/2 is always valid")
    }

    pub fn n_layers(&self) -> usize {
        self.sets.len()
    }

    pub fn n_groups(&self) -> usize {
        self.sets.first().map_or(0, |l| l.len())
    }

    pub fn set(&self, layer: usize, group: usize) -> &[usize] {
        &self.sets[layer][group]
    }

    /// Head coordinates carrying RoPE: the pairs `(2k, 2k+1)` for `k` in the
    /// retained set, ascending.
    pub fn rope_dims(&self, layer: usize, group: usize) -> Vec<usize> {
        self.sets[layer][group]
            .iter()
            .flat_map(|&k| [2 * k, 2 * k + 1])
            .collect()
    }

    /// The complement of [`rope_dims`](Self::rope_dims), ascending.
    pub fn nope_dims(&self, layer: usize, group: usize) -> Vec<usize> {
        let retained = &self.sets[layer][group];
        (0..self.d_h / 2)
            .filter(|k| !retained.contains(k))
            .flat_map(|k| [2 * k, 2 * k + 1])
            .collect()
    }

    pub fn validate_dims(&self, n_layers: usize, n_groups: usize) -> Result<()> {
        if self.n_layers() != n_layers || self.sets.iter().any(|l| l.len() != n_groups) {
            return Err(Error::Shape(format!(
                "selection covers {}x{} layer/groups, expected {}x{}",
                self.n_layers(),
                self.n_groups(),
                n_layers,
                n_groups
            )));
        }
        for layer in &self.sets {
            for set in layer {
                if set.len() != self.r
                    || set.windows(2).any(|w| w[0] >= w[1])
                    || set.iter().any(|&k| k >= self.d_h / 2)
                {
                    return Err(Error::Shape("malformed retained subspace set".into()));
                }
            }
        }
        Ok(())
    }
}

/// Top-`r` subspaces per layer and kv group by calibrated 2-norm score, ties
/// broken toward the smaller subspace index.
pub fn select_two_norm(stats: &NormStats, r: usize) -> Result<RopeSelection> {
    let d_h = stats.n_subspaces() * 2;
    check_r(r, d_h)?;
    let mut sets = Vec::with_capacity(stats.n_layers());
    for layer in &stats.scores {
        let mut layer_sets = Vec::with_capacity(layer.len());
        for group in layer {
            layer_sets.push(top_r_indices(group, r));
        }
        sets.push(layer_sets);
    }
    Ok(RopeSelection { strategy: Strategy::TwoNorm, r, d_h, sets })
}

/// Variant of [`select_two_norm`] forcing one global set: scores are averaged
/// over layers and groups before ranking.
pub fn select_two_norm_global(stats: &NormStats, r: usize) -> Result<RopeSelection> {
    let d_h = stats.n_subspaces() * 2;
    check_r(r, d_h)?;
    let mut mean = vec![0.0f64; stats.n_subspaces()];
    let mut count = 0usize;
    for layer in &stats.scores {
        for group in layer {
            for (k, &s) in group.iter().enumerate() {
                mean[k] += s;
            }
            count += 1;
        }
    }
    for v in &mut mean {
        *v /= count as f64;
    }
    let set = top_r_indices(&mean, r);
    Ok(RopeSelection {
        strategy: Strategy::TwoNorm,
        r,
        d_h,
        sets: vec![vec![set; stats.n_groups()]; stats.n_layers()],
    })
}

fn top_r_indices(scores: &[f64], r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut top: Vec<usize> = idx.into_iter().take(r).collect();
    top.sort_unstable();
    top
}

/// Which projection a column split applies to; queries follow their kv
/// group's selection, keys their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjRole {
    Q,
    K,
}

/// Split a `d x (n * d_h)` projection into its RoPE-carrying and NoPE column
/// blocks, per head, preserving ascending column order within each head.
pub fn split_projection<T: Scalar>(
    w: &Matrix<T>,
    sel: &RopeSelection,
    layer: usize,
    role: ProjRole,
    n_groups: usize,
) -> Result<(Matrix<T>, Matrix<T>)> {
    sel.validate_dims(sel.n_layers(), n_groups)?;
    let d_h = sel.d_h;
    if w.cols() % d_h != 0 {
        return Err(Error::Shape(format!(
            "projection width {} is not a multiple of d_h {}",
            w.cols(),
            d_h
        )));
    }
    let n_heads = w.cols() / d_h;
    if role == ProjRole::K && n_heads != n_groups {
        return Err(Error::Shape(format!(
            "key projection has {n_heads} heads but selection has {n_groups} groups"
        )));
    }
    if role == ProjRole::Q && n_heads % n_groups != 0 {
        return Err(Error::Shape(format!(
            "query head count {n_heads} not divisible by group count {n_groups}"
        )));
    }

    let mut rope_cols = Vec::with_capacity(n_heads * 2 * sel.r);
    let mut nope_cols = Vec::with_capacity(n_heads * (d_h - 2 * sel.r));
    for h in 0..n_heads {
        let group = match role {
            ProjRole::K => h,
            ProjRole::Q => h * n_groups / n_heads,
        };
        let base = h * d_h;
        rope_cols.extend(sel.rope_dims(layer, group).iter().map(|&c| base + c));
        nope_cols.extend(sel.nope_dims(layer, group).iter().map(|&c| base + c));
    }
    Ok((w.select_cols(&rope_cols), w.select_cols(&nope_cols)))
}
