//! Training losses: the global bootstrap term and the local contrastive
//! term with its two ablation variants.
//!
//! The local term treats every target-grid cell `a` of the color-only view
//! as a query whose positive is the augmentation-mapped location `p_a` in
//! the other view. The similarity row `C'(a, .)` is a cosine map against
//! all online locations; its `-log softmax(. / tau)` row is interpolated
//! bilinearly at `p_a` and averaged over the valid pair set.

use crate::error::{Error, Result};
use crate::geometry::CorrespondenceSet;
use crate::graph::{bilinear_read, Graph, Var};
use crate::tensor::Tensor;
use crate::Real;
use serde::{Deserialize, Serialize};

/// Norm floor added before dividing in every cosine/normalize step.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalVariant {
    /// Interpolate the negative-log-softmax map at the warped coordinate.
    NllWarp,
    /// Warp the online feature map first, then score the aligned column.
    FeatureWarp,
    /// Plain regression (2 - 2cos) between aligned local features.
    LocalMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Mixing weight: `total = (1-alpha)*global + alpha*local`.
    pub alpha: f64,
    /// Softmax temperature of the local contrastive term.
    pub tau: f64,
    pub variant: LocalVariant,
    /// Also average the mirrored global term (swap the view roles), as in
    /// standard BYOL. The default objective is one-directional.
    #[serde(default)]
    pub symmetric_global: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            tau: 0.1,
            variant: LocalVariant::NllWarp,
            symmetric_global: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Per-step loss report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub global: f64,
    pub local: f64,
    /// Valid correspondences summed over the batch.
    pub valid_pairs: usize,
}

// ---- graph-side builders ---------------------------------------------------

/// Global bootstrap term: mean over rows of `2 - 2 cos(q, z)`, with the
/// target projection `z` entering as a stop-gradient constant.
pub fn global_loss<T: Real>(g: &mut Graph<T>, q: Var, z_target: Tensor<T>) -> Var {
    let cos = g.cos_rows_const(q, z_target, T::from_f64(NORM_EPS));
    let m = g.mean_all(cos);
    g.scalar_affine(m, T::from_f64(-2.0), T::from_f64(2.0))
}

/// Local loss for one image pair. `online_sc_rows` is the online local map
/// of the spatial view as `(h*w, d_l)` rows; `target_c_rows` is the target
/// local map of the color-only view in the same layout, stop-gradient.
///
/// Returns `None` when the correspondence set is empty.
pub fn local_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &LossConfig,
    online_sc_rows: Var,
    target_c_rows: &Tensor<T>,
    corr: &CorrespondenceSet,
    grid_hw: (usize, usize),
) -> Option<Var> {
    if corr.pairs.is_empty() {
        return None;
    }
    let (gh, gw) = grid_hw;
    let target_norm = l2_normalize_rows_tensor(target_c_rows);
    let inv_temp = T::from_f64(1.0 / cfg.tau);
    Some(match cfg.variant {
        LocalVariant::NllWarp => {
            let a = g.l2_normalize_rows(online_sc_rows, T::from_f64(NORM_EPS));
            let sim = g.matmul_nt_const(a, target_norm); // (cells_c, cells_sc)
            let nll = g.neg_log_softmax_rows(sim, inv_temp);
            let pairs = corr
                .pairs
                .iter()
                .map(|p| (p.grid_c.0 * gw + p.grid_c.1, p.uv_sc.0, p.uv_sc.1))
                .collect();
            g.gather_bilinear_mean(nll, pairs, (gh, gw))
        }
        LocalVariant::FeatureWarp => {
            // warp features to the query coordinates, then every query reads
            // its own aligned column of the similarity map
            let coords = corr.pairs.iter().map(|p| p.uv_sc).collect();
            let warped = g.warp_rows_bilinear(online_sc_rows, coords, (gh, gw));
            let a = g.l2_normalize_rows(warped, T::from_f64(NORM_EPS));
            let sim = g.matmul_nt_const(a, target_norm); // (cells_c, P)
            let nll = g.neg_log_softmax_rows(sim, inv_temp);
            let pairs = corr
                .pairs
                .iter()
                .enumerate()
                .map(|(pi, p)| (p.grid_c.0 * gw + p.grid_c.1, pi as f64, 0.0))
                .collect();
            g.gather_bilinear_mean(nll, pairs, (1, corr.pairs.len()))
        }
        LocalVariant::LocalMse => {
            let coords = corr.pairs.iter().map(|p| p.uv_sc).collect();
            let warped = g.warp_rows_bilinear(online_sc_rows, coords, (gh, gw));
            let d = target_norm.shape[1];
            let mut aligned = Tensor::zeros(&[corr.pairs.len(), d]);
            for (pi, p) in corr.pairs.iter().enumerate() {
                let row = p.grid_c.0 * gw + p.grid_c.1;
                aligned.data[pi * d..(pi + 1) * d]
                    .copy_from_slice(&target_norm.data[row * d..(row + 1) * d]);
            }
            let cos = g.cos_rows_const(warped, aligned, T::from_f64(NORM_EPS));
            let m = g.mean_all(cos);
            g.scalar_affine(m, T::from_f64(-2.0), T::from_f64(2.0))
        }
    })
}

/// `(1-alpha)*global + alpha*local`.
pub fn combine<T: Real>(g: &mut Graph<T>, global: Var, local: Var, alpha: f64) -> Var {
    g.affine2(
        global,
        local,
        T::from_f64(1.0 - alpha),
        T::from_f64(alpha),
    )
}

// ---- plain reference implementations (oracles, evaluation) ------------------

/// Divide each row by its L2 norm (plus [`NORM_EPS`]).
pub fn l2_normalize_rows_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.shape.last().expect("rows need a last axis");
    let rows = x.data.len() / c;
    let eps = T::from_f64(NORM_EPS);
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data[r * c..(r + 1) * c];
        let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt() + eps;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    out
}

/// Cosine-similarity map `(rows of a) x (rows of b)` -> `(M, N)`.
pub fn cosine_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let c = *a.shape.last().unwrap();
    assert_eq!(c, *b.shape.last().unwrap(), "feature dims differ");
    let an = l2_normalize_rows_tensor(a);
    let bn = l2_normalize_rows_tensor(b);
    let m = an.data.len() / c;
    let n = bn.data.len() / c;
    let mut out = Tensor::zeros(&[m, n]);
    for mi in 0..m {
        let ar = &an.data[mi * c..(mi + 1) * c];
        for ni in 0..n {
            let br = &bn.data[ni * c..(ni + 1) * c];
            let mut acc = T::zero();
            for (x, y) in ar.iter().zip(br) {
                acc += *x * *y;
            }
            out.data[mi * n + ni] = acc;
        }
    }
    out
}

/// Row-wise `-log softmax(x / tau)` on a plain tensor.
pub fn nll_map<T: Real>(x: &Tensor<T>, tau: f64) -> Tensor<T> {
    let c = *x.shape.last().unwrap();
    let rows = x.data.len() / c;
    let it = T::from_f64(1.0 / tau);
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data[r * c..(r + 1) * c];
        let m = row
            .iter()
            .fold(T::neg_infinity(), |a, &v| if v * it > a { v * it } else { a });
        let mut z = T::zero();
        for &v in row.iter() {
            z += (v * it - m).exp();
        }
        let lse = m + z.ln();
        for v in row.iter_mut() {
            *v = lse - *v * it;
        }
    }
    out
}

/// Reference local loss (NllWarp variant) on plain tensors.
pub fn local_loss_reference<T: Real>(
    online_sc_rows: &Tensor<T>,
    target_c_rows: &Tensor<T>,
    corr: &CorrespondenceSet,
    grid_hw: (usize, usize),
    tau: f64,
) -> Option<T> {
    if corr.pairs.is_empty() {
        return None;
    }
    let (gh, gw) = grid_hw;
    let sim = cosine_map(target_c_rows, online_sc_rows);
    let nll = nll_map(&sim, tau);
    let n_cols = gh * gw;
    let mut acc = T::zero();
    for p in &corr.pairs {
        let row = p.grid_c.0 * gw + p.grid_c.1;
        acc += bilinear_read(
            &nll.data[row * n_cols..(row + 1) * n_cols],
            gh,
            gw,
            p.uv_sc.0,
            p.uv_sc.1,
        );
    }
    Some(acc * T::from_f64(1.0 / corr.pairs.len() as f64))
}
