//! Heatmap, attribute, depth and consistency losses with analytic gradients,
//! plus the virtual-depth conversion and the domain-weighted total.

use ndarray::{Array, Array2, Array3, ArrayBase, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;

/// Prediction clamp for the log terms.
pub const EPS: f64 = 1e-6;
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_U: f64 = 0.01;

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<D: Dimension> {
    pub value: f64,
    pub grad: Array<f64, D>,
}

fn check_shapes<S1, S2, D>(p: &ArrayBase<S1, D>, t: &ArrayBase<S2, D>, what: &str) -> Result<()>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if p.shape() != t.shape() {
        return Err(Error::Dimension(format!(
            "{what}: prediction {:?} vs target {:?}",
            p.shape(),
            t.shape()
        )));
    }
    Ok(())
}

/// Penalty-reduced focal loss: entries with `target == 1` are positives, all
/// others are negatives down-weighted by `(1 - target)^4`. Normalized by the
/// positive count (at least 1). The gradient is zero where the clamp is active.
pub fn focal_loss<S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>) -> Result<LossGrad<D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_shapes(pred, target, "focal loss")?;
    let num_pos = target.iter().filter(|&&t| t == 1.0).count();
    let norm = num_pos.max(1) as f64;
    let mut sum = 0.0;
    let mut grad = Array::zeros(pred.raw_dim());
    Zip::from(&mut grad).and(pred).and(target).for_each(|g, &x, &t| {
        let p = x.clamp(EPS, 1.0 - EPS);
        let live = p == x;
        if t == 1.0 {
            let q = 1.0 - p;
            sum -= q.powi(FOCAL_ALPHA) * p.ln();
            if live {
                *g = (2.0 * q * p.ln() - q * q / p) / norm;
            }
        } else {
            let w = (1.0 - t).powi(FOCAL_BETA);
            let l = (1.0 - p).ln();
            sum -= w * p.powi(FOCAL_ALPHA) * l;
            if live {
                *g = -w * (2.0 * p * l - p * p / (1.0 - p)) / norm;
            }
        }
    });
    Ok(LossGrad {
        value: sum / norm,
        grad,
    })
}

/// Mean absolute error over entries where `mask` is set; 0 when the mask is empty.
pub fn l1_masked<S1, S2, S3, D>(
    pred: &ArrayBase<S1, D>,
    target: &ArrayBase<S2, D>,
    mask: &ArrayBase<S3, D>,
) -> Result<LossGrad<D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    S3: Data<Elem = bool>,
    D: Dimension,
{
    check_shapes(pred, target, "L1 loss")?;
    if mask.shape() != pred.shape() {
        return Err(Error::Dimension(format!(
            "L1 loss: mask {:?} vs prediction {:?}",
            mask.shape(),
            pred.shape()
        )));
    }
    let count = mask.iter().filter(|m| **m).count();
    let mut grad = Array::zeros(pred.raw_dim());
    if count == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let n = count as f64;
    let mut sum = 0.0;
    Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .and(mask)
        .for_each(|g, &p, &t, &m| {
            if m {
                sum += (p - t).abs();
                *g = if p > t {
                    1.0 / n
                } else if p < t {
                    -1.0 / n
                } else {
                    0.0
                };
            }
        });
    Ok(LossGrad { value: sum / n, grad })
}

/// Binary cross-entropy between predicted bin probabilities `[D, H, W]` and
/// one-hot targets, averaged over valid pixels times bins.
pub fn bce_depth<S1, S2, S3>(
    pred: &ArrayBase<S1, ndarray::Ix3>,
    target: &ArrayBase<S2, ndarray::Ix3>,
    valid: &ArrayBase<S3, ndarray::Ix2>,
) -> Result<LossGrad<ndarray::Ix3>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    S3: Data<Elem = bool>,
{
    check_shapes(pred, target, "depth BCE")?;
    let (bins, h, w) = pred.dim();
    if valid.dim() != (h, w) {
        return Err(Error::Dimension(format!(
            "depth BCE: mask {:?} vs {h}x{w} pixels",
            valid.dim()
        )));
    }
    let mut grad = Array3::zeros((bins, h, w));
    let count = valid.iter().filter(|v| **v).count() * bins;
    if count == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let n = count as f64;
    let mut sum = 0.0;
    for ((d, y, x), g) in grad.indexed_iter_mut() {
        if !valid[(y, x)] {
            continue;
        }
        let raw = pred[(d, y, x)];
        let p = raw.clamp(EPS, 1.0 - EPS);
        let t = target[(d, y, x)];
        sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        if p == raw {
            *g = (p - t) / (p * (1.0 - p)) / n;
        }
    }
    Ok(LossGrad { value: sum / n, grad })
}

fn virtual_scale(intr: &Intrinsics, u: f64) -> Result<f64> {
    if !(u > 0.0) || !u.is_finite() {
        return Err(Error::param("U", format!("must be positive, got {u}")));
    }
    Ok((1.0 / (intr.fu * intr.fu) + 1.0 / (intr.fv * intr.fv)).sqrt() / u)
}

/// Focal-length-normalized depth `sqrt(1/f_u^2 + 1/f_v^2) / U * d`.
pub fn to_virtual_depth(d: f64, intr: &Intrinsics, u: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::InvalidDepth(d));
    }
    Ok(virtual_scale(intr, u)? * d)
}

pub fn to_actual_depth(dv: f64, intr: &Intrinsics, u: f64) -> Result<f64> {
    if !(dv >= 0.0) {
        return Err(Error::InvalidDepth(dv));
    }
    Ok(dv / virtual_scale(intr, u)?)
}

/// Uniform bins in virtual-depth space covering metric depths `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

impl Default for DepthBins {
    fn default() -> Self {
        Self {
            count: 60,
            min: 1.0,
            max: 61.2,
        }
    }
}

impl DepthBins {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || !(self.min > 0.0 && self.max > self.min) {
            return Err(Error::param("depth bins", format!("{self:?} is empty")));
        }
        Ok(())
    }

    /// Bin index of metric depth `d` for a camera, or `None` outside the range.
    pub fn bin_of(&self, d: f64, intr: &Intrinsics, u: f64) -> Result<Option<usize>> {
        let lo = to_virtual_depth(self.min, intr, u)?;
        let hi = to_virtual_depth(self.max, intr, u)?;
        let v = to_virtual_depth(d, intr, u)?;
        if v < lo || v > hi {
            return Ok(None);
        }
        let i = ((v - lo) / (hi - lo) * self.count as f64).floor() as usize;
        Ok(Some(i.min(self.count - 1)))
    }

    /// One-hot `[D, H, W]` targets and the mask of pixels whose depth falls in range.
    pub fn one_hot(
        &self,
        depth: &Array2<f64>,
        valid: &Array2<bool>,
        intr: &Intrinsics,
        u: f64,
    ) -> Result<(Array3<f64>, Array2<bool>)> {
        self.validate()?;
        let (h, w) = depth.dim();
        let mut out = Array3::zeros((self.count, h, w));
        let mut mask = Array2::from_elem((h, w), false);
        for ((y, x), &d) in depth.indexed_iter() {
            if !valid[(y, x)] {
                continue;
            }
            if let Some(b) = self.bin_of(d, intr, u)? {
                out[(b, y, x)] = 1.0;
                mask[(y, x)] = true;
            }
        }
        Ok((out, mask))
    }
}

/// Raise confident entries to 1: `h > tau` maps to 1, everything else is kept.
pub fn sharpen_pseudo<S, D>(h: &ArrayBase<S, D>, tau: f64) -> Array<f64, D>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    h.mapv(|v| if v > tau { 1.0 } else { v })
}

/// Focal loss of a rendered heatmap against sharpened 2D pseudo labels. Soft
/// pseudo values below 1 act as down-weighted negatives.
pub fn consistency_loss<S1, S2, D>(
    h_render: &ArrayBase<S1, D>,
    h_2d: &ArrayBase<S2, D>,
    tau: f64,
) -> Result<LossGrad<D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::param("tau", format!("must lie in (0, 1), got {tau}")));
    }
    check_shapes(h_render, h_2d, "consistency loss")?;
    focal_loss(h_render, &sharpen_pseudo(h_2d, tau))
}

/// Domain switch: `(1, 0)` for labeled source samples, `(0, 1)` for target samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_t: f64,
}

impl LossWeights {
    pub const SOURCE: Self = Self {
        lambda_s: 1.0,
        lambda_t: 0.0,
    };
    pub const TARGET: Self = Self {
        lambda_s: 0.0,
        lambda_t: 1.0,
    };

    pub fn new(lambda_s: f64, lambda_t: f64) -> Result<Self> {
        let ok = |l: f64| l == 0.0 || l == 1.0;
        if !(ok(lambda_s) && ok(lambda_t) && lambda_s + lambda_t == 1.0) {
            return Err(Error::InvalidWeights { lambda_s, lambda_t });
        }
        Ok(Self { lambda_s, lambda_t })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub det: f64,
    pub render: f64,
    pub pg: f64,
    pub ps: f64,
    pub con: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub det: f64,
    pub render: f64,
    pub pg: f64,
    pub ps: f64,
    pub con: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// `total = lambda_s (det + render + pg + ps) + lambda_t con`. A term whose
/// weight is zero is reported as 0 so it cannot leak into downstream sums.
pub fn total_loss(parts: &LossParts, w: LossWeights) -> Result<LossReport> {
    let w = LossWeights::new(w.lambda_s, w.lambda_t)?;
    let keep = |on: f64, v: f64| if on == 0.0 { 0.0 } else { v };
    let (det, render, pg, ps) = (
        keep(w.lambda_s, parts.det),
        keep(w.lambda_s, parts.render),
        keep(w.lambda_s, parts.pg),
        keep(w.lambda_s, parts.ps),
    );
    let con = keep(w.lambda_t, parts.con);
    Ok(LossReport {
        det,
        render,
        pg,
        ps,
        con,
        total: w.lambda_s * (det + render + pg + ps) + w.lambda_t * con,
        weights: w,
    })
}
