//! Weighted loss map.
//!
//! The mask marks foreground and difficult-background pixels: everything
//! whose 3×3 gray dilation of the ground truth reaches [`MASK_THRESHOLD`].
//! Losses are then reweighted elementwise by `W·M + 1`.

use ndarray::{Array3, ArrayView3, Zip};

use crate::error::{check_shape, Error, Result};
use crate::heatmap::HeatmapStack;

pub const MASK_THRESHOLD: f64 = 0.2;
pub const DEFAULT_WEIGHT: f64 = 10.0;

/// Per-channel 3×3 neighbourhood maximum; the window is clipped at the frame
/// border.
pub fn dilate_3x3(data: ArrayView3<'_, f64>) -> Array3<f64> {
    let (c, h, w) = data.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            let r0 = r.saturating_sub(1);
            let r1 = (r + 1).min(h - 1);
            for col in 0..w {
                let c0 = col.saturating_sub(1);
                let c1 = (col + 1).min(w - 1);
                let mut m = f64::NEG_INFINITY;
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        m = m.max(data[[ch, rr, cc]]);
                    }
                }
                out[[ch, r, col]] = m;
            }
        }
    }
    out
}

pub fn gray_dilate_3x3(gt: &HeatmapStack) -> HeatmapStack {
    HeatmapStack::from_raw(dilate_3x3(gt.data().view()), gt.has_boundary_channel())
        .expect("dilation keeps values finite")
}

/// Binary mask `M` plus the scalar weight `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMask {
    mask: Array3<u8>,
    weight: f64,
}

impl WeightMask {
    pub fn mask(&self) -> &Array3<u8> {
        &self.mask
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn support(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// `W·M + 1` per pixel.
    pub fn multiplier(&self) -> Array3<f64> {
        self.mask.mapv(|m| self.weight * f64::from(m) + 1.0)
    }
}

fn check_weight(weight: f64) -> Result<()> {
    if weight > 0.0 && weight.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("weight must be positive, got {weight}")))
    }
}

pub fn build_mask_array(gt: ArrayView3<'_, f64>, weight: f64) -> Result<WeightMask> {
    check_weight(weight)?;
    let mask = dilate_3x3(gt).mapv(|d| u8::from(d >= MASK_THRESHOLD));
    Ok(WeightMask { mask, weight })
}

pub fn build_mask(gt: &HeatmapStack, weight: f64) -> Result<WeightMask> {
    build_mask_array(gt.data().view(), weight)
}

/// Returns `loss ⊗ (W·M + 1)` and its mean over all elements.
pub fn apply_weighted_loss(
    loss: ArrayView3<'_, f64>,
    mask: &WeightMask,
) -> Result<(Array3<f64>, f64)> {
    check_shape(mask.mask.shape(), loss.shape())?;
    let w = mask.weight;
    let mut out = Array3::zeros(loss.raw_dim());
    Zip::from(&mut out)
        .and(loss)
        .and(&mask.mask)
        .for_each(|o, &l, &m| *o = l * (w * f64::from(m) + 1.0));
    let mean = out.mean().unwrap_or(0.0);
    Ok((out, mean))
}

/// Continuous weighting `gt·W + 1`, without dilation or threshold.
pub fn baseline_weight_map_array(gt: ArrayView3<'_, f64>, weight: f64) -> Result<Array3<f64>> {
    check_weight(weight)?;
    Ok(gt.mapv(|y| y * weight + 1.0))
}

pub fn baseline_weight_map(gt: &HeatmapStack, weight: f64) -> Result<Array3<f64>> {
    baseline_weight_map_array(gt.data().view(), weight)
}
