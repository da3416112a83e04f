use crate::error::VisionError;
use crate::tensor::Tensor;

use super::frame::{BoundingBox, Frame, Mask};

pub const DEFAULT_MIN_AREA: usize = 9;
/// Side of the square feature grid.
pub const FEATURE_SIDE: usize = 16;
pub const FEATURE_DIM: usize = FEATURE_SIDE * FEATURE_SIDE;

/// Tight box around every foreground pixel, if there are at least `min_area` of them.
pub fn extract_roi(mask: &Mask, min_area: usize) -> Option<BoundingBox> {
    let w = mask.width();
    let mut count = 0usize;
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for (i, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
        let x = (i % w as usize) as u32;
        let y = (i / w as usize) as u32;
        count += 1;
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (count > 0 && count >= min_area).then(|| BoundingBox::new(x0, y0, x1, y1))
}

/// Overlap weights of each output cell with source pixels, in units where
/// a source pixel is `FEATURE_SIDE` long and an output cell is `len` long.
fn axis_weights(len: usize) -> Vec<Vec<(usize, u64)>> {
    let n = FEATURE_SIDE;
    (0..n)
        .map(|u| {
            let (lo, hi) = (u * len, (u + 1) * len);
            (lo / n..hi.div_ceil(n))
                .filter_map(|i| {
                    let overlap = hi.min((i + 1) * n).saturating_sub(lo.max(i * n));
                    (overlap > 0).then_some((i, overlap as u64))
                })
                .collect()
        })
        .collect()
}

/// Crops `bbox`, resamples to 16x16 with an exact area-weighted box filter and
/// scales to `[0, 1]`. Output is row-major.
pub fn features_from_roi(frame: &Frame, bbox: &BoundingBox) -> Result<Tensor, VisionError> {
    bbox.check_within(frame.width(), frame.height())?;
    let (cw, ch) = (bbox.width() as usize, bbox.height() as usize);
    let wx = axis_weights(cw);
    let wy = axis_weights(ch);
    let stride = frame.width() as usize;
    let px = frame.pixels();
    let norm = (cw * ch) as f64 * 255.0;
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for row in &wy {
        for col in &wx {
            let mut acc: u64 = 0;
            for &(j, wj) in row {
                let base = (bbox.y0 as usize + j) * stride + bbox.x0 as usize;
                for &(i, wi) in col {
                    acc += wj * wi * px[base + i] as u64;
                }
            }
            out.push(acc as f64 / norm);
        }
    }
    Ok(Tensor::new(vec![FEATURE_DIM], out).expect("feature grid is finite"))
}
