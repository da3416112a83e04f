use crate::error::VisionError;

use super::frame::{Frame, Mask};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_DIFF_THRESHOLD: u8 = 25;

/// True when at least `min_fraction` of pixels changed by more than `pixel_delta`.
pub fn motion_gate(prev: &Frame, cur: &Frame, pixel_delta: u8, min_fraction: f64) -> Result<bool, VisionError> {
    cur.check_same_dims(prev.width(), prev.height())?;
    let changed = prev
        .pixels()
        .iter()
        .zip(cur.pixels())
        .filter(|(&a, &b)| a.abs_diff(b) > pixel_delta)
        .count();
    Ok(changed as f64 >= min_fraction * prev.pixels().len() as f64)
}

/// Per-pixel running average of a static scene.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    width: u32,
    height: u32,
    mean: Vec<f64>,
    alpha: f64,
    diff_threshold: u8,
}

impl BackgroundModel {
    /// Starts from `frame` as the background estimate.
    pub fn from_frame(frame: &Frame, alpha: f64, diff_threshold: u8) -> Result<Self, VisionError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(VisionError::Dimension(format!("alpha {alpha} outside (0, 1]")));
        }
        Ok(Self {
            width: frame.width(),
            height: frame.height(),
            mean: frame.pixels().iter().map(|&p| p as f64).collect(),
            alpha,
            diff_threshold,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn diff_threshold(&self) -> u8 {
        self.diff_threshold
    }

    /// `mean <- (1 - alpha) * mean + alpha * frame` for every pixel.
    pub fn update(&mut self, frame: &Frame) -> Result<(), VisionError> {
        frame.check_same_dims(self.width, self.height)?;
        let a = self.alpha;
        for (m, &p) in self.mean.iter_mut().zip(frame.pixels()) {
            *m = ((1.0 - a) * *m + a * p as f64).clamp(0.0, 255.0);
        }
        Ok(())
    }

    /// Like [`update`](Self::update) but leaves pixels flagged in `foreground` untouched,
    /// so objects passing through do not bleed into the background.
    pub fn update_background_only(&mut self, frame: &Frame, foreground: &Mask) -> Result<(), VisionError> {
        frame.check_same_dims(self.width, self.height)?;
        if foreground.width() != self.width || foreground.height() != self.height {
            return Err(VisionError::Dimension("mask does not match background".into()));
        }
        let a = self.alpha;
        for ((m, &p), &fg) in self.mean.iter_mut().zip(frame.pixels()).zip(foreground.bits()) {
            if !fg {
                *m = ((1.0 - a) * *m + a * p as f64).clamp(0.0, 255.0);
            }
        }
        Ok(())
    }
}

/// `mask[p] = |frame[p] - round(mean[p])| > diff_threshold`.
pub fn foreground_mask(bg: &BackgroundModel, frame: &Frame) -> Result<Mask, VisionError> {
    frame.check_same_dims(bg.width, bg.height)?;
    let bits = bg
        .mean
        .iter()
        .zip(frame.pixels())
        .map(|(&m, &p)| (p as f64 - m.round()).abs() > bg.diff_threshold as f64)
        .collect();
    Mask::new(bg.width, bg.height, bits)
}
