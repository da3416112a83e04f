use serde::{Deserialize, Serialize};

use crate::error::VisionError;

use super::frame::{BoundingBox, Frame};
use super::motion::{foreground_mask, motion_gate, BackgroundModel, DEFAULT_ALPHA, DEFAULT_DIFF_THRESHOLD};
use super::roi::{extract_roi, DEFAULT_MIN_AREA};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Per-pixel change counted as motion.
    pub pixel_delta: u8,
    /// Fraction of changed pixels that opens the gate.
    pub min_fraction: f64,
    pub alpha: f64,
    pub diff_threshold: u8,
    pub min_area: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pixel_delta: 25,
            min_fraction: 0.002,
            alpha: DEFAULT_ALPHA,
            diff_threshold: DEFAULT_DIFF_THRESHOLD,
            min_area: DEFAULT_MIN_AREA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameOutcome {
    /// First frame of the stream; seeds the background.
    Warmup,
    /// No motion against the previous frame; nothing else ran.
    Dropped,
    /// Motion, but no foreground region large enough.
    NoRoi,
    Roi(BoundingBox),
}

/// Per-camera stream state: motion gate, then background subtraction, then RoI.
///
/// Frames that fail the motion gate never touch the background model. The
/// background is refreshed only on pixels outside the current foreground mask.
#[derive(Debug, Clone)]
pub struct FramePipeline {
    cfg: PipelineConfig,
    prev: Option<Frame>,
    background: Option<BackgroundModel>,
}

impl FramePipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        Self {
            cfg,
            prev: None,
            background: None,
        }
    }

    pub fn background(&self) -> Option<&BackgroundModel> {
        self.background.as_ref()
    }

    pub fn process(&mut self, frame: &Frame) -> Result<FrameOutcome, VisionError> {
        let Some(prev) = self.prev.replace(frame.clone()) else {
            self.background = Some(BackgroundModel::from_frame(
                frame,
                self.cfg.alpha,
                self.cfg.diff_threshold,
            )?);
            return Ok(FrameOutcome::Warmup);
        };
        if !motion_gate(&prev, frame, self.cfg.pixel_delta, self.cfg.min_fraction)? {
            return Ok(FrameOutcome::Dropped);
        }
        let bg = self.background.as_mut().expect("background seeded on warm-up");
        let mask = foreground_mask(bg, frame)?;
        bg.update_background_only(frame, &mask)?;
        Ok(match extract_roi(&mask, self.cfg.min_area) {
            Some(b) => FrameOutcome::Roi(b),
            None => FrameOutcome::NoRoi,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_block(value: u8, x0: usize, y0: usize) -> Frame {
        let mut f = Frame::filled(32, 32, 20, 0).unwrap();
        for y in y0..y0 + 5 {
            for x in x0..x0 + 6 {
                f.pixels_mut()[y * 32 + x] = value;
            }
        }
        f
    }

    #[test]
    fn static_scene_is_dropped_without_touching_background() {
        let mut p = FramePipeline::new(PipelineConfig::default());
        let bg = Frame::filled(32, 32, 20, 0).unwrap();
        assert_eq!(p.process(&bg).unwrap(), FrameOutcome::Warmup);
        let before = p.background().unwrap().clone();
        // Slight global drift below pixel_delta: gate stays shut.
        let drift = Frame::filled(32, 32, 30, 1).unwrap();
        assert_eq!(p.process(&drift).unwrap(), FrameOutcome::Dropped);
        assert_eq!(p.background().unwrap(), &before);
    }

    #[test]
    fn moving_object_yields_its_box() {
        let mut p = FramePipeline::new(PipelineConfig::default());
        p.process(&Frame::filled(32, 32, 20, 0).unwrap()).unwrap();
        assert_eq!(
            p.process(&with_block(200, 3, 4)).unwrap(),
            FrameOutcome::Roi(BoundingBox::new(3, 4, 9, 9))
        );
        assert_eq!(
            p.process(&with_block(200, 20, 20)).unwrap(),
            FrameOutcome::Roi(BoundingBox::new(20, 20, 26, 25))
        );
        // Object leaves: motion, but the background was never contaminated.
        assert_eq!(
            p.process(&Frame::filled(32, 32, 20, 0).unwrap()).unwrap(),
            FrameOutcome::NoRoi
        );
    }
}
