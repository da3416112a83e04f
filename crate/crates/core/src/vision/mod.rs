//! Frame pre-processing: sampling, motion gating, background subtraction,
//! region-of-interest extraction, feature extraction and annotation parsing.

mod frame;
mod motion;
mod pipeline;
mod roi;
mod source;
mod voc;

pub use frame::{parse_pgm, read_pgm, write_pgm, BoundingBox, Frame, Mask};
pub use motion::{foreground_mask, motion_gate, BackgroundModel, DEFAULT_ALPHA, DEFAULT_DIFF_THRESHOLD};
pub use pipeline::{FrameOutcome, FramePipeline, PipelineConfig};
pub use roi::{extract_roi, features_from_roi, DEFAULT_MIN_AREA, FEATURE_DIM, FEATURE_SIDE};
pub use source::{sample_frames, FrameSampler, FrameSource};
pub use voc::{parse_voc, to_voc_xml, AnnotatedObject, AnnotationRecord};
