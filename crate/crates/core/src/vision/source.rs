use std::path::{Path, PathBuf};

use crate::error::VisionError;

use super::frame::{read_pgm, Frame};

/// Where frames come from.
pub enum FrameSource {
    /// `*.pgm` files in filename order; the n-th file is captured at `n * period_ms`.
    Directory(PathBuf),
    /// Frames carrying their own capture timestamps.
    Generator(Box<dyn Iterator<Item = Frame> + Send>),
}

/// Iterator that forwards at most one frame per sampling period.
pub struct FrameSampler {
    inner: Box<dyn Iterator<Item = Result<Frame, VisionError>> + Send>,
    period_ms: i64,
    last_ms: Option<i64>,
}

impl Iterator for FrameSampler {
    type Item = Result<Frame, VisionError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.inner.next()? {
                Err(e) => return Some(Err(e)),
                Ok(frame) => {
                    let due = self
                        .last_ms
                        .is_none_or(|last| frame.timestamp_ms >= last + self.period_ms);
                    if due {
                        self.last_ms = Some(frame.timestamp_ms);
                        return Some(Ok(frame));
                    }
                }
            }
        }
    }
}

fn list_pgm(dir: &Path) -> Result<Vec<PathBuf>, VisionError> {
    let io = |e: std::io::Error| VisionError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Samples frames from `source`. Unreadable files surface as per-frame errors
/// and the stream continues.
pub fn sample_frames(source: FrameSource, period_ms: u64) -> Result<FrameSampler, VisionError> {
    if period_ms < 1 {
        return Err(VisionError::Dimension("period_ms must be at least 1".into()));
    }
    let period = i64::try_from(period_ms).map_err(|_| VisionError::Dimension("period_ms too large".into()))?;
    let inner: Box<dyn Iterator<Item = Result<Frame, VisionError>> + Send> = match source {
        FrameSource::Directory(dir) => {
            let files = list_pgm(&dir)?;
            Box::new(
                files
                    .into_iter()
                    .enumerate()
                    .map(move |(i, path)| read_pgm(&path, i as i64 * period)),
            )
        }
        FrameSource::Generator(frames) => Box::new(frames.map(Ok)),
    };
    Ok(FrameSampler {
        inner,
        period_ms: period,
        last_ms: None,
    })
}
