use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

/// Binary netpbm flavour for frame export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FramesFormat {
    /// Grayscale `P5`; multi-channel frames are averaged.
    #[default]
    Pgm,
    /// Color `P6`; single-channel frames are replicated.
    Ppm,
}

impl FromStr for FramesFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(FramesFormat::Pgm),
            "ppm" => Ok(FramesFormat::Ppm),
            other => Err(Error::InvalidInput(format!("unknown frame format `{other}` (pgm|ppm)"))),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes one `[C, H, W]` frame in `[0, 1]`.
pub fn encode_frame(frame: &[f32], c: usize, h: usize, w: usize, format: FramesFormat) -> Result<Vec<u8>> {
    let n = h * w;
    let at = |ch: usize, i: usize| frame[ch * n + i];
    let (magic, body): (&str, Vec<u8>) = match (format, c) {
        (FramesFormat::Pgm, _) => {
            ("P5", (0..n).map(|i| quantize((0..c).map(|ch| at(ch, i)).sum::<f32>() / c as f32)).collect())
        }
        (FramesFormat::Ppm, 1) => ("P6", (0..n).flat_map(|i| [quantize(at(0, i)); 3]).collect()),
        (FramesFormat::Ppm, 3) => ("P6", (0..n).flat_map(|i| (0..3).map(move |ch| quantize(at(ch, i)))).collect()),
        (FramesFormat::Ppm, c) => return Err(Error::InvalidInput(format!("ppm needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

/// Writes `frame_000.pgm`, `frame_001.pgm`, ... for a `[T, C, H, W]` video and
/// returns the paths.
pub fn write_frames(video: &Tensor, dir: impl AsRef<Path>, format: FramesFormat) -> Result<Vec<PathBuf>> {
    let &[t, c, h, w] = video.shape() else {
        return Err(Error::InvalidInput(format!("video must be [T,C,H,W], got {:?}", video.shape())));
    };
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let ext = match format {
        FramesFormat::Pgm => "pgm",
        FramesFormat::Ppm => "ppm",
    };
    let data = video.data();
    let per = c * h * w;
    (0..t)
        .map(|k| {
            let bytes = encode_frame(&data[k * per..(k + 1) * per], c, h, w, format)?;
            let path = dir.join(format!("frame_{k:03}.{ext}"));
            fs::write(&path, bytes).map_err(io_err(format!("writing {}", path.display())))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_body() {
        let bytes = encode_frame(&[0.0, 1.0, 0.5, 2.0], 1, 2, 2, FramesFormat::Pgm).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 255, 128, 255]);
    }

    #[test]
    fn ppm_interleaves_channels() {
        let frame = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let bytes = encode_frame(&frame, 3, 1, 2, FramesFormat::Ppm).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[255, 0, 0, 0, 255, 0]);
    }
}
