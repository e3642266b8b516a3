//! On-disk dataset format: PFM float maps, 8-bit PNGs and the JSON sidecars
//! holding intrinsics, camera-to-world matrices and the held-out split.
//!
//! PFM files are Portable FloatMap: `PF`/`Pf` magic, `width height`, negative
//! scale for little-endian, then 32-bit floats in bottom-to-top scanline
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::ToySceneError;
use crate::geometry::{CameraIntrinsics, CameraPose};

pub fn write_pfm(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    data: &[f64],
) -> Result<(), ToySceneError> {
    assert!(channels == 1 || channels == 3, "PFM supports 1 or 3 channels");
    assert_eq!(data.len(), width * height * channels);
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let mut buf = Vec::with_capacity(64 + data.len() * 4);
    write!(buf, "{magic}\n{width} {height}\n-1.0\n").unwrap();
    for row in (0..height).rev() {
        for col in 0..width {
            for c in 0..channels {
                let v = data[(row * width + col) * channels + c] as f32;
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| ToySceneError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f64>), ToySceneError> {
    let bytes = fs::read(path).map_err(|e| ToySceneError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let bad = |msg: &str| ToySceneError::Malformed {
        path: path.display().to_string(),
        reason: msg.to_string(),
    };
    // header: three newline-terminated lines
    let mut line_ends = Vec::with_capacity(3);
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            line_ends.push(i);
            if line_ends.len() == 3 {
                break;
            }
        }
    }
    if line_ends.len() < 3 {
        return Err(bad("truncated PFM header"));
    }
    let magic = std::str::from_utf8(&bytes[..line_ends[0]]).map_err(|_| bad("non-ASCII magic"))?;
    let channels = match magic.trim() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(bad(&format!("unknown PFM magic '{other}'"))),
    };
    let dims = std::str::from_utf8(&bytes[line_ends[0] + 1..line_ends[1]])
        .map_err(|_| bad("non-ASCII dimensions"))?;
    let mut it = dims.split_whitespace();
    let width: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing width"))?;
    let height: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing height"))?;
    let scale: f64 = std::str::from_utf8(&bytes[line_ends[1] + 1..line_ends[2]])
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("missing scale"))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM not supported"));
    }
    let payload = &bytes[line_ends[2] + 1..];
    let expected = width * height * channels * 4;
    if payload.len() != expected {
        return Err(bad(&format!(
            "payload is {} bytes, expected {expected} for {width}x{height}x{channels}",
            payload.len()
        )));
    }
    let mut data = vec![0.0f64; width * height * channels];
    for row in 0..height {
        let src_row = height - 1 - row;
        for col in 0..width {
            for c in 0..channels {
                let off = ((src_row * width + col) * channels + c) * 4;
                let v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
                data[(row * width + col) * channels + c] = v as f64;
            }
        }
    }
    Ok((width, height, channels, data))
}

pub fn write_rgb_png(
    path: &Path,
    width: usize,
    height: usize,
    data: &[f64],
) -> Result<(), ToySceneError> {
    assert_eq!(data.len(), width * height * 3);
    let pixels: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, pixels).unwrap();
    img.save(path).map_err(|e| ToySceneError::Malformed {
        path: path.display().to_string(),
        reason: format!("PNG write failed: {e}"),
    })
}

pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<f64>), ToySceneError> {
    let img = image::open(path)
        .map_err(|e| ToySceneError::Malformed {
            path: path.display().to_string(),
            reason: format!("PNG read failed: {e}"),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok((w, h, data))
}

pub fn write_gray_png(
    path: &Path,
    width: usize,
    height: usize,
    data: &[u8],
) -> Result<(), ToySceneError> {
    assert_eq!(data.len(), width * height);
    let img = image::GrayImage::from_raw(width as u32, height as u32, data.to_vec()).unwrap();
    img.save(path).map_err(|e| ToySceneError::Malformed {
        path: path.display().to_string(),
        reason: format!("PNG write failed: {e}"),
    })
}

pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>), ToySceneError> {
    let img = image::open(path)
        .map_err(|e| ToySceneError::Malformed {
            path: path.display().to_string(),
            reason: format!("PNG read failed: {e}"),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw()))
}

/// `poses.json`: shared intrinsics, per-frame row-major 4x4 camera-to-world
/// matrices and the ray sampling bounds of the scene.
#[derive(Debug, Serialize, Deserialize)]
pub struct PosesFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub frames: Vec<[[f64; 4]; 4]>,
}

impl PosesFile {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, ToySceneError> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height).map_err(
            |e| ToySceneError::Malformed {
                path: "poses.json".into(),
                reason: e.to_string(),
            },
        )
    }

    pub fn pose(&self, index: usize) -> Result<CameraPose, ToySceneError> {
        let rows = &self.frames[index];
        let mut m = Matrix4::zeros();
        for (r, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        CameraPose::new(m).map_err(|e| ToySceneError::Malformed {
            path: format!("poses.json (frame {index})"),
            reason: e.to_string(),
        })
    }

    pub fn matrix_rows(pose: &CameraPose) -> [[f64; 4]; 4] {
        let m = pose.camera_to_world;
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, slot) in row.iter_mut().enumerate() {
                *slot = m[(r, c)];
            }
        }
        rows
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitFile {
    pub held_out: Vec<usize>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ToySceneError> {
    let text = serde_json::to_string_pretty(value).expect("serialization cannot fail");
    fs::write(path, text).map_err(|e| ToySceneError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ToySceneError> {
    let text = fs::read_to_string(path).map_err(|e| ToySceneError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| ToySceneError::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
