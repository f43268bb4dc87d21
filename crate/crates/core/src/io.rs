//! On-disk formats: numbered PNG frames, float32 blobs with a JSON shape
//! manifest, Middlebury `.flo` flow files, mask PNGs and text kernels.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::video::{Frame, VideoTensor};

const FLO_MAGIC: f32 = 202021.25;
const BLOB_FORMAT: &str = "zvrd-f32";

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

pub fn flow_name(i: usize) -> String {
    format!("flow_{i:05}.flo")
}

pub fn mask_name(i: usize) -> String {
    format!("mask_{i:05}.png")
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::input(path, format!("PNG: {e}"))
}

/// Reads an 8-bit PNG as a frame in `[-1, 1]`. Alpha is dropped; palette and
/// 16-bit images are reduced to 8-bit gray or RGB.
pub fn read_png(path: &Path) -> Result<Frame> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| png_error(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::input(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::input(path, format!("unsupported color type {other:?}"))),
    };
    let mut bytes = Vec::with_capacity(h * w * keep);
    for row in buf.chunks_exact(info.line_size).take(h) {
        for px in row[..w * stride].chunks_exact(stride) {
            bytes.extend_from_slice(&px[..keep]);
        }
    }
    Frame::from_u8(h, w, keep, &bytes)
}

/// Writes a 1- or 3-channel frame as an 8-bit PNG.
pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let color = match frame.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::contract(format!("cannot write a {c}-channel frame as PNG"))),
    };
    write_png_bytes(path, frame.width(), frame.height(), color, &frame.to_u8())
}

fn write_png_bytes(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_error(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_error(path, e))?;
    writer.finish().map_err(|e| png_error(path, e))
}

/// Reads `frame_00000.png`, `frame_00001.png`, ... until the first gap.
pub fn read_frames(dir: &Path) -> Result<VideoTensor> {
    let mut frames: Vec<Frame> = Vec::new();
    loop {
        let path = dir.join(frame_name(frames.len()));
        if !path.exists() {
            break;
        }
        let f = read_png(&path)?;
        if let Some(first) = frames.first() {
            if f.shape() != first.shape() {
                return Err(Error::input(
                    &path,
                    format!("frame is {:?}, earlier frames are {:?}", f.shape(), first.shape()),
                ));
            }
        }
        frames.push(f);
    }
    if frames.is_empty() {
        return Err(Error::input(dir, format!("no {} found", frame_name(0))));
    }
    VideoTensor::new(frames)
}

pub fn write_frames(dir: &Path, video: &VideoTensor) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in video.frames().iter().enumerate() {
        write_png(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobManifest {
    format: String,
    version: u32,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    /// Blob file name, relative to the manifest.
    blob: String,
}

fn blob_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.f32")))
}

pub fn has_blob(dir: &Path, stem: &str) -> bool {
    blob_paths(dir, stem).0.exists()
}

/// Writes `video` as `<stem>.f32` (little-endian, frame-major, HWC) plus a
/// `<stem>.json` shape manifest.
pub fn write_blob(dir: &Path, stem: &str, video: &VideoTensor) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = blob_paths(dir, stem);
    let (h, w, c) = video.frame_shape();
    let m = BlobManifest {
        format: BLOB_FORMAT.into(),
        version: 1,
        frames: video.len(),
        height: h,
        width: w,
        channels: c,
        blob: format!("{stem}.f32"),
    };
    let mut bytes = Vec::with_capacity(video.len() * h * w * c * 4);
    for v in video.frames().iter().flat_map(|f| f.data()) {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    let text = serde_json::to_string_pretty(&m).expect("manifest serialises");
    fs::write(&manifest, text + "\n").map_err(|e| Error::io(&manifest, e))
}

pub fn read_blob(dir: &Path, stem: &str) -> Result<VideoTensor> {
    let (manifest, _) = blob_paths(dir, stem);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let m: BlobManifest = serde_json::from_str(&text).map_err(|e| Error::input(&manifest, e.to_string()))?;
    if m.format != BLOB_FORMAT || m.version != 1 {
        return Err(Error::input(&manifest, format!("unsupported blob format {} v{}", m.format, m.version)));
    }
    let blob = dir.join(&m.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let n = m.height * m.width * m.channels;
    if m.frames == 0 || bytes.len() != m.frames * n * 4 {
        return Err(Error::input(
            &blob,
            format!("expected {} frames of {n} samples, blob has {} bytes", m.frames, bytes.len()),
        ));
    }
    let frames = bytes
        .chunks_exact(n * 4)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Frame::new(m.height, m.width, m.channels, data).map_err(|e| Error::input(&blob, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    VideoTensor::new(frames)
}

/// Reads a Middlebury `.flo` file.
pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::input(path, "truncated .flo header"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(Error::input(path, "bad .flo magic"));
    }
    let (w, h) = (i32::from_le_bytes(word(4)), i32::from_le_bytes(word(8)));
    if w <= 0 || h <= 0 {
        return Err(Error::input(path, format!("bad .flo size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + w * h * 8 {
        return Err(Error::input(path, format!("expected {} bytes for {w}x{h}, got {}", 12 + w * h * 8, bytes.len())));
    }
    let data = (0..w * h)
        .map(|p| {
            let o = 12 + p * 8;
            [f32::from_le_bytes(word(o)) as f64, f32::from_le_bytes(word(o + 4)) as f64]
        })
        .collect();
    FlowField::new(h, w, data).map_err(|e| Error::input(path, e.to_string()))
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + flow.data().len() * 8);
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for [u, v] in flow.data() {
        bytes.extend_from_slice(&(*u as f32).to_le_bytes());
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

/// Reads a binary mask PNG (gray >= 128 means 1) as `(height, width, values)`.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let f = read_png(path)?;
    let (h, w, c) = f.shape();
    let values = f.data().chunks_exact(c).map(|p| if p[0] >= 0.0 { 1.0 } else { 0.0 }).collect();
    Ok((h, w, values))
}

pub fn write_mask(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::contract(format!("mask has {} values, expected {height}x{width}", values.len())));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write_png_bytes(path, width, height, png::ColorType::Grayscale, &bytes)
}

/// Reads a blur kernel: one row per line, values separated by whitespace or
/// commas; blank lines and `#` comments are skipped.
pub fn read_kernel(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::input(path, format!("line {}: '{s}': {e}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::input(path, "kernel file is empty"));
    }
    Ok(rows)
}
