//! Frame and video value types, 8-bit conversion, and synthetic test videos.
//!
//! Pixel samples are `f64` in `[-1, 1]`, stored row-major with interleaved
//! channels (`(y * width + x) * channels + c`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single image. Samples are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Observations share the frame layout but may differ in shape or range.
pub type Observation = Frame;

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::contract(format!(
                "frame dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::contract(format!(
                "frame data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(value.is_finite());
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn zeros_like(other: &Frame) -> Self {
        Self::zeros(other.height, other.width, other.channels)
    }

    /// Builds a frame by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn ensure_same_shape(&self, other: &Frame, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Applies `f` samplewise. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Frame {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Frame::new(self.height, self.width, self.channels, data).expect("map produced non-finite")
    }

    /// Combines two same-shaped frames samplewise.
    pub fn zip_map(&self, other: &Frame, f: impl Fn(f64, f64) -> f64) -> Frame {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Frame::new(self.height, self.width, self.channels, data)
            .expect("zip_map produced non-finite")
    }

    pub fn add(&self, other: &Frame) -> Frame {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Frame) -> Frame {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Frame {
        self.map(|v| k * v)
    }

    pub fn clamp_unit(&self) -> Frame {
        self.map(|v| v.clamp(-1.0, 1.0))
    }

    pub fn dot(&self, other: &Frame) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Frame) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Extracts one channel as a single-channel frame.
    pub fn channel(&self, c: usize) -> Frame {
        assert!(c < self.channels);
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Frame {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Converts 8-bit samples `v` to `v / 127.5 - 1`.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| to_unit_range(b)).collect();
        Self::new(height, width, channels, data)
    }

    /// Inverse of [`Frame::from_u8`], rounding half away from zero and clamping.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| from_unit_range(v)).collect()
    }
}

#[inline]
pub fn to_unit_range(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

#[inline]
pub fn from_unit_range(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// A non-empty sequence of equally shaped frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: Vec<Frame>,
}

impl VideoTensor {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::contract("video must contain at least one frame"))?;
        let shape = first.shape();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != shape) {
            return Err(Error::contract(format!(
                "frame {i} has shape {:?}, expected {shape:?}",
                f.shape()
            )));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.frames[0].shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    Static,
    TranslatingTexture,
    MovingSquare,
    BrightnessRamp,
}

/// Parameters of a synthetic test video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub kind: FixtureKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frame_count: usize,
    /// Per-frame displacement `(dx, dy)` of the moving content, in pixels.
    pub motion: (f64, f64),
    pub seed: u64,
}

impl FixtureSpec {
    pub fn new(kind: FixtureKind, size: usize, frame_count: usize, motion: (f64, f64), seed: u64) -> Self {
        Self {
            kind,
            height: size,
            width: size,
            channels: 3,
            frame_count,
            motion,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::config(format!(
                "fixture must be at least 4x4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!("fixture channels must be 1 or 3, got {}", self.channels)));
        }
        if self.frame_count < 2 {
            return Err(Error::config("fixture needs at least 2 frames"));
        }
        let limit = self.height.min(self.width) as f64 / 4.0;
        let (dx, dy) = self.motion;
        if !(dx.abs() < limit && dy.abs() < limit) {
            return Err(Error::config(format!(
                "fixture motion ({dx}, {dy}) must stay below {limit} px per frame"
            )));
        }
        Ok(())
    }

    /// Exact flow of a translating-texture fixture: each pixel of frame i maps
    /// to `p - motion` in frame i-1.
    pub fn ground_truth_flow(&self) -> (f64, f64) {
        (-self.motion.0, -self.motion.1)
    }
}

/// Band-limited texture made from a handful of random plane waves. Bounded by 0.9.
struct WaveTexture {
    waves: Vec<([f64; 2], [f64; 3], f64)>,
    norm: f64,
}

impl WaveTexture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        use std::f64::consts::{PI, TAU};
        const WAVES: usize = 8;
        let offset = rng.random_range(0.0..PI);
        let waves: Vec<_> = (0..WAVES)
            .map(|i| {
                let wavelength = rng.random_range(6.0..16.0);
                // Evenly spread orientations keep the texture two-dimensional everywhere.
                let angle = offset + (i as f64 + rng.random_range(-0.3..0.3)) * PI / WAVES as f64;
                let k = TAU / wavelength;
                // Nearby per-channel phases keep luminance contrast high.
                let base = rng.random_range(0.0..TAU);
                let phases = [
                    base,
                    base + rng.random_range(-0.6..0.6),
                    base + rng.random_range(-0.6..0.6),
                ];
                let amp = rng.random_range(0.5..1.0);
                ([k * angle.cos(), k * angle.sin()], phases, amp)
            })
            .collect();
        let rms = (waves.iter().map(|w| w.2 * w.2).sum::<f64>() / 2.0).sqrt();
        Self { waves, norm: 2.0 * rms }
    }

    fn eval(&self, y: f64, x: f64, c: usize) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|([kx, ky], ph, a)| a * (kx * x + ky * y + ph[c]).sin())
            .sum();
        // Smooth saturation keeps samples inside (-0.95, 0.95).
        0.95 * (s / self.norm).tanh()
    }
}

/// Generates a deterministic synthetic video.
pub fn make_fixture(spec: &FixtureSpec) -> Result<VideoTensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = WaveTexture::new(&mut rng);
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let (dx, dy) = spec.motion;
    let n = spec.frame_count;

    let mut frames = Vec::with_capacity(n);
    match spec.kind {
        FixtureKind::Static => {
            let f = Frame::from_fn(h, w, ch, |y, x, c| background.eval(y as f64, x as f64, c))?;
            frames.resize(n, f);
        }
        FixtureKind::TranslatingTexture => {
            let (maxx, maxy) = ((w - 1) as f64, (h - 1) as f64);
            for i in 0..n {
                let (ox, oy) = (i as f64 * dx, i as f64 * dy);
                frames.push(Frame::from_fn(h, w, ch, |y, x, c| {
                    let sx = (x as f64 - ox).clamp(0.0, maxx);
                    let sy = (y as f64 - oy).clamp(0.0, maxy);
                    background.eval(sy, sx, c)
                })?);
            }
        }
        FixtureKind::MovingSquare => {
            let square = WaveTexture::new(&mut rng);
            let side = (h.min(w) / 3).max(2) as f64;
            let (sy0, sx0) = ((h as f64 - side) / 2.0 - (n - 1) as f64 * dy / 2.0, (w as f64 - side) / 2.0 - (n - 1) as f64 * dx / 2.0);
            for i in 0..n {
                let (oy, ox) = ((sy0 + i as f64 * dy).round(), (sx0 + i as f64 * dx).round());
                frames.push(Frame::from_fn(h, w, ch, |y, x, c| {
                    let (ly, lx) = (y as f64 - oy, x as f64 - ox);
                    if (0.0..side).contains(&ly) && (0.0..side).contains(&lx) {
                        square.eval(ly, lx, c)
                    } else {
                        background.eval(y as f64, x as f64, c)
                    }
                })?);
            }
        }
        FixtureKind::BrightnessRamp => {
            for i in 0..n {
                // Intensity gain ramps linearly from 1.0 down to 0.5.
                let gain = 1.0 - 0.5 * i as f64 / (n - 1) as f64;
                frames.push(Frame::from_fn(h, w, ch, |y, x, c| {
                    let v = background.eval(y as f64, x as f64, c);
                    gain * (v + 1.0) - 1.0
                })?);
            }
        }
    }
    VideoTensor::new(frames)
}

/// Per-pixel occupancy of the moving square in frame `i` (true where the square is).
pub fn moving_square_coverage(spec: &FixtureSpec, i: usize) -> Vec<bool> {
    let (h, w) = (spec.height, spec.width);
    let n = spec.frame_count;
    let (dx, dy) = spec.motion;
    let side = (h.min(w) / 3).max(2) as f64;
    let (sy0, sx0) = ((h as f64 - side) / 2.0 - (n - 1) as f64 * dy / 2.0, (w as f64 - side) / 2.0 - (n - 1) as f64 * dx / 2.0);
    let (oy, ox) = ((sy0 + i as f64 * dy).round(), (sx0 + i as f64 * dx).round());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (ly, lx) = (y as f64 - oy, x as f64 - ox);
            out.push((0.0..side).contains(&ly) && (0.0..side).contains(&lx));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_fixture_frames_identical() {
        let v = make_fixture(&FixtureSpec::new(FixtureKind::Static, 32, 4, (0.0, 0.0), 7)).unwrap();
        assert_eq!(v.len(), 4);
        for f in v.frames() {
            assert_eq!(f.data(), v.frames()[0].data());
        }
    }

    #[test]
    fn translating_fixture_is_shifted_copy() {
        let v = make_fixture(&FixtureSpec::new(FixtureKind::TranslatingTexture, 64, 3, (2.0, 0.0), 1)).unwrap();
        let (f0, f1) = (&v.frames()[0], &v.frames()[1]);
        for y in 0..64 {
            for x in 2..64 {
                for c in 0..3 {
                    assert_eq!(f1.get(y, x, c), f0.get(y, x - 2, c));
                }
            }
        }
    }

    #[test]
    fn moving_square_is_deterministic() {
        let spec = FixtureSpec::new(FixtureKind::MovingSquare, 64, 8, (1.0, 1.0), 3);
        assert_eq!(make_fixture(&spec).unwrap(), make_fixture(&spec).unwrap());
    }

    #[test]
    fn fixture_rejects_bad_specs() {
        let mut spec = FixtureSpec::new(FixtureKind::Static, 32, 1, (0.0, 0.0), 0);
        assert!(matches!(make_fixture(&spec), Err(Error::Config(_))));
        spec.frame_count = 3;
        spec.motion = (8.0, 0.0);
        assert!(matches!(make_fixture(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn brightness_ramp_darkens() {
        let v = make_fixture(&FixtureSpec::new(FixtureKind::BrightnessRamp, 16, 3, (0.0, 0.0), 2)).unwrap();
        assert!(v.frames()[2].mean() < v.frames()[0].mean());
    }

    #[test]
    fn unit_range_endpoints() {
        assert_eq!(to_unit_range(0), -1.0);
        assert_eq!(to_unit_range(255), 1.0);
        assert!((to_unit_range(128) - (128.0 / 127.5 - 1.0)).abs() < 1e-15);
        assert!((to_unit_range(128) - 0.003_921_568_627_451).abs() < 1e-12);
    }

    #[test]
    fn unit_range_roundtrip_exhaustive() {
        for v in 0..=255u8 {
            assert_eq!(from_unit_range(to_unit_range(v)), v);
        }
        assert_eq!(from_unit_range(2.0), 255);
        assert_eq!(from_unit_range(-3.0), 0);
    }

    #[test]
    fn frame_rejects_non_finite() {
        assert!(Frame::new(1, 2, 1, vec![0.0, f64::NAN]).is_err());
        assert!(Frame::new(1, 2, 1, vec![0.0]).is_err());
    }

    #[test]
    fn video_rejects_mixed_shapes() {
        assert!(VideoTensor::new(vec![Frame::zeros(2, 2, 1), Frame::zeros(2, 3, 1)]).is_err());
        assert!(VideoTensor::new(vec![]).is_err());
    }
}
