//! Degradation operators `A` with pseudo-inverse and adjoint.
//!
//! Every operator is linear except [`LowLight`], which is a scalar gain on
//! `[0, 1]` intensities and therefore affine in the `[-1, 1]` frame domain.
//! Its `adjoint` is the adjoint of the linear part.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{Frame, Observation};

pub type Shape = (usize, usize, usize);

pub trait DegradationOperator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Observation shape produced from an input of shape `input`.
    fn output_shape(&self, input: Shape) -> Result<Shape>;

    /// Input (clean frame) shape that yields observations of shape `obs`.
    fn input_shape(&self, obs: Shape) -> Result<Shape>;

    fn apply(&self, x: &Frame) -> Result<Observation>;

    fn adjoint(&self, r: &Observation) -> Result<Frame>;

    fn has_pseudo_inverse(&self) -> bool {
        true
    }

    fn pseudo_inverse(&self, y: &Observation) -> Result<Frame>;

    /// `(I - A^+ A) v` for a direction `v` (the null-space component).
    fn null_space_part(&self, v: &Frame) -> Result<Frame> {
        let back = self.pseudo_inverse(&self.apply(v)?)?;
        Ok(v.sub(&back))
    }

    /// Synthesizes a degraded observation. Differs from `apply` only for
    /// stochastic degradations.
    fn degrade(&self, x: &Frame, _seed: u64) -> Result<Observation> {
        self.apply(x)
    }

    /// Known observation noise level on the `[0, 1]` intensity scale.
    fn noise_sigma(&self) -> f64 {
        0.0
    }
}

fn unsupported(what: &str) -> Error {
    Error::config(format!("{what} does not provide a pseudo-inverse"))
}

/// `n x n` average pooling per channel.
#[derive(Debug, Clone)]
pub struct SrAvgPool {
    factor: usize,
}

pub fn sr_avgpool(n: usize) -> Result<SrAvgPool> {
    if n == 0 {
        return Err(Error::config("super-resolution factor must be positive"));
    }
    Ok(SrAvgPool { factor: n })
}

impl SrAvgPool {
    pub fn factor(&self) -> usize {
        self.factor
    }

    fn replicate(&self, y: &Observation, scale: f64) -> Result<Frame> {
        let n = self.factor;
        let (h, w, c) = y.shape();
        Frame::from_fn(h * n, w * n, c, |yy, xx, ch| scale * y.get(yy / n, xx / n, ch))
    }
}

impl DegradationOperator for SrAvgPool {
    fn name(&self) -> &'static str {
        "sr-avgpool"
    }

    fn output_shape(&self, (h, w, c): Shape) -> Result<Shape> {
        let n = self.factor;
        if h % n != 0 || w % n != 0 {
            return Err(Error::config(format!("frame {h}x{w} not divisible by pooling factor {n}")));
        }
        Ok((h / n, w / n, c))
    }

    fn input_shape(&self, (h, w, c): Shape) -> Result<Shape> {
        Ok((h * self.factor, w * self.factor, c))
    }

    fn apply(&self, x: &Frame) -> Result<Observation> {
        let (oh, ow, c) = self.output_shape(x.shape())?;
        let n = self.factor;
        let inv = 1.0 / (n * n) as f64;
        Frame::from_fn(oh, ow, c, |y, xx, ch| {
            let mut s = 0.0;
            for dy in 0..n {
                for dx in 0..n {
                    s += x.get(y * n + dy, xx * n + dx, ch);
                }
            }
            s * inv
        })
    }

    fn adjoint(&self, r: &Observation) -> Result<Frame> {
        self.replicate(r, 1.0 / (self.factor * self.factor) as f64)
    }

    fn pseudo_inverse(&self, y: &Observation) -> Result<Frame> {
        self.replicate(y, 1.0)
    }
}

/// Per-pixel keep/drop mask applied to all channels.
#[derive(Debug, Clone)]
pub struct InpaintMask {
    height: usize,
    width: usize,
    mask: Vec<f64>,
}

pub fn inpaint_mask(height: usize, width: usize, mask: Vec<f64>) -> Result<InpaintMask> {
    if mask.len() != height * width {
        return Err(Error::config(format!(
            "mask has {} entries, expected {height}x{width}",
            mask.len()
        )));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::config("inpainting mask must be binary"));
    }
    Ok(InpaintMask { height, width, mask })
}

/// Random mask dropping roughly `missing` of the pixels.
pub fn random_mask(height: usize, width: usize, missing: f64, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..height * width)
        .map(|_| if rng.random::<f64>() < missing { 0.0 } else { 1.0 })
        .collect()
}

impl InpaintMask {
    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    fn multiply(&self, x: &Frame) -> Result<Frame> {
        let (h, w, c) = x.shape();
        if (h, w) != (self.height, self.width) {
            return Err(Error::contract(format!(
                "mask is {}x{}, frame is {h}x{w}",
                self.height, self.width
            )));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.mask[i / c])
            .collect();
        Frame::new(h, w, c, data)
    }
}

impl DegradationOperator for InpaintMask {
    fn name(&self) -> &'static str {
        "inpaint-mask"
    }

    fn output_shape(&self, s: Shape) -> Result<Shape> {
        if (s.0, s.1) != (self.height, self.width) {
            return Err(Error::config(format!(
                "mask is {}x{}, frames are {}x{}",
                self.height, self.width, s.0, s.1
            )));
        }
        Ok(s)
    }

    fn input_shape(&self, s: Shape) -> Result<Shape> {
        self.output_shape(s)
    }

    fn apply(&self, x: &Frame) -> Result<Observation> {
        self.multiply(x)
    }

    fn adjoint(&self, r: &Observation) -> Result<Frame> {
        self.multiply(r)
    }

    fn pseudo_inverse(&self, y: &Observation) -> Result<Frame> {
        self.multiply(y)
    }
}

/// RGB to gray by the plain channel mean.
#[derive(Debug, Clone, Default)]
pub struct Grayscale;

pub fn grayscale() -> Grayscale {
    Grayscale
}

fn replicate3(g: &Observation, scale: f64) -> Result<Frame> {
    if g.channels() != 1 {
        return Err(Error::contract(format!("expected 1-channel observation, got {}", g.channels())));
    }
    Frame::from_fn(g.height(), g.width(), 3, |y, x, _| scale * g.get(y, x, 0))
}

impl DegradationOperator for Grayscale {
    fn name(&self) -> &'static str {
        "grayscale"
    }

    fn output_shape(&self, (h, w, c): Shape) -> Result<Shape> {
        if c != 3 {
            return Err(Error::contract(format!("grayscale needs 3 channels, got {c}")));
        }
        Ok((h, w, 1))
    }

    fn input_shape(&self, (h, w, c): Shape) -> Result<Shape> {
        if c != 1 {
            return Err(Error::contract(format!("gray observations have 1 channel, got {c}")));
        }
        Ok((h, w, 3))
    }

    fn apply(&self, x: &Frame) -> Result<Observation> {
        self.output_shape(x.shape())?;
        let data = x.data().chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
        Frame::new(x.height(), x.width(), 1, data)
    }

    fn adjoint(&self, r: &Observation) -> Result<Frame> {
        replicate3(r, 1.0 / 3.0)
    }

    fn pseudo_inverse(&self, y: &Observation) -> Result<Frame> {
        replicate3(y, 1.0)
    }
}

/// 2D convolution per channel with clamp-to-edge padding.
#[derive(Debug, Clone)]
pub struct BlurConv {
    kernel: Vec<f64>,
    kh: usize,
    kw: usize,
}

pub fn blur_conv(kernel: Vec<Vec<f64>>) -> Result<BlurConv> {
    let kh = kernel.len();
    let kw = kernel.first().map_or(0, Vec::len);
    if kh == 0 || kw == 0 || kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(Error::config(format!("blur kernel must have odd dimensions, got {kh}x{kw}")));
    }
    if kernel.iter().any(|row| row.len() != kw) {
        return Err(Error::config("blur kernel rows have unequal lengths"));
    }
    let flat: Vec<f64> = kernel.into_iter().flatten().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("blur kernel has non-finite entries"));
    }
    let sum: f64 = flat.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!("blur kernel must sum to 1, sums to {sum}")));
    }
    Ok(BlurConv { kernel: flat, kh, kw })
}

/// Normalized isotropic Gaussian kernel of odd `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let r = (size / 2) as f64;
    let mut k: Vec<Vec<f64>> = (0..size)
        .map(|i| {
            (0..size)
                .map(|j| {
                    let (dy, dx) = (i as f64 - r, j as f64 - r);
                    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                })
                .collect()
        })
        .collect();
    let s: f64 = k.iter().flatten().sum();
    k.iter_mut().flatten().for_each(|v| *v /= s);
    k
}

impl BlurConv {
    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }
}

impl DegradationOperator for BlurConv {
    fn name(&self) -> &'static str {
        "blur"
    }

    fn output_shape(&self, s: Shape) -> Result<Shape> {
        Ok(s)
    }

    fn input_shape(&self, s: Shape) -> Result<Shape> {
        Ok(s)
    }

    fn apply(&self, x: &Frame) -> Result<Observation> {
        let (h, w, c) = x.shape();
        let (rh, rw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let o = (y * w + xx) * c;
                for i in 0..self.kh {
                    let sy = (y as isize - (i as isize - rh)).clamp(0, h as isize - 1) as usize;
                    for j in 0..self.kw {
                        let sx = (xx as isize - (j as isize - rw)).clamp(0, w as isize - 1) as usize;
                        let k = self.kernel[i * self.kw + j];
                        let s = (sy * w + sx) * c;
                        for ch in 0..c {
                            out[o + ch] += k * x.data()[s + ch];
                        }
                    }
                }
            }
        }
        Frame::new(h, w, c, out)
    }

    fn adjoint(&self, r: &Observation) -> Result<Frame> {
        // Scatter form: exact transpose of `apply` including the clamped taps.
        let (h, w, c) = r.shape();
        let (rh, rw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let o = (y * w + xx) * c;
                for i in 0..self.kh {
                    let sy = (y as isize - (i as isize - rh)).clamp(0, h as isize - 1) as usize;
                    for j in 0..self.kw {
                        let sx = (xx as isize - (j as isize - rw)).clamp(0, w as isize - 1) as usize;
                        let k = self.kernel[i * self.kw + j];
                        let s = (sy * w + sx) * c;
                        for ch in 0..c {
                            out[s + ch] += k * r.data()[o + ch];
                        }
                    }
                }
            }
        }
        Frame::new(h, w, c, out)
    }

    fn has_pseudo_inverse(&self) -> bool {
        false
    }

    fn pseudo_inverse(&self, _y: &Observation) -> Result<Frame> {
        Err(unsupported("deblurring"))
    }
}

/// Additive white Gaussian noise. As a constraint operator it is the identity.
#[derive(Debug, Clone)]
pub struct Awgn {
    sigma: f64,
}

pub fn awgn(sigma: f64) -> Result<Awgn> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    Ok(Awgn { sigma })
}

impl DegradationOperator for Awgn {
    fn name(&self) -> &'static str {
        "awgn"
    }

    fn output_shape(&self, s: Shape) -> Result<Shape> {
        Ok(s)
    }

    fn input_shape(&self, s: Shape) -> Result<Shape> {
        Ok(s)
    }

    fn apply(&self, x: &Frame) -> Result<Observation> {
        Ok(x.clone())
    }

    fn adjoint(&self, r: &Observation) -> Result<Frame> {
        Ok(r.clone())
    }

    fn has_pseudo_inverse(&self) -> bool {
        false
    }

    fn pseudo_inverse(&self, _y: &Observation) -> Result<Frame> {
        Err(unsupported("denoising (noisy identity observation)"))
    }

    fn degrade(&self, x: &Frame, seed: u64) -> Result<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // sigma is on the [0, 1] scale; frames span [-1, 1].
        let s = 2.0 * self.sigma;
        let data = x
            .data()
            .iter()
            .map(|&v| {
                let n: f64 = StandardNormal.sample(&mut rng);
                v + s * n
            })
            .collect();
        Frame::new(x.height(), x.width(), x.channels(), data)
    }

    fn noise_sigma(&self) -> f64 {
        self.sigma
    }
}

/// Scalar exposure gain on `[0, 1]` intensities.
#[derive(Debug, Clone)]
pub struct LowLight {
    gain: f64,
}

pub fn low_light(gain: f64) -> Result<LowLight> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::config(format!("low-light gain must be > 0, got {gain}")));
    }
    Ok(LowLight { gain })
}

impl LowLight {
    pub fn gain(&self) -> f64 {
        self.gain
    }
}

impl DegradationOperator for LowLight {
    fn name(&self) -> &'static str {
        "low-light"
    }

    fn output_shape(&self, s: Shape) -> Result<Shape> {
        Ok(s)
    }

    fn input_shape(&self, s: Shape) -> Result<Shape> {
        Ok(s)
    }

    fn apply(&self, x: &Frame) -> Result<Observation> {
        let g = self.gain;
        Ok(x.map(|v| (g * (v + 1.0) - 1.0).clamp(-1.0, 1.0)))
    }

    fn adjoint(&self, r: &Observation) -> Result<Frame> {
        Ok(r.scale(self.gain))
    }

    fn pseudo_inverse(&self, y: &Observation) -> Result<Frame> {
        let g = self.gain;
        Ok(y.map(|v| ((v + 1.0) / g - 1.0).clamp(-1.0, 1.0)))
    }

    fn null_space_part(&self, v: &Frame) -> Result<Frame> {
        Ok(Frame::zeros_like(v))
    }
}

fn intensity_mean(f: &Frame) -> f64 {
    (f.mean() + 1.0) / 2.0
}

/// Ratio of mean intensities `mean(observed) / mean(reference)`.
pub fn estimate_gain(observed: &Observation, reference: &Frame) -> Result<f64> {
    let r = intensity_mean(reference);
    if r <= 0.0 {
        return Err(Error::contract("reference frame is black; gain undefined"));
    }
    Ok(intensity_mean(observed) / r)
}

/// Gain estimate without a reference, assuming a well-exposed frame has mean
/// intensity `target_mean`.
pub fn estimate_gain_blind(observed: &Observation, target_mean: f64) -> Result<f64> {
    if target_mean <= 0.0 {
        return Err(Error::config("target mean intensity must be positive"));
    }
    Ok((intensity_mean(observed) / target_mean).clamp(1e-3, 1.0))
}

/// Restoration tasks and their degradation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sr2,
    Sr4,
    Inpaint,
    Color,
    Deblur,
    Denoise,
    Lowlight,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Sr2,
        Task::Sr4,
        Task::Inpaint,
        Task::Color,
        Task::Deblur,
        Task::Denoise,
        Task::Lowlight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sr2 => "sr2",
            Task::Sr4 => "sr4",
            Task::Inpaint => "inpaint",
            Task::Color => "color",
            Task::Deblur => "deblur",
            Task::Denoise => "denoise",
            Task::Lowlight => "lowlight",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown task '{s}'")))
    }

    /// Early stopping is used for super-resolution, inpainting and low-light only.
    pub fn early_stop_by_default(self) -> bool {
        matches!(self, Task::Sr2 | Task::Sr4 | Task::Inpaint | Task::Lowlight)
    }
}
