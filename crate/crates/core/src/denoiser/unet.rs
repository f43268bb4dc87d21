//! A small U-Net noise predictor with inflated (1x3x3) convolutions, a
//! sinusoidal step embedding and one attention layer at the bottleneck.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionLayer, Matrix, PrevFrameContext};
use super::weights::{load_weights, ParamStore};
use super::{EpsilonModel, Prediction};
use crate::error::{Error, Result};
use crate::video::Frame;

/// Architecture hyper-parameters; fixes every tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetArch {
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub attention: bool,
    pub head_dim: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 8,
            levels: 2,
            attention: true,
            head_dim: 8,
        }
    }
}

impl UNetArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("U-Net channel counts must be positive"));
        }
        if self.head_dim == 0 {
            return Err(Error::config("attention head dimension must be positive"));
        }
        if self.levels > 6 {
            return Err(Error::config(format!("at most 6 U-Net levels supported, got {}", self.levels)));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn embed_dim(&self) -> usize {
        2 * self.base_channels
    }

    /// Names, shapes and initialisation scales of all parameters, in file order.
    pub(crate) fn layout(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let e = self.embed_dim();
        let conv = |out: &mut Vec<ParamSpec>, name: &str, o: usize, i: usize, gain: f64| {
            out.push(ParamSpec::new(format!("{name}.weight"), vec![o, i, 1, 3, 3], gain / ((9 * i) as f64).sqrt()));
            out.push(ParamSpec::new(format!("{name}.bias"), vec![o], 0.0));
        };
        let res = |out: &mut Vec<ParamSpec>, name: &str, c: usize| {
            conv(out, &format!("{name}.conv1"), c, c, 1.0);
            out.push(ParamSpec::new(format!("{name}.temb"), vec![c, e], 1.0 / (e as f64).sqrt()));
            conv(out, &format!("{name}.conv2"), c, c, 0.1);
        };
        conv(&mut out, "inc", self.base_channels, self.in_channels, 1.0);
        for l in 0..self.levels {
            res(&mut out, &format!("down{l}.res"), self.channels(l));
            conv(&mut out, &format!("down{l}.proj"), self.channels(l + 1), self.channels(l), 1.0);
        }
        let c = self.channels(self.levels);
        res(&mut out, "mid.res", c);
        if self.attention {
            let d = self.head_dim;
            out.push(ParamSpec::new("mid.attn.wq".into(), vec![d, c], 1.0 / (c as f64).sqrt()));
            out.push(ParamSpec::new("mid.attn.wk".into(), vec![d, c], 1.0 / (c as f64).sqrt()));
            out.push(ParamSpec::new("mid.attn.wv".into(), vec![c, c], 0.5 / (c as f64).sqrt()));
        }
        for l in (0..self.levels).rev() {
            let c = self.channels(l);
            conv(&mut out, &format!("up{l}.proj"), c, self.channels(l + 1), 1.0);
            conv(&mut out, &format!("up{l}.merge"), c, 2 * c, 1.0);
            res(&mut out, &format!("up{l}.res"), c);
        }
        conv(&mut out, "out", self.in_channels, self.base_channels, 0.5);
        out
    }

    /// Seeded parameters, rounded to `f32` so they survive a weight-file round trip.
    pub fn seeded_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for p in self.layout() {
            let n: usize = p.shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (p.std * z) as f32 as f64
                })
                .collect();
            store.push(p.name, p.shape, data);
        }
        store
    }
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub std: f64,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, std: f64) -> Self {
        Self { name, shape, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Seed(u64),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyUNetSpec {
    pub arch: UNetArch,
    pub weights: WeightSource,
}

/// Channel-major feature map `(c, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_frame(f: &Frame) -> Self {
        let (h, w, c) = f.shape();
        let mut data = vec![0.0; c * h * w];
        for (i, px) in f.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * h * w + i] = v;
            }
        }
        Self { c, h, w, data }
    }

    fn to_frame(&self) -> Result<Frame> {
        let hw = self.h * self.w;
        Frame::from_fn(self.h, self.w, self.c, |y, x, ch| self.data[ch * hw + y * self.w + x])
    }

    fn plane(&self, ch: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[ch * hw..(ch + 1) * hw]
    }

    fn map(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    fn add(mut self, other: &Features) -> Self {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        self
    }

    fn avgpool2(&self) -> Self {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut out = Features::zeros(self.c, h, w);
        for ch in 0..self.c {
            let p = self.plane(ch);
            for y in 0..h {
                for x in 0..w {
                    let s = p[2 * y * self.w + 2 * x]
                        + p[2 * y * self.w + 2 * x + 1]
                        + p[(2 * y + 1) * self.w + 2 * x]
                        + p[(2 * y + 1) * self.w + 2 * x + 1];
                    out.data[ch * h * w + y * w + x] = 0.25 * s;
                }
            }
        }
        out
    }

    fn upsample2(&self) -> Self {
        let (h, w) = (self.h * 2, self.w * 2);
        let mut out = Features::zeros(self.c, h, w);
        for ch in 0..self.c {
            let p = self.plane(ch);
            for y in 0..h {
                for x in 0..w {
                    out.data[ch * h * w + y * w + x] = p[(y / 2) * self.w + x / 2];
                }
            }
        }
        out
    }

    fn concat(mut self, other: &Features) -> Self {
        self.data.extend_from_slice(&other.data);
        self.c += other.c;
        self
    }

    /// Positions-by-channels view used by attention.
    fn to_matrix(&self) -> Matrix {
        let hw = self.h * self.w;
        let mut data = Vec::with_capacity(hw * self.c);
        for p in 0..hw {
            for ch in 0..self.c {
                data.push(self.data[ch * hw + p]);
            }
        }
        Matrix::new(hw, self.c, data).expect("consistent matrix shape")
    }

    fn add_matrix(mut self, m: &Matrix) -> Self {
        let hw = self.h * self.w;
        for p in 0..hw {
            for ch in 0..self.c {
                self.data[ch * hw + p] += m.get(p, ch);
            }
        }
        self
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// 2D convolution with a 3x3 kernel, weights `(out, in, 3, 3)`, zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_c: usize,
    pub in_c: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Spatio-temporal convolution with kernel `kt x 3 x 3`, weights
/// `(out, in, kt, 3, 3)`, zero padding in time and space.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub out_c: usize,
    pub in_c: usize,
    pub kt: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3d {
    /// The `1 x 3 x 3` convolution with the same spatial kernel.
    pub fn inflate(c: &Conv2d) -> Self {
        Self {
            out_c: c.out_c,
            in_c: c.in_c,
            kt: 1,
            weight: c.weight.clone(),
            bias: c.bias.clone(),
        }
    }

    fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let (shape, weight) = store.get(&format!("{name}.weight"))?;
        if shape.len() != 5 || shape[3] != 3 || shape[4] != 3 {
            return Err(Error::config(format!("{name}.weight has shape {shape:?}, expected (o, i, t, 3, 3)")));
        }
        let (bshape, bias) = store.get(&format!("{name}.bias"))?;
        if bshape != [shape[0]] {
            return Err(Error::config(format!("{name}.bias has shape {bshape:?}, expected [{}]", shape[0])));
        }
        Ok(Self {
            out_c: shape[0],
            in_c: shape[1],
            kt: shape[2],
            weight: weight.to_vec(),
            bias: bias.to_vec(),
        })
    }
}

/// Adds the 3x3 correlation of `input` with `kernel` (`in, 3, 3`) into `acc`.
fn accumulate_3x3(input: &Features, kernel: &[f64], acc: &mut [f64]) {
    let (h, w) = (input.h, input.w);
    for ic in 0..input.c {
        let plane = input.plane(ic);
        for ky in 0..3 {
            for kx in 0..3 {
                let k = kernel[ic * 9 + ky * 3 + kx];
                if k == 0.0 {
                    continue;
                }
                let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let src = &plane[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                    let dst = &mut acc[y * w + x0..y * w + x1];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += k * s;
                    }
                }
            }
        }
    }
}

pub fn conv2d(input: &Features, conv: &Conv2d) -> Features {
    assert_eq!(input.c, conv.in_c, "conv2d input channels");
    let hw = input.h * input.w;
    let planes: Vec<Vec<f64>> = (0..conv.out_c)
        .into_par_iter()
        .map(|oc| {
            let mut acc = vec![conv.bias[oc]; hw];
            accumulate_3x3(input, &conv.weight[oc * conv.in_c * 9..(oc + 1) * conv.in_c * 9], &mut acc);
            acc
        })
        .collect();
    Features {
        c: conv.out_c,
        h: input.h,
        w: input.w,
        data: planes.concat(),
    }
}

/// Applies a `kt x 3 x 3` convolution to a clip of frames.
pub fn conv3d(clip: &[Features], conv: &Conv3d) -> Vec<Features> {
    let half = (conv.kt / 2) as isize;
    (0..clip.len())
        .map(|f| {
            let (h, w) = (clip[f].h, clip[f].w);
            let planes: Vec<Vec<f64>> = (0..conv.out_c)
                .into_par_iter()
                .map(|oc| {
                    let mut acc = vec![conv.bias[oc]; h * w];
                    for tap in 0..conv.kt {
                        let src = f as isize + tap as isize - half;
                        if src < 0 || src >= clip.len() as isize {
                            continue;
                        }
                        let input = &clip[src as usize];
                        assert_eq!(input.c, conv.in_c, "conv3d input channels");
                        let start = (oc * conv.in_c * conv.kt) * 9;
                        // Kernel laid out (in, kt, 3, 3) per output channel.
                        let kernel: Vec<f64> = (0..conv.in_c)
                            .flat_map(|ic| {
                                let off = start + (ic * conv.kt + tap) * 9;
                                conv.weight[off..off + 9].iter().copied()
                            })
                            .collect();
                        accumulate_3x3(input, &kernel, &mut acc);
                    }
                    acc
                })
                .collect();
            Features {
                c: conv.out_c,
                h,
                w,
                data: planes.concat(),
            }
        })
        .collect()
}

fn conv_frame(input: &Features, conv: &Conv3d) -> Features {
    conv3d(std::slice::from_ref(input), conv).pop().expect("one frame in, one out")
}

struct ResBlock {
    conv1: Conv3d,
    temb: Matrix,
    conv2: Conv3d,
}

impl ResBlock {
    fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let (shape, data) = store.get(&format!("{name}.temb"))?;
        Ok(Self {
            conv1: Conv3d::from_store(store, &format!("{name}.conv1"))?,
            temb: Matrix::new(shape[0], shape.get(1).copied().unwrap_or(0), data.to_vec())?,
            conv2: Conv3d::from_store(store, &format!("{name}.conv2"))?,
        })
    }

    fn forward(&self, x: &Features, emb: &Matrix) -> Result<Features> {
        let mut h = conv_frame(&x.clone().map(silu), &self.conv1);
        let shift = emb.mul_transposed(&self.temb)?;
        let hw = h.h * h.w;
        for ch in 0..h.c {
            let s = shift.get(0, ch);
            h.data[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += s);
        }
        Ok(conv_frame(&h.map(silu), &self.conv2).add(x))
    }
}

pub struct TinyUNet {
    arch: UNetArch,
    inc: Conv3d,
    down: Vec<(ResBlock, Conv3d)>,
    mid: ResBlock,
    attn: Option<AttentionLayer>,
    up: Vec<(Conv3d, Conv3d, ResBlock)>,
    out: Conv3d,
}

impl TinyUNet {
    pub fn from_spec(spec: &TinyUNetSpec) -> Result<Self> {
        match &spec.weights {
            WeightSource::Seed(seed) => Self::from_params(spec.arch, &spec.arch.seeded_params(*seed)),
            WeightSource::File(path) => {
                let (arch, store) = load_weights(path)?;
                if arch != spec.arch {
                    return Err(Error::config(format!(
                        "weight file {} describes {arch:?}, expected {:?}",
                        path.display(),
                        spec.arch
                    )));
                }
                Self::from_params(arch, &store)
            }
        }
    }

    pub fn from_params(arch: UNetArch, store: &ParamStore) -> Result<Self> {
        arch.validate()?;
        store.check_layout(&arch.layout())?;
        let down = (0..arch.levels)
            .map(|l| {
                Ok((
                    ResBlock::from_store(store, &format!("down{l}.res"))?,
                    Conv3d::from_store(store, &format!("down{l}.proj"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let attn = if arch.attention {
            let m = |n: &str| -> Result<Matrix> {
                let (shape, data) = store.get(n)?;
                Matrix::new(shape[0], shape[1], data.to_vec())
            };
            Some(AttentionLayer::new(m("mid.attn.wq")?, m("mid.attn.wk")?, m("mid.attn.wv")?)?)
        } else {
            None
        };
        let up = (0..arch.levels)
            .rev()
            .map(|l| {
                Ok((
                    Conv3d::from_store(store, &format!("up{l}.proj"))?,
                    Conv3d::from_store(store, &format!("up{l}.merge"))?,
                    ResBlock::from_store(store, &format!("up{l}.res"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch,
            inc: Conv3d::from_store(store, "inc")?,
            down,
            mid: ResBlock::from_store(store, "mid.res")?,
            attn,
            up,
            out: Conv3d::from_store(store, "out")?,
        })
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    /// Sinusoidal embedding of step `t`: `[sin(t f_i), cos(t f_i)]`.
    pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
        let half = dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        let mut out: Vec<f64> = freqs.iter().map(|f| (t as f64 * f).sin()).collect();
        out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
        out
    }

    fn check_input(&self, x: &Frame) -> Result<()> {
        let m = 1usize << self.arch.levels;
        if !x.height().is_multiple_of(m) || !x.width().is_multiple_of(m) {
            return Err(Error::config(format!(
                "U-Net with {} levels needs sides divisible by {m}, got {}x{}",
                self.arch.levels,
                x.height(),
                x.width()
            )));
        }
        if x.channels() != self.arch.in_channels {
            return Err(Error::contract(format!(
                "U-Net expects {} channels, got {}",
                self.arch.in_channels,
                x.channels()
            )));
        }
        Ok(())
    }

    /// Noise estimate and this frame's bottleneck keys/values at step `t`.
    pub fn forward(&self, x: &Frame, t: usize, ctx: Option<&PrevFrameContext>) -> Result<(Frame, Option<PrevFrameContext>)> {
        self.check_input(x)?;
        let layers = usize::from(self.attn.is_some());
        if let Some(c) = ctx {
            c.check(t, layers)?;
        }
        let emb = Matrix::new(1, self.arch.embed_dim(), Self::step_embedding(t, self.arch.embed_dim()))?;

        let mut h = conv_frame(&Features::from_frame(x), &self.inc);
        let mut skips = Vec::with_capacity(self.arch.levels);
        for (res, proj) in &self.down {
            h = res.forward(&h, &emb)?;
            skips.push(h.clone());
            h = conv_frame(&h.avgpool2(), proj);
        }
        h = self.mid.forward(&h, &emb)?;

        let mut new_ctx = None;
        if let Some(layer) = &self.attn {
            let v = h.to_matrix();
            let own = layer.key_value(&v)?;
            let kv = ctx.map(|c| &c.layers[0]).unwrap_or(&own);
            let a = layer.cross_prev_frame_attention(&v, kv)?;
            h = h.add_matrix(&a);
            new_ctx = Some(PrevFrameContext { t, layers: vec![own] });
        }

        for (proj, merge, res) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = conv_frame(&h.upsample2(), proj).concat(&skip);
            h = res.forward(&conv_frame(&h, merge), &emb)?;
        }
        let eps = conv_frame(&h.map(silu), &self.out).to_frame()?;
        Ok((eps, new_ctx))
    }
}

impl EpsilonModel for TinyUNet {
    fn name(&self) -> &'static str {
        "unet"
    }

    fn predict(&self, x_t: &Frame, t: usize, _frame_index: usize, ctx: Option<&PrevFrameContext>) -> Result<Prediction> {
        let (eps, context) = self.forward(x_t, t, ctx)?;
        Ok(Prediction { eps, context })
    }

    fn attends(&self) -> bool {
        self.attn.is_some()
    }
}
