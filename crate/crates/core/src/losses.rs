//! Training objective: Charbonnier reconstruction, color-invariance of the
//! encodings, and edge consistency.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Function, Graph, Var};
use crate::model::ForwardTrace;
use crate::tensor::{Real, Tensor};

/// Edge detector used by the edge-consistency term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum EdgeVariant {
    #[default]
    Log,
    Sobel,
}

impl std::str::FromStr for EdgeVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "log" => Ok(EdgeVariant::Log),
            "sobel" => Ok(EdgeVariant::Sobel),
            other => Err(Error::Config(format!("unknown edge variant `{other}` (log|sobel)"))),
        }
    }
}

impl fmt::Display for EdgeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeVariant::Log => "log",
            EdgeVariant::Sobel => "sobel",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mu1: f64,
    pub mu2: f64,
    pub epsilon: f64,
    pub log_sigma: f64,
    pub edge_variant: EdgeVariant,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mu1: 0.1, mu2: 0.5, epsilon: 1e-3, log_sigma: 1.0, edge_variant: EdgeVariant::Log }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu1, self.mu2, self.epsilon, self.log_sigma].iter().all(|v| v.is_finite());
        if !finite || self.mu1 < 0.0 || self.mu2 < 0.0 {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if self.epsilon <= 0.0 || self.log_sigma <= 0.0 {
            return Err(Error::Config("epsilon and LoG sigma must be positive".into()));
        }
        Ok(())
    }
}

struct CharbonnierFn {
    n: usize,
}

impl<T: Real> Function<T> for CharbonnierFn {
    fn name(&self) -> &'static str {
        "charbonnier"
    }
    fn backward(&self, x: &[&Tensor<T>], out: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = g[0] / (out.data()[0] * T::of(self.n as f64));
        let da: Vec<T> = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| (a - b) * s).collect();
        let db = needs[1].then(|| da.iter().map(|&v| -v).collect());
        vec![needs[0].then_some(da), db]
    }
}

impl<T: Real> Graph<T> {
    /// `sqrt(mean((a - b)²) + ε²)`.
    pub fn charbonnier(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.binary_same_shape("charbonnier", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let ss = va.iter().zip(vb).fold(0.0f64, |acc, (&x, &y)| {
            let d = (x - y).f64();
            acc + d * d
        });
        let n = va.len();
        let out = Tensor::scalar(T::of((ss / n as f64 + eps * eps).sqrt()));
        self.push(out, vec![a, b], Box::new(CharbonnierFn { n }))
    }
}

/// Per-channel affine color jitter `v ↦ clamp(gain·v + offset, -1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl ColorJitter {
    pub const IDENTITY: ColorJitter = ColorJitter { gain: [1.0; 3], offset: [0.0; 3] };

    /// Gains from `U[0.7, 1.3]`, offsets from `U[-0.1, 0.1]`.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut j = Self::IDENTITY;
        for c in 0..3 {
            j.gain[c] = rng.gen_range(0.7..=1.3);
            j.offset[c] = rng.gen_range(-0.1..=0.1);
        }
        j
    }

    pub fn apply<T: Real>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let Some((_, _, 3)) = img.hwc() else {
            return Err(Error::shape("color_perturb", format!("expected (H, W, 3), got {:?}", img.shape())));
        };
        let mut out = img.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            for (c, v) in px.iter_mut().enumerate() {
                *v = T::of((self.gain[c] * v.f64() + self.offset[c]).clamp(-1.0, 1.0));
            }
        }
        Ok(out)
    }
}

/// Draws a jitter from `rng` and applies it.
pub fn color_perturb<T: Real>(img: &Tensor<T>, rng: &mut impl Rng) -> Result<Tensor<T>> {
    ColorJitter::sample(rng).apply(img)
}

/// Charbonnier distance between clean and perturbed `(shape, texture)` encodings.
pub fn loss_dr<T: Real>(g: &mut Graph<T>, clean: (Var, Var), perturbed: (Var, Var), eps: f64) -> Result<Var> {
    let s = g.charbonnier(clean.0, perturbed.0, eps)?;
    let t = g.charbonnier(clean.1, perturbed.1, eps)?;
    g.add(s, t)
}

pub const LOG_SIZE: usize = 5;

/// Sampled 5×5 Laplacian-of-Gaussian shifted to zero sum, row-major.
pub fn log_kernel(sigma: f64) -> [f64; LOG_SIZE * LOG_SIZE] {
    let s2 = sigma * sigma;
    let mut k = [0.0; LOG_SIZE * LOG_SIZE];
    for (i, v) in k.iter_mut().enumerate() {
        let (y, x) = ((i / LOG_SIZE) as f64 - 2.0, (i % LOG_SIZE) as f64 - 2.0);
        let r = (x * x + y * y) / (2.0 * s2);
        *v = -(1.0 - r) * (-r).exp() / (std::f64::consts::PI * s2 * s2);
    }
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    k
}

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Reflect-101 source index of a padded coordinate; requires `|i| < n` past either edge.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

/// Gather table: for output pixel `p` and tap `t`, the flat pixel index read.
fn stencil_sources(h: usize, w: usize, k: usize) -> Vec<usize> {
    let r = (k / 2) as isize;
    let mut src = Vec::with_capacity(h * w * k * k);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -r..=r {
                for dx in -r..=r {
                    src.push(reflect(y + dy, h) * w + reflect(x + dx, w));
                }
            }
        }
    }
    src
}

/// `y_p = Σ_t k_t (x_{src(p,t)} - x_p)` per channel.
struct StencilDiffFn {
    taps: Vec<f64>,
    sources: Vec<usize>,
    channels: usize,
}

impl<T: Real> Function<T> for StencilDiffFn {
    fn name(&self) -> &'static str {
        "stencil_diff"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let c = self.channels;
        let total = T::of(self.taps.iter().sum::<f64>());
        let mut dx = vec![T::zero(); x[0].numel()];
        for (p, srcs) in self.sources.chunks_exact(self.taps.len()).enumerate() {
            let gp = &g[p * c..(p + 1) * c];
            for (&q, &t) in srcs.iter().zip(&self.taps) {
                let t = T::of(t);
                for ch in 0..c {
                    dx[q * c + ch] = dx[q * c + ch] + t * gp[ch];
                }
            }
            for ch in 0..c {
                dx[p * c + ch] = dx[p * c + ch] - total * gp[ch];
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Real> Graph<T> {
    /// Per-channel `k×k` stencil with reflect padding, evaluated as weighted
    /// differences from the centre pixel. Equals the plain correlation for
    /// zero-sum taps and is exactly zero on constant images.
    pub fn stencil_diff(&mut self, x: Var, taps: &[f64], k: usize) -> Result<Var> {
        let [h, w, c] = self.shape(x)[..] else {
            return Err(Error::shape("stencil_diff", format!("expected (H, W, C), got {:?}", self.shape(x))));
        };
        if k % 2 == 0 || taps.len() != k * k {
            return Err(Error::arg("stencil_diff", format!("{} taps for a {k}×{k} stencil", taps.len())));
        }
        if h <= k / 2 || w <= k / 2 {
            return Err(Error::shape("stencil_diff", format!("{h}×{w} too small for reflect padding {}", k / 2)));
        }
        let sources = stencil_sources(h, w, k);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for (p, srcs) in sources.chunks_exact(k * k).enumerate() {
            for (&q, &t) in srcs.iter().zip(taps) {
                let t = T::of(t);
                for ch in 0..c {
                    out[p * c + ch] = out[p * c + ch] + t * (xs[q * c + ch] - xs[p * c + ch]);
                }
            }
        }
        let out = Tensor::from_vec(&[h, w, c], out)?;
        self.push(out, vec![x], Box::new(StencilDiffFn { taps: taps.to_vec(), sources, channels: c }))
    }
}

/// Per-channel LoG response with reflect padding.
pub fn log_edge<T: Real>(g: &mut Graph<T>, img: Var, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::arg("log_edge", format!("sigma must be positive, got {sigma}")));
    }
    g.stencil_diff(img, &log_kernel(sigma), LOG_SIZE)
}

/// Horizontal then vertical Sobel responses, concatenated along channels.
pub fn sobel_edge<T: Real>(g: &mut Graph<T>, img: Var) -> Result<Var> {
    let gx = g.stencil_diff(img, &SOBEL_X, 3)?;
    let gy = g.stencil_diff(img, &SOBEL_Y, 3)?;
    g.concat_channels(&[gx, gy])
}

pub fn edge_map<T: Real>(g: &mut Graph<T>, img: Var, w: &LossWeights) -> Result<Var> {
    match w.edge_variant {
        EdgeVariant::Log => log_edge(g, img, w.log_sigma),
        EdgeVariant::Sobel => sobel_edge(g, img),
    }
}

pub fn loss_edge<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, w: &LossWeights) -> Result<Var> {
    g.binary_same_shape("loss_edge", pred, gt)?;
    let ep = edge_map(g, pred, w)?;
    let eg = edge_map(g, gt, w)?;
    g.charbonnier(ep, eg, w.epsilon)
}

/// Graph handles of the weighted objective and its unweighted terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub mag: Var,
    pub dr: Var,
    pub edge: Var,
}

impl LossTerms {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossRecord {
        let v = |x: Var| g.value(x).data()[0].f64();
        LossRecord { total: v(self.total), mag: v(self.mag), dr: v(self.dr), edge: v(self.edge) }
    }
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub mag: f64,
    pub dr: f64,
    pub edge: f64,
}

impl LossRecord {
    /// `iter,total,l_mag,l_dr,l_edge`.
    pub fn log_line(&self, iter: usize) -> String {
        format!("{iter},{:.9e},{:.9e},{:.9e},{:.9e}", self.total, self.mag, self.dr, self.edge)
    }

    pub fn parse_log_line(line: &str) -> Result<(usize, LossRecord)> {
        let bad = || Error::Dataset(format!("malformed loss log line `{line}`"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let iter = f[0].parse().map_err(|_| bad())?;
        Ok((iter, LossRecord { total: num(f[1])?, mag: num(f[2])?, dr: num(f[3])?, edge: num(f[4])? }))
    }

    pub(crate) fn accumulate(&mut self, other: &LossRecord, scale: f64) {
        self.total += scale * other.total;
        self.mag += scale * other.mag;
        self.dr += scale * other.dr;
        self.edge += scale * other.edge;
    }
}

/// `L_mag + μ1·L_dr + μ2·L_edge`. `perturbed` holds the `(shape, texture)`
/// encodings of the color-jittered query frame.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    trace: &ForwardTrace,
    perturbed: (Var, Var),
    gt: Var,
    w: &LossWeights,
) -> Result<LossTerms> {
    w.validate()?;
    let mag = g.charbonnier(trace.output, gt, w.epsilon)?;
    let dr = loss_dr(g, (trace.shape_query, trace.texture_query), perturbed, w.epsilon)?;
    let edge = loss_edge(g, trace.output, gt, w)?;
    let a = g.scale(dr, T::of(w.mu1))?;
    let b = g.scale(edge, T::of(w.mu2))?;
    let total = g.add(mag, a)?;
    let total = g.add(total, b)?;
    Ok(LossTerms { total, mag, dr, edge })
}
