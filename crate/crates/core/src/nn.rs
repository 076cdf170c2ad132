//! Neural layers recorded on a [`Graph`]: convolutions, channel layer
//! norm, GELU, row softmax, pixel shuffle and channel slicing/concatenation.
//!
//! Feature maps are `(H, W, C)`. Convolution weights are `(k, k, c_in, c_out)`
//! (depth-wise: `(k, k, 1, C)`) and use the cross-correlation convention.

use crate::error::{Error, Result};
use crate::graph::{Function, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Border handling for convolutions, always `⌊k/2⌋` wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Mirror without repeating the edge sample (`x[-1] = x[1]`).
    Reflect,
    Zero,
}

impl Padding {
    /// Source index for a padded coordinate, `None` for zero padding.
    #[inline]
    fn source(self, i: isize, n: usize) -> Option<usize> {
        let n = n as isize;
        if (0..n).contains(&i) {
            return Some(i as usize);
        }
        match self {
            Padding::Zero => None,
            Padding::Reflect => {
                let r = if i < 0 { -i } else { 2 * (n - 1) - i };
                Some(r as usize)
            }
        }
    }
}

fn expect_hwc(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize)> {
    match *t {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(op, format!("expected (H, W, C), got {t:?}"))),
    }
}

fn check_kernel(op: &'static str, k: usize) -> Result<()> {
    if k % 2 == 0 || !matches!(k, 1 | 3 | 5) {
        return Err(Error::arg(op, format!("kernel size must be 1, 3 or 5, got {k}")));
    }
    Ok(())
}

fn check_padding(op: &'static str, pad: Padding, k: usize, h: usize, w: usize) -> Result<()> {
    let p = k / 2;
    if pad == Padding::Reflect && (p >= h || p >= w) {
        return Err(Error::shape(op, format!("reflect padding {p} needs extents > {p}, got {h}×{w}")));
    }
    if h + 2 * p < k || w + 2 * p < k {
        return Err(Error::shape(op, format!("input {h}×{w} smaller than kernel {k}")));
    }
    Ok(())
}

// --- dense convolution ---------------------------------------------------

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: Padding,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// For every output pixel and kernel tap, the input pixel offset (or `None`).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let p = (self.k / 2) as isize;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = oy * self.wo + ox;
                for ky in 0..self.k {
                    let sy = self.pad.source((oy * self.stride + ky) as isize - p, self.h);
                    for kx in 0..self.k {
                        let sx = self.pad.source((ox * self.stride + kx) as isize - p, self.w);
                        let src = sy.zip(sx).map(|(y, x)| (y * self.w + x) * self.cin);
                        f(row, (ky * self.k + kx) * self.cin, src);
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut cols = vec![T::zero(); self.ho * self.wo * patch];
        self.for_each_tap(|row, off, src| {
            if let Some(s) = src {
                let dst = row * patch + off;
                cols[dst..dst + self.cin].copy_from_slice(&x[s..s + self.cin]);
            }
        });
        cols
    }
}

struct Conv2dFn(ConvGeom);

impl<T: Real> Function<T> for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let geo = self.0;
        let (rows, patch, cout) = (geo.ho * geo.wo, geo.patch(), geo.cout);
        let dx = needs[0].then(|| {
            let mut dcols = vec![T::zero(); rows * patch];
            // dcols = G · Wᵀ
            T::gemm(rows, cout, patch, g, (cout as isize, 1), x[1].data(), (1, cout as isize), &mut dcols, (patch as isize, 1), false);
            let mut dx = vec![T::zero(); x[0].numel()];
            geo.for_each_tap(|row, off, src| {
                if let Some(s) = src {
                    let from = &dcols[row * patch + off..row * patch + off + geo.cin];
                    dx[s..s + geo.cin].iter_mut().zip(from).for_each(|(d, &v)| *d = *d + v);
                }
            });
            dx
        });
        let dw = needs[1].then(|| {
            let cols = geo.im2col(x[0].data());
            let mut dw = vec![T::zero(); patch * cout];
            T::gemm(patch, rows, cout, &cols, (1, patch as isize), g, (cout as isize, 1), &mut dw, (cout as isize, 1), false);
            dw
        });
        let db = needs[2].then(|| column_sums(g, cout));
        vec![dx, dw, db]
    }
}

fn column_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
    }
    out
}

// --- depth-wise convolution ----------------------------------------------

#[derive(Clone, Copy)]
struct DwGeom {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    pad: Padding,
}

impl DwGeom {
    /// Calls `f(out_pixel_offset, in_pixel_offset, tap)` for every valid pair.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = (self.k / 2) as isize;
        for y in 0..self.h {
            for ky in 0..self.k {
                let Some(sy) = self.pad.source(y as isize + ky as isize - p, self.h) else { continue };
                for x in 0..self.w {
                    let out = (y * self.w + x) * self.c;
                    for kx in 0..self.k {
                        let Some(sx) = self.pad.source(x as isize + kx as isize - p, self.w) else { continue };
                        f(out, (sy * self.w + sx) * self.c, (ky * self.k + kx) * self.c);
                    }
                }
            }
        }
    }
}

struct DepthwiseFn(DwGeom);

impl<T: Real> Function<T> for DepthwiseFn {
    fn name(&self) -> &'static str {
        "depthwise_conv2d"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let geo = self.0;
        let c = geo.c;
        let (xd, wd) = (x[0].data(), x[1].data());
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); xd.len()];
            geo.for_each_tap(|o, i, t| {
                for ch in 0..c {
                    dx[i + ch] = dx[i + ch] + g[o + ch] * wd[t + ch];
                }
            });
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); wd.len()];
            geo.for_each_tap(|o, i, t| {
                for ch in 0..c {
                    dw[t + ch] = dw[t + ch] + g[o + ch] * xd[i + ch];
                }
            });
            dw
        });
        let db = needs[2].then(|| column_sums(g, c));
        vec![dx, dw, db]
    }
}

// --- point-wise convolution ----------------------------------------------

struct PointwiseFn {
    rows: usize,
    cin: usize,
    cout: usize,
}

impl<T: Real> Function<T> for PointwiseFn {
    fn name(&self) -> &'static str {
        "pointwise_conv"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (rows, cin, cout) = (self.rows, self.cin, self.cout);
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); rows * cin];
            T::gemm(rows, cout, cin, g, (cout as isize, 1), x[1].data(), (1, cout as isize), &mut dx, (cin as isize, 1), false);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); cin * cout];
            T::gemm(cin, rows, cout, x[0].data(), (1, cin as isize), g, (cout as isize, 1), &mut dw, (cout as isize, 1), false);
            dw
        });
        let db = needs[2].then(|| column_sums(g, cout));
        vec![dx, dw, db]
    }
}

// --- normalization and activations ---------------------------------------

struct LayerNormFn {
    c: usize,
}

/// Per-pixel `(mean, 1/sqrt(var + eps))` over the channel axis.
fn channel_stats<T: Real>(px: &[T]) -> (T, T) {
    let n = T::of(px.len() as f64);
    let mean = px.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = px.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + T::of(LN_EPS)).sqrt())
}

impl<T: Real> Function<T> for LayerNormFn {
    fn name(&self) -> &'static str {
        "layer_norm_channel"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let c = self.c;
        let gamma = x[1].data();
        let n = T::of(c as f64);
        let mut dx = needs[0].then(|| vec![T::zero(); x[0].numel()]);
        let mut dgamma = needs[1].then(|| vec![T::zero(); c]);
        let mut xhat = vec![T::zero(); c];
        let mut gxhat = vec![T::zero(); c];
        for (p, px) in x[0].data().chunks_exact(c).enumerate() {
            let (mean, inv) = channel_stats(px);
            let gp = &g[p * c..(p + 1) * c];
            for ch in 0..c {
                xhat[ch] = (px[ch] - mean) * inv;
                gxhat[ch] = gp[ch] * gamma[ch];
            }
            if let Some(dg) = dgamma.as_mut() {
                for ch in 0..c {
                    dg[ch] = dg[ch] + gp[ch] * xhat[ch];
                }
            }
            if let Some(dx) = dx.as_mut() {
                let mean_g = gxhat.iter().fold(T::zero(), |a, &v| a + v) / n;
                let mean_gx = gxhat.iter().zip(&xhat).fold(T::zero(), |a, (&u, &v)| a + u * v) / n;
                for ch in 0..c {
                    dx[p * c + ch] = inv * (gxhat[ch] - mean_g - xhat[ch] * mean_gx);
                }
            }
        }
        vec![dx, dgamma]
    }
}

struct GeluFn;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gelu_scalar<T: Real>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

impl<T: Real> Function<T> for GeluFn {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let half = T::of(0.5);
        let dx = x[0]
            .data()
            .iter()
            .zip(g)
            .map(|(&v, &g)| {
                let cdf = half * (T::one() + (v * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = T::of(FRAC_1_SQRT_2PI) * (-half * v * v).exp();
                g * (cdf + v * pdf)
            })
            .collect();
        vec![Some(dx)]
    }
}

struct SoftmaxFn {
    cols: usize,
}

impl<T: Real> Function<T> for SoftmaxFn {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); out.numel()];
        for ((y, gr), d) in out
            .data()
            .chunks_exact(self.cols)
            .zip(g.chunks_exact(self.cols))
            .zip(dx.chunks_exact_mut(self.cols))
        {
            let dot = y.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
            for j in 0..self.cols {
                d[j] = y[j] * (gr[j] - dot);
            }
        }
        vec![Some(dx)]
    }
}

// --- rearrangements ------------------------------------------------------

struct PixelShuffleFn {
    r: usize,
}

/// Output offset of every input element under the depth-to-space map.
fn pixel_shuffle_index(h: usize, w: usize, c_out: usize, r: usize) -> impl Iterator<Item = usize> {
    let wo = w * r;
    (0..h).flat_map(move |i| {
        (0..w).flat_map(move |j| {
            (0..c_out).flat_map(move |c| {
                (0..r).flat_map(move |dy| {
                    (0..r).map(move |dx| ((r * i + dy) * wo + r * j + dx) * c_out + c)
                })
            })
        })
    })
}

impl<T: Real> Function<T> for PixelShuffleFn {
    fn name(&self) -> &'static str {
        "pixel_shuffle"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let [h, w, c] = x[0].shape()[..] else { unreachable!() };
        let dx = pixel_shuffle_index(h, w, c / (self.r * self.r), self.r).map(|o| g[o]).collect();
        vec![Some(dx)]
    }
}

struct ConcatFn {
    widths: Vec<usize>,
}

impl<T: Real> Function<T> for ConcatFn {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.widths.iter().sum();
        let mut start = 0;
        self.widths
            .iter()
            .zip(needs)
            .map(|(&w, &need)| {
                let s = start;
                start += w;
                need.then(|| g.chunks_exact(total).flat_map(|row| &row[s..s + w]).copied().collect())
            })
            .collect()
    }
}

struct SliceFn {
    start: usize,
    len: usize,
    total: usize,
}

impl<T: Real> Function<T> for SliceFn {
    fn name(&self) -> &'static str {
        "slice_channels"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); x[0].numel()];
        for (row, gr) in dx.chunks_exact_mut(self.total).zip(g.chunks_exact(self.len)) {
            row[self.start..self.start + self.len].copy_from_slice(gr);
        }
        vec![Some(dx)]
    }
}

impl<T: Real> Graph<T> {
    /// 2-D convolution, output `(⌈H/stride⌉, ⌈W/stride⌉, c_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: Padding) -> Result<Var> {
        let (h, wd, cin) = expect_hwc("conv2d", self.shape(x))?;
        let [k, k2, wcin, cout] = self.shape(w)[..] else {
            return Err(Error::shape("conv2d", format!("weights {:?}", self.shape(w))));
        };
        check_kernel("conv2d", k)?;
        if k != k2 {
            return Err(Error::arg("conv2d", "kernel must be square"));
        }
        if wcin != cin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, weights expect {wcin}")));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", self.shape(b))));
        }
        if !matches!(stride, 1 | 2) {
            return Err(Error::arg("conv2d", format!("stride must be 1 or 2, got {stride}")));
        }
        check_padding("conv2d", pad, k, h, wd)?;
        let p = k / 2;
        let geo = ConvGeom {
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * p - k) / stride + 1,
            wo: (wd + 2 * p - k) / stride + 1,
        };
        let cols = geo.im2col(self.value(x).data());
        let rows = geo.ho * geo.wo;
        let patch = geo.patch();
        let mut out = vec![T::zero(); rows * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm(rows, patch, cout, &cols, (patch as isize, 1), self.value(w).data(), (cout as isize, 1), &mut out, (cout as isize, 1), true);
        let out = Tensor::from_vec(&[geo.ho, geo.wo, cout], out)?;
        self.push(out, vec![x, w, b], Box::new(Conv2dFn(geo)))
    }

    /// Per-channel spatial filtering with a `(k, k, 1, C)` kernel, stride 1.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var, pad: Padding) -> Result<Var> {
        let (h, wd, c) = expect_hwc("depthwise_conv2d", self.shape(x))?;
        let [k, k2, one, wc] = self.shape(w)[..] else {
            return Err(Error::shape("depthwise_conv2d", format!("weights {:?}", self.shape(w))));
        };
        check_kernel("depthwise_conv2d", k)?;
        if k != k2 || one != 1 || wc != c {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("weights {:?} for {c} channels", self.shape(w)),
            ));
        }
        if self.shape(b) != [c] {
            return Err(Error::shape("depthwise_conv2d", format!("bias {:?}", self.shape(b))));
        }
        check_padding("depthwise_conv2d", pad, k, h, wd)?;
        let geo = DwGeom { h, w: wd, c, k, pad };
        let (xd, wt) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); xd.len()];
        for row in out.chunks_exact_mut(c) {
            row.copy_from_slice(self.value(b).data());
        }
        geo.for_each_tap(|o, i, t| {
            for ch in 0..c {
                out[o + ch] = out[o + ch] + wt[t + ch] * xd[i + ch];
            }
        });
        let out = Tensor::from_vec(&[h, wd, c], out)?;
        self.push(out, vec![x, w, b], Box::new(DepthwiseFn(geo)))
    }

    /// 1×1 convolution: the `(H·W)×c_in` pixel matrix times a `c_in×c_out` map.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, cin) = expect_hwc("pointwise_conv", self.shape(x))?;
        let [1, 1, wcin, cout] = self.shape(w)[..] else {
            return Err(Error::shape("pointwise_conv", format!("weights {:?}", self.shape(w))));
        };
        if wcin != cin || self.shape(b) != [cout] {
            return Err(Error::shape(
                "pointwise_conv",
                format!("input {cin} channels, weights {:?}, bias {:?}", self.shape(w), self.shape(b)),
            ));
        }
        let rows = h * wd;
        let mut out = vec![T::zero(); rows * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm(rows, cin, cout, self.value(x).data(), (cin as isize, 1), self.value(w).data(), (cout as isize, 1), &mut out, (cout as isize, 1), true);
        let out = Tensor::from_vec(&[h, wd, cout], out)?;
        self.push(out, vec![x, w, b], Box::new(PointwiseFn { rows, cin, cout }))
    }

    /// Bias-free layer norm over the channel axis of every pixel.
    pub fn layer_norm_channel(&mut self, x: Var, gamma: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if c < 2 || self.shape(gamma) != [c] {
            return Err(Error::shape(
                "layer_norm_channel",
                format!("input {:?}, gain {:?}", self.shape(x), self.shape(gamma)),
            ));
        }
        let g = self.value(gamma).data();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for px in self.value(x).data().chunks_exact(c) {
            let (mean, inv) = channel_stats(px);
            out.extend(px.iter().zip(g).map(|(&v, &g)| (v - mean) * inv * g));
        }
        let out = Tensor::from_vec(self.shape(x), out)?;
        self.push(out, vec![x, gamma], Box::new(LayerNormFn { c }))
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, vec![x], Box::new(GeluFn))
    }

    /// Max-subtracted softmax over each row; `-inf` entries get exactly 0.
    pub fn softmax_rows(&mut self, m: Var) -> Result<Var> {
        let [_, cols] = self.shape(m)[..] else {
            return Err(Error::shape("softmax_rows", format!("expected a matrix, got {:?}", self.shape(m))));
        };
        let mut out = Vec::with_capacity(self.value(m).numel());
        for row in self.value(m).data().chunks_exact(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::arg("softmax_rows", "row has no finite entry"));
            }
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total = total + e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / total);
        }
        let out = Tensor::from_vec(self.shape(m), out)?;
        self.push(out, vec![m], Box::new(SoftmaxFn { cols }))
    }

    /// Depth-to-space: input channel `c·r² + dy·r + dx` of pixel `(i, j)`
    /// lands at output pixel `(r·i + dy, r·j + dx)`, channel `c`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (h, w, c) = expect_hwc("pixel_shuffle", self.shape(x))?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::shape("pixel_shuffle", format!("{c} channels not divisible by {r}²")));
        }
        let c_out = c / (r * r);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (o, &v) in pixel_shuffle_index(h, w, c_out, r).zip(src) {
            out[o] = v;
        }
        let out = Tensor::from_vec(&[h * r, w * r, c_out], out)?;
        self.push(out, vec![x], Box::new(PixelShuffleFn { r }))
    }

    /// Concatenate along the last axis; leading extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_channels", format!("{first:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::from_vec(&shape, out)?;
        self.push(out, parts.to_vec(), Box::new(ConcatFn { widths }))
    }

    /// Channels `start..start+len` of the last axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let total = *shape.last().unwrap_or(&1);
        if len == 0 || start + len > total {
            return Err(Error::shape("slice_channels", format!("{start}..{} of {total}", start + len)));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(total)
            .flat_map(|row| &row[start..start + len])
            .copied()
            .collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::from_vec(&out_shape, out)?;
        self.push(out, vec![x], Box::new(SliceFn { start, len, total }))
    }
}

/// Inverse of [`Graph::pixel_shuffle`] on plain tensors.
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = expect_hwc("pixel_unshuffle", x.shape())?;
    if h % r != 0 || w % r != 0 {
        return Err(Error::shape("pixel_unshuffle", format!("{h}×{w} not divisible by {r}")));
    }
    let (hi, wi) = (h / r, w / r);
    let data = pixel_shuffle_index(hi, wi, c, r).map(|o| x.data()[o]).collect();
    Tensor::from_vec(&[hi, wi, c * r * r], data)
}

/// GELU on a plain value.
pub fn gelu_value<T: Real>(x: T) -> T {
    gelu_scalar(x)
}
