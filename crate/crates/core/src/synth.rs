//! Procedural supervision triples `(reference, query, ground truth)` with an
//! exactly known magnified displacement.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::io::{read_ppm, write_ppm};
use crate::params::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subset {
    /// Clean inputs.
    I,
    /// Shot noise on the inputs.
    II,
    /// Gaussian blur on the inputs.
    III,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::I => "I",
            Subset::II => "II",
            Subset::III => "III",
        })
    }
}

impl FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "i" | "1" => Ok(Subset::I),
            "II" | "ii" | "2" => Ok(Subset::II),
            "III" | "iii" | "3" => Ok(Subset::III),
            other => Err(Error::Dataset(format!("unknown subset `{other}` (I|II|III)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    None,
    Poisson { lambda: f64 },
    Gaussian { sigma: f64 },
}

impl Corruption {
    pub fn name(&self) -> &'static str {
        match self {
            Corruption::None => "none",
            Corruption::Poisson { .. } => "poisson",
            Corruption::Gaussian { .. } => "gaussian",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            Corruption::None => 0.0,
            Corruption::Poisson { lambda } => lambda,
            Corruption::Gaussian { sigma } => sigma,
        }
    }

    fn from_parts(name: &str, param: f64) -> Result<Self> {
        match name {
            "none" => Ok(Corruption::None),
            "poisson" => Ok(Corruption::Poisson { lambda: param }),
            "gaussian" => Ok(Corruption::Gaussian { sigma: param }),
            other => Err(Error::Dataset(format!("unknown corruption `{other}`"))),
        }
    }

    pub fn apply(&self, img: &Tensor<f32>, rng: &mut impl Rng) -> Result<Tensor<f32>> {
        match *self {
            Corruption::None => Ok(img.clone()),
            Corruption::Poisson { lambda } => poisson_noise(img, lambda, rng),
            Corruption::Gaussian { sigma } => gaussian_blur(img, sigma),
        }
    }
}

/// Straight-alpha RGBA patch, `(h, w, 4)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub rgba: Tensor<f32>,
}

impl Sprite {
    pub fn new(rgba: Tensor<f32>) -> Result<Self> {
        match rgba.hwc() {
            Some((_, _, 4)) if rgba.data().chunks_exact(4).all(|p| (0.0..=1.0).contains(&p[3])) => Ok(Sprite { rgba }),
            _ => Err(Error::arg("sprite", format!("expected (h, w, 4) with alpha in [0, 1], got {:?}", rgba.shape()))),
        }
    }

    pub fn height(&self) -> usize {
        self.rgba.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgba.shape()[1]
    }

    /// Premultiplied `(r, g, b, a)` at integer coordinates; zero outside.
    fn premul(&self, y: isize, x: isize) -> [f64; 4] {
        let (h, w) = (self.height() as isize, self.width() as isize);
        if y < 0 || x < 0 || y >= h || x >= w {
            return [0.0; 4];
        }
        let i = ((y * w + x) * 4) as usize;
        let p = &self.rgba.data()[i..i + 4];
        let a = f64::from(p[3]);
        [a * f64::from(p[0]), a * f64::from(p[1]), a * f64::from(p[2]), a]
    }
}

/// One supervision triple with its generating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub reference: Tensor<f32>,
    pub query: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub alpha: f64,
    /// Per-frame displacement `(vx, vy)` in pixels.
    pub velocity: [f64; 2],
    pub corruption: Corruption,
    pub seed: u64,
    /// Sprite top-left corner `(x, y)` in the reference frame.
    pub origin: [f64; 2],
    pub sprite: Sprite,
}

/// Alpha-blend `sprite` with its top-left corner at `pos = (x, y)`, resampled
/// bilinearly in premultiplied space.
pub fn composite(bg: &Tensor<f32>, sprite: &Sprite, pos: [f64; 2]) -> Result<Tensor<f32>> {
    let Some((h, w, 3)) = bg.hwc() else {
        return Err(Error::shape("composite", format!("background {:?}", bg.shape())));
    };
    let (sh, sw) = (sprite.height() as f64, sprite.width() as f64);
    let [px, py] = pos;
    let fits = px.is_finite() && py.is_finite() && px >= 1.0 && py >= 1.0 && px + sw + 1.0 <= w as f64 && py + sh + 1.0 <= h as f64;
    if !fits {
        return Err(Error::arg("composite", format!("{}×{} sprite at ({px}, {py}) leaves the {w}×{h} frame", sw, sh)));
    }
    let mut out = bg.clone();
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (fx, fy) = (px - px.floor(), py - py.floor());
    let (ix, iy) = (x0 as isize, y0 as isize);
    for y in y0..=(y0 + sprite.height()).min(h - 1) {
        for x in x0..=(x0 + sprite.width()).min(w - 1) {
            // Sprite coordinate of this pixel is (y - py, x - px).
            let (sy, sx) = (y as isize - iy, x as isize - ix);
            let taps = [
                (sy - 1, sx - 1, fy * fx),
                (sy - 1, sx, fy * (1.0 - fx)),
                (sy, sx - 1, (1.0 - fy) * fx),
                (sy, sx, (1.0 - fy) * (1.0 - fx)),
            ];
            let mut p = [0.0f64; 4];
            for (ty, tx, wgt) in taps {
                if wgt == 0.0 {
                    continue;
                }
                let s = sprite.premul(ty, tx);
                p.iter_mut().zip(s).for_each(|(acc, v)| *acc += wgt * v);
            }
            if p[3] == 0.0 {
                continue;
            }
            let i = (y * w + x) * 3;
            for c in 0..3 {
                let b = f64::from(out.data()[i + c]);
                out.data_mut()[i + c] = ((1.0 - p[3]) * b + p[c]) as f32;
            }
        }
    }
    Ok(out)
}

/// `Poisson(v·λ) / λ` per value, clamped to `[0, 1]`.
pub fn poisson_noise(img: &Tensor<f32>, lambda: f64, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::arg("poisson_noise", format!("λ must be positive, got {lambda}")));
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        let mean = f64::from(*v).max(0.0) * lambda;
        let draw = if mean > 0.0 { Poisson::new(mean).expect("positive mean").sample(rng) } else { 0.0 };
        *v = (draw / lambda).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Normalized sampled Gaussian taps over `[-radius, radius]`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric index fold: `… x1 x0 | x0 x1 … xn-1 | xn-1 …`.
fn fold(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Separable Gaussian blur with radius `min(⌈3σ⌉, extent / 2)` per axis.
/// Symmetric borders keep the image mean unchanged.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg("gaussian_blur", format!("σ must be positive, got {sigma}")));
    }
    let Some((h, w, c)) = img.hwc() else {
        return Err(Error::shape("gaussian_blur", format!("{:?}", img.shape())));
    };
    let r3 = (3.0 * sigma).ceil() as usize;
    let src: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let n = if along_x { w } else { h };
        let r = r3.min(n / 2);
        let k = gaussian_kernel(sigma, r);
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (t, &kv) in k.iter().enumerate() {
                        let d = t as isize - r as isize;
                        let (yy, xx) = if along_x { (y, fold(x as isize + d, w)) } else { (fold(y as isize + d, h), x) };
                        acc += kv * src[(yy * w + xx) * c + ch];
                    }
                    dst[(y * w + x) * c + ch] = acc;
                }
            }
        }
        dst
    };
    let out = pass(&pass(&src, true), false);
    Tensor::from_vec(img.shape(), out.into_iter().map(|v| v as f32).collect())
}

/// Generation parameters. Ranges are `(lo, hi)`; α is drawn from `(lo, hi]`,
/// λ and σ from `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub size: usize,
    pub subset: Subset,
    pub alpha_range: (f64, f64),
    pub lambda_range: (f64, f64),
    pub sigma_range: (f64, f64),
    /// Overrides the sampled magnification factor (zero allowed).
    pub force_alpha: Option<f64>,
    /// Overrides the sampled velocity.
    pub force_velocity: Option<[f64; 2]>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            size: 64,
            subset: Subset::I,
            alpha_range: (0.0, 10.0),
            lambda_range: (3.0, 30.0),
            sigma_range: (3.0, 30.0),
            force_alpha: None,
            force_velocity: None,
        }
    }
}

pub const MAX_SPEED: f64 = 2.0;
pub const MAX_ALPHA: f64 = 50.0;
const PLACEMENT_RETRIES: usize = 64;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.size < 16 || self.size % 2 != 0 {
            return bad(format!("frame size must be even and at least 16, got {}", self.size));
        }
        let (alo, ahi) = self.alpha_range;
        if !(alo >= 0.0 && ahi > alo && ahi <= MAX_ALPHA) {
            return bad(format!("α range ({alo}, {ahi}] must lie within (0, {MAX_ALPHA}]"));
        }
        for (name, (lo, hi)) in [("λ", self.lambda_range), ("σ", self.sigma_range)] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return bad(format!("{name} range [{lo}, {hi}] must be positive and ordered"));
            }
        }
        if let Some(a) = self.force_alpha {
            if !(0.0..=MAX_ALPHA).contains(&a) {
                return bad(format!("forced α {a} outside [0, {MAX_ALPHA}]"));
            }
        }
        if let Some([vx, vy]) = self.force_velocity {
            let s = vx.hypot(vy);
            if !(s > 0.0 && s <= MAX_SPEED) {
                return bad(format!("forced speed {s} outside (0, {MAX_SPEED}]"));
            }
        }
        Ok(())
    }
}

/// Smooth value-noise gradient plus a few flat rectangles.
fn background(size: usize, rng: &mut impl Rng) -> Tensor<f32> {
    const GRID: usize = 5;
    let lattice: Vec<[f64; 3]> = (0..GRID * GRID).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let mut data = vec![0.0f32; size * size * 3];
    let scale = (GRID - 1) as f64 / (size - 1) as f64;
    for y in 0..size {
        for x in 0..size {
            let (gy, gx) = (y as f64 * scale, x as f64 * scale);
            let (iy, ix) = ((gy as usize).min(GRID - 2), (gx as usize).min(GRID - 2));
            let (fy, fx) = (gy - iy as f64, gx - ix as f64);
            for c in 0..3 {
                let l = |yy: usize, xx: usize| lattice[yy * GRID + xx][c];
                let top = l(iy, ix) * (1.0 - fx) + l(iy, ix + 1) * fx;
                let bot = l(iy + 1, ix) * (1.0 - fx) + l(iy + 1, ix + 1) * fx;
                data[(y * size + x) * 3 + c] = (0.15 + 0.7 * (top * (1.0 - fy) + bot * fy)) as f32;
            }
        }
    }
    for _ in 0..rng.gen_range(3..=6) {
        let (rw, rh) = (rng.gen_range(size / 8..=size / 3), rng.gen_range(size / 8..=size / 3));
        let (x0, y0) = (rng.gen_range(0..size - rw), rng.gen_range(0..size - rh));
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                data[(y * size + x) * 3..][..3].copy_from_slice(&color);
            }
        }
    }
    Tensor::from_vec(&[size, size, 3], data).expect("square frame")
}

#[derive(Clone, Copy)]
enum Silhouette {
    Disk,
    Rect,
    Ring,
    Polygon { sides: usize, phase: f64 },
}

impl Silhouette {
    /// Membership of the point `(u, v)` in normalized coordinates `[-1, 1]²`.
    fn contains(&self, u: f64, v: f64) -> bool {
        let r = u.hypot(v);
        match *self {
            Silhouette::Disk => r <= 1.0,
            Silhouette::Rect => u.abs() <= 0.9 && v.abs() <= 0.9,
            Silhouette::Ring => (0.45..=1.0).contains(&r),
            Silhouette::Polygon { sides, phase } => {
                // Inside the regular polygon with unit circumradius.
                let sector = 2.0 * PI / sides as f64;
                let a = (v.atan2(u) - phase).rem_euclid(sector) - sector / 2.0;
                r * a.cos() <= (sector / 2.0).cos()
            }
        }
    }
}

/// Textured opaque shape with 4×4 supersampled edge coverage.
fn sprite(max_extent: usize, rng: &mut impl Rng) -> Sprite {
    let lo = (max_extent / 3).max(6);
    let (h, w) = (rng.gen_range(lo..=max_extent), rng.gen_range(lo..=max_extent));
    let shape = match rng.gen_range(0..4) {
        0 => Silhouette::Disk,
        1 => Silhouette::Rect,
        2 => Silhouette::Ring,
        _ => Silhouette::Polygon { sides: rng.gen_range(3..=7), phase: rng.gen_range(0.0..PI) },
    };
    let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let tilt: [f64; 2] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    let period = rng.gen_range(5.0..10.0);
    let stripe_dir = rng.gen_range(0.0..PI);
    let (sd, cd) = stripe_dir.sin_cos();
    let mut data = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let mut cover = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let u = 2.0 * (x as f64 + (sx as f64 + 0.5) / 4.0) / w as f64 - 1.0;
                    let v = 2.0 * (y as f64 + (sy as f64 + 0.5) / 4.0) / h as f64 - 1.0;
                    cover += usize::from(shape.contains(u, v));
                }
            }
            let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
            let stripe = 0.2 * (2.0 * PI * (cd * x as f64 + sd * y as f64) / period).sin();
            for b in base {
                data.push((b + tilt[0] * u + tilt[1] * v + stripe).clamp(0.0, 1.0) as f32);
            }
            data.push(cover as f32 / 16.0);
        }
    }
    Sprite { rgba: Tensor::from_vec(&[h, w, 4], data).expect("sprite extents") }
}

fn draw_alpha(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    // `1 - U[0, 1)` lies in `(0, 1]`.
    lo + (hi - lo) * (1.0 - rng.gen::<f64>())
}

fn draw_velocity(rng: &mut impl Rng) -> [f64; 2] {
    let speed = MAX_SPEED * (1.0 - rng.gen::<f64>());
    let (s, c) = rng.gen_range(0.0..2.0 * PI).sin_cos();
    [speed * c, speed * s]
}

/// Feasible top-left range along one axis for displacements `0, v, d`.
fn axis_range(extent: usize, span: usize, v: f64, d: f64) -> Option<(f64, f64)> {
    let lo = 1.0 - v.min(d).min(0.0);
    let hi = extent as f64 - span as f64 - 1.0 - v.max(d).max(0.0);
    (hi >= lo).then_some((lo, hi))
}

/// One triple from a fully seeded stream.
pub fn gen_sample(seed: u64, cfg: &GenConfig) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(cfg.size, &mut rng);
    let sprite = sprite(cfg.size / 2 - 2, &mut rng);
    let alpha = cfg.force_alpha.unwrap_or_else(|| draw_alpha(&mut rng, cfg.alpha_range));
    let mut placement = None;
    for _ in 0..PLACEMENT_RETRIES {
        let velocity = cfg.force_velocity.unwrap_or_else(|| draw_velocity(&mut rng));
        let d = [(1.0 + alpha) * velocity[0], (1.0 + alpha) * velocity[1]];
        let rx = axis_range(cfg.size, sprite.width(), velocity[0], d[0]);
        let ry = axis_range(cfg.size, sprite.height(), velocity[1], d[1]);
        if let (Some((xl, xh)), Some((yl, yh))) = (rx, ry) {
            let origin = [rng.gen_range(xl..=xh), rng.gen_range(yl..=yh)];
            placement = Some((velocity, d, origin));
            break;
        }
    }
    let Some((velocity, d, origin)) = placement else {
        return Err(Error::Dataset(format!(
            "no placement fits a {}×{} sprite magnified by α = {alpha} in a {} frame",
            sprite.width(),
            sprite.height(),
            cfg.size
        )));
    };
    let at = |off: [f64; 2]| [origin[0] + off[0], origin[1] + off[1]];
    let reference = composite(&bg, &sprite, origin)?;
    let query = composite(&bg, &sprite, at(velocity))?;
    let gt = composite(&bg, &sprite, at(d))?;
    let corruption = match cfg.subset {
        Subset::I => Corruption::None,
        Subset::II => Corruption::Poisson { lambda: rng.gen_range(cfg.lambda_range.0..=cfg.lambda_range.1) },
        Subset::III => Corruption::Gaussian { sigma: rng.gen_range(cfg.sigma_range.0..=cfg.sigma_range.1) },
    };
    let reference = corruption.apply(&reference, &mut rng)?;
    let query = corruption.apply(&query, &mut rng)?;
    Ok(Sample { reference, query, gt, alpha, velocity, corruption, seed, origin, sprite })
}

/// Seed of sample `index` within a dataset seeded by `dataset_seed`.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    derive_seed(dataset_seed, index as u64)
}

/// One line of `manifest.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub index: usize,
    pub subset: Subset,
    pub alpha: f64,
    pub velocity: [f64; 2],
    pub corruption: Corruption,
    pub seed: u64,
}

pub const MANIFEST_HEADER: &str = "index\tsubset\talpha\tvx\tvy\tcorruption\tparam\tseed";

impl ManifestRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.index,
            self.subset,
            self.alpha,
            self.velocity[0],
            self.velocity[1],
            self.corruption.name(),
            self.corruption.param(),
            self.seed
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Dataset(format!("manifest line `{line}`: bad {what}"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(bad("column count"));
        }
        let num = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(what));
        Ok(ManifestRow {
            index: f[0].parse().map_err(|_| bad("index"))?,
            subset: f[1].parse()?,
            alpha: num(2, "alpha")?,
            velocity: [num(3, "vx")?, num(4, "vy")?],
            corruption: Corruption::from_parts(f[5], num(6, "param")?)?,
            seed: f[7].parse().map_err(|_| bad("seed"))?,
        })
    }
}

/// Paths of the three frames of one sample.
pub fn frame_paths(root: &Path, subset: Subset, index: usize) -> [PathBuf; 3] {
    let dir = root.join(subset.to_string());
    ["ref", "query", "gt"].map(|k| dir.join(format!("{index:05}_{k}.ppm")))
}

/// Generate `count` samples under `root` and write the manifest.
pub fn write_dataset(root: &Path, count: usize, seed: u64, cfg: &GenConfig) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    let dir = root.join(cfg.subset.to_string());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut rows = Vec::with_capacity(count);
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for index in 0..count {
        let s = gen_sample(sample_seed(seed, index), cfg)?;
        let [r, q, g] = frame_paths(root, cfg.subset, index);
        write_ppm(&s.reference, r)?;
        write_ppm(&s.query, q)?;
        write_ppm(&s.gt, g)?;
        let row = ManifestRow { index, subset: cfg.subset, alpha: s.alpha, velocity: s.velocity, corruption: s.corruption, seed: s.seed };
        manifest.push_str(&row.to_line());
        manifest.push('\n');
        rows.push(row);
    }
    let path = root.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join("manifest.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Dataset(format!("{}: missing or wrong header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(ManifestRow::parse).collect()
}

/// Frames of one dataset entry, in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Triple {
    pub row: ManifestRow,
    pub reference: Tensor<f32>,
    pub query: Tensor<f32>,
    pub gt: Tensor<f32>,
}

pub fn read_dataset(root: &Path) -> Result<Vec<Triple>> {
    let rows = read_manifest(root)?;
    if rows.is_empty() {
        return Err(Error::Dataset(format!("{}: empty manifest", root.display())));
    }
    rows.into_iter()
        .map(|row| {
            let [r, q, g] = frame_paths(root, row.subset, row.index);
            let (reference, query, gt) = (read_ppm(r)?, read_ppm(q)?, read_ppm(g)?);
            if reference.shape() != query.shape() || query.shape() != gt.shape() {
                return Err(Error::Dataset(format!("sample {}: frame extents differ", row.index)));
            }
            Ok(Triple { row, reference, query, gt })
        })
        .collect()
}
