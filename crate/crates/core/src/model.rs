//! The three-phase magnification network: texture/shape encoding, filtered
//! point-wise motion magnification, and recoupled generation.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{dynamic_filter, init_block, mdta_block, validate_block, BlockVars, MaskFill, Sparsity};
use crate::graph::{Graph, Var};
use crate::nn::Padding;
use crate::params::{Bound, ConvVars, ParamStore, SeedStream};
use crate::tensor::{Real, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub topk: usize,
    pub eta: usize,
    pub enc_blocks: usize,
    /// Motion filter depth.
    pub n1: usize,
    /// Generation filter depth.
    pub n2: usize,
    pub upscale: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { channels: 48, heads: 4, topk: 7, eta: 3, enc_blocks: 2, n1: 2, n2: 8, upscale: 2 }
    }
}

impl ModelConfig {
    /// Small configuration used for full-pipeline gradient checks.
    pub fn reduced() -> Self {
        ModelConfig { channels: 12, heads: 2, topk: 2, eta: 3, enc_blocks: 1, n1: 1, n2: 1, upscale: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        validate_block(self.channels, self.heads, self.eta)?;
        let head_c = self.channels / self.heads;
        if self.topk == 0 || self.topk > head_c {
            return Err(Error::Config(format!(
                "top-k {} must lie in 1..={head_c} (channels / heads)",
                self.topk
            )));
        }
        if self.upscale != 2 {
            return Err(Error::Config(format!(
                "upscale must be 2 to invert the stride-2 stem, got {}",
                self.upscale
            )));
        }
        Ok(())
    }

    fn as_fields(&self) -> [usize; 8] {
        [self.channels, self.heads, self.topk, self.eta, self.enc_blocks, self.n1, self.n2, self.upscale]
    }

    fn from_fields(f: [usize; 8]) -> Self {
        ModelConfig {
            channels: f[0],
            heads: f[1],
            topk: f[2],
            eta: f[3],
            enc_blocks: f[4],
            n1: f[5],
            n2: f[6],
            upscale: f[7],
        }
    }
}

/// Runtime switches that do not change the parameter set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mask_fill: MaskFill,
}

/// Configuration plus learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Seeded initialization: conv weights `U[-1/√fan_in, 1/√fan_in]`, every
    /// bias zero, norm gains and temperatures one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut seeds = SeedStream::new(seed);
        let mut p = ParamStore::new();
        p.add_conv("stem", 3, 3, c, seeds.next_seed())?;
        for enc in ["texture", "shape"] {
            for i in 0..config.enc_blocks {
                init_block(&mut p, &format!("{enc}.{i}"), c, config.heads, config.eta, &mut seeds)?;
            }
        }
        for i in 0..config.n1 {
            init_block(&mut p, &format!("phase2.{i}"), c, config.heads, config.eta, &mut seeds)?;
        }
        p.add_conv("pwm.inner", 1, c, c, seeds.next_seed())?;
        p.add_conv("pwm.outer", 1, c, c, seeds.next_seed())?;
        for i in 0..config.n2 {
            init_block(&mut p, &format!("phase3.{i}"), 2 * c, config.heads, config.eta, &mut seeds)?;
        }
        p.add_conv("head", 3, 2 * c, 3 * config.upscale * config.upscale, seeds.next_seed())?;
        Ok(Model { config, params: p })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config, params: self.params.cast() }
    }

    /// Bind parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<ModelVars> {
        let bound = self.params.bind(g, requires_grad);
        ModelVars::from_bound(bound, &self.config)
    }
}

/// Graph handles of every model parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub config: ModelConfig,
    pub stem: ConvVars,
    pub texture: Vec<BlockVars>,
    pub shape: Vec<BlockVars>,
    pub phase2: Vec<BlockVars>,
    pub pwm_inner: ConvVars,
    pub pwm_outer: ConvVars,
    pub phase3: Vec<BlockVars>,
    pub head: ConvVars,
    pub bound: Bound,
}

impl ModelVars {
    pub fn from_bound(bound: Bound, config: &ModelConfig) -> Result<Self> {
        let blocks = |prefix: &str, n: usize| -> Result<Vec<BlockVars>> {
            (0..n).map(|i| BlockVars::bind(&bound, &format!("{prefix}.{i}"), config.heads)).collect()
        };
        Ok(ModelVars {
            config: *config,
            stem: bound.conv("stem")?,
            texture: blocks("texture", config.enc_blocks)?,
            shape: blocks("shape", config.enc_blocks)?,
            phase2: blocks("phase2", config.n1)?,
            pwm_inner: bound.conv("pwm.inner")?,
            pwm_outer: bound.conv("pwm.outer")?,
            phase3: blocks("phase3", config.n2)?,
            head: bound.conv("head")?,
            bound,
        })
    }
}

/// Intermediate tensors of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub texture_ref: Var,
    pub texture_query: Var,
    pub shape_ref: Var,
    pub shape_query: Var,
    /// Inter-frame shape difference.
    pub motion: Var,
    /// Motion after the motion filter.
    pub filtered_motion: Var,
    /// `α · GELU(W_inner(filtered_motion))`, the magnified branch before the outer projection.
    pub scaled_motion: Var,
    /// Magnified shape.
    pub magnified_shape: Var,
    /// Channel concatenation of magnified shape and query texture.
    pub fused: Var,
    /// Output of the generation filter.
    pub refined: Var,
    pub output: Var,
}

impl ForwardTrace {
    pub fn named(&self) -> [(&'static str, Var); 11] {
        [
            ("texture_ref", self.texture_ref),
            ("texture_query", self.texture_query),
            ("shape_ref", self.shape_ref),
            ("shape_query", self.shape_query),
            ("motion", self.motion),
            ("filtered_motion", self.filtered_motion),
            ("scaled_motion", self.scaled_motion),
            ("magnified_shape", self.magnified_shape),
            ("fused", self.fused),
            ("refined", self.refined),
            ("output", self.output),
        ]
    }
}

/// Shared stem then the two dense encoder stacks; returns `(texture, shape)`,
/// each `(H/2, W/2, C)`.
pub fn encode<T: Real>(g: &mut Graph<T>, frame: Var, m: &ModelVars) -> Result<(Var, Var)> {
    let [h, w, 3] = g.shape(frame)[..] else {
        return Err(Error::shape("encode", format!("expected (H, W, 3), got {:?}", g.shape(frame))));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("encode", format!("extents must be even, got {h}×{w}")));
    }
    let stem = g.conv2d(frame, m.stem.w, m.stem.b, 2, Padding::Zero)?;
    let texture = m.texture.iter().try_fold(stem, |x, b| mdta_block(g, x, b, Sparsity::Dense))?;
    let shape = m.shape.iter().try_fold(stem, |x, b| mdta_block(g, x, b, Sparsity::Dense))?;
    Ok((texture, shape))
}

/// `shape_query − shape_ref`.
pub fn motion_extract<T: Real>(g: &mut Graph<T>, shape_query: Var, shape_ref: Var) -> Result<Var> {
    g.sub(shape_query, shape_ref)
}

/// Filter the motion, then `φ' = W_outer(α · W_inner(δ'')) + φ_query` where
/// each `W` is a point-wise conv followed by GELU. Returns
/// `(filtered_motion, scaled_motion, magnified_shape)`.
pub fn magnify_motion<T: Real>(
    g: &mut Graph<T>,
    motion: Var,
    alpha: f64,
    shape_query: Var,
    m: &ModelVars,
    opts: ForwardOptions,
) -> Result<(Var, Var, Var)> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::arg("magnify_motion", format!("α must be finite and ≥ 0, got {alpha}")));
    }
    let filtered = dynamic_filter(g, motion, &m.phase2, m.config.topk, opts.mask_fill)?;
    let inner = g.pointwise_conv(filtered, m.pwm_inner.w, m.pwm_inner.b)?;
    let inner = g.gelu(inner)?;
    let scaled = g.scale(inner, T::of(alpha))?;
    let outer = g.pointwise_conv(scaled, m.pwm_outer.w, m.pwm_outer.b)?;
    let outer = g.gelu(outer)?;
    let magnified = g.add(outer, shape_query)?;
    Ok((filtered, scaled, magnified))
}

/// Recouple, refine at width 2C, project with the 3×3 head and pixel-shuffle
/// back to `(H, W, 3)`. Returns `(fused, refined, output)`.
pub fn generate<T: Real>(
    g: &mut Graph<T>,
    magnified_shape: Var,
    texture: Var,
    m: &ModelVars,
    opts: ForwardOptions,
) -> Result<(Var, Var, Var)> {
    if g.shape(magnified_shape) != g.shape(texture) {
        return Err(Error::shape(
            "generate",
            format!("{:?} vs {:?}", g.shape(magnified_shape), g.shape(texture)),
        ));
    }
    let fused = g.concat_channels(&[magnified_shape, texture])?;
    let refined = dynamic_filter(g, fused, &m.phase3, m.config.topk, opts.mask_fill)?;
    let head = g.conv2d(refined, m.head.w, m.head.b, 1, Padding::Reflect)?;
    let out = g.pixel_shuffle(head, m.config.upscale)?;
    Ok((fused, refined, out))
}

/// Full pass on a `(reference, query)` frame pair in `[-1, 1]`.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    reference: Var,
    query: Var,
    alpha: f64,
    m: &ModelVars,
    opts: ForwardOptions,
) -> Result<ForwardTrace> {
    if g.shape(reference) != g.shape(query) {
        return Err(Error::shape(
            "forward",
            format!("frames differ: {:?} vs {:?}", g.shape(reference), g.shape(query)),
        ));
    }
    let (texture_ref, shape_ref) = encode(g, reference, m)?;
    let (texture_query, shape_query) = encode(g, query, m)?;
    let motion = motion_extract(g, shape_query, shape_ref)?;
    let (filtered_motion, scaled_motion, magnified_shape) =
        magnify_motion(g, motion, alpha, shape_query, m, opts)?;
    let (fused, refined, output) = generate(g, magnified_shape, texture_query, m, opts)?;
    Ok(ForwardTrace {
        texture_ref,
        texture_query,
        shape_ref,
        shape_query,
        motion,
        filtered_motion,
        scaled_motion,
        magnified_shape,
        fused,
        refined,
        output,
    })
}

/// Inference helper: magnify one pair of `(H, W, 3)` frames in `[-1, 1]`.
/// A frame pair the model accepts: equal `(H, W, 3)` shapes with even extents.
pub fn check_frame_pair<T: Real>(reference: &Tensor<T>, query: &Tensor<T>) -> Result<()> {
    if reference.shape() != query.shape() {
        return Err(Error::arg("magnify", format!("frame shapes differ: {:?} vs {:?}", reference.shape(), query.shape())));
    }
    match reference.hwc() {
        Some((h, w, 3)) if h % 2 == 0 && w % 2 == 0 => Ok(()),
        Some((h, w, 3)) => Err(Error::arg("magnify", format!("frame extents must be even, got {w}×{h}"))),
        _ => Err(Error::shape("magnify", format!("expected (H, W, 3), got {:?}", reference.shape()))),
    }
}

pub fn magnify_frames(
    model: &Model<f32>,
    reference: &Tensor<f32>,
    query: &Tensor<f32>,
    alpha: f64,
    opts: ForwardOptions,
) -> Result<Tensor<f32>> {
    check_frame_pair(reference, query)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false)?;
    let r = g.constant(reference.clone());
    let q = g.constant(query.clone());
    let trace = forward(&mut g, r, q, alpha, &vars, opts)?;
    Ok(g.value(trace.output).clone())
}

// --- checkpoints ---------------------------------------------------------

const MAGIC: &[u8; 4] = b"EMAG";
const VERSION: u32 = 1;

/// Serialize to the `EMAG` v1 checkpoint layout (all integers little-endian).
pub fn write_checkpoint(model: &Model<f32>, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for f in model.config.as_fields() {
        w.write_all(&(f as u32).to_le_bytes())?;
    }
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedCheckpoint)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::TruncatedCheckpoint)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Model<f32>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4).map_err(|_| Error::CheckpointMagic)? != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let mut fields = [0usize; 8];
    for f in &mut fields {
        *f = cur.u32()? as usize;
    }
    let config = ModelConfig::from_fields(fields);
    config.validate()?;
    let template = Model::<f32>::init(config, 0)?;
    let count = cur.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let b = cur.take(2)?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::UnknownParameter("<non-UTF-8 name>".into()))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let expected = template.params.get(&name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if expected.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {shape:?}, configuration expects {:?}",
                expected.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let data = cur
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::from_vec(&shape, data)?)?;
    }
    if let Some((missing, _)) = template.params.iter().find(|(n, _)| params.get(n).is_none()) {
        return Err(Error::MissingParameter(missing.to_string()));
    }
    if cur.pos != buf.len() {
        return Err(Error::Config("trailing bytes after checkpoint payload".into()));
    }
    // Restore canonical parameter order.
    let mut ordered = ParamStore::new();
    for (name, _) in template.params.iter() {
        ordered.insert(name, params.get(name).expect("checked above").clone())?;
    }
    Ok(Model { config, params: ordered })
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes).expect("writing to memory cannot fail");
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
