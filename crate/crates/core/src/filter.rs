//! The dynamic filter: channel (cross-covariance) attention with row-wise
//! top-k sparse masking, the multi-scale gating regulator, and their
//! composition into pre-norm residual Transformer blocks.

use crate::error::{Error, Result};
use crate::graph::{Function, Graph, Var};
use crate::nn::Padding;
use crate::params::{Bound, ConvVars, ParamStore, SeedStream};
use crate::tensor::{Real, Tensor};

/// Floor on Q/K column norms.
pub const NORM_FLOOR: f64 = 1e-8;

/// What a masked attention logit becomes before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskFill {
    /// `-inf`: masked channels receive exactly zero attention weight.
    #[default]
    NegInf,
    /// Literal `0` logit, which still receives `e⁰` softmax mass.
    Zero,
}

/// Attention sparsity of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sparsity {
    Dense,
    TopK { k: usize, fill: MaskFill },
}

// --- column normalization ------------------------------------------------

struct L2ColsFn {
    cols: usize,
}

fn column_norms<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut sq = vec![T::zero(); cols];
    for row in x.chunks_exact(cols) {
        sq.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v * v);
    }
    sq.into_iter().map(|s| s.sqrt()).collect()
}

impl<T: Real> Function<T> for L2ColsFn {
    fn name(&self) -> &'static str {
        "l2_normalize_columns"
    }

    fn backward(&self, x: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let cols = self.cols;
        let norms = column_norms(x[0].data(), cols);
        let floor = T::of(NORM_FLOOR);
        let mut dots = vec![T::zero(); cols];
        for (y, gr) in out.data().chunks_exact(cols).zip(g.chunks_exact(cols)) {
            for c in 0..cols {
                dots[c] = dots[c] + y[c] * gr[c];
            }
        }
        let mut dx = vec![T::zero(); g.len()];
        for ((d, y), gr) in dx
            .chunks_exact_mut(cols)
            .zip(out.data().chunks_exact(cols))
            .zip(g.chunks_exact(cols))
        {
            for c in 0..cols {
                d[c] = if norms[c] > floor {
                    (gr[c] - y[c] * dots[c]) / norms[c]
                } else {
                    gr[c] / floor
                };
            }
        }
        vec![Some(dx)]
    }
}

// --- top-k mask ----------------------------------------------------------

struct TopKFn {
    keep: Vec<bool>,
}

impl<T: Real> Function<T> for TopKFn {
    fn name(&self) -> &'static str {
        "topk_mask"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = g
            .iter()
            .zip(&self.keep)
            .map(|(&g, &k)| if k { g } else { T::zero() })
            .collect();
        vec![Some(dx)]
    }
}

/// Keep flags for one row: every entry `>=` the row's k-th largest value.
pub fn topk_keep<T: Real>(row: &[T], k: usize) -> Vec<bool> {
    let mut scratch = row.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let threshold = *kth;
    row.iter().map(|&v| v >= threshold).collect()
}

impl<T: Real> Graph<T> {
    /// Scale every column of an `N×C` matrix to unit L2 norm along `N`.
    pub fn l2_normalize_columns(&mut self, x: Var) -> Result<Var> {
        let [_, cols] = self.shape(x)[..] else {
            return Err(Error::shape("l2_normalize_columns", format!("{:?}", self.shape(x))));
        };
        let floor = T::of(NORM_FLOOR);
        let norms: Vec<T> = column_norms(self.value(x).data(), cols)
            .into_iter()
            .map(|n| n.max(floor))
            .collect();
        let data = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(&norms).map(|(&v, &n)| v / n))
            .collect();
        let out = Tensor::from_vec(self.shape(x), data)?;
        self.push(out, vec![x], Box::new(L2ColsFn { cols }))
    }

    /// Row-wise top-k mask of a square attention matrix.
    pub fn topk_mask(&mut self, ca: Var, k: usize, fill: MaskFill) -> Result<Var> {
        let [rows, cols] = self.shape(ca)[..] else {
            return Err(Error::shape("topk_mask", format!("{:?}", self.shape(ca))));
        };
        if k == 0 || k > cols {
            return Err(Error::arg("topk_mask", format!("k = {k} outside 1..={cols}")));
        }
        let fill_value = match fill {
            MaskFill::NegInf => T::neg_infinity(),
            MaskFill::Zero => T::zero(),
        };
        let replayed = self.replay.as_mut().and_then(|r| r.pop_front());
        let keep = match replayed {
            Some(keep) if keep.len() == rows * cols => keep,
            Some(_) => return Err(Error::shape("topk_mask", "replayed selection does not fit")),
            None => self.value(ca).data().chunks_exact(cols).flat_map(|row| topk_keep(row, k)).collect(),
        };
        self.selections.push(keep.clone());
        let data = self
            .value(ca)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &kept)| if kept { v } else { fill_value })
            .collect();
        let out = Tensor::from_vec(&[rows, cols], data)?;
        self.push(out, vec![ca], Box::new(TopKFn { keep }))
    }
}

// --- parameters ----------------------------------------------------------

/// Handles of one attention sub-layer.
#[derive(Debug, Clone)]
pub struct AttnVars {
    /// (1×1, 3×3 depth-wise) pairs producing Q, K and V.
    pub q: (ConvVars, ConvVars),
    pub k: (ConvVars, ConvVars),
    pub v: (ConvVars, ConvVars),
    pub out: ConvVars,
    /// Per-head temperature, shape `(heads)`.
    pub tau: Var,
    pub heads: usize,
}

/// Handles of one multi-scale gating regulator.
#[derive(Debug, Clone)]
pub struct MgrVars {
    pub norm: Var,
    pub expand: ConvVars,
    pub mix: ConvVars,
    pub branches: [ConvVars; 3],
    pub project: ConvVars,
}

/// Handles of one Transformer block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub norm: Var,
    pub attn: AttnVars,
    pub mgr: MgrVars,
}

/// Kernel sizes of the three context branches.
pub const BRANCH_KERNELS: [usize; 3] = [1, 3, 5];

/// Check the divisibility constraints of a block of width `c`.
pub fn validate_block(c: usize, heads: usize, eta: usize) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels not divisible into {heads} heads")));
    }
    if (eta * c) % 6 != 0 || eta == 0 {
        return Err(Error::Config(format!("η·C = {} must be a positive multiple of 6", eta * c)));
    }
    Ok(())
}

/// Add the parameters of one block named `prefix.*` to `store`.
pub fn init_block<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    heads: usize,
    eta: usize,
    seeds: &mut SeedStream,
) -> Result<()> {
    validate_block(c, heads, eta)?;
    store.add_constant(&format!("{prefix}.norm"), &[c], 1.0)?;
    for name in ["q", "k", "v"] {
        store.add_conv(&format!("{prefix}.attn.{name}_pw"), 1, c, c, seeds.next_seed())?;
        store.add_depthwise(&format!("{prefix}.attn.{name}_dw"), 3, c, seeds.next_seed())?;
    }
    store.add_conv(&format!("{prefix}.attn.out"), 1, c, c, seeds.next_seed())?;
    store.add_constant(&format!("{prefix}.attn.tau"), &[heads], 1.0)?;

    let wide = eta * c;
    store.add_constant(&format!("{prefix}.mgr.norm"), &[c], 1.0)?;
    store.add_conv(&format!("{prefix}.mgr.expand"), 1, c, wide, seeds.next_seed())?;
    store.add_depthwise(&format!("{prefix}.mgr.mix"), 3, wide, seeds.next_seed())?;
    for k in BRANCH_KERNELS {
        store.add_depthwise(&format!("{prefix}.mgr.branch{k}"), k, wide / 6, seeds.next_seed())?;
    }
    store.add_conv(&format!("{prefix}.mgr.project"), 1, wide / 2, c, seeds.next_seed())
}

impl BlockVars {
    pub fn bind(b: &Bound, prefix: &str, heads: usize) -> Result<Self> {
        let pair = |n: &str| -> Result<(ConvVars, ConvVars)> {
            Ok((b.conv(&format!("{prefix}.attn.{n}_pw"))?, b.conv(&format!("{prefix}.attn.{n}_dw"))?))
        };
        let attn = AttnVars {
            q: pair("q")?,
            k: pair("k")?,
            v: pair("v")?,
            out: b.conv(&format!("{prefix}.attn.out"))?,
            tau: b.var(&format!("{prefix}.attn.tau"))?,
            heads,
        };
        let mgr = MgrVars {
            norm: b.var(&format!("{prefix}.mgr.norm"))?,
            expand: b.conv(&format!("{prefix}.mgr.expand"))?,
            mix: b.conv(&format!("{prefix}.mgr.mix"))?,
            branches: [
                b.conv(&format!("{prefix}.mgr.branch1"))?,
                b.conv(&format!("{prefix}.mgr.branch3"))?,
                b.conv(&format!("{prefix}.mgr.branch5"))?,
            ],
            project: b.conv(&format!("{prefix}.mgr.project"))?,
        };
        Ok(BlockVars { norm: b.var(&format!("{prefix}.norm"))?, attn, mgr })
    }
}

// --- operations ----------------------------------------------------------

/// Per-head `(Q, K, V)`, each `(H·W)×Ĉ`; Q and K have unit-norm columns.
pub fn qkv_project<T: Real>(g: &mut Graph<T>, x: Var, p: &AttnVars) -> Result<Vec<(Var, Var, Var)>> {
    let [h, w, c] = g.shape(x)[..] else {
        return Err(Error::shape("qkv_project", format!("{:?}", g.shape(x))));
    };
    if p.heads == 0 || c % p.heads != 0 {
        return Err(Error::shape("qkv_project", format!("{c} channels, {} heads", p.heads)));
    }
    let head_c = c / p.heads;
    let mut project = |pair: &(ConvVars, ConvVars)| -> Result<Var> {
        let y = g.pointwise_conv(x, pair.0.w, pair.0.b)?;
        let y = g.depthwise_conv2d(y, pair.1.w, pair.1.b, Padding::Reflect)?;
        g.reshape(y, &[h * w, c])
    };
    let (q, k, v) = (project(&p.q)?, project(&p.k)?, project(&p.v)?);
    (0..p.heads)
        .map(|i| {
            let qh = g.slice_channels(q, i * head_c, head_c)?;
            let kh = g.slice_channels(k, i * head_c, head_c)?;
            let vh = g.slice_channels(v, i * head_c, head_c)?;
            Ok((g.l2_normalize_columns(qh)?, g.l2_normalize_columns(kh)?, vh))
        })
        .collect()
}

/// `CA = τ·Kᵀ·Q`, a `Ĉ×Ĉ` channel-correlation matrix.
pub fn cross_cov_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, tau: Var) -> Result<Var> {
    let ca = g.matmul_t(k, true, q, false)?;
    g.scale_by(ca, tau)
}

/// `SCA = softmax_rows(masked CA)`; returns `(output, SCA)` where
/// `output = V·SCAᵀ`, so output channel `j` mixes value channels by SCA row `j`.
pub fn sparse_attention_apply<T: Real>(g: &mut Graph<T>, masked: Var, v: Var) -> Result<(Var, Var)> {
    let sca = g.softmax_rows(masked)?;
    Ok((g.matmul_t(v, false, sca, true)?, sca))
}

/// Full attention sub-layer on `(H, W, C)`, including the output projection.
pub fn attention<T: Real>(g: &mut Graph<T>, x: Var, p: &AttnVars, sparsity: Sparsity) -> Result<Var> {
    let [h, w, c] = g.shape(x)[..] else {
        return Err(Error::shape("attention", format!("{:?}", g.shape(x))));
    };
    let heads = qkv_project(g, x, p)?;
    let head_c = c / p.heads;
    let mut outs = Vec::with_capacity(p.heads);
    for (i, (q, k, v)) in heads.into_iter().enumerate() {
        let tau = g.slice_channels(p.tau, i, 1)?;
        let mut ca = cross_cov_attention(g, q, k, tau)?;
        if let Sparsity::TopK { k: topk, fill } = sparsity {
            if topk > head_c {
                return Err(Error::Config(format!("top-k {topk} exceeds head width {head_c}")));
            }
            ca = g.topk_mask(ca, topk, fill)?;
        }
        outs.push(sparse_attention_apply(g, ca, v)?.0);
    }
    let merged = g.concat_channels(&outs)?;
    let merged = g.reshape(merged, &[h, w, c])?;
    g.pointwise_conv(merged, p.out.w, p.out.b)
}

/// Multi-scale gating regulator: norm, expand, depth-wise mix, then a GELU
/// gate path times a GELU'd {1,3,5}-kernel context path, projected back.
pub fn mgr<T: Real>(g: &mut Graph<T>, x: Var, p: &MgrVars) -> Result<Var> {
    let n = g.layer_norm_channel(x, p.norm)?;
    let e = g.pointwise_conv(n, p.expand.w, p.expand.b)?;
    let wide = g.value(e).channels();
    if wide % 6 != 0 {
        return Err(Error::shape("mgr", format!("expanded width {wide} not divisible by 6")));
    }
    let e = g.depthwise_conv2d(e, p.mix.w, p.mix.b, Padding::Reflect)?;
    let (half, sixth) = (wide / 2, wide / 6);
    let gate = g.slice_channels(e, 0, half)?;
    let context = g.slice_channels(e, half, half)?;
    let mut branches = Vec::with_capacity(3);
    for (i, conv) in p.branches.iter().enumerate() {
        let part = g.slice_channels(context, i * sixth, sixth)?;
        branches.push(g.depthwise_conv2d(part, conv.w, conv.b, Padding::Reflect)?);
    }
    let context = g.concat_channels(&branches)?;
    let context = g.gelu(context)?;
    let gate = g.gelu(gate)?;
    let gated = g.mul(gate, context)?;
    g.pointwise_conv(gated, p.project.w, p.project.b)
}

/// `x₁ = x + Attn(LN(x))`, `out = x₁ + MGR(x₁)` (MGR carries its own norm).
pub fn mdta_block<T: Real>(g: &mut Graph<T>, x: Var, p: &BlockVars, sparsity: Sparsity) -> Result<Var> {
    let n = g.layer_norm_channel(x, p.norm)?;
    let a = attention(g, n, &p.attn, sparsity)?;
    let x1 = g.add(x, a)?;
    let m = mgr(g, x1, &p.mgr)?;
    g.add(x1, m)
}

/// Sequential application of sparse blocks; zero blocks is the identity.
pub fn dynamic_filter<T: Real>(g: &mut Graph<T>, x: Var, blocks: &[BlockVars], k: usize, fill: MaskFill) -> Result<Var> {
    blocks
        .iter()
        .try_fold(x, |h, b| mdta_block(g, h, b, Sparsity::TopK { k, fill }))
}
