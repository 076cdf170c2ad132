//! 64-bit finite-difference verification of every differentiable operation.
//!
//! Each check reduces an operation's output to a scalar through a fixed
//! random projection `Σ out ⊙ R`, then compares the reverse-mode gradient of
//! every input against fourth-order central differences. Top-k selections
//! from the analytic pass are replayed during probing, so both sides
//! differentiate the same piece of the piecewise-smooth objective.

use serde::Serialize;

use crate::error::Result;
use crate::filter::{cross_cov_attention, init_block, mdta_block, mgr, BlockVars, MaskFill, Sparsity};
use crate::graph::{finite_diff_grad, max_rel_err, Graph, Var};
use crate::losses::{loss_edge, total_loss, EdgeVariant, LossWeights};
use crate::model::{encode, forward, ForwardOptions, Model, ModelConfig, ModelVars};
use crate::nn::Padding;
use crate::params::{derive_seed, Bound, ParamStore, SeedStream};
use crate::tensor::{Init, Tensor};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Builds the checked expression from leaf handles.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Configures an optional backward fault on every graph the check builds.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOptions {
    pub fault: Option<&'static str>,
}

fn projected_loss(
    g: &mut Graph<f64>,
    build: &Builder<'_>,
    inputs: &[Tensor<f64>],
    seed: u64,
) -> Result<(Vec<Var>, Var)> {
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(g, &vars)?;
    let shape = g.shape(out).to_vec();
    let proj = Tensor::new(&shape, Init::Uniform { lo: -1.0, hi: 1.0, seed })?;
    let proj = g.constant(proj);
    let prod = g.mul(out, proj)?;
    Ok((vars, g.sum(prod)?))
}

/// Maximum relative error over all inputs of `build`.
pub fn check(
    build: &Builder<'_>,
    inputs: &[Tensor<f64>],
    seed: u64,
    opts: CheckOptions,
) -> Result<f64> {
    let mut g = Graph::verifying();
    if let Some(op) = opts.fault {
        g.inject_backward_fault(op);
    }
    let (vars, loss) = projected_loss(&mut g, build, inputs, seed)?;
    let grads = g.backward(loss)?;
    let selections = std::mem::take(&mut g.selections);
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut failed = None;
        let numeric = finite_diff_grad(
            |x| {
                let mut ins = inputs.to_vec();
                ins[i] = x.clone();
                let mut g = Graph::new();
                g.replay = Some(selections.iter().cloned().collect());
                match projected_loss(&mut g, build, &ins, seed) {
                    Ok((_, loss)) => g.value(loss).data()[0],
                    Err(e) => {
                        failed = Some(e);
                        f64::NAN
                    }
                }
            },
            &inputs[i],
            FD_STEP,
        );
        if let Some(e) = failed {
            return Err(e);
        }
        worst = worst.max(max_rel_err(&analytic, &numeric, REL_FLOOR));
    }
    Ok(worst)
}

/// One line of a gradient-check report.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Random tensor in `[-1, 1)` for check inputs.
pub fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::new(shape, Init::Uniform { lo: -1.0, hi: 1.0, seed }).expect("valid shape")
}

/// Tolerance for single layers.
pub const LAYER_TOL: f64 = 1e-5;
/// Tolerance for the reduced end-to-end pipeline.
pub const PIPELINE_TOL: f64 = 1e-4;

fn group(name: &str, tol: f64, err: Result<f64>) -> GroupResult {
    // A build error is a failure, not an abort.
    let max_rel_err = err.unwrap_or(f64::INFINITY);
    GroupResult { group: name.to_string(), max_rel_err, tolerance: tol, passed: max_rel_err <= tol }
}

/// Parameters with biases and gains moved off their init constants so no
/// gradient path is trivially zero.
fn jittered_params(store: &ParamStore<f64>, seed: u64) -> (Vec<String>, Vec<Tensor<f64>>) {
    store
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let t = if name.ends_with(".b") || name.ends_with("norm") || name.ends_with("tau") {
                rand_input(t.shape(), derive_seed(seed, i as u64)).map(|v| 0.5 + 0.3 * v)
            } else {
                t.clone()
            };
            (name.to_string(), t)
        })
        .unzip()
}

fn rebind(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

/// Every layer group, then optionally the reduced pipeline, in a fixed order.
pub fn run_suite(seed: u64, include_pipeline: bool, opts: CheckOptions) -> Vec<GroupResult> {
    let s = |i: u64| derive_seed(seed, i);
    let r = |shape: &[usize], i: u64| rand_input(shape, s(i));
    let mut out = Vec::new();
    let mut layer = |name: &str, build: &Builder<'_>, inputs: &[Tensor<f64>]| {
        out.push(group(name, LAYER_TOL, check(build, inputs, s(1000 + out.len() as u64), opts)));
    };

    let conv_in = [r(&[5, 5, 2], 1), r(&[3, 3, 2, 3], 2), r(&[3], 3)];
    layer("conv2d", &|g, v| {
        let a = g.conv2d(v[0], v[1], v[2], 2, Padding::Zero)?;
        let b = g.conv2d(v[0], v[1], v[2], 1, Padding::Reflect)?;
        let (a, b) = (g.sum(a)?, g.mean(b)?);
        g.add(a, b)
    }, &conv_in);
    layer("depthwise_conv2d", &|g, v| g.depthwise_conv2d(v[0], v[1], v[2], Padding::Reflect), &[r(&[5, 6, 3], 4), r(&[5, 5, 1, 3], 5), r(&[3], 6)]);
    layer("pointwise_conv", &|g, v| g.pointwise_conv(v[0], v[1], v[2]), &[r(&[3, 4, 5], 7), r(&[1, 1, 5, 3], 8), r(&[3], 9)]);
    layer("layer_norm_channel", &|g, v| g.layer_norm_channel(v[0], v[1]), &[r(&[3, 2, 6], 10), r(&[6], 11)]);
    layer("gelu", &|g, v| g.gelu(v[0]), &[r(&[4, 5], 12).map(|v| 3.0 * v)]);
    layer("softmax_rows", &|g, v| g.softmax_rows(v[0]), &[r(&[4, 5], 13)]);
    layer("pixel_shuffle", &|g, v| g.pixel_shuffle(v[0], 2), &[r(&[2, 3, 8], 14)]);
    layer("cross_cov_attention", &|g, v| {
        let (q, k) = (g.l2_normalize_columns(v[0])?, g.l2_normalize_columns(v[1])?);
        let ca = cross_cov_attention(g, q, k, v[2])?;
        let sca = g.softmax_rows(ca)?;
        g.matmul_t(v[3], false, sca, true)
    }, &[r(&[9, 4], 15), r(&[9, 4], 16), r(&[1], 17).map(|v| 1.0 + 0.5 * v), r(&[9, 4], 18)]);
    layer("topk_mask", &|g, v| {
        let masked = g.topk_mask(v[0], 2, MaskFill::NegInf)?;
        let sca = g.softmax_rows(masked)?;
        let zero = g.topk_mask(v[0], 3, MaskFill::Zero)?;
        g.concat_channels(&[sca, zero])
    }, &[r(&[5, 5], 19).map(|v| 4.0 * v)]);

    let mut store = ParamStore::<f64>::new();
    let mut seeds = SeedStream::new(s(20));
    init_block(&mut store, "blk", 12, 2, 3, &mut seeds).expect("valid block geometry");
    let (names, mut inputs) = jittered_params(&store, s(21));
    inputs.push(r(&[4, 4, 12], 22));
    let n = names.len();
    let blk = |v: &[Var]| BlockVars::bind(&rebind(&names, &v[..n]), "blk", 2);
    layer("mgr", &|g, v| mgr(g, v[n], &blk(v)?.mgr), &inputs);
    layer("mdta_block", &|g, v| mdta_block(g, v[n], &blk(v)?, Sparsity::TopK { k: 2, fill: MaskFill::NegInf }), &inputs);

    let pwm = [r(&[3, 3, 4], 23), r(&[3, 3, 4], 24), r(&[1, 1, 4, 4], 25), r(&[4], 26), r(&[1, 1, 4, 4], 27), r(&[4], 28)];
    layer("pwm", &|g, v| {
        let inner = g.pointwise_conv(v[0], v[2], v[3])?;
        let inner = g.gelu(inner)?;
        let scaled = g.scale(inner, 5.0)?;
        let outer = g.pointwise_conv(scaled, v[4], v[5])?;
        let outer = g.gelu(outer)?;
        g.add(outer, v[1])
    }, &pwm);

    let w = LossWeights::default();
    let sobel = LossWeights { edge_variant: EdgeVariant::Sobel, ..w };
    let pair = [r(&[6, 7, 3], 29), r(&[6, 7, 3], 30)];
    layer("charbonnier", &|g, v| g.charbonnier(v[0], v[1], w.epsilon), &pair);
    layer("loss_edge_log", &|g, v| loss_edge(g, v[0], v[1], &w), &pair);
    layer("loss_edge_sobel", &|g, v| loss_edge(g, v[0], v[1], &sobel), &pair);

    if include_pipeline {
        out.push(group("pipeline", PIPELINE_TOL, pipeline_check(s(31), opts)));
    }
    out
}

/// Total objective of the reduced model on 8×8 frames, differentiated with
/// respect to every parameter and all four input frames.
pub fn pipeline_check(seed: u64, opts: CheckOptions) -> Result<f64> {
    let model = Model::<f64>::init(ModelConfig::reduced(), seed)?;
    let (names, mut inputs) = jittered_params(&model.params, derive_seed(seed, 1));
    for i in 0..4 {
        inputs.push(rand_input(&[8, 8, 3], derive_seed(seed, 2 + i)));
    }
    let n = names.len();
    let config = model.config;
    let weights = LossWeights::default();
    check(
        &|g, v| {
            let m = ModelVars::from_bound(rebind(&names, &v[..n]), &config)?;
            let (reference, query, jittered, gt) = (v[n], v[n + 1], v[n + 2], v[n + 3]);
            let trace = forward(g, reference, query, 3.0, &m, ForwardOptions::default())?;
            let (texture, shape) = encode(g, jittered, &m)?;
            let terms = total_loss(g, &trace, (shape, texture), gt, &weights)?;
            // Scalar output; the projection in `check` is then a fixed scale.
            Ok(terms.total)
        },
        &inputs,
        seed,
        opts,
    )
}
