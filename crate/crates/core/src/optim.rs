//! Adam and the training loop over a pool of supervision triples.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filter::MaskFill;
use crate::graph::Graph;
use crate::io::to_model_range;
use crate::losses::{color_perturb, total_loss, LossRecord, LossWeights};
use crate::model::{encode, forward, ForwardOptions, Model, ModelConfig};
use crate::params::{derive_seed, ParamStore};
use crate::synth::Triple;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments mirroring a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes, so a rejected step leaves `params` and `state` intact.
pub fn adam_step(params: &mut ParamStore<f32>, grads: &[Tensor<f32>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::arg("adam_step", format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("`{name}`: {:?} vs {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { name: name.to_string() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = f64::from(g);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let step = cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *w = (f64::from(*w) - step) as f32;
        }
    }
    Ok(())
}

/// One training example in the model's `[-1, 1]` range.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub reference: Tensor<f32>,
    pub query: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub alpha: f64,
}

impl TrainPair {
    pub fn from_triple(t: &Triple) -> Self {
        TrainPair {
            reference: to_model_range(&t.reference),
            query: to_model_range(&t.query),
            gt: to_model_range(&t.gt),
            alpha: t.row.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub mask_fill: MaskFill,
    pub init_seed: u64,
    /// Seeds the color jitter of the disentanglement term.
    pub jitter_seed: u64,
    /// Save every this many iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch: 4,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            mask_fill: MaskFill::NegInf,
            init_seed: 0,
            jitter_seed: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Flat `key = value` text; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::Config(format!("line {}: {why}: `{raw}`", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            let int = || value.parse::<usize>().map_err(|_| bad("expected an unsigned integer"));
            let seed = || value.parse::<u64>().map_err(|_| bad("expected an unsigned integer"));
            let real = || value.parse::<f64>().map_err(|_| bad("expected a number"));
            match key {
                "iterations" => c.iterations = int()?,
                "batch" => c.batch = int()?,
                "lr" => c.adam.lr = real()?,
                "beta1" => c.adam.beta1 = real()?,
                "beta2" => c.adam.beta2 = real()?,
                "adam_eps" => c.adam.eps = real()?,
                "mu1" => c.weights.mu1 = real()?,
                "mu2" => c.weights.mu2 = real()?,
                "epsilon" => c.weights.epsilon = real()?,
                "log_sigma" => c.weights.log_sigma = real()?,
                "edge" => c.weights.edge_variant = value.parse()?,
                "channels" => c.model.channels = int()?,
                "heads" => c.model.heads = int()?,
                "topk" => c.model.topk = int()?,
                "eta" => c.model.eta = int()?,
                "enc_blocks" => c.model.enc_blocks = int()?,
                "n1" => c.model.n1 = int()?,
                "n2" => c.model.n2 = int()?,
                "mask_fill" => {
                    c.mask_fill = match value {
                        "neg_inf" => MaskFill::NegInf,
                        "zero" => MaskFill::Zero,
                        _ => return Err(bad("expected neg_inf or zero")),
                    }
                }
                "init_seed" => c.init_seed = seed()?,
                "jitter_seed" => c.jitter_seed = seed()?,
                "checkpoint_every" => c.checkpoint_every = int()?,
                _ => return Err(bad("unknown key")),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Inverse of [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let fill = match self.mask_fill {
            MaskFill::NegInf => "neg_inf",
            MaskFill::Zero => "zero",
        };
        let _ = write!(
            s,
            "iterations = {}\nbatch = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\n\
             mu1 = {}\nmu2 = {}\nepsilon = {}\nlog_sigma = {}\nedge = {}\n\
             channels = {}\nheads = {}\ntopk = {}\neta = {}\nenc_blocks = {}\nn1 = {}\nn2 = {}\n\
             mask_fill = {fill}\ninit_seed = {}\njitter_seed = {}\ncheckpoint_every = {}\n",
            self.iterations,
            self.batch,
            self.adam.lr,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
            self.weights.mu1,
            self.weights.mu2,
            self.weights.epsilon,
            self.weights.log_sigma,
            self.weights.edge_variant,
            m.channels,
            m.heads,
            m.topk,
            m.eta,
            m.enc_blocks,
            m.n1,
            m.n2,
            self.init_seed,
            self.jitter_seed,
            self.checkpoint_every,
        );
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Loss terms and parameter gradients of one example.
pub fn example_gradients(
    model: &Model<f32>,
    pair: &TrainPair,
    cfg: &TrainConfig,
    jitter_seed: u64,
) -> Result<(LossRecord, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true)?;
    let opts = ForwardOptions { mask_fill: cfg.mask_fill };
    let r = g.constant(pair.reference.clone());
    let q = g.constant(pair.query.clone());
    let gt = g.constant(pair.gt.clone());
    let jittered = color_perturb(&pair.query, &mut ChaCha8Rng::seed_from_u64(jitter_seed))?;
    let jq = g.constant(jittered);
    let trace = forward(&mut g, r, q, pair.alpha, &vars, opts)?;
    let (texture, shape) = encode(&mut g, jq, &vars)?;
    let terms = total_loss(&mut g, &trace, (shape, texture), gt, &cfg.weights)?;
    let rec = terms.values(&g);
    if !rec.total.is_finite() {
        return Err(Error::NonFinite { op: "total_loss".into() });
    }
    let grads = g.backward(terms.total)?;
    Ok((rec, vars.bound.iter().map(|(_, v)| grads.get(v)).collect()))
}

/// Loss terms of every pair under the current parameters. Pair `i` is
/// jittered with seed `derive_seed(jitter_seed, i)`.
pub fn evaluate_pool(model: &Model<f32>, pairs: &[TrainPair], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut g = Graph::new();
            let vars = model.bind(&mut g, false)?;
            let opts = ForwardOptions { mask_fill: cfg.mask_fill };
            let (r, q, gt) = (g.constant(p.reference.clone()), g.constant(p.query.clone()), g.constant(p.gt.clone()));
            let jittered = color_perturb(&p.query, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.jitter_seed, i as u64)))?;
            let jq = g.constant(jittered);
            let trace = forward(&mut g, r, q, p.alpha, &vars, opts)?;
            let (texture, shape) = encode(&mut g, jq, &vars)?;
            Ok(total_loss(&mut g, &trace, (shape, texture), gt, &cfg.weights)?.values(&g))
        })
        .collect()
}

/// Runs `cfg.iterations` Adam steps. Iteration `i` uses pool entries
/// `(i·batch + b) mod len`; gradients are averaged in batch order. `on_iter`
/// sees the batch-mean losses and the updated model after every step.
/// On error the model holds the parameters of the last completed step.
pub fn train(
    cfg: &TrainConfig,
    model: &mut Model<f32>,
    pairs: &[TrainPair],
    mut on_iter: impl FnMut(usize, &LossRecord, &Model<f32>) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if pairs.is_empty() && cfg.iterations > 0 {
        return Err(Error::Dataset("training pool is empty".into()));
    }
    let mut state = AdamState::new(&model.params);
    let mut log = Vec::with_capacity(cfg.iterations);
    let scale = 1.0 / cfg.batch as f64;
    for iter in 0..cfg.iterations {
        let mut mean = LossRecord::default();
        let mut acc: Option<Vec<Tensor<f32>>> = None;
        for b in 0..cfg.batch {
            let slot = iter * cfg.batch + b;
            let pair = &pairs[slot % pairs.len()];
            let (rec, grads) = example_gradients(model, pair, cfg, derive_seed(cfg.jitter_seed, slot as u64))?;
            mean.accumulate(&rec, scale);
            match acc.as_mut() {
                None => acc = Some(grads.into_iter().map(|g| g.map(|v| v * scale as f32)).collect()),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &g)| *a += g * scale as f32);
                    }
                }
            }
        }
        adam_step(&mut model.params, &acc.expect("batch ≥ 1"), &mut state, &cfg.adam)?;
        on_iter(iter, &mean, model)?;
        log.push(mean);
    }
    Ok(log)
}

/// Mean of a trailing window of a series.
pub fn window_mean(xs: &[f64], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window);
    let s = &xs[start..end];
    s.iter().sum::<f64>() / s.len() as f64
}
