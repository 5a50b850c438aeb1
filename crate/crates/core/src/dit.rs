//! Toy diffusion transformer with in-context conditioning, an intermediate
//! REPA head and x-prediction output, plus the flow-matching + REPA training
//! loop.
//!
//! Flow convention: `x_t = (1−t)·x + t·eps`, `t = 0` clean, `t = 1` noise.

use rand::Rng as _;

use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{cosine_distance_mean, Graph, Var};
use crate::optim::{clip_grad_norm, ema_update, lr_at, optimizer_step, TrainSchedule};
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Number of in-context time tokens.
pub const TIME_TOKENS: usize = 4;
/// Fourier frequencies of the time embedding, geometric from 1 to 64.
pub const TIME_FREQS: usize = 8;
const TIME_MAX_FREQ: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiTConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// REPA head reads the hidden state after this many blocks.
    pub tap: usize,
    pub classes: usize,
    /// Latent tokens per item.
    pub tokens: usize,
    /// Latent channels.
    pub channels: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig { depth: 6, width: 64, heads: 4, mlp_hidden: 128, tap: 2, classes: 8, tokens: 64, channels: 32 }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return invalid("DiT depth, width, heads and mlp_hidden must be positive");
        }
        if self.width % self.heads != 0 {
            return invalid(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.tap == 0 || self.tap >= self.depth {
            return invalid(format!("REPA tap {} must lie in [1, depth={})", self.tap, self.depth));
        }
        if self.classes < 1 || self.tokens == 0 || self.channels == 0 {
            return invalid("DiT needs classes, tokens and channels");
        }
        Ok(())
    }

    /// Sequence length: time tokens, one condition token, latent tokens.
    pub fn seq_len(&self) -> usize {
        TIME_TOKENS + 1 + self.tokens
    }

    /// Half depth (at least 2 blocks) with the tap scaled to match.
    pub fn weak(&self) -> DiTConfig {
        let depth = (self.depth / 2).max(2);
        let tap = (self.tap * depth / self.depth).clamp(1, depth - 1);
        DiTConfig { depth, tap, ..*self }
    }
}

/// Conditioning input: a class id or the null (unconditional) token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    Class(usize),
    Null,
}

impl Cond {
    fn index(self, classes: usize) -> Result<usize> {
        match self {
            Cond::Class(c) if c < classes => Ok(c),
            Cond::Class(c) => Err(Error::UnknownClass { class: c, classes }),
            Cond::Null => Ok(classes),
        }
    }
}

/// Noisy state for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x_t: Tensor<f32>,
    /// One time per item.
    pub t: Vec<f64>,
    pub eps: Tensor<f32>,
}

/// `x_t = (1−t)·x + t·eps` per item; `t` must lie in `(0, 1]`.
pub fn make_noisy(x: &Tensor<f32>, eps: &Tensor<f32>, t: &[f64]) -> Result<FlowState> {
    x.check_same_dims(eps, "make_noisy")?;
    let b = x.dims().first().copied().unwrap_or(0);
    if t.len() != b {
        return shape_err("make_noisy", format!("{} times for batch {b}", t.len()));
    }
    if let Some(bad) = t.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return invalid(format!("flow time {bad} outside (0, 1]"));
    }
    let per = x.len() / b.max(1);
    let mut out = Vec::with_capacity(x.len());
    for (i, &ti) in t.iter().enumerate() {
        let (a, s) = ((1.0 - ti) as f32, ti as f32);
        let xs = &x.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&xv, &ev)| a * xv + s * ev));
    }
    Ok(FlowState { x_t: Tensor::from_vec(x.dims(), out)?, t: t.to_vec(), eps: eps.clone() })
}

/// `t = sigmoid(g)`, `g ~ Normal(mu, sigma²)`, kept strictly inside (0, 1).
pub fn sample_time_logitnormal(n: usize, mu: f64, sigma: f64, r: &mut rng::Rng) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return invalid(format!("logit-normal sigma must be positive, got {sigma}"));
    }
    Ok(rng::normal_vec(r, n)
        .into_iter()
        .map(|z| (1.0 / (1.0 + (-(mu + sigma * z)).exp())).clamp(1e-12, 1.0 - 1e-12))
        .collect())
}

/// Fourier features `[sin(2π f t), cos(2π f t)]` for each item, `[b, 2F]`.
fn time_features<T: Real>(t: &[f64]) -> Tensor<T> {
    let mut out = Vec::with_capacity(t.len() * 2 * TIME_FREQS);
    for &ti in t {
        for k in 0..TIME_FREQS {
            let f = TIME_MAX_FREQ.powf(k as f64 / (TIME_FREQS - 1) as f64);
            let a = std::f64::consts::TAU * f * ti;
            out.push(T::lit(a.sin()));
            out.push(T::lit(a.cos()));
        }
    }
    Tensor::from_vec(&[t.len(), 2 * TIME_FREQS], out).expect("dims")
}

/// Handles into a built forward pass.
pub struct GraphOutputs {
    /// `[batch*N, d]` x-prediction of the full network.
    pub x_full: Var,
    /// `[batch*N, d]` x-prediction of the REPA head.
    pub x_repa: Var,
    /// `[batch*N, width]` latent-position hidden state at the tap.
    pub h: Var,
    /// `[batch*S, width]` output of every block.
    pub blocks: Vec<Var>,
}

/// Builds the forward pass on `g`. `cond` holds class indices with
/// `classes` meaning null. `train` exposes parameters to gradients.
pub fn build_forward<T: Real>(
    cfg: &DiTConfig,
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    x_t: &Tensor<T>,
    t: &[f64],
    cond: &[usize],
    train: bool,
) -> Result<GraphOutputs> {
    let dims = x_t.dims();
    if dims.len() != 3 || dims[1] != cfg.tokens || dims[2] != cfg.channels {
        return shape_err("dit forward", format!("x_t {dims:?}, model expects [_, {}, {}]", cfg.tokens, cfg.channels));
    }
    let b = dims[0];
    if t.len() != b || cond.len() != b {
        return shape_err("dit forward", format!("batch {b} with {} times and {} conds", t.len(), cond.len()));
    }
    let (n, s) = (cfg.tokens, cfg.seq_len());
    let p = |g: &mut Graph<T>, name: &str| if train { g.param(ps, name) } else { g.frozen(ps, name) };

    let tf = g.input(time_features::<T>(t));
    let mut parts = Vec::with_capacity(TIME_TOKENS + 2);
    for j in 0..TIME_TOKENS {
        let (w, bias) = (p(g, &format!("time{j}.w"))?, p(g, &format!("time{j}.b"))?);
        parts.push((g.linear(tf, w, bias)?, 1));
    }
    let table = p(g, "cond.emb")?;
    parts.push((g.gather(table, cond)?, 1));
    let xin = g.input(x_t.clone().reshape(&[b * n, cfg.channels])?);
    let (iw, ib) = (p(g, "in.w")?, p(g, "in.b")?);
    let lat = g.linear(xin, iw, ib)?;
    let pos = p(g, "pos")?;
    parts.push((g.add_pos(lat, pos)?, n));
    let mut z = g.concat_seq(&parts, b)?;

    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let u = g.layer_norm(z);
        let (qw, qb) = (p(g, &format!("b{i}.qkv.w"))?, p(g, &format!("b{i}.qkv.b"))?);
        let qkv = g.linear(u, qw, qb)?;
        let att = g.attention(qkv, b, s, cfg.heads)?;
        let (ow, ob) = (p(g, &format!("b{i}.proj.w"))?, p(g, &format!("b{i}.proj.b"))?);
        let att = g.linear(att, ow, ob)?;
        z = g.add(z, att)?;
        let u = g.layer_norm(z);
        let (w1, b1) = (p(g, &format!("b{i}.fc1.w"))?, p(g, &format!("b{i}.fc1.b"))?);
        let hdn = g.linear(u, w1, b1)?;
        let hdn = g.gelu(hdn);
        let (w2, b2) = (p(g, &format!("b{i}.fc2.w"))?, p(g, &format!("b{i}.fc2.b"))?);
        let hdn = g.linear(hdn, w2, b2)?;
        z = g.add(z, hdn)?;
        blocks.push(z);
    }

    let h = g.slice_seq(blocks[cfg.tap - 1], b, s, TIME_TOKENS + 1, n)?;
    let (rw, rb) = (p(g, "repa.w")?, p(g, "repa.b")?);
    let x_repa = g.linear(h, rw, rb)?;
    let last = g.slice_seq(z, b, s, TIME_TOKENS + 1, n)?;
    let last = g.layer_norm(last);
    let (fw, fb) = (p(g, "out.w")?, p(g, "out.b")?);
    let x_full = g.linear(last, fw, fb)?;
    Ok(GraphOutputs { x_full, x_repa, h, blocks })
}

/// Mean over tokens of `1 − cos(x_repa, target)`; zero-norm tokens count as
/// similarity 0.
pub fn repa_loss(x_repa: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    x_repa.check_same_dims(target, "repa_loss")?;
    Ok(cosine_distance_mean(x_repa.data(), target.data(), x_repa.last_dim()) as f64)
}

/// Loss terms `(total, fm, repa)` from predictions; `total = fm + λ·repa`.
pub fn fm_terms(
    x_full: &Tensor<f32>,
    x_repa: &Tensor<f32>,
    x: &Tensor<f32>,
    repa_target: &Tensor<f32>,
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    x_full.check_same_dims(x, "fm_terms")?;
    let fm = x_full.data().iter().zip(x.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>()
        / x.len().max(1) as f64;
    let repa = repa_loss(x_repa, repa_target)?;
    Ok((fm + lambda * repa, fm, repa))
}

/// Model outputs reshaped to `[batch, N, ·]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub x_full: Tensor<f32>,
    pub h: Tensor<f32>,
    pub x_repa: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiTModel {
    pub config: DiTConfig,
    pub params: ParamSet<f32>,
}

fn gaussian(dims: &[usize], std: f64, r: &mut rng::Rng) -> Tensor<f32> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, rng::normal_vec(r, n).into_iter().map(|v| (v * std) as f32).collect()).expect("dims")
}

impl DiTModel {
    pub fn init(config: DiTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (w, h, d) = (config.width, config.mlp_hidden, config.channels);
        let mut r = rng::stream(seed, "dit-init", 0);
        let mut ps = ParamSet::new();
        let tf = 2 * TIME_FREQS;
        for j in 0..TIME_TOKENS {
            ps.insert(format!("time{j}.w"), gaussian(&[tf, w], 1.0 / (tf as f64).sqrt(), &mut r))?;
            ps.insert(format!("time{j}.b"), gaussian(&[w], 0.02, &mut r))?;
        }
        ps.insert("cond.emb", gaussian(&[config.classes + 1, w], 1.0, &mut r))?;
        ps.insert("in.w", gaussian(&[d, w], 1.0 / (d as f64).sqrt(), &mut r))?;
        ps.insert("in.b", Tensor::zeros(&[w]))?;
        ps.insert("pos", gaussian(&[config.tokens, w], 0.5, &mut r))?;
        let res = 1.0 / (2.0 * config.depth as f64).sqrt();
        for i in 0..config.depth {
            ps.insert(format!("b{i}.qkv.w"), gaussian(&[w, 3 * w], 1.0 / (w as f64).sqrt(), &mut r))?;
            ps.insert(format!("b{i}.qkv.b"), Tensor::zeros(&[3 * w]))?;
            ps.insert(format!("b{i}.proj.w"), gaussian(&[w, w], res / (w as f64).sqrt(), &mut r))?;
            ps.insert(format!("b{i}.proj.b"), Tensor::zeros(&[w]))?;
            ps.insert(format!("b{i}.fc1.w"), gaussian(&[w, h], (2.0 / w as f64).sqrt(), &mut r))?;
            ps.insert(format!("b{i}.fc1.b"), Tensor::zeros(&[h]))?;
            ps.insert(format!("b{i}.fc2.w"), gaussian(&[h, w], res / (h as f64).sqrt(), &mut r))?;
            ps.insert(format!("b{i}.fc2.b"), Tensor::zeros(&[w]))?;
        }
        ps.insert("repa.w", gaussian(&[w, d], 1.0 / (w as f64).sqrt(), &mut r))?;
        ps.insert("repa.b", Tensor::zeros(&[d]))?;
        ps.insert("out.w", gaussian(&[w, d], 0.5 / (w as f64).sqrt(), &mut r))?;
        ps.insert("out.b", Tensor::zeros(&[d]))?;
        Ok(DiTModel { config, params: ps })
    }

    /// Wraps stored weights after checking names and shapes.
    pub fn from_params(config: DiTConfig, params: ParamSet<f32>) -> Result<Self> {
        Self::init(config, 0)?.params.check_compatible(&params)?;
        Ok(DiTModel { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn cond_indices(&self, cond: &[Cond]) -> Result<Vec<usize>> {
        cond.iter().map(|c| c.index(self.config.classes)).collect()
    }

    /// Inference forward pass on `x_t: [batch, N, d]`.
    pub fn forward(&self, x_t: &Tensor<f32>, t: &[f64], cond: &[Cond]) -> Result<ModelOutputs> {
        let idx = self.cond_indices(cond)?;
        let b = x_t.dims().first().copied().unwrap_or(0);
        let (n, d, w) = (self.config.tokens, self.config.channels, self.config.width);
        let (mut xf, mut hh, mut xr) = (Vec::new(), Vec::new(), Vec::new());
        const CHUNK: usize = 256;
        for start in (0..b).step_by(CHUNK) {
            let count = CHUNK.min(b - start);
            let mut g = Graph::new();
            let o = build_forward(
                &self.config,
                &mut g,
                &self.params,
                &x_t.slice_outer(start, count)?,
                &t[start.min(t.len())..(start + count).min(t.len())],
                &idx[start.min(idx.len())..(start + count).min(idx.len())],
                false,
            )?;
            xf.extend_from_slice(g.value(o.x_full).data());
            hh.extend_from_slice(g.value(o.h).data());
            xr.extend_from_slice(g.value(o.x_repa).data());
        }
        if b == 0 {
            return shape_err("dit forward", "empty batch");
        }
        Ok(ModelOutputs {
            x_full: Tensor::from_vec(&[b, n, d], xf)?,
            h: Tensor::from_vec(&[b, n, w], hh)?,
            x_repa: Tensor::from_vec(&[b, n, d], xr)?,
        })
    }

    /// Mean over latent positions of every block's output: one `[batch, width]`
    /// tensor per depth.
    pub fn block_features(&self, x_t: &Tensor<f32>, t: &[f64], cond: &[Cond]) -> Result<Vec<Tensor<f32>>> {
        let idx = self.cond_indices(cond)?;
        let b = x_t.dims().first().copied().unwrap_or(0);
        let (n, s, w) = (self.config.tokens, self.config.seq_len(), self.config.width);
        let mut per_depth: Vec<Vec<f32>> = vec![Vec::with_capacity(b * w); self.config.depth];
        const CHUNK: usize = 256;
        for start in (0..b).step_by(CHUNK) {
            let count = CHUNK.min(b - start);
            let mut g = Graph::new();
            let o = build_forward(
                &self.config,
                &mut g,
                &self.params,
                &x_t.slice_outer(start, count)?,
                &t[start..start + count],
                &idx[start..start + count],
                false,
            )?;
            for (dst, &blk) in per_depth.iter_mut().zip(&o.blocks) {
                let lat = g.slice_seq(blk, count, s, TIME_TOKENS + 1, n)?;
                let pooled = g.seq_mean(lat, count, n)?;
                dst.extend_from_slice(g.value(pooled).data());
            }
        }
        per_depth.into_iter().map(|v| Tensor::from_vec(&[b, w], v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lambda_repa: f64,
    pub cfg_dropout_p: f64,
    pub schedule: TrainSchedule,
    pub time_mu: f64,
    pub time_sigma: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_repa: 0.5,
            cfg_dropout_p: 0.1,
            schedule: TrainSchedule::default(),
            time_mu: 0.0,
            time_sigma: 1.0,
            batch: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_repa >= 0.0) {
            return invalid(format!("lambda_repa must be >= 0, got {}", self.lambda_repa));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout_p) {
            return invalid(format!("cfg_dropout_p {} outside [0, 1]", self.cfg_dropout_p));
        }
        if !(self.time_sigma > 0.0) {
            return invalid("time_sigma must be positive");
        }
        if self.batch == 0 {
            return invalid("batch must be positive");
        }
        self.schedule.validate()
    }
}

/// Which items of a batch have their condition replaced by null.
pub fn dropout_mask(r: &mut rng::Rng, batch: usize, p: f64) -> Vec<bool> {
    (0..batch).map(|_| r.random::<f64>() < p).collect()
}

/// Training set for the diffusion model. `repa_targets` defaults to the
/// latents themselves.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub latents: &'a Tensor<f32>,
    pub labels: &'a [usize],
    pub repa_targets: Option<&'a Tensor<f32>>,
}

impl TrainingData<'_> {
    fn validate(&self, cfg: &DiTConfig) -> Result<()> {
        let d = self.latents.dims();
        if d.len() != 3 || d[1] != cfg.tokens || d[2] != cfg.channels || d[0] == 0 {
            return shape_err("training data", format!("latents {d:?} for model [_, {}, {}]", cfg.tokens, cfg.channels));
        }
        if self.labels.len() != d[0] {
            return shape_err("training data", format!("{} labels for {} latents", self.labels.len(), d[0]));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= cfg.classes) {
            return Err(Error::UnknownClass { class: bad, classes: cfg.classes });
        }
        if let Some(tg) = self.repa_targets {
            if tg.dims() != d {
                return shape_err("training data", format!("repa targets {:?} vs latents {d:?}", tg.dims()));
            }
        }
        Ok(())
    }
}

/// One minibatch with all per-step randomness resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub x: Tensor<f32>,
    pub repa_target: Tensor<f32>,
    pub state: FlowState,
    /// Class indices after dropout; `classes` marks null.
    pub cond: Vec<usize>,
}

/// Draws the minibatch of `step`. Every random choice comes from a stream
/// keyed by `(seed, purpose, step)`.
pub fn draw_minibatch(data: &TrainingData, cfg: &TrainConfig, classes: usize, step: u64) -> Result<Minibatch> {
    let n = data.latents.dims()[0];
    let mut rb = rng::stream(cfg.seed, "dit-batch", step);
    let idx: Vec<usize> = (0..cfg.batch).map(|_| rb.random_range(0..n)).collect();
    let x = data.latents.select_outer(&idx)?;
    let repa_target = match data.repa_targets {
        Some(tg) => tg.select_outer(&idx)?,
        None => x.clone(),
    };
    let t = sample_time_logitnormal(cfg.batch, cfg.time_mu, cfg.time_sigma, &mut rng::stream(cfg.seed, "dit-time", step))?;
    let eps = Tensor::from_vec(
        x.dims(),
        rng::normal_vec_f32(&mut rng::stream(cfg.seed, "dit-noise", step), x.len()),
    )?;
    let state = make_noisy(&x, &eps, &t)?;
    let drop = dropout_mask(&mut rng::stream(cfg.seed, "dit-dropout", step), cfg.batch, cfg.cfg_dropout_p);
    let cond = idx.iter().zip(&drop).map(|(&i, &dr)| if dr { classes } else { data.labels[i] }).collect();
    Ok(Minibatch { x, repa_target, state, cond })
}

/// Loss graph handles `(total, fm, repa)` for a minibatch.
pub fn build_loss<T: Real>(
    cfg: &DiTConfig,
    g: &mut Graph<T>,
    ps: &ParamSet<T>,
    mb: &Minibatch,
    lambda: f64,
) -> Result<(Var, Var, Var)> {
    let b = mb.x.dims()[0];
    let out = build_forward(cfg, g, ps, &mb.state.x_t.cast(), &mb.state.t, &mb.cond, true)?;
    let x = mb.x.cast::<T>().reshape(&[b * cfg.tokens, cfg.channels])?;
    let tg = mb.repa_target.cast::<T>().reshape(&[b * cfg.tokens, cfg.channels])?;
    let fm = g.mse_loss(out.x_full, &x)?;
    let repa = g.cosine_loss(out.x_repa, &tg)?;
    let scaled = g.scale(repa, lambda);
    let total = g.add(fm, scaled)?;
    Ok((total, fm, repa))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub fm: f64,
    pub repa: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Live model, EMA copy and loss history. All state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: DiTModel,
    pub ema: ParamSet<f32>,
    pub config: TrainConfig,
    pub history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(model: DiTModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ema = model.params.snapshot();
        Ok(Trainer { model, ema, config, history: Vec::new() })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.model.params.step
    }

    pub fn ema_model(&self) -> DiTModel {
        DiTModel { config: self.model.config, params: self.ema.clone() }
    }

    /// One loss → backprop → clip → Adam → EMA step.
    pub fn train_step(&mut self, data: &TrainingData) -> Result<LossRecord> {
        let step = self.step();
        let cfg = self.model.config;
        let mb = draw_minibatch(data, &self.config, cfg.classes, step)?;
        let mut g = Graph::new();
        let (total, fm, repa) = build_loss(&cfg, &mut g, &self.model.params, &mb, self.config.lambda_repa)?;
        let scalar = |v: Var| g.value(v).data()[0] as f64;
        let (tv, fv, rv) = (scalar(total), scalar(fm), scalar(repa));
        if !tv.is_finite() {
            return Err(Error::NonFiniteLoss(step as usize));
        }
        g.backward(total)?;
        g.accumulate_param_grads(&mut self.model.params);
        let grad_norm = clip_grad_norm(&mut self.model.params, self.config.schedule.max_grad_norm)?;
        // rate at the end of this step, so a warmup never yields lr = 0
        let lr = lr_at(&self.config.schedule, step + 1);
        optimizer_step(&mut self.model.params, lr)?;
        ema_update(&mut self.ema, &self.model.params, self.config.schedule.ema_decay)?;
        let rec = LossRecord { step, fm: fv, repa: rv, total: tv, lr, grad_norm };
        self.history.push(rec);
        Ok(rec)
    }

    /// Trains until `target_step` completed steps.
    pub fn run_until(&mut self, data: &TrainingData, target_step: u64) -> Result<()> {
        data.validate(&self.model.config)?;
        while self.step() < target_step {
            self.train_step(data)?;
        }
        Ok(())
    }
}

/// Trains a fresh copy for `steps` steps; returns the finished trainer.
pub fn train_diffusion(model: DiTModel, data: &TrainingData, config: TrainConfig, steps: u64) -> Result<Trainer> {
    let mut tr = Trainer::new(model, config)?;
    tr.run_until(data, steps)?;
    Ok(tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};

    fn tiny() -> DiTConfig {
        DiTConfig { depth: 2, width: 32, heads: 4, mlp_hidden: 64, tap: 1, classes: 3, tokens: 4, channels: 8 }
    }

    fn toy_data(n: usize, cfg: &DiTConfig, seed: u64) -> (Tensor<f32>, Vec<usize>) {
        // each class has its own mean latent
        let mut r = rng::stream(seed, "toy-latents", 0);
        let per = cfg.tokens * cfg.channels;
        let means: Vec<Vec<f64>> = (0..cfg.classes).map(|_| rng::normal_vec(&mut r, per)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
        let noise = rng::normal_vec(&mut r, n * per);
        let (means, noise) = (&means, &noise);
        let data = labels
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| (0..per).map(move |j| (means[l][j] + 0.1 * noise[i * per + j]) as f32).collect::<Vec<_>>())
            .collect();
        (Tensor::from_vec(&[n, cfg.tokens, cfg.channels], data).unwrap(), labels)
    }

    #[test]
    fn logitnormal_examples() {
        let mut r = rng::stream(1, "t", 0);
        let mut t = sample_time_logitnormal(100_000, 0.0, 1.0, &mut r).unwrap();
        assert!(t.iter().all(|&v| v > 0.0 && v < 1.0));
        t.sort_by(f64::total_cmp);
        let median = t[t.len() / 2];
        assert!((0.45..=0.55).contains(&median), "{median}");
        let hi = sample_time_logitnormal(1000, 6.0, 0.1, &mut r).unwrap();
        assert!(hi.iter().all(|&v| v > 0.99));
        assert!(sample_time_logitnormal(1, 0.0, 0.0, &mut r).is_err());
    }

    #[test]
    fn make_noisy_examples() {
        let x = Tensor::from_vec(&[1, 1, 2], vec![1.0f32, -2.0]).unwrap();
        let e = Tensor::from_vec(&[1, 1, 2], vec![3.0f32, 4.0]).unwrap();
        assert_eq!(make_noisy(&x, &e, &[1.0]).unwrap().x_t, e);
        assert_eq!(make_noisy(&x, &e, &[0.5]).unwrap().x_t.data(), &[2.0, 1.0]);
        let near = make_noisy(&x, &e, &[1e-9]).unwrap().x_t;
        assert!(near.max_abs_diff(&x) < 1e-6);
        assert!(make_noisy(&x, &e, &[0.0]).is_err());
        assert!(make_noisy(&x, &e, &[1.5]).is_err());
    }

    #[test]
    fn repa_loss_examples() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, -1.0, 0.5]).unwrap();
        assert!(repa_loss(&a, &a).unwrap().abs() < 1e-6);
        assert!((repa_loss(&a, &a.scale(-1.0)).unwrap() - 2.0).abs() < 1e-6);
        let b = Tensor::from_vec(&[1, 2], vec![1.0f32, 0.0]).unwrap();
        let c = Tensor::from_vec(&[1, 2], vec![0.0f32, 3.0]).unwrap();
        assert!((repa_loss(&b, &c).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fm_terms_examples() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let other = x.scale(-1.0);
        let (total, fm, repa) = fm_terms(&x, &other, &x, &x, 0.5).unwrap();
        assert_eq!(fm, 0.0);
        assert_eq!(total, fm + 0.5 * repa);
        let (t0, f0, _) = fm_terms(&other, &other, &x, &x, 0.0).unwrap();
        assert_eq!(t0, f0);
        assert_eq!(TrainConfig::default().lambda_repa, 0.5);
    }

    #[test]
    fn forward_shapes_conditioning_and_determinism() {
        let cfg = tiny();
        let m = DiTModel::init(cfg, 0).unwrap();
        let x = Tensor::from_vec(&[2, 4, 8], rng::normal_vec_f32(&mut rng::stream(0, "x", 0), 64)).unwrap();
        let t = [0.3, 0.8];
        let o = m.forward(&x, &t, &[Cond::Class(0), Cond::Null]).unwrap();
        assert_eq!(o.x_full.dims(), &[2, 4, 8]);
        assert_eq!(o.x_repa.dims(), o.x_full.dims());
        assert_eq!(o.h.dims(), &[2, 4, 32]);
        assert_eq!(o, m.forward(&x, &t, &[Cond::Class(0), Cond::Null]).unwrap());
        let c = m.forward(&x, &t, &[Cond::Class(1), Cond::Null]).unwrap();
        assert_ne!(o.x_full.data()[..32], c.x_full.data()[..32]);
        assert_eq!(o.x_full.data()[32..], c.x_full.data()[32..]);
        assert!(matches!(
            m.forward(&x, &t, &[Cond::Class(3), Cond::Null]),
            Err(Error::UnknownClass { class: 3, classes: 3 })
        ));
        let feats = m.block_features(&x, &t, &[Cond::Null, Cond::Null]).unwrap();
        assert_eq!(feats.len(), cfg.depth);
    }

    #[test]
    fn null_fraction_matches_dropout() {
        let mut r = rng::stream(3, "drop", 0);
        let m = dropout_mask(&mut r, 10_000, 0.1);
        let frac = m.iter().filter(|&&v| v).count() as f64 / 1e4;
        assert!((frac - 0.1).abs() <= 0.02, "{frac}");
    }

    fn grad_setup(lambda: f64) -> (DiTConfig, ParamSet<f64>, Minibatch) {
        let cfg = tiny();
        let m = DiTModel::init(cfg, 7).unwrap();
        let (lat, labels) = toy_data(6, &cfg, 1);
        let data = TrainingData { latents: &lat, labels: &labels, repa_targets: None };
        let tc = TrainConfig { batch: 3, cfg_dropout_p: 0.3, lambda_repa: lambda, ..Default::default() };
        let mb = draw_minibatch(&data, &tc, cfg.classes, 0).unwrap();
        (cfg, m.params.cast::<f64>(), mb)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (cfg, mut ps, mb) = grad_setup(0.5);
        let report = grad_check(&mut ps, GradCheckConfig { max_coords: 24, ..Default::default() }, |ps| {
            let mut g = Graph::<f64>::new();
            let (total, _, _) = build_loss(&cfg, &mut g, ps, &mb, 0.5)?;
            g.backward(total)?;
            g.accumulate_param_grads(ps);
            Ok(g.value(total).data()[0])
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }

    #[test]
    fn repa_gradient_stops_at_tap() {
        let (cfg, mut ps, mb) = grad_setup(0.5);
        let mut g = Graph::<f64>::new();
        let (_, _, repa) = build_loss(&cfg, &mut g, &ps, &mb, 0.5).unwrap();
        g.backward(repa).unwrap();
        g.accumulate_param_grads(&mut ps);
        for p in ps.iter() {
            let norm = p.grad.sq_norm();
            if p.name.starts_with("b1.") || p.name.starts_with("out.") {
                assert_eq!(norm, 0.0, "{}", p.name);
            } else if p.name.starts_with("b0.") || p.name.starts_with("repa.") {
                assert!(norm > 0.0, "{}", p.name);
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cfg = DiTConfig { classes: 2, ..tiny() };
        let (lat, labels) = toy_data(64, &cfg, 2);
        let data = TrainingData { latents: &lat, labels: &labels, repa_targets: None };
        let tc = TrainConfig {
            schedule: TrainSchedule { base_lr: 2e-3, final_lr: 2e-4, decay_end_step: 200, ..Default::default() },
            ..Default::default()
        };
        let a = train_diffusion(DiTModel::init(cfg, 1).unwrap(), &data, tc, 200).unwrap();
        let smooth = |h: &[LossRecord], end: usize| h[end - 10..end].iter().map(|r| r.fm).sum::<f64>() / 10.0;
        assert!(smooth(&a.history, 200) < smooth(&a.history, 10));
        let b = train_diffusion(DiTModel::init(cfg, 1).unwrap(), &data, tc, 200).unwrap();
        assert_eq!(a.history, b.history);
        assert_ne!(a.ema, a.model.params);
        // resuming from a cloned mid-run trainer gives the same end state
        let mut c = train_diffusion(DiTModel::init(cfg, 1).unwrap(), &data, tc, 120).unwrap();
        c.run_until(&data, 200).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn weak_config_is_smaller() {
        let cfg = DiTConfig::default();
        let weak = cfg.weak();
        weak.validate().unwrap();
        assert_eq!(weak.depth, 3);
        assert!(DiTModel::init(weak, 0).unwrap().num_params() < DiTModel::init(cfg, 0).unwrap().num_params());
    }
}
