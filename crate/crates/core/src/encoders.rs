//! Frozen toy vision encoders with per-layer patch features, and the two
//! multi-layer aggregation schemes (sum of the last K layers, and a fixed
//! random projection of their channel concatenation).

use std::fmt;
use std::str::FromStr;

use crate::data::{patchify, Dataset};
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::Tensor;

/// How the frozen weights of a toy encoder are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Recipe {
    /// Fixed random patch embedding and random mixing layers.
    RandProj,
    /// Random layers on top of dominant 2-D sinusoidal position codes.
    PosEnc,
    /// Layers trained for classification on the dataset.
    Supervised,
    /// Supervised training with position codes injected at the input.
    SupervisedPos,
}

impl Recipe {
    pub const ALL: [Recipe; 4] = [Recipe::RandProj, Recipe::PosEnc, Recipe::Supervised, Recipe::SupervisedPos];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::RandProj => "rand-proj",
            Recipe::PosEnc => "pos-enc",
            Recipe::Supervised => "supervised",
            Recipe::SupervisedPos => "supervised-pos",
        }
    }

    fn code(self) -> u8 {
        match self {
            Recipe::RandProj => 0,
            Recipe::PosEnc => 1,
            Recipe::Supervised => 2,
            Recipe::SupervisedPos => 3,
        }
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, Recipe::Supervised | Recipe::SupervisedPos)
    }

    fn pos_scale(self) -> f32 {
        match self {
            Recipe::RandProj | Recipe::Supervised => 0.0,
            Recipe::PosEnc => 4.0,
            Recipe::SupervisedPos => 2.0,
        }
    }

    /// Scale of the content path (patch embedding) relative to position codes.
    fn content_scale(self) -> f32 {
        match self {
            Recipe::PosEnc => 0.25,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::UnknownRecipe(s.to_string()))
    }
}

/// Encoder geometry and build-time training knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub layers: usize,
    /// Steps of classification training for supervised recipes.
    pub train_steps: usize,
    pub train_batch: usize,
    pub train_lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch: 4,
            width: 32,
            layers: 6,
            train_steps: 300,
            train_batch: 64,
            train_lr: 3e-3,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return invalid(format!("patch {} must divide image size {}", self.patch, self.image_size));
        }
        if self.layers == 0 || self.width < 4 || self.width % 4 != 0 {
            return invalid("encoder needs >= 1 layer and a width divisible by 4");
        }
        Ok(())
    }
}

/// 2-D sinusoidal position codes `[h*w, d]` (`d` divisible by 4). All
/// frequencies are at most π/grid, so code similarity decays monotonically
/// with grid distance along each axis.
pub fn sinusoidal_2d(h: usize, w: usize, d: usize) -> Tensor<f32> {
    let f = d / 4;
    let grid = h.max(w) as f64;
    let mut out = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            let mut row = Vec::with_capacity(d);
            for j in 0..f {
                let omega = std::f64::consts::PI * (j + 1) as f64 / (f as f64 * grid);
                row.push((omega * x as f64).sin());
                row.push((omega * x as f64).cos());
                row.push((omega * y as f64).sin());
                row.push((omega * y as f64).cos());
            }
            // unit RMS per token
            let scale = (d as f64 / (2 * f) as f64).sqrt();
            out.extend(row.into_iter().map(|v| (v * scale) as f32));
            out.extend(std::iter::repeat_n(0.0, d - 4 * f));
        }
    }
    Tensor::from_vec(&[h * w, d], out).expect("dims")
}

/// A frozen encoder. Encoding is a pure function of the stored weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub recipe: Recipe,
    pub config: EncoderConfig,
    pub seed: u64,
    params: ParamSet<f32>,
    pos: Tensor<f32>,
}

/// Per-layer token features, each `[batch, N, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatureStack {
    pub layers: Vec<Tensor<f32>>,
}

impl LayerFeatureStack {
    pub fn new(layers: Vec<Tensor<f32>>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return shape_err("LayerFeatureStack", "no layers");
        };
        if first.dims().len() != 3 || layers.iter().any(|l| l.dims() != first.dims()) {
            return shape_err("LayerFeatureStack", "layers must share [batch, N, d] dims");
        }
        Ok(LayerFeatureStack { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.layers[0].dims();
        (d[0], d[1], d[2])
    }
}

/// Aggregated encoder representation `[batch, N, d]`; the diffusion state space.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub tokens: Tensor<f32>,
    pub normalized: bool,
}

impl Latent {
    pub fn batch(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn tokens_per_item(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.tokens.dims()[2]
    }

    /// Mean over tokens: `[batch, d]`.
    pub fn pooled(&self) -> Tensor<f32> {
        mean_pool(&self.tokens)
    }
}

/// Mean over the token axis of `[batch, N, d]`.
pub fn mean_pool(t: &Tensor<f32>) -> Tensor<f32> {
    let d = t.dims();
    let (b, n, c) = (d[0], d[1], d[2]);
    let mut out = vec![0.0f32; b * c];
    for i in 0..b {
        let o = &mut out[i * c..(i + 1) * c];
        for tok in t.data()[i * n * c..(i + 1) * n * c].chunks(c) {
            for (a, &v) in o.iter_mut().zip(tok) {
                *a += v;
            }
        }
        o.iter_mut().for_each(|a| *a /= n as f32);
    }
    Tensor::from_vec(&[b, c], out).expect("dims")
}

fn gaussian(dims: &[usize], std: f64, r: &mut rng::Rng) -> Tensor<f32> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, rng::normal_vec(r, n).into_iter().map(|v| (v * std) as f32).collect()).expect("dims")
}

impl ToyEncoder {
    /// Builds and freezes an encoder. Supervised recipes train on `dataset`.
    pub fn build(recipe: Recipe, config: EncoderConfig, dataset: Option<&Dataset>, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, l, pd) = (config.width, config.layers, config.patch_dim());
        let hidden = 2 * d;
        let mut r = rng::stream(seed, "encoder-init", recipe.code() as u64);
        let mut ps = ParamSet::new();
        ps.insert("embed.w", gaussian(&[pd, d], 1.0 / (pd as f64).sqrt(), &mut r))?;
        ps.insert("embed.b", gaussian(&[d], 0.1, &mut r))?;
        for i in 0..l {
            ps.insert(format!("l{i}.a"), gaussian(&[d, hidden], (2.0 / d as f64).sqrt(), &mut r))?;
            ps.insert(format!("l{i}.ab"), Tensor::zeros(&[hidden]))?;
            ps.insert(format!("l{i}.b"), gaussian(&[hidden, d], 0.5 / (hidden as f64).sqrt(), &mut r))?;
            ps.insert(format!("l{i}.bb"), Tensor::zeros(&[d]))?;
            ps.insert(format!("l{i}.c"), gaussian(&[d, d], 0.5 / (d as f64).sqrt(), &mut r))?;
        }
        let pos = sinusoidal_2d(config.grid(), config.grid(), d);
        let mut enc = ToyEncoder { recipe, config, seed, params: ps, pos };
        if recipe.is_supervised() {
            let ds = dataset.ok_or_else(|| {
                Error::InvalidArgument(format!("recipe {recipe} needs a labeled dataset"))
            })?;
            enc.train_supervised(ds)?;
        }
        Ok(enc)
    }

    /// Rebuilds from stored weights (checkpoint load).
    pub fn from_parts(recipe: Recipe, config: EncoderConfig, seed: u64, params: ParamSet<f32>) -> Result<Self> {
        let pos = sinusoidal_2d(config.grid(), config.grid(), config.width);
        let template = Self::build(Recipe::RandProj, config, None, 0)?;
        template.params.check_compatible(&params)?;
        Ok(ToyEncoder { recipe, config, seed, params, pos })
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn tokens(&self) -> usize {
        self.config.tokens()
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn depth(&self) -> usize {
        self.config.layers
    }

    /// Forward pass recording layer outputs; `trainable` exposes weights to
    /// gradients (supervised build only).
    fn forward(&self, g: &mut Graph<f32>, ps: &ParamSet<f32>, patches: Tensor<f32>, trainable: bool) -> Result<Vec<Var>> {
        let batch = patches.dims()[0];
        let n = self.config.tokens();
        let pd = self.config.patch_dim();
        let w = |g: &mut Graph<f32>, name: &str| if trainable { g.param(ps, name) } else { g.frozen(ps, name) };
        let x = g.input(patches.reshape(&[batch * n, pd])?);
        let ew = w(g, "embed.w")?;
        let eb = w(g, "embed.b")?;
        let mut z = g.linear(x, ew, eb)?;
        let cs = self.recipe.content_scale();
        if cs != 1.0 {
            z = g.scale(z, cs as f64);
        }
        let ps_ = self.recipe.pos_scale();
        if ps_ != 0.0 {
            let pos = g.input(self.pos.scale(ps_));
            z = g.add_pos(z, pos)?;
        }
        let mut outs = Vec::with_capacity(self.config.layers);
        for i in 0..self.config.layers {
            let u = g.layer_norm(z);
            let a = w(g, &format!("l{i}.a"))?;
            let ab = w(g, &format!("l{i}.ab"))?;
            let h = g.linear(u, a, ab)?;
            let h = g.gelu(h);
            let b = w(g, &format!("l{i}.b"))?;
            let bb = w(g, &format!("l{i}.bb"))?;
            let h = g.linear(h, b, bb)?;
            let ctx = g.seq_mean(u, batch, n)?;
            let c = w(g, &format!("l{i}.c"))?;
            let ctx = g.matmul(ctx, c)?;
            let h = g.add_seq_broadcast(h, ctx, n)?;
            z = g.add(z, h)?;
            outs.push(z);
        }
        Ok(outs)
    }

    fn train_supervised(&mut self, ds: &Dataset) -> Result<()> {
        if ds.image_size != self.config.image_size {
            return shape_err(
                "ToyEncoder::build",
                format!("dataset images are {} but encoder expects {}", ds.image_size, self.config.image_size),
            );
        }
        let classes = ds.classes;
        let d = self.config.width;
        let mut ps = self.params.clone();
        let mut r = rng::stream(self.seed, "encoder-head", 0);
        ps.insert("head.w", gaussian(&[d, classes], 0.1, &mut r))?;
        ps.insert("head.b", Tensor::zeros(&[classes]))?;
        let adam = Adam { beta2: 0.999, ..Adam::default() };
        let n_tok = self.config.tokens();
        for step in 0..self.config.train_steps {
            let mut sr = rng::stream(self.seed, "encoder-batch", step as u64);
            let idx: Vec<usize> = (0..self.config.train_batch)
                .map(|_| rand::Rng::random_range(&mut sr, 0..ds.len()))
                .collect();
            let imgs = ds.images.select_outer(&idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let patches = patchify(&imgs, self.config.patch)?;
            let mut g = Graph::new();
            let outs = self.forward(&mut g, &ps, patches, true)?;
            let last = *outs.last().expect("layers >= 1");
            let pooled = g.seq_mean(last, idx.len(), n_tok)?;
            let pooled = g.layer_norm(pooled);
            let hw = g.param(&ps, "head.w")?;
            let hb = g.param(&ps, "head.b")?;
            let logits = g.linear(pooled, hw, hb)?;
            let loss = g.cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            g.accumulate_param_grads(&mut ps);
            crate::optim::clip_grad_norm(&mut ps, 1.0)?;
            adam.step(&mut ps, self.config.train_lr)?;
        }
        let mut frozen = ParamSet::new();
        for p in ps.iter().filter(|p| !p.name.starts_with("head.")) {
            frozen.insert(p.name.clone(), p.value.clone())?;
        }
        self.params = frozen;
        Ok(())
    }

    /// Per-layer features of `images: [batch, H, W, 3]`.
    pub fn encode_layers(&self, images: &Tensor<f32>) -> Result<LayerFeatureStack> {
        let dims = images.dims();
        let s = self.config.image_size;
        if dims.len() != 4 || dims[1] != s || dims[2] != s || dims[3] != 3 {
            return shape_err("encode_layers", format!("images {dims:?}, encoder expects [_, {s}, {s}, 3]"));
        }
        let batch = dims[0];
        let (n, d) = (self.config.tokens(), self.config.width);
        let mut layers: Vec<Vec<f32>> = vec![Vec::with_capacity(batch * n * d); self.config.layers];
        const CHUNK: usize = 256;
        for start in (0..batch).step_by(CHUNK) {
            let count = CHUNK.min(batch - start);
            let patches = patchify(&images.slice_outer(start, count)?, self.config.patch)?;
            let mut g = Graph::new();
            let outs = self.forward(&mut g, &self.params, patches, false)?;
            for (dst, v) in layers.iter_mut().zip(outs) {
                dst.extend_from_slice(g.value(v).data());
            }
        }
        let layers = layers
            .into_iter()
            .map(|l| Tensor::from_vec(&[batch, n, d], l))
            .collect::<Result<Vec<_>>>()?;
        LayerFeatureStack::new(layers)
    }
}

/// Fixed random projection `R: [K*d, d]` with i.i.d. N(0, 1/d) entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjector {
    k: usize,
    d: usize,
    seed: u64,
    matrix: Tensor<f32>,
}

impl RandomProjector {
    pub fn new(k: usize, d: usize, seed: u64) -> Result<Self> {
        if k == 0 || d == 0 {
            return invalid("projector needs K >= 1 and d >= 1");
        }
        let mut r = rng::stream(seed, "mlr-projection", k as u64);
        let matrix = gaussian(&[k * d, d], 1.0 / (d as f64).sqrt(), &mut r);
        Ok(RandomProjector { k, d, seed, matrix })
    }

    /// Projector with an explicit matrix (e.g. the identity for K=1).
    pub fn with_matrix(k: usize, matrix: Tensor<f32>) -> Result<Self> {
        let dims = matrix.dims().to_vec();
        if dims.len() != 2 || k == 0 || dims[0] != k * dims[1] {
            return shape_err("RandomProjector", format!("matrix {dims:?} for K={k}"));
        }
        Ok(RandomProjector { k, d: dims[1], seed: 0, matrix })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &Tensor<f32> {
        &self.matrix
    }

    /// Projects rows of `[rows, K*d]` to `[rows, d]`.
    pub fn project_rows(&self, rows: &Tensor<f32>) -> Result<Tensor<f32>> {
        rows.matmul(&self.matrix)
    }
}

/// Per-token layer normalization without affine terms, computed in f64.
pub fn normalize_latent(x: &Latent) -> Latent {
    let c = x.channels();
    let mut out = x.tokens.clone();
    for tok in out.data_mut().chunks_mut(c) {
        let mean = tok.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = tok.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + 1e-12).sqrt();
        for v in tok.iter_mut() {
            *v = ((*v as f64 - mean) * rstd) as f32;
        }
    }
    Latent { tokens: out, normalized: true }
}

/// Sum of the last `k` layers, before normalization.
pub fn mls_raw(stack: &LayerFeatureStack, k: usize) -> Result<Latent> {
    let l = stack.depth();
    if k == 0 || k > l {
        return invalid(format!("K={k} outside [1, {l}]"));
    }
    let mut acc = stack.layers[l - k].clone();
    for layer in &stack.layers[l - k + 1..] {
        for (a, &v) in acc.data_mut().iter_mut().zip(layer.data()) {
            *a += v;
        }
    }
    Ok(Latent { tokens: acc, normalized: false })
}

/// Multi-layer sum latent: normalized sum of the last `k` layers.
pub fn aggregate_mls(stack: &LayerFeatureStack, k: usize) -> Result<Latent> {
    Ok(normalize_latent(&mls_raw(stack, k)?))
}

/// Channel concatenation of the last K layers times `R`, before normalization.
pub fn mlr_raw(stack: &LayerFeatureStack, proj: &RandomProjector) -> Result<Latent> {
    let l = stack.depth();
    let (b, n, d) = stack.dims();
    if proj.k > l {
        return invalid(format!("projector K={} exceeds {l} layers", proj.k));
    }
    if proj.d != d {
        return shape_err("aggregate_mlr", format!("projector width {} vs features {d}", proj.d));
    }
    let k = proj.k;
    let rows = b * n;
    let mut cat = vec![0.0f32; rows * k * d];
    for (j, layer) in stack.layers[l - k..].iter().enumerate() {
        for (r, tok) in layer.data().chunks(d).enumerate() {
            cat[r * k * d + j * d..r * k * d + (j + 1) * d].copy_from_slice(tok);
        }
    }
    let projected = proj.project_rows(&Tensor::from_vec(&[rows, k * d], cat)?)?;
    Ok(Latent { tokens: projected.reshape(&[b, n, d])?, normalized: false })
}

/// Multi-layer random-projection latent.
pub fn aggregate_mlr(stack: &LayerFeatureStack, proj: &RandomProjector) -> Result<Latent> {
    Ok(normalize_latent(&mlr_raw(stack, proj)?))
}

/// The K-free pipeline: normalized final layer.
pub fn final_layer_latent(stack: &LayerFeatureStack) -> Latent {
    normalize_latent(&Latent { tokens: stack.layers[stack.depth() - 1].clone(), normalized: false })
}

/// Which aggregation turns a layer stack into a latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Mls { k: usize },
    Mlr { k: usize, seed: u64 },
}

impl Aggregation {
    pub fn k(&self) -> usize {
        match *self {
            Aggregation::Mls { k } | Aggregation::Mlr { k, .. } => k,
        }
    }

    pub fn scheme(&self) -> &'static str {
        match self {
            Aggregation::Mls { .. } => "mls",
            Aggregation::Mlr { .. } => "mlr",
        }
    }

    pub fn apply(&self, stack: &LayerFeatureStack) -> Result<Latent> {
        match *self {
            Aggregation::Mls { k } => aggregate_mls(stack, k),
            Aggregation::Mlr { k, seed } => {
                let (_, _, d) = stack.dims();
                aggregate_mlr(stack, &RandomProjector::new(k, d, seed)?)
            }
        }
    }

    /// Encodes images straight to latents.
    pub fn encode(&self, enc: &ToyEncoder, images: &Tensor<f32>) -> Result<Latent> {
        self.apply(&enc.encode_layers(images)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_dataset;
    use proptest::prelude::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { image_size: 16, patch: 4, width: 16, layers: 4, train_steps: 20, train_batch: 16, ..Default::default() }
    }

    fn stack_from(seed: u64, l: usize, b: usize, n: usize, d: usize) -> LayerFeatureStack {
        let mut r = rng::stream(seed, "stack", 0);
        LayerFeatureStack::new((0..l).map(|_| gaussian(&[b, n, d], 1.0, &mut r)).collect()).unwrap()
    }

    #[test]
    fn recipe_names_round_trip() {
        for r in Recipe::ALL {
            assert_eq!(r.name().parse::<Recipe>().unwrap(), r);
        }
        assert!(matches!("dino".parse::<Recipe>(), Err(Error::UnknownRecipe(_))));
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = EncoderConfig { layers: 6, ..EncoderConfig::default() };
        let enc = ToyEncoder::build(Recipe::RandProj, cfg, None, 1).unwrap();
        let ds = gen_dataset(2, 2, 32, 0).unwrap();
        let a = enc.encode_layers(&ds.images).unwrap();
        assert_eq!(a.depth(), 6);
        for l in &a.layers {
            assert_eq!(l.dims(), &[2, 64, 32]);
        }
        let b = enc.encode_layers(&ds.images).unwrap();
        assert_eq!(a, b);
        let zero = enc.encode_layers(&Tensor::zeros(&[1, 32, 32, 3])).unwrap();
        assert!(zero.layers.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn wrong_resolution_rejected() {
        let enc = ToyEncoder::build(Recipe::PosEnc, small_cfg(), None, 1).unwrap();
        assert!(enc.encode_layers(&Tensor::zeros(&[1, 32, 32, 3])).is_err());
    }

    #[test]
    fn same_seed_same_encoder() {
        let ds = gen_dataset(32, 4, 16, 2).unwrap();
        let a = ToyEncoder::build(Recipe::Supervised, small_cfg(), Some(&ds), 9).unwrap();
        let b = ToyEncoder::build(Recipe::Supervised, small_cfg(), Some(&ds), 9).unwrap();
        assert_eq!(a, b);
        let c = ToyEncoder::build(Recipe::Supervised, small_cfg(), Some(&ds), 10).unwrap();
        assert_ne!(a.params(), c.params());
        assert!(ToyEncoder::build(Recipe::Supervised, small_cfg(), None, 9).is_err());
    }

    #[test]
    fn mls_k1_is_final_layer_pipeline() {
        let s = stack_from(1, 4, 2, 5, 8);
        let mls = aggregate_mls(&s, 1).unwrap();
        let plain = final_layer_latent(&s);
        let bits = |l: &Latent| l.tokens.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&mls), bits(&plain));
    }

    #[test]
    fn mls_of_equal_layers_is_k_times() {
        let one = stack_from(2, 1, 1, 3, 4).layers[0].clone();
        let s = LayerFeatureStack::new(vec![one.clone(); 4]).unwrap();
        let raw = mls_raw(&s, 3).unwrap();
        for (a, b) in raw.tokens.data().iter().zip(one.data()) {
            assert!((a - 3.0 * b).abs() < 1e-6);
        }
        let all = mls_raw(&s, 4).unwrap();
        for (a, b) in all.tokens.data().iter().zip(one.data()) {
            assert!((a - 4.0 * b).abs() < 1e-6);
        }
        assert!(mls_raw(&s, 0).is_err());
        assert!(mls_raw(&s, 5).is_err());
    }

    #[test]
    fn mlr_identity_matches_final_layer() {
        let s = stack_from(3, 3, 2, 4, 6);
        let mut eye = Tensor::zeros(&[6, 6]);
        for i in 0..6 {
            eye.data_mut()[i * 6 + i] = 1.0;
        }
        let proj = RandomProjector::with_matrix(1, eye).unwrap();
        let raw = mlr_raw(&s, &proj).unwrap();
        assert_eq!(raw.tokens, s.layers[2]);
        let zero = LayerFeatureStack::new(vec![Tensor::zeros(&[1, 4, 6]); 3]).unwrap();
        let z = mlr_raw(&zero, &RandomProjector::new(2, 6, 1).unwrap()).unwrap();
        assert!(z.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlr_dim_mismatch() {
        let s = stack_from(4, 3, 1, 4, 6);
        assert!(mlr_raw(&s, &RandomProjector::new(2, 8, 1).unwrap()).is_err());
        assert!(mlr_raw(&s, &RandomProjector::new(4, 6, 1).unwrap()).is_err());
    }

    #[test]
    fn latent_footprint_is_independent_of_k() {
        let s = stack_from(5, 4, 2, 5, 8);
        for k in 1..=4 {
            for agg in [Aggregation::Mls { k }, Aggregation::Mlr { k, seed: 3 }] {
                assert_eq!(agg.apply(&s).unwrap().tokens.dims(), &[2, 5, 8]);
            }
        }
    }

    #[test]
    fn normalization_examples() {
        let x = Latent { tokens: Tensor::full(&[1, 2, 8], 3.5), normalized: false };
        assert!(normalize_latent(&x).tokens.data().iter().all(|&v| v == 0.0));

        let s = stack_from(6, 1, 2, 3, 8);
        let x = Latent { tokens: s.layers[0].clone(), normalized: false };
        let once = normalize_latent(&x);
        let twice = normalize_latent(&once);
        assert!(once.tokens.max_abs_diff(&twice.tokens) <= 1e-6);
        let scaled = normalize_latent(&Latent { tokens: x.tokens.scale(10.0), normalized: false });
        assert!(once.tokens.max_abs_diff(&scaled.tokens) <= 1e-6);
    }

    #[test]
    fn projection_preserves_norm_in_expectation() {
        // E‖xR‖² = ‖x‖² for N(0, 1/d) entries; average over seeds
        let d = 64;
        let mut r = rng::stream(11, "x", 0);
        let x = gaussian(&[1, d], 1.0, &mut r);
        let base = x.sq_norm() as f64;
        let trials = 200;
        let mean: f64 = (0..trials)
            .map(|s| RandomProjector::new(1, d, s).unwrap().project_rows(&x).unwrap().sq_norm() as f64)
            .sum::<f64>()
            / trials as f64;
        assert!((mean / base - 1.0).abs() < 0.05, "ratio {}", mean / base);
    }

    proptest! {
        #[test]
        fn aggregations_are_linear(seed in 0u64..1000, alpha in -3.0f32..3.0) {
            let a = stack_from(seed, 3, 1, 4, 4);
            let b = stack_from(seed + 1, 3, 1, 4, 4);
            let combo = LayerFeatureStack::new(
                a.layers.iter().zip(&b.layers).map(|(x, y)| x.axpy(alpha, y).unwrap()).collect()
            ).unwrap();
            let proj = RandomProjector::new(2, 4, seed).unwrap();
            for k in 1..=3 {
                let lhs = mls_raw(&combo, k).unwrap().tokens;
                let rhs = mls_raw(&a, k).unwrap().tokens.axpy(alpha, &mls_raw(&b, k).unwrap().tokens).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs) < 1e-4);
            }
            let lhs = mlr_raw(&combo, &proj).unwrap().tokens;
            let rhs = mlr_raw(&a, &proj).unwrap().tokens.axpy(alpha, &mlr_raw(&b, &proj).unwrap().tokens).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-4);
        }
    }
}
