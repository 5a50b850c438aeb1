//! Evaluation metrics: Fréchet distance and its multi-space aggregate, linear
//! probing, local distance similarity, Pearson correlation, epochs-to-FD and
//! token self-similarity.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::Dataset;
use crate::dit::{make_noisy, Cond, DiTModel};
use crate::encoders::{mean_pool, ToyEncoder};
use crate::error::{invalid, shape_err, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Regularizer added to both covariances before the matrix square root.
pub const FD_COV_EPS: f64 = 1e-6;

fn to_rows<T: Real>(t: &Tensor<T>) -> (usize, usize, Vec<f64>) {
    let d = t.last_dim();
    (t.rows(), d, t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
}

fn mean_cov(n: usize, d: usize, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let mut mu = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, &v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = DMatrix::<f64>::zeros(n, d);
    for (i, row) in x.chunks(d).enumerate() {
        for j in 0..d {
            centered[(i, j)] = row[j] - mu[j];
        }
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for j in 0..d {
        cov[(j, j)] += FD_COV_EPS;
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two sample sets `[n, D]`:
/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`.
pub fn frechet_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (na, da, xa) = to_rows(a);
    let (nb, db, xb) = to_rows(b);
    if da != db {
        return shape_err("frechet_distance", format!("feature dims {da} vs {db}"));
    }
    if na < 2 || nb < 2 {
        return invalid(format!("need at least 2 samples per set, got {na} and {nb}"));
    }
    if na <= da || nb <= da {
        log::warn!("frechet_distance with n={na}/{nb} <= D={da}; covariance is rank deficient");
    }
    let (mua, ca) = mean_cov(na, da, &xa);
    let (mub, cb) = mean_cov(nb, db, &xb);
    let mean_term: f64 = mua.iter().zip(&mub).map(|(x, y)| (x - y) * (x - y)).sum();
    // Tr (Σa Σb)^{1/2} = Tr (Σa^{1/2} Σb Σa^{1/2})^{1/2}
    let sa = sym_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let fd = mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

/// Arithmetic mean of per-space Fréchet distances.
pub fn fd_aggregate(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return invalid("no per-space values to aggregate");
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// A frozen feature extractor: mean-pooled tokens of selected encoder layers,
/// concatenated.
#[derive(Debug, Clone)]
pub struct FeatureSpace {
    pub name: String,
    pub encoder: ToyEncoder,
    pub layers: Vec<usize>,
}

impl FeatureSpace {
    pub fn dim(&self) -> usize {
        self.layers.len() * self.encoder.width()
    }

    /// Features `[n, dim]` of images `[n, H, W, 3]`.
    pub fn extract(&self, images: &Tensor<f32>) -> Result<Tensor<f64>> {
        let stack = self.encoder.encode_layers(images)?;
        let n = images.dims()[0];
        let w = self.encoder.width();
        let pooled: Vec<Tensor<f32>> = self
            .layers
            .iter()
            .map(|&l| {
                stack
                    .layers
                    .get(l)
                    .map(mean_pool)
                    .ok_or_else(|| crate::Error::InvalidArgument(format!("layer {l} out of range")))
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(n * self.dim());
        for i in 0..n {
            for p in &pooled {
                out.extend(p.data()[i * w..(i + 1) * w].iter().map(|&v| v as f64));
            }
        }
        Tensor::from_vec(&[n, self.dim()], out)
    }

    /// Reference space: a supervised toy encoder held out from every
    /// experiment (its own seed), pooled at its middle and final layers.
    pub fn reference(dataset: &Dataset, config: crate::encoders::EncoderConfig, seed: u64) -> Result<Self> {
        let encoder = ToyEncoder::build(crate::encoders::Recipe::Supervised, config, Some(dataset), seed)?;
        let l = encoder.depth();
        Ok(FeatureSpace { name: format!("ref-supervised-s{seed}"), encoder, layers: vec![(l - 1) / 2, l - 1] })
    }
}

/// Per-space Fréchet distances plus their aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct FdrReport {
    pub per_space: Vec<(String, f64)>,
    pub aggregate: f64,
}

pub fn fd_r(real: &Tensor<f32>, generated: &Tensor<f32>, spaces: &[FeatureSpace]) -> Result<FdrReport> {
    if spaces.len() < 2 {
        return invalid(format!("FD_r needs at least 2 feature spaces, got {}", spaces.len()));
    }
    let per_space = spaces
        .iter()
        .map(|s| Ok((s.name.clone(), frechet_distance(&s.extract(real)?, &s.extract(generated)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = per_space.iter().map(|p| p.1).collect();
    Ok(FdrReport { aggregate: fd_aggregate(&values)?, per_space })
}

/// Linear-probe protocol: full-batch gradient descent on softmax
/// cross-entropy over standardized features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 30, lr: 1e-2 }
    }
}

/// Deterministic shuffled split into (train, val) index sets.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split", n as u64));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Top-1 validation accuracy of a linear softmax classifier.
pub fn linear_probe<T: Real>(
    features: &Tensor<T>,
    labels: &[usize],
    train: &[usize],
    val: &[usize],
    cfg: ProbeConfig,
) -> Result<f64> {
    let (n, d, x) = to_rows(features);
    if n != labels.len() {
        return shape_err("linear_probe", format!("{n} rows vs {} labels", labels.len()));
    }
    if train.is_empty() || val.is_empty() {
        return invalid("linear probe needs non-empty train and validation splits");
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        train.iter().for_each(|&i| seen[labels[i]] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return invalid("linear probe needs at least 2 classes in the training split");
    }
    // standardize with training statistics; constant features become 0
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in train {
        for j in 0..d {
            mu[j] += x[i * d + j];
        }
    }
    mu.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in train {
        for j in 0..d {
            sd[j] += (x[i * d + j] - mu[j]).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| *s = (*s / train.len() as f64).sqrt());
    let z = |i: usize, j: usize| if sd[j] > 1e-12 { (x[i * d + j] - mu[j]) / sd[j] } else { 0.0 };

    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let mut logits = vec![0.0; classes];
    let inv_n = 1.0 / train.len() as f64;
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        for &i in train {
            for c in 0..classes {
                logits[c] = b[c] + (0..d).map(|j| z(i, j) * w[j * classes + c]).sum::<f64>();
            }
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for c in 0..classes {
                let p = (logits[c] - mx).exp() / s - if labels[i] == c { 1.0 } else { 0.0 };
                gb[c] += p * inv_n;
                for j in 0..d {
                    gw[j * classes + c] += p * z(i, j) * inv_n;
                }
            }
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= cfg.lr * g;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= cfg.lr * g;
        }
    }
    let correct = val
        .iter()
        .filter(|&&i| {
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..classes {
                let l = b[c] + (0..d).map(|j| z(i, j) * w[j * classes + c]).sum::<f64>();
                if l > best.0 {
                    best = (l, c);
                }
            }
            best.1 == labels[i]
        })
        .count();
    Ok(correct as f64 / val.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return shape_err("pearson_r", format!("{} vs {} values", xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return invalid(format!("pearson_r needs at least 3 points, got {}", xs.len()));
    }
    pearson_raw(xs, ys).ok_or_else(|| crate::Error::InvalidArgument("pearson_r: zero variance".into()))
}

fn pearson_raw(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 1e-300 || syy <= 1e-300 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Local distance similarity: per image, Pearson correlation between the
/// negated grid distance of each unordered token pair and the cosine
/// similarity of their features, averaged over the batch. Images with zero
/// variance in either series contribute 0.
pub fn lds<T: Real>(tokens: &Tensor<T>, grid_h: usize, grid_w: usize) -> Result<f64> {
    let dims = tokens.dims();
    if dims.len() != 3 || dims[1] != grid_h * grid_w {
        return shape_err("lds", format!("tokens {dims:?} for grid {grid_h}x{grid_w}"));
    }
    let (b, n, d) = (dims[0], dims[1], dims[2]);
    if b == 0 || n < 3 {
        return invalid("lds needs a non-empty batch and at least 3 tokens");
    }
    let mut neg_dist = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (yi, xi) = ((i / grid_w) as f64, (i % grid_w) as f64);
            let (yj, xj) = ((j / grid_w) as f64, (j % grid_w) as f64);
            neg_dist.push(-((yi - yj).powi(2) + (xi - xj).powi(2)).sqrt());
        }
    }
    let data: Vec<f64> = tokens.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let mut total = 0.0;
    let mut sims = Vec::with_capacity(neg_dist.len());
    for img in data.chunks(n * d) {
        sims.clear();
        for i in 0..n {
            for j in i + 1..n {
                sims.push(cosine(&img[i * d..(i + 1) * d], &img[j * d..(j + 1) * d]));
            }
        }
        total += pearson_raw(&neg_dist, &sims).unwrap_or(0.0);
    }
    Ok(total / b as f64)
}

/// Cosine-similarity Gram matrix `[N, N]` of one image's tokens `[N, d]`.
/// The diagonal is 1 by definition, including zero-norm tokens.
pub fn self_similarity<T: Real>(tokens: &Tensor<T>) -> Tensor<f64> {
    let d = tokens.last_dim();
    let n = tokens.rows();
    let data: Vec<f64> = tokens.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            let c = cosine(&data[i * d..(i + 1) * d], &data[j * d..(j + 1) * d]);
            out[i * n + j] = c;
            out[j * n + i] = c;
        }
    }
    Tensor::from_vec(&[n, n], out).expect("dims")
}

/// Noise level at which diffusion features are probed.
pub const T_PROBE: f64 = 0.25;

/// Linear-probe accuracy of every block's mean-pooled latent-position
/// features, computed on latents noised to `t_probe` under the null condition.
pub fn probe_diffusion_depth(
    model: &DiTModel,
    latents: &Tensor<f32>,
    labels: &[usize],
    t_probe: f64,
    seed: u64,
    cfg: ProbeConfig,
) -> Result<Vec<f64>> {
    let n = latents.dims().first().copied().unwrap_or(0);
    if n != labels.len() {
        return shape_err("probe_diffusion_depth", format!("{n} latents vs {} labels", labels.len()));
    }
    let eps = Tensor::from_vec(
        latents.dims(),
        rng::normal_vec_f32(&mut rng::stream(seed, "probe-noise", 0), latents.len()),
    )?;
    let state = make_noisy(latents, &eps, &vec![t_probe; n])?;
    let feats = model.block_features(&state.x_t, &state.t, &vec![Cond::Null; n])?;
    let (train, val) = split_indices(n, 0.5, seed);
    feats.iter().map(|f| linear_probe(f, labels, &train, &val, cfg)).collect()
}

/// Ordered (epoch, unguided FD) evaluations of one training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FidCurve {
    points: Vec<(f64, f64)>,
}

impl FidCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return invalid("FidCurve epochs must be strictly increasing");
        }
        Ok(FidCurve { points })
    }

    pub fn push(&mut self, epoch: f64, fd: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if epoch <= last {
                return invalid(format!("epoch {epoch} not after {last}"));
            }
        }
        self.points.push((epoch, fd));
        Ok(())
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Result of [`ep_fid_at_k`]. `NotReached` orders after every epoch.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum EpochsToFid {
    Reached(f64),
    NotReached,
}

impl std::fmt::Display for EpochsToFid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EpochsToFid::Reached(e) => write!(f, "{e}"),
            EpochsToFid::NotReached => f.write_str("NOT_REACHED"),
        }
    }
}

/// Smallest recorded epoch whose FD is at most `k` (no interpolation).
pub fn ep_fid_at_k(curve: &FidCurve, k: f64) -> Result<EpochsToFid> {
    if curve.is_empty() {
        return invalid("ep_fid_at_k on an empty curve");
    }
    Ok(curve
        .points
        .iter()
        .find(|&&(_, fd)| fd <= k)
        .map_or(EpochsToFid::NotReached, |&(e, _)| EpochsToFid::Reached(e)))
}

/// One scalar result with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub space: String,
}

/// Named scalar results.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn push(&mut self, name: &str, value: f64, n: usize, seed: u64, space: &str) -> Result<()> {
        if !value.is_finite() {
            return invalid(format!("metric {name} is not finite ({value})"));
        }
        self.entries.push(MetricEntry { name: name.into(), value, n, seed, space: space.into() });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    /// CSV rows `run_id,metric,value,n,seed,space` (no header).
    pub fn csv_rows(&self, run_id: &str) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| format!("{run_id},{},{:.9},{},{},{}", e.name, e.value, e.n, e.seed, e.space))
            .collect()
    }
}
