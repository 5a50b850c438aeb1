//! Latent-to-pixel decoder trained with pixel MSE, plus reconstruction
//! metrics.

use crate::data::{unpatchify, Dataset};
use crate::encoders::{Aggregation, Latent, ToyEncoder};
use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{frechet_distance, FeatureSpace, MetricReport};
use crate::optim::{clip_grad_norm, Adam};
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub width: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Pixel patch edge per latent token.
    pub patch: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { width: 64, hidden: 128, blocks: 2, steps: 2000, batch: 32, lr: 1e-3, patch: 4 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.hidden == 0 || self.patch == 0 || self.batch == 0 {
            return invalid("decoder width, hidden, patch and batch must be positive");
        }
        if !(self.lr > 0.0) {
            return invalid(format!("decoder lr must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Token-mixing decoder: per-token embedding, `blocks` residual pairs of
/// (LN, token mix) and (LN, MLP), then a linear map to `patch²·3` pixels per
/// token.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDecoder {
    pub config: DecoderConfig,
    tokens: usize,
    channels: usize,
    params: ParamSet<f32>,
}

fn gaussian(dims: &[usize], std: f64, r: &mut rng::Rng) -> Tensor<f32> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, rng::normal_vec(r, n).into_iter().map(|v| (v * std) as f32).collect()).expect("dims")
}

impl LatentDecoder {
    pub fn init(tokens: usize, channels: usize, config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = (tokens as f64).sqrt().round() as usize;
        if grid * grid != tokens || channels == 0 {
            return shape_err("LatentDecoder", format!("{tokens} tokens x {channels} channels"));
        }
        let (w, h, pd) = (config.width, config.hidden, config.patch * config.patch * 3);
        let mut r = rng::stream(seed, "decoder-init", 0);
        let mut ps = ParamSet::new();
        ps.insert("in.w", gaussian(&[channels, w], 1.0 / (channels as f64).sqrt(), &mut r))?;
        ps.insert("in.b", Tensor::zeros(&[w]))?;
        for i in 0..config.blocks {
            ps.insert(format!("b{i}.mix"), gaussian(&[tokens, tokens], 0.5 / (tokens as f64).sqrt(), &mut r))?;
            ps.insert(format!("b{i}.fc1.w"), gaussian(&[w, h], (2.0 / w as f64).sqrt(), &mut r))?;
            ps.insert(format!("b{i}.fc1.b"), Tensor::zeros(&[h]))?;
            ps.insert(format!("b{i}.fc2.w"), gaussian(&[h, w], 0.5 / (h as f64).sqrt(), &mut r))?;
            ps.insert(format!("b{i}.fc2.b"), Tensor::zeros(&[w]))?;
        }
        ps.insert("out.w", gaussian(&[w, pd], 1.0 / (w as f64).sqrt(), &mut r))?;
        ps.insert("out.b", Tensor::full(&[pd], 0.5))?;
        Ok(LatentDecoder { config, tokens, channels, params: ps })
    }

    /// Rebuilds from stored weights, checking names and shapes.
    pub fn from_params(tokens: usize, channels: usize, config: DecoderConfig, params: ParamSet<f32>) -> Result<Self> {
        let template = Self::init(tokens, channels, config, 0)?;
        template.params.check_compatible(&params)?;
        Ok(LatentDecoder { config, tokens, channels, params })
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(&self, x: &Latent) -> Result<()> {
        let d = x.tokens.dims();
        if d.len() != 3 || d[1] != self.tokens || d[2] != self.channels {
            return shape_err("decode", format!("latent {d:?}, decoder expects [_, {}, {}]", self.tokens, self.channels));
        }
        Ok(())
    }

    /// Pixel patches `[batch*N, patch²·3]`, unclamped.
    fn forward(&self, g: &mut Graph<f32>, ps: &ParamSet<f32>, x: &Tensor<f32>, train: bool) -> Result<Var> {
        let batch = x.dims()[0];
        let n = self.tokens;
        let p = |g: &mut Graph<f32>, name: &str| if train { g.param(ps, name) } else { g.frozen(ps, name) };
        let inp = g.input(x.clone().reshape(&[batch * n, self.channels])?);
        let (iw, ib) = (p(g, "in.w")?, p(g, "in.b")?);
        let mut z = g.linear(inp, iw, ib)?;
        for i in 0..self.config.blocks {
            let u = g.layer_norm(z);
            let mix = p(g, &format!("b{i}.mix"))?;
            let m = g.token_mix(mix, u, batch)?;
            z = g.add(z, m)?;
            let u = g.layer_norm(z);
            let (w1, b1) = (p(g, &format!("b{i}.fc1.w"))?, p(g, &format!("b{i}.fc1.b"))?);
            let hdn = g.linear(u, w1, b1)?;
            let hdn = g.gelu(hdn);
            let (w2, b2) = (p(g, &format!("b{i}.fc2.w"))?, p(g, &format!("b{i}.fc2.b"))?);
            let hdn = g.linear(hdn, w2, b2)?;
            z = g.add(z, hdn)?;
        }
        let (ow, ob) = (p(g, "out.w")?, p(g, "out.b")?);
        g.linear(z, ow, ob)
    }

    /// Images `[batch, H, W, 3]` clamped to `[0, 1]`.
    pub fn decode(&self, x: &Latent) -> Result<Tensor<f32>> {
        self.check(x)?;
        let batch = x.batch();
        let pd = self.config.patch * self.config.patch * 3;
        let mut out = Vec::with_capacity(batch * self.tokens * pd);
        const CHUNK: usize = 256;
        for start in (0..batch).step_by(CHUNK) {
            let count = CHUNK.min(batch - start);
            let mut g = Graph::new();
            let y = self.forward(&mut g, &self.params, &x.tokens.slice_outer(start, count)?, false)?;
            out.extend(g.value(y).data().iter().map(|v| v.clamp(0.0, 1.0)));
        }
        unpatchify(&Tensor::from_vec(&[batch, self.tokens, pd], out)?, self.config.patch)
    }
}

/// Trains a decoder on precomputed latents paired with their source images.
/// Returns the decoder and its per-step training MSE.
pub fn train_decoder_on_latents(
    latents: &Latent,
    images: &Tensor<f32>,
    config: DecoderConfig,
    seed: u64,
) -> Result<(LatentDecoder, Vec<f64>)> {
    let n_items = latents.batch();
    if n_items == 0 {
        return invalid("cannot train a decoder on an empty dataset");
    }
    if images.dims()[0] != n_items {
        return shape_err("train_decoder", format!("{n_items} latents vs {} images", images.dims()[0]));
    }
    let mut dec = LatentDecoder::init(latents.tokens_per_item(), latents.channels(), config, seed)?;
    let target_patches = crate::data::patchify(images, config.patch)?;
    if target_patches.dims()[1] != dec.tokens {
        return shape_err("train_decoder", format!("image grid {} tokens vs latent {}", target_patches.dims()[1], dec.tokens));
    }
    let adam = Adam { beta2: 0.999, ..Adam::default() };
    let batch = config.batch.min(n_items);
    let mut losses = Vec::with_capacity(config.steps);
    let mut ps = std::mem::take(&mut dec.params);
    for step in 0..config.steps {
        let idx: Vec<usize> = if batch == n_items {
            (0..n_items).collect()
        } else {
            let mut r = rng::stream(seed, "decoder-batch", step as u64);
            (0..batch).map(|_| rand::Rng::random_range(&mut r, 0..n_items)).collect()
        };
        let x = latents.tokens.select_outer(&idx)?;
        let target = target_patches.select_outer(&idx)?;
        let mut g = Graph::new();
        let y = dec.forward(&mut g, &ps, &x, true)?;
        let loss = g.mse_loss(y, &target)?;
        let lv = g.value(loss).data()[0] as f64;
        if !lv.is_finite() {
            return Err(crate::Error::NonFiniteLoss(step));
        }
        losses.push(lv);
        g.backward(loss)?;
        g.accumulate_param_grads(&mut ps);
        clip_grad_norm(&mut ps, 1.0)?;
        adam.step(&mut ps, config.lr)?;
    }
    dec.params = ps;
    Ok((dec, losses))
}

/// Encodes `dataset` with the frozen encoder and aggregation, then trains.
pub fn train_decoder(
    enc: &ToyEncoder,
    agg: &Aggregation,
    dataset: &Dataset,
    config: DecoderConfig,
    seed: u64,
) -> Result<(LatentDecoder, Vec<f64>)> {
    if dataset.is_empty() {
        return invalid("cannot train a decoder on an empty dataset");
    }
    let latents = agg.encode(enc, &dataset.images)?;
    train_decoder_on_latents(&latents, &dataset.images, config, seed)
}

pub fn pixel_mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.check_same_dims(b, "pixel_mse")?;
    if a.is_empty() {
        return invalid("pixel_mse of empty images");
    }
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Mean over the batch of per-image `10·log10(1/MSE)`, each capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.check_same_dims(b, "psnr")?;
    let n = a.dims().first().copied().unwrap_or(0);
    if n == 0 || a.is_empty() {
        return invalid("psnr of empty images");
    }
    let per = a.len() / n;
    let total: f64 = a
        .data()
        .chunks(per)
        .zip(b.data().chunks(per))
        .map(|(x, y)| {
            let mse = x.iter().zip(y).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum::<f64>() / per as f64;
            if mse <= 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
            }
        })
        .sum();
    Ok(total / n as f64)
}

/// PSNR, pixel MSE and rFD in `space` between `images` and the decoder's
/// reconstruction of `latents`.
pub fn reconstruction_report_from_latents(
    dec: &LatentDecoder,
    latents: &Latent,
    images: &Tensor<f32>,
    space: &FeatureSpace,
    seed: u64,
) -> Result<MetricReport> {
    let recon = dec.decode(latents)?;
    let n = images.dims()[0];
    let mut report = MetricReport::default();
    report.push("psnr", psnr(images, &recon)?, n, seed, "pixel")?;
    report.push("mse", pixel_mse(images, &recon)?, n, seed, "pixel")?;
    let rfd = frechet_distance(&space.extract(images)?, &space.extract(&recon)?)?;
    report.push("rfd", rfd, n, seed, &space.name)?;
    Ok(report)
}

pub fn reconstruction_report(
    enc: &ToyEncoder,
    agg: &Aggregation,
    dec: &LatentDecoder,
    eval: &Dataset,
    space: &FeatureSpace,
    seed: u64,
) -> Result<MetricReport> {
    let latents = agg.encode(enc, &eval.images)?;
    reconstruction_report_from_latents(dec, &latents, &eval.images, space, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, patchify};
    use crate::encoders::{EncoderConfig, Recipe};

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig { image_size: 16, patch: 4, width: 32, layers: 4, train_steps: 30, train_batch: 32, ..Default::default() }
    }

    fn small() -> DecoderConfig {
        DecoderConfig { width: 32, hidden: 64, steps: 10, batch: 8, ..Default::default() }
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f32>::full(&[2, 4, 4, 3], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Tensor::<f32>::full(&[2, 4, 4, 3], 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!((psnr(&b, &a).unwrap() - psnr(&a, &b).unwrap()).abs() < 1e-12);
        let zeros = Tensor::<f32>::zeros(&[1, 4, 4, 3]);
        let ones = Tensor::<f32>::full(&[1, 4, 4, 3], 1.0);
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        assert!(psnr(&zeros, &a).is_err());
    }

    #[test]
    fn decode_range_shape_and_determinism() {
        let dec = LatentDecoder::init(16, 32, small(), 3).unwrap();
        let x = Latent { tokens: Tensor::zeros(&[3, 16, 32]), normalized: true };
        let img = dec.decode(&x).unwrap();
        assert_eq!(img.dims(), &[3, 16, 16, 3]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(img, dec.decode(&x).unwrap());
        let bad = Latent { tokens: Tensor::zeros(&[1, 16, 31]), normalized: true };
        assert!(dec.decode(&bad).is_err());
    }

    #[test]
    fn zero_steps_is_init_and_training_is_deterministic() {
        let ds = gen_dataset(16, 2, 16, 1).unwrap();
        let enc = ToyEncoder::build(Recipe::RandProj, enc_cfg(), None, 1).unwrap();
        let agg = Aggregation::Mls { k: 1 };
        let zero = DecoderConfig { steps: 0, ..small() };
        let (d0, l0) = train_decoder(&enc, &agg, &ds, zero, 5).unwrap();
        assert!(l0.is_empty());
        assert_eq!(d0, LatentDecoder::init(16, 32, zero, 5).unwrap());
        let (a, la) = train_decoder(&enc, &agg, &ds, small(), 5).unwrap();
        let (b, lb) = train_decoder(&enc, &agg, &ds, small(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let empty = ds.head(0).unwrap();
        assert!(train_decoder(&enc, &agg, &empty, small(), 5).is_err());
    }

    #[test]
    fn overfits_one_batch() {
        let ds = gen_dataset(8, 2, 16, 2).unwrap();
        let enc = ToyEncoder::build(Recipe::RandProj, enc_cfg(), None, 2).unwrap();
        let agg = Aggregation::Mls { k: 1 };
        let cfg = DecoderConfig { steps: 2000, batch: 8, ..DecoderConfig::default() };
        let (dec, _) = train_decoder(&enc, &agg, &ds, cfg, 0).unwrap();
        let recon = dec.decode(&agg.encode(&enc, &ds.images).unwrap()).unwrap();
        let mse = pixel_mse(&ds.images, &recon).unwrap();
        assert!(mse <= 1e-3, "{mse}");
    }

    #[test]
    fn identity_decoder_report_is_perfect() {
        // latent = raw pixel patches; decoder weights make the map exact
        let ds = gen_dataset(96, 2, 16, 4).unwrap();
        let patches = patchify(&ds.images, 4).unwrap();
        let cfg = DecoderConfig { width: 48, hidden: 8, blocks: 1, ..small() };
        let mut dec = LatentDecoder::init(16, 48, cfg, 0).unwrap();
        let mut eye = Tensor::<f32>::zeros(&[48, 48]);
        for i in 0..48 {
            eye.data_mut()[i * 48 + i] = 1.0;
        }
        for p in dec.params_mut().iter_mut() {
            p.value = match p.name.as_str() {
                "in.w" | "out.w" => eye.clone(),
                _ => Tensor::zeros(p.value.dims()),
            };
        }
        let space = FeatureSpace {
            name: "probe".into(),
            encoder: ToyEncoder::build(Recipe::RandProj, EncoderConfig { width: 8, ..enc_cfg() }, None, 9).unwrap(),
            layers: vec![1, 3],
        };
        let latents = Latent { tokens: patches, normalized: false };
        let r = reconstruction_report_from_latents(&dec, &latents, &ds.images, &space, 0).unwrap();
        assert_eq!(r.get("psnr").unwrap(), PSNR_CAP);
        assert!(r.get("rfd").unwrap() <= 1e-6);
    }
}
