//! One desk-scale run: data, frozen encoder, decoder, diffusion training with
//! periodic unguided evaluation, and resumable state.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use raev2::checkpoint::Checkpoint;
use raev2::data::{gen_dataset, Dataset};
use raev2::decoder::{reconstruction_report_from_latents, train_decoder_on_latents, LatentDecoder};
use raev2::dit::{DiTModel, LossRecord, Trainer, TrainingData};
use raev2::encoders::{Latent, Recipe, ToyEncoder};
use raev2::guidance::{balanced_conds, euler_sample, GuidanceConfig, Nfe};
use raev2::metrics::{frechet_distance, FeatureSpace, FidCurve, MetricReport};
use raev2::{ParamSet, Tensor};

use crate::config::RunConfig;
use crate::io::{num, save_checkpoint, Csv, RunPaths};

const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

/// Train/eval data plus the frozen reference feature space used for FD_toy.
pub struct Bench {
    pub train: Dataset,
    pub eval: Dataset,
    pub reference: FeatureSpace,
    /// Reference features of the first `eval.n` held-out images.
    pub real_features: Tensor<f64>,
}

impl Bench {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let train = gen_dataset(cfg.train_size, cfg.classes, cfg.image_size, cfg.data_seed)?;
        let eval = gen_dataset(cfg.eval_size, cfg.classes, cfg.image_size, cfg.data_seed ^ EVAL_SEED_SALT)?;
        let reference = FeatureSpace::reference(&train, cfg.encoder_config(), cfg.ref_seed)?;
        let real = eval.head(cfg.eval_n)?;
        let real_features = reference.extract(&real.images)?;
        Ok(Bench { train, eval, reference, real_features })
    }

    /// Whether this bench was built for `cfg`'s data and reference settings.
    pub fn matches(&self, cfg: &RunConfig) -> bool {
        self.train.len() == cfg.train_size - cfg.train_size % cfg.classes
            && self.train.classes == cfg.classes
            && self.train.image_size == cfg.image_size
            && self.real_features.dims()[0] == cfg.eval_n.min(self.eval.len())
            && self.reference.name.ends_with(&format!("s{}", cfg.ref_seed))
    }

    pub fn fd_to_real(&self, images: &Tensor<f32>) -> Result<f64> {
        Ok(frechet_distance(&self.real_features, &self.reference.extract(images)?)?)
    }
}

/// Frozen encoder, training latents and decoder for one run.
pub struct Stage1 {
    pub encoder: ToyEncoder,
    pub latents: Latent,
    /// Aggregated latents of a different encoder, when REPA aligns to one.
    pub repa_targets: Option<Tensor<f32>>,
    pub decoder: LatentDecoder,
    pub decoder_losses: Vec<f64>,
}

fn encoder_for(recipe: Recipe, cfg: &RunConfig, bench: &Bench) -> Result<ToyEncoder> {
    Ok(ToyEncoder::build(recipe, cfg.encoder_config(), Some(&bench.train), cfg.seed)?)
}

impl Stage1 {
    pub fn build(cfg: &RunConfig, bench: &Bench) -> Result<Self> {
        let agg = cfg.aggregation();
        let encoder = encoder_for(cfg.recipe, cfg, bench)?;
        let latents = agg.encode(&encoder, &bench.train.images)?;
        let repa_targets = match cfg.repa_target {
            Some(r) => Some(agg.encode(&encoder_for(r, cfg, bench)?, &bench.train.images)?.tokens),
            None => None,
        };
        let (decoder, decoder_losses) =
            train_decoder_on_latents(&latents, &bench.train.images, cfg.decoder_config(), cfg.seed)?;
        Ok(Stage1 { encoder, latents, repa_targets, decoder, decoder_losses })
    }

    pub fn training_data<'a>(&'a self, bench: &'a Bench) -> TrainingData<'a> {
        TrainingData { latents: &self.latents.tokens, labels: &bench.train.labels, repa_targets: self.repa_targets.as_ref() }
    }

    /// PSNR, MSE and rFD on the held-out images.
    pub fn reconstruction(&self, cfg: &RunConfig, bench: &Bench) -> Result<MetricReport> {
        let eval = bench.eval.head(cfg.eval_n)?;
        let lat = cfg.aggregation().encode(&self.encoder, &eval.images)?;
        Ok(reconstruction_report_from_latents(&self.decoder, &lat, &eval.images, &bench.reference, cfg.seed)?)
    }

    /// Encoder and decoder weights; latents are recomputed on load.
    pub fn save(&self, cfg: &RunConfig, path: &std::path::Path) -> Result<()> {
        let mut ck = Checkpoint::new(format!("{}\n{}", stage1_provenance(cfg), cfg.portable_text()));
        ck.push_params("enc/", self.encoder.params(), false);
        ck.push_params("dec/", self.decoder.params(), false);
        save_checkpoint(&ck, path)
    }

    /// Loads the cached build for `cfg`'s stage-1 settings from
    /// `<output_dir>/stage1/`, otherwise builds and saves it.
    pub fn load_or_build(cfg: &RunConfig, bench: &Bench) -> Result<Self> {
        let path = stage1_path(cfg);
        if path.exists() {
            let ck = Checkpoint::load(&path)?;
            if ck.metadata.lines().next() == Some(stage1_provenance(cfg).as_str()) {
                let mut enc_ps = ToyEncoder::build(Recipe::RandProj, cfg.encoder_config(), None, 0)?.params().clone();
                ck.load_params("enc/", &mut enc_ps)?;
                let encoder = ToyEncoder::from_parts(cfg.recipe, cfg.encoder_config(), cfg.seed, enc_ps)?;
                let latents = cfg.aggregation().encode(&encoder, &bench.train.images)?;
                let (tokens, channels) = (latents.tokens_per_item(), latents.channels());
                let mut dec_ps = LatentDecoder::init(tokens, channels, cfg.decoder_config(), 0)?.params().clone();
                ck.load_params("dec/", &mut dec_ps)?;
                let decoder = LatentDecoder::from_params(tokens, channels, cfg.decoder_config(), dec_ps)?;
                let repa_targets = match cfg.repa_target {
                    Some(r) => Some(cfg.aggregation().encode(&encoder_for(r, cfg, bench)?, &bench.train.images)?.tokens),
                    None => None,
                };
                return Ok(Stage1 { encoder, latents, repa_targets, decoder, decoder_losses: Vec::new() });
            }
            log::warn!("{} was written by another config; rebuilding", path.display());
        }
        let s1 = Self::build(cfg, bench)?;
        s1.save(cfg, &path)?;
        Ok(s1)
    }

    /// Decoded images of latent tokens `[n, N, d]`.
    pub fn decode(&self, tokens: Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.decoder.decode(&Latent { tokens, normalized: true })?)
    }
}

/// Samples `eval.n` class-balanced latents under `guidance`, decodes them and
/// returns FD_toy against the held-out images with the NFE used.
pub fn eval_fd(
    model: &DiTModel,
    guidance: &GuidanceConfig,
    cfg: &RunConfig,
    bench: &Bench,
    stage1: &Stage1,
) -> Result<(f64, Nfe)> {
    let conds = balanced_conds(cfg.eval_n, cfg.classes);
    let out = euler_sample(model, &conds, &cfg.sampler_config(), guidance)?;
    let images = stage1.decode(out.latents)?;
    Ok((bench.fd_to_real(&images)?, out.nfe))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop (and checkpoint) after this many completed steps.
    pub stop_after: Option<u64>,
    /// Continue from `state.ckpt` when present.
    pub resume: bool,
}

pub struct RunOutcome {
    pub paths: RunPaths,
    pub trainer: Trainer,
    pub curve: FidCurve,
    /// False when stopped early.
    pub finished: bool,
}

impl RunOutcome {
    pub fn final_fd(&self) -> Option<f64> {
        if self.finished {
            self.curve.points().last().map(|p| p.1)
        } else {
            None
        }
    }
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(&cfg.experiment)
}

fn history_tensor(h: &[LossRecord]) -> Tensor<f64> {
    let data = h.iter().flat_map(|r| [r.step as f64, r.fm, r.repa, r.total, r.lr, r.grad_norm]).collect();
    Tensor::from_vec(&[h.len(), 6], data).expect("dims")
}

fn history_from(t: &Tensor<f64>) -> Vec<LossRecord> {
    t.data()
        .chunks(6)
        .map(|c| LossRecord { step: c[0] as u64, fm: c[1], repa: c[2], total: c[3], lr: c[4], grad_norm: c[5] })
        .collect()
}

fn curve_tensor(c: &FidCurve) -> Tensor<f64> {
    Tensor::from_vec(&[c.points().len(), 2], c.points().iter().flat_map(|&(e, f)| [e, f]).collect()).expect("dims")
}

pub fn stage1_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("stage1").join(format!("{}.ckpt", cfg.stage1_hash()))
}

fn stage1_provenance(cfg: &RunConfig) -> String {
    format!("# stage1_hash={},seed={},format={}", cfg.stage1_hash(), cfg.seed, crate::config::FORMAT_VERSION)
}

fn metadata(cfg: &RunConfig) -> String {
    format!("{}\n{}", cfg.provenance(), cfg.portable_text())
}

fn save_state(cfg: &RunConfig, paths: &RunPaths, tr: &Trainer, curve: &FidCurve) -> Result<()> {
    let meta = metadata(cfg);
    let mut st = Checkpoint::new(meta.clone());
    st.push_params("live/", &tr.model.params, true);
    st.push_params("ema/", &tr.ema, false);
    st.push("history", history_tensor(&tr.history));
    st.push("fid_curve", curve_tensor(curve));
    save_checkpoint(&st, &paths.state())?;
    let mut ema = Checkpoint::new(meta.clone());
    ema.push_params("", &tr.ema, false);
    save_checkpoint(&ema, &paths.ema())?;
    let mut live = Checkpoint::new(meta);
    live.push_params("", &tr.model.params, false);
    save_checkpoint(&live, &paths.live())
}

fn load_state(cfg: &RunConfig, paths: &RunPaths) -> Result<(Trainer, FidCurve)> {
    let st = Checkpoint::load(&paths.state())?;
    let want = cfg.provenance();
    if st.metadata.lines().next() != Some(want.as_str()) {
        bail!("{}: written by a different config (expected `{want}`)", paths.state().display());
    }
    let mut model = DiTModel::init(cfg.dit_config(), cfg.seed)?;
    st.load_params("live/", &mut model.params)?;
    let mut tr = Trainer::new(model, cfg.train_config())?;
    st.load_params("ema/", &mut tr.ema)?;
    tr.history = history_from(st.get::<f64>("history")?);
    let pts = st.get::<f64>("fid_curve")?.data().chunks(2).map(|c| (c[0], c[1])).collect();
    Ok((tr, FidCurve::new(pts)?))
}

/// Loads the EMA weights written by a finished or stopped run.
pub fn load_ema_model(cfg: &RunConfig) -> Result<DiTModel> {
    let path = RunPaths::new(run_dir(cfg)).ema();
    let ck = Checkpoint::load(&path)?;
    let mut ps: ParamSet<f32> = DiTModel::init(cfg.dit_config(), cfg.seed)?.params;
    ck.load_params("", &mut ps).with_context(|| format!("loading {}", path.display()))?;
    Ok(DiTModel::from_params(cfg.dit_config(), ps)?)
}

pub fn loss_csv(cfg: &RunConfig, history: &[LossRecord]) -> Csv {
    let mut c = Csv::new(&cfg.provenance(), &["step", "fm", "repa", "total", "lr", "grad_norm"]);
    for r in history {
        c.push(vec![r.step.to_string(), num(r.fm), num(r.repa), num(r.total), num(r.lr), num(r.grad_norm)]);
    }
    c
}

pub fn fid_curve_csv(cfg: &RunConfig, curve: &FidCurve) -> Csv {
    let spe = cfg.steps_per_epoch() as f64;
    let mut c = Csv::new(&cfg.provenance(), &["epoch", "step", "fd_toy"]);
    for &(e, fd) in curve.points() {
        c.push(vec![num(e), ((e * spe).round() as u64).to_string(), num(fd)]);
    }
    c
}

/// Trains the diffusion model of `cfg`, evaluating unguided FD_toy on the
/// configured cadence. Writes the config echo, loss and FID-curve CSVs and
/// EMA/live/state checkpoints into the run directory.
pub fn run_training(cfg: &RunConfig, bench: &Bench, stage1: &Stage1, opts: RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let paths = RunPaths::new(run_dir(cfg));
    std::fs::create_dir_all(&paths.dir).with_context(|| format!("creating {}", paths.dir.display()))?;
    crate::io::write_file(&paths.config(), format!("{}\n{}", cfg.provenance(), cfg.to_text()).as_bytes())?;

    let (mut tr, mut curve) = if opts.resume && paths.state().exists() {
        load_state(cfg, &paths)?
    } else {
        (Trainer::new(DiTModel::init(cfg.dit_config(), cfg.seed)?, cfg.train_config())?, FidCurve::default())
    };
    let data = stage1.training_data(bench);
    let spe = cfg.steps_per_epoch() as f64;
    let target = opts.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let evals = cfg.eval_steps();
    let mut last_ckpt = tr.step();
    // Zero-length run: validates data against the model before training.
    tr.run_until(&data, tr.step())?;
    while tr.step() < target {
        tr.train_step(&data)?;
        let step = tr.step();
        if evals.contains(&step) {
            let (fd, _) = eval_fd(&tr.ema_model(), &GuidanceConfig::none(), cfg, bench, stage1)?;
            log::info!("{}: step {step} epoch {:.2} fd_toy {fd:.4}", cfg.experiment, step as f64 / spe);
            curve.push(step as f64 / spe, fd)?;
        }
        if cfg.checkpoint_every > 0 && step - last_ckpt >= cfg.checkpoint_every && step < target {
            save_state(cfg, &paths, &tr, &curve)?;
            last_ckpt = step;
        }
    }
    save_state(cfg, &paths, &tr, &curve)?;
    loss_csv(cfg, &tr.history).write(&paths.loss())?;
    fid_curve_csv(cfg, &curve).write(&paths.fid_curve())?;
    let finished = tr.step() >= cfg.steps;
    Ok(RunOutcome { paths, trainer: tr, curve, finished })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.train_size = 64;
        c.eval_size = 32;
        c.eval_n = 32;
        c.classes = 4;
        c.image_size = 8;
        c.enc_width = 16;
        c.enc_layers = 2;
        c.k = 1;
        c.enc_train_steps = 5;
        c.dec_width = 16;
        c.dec_hidden = 16;
        c.dec_steps = 5;
        c.width = 16;
        c.heads = 2;
        c.mlp_hidden = 16;
        c.depth = 2;
        c.steps = 48;
        c.batch = 4;
        c.sample_steps = 3;
        c.eval_every_epochs = 1.0;
        c
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.output_dir = dir.path().join("a");
        let bench = Bench::build(&cfg).unwrap();
        let s1 = Stage1::build(&cfg, &bench).unwrap();
        let full = run_training(&cfg, &bench, &s1, RunOptions::default()).unwrap();
        assert!(full.finished);
        assert_eq!(full.curve.points().len(), 3);

        cfg.output_dir = dir.path().join("b");
        let part = run_training(&cfg, &bench, &s1, RunOptions { stop_after: Some(5), resume: true }).unwrap();
        assert!(!part.finished && part.final_fd().is_none());
        let done = run_training(&cfg, &bench, &s1, RunOptions { stop_after: None, resume: true }).unwrap();
        assert_eq!(done.trainer.model.params, full.trainer.model.params);
        assert_eq!(done.trainer.ema, full.trainer.ema);
        for f in ["loss.csv", "fid_curve.csv", "ema.ckpt", "state.ckpt"] {
            let a = std::fs::read(dir.path().join("a").join(&cfg.experiment).join(f)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(&cfg.experiment).join(f)).unwrap();
            assert!(a == b, "{f} differs");
        }
        let ema = load_ema_model(&cfg).unwrap();
        assert_eq!(ema.params.cast::<f32>(), full.trainer.ema);
    }

    #[test]
    fn resume_rejects_other_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.output_dir = dir.path().into();
        let bench = Bench::build(&cfg).unwrap();
        let s1 = Stage1::build(&cfg, &bench).unwrap();
        run_training(&cfg, &bench, &s1, RunOptions { stop_after: Some(2), resume: false }).unwrap();
        cfg.lambda_repa = 0.0;
        let err = run_training(&cfg, &bench, &s1, RunOptions { stop_after: None, resume: true }).err().unwrap();
        assert!(err.to_string().contains("different config"), "{err}");
    }
}
