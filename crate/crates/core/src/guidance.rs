//! Euler ODE sampling with no guidance, classifier-free guidance,
//! AutoGuidance or REPA-head guidance, all applied in x-prediction space.

use crate::dit::{train_diffusion, Cond, DiTModel, TrainConfig, Trainer, TrainingData};
use crate::error::{invalid, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Smallest time at which velocity is evaluated.
pub const T_MIN: f64 = 1e-3;

fn check_t(t: f64) -> Result<()> {
    if !(t >= T_MIN) {
        return invalid(format!("t = {t} below t_min = {T_MIN}"));
    }
    Ok(())
}

/// `v = (x_t − x̂) / t`.
pub fn v_from_x<T: Real>(x_hat: &Tensor<T>, x_t: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_t(t)?;
    x_hat.check_same_dims(x_t, "v_from_x")?;
    let inv = T::lit(1.0 / t);
    let data = x_t.data().iter().zip(x_hat.data()).map(|(&a, &b)| (a - b) * inv).collect();
    Tensor::from_vec(x_t.dims(), data)
}

/// `x̂ = x_t − t·v`.
pub fn x_from_v<T: Real>(v: &Tensor<T>, x_t: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_t(t)?;
    v.check_same_dims(x_t, "x_from_v")?;
    let tt = T::lit(t);
    let data = x_t.data().iter().zip(v.data()).map(|(&a, &b)| a - tt * b).collect();
    Tensor::from_vec(x_t.dims(), data)
}

/// `a + w·(a − b)`; `w = 0` returns `a` unchanged.
fn extrapolate<T: Real>(a: &Tensor<T>, b: &Tensor<T>, w: f64, op: &'static str) -> Result<Tensor<T>> {
    a.check_same_dims(b, op)?;
    if w == 0.0 {
        return Ok(a.clone());
    }
    let wt = T::lit(w);
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + wt * (x - y)).collect();
    Tensor::from_vec(a.dims(), data)
}

/// Rescales each token (last axis) of `x` to the norm of the matching token
/// of `reference`. The REPA head is trained with a cosine objective, so only
/// its direction is an x-prediction; the sampler borrows the scale from x̂_full.
/// Zero tokens stay zero.
pub fn match_token_norms<T: Real>(reference: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    reference.check_same_dims(x, "match_token_norms")?;
    let d = x.last_dim().max(1);
    let mut out = x.data().to_vec();
    for (o, r) in out.chunks_mut(d).zip(reference.data().chunks(d)) {
        let nx = o.iter().map(|&v| v * v).sum::<T>().sqrt();
        if nx > T::zero() {
            let s = r.iter().map(|&v| v * v).sum::<T>().sqrt() / nx;
            o.iter_mut().for_each(|v| *v *= s);
        }
    }
    Tensor::from_vec(x.dims(), out)
}

/// `x̂_full + w·(x̂_full − x̂_repa)`.
pub fn guide_repa<T: Real>(x_full: &Tensor<T>, x_repa: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    extrapolate(x_full, x_repa, w, "guide_repa")
}

/// `x̂_cond + w·(x̂_cond − x̂_uncond)`.
pub fn guide_cfg<T: Real>(x_cond: &Tensor<T>, x_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    extrapolate(x_cond, x_uncond, w, "guide_cfg")
}

/// `x̂_strong + w·(x̂_strong − x̂_weak)`.
pub fn guide_autoguidance<T: Real>(x_strong: &Tensor<T>, x_weak: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    extrapolate(x_strong, x_weak, w, "guide_autoguidance")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GuidanceMode {
    None,
    Cfg,
    AutoGuidance,
    Repa,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 4] = [GuidanceMode::None, GuidanceMode::Cfg, GuidanceMode::AutoGuidance, GuidanceMode::Repa];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::AutoGuidance => "autoguidance",
            GuidanceMode::Repa => "repa",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        GuidanceMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("unknown guidance mode `{s}`")))
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig<'a> {
    pub mode: GuidanceMode,
    pub w: f64,
    /// Guidance is applied when the step midpoint lies in `[lo, hi]`.
    pub interval: (f64, f64),
    pub weak_model: Option<&'a DiTModel>,
}

impl GuidanceConfig<'_> {
    pub fn none() -> Self {
        GuidanceConfig { mode: GuidanceMode::None, w: 0.0, interval: (0.0, 1.0), weak_model: None }
    }

    pub fn repa(w: f64) -> Self {
        GuidanceConfig { mode: GuidanceMode::Repa, w, ..Self::none() }
    }

    pub fn cfg(w: f64) -> Self {
        GuidanceConfig { mode: GuidanceMode::Cfg, w, ..Self::none() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return invalid(format!("guidance weight must be finite and >= 0, got {}", self.w));
        }
        let (lo, hi) = self.interval;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return invalid(format!("guidance interval [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1"));
        }
        if self.mode == GuidanceMode::AutoGuidance && self.weak_model.is_none() {
            return invalid("autoguidance needs a weak model");
        }
        Ok(())
    }
}

impl<'a> GuidanceConfig<'a> {
    pub fn autoguidance(w: f64, weak: &'a DiTModel) -> Self {
        GuidanceConfig { mode: GuidanceMode::AutoGuidance, w, interval: (0.0, 1.0), weak_model: Some(weak) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, t_start: 1.0, t_end: T_MIN, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return invalid("sampler needs at least one step");
        }
        if !(self.t_start <= 1.0 && self.t_start > self.t_end && self.t_end >= T_MIN) {
            return invalid(format!(
                "need 1 >= t_start > t_end >= {T_MIN}, got {} / {}",
                self.t_start, self.t_end
            ));
        }
        Ok(())
    }
}

/// Model forward evaluations spent by one sampling call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Nfe {
    pub strong: u64,
    pub weak: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// `[n, N, d]` final latents.
    pub latents: Tensor<f32>,
    pub nfe: Nfe,
}

/// Euler integration from `t_start` to `t_end` on a uniform grid of `steps`
/// intervals. The returned latents are the guided x-prediction at the last
/// evaluation. One sample is drawn per entry of `cond`.
pub fn euler_sample(
    model: &DiTModel,
    cond: &[Cond],
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<SampleOutput> {
    sampler.validate()?;
    guidance.validate()?;
    if cond.is_empty() {
        return invalid("no samples requested");
    }
    let cfg = model.config;
    let n = cond.len();
    let dims = [n, cfg.tokens, cfg.channels];
    let noise = rng::normal_vec_f32(&mut rng::stream(sampler.seed, "sampler-noise", 0), n * cfg.tokens * cfg.channels);
    let mut x = Tensor::from_vec(&dims, noise)?;
    let h = (sampler.t_start - sampler.t_end) / sampler.steps as f64;
    let null = vec![Cond::Null; n];
    let mut nfe = Nfe::default();
    for i in 0..sampler.steps {
        let t = sampler.t_start - i as f64 * h;
        let mid = t - 0.5 * h;
        let active = guidance.interval.0 <= mid && mid <= guidance.interval.1;
        let ts = vec![t; n];
        let out = model.forward(&x, &ts, cond)?;
        nfe.strong += 1;
        let x_hat = match guidance.mode {
            GuidanceMode::None => out.x_full,
            _ if !active => out.x_full,
            GuidanceMode::Repa => guide_repa(&out.x_full, &match_token_norms(&out.x_full, &out.x_repa)?, guidance.w)?,
            GuidanceMode::Cfg => {
                let un = model.forward(&x, &ts, &null)?;
                nfe.strong += 1;
                guide_cfg(&out.x_full, &un.x_full, guidance.w)?
            }
            GuidanceMode::AutoGuidance => {
                let weak = guidance.weak_model.expect("validated");
                let wk = weak.forward(&x, &ts, cond)?;
                nfe.weak += 1;
                guide_autoguidance(&out.x_full, &wk.x_full, guidance.w)?
            }
        };
        if i + 1 == sampler.steps {
            let v = v_from_x(&x_hat, &x, t)?;
            x = x_from_v(&v, &x, t)?;
        } else {
            let v = v_from_x(&x_hat, &x, t)?;
            x = x.axpy(-h as f32, &v)?;
        }
    }
    Ok(SampleOutput { latents: x, nfe })
}

/// AutoGuidance baseline: the strong config at half depth, trained for a
/// quarter of the strong run's steps with the same data and seed.
pub fn build_weak_model(strong: &DiTModel, data: &TrainingData, config: TrainConfig, strong_steps: u64) -> Result<Trainer> {
    let weak = DiTModel::init(strong.config.weak(), config.seed)?;
    train_diffusion(weak, data, config, strong_steps / 4)
}

/// Balanced class conditions `0, 1, …, classes-1, 0, …` of length `n`.
pub fn balanced_conds(n: usize, classes: usize) -> Vec<Cond> {
    (0..n).map(|i| Cond::Class(i % classes.max(1))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::DiTConfig;
    use crate::optim::TrainSchedule;
    use proptest::prelude::*;

    fn t32(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    fn tiny() -> DiTConfig {
        DiTConfig { depth: 4, width: 32, heads: 4, mlp_hidden: 64, tap: 2, classes: 2, tokens: 4, channels: 8 }
    }

    #[test]
    fn conversion_examples() {
        let x = t32(&[1.0]);
        assert_eq!(v_from_x(&x, &x, 0.3).unwrap().data(), &[0.0]);
        assert_eq!(v_from_x(&t32(&[0.0]), &t32(&[1.0]), 0.5).unwrap().data(), &[2.0]);
        assert_eq!(x_from_v(&t32(&[0.0]), &t32(&[0.7]), 0.4).unwrap().data(), &[0.7]);
        assert_eq!(x_from_v(&t32(&[2.5]), &t32(&[2.5]), 1.0).unwrap().data(), &[0.0]);
        assert!(v_from_x(&x, &x, 1e-4).is_err());
        assert!(x_from_v(&x, &x, 0.0).is_err());
    }

    #[test]
    fn guidance_examples() {
        let one = t32(&[1.0]);
        let zero = t32(&[0.0]);
        assert_eq!(guide_repa(&one, &zero, 0.5).unwrap().data(), &[1.5]);
        assert_eq!(guide_repa(&one, &zero, 0.0).unwrap(), one);
        assert_eq!(guide_repa(&one, &one, 2.0).unwrap(), one);
        assert_eq!(guide_cfg(&t32(&[2.0]), &one, 1.0).unwrap().data(), &[3.0]);
        assert_eq!(guide_cfg(&one, &one, 3.0).unwrap(), one);
        assert_eq!(guide_autoguidance(&one, &zero, 0.0).unwrap(), one);
        assert!(guide_repa(&one, &t32(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig { mode: GuidanceMode::AutoGuidance, ..GuidanceConfig::none() }.validate().is_err());
        assert!(GuidanceConfig { interval: (0.5, 0.5), ..GuidanceConfig::none() }.validate().is_err());
        assert!(GuidanceConfig::repa(-1.0).validate().is_err());
        assert!(SamplerConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { t_end: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!("repa".parse::<GuidanceMode>().unwrap(), GuidanceMode::Repa);
    }

    #[test]
    fn token_norm_matching() {
        let r = Tensor::from_vec(&[2, 2], vec![3.0f64, 4.0, 0.0, 2.0]).unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![0.0f64, 10.0, 0.0, 0.0]).unwrap();
        let m = match_token_norms(&r, &x).unwrap();
        assert_eq!(m.data(), &[0.0, 5.0, 0.0, 0.0]);
        let scaled = match_token_norms(&r, &x.scale(7.0)).unwrap();
        assert_eq!(scaled.data(), m.data());
    }

    fn zero_output_model() -> DiTModel {
        let mut m = DiTModel::init(tiny(), 0).unwrap();
        for p in m.params.iter_mut().filter(|p| p.name.starts_with("out.")) {
            p.value = Tensor::zeros(p.value.dims());
        }
        m
    }

    #[test]
    fn one_step_with_zero_prediction_lands_on_zero() {
        let m = zero_output_model();
        let s = SamplerConfig { steps: 1, ..Default::default() };
        let out = euler_sample(&m, &[Cond::Class(0)], &s, &GuidanceConfig::none()).unwrap();
        assert!(out.latents.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repa_w0_is_unguided_and_nfe_accounting() {
        let m = DiTModel::init(tiny(), 1).unwrap();
        let weak = DiTModel::init(tiny().weak(), 2).unwrap();
        let s = SamplerConfig { steps: 6, seed: 4, ..Default::default() };
        let conds = balanced_conds(5, 2);
        let base = euler_sample(&m, &conds, &s, &GuidanceConfig::none()).unwrap();
        let r0 = euler_sample(&m, &conds, &s, &GuidanceConfig::repa(0.0)).unwrap();
        assert_eq!(base.latents, r0.latents);
        assert_eq!(base, euler_sample(&m, &conds, &s, &GuidanceConfig::none()).unwrap());
        assert_eq!(base.nfe, Nfe { strong: 6, weak: 0 });
        assert_eq!(r0.nfe, Nfe { strong: 6, weak: 0 });
        let cfg = euler_sample(&m, &conds, &s, &GuidanceConfig::cfg(1.0)).unwrap();
        assert_eq!(cfg.nfe, Nfe { strong: 12, weak: 0 });
        let ag = euler_sample(&m, &conds, &s, &GuidanceConfig::autoguidance(1.0, &weak)).unwrap();
        assert_eq!(ag.nfe, Nfe { strong: 6, weak: 6 });
        let r1 = euler_sample(&m, &conds, &s, &GuidanceConfig::repa(1.0)).unwrap();
        assert_ne!(r1.latents, base.latents);
        // guidance restricted to an interval that no midpoint reaches
        let off = GuidanceConfig { interval: (0.999, 1.0), ..GuidanceConfig::repa(2.0) };
        assert_eq!(euler_sample(&m, &conds, &s, &off).unwrap().latents, base.latents);
    }

    #[test]
    fn trained_model_samples_stay_finite_and_weak_model_is_weaker() {
        let cfg = tiny();
        let mut r = rng::stream(0, "lat", 0);
        let lat = Tensor::from_vec(&[32, 4, 8], rng::normal_vec_f32(&mut r, 32 * 32)).unwrap();
        let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let data = TrainingData { latents: &lat, labels: &labels, repa_targets: None };
        let tc = TrainConfig {
            schedule: TrainSchedule { base_lr: 2e-3, final_lr: 2e-4, decay_end_step: 400, ..Default::default() },
            ..Default::default()
        };
        let strong = train_diffusion(DiTModel::init(cfg, 0).unwrap(), &data, tc, 400).unwrap();
        let weak = build_weak_model(&strong.model, &data, tc, 400).unwrap();
        assert_eq!(weak.step(), 100);
        assert!(weak.model.num_params() < strong.model.num_params());
        let tail = |h: &[crate::dit::LossRecord]| h[h.len() - 20..].iter().map(|r| r.fm).sum::<f64>() / 20.0;
        assert!(tail(&weak.history) > tail(&strong.history));
        let ema = strong.ema_model();
        let s = SamplerConfig { steps: 10, ..Default::default() };
        for w in [0.0, 1.0, 2.0, 3.0] {
            let out = euler_sample(&ema, &balanced_conds(8, 2), &s, &GuidanceConfig::repa(w)).unwrap();
            assert!(out.latents.is_finite());
        }
    }

    proptest! {
        #[test]
        fn velocity_round_trip(vals in proptest::collection::vec(-3.0f32..3.0, 2..16), t in 0.01f64..1.0) {
            let n = vals.len() / 2;
            let x_hat = t32(&vals[..n]);
            let x_t = t32(&vals[n..2 * n]);
            let back = x_from_v(&v_from_x(&x_hat, &x_t, t).unwrap(), &x_t, t).unwrap();
            prop_assert!(back.max_abs_diff(&x_hat) <= 1e-6);
        }

        #[test]
        fn three_guidance_rules_agree(vals in proptest::collection::vec(-5.0f64..5.0, 8), w in 0.0f64..3.0) {
            let a = Tensor::from_vec(&[4], vals[..4].to_vec()).unwrap();
            let b = Tensor::from_vec(&[4], vals[4..].to_vec()).unwrap();
            let r = guide_repa(&a, &b, w).unwrap();
            prop_assert_eq!(&r, &guide_cfg(&a, &b, w).unwrap());
            prop_assert_eq!(&r, &guide_autoguidance(&a, &b, w).unwrap());
        }
    }
}
