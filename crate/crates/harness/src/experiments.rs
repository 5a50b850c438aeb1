//! Ablation drivers: K-sweep, guidance ablation and the encoder-correlation
//! study. Each writes one CSV into `output_dir/experiment/`.

use anyhow::{bail, Result};
use raev2::dit::DiTModel;
use raev2::encoders::{Aggregation, Recipe, ToyEncoder};
use raev2::guidance::{build_weak_model, GuidanceConfig, GuidanceMode};
use raev2::metrics::{linear_probe, lds, pearson_r, split_indices, MetricReport};

use crate::config::RunConfig;
use crate::io::{num, Csv};
use crate::pipeline::{eval_fd, run_dir, run_training, Bench, RunOptions, RunOutcome, Stage1};

/// Result of one stage-1 + stage-2 cell.
pub struct Cell {
    pub config: RunConfig,
    pub recon: MetricReport,
    pub outcome: RunOutcome,
    pub stage1: Stage1,
}

impl Cell {
    pub fn fd(&self) -> f64 {
        self.outcome.final_fd().unwrap_or(f64::NAN)
    }
}

/// Config of a sub-run named `name` inside `base`'s experiment directory.
pub fn sub_config(base: &RunConfig, name: &str) -> RunConfig {
    RunConfig { experiment: format!("{}/{name}", base.experiment), ..base.clone() }
}

fn metrics_csv(cfg: &RunConfig, report: &MetricReport) -> Csv {
    let mut c = Csv::new(&cfg.provenance(), &["run", "metric", "value", "n", "seed", "space"]);
    for row in report.csv_rows(&cfg.experiment) {
        c.push(row.split(',').map(str::to_string).collect());
    }
    c
}

/// Builds stage 1, trains the diffusion model and records reconstruction
/// and final unguided FD in `metrics.csv`.
pub fn run_cell(cfg: &RunConfig, bench: &Bench) -> Result<Cell> {
    let stage1 = Stage1::load_or_build(cfg, bench)?;
    let mut recon = stage1.reconstruction(cfg, bench)?;
    let outcome = run_training(cfg, bench, &stage1, RunOptions { stop_after: None, resume: true })?;
    if let Some(fd) = outcome.final_fd() {
        recon.push("fd_toy", fd, cfg.eval_n, cfg.seed, &bench.reference.name)?;
    }
    metrics_csv(cfg, &recon).write(&outcome.paths.metrics())?;
    Ok(Cell { config: cfg.clone(), recon, outcome, stage1 })
}

fn best_repa_fd(cell: &Cell, bench: &Bench) -> Result<f64> {
    let model = cell.outcome.trainer.ema_model();
    let mut best = cell.fd();
    for &w in cell.config.guidance_w.iter().filter(|&&w| w > 0.0) {
        let g = GuidanceConfig { interval: cell.config.guidance_interval, ..GuidanceConfig::repa(w) };
        best = best.min(eval_fd(&model, &g, &cell.config, bench, &cell.stage1)?.0);
    }
    Ok(best)
}

/// One run per K with `base`'s aggregation scheme. Columns:
/// `scheme,k,seed,mse,psnr,rfd,fd_unguided,fd_best_guided` where the guided
/// FD is the best REPA-guided value over `guidance.w`.
pub fn run_k_sweep(base: &RunConfig, bench: &Bench, ks: &[usize]) -> Result<Csv> {
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > base.enc_layers) {
        bail!("K = {k} outside [1, {}]", base.enc_layers);
    }
    let scheme = base.aggregation().scheme();
    let mut csv = Csv::new(
        &base.provenance(),
        &["scheme", "k", "seed", "mse", "psnr", "rfd", "fd_unguided", "fd_best_guided"],
    );
    for &k in ks {
        let cfg = RunConfig { k, ..sub_config(base, &format!("{scheme}-k{k}-s{}", base.seed)) };
        let cell = run_cell(&cfg, bench)?;
        let get = |m: &str| cell.recon.get(m).unwrap_or(f64::NAN);
        csv.push(vec![
            scheme.into(),
            k.to_string(),
            base.seed.to_string(),
            num(get("mse")),
            num(get("psnr")),
            num(get("rfd")),
            num(cell.fd()),
            num(best_repa_fd(&cell, bench)?),
        ]);
    }
    csv.write(&run_dir(base).join(format!("ksweep-{scheme}-s{}.csv", base.seed)))?;
    Ok(csv)
}

/// Stage-1 only K-sweep: reconstruction MSE per K. Columns `scheme,k,seed,mse`.
pub fn run_k_sweep_stage1(base: &RunConfig, bench: &Bench, ks: &[usize]) -> Result<Csv> {
    let scheme = base.aggregation().scheme();
    let mut csv = Csv::new(&base.provenance(), &["scheme", "k", "seed", "mse", "psnr", "rfd"]);
    for &k in ks {
        let cfg = RunConfig { k, ..base.clone() };
        cfg.validate()?;
        let s1 = Stage1::build(&cfg, bench)?;
        let rep = s1.reconstruction(&cfg, bench)?;
        let get = |m: &str| rep.get(m).unwrap_or(f64::NAN);
        csv.push(vec![scheme.into(), k.to_string(), base.seed.to_string(), num(get("mse")), num(get("psnr")), num(get("rfd"))]);
    }
    csv.write(&run_dir(base).join(format!("ksweep-stage1-{scheme}-s{}.csv", base.seed)))?;
    Ok(csv)
}

/// Evaluates every (mode, w) cell of a trained run with the fixed sampler
/// seed. `none` appears once. Columns `mode,w,fd_toy,nfe_strong,nfe_weak`.
pub fn run_guidance_ablation(
    cfg: &RunConfig,
    bench: &Bench,
    stage1: &Stage1,
    model: &DiTModel,
    weak: Option<&DiTModel>,
) -> Result<Csv> {
    let mut csv = Csv::new(&cfg.provenance(), &["mode", "w", "fd_toy", "nfe_strong", "nfe_weak"]);
    for &mode in &cfg.guidance_modes {
        let ws: Vec<f64> = if mode == GuidanceMode::None { vec![0.0] } else { cfg.guidance_w.clone() };
        for w in ws {
            let g = match mode {
                GuidanceMode::None => GuidanceConfig::none(),
                GuidanceMode::Repa => GuidanceConfig::repa(w),
                GuidanceMode::Cfg => GuidanceConfig::cfg(w),
                GuidanceMode::AutoGuidance => match weak {
                    Some(m) => GuidanceConfig::autoguidance(w, m),
                    None => bail!("autoguidance needs a weak model"),
                },
            };
            let g = if mode == GuidanceMode::None { g } else { GuidanceConfig { interval: cfg.guidance_interval, ..g } };
            let (fd, nfe) = eval_fd(model, &g, cfg, bench, stage1)?;
            log::info!("guidance {mode} w={w}: fd {fd:.4} nfe {}+{}", nfe.strong, nfe.weak);
            csv.push(vec![mode.to_string(), num(w), num(fd), nfe.strong.to_string(), nfe.weak.to_string()]);
        }
    }
    csv.write(&run_dir(cfg).join("guidance.csv"))?;
    Ok(csv)
}

/// Trains the AutoGuidance weak model for a trained run.
pub fn weak_model_for(cfg: &RunConfig, bench: &Bench, stage1: &Stage1, strong: &DiTModel) -> Result<DiTModel> {
    let tr = build_weak_model(strong, &stage1.training_data(bench), cfg.train_config(), cfg.steps)?;
    Ok(tr.ema_model())
}

/// Linear-probe accuracy of mean-pooled latents of the held-out images.
pub fn encoder_lp(cfg: &RunConfig, bench: &Bench, enc: &ToyEncoder, agg: &Aggregation) -> Result<f64> {
    let eval = bench.eval.head(cfg.eval_n)?;
    let pooled = agg.encode(enc, &eval.images)?.pooled();
    let (train, val) = split_indices(eval.len(), 0.5, cfg.seed);
    Ok(linear_probe(&pooled, &eval.labels, &train, &val, cfg.probe_config())?)
}

/// LDS of latents of the held-out images.
pub fn encoder_lds(cfg: &RunConfig, bench: &Bench, enc: &ToyEncoder, agg: &Aggregation) -> Result<f64> {
    let eval = bench.eval.head(cfg.eval_n)?;
    let grid = cfg.image_size / cfg.patch;
    Ok(lds(&agg.encode(enc, &eval.images)?.tokens, grid, grid)?)
}

/// The three generation settings of the correlation study.
pub const SETTINGS: [&str; 3] = ["rae-only", "repa-only", "rae+repa"];

/// Config of `setting` for `recipe`. `repa-only` diffuses in the random
/// projection encoder's space and aligns to `recipe`.
pub fn setting_config(base: &RunConfig, recipe: Recipe, setting: &str) -> Result<RunConfig> {
    let mut c = sub_config(base, &format!("{recipe}-{setting}-s{}", base.seed));
    match setting {
        "rae-only" => {
            c.recipe = recipe;
            c.lambda_repa = 0.0;
            c.repa_target = None;
        }
        "repa-only" => {
            c.recipe = Recipe::RandProj;
            c.repa_target = Some(recipe);
        }
        "rae+repa" => {
            c.recipe = recipe;
            c.repa_target = None;
        }
        other => bail!("unknown setting `{other}`"),
    }
    if c.lambda_repa == 0.0 && setting != "rae-only" {
        bail!("{setting} needs train.lambda_repa > 0");
    }
    Ok(c)
}

fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    xs.iter().map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect()
}

/// Per-setting Pearson r of FD against LP, LDS and the mean of their
/// min-max normalized values. Returns rows `(setting, [r_lp, r_lds, r_avg])`.
pub fn pearson_table(lp: &[f64], lds: &[f64], fds: &[(String, Vec<f64>)]) -> Result<Vec<(String, [f64; 3])>> {
    if lp.len() < 3 {
        bail!("correlation needs at least 3 encoders, got {}", lp.len());
    }
    let avg: Vec<f64> = min_max(lp).iter().zip(min_max(lds)).map(|(a, b)| 0.5 * (a + b)).collect();
    let r = |x: &[f64], y: &[f64]| pearson_r(x, y).unwrap_or_else(|e| {
        log::warn!("{e}");
        f64::NAN
    });
    Ok(fds.iter().map(|(s, fd)| (s.clone(), [r(fd, lp), r(fd, lds), r(fd, &avg)])).collect())
}

/// Correlation outputs: per-encoder table and the Pearson table.
pub struct Correlation {
    pub encoders: Csv,
    pub pearson: Csv,
}

/// Per recipe: LP and LDS of its latent, and final unguided FD of each
/// setting (median over `seeds`). Writes `correlation.csv` and `pearson.csv`.
pub fn run_encoder_correlation(base: &RunConfig, bench: &Bench, recipes: &[Recipe], seeds: &[u64]) -> Result<Correlation> {
    if recipes.len() < 3 {
        bail!("correlation needs at least 3 recipes, got {}", recipes.len());
    }
    let mut header = vec!["encoder", "lp", "lds"];
    header.extend(SETTINGS.iter().map(|s| match *s {
        "rae-only" => "fd_rae_only",
        "repa-only" => "fd_repa_only",
        _ => "fd_rae_repa",
    }));
    let mut enc_csv = Csv::new(&base.provenance(), &header);
    let (mut lps, mut ldss) = (Vec::new(), Vec::new());
    let mut fds: Vec<(String, Vec<f64>)> = SETTINGS.iter().map(|s| (s.to_string(), Vec::new())).collect();
    for &recipe in recipes {
        let cfg = RunConfig { recipe, ..base.clone() };
        let enc = ToyEncoder::build(recipe, cfg.encoder_config(), Some(&bench.train), cfg.seed)?;
        let lp = encoder_lp(&cfg, bench, &enc, &cfg.aggregation())?;
        let ld = encoder_lds(&cfg, bench, &enc, &cfg.aggregation())?;
        let mut row = vec![recipe.to_string(), num(lp), num(ld)];
        for (i, setting) in SETTINGS.iter().enumerate() {
            let mut vals = Vec::new();
            for &seed in seeds {
                let c = setting_config(&RunConfig { seed, ..base.clone() }, recipe, setting)?;
                vals.push(run_cell(&c, bench)?.fd());
            }
            let m = median(&vals);
            fds[i].1.push(m);
            row.push(num(m));
        }
        lps.push(lp);
        ldss.push(ld);
        enc_csv.push(row);
    }
    let mut pearson = Csv::new(&base.provenance(), &["setting", "LP", "LDS", "Avg"]);
    for (s, r) in pearson_table(&lps, &ldss, &fds)? {
        pearson.push(vec![s, num(r[0]), num(r[1]), num(r[2])]);
    }
    enc_csv.write(&run_dir(base).join("correlation.csv"))?;
    pearson.write(&run_dir(base).join("pearson.csv"))?;
    Ok(Correlation { encoders: enc_csv, pearson })
}

/// Median (mean of the middle pair for even lengths); NaN when empty.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Adjacent increases in a sequence that should be non-increasing.
pub fn inversions(xs: &[f64]) -> usize {
    xs.windows(2).filter(|w| w[1] > w[0]).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_table_linear_fd() {
        let lp = [0.2, 0.5, 0.9, 0.7];
        let lds = [0.1, 0.3, 0.2, 0.8];
        let fd_lp: Vec<f64> = lp.iter().map(|x| 10.0 - 4.0 * x).collect();
        let fd_pos: Vec<f64> = lp.iter().map(|x| 1.0 + 2.0 * x).collect();
        let t = pearson_table(&lp, &lds, &[("a".into(), fd_lp), ("b".into(), fd_pos)]).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].1.len(), 3);
        assert!((t[0].1[0] + 1.0).abs() < 1e-12);
        assert!((t[1].1[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_table_needs_three_encoders() {
        assert!(pearson_table(&[0.1, 0.2], &[0.1, 0.2], &[]).is_err());
    }

    #[test]
    fn median_and_inversions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert_eq!(inversions(&[4.0, 3.0, 3.0, 1.0]), 0);
        assert_eq!(inversions(&[4.0, 5.0, 3.0, 3.5]), 2);
    }

    #[test]
    fn min_max_handles_constant() {
        assert_eq!(min_max(&[2.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(min_max(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn settings_map_to_configs() {
        let base = RunConfig::default();
        let a = setting_config(&base, Recipe::Supervised, "rae-only").unwrap();
        assert_eq!((a.recipe, a.lambda_repa, a.repa_target), (Recipe::Supervised, 0.0, None));
        let b = setting_config(&base, Recipe::Supervised, "repa-only").unwrap();
        assert_eq!((b.recipe, b.repa_target), (Recipe::RandProj, Some(Recipe::Supervised)));
        let c = setting_config(&base, Recipe::PosEnc, "rae+repa").unwrap();
        assert_eq!((c.recipe, c.lambda_repa), (Recipe::PosEnc, 0.5));
        assert!(setting_config(&base, Recipe::PosEnc, "vae").is_err());
    }
}
