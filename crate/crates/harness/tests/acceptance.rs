//! Acceptance suite: one PASS/FAIL line per criterion, exit code 1 if any fail.
//!
//! Criteria 1-7 and 12 are exact oracles and run in seconds. Criteria 8-11
//! are desk-scale experiments on the 8-class toy benchmark; their run
//! directories live under the cargo target tmpdir and are resumed on rerun,
//! so only the first invocation pays the full training cost (a bit over an hour
//! on one core).

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{ensure, Result};
use raev2::checkpoint::Checkpoint;
use raev2::data::gen_dataset;
use raev2::dit::{build_loss, draw_minibatch, DiTConfig, DiTModel, TrainConfig, TrainingData};
use raev2::encoders::{
    aggregate_mls, final_layer_latent, mlr_raw, mls_raw, sinusoidal_2d, EncoderConfig, RandomProjector, Recipe,
    ToyEncoder,
};
use raev2::gradcheck::{grad_check, GradCheckConfig};
use raev2::guidance::{euler_sample, guide_repa, v_from_x, x_from_v, GuidanceConfig, SamplerConfig};
use raev2::metrics::{
    ep_fid_at_k, fd_aggregate, frechet_distance, lds, linear_probe, split_indices, EpochsToFid, FidCurve, ProbeConfig,
};
use raev2::{rng, Graph, Tensor};
use raev2_harness::config::RunConfig;
use raev2_harness::experiments::{inversions, median, run_cell, run_guidance_ablation, run_k_sweep_stage1, encoder_lp, setting_config, sub_config, Cell};
use raev2_harness::pipeline::{run_training, Bench, RunOptions, Stage1};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn gaussian(dims: &[usize], seed: u64, purpose: &str) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, rng::normal_vec(&mut rng::stream(seed, purpose, 0), n)).unwrap()
}

fn c1_gradient_oracle() -> Result<Outcome> {
    let cfg = DiTConfig { depth: 2, width: 32, heads: 4, mlp_hidden: 64, tap: 1, classes: 4, tokens: 4, channels: 8 };
    let model = DiTModel::init(cfg, 11)?;
    let lat = gaussian(&[6, cfg.tokens, cfg.channels], 3, "c1-latents").cast::<f32>();
    let labels = vec![0, 1, 2, 3, 0, 1];
    let data = TrainingData { latents: &lat, labels: &labels, repa_targets: None };
    let tc = TrainConfig { batch: 4, cfg_dropout_p: 0.25, lambda_repa: 0.5, ..Default::default() };
    let mb = draw_minibatch(&data, &tc, cfg.classes, 0)?;
    let mut ps = model.params.cast::<f64>();
    let report = grad_check(&mut ps, GradCheckConfig { max_coords: 24, ..Default::default() }, |ps| {
        let mut g = Graph::<f64>::new();
        let (total, _, _) = build_loss(&cfg, &mut g, ps, &mb, 0.5)?;
        g.backward(total)?;
        g.accumulate_param_grads(ps);
        Ok(g.value(total).data()[0])
    })?;
    outcome(
        report.max_rel_error <= 1e-3,
        format!("{} coords, max rel err {:.2e} at {}[{}]", report.checked, report.max_rel_error, report.worst_param, report.worst_index),
    )
}

fn c2_guidance_algebra() -> Result<Outcome> {
    let x_full = gaussian(&[3, 4, 8], 1, "c2-full").cast::<f32>();
    let x_repa = gaussian(&[3, 4, 8], 2, "c2-repa").cast::<f32>();
    let identity = guide_repa(&x_full, &x_repa, 0.0)? == x_full;

    let x = gaussian(&[2, 4, 8], 3, "c2-x").cast::<f32>();
    let x_t = gaussian(&[2, 4, 8], 4, "c2-xt").cast::<f32>();
    let mut worst = 0.0f64;
    for i in 0..=99 {
        let t = 0.01 + 0.99 * i as f64 / 99.0;
        let back = x_from_v(&v_from_x(&x, &x_t, t)?, &x_t, t)?;
        worst = worst.max(back.max_abs_diff(&x) as f64);
    }

    let cfg = DiTConfig { depth: 2, width: 32, heads: 4, mlp_hidden: 64, tap: 1, classes: 3, tokens: 4, channels: 8 };
    let model = DiTModel::init(cfg, 5)?;
    let conds = raev2::guidance::balanced_conds(6, 3);
    let sampler = SamplerConfig { steps: 12, seed: 9, ..Default::default() };
    let plain = euler_sample(&model, &conds, &sampler, &GuidanceConfig::none())?;
    let zero = euler_sample(&model, &conds, &sampler, &GuidanceConfig::repa(0.0))?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let sample_eq = bits(&plain.latents) == bits(&zero.latents);
    outcome(
        identity && worst <= 1e-6 && sample_eq,
        format!("w=0 identity {identity}, round-trip max err {worst:.1e}, w=0 sampling bit-identical {sample_eq}"),
    )
}

fn c3_aggregation() -> Result<Outcome> {
    let ds = gen_dataset(8, 4, 16, 2)?;
    let cfg = EncoderConfig { image_size: 16, layers: 6, ..Default::default() };
    let enc = ToyEncoder::build(Recipe::PosEnc, cfg, None, 1)?;
    let stack = enc.encode_layers(&ds.images)?;
    let mls1 = aggregate_mls(&stack, 1)?.tokens == final_layer_latent(&stack).tokens;
    let d = cfg.width;
    let mut eye = vec![0.0f32; d * d];
    (0..d).for_each(|i| eye[i * d + i] = 1.0);
    let ident = RandomProjector::with_matrix(1, Tensor::from_vec(&[d, d], eye)?)?;
    let mlr1 = mlr_raw(&stack, &ident)?.tokens == mls_raw(&stack, 1)?.tokens
        && mls_raw(&stack, 1)?.tokens == stack.layers[stack.depth() - 1];

    let (dim, pairs) = (64, 1000);
    let proj = RandomProjector::new(1, dim, 17)?;
    let pts = gaussian(&[2 * pairs, dim], 8, "c3-points").cast::<f32>();
    let y = proj.project_rows(&pts)?;
    let sq = |t: &Tensor<f32>, i: usize| -> f64 {
        let (a, b) = (&t.data()[2 * i * dim..(2 * i + 1) * dim], &t.data()[(2 * i + 1) * dim..(2 * i + 2) * dim]);
        a.iter().zip(b).map(|(p, q)| ((p - q) as f64).powi(2)).sum()
    };
    let distortion = (0..pairs).map(|i| (sq(&y, i) / sq(&pts, i) - 1.0).abs()).sum::<f64>() / pairs as f64;
    outcome(
        mls1 && mlr1 && distortion <= 0.15,
        format!("MLS K=1 bit-exact {mls1}, MLR K=1 R=I exact {mlr1}, mean rel distortion {distortion:.4} over {pairs} pairs at d={dim}"),
    )
}

fn c4_frechet() -> Result<Outcome> {
    let a = gaussian(&[500, 8], 1, "c4-a");
    let self_fd = frechet_distance(&a, &a)?;
    let n = 100_000;
    let x = gaussian(&[n, 1], 2, "c4-x");
    let y = gaussian(&[n, 1], 3, "c4-y").map(|v| v + 1.0);
    let fd = frechet_distance(&x, &y)?;
    outcome(
        self_fd <= 1e-6 && (fd - 1.0).abs() <= 0.05,
        format!("FD(A,A) = {self_fd:.2e}, FD(N(0,1), N(1,1)) = {fd:.4} at n={n}"),
    )
}

fn c5_paper_aggregate() -> Result<Outcome> {
    let rae = fd_aggregate(&[0.69, 1.79, 2.11, 3.30, 3.79, 7.87])?;
    let v2 = fd_aggregate(&[0.64, 0.77, 1.15, 2.67, 2.54, 5.21])?;
    outcome((rae - 3.26).abs() <= 0.01 && (v2 - 2.17).abs() <= 0.02, format!("RAE-XL row {rae:.4}, RAEv2 row {v2:.4}"))
}

fn c6_ep_fid() -> Result<Outcome> {
    let curve = FidCurve::new(vec![(1.0, 9.0), (2.0, 5.0), (4.0, 2.5), (8.0, 1.8), (16.0, 2.2)])?;
    let cases = [
        (10.0, EpochsToFid::Reached(1.0)),
        (5.0, EpochsToFid::Reached(2.0)),
        (2.5, EpochsToFid::Reached(4.0)),
        (2.0, EpochsToFid::Reached(8.0)),
        (1.8, EpochsToFid::Reached(8.0)),
        (1.0, EpochsToFid::NotReached),
    ];
    let mut ok = cases.iter().all(|&(k, want)| ep_fid_at_k(&curve, k).map(|g| g == want).unwrap_or(false));
    let ks: Vec<f64> = (0..200).map(|i| 0.5 + i as f64 * 0.05).collect();
    let eps: Vec<EpochsToFid> = ks.iter().map(|&k| ep_fid_at_k(&curve, k)).collect::<raev2::Result<_>>()?;
    let monotone = eps.windows(2).all(|w| w[1] <= w[0]);
    ok &= monotone && ep_fid_at_k(&FidCurve::default(), 2.0).is_err();
    ok &= EpochsToFid::NotReached.to_string() == "NOT_REACHED";
    outcome(ok, format!("{} vectors, monotone in k {monotone}", cases.len() + 2))
}

fn c7_lp_lds() -> Result<Outcome> {
    let (n, d, classes) = (400, 16, 4);
    let noise = gaussian(&[n, d], 1, "c7-noise");
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let feats = Tensor::from_vec(
        &[n, d],
        noise.data().iter().enumerate().map(|(j, &v)| v + if (j % d) == labels[j / d] { 8.0 } else { 0.0 }).collect(),
    )?;
    let (train, val) = split_indices(n, 0.5, 3);
    let lp_sep = linear_probe(&feats, &labels, &train, &val, ProbeConfig::default())?;
    let two: Vec<usize> = (0..n).map(|i| usize::from(rng::normal_vec(&mut rng::stream(4, "c7-shuffle", i as u64), 1)[0] > 0.0)).collect();
    let lp_shuf = linear_probe(&gaussian(&[n, d], 5, "c7-plain"), &two, &train, &val, ProbeConfig::default())?;

    let grid = 8;
    let pos = sinusoidal_2d(grid, grid, 32).reshape(&[1, grid * grid, 32])?;
    let lds_pos = lds(&pos, grid, grid)?;
    let lds_rand = lds(&gaussian(&[16, grid * grid, 32], 6, "c7-rand"), grid, grid)?;
    let lds_const = lds(&Tensor::<f64>::full(&[2, grid * grid, 32], 0.3), grid, grid)?;
    outcome(
        lp_sep >= 0.99 && (lp_shuf - 0.5).abs() <= 0.05 && lds_pos >= 0.9 && lds_rand.abs() <= 0.1 && lds_const == 0.0,
        format!("LP blobs {lp_sep:.3}, LP shuffled {lp_shuf:.3}, LDS pos {lds_pos:.3}, random {lds_rand:.3}, constant {lds_const}"),
    )
}

fn tiny_config(dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::default();
    let text = "data.train_size = 64\ndata.eval_size = 32\neval.n = 32\ndata.classes = 4\ndata.image_size = 8\n\
                encoder.width = 16\nencoder.layers = 2\nencoder.train_steps = 5\ndecoder.width = 16\n\
                decoder.hidden = 16\ndecoder.steps = 5\nmodel.width = 16\nmodel.heads = 2\nmodel.mlp_hidden = 16\n\
                model.depth = 2\ntrain.steps = 16\ntrain.batch = 4\nsample.steps = 3\neval.every_epochs = 1\n";
    c.apply_text(text).unwrap();
    c.output_dir = dir.to_path_buf();
    c.experiment = "c12".into();
    c
}

fn c12_persistence() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let ck = {
        let mut ck = Checkpoint::new("meta ✓\nline 2");
        ck.push("a", gaussian(&[3, 5], 1, "c12-a"));
        ck.push("b", gaussian(&[7], 2, "c12-b").cast::<f32>());
        ck
    };
    let p = tmp.path().join("x.ckpt");
    ck.save(&p)?;
    let back = Checkpoint::load(&p)?;
    back.save(&tmp.path().join("y.ckpt"))?;
    let ckpt_exact = back == ck && std::fs::read(&p)? == std::fs::read(tmp.path().join("y.ckpt"))?;

    let run = |sub: &str, stop: Option<u64>| -> Result<PathBuf> {
        let cfg = tiny_config(&tmp.path().join(sub));
        let bench = Bench::build(&cfg)?;
        let s1 = Stage1::build(&cfg, &bench)?;
        if let Some(s) = stop {
            run_training(&cfg, &bench, &s1, RunOptions { stop_after: Some(s), resume: true })?;
        }
        let out = run_training(&cfg, &bench, &s1, RunOptions { stop_after: None, resume: true })?;
        ensure!(out.finished, "run did not finish");
        Ok(out.paths.dir)
    };
    let (a, b, r) = (run("a", None)?, run("b", None)?, run("r", Some(7))?);
    let same = |x: &PathBuf, y: &PathBuf, f: &str| -> Result<bool> { Ok(std::fs::read(x.join(f))? == std::fs::read(y.join(f))?) };
    let csv_identical = same(&a, &b, "loss.csv")? && same(&a, &b, "fid_curve.csv")?;
    let resume_exact = same(&a, &r, "loss.csv")? && same(&a, &r, "fid_curve.csv")? && same(&a, &r, "state.ckpt")?;
    outcome(
        ckpt_exact && csv_identical && resume_exact,
        format!("checkpoint round trip {ckpt_exact}, repeated-run CSVs identical {csv_identical}, resume bit-exact {resume_exact}"),
    )
}

/// Desk benchmark shared by criteria 8-11.
fn desk_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.output_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    c.experiment = "desk".into();
    c.eval_every_epochs = 0.0;
    c.guidance_w = vec![0.25, 0.5, 1.0, 1.5, 2.0, 3.0];
    c
}

const SEEDS: [u64; 3] = [0, 1, 2];
const CRIT8_RECIPES: [Recipe; 2] = [Recipe::Supervised, Recipe::SupervisedPos];

fn c8_complementarity(bench: &Bench, keep: &mut Option<Cell>) -> Result<Outcome> {
    let start = Instant::now();
    let base = desk_config();
    let mut pass = true;
    let mut parts = Vec::new();
    for recipe in CRIT8_RECIPES {
        let mut med = Vec::new();
        for setting in ["rae-only", "rae+repa"] {
            let mut fds = Vec::new();
            for &seed in &SEEDS {
                let cfg = setting_config(&RunConfig { seed, ..base.clone() }, recipe, setting)?;
                let cell = run_cell(&cfg, bench)?;
                fds.push(cell.fd());
                if recipe == Recipe::Supervised && setting == "rae+repa" && seed == 0 {
                    *keep = Some(cell);
                }
            }
            med.push(median(&fds));
            parts.push(format!("{recipe} {setting} {:?}", fds.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()));
        }
        pass &= med[1] < med[0];
        parts.push(format!("{recipe} median rae-only {:.3} vs rae+repa {:.3}", med[0], med[1]));
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    parts.push(format!("{minutes:.1} min"));
    outcome(pass && minutes <= 45.0, parts.join("; "))
}

fn c9_guidance(bench: &Bench, cell: &Cell) -> Result<Outcome> {
    let start = Instant::now();
    let mut cfg = cell.config.clone();
    cfg.guidance_modes = vec![raev2::guidance::GuidanceMode::None, raev2::guidance::GuidanceMode::Repa, raev2::guidance::GuidanceMode::Cfg];
    let csv = run_guidance_ablation(&cfg, bench, &cell.stage1, &cell.outcome.trainer.ema_model(), None)?;
    let (modes, ws, fds, nfes) = (csv.column_str("mode")?, csv.column_f64("w")?, csv.column_f64("fd_toy")?, csv.column_f64("nfe_strong")?);
    let pick = |m: &str| -> Vec<usize> { (0..modes.len()).filter(|&i| modes[i] == m).collect() };
    let unguided = fds[pick("none")[0]];
    let (best_i, best) = pick("repa").into_iter().map(|i| (i, fds[i])).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let steps = cfg.sample_steps as f64;
    let nfe_ok = pick("repa").iter().all(|&i| nfes[i] == steps) && pick("cfg").iter().all(|&i| nfes[i] == 2.0 * steps);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    outcome(
        best <= 1.05 * unguided && nfe_ok && minutes <= 10.0,
        format!(
            "unguided {unguided:.3}, best REPA {best:.3} at w={}, ratio {:.3}; NFE/step repa 1, cfg 2: {nfe_ok}; {minutes:.1} min",
            ws[best_i],
            best / unguided
        ),
    )
}

fn c10_k_sweep(bench: &Bench) -> Result<Outcome> {
    let base = desk_config();
    let ks = [1usize, 2, 4, 8];
    let mut inv = 0;
    let mut rows = Vec::new();
    for &seed in &SEEDS {
        let cfg = RunConfig { seed, ..sub_config(&base, "ksweep") };
        let mse = run_k_sweep_stage1(&cfg, bench, &ks)?.column_f64("mse")?;
        inv += inversions(&mse);
        rows.push(format!("s{seed} {:?}", mse.iter().map(|v| (v * 1e5).round() / 1e5).collect::<Vec<_>>()));
    }
    let mut gfd_ok = true;
    for k in [2usize, 8] {
        let mut med = Vec::new();
        for scheme in ["mls", "mlr"] {
            let mut fds = Vec::new();
            for &seed in &SEEDS {
                let mut cfg = sub_config(&base, &format!("gfd-{scheme}-k{k}-s{seed}"));
                cfg.set("agg.scheme", scheme)?;
                cfg.k = k;
                cfg.seed = seed;
                fds.push(run_cell(&cfg, bench)?.fd());
            }
            med.push(median(&fds));
        }
        gfd_ok &= med[0] <= med[1];
        rows.push(format!("K={k} median gFD mls {:.3} vs mlr {:.3}", med[0], med[1]));
    }
    outcome(inv <= 1 && gfd_ok, format!("MSE over K=1,2,4,8: {}; inversions {inv}", rows.join("; ")))
}

fn c11_lp_preservation(bench: &Bench) -> Result<Outcome> {
    let base = desk_config();
    let mut pass = true;
    let mut parts = Vec::new();
    for recipe in CRIT8_RECIPES {
        let (mut k1, mut k8) = (Vec::new(), Vec::new());
        for &seed in &SEEDS {
            let cfg = RunConfig { seed, recipe, ..base.clone() };
            let enc = ToyEncoder::build(recipe, cfg.encoder_config(), Some(&bench.train), seed)?;
            k1.push(encoder_lp(&cfg, bench, &enc, &raev2::encoders::Aggregation::Mls { k: 1 })?);
            k8.push(encoder_lp(&cfg, bench, &enc, &raev2::encoders::Aggregation::Mls { k: 8 })?);
        }
        let (a, b) = (median(&k1), median(&k8));
        pass &= (a - b).abs() <= 0.02;
        parts.push(format!("{recipe} LP K=1 {:.2}% vs K=8 {:.2}%", 100.0 * a, 100.0 * b));
    }
    outcome(pass, parts.join("; "))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, r: Result<Outcome>| {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failures += usize::from(!pass);
        println!("criterion {id:>2} {}: {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    report(1, "gradient oracle", c1_gradient_oracle());
    report(2, "guidance algebra", c2_guidance_algebra());
    report(3, "aggregation identities", c3_aggregation());
    report(4, "Frechet oracle", c4_frechet());
    report(5, "paper-anchored FD_r aggregate", c5_paper_aggregate());
    report(6, "EP_FID@k oracle", c6_ep_fid());
    report(7, "LP/LDS calibration", c7_lp_lds());

    let bench = Bench::build(&desk_config());
    match bench {
        Ok(bench) => {
            let mut cell = None;
            report(8, "desk complementarity", c8_complementarity(&bench, &mut cell));
            match cell {
                Some(c) => report(9, "desk guidance direction", c9_guidance(&bench, &c)),
                None => report(9, "desk guidance direction", Err(anyhow::anyhow!("no trained run from criterion 8"))),
            }
            report(10, "desk K-sweep direction", c10_k_sweep(&bench));
            report(11, "LP preservation", c11_lp_preservation(&bench));
        }
        Err(e) => {
            for (id, name) in [(8, "desk complementarity"), (9, "desk guidance direction"), (10, "desk K-sweep direction"), (11, "LP preservation")] {
                report(id, name, Err(anyhow::anyhow!("desk benchmark: {e:#}")));
            }
        }
    }
    report(12, "persistence and determinism", c12_persistence());
    println!("{} of 12 criteria passed", 12 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
