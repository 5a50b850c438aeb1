use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use raev2::checkpoint::Checkpoint;
use raev2::encoders::Recipe;
use raev2::guidance::{balanced_conds, euler_sample, GuidanceConfig, GuidanceMode};
use raev2::metrics::{fd_r, FeatureSpace, MetricReport};
use raev2_harness::experiments::{
    run_cell, run_encoder_correlation, run_guidance_ablation, run_k_sweep, weak_model_for,
};
use raev2_harness::io::{dataset_checkpoint, save_checkpoint, write_png_grid, Csv};
use raev2_harness::pipeline::{load_ema_model, run_dir, run_training, Bench, RunOptions, Stage1};
use raev2_harness::{plot, RunConfig};

/// Desk-scale RAE / REPA experiment harness.
#[derive(Parser)]
#[command(name = "raev2", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    experiment: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(e) = &self.experiment {
            cfg.experiment = e.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/eval datasets and a preview grid.
    GenData(ConfigArgs),
    /// Build the frozen encoder and train the latent decoder.
    TrainDecoder(ConfigArgs),
    /// Train the diffusion model (resumes from the run's state checkpoint).
    TrainDiffusion {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Ignore an existing state checkpoint.
        #[arg(long)]
        fresh: bool,
    },
    /// Sample from a trained run and write a PNG grid.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "none")]
        mode: GuidanceMode,
        #[arg(long, default_value_t = 0.0)]
        w: f64,
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Reconstruction metrics, unguided FD_toy and FD_r over reference spaces.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seeds of the reference feature spaces for FD_r (at least 2).
        #[arg(long, value_delimiter = ',', default_value = "1000,1001")]
        ref_seeds: Vec<u64>,
    },
    /// One run per K; writes ksweep-<scheme>-s<seed>.csv.
    SweepK {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ks: Vec<usize>,
    },
    /// Guidance mode × w table for a trained run; writes guidance.csv.
    AblateGuidance(ConfigArgs),
    /// Encoder LP/LDS vs generation FD; writes correlation.csv and pearson.csv.
    Correlate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "rand-proj,pos-enc,supervised,supervised-pos")]
        recipes: Vec<Recipe>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// SVG figures from run directories.
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print_report(report: &MetricReport, run: &str) {
    for row in report.csv_rows(run) {
        println!("{row}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = a.resolve()?;
            let bench = Bench::build(&cfg)?;
            let dir = cfg.output_dir.join("data");
            let meta = format!("{}\n{}", cfg.provenance(), cfg.portable_text());
            save_checkpoint(&dataset_checkpoint(&bench.train, &meta), &dir.join("train.ckpt"))?;
            save_checkpoint(&dataset_checkpoint(&bench.eval, &meta), &dir.join("eval.ckpt"))?;
            write_png_grid(&bench.train.head(64)?.images, 8, &dir.join("train_preview.png"))?;
            println!("wrote {} train / {} eval images to {}", bench.train.len(), bench.eval.len(), dir.display());
        }
        Command::TrainDecoder(a) => {
            let cfg = a.resolve()?;
            let bench = Bench::build(&cfg)?;
            let s1 = Stage1::load_or_build(&cfg, &bench)?;
            let report = s1.reconstruction(&cfg, &bench)?;
            let eval = bench.eval.head(16)?;
            let recon = s1.decoder.decode(&cfg.aggregation().encode(&s1.encoder, &eval.images)?)?;
            let both = raev2::Tensor::cat_outer(&[&eval.images, &recon])?;
            write_png_grid(&both, 16, &run_dir(&cfg).join("reconstruction.png"))?;
            print_report(&report, &cfg.experiment);
        }
        Command::TrainDiffusion { cfg, stop_after, fresh } => {
            let cfg = cfg.resolve()?;
            let bench = Bench::build(&cfg)?;
            if stop_after.is_some() || fresh {
                let s1 = Stage1::load_or_build(&cfg, &bench)?;
                let out = run_training(&cfg, &bench, &s1, RunOptions { stop_after, resume: !fresh })?;
                println!("{}: step {} of {}", out.paths.dir.display(), out.trainer.step(), cfg.steps);
            } else {
                let cell = run_cell(&cfg, &bench)?;
                print_report(&cell.recon, &cfg.experiment);
            }
        }
        Command::Sample { cfg, mode, w, n } => {
            let cfg = cfg.resolve()?;
            let bench = Bench::build(&cfg)?;
            let s1 = Stage1::load_or_build(&cfg, &bench)?;
            let model = load_ema_model(&cfg)?;
            let weak = if mode == GuidanceMode::AutoGuidance { Some(weak_model_for(&cfg, &bench, &s1, &model)?) } else { None };
            let g = match mode {
                GuidanceMode::None => GuidanceConfig::none(),
                GuidanceMode::Repa => GuidanceConfig::repa(w),
                GuidanceMode::Cfg => GuidanceConfig::cfg(w),
                GuidanceMode::AutoGuidance => GuidanceConfig::autoguidance(w, weak.as_ref().expect("built above")),
            };
            let out = euler_sample(&model, &balanced_conds(n, cfg.classes), &cfg.sampler_config(), &g)?;
            let images = s1.decode(out.latents.clone())?;
            let dir = run_dir(&cfg);
            let mut ck = Checkpoint::new(cfg.provenance());
            ck.push("latents", out.latents);
            ck.push("images", images.clone());
            save_checkpoint(&ck, &dir.join(format!("samples-{mode}-w{w}.ckpt")))?;
            write_png_grid(&images, cfg.classes, &dir.join(format!("samples-{mode}-w{w}.png")))?;
            println!("{n} samples, nfe strong {} weak {}", out.nfe.strong, out.nfe.weak);
        }
        Command::Eval { cfg, ref_seeds } => {
            let cfg = cfg.resolve()?;
            let bench = Bench::build(&cfg)?;
            let s1 = Stage1::load_or_build(&cfg, &bench)?;
            let mut report = s1.reconstruction(&cfg, &bench)?;
            let model = load_ema_model(&cfg)?;
            let out = euler_sample(&model, &balanced_conds(cfg.eval_n, cfg.classes), &cfg.sampler_config(), &GuidanceConfig::none())?;
            let images = s1.decode(out.latents)?;
            report.push("fd_toy", bench.fd_to_real(&images)?, cfg.eval_n, cfg.seed, &bench.reference.name)?;
            let spaces: Vec<FeatureSpace> = ref_seeds
                .iter()
                .map(|&s| FeatureSpace::reference(&bench.train, cfg.encoder_config(), s))
                .collect::<raev2::Result<_>>()?;
            let real = bench.eval.head(cfg.eval_n)?.images;
            let fdr = fd_r(&real, &images, &spaces)?;
            for (name, v) in &fdr.per_space {
                report.push("fd_r", *v, cfg.eval_n, cfg.seed, name)?;
            }
            report.push(&format!("fd_r^{}", spaces.len()), fdr.aggregate, cfg.eval_n, cfg.seed, "aggregate")?;
            let mut csv = Csv::new(&cfg.provenance(), &["run", "metric", "value", "n", "seed", "space"]);
            for row in report.csv_rows(&cfg.experiment) {
                csv.push(row.split(',').map(str::to_string).collect());
            }
            csv.write(&run_dir(&cfg).join("eval.csv"))?;
            print_report(&report, &cfg.experiment);
        }
        Command::SweepK { cfg, ks } => {
            let cfg = cfg.resolve()?;
            let bench = Bench::build(&cfg)?;
            print!("{}", run_k_sweep(&cfg, &bench, &ks)?.render());
        }
        Command::AblateGuidance(a) => {
            let cfg = a.resolve()?;
            let bench = Bench::build(&cfg)?;
            let cell = run_cell(&cfg, &bench)?;
            let model = cell.outcome.trainer.ema_model();
            let weak = if cfg.guidance_modes.contains(&GuidanceMode::AutoGuidance) {
                Some(weak_model_for(&cfg, &bench, &cell.stage1, &model)?)
            } else {
                None
            };
            print!("{}", run_guidance_ablation(&cfg, &bench, &cell.stage1, &model, weak.as_ref())?.render());
        }
        Command::Correlate { cfg, recipes, seeds } => {
            let cfg = cfg.resolve()?;
            if recipes.len() < 3 {
                bail!("correlate needs at least 3 recipes, got {}", recipes.len());
            }
            let bench = Bench::build(&cfg)?;
            let c = run_encoder_correlation(&cfg, &bench, &recipes, &seeds)?;
            print!("{}{}", c.encoders.render(), c.pearson.render());
        }
        Command::Plot { runs, out } => {
            for p in plot::emit_plots(&runs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
