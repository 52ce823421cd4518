use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relight_core::dataset::{generate, generate_eval_pairs, read_json, write_json, DatasetSpec};
use relight_core::encoders::{import_sidecar, Sidecar};
use relight_core::eval::{eval_relight, run_ablation_suite, AblationConfig};
use relight_core::network::Mode;
use relight_core::pipeline::{Relighter, TrainConfig, Trainer};
use relight_core::{Error, LightSh, Result, RgbImage};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "relight", version, about = "Diffusion-based face relighting on synthetic heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (defaults are used without --spec).
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw relighting targets over the test split and render ground truth.
    GenPairs {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model, or continue a run with --resume.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// full, no-modulator or light-nonspatial.
        #[arg(long)]
        mode: Option<Mode>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the total step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Invert an image to its noise latent and mean-matching corrections.
    Invert {
        #[command(flatten)]
        input: Input,
        /// Output JSON (default: <image>.inversion.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relight an image toward a target light and shadow value.
    Relight {
        #[command(flatten)]
        input: Input,
        /// JSON file holding 27 SH coefficients, bare or as {"light_sh": [...]}.
        #[arg(long, conflicts_with = "target_from_sidecar", required_unless_present = "target_from_sidecar")]
        target_light: Option<PathBuf>,
        /// Take the target light (and shadow value) from another sidecar.
        #[arg(long)]
        target_from_sidecar: Option<PathBuf>,
        /// Target shadow logit (default: the target sidecar's, else the source's).
        #[arg(long, allow_hyphen_values = true)]
        target_c: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode one inversion under several shadow values, tiled left to right.
    SweepShadow {
        #[command(flatten)]
        input: Input,
        #[arg(long, allow_hyphen_values = true, default_value = "-4,-2,0,2,4")]
        c_list: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on a pairs manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Train and evaluate the three conditioning variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct Input {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    sidecar: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: usize,
}

impl Input {
    fn load(&self) -> Result<(Relighter, RgbImage, relight_core::encoders::FeatureVector)> {
        let r = Relighter::from_checkpoint(&self.ckpt)?;
        let image = RgbImage::load_png(&self.image)?;
        let f = import_sidecar(&self.sidecar, r.sidecar_dims())?.features;
        Ok((r, image, f))
    }
}

fn read_light(path: &Path) -> Result<LightSh> {
    let v: Value = read_json(path)?;
    let arr = match &v {
        Value::Object(m) => m.get("light_sh").ok_or_else(|| Error::MissingKey("light_sh".into()))?,
        other => other,
    };
    let coeffs: Vec<f64> =
        serde_json::from_value(arr.clone()).map_err(|e| Error::Json { path: path.into(), source: e })?;
    if coeffs.len() != 27 {
        return Err(Error::Length { key: "light_sh".into(), expected: 27, found: coeffs.len() });
    }
    LightSh::from_flat(&coeffs)
}

fn parse_c_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad shadow value {t:?} in --c-list"))))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec: DatasetSpec = spec.map(|p| read_json(&p)).transpose()?.unwrap_or_default();
            let m = generate(&spec, &out)?;
            println!("wrote {} train / {} val / {} test samples to {}", m.counts.train, m.counts.val, m.counts.test, out.display());
        }
        Command::GenPairs { data, n, seed } => {
            let (path, _) = generate_eval_pairs(&data, n, seed)?;
            println!("wrote {n} pairs to {}", path.display());
        }
        Command::Train { config, data, out, mode, resume, steps } => {
            let mut trainer = match resume {
                Some(ckpt) => Trainer::resume(&ckpt, &data)?,
                None => {
                    let mut cfg: TrainConfig = config.map(|p| read_json(&p)).transpose()?.unwrap_or_default();
                    if let Some(m) = mode {
                        cfg.unet.mode = m;
                    }
                    Trainer::new(cfg, &data)?
                }
            };
            if let Some(s) = steps {
                trainer.config.steps = s;
            }
            trainer.run(&out)?;
            println!("trained to step {}; checkpoints in {}", trainer.step, out.display());
        }
        Command::Invert { input, out } => {
            let (r, image, f) = input.load()?;
            let inv = r.invert(&image.to_tensor(), &f, input.steps)?;
            let out = out.unwrap_or_else(|| input.image.with_extension("inversion.json"));
            let doc = json!({
                "steps": inv.steps,
                "x_t_sha256": inv.x_t_hash(),
                "x_t_shape": inv.x_t.shape(),
                "x_t": inv.x_t.data(),
                "corrections": inv.corrections,
            });
            write_json(&out, &doc)?;
            println!("{} {}", inv.x_t_hash(), out.display());
        }
        Command::Relight { input, target_light, target_from_sidecar, target_c, out } => {
            let (r, image, f) = input.load()?;
            let (light, c) = match (target_light, target_from_sidecar) {
                (Some(p), _) => (read_light(&p)?, target_c.unwrap_or(f.shadow_logit)),
                (None, Some(p)) => {
                    let sc = Sidecar::read(&p, r.sidecar_dims())?;
                    (LightSh::from_flat(&sc.light_sh)?, target_c.unwrap_or(sc.shadow_logit))
                }
                (None, None) => unreachable!("clap requires a target"),
            };
            r.relight(&image, &f, light, c, input.steps)?.save_png(&out)?;
            println!("wrote {}", out.display());
        }
        Command::SweepShadow { input, c_list, out } => {
            let cs = parse_c_list(&c_list)?;
            let (r, image, f) = input.load()?;
            let sweep = r.shadow_sweep(&image, &f, &cs, input.steps)?;
            sweep.grid.save_png(&out)?;
            println!("wrote {} ({} frames, x_T {})", out.display(), cs.len(), sweep.x_t_hash);
        }
        Command::Eval { ckpt, pairs, out, steps } => {
            let r = Relighter::from_checkpoint(&ckpt)?;
            let rep = eval_relight(&r, &ckpt.display().to_string(), &pairs, steps, Some(&out))?;
            println!(
                "{} pairs: DSSIM {:.4} ± {:.4}, MSE {:.5} ± {:.5}",
                rep.n, rep.dssim_mean, rep.dssim_se, rep.mse_mean, rep.mse_se
            );
        }
        Command::Ablate { config, data, out } => {
            let cfg: AblationConfig = config.map(|p| read_json(&p)).transpose()?.unwrap_or_default();
            let table = run_ablation_suite(&cfg, &data, &out)?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("RELIGHT_NUM_THREADS").ok().and_then(|v| v.parse().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
