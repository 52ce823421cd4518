//! Relighting evaluation against rendered ground truth, and the
//! conditioning ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_eval_pairs, read_json, read_manifest, write_json, PairsManifest};
use crate::encoders::import_sidecar;
use crate::error::{ensure, Error, Result};
use crate::image::{load_mask_png, RgbImage};
use crate::metrics::{dssim, masked_mse, mean_se};
use crate::network::{load_checkpoint, Mode};
use crate::pipeline::{Relighter, TrainConfig, Trainer, LATEST};
use crate::sh::LightSh;

/// Masks come from the renderer rather than a face parser, so numbers are
/// comparable across models here but not with photographic benchmarks.
pub const REPORT_NOTE: &str = "synthetic pairs; head masks from the rasterizer; metrics on 8-bit images in [0,1]";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: usize,
    pub sample: usize,
    pub mse: f64,
    pub dssim: f64,
    /// Metrics of the unmodified input against the ground truth.
    pub input_mse: f64,
    pub input_dssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub checkpoint: String,
    pub mode: Mode,
    pub steps: usize,
    pub n: usize,
    pub mse_mean: f64,
    pub mse_se: f64,
    pub dssim_mean: f64,
    pub dssim_se: f64,
    pub pairs: Vec<PairResult>,
}

impl EvalReport {
    pub fn from_pairs(checkpoint: String, mode: Mode, steps: usize, pairs: Vec<PairResult>) -> Self {
        let (mse_mean, mse_se) = mean_se(&pairs.iter().map(|p| p.mse).collect::<Vec<_>>());
        let (dssim_mean, dssim_se) = mean_se(&pairs.iter().map(|p| p.dssim).collect::<Vec<_>>());
        Self { note: REPORT_NOTE.into(), checkpoint, mode, steps, n: pairs.len(), mse_mean, mse_se, dssim_mean, dssim_se, pairs }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,sample,mse,dssim,input_mse,input_dssim\n");
        for p in &self.pairs {
            writeln!(s, "{},{},{:e},{:e},{:e},{:e}", p.id, p.sample, p.mse, p.dssim, p.input_mse, p.input_dssim).unwrap();
        }
        s
    }
}

/// Relights every pair toward its target and scores the result against the
/// ground truth. With `out`, writes `report.json`, `report.csv` and
/// `grids/<id>.png` (input | relit | ground truth).
pub fn eval_relight(
    relighter: &Relighter,
    checkpoint: &str,
    pairs_path: &Path,
    steps: usize,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let manifest: PairsManifest = read_json(pairs_path)?;
    ensure(!manifest.pairs.is_empty(), || "pairs manifest is empty".into())?;
    // Pair paths are relative to the dataset root, the parent of `pairs/`.
    let root = pairs_path.parent().and_then(Path::parent).unwrap_or(Path::new("."));
    let spec = read_manifest(root)?.spec;
    if let Some(o) = out {
        let grids = o.join("grids");
        fs::create_dir_all(&grids).map_err(|e| Error::io(&grids, e))?;
    }
    let pairs = manifest
        .pairs
        .par_iter()
        .map(|p| {
            let input = RgbImage::load_png(&root.join(&p.image))?;
            let gt = RgbImage::load_png(&root.join(&p.ground_truth))?;
            let (_, _, mask) = load_mask_png(&root.join(&p.mask))?;
            let f = import_sidecar(&root.join(&p.sidecar), spec.sidecar_dims())?.features;
            let relit = relighter.relight(&input, &f, LightSh::from_flat(&p.target_light)?, p.target_c, steps)?.quantized();
            if let Some(o) = out {
                RgbImage::hstack(&[input.clone(), relit.clone(), gt.clone()])?.save_png(&o.join("grids").join(format!("{:04}.png", p.id)))?;
            }
            Ok(PairResult {
                id: p.id,
                sample: p.sample,
                mse: masked_mse(&relit, &gt, &mask)?,
                dssim: dssim(&relit, &gt, &mask)?,
                input_mse: masked_mse(&input, &gt, &mask)?,
                input_dssim: dssim(&input, &gt, &mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_pairs(checkpoint.into(), relighter.model.mode(), steps, pairs);
    if let Some(o) = out {
        write_json(&o.join("report.json"), &report)?;
        let csv = o.join("report.csv");
        fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Shared training settings; the mode and seed are set per run.
    pub train: TrainConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub eval_steps: usize,
    pub n_pairs: usize,
    pub pair_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig { steps: 5_000, checkpoint_every: 1_000, ..Default::default() },
            modes: Mode::ALL.to_vec(),
            seeds: vec![0, 1],
            eval_steps: 100,
            n_pairs: 100,
            pair_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: Mode,
    pub seed: u64,
    pub dssim_mean: f64,
    pub dssim_se: f64,
    pub mse_mean: f64,
    pub mse_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub dssim: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub train_steps: u64,
    pub eval_steps: usize,
    pub runs: Vec<AblationRun>,
    /// Per-mode means over seeds.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn run(&self, mode: Mode, seed: u64) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.mode == mode && r.seed == seed)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method | DSSIM | MSE |\n|---|---|---|\n");
        for r in &self.rows {
            writeln!(s, "| {} | {:.4} | {:.4} |", r.mode, r.dssim, r.mse).unwrap();
        }
        writeln!(s, "\nseeds: {:?}; {} training steps per run; {} DDIM steps", self.seeds, self.train_steps, self.eval_steps).unwrap();
        s
    }
}

/// Directory of one ablation run.
pub fn run_dir(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(format!("{}_seed{seed}", mode.as_str()))
}

/// Trains one model per (mode, seed) with identical budgets, evaluates each
/// on the same pairs and tabulates the results. Finished runs found in
/// `out` are reused; interrupted ones are resumed.
pub fn run_ablation_suite(cfg: &AblationConfig, data: &Path, out: &Path) -> Result<AblationTable> {
    ensure(!cfg.modes.is_empty() && !cfg.seeds.is_empty(), || "need at least one mode and one seed".into())?;
    let pairs = data.join("pairs").join("pairs.json");
    if !pairs.exists() {
        generate_eval_pairs(data, cfg.n_pairs, cfg.pair_seed)?;
    }
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &mode in &cfg.modes {
            let dir = run_dir(out, mode, seed);
            let ckpt = train_or_resume(cfg, mode, seed, data, &dir)?;
            let report_path = dir.join("eval").join("report.json");
            let report: EvalReport = match read_json::<EvalReport>(&report_path) {
                Ok(r) if r.steps == cfg.eval_steps && r.n == cfg.n_pairs => r,
                _ => {
                    let r = Relighter::from_checkpoint(&ckpt)?;
                    eval_relight(&r, &ckpt.display().to_string(), &pairs, cfg.eval_steps, Some(&dir.join("eval")))?
                }
            };
            log::info!("{mode} seed {seed}: DSSIM {:.4} MSE {:.4}", report.dssim_mean, report.mse_mean);
            runs.push(AblationRun {
                mode,
                seed,
                dssim_mean: report.dssim_mean,
                dssim_se: report.dssim_se,
                mse_mean: report.mse_mean,
                mse_se: report.mse_se,
            });
        }
    }
    let rows = cfg
        .modes
        .iter()
        .map(|&mode| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.mode == mode).collect();
            let n = rs.len() as f64;
            AblationRow {
                mode,
                dssim: rs.iter().map(|r| r.dssim_mean).sum::<f64>() / n,
                mse: rs.iter().map(|r| r.mse_mean).sum::<f64>() / n,
            }
        })
        .collect();
    let table = AblationTable { seeds: cfg.seeds.clone(), train_steps: cfg.train.steps, eval_steps: cfg.eval_steps, runs, rows };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("ablation.json"), &table)?;
    let md = out.join("ablation.md");
    fs::write(&md, table.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(table)
}

fn train_or_resume(cfg: &AblationConfig, mode: Mode, seed: u64, data: &Path, dir: &Path) -> Result<PathBuf> {
    let latest = dir.join(LATEST);
    let mut trainer = if latest.exists() {
        let ck = load_checkpoint(&latest)?;
        if ck.step >= cfg.train.steps {
            return Ok(latest);
        }
        Trainer::resume(&latest, data)?
    } else {
        let mut t = cfg.train.clone();
        t.unet.mode = mode;
        t.seed = seed;
        Trainer::new(t, data)?
    };
    trainer.config.steps = cfg.train.steps;
    trainer.run(dir)?;
    Ok(latest)
}
