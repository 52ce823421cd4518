//! Training loop and the inference procedures built on it: inversion,
//! relighting and shadow sweeps.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_split, DatasetSpec, LoadedSample, Split};
use crate::diffusion::{
    ddim_decode, diffusion_loss, draw_loss_inputs, mean_match, CorrectionSequence, DecodeSolver, NoiseSchedule,
    ScheduleParams,
};
use crate::encoders::{conditioning, FeatureVector, SidecarDims};
use crate::error::{ensure, Error, Result};
use crate::geometry::BlendshapeModel;
use crate::image::RgbImage;
use crate::network::{load_checkpoint, save_checkpoint, AdamW, AdamWConfig, Checkpoint, Conditioning, Model, RngState, UNetConfig};
use crate::sh::LightSh;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleParams,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Loss is averaged and logged every this many steps.
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Use only the first this-many training samples.
    pub max_train_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            schedule: ScheduleParams::default(),
            optimizer: AdamWConfig::default(),
            batch_size: 8,
            steps: 20_000,
            seed: 0,
            log_every: 50,
            checkpoint_every: 2_000,
            max_train_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        NoiseSchedule::try_from(self.schedule)?;
        ensure(self.batch_size >= 1, || "batch_size must be >= 1".into())?;
        ensure(self.log_every >= 1 && self.checkpoint_every >= 1, || "log_every and checkpoint_every must be >= 1".into())?;
        ensure(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite(), || "learning rate must be positive".into())
    }

    /// Errors unless the dataset matches the network's resolution and
    /// conditioning width.
    pub fn check_dataset(&self, spec: &DatasetSpec) -> Result<()> {
        ensure(spec.resolution == self.unet.image_size, || {
            format!("dataset resolution {} does not match network image_size {}", spec.resolution, self.unet.image_size)
        })?;
        let want = spec.shape_dims.total() + 3 + spec.identity_dim + 1;
        ensure(want == self.unet.nonspatial_dim, || {
            format!("dataset encodings have {want} non-spatial values, network expects {}", self.unet.nonspatial_dim)
        })
    }
}

/// Extra state stored alongside the model in training checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub config: TrainConfig,
    pub dataset: DatasetSpec,
    pub elapsed_secs: f64,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const LATEST: &str = "latest.ckpt";

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub schedule: NoiseSchedule,
    pub step: u64,
    pub dataset: DatasetSpec,
    rng: ChaCha8Rng,
    data: Vec<LoadedSample>,
    elapsed_before: f64,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, data_dir: &Path) -> Result<Self> {
        config.validate()?;
        let (manifest, data) = load_split(data_dir, Split::Train, config.max_train_samples)?;
        config.check_dataset(&manifest.spec)?;
        ensure(!data.is_empty(), || "training split is empty".into())?;
        let model = Model::new(config.unet.clone(), config.seed)?;
        let optimizer = AdamW::new(config.optimizer.clone(), &model.params);
        Ok(Self {
            schedule: NoiseSchedule::try_from(config.schedule)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            model,
            optimizer,
            step: 0,
            dataset: manifest.spec,
            data,
            elapsed_before: 0.0,
            started: Instant::now(),
        })
    }

    /// Continues from a training checkpoint; the dataset must be the one the
    /// run started on.
    pub fn resume(ckpt: &Path, data_dir: &Path) -> Result<Self> {
        let ck = load_checkpoint(ckpt)?;
        let state: TrainState = serde_json::from_value(ck.extra)
            .map_err(|e| Error::Checkpoint(format!("{}: not a training checkpoint: {e}", ckpt.display())))?;
        let (manifest, data) = load_split(data_dir, Split::Train, state.config.max_train_samples)?;
        ensure(manifest.spec == state.dataset, || "dataset differs from the one this run was trained on".into())?;
        let optimizer = ck.optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Ok(Self {
            config: state.config,
            model: ck.model,
            optimizer,
            schedule: ck.schedule,
            step: ck.step,
            dataset: state.dataset,
            rng: ck.rng.restore(),
            data,
            elapsed_before: state.elapsed_secs,
            started: Instant::now(),
        })
    }

    pub fn elapsed_secs(&self) -> f64 {
        self.elapsed_before + self.started.elapsed().as_secs_f64()
    }

    /// One optimizer step on a uniformly drawn minibatch; returns its loss.
    pub fn train_step(&mut self) -> Result<f32> {
        let n = self.data.len();
        let batch: Vec<&LoadedSample> = (0..self.config.batch_size).map(|_| &self.data[self.rng.random_range(0..n)]).collect();
        let x0 = Tensor::stack(&batch.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let cond = Conditioning::stack(&batch.iter().map(|s| s.cond.clone()).collect::<Vec<_>>())?;
        let draw = draw_loss_inputs(x0.shape(), &self.schedule, &mut self.rng);
        let g = Graph::new();
        let model = &self.model;
        let loss = diffusion_loss(&g, &x0, &draw, &self.schedule, |x, t| model.forward(&g, x, t, &cond, None))?;
        let value = loss.value().data()[0];
        ensure(value.is_finite(), || format!("loss became non-finite at step {}", self.step + 1))?;
        let grads = g.backward(loss);
        drop(g);
        self.optimizer.update(&mut self.model.params, &grads);
        self.step += 1;
        Ok(value)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let state = TrainState { config: self.config.clone(), dataset: self.dataset.clone(), elapsed_secs: self.elapsed_secs() };
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            schedule: self.schedule.clone(),
            step: self.step,
            rng: RngState::capture(self.config.seed, &self.rng),
            extra: serde_json::to_value(state).expect("train state serializes"),
        }
    }

    /// Trains until `config.steps`, logging to `<out>/train_log.csv` and
    /// writing `step_XXXXXXXX.ckpt` plus `latest.ckpt` periodically and at
    /// the end. Returns the per-step losses of this call.
    pub fn run(&mut self, out: &Path) -> Result<Vec<f32>> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join(LOG_FILE);
        let fresh = !log_path.exists();
        let mut log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        if fresh {
            writeln!(log, "step,loss,lr,wallclock").map_err(|e| Error::io(&log_path, e))?;
        }
        let mut losses = Vec::new();
        let mut window = Vec::new();
        while self.step < self.config.steps {
            let loss = self.train_step()?;
            losses.push(loss);
            window.push(loss as f64);
            if self.step % self.config.log_every == 0 || self.step == self.config.steps {
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                writeln!(log, "{},{mean:.6},{},{:.3}", self.step, self.config.optimizer.lr, self.elapsed_secs())
                    .map_err(|e| Error::io(&log_path, e))?;
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                log::info!("step {} loss {mean:.5}", self.step);
                window.clear();
            }
            if self.step % self.config.checkpoint_every == 0 || self.step == self.config.steps {
                self.save(out)?;
            }
        }
        Ok(losses)
    }

    fn save(&self, out: &Path) -> Result<()> {
        let ck = self.checkpoint();
        save_checkpoint(&out.join(format!("step_{:08}.ckpt", self.step)), &ck)?;
        save_checkpoint(&out.join(LATEST), &ck)
    }
}

/// Trains from scratch; returns the path of the final checkpoint.
pub fn train(config: TrainConfig, data_dir: &Path, out: &Path) -> Result<PathBuf> {
    let mut t = Trainer::new(config, data_dir)?;
    t.run(out)?;
    Ok(out.join(LATEST))
}

/// A trained model ready for inference, with the head model its
/// conditioning is rendered from.
#[derive(Clone, Debug)]
pub struct Relighter {
    pub model: Model,
    pub schedule: NoiseSchedule,
    pub head: BlendshapeModel,
    pub solver: DecodeSolver,
}

impl Relighter {
    pub fn new(model: Model, schedule: NoiseSchedule, head: BlendshapeModel) -> Self {
        Self { model, schedule, head, solver: DecodeSolver::Explicit }
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let state: TrainState = serde_json::from_value(ck.extra)
            .map_err(|e| Error::Checkpoint(format!("{}: missing training state: {e}", path.display())))?;
        Ok(Self::new(ck.model, ck.schedule, state.dataset.head_model()?))
    }

    /// Sidecar vector lengths this model was trained with.
    pub fn sidecar_dims(&self) -> SidecarDims {
        let shape = self.head.dims();
        SidecarDims { shape, identity: self.model.config.nonspatial_dim.saturating_sub(shape.total() + 4) }
    }

    pub fn conditioning(&self, f: &FeatureVector) -> Result<Conditioning> {
        conditioning(f, &self.head)
    }

    fn check_image(&self, image: &Tensor<f32>) -> Result<()> {
        let s = self.model.config.image_size;
        ensure(image.shape() == [1, 3, s, s], || format!("image tensor {:?} does not match the model's {s}x{s}", image.shape()))
    }

    /// `x_T` and the mean-matching corrections for `image` (in `[-1, 1]`).
    pub fn invert(&self, image: &Tensor<f32>, f: &FeatureVector, steps: usize) -> Result<Inversion> {
        self.check_image(image)?;
        let steps = self.schedule.strided(steps)?;
        let cond = self.conditioning(f)?;
        let pred = self.model.bind(&cond)?;
        let (traj, corrections) = mean_match(image, &pred, &self.schedule, &steps, self.solver)?;
        Ok(Inversion { x_t: traj.last().clone(), corrections, steps })
    }

    /// Decodes an inversion under `f`, clamped to `[-1, 1]`.
    pub fn decode(&self, inv: &Inversion, f: &FeatureVector) -> Result<Tensor<f32>> {
        let cond = self.conditioning(f)?;
        let pred = self.model.bind(&cond)?;
        let x = ddim_decode(&inv.x_t, &pred, &self.schedule, &inv.steps, self.solver, Some(&inv.corrections))?;
        Ok(x.map(|v| v.clamp(-1.0, 1.0)))
    }

    /// Inverts under `f` and decodes under `f` with the light and shadow
    /// logit replaced.
    pub fn relight(&self, image: &RgbImage, f: &FeatureVector, light: LightSh, c: f64, steps: usize) -> Result<RgbImage> {
        let inv = self.invert(&image.to_tensor(), f, steps)?;
        RgbImage::from_tensor(&self.decode(&inv, &f.with_light(light, c))?, 0)
    }

    /// One inversion, one decode per `c`, tiled left to right.
    pub fn shadow_sweep(&self, image: &RgbImage, f: &FeatureVector, cs: &[f64], steps: usize) -> Result<Sweep> {
        ensure(!cs.is_empty(), || "need at least one shadow value".into())?;
        let inv = self.invert(&image.to_tensor(), f, steps)?;
        let frames = cs
            .iter()
            .map(|&c| RgbImage::from_tensor(&self.decode(&inv, &f.with_light(f.light, c))?, 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sweep { grid: RgbImage::hstack(&frames)?, frames, x_t_hash: inv.x_t_hash() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub x_t: Tensor<f32>,
    pub corrections: CorrectionSequence,
    pub steps: Vec<usize>,
}

impl Inversion {
    /// SHA-256 of the latent's little-endian bytes.
    pub fn x_t_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.x_t.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub frames: Vec<RgbImage>,
    pub grid: RgbImage,
    pub x_t_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, read_manifest, sample_paths};
    use crate::encoders::import_sidecar;
    use crate::network::Mode;

    fn tiny(mode: Mode) -> TrainConfig {
        TrainConfig {
            unet: UNetConfig {
                image_size: 8,
                base_channels: 8,
                channel_multipliers: vec![1, 2],
                attention_resolutions: vec![4],
                head_channels: 8,
                groups: 4,
                time_embed_dim: 8,
                cond_hidden: 16,
                mode,
                ..Default::default()
            },
            batch_size: 2,
            steps: 6,
            log_every: 2,
            checkpoint_every: 3,
            optimizer: AdamWConfig { lr: 1e-3, ..Default::default() },
            ..Default::default()
        }
    }

    fn data(dir: &Path) {
        let spec = DatasetSpec { count: 12, resolution: 8, head_model_level: 2, split: [0.5, 0.25, 0.25], ..Default::default() };
        generate(&spec, dir).unwrap();
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = tempfile::tempdir().unwrap();
        data(d.path());
        let (a, b) = (d.path().join("a"), d.path().join("b"));
        let full = Trainer::new(tiny(Mode::Full), d.path()).unwrap().run(&a).unwrap();
        let mut first = Trainer::new(TrainConfig { steps: 3, ..tiny(Mode::Full) }, d.path()).unwrap();
        let head = first.run(&b).unwrap();
        let mut resumed = Trainer::resume(&b.join(LATEST), d.path()).unwrap();
        resumed.config.steps = 6;
        let tail = resumed.run(&b).unwrap();
        assert_eq!([head, tail].concat(), full);
        let ka = load_checkpoint(&a.join(LATEST)).unwrap();
        let kb = load_checkpoint(&b.join(LATEST)).unwrap();
        assert!(ka.model.params.iter().zip(kb.model.params.iter()).all(|(x, y)| x.2 == y.2));
        let log = fs::read_to_string(b.join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().next(), Some("step,loss,lr,wallclock"));
        // Logged at 2 and 3 (end of the first call), then 4 and 6.
        assert_eq!(log.lines().count(), 1 + 4);
        assert!(a.join("step_00000003.ckpt").exists());
    }

    #[test]
    fn rejects_mismatched_dataset() {
        let d = tempfile::tempdir().unwrap();
        data(d.path());
        let mut cfg = tiny(Mode::Full);
        cfg.unet.image_size = 16;
        assert!(matches!(Trainer::new(cfg, d.path()), Err(Error::Invalid(_))));
        let mut cfg = tiny(Mode::Full);
        cfg.unet.nonspatial_dim = 10;
        assert!(Trainer::new(cfg, d.path()).is_err());
        assert!(matches!(Trainer::new(tiny(Mode::Full), &d.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn relighting_contracts() {
        let d = tempfile::tempdir().unwrap();
        data(d.path());
        let out = d.path().join("run");
        let ckpt = train(TrainConfig { steps: 2, ..tiny(Mode::Full) }, d.path(), &out).unwrap();
        let r = Relighter::from_checkpoint(&ckpt).unwrap();
        let spec = read_manifest(d.path()).unwrap().spec;
        let (img, _, json) = sample_paths(&spec, 0);
        let image = RgbImage::load_png(&d.path().join(img)).unwrap();
        let f = import_sidecar(&d.path().join(json), spec.sidecar_dims()).unwrap().features;

        let inv = r.invert(&image.to_tensor(), &f, 10).unwrap();
        let recon = RgbImage::from_tensor(&r.decode(&inv, &f).unwrap(), 0).unwrap();
        let same = r.relight(&image, &f, f.light, f.shadow_logit, 10).unwrap();
        assert_eq!(same, recon);
        assert_eq!(r.relight(&image, &f, f.light, f.shadow_logit, 10).unwrap(), same);
        let other = r.relight(&image, &f, LightSh::ambient(3.0), -4.0, 10).unwrap();
        assert!(other.pixels.iter().flatten().all(|v| (0.0..=1.0).contains(v)));

        let sweep = r.shadow_sweep(&image, &f, &[f.shadow_logit], 10).unwrap();
        assert_eq!(sweep.frames[0], recon);
        assert_eq!(sweep.x_t_hash, inv.x_t_hash());
        let sweep = r.shadow_sweep(&image, &f, &[-4.0, 0.0, 4.0], 10).unwrap();
        assert_eq!(sweep.grid.width, 3 * 8);
        assert!(r.shadow_sweep(&image, &f, &[], 10).is_err());
        assert!(r.invert(&Tensor::zeros(&[1, 3, 4, 4]), &f, 10).is_err());
    }
}
