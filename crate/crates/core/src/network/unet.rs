use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Conv, Init, Linear, ParamStore};
use super::{adagn, group_normalize, time_embedding, Mode, UNetConfig};
use crate::diffusion::EpsPredictor;
use crate::error::{ensure, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const TIME_SCALE_BIAS: f32 = 1.28; // SiLU(1.28) ≈ 1
const OUT_GAIN: f64 = 0.1;
const MOD_GAIN: f64 = 0.1;

/// Residual block with AdaGN on its second normalization.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
    /// Absent in the Modulator, which has no time or condition input.
    cond: Option<BlockCond>,
    g_in: usize,
    g_out: usize,
    c_out: usize,
}

#[derive(Clone, Debug)]
struct BlockCond {
    time: Linear,
    mlp: [Linear; 3],
}

struct BlockInputs<'g> {
    gamma: Var<'g, f32>,
    cond: Var<'g, f32>,
}

impl ResBlock {
    fn new(init: &mut Init, cfg: &UNetConfig, name: &str, c_in: usize, c_out: usize, conditioned: bool) -> Self {
        let conv1 = init.conv(&format!("{name}.conv1"), c_in, c_out, 3, 1.0);
        let conv2 = init.conv(&format!("{name}.conv2"), c_out, c_out, 3, 1.0);
        let skip = (c_in != c_out).then(|| init.conv(&format!("{name}.skip"), c_in, c_out, 1, 1.0));
        let cond = conditioned.then(|| {
            let mut bias = vec![TIME_SCALE_BIAS; c_out];
            bias.extend(std::iter::repeat_n(0.0, c_out));
            let time = init.linear(&format!("{name}.time"), cfg.time_embed_dim, 2 * c_out, 1.0, Some(bias));
            let h = cfg.cond_hidden;
            let mlp = [
                init.linear(&format!("{name}.cond.0"), cfg.cond_dim(), h, 1.0, None),
                init.linear(&format!("{name}.cond.1"), h, h, 1.0, None),
                init.linear(&format!("{name}.cond.2"), h, c_out, 1.0, Some(vec![1.0; c_out])),
            ];
            BlockCond { time, mlp }
        });
        Self { conv1, conv2, skip, cond, g_in: cfg.groups_for(c_in), g_out: cfg.groups_for(c_out), c_out }
    }

    fn forward<'g>(&self, p: &ParamStore, x: Var<'g, f32>, inp: Option<&BlockInputs<'g>>) -> Var<'g, f32> {
        let h = self.conv1.forward(p, group_normalize(x, self.g_in).silu());
        let h = match (&self.cond, inp) {
            (Some(c), Some(inp)) => {
                let ts = c.time.forward(p, inp.gamma).silu();
                let (t_s, t_b) = (ts.narrow_cols(0, self.c_out), ts.narrow_cols(self.c_out, self.c_out));
                let k = c.mlp[2].forward(p, c.mlp[1].forward(p, c.mlp[0].forward(p, inp.cond).silu()).silu());
                adagn(h, k, t_s, t_b, self.g_out)
            }
            _ => group_normalize(h, self.g_out),
        };
        let h = self.conv2.forward(p, h.silu());
        let skip = match &self.skip {
            Some(s) => s.forward(p, x),
            None => x,
        };
        skip.add(h)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    qkv: Conv,
    proj: Conv,
    groups: usize,
    heads: usize,
}

impl Attention {
    fn new(init: &mut Init, cfg: &UNetConfig, name: &str, c: usize) -> Self {
        Self {
            qkv: init.conv(&format!("{name}.qkv"), c, 3 * c, 1, 1.0),
            proj: init.conv(&format!("{name}.proj"), c, c, 1, 1.0),
            groups: cfg.groups_for(c),
            heads: c / cfg.head_channels,
        }
    }

    fn forward<'g>(&self, p: &ParamStore, x: Var<'g, f32>) -> Var<'g, f32> {
        let qkv = self.qkv.forward(p, group_normalize(x, self.groups));
        x.add(self.proj.forward(p, qkv.attention(self.heads)))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    res: ResBlock,
    attn: Option<Attention>,
    /// Modulator only: projection to `m_i`.
    proj: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Level {
    stages: Vec<Stage>,
    resample: Option<Conv>,
}

#[derive(Clone, Debug)]
struct UNet {
    input: Conv,
    down: Vec<Level>,
    mid: (ResBlock, Attention, ResBlock),
    /// Decoder levels, deepest first.
    up: Vec<Level>,
    out: Conv,
    out_groups: usize,
}

/// The encoder half of the UNet without any conditioning; emits one map
/// per encoder residual block.
#[derive(Clone, Debug)]
struct Modulator {
    input: Conv,
    down: Vec<Level>,
}

fn encoder_levels(init: &mut Init, cfg: &UNetConfig, prefix: &str, modulator: bool) -> Vec<Level> {
    let mut c_prev = cfg.base_channels;
    (0..cfg.levels())
        .map(|l| {
            let c = cfg.channels(l);
            let stages = (0..cfg.res_blocks_per_level)
                .map(|b| {
                    let name = format!("{prefix}.down.{l}.{b}");
                    let res = ResBlock::new(init, cfg, &format!("{name}.res"), c_prev, c, !modulator);
                    c_prev = c;
                    let attn = cfg
                        .attention_resolutions
                        .contains(&cfg.resolution(l))
                        .then(|| Attention::new(init, cfg, &format!("{name}.attn"), c));
                    let proj = modulator.then(|| init.conv(&format!("{name}.proj"), c, c, 1, MOD_GAIN));
                    Stage { res, attn, proj }
                })
                .collect();
            let resample = (l + 1 < cfg.levels())
                .then(|| init.conv(&format!("{prefix}.down.{l}.downsample"), c, c, 3, 1.0).strided(2));
            Level { stages, resample }
        })
        .collect()
}

/// Per-forward diagnostics.
#[derive(Clone, Debug, Default)]
pub struct Taps {
    /// Encoder residual block outputs after modulation, in order.
    pub first_half: Vec<Tensor<f32>>,
}

/// Conditioning for a batch. All parts are always supplied; the mode decides
/// which ones the network reads.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// `[N, nonspatial_dim]`: `(s, cam, ξ, c)`.
    pub nonspatial: Tensor<f32>,
    /// `[N, 27]` flattened SH light.
    pub light: Tensor<f32>,
    /// `[N, 6, H, W]`: shading reference and background, in `[-1, 1]`.
    pub spatial: Tensor<f32>,
}

impl Conditioning {
    pub fn batch(&self) -> usize {
        self.nonspatial.shape()[0]
    }

    pub fn sample(&self, i: usize) -> Self {
        Self { nonspatial: self.nonspatial.sample(i), light: self.light.sample(i), spatial: self.spatial.sample(i) }
    }

    pub fn stack(items: &[Conditioning]) -> Result<Self> {
        let col = |f: fn(&Conditioning) -> &Tensor<f32>| Tensor::stack(&items.iter().map(|c| f(c).clone()).collect::<Vec<_>>());
        Ok(Self { nonspatial: col(|c| &c.nonspatial)?, light: col(|c| &c.light)?, spatial: col(|c| &c.spatial)? })
    }
}

/// Conditional noise predictor plus (in full mode) its Modulator.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: UNetConfig,
    pub params: ParamStore,
    unet: UNet,
    modulator: Option<Modulator>,
}

impl Model {
    /// Freshly initialized model; deterministic in `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mid_c = config.channels(config.levels() - 1);
        ensure(mid_c % config.head_channels == 0, || {
            format!("{mid_c} middle channels not divisible into heads of {}", config.head_channels)
        })?;
        let mut params = ParamStore::default();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let cfg = &config;
        let c0 = cfg.base_channels;
        let input = init.conv("unet.input", cfg.input_channels(), c0, 3, 1.0);
        let down = encoder_levels(&mut init, cfg, "unet", false);
        let mid = (
            ResBlock::new(&mut init, cfg, "unet.mid.res0", mid_c, mid_c, true),
            Attention::new(&mut init, cfg, "unet.mid.attn", mid_c),
            ResBlock::new(&mut init, cfg, "unet.mid.res1", mid_c, mid_c, true),
        );
        let mut c_prev = mid_c;
        let up = (0..cfg.levels())
            .rev()
            .map(|l| {
                let c = cfg.channels(l);
                let stages = (0..cfg.res_blocks_per_level)
                    .map(|b| {
                        let name = format!("unet.up.{l}.{b}");
                        let res = ResBlock::new(&mut init, cfg, &format!("{name}.res"), c_prev + c, c, true);
                        c_prev = c;
                        let attn = cfg
                            .attention_resolutions
                            .contains(&cfg.resolution(l))
                            .then(|| Attention::new(&mut init, cfg, &format!("{name}.attn"), c));
                        Stage { res, attn, proj: None }
                    })
                    .collect();
                let resample = (l > 0).then(|| init.conv(&format!("unet.up.{l}.upsample"), c, c, 3, 1.0));
                Level { stages, resample }
            })
            .collect();
        let out = init.conv("unet.out", c0, 3, 3, OUT_GAIN);
        let unet = UNet { input, down, mid, up, out, out_groups: cfg.groups_for(c0) };
        let modulator = (cfg.mode == Mode::Full).then(|| Modulator {
            input: init.conv("mod.input", 6, c0, 3, 1.0),
            down: encoder_levels(&mut init, cfg, "mod", true),
        });
        Ok(Self { config, params, unet, modulator })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Number of encoder residual blocks (= number of modulation maps).
    pub fn num_first_half_blocks(&self) -> usize {
        self.config.levels() * self.config.res_blocks_per_level
    }

    fn check_spatial(&self, s: &Tensor<f32>) -> Result<()> {
        let n = self.config.image_size;
        ensure(s.shape().len() == 4 && s.shape()[1..] == [6, n, n], || {
            format!("spatial condition {:?} must be [N, 6, {n}, {n}]", s.shape())
        })
    }

    /// Modulator pass: one map `m_i` per encoder residual block.
    pub fn modulator_forward<'g>(&self, spatial: Var<'g, f32>) -> Result<Vec<Var<'g, f32>>> {
        let m = self.modulator.as_ref().ok_or_else(|| Error::invalid("this model has no Modulator"))?;
        self.check_spatial(&spatial.value())?;
        let p = &self.params;
        let mut h = m.input.forward(p, spatial);
        let mut out = Vec::new();
        for level in &m.down {
            for st in &level.stages {
                h = st.res.forward(p, h, None);
                if let Some(a) = &st.attn {
                    h = a.forward(p, h);
                }
                out.push(st.proj.expect("modulator stage has a projection").forward(p, h));
            }
            if let Some(d) = &level.resample {
                h = d.forward(p, h);
            }
        }
        Ok(out)
    }

    /// The noise network proper. `mods` must be given exactly in full mode;
    /// `spatial` is read only in concat mode.
    #[allow(clippy::too_many_arguments)]
    pub fn unet_forward<'g>(
        &self,
        g: &'g Graph<f32>,
        x: Var<'g, f32>,
        t: &[usize],
        cond: Var<'g, f32>,
        spatial: Option<Var<'g, f32>>,
        mods: Option<&[Var<'g, f32>]>,
        mut taps: Option<&mut Taps>,
    ) -> Result<Var<'g, f32>> {
        let cfg = &self.config;
        let p = &self.params;
        let xs = x.shape();
        let n = cfg.image_size;
        ensure(xs.len() == 4 && xs[1..] == [3, n, n], || format!("x_t {xs:?} must be [N, 3, {n}, {n}]"))?;
        ensure(t.len() == xs[0], || format!("{} timesteps for a batch of {}", t.len(), xs[0]))?;
        ensure(cond.shape() == [xs[0], cfg.cond_dim()], || {
            format!("conditioning vector {:?} must be [{}, {}]", cond.shape(), xs[0], cfg.cond_dim())
        })?;
        match (cfg.mode, mods) {
            (Mode::Full, None) => return Err(Error::invalid("full mode requires modulation maps")),
            (Mode::Full, Some(m)) => ensure(m.len() == self.num_first_half_blocks(), || {
                format!("{} modulation maps for {} blocks", m.len(), self.num_first_half_blocks())
            })?,
            (_, Some(_)) => return Err(Error::invalid(format!("{} mode takes no modulation maps", cfg.mode))),
            _ => {}
        }
        let input = match cfg.mode {
            Mode::NoModulatorConcat => {
                let s = spatial.ok_or_else(|| Error::invalid("concat mode requires the spatial condition"))?;
                self.check_spatial(&s.value())?;
                Var::concat_channels(&[x, s])
            }
            _ => x,
        };
        let inp = BlockInputs { gamma: g.constant(time_embedding(t, cfg.time_embed_dim)?), cond };
        let u = &self.unet;
        let mut h = u.input.forward(p, input);
        let mut skips = Vec::new();
        let mut mi = 0;
        for level in &u.down {
            for st in &level.stages {
                h = st.res.forward(p, h, Some(&inp));
                if let Some(m) = mods {
                    ensure(m[mi].shape() == h.shape(), || {
                        format!("modulation map {mi} is {:?}, block output is {:?}", m[mi].shape(), h.shape())
                    })?;
                    h = h.mul(m[mi].tanh());
                }
                mi += 1;
                if let Some(t) = taps.as_deref_mut() {
                    t.first_half.push((*h.value()).clone());
                }
                if let Some(a) = &st.attn {
                    h = a.forward(p, h);
                }
                skips.push(h);
            }
            if let Some(d) = &level.resample {
                h = d.forward(p, h);
            }
        }
        h = u.mid.0.forward(p, h, Some(&inp));
        h = u.mid.1.forward(p, h);
        h = u.mid.2.forward(p, h, Some(&inp));
        for level in &u.up {
            for st in &level.stages {
                let skip = skips.pop().expect("one skip per encoder block");
                h = st.res.forward(p, Var::concat_channels(&[h, skip]), Some(&inp));
                if let Some(a) = &st.attn {
                    h = a.forward(p, h);
                }
            }
            if let Some(up) = &level.resample {
                h = up.forward(p, h.upsample2x());
            }
        }
        Ok(u.out.forward(p, group_normalize(h, u.out_groups).silu()))
    }

    /// The conditioning vector the MLPs read in this mode.
    pub fn cond_vector<'g>(&self, g: &'g Graph<f32>, c: &Conditioning) -> Var<'g, f32> {
        match self.config.mode {
            Mode::LightNonspatial => {
                Var::concat_channels(&[g.constant(c.nonspatial.clone()), g.constant(c.light.clone())])
            }
            _ => g.constant(c.nonspatial.clone()),
        }
    }

    /// ε̂ for a batch, wiring the conditioning according to the mode.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<f32>,
        x: Var<'g, f32>,
        t: &[usize],
        c: &Conditioning,
        taps: Option<&mut Taps>,
    ) -> Result<Var<'g, f32>> {
        ensure(c.batch() == x.shape()[0], || "conditioning batch does not match x_t".into())?;
        let cond = self.cond_vector(g, c);
        match self.config.mode {
            Mode::Full => {
                let mods = self.modulator_forward(g.constant(c.spatial.clone()))?;
                self.unet_forward(g, x, t, cond, None, Some(&mods), taps)
            }
            Mode::NoModulatorConcat => {
                self.unet_forward(g, x, t, cond, Some(g.constant(c.spatial.clone())), None, taps)
            }
            Mode::LightNonspatial => self.unet_forward(g, x, t, cond, None, None, taps),
        }
    }

    /// Binds a single conditioning so the model can drive DDIM. Modulation
    /// maps do not depend on `t` and are computed once here.
    pub fn bind(&self, cond: &Conditioning) -> Result<BoundPredictor<'_>> {
        let mods = match self.config.mode {
            Mode::Full => {
                let g = Graph::inference();
                let m = self.modulator_forward(g.constant(cond.spatial.clone()))?;
                Some(m.iter().map(|v| (*v.value()).clone()).collect())
            }
            _ => None,
        };
        Ok(BoundPredictor { model: self, cond: cond.clone(), mods })
    }
}

/// A [`Model`] with fixed conditioning, usable as an [`EpsPredictor`].
pub struct BoundPredictor<'m> {
    model: &'m Model,
    cond: Conditioning,
    mods: Option<Vec<Tensor<f32>>>,
}

impl EpsPredictor<f32> for BoundPredictor<'_> {
    fn predict(&self, x: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        let g = Graph::inference();
        let n = x.shape()[0];
        ensure(n == self.cond.batch(), || format!("bound to a batch of {}, got {n}", self.cond.batch()))?;
        let cond = self.model.cond_vector(&g, &self.cond);
        let mods: Option<Vec<Var<'_, f32>>> =
            self.mods.as_ref().map(|m| m.iter().map(|t| g.constant(t.clone())).collect());
        let spatial = (self.model.mode() == Mode::NoModulatorConcat).then(|| g.constant(self.cond.spatial.clone()));
        let out = self.model.unet_forward(&g, g.constant(x.clone()), &vec![t; n], cond, spatial, mods.as_deref(), None)?;
        Ok((*out.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny(mode: Mode) -> UNetConfig {
        UNetConfig {
            image_size: 8,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![4],
            head_channels: 8,
            groups: 4,
            nonspatial_dim: 5,
            time_embed_dim: 8,
            cond_hidden: 16,
            mode,
            ..Default::default()
        }
    }

    fn cond(cfg: &UNetConfig, n: usize, seed: u64) -> Conditioning {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal));
        let s = cfg.image_size;
        Conditioning { nonspatial: r(&[n, cfg.nonspatial_dim]), light: r(&[n, 27]), spatial: r(&[n, 6, s, s]) }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
    }

    #[test]
    fn shapes_in_every_mode() {
        for mode in Mode::ALL {
            let cfg = tiny(mode);
            let model = Model::new(cfg.clone(), 1).unwrap();
            let g = Graph::inference();
            let x = g.constant(randn(&[2, 3, 8, 8], 2));
            let y = model.forward(&g, x, &[5, 900], &cond(&cfg, 2, 3), None).unwrap();
            assert_eq!(y.shape(), [2, 3, 8, 8]);
            assert!(y.value().all_finite());
        }
    }

    #[test]
    fn modulator_maps_match_block_outputs() {
        let cfg = tiny(Mode::Full);
        let model = Model::new(cfg.clone(), 1).unwrap();
        let g = Graph::inference();
        let c = cond(&cfg, 1, 3);
        let mods = model.modulator_forward(g.constant(c.spatial.clone())).unwrap();
        assert_eq!(mods.len(), model.num_first_half_blocks());
        let mut taps = Taps::default();
        model.forward(&g, g.constant(randn(&[1, 3, 8, 8], 2)), &[10], &c, Some(&mut taps)).unwrap();
        assert_eq!(taps.first_half.len(), mods.len());
        for (m, o) in mods.iter().zip(&taps.first_half) {
            assert_eq!(m.shape(), o.shape());
        }
    }

    #[test]
    fn zero_mods_zero_first_half() {
        let cfg = tiny(Mode::Full);
        let model = Model::new(cfg.clone(), 1).unwrap();
        let g = Graph::inference();
        let c = cond(&cfg, 1, 3);
        let shapes: Vec<Vec<usize>> =
            model.modulator_forward(g.constant(c.spatial.clone())).unwrap().iter().map(|m| m.shape()).collect();
        let zeros: Vec<Var<f32>> = shapes.iter().map(|s| g.constant(Tensor::zeros(s))).collect();
        let mut taps = Taps::default();
        let cv = model.cond_vector(&g, &c);
        let y = model
            .unet_forward(&g, g.constant(randn(&[1, 3, 8, 8], 2)), &[10], cv, None, Some(&zeros), Some(&mut taps))
            .unwrap();
        assert!(taps.first_half.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(y.value().all_finite());
        // Missing maps in full mode is an error; so are maps elsewhere.
        assert!(model.unet_forward(&g, g.constant(randn(&[1, 3, 8, 8], 2)), &[10], cv, None, None, None).is_err());
    }

    #[test]
    fn light_nonspatial_ignores_spatial_condition() {
        let cfg = tiny(Mode::LightNonspatial);
        let model = Model::new(cfg.clone(), 4).unwrap();
        let c = cond(&cfg, 1, 5);
        let mut permuted = c.clone();
        permuted.spatial.data_mut().reverse();
        let x = randn(&[1, 3, 8, 8], 6);
        let a = model.bind(&c).unwrap().predict(&x, 300).unwrap();
        let b = model.bind(&permuted).unwrap().predict(&x, 300).unwrap();
        assert_eq!(a, b);
        // Full mode does read it.
        let full = Model::new(tiny(Mode::Full), 4).unwrap();
        let a = full.bind(&c).unwrap().predict(&x, 300).unwrap();
        let b = full.bind(&permuted).unwrap().predict(&x, 300).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn bound_predictor_matches_batched_forward() {
        let cfg = tiny(Mode::Full);
        let model = Model::new(cfg.clone(), 7).unwrap();
        let c = cond(&cfg, 1, 8);
        let x = randn(&[1, 3, 8, 8], 9);
        let g = Graph::inference();
        let direct = model.forward(&g, g.constant(x.clone()), &[42], &c, None).unwrap().value();
        let bound = model.bind(&c).unwrap().predict(&x, 42).unwrap();
        assert!(direct.max_abs_diff(&bound) < 1e-6);
    }

    #[test]
    fn every_parameter_gets_gradient() {
        for mode in Mode::ALL {
            let cfg = tiny(mode);
            let model = Model::new(cfg.clone(), 11).unwrap();
            let mut seen = vec![false; model.params.len()];
            for b in 0..10 {
                let g = Graph::new();
                let x = g.constant(randn(&[2, 3, 8, 8], 100 + b));
                let eps = g.constant(randn(&[2, 3, 8, 8], 200 + b));
                let y = model.forward(&g, x, &[1 + 97 * b as usize, 500], &cond(&cfg, 2, 300 + b), None).unwrap();
                let grads = g.backward(y.mse(eps));
                for (i, gr) in grads.iter() {
                    if gr.data().iter().any(|&v| v != 0.0) {
                        seen[i] = true;
                    }
                }
            }
            let dead: Vec<_> =
                model.params.iter().filter(|(id, _, _)| !seen[id.0]).map(|(_, n, _)| n.to_string()).collect();
            assert!(dead.is_empty(), "{mode}: dead parameters {dead:?}");
        }
    }

    #[test]
    fn init_is_deterministic_and_starts_near_zero() {
        let cfg = UNetConfig::default();
        let a = Model::new(cfg.clone(), 3).unwrap();
        let b = Model::new(cfg.clone(), 3).unwrap();
        assert!(a.params.iter().zip(b.params.iter()).all(|(x, y)| x.1 == y.1 && x.2 == y.2));
        let c = cond(&cfg, 2, 1);
        let g = Graph::inference();
        let eps = randn(&[2, 3, 32, 32], 5);
        let y = a.forward(&g, g.constant(randn(&[2, 3, 32, 32], 4)), &[100, 700], &c, None).unwrap();
        let loss = y.mse(g.constant(eps)).value().data()[0];
        assert!((loss - 1.0).abs() < 0.3, "{loss}");
    }
}
