//! The conditional noise-prediction UNet, the Modulator that turns the
//! spatial condition into per-block gains, and the conditioning MLPs feeding
//! adaptive group normalization.

mod checkpoint;
mod params;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use params::{AdamW, AdamWConfig, ParamId, ParamStore};
pub use unet::{BoundPredictor, Conditioning, Model, Taps};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::sh::LIGHT_LEN;
use crate::tensor::{Tensor, Var};

pub const GN_EPS: f64 = 1e-5;

/// Conditioning wiring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Spatial condition through the Modulator, `o ⊙ tanh(m)`.
    #[default]
    Full,
    /// Spatial condition concatenated to `x_t` at the input; no Modulator.
    NoModulatorConcat,
    /// No spatial path; the flattened light joins the non-spatial vector.
    LightNonspatial,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoModulatorConcat, Mode::LightNonspatial];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoModulatorConcat => "no_modulator_concat",
            Mode::LightNonspatial => "light_nonspatial",
        }
    }

    pub fn uses_spatial(self) -> bool {
        self != Mode::LightNonspatial
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Mode::Full),
            "no_modulator" | "no_modulator_concat" => Ok(Mode::NoModulatorConcat),
            "light_nonspatial" => Ok(Mode::LightNonspatial),
            _ => Err(Error::invalid(format!(
                "unknown mode {s:?} (expected full, no-modulator or light-nonspatial)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Feature-map sizes that get a self-attention block.
    pub attention_resolutions: Vec<usize>,
    pub head_channels: usize,
    /// Upper bound on group-norm groups; layers with fewer channels use one
    /// group per channel.
    pub groups: usize,
    /// `|s| + 3 + |ξ| + 1`.
    pub nonspatial_dim: usize,
    pub time_embed_dim: usize,
    pub cond_hidden: usize,
    pub mode: Mode,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            res_blocks_per_level: 1,
            attention_resolutions: vec![8],
            head_channels: 32,
            groups: 32,
            nonspatial_dim: 16 + 3 + 32 + 1,
            time_embed_dim: 64,
            cond_hidden: 128,
            mode: Mode::Full,
        }
    }
}

impl UNetConfig {
    /// Hyperparameters at the scale of the original 128 px model.
    pub fn full_scale() -> Self {
        Self {
            image_size: 128,
            base_channels: 128,
            channel_multipliers: vec![1, 1, 2, 3, 4],
            res_blocks_per_level: 2,
            attention_resolutions: vec![16, 8],
            head_channels: 64,
            groups: 32,
            nonspatial_dim: 16 + 3 + 512 + 1,
            time_embed_dim: 512,
            cond_hidden: 512,
            mode: Mode::Full,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        if channels >= self.groups {
            self.groups
        } else {
            channels
        }
    }

    /// Width of the vector fed to the conditioning MLPs in this mode.
    pub fn cond_dim(&self) -> usize {
        match self.mode {
            Mode::LightNonspatial => self.nonspatial_dim + LIGHT_LEN,
            _ => self.nonspatial_dim,
        }
    }

    pub fn input_channels(&self) -> usize {
        match self.mode {
            Mode::NoModulatorConcat => 3 + 6,
            _ => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.channel_multipliers.is_empty(), || "channel_multipliers is empty".into())?;
        ensure(self.base_channels > 0 && self.channel_multipliers.iter().all(|&m| m > 0), || {
            "channel counts must be positive".into()
        })?;
        ensure(self.res_blocks_per_level >= 1, || "need at least one residual block per level".into())?;
        let down = 1 << (self.levels() - 1);
        ensure(self.image_size > 0 && self.image_size % down == 0, || {
            format!("image_size {} must be divisible by {down}", self.image_size)
        })?;
        let realized: Vec<usize> = (0..self.levels()).map(|l| self.resolution(l)).collect();
        for r in &self.attention_resolutions {
            ensure(realized.contains(r), || format!("attention resolution {r} is not one of {realized:?}"))?;
        }
        ensure(self.time_embed_dim >= 2 && self.time_embed_dim % 2 == 0, || "time_embed_dim must be even".into())?;
        ensure(self.nonspatial_dim > 0 && self.cond_hidden > 0 && self.groups > 0, || {
            "nonspatial_dim, cond_hidden and groups must be positive".into()
        })?;
        for l in 0..self.levels() {
            let c = self.channels(l);
            ensure(c % self.groups_for(c) == 0, || format!("{c} channels not divisible into groups"))?;
            if self.attention_resolutions.contains(&self.resolution(l)) {
                ensure(c % self.head_channels == 0, || {
                    format!("{c} channels not divisible into heads of {}", self.head_channels)
                })?;
            }
        }
        Ok(())
    }
}

/// Sinusoidal timestep encoding `[sin(t·ω_i)…, cos(t·ω_i)…]` with
/// `ω_i = 10000^(−i/(dim/2))`.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    ensure(dim >= 2 && dim % 2 == 0, || format!("embedding dim {dim} must be even"))?;
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    Ok(freqs.iter().map(|w| (t * w).sin()).chain(freqs.iter().map(|w| (t * w).cos())).collect())
}

/// Batch of time embeddings, `[N, dim]`.
pub fn time_embedding(ts: &[usize], dim: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(sinusoidal_embed(t as f64, dim)?.into_iter().map(|v| v as f32));
    }
    Tensor::new(&[ts.len(), dim], data)
}

/// Group normalization without affine parameters.
pub fn group_normalize<'g>(h: Var<'g, f32>, groups: usize) -> Var<'g, f32> {
    h.group_norm(groups, GN_EPS)
}

/// `k ⊙ (t_s ⊙ GN(h) + t_b)` with per-sample, per-channel `k`, `t_s`, `t_b`.
pub fn adagn<'g>(h: Var<'g, f32>, k: Var<'g, f32>, t_s: Var<'g, f32>, t_b: Var<'g, f32>, groups: usize) -> Var<'g, f32> {
    group_normalize(h, groups).mul_channel(t_s).add_channel(t_b).mul_channel(k)
}

/// Weights of one conditioning MLP: three affine layers, `W: [out, in]`.
#[derive(Clone)]
pub struct MlpWeights<'g> {
    pub layers: Vec<(Var<'g, f32>, Var<'g, f32>)>,
}

/// `L3(SiLU(L2(SiLU(L1(x)))))`.
pub fn cond_mlp_forward<'g>(w: &MlpWeights<'g>, x: Var<'g, f32>) -> Var<'g, f32> {
    let n = w.layers.len();
    w.layers.iter().enumerate().fold(x, |h, (i, (wt, b))| {
        let y = h.linear(*wt, Some(*b));
        if i + 1 < n {
            y.silu()
        } else {
            y
        }
    })
}

/// `SiLU(W·γ + b)` split into `(t_s, t_b)`, scale first.
pub fn time_mlp_forward<'g>(w: Var<'g, f32>, b: Var<'g, f32>, gamma: Var<'g, f32>) -> (Var<'g, f32>, Var<'g, f32>) {
    let out = gamma.linear(w, Some(b)).silu();
    let c = out.shape()[1] / 2;
    (out.narrow_cols(0, c), out.narrow_cols(c, c))
}
