//! Fixtures shared by the benchmarks.

use relight_core::dataset::{draw_scene, render_scene};
use relight_core::encoders::{oracle_encode, FeatureVector};
use relight_core::geometry::BlendshapeModel;
use relight_core::network::{Conditioning, Model, UNetConfig};
use relight_core::{DatasetSpec, Mode, RgbImage, Tensor};

/// One rendered sample of the default dataset, with its features.
pub struct Scene {
    pub spec: DatasetSpec,
    pub head: BlendshapeModel,
    pub image: RgbImage,
    pub features: FeatureVector,
}

pub fn scene(index: usize) -> Scene {
    let spec = DatasetSpec::default();
    let head = spec.head_model().expect("default head model");
    let desc = draw_scene(&spec, index).expect("scene");
    let render = render_scene(&desc, &head).expect("render");
    let image = render.image().quantized();
    let features = oracle_encode(&desc, &render.output, &image, spec.identity_dim).expect("features");
    Scene { spec, head, image, features }
}

/// Default-size model in `mode` with a constant batch conditioning.
pub fn model(mode: Mode, batch: usize) -> (Model, Conditioning) {
    let cfg = UNetConfig { mode, ..Default::default() };
    let n = cfg.image_size;
    let cond = Conditioning {
        nonspatial: Tensor::full(&[batch, cfg.nonspatial_dim], 0.1),
        light: Tensor::full(&[batch, 27], 0.1),
        spatial: Tensor::full(&[batch, 6, n, n], 0.2),
    };
    (Model::new(cfg, 0).expect("default config is valid"), cond)
}
