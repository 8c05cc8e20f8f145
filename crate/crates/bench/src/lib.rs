//! Fixtures shared by the criterion benchmarks.

use gsvr_core::codec::{GsvrContainer, ImageCodec};
use gsvr_core::deform::{deform, GopModel};
use gsvr_core::gaussian::DeformedGaussian;
use gsvr_core::pipeline::Decoder;
use gsvr_core::quant::{BitPlan, QuantizedGop};
use gsvr_core::train::{init_gop, TrainConfig};

/// Untrained model with `n` Gaussians over `frames` frames of `width x height`,
/// with some motion so that deformation does real work.
pub fn model(n: usize, width: usize, height: usize, frames: usize) -> GopModel<f32> {
    let config = TrainConfig {
        num_gaussians: n,
        seed: 42,
        ..Default::default()
    };
    let mut gop = init_gop::<f32>(&config, (0, frames - 1), width, height).expect("valid fixture");
    for (i, g) in gop.gaussians.iter_mut().enumerate() {
        let k = i as f32 / n as f32;
        g.poly[1] = [0.1 * k, -0.05];
        g.poly[2] = [-0.02, 0.03 * k];
        g.alpha_raw = 2.0 * k - 1.0;
    }
    for plane in gop.triplane.planes_mut() {
        for (j, v) in plane.data_mut().iter_mut().enumerate() {
            *v += 0.01 * ((j % 7) as f32 - 3.0);
        }
    }
    gop
}

/// Deformed Gaussians of [`model`] at mid-clip.
pub fn deformed(n: usize, width: usize, height: usize) -> Vec<DeformedGaussian<f32>> {
    let gop = model(n, width, height, 16);
    deform(&gop, 0.5)
}

/// A decoder over one quantized GOP of [`model`].
pub fn decoder(n: usize, width: usize, height: usize, frames: usize) -> Decoder {
    let gop = QuantizedGop::from_model(&model(n, width, height, frames), &BitPlan::default())
        .expect("quantizable");
    Decoder::new(GsvrContainer {
        width,
        height,
        frame_count: frames,
        codec: ImageCodec::Png,
        gops: vec![gop],
    })
}
