use gsvr_core::codec::inspect_container;
use gsvr_core::pipeline::{GaussianBudget, Slicing};
use gsvr_core::synth;
use gsvr_core::video::sequence_psnr;
use gsvr_core::{
    decode_container, encode_container, encode_video, Decoder, EncodeConfig, TrainConfig,
};

fn config() -> EncodeConfig {
    EncodeConfig {
        train: TrainConfig {
            iterations: 200,
            qat_iterations: 40,
            seed: 2,
            ..Default::default()
        },
        epochs: None,
        budget: GaussianBudget::PerGop(64),
        slicing: Slicing::Fixed(3),
        ..Default::default()
    }
}

#[test]
fn encode_decode_through_public_api() {
    let video = synth::moving_square(24, 24, 7);
    let out = encode_video(&video.frames, &config()).unwrap();
    // The one-frame tail joins the previous GOP.
    let ranges: Vec<_> = out.container.gops.iter().map(|g| g.frame_range).collect();
    assert_eq!(ranges, [(0, 2), (3, 6)]);

    let decoder = Decoder::from_bytes(&out.bytes).unwrap();
    let frames = decoder.decode_all().unwrap();
    assert_eq!(frames.len(), 7);
    let quality = sequence_psnr(&frames, &video.frames).unwrap();
    assert!(
        (quality - out.psnr).abs() < 1e-9,
        "{quality} vs {}",
        out.psnr
    );
    assert!(quality > 20.0, "{quality}");

    let info = inspect_container(&out.bytes).unwrap();
    assert_eq!(info.total_bytes, out.bytes.len());
    assert_eq!(
        info.gops.iter().map(|g| g.2 as usize).sum::<usize>() + 28 + 16 * 2,
        out.bytes.len()
    );
}

#[test]
fn reencoding_a_decoded_container_is_idempotent() {
    let video = synth::moving_square(16, 16, 4);
    let out = encode_video(&video.frames, &config()).unwrap();
    let again = encode_container(&decode_container(&out.bytes).unwrap()).unwrap();
    assert_eq!(again, out.bytes);
}

#[test]
fn fewer_gaussians_never_grow_the_container() {
    let video = synth::moving_square(16, 16, 4);
    let sizes: Vec<usize> = [64, 32, 16]
        .iter()
        .map(|&n| {
            let cfg = EncodeConfig {
                budget: GaussianBudget::PerGop(n),
                ..config()
            };
            encode_video(&video.frames, &cfg).unwrap().bytes.len()
        })
        .collect();
    assert!(sizes.windows(2).all(|w| w[1] <= w[0]), "{sizes:?}");
}
