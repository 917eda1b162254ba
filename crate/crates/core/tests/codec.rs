use par_core::codec::{train_codec, Codec, CodecConfig, CodecTrainConfig, LatentGrid};
use par_core::erp::{circular_pad, crop_padding, cyclic_shift_axis};
use par_core::image::PanoImage;
use par_core::synth::Corpus;
use par_tensor::{AdamW, Boundary, Purpose, RngStream};

fn random_image(h: usize, seed: u64) -> PanoImage<f64> {
    let mut rng = RngStream::new(seed, Purpose::Data);
    PanoImage::from_fn(h, 3, |_, _, _| rng.uniform()).unwrap()
}

fn circular_codec() -> Codec<f64> {
    let cfg = CodecConfig {
        widths: vec![6, 8],
        latent_channels: 4,
        boundary: Boundary::CircularWidth,
        ..CodecConfig::default()
    };
    Codec::new(cfg, 3).unwrap()
}

#[test]
fn circular_encoder_commutes_with_shifts() {
    let c = circular_codec();
    let img = random_image(16, 1);
    let base = c.encode(&img, 0.0).unwrap();
    for v in [4, 12, 28] {
        let shifted = c.encode(&img.shift(v).unwrap(), 0.0).unwrap();
        let expect = cyclic_shift_axis(base.tensor(), 2, v / 4).unwrap();
        let err = shifted.tensor().max_abs_diff(&expect);
        assert!(err <= 1e-6, "v = {v}: {err}");
    }
}

#[test]
fn circular_decoder_commutes_with_shifts() {
    let c = circular_codec();
    let lat = LatentGrid::new(RngStream::new(2, Purpose::Data).normal_tensor(&[4, 4, 8], 1.0)).unwrap();
    let base = c.decode(&lat, 0.0).unwrap();
    for v in [1, 3, 7] {
        let moved = LatentGrid::new(cyclic_shift_axis(lat.tensor(), 2, v).unwrap()).unwrap();
        let out = c.decode(&moved, 0.0).unwrap();
        let err = out.tensor().max_abs_diff(base.shift(4 * v).unwrap().tensor());
        assert!(err <= 1e-6, "v = {v}: {err}");
    }
}

#[test]
fn pad_then_crop_is_identity_on_images() {
    let img = random_image(32, 5);
    for r in [0.125, 0.25, 0.5] {
        let t = img.to_chw();
        let padded = circular_pad(&t, r).unwrap();
        assert_eq!(padded.dim(2), ((1.0 + r) * 64.0) as usize);
        let back = crop_padding(&padded, r).unwrap();
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn training_beats_the_untrained_codec_on_held_out_images() {
    let train = Corpus::build(8, 3, 32).unwrap().images();
    let held: Vec<PanoImage<f32>> = Corpus::build(4, 99, 32).unwrap().images();
    let cfg = CodecConfig {
        widths: vec![8, 16],
        latent_channels: 4,
        ..CodecConfig::default()
    };
    let mut c = Codec::<f32>::new(cfg, 1).unwrap();
    let before = c.mse(&held, 0.125, 0.125).unwrap();
    let tc = CodecTrainConfig {
        steps: 150,
        optimizer: AdamW {
            lr: 3e-3,
            decay_horizon: 150,
            ..AdamW::default()
        },
        ..CodecTrainConfig::default()
    };
    let report = train_codec(&mut c, &train, &tc, |_, _| {}).unwrap();
    let after = c.mse(&held, 0.125, 0.125).unwrap();
    assert!(report.final_mse < report.initial_mse);
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn normalized_latents_have_unit_statistics_on_the_fit_set() {
    let imgs = Corpus::build(6, 4, 32).unwrap().images();
    let cfg = CodecConfig {
        widths: vec![8, 16],
        latent_channels: 4,
        ..CodecConfig::default()
    };
    let mut c = Codec::<f32>::new(cfg, 1).unwrap();
    c.fit_stats(&imgs, 0.125).unwrap();
    let mut sums = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    let mut n = 0;
    for im in &imgs {
        let lat = c.encode(im, 0.125).unwrap();
        let per = lat.height() * lat.width();
        n += per;
        for (i, v) in lat.tensor().data().iter().enumerate() {
            sums[i / per] += *v as f64;
            sq[i / per] += (*v as f64).powi(2);
        }
    }
    for ch in 0..4 {
        let mean = sums[ch] / n as f64;
        let var = sq[ch] / n as f64 - mean * mean;
        assert!(mean.abs() < 1e-3 && (var - 1.0).abs() < 1e-2, "channel {ch}: {mean} {var}");
    }
}
