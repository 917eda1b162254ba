use par_core::model::{patchify, sincos_2d, unpatchify, ParConfig, ParModel};
use par_tensor::{Purpose, RngStream, Tape, Tensor};
use proptest::prelude::*;

fn tiny() -> ParConfig {
    ParConfig {
        latent_channels: 3,
        patch: 1,
        grid_h: 2,
        grid_w: 4,
        d_model: 8,
        enc_blocks: 1,
        dec_blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        head_width: 8,
        head_blocks: 2,
        vocab: 32,
    }
}

#[test]
fn head_outputs_zero_and_blocks_are_identity_at_init() {
    let m = ParModel::<f64>::new(tiny(), 4).unwrap();
    let mut rng = RngStream::new(1, Purpose::Data);
    let x = rng.normal_tensor(&[8, 3], 1.0);
    let z = rng.normal_tensor(&[8, 8], 1.0);
    let t: Vec<usize> = (0..8).map(|i| i * 120).collect();
    assert!(m.infer_eps(&x, &t, &z).unwrap().data().iter().all(|&v| v == 0.0));

    let tape = Tape::new();
    let p = m.params.bind(&tape, false);
    let (h0, h) = m.head_stream(&p, tape.constant(x), &t, tape.constant(z)).unwrap();
    assert_eq!(h0.value(), h.value());
}

#[test]
fn z_depends_on_visible_tokens_only() {
    let m = ParModel::<f64>::new(tiny(), 4).unwrap();
    let mut rng = RngStream::new(2, Purpose::Data);
    let a = rng.normal_tensor(&[8, 3], 1.0);
    let known = [1, 2, 6];
    let mut b = a.clone();
    b.data_mut()[0] += 3.0; // token 0 is hidden
    assert_eq!(m.infer_z(&a, &known, &[4]).unwrap(), m.infer_z(&b, &known, &[4]).unwrap());
    b.data_mut()[3] += 3.0; // token 1 is visible
    let za = m.infer_z(&a, &known, &[4]).unwrap();
    let zb = m.infer_z(&b, &known, &[4]).unwrap();
    assert!(za.max_abs_diff(&zb) > 1e-6);
    let zc = m.infer_z(&a, &known, &[5]).unwrap();
    assert!(za.max_abs_diff(&zc) > 1e-6);
}

#[test]
fn known_order_is_irrelevant() {
    let m = ParModel::<f64>::new(tiny(), 4).unwrap();
    let a = RngStream::new(3, Purpose::Data).normal_tensor(&[8, 3], 1.0);
    let z1 = m.infer_z(&a, &[0, 3, 7], &[2, 9]).unwrap();
    let z2 = m.infer_z(&a, &[7, 0, 3], &[9, 2]).unwrap();
    assert!(z1.max_abs_diff(&z2) < 1e-12);
}

#[test]
fn batched_backbone_matches_single_samples() {
    use par_core::model::BackboneInput;
    let m = ParModel::<f64>::new(tiny(), 8).unwrap();
    let mut rng = RngStream::new(4, Purpose::Data);
    let xa = rng.normal_tensor(&[8, 3], 1.0);
    let xb = rng.normal_tensor(&[8, 3], 1.0);
    let (ka, kb) = (vec![0, 1, 2], vec![5]);
    let tape = Tape::new();
    let p = m.params.bind(&tape, false);
    let z = m
        .backbone(
            &p,
            &[
                BackboneInput { tokens: &xa, known: &ka, prompt: &[1] },
                BackboneInput { tokens: &xb, known: &kb, prompt: &[] },
            ],
        )
        .unwrap()
        .value();
    let za = m.infer_z(&xa, &ka, &[1]).unwrap();
    let zb = m.infer_z(&xb, &kb, &[]).unwrap();
    let (top, bottom) = z.data().split_at(64);
    assert!(za.data().iter().zip(top).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(zb.data().iter().zip(bottom).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn positional_encoding_rows_are_distinct() {
    let pe = sincos_2d::<f64>(4, 8, 16).unwrap();
    for i in 0..32 {
        for j in 0..i {
            let d: f64 = (0..16).map(|k| (pe.data()[i * 16 + k] - pe.data()[j * 16 + k]).abs()).sum();
            assert!(d > 1e-3, "{i} {j}");
        }
    }
}

proptest! {
    #[test]
    fn patchify_inverts(c in 1usize..4, ht in 1usize..4, p in 1usize..4, seed in 0u64..100) {
        let lat = RngStream::new(seed, Purpose::Data).normal_tensor(&[c, ht * p, 2 * ht * p], 1.0);
        let tok: Tensor<f64> = patchify(&lat, p).unwrap();
        prop_assert_eq!(tok.shape(), &[2 * ht * ht, c * p * p]);
        prop_assert_eq!(unpatchify(&tok, c, ht, 2 * ht, p).unwrap(), lat);
    }
}
