use flowcritic::data::{
    bits_per_dim, dequantize, downsample, image_dataset, nats_per_dim, parse_idx, read_synth, scale_to_unit,
    split_and_augment, synth_ring, write_synth, IdxFile, ImageSet, RingMixture,
};
use flowcritic::rng::RngStream;
use flowcritic::Error;
use proptest::prelude::*;

fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for d in [n, h, w] {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

#[test]
fn idx_image_fixture() {
    let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 10) as u8).collect();
    let bytes = idx_images(2, 3, 4, &pixels);
    match parse_idx(&bytes).unwrap() {
        IdxFile::Images(s) => {
            assert_eq!((s.n, s.height, s.width), (2, 3, 4));
            assert_eq!(s.pixels, pixels);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn idx_label_fixture_and_errors() {
    let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 7, 1, 9];
    assert_eq!(parse_idx(&bytes).unwrap(), IdxFile::Labels(vec![7, 1, 9]));
    assert!(matches!(parse_idx(&[0, 0, 8, 9, 0, 0, 0, 0]), Err(Error::IdxMagic(0x809))));
    let full = idx_images(2, 2, 2, &[1; 8]);
    assert!(matches!(
        parse_idx(&full[..full.len() - 1]),
        Err(Error::IdxTruncated { expected: 24, found: 23 })
    ));
    assert!(matches!(parse_idx(&full[..10]), Err(Error::IdxTruncated { .. })));
    let huge = idx_images(u32::MAX, u32::MAX, u32::MAX, &[]);
    assert!(parse_idx(&huge).is_err());
}

#[test]
fn uniform_density_is_eight_bits_per_dimension() {
    for d in [1, 2, 64, 784] {
        // A uniform density on the unit cube has log p(z1) = 0.
        assert_eq!(bits_per_dim(0.0, d), 8.0);
    }
}

#[test]
fn rescaling_shifts_the_nll_by_d_ln_256() {
    let mut rng = RngStream::new(1, 3);
    let pixels: Vec<u8> = (0..64).map(|i| (i * 4) as u8).collect();
    let z2 = dequantize(&pixels, &mut rng).unwrap();
    let (z1, correction) = scale_to_unit(&z2);
    assert_eq!(correction, -(64.0 * 256f64.ln()));
    assert!(z1.iter().all(|v| (0.0..1.0).contains(v)));
    let nll_z1 = 17.25;
    let nll_z2 = nll_z1 - correction;
    assert_eq!(nll_z2 - nll_z1, 64.0 * 256f64.ln());
}

#[test]
fn nats_per_dim_divides() {
    assert_eq!(nats_per_dim(-6.0, 3), 2.0);
}

proptest! {
    #[test]
    fn dequantization_floors_back(pixels in prop::collection::vec(any::<u8>(), 1..200), seed in any::<u64>()) {
        let z = dequantize(&pixels, &mut RngStream::new(seed, 3)).unwrap();
        for (p, v) in pixels.iter().zip(&z) {
            prop_assert_eq!(v.floor() as u8, *p);
        }
    }

    #[test]
    fn synth_file_round_trips(vals in prop::collection::vec(-1e6f64..1e6, 1..30)) {
        let d = 1 + vals.len() % 3;
        let n = vals.len() / d;
        let vals = &vals[..n * d];
        prop_assume!(n > 0);
        let mut buf = Vec::new();
        write_synth(&mut buf, n, d, vals).unwrap();
        prop_assert_eq!(read_synth(&buf).unwrap(), (n, d, vals.to_vec()));
    }
}

#[test]
fn out_of_range_pixels_are_rejected() {
    let mut rng = RngStream::new(0, 3);
    assert!(matches!(dequantize(&[0i32, 256], &mut rng), Err(Error::PixelRange(256))));
    assert!(matches!(dequantize(&[-1i32], &mut rng), Err(Error::PixelRange(-1))));
}

#[test]
fn splits_are_disjoint_and_flip_only_touches_train() {
    let n = 50;
    let pixels: Vec<u8> = (0..n * 4).map(|i| (i % 251) as u8).collect();
    let set = ImageSet {
        n,
        height: 2,
        width: 2,
        pixels,
    };
    let data = image_dataset(&set);
    let (tr, va, te) = split_and_augment(&data, [0.8, 0.1, 0.1], true, 3).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (80, 5, 5));
    let (tr2, _, _) = split_and_augment(&data, [0.8, 0.1, 0.1], false, 3).unwrap();
    assert_eq!(tr2.len(), 40);
    assert!(matches!(
        split_and_augment(&data, [0.899, 0.1, 0.001], false, 3),
        Err(Error::EmptySplit(_))
    ));
}

#[test]
fn downsample_averages_blocks() {
    let set = ImageSet {
        n: 1,
        height: 4,
        width: 4,
        pixels: vec![
            0, 2, 10, 10, //
            4, 6, 10, 10, //
            100, 100, 1, 2, //
            100, 100, 3, 4,
        ],
    };
    let d = downsample(&set, 2).unwrap();
    assert_eq!(d.pixels, vec![3, 10, 100, 3]);
}

#[test]
fn ring_draws_match_the_oracle_moments() {
    let data = synth_ring(20_000, 8, 2.0, 0.4, 7).unwrap();
    let x = data.all::<f64>(&mut RngStream::new(0, 3));
    let r2: f64 = (0..x.rows()).map(|i| x.row_slice(i).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / x.rows() as f64;
    // E|x|² = r² + 2σ².
    assert!((r2 - (4.0 + 2.0 * 0.16)).abs() < 0.05, "{r2}");
    let ring = RingMixture {
        modes: 8,
        radius: 2.0,
        sigma: 0.4,
    };
    let (cx, cy) = ring.center(0);
    assert!(ring.logpdf(&[cx, cy]) > ring.logpdf(&[0.0, 0.0]));
}
