use latentswap::autograd::Tensor;
use latentswap::eval::{fid, id_retrieval, unit, IdentityGallery};
use latentswap::latent::{code_count, merge_codes, split_codes};
use latentswap::pipeline::{load_image, save_image};
use latentswap::transfer::{ftm_forward, FtmParams};
use latentswap::{FaceImage, HierLatent};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new([rows, cols], v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_then_merge_is_identity(log_r in 5u32..11, d in 1usize..6, seed in any::<u64>()) {
        let n = code_count(1 << log_r).unwrap();
        let data = (0..n * d).map(|i| ((i as u64 ^ seed) % 997) as f64 / 97.0).collect();
        let codes = Tensor::new([n, d], data);
        let (low, high) = split_codes(&codes).unwrap();
        prop_assert_eq!(low.shape(), &[4, d][..]);
        prop_assert_eq!(merge_codes(&low, &high).unwrap(), codes);
    }

    #[test]
    fn latent_file_round_trip_is_f32_exact(c in matrix(16, 3), low in matrix(4, 3), high in matrix(4, 3)) {
        let c = Tensor::new([4, 4, 3], c.data().to_vec());
        let latent = HierLatent::new(c, low, high, 32).unwrap();
        let mut buf = Vec::new();
        latent.write_to(&mut buf).unwrap();
        let back = HierLatent::read_from(&mut buf.as_slice()).unwrap();
        for (a, b) in back.codes().unwrap().data().iter().zip(latent.codes().unwrap().data()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn ftm_rows_only_see_their_own_pair(src in matrix(4, 5), tgt in matrix(4, 5), row in 0usize..4, bump in 0.1f64..2.0) {
        let p = FtmParams::init(4, 5, 9);
        let base = ftm_forward(&src, &tgt, &p).unwrap();
        let mut moved = src.clone();
        for v in &mut moved.data_mut()[row * 5..(row + 1) * 5] {
            *v += bump;
        }
        let after = ftm_forward(&moved, &tgt, &p).unwrap();
        for r in (0..4).filter(|&r| r != row) {
            prop_assert_eq!(&base.data()[r * 5..(r + 1) * 5], &after.data()[r * 5..(r + 1) * 5]);
        }
    }

    #[test]
    fn fid_is_symmetric(a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 4..9),
                        b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 4..9)) {
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()), "{} vs {}", ab, ba);
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn retrieval_ignores_probe_order(shift in 0usize..5, noise in prop::collection::vec(-0.2f64..0.2, 15)) {
        let gallery: Vec<(String, Vec<f64>)> = (0..5)
            .map(|i| {
                let v: Vec<f64> = (0..3).map(|k| if k == i % 3 { 1.0 } else { 0.1 * i as f64 }).collect();
                (format!("p{i}"), unit(&v))
            })
            .collect();
        let probes: Vec<(String, Vec<f64>)> = gallery
            .iter()
            .enumerate()
            .map(|(i, (l, v))| {
                let moved: Vec<f64> = v.iter().zip(&noise[i * 3..]).map(|(a, n)| a + n).collect();
                (l.clone(), unit(&moved))
            })
            .collect();
        let g = IdentityGallery::new(gallery).unwrap();
        let mut rotated = probes.clone();
        rotated.rotate_left(shift);
        prop_assert_eq!(id_retrieval(&probes, &g).unwrap(), id_retrieval(&rotated, &g).unwrap());
    }

    #[test]
    fn png_round_trip_is_lossless_on_the_byte_grid(bytes in prop::collection::vec(any::<u8>(), 8 * 8 * 3)) {
        let hwc: Vec<f64> = bytes.iter().map(|&k| k as f64 / 127.5 - 1.0).collect();
        let img = FaceImage::from_hwc(8, &hwc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_image(&img, &path).unwrap();
        prop_assert_eq!(load_image(&path).unwrap(), img);
    }
}
