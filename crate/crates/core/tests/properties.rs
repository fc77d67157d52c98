use bcsam_core::autoencoder::{mmd, ssim, MmdConfig, SsimConfig};
use bcsam_core::dataset::{CellImage, DomainId, UnifiedClass};
use bcsam_core::lora::{adapted_forward, load_adapter, merge_weights, save_adapter, LoraAdapter};
use bcsam_core::segmenter::{postprocess_crop, SegmentationMask, GRAY_FILL, MIN_CROP_SIDE};
use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(-1.0f32..1.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn adapter_case() -> impl Strategy<Value = (Array2<f32>, Array2<f32>, LoraAdapter)> {
    (2usize..12, 2usize..12, 1usize..5, 1usize..6).prop_flat_map(|(c_in, c_out, r, n)| {
        let r = r.min(c_in).min(c_out);
        (matrix(n, c_in), matrix(c_out, c_in), matrix(r, c_in), matrix(c_out, r))
            .prop_map(|(x, w, a, b)| (x, w, LoraAdapter::from_parts("t", a, b).unwrap()))
    })
}

fn image(side: usize) -> CellImage {
    let px = Array3::from_shape_fn((3, side, side), |(c, r, k)| ((c * 13 + r * 5 + k * 3) % 29) as f32 / 29.0);
    CellImage::new("matek19/EOS/p.png", px, DomainId::Matek19, UnifiedClass::new("eosinophil")).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merged_and_factored_forward_agree((x, w, adapter) in adapter_case()) {
        let factored = adapted_forward(x.view(), w.view(), &adapter).unwrap();
        let merged = x.dot(&merge_weights(w.view(), &adapter).unwrap().t());
        for (p, q) in factored.iter().zip(merged.iter()) {
            prop_assert!((p - q).abs() <= 1e-5 * (1.0 + q.abs()), "{p} vs {q}");
        }
    }

    #[test]
    fn adapter_checkpoint_round_trips((_, _, adapter) in adapter_case()) {
        let back = load_adapter(&save_adapter(&adapter)).unwrap();
        prop_assert_eq!(back.a(), adapter.a());
        prop_assert_eq!(back.b(), adapter.b());
    }

    #[test]
    fn crop_is_square_and_covers_the_mask(r0 in 0usize..224, c0 in 0usize..224, h in 1usize..224, w in 1usize..224) {
        let (r1, c1) = ((r0 + h).min(224), (c0 + w).min(224));
        let mask = SegmentationMask::from_fn(224, 224, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c));
        let img = image(224);
        let out = postprocess_crop(&img, &mask).unwrap();
        let side = out.side();
        prop_assert!(!out.mask_empty);
        prop_assert_eq!(side, (r1 - r0).max(c1 - c0).max(MIN_CROP_SIDE));
        // Every masked pixel survives and nothing else does.
        let non_gray = |v: &&f32| **v != GRAY_FILL;
        let kept = out.pixels().iter().filter(non_gray).count();
        let input_kept = img
            .pixels()
            .indexed_iter()
            .filter(|((_, r, c), v)| mask.get(*r, *c) && **v != GRAY_FILL)
            .count();
        prop_assert_eq!(kept, input_kept);
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_identity(seed in 0u64..1000) {
        let a = Array3::from_shape_fn((3, 24, 24), |(c, r, k)| ((seed as usize + c * 7 + r * 11 + k * 17) % 23) as f32 / 23.0);
        let b = Array3::from_shape_fn((3, 24, 24), |(c, r, k)| ((seed as usize * 3 + c + r * 5 + k * 2) % 19) as f32 / 19.0);
        let cfg = SsimConfig::default();
        prop_assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let ab = ssim(&a, &b, &cfg).unwrap();
        prop_assert!((ab - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn mmd_is_nonnegative_and_zero_on_identical_batches(
        a in prop::collection::vec(-3.0f64..3.0, 8 * 5),
        b in prop::collection::vec(-3.0f64..3.0, 6 * 5),
    ) {
        let za = Tensor::from_vec(a, (8, 5), &Device::Cpu).unwrap();
        let zb = Tensor::from_vec(b, (6, 5), &Device::Cpu).unwrap();
        let cfg = MmdConfig::default();
        let value = |x: &Tensor, y: &Tensor| mmd(x, y, &cfg).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(value(&za, &zb) >= -1e-12);
        prop_assert!(value(&za, &za).abs() < 1e-12);
        prop_assert!((value(&za, &zb) - value(&zb, &za)).abs() < 1e-12);
    }
}
