use proptest::prelude::*;
use svsnet::augment::{
    add_gaussian_noise, compose_pipeline, pad_and_crop, pad_crop_with, random_flip, AugmentConfig,
};
use svsnet::rng::stream_rng;
use svsnet::{Image8, Mask, Plane};

/// Every pixel of a 15x15 image carries a distinct nonzero code.
fn coded_pair() -> (Image8, Mask) {
    let img = Plane::from_fn(15, 15, |x, y| (1 + x + 15 * y) as u8);
    let mask = Plane::from_fn(15, 15, |x, y| (x * 7 + y * 3) % 5 == 0);
    (img, mask)
}

fn decode(v: u8) -> Option<(usize, usize)> {
    (v > 0).then(|| ((v as usize - 1) % 15, (v as usize - 1) / 15))
}

#[test]
fn gaussian_sigma_10_statistics() {
    let img = Image8::new(256, 256, 128);
    let out = add_gaussian_noise(&img, 10.0, &mut stream_rng(8, 0));
    let d: Vec<f64> = out.data().iter().map(|&p| f64::from(p) - 128.0).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() <= 0.5, "{mean}");
    assert!((9.0..=11.0).contains(&std), "{std}");
}

#[test]
fn flips_are_involutions_and_compose_to_rotation() {
    let (img, _) = coded_pair();
    assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    assert_eq!(img.flip_vertical().flip_vertical(), img);
    let rot = img.flip_horizontal().flip_vertical();
    assert_eq!(rot.get(14, 14), img.get(0, 0));
}

#[test]
fn zero_pad_full_crop_is_identity() {
    let (img, mask) = coded_pair();
    let (i, m) = pad_crop_with(&img, &mask, 0.0, 0.0, 15, |sx, sy| (sx, sy)).unwrap();
    assert_eq!((i, m), (img, mask));
}

#[test]
fn disabled_pipeline_only_resizes() {
    let (img, mask) = coded_pair();
    let cfg = AugmentConfig::disabled(15);
    let (i, m) = compose_pipeline(&img, &mask, &cfg, &mut stream_rng(3, 0)).unwrap();
    assert_eq!((i, m), (img.clone(), mask.clone()));
    let cfg = AugmentConfig::disabled(30);
    let (i, m) = compose_pipeline(&img, &mask, &cfg, &mut stream_rng(3, 0)).unwrap();
    assert_eq!(i, img.resize_nearest(30, 30));
    assert_eq!(m, mask.resize_nearest(30, 30));
}

proptest! {
    #[test]
    fn geometry_is_shared_by_image_and_mask(seed in any::<u64>(), crop in 10usize..=18) {
        let (img, mask) = coded_pair();
        let cfg = AugmentConfig { brightness: false, noise: false, crop_size: crop, ..AugmentConfig::for_size(crop) };
        let (i, m) = compose_pipeline(&img, &mask, &cfg, &mut stream_rng(seed, 0)).unwrap();
        prop_assert_eq!(i.dims(), (crop, crop));
        for y in 0..crop {
            for x in 0..crop {
                let want = decode(i.get(x, y)).is_some_and(|(sx, sy)| mask.get(sx, sy));
                prop_assert_eq!(m.get(x, y), want);
            }
        }
    }

    #[test]
    fn pipeline_is_a_pure_function_of_seed(seed in any::<u64>()) {
        let img = Plane::from_fn(20, 20, |x, y| ((x * 13 + y * 7) % 256) as u8);
        let mask = img.map(|p| p > 120);
        let cfg = AugmentConfig::for_size(20);
        let a = compose_pipeline(&img, &mask, &cfg, &mut stream_rng(seed, 4)).unwrap();
        let b = compose_pipeline(&img, &mask, &cfg, &mut stream_rng(seed, 4)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn flip_aligns_pairs(seed in any::<u64>()) {
        let (img, mask) = coded_pair();
        let (i, m) = random_flip(&img, &mask, &mut stream_rng(seed, 1)).unwrap();
        for y in 0..15 {
            for x in 0..15 {
                let (sx, sy) = decode(i.get(x, y)).unwrap();
                prop_assert_eq!(m.get(x, y), mask.get(sx, sy));
            }
        }
    }

    #[test]
    fn crop_output_is_always_crop_size(w in 8usize..40, h in 8usize..40, seed in any::<u64>()) {
        let img = Image8::new(w, h, 9);
        let mask = Mask::new(w, h, true);
        let crop = w.min(h);
        let cfg = AugmentConfig::for_size(crop);
        let (i, m) = pad_and_crop(&img, &mask, &cfg, &mut stream_rng(seed, 2)).unwrap();
        prop_assert_eq!(i.dims(), (crop, crop));
        prop_assert_eq!(m.dims(), (crop, crop));
    }
}
