use proptest::prelude::*;
use r2d_core::evaluation::{compute_ber, count_pixels, BerReport, ImageCounts};
use r2d_core::nn::Tensor;
use r2d_core::rf::{theoretical_rf, ArchSpec, Layer};

fn plane(v: &[f32]) -> Tensor {
    Tensor::from_vec([1, 1, 1, v.len()], v.to_vec())
}

fn maps() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (1usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f32..1.0, n),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f32), n),
        )
    })
}

proptest! {
    #[test]
    fn mean_is_average_of_class_rates((pred, gt) in maps(), tau in 0.0f32..1.0) {
        let (b, _) = compute_ber(&plane(&pred), &plane(&gt), tau).unwrap();
        prop_assert_eq!(b.ber_mean, (b.ber_shadow + b.ber_nonshadow) / 2.0);
        prop_assert!((0.0..=100.0).contains(&b.ber_mean));
    }

    #[test]
    fn complementing_binary_maps_swaps_classes(
        (pred, gt) in maps(),
    ) {
        let bin: Vec<f32> = pred.iter().map(|&p| (p >= 0.5) as u8 as f32).collect();
        let inv = |v: &[f32]| v.iter().map(|&x| 1.0 - x).collect::<Vec<f32>>();
        let (a, _) = compute_ber(&plane(&bin), &plane(&gt), 0.5).unwrap();
        let (b, _) = compute_ber(&plane(&inv(&bin)), &plane(&inv(&gt)), 0.5).unwrap();
        prop_assert_eq!(a.ber_shadow, b.ber_nonshadow);
        prop_assert_eq!(a.ber_nonshadow, b.ber_shadow);
    }

    #[test]
    fn pixel_order_does_not_matter((pred, gt) in maps(), rot in 0usize..200) {
        let k = rot % pred.len();
        let mut p2 = pred.clone();
        let mut g2 = gt.clone();
        p2.rotate_left(k);
        g2.rotate_left(k);
        prop_assert_eq!(
            count_pixels(&pred, &gt, 0.5).unwrap(),
            count_pixels(&p2, &g2, 0.5).unwrap()
        );
    }

    #[test]
    fn raising_threshold_never_adds_positives(
        (pred, gt) in maps(),
        t1 in 0.0f32..1.0,
        dt in 0.0f32..1.0,
    ) {
        let lo = count_pixels(&pred, &gt, t1).unwrap();
        let hi = count_pixels(&pred, &gt, t1 + dt).unwrap();
        prop_assert!(hi.tp <= lo.tp && hi.fp <= lo.fp);
        prop_assert_eq!(hi.total(), lo.total());
    }

    #[test]
    fn micro_pools_counts_across_images(
        images in prop::collection::vec(maps(), 1..6),
    ) {
        let per_image: Vec<ImageCounts> = images
            .iter()
            .enumerate()
            .map(|(i, (p, g))| ImageCounts {
                id: i.to_string(),
                counts: count_pixels(p, g, 0.5).unwrap(),
            })
            .collect();
        let report = BerReport::from_counts(0.5, per_image.clone());
        let (p, g): (Vec<f32>, Vec<f32>) = images
            .iter()
            .flat_map(|(p, g)| p.iter().copied().zip(g.iter().copied()))
            .unzip();
        let (pooled, counts) = compute_ber(&plane(&p), &plane(&g), 0.5).unwrap();
        prop_assert_eq!(report.micro.counts, counts);
        prop_assert_eq!(report.ber_mean(), pooled.ber_mean);
        let macro_mean = per_image.iter().map(|c| c.counts.ber().ber_mean).sum::<f64>()
            / per_image.len() as f64;
        prop_assert!((report.macro_.ber_mean - macro_mean).abs() < 1e-9);
    }

    #[test]
    fn stride_one_stack_grows_linearly(k in 0usize..4, depth in 1usize..8) {
        let k = 2 * k + 1;
        let r = theoretical_rf(&ArchSpec::new(vec![Layer::Conv { k, s: 1 }; depth]));
        prop_assert_eq!(r.extent(), (1 + depth * (k - 1)) as f64);
        prop_assert_eq!(r.jump(), 1.0);
    }

    #[test]
    fn jump_is_the_product_of_strides(
        layers in prop::collection::vec((0usize..3, 1usize..4), 1..6),
    ) {
        let spec = ArchSpec::new(
            layers
                .iter()
                .map(|&(k, s)| Layer::Conv { k: 2 * k + 1, s })
                .collect(),
        );
        let r = theoretical_rf(&spec);
        let prod: usize = layers.iter().map(|&(_, s)| s).product();
        prop_assert_eq!(r.jump(), prod as f64);
        for w in r.layers.windows(2) {
            prop_assert!(w[1].extent >= w[0].extent);
        }
    }

    #[test]
    fn upsample_then_pool_restores_jump(f in 1usize..5, k in 0usize..3) {
        let head = vec![Layer::Conv { k: 2 * k + 1, s: 2 }];
        let mut spec = head.clone();
        spec.push(Layer::Upsample { factor: f as f64 });
        spec.push(Layer::Pool { factor: f });
        let r = theoretical_rf(&ArchSpec::new(spec));
        prop_assert_eq!(r.jump(), theoretical_rf(&ArchSpec::new(head)).jump());
    }
}
