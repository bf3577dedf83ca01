use nodekd::autodiff::Tensor;
use nodekd::data::{
    augment, batch_iter, gen_synthetic, load_csv, load_idx, normalize, save_csv, save_idx, AugmentConfig, Dataset,
    NormStats, Split, SyntheticKind,
};
use nodekd::{rng, Error};
use proptest::prelude::*;

fn dataset(shape: [usize; 3], pixels: Vec<f64>, labels: Vec<usize>) -> Dataset {
    let n = labels.len();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let images = Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], pixels);
    Dataset::new("prop", Split::Train, images, labels, classes).unwrap()
}

fn arb_dataset(quantized: bool) -> impl Strategy<Value = Dataset> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..12).prop_flat_map(move |(c, h, w, n)| {
        let px = if quantized {
            prop::collection::vec((0u8..=255).prop_map(|b| b as f64 / 255.0), n * c * h * w).boxed()
        } else {
            prop::collection::vec(0.0f64..=1.0, n * c * h * w).boxed()
        };
        (px, prop::collection::vec(0usize..10, n)).prop_map(move |(p, l)| dataset([c, h, w], p, l))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_exact(ds in arb_dataset(false)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        save_csv(&ds, &p).unwrap();
        let back = load_csv(&p, ds.image_shape()).unwrap();
        prop_assert_eq!(back.images, ds.images);
        prop_assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn idx_round_trip_is_exact_for_byte_pixels(ds in arb_dataset(true)) {
        prop_assume!(ds.image_shape()[0] == 1);
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        save_idx(&ds, &pi, &pl).unwrap();
        let back = load_idx(&pi, &pl).unwrap();
        prop_assert_eq!(back.images, ds.images);
        prop_assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn batches_partition_the_indices(n in 1usize..300, bs in 1usize..64, seed in any::<u64>()) {
        let batches = batch_iter(n, bs, Some(seed));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|b| b.len() <= bs));
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn augmentation_keeps_shape_and_range(ds in arb_dataset(false), pad in 0usize..5, seed in any::<u64>()) {
        let cfg = AugmentConfig { crop: true, pad, flip: true, flip_prob: 0.5 };
        let out = augment(&ds.images, &cfg, &mut rng::stream(seed, "augment", 0));
        prop_assert_eq!(out.shape(), ds.images.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn unshuffled_batches_keep_order() {
    assert_eq!(batch_iter(10, 3, None), vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8], vec![9]]);
}

#[test]
fn forced_double_flip_is_identity() {
    let img = Tensor::from_vec(&[2, 1, 2, 4], (0..16).map(|i| i as f64 / 16.0).collect());
    let flip = AugmentConfig { crop: false, pad: 0, flip: true, flip_prob: 1.0 };
    let once = augment(&img, &flip, &mut rng::stream(0, "a", 0));
    assert_ne!(once, img);
    assert_eq!(augment(&once, &flip, &mut rng::stream(0, "a", 1)), img);
    assert_eq!(augment(&img, &AugmentConfig::none(), &mut rng::stream(0, "a", 0)), img);
}

#[test]
fn normalization_uses_train_statistics() {
    let train = gen_synthetic(SyntheticKind::Spirals, 500, 0.1, 1).unwrap();
    let test = gen_synthetic(SyntheticKind::Spirals, 200, 0.3, 2).unwrap();
    let stats = NormStats::from_dataset(&train).unwrap();
    let n = normalize(&train, &stats).unwrap();
    let mean = n.images.sum() / n.images.numel() as f64;
    assert!(mean.abs() < 1e-10);
    let t = normalize(&test, &stats).unwrap();
    for (a, b) in t.images.data().iter().zip(test.images.data()) {
        assert_eq!(*a, (b - stats.mean[0]) / stats.std[0]);
    }
}

#[test]
fn loader_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.csv");
    std::fs::write(&p, "").unwrap();
    assert!(matches!(load_csv(&p, [1, 1, 2]), Err(Error::EmptyDataset)));
    std::fs::write(&p, "1,0.5\n").unwrap();
    assert!(matches!(load_csv(&p, [1, 1, 2]), Err(Error::Parse { row: 1, .. })));
    std::fs::write(&p, "3,0,0.5,1,0.25\n").unwrap();
    let ds = load_csv(&p, [1, 2, 2]).unwrap();
    assert_eq!(ds.labels, vec![3]);
    assert_eq!(ds.images.data(), &[0.0, 0.5, 1.0, 0.25]);

    let (pi, pl) = (dir.path().join("i"), dir.path().join("l"));
    let ds = gen_synthetic(SyntheticKind::Moons, 4, 0.0, 1).unwrap();
    save_idx(&ds, &pi, &pl).unwrap();
    let mut bytes = std::fs::read(&pi).unwrap();
    bytes[3] = 0x01;
    std::fs::write(&pi, &bytes).unwrap();
    assert!(matches!(load_idx(&pi, &pl), Err(Error::IdxMagic { .. })));
}
