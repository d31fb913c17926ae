use std::collections::HashSet;

use mca_fewshot::episodes::{
    default_splits, encode_fsds, generate_synthetic_dataset, load_dataset, parse_fsds,
    sample_episode, sidecar_path, write_dataset, Split, SyntheticSpec,
};
use mca_fewshot::rng;
use rand::Rng;

#[test]
fn ten_thousand_episodes_respect_counts_disjointness_and_splits() {
    let ds = generate_synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let mut r = rng::stream(31, &[]);
    let splits = [Split::MetaTrain, Split::MetaVal, Split::MetaTest];
    for i in 0..10_000 {
        let split = splits[i % 3];
        let (ways, shots, queries) = (
            r.random_range(2..6),
            r.random_range(1..4),
            r.random_range(1..8),
        );
        let ep = sample_episode(&ds, split, ways, shots, queries, &mut r).unwrap();
        let support: HashSet<_> = ep.support_ids.iter().collect();
        let query: HashSet<_> = ep.query_ids.iter().collect();
        assert_eq!(support.len(), ways * shots);
        assert_eq!(query.len(), ways * queries);
        assert!(support.is_disjoint(&query));
        for c in 0..ways {
            assert_eq!(ep.support_y.iter().filter(|&&y| y == c).count(), shots);
            assert_eq!(ep.query_y.iter().filter(|&&y| y == c).count(), queries);
        }
        for &(class, _) in ep.support_ids.iter().chain(&ep.query_ids) {
            assert_eq!(ds.split_of(class), split);
        }
        for (row, &(class, ex)) in ep.support_ids.iter().enumerate() {
            assert_eq!(ep.support_x.row(row), ds.examples(class)[ex].as_slice());
            assert_eq!(ep.class_map[ep.support_y[row]], class);
        }
    }
}

fn random_fsds(seed: u64, classes: u32, per_class: u32, h: u32, w: u32, ch: u32) -> Vec<u8> {
    let mut r = rng::stream(seed, &[]);
    let mut out = b"FSDS".to_vec();
    for v in [1, classes, per_class, h, w, ch] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend((0..classes * per_class * h * w * ch).map(|_| r.random::<u8>()));
    out
}

#[test]
fn fsds_bytes_round_trip_exactly() {
    for seed in 0..10 {
        let bytes = random_fsds(seed, 5 + seed as u32, 3, 4, 3, 1 + (seed % 3) as u32);
        let ds = parse_fsds(&bytes).unwrap();
        assert_eq!(encode_fsds(&ds).unwrap(), bytes);
        assert_eq!(ds.splits(), default_splits(ds.num_classes()).as_slice());
    }
}

#[test]
fn fsds_files_round_trip_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.fsds");
    let bytes = random_fsds(40, 6, 4, 2, 2, 1);
    let ds = parse_fsds(&bytes).unwrap();

    write_dataset(&ds, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(!sidecar_path(&path).exists());
    assert_eq!(load_dataset(&path).unwrap(), ds);

    let custom = vec![
        Split::MetaTest,
        Split::MetaTrain,
        Split::MetaTrain,
        Split::MetaVal,
        Split::MetaTrain,
        Split::MetaTest,
    ];
    let ds2 = ds.clone().with_splits(custom.clone()).unwrap();
    write_dataset(&ds2, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.splits(), custom.as_slice());
    assert_eq!(back, ds2);

    std::fs::write(
        sidecar_path(&path),
        r#"{"meta_train": [0, 1, 2, 3], "meta_val": [4], "meta_test": [5]}"#,
    )
    .unwrap();
    assert_eq!(load_dataset(&path).unwrap().split_of(4), Split::MetaVal);
}
