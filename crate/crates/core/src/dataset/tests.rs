use super::augment::{augment_rp, augment_set};
use super::parse::parse_ujiindoorloc;
use super::*;
use proptest::prelude::*;

/// Builds a CSV line in the 529-column layout.
fn csv_row(rssi: &[(usize, i16)], lon: f64, lat: f64, floor: i32, b: i32, s: i32, r: i32) -> String {
    let mut cols = vec![RSSI_NOT_DETECTED.to_string(); NUM_APS];
    for &(i, v) in rssi {
        cols[i] = v.to_string();
    }
    cols.push(lon.to_string());
    cols.push(lat.to_string());
    cols.push(floor.to_string());
    cols.push(b.to_string());
    cols.push(s.to_string());
    cols.push(r.to_string());
    cols.push("7".into()); // user
    cols.push("13".into()); // phone
    cols.push("1371713733".into());
    cols.join(",")
}

fn csv_header() -> String {
    let mut cols: Vec<String> = (1..=NUM_APS).map(|i| format!("WAP{i:03}")).collect();
    for name in [
        "LONGITUDE",
        "LATITUDE",
        "FLOOR",
        "BUILDINGID",
        "SPACEID",
        "RELATIVEPOSITION",
        "USERID",
        "PHONEID",
        "TIMESTAMP",
    ] {
        cols.push(name.into());
    }
    cols.join(",")
}

fn fp(rssi_pairs: &[(usize, f32)], key: RpKey, lon: f64, lat: f64) -> Fingerprint {
    let mut rssi = vec![0.0f32; NUM_APS];
    for &(i, v) in rssi_pairs {
        rssi[i] = v;
    }
    Fingerprint {
        rssi,
        longitude: lon,
        latitude: lat,
        floor: key.1,
        building: key.0,
        space_id: key.2,
        relative_position: key.3,
        timestamp: 0,
    }
}

#[test]
fn parse_counts_rows_and_preserves_sentinel() {
    let text = format!(
        "{}\n{}\n{}\n",
        csv_header(),
        csv_row(&[(0, -97), (3, -55)], -7541.2, 4864921.7, 2, 1, 106, 2),
        csv_row(&[(1, 0)], -7300.8, 4864800.0, 0, 0, 1, 1),
    );
    let records = parse_ujiindoorloc(text.as_bytes()).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].rssi[0], -97);
    assert_eq!(records[0].rssi[1], RSSI_NOT_DETECTED);
    assert_eq!(records[0].rssi[3], -55);
    assert_eq!(records[1].rssi[1], 0);
    assert_eq!(records[0].building, 1);
    assert_eq!(records[0].floor, 2);
}

#[test]
fn parse_rejects_wrong_column_count_with_row_number() {
    let text = format!("{}\n1,2,3\n", csv_header());
    match parse_ujiindoorloc(text.as_bytes()) {
        Err(crate::Error::Data(msg)) => assert!(msg.contains("row 2"), "message: {msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn parse_rejects_non_numeric_rssi() {
    let row = csv_row(&[], 0.0, 0.0, 0, 0, 1, 1).replacen("100", "abc", 1);
    let text = format!("{}\n{}\n", csv_header(), row);
    match parse_ujiindoorloc(text.as_bytes()) {
        Err(crate::Error::Data(msg)) => assert!(msg.contains("non-numeric"), "message: {msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn parse_empty_file_yields_empty_sequence() {
    let records = parse_ujiindoorloc(csv_header().as_bytes()).unwrap();
    assert!(records.is_empty());
    let records = parse_ujiindoorloc(&b""[..]).unwrap();
    assert!(records.is_empty());
}

#[test]
fn normalize_rssi_examples() {
    assert_eq!(normalize_rssi(-100), 0.0);
    assert_eq!(normalize_rssi(0), 1.0);
    assert_eq!(normalize_rssi(-50), 0.5);
    assert_eq!(normalize_rssi(RSSI_NOT_DETECTED), 0.0);
    assert_eq!(normalize_rssi(-104), 0.0); // clamped
}

proptest! {
    #[test]
    fn normalize_is_monotone_and_unit_range(a in -104i16..=0, b in -104i16..=0) {
        let (na, nb) = (normalize_rssi(a), normalize_rssi(b));
        prop_assert!((0.0..=1.0).contains(&na));
        if a <= b {
            prop_assert!(na <= nb);
        }
    }

    #[test]
    fn image_round_trip_is_exact(vals in proptest::collection::vec(0.0f32..=1.0, NUM_APS)) {
        let img = to_image(&vals).unwrap();
        prop_assert!(img.pixels[NUM_APS..].iter().all(|&p| p == 0.0));
        prop_assert_eq!(from_image(&img), vals);
    }
}

#[test]
fn image_placement_is_row_major() {
    let mut rssi = vec![0.0f32; NUM_APS];
    rssi[0] = 0.9;
    let img = to_image(&rssi).unwrap();
    assert_eq!(img.pixels[0], 0.9); // (row 0, col 0)

    let mut rssi = vec![0.0f32; NUM_APS];
    rssi[25] = 0.7;
    let img = to_image(&rssi).unwrap();
    assert_eq!(img.pixels[IMAGE_SIDE + 1], 0.7); // (row 1, col 1)
}

#[test]
fn catalog_single_record_and_centroid_mean() {
    let a = fp(&[(0, 0.5)], (1, 2, 3, 4), 0.0, 0.0);
    let catalog = RpCatalog::build(&[a.clone()]);
    assert_eq!(catalog.len(), 1);
    let e = catalog.entry(0).unwrap();
    assert_eq!(e.longitude, 0.0);
    assert_eq!(e.latitude, 0.0);

    let b = fp(&[(0, 0.6)], (1, 2, 3, 4), 2.0, 2.0);
    let catalog = RpCatalog::build(&[a, b]);
    assert_eq!(catalog.len(), 1);
    let e = catalog.entry(0).unwrap();
    assert_eq!(e.longitude, 1.0);
    assert_eq!(e.latitude, 1.0);
}

#[test]
fn catalog_is_a_bijection() {
    let mut records = Vec::new();
    for b in 0..3 {
        for f in 0..4 {
            for s in 0..5 {
                records.push(fp(&[], (b, f, s, 1), b as f64, f as f64));
            }
        }
    }
    let catalog = RpCatalog::build(&records);
    assert_eq!(catalog.len(), 60);
    for c in 0..catalog.len() {
        let key = catalog.entry(c).unwrap().key;
        assert_eq!(catalog.class_of(key), Some(c));
    }
}

#[test]
fn catalog_csv_round_trip() {
    let records =
        vec![fp(&[], (0, 1, 101, 2), -7541.26, 4864921.76), fp(&[], (2, 3, 5, 1), -7300.1, 4864800.5)];
    let catalog = RpCatalog::build(&records);
    let csv = catalog.to_csv();
    let back = RpCatalog::from_csv(&csv).unwrap();
    assert_eq!(back.len(), catalog.len());
    assert_eq!(back.content_hash(), catalog.content_hash());
}

#[test]
fn split_is_80_20_and_deterministic() {
    // 10 records of one class -> 8/2.
    let records: Vec<Fingerprint> =
        (0..10).map(|i| fp(&[], (0, 0, 1, 1), i as f64, 0.0)).collect();
    let s = split_train_val(&records, 7);
    assert_eq!(s.train.len(), 8);
    assert_eq!(s.validation.len(), 2);

    let s2 = split_train_val(&records, 7);
    assert_eq!(s.train, s2.train);
    assert_eq!(s.validation, s2.validation);

    let s3 = split_train_val(&records, 8);
    assert!(s3.train.len() == 8);
}

#[test]
fn split_total_is_exact_with_mixed_class_sizes() {
    // Class sizes that do not divide evenly: global count must still be
    // round(0.8 * n), with no overlap.
    let mut records = Vec::new();
    for (class, count) in [(0, 7), (1, 13), (2, 3), (3, 29), (4, 4), (5, 111)].iter() {
        for i in 0..*count {
            records.push(fp(&[], (0, 0, *class, 1), i as f64, 0.0));
        }
    }
    let n = records.len();
    let s = split_train_val(&records, 42);
    assert_eq!(s.train.len(), (0.8 * n as f64).round() as usize);
    assert_eq!(s.train.len() + s.validation.len(), n);
    let mut all: Vec<usize> = s.train.iter().chain(&s.validation).copied().collect();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), n, "train and validation must not overlap");
}

#[test]
fn augment_bounds_follow_mean_and_deviation() {
    // AP 0 observed as {0.5, 0.7}: m=0.6, d=0.1, samples in [0.5, 0.7].
    let a = fp(&[(0, 0.5), (1, 0.3)], (0, 0, 1, 1), 0.0, 0.0);
    let b = fp(&[(0, 0.7), (1, 0.3)], (0, 0, 1, 1), 0.0, 0.0);
    let samples = [&a, &b];
    let out = augment_rp(&samples, 200, 9, 0).unwrap();
    assert_eq!(out.len(), 200);
    for s in &out {
        assert!(
            (0.5..=0.7).contains(&s.rssi[0]),
            "value {} outside [0.5, 0.7]",
            s.rssi[0]
        );
        // AP 1 identical in all samples: d=0, synthetic value is the constant.
        assert_eq!(s.rssi[1], 0.3);
        // APs zero everywhere stay exactly zero.
        assert!(s.rssi[2..].iter().all(|&v| v == 0.0));
        assert_eq!(s.rp_key(), (0, 0, 1, 1));
    }
}

#[test]
fn augment_is_deterministic_per_seed() {
    let a = fp(&[(4, 0.2), (7, 0.9)], (1, 1, 1, 1), 0.0, 0.0);
    let b = fp(&[(4, 0.6)], (1, 1, 1, 1), 0.0, 0.0);
    let samples = [&a, &b];
    let x = augment_rp(&samples, 5, 11, 3).unwrap();
    let y = augment_rp(&samples, 5, 11, 3).unwrap();
    for (p, q) in x.iter().zip(&y) {
        assert_eq!(p.rssi, q.rssi);
    }
    let z = augment_rp(&samples, 5, 12, 3).unwrap();
    assert!(x.iter().zip(&z).any(|(p, q)| p.rssi != q.rssi), "different seed should differ");
}

#[test]
fn augment_rejects_empty_sample_set() {
    assert!(matches!(augment_rp(&[], 1, 0, 0), Err(crate::Error::Data(_))));
}

#[test]
fn augment_set_doubles_and_preserves_originals() {
    let mut records = Vec::new();
    for class in 0..4 {
        for i in 0..6 {
            records.push(fp(&[(class, 0.1 + 0.1 * i as f32)], (0, 0, class as i32, 1), 0.0, 0.0));
        }
    }
    let before: Vec<Vec<f32>> = records.iter().map(|r| r.rssi.clone()).collect();
    let synthetic = augment_set(&records, 1, 5).unwrap();
    assert_eq!(synthetic.len(), records.len());
    for (r, b) in records.iter().zip(&before) {
        assert_eq!(&r.rssi, b, "originals must not be mutated");
    }
    // Per-AP bound property across the whole synthetic set.
    use std::collections::BTreeMap;
    let mut by_class: BTreeMap<RpKey, Vec<&Fingerprint>> = BTreeMap::new();
    for r in &records {
        by_class.entry(r.rp_key()).or_default().push(r);
    }
    for s in &synthetic {
        let originals = &by_class[&s.rp_key()];
        for a in 0..NUM_APS {
            let nonzero: Vec<f32> =
                originals.iter().map(|o| o.rssi[a]).filter(|&v| v != 0.0).collect();
            if nonzero.is_empty() {
                assert_eq!(s.rssi[a], 0.0);
            } else {
                let m = nonzero.iter().sum::<f32>() / nonzero.len() as f32;
                let d = nonzero.iter().map(|v| (v - m).abs()).sum::<f32>() / nonzero.len() as f32;
                let lo = (m - d).max(0.0) - 1e-6;
                let hi = (m + d).min(1.0) + 1e-6;
                assert!(
                    s.rssi[a] >= lo && s.rssi[a] <= hi,
                    "AP {a}: {} outside [{lo}, {hi}]",
                    s.rssi[a]
                );
            }
        }
    }
}

#[test]
fn cache_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.bin");
    let cache = super::cache::DatasetCache {
        train_pool: vec![
            fp(&[(0, 0.25), (519, 1.0)], (1, 2, 3, 4), -7541.5, 4864920.25),
            fp(&[(7, 0.125)], (0, 0, 1, 1), 0.5, -0.5),
        ],
        test: vec![fp(&[(2, 0.75)], (2, 1, 1, 2), 1.0, 2.0)],
        train_source_hash: 0xabcdef,
        test_source_hash: 0x123456,
    };
    cache.save(&path).unwrap();
    let back = super::cache::DatasetCache::load(&path).unwrap();
    assert_eq!(back.train_pool.len(), 2);
    assert_eq!(back.test.len(), 1);
    assert_eq!(back.train_source_hash, 0xabcdef);
    for (a, b) in cache.train_pool.iter().zip(&back.train_pool) {
        assert_eq!(a.rssi, b.rssi);
        assert_eq!(a.longitude, b.longitude);
        assert_eq!(a.rp_key(), b.rp_key());
    }

    // Corruption is detected by the hash trailer.
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(super::cache::DatasetCache::load(&path), Err(crate::Error::Format(_))));
}

#[test]
fn sample_set_marks_unseen_tuples() {
    let train = vec![fp(&[(0, 0.5)], (0, 0, 1, 1), 0.0, 0.0)];
    let catalog = RpCatalog::build(&train);
    let test = vec![
        fp(&[(0, 0.4)], (0, 0, 1, 1), 0.0, 0.0),
        fp(&[(0, 0.4)], (9, 9, 9, 9), 1.0, 1.0), // unseen tuple
    ];
    let set = SampleSet::from_fingerprints(&test, &catalog).unwrap();
    assert_eq!(set.labels[0], 0);
    assert_eq!(set.labels[1], u32::MAX);
}
