use super::*;

fn procedural(kind: DatasetKind, seed: u64, count: usize) -> Dataset {
    generate(&GeneratorConfig::procedural(kind), seed, count).unwrap()
}

#[test]
fn anomaly_rate_and_rectangles() {
    let ds = procedural(DatasetKind::AnomalyMnist, 1, 10_000);
    let altered = ds.meta.iter().filter(|m| m.anomaly == Some(true)).count() as f64;
    let n = ds.len() as f64;
    assert!((altered / n - 0.5).abs() < 3.0 * (0.25 / n).sqrt());
    let mut sides = std::collections::BTreeSet::new();
    for (s, m) in ds.samples.iter().zip(&ds.meta) {
        assert_eq!(s.label, m.anomaly.unwrap() as usize);
        match m.rect {
            Some(r) => {
                assert!(r.fits(28, 28));
                sides.insert(r.height);
                sides.insert(r.width);
                let v = s.image.get(r.top, r.left, 0);
                assert!(v >= 100.0 / 255.0 - 1e-6);
                for y in r.top..r.top + r.height {
                    for x in r.left..r.left + r.width {
                        assert_eq!(s.image.get(y, x, 0), v);
                    }
                }
            }
            None => assert_eq!(s.label, 0),
        }
    }
    assert_eq!(sides, (3..=10).collect());
}

#[test]
fn cifar_anomalies_are_solid_colour() {
    let ds = procedural(DatasetKind::AnomalyCifar, 2, 200);
    for (s, m) in ds.samples.iter().zip(&ds.meta) {
        assert_eq!(s.image.shape(), [32, 32, 3]);
        if let Some(r) = m.rect {
            let c: Vec<f32> = (0..3).map(|ch| s.image.get(r.top, r.left, ch)).collect();
            let (y, x) = (r.top + r.height - 1, r.left + r.width - 1);
            assert_eq!(c, (0..3).map(|ch| s.image.get(y, x, ch)).collect::<Vec<_>>());
        }
    }
}

#[test]
fn multidigit_layout() {
    for (digits, small) in [(2, 18), (4, 14)] {
        let ds = procedural(DatasetKind::MultiDigit(digits), 3, 2000);
        let mut counts = [0usize; 10];
        for (s, m) in ds.samples.iter().zip(&ds.meta) {
            assert_eq!(s.image.shape(), [56, 56, 1]);
            let r = m.small_digit.unwrap();
            assert_eq!((r.height, r.width), (small, small));
            assert!(r.fits(56, 56));
            let [cy, cx] = m.small_center.unwrap();
            assert!((cy - (r.top as f64 + small as f64 / 2.0)).abs() < 1e-12);
            assert!(r.contains(cy as usize, cx as usize));
            counts[s.label] += 1;
        }
        let p = 0.1;
        let n = ds.len() as f64;
        for c in counts {
            assert!((c as f64 / n - p).abs() < 3.0 * (p * (1.0 - p) / n).sqrt() + 0.005, "{counts:?}");
        }
    }
    assert!(gen_multidigit(3, 1, 0).is_err());
}

#[test]
fn anchors_are_constant_without_noise() {
    let clean = procedural(DatasetKind::Anchors { noise: false }, 4, 300);
    let noisy = procedural(DatasetKind::Anchors { noise: true }, 4, 300);
    for ((s, m), n) in clean.samples.iter().zip(&clean.meta).zip(&noisy.samples) {
        assert!(s.label < 5);
        assert_eq!(m.anchors.len(), 4);
        for a in &m.anchors {
            for y in a.top..a.top + a.height {
                for x in a.left..a.left + a.width {
                    assert_eq!(s.image.get(y, x, 0), 1.0);
                }
            }
        }
        assert!(n.image.get(20, 0, 0) <= ANCHOR_NOISE_MAX);
    }
    let mean_bg: f32 = noisy.samples.iter().map(|s| s.image.get(20, 0, 0)).sum::<f32>() / 300.0;
    assert!((mean_bg - 0.1).abs() < 0.02);
    let bad = GeneratorConfig {
        anchors: AnchorLayout {
            side: 6,
            corners: vec![(36, 36)],
        },
        ..GeneratorConfig::procedural(DatasetKind::Anchors { noise: false })
    };
    assert!(generate(&bad, 0, 1).is_err());
}

#[test]
fn samples_regenerate_in_isolation() {
    for kind in [
        DatasetKind::AnomalyMnist,
        DatasetKind::AnomalyCifar,
        DatasetKind::MultiDigit(4),
        DatasetKind::Anchors { noise: true },
    ] {
        let config = GeneratorConfig::procedural(kind);
        let ds = generate(&config, 9, 20).unwrap();
        let (s, m) = generate_sample(&config, &BaseImages::Procedural, 9, 13).unwrap();
        assert_eq!(s, ds.samples[13]);
        assert_eq!(m, ds.meta[13]);
    }
}

#[test]
fn save_load_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = procedural(DatasetKind::MultiDigit(2), 5, 100);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    save_dataset(&ds, &a).unwrap();
    save_dataset(&procedural(DatasetKind::MultiDigit(2), 5, 100), &b).unwrap();
    let back = load_dataset(&a).unwrap();
    assert_eq!(back.samples, ds.samples);
    assert_eq!(back.meta, ds.meta);
    assert_eq!(back.manifest.count, 100);
    for f in ["manifest.json", "images.bin", "labels.bin", "meta.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::metadata(a.join("images.bin")).unwrap().len(), 100 * 56 * 56 * 4);
}

#[test]
fn corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = procedural(DatasetKind::AnomalyMnist, 6, 10);
    save_dataset(&ds, dir.path()).unwrap();
    let path = dir.path().join("images.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[100] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum(_))));

    save_dataset(&ds, dir.path()).unwrap();
    let m = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&m).unwrap().replace("\"count\": 10", "\"count\": 11");
    std::fs::write(&m, text).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum(_))));
    std::fs::write(&m, "{ not json").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum(_))));
}

#[test]
fn dataset_names_round_trip() {
    for name in ["anomaly-mnist", "anomaly-cifar", "multidigit-2", "multidigit-4", "anchors", "anchors-noise"] {
        assert_eq!(DatasetKind::parse(name).unwrap().name(), name);
    }
    assert!(DatasetKind::parse("mnist").is_none());
}
