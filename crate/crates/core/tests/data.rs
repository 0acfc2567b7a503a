use gradsep_core::data::{
    decode, encode, read_embeddings, source_samples, split_protocol, synth_generate,
    write_embeddings, EmbeddingRecord, Manifest, SynthConfig, UNLABELED,
};
use proptest::collection::vec;
use proptest::prelude::*;

fn record_strategy(dim: usize) -> impl Strategy<Value = EmbeddingRecord> {
    (
        "[a-zA-Z0-9_é→ -]{0,24}",
        prop_oneof![Just(UNLABELED), 0i32..1000],
        "[a-z]{0,8}",
        vec(any::<f32>(), dim),
    )
        .prop_map(|(id, label, domain, feature)| EmbeddingRecord {
            id,
            label,
            domain,
            feature,
        })
}

fn file_strategy() -> impl Strategy<Value = (usize, Vec<EmbeddingRecord>)> {
    (0usize..12).prop_flat_map(|dim| (Just(dim), vec(record_strategy(dim), 0..20)))
}

fn bits(records: &[EmbeddingRecord]) -> Vec<(String, i32, String, Vec<u32>)> {
    records
        .iter()
        .map(|r| {
            (
                r.id.clone(),
                r.label,
                r.domain.clone(),
                r.feature.iter().map(|x| x.to_bits()).collect(),
            )
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn container_round_trips_bit_exactly((dim, records) in file_strategy()) {
        let bytes = encode(&records, dim).unwrap();
        let file = decode(&bytes).unwrap();
        prop_assert_eq!(file.feature_dim, dim);
        prop_assert_eq!(bits(&file.records), bits(&records));
    }

    #[test]
    fn truncated_containers_are_rejected((dim, records) in file_strategy(), cut in 1usize..64) {
        let bytes = encode(&records, dim).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode(&bytes[..keep]).is_err());
    }
}

#[test]
fn write_then_read_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.osde");
    let records = vec![EmbeddingRecord {
        id: "a".into(),
        label: 3,
        domain: "Art".into(),
        feature: vec![0.5, -0.25, 1.0],
    }];
    write_embeddings(&path, &records, 3).unwrap();
    assert_eq!(read_embeddings(&path).unwrap().records, records);
    assert!(encode(&records, 4).is_err());
}

#[test]
fn manifest_round_trips_and_split_is_alphabetical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("classes.toml");
    let m = Manifest {
        classes: vec![
            "zebra".into(),
            "Apple".into(),
            "mango".into(),
            "banana".into(),
        ],
        num_known: 2,
    };
    m.save(&path).unwrap();
    assert_eq!(Manifest::load(&path).unwrap(), m);
    let p = m.protocol().unwrap();
    assert_eq!(p.known_class_indices, vec![1, 3]);
    assert_eq!(p.classifier_index(3), Some(1));
    assert_eq!(p.classifier_index(0), None);
    assert!(split_protocol(&m.classes, 0).is_err());
    assert!(split_protocol(&m.classes, 5).is_err());
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn synthetic_source_is_nearly_separable_by_nearest_center() {
    for seed in 0..3 {
        let cfg = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let data = synth_generate(&cfg).unwrap();
        let centers: Vec<Vec<f64>> = data.text.iter().map(|r| r.feature_f64()).collect();
        let correct = data
            .source
            .iter()
            .filter(|r| {
                let x = r.feature_f64();
                let best = (0..centers.len())
                    .max_by(|&a, &b| dot(&x, &centers[a]).total_cmp(&dot(&x, &centers[b])))
                    .unwrap();
                best as i32 == r.label
            })
            .count();
        let acc = correct as f64 / data.source.len() as f64;
        assert!(acc >= 0.99, "seed {seed}: nearest-center accuracy {acc}");
    }
}

#[test]
fn zero_shift_target_matches_source_distribution() {
    let cfg = SynthConfig {
        covariate_shift_angle: 0.0,
        samples_per_class: 400,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg).unwrap();
    let dim = cfg.feature_dim;
    for k in 0..cfg.num_known_classes as i32 {
        let class = |rs: &[EmbeddingRecord]| -> Vec<Vec<f64>> {
            rs.iter()
                .filter(|r| r.label == k)
                .map(|r| r.feature_f64())
                .collect()
        };
        let (s, t) = (class(&data.source), class(&data.target));
        let n = s.len() as f64;
        let mean = |xs: &[Vec<f64>]| -> Vec<f64> {
            (0..dim)
                .map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / xs.len() as f64)
                .collect()
        };
        let (ms, mt) = (mean(&s), mean(&t));
        // Total variance of one draw, pooled over both domains.
        let var: f64 = s
            .iter()
            .map(|x| x.iter().zip(&ms).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .chain(
                t.iter()
                    .map(|x| x.iter().zip(&mt).map(|(a, b)| (a - b).powi(2)).sum::<f64>()),
            )
            .sum::<f64>()
            / (2.0 * n - 2.0);
        let gap = ms
            .iter()
            .zip(&mt)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        // E|gap|^2 = 2 var / n for two independent means.
        let bound = 3.0 * (2.0 * var / n).sqrt();
        assert!(gap <= bound, "class {k}: gap {gap} > {bound}");
    }
}

#[test]
fn unknown_classes_never_reach_the_source_set() {
    let cfg = SynthConfig::default();
    let data = synth_generate(&cfg).unwrap();
    let protocol = data.manifest.protocol().unwrap();
    let samples = source_samples(&data.source, &protocol).unwrap();
    assert_eq!(samples.len(), data.source.len());
    assert!(samples
        .iter()
        .all(|s| s.class.is_some_and(|c| c < cfg.num_known_classes)));
    assert_eq!(protocol.num_unknown(), cfg.num_unknown_classes);
}
