use std::path::Path;

use flood::config::{ExperimentConfig, GenDataSpec, Method, PartitionSpec};
use flood::data::{gen_synthetic, load_csv, write_csv, Dataset, SyntheticSpec};
use flood::metrics::{format_metrics, parse_metrics, MetricsRecord, METRICS_HEADER};
use flood::model::{forward, predict, sgd_step, weighted_grad, ModelParams, OptimizerState};
use flood::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_record(rng: &mut ChaCha8Rng, round: u32) -> MetricsRecord {
    let wide = |rng: &mut ChaCha8Rng| {
        let mantissa: f64 = rng.random_range(-1.0..1.0);
        mantissa * 10f64.powi(rng.random_range(-300..300))
    };
    MetricsRecord {
        round,
        test_accuracy: rng.random_range(0.0..=1.0),
        test_loss: wide(rng).abs(),
        mean_phi: wide(rng),
        mean_lambda: rng.random_range(0.0..400.0),
        update_norm: wide(rng).abs(),
        wall_ms: rng.random(),
    }
}

#[test]
fn metrics_files_round_trip_through_an_independent_reader() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let records: Vec<MetricsRecord> = (1..=100).map(|r| random_record(&mut rng, r * 3)).collect();
    let text = format_metrics(&records);

    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    for (line, r) in lines.zip(&records) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 7);
        assert_eq!(f[0].parse::<u32>().unwrap(), r.round);
        let reals = [
            r.test_accuracy,
            r.test_loss,
            r.mean_phi,
            r.mean_lambda,
            r.update_norm,
        ];
        for (field, expected) in f[1..6].iter().zip(reals) {
            assert_eq!(field.parse::<f64>().unwrap().to_bits(), expected.to_bits());
            let (mantissa, _) = field.split_once('e').unwrap();
            assert_eq!(mantissa.trim_start_matches('-').len(), 18, "{field}");
        }
        assert_eq!(f[6].parse::<u64>().unwrap(), r.wall_ms);
    }
    assert!(text.ends_with('\n'));
    assert_eq!(parse_metrics(&text, Path::new("m.csv")).unwrap(), records);
}

#[test]
fn metrics_parse_errors_name_the_line() {
    let text = format!("{METRICS_HEADER}\n1,0.5,1,1,1,1,0\n2,zero,1,1,1,1,0\n");
    match parse_metrics(&text, Path::new("m.csv")) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
}

fn config_strategy() -> impl Strategy<Value = ExperimentConfig> {
    (
        proptest::collection::vec(any::<u64>(), 1..4),
        proptest::sample::subsequence(Method::ALL.to_vec(), 1..=6),
        0.01f64..0.99,
        0.0f64..50.0,
        prop_oneof![
            (0.01f64..10.0).prop_map(|beta| PartitionSpec::Dirichlet { beta }),
            (1usize..4).prop_map(|r| PartitionSpec::Pathological {
                classes_per_client: r
            }),
        ],
        (1usize..30, 1u32..200),
        proptest::option::of(0.0f64..10.0),
    )
        .prop_map(|(seeds, methods, q, a, partition, (total, rounds), fixed)| {
            let mut cfg = ExperimentConfig::from_toml_str(
                "[data]\nsource = \"synthetic\"\n",
                Path::new("c"),
                Path::new("."),
            )
            .unwrap();
            cfg.seeds = seeds;
            cfg.methods = methods;
            cfg.flood.q = q;
            cfg.flood.amplification = a;
            cfg.flood.fixed_lambda = fixed;
            cfg.partition = partition;
            cfg.server.total_clients = total.max(4);
            cfg.server.per_round = total.max(4) / 2;
            cfg.server.rounds = rounds;
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn configs_survive_a_toml_round_trip(cfg in config_strategy()) {
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text, Path::new("c"), Path::new(".")).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn csv_round_trip_is_exact() {
    let spec = SyntheticSpec {
        num_classes: 3,
        dim: 4,
        samples_per_class: 25,
        class_center_scale: 1.0,
        noise_sigma: 0.7,
    };
    let data = gen_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_csv(&data, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("f0,f1,f2,f3,label\n"));
    assert_eq!(load_csv(&path).unwrap(), data);
}

#[test]
fn csv_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "f0,f1,label\n0.5,1.5,0\n0.5,x,1\n").unwrap();
    assert!(matches!(load_csv(&path), Err(Error::Parse { line: 3, .. })));
    std::fs::write(&path, "f0,f1,label\n0.5,1.5\n").unwrap();
    assert!(matches!(load_csv(&path), Err(Error::Parse { line: 2, .. })));
    std::fs::write(&path, "f0,f1,label\n0.5,1.5,-1\n").unwrap();
    assert!(matches!(load_csv(&path), Err(Error::Parse { line: 2, .. })));
    std::fs::write(&path, "").unwrap();
    assert!(matches!(load_csv(&path), Err(Error::Input(_))));
    assert!(matches!(
        load_csv(dir.path().join("missing.csv")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn gen_data_spec_parses_with_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.toml");
    std::fs::write(
        &path,
        "num_classes = 3\ndim = 2\nsamples_per_class = 5\nclass_center_scale = 1.0\nnoise_sigma = 0.5\n",
    )
    .unwrap();
    let spec = GenDataSpec::parse(&path).unwrap();
    assert_eq!(spec.seed, 0);
    assert_eq!(spec.synthetic().samples_per_class, 5);
    std::fs::write(&path, "num_classes = 3\ncolour = 1\n").unwrap();
    assert!(GenDataSpec::parse(&path).is_err());
}

fn train_accuracy(data: &Dataset, epochs: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ModelParams::glorot(
        ModelParams::mlp_shapes(data.dim(), &[64], data.num_classes()),
        &mut rng,
    )
    .unwrap();
    let mut state = OptimizerState::new(params.len(), 0.5, 0.9, 0.0, 1.0).unwrap();
    let batch = data.as_batch();
    let ones = vec![1.0; data.len()];
    for _ in 0..epochs {
        let g = weighted_grad(&params, &batch, &ones).unwrap();
        let (next, s) = sgd_step(&params, &g, state).unwrap();
        params = next;
        state = s;
    }
    let predicted = predict(forward(&params, &batch).unwrap().view());
    predicted
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count() as f64
        / data.len() as f64
}

#[test]
fn low_noise_mixture_is_learnable_centrally() {
    let spec = SyntheticSpec {
        num_classes: 8,
        dim: 16,
        samples_per_class: 400,
        class_center_scale: 1.0,
        noise_sigma: 0.3,
    };
    let data = gen_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let acc = train_accuracy(&data, 200);
    assert!(acc >= 0.99, "train accuracy {acc}");
}
