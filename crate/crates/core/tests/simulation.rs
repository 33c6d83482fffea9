use rcssfl::aggregate::{fedavg, AggregationRule};
use rcssfl::attack::{AttackConfig, AttackKind};
use rcssfl::model::{self, ParamVector};
use rcssfl::quant;
use rcssfl::rng::{self, tag};
use rcssfl::selection::SelectionMode;
use rcssfl::sim::{self, csv_string, AlphaMode, DatasetSource, SimConfig, Simulation};
use rcssfl::sstrain::{self, TrainParams};

fn small() -> SimConfig {
    SimConfig {
        clients: 8,
        participation: 0.5,
        rounds: 4,
        local_epochs: 2,
        learning_rate: 0.02,
        batch_size: 16,
        server_samples: 120,
        quant_bits: None,
        aggregation: AggregationRule::FedAvg,
        selection: SelectionMode::Off,
        dataset: DatasetSource::Synthetic {
            classes: 4,
            per_class: 80,
            features: 8,
            separation: 3.0,
        },
        seed: 31,
        ..SimConfig::default()
    }
}

#[test]
fn plain_fedavg_matches_a_hand_rolled_loop() {
    let cfg = SimConfig { rounds: 3, ..small() };
    let mut sim = Simulation::new(cfg.clone()).unwrap();
    sim.run_with(|_| Ok(())).unwrap();

    let (data, _) = sim::prepare_data(&cfg).unwrap();
    let layers = model::default_layers(data.feature_dim, data.num_classes);
    let mut omega = ParamVector::init(&layers, &mut rng::stream(cfg.seed, &[tag::INIT]));
    let params = TrainParams {
        epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
    };
    for t in 1..=3u64 {
        let trained = sstrain::server_train(
            &omega,
            &data.server_set,
            &params,
            data.layout,
            &mut rng::stream(cfg.seed, &[tag::SERVER, t]),
        )
        .unwrap();
        let picked = sim::sample_participants(
            cfg.clients,
            cfg.participants_per_round(),
            &mut rng::stream(cfg.seed, &[tag::SAMPLING, t]),
        );
        let updates: Vec<ParamVector> = picked
            .iter()
            .map(|&c| {
                sstrain::client_train(
                    &trained,
                    &data.shards[c].samples,
                    &params,
                    cfg.lambda,
                    data.layout,
                    &mut rng::stream(cfg.seed, &[tag::CLIENT, t, c as u64]),
                )
                .unwrap()
                .update
            })
            .collect();
        omega = fedavg(&trained, &updates).unwrap();
    }
    assert_eq!(sim.model(), &omega);
}

#[test]
fn same_seed_same_bytes() {
    let cfg = SimConfig {
        quant_bits: Some(8),
        alpha: AlphaMode::Auto,
        aggregation: AggregationRule::gma(),
        selection: SelectionMode::Both,
        attack: AttackConfig {
            kind: AttackKind::Gaussian { variance: 10.0 },
            malicious: 2,
        },
        ..small()
    };
    let a = sim::run(cfg.clone()).unwrap();
    let b = sim::run(cfg.clone()).unwrap();
    assert_eq!(csv_string(&a), csv_string(&b));
    let c = sim::run(SimConfig { seed: 32, ..cfg }).unwrap();
    assert_ne!(csv_string(&a), csv_string(&c));
}

#[test]
fn zero_rounds_emit_only_the_header() {
    let metrics = sim::run(SimConfig { rounds: 0, ..small() }).unwrap();
    assert!(metrics.is_empty());
    assert_eq!(csv_string(&metrics).lines().count(), 1);
}

#[test]
fn uplink_bytes_follow_the_bit_width() {
    let d = model::param_count(&model::default_layers(8, 4));
    for bits in [None, Some(2), Some(4), Some(8), Some(16)] {
        let metrics = sim::run(SimConfig { quant_bits: bits, ..small() }).unwrap();
        let per_client = quant::bytes_for(d, bits.map_or(32, u32::from)) as u64;
        for m in &metrics {
            assert_eq!(m.bytes_up, per_client * m.participants.len() as u64, "{bits:?}");
            assert_eq!(m.bytes_down, quant::bytes_for(d, 32) as u64 * m.participants.len() as u64);
        }
    }
}

#[test]
fn every_participant_is_accounted_for() {
    let cfg = SimConfig {
        rounds: 6,
        aggregation: AggregationRule::gma(),
        selection: SelectionMode::Both,
        attack: AttackConfig {
            kind: AttackKind::Gaussian { variance: 10.0 },
            malicious: 3,
        },
        ..small()
    };
    for m in sim::run(cfg).unwrap() {
        assert_eq!(m.participants.len(), 4);
        let scored: Vec<usize> = m.clients.iter().map(|c| c.client).collect();
        assert_eq!(scored, m.participants);
        assert!(!m.selected.is_empty());
        assert!(m.selected.iter().all(|c| m.participants.contains(c)));
        let bad = m.clients.iter().filter(|c| c.admitted && c.malicious).count();
        assert_eq!(bad, m.n_malicious_selected);
        assert!(m.clients.iter().all(|c| c.malicious == (c.client < 3)));
        assert!((0.0..=1.0).contains(&m.accuracy));
    }
}

#[test]
fn non_iid_runs_end_to_end() {
    let cfg = SimConfig {
        distribution: rcssfl::data::DataDistribution::NonIid,
        aggregation: AggregationRule::FedSgd,
        ..small()
    };
    assert_eq!(sim::run(cfg).unwrap().len(), 4);
}

#[test]
fn config_file_and_overrides_agree() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(
        &path,
        "# small run\nclients = 8\nparticipation = 0.5\nrounds = 4\nattack = gaussian\nmalicious = 2\nvariance = 3\n",
    )
    .unwrap();
    let from_file = SimConfig::from_file(&path).unwrap();
    let mut by_hand = SimConfig::default();
    for (k, v) in [
        ("clients", "8"),
        ("participation", "0.5"),
        ("rounds", "4"),
        ("attack", "gaussian"),
        ("malicious", "2"),
        ("variance", "3"),
    ] {
        by_hand.apply(k, v).unwrap();
    }
    assert_eq!(from_file, by_hand);
    assert!(SimConfig { participation: 1.0, ..SimConfig::default() }.validate().is_err());
}

#[cfg(feature = "cli")]
#[test]
fn cli_writes_round_and_selection_logs() {
    use rcssfl::sim::read_csv;
    use std::process::Command;

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let status = Command::new(env!("CARGO_BIN_EXE_rcssfl"))
        .args([
            "--quiet",
            "--selection-log",
            "--clients", "8",
            "--participation", "0.5",
            "--rounds", "3",
            "--local-epochs", "1",
            "--server-samples", "100",
            "--per-class", "60",
            "--features", "8",
            "--classes", "4",
            "--attack", "gaussian",
            "--malicious", "2",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success());
    let rows = read_csv(&out).unwrap();
    assert_eq!(rows.iter().map(|r| r.round).collect::<Vec<_>>(), [1, 2, 3]);
    let sel = std::fs::read_to_string(dir.path().join("m.selection.csv")).unwrap();
    assert_eq!(sel.lines().count(), 1 + 3 * 4);

    let bad = Command::new(env!("CARGO_BIN_EXE_rcssfl"))
        .args(["--quiet", "--participation", "1.5", "--out"])
        .arg(dir.path().join("x.csv"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("participation"));
}
