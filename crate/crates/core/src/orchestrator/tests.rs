use super::*;
use crate::datakit::generate_synthetic;
use crate::nn::{arch, LayerKind, LayerSpec, ModelSpec, Tensor};
use approx::assert_abs_diff_eq;

fn tiny_cfg(strategy: Strategy) -> RunConfig {
    RunConfig {
        strategy,
        rounds: 6,
        rho: 0.34, // round(0.34 * 6) = 2 selection rounds
        gamma: 0.5,
        local_epochs: 2,
        batch_size: 16,
        lr: 0.05,
        num_clients: 4,
        alpha: 0.5,
        epsilon: 1e-8,
        eval_every: 3,
        model: "dense-16".to_string(),
        seeds: Seeds::default(),
        aggregation: AggregationCfg::default(),
        dataset: DatasetSource::Synthetic(SyntheticCfg {
            classes: 4,
            samples_per_class: 60,
            input_shape: vec![8],
            separation: 3.0,
        }),
        output: OutputCfg::default(),
    }
}

fn run_cfg(cfg: &RunConfig, opts: &RunOptions) -> RunOutput {
    let ds = load_dataset(&cfg.dataset, cfg.seeds.data).unwrap();
    let plan = default_plan(cfg, &ds).unwrap();
    run(cfg, &ds, &plan, opts).unwrap()
}

#[test]
fn sampling_respects_join_ratio() {
    let ids = sample_clients(1, 0.1, 100, 7);
    assert_eq!(ids.len(), 10);
    assert!(ids.windows(2).all(|w| w[0] < w[1]));

    let all = sample_clients(3, 1.0, 17, 7);
    assert_eq!(all, (0..17).collect::<Vec<_>>());

    assert_eq!(sample_clients(5, 0.1, 100, 7), sample_clients(5, 0.1, 100, 7));
    assert_ne!(sample_clients(5, 0.1, 100, 7), sample_clients(6, 0.1, 100, 7));
}

fn make_state(id: ClientId, seed: u64) -> ClientState {
    let ds = generate_synthetic(3, 30, &[6], 3.0, 11).unwrap();
    let idx: Vec<u32> = (0..ds.len() as u32).collect();
    let shard = crate::datakit::ClientShard {
        client_id: id,
        train: ds.subset(&idx[..60]),
        test: ds.subset(&idx[60..]),
    };
    let spec = arch::dense_net(&[6], &[8], 3);
    ClientState {
        id,
        shard,
        model: Model::<f32>::build(&spec, 5).unwrap(),
        head_layer: None,
        seed,
    }
}

#[test]
fn client_update_zero_lr_is_a_no_op() {
    let mut state = make_state(0, 99);
    let before = state.model.params().to_vec();
    client_update(&mut state, None, 5, 0.0, 16, 1).unwrap();
    assert_eq!(state.model.params(), before.as_slice());
}

#[test]
fn identical_clients_produce_identical_updates() {
    let mut a = make_state(0, 42);
    let mut b = make_state(1, 42); // same data, same rng seed
    let incoming = a.model.params().to_vec();
    client_update(&mut a, Some(incoming.clone()), 3, 0.05, 16, 2).unwrap();
    client_update(&mut b, Some(incoming), 3, 0.05, 16, 2).unwrap();
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn selection_round_count_follows_rho() {
    let mut cfg = tiny_cfg(Strategy::FedCmd);
    cfg.rounds = 200;
    cfg.rho = 0.1;
    assert_eq!(cfg.selection_rounds(), 20);
}

#[test]
fn fedcmd_report_structure() {
    let cfg = tiny_cfg(Strategy::FedCmd);
    let out = run_cfg(&cfg, &RunOptions::default());
    let report = &out.report;
    assert_eq!(report.rounds.len(), 6);
    assert!(report.selected_layer.is_some());
    let ledger = report.vote_ledger.as_ref().unwrap();
    assert_eq!(ledger.rounds().len(), 2);
    assert_eq!(
        report.rounds.iter().filter(|r| r.phase == Phase::Selection).count(),
        2
    );
    for r in &report.rounds {
        match r.phase {
            Phase::Selection => assert!(r.winner.is_some()),
            Phase::Federated => assert!(r.winner.is_none()),
        }
        assert_eq!(r.sampled.len(), 2);
        assert!(r.mean_train_loss.is_finite());
    }
    // eval cadence: rounds 3 and 6
    for r in &report.rounds {
        assert_eq!(r.mean_accuracy.is_some(), r.round % 3 == 0);
    }
    assert_eq!(report.final_per_client_accuracy.len(), 4);
}

#[test]
fn fedcmd_is_deterministic_across_reruns() {
    let cfg = tiny_cfg(Strategy::FedCmd);
    let a = run_cfg(&cfg, &RunOptions::default());
    let b = run_cfg(&cfg, &RunOptions::default());
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.to_json(), b.report.to_json());
}

#[test]
fn local_only_moves_no_bytes() {
    let cfg = tiny_cfg(Strategy::LocalOnly);
    let out = run_cfg(&cfg, &RunOptions::default());
    for r in &out.report.rounds {
        assert_eq!((r.bytes_up, r.bytes_down), (0, 0));
    }
    assert_eq!(out.report.communication.measured_total_bytes, 0);
    assert_eq!(out.report.communication.forecast.predicted_total_bytes, 0);
}

#[test]
fn fedavg_with_one_client_equals_local_training() {
    let mut fa = tiny_cfg(Strategy::FedAvg);
    fa.num_clients = 1;
    fa.gamma = 1.0;
    let mut lo = fa.clone();
    lo.strategy = Strategy::LocalOnly;
    let a = run_cfg(&fa, &RunOptions::default());
    let b = run_cfg(&lo, &RunOptions::default());
    assert_eq!(
        a.report.final_per_client_accuracy,
        b.report.final_per_client_accuracy
    );
    assert_eq!(a.report.final_mean_accuracy, b.report.final_mean_accuracy);
}

#[test]
fn measured_bytes_match_forecast_for_every_strategy() {
    for strategy in [
        Strategy::FedCmd,
        Strategy::FedAvg,
        Strategy::LocalOnly,
        Strategy::FixedHead,
    ] {
        let mut cfg = tiny_cfg(strategy);
        cfg.rounds = 10;
        cfg.rho = 0.2; // 2 selection rounds for fedcmd
        let out = run_cfg(&cfg, &RunOptions::default());
        let comm = &out.report.communication;
        assert_eq!(
            comm.measured_total_bytes, comm.forecast.predicted_total_bytes,
            "{strategy}: measured vs predicted"
        );
    }
}

#[test]
fn fixed_head_bytes_exclude_the_classifier() {
    let cfg = tiny_cfg(Strategy::FixedHead);
    let out = run_cfg(&cfg, &RunOptions::default());
    // dense-16 on 8 inputs, 4 classes: fc1 = 16*8+16 = 144, classifier = 4*16+4 = 68
    let theta = 144 + 68;
    let head = 68;
    let m = 2;
    for r in &out.report.rounds {
        assert_eq!(r.bytes_up, 4 * m * (theta - head));
        assert_eq!(r.bytes_down, 4 * m * (theta - head));
    }
    assert_eq!(out.report.selected_layer.as_deref(), Some("classifier"));
}

#[test]
fn fedcmd_phase2_upload_sits_below_fedavg_by_head_size() {
    let cfg = tiny_cfg(Strategy::FedCmd);
    let out = run_cfg(&cfg, &RunOptions::default());
    let favg = run_cfg(&tiny_cfg(Strategy::FedAvg), &RunOptions::default());
    let head_params = out.report.communication.forecast.head_params;
    let m = 2u64;
    let fedavg_up = favg.report.rounds[0].bytes_up;
    for r in &out.report.rounds {
        match r.phase {
            Phase::Selection => assert_eq!(r.bytes_up, fedavg_up),
            Phase::Federated => {
                assert_eq!(r.bytes_up, fedavg_up - 4 * head_params * m);
                assert!(r.bytes_up < fedavg_up);
            }
        }
    }
}

#[test]
fn cumulative_bytes_accumulate_round_sums() {
    let cfg = tiny_cfg(Strategy::FedAvg);
    let out = run_cfg(&cfg, &RunOptions::default());
    let cum = cumulative_bytes(&out.report.rounds);
    let mut acc = 0;
    for (r, c) in out.report.rounds.iter().zip(cum) {
        acc += r.bytes_up + r.bytes_down;
        assert_eq!(c, acc);
    }
    assert_eq!(acc, out.report.communication.measured_total_bytes);
}

#[test]
fn identity_similarity_hook_reduces_to_local_training() {
    // with the identity matrix and whole-body weighting every client gets
    // its own body back, so fixed-head degenerates to local-only exactly
    let mut fh = tiny_cfg(Strategy::FixedHead);
    fh.aggregation.split_mode = crate::aggregation::SplitMode::WholeBody;
    let opts = RunOptions {
        force_identity_similarity: true,
        ..RunOptions::default()
    };
    let a = run_cfg(&fh, &opts);
    let b = run_cfg(&tiny_cfg(Strategy::LocalOnly), &RunOptions::default());
    assert_eq!(
        a.report.final_per_client_accuracy,
        b.report.final_per_client_accuracy
    );
}

#[test]
fn phase2_broadcasts_never_carry_the_head() {
    let cfg = tiny_cfg(Strategy::FedCmd);
    let opts = RunOptions {
        record_messages: true,
        ..RunOptions::default()
    };
    let out = run_cfg(&cfg, &opts);
    let l_star = out.report.selected_layer.clone().unwrap();
    let k_p = cfg.selection_rounds();
    let messages = out.messages.unwrap();
    let mut saw_phase2_down = false;
    for msg in &messages {
        if msg.round > k_p && msg.direction == Direction::ServerToClient {
            saw_phase2_down = true;
            assert!(
                !msg.layers.contains(&l_star),
                "round {} broadcast to client {} contains the head",
                msg.round,
                msg.client
            );
        }
    }
    assert!(saw_phase2_down);
}

#[test]
fn all_clients_end_with_the_same_head_layer() {
    let cfg = tiny_cfg(Strategy::FedCmd);
    let ds = load_dataset(&cfg.dataset, cfg.seeds.data).unwrap();
    let plan = default_plan(&cfg, &ds).unwrap();
    let out = run(&cfg, &ds, &plan, &RunOptions::default()).unwrap();
    let l_star = out.report.selected_layer.unwrap();
    assert_eq!(
        out.report.vote_ledger.unwrap().final_choice(),
        Some(l_star.as_str())
    );
}

#[test]
fn unanimous_votes_on_identical_client_data() {
    // four clients holding byte-identical copies of the same 60 samples
    let base = generate_synthetic(3, 20, &[6], 4.0, 5).unwrap();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..4 {
        data.extend_from_slice(base.inputs.data());
        labels.extend_from_slice(&base.labels);
    }
    let mut shape = base.inputs.shape().to_vec();
    shape[0] = 4 * base.len();
    let ds = Dataset::new(Tensor::from_vec(&shape, data), labels, 3).unwrap();
    let plan = PartitionPlan {
        alpha: 1.0,
        num_clients: 4,
        seed: 0,
        assignment: (0..4)
            .map(|c| ((c * 60) as u32..((c + 1) * 60) as u32).collect())
            .collect(),
    };
    let mut cfg = tiny_cfg(Strategy::FedCmd);
    cfg.rounds = 9;
    cfg.rho = 0.34; // 3 selection rounds
    cfg.gamma = 1.0;
    // zero step size keeps every client's model equal to the broadcast,
    // so the vote is a pure function of the (identical) data
    cfg.lr = 0.0;
    cfg.dataset = DatasetSource::Synthetic(SyntheticCfg {
        classes: 3,
        samples_per_class: 80,
        input_shape: vec![6],
        separation: 4.0,
    });
    let out = run(&cfg, &ds, &plan, &RunOptions::default()).unwrap();
    for round in out.report.vote_ledger.unwrap().rounds() {
        let votes: Vec<&String> = round.votes.values().collect();
        assert_eq!(votes.len(), 4);
        assert!(
            votes.windows(2).all(|w| w[0] == w[1]),
            "round {} votes not unanimous: {votes:?}",
            round.round
        );
    }
}

#[test]
fn untrained_model_sits_at_chance_level() {
    let ds = generate_synthetic(10, 30, &[8], 0.1, 3).unwrap();
    let idx: Vec<u32> = (0..ds.len() as u32).collect();
    let spec = arch::dense_net(&[8], &[16], 10);
    let mut acc_sum = 0.0;
    for seed in 0..20 {
        let state = ClientState {
            id: 0,
            shard: crate::datakit::ClientShard {
                client_id: 0,
                train: ds.subset(&idx),
                test: ds.subset(&idx),
            },
            model: Model::<f32>::build(&spec, seed).unwrap(),
            head_layer: None,
            seed,
        };
        acc_sum += evaluate_all(&[state], None).unwrap().mean;
    }
    let mean = acc_sum / 20.0;
    assert!(
        (0.05..=0.15).contains(&mean),
        "untrained accuracy {mean} not at chance level"
    );
}

#[test]
fn perfect_memorizer_scores_one() {
    let spec = ModelSpec {
        input_shape: vec![1],
        layers: vec![LayerSpec::new(
            "classifier",
            LayerKind::Dense { out_features: 2 },
        )],
    };
    let mut model = Model::<f32>::build(&spec, 0).unwrap();
    let p = model.param_vec_mut("classifier").unwrap();
    p.copy_from_slice(&[-1.0, 1.0, 0.0, 0.0]);
    let ds = Dataset::new(
        Tensor::from_vec(&[4, 1], vec![-5.0, 5.0, -3.0, 3.0]),
        vec![0, 1, 0, 1],
        2,
    )
    .unwrap();
    let idx: Vec<u32> = (0..4).collect();
    let state = ClientState {
        id: 0,
        shard: crate::datakit::ClientShard {
            client_id: 0,
            train: ds.subset(&idx),
            test: ds.subset(&idx),
        },
        model,
        head_layer: None,
        seed: 0,
    };
    let eval = evaluate_all(&[state], None).unwrap();
    assert_eq!(eval.mean, 1.0);
}

#[test]
fn per_class_tallies_pool_to_overall_accuracy() {
    let cfg = tiny_cfg(Strategy::FedAvg);
    let ds = load_dataset(&cfg.dataset, cfg.seeds.data).unwrap();
    let plan = default_plan(&cfg, &ds).unwrap();
    let shards = make_shards(&ds, &plan, cfg.seeds.data).unwrap();
    let out = run(&cfg, &ds, &plan, &RunOptions::default()).unwrap();

    let correct: u64 = out.report.per_class_accuracy.iter().map(|c| c.correct).sum();
    let total: u64 = out.report.per_class_accuracy.iter().map(|c| c.total).sum();
    let pooled_from_classes = correct as f64 / total as f64;

    let mut weighted = 0.0;
    let mut n = 0.0;
    for (acc, shard) in out.report.final_per_client_accuracy.iter().zip(&shards) {
        weighted += acc * shard.test.len() as f64;
        n += shard.test.len() as f64;
    }
    assert_abs_diff_eq!(pooled_from_classes, weighted / n, epsilon = 1e-9);
    assert_eq!(
        total as usize,
        shards.iter().map(|s| s.test.len()).sum::<usize>()
    );
}

#[test]
fn training_loss_improves_over_the_run() {
    for strategy in [
        Strategy::FedCmd,
        Strategy::FedAvg,
        Strategy::LocalOnly,
        Strategy::FixedHead,
    ] {
        let mut cfg = tiny_cfg(strategy);
        cfg.rounds = 12;
        cfg.rho = 0.2;
        let out = run_cfg(&cfg, &RunOptions::default());
        let first = out.report.rounds.first().unwrap().mean_train_loss;
        let last = out.report.rounds.last().unwrap().mean_train_loss;
        assert!(
            last < first,
            "{strategy}: round-{} loss {last} not below round-1 loss {first}",
            out.report.rounds.len()
        );
    }
}

#[test]
fn checkpoints_are_written_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(Strategy::FedCmd);
    cfg.rounds = 6;
    let opts = RunOptions {
        checkpoint: Some((2, dir.path().to_path_buf())),
        ..RunOptions::default()
    };
    run_cfg(&cfg, &opts);

    // round 2 is a selection round (global model), round 6 is federated
    // (per-client models of the two sampled clients)
    let global = dir.path().join("round-0002/global.fckp");
    assert!(global.exists());
    let ds = load_dataset(&cfg.dataset, cfg.seeds.data).unwrap();
    let spec = resolve_model(&cfg.model, ds.sample_shape(), ds.num_classes).unwrap();
    let restored = crate::nn::load_checkpoint::<f32>(&spec, &global).unwrap();
    assert_eq!(restored.param_count(), 212);

    let round6 = dir.path().join("round-0006");
    let clients: Vec<_> = std::fs::read_dir(&round6)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(clients.len(), 2, "one checkpoint per sampled client: {clients:?}");
    assert!(clients.iter().all(|n| n.starts_with("client-")));
}

#[test]
fn run_rejects_mismatched_plan() {
    let cfg = tiny_cfg(Strategy::FedAvg);
    let ds = load_dataset(&cfg.dataset, cfg.seeds.data).unwrap();
    let mut plan = default_plan(&cfg, &ds).unwrap();
    plan.num_clients = 7;
    assert!(matches!(
        run(&cfg, &ds, &plan, &RunOptions::default()),
        Err(RunError::Data(DataError::PlanMismatch(_)))
    ));
}

#[test]
fn config_validation_rejects_bad_values() {
    let mut cfg = tiny_cfg(Strategy::FedCmd);
    cfg.gamma = 0.0;
    assert!(matches!(cfg.validate(), Err(ConfigError::BadGamma(_))));

    let mut cfg = tiny_cfg(Strategy::FedCmd);
    cfg.rho = 1.0;
    assert!(matches!(cfg.validate(), Err(ConfigError::BadRho(_))));

    let mut cfg = tiny_cfg(Strategy::FedCmd);
    cfg.rho = 0.01; // round(6 * 0.01) = 0 selection rounds
    assert!(matches!(
        cfg.validate(),
        Err(ConfigError::BadSelectionRounds { .. })
    ));

    let mut cfg = tiny_cfg(Strategy::FedAvg);
    cfg.rho = 0.01; // rho is irrelevant outside fedcmd
    cfg.validate().unwrap();
}

#[test]
fn config_round_trips_through_json() {
    let cfg = tiny_cfg(Strategy::FedCmd);
    let json = serde_json::to_string(&cfg).unwrap();
    let back: RunConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn strategy_names_parse_round_trip() {
    for s in [
        Strategy::FedCmd,
        Strategy::FedAvg,
        Strategy::LocalOnly,
        Strategy::FixedHead,
    ] {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
    }
    assert!(matches!(
        "fedprox".parse::<Strategy>(),
        Err(ConfigError::UnknownStrategy(_))
    ));
}

#[test]
fn model_resolution_covers_the_id_space() {
    assert!(resolve_model("lenet5", &[1, 20, 20], 10).is_ok());
    assert!(resolve_model("lenet5-ext1", &[3, 32, 32], 10).is_ok());
    assert!(resolve_model("lenet5-ext2", &[3, 32, 32], 100).is_ok());
    assert!(resolve_model("dense-64-32", &[16], 10).is_ok());
    assert!(resolve_model("dense", &[16], 10).is_ok());
    assert!(matches!(
        resolve_model("lenet5", &[16], 10),
        Err(ConfigError::ModelDatasetMismatch { .. })
    ));
    assert!(matches!(
        resolve_model("resnet", &[16], 10),
        Err(ConfigError::UnknownModel(_))
    ));
    assert!(matches!(
        resolve_model("dense-0", &[16], 10),
        Err(ConfigError::UnknownModel(_))
    ));
}
