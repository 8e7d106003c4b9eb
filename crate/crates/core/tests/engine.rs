use std::path::Path;

use dfml::engine::{run, run_experiment, Endpoint, ExperimentConfig, Outcome, Payload};
use dfml::io::parse_config_str;
use dfml::topology::{Topology, TopologyKind};

const BASE: &str = r#"
seed = 4
num_clients = 8
rounds = 6
lr = 0.05
mutual_epochs = 2
[protocol]
name = "dfml"
[dataset]
source = "blobs"
num_classes = 4
dim = 6
train_per_class = 60
test_per_class = 30
[models]
architectures = [[16, 16], [8, 8]]
"#;

fn config(overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    parse_config_str(BASE, Path::new("."), &overrides).unwrap()
}

fn outcome(overrides: &[&str]) -> Outcome<f64> {
    run_experiment(&config(overrides)).unwrap()
}

#[test]
fn zero_learning_rate_leaves_accuracy_unchanged() {
    for name in ["dfml", "dec_fedavg", "dec_fml"] {
        let out = outcome(&["lr=0.0", "rounds=2", &format!("protocol.name={name}")]);
        let first = &out.metrics[0];
        for m in &out.metrics[1..] {
            assert_eq!(m.regular_acc, first.regular_acc, "{name} round {}", m.round);
            assert!(m.comm_cost > 0);
        }
    }
}

#[test]
fn every_round_is_logged_and_evaluated() {
    let out = outcome(&[]);
    assert_eq!(out.metrics.len(), 7);
    assert_eq!(out.peak_trace.len(), 7);
    assert_eq!(out.handoffs.len(), 6);
    assert_eq!(out.metrics[0].comm_cost, 0);
    assert_eq!(out.metrics[0].aggregator, None);
    assert_eq!(out.metrics[1].aggregator, Some(0));
    let total: u64 = out.metrics.iter().map(|m| m.comm_cost).sum();
    assert_eq!(out.metrics.last().unwrap().comm_total, total);
    assert_eq!(total as usize, out.transfers.len());
    assert!(out.metrics.windows(2).all(|w| w[1].compute_cost > w[0].compute_cost));
}

#[test]
fn eval_every_thins_the_metrics() {
    let out = outcome(&["eval_every=4"]);
    let rounds: Vec<usize> = out.metrics.iter().map(|m| m.round).collect();
    assert_eq!(rounds, [0, 4, 6]);
    assert_eq!(out.metrics[2].comm_total as usize, out.transfers.len());
}

#[test]
fn same_seed_same_outcome_and_seed_matters() {
    let a = outcome(&[]);
    let b = outcome(&[]);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.transfers, b.transfers);
    assert_eq!(a.peak_trace, b.peak_trace);
    let c = outcome(&["seed=5"]);
    assert_ne!(a.peak_trace, c.peak_trace);
}

#[test]
fn dfml_learns_on_non_iid_blobs() {
    let out = outcome(&["rounds=60", "mutual_epochs=5", "dataset.num_classes=6", "dataset.dim=16", "dataset.train_per_class=100"]);
    let start = out.metrics[0].peak_mean;
    let end = out.metrics.last().unwrap().peak_mean;
    assert!(end - start > 0.20, "peak accuracy {start:.3} -> {end:.3}");
}

#[test]
fn dfml_star_transfers() {
    let out = outcome(&["rounds=3"]);
    for t in 1..=3 {
        let agg = out.metrics[t].aggregator.unwrap();
        let round: Vec<_> = out.transfers.iter().filter(|tr| tr.round == t).collect();
        assert_eq!(round.len(), 2 * 4);
        assert!(round.iter().all(|tr| tr.payload == Payload::Model));
        assert!(round.iter().all(|tr| tr.from == Endpoint::Client(agg) || tr.to == Endpoint::Client(agg)));
        assert_eq!(out.metrics[t].participants, 5);
    }
}

#[test]
fn aggregator_moves_to_a_neighbor() {
    let out = outcome(&["rounds=20", "topology.kind=bridged"]);
    let topology = Topology::new(TopologyKind::Bridged, 8).unwrap();
    let aggs: Vec<usize> = out.metrics[1..].iter().map(|m| m.aggregator.unwrap()).collect();
    for w in aggs.windows(2) {
        assert!(topology.are_adjacent(w[0], w[1]), "{aggs:?}");
    }
}

#[test]
fn def_kt_pairs_cover_the_fraction() {
    let out = outcome(&["protocol.name=def_kt", "models.architectures=[[16]]", "rounds=2"]);
    for m in &out.metrics[1..] {
        assert_eq!(m.participants, 8);
        assert_eq!(m.comm_cost, 8);
        assert_eq!(m.aggregator, None);
    }
}

#[test]
fn hub_mode_routes_through_the_hub() {
    let out = outcome(&["protocol.name=dec_fedavg", "topology.aggregator_mode=hub", "rounds=2"]);
    assert!(out.transfers.iter().any(|t| t.from == Endpoint::Hub));
    assert!(out.transfers.iter().any(|t| t.to == Endpoint::Hub));
    assert!(out.metrics[1..].iter().all(|m| m.aggregator.is_none()));
    let cfg = parse_config_str(
        BASE,
        Path::new("."),
        &["topology.aggregator_mode=hub".into()],
    );
    assert!(cfg.is_err());
}

#[test]
fn partial_training_protocols_learn() {
    for name in ["dec_heterofl", "dec_fedrolex", "dec_feddropout"] {
        let out = outcome(&[&format!("protocol.name={name}"), "rounds=15"]);
        let start = out.metrics[0].regular_mean;
        let end = out.metrics.last().unwrap().regular_mean;
        assert!(end > start, "{name}: {start:.3} -> {end:.3}");
        assert!(out.transfers.iter().any(|t| t.payload == Payload::SubModel));
    }
}

#[test]
fn dec_fml_reports_meme_accuracy() {
    let out = outcome(&["protocol.name=dec_fml", "rounds=2"]);
    assert!(out.metrics.iter().all(|m| m.meme_mean.is_some()));
    assert!(out.transfers.iter().all(|t| t.payload == Payload::Meme));
}

#[test]
fn fixed_alpha_and_single_precision_run() {
    let out = outcome(&["scheduler.mode=fixed:0.5"]);
    assert!(out.metrics[1..].iter().all(|m| m.alpha == 0.5));
    let cfg = config(&["precision=f32"]);
    let m32 = run(&cfg).unwrap();
    assert_eq!(m32.len(), 7);
    assert!(m32.iter().all(|m| m.peak_mean.is_finite()));
}

#[test]
fn peaks_only_change_at_firings() {
    let out = outcome(&["rounds=30"]);
    for (t, pair) in out.peak_trace.windows(2).enumerate() {
        for (client, (a, b)) in pair[0].iter().zip(&pair[1]).enumerate() {
            if a != b {
                assert!(out.peak_events.iter().any(|e| e.round == t + 1 && e.client == client));
            }
        }
    }
}
