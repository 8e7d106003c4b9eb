use std::path::Path;

use dfml::engine::{run, ExperimentConfig, ProtocolKind, RoundMetrics};
use dfml::io::{
    apply_override, emit_plotdata, expand_grid, grid_point_name, parse_config, parse_config_str, parse_grid_axis,
    read_metrics, read_results, write_metrics, write_plotdata, write_results, RunManifest, SeriesSpec,
};
use dfml::Error;

const MINIMAL: &str = r#"
num_clients = 4
rounds = 3
lr = 0.05
[protocol]
name = "dfml"
[dataset]
source = "blobs"
num_classes = 3
dim = 4
train_per_class = 30
test_per_class = 10
[models]
architectures = [[8], [4]]
"#;

fn parse(text: &str, overrides: &[&str]) -> dfml::Result<ExperimentConfig> {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    parse_config_str(text, Path::new("/base"), &overrides)
}

#[test]
fn empty_file_lists_every_required_key() {
    match parse("", &[]) {
        Err(Error::MissingConfig(keys)) => {
            assert_eq!(
                keys,
                ["num_clients", "rounds", "lr", "protocol.name", "dataset.source", "models.architectures"]
            );
        }
        other => panic!("expected missing keys, got {other:?}"),
    }
}

#[test]
fn defaults_are_filled() {
    let cfg = parse(MINIMAL, &[]).unwrap();
    assert_eq!(cfg.mutual_epochs, 10);
    assert_eq!(cfg.momentum, 0.9);
    assert_eq!(cfg.weight_decay, 5e-4);
    assert_eq!(cfg.temperature, 1.0);
    assert_eq!(cfg.scheduler.initial_period, 10);
    assert_eq!(cfg.scheduler.alpha_max, 1.0);
    assert_eq!(cfg.seed, 0);
}

#[test]
fn unknown_keys_are_named() {
    let err = parse(&format!("foo = 1\n{MINIMAL}"), &[]).unwrap_err().to_string();
    assert!(err.contains("foo"), "{err}");
    let err = parse(MINIMAL, &["dataset.foo=2"]).unwrap_err().to_string();
    assert!(err.contains("dataset") && err.contains("foo"), "{err}");
}

#[test]
fn invalid_values_name_their_key() {
    let err = parse(MINIMAL, &["scheduler.alpha_max=\"high\""]).unwrap_err().to_string();
    assert!(err.contains("scheduler.alpha_max"), "{err}");
    let err = parse(MINIMAL, &["protocol.name=gossip"]).unwrap_err().to_string();
    assert!(err.contains("protocol.name"), "{err}");
    let err = parse(MINIMAL, &["num_clients=1"]).unwrap_err().to_string();
    assert!(err.contains("num_clients"), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(parse_config(Path::new("/nonexistent/cfg.toml"), &[]), Err(Error::Io { .. })));
}

#[test]
fn overrides_parse_literals_and_create_tables() {
    let cfg = parse(
        MINIMAL,
        &["mutual_epochs=20", "scheduler.alpha_max=0.9", "protocol.name=dec_fedavg", "models.architectures=[[8],[8]]"],
    )
    .unwrap();
    assert_eq!(cfg.mutual_epochs, 20);
    assert_eq!(cfg.scheduler.alpha_max, 0.9);
    assert_eq!(cfg.protocol.name, ProtocolKind::DecFedAvg);
    assert_eq!(cfg.models.architectures, vec![vec![8], vec![8]]);

    let mut table = toml::Table::new();
    assert!(apply_override(&mut table, "no_equals").is_err());
    assert!(apply_override(&mut table, "a..b=1").is_err());
    apply_override(&mut table, "x=1").unwrap();
    assert!(apply_override(&mut table, "x.y=1").is_err());
}

#[test]
fn relative_dataset_paths_follow_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("source = \"blobs\"", "source = \"csv\"\ntrain_csv = \"data/train.csv\"");
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    let cfg = parse_config(&path, &[]).unwrap();
    let expected = std::fs::canonicalize(dir.path()).unwrap().join("data/train.csv");
    assert_eq!(cfg.dataset.train_csv.unwrap(), expected);
}

#[test]
fn zero_rounds_give_a_header_only_file() {
    let mut buf = Vec::new();
    write_metrics(&[], 2, 1, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("round,alpha,aggregator,"));
    assert!(text.trim_end().ends_with("client1_regular,client1_peak"));
    assert!(read_metrics(text.as_bytes()).unwrap().is_empty());
}

fn awkward_row() -> RoundMetrics {
    RoundMetrics {
        round: 7,
        alpha: 0.1 + 0.2,
        aggregator: Some(3),
        participants: 4,
        comm_cost: 6,
        comm_total: 42,
        compute_cost: 123_456_789_012,
        distill_skipped: true,
        regular_acc: vec![1.0 / 3.0, 2.0 / 7.0],
        peak_acc: vec![f64::MIN_POSITIVE, 1e-300],
        regular_mean: std::f64::consts::PI,
        peak_mean: 0.5,
        local_mean: 1.0 - f64::EPSILON,
        cluster_regular: vec![0.123_456_789_012_345_67],
        cluster_peak: vec![5e-324],
        meme_mean: None,
    }
}

#[test]
fn metrics_round_trip_exactly() {
    let mut second = awkward_row();
    second.round = 8;
    second.aggregator = None;
    second.meme_mean = Some(2.0 / 3.0);
    let rows = vec![awkward_row(), second];
    let mut buf = Vec::new();
    write_metrics(&rows, 2, 1, &mut buf).unwrap();
    assert_eq!(read_metrics(buf.as_slice()).unwrap(), rows);
}

#[test]
fn metrics_with_wrong_widths_are_rejected() {
    assert!(write_metrics(&[awkward_row()], 3, 1, Vec::new()).is_err());
    assert!(write_metrics(&[awkward_row()], 2, 2, Vec::new()).is_err());
}

#[test]
fn manifest_round_trips() {
    let cfg = parse(MINIMAL, &["seed=99", "scheduler.alpha_min=0.1"]).unwrap();
    let m = RunManifest::new(cfg, 1.25);
    let back = RunManifest::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.seed, 99);
    assert_eq!(back.version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn same_seed_writes_identical_files() {
    let cfg = parse(MINIMAL, &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = write_results(&run(&cfg).unwrap(), &cfg, 0.0, &dir.path().join("a")).unwrap();
    let b = write_results(&run(&cfg).unwrap(), &cfg, 1.0, &dir.path().join("b")).unwrap();
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&a.metrics), bytes(&b.metrics));
    assert_eq!(read_results(&dir.path().join("a")).unwrap().len(), cfg.rounds + 1);
    assert_eq!(RunManifest::read(&a.manifest).unwrap().config, cfg);
}

fn synthetic(rounds: usize) -> Vec<RoundMetrics> {
    (0..=rounds)
        .map(|r| RoundMetrics {
            round: r,
            alpha: 0.0,
            aggregator: None,
            participants: 2,
            comm_cost: 2,
            comm_total: 2 * r as u64,
            compute_cost: 10 * r as u64,
            distill_skipped: false,
            regular_acc: vec![0.1, 0.3],
            peak_acc: vec![0.2, 0.4],
            regular_mean: 0.2,
            peak_mean: 0.3,
            local_mean: 0.5,
            cluster_regular: vec![0.1, 0.3],
            cluster_peak: vec![0.2, 0.4],
            meme_mean: None,
        })
        .collect()
}

#[test]
fn single_file_peak_series() {
    let rows = emit_plotdata(&[("dfml".into(), synthetic(5))], &"peak".parse().unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.series == "dfml:peak" && r.value == 0.3));
}

#[test]
fn merged_protocols_stay_distinguishable() {
    let inputs = [("dfml".to_string(), synthetic(4)), ("dec_fedavg".to_string(), synthetic(4))];
    let rows = emit_plotdata(&inputs, &"regular,cluster_peak@compute".parse().unwrap()).unwrap();
    let mut series: Vec<&str> = rows.iter().map(|r| r.series.as_str()).collect();
    series.dedup();
    assert_eq!(
        series,
        [
            "dec_fedavg:cluster0_peak",
            "dec_fedavg:cluster1_peak",
            "dec_fedavg:regular",
            "dfml:cluster0_peak",
            "dfml:cluster1_peak",
            "dfml:regular"
        ]
    );
    assert!(rows.iter().all(|r| r.x == 10.0 * r.round as f64));

    let mut out = Vec::new();
    write_plotdata(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next(), Some("round,x,series,value"));
    assert_eq!(text.lines().count(), rows.len() + 1);
}

#[test]
fn mismatched_grids_are_rejected() {
    let inputs = [("a".to_string(), synthetic(4)), ("b".to_string(), synthetic(5))];
    assert!(emit_plotdata(&inputs, &"peak".parse().unwrap()).is_err());
}

#[test]
fn bad_series_specs_are_rejected() {
    assert!("peak@time".parse::<SeriesSpec>().is_err());
    assert!("peak,".parse::<SeriesSpec>().is_err());
    let ms = [("a".to_string(), synthetic(2))];
    for spec in ["accuracy", "cluster9_peak", "client0_best"] {
        assert!(emit_plotdata(&ms, &spec.parse().unwrap()).is_err(), "{spec}");
    }
}

#[test]
fn cyclic_alpha_series_is_a_sawtooth() {
    let cfg = parse(MINIMAL, &["rounds=75", "mutual_epochs=1", "dataset.train_per_class=6"]).unwrap();
    let metrics = run(&cfg).unwrap();
    let rows = emit_plotdata(&[("dfml".into(), metrics)], &"alpha".parse().unwrap()).unwrap();
    let alpha: Vec<f64> = rows.iter().filter(|r| r.round > 0).map(|r| r.value).collect();
    let drops: Vec<usize> = alpha.windows(2).enumerate().filter(|(_, w)| w[1] < w[0]).map(|(i, _)| i + 2).collect();
    assert_eq!(drops, [12, 33, 74]);
    for (i, w) in alpha.windows(2).enumerate() {
        if !drops.contains(&(i + 2)) {
            assert!(w[1] >= w[0], "round {}", i + 2);
        }
    }
    assert_eq!(alpha[0], 0.0);
    for peak in [11, 32, 73] {
        assert!((alpha[peak - 1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn grid_expansion() {
    let k = parse_grid_axis("mutual_epochs=1,10,20").unwrap();
    let a = parse_grid_axis("models.architectures=[[8],[4]], [[16]]").unwrap();
    assert_eq!(a.1, ["[[8],[4]]", "[[16]]"]);
    let points = expand_grid(&[k, a]);
    assert_eq!(points.len(), 6);
    assert_eq!(points[0], ["mutual_epochs=1", "models.architectures=[[8],[4]]"]);
    assert_eq!(grid_point_name(&points[5]), "mutual_epochs-20_models.architectures-__16__");
    assert!(parse_grid_axis("novalues").is_err());
    assert!(parse_grid_axis("k=1,,2").is_err());
    assert_eq!(expand_grid(&[]), vec![Vec::<String>::new()]);
}

#[test]
fn resolved_configs_accept_further_overrides() {
    let cfg = parse(MINIMAL, &["topology.aggregator_mode=fixed:2", "scheduler.period_growth=\"+5\""]).unwrap();
    assert_eq!(dfml::io::override_config(&cfg, &[]).unwrap(), cfg);
    let changed = dfml::io::override_config(&cfg, &["seed=5".into(), "scheduler.mode=fixed:0.5".into()]).unwrap();
    assert_eq!(changed.seed, 5);
    assert_eq!(changed.topology, cfg.topology);
    assert_eq!(changed.scheduler.period_growth, cfg.scheduler.period_growth);
    assert_ne!(changed.scheduler.mode, cfg.scheduler.mode);
}
