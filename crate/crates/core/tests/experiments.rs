use std::path::PathBuf;

use brsim::experiment::{self, SweepOptions, SweepVar};
use brsim::metrics::{read_csv, write_csv, Protocol};
use brsim::scenario::{load_scenario, parse_scenario, ProtocolChoice, Scenario, ScenarioError};

fn path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{}.toml", name))
}

fn bundled(name: &str, overrides: &[&str]) -> Scenario {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load_scenario(&path(name), &o).unwrap()
}

#[test]
fn motion_testbed_matches_published_setup() {
    let s = bundled("motion_testbed", &[]);
    assert_eq!(s.node_count(), 10);
    assert_eq!(s.br.relay_probability, 0.73);
    assert_eq!(s.channel.tx_range_m, 30.0);
    assert_eq!(s.br.loop_threshold, 10);
    assert_eq!(s.br.response_wait_ms, 5_000);
    assert_eq!(s.br.ack_wait_ms, 2_000);
    assert_eq!(s.br.bcast_time_ms, 10_000);
    let topo = s.build_topology().unwrap();
    for (_, p) in topo.nodes() {
        assert!((0.0..=11.25).contains(&p.x) && (0.0..=4.05).contains(&p.y));
    }
}

#[test]
fn tandem12_matches_published_setup() {
    let s = bundled("tandem12", &[]);
    assert_eq!(s.node_count(), 12);
    assert_eq!(s.channel.tx_range_m, 6.0);
    assert_eq!(s.br.relay_probability, 0.83);
    let topo = s.build_topology().unwrap();
    let xs: Vec<f64> = topo.nodes().iter().map(|(_, p)| p.x).collect();
    assert!(xs.iter().all(|x| (0.0..=14.0).contains(x)));
    assert!(topo.nodes().iter().all(|(_, p)| p.y == 2.05 / 2.0));
    assert_eq!(topo.position(brsim::NodeId(1)).unwrap().x, 0.0);
    assert_eq!(topo.position(brsim::NodeId(0)).unwrap().x, 14.0);
}

#[test]
fn missing_topology_fails_validation() {
    let err = parse_scenario("name = \"bare\"\nhorizon_s = 10\n", &[]).unwrap_err();
    assert!(matches!(err, ScenarioError::Validation { ref field, .. } if field == "topology"));
}

#[test]
fn run_both_gives_two_runs_on_one_topology() {
    let s = bundled("tandem12", &["horizon_s=900"]);
    assert_eq!(s.protocol, ProtocolChoice::Both);
    let runs = experiment::run(&s, 3, false).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0].protocol, Protocol::Br);
    assert_eq!(runs[1].protocol, Protocol::Aodv);
    assert_eq!(runs[0].output.metrics.node_count, runs[1].output.metrics.node_count);
}

#[test]
fn same_seed_same_trace() {
    let s = bundled("motion_testbed", &[]);
    let a = experiment::run(&s, 12, true).unwrap();
    let b = experiment::run(&s, 12, true).unwrap();
    assert_eq!(a[0].output.trace, b[0].output.trace);
    let c = experiment::run(&s, 13, true).unwrap();
    assert_ne!(a[0].output.trace, c[0].output.trace);
}

#[test]
fn node_sweep_has_a_row_per_count_and_protocol() {
    let s = bundled("tandem12", &["horizon_s=1200", "traffic.packets_per_source=10"]);
    let res = experiment::sweep(
        &s,
        &SweepVar::NodeCount((5..=15).collect()),
        &SweepOptions {
            seeds: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let rows: Vec<_> = res.points.iter().flat_map(|p| p.rows.clone()).collect();
    assert_eq!(rows.len(), 22);
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("sweep.csv");
    write_csv(&rows, &f).unwrap();
    let back = read_csv(&f).unwrap();
    assert_eq!(back.len(), 22);
    for (a, b) in rows.iter().zip(&back) {
        assert_eq!(a.protocol, b.protocol);
        assert!((a.mean_hops - b.mean_hops).abs() < 1e-6);
    }
}

#[test]
fn seeds_are_indexed_not_stateful() {
    let s = bundled("tandem12", &["horizon_s=900", "traffic.packets_per_source=5"]);
    let var = SweepVar::NodeCount(vec![8]);
    let go = |seeds| {
        experiment::sweep(
            &s,
            &var,
            &SweepOptions {
                seeds,
                keep_runs: true,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let one = go(1);
    let many = go(5);
    let first = |r: &experiment::SweepResult| {
        r.runs[0]
            .iter()
            .filter(|p| p.output.metrics.seed == 0)
            .map(|p| (p.protocol, p.output.metrics.mean_hops(), p.output.events))
            .collect::<Vec<_>>()
    };
    assert_eq!(first(&one), first(&many));
    assert_eq!(one.points[0].rows.len(), 2);
}

#[test]
fn p_sweep_degenerates_to_shooting_near_zero() {
    let s = bundled("tandem12", &["protocol=\"br\"", "horizon_s=1800", "traffic.packets_per_source=20"]);
    let ps = experiment::parse_p_range("0.1..0.9:0.4").unwrap();
    let res = experiment::sweep(
        &s,
        &SweepVar::RelayProbability(ps),
        &SweepOptions {
            seeds: 3,
            keep_runs: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(res.points.len(), 3);
    let shoot_share = |k: usize| {
        let (mut direct, mut all) = (0usize, 0usize);
        for r in &res.runs[k] {
            let m = &r.output.metrics;
            all += m.routing_log.len();
            direct += m.routing_log.iter().filter(|e| e.to == m.destination).count();
        }
        direct as f64 / all as f64
    };
    assert!(shoot_share(0) > shoot_share(2));
}

#[test]
fn node_sweep_rejects_explicit_topologies() {
    let s = bundled("motion_testbed", &[]);
    let err = experiment::sweep(
        &s,
        &SweepVar::NodeCount(vec![5]),
        &SweepOptions {
            seeds: 1,
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(err.to_string().contains("tandem"));
}
