mod common;

use std::collections::BTreeSet;
use std::net::TcpListener;
use std::sync::Arc;

use common::*;
use prss_core::guidance::Policy;
use prss_harness::config::{LambdaGrid, RemoteSettings, RunConfig};
use prss_harness::io::sha256_hex;
use prss_harness::report::read_tradeoff;
use prss_harness::sweep::*;
use prss_harness::wire::{serve, LocalService};

fn read_rows(path: &std::path::Path) -> Vec<CellRow> {
    csv::Reader::from_path(path).unwrap().deserialize().map(|r| r.unwrap()).collect()
}

#[test]
fn counting_contract() {
    let dir = tempfile::tempdir().unwrap();
    let tb = write_testbed(dir.path(), &small_config(), 7);
    let cfg = run_config(
        tb,
        dir.path().join("runs"),
        vec![Policy::Cfg, Policy::Prss],
        LambdaGrid::MedianFractions(vec![0.5, 1.0, 1.5]),
        vec![0, 1],
    );
    let out = run_sweep(&cfg, Some(2)).unwrap();
    assert_eq!(out.manifest.total_cells, 72);
    assert!(out.manifest.failed_cells.is_empty());
    let mut cells = BTreeSet::new();
    for p in [Policy::Cfg, Policy::Prss] {
        let rows = read_rows(&out.out_dir.join(csv_name(p)));
        assert_eq!(rows.len(), 36);
        for r in rows {
            assert_eq!(r.policy, p);
            assert!(out.manifest.config.policies.contains(&r.policy));
            let li = out.manifest.lambdas.iter().position(|&l| l == r.lambda).expect("lambda in manifest");
            cells.insert((p, li, r.seed, r.condition_id));
        }
    }
    assert_eq!(cells.len(), 72);
    let header = std::fs::read_to_string(out.out_dir.join(csv_name(Policy::Cfg))).unwrap();
    assert_eq!(header.lines().next().unwrap(), CELL_HEADER.join(","));
    let tradeoff = read_tradeoff(&out.out_dir.join(TRADEOFF_FILE)).unwrap();
    assert_eq!(tradeoff.len(), 2 * 3 * 3);
    assert_eq!(tradeoff, out.tradeoff);
}

#[test]
fn manifest_hash_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let tb = write_testbed(dir.path(), &small_config(), 7);
    let bytes = std::fs::read(&tb).unwrap();
    let cfg = run_config(tb, dir.path().join("runs"), vec![Policy::Pe], LambdaGrid::Values(vec![0.05]), vec![3]);
    let out = run_sweep(&cfg, None).unwrap();
    let m = RunManifest::load(&out.out_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.testbed_sha256, sha256_hex(&bytes));
    assert_eq!(m.config, cfg);
    assert_eq!(m.lambdas, vec![0.05]);
    assert_eq!(m.files.policies["pe"], "pe.csv");
    for name in m.files.policies.values().chain([&m.files.tradeoff]) {
        assert!(out.out_dir.join(name).is_file());
    }
    let leftovers: Vec<_> = std::fs::read_dir(&out.out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn reruns_are_byte_identical_and_order_free() {
    let dir = tempfile::tempdir().unwrap();
    let tb = write_testbed(dir.path(), &small_config(), 7);
    let policies = vec![Policy::Pe, Policy::Ss, Policy::PrssBalanced];
    let a = run_config(tb.clone(), dir.path().join("a"), policies.clone(), LambdaGrid::MedianFractions(vec![0.4, 0.8]), vec![0, 5]);
    let first = run_sweep(&a, Some(1)).unwrap();
    let mut b = RunManifest::load(&first.out_dir.join(MANIFEST_FILE)).unwrap().config;
    b.out_dir = dir.path().join("b");
    let second = run_sweep(&b, Some(4)).unwrap();
    for name in policies.iter().map(|p| csv_name(*p)).chain([TRADEOFF_FILE.to_string()]) {
        let x = std::fs::read(first.out_dir.join(&name)).unwrap();
        let y = std::fs::read(second.out_dir.join(&name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    // reversed cell order gives the same records
    let ds = prss_core::toy::Testbed::from_json(&std::fs::read_to_string(&tb).unwrap()).unwrap();
    let den = ds.denoiser().unwrap();
    let schedule = ds.config.schedule.build().unwrap();
    let conds = selected_conditions(&a, &ds).unwrap();
    let cells = enumerate_cells(&a, 2, &conds);
    let mut rev = cells.clone();
    rev.reverse();
    let lambdas = &first.manifest.lambdas;
    let mut r = run_cells(&a, &den, &schedule, &ds, lambdas, &rev, Some(3)).unwrap();
    r.reverse();
    assert_eq!(r, run_cells(&a, &den, &schedule, &ds, lambdas, &cells, Some(2)).unwrap());
}

#[test]
fn failed_cells_are_recorded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let tb_path = write_testbed(dir.path(), &small_config(), 7);
    let tb = prss_core::toy::Testbed::from_json(&std::fs::read_to_string(&tb_path).unwrap()).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let service = Arc::new(LocalService(tb.denoiser().unwrap()));
    std::thread::spawn(move || serve(listener, service));

    let mut cfg = run_config(tb_path, dir.path().join("runs"), vec![Policy::Cfg, Policy::Pe], LambdaGrid::Values(vec![1e-6]), vec![0]);
    cfg.remote = Some(RemoteSettings { addr, timeout_ms: 10_000 });
    let out = run_sweep(&cfg, Some(2)).unwrap();
    // the wire protocol carries no gradients, so every flagged PE cell fails
    assert_eq!(out.manifest.failed_cells.len(), 6);
    assert!(out.manifest.failed_cells.iter().all(|f| f.policy == Policy::Pe && f.error.contains("gradients")));
    assert_eq!(read_rows(&out.out_dir.join("cfg.csv")).len(), 6);
    assert!(read_rows(&out.out_dir.join("pe.csv")).is_empty());
    let on_disk = RunManifest::load(&out.out_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(on_disk.failed_cells, out.manifest.failed_cells);
}

#[test]
fn remote_backend_tracks_the_local_one() {
    let dir = tempfile::tempdir().unwrap();
    let tb_path = write_testbed(dir.path(), &small_config(), 7);
    let tb = prss_core::toy::Testbed::from_json(&std::fs::read_to_string(&tb_path).unwrap()).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let service = Arc::new(LocalService(tb.denoiser().unwrap()));
    std::thread::spawn(move || serve(listener, service));

    let local = run_config(tb_path, dir.path().join("local"), vec![Policy::Cfg], LambdaGrid::Values(vec![1e6]), vec![0]);
    let mut remote = local.clone();
    remote.out_dir = dir.path().join("remote");
    remote.remote = Some(RemoteSettings { addr, timeout_ms: 10_000 });
    let a = run_sweep(&local, None).unwrap();
    let b = run_sweep(&remote, None).unwrap();
    for (x, y) in a.records.iter().zip(&b.records) {
        let (mx, my) = (x.outcome.as_ref().unwrap(), y.outcome.as_ref().unwrap());
        assert!((mx.report.sscd - my.report.sscd).abs() < 1e-3);
        assert!((mx.m_first - my.m_first).abs() < 1e-4);
    }
}

#[test]
fn config_validation() {
    let ok = r#"{"schema_version":1,"testbed":"t.json","policies":["cfg"],"lambda":{"values":[1.0]},"seeds":[0],"out_dir":"o"}"#;
    let cfg = RunConfig::from_json(ok).unwrap();
    assert_eq!((cfg.s, cfg.n_s, cfg.lambda_max_ratio), (7.5, 25, 2.0));
    let cases = [
        ok.replace("\"seeds\"", "\"extra\":1,\"seeds\""),
        ok.replace("\"schema_version\":1", "\"schema_version\":2"),
        ok.replace("[\"cfg\"]", "[]"),
        ok.replace("[1.0]", "[]"),
        ok.replace("[1.0]", "[-1.0]"),
        ok.replace("\"seeds\":[0]", "\"seeds\":[]"),
        ok.replace("\"cfg\"", "\"magic\""),
    ];
    for c in cases {
        assert!(RunConfig::from_json(&c).is_err(), "{c}");
    }
    let dup = run_config("t".into(), "o".into(), vec![Policy::Cfg, Policy::Cfg], LambdaGrid::Values(vec![1.0]), vec![0]);
    assert!(run_sweep(&dup, None).is_err());
}

#[test]
fn relative_paths_resolve_against_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"schema_version":1,"testbed":"t.json","policies":["cfg"],"lambda":{"values":[1.0]},"seeds":[0],"out_dir":"o"}"#).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.testbed, dir.path().join("t.json"));
    assert_eq!(cfg.out_dir, dir.path().join("o"));
}
