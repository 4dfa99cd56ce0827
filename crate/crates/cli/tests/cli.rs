use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/ecdc_10_countries.csv");
const TODAY: &str = "2020-05-21";

fn epicast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epicast"))
        .args(args)
        .current_dir(dir)
        .env_remove("EPICAST_CACHE")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn epicast")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = epicast(dir, args);
    assert!(
        out.status.success(),
        "epicast {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stage_fixture(dir: &Path) {
    fs::copy(FIXTURE, dir.join("cases.csv")).unwrap();
}

const FIT: &[&str] = &[
    "fit", "--holdout", "7", "--chains", "2", "--adapt", "100", "--burnin", "200", "--iter",
    "400", "--thin", "4", "--seed", "11",
];

fn pipeline(dir: &Path) {
    stage_fixture(dir);
    ok(dir, &["fetch", "--input", "cases.csv", "--today", TODAY]);
    ok(dir, FIT);
    ok(dir, &["forecast"]);
    ok(dir, &["validate", "--reuse-draws", "out/draws"]);
    ok(dir, &["cluster", "--window", "30", "--k", "3"]);
    ok(dir, &["report"]);
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = epicast(dir.path(), &["frobnicate"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&epicast(dir.path(), &["fit", "--frob"])), 2);
    assert_eq!(code(&epicast(dir.path(), &["fit", "--chains", "many"])), 2);
    assert_eq!(code(&epicast(dir.path(), &["--help"])), 0);
}

#[test]
fn data_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&epicast(d, &["fit"])), 1, "missing panel");
    assert_eq!(code(&epicast(d, &["report"])), 1, "no artifacts");
    fs::write(d.join("bad.csv"), "dateRep,cases\n01/01/2020,3\n").unwrap();
    assert_eq!(code(&epicast(d, &["fetch", "--input", "bad.csv"])), 1, "schema");
    stage_fixture(d);
    assert_eq!(code(&epicast(d, &["cluster", "--k", "0"])), 1, "k domain");
    fs::write(d.join("run.toml"), "horizn = 3\n").unwrap();
    assert_eq!(code(&epicast(d, &["--config", "run.toml", "report"])), 1, "config key");
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (path, bytes) in &sa {
        assert!(bytes == &sb[path], "{} differs between runs", path.display());
    }
    for name in [
        "out/panel.csv",
        "out/draws/manifest.json",
        "out/forecast.csv",
        "out/validation/metrics.csv",
        "out/cluster/dendrogram.nwk",
        "out/report/index.html",
        "out/fit.manifest.json",
    ] {
        assert!(sa.contains_key(Path::new(name)), "missing {name}");
    }
}

#[test]
fn fit_forecast_validate_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);

    let forecast = fs::read_to_string(d.join("out/forecast.csv")).unwrap();
    let mut lines = forecast.lines();
    assert_eq!(lines.next(), Some("country_id,date,horizon,median,lo95,hi95"));
    assert_eq!(lines.count(), 10 * 7);
    // The draws were fitted without the last 7 days, so forecasts start 7 days early.
    assert!(forecast.contains(",2020-05-14,1,"));

    let metrics = fs::read_to_string(d.join("out/validation/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("horizon,r,accuracy,ccc"));
    assert_eq!(metrics.lines().count(), 8);
    let pairs = fs::read_to_string(d.join("out/validation/pairs.csv")).unwrap();
    assert_eq!(pairs.lines().count(), 1 + 70);

    let clusters = fs::read_to_string(d.join("out/cluster/clusters.csv")).unwrap();
    let mut ids: Vec<&str> = clusters.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids, ["1", "2", "3"]);

    // Draws fitted on the full panel do not match the truncated one.
    ok(d, &["--output-dir", "full", "fit", "--input", "out/panel.csv", "--chains", "2", "--adapt", "20", "--burnin", "20", "--iter", "40", "--thin", "4"]);
    let out = epicast(d, &["--output-dir", "full", "validate", "--input", "out/panel.csv", "--reuse-draws", "full/draws"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not fitted on this panel"));
}

#[test]
fn fit_cleans_raw_input_directly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stage_fixture(d);
    ok(d, &["fit", "--input", "cases.csv", "--today", TODAY, "--degree", "1", "--chains", "2", "--adapt", "20", "--burnin", "20", "--iter", "40", "--thin", "4"]);
    let summary = fs::read_to_string(d.join("out/draws/summary.csv")).unwrap();
    assert!(summary.starts_with("parameter,mean,ci_low,ci_high,rhat\nbeta0,"));
    assert!(!summary.contains("beta2"));
    let panel = fs::read_to_string(d.join("out/draws/panel.csv")).unwrap();
    assert!(!panel.contains(TODAY));
    assert!(!panel.contains(",-"));
}

#[test]
fn manifest_hash_tracks_inputs_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stage_fixture(d);
    let hash = |name: &str| -> String {
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(d.join("out").join(name)).unwrap()).unwrap();
        m["run_hash"].as_str().unwrap().to_string()
    };
    ok(d, &["fetch", "--input", "cases.csv", "--today", TODAY]);
    let base = hash("fetch.manifest.json");
    ok(d, &["fetch", "--input", "cases.csv", "--today", TODAY]);
    assert_eq!(hash("fetch.manifest.json"), base);
    fs::write(d.join("run.toml"), "cluster_k = 4\n").unwrap();
    ok(d, &["--config", "run.toml", "fetch", "--input", "cases.csv", "--today", TODAY]);
    assert_ne!(hash("fetch.manifest.json"), base);
    let mut raw = fs::read(d.join("cases.csv")).unwrap();
    raw.push(b'\n');
    fs::write(d.join("cases.csv"), raw).unwrap();
    ok(d, &["fetch", "--input", "cases.csv", "--today", TODAY]);
    assert_ne!(hash("fetch.manifest.json"), base);

    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("out/fetch.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "fetch");
    assert_eq!(m["today"], TODAY);
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["config"]["mcmc"]["degree"], 2);
}

#[test]
fn report_sections_follow_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stage_fixture(d);
    ok(d, &["fetch", "--input", "cases.csv", "--today", TODAY]);
    ok(d, &["fit", "--chains", "2", "--adapt", "20", "--burnin", "20", "--iter", "40", "--thin", "4"]);
    ok(d, &["forecast", "--trend"]);
    ok(d, &["report"]);
    let partial = fs::read_to_string(d.join("out/report/index.html")).unwrap();
    assert!(partial.contains("<caption>AT1</caption>"));
    assert!(partial.contains("No validation artifact."));
    assert!(partial.contains("No cluster artifact."));
    assert!(d.join("out/report/data/forecast.csv").is_file());

    ok(d, &["cluster", "--k", "2"]);
    fs::write(
        d.join("small.toml"),
        "[mcmc]\nn_chains = 2\nn_adapt = 20\nn_burnin = 20\nn_iter = 40\nthin = 4\n",
    )
    .unwrap();
    ok(d, &["--config", "small.toml", "validate", "--horizon", "3"]);
    assert!(d.join("out/validation/draws/manifest.json").is_file());
    ok(d, &["report"]);
    let full = fs::read_to_string(d.join("out/report/index.html")).unwrap();
    assert!(!full.contains("absent\">"));
    assert!(full.contains("<svg") && full.contains("<th>CCC</th>"));
    for name in ["forecast.csv", "metrics.csv", "pairs.csv", "clusters.csv", "dendrogram.json", "dendrogram.nwk"] {
        assert!(full.contains(&format!("href=\"data/{name}\"")), "{name}");
        assert!(d.join("out/report/data").join(name).is_file(), "{name}");
    }
    ok(d, &["report"]);
    assert_eq!(fs::read_to_string(d.join("out/report/index.html")).unwrap(), full);
}

/// Serves `body` with `status` to each of `requests` connections.
fn serve(status: &'static str, body: Vec<u8>, requests: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.unwrap();
            let mut buf = [0u8; 4096];
            let _ = stream.read(&mut buf);
            let head = format!(
                "HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            );
            stream.write_all(head.as_bytes()).unwrap();
            stream.write_all(&body).unwrap();
        }
    });
    format!("http://{addr}/feed.csv")
}

#[test]
fn fetch_over_http_then_offline_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let url = serve("200 OK", fs::read(FIXTURE).unwrap(), 1);
    ok(d, &["fetch", "--url", &url, "--cache-dir", "cache", "--today", TODAY]);
    assert_eq!(fs::read(d.join("cache/feed.csv")).unwrap(), fs::read(FIXTURE).unwrap());
    let online = fs::read(d.join("out/panel.csv")).unwrap();

    let out = Command::new(env!("CARGO_BIN_EXE_epicast"))
        .args(["--output-dir", "offline", "fetch", "--offline", "--today", TODAY])
        .current_dir(d)
        .env("EPICAST_CACHE", "cache")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(d.join("offline/panel.csv")).unwrap(), online);

    let cold = epicast(d, &["fetch", "--offline", "--cache-dir", "empty", "--today", TODAY]);
    assert_eq!(code(&cold), 1);

    let url = serve("404 Not Found", b"gone".to_vec(), 1);
    let out = epicast(d, &["fetch", "--url", &url, "--cache-dir", "cache", "--today", TODAY]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("404"));
}
