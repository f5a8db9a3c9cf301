use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shiftlab::pipeline;
use shiftlab::store::{read_dataset, read_report, RunLayout, REPORT_HEADER, TRACE_HEADER};
use shiftlab::ExperimentConfig;
use shiftlab_core::probe::accuracy;
use shiftlab_core::scm::{HoldoutRule, Scm, Split};
use shiftlab_core::ssl::Objective;
use shiftlab_core::stability::Metric;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.epochs = 2;
    cfg.dataset.train = 512;
    cfg.dataset.test_seen = 200;
    cfg.dataset.test_holdout = 200;
    cfg.ssl.batch_size = 64;
    cfg.ssl.hidden_dim = 32;
    cfg.ssl.rep_dim = 16;
    cfg.ssl.queue_size = 128;
    cfg.probe.epochs = 2;
    cfg.stability.n_values = vec![1, 2];
    cfg.stability.max_points = 20;
    cfg.stability.stable_map_points = 100;
    cfg.stability.stable_map.epochs = 2;
    cfg.identify.directions = 100;
    cfg
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(cfg: &ExperimentConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), cfg.to_json()).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("config.json")
    }

    fn layout(&self, seed: u64) -> RunLayout {
        RunLayout::new(&self.out(), seed)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_shiftlab"))
            .arg("--config")
            .arg(self.config())
            .arg("--out")
            .arg(self.out())
            .args(args)
            .env_remove("SHIFTLAB_OUT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn golden(name: &str) -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

#[test]
fn generate_is_deterministic_and_sized() {
    let cfg = tiny_config();
    let a = Workspace::new(&cfg);
    let b = Workspace::new(&cfg);
    a.ok(&["generate"]);
    b.ok(&["generate"]);
    for split in [Split::TrainSeen, Split::TestSeen, Split::TestHoldout] {
        let pa = a.layout(0).dataset(split);
        assert_eq!(fs::read(&pa).unwrap(), fs::read(b.layout(0).dataset(split)).unwrap());
        let rows = read_dataset(&pa, cfg.geometry, split).unwrap();
        let want = match split {
            Split::TrainSeen => cfg.dataset.train,
            Split::TestSeen => cfg.dataset.test_seen,
            Split::TestHoldout => cfg.dataset.test_holdout,
        };
        assert_eq!(rows.len(), want);
    }
    assert_eq!(
        fs::read(a.layout(0).scm_json()).unwrap(),
        fs::read(b.layout(0).scm_json()).unwrap()
    );
    assert!(a.layout(0).data_dir().join("manifest.json").exists());
}

#[test]
fn train_split_holds_no_holdout_values() {
    let cfg = tiny_config();
    let ws = Workspace::new(&cfg);
    ws.ok(&["generate"]);
    let scm = Scm::new(cfg.scm_spec().unwrap()).unwrap();
    let rule = HoldoutRule::new(&scm, cfg.holdout_threshold).unwrap();
    let layout = ws.layout(0);
    for split in [Split::TrainSeen, Split::TestSeen] {
        for z in read_dataset(&layout.dataset(split), cfg.geometry, split).unwrap() {
            assert!(rule.holdout_flags(&scm, &z).iter().all(|f| !f), "{z:?}");
        }
    }
    for z in read_dataset(&layout.dataset(Split::TestHoldout), cfg.geometry, Split::TestHoldout).unwrap() {
        assert!(rule.holdout_flags(&scm, &z).iter().any(|&f| f));
    }
}

#[test]
fn dataset_and_trace_headers_match_golden() {
    let ws = Workspace::new(&tiny_config());
    ws.ok(&["generate"]);
    ws.ok(&["train"]);
    let layout = ws.layout(0);
    let first_line = |p: PathBuf| fs::read_to_string(p).unwrap().lines().next().unwrap().to_string() + "\n";
    assert_eq!(first_line(layout.dataset(Split::TrainSeen)), golden("dataset_header.csv"));
    assert_eq!(first_line(layout.loss_trace(Objective::Simclr)), golden("loss_trace_header.csv"));
    assert_eq!(golden("loss_trace_header.csv").trim_end(), TRACE_HEADER.join(","));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = tiny_config();
    let full = Workspace::new(&cfg);
    full.ok(&["generate"]);
    full.ok(&["train"]);

    let cut = Workspace::new(&cfg);
    cut.ok(&["generate"]);
    let layout = cut.layout(0);
    let partial = pipeline::train(&cfg, &layout, None, Some(1)).unwrap();
    assert_eq!(partial.epochs_done, 1);
    let snapshot = cut.dir.path().join("epoch1.json");
    fs::copy(layout.encoder(Objective::Simclr), &snapshot).unwrap();
    cut.ok(&["train", "--resume", snapshot.to_str().unwrap()]);

    for f in [layout.encoder(Objective::Simclr), layout.loss_trace(Objective::Simclr)] {
        let name = f.file_name().unwrap();
        let other = full.layout(0).objective_dir(Objective::Simclr).join(name);
        assert_eq!(fs::read(&f).unwrap(), fs::read(other).unwrap(), "{name:?} differs");
    }
}

#[test]
fn every_objective_trains() {
    let ws = Workspace::new(&tiny_config());
    ws.ok(&["generate"]);
    for o in Objective::ALL {
        let out = ws.ok(&["--objective", o.name(), "train"]);
        assert!(out.starts_with(o.name()), "{out}");
        let trace = fs::read_to_string(ws.layout(0).loss_trace(o)).unwrap();
        let last = trace.lines().last().unwrap();
        let loss: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
        assert!(loss.is_finite());
        ws.ok(&["verify", ws.layout(0).encoder(o).to_str().unwrap()]);
    }
    let bad = ws.run(&["--objective", "supervised", "train"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn evaluate_rows_are_consistent() {
    let cfg = tiny_config();
    let ws = Workspace::new(&cfg);
    ws.ok(&["generate"]);
    ws.ok(&["train"]);
    ws.ok(&["evaluate"]);
    let layout = ws.layout(0);
    let path = layout.stability(Objective::Simclr);
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap().to_string() + "\n", golden("stability_header.csv"));
    assert_eq!(golden("stability_header.csv").trim_end(), REPORT_HEADER.join(","));
    let rows = read_report(&path).unwrap();

    // n = 0 is plain test-seen accuracy of the saved probe
    let enc = pipeline::load_encoder(&cfg, &layout).unwrap();
    let probe: shiftlab::store::ProbeCheckpoint =
        shiftlab::store::read_versioned(&layout.probe(Objective::Simclr), "probe").unwrap();
    let world = pipeline::World::new(&cfg).unwrap();
    let seen = pipeline::load_split(&cfg, &layout, Split::TestSeen).unwrap();
    let reps = pipeline::encode(&enc.model, &world.observe(&seen).unwrap()).unwrap();
    let labels: Vec<usize> = seen.iter().map(|z| z.class_id).collect();
    let plain = accuracy(&probe.probe, &reps, &labels).unwrap();
    let n0 = rows.iter().find(|r| r.n == 0 && r.metric == "accuracy").unwrap();
    assert_eq!(n0.value, plain);

    for n in [1, 2] {
        for metric in [Metric::Accuracy, Metric::Score] {
            let standalone = pipeline::standalone_deterioration(&cfg, &layout, n, metric).unwrap();
            let name = format!("deterioration_{}", metric.name());
            let row = rows.iter().find(|r| r.n == n && r.method == "none" && r.metric == name).unwrap();
            assert!((row.value - standalone).abs() < 1e-12, "n={n} {name}: {} vs {standalone}", row.value);
        }
    }
    for method in ["robust_k90", "robust_k100", "stable_map"] {
        assert!(rows.iter().any(|r| r.method == method), "{method} missing");
    }
    let ident: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(layout.identify(Objective::Simclr)).unwrap()).unwrap();
    assert_eq!(ident["config_hash"].as_str().unwrap(), cfg.hash());
    assert!(ident["nullspace"]["ratio"].as_f64().unwrap() >= 0.0);
}

#[test]
fn evaluate_rejects_foreign_and_missing_checkpoints() {
    let cfg = tiny_config();
    let ws = Workspace::new(&cfg);
    ws.ok(&["generate"]);
    let missing = ws.run(&["evaluate"]);
    assert_eq!(code(&missing), 3, "{}", stderr(&missing));
    assert!(stderr(&missing).contains("missing encoder checkpoint"));

    ws.ok(&["train"]);
    let mut other = cfg.clone();
    other.probe.epochs = 3;
    fs::write(ws.config(), other.to_json()).unwrap();
    let mismatch = ws.run(&["evaluate"]);
    assert_eq!(code(&mismatch), 2, "{}", stderr(&mismatch));
    assert!(stderr(&mismatch).contains("config hash"));
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let ws = Workspace::new(&tiny_config());
    ws.ok(&["generate"]);
    ws.ok(&["train"]);
    let enc = ws.layout(0).encoder(Objective::Simclr);
    let out = ws.ok(&["verify", enc.to_str().unwrap()]);
    assert!(out.contains("round trip identical"));

    let text = fs::read_to_string(&enc).unwrap();
    let broken = ws.dir.path().join("broken.json");
    fs::write(&broken, text.replacen("{", "{\n\n  oops", 1)).unwrap();
    let res = ws.run(&["verify", broken.to_str().unwrap()]);
    assert_eq!(code(&res), 3);
    assert!(stderr(&res).contains("line 3"), "{}", stderr(&res));

    let bumped = ws.dir.path().join("bumped.json");
    fs::write(&bumped, text.replacen("\"schema_version\":1", "\"schema_version\":2", 1)).unwrap();
    let res = ws.run(&["verify", bumped.to_str().unwrap()]);
    assert_eq!(code(&res), 3);
    assert!(stderr(&res).contains("no migration"), "{}", stderr(&res));
}

#[test]
fn config_errors_exit_with_code_two() {
    let ws = Workspace::new(&tiny_config());
    fs::write(ws.config(), r#"{"schema_version": 1, "epochz": 3}"#).unwrap();
    let res = ws.run(&["generate"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("epochz"));

    fs::write(ws.config(), tiny_config().to_json()).unwrap();
    fs::create_dir_all(ws.layout(0).root).unwrap();
    fs::write(ws.layout(0).root.join(".lock"), "1").unwrap();
    let res = ws.run(&["generate"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("in use"));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let ws = Workspace::new(&tiny_config());
    let res = ws.run(&["train"]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    let mut other = tiny_config();
    ws.ok(&["generate"]);
    other.dataset.train = 640;
    fs::write(ws.config(), other.to_json()).unwrap();
    let res = ws.run(&["train"]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
}

#[test]
fn divergence_exits_with_code_four() {
    let mut cfg = tiny_config();
    cfg.ssl.adam.lr = 1e300;
    let ws = Workspace::new(&cfg);
    ws.ok(&["generate"]);
    let res = ws.run(&["train"]);
    assert_eq!(code(&res), 4, "{}", stderr(&res));
}

#[test]
fn report_averages_seeds() {
    let ws = Workspace::new(&tiny_config());
    for seed in ["0", "1"] {
        ws.ok(&["--seed", seed, "generate"]);
        ws.ok(&["--seed", seed, "train"]);
        ws.ok(&["--seed", seed, "evaluate"]);
    }
    ws.ok(&["report"]);
    let agg = read_report(&ws.out().join("report.csv")).unwrap();
    let s0 = read_report(&ws.layout(0).stability(Objective::Simclr)).unwrap();
    let s1 = read_report(&ws.layout(1).stability(Objective::Simclr)).unwrap();
    assert_eq!(agg.len(), s0.len());
    for ((a, r0), r1) in agg.iter().zip(&s0).zip(&s1) {
        assert_eq!((a.n, &a.method, &a.metric), (r0.n, &r0.method, &r0.metric));
        assert!((a.value - (r0.value + r1.value) / 2.0).abs() < 1e-12);
        assert!((a.stderr - (r0.value - r1.value).abs() / 2.0).abs() < 1e-12);
        assert_eq!(a.seed, "all");
    }
}

#[test]
fn env_var_sets_default_output_root() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), tiny_config().to_json()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_shiftlab"))
        .arg("--config")
        .arg(dir.path().join("c.json"))
        .arg("generate")
        .env("SHIFTLAB_OUT", dir.path().join("from-env"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-env/seed-0/data/train_seen.csv").exists());
}
