use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trits_core::report::{read_csv, stream_metrics, MetricRow, PlotPoint};

const TINY: &str = "\
model.lookback = 48
model.horizon = 12
freq.levels = 2
freq.patch_len = 8
freq.d_model = 8
vision.patch = 4
vision.depth = 1
vision.d_model = 8
vision.d_state = 4
fusion.hidden = 8
trainer.batch_size = 32
trainer.max_epochs = 3
";

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from("date,a,b\n");
        for t in 0..600 {
            let w = 2.0 * std::f64::consts::PI * t as f64 / 24.0;
            csv.push_str(&format!("{t},{},{}\n", w.sin() + 0.002 * t as f64, w.cos()));
        }
        std::fs::write(dir.path().join("sine.csv"), csv).unwrap();
        std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn trits(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_trits"))
            .args(args)
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--config", "tiny.cfg", "--data", "sine.csv", "--out", out];
        args.extend_from_slice(extra);
        let o = self.trits(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn train_writes_artifacts() {
    let f = Fixture::new();
    f.train("run", &[]);
    for file in ["checkpoint.trts", "metrics.csv", "gate_report.csv", "predictions.csv", "config.txt", "run.csv"] {
        assert!(f.path("run").join(file).is_file(), "{file}");
    }
    let metrics: Vec<MetricRow> = read_csv(f.path("run/metrics.csv")).unwrap();
    assert!(metrics.iter().any(|m| m.split == "best_test"));
}

#[test]
fn unknown_key_exits_2_with_suggestion() {
    let f = Fixture::new();
    let o = f.trits(&["train", "--data", "sine.csv", "--out", "x", "--override", "freq.wavlet=db2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("freq.wavelet"));
}

#[test]
fn missing_checkpoint_exits_1() {
    let f = Fixture::new();
    let o = f.trits(&["eval", "--data", "sine.csv", "--out", "nowhere"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn same_seed_same_metrics() {
    let f = Fixture::new();
    f.train("a", &["--override", "trainer.seed=7"]);
    f.train("b", &["--override", "trainer.seed=7"]);
    assert_eq!(read(f.path("a/metrics.csv")), read(f.path("b/metrics.csv")));
    assert_eq!(std::fs::read(f.path("a/checkpoint.trts")).unwrap(), std::fs::read(f.path("b/checkpoint.trts")).unwrap());
}

#[test]
fn saved_config_reproduces_the_run() {
    let f = Fixture::new();
    f.train("a", &["--seed", "3"]);
    let o = f.trits(&["train", "--config", "a/config.txt", "--data", "sine.csv", "--out", "b"]);
    assert!(o.status.success());
    assert_eq!(read(f.path("a/metrics.csv")), read(f.path("b/metrics.csv")));
}

#[test]
fn predictions_file_reproduces_metrics() {
    let f = Fixture::new();
    f.train("run", &[]);
    let (mse, mae, n) = stream_metrics(f.path("run/predictions.csv")).unwrap();
    let metrics: Vec<MetricRow> = read_csv(f.path("run/metrics.csv")).unwrap();
    let test = metrics.iter().find(|m| m.split == "best_test").unwrap();
    assert!((mse - test.mse).abs() <= 1e-9 && (mae - test.mae).abs() <= 1e-9);
    assert!(mae * mae <= mse);
    assert_eq!(n % (12 * 2), 0);
}

#[test]
fn eval_emits_one_row_per_horizon() {
    let f = Fixture::new();
    f.train("runs", &["--horizons", "12,24"]);
    let o = f.trits(&["eval", "--data", "sine.csv", "--out", "runs", "--horizons", "12,24"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].contains(" 12 ") && rows[1].contains(" 24 "));
}

#[test]
fn eval_after_overfit_is_small() {
    let f = Fixture::new();
    f.train("fit", &["--override", "trainer.max_epochs=60", "--override", "trainer.patience=60", "--override", "trainer.lr=0.005"]);
    let o = f.trits(&["eval", "--data", "sine.csv", "--out", "fit", "--split", "train"]);
    assert!(o.status.success());
    let line = stdout(&o).lines().nth(1).unwrap().to_string();
    let mse: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(mse < 0.01, "{line}");
}

#[test]
fn predict_writes_horizon_rows() {
    let f = Fixture::new();
    f.train("run", &[]);
    let o = f.trits(&["predict", "--data", "sine.csv", "--out", "run"]);
    assert!(o.status.success());
    assert_eq!(read(f.path("run/forecast.csv")).lines().count(), 1 + 12 * 2);
}

#[test]
fn stats_of_a_ramp() {
    let f = Fixture::new();
    let ramp: String = std::iter::once("date,v\n".to_string())
        .chain((0..500).map(|t| format!("{t},{}\n", 0.5 * t as f64)))
        .collect();
    std::fs::write(f.path("ramp.csv"), ramp).unwrap();
    let o = f.trits(&["stats", "--data", "ramp.csv", "--data", "sine.csv"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let ramp_line = out.lines().find(|l| l.starts_with("ramp")).unwrap();
    let ratio: f64 = ramp_line.split_whitespace().last().unwrap().parse().unwrap();
    assert!(ratio.abs() < 1e-9, "{ramp_line}");
    assert!(out.lines().any(|l| l.starts_with("sine")));
}

#[test]
fn plot_files_have_the_expected_structure() {
    let f = Fixture::new();
    f.train("runs", &["--horizons", "12,24"]);
    let o = f.trits(&["plot", "--out", "runs"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let gates: Vec<PlotPoint> = read_csv(f.path("runs/plots/gates.csv")).unwrap();
    for x in ["sine/h12", "sine/h24"] {
        assert_eq!(gates.iter().filter(|p| p.x == x).count(), 3);
    }

    let overlay: Vec<PlotPoint> = read_csv(f.path("runs/plots/forecast.csv")).unwrap();
    let mut series: Vec<&str> = overlay.iter().map(|p| p.series.as_str()).collect();
    series.dedup();
    for s in series {
        let t = if s.starts_with("sine/h12") { 12 } else { 24 };
        assert_eq!(overlay.iter().filter(|p| p.series == s).count(), t, "{s}");
    }

    let scaling: Vec<PlotPoint> = read_csv(f.path("runs/plots/scaling.csv")).unwrap();
    let ls: Vec<usize> = scaling.iter().map(|p| p.x.parse().unwrap()).collect();
    assert!(ls.windows(2).all(|w| w[0] < w[1]));
    assert!(scaling.windows(2).all(|w| w[0].y < w[1].y), "{scaling:?}");
}

#[test]
fn plot_without_inputs_fails() {
    let f = Fixture::new();
    std::fs::create_dir_all(f.path("empty")).unwrap();
    let o = f.trits(&["plot", "--out", "empty"]);
    assert_eq!(o.status.code(), Some(1));
}
