//! Acceptance suite. Runs each numbered criterion at its pinned tolerance
//! and prints one `criterion N ...: PASS|FAIL|BLOCKED` line per criterion.
//!
//! Plain binary (`harness = false`) so the lines always reach the log.
//! Pass criterion numbers as arguments to run a subset. The process exits
//! nonzero on FAIL only when `TRITS_ACCEPTANCE_STRICT=1`; BLOCKED means
//! a required dataset file is missing (see `TRITS_DATA_DIR`).

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use trits_core::config::Config;
use trits_core::dataio::{dataset_stats, load_csv, synthetic_sine_trend, SplitSpec, SyntheticSpec};
use trits_core::freq::{wavedec, waverec, WaveletFamily, WaveletFilter};
use trits_core::fusion::GateNetwork;
use trits_core::model::TriTs;
use trits_core::nn::ParamBuilder;
use trits_core::tensor::{Graph, ParamStore, Tensor};
use trits_core::trainer::{ablate, evaluate, repeat_last_baseline, train, Splits, Variant};
use trits_core::vision::{detect_period, selective_scan, Direction, VisionBranch, VisionConfig};

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

use Outcome::{Blocked, Fail, Pass};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("TRITS_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

/// The small configuration used for the synthetic runs.
fn tiny_config() -> Config {
    let mut c = Config::default();
    c.lookback = 96;
    c.horizon = 24;
    c.freq_d_model = 16;
    c.vision_d_model = 16;
    c.vision_d_state = 8;
    c.vision_depth = 2;
    c.gate_hidden = 16;
    c.max_epochs = 100;
    c
}

fn synthetic_splits(cfg: &Config) -> Splits {
    let ds = synthetic_sine_trend(&SyntheticSpec::default()).unwrap();
    let spec = SplitSpec::benchmark("synthetic", ds.rows());
    Splits::prepare(&ds, spec, cfg.lookback).unwrap()
}

// 1 ----------------------------------------------------------------------

fn wavelet_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for family in [WaveletFamily::Haar, WaveletFamily::Db2] {
        let filter = WaveletFilter::new(family);
        for n in [96usize, 192, 336, 720] {
            let lengths = filter.level_lengths(n, 3);
            for _ in 0..100 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let back = waverec(&wavedec(&x, &filter, 3), &filter, &lengths).unwrap();
                let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(err);
                trials += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-10 && secs < 10.0,
        format!("{trials} signals, max error {worst:.2e} (limit 1e-10), {secs:.2}s (limit 10s)"),
    )
}

// 2 ----------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut cfg = Config::default();
    cfg.lookback = 32;
    cfg.horizon = 8;
    cfg.wavelet = WaveletFamily::Haar;
    cfg.freq_levels = 3;
    cfg.freq_patch_len = 4;
    cfg.freq_d_model = 6;
    cfg.vision_period = 8;
    cfg.vision_patch = 2;
    cfg.vision_depth = 2;
    cfg.vision_d_model = 6;
    cfg.vision_d_state = 3;
    cfg.vision_expand = 2;
    cfg.gate_hidden = 5;
    let mut model = TriTs::new(&cfg, 2, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // move every zero-initialized tensor off zero so no gradient vanishes
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        let t = model.params.get_mut(id);
        if t.data().iter().all(|v| *v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let x = Tensor::from_fn([3, 32, 2], |i| (i as f64 * 0.37).sin() + 0.1 * (i as f64 * 1.3).cos());
    let y = Tensor::from_fn([3, 8, 2], |i| (i as f64 * 0.21).cos());

    let loss_of = |m: &TriTs| -> f64 {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &x).unwrap().output;
        let o = g.value(out);
        o.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / o.numel() as f64
    };

    let mut g = Graph::new();
    let pass = model.forward(&mut g, &x).unwrap();
    let target = g.constant(y.clone());
    let d = g.sub(pass.output, target).unwrap();
    let sq = g.square(d).unwrap();
    let loss = g.mean_all(sq).unwrap();
    model.params.zero_grad();
    g.backward_into(loss, &mut model.params).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let checks = 24;
    for _ in 0..checks {
        let id = ids[rng.random_range(0..ids.len())];
        let k = rng.random_range(0..model.params.get(id).numel());
        let analytic = model.params.get(id).grad().map_or(0.0, |g| g[k]);
        let orig = model.params.get(id).data()[k];
        model.params.get_mut(id).data_mut()[k] = orig + h;
        let up = loss_of(&model);
        model.params.get_mut(id).data_mut()[k] = orig - h;
        let down = loss_of(&model);
        model.params.get_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_at = format!("{}[{k}]", model.params.name(id));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 60.0,
        format!("{checks} parameters, max relative error {worst:.2e} at {worst_at} (limit 1e-4), {secs:.2}s"),
    )
}

// 3 ----------------------------------------------------------------------

struct ScanCase {
    b: usize,
    n: usize,
    di: usize,
    ds: usize,
    u: Vec<f64>,
    delta: Vec<f64>,
    a_log: Vec<f64>,
    bm: Vec<f64>,
    cm: Vec<f64>,
}

impl ScanCase {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let (b, n, di, ds) = (
            rng.random_range(1..=3),
            rng.random_range(1..=64),
            rng.random_range(1..=4),
            rng.random_range(1..=5),
        );
        let mut draw = |len: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(lo..hi)).collect()
        };
        Self {
            b,
            n,
            di,
            ds,
            u: draw(b * n * di, -1.0, 1.0),
            delta: draw(b * n * di, 1e-3, 0.5),
            a_log: draw(di * ds, -1.0, 1.5),
            bm: draw(b * n * ds, -1.0, 1.0),
            cm: draw(b * n * ds, -1.0, 1.0),
        }
    }

    /// Step-by-step recurrence with explicit loops.
    fn naive(&self, reverse: bool) -> Vec<f64> {
        let (b, n, di, ds) = (self.b, self.n, self.di, self.ds);
        let mut y = vec![0.0; b * n * di];
        for bi in 0..b {
            for d in 0..di {
                let mut h = vec![0.0; ds];
                let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
                for t in order {
                    let dt = self.delta[(bi * n + t) * di + d];
                    let u = self.u[(bi * n + t) * di + d];
                    let mut acc = 0.0;
                    for j in 0..ds {
                        let a = -self.a_log[d * ds + j].exp();
                        let abar = (dt * a).exp();
                        let bbar = (abar - 1.0) / a * self.bm[(bi * n + t) * ds + j];
                        h[j] = abar * h[j] + bbar * u;
                        acc += self.cm[(bi * n + t) * ds + j] * h[j];
                    }
                    y[(bi * n + t) * di + d] = acc;
                }
            }
        }
        y
    }

    fn run(&self, direction: Direction) -> Vec<f64> {
        let (b, n, di, ds) = (self.b, self.n, self.di, self.ds);
        let mut g = Graph::new();
        let u = g.constant(Tensor::new([b, n, di], self.u.clone()).unwrap());
        let dl = g.constant(Tensor::new([b, n, di], self.delta.clone()).unwrap());
        let al = g.constant(Tensor::new([di, ds], self.a_log.clone()).unwrap());
        let bv = g.constant(Tensor::new([b, n, ds], self.bm.clone()).unwrap());
        let cv = g.constant(Tensor::new([b, n, ds], self.cm.clone()).unwrap());
        let y = selective_scan(&mut g, u, dl, al, bv, cv, direction).unwrap();
        g.value(y).data().to_vec()
    }

    /// Same case with the token axis reversed.
    fn flipped(&self) -> Self {
        let flip = |v: &[f64], w: usize| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            for bi in 0..self.b {
                for t in 0..self.n {
                    let src = (bi * self.n + t) * w;
                    let dst = (bi * self.n + self.n - 1 - t) * w;
                    out[dst..dst + w].copy_from_slice(&v[src..src + w]);
                }
            }
            out
        };
        Self {
            b: self.b,
            n: self.n,
            di: self.di,
            ds: self.ds,
            u: flip(&self.u, self.di),
            delta: flip(&self.delta, self.di),
            a_log: self.a_log.clone(),
            bm: flip(&self.bm, self.ds),
            cm: flip(&self.cm, self.ds),
        }
    }

    fn flip_output(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for bi in 0..self.b {
            for t in 0..self.n {
                let src = (bi * self.n + t) * self.di;
                let dst = (bi * self.n + self.n - 1 - t) * self.di;
                out[dst..dst + self.di].copy_from_slice(&y[src..src + self.di]);
            }
        }
        out
    }
}

fn scan_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut flip_exact = true;
    for _ in 0..50 {
        let case = ScanCase::random(&mut rng);
        for (dir, rev) in [(Direction::Forward, false), (Direction::Backward, true)] {
            let got = case.run(dir);
            let want = case.naive(rev);
            let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
        }
        let backward = case.run(Direction::Backward);
        let via_flip = case.flip_output(&case.flipped().run(Direction::Forward));
        flip_exact &= backward.iter().zip(&via_flip).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    verdict(
        worst <= 1e-10 && flip_exact,
        format!("50 instances x 2 directions, max error {worst:.2e} (limit 1e-10), flip identity bit-exact: {flip_exact}"),
    )
}

// 4 ----------------------------------------------------------------------

fn gate_conservation() -> Outcome {
    let (b, t, c) = (2, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let gate = GateNetwork::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, c, 8).unwrap();
    let zero_store = store.clone();
    let down = gate.down.weight;
    store
        .get_mut(down)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-2.0..2.0));
    let mut worst_sum = 0.0f64;
    let mut min_weight = f64::INFINITY;
    let mut zero_exact = true;
    for _ in 0..1000 {
        let mut g = Graph::new();
        let outs: Vec<_> = (0..3)
            .map(|_| {
                let scale = rng.random_range(0.1..10.0);
                g.constant(Tensor::from_fn([b, t, c], |_| rng.random_range(-scale..scale)))
            })
            .collect();
        let w = gate.weights(&mut g, &store, &outs).unwrap();
        for i in 0..b * t * c {
            let vals: Vec<f64> = w.iter().map(|&wj| g.value(wj).data()[i]).collect();
            worst_sum = worst_sum.max((vals.iter().sum::<f64>() - 1.0).abs());
            min_weight = vals.iter().copied().fold(min_weight, f64::min);
        }
        // parameter handles are cached per graph, so the zero gate gets its own
        let mut g0 = Graph::new();
        let outs0: Vec<_> = outs.iter().map(|&o| g0.constant(g.value(o).clone())).collect();
        let w0 = gate.weights(&mut g0, &zero_store, &outs0).unwrap();
        zero_exact &= w0
            .iter()
            .all(|&wj| g0.value(wj).data().iter().all(|&v| v == 1.0 / 3.0));
    }
    verdict(
        worst_sum <= 1e-6 && min_weight >= 0.0 && zero_exact,
        format!(
            "1000 triples, max |sum-1| {worst_sum:.2e} (limit 1e-6), min weight {min_weight:.2e}, zero gate exactly 1/3: {zero_exact}"
        ),
    )
}

// 5 ----------------------------------------------------------------------

fn synthetic_overfit() -> Outcome {
    let start = Instant::now();
    let mut cfg = tiny_config();
    cfg.max_epochs = 500;
    let splits = synthetic_splits(&cfg);
    let out = train(&cfg, &splits).unwrap();
    let eval = evaluate(&out.model, &splits.train, "train", false).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        eval.report.mse < 0.01 && secs < 300.0,
        format!(
            "train MSE {:.3e} (limit 1e-2) after {} epochs (best {}), {secs:.1}s (limit 300s)",
            eval.report.mse,
            out.history.len(),
            out.best_epoch
        ),
    )
}

// 6 ----------------------------------------------------------------------

fn benchmark_smoke() -> Outcome {
    let path = data_dir().join("ETTh1.csv");
    if !path.exists() {
        return Blocked(format!("dataset not found at {}", path.display()));
    }
    let start = Instant::now();
    let ds = load_csv(&path, "date").unwrap();
    let cfg = Config::default();
    let spec = SplitSpec::benchmark(&ds.name, ds.rows());
    let splits = Splits::prepare(&ds, spec, cfg.lookback).unwrap();
    let out = train(&cfg, &splits).unwrap();
    let test = evaluate(&out.model, &splits.test, "test", false).unwrap().report;
    let base = repeat_last_baseline(&splits.test, cfg.lookback, cfg.horizon, "test").unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        test.mse <= 0.9 * base.mse && secs < 1800.0,
        format!(
            "test MSE {:.4} vs repeat-last {:.4} (need <= {:.4}), {} epochs, {secs:.0}s (limit 1800s)",
            test.mse,
            base.mse,
            0.9 * base.mse,
            out.history.len()
        ),
    )
}

// 7 ----------------------------------------------------------------------

fn vision_forward_seconds(lookback: usize, runs: usize) -> f64 {
    let (b, c, t, period) = (8, 7, 96, 24);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let branch = VisionBranch::new(
        &mut ParamBuilder::new(&mut store, &mut rng),
        c,
        lookback,
        t,
        period,
        VisionConfig::default(),
    )
    .unwrap();
    let x = Tensor::from_fn([b, lookback, c], |i| (i as f64 * 0.01).sin());
    let mut times: Vec<f64> = (0..=runs)
        .map(|_| {
            let t0 = Instant::now();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = branch.forward(&mut g, &store, xv).unwrap();
            std::hint::black_box(g.value(y));
            t0.elapsed().as_secs_f64()
        })
        .skip(1) // warm-up
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

fn scan_scaling() -> Outcome {
    let short = vision_forward_seconds(960, 5);
    let long = vision_forward_seconds(1920, 5);
    let ratio = long / short;
    verdict(
        ratio <= 2.5,
        format!("median forward {short:.4}s at L=960, {long:.4}s at L=1920, ratio {ratio:.2} (limit 2.5)"),
    )
}

// 8 ----------------------------------------------------------------------

/// Benchmark files in ascending order of the published covariance ratio.
const RATIO_ORDER: [&str; 7] = ["weather", "ETTm2", "ETTm1", "ETTh2", "ETTh1", "electricity", "traffic"];

fn dataset_statistics() -> Outcome {
    let dir = data_dir();
    let missing: Vec<String> = RATIO_ORDER
        .iter()
        .map(|n| dir.join(format!("{n}.csv")))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Blocked(format!("dataset files not found: {}", missing.join(", ")));
    }
    let cfg = Config::default();
    let mut ok = true;
    let mut notes = Vec::new();
    let mut ratios = Vec::new();
    for name in RATIO_ORDER {
        let ds = load_csv(dir.join(format!("{name}.csv")), &cfg.date_column).unwrap();
        let s = dataset_stats(&ds, cfg.lookback, cfg.sma_window).unwrap();
        if name.starts_with("ETTh") {
            let exact = s.dim == 7 && s.samples == (8545, 2881, 2881);
            ok &= exact;
            notes.push(format!("{name} dim {} samples {:?}", s.dim, s.samples));
        }
        ratios.push((name, s.cov_ratio));
    }
    let ordered = ratios.windows(2).all(|w| w[0].1 < w[1].1);
    ok &= ordered;
    let listing: Vec<String> = ratios.iter().map(|(n, r)| format!("{n} {r:.4}")).collect();
    verdict(
        ok,
        format!("{}; ratios {} (ordered: {ordered})", notes.join(", "), listing.join(" < ")),
    )
}

// 9 ----------------------------------------------------------------------

fn ablation() -> Outcome {
    let cfg = tiny_config();
    let splits = synthetic_splits(&cfg);
    let start = Instant::now();
    let rows = ablate(&cfg, &splits, &Variant::STANDARD, 1).unwrap();
    println!("    {:<20} {:>10} {:>10}", "variant", "MSE", "MAE");
    for r in &rows {
        println!("    {:<20} {:>10.3e} {:>10.3e}", r.variant.label(), r.report.mse, r.report.mae);
    }
    let full = rows[0].report.mse;
    let beaten: Vec<String> = rows[1..]
        .iter()
        .filter(|r| r.report.mse < full)
        .map(|r| r.variant.label())
        .collect();
    verdict(
        rows.len() == 5 && beaten.is_empty(),
        format!(
            "full MSE {full:.3e}; variants below it: [{}], {:.0}s",
            beaten.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

// 10 ---------------------------------------------------------------------

/// Highest interior local maximum of a directly summed autocorrelation.
fn brute_force_period(x: &[f64]) -> usize {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let r = |k: usize| -> f64 {
        let mut num = 0.0;
        for t in 0..n - k {
            num += (x[t] - mean) * (x[t + k] - mean);
        }
        let mut den = 0.0;
        for v in x {
            den += (v - mean) * (v - mean);
        }
        num / den
    };
    let acf: Vec<f64> = (0..=n / 2 + 1).map(r).collect();
    let mut best: Option<usize> = None;
    for k in 2..=n / 2 {
        let right = if k + 1 <= n / 2 { acf[k + 1] } else { f64::NEG_INFINITY };
        if acf[k] > acf[k - 1] && acf[k] >= right && best.is_none_or(|j| acf[k] > acf[j]) {
            best = Some(k);
        }
    }
    best.unwrap_or(0)
}

/// Detection rate of P=24 over 100 seeded noisy sines of length `l`, and
/// how often the detector agrees with the brute-force oracle.
fn period_trials(l: usize) -> (usize, usize) {
    // signal power of a unit sine is 1/2; 10 dB puts the noise power at 1/20
    let noise = Normal::new(0.0, (0.5f64 / 10.0).sqrt()).unwrap();
    let mut hits = 0;
    let mut agree = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let phase = rng.random_range(0.0..2.0 * PI);
        let x: Vec<f64> = (0..l)
            .map(|t| (2.0 * PI * t as f64 / 24.0 + phase).sin() + noise.sample(&mut rng))
            .collect();
        let detected = detect_period(&Tensor::new([1, l, 1], x.clone()).unwrap()).unwrap();
        hits += usize::from(detected == 24);
        agree += usize::from(detected == brute_force_period(&x));
    }
    (hits, agree)
}

fn period_detection() -> Outcome {
    // detection runs once on the training segment, so the trials use the
    // length of the synthetic training segment
    let cfg = tiny_config();
    let l = synthetic_splits(&cfg).train.rows();
    let (hits, agree) = period_trials(l);
    let (short_hits, short_agree) = period_trials(96);
    verdict(
        hits >= 95 && agree == 100 && short_agree == 100,
        format!(
            "L={l}: P=24 in {hits}/100 trials (need 95), oracle agreement {agree}/100; \
             L=96 for reference: {short_hits}/100, oracle agreement {short_agree}/100"
        ),
    )
}

// -----------------------------------------------------------------------

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "wavelet round trip", wavelet_round_trip),
    (2, "gradient integrity", gradient_check),
    (3, "scan oracle", scan_oracle),
    (4, "gate conservation", gate_conservation),
    (5, "synthetic overfit", synthetic_overfit),
    (6, "benchmark smoke", benchmark_smoke),
    (7, "linear scan scaling", scan_scaling),
    (8, "dataset statistics", dataset_statistics),
    (9, "ablation harness", ablation),
    (10, "period detection", period_detection),
];

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let strict = std::env::var("TRITS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let (mut passed, mut failed, mut blocked) = (0, 0, 0);
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run)
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Fail(format!("panicked: {msg}"))
            });
        let (tag, detail) = match outcome {
            Pass(d) => {
                passed += 1;
                ("PASS", d)
            }
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Blocked(d) => {
                blocked += 1;
                ("BLOCKED", d)
            }
        };
        println!("criterion {id} {name}: {tag} ({detail})");
    }
    println!("acceptance: {passed} passed, {failed} failed, {blocked} blocked");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
