//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dpanet::checkpoint::{load_checkpoint, save_checkpoint};
use dpanet::data::{load_csv, synth_multiperiodic};
use dpanet::gradcheck::{run_suite, tiny_config};
use dpanet::numerics::{irfft, num_bins, rfft, Real, Tape, Tensor};
use dpanet::params::{Mode, ParamStore, Session};
use dpanet::pyramid::{frequency_bands, make_band_partition};
use dpanet::revin::{revin_denormalize, revin_normalize, Revin, DEFAULT_EPS};
use dpanet::trainer::{evaluate, train};
use dpanet::{make_variant, ModelConfig, PreparedData, Split, SplitPolicy, TrainConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_soundness() -> Outcome {
    let start = Instant::now();
    let report = run_suite(None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{} components, worst rel err {:.2e}, {secs:.1}s",
        report.components.len(),
        report.worst()
    );
    if !report.passed() {
        return Err(format!("{detail}; failing: {}", report.failures().join(", ")));
    }
    check(secs < 60.0, detail)
}

fn partition_of_unity() -> Outcome {
    let mut worst = 0.0f64;
    for len in [8, 96, 192] {
        for levels in [2, 3, 4] {
            let mut rng = ChaCha8Rng::seed_from_u64((len * 10 + levels) as u64);
            let x = Tensor::<f32>::randn(vec![4, len, 3], 1.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let partition = make_band_partition(num_bins(len), levels).map_err(|e| e.to_string())?;
            let bands = frequency_bands(&mut tape, xv, &partition).map_err(|e| e.to_string())?;
            let mut sum = vec![0.0f32; x.numel()];
            for b in bands {
                for (acc, v) in sum.iter_mut().zip(tape.value(b).data()) {
                    *acc += v;
                }
            }
            let err = sum
                .iter()
                .zip(x.data())
                .map(|(a, b)| f64::from((a - b).abs()))
                .fold(0.0, f64::max);
            worst = worst.max(err);
        }
    }
    check(worst < 1e-5, format!("max abs err {worst:.2e} over 9 (L, S) pairs in f32"))
}

fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let l = x.len();
    (0..num_bins(l))
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &v)| {
                let a = -2.0 * PI * ((k * n) % l) as f64 / l as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

fn inverse_pair_error<T: Real>(x: &[f64]) -> Result<f64, String> {
    let xt: Vec<T> = x.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let back = irfft(&rfft(&xt).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok(back
        .iter()
        .zip(x)
        .map(|(a, b)| (a.to_f64_lossy() - b).abs())
        .fold(0.0, f64::max))
}

fn fft_oracles() -> Outcome {
    let (mut dft_err, mut pair64, mut pair32) = (0.0f64, 0.0f64, 0.0f64);
    for len in [2usize, 4, 8, 96, 720] {
        let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
        let x = Tensor::<f64>::randn(vec![len], 1.0, &mut rng).data().to_vec();
        let spec = rfft(&x).map_err(|e| e.to_string())?;
        for (k, (re, im)) in naive_dft(&x).into_iter().enumerate() {
            dft_err = dft_err.max((spec.re()[k] - re).abs()).max((spec.im()[k] - im).abs());
        }
        pair64 = pair64.max(inverse_pair_error::<f64>(&x)?);
        pair32 = pair32.max(inverse_pair_error::<f32>(&x)?);
    }
    check(
        dft_err < 1e-5 && pair64 < 1e-5 && pair32 < 1e-5,
        format!("vs naive DFT {dft_err:.2e}, inverse pair f64 {pair64:.2e}, f32 {pair32:.2e}"),
    )
}

fn revin_round_trip() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let layer = Revin::new(&mut store, 7, true, DEFAULT_EPS);
        let (g, b) = layer.affine.expect("affine");
        store
            .set(g, Tensor::randn(vec![7], 0.3, &mut rng).map(|v| 1.0 + v))
            .map_err(|e| e.to_string())?;
        store.set(b, Tensor::randn(vec![7], 0.5, &mut rng)).map_err(|e| e.to_string())?;
        let x = Tensor::<f64>::randn(vec![8, 96, 7], 4.0, &mut rng).map(|v| v + 25.0);
        let mut sess = Session::new(&store, Mode::Eval);
        let xv = sess.tape.constant(x.clone());
        let (y, state) = revin_normalize(&mut sess, xv, &layer).map_err(|e| e.to_string())?;
        let back = revin_denormalize(&mut sess, y, &state, &layer).map_err(|e| e.to_string())?;
        worst = worst.max(sess.tape.value(back).max_abs_diff(&x));
    }
    check(worst < 1e-5, format!("max abs err {worst:.2e} over 10 random batches"))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let mut results = Vec::new();
    for seed in 0..3u64 {
        let raw = synth_multiperiodic(2000, 2, &[24.0, 96.0], &[1.0, 1.0], 0.0, seed).map_err(|e| e.to_string())?;
        let data = PreparedData::new(raw, SplitPolicy::Ratio702010, 8, 4).map_err(|e| e.to_string())?;
        let cfg = tiny_config(Variant::Full);
        let (model, mut store) = make_variant::<f32>(&cfg, seed).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            lr: 1e-2,
            batch_size: 64,
            max_epochs: 1000,
            patience: 1000,
            max_steps: Some(500),
            seed,
            ..TrainConfig::default()
        };
        let out = train(&model, &mut store, &data, &tc, |_| {}).map_err(|e| e.to_string())?;
        if out.diverged.is_some() {
            return Err(format!("seed {seed} diverged"));
        }
        let report = evaluate(&model, &out.best, &data, Split::Train, 256).map_err(|e| e.to_string())?;
        results.push((report.mse, out.steps));
    }
    let passed = results.iter().filter(|(mse, steps)| *mse < 0.01 && *steps <= 500).count();
    let secs = start.elapsed().as_secs_f64();
    let shown: Vec<String> = results.iter().map(|(m, s)| format!("{m:.5} ({s} steps)")).collect();
    check(
        passed == 3 && secs < 300.0,
        format!("train MSE {}; {passed}/3 below 0.01, {secs:.1}s", shown.join(", ")),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation_direction() -> Outcome {
    let mut full = Vec::new();
    let mut plain = Vec::new();
    for seed in 0..3u64 {
        let raw = synth_multiperiodic(4000, 2, &[24.0, 96.0, 336.0], &[1.0, 0.7, 0.5], 0.1, 100 + seed)
            .map_err(|e| e.to_string())?;
        let data = PreparedData::new(raw, SplitPolicy::Ratio702010, 48, 24).map_err(|e| e.to_string())?;
        for variant in [Variant::Full, Variant::NoCrossFusion] {
            let cfg = ModelConfig {
                l_in: 48,
                l_pred: 24,
                channels: 2,
                levels: 3,
                d_model: 16,
                heads: 2,
                d_ff: 32,
                dropout: 0.0,
                variant,
                ..ModelConfig::default()
            };
            let (model, mut store) = make_variant::<f32>(&cfg, seed).map_err(|e| e.to_string())?;
            let tc = TrainConfig {
                lr: 1e-3,
                max_epochs: 1000,
                patience: 1000,
                max_steps: Some(300),
                seed,
                ..TrainConfig::default()
            };
            let out = train(&model, &mut store, &data, &tc, |_| {}).map_err(|e| e.to_string())?;
            if out.diverged.is_some() {
                return Err(format!("{variant} seed {seed} diverged"));
            }
            let mse = evaluate(&model, &out.best, &data, Split::Test, 256)
                .map_err(|e| e.to_string())?
                .mse;
            match variant {
                Variant::Full => full.push(mse),
                _ => plain.push(mse),
            }
        }
    }
    let (f, n) = (median(full), median(plain));
    check(f <= n, format!("median test MSE full {f:.4} vs no_cross_fusion {n:.4}"))
}

fn etth1_sanity() -> Outcome {
    let dir = std::env::var_os("DPANET_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| "data".into());
    let path = dir.join("ETTh1.csv");
    if !path.exists() {
        return Err(format!(
            "dataset missing: {} not found (set DPANET_DATA_DIR to the directory holding ETTh1.csv)",
            path.display()
        ));
    }
    let start = Instant::now();
    let raw = load_csv(&path).map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        channels: raw.num_channels(),
        ..ModelConfig::default()
    };
    let data = PreparedData::new(raw, SplitPolicy::EttHourly, cfg.l_in, 96).map_err(|e| e.to_string())?;
    let (model, mut store) = make_variant::<f32>(&cfg, 2024).map_err(|e| e.to_string())?;
    let tc = TrainConfig::default();
    let out = train(&model, &mut store, &data, &tc, |_| {}).map_err(|e| e.to_string())?;
    if out.diverged.is_some() {
        return Err("training diverged".into());
    }
    let mse = evaluate(&model, &out.best, &data, Split::Test, 256)
        .map_err(|e| e.to_string())?
        .mse;
    let secs = start.elapsed().as_secs_f64();
    check(
        mse <= 0.50 && out.history.len() <= 10,
        format!("test MSE {mse:.4} after {} epochs, {secs:.0}s", out.history.len()),
    )
}

const TINY: &str = "\
data.path = synth.csv
data.policy = ratio_702010
model.C = 2
model.L_in = 16
model.L_pred = 8
model.S = 2
model.d_model = 8
model.heads = 2
model.d_ff = 16
train.lr = 0.003
train.batch_size = 16
train.max_epochs = 3
train.patience = 3
seed = 11
";

fn dpanet(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dpanet"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("dpanet {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    dpanet(dir, &["synth", "--set", "synth.rows=600", "--set", "synth.noise=0.1", "--set", "synth.output=synth.csv"])?;
    std::fs::write(dir.join("run.cfg"), TINY).map_err(|e| e.to_string())?;
    dpanet(dir, &["train", "--config", "run.cfg", "--out", "a"])?;
    dpanet(dir, &["train", "--config", "run.cfg", "--out", "b"])?;
    let mut detail = Vec::new();
    for name in ["history.jsonl", "report.jsonl"] {
        let a = std::fs::read(dir.join("a").join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.join("b").join(name)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{name} differs between runs"));
        }
        detail.push(format!("{name} {} bytes", a.len()));
    }
    Ok(format!("bit-identical {}", detail.join(", ")))
}

fn checkpoint_round_trip() -> Outcome {
    let raw = synth_multiperiodic(600, 2, &[24.0, 96.0], &[1.0, 0.5], 0.05, 9).map_err(|e| e.to_string())?;
    let data = PreparedData::new(raw, SplitPolicy::Ratio702010, 8, 4).map_err(|e| e.to_string())?;
    let cfg = tiny_config(Variant::Full);
    let (model, mut store) = make_variant::<f32>(&cfg, 9).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        lr: 3e-3,
        max_steps: Some(40),
        seed: 9,
        ..TrainConfig::default()
    };
    let out = train(&model, &mut store, &data, &tc, |_| {}).map_err(|e| e.to_string())?;
    let before = evaluate(&model, &out.best, &data, Split::Test, 64).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("model.ckpt");
    save_checkpoint(&path, &cfg, &out.best).map_err(|e| e.to_string())?;
    let (loaded_model, loaded) = load_checkpoint::<f32>(&path, &cfg).map_err(|e| e.to_string())?;
    let after = evaluate(&loaded_model, &loaded, &data, Split::Test, 64).map_err(|e| e.to_string())?;
    check(
        before == after && before.mse.to_bits() == after.mse.to_bits(),
        format!("test MSE {:?} before, {:?} after", before.mse, after.mse),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient soundness", gradient_soundness),
        ("spectral partition of unity", partition_of_unity),
        ("FFT oracle and inverse pair", fft_oracles),
        ("RevIN round trip", revin_round_trip),
        ("overfit noiseless two-sine data", overfit),
        ("ablation direction full <= no_cross_fusion", ablation_direction),
        ("ETTh1 horizon 96 test MSE <= 0.50", etth1_sanity),
        ("training determinism through the CLI", determinism),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("criterion {}: {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let took = Duration::from_secs_f64(start.elapsed().as_secs_f64());
        match result {
            Ok(detail) => println!("PASS {label} ({detail}) [{took:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {label} ({detail}) [{took:.1?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
