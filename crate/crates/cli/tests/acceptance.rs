//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the verdict lines always reach stdout.
//! MNIST is read from `$MNIST_DIR`, defaulting to `data/mnist` at the
//! workspace root.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpuimac::imac::{decode, encode_ternary, CrossbarConfig};
use tpuimac::mptrain::{
    analog_pre_adc, class_scores, evaluate, load_mnist, predict, train_step1, train_step2, Backend, Hyper,
    LabeledDataset, TrainState,
};
use tpuimac::sched::{memory_report, run, Mode, Unit};
use tpuimac::systolic::{gemm_cycles, simulate_gemm_events};
use tpuimac::topology::{all_bundled, bundled};
use tpuimac::{GemmShape, LayerSpec, SystolicConfig};

const SEED: u64 = 1;

/// Criteria that cannot hold as stated and are reported red on purpose.
/// 5: an 8-bit ADC maps two class scores less than one LSB apart onto the
/// same code; the argmax tie then goes to the lower class index while exact
/// arithmetic still separates them, so per-sample identity with an
/// unquantized digital reference is not achievable in general.
const KNOWN_RED: &[u8] = &[5];

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| workspace().join("data/mnist"))
}

fn topology_file(name: &str) -> PathBuf {
    workspace().join("crates/core/topologies").join(format!("{name}.csv"))
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for case in 0..200 {
        let g = GemmShape::new(rng.random_range(1..=96), rng.random_range(1..=96), rng.random_range(1..=96));
        let cfg = SystolicConfig::with_array(rng.random_range(1..=32), rng.random_range(1..=32));
        let closed = gemm_cycles(g, &cfg).cycles;
        let replayed = simulate_gemm_events(g, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        if closed != replayed {
            return Err(format!("case {case}: {g:?} on {}x{}: closed form {closed}, replay {replayed}", cfg.rows, cfg.cols));
        }
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(60), format!("200/200 cases agree in {:.2}s", took.as_secs_f64()))
}

fn criterion_2() -> Verdict {
    let cfg = SystolicConfig::default();
    let fc = gemm_cycles(GemmShape::new(1, 1024, 10), &cfg).utilization;
    let conv_gemm = LayerSpec::conv("conv", 28, 5, 1, 32, 1).to_gemm().map_err(|e| e.to_string())?;
    let conv = gemm_cycles(conv_gemm, &cfg).utilization;
    check(
        fc < 0.02 && conv > 0.1 && conv_gemm.m >= 576 && conv_gemm.k >= 25,
        format!("fc (1,1024,10) {fc:.4}; conv ({},{},{}) {conv:.4}", conv_gemm.m, conv_gemm.k, conv_gemm.n),
    )
}

fn criterion_3() -> Verdict {
    let sys = SystolicConfig::default();
    let xbar = CrossbarConfig::default();
    let mut speedups = std::collections::HashMap::new();
    for t in all_bundled() {
        let r = run(&t, &sys, &xbar, Mode::Hybrid).map_err(|e| e.to_string())?;
        let conv: u64 = r.per_layer.iter().filter(|l| l.unit != Unit::Imac).map(|l| l.cycles).sum();
        let n_dense = t.dense_layers().count() as u64;
        if r.total_cycles != conv + n_dense {
            return Err(format!("{}: hybrid {} != conv {conv} + {n_dense}", t.name, r.total_cycles));
        }
        speedups.insert(t.name.clone(), r.speedup);
    }
    let s = |n: &str| speedups[n];
    let lenet = s("lenet_mnist");
    let (v1, v2, vgg, res) =
        (s("mobilenet_v1_cifar10"), s("mobilenet_v2_cifar10"), s("vgg9_cifar10"), s("resnet18_cifar10"));
    let cifar_in_range = [v1, v2, vgg, res].iter().all(|x| (1.0..=1.4).contains(x));
    check(
        (2.20..=2.98).contains(&lenet) && cifar_in_range && v1 > v2 && v2 >= vgg && vgg > res,
        format!("lenet {lenet:.3}; mobilenet_v1 {v1:.3} > mobilenet_v2 {v2:.3} >= vgg9 {vgg:.3} > resnet18 {res:.3}"),
    )
}

fn criterion_4() -> Verdict {
    let mut worst: f64 = 0.0;
    for t in all_bundled() {
        let m = memory_report(&t, Mode::Hybrid);
        let total = t.total_params() as f64;
        let fc = t.dense_params() as f64;
        let formula = 1.0 - (4.0 * (total - fc) + fc / 4.0) / (4.0 * total);
        worst = worst.max((m.reduction - formula).abs());
    }
    let lenet = memory_report(&bundled("lenet_mnist").unwrap(), Mode::Hybrid).reduction;
    let v2 = memory_report(&bundled("mobilenet_v2_cifar10").unwrap(), Mode::Hybrid).reduction;
    check(
        (0.86..=0.90).contains(&lenet) && (0.28..=0.33).contains(&v2) && worst <= 1e-15,
        format!("lenet {:.2}%, mobilenet_v2 {:.2}%, max formula deviation {worst:.1e}", lenet * 100.0, v2 * 100.0),
    )
}

fn criterion_5(state: &TrainState, test: &LabeledDataset) -> Verdict {
    let cfg = CrossbarConfig { neuron_slope: state.neuron_slope, ..CrossbarConfig::default() };
    let err = |e: tpuimac::mptrain::MpError| e.to_string();
    let exact = class_scores(state, test, Backend::Digital, None, None).map_err(err)?;
    let pre = analog_pre_adc(state, test, &cfg, None).map_err(err)?;
    let post = class_scores(state, test, Backend::Analog, Some(&cfg), None).map_err(err)?;
    let rel = exact.iter().zip(&pre).map(|(e, a)| (a - e).abs() / e.abs()).fold(0.0, f64::max);
    let abs_post = exact.iter().zip(&post).map(|(e, q)| (q - e).abs()).fold(0.0, f64::max);

    let digital = predict(state, test, Backend::Digital, None, None).map_err(err)?;
    let analog = predict(state, test, Backend::Analog, Some(&cfg), None).map_err(err)?;
    let differing: Vec<usize> = (0..digital.len()).filter(|&i| digital[i] != analog[i]).collect();
    // A disagreement is only explicable by the ADC if the exact top-two gap is under one LSB.
    let gap = |i: usize| {
        let mut row: Vec<f64> = exact.row(i).to_vec();
        row.sort_by(|a, b| b.total_cmp(a));
        row[0] - row[1]
    };
    let sub_lsb = differing.iter().filter(|&&i| gap(i) < cfg.lsb()).count();
    let acc_d = evaluate(state, test, Backend::Digital, None, None).map_err(err)?;
    let acc_a = evaluate(state, test, Backend::Analog, Some(&cfg), None).map_err(err)?;
    check(
        differing.is_empty() && rel <= 1e-9 && abs_post <= cfg.lsb() / 2.0 + 1e-12,
        format!(
            "{}/{} predictions differ ({sub_lsb} of them top-two gap < 1 LSB, merged by the ADC); digital {:.2}% vs analog {:.2}%; pre-ADC rel err {rel:.1e}; post-ADC err {:.3} LSB",
            differing.len(),
            test.len(),
            acc_d * 100.0,
            acc_a * 100.0,
            abs_post / cfg.lsb()
        ),
    )
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for case in 0..50 {
        let g_off = 10f64.powf(rng.random_range(-8.0..-4.0));
        let g_on = g_off * rng.random_range(1.001..1e4);
        let cfg = CrossbarConfig { g_on, g_off, ..CrossbarConfig::default() };
        for w in [-1i8, 0, 1] {
            let pair = encode_ternary(w, &cfg).map_err(|e| e.to_string())?;
            if decode(pair, &cfg) != w as f64 {
                return Err(format!("case {case}: {w} decodes to {}", decode(pair, &cfg)));
            }
        }
    }
    Ok("150/150 encode-decode pairs exact over 50 conductance configurations".into())
}

struct Trained {
    step1: TrainState,
    step2: TrainState,
    test: LabeledDataset,
    took: Duration,
}

fn train_mnist() -> Result<Trained, String> {
    let dir = mnist_dir();
    let load = |i: &str, l: &str| load_mnist(&dir.join(i), &dir.join(l)).map_err(|e| format!("{}: {e}", dir.display()));
    let train = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let topo = bundled("lenet_mnist").unwrap();
    let start = Instant::now();
    let step1 = train_step1(&topo, &train, &Hyper::step1(SEED)).map_err(|e| e.to_string())?;
    let step2 = train_step2(&step1, &train, &Hyper::step2(SEED), CrossbarConfig::default().neuron_slope)
        .map_err(|e| e.to_string())?;
    Ok(Trained { step1, step2, test, took: start.elapsed() })
}

fn criterion_7(t: &Trained) -> Verdict {
    let acc1 = evaluate(&t.step1, &t.test, Backend::Digital, None, None).map_err(|e| e.to_string())?;
    let acc2 = evaluate(&t.step2, &t.test, Backend::Digital, None, None).map_err(|e| e.to_string())?;
    let frozen = t.step1.conv_checksum() == t.step2.conv_checksum();
    let codomain = t.step2.fc_ternary.iter().all(|m| m.values().iter().all(|v| (-1..=1).contains(v)));
    let drop = (acc1 - acc2) * 100.0;
    check(
        acc1 >= 0.98 && drop <= 2.0 && frozen && codomain && t.took <= Duration::from_secs(30 * 60),
        format!(
            "step-1 {:.2}%, step-2 {:.2}% (drop {drop:.2} points), conv frozen: {frozen}, ternary: {codomain}, {:.0}s",
            acc1 * 100.0,
            acc2 * 100.0,
            t.took.as_secs_f64()
        ),
    )
}

fn write_idx(dir: &Path, rng: &mut ChaCha8Rng, n: usize) -> (PathBuf, PathBuf) {
    let mut images = vec![0, 0, 8, 3];
    for d in [n as u32, 28, 28] {
        images.extend(d.to_be_bytes());
    }
    images.extend((0..n * 784).map(|_| rng.random::<u8>()));
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((n as u32).to_be_bytes());
    labels.extend((0..n).map(|_| rng.random_range(0..10u8)));
    let (i, l) = (dir.join("images"), dir.join("labels"));
    std::fs::write(&i, images).unwrap();
    std::fs::write(&l, labels).unwrap();
    (i, l)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn criterion_8() -> Verdict {
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (images, labels) = write_idx(scratch.path(), &mut ChaCha8Rng::seed_from_u64(SEED), 256);
    let lenet = topology_file("lenet_mnist");
    let vgg = topology_file("vgg9_cifar10");
    let p = |p: &Path| p.to_string_lossy().into_owned();

    let commands: Vec<(&str, Vec<String>)> = vec![
        ("simulate", vec!["simulate".into(), "--topology".into(), p(&vgg), "--out".into()]),
        ("traces", vec!["traces".into(), "--topology".into(), p(&lenet), "--out".into()]),
        (
            "train",
            vec![
                "train", "--dataset", "mnist", "--images", &p(&images), "--labels", &p(&labels), "--topology",
                &p(&lenet), "--epochs-step1", "1", "--epochs-step2", "1", "--seed", "7", "--out",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        ("compare", vec!["compare".into(), "--all-bundled".into(), "--out".into()]),
    ];
    let mut checked = Vec::new();
    for (name, args) in commands {
        let mut runs = Vec::new();
        for attempt in 0..2 {
            let out = scratch.path().join(format!("{name}-{attempt}"));
            let target = if name == "compare" { out.join("table.csv") } else { out.clone() };
            let status = Command::new(env!("CARGO_BIN_EXE_tpuimac"))
                .args(&args)
                .arg(&target)
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!("{name} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
            runs.push(tree(&out));
        }
        if runs[0] != runs[1] {
            return Err(format!("{name}: outputs differ between identical runs"));
        }
        checked.push(format!("{name} ({} files)", runs[0].len()));
    }
    Ok(format!("byte-identical reruns: {}", checked.join(", ")))
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored.
    let mut results: Vec<(u8, &str, Verdict)> = vec![
        (1, "cycle model matches event replay", criterion_1()),
        (2, "FC layers under-utilize the array", criterion_2()),
        (3, "speedups and accounting identity", criterion_3()),
        (4, "memory reduction", criterion_4()),
    ];
    let trained = train_mnist();
    results.push((
        5,
        "analog and digital evaluation agree",
        trained.as_ref().map_err(|e| format!("no trained network: {e}")).and_then(|t| criterion_5(&t.step2, &t.test)),
    ));
    results.push((6, "conductance encode/decode roundtrip", criterion_6()));
    results.push((
        7,
        "two-step training on MNIST",
        trained.as_ref().map_err(|e| format!("training failed: {e}")).and_then(criterion_7),
    ));
    results.push((8, "CLI determinism", criterion_8()));

    let (mut failed, mut unexpected) = (0, 0);
    for (n, title, verdict) in &results {
        match verdict {
            Ok(detail) => println!("criterion {n}: PASS  {title}: {detail}"),
            Err(detail) => {
                failed += 1;
                let known = KNOWN_RED.contains(n);
                if !known {
                    unexpected += 1;
                }
                println!("criterion {n}: FAIL{}  {title}: {detail}", if known { " (known)" } else { "" });
            }
        }
    }
    println!("acceptance: {}/{} criteria pass", results.len() - failed, results.len());
    if unexpected > 0 {
        std::process::exit(1);
    }
}
