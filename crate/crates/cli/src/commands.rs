use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use tpuimac::mptrain::{self, Backend, Hyper, MpError};
use tpuimac::sched::{self, Mode, SchedError, Unit};
use tpuimac::systolic::{generate_traces, write_trace_csv};
use tpuimac::topology::{self, NetworkTopology, TopologyError};

use crate::config::RunConfig;
use crate::{CliError, CompareArgs, SimulateArgs, TracesArgs, TrainArgs};

fn load_topology(path: &Path) -> Result<NetworkTopology, CliError> {
    NetworkTopology::from_file(path).map_err(|e| match e {
        TopologyError::Io(m) => CliError::Input(m),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

fn sched_error(e: SchedError) -> CliError {
    CliError::Validation(e.to_string())
}

fn mp_error(e: MpError) -> CliError {
    match e {
        MpError::Topology(_) => CliError::Validation(e.to_string()),
        MpError::Manifest(_) => CliError::Manifest(e.to_string()),
        MpError::Diverged { .. } => CliError::Diverged(e.to_string()),
        _ => CliError::Input(e.to_string()),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

/// Writes through a temporary sibling and renames it into place, so a
/// reader never sees a half-written file.
fn write_atomic(dir: &Path, name: &str, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        fill(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, &target)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(io_error(&target, e));
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let topo = load_topology(&args.topology)?;
    let report = sched::run(&topo, &cfg.systolic, &cfg.imac, args.mode.into()).map_err(sched_error)?;
    for w in &report.warnings {
        eprintln!("{w}");
    }
    let files = [("layers.csv", report.layers_csv()), ("summary.csv", report.summary_csv()), ("report.json", report.to_json())];
    ensure_dir(&args.out)?;
    for (name, text) in &files {
        write_atomic(&args.out, name, |w| w.write_all(text.as_bytes()))?;
    }
    print!("{}", report.summary_csv());
    Ok(())
}

struct Row {
    model: String,
    baseline: u64,
    hybrid: u64,
    speedup: f64,
    reduction: f64,
    accuracy: Option<f64>,
}

pub fn compare(args: &CompareArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let mut topologies = args.topologies.iter().map(|p| load_topology(p)).collect::<Result<Vec<_>, _>>()?;
    if args.all_bundled {
        topologies.extend(topology::all_bundled());
    }
    if topologies.is_empty() {
        return Err(CliError::Input("no topologies given (use --topology or --all-bundled)".into()));
    }

    let mut weights: Vec<Option<&PathBuf>> = vec![None; topologies.len()];
    for dir in &args.weights {
        let manifest = mptrain::read_manifest(dir).map_err(mp_error)?;
        let slot = topologies
            .iter()
            .position(|t| t.name == manifest.topology)
            .ok_or_else(|| CliError::Manifest(format!("{}: weights are for `{}`, which is not being compared", dir.display(), manifest.topology)))?;
        weights[slot] = Some(dir);
    }
    let test = match (&args.test_images, &args.test_labels) {
        (Some(i), Some(l)) => Some(mptrain::load_mnist(i, l).map_err(mp_error)?),
        _ if !args.weights.is_empty() => return Err(CliError::Input("--weights needs --test-images and --test-labels".into())),
        _ => None,
    };

    // Independent topologies run concurrently; rows keep the input order.
    let rows: Vec<Result<Row, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = topologies
            .iter()
            .zip(&weights)
            .map(|(topo, w)| {
                let (cfg, test) = (&cfg, &test);
                scope.spawn(move || -> Result<Row, CliError> {
                    let r = sched::run(topo, &cfg.systolic, &cfg.imac, Mode::Hybrid).map_err(sched_error)?;
                    let accuracy = match (w, test) {
                        (Some(dir), Some(data)) => {
                            let state = mptrain::import_weights(dir, topo).map_err(mp_error)?;
                            Some(
                                mptrain::evaluate(&state, data, Backend::Analog, Some(&cfg.imac), cfg.seed)
                                    .map_err(mp_error)?,
                            )
                        }
                        _ => None,
                    };
                    Ok(Row {
                        model: topo.name.clone(),
                        baseline: r.baseline_total_cycles,
                        hybrid: r.total_cycles,
                        speedup: r.speedup,
                        reduction: r.memory.reduction,
                        accuracy,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("comparison worker panicked")).collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;

    let with_acc = rows.iter().any(|r| r.accuracy.is_some());
    let mut table = format!("{:<24} {:>12} {:>12} {:>8} {:>10}", "model", "baseline", "hybrid", "speedup", "reduction");
    let mut csv = String::from("model,baseline_cycles,hybrid_cycles,speedup,reduction_pct");
    if with_acc {
        table.push_str(&format!(" {:>9}", "accuracy"));
        csv.push_str(",accuracy_pct");
    }
    table.push('\n');
    csv.push('\n');
    for r in &rows {
        write!(table, "{:<24} {:>12} {:>12} {:>8.3} {:>9.2}%", r.model, r.baseline, r.hybrid, r.speedup, r.reduction * 100.0).unwrap();
        write!(csv, "{},{},{},{:.4},{:.2}", r.model, r.baseline, r.hybrid, r.speedup, r.reduction * 100.0).unwrap();
        if with_acc {
            match r.accuracy {
                Some(a) => {
                    write!(table, " {:>8.2}%", a * 100.0).unwrap();
                    write!(csv, ",{:.2}", a * 100.0).unwrap();
                }
                None => {
                    write!(table, " {:>9}", "-").unwrap();
                    csv.push(',');
                }
            }
        }
        table.push('\n');
        csv.push('\n');
    }
    if let Some(out) = &args.out {
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        ensure_dir(dir)?;
        let name = out.file_name().and_then(|n| n.to_str()).ok_or_else(|| CliError::Input("bad --out path".into()))?;
        write_atomic(dir, name, |w| w.write_all(csv.as_bytes()))?;
    }
    print!("{table}");
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let topo = load_topology(&args.topology)?;
    let data = mptrain::load_mnist(&args.images, &args.labels).map_err(mp_error)?;
    let (eval_data, eval_name) = match (&args.test_images, &args.test_labels) {
        (Some(i), Some(l)) => (mptrain::load_mnist(i, l).map_err(mp_error)?, "test"),
        _ => (data.clone(), "train"),
    };
    let step1 = Hyper { epochs: args.epochs_step1, ..Hyper::step1(args.seed) };
    let step2 = Hyper { epochs: args.epochs_step2, ..Hyper::step2(args.seed) };
    // Check both phases before spending minutes on the first.
    step1.check().map_err(mp_error)?;
    step2.check().map_err(mp_error)?;

    let mut progress = |e: &mptrain::EpochStats| {
        eprintln!("{:?} epoch {}: loss {:.4} (lr {:.5})", e.phase, e.epoch + 1, e.mean_loss, e.learning_rate);
    };
    let s1 = mptrain::train_step1_observed(&topo, &data, &step1, &mut progress).map_err(mp_error)?;
    let acc1 = mptrain::evaluate(&s1, &eval_data, Backend::Digital, None, None).map_err(mp_error)?;
    println!("step-1 {eval_name} accuracy: {:.2}%", acc1 * 100.0);

    let s2 = mptrain::train_step2_observed(&s1, &data, &step2, args.neuron_slope, &mut progress).map_err(mp_error)?;
    let acc2 = mptrain::evaluate(&s2, &eval_data, Backend::Digital, None, None).map_err(mp_error)?;
    println!("step-2 {eval_name} accuracy: {:.2}% ({:+.2} points)", acc2 * 100.0, (acc2 - acc1) * 100.0);

    let manifest = mptrain::export_weights(&s2, &args.out).map_err(mp_error)?;
    println!("wrote {} weight files to {}", manifest.entries.len(), args.out.display());
    Ok(())
}

pub fn traces(args: &TracesArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let topo = load_topology(&args.topology)?;
    let mode: Mode = args.mode.into();
    let findings = topo.validate_for_array(mode.is_hybrid(), cfg.systolic.pes());
    if let Some(err) = findings.iter().find(|f| f.is_error()) {
        return Err(CliError::Validation(format!("{}: {err}", topo.name)));
    }
    let plan = sched::plan(&topo, mode).map_err(sched_error)?;
    ensure_dir(&args.out)?;
    for (layer, (_, unit)) in topo.layers.iter().zip(&plan.assignments) {
        if *unit != Unit::Tpu {
            continue;
        }
        let records = generate_traces(layer, &cfg.systolic).map_err(|e| CliError::Validation(format!("{}: {e}", layer.name)))?;
        write_atomic(&args.out, &format!("{}.trace.csv", layer.name), |w| write_trace_csv(w, &records))?;
        println!("{}: {} records", layer.name, records.len());
    }
    Ok(())
}
