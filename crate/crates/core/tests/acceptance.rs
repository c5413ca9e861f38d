//! Acceptance runner: one `[PASS]`/`[FAIL]` line per criterion, non-zero
//! exit status when any criterion fails.

mod common;

use std::collections::HashMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use capsule_detector::capsule::{self, dynamic_routing, CapsuleNet, CapsuleNetConfig, Mode, RoutingConfig};
use capsule_detector::metrics::{self, Confusion, SampleScore};
use capsule_detector::ops;
use capsule_detector::pipeline::{Manifest, ManifestEntry, Preprocess, Split};
use capsule_detector::toy::{self, ToySpec, ToyTask};
use capsule_detector::training::{self, Checkpoint, Examples, ScoreReport, TrainConfig, Trainer};
use capsule_detector::vgg::{self, VggPrefix};
use capsule_detector::{RngStream, Tensor};

// Pinned tolerances and limits.
const OP_GRAD_TOL: f64 = 1e-4;
const E2E_GRAD_TOL: f64 = 1e-3;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(120);
const ROUTING_INSTANCES: usize = 1000;
const COUPLING_TOL: f64 = 1e-6;
const TRACE_TOL: f64 = 1e-12;
const STAT_POOL_TENSORS: usize = 500;
const STAT_POOL_TOL: f64 = 1e-12;
const PREFIX_PARAMS: usize = 2_325_568;
const TOTAL_N3: f64 = 2_796_889.0;
const TOTAL_N10: f64 = 3_896_638.0;
const PER_CAPSULE: f64 = 157_107.0;
const COUNT_REL_TOL: f64 = 0.002;
const SIZES: [usize; 3] = [100, 240, 300];
const INFER_REPEATS: usize = 100;
const TOY_TRAIN_ACC: f64 = 0.95;
const TOY_HELD_OUT_ACC: f64 = 0.90;
const TOY_EER: f64 = 0.15;
const TOY_EPOCHS: usize = 10;
const TOY_TIME_LIMIT: Duration = Duration::from_secs(30 * 60);
const MONOTONE_MAPS: usize = 100;
const PROB_SUM_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(id: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let res = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t0.elapsed().as_secs_f64();
    match &res {
        Ok(d) => println!("[PASS] {id:>2} {title}: {d} ({secs:.1} s)"),
        Err(d) => println!("[FAIL] {id:>2} {title}: {d} ({secs:.1} s)"),
    }
    res.is_ok()
}

fn gradient_oracles() -> Outcome {
    let t0 = Instant::now();
    let ops = common::op_suite();
    let (worst_name, worst) = ops
        .iter()
        .fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    let (e2e, checked) = common::end_to_end(4);
    let elapsed = t0.elapsed();
    check(
        worst < OP_GRAD_TOL && e2e < E2E_GRAD_TOL && elapsed < GRAD_TIME_LIMIT,
        format!(
            "{} ops, max rel err {worst:.1e} ({worst_name}); end-to-end {e2e:.1e} over {checked} entries; {:.1} s",
            ops.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn routing_invariants() -> Outcome {
    let mut rng = RngStream::new(404);
    let mut worst_sum = 0.0f64;
    let mut max_norm = 0.0f64;
    for k in 0..ROUTING_INSTANCES {
        let n = 1 + rng.below(12);
        let j = 2 + rng.below(5);
        let (d, e) = (2 + rng.below(6), 2 + rng.below(6));
        let scale = 10f64.powf(rng.uniform() * 3.0 - 1.5);
        let u: Vec<Vec<f64>> = (0..n).map(|_| (0..e).map(|_| rng.normal(0.0, scale)).collect()).collect();
        let w_std = 10f64.powf(rng.uniform() * 2.0 - 1.0);
        let w = common::normal(&mut rng, &[n, j, d, e], w_std);
        let cfg = RoutingConfig {
            iterations: 1 + rng.below(5),
            ..RoutingConfig::default()
        };
        let mut stream = RngStream::new(k as u64);
        let out = if k % 2 == 0 {
            dynamic_routing(&u, &w, &cfg, Mode::Infer, None)
        } else {
            dynamic_routing(&u, &w, &cfg, Mode::Train, Some(&mut stream))
        }
        .map_err(|e| e.to_string())?;
        if out.couplings.len() != cfg.iterations {
            return Err(format!("instance {k}: {} coupling sets for r = {}", out.couplings.len(), cfg.iterations));
        }
        for c in &out.couplings {
            for row in c.data().chunks(j) {
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        for v in &out.v {
            max_norm = max_norm.max(v.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    let mut w = Tensor::<f64>::zeros([1, 2, 4, 4]).unwrap();
    for i in 0..2 {
        for dd in 0..4 {
            w.data_mut()[i * 16 + dd * 5] = 2.0;
        }
    }
    let cfg = RoutingConfig {
        iterations: 1,
        ..RoutingConfig::default()
    };
    let trace = dynamic_routing(&[vec![1.0, 0.0, 0.0, 0.0]], &w, &cfg, Mode::Infer, None).map_err(|e| e.to_string())?;
    let target = [0.2, 0.0, 0.0, 0.0];
    let trace_err = trace
        .v
        .iter()
        .flat_map(|v| v.iter().zip(&target).map(|(a, b)| (a - b).abs()))
        .fold(0.0f64, f64::max);
    check(
        worst_sum <= COUPLING_TOL && max_norm < 1.0 && trace_err <= TRACE_TOL && trace.v.len() == 2,
        format!(
            "{ROUTING_INSTANCES} instances, max |sum c - 1| {worst_sum:.1e}, max |v| {max_norm:.6}, hand trace err {trace_err:.1e}"
        ),
    )
}

fn statistical_pool_oracle() -> Outcome {
    let mut rng = RngStream::new(77);
    let mut worst = 0.0f64;
    for _ in 0..STAT_POOL_TENSORS {
        let (k, h, w) = (1 + rng.below(8), 1 + rng.below(9), 2 + rng.below(8));
        let std = 10f64.powf(rng.uniform() * 2.0 - 1.0);
        let x = common::normal(&mut rng, &[k, h, w], std);
        let got = ops::statistical_pool(&x).map_err(|e| e.to_string())?;
        let (m, v) = common::stat_pool_oracle(&x);
        for (a, b) in got.data().iter().zip(m.iter().chain(&v)) {
            worst = worst.max((a - b).abs());
        }
    }
    let fixture = Tensor::from_vec([1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
    let f = ops::statistical_pool(&fixture).map_err(|e| e.to_string())?;
    let fixture_err = (f.data()[0] - 2.5).abs().max((f.data()[1] - 5.0 / 3.0).abs());
    check(
        worst <= STAT_POOL_TOL && fixture_err <= STAT_POOL_TOL,
        format!("{STAT_POOL_TENSORS} tensors, max abs err {worst:.1e}; [1,2,3,4] fixture err {fixture_err:.1e}"),
    )
}

fn parameter_counts() -> Outcome {
    let mut rng = RngStream::new(1);
    let prefix = VggPrefix::<f32>::random(&mut rng);
    let p = prefix.parameter_count();
    let n3 = CapsuleNet::<f32>::zeros(CapsuleNetConfig::light(2)).map_err(|e| e.to_string())?;
    let n10 = CapsuleNet::<f32>::zeros(CapsuleNetConfig::full(2)).map_err(|e| e.to_string())?;
    let t3 = capsule::total_parameter_count(&prefix, &n3) as f64;
    let t10 = capsule::total_parameter_count(&prefix, &n10) as f64;
    let per = n3.per_capsule_parameter_count() as f64;
    let dev = |a: f64, b: f64| (a - b) / b;
    check(
        p == PREFIX_PARAMS
            && dev(t3, TOTAL_N3).abs() <= COUNT_REL_TOL
            && dev(t10, TOTAL_N10).abs() <= COUNT_REL_TOL
            && dev(per, PER_CAPSULE).abs() <= COUNT_REL_TOL,
        format!(
            "prefix {p}; N=3 total {t3} ({:+.4}%); N=10 total {t10} ({:+.4}%); per capsule {per} ({:+.4}%)",
            100.0 * dev(t3, TOTAL_N3),
            100.0 * dev(t10, TOTAL_N10),
            100.0 * dev(per, PER_CAPSULE)
        ),
    )
}

fn size_independence() -> Outcome {
    let mut rng = RngStream::new(3);
    let prefix = VggPrefix::<f32>::random(&mut rng);
    let net = CapsuleNet::<f32>::new(CapsuleNetConfig::light(2), &mut rng).map_err(|e| e.to_string())?;
    let before = net.to_records();
    let mut shapes = Vec::new();
    for s in SIZES {
        let img = Tensor::from_vec([3, s, s], (0..3 * s * s).map(|_| rng.uniform() as f32).collect()).unwrap();
        let f = prefix
            .extract_features(&prefix.normalize(&img).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let side = vgg::feature_side(s);
        if f.shape() != [256, side, side] {
            return Err(format!("{s}x{s}: features {:?}", f.shape()));
        }
        let out = net.forward_batch(&f, Mode::Infer, None).map_err(|e| e.to_string())?;
        if out.probs.shape() != [1, 2] || out.u.shape() != [1, 3, 4] || out.v.shape() != [1, 2, 4] {
            return Err(format!("{s}x{s}: probs {:?} u {:?} v {:?}", out.probs.shape(), out.u.shape(), out.v.shape()));
        }
        shapes.push(format!("{s}->{:?}->{:?}", f.shape(), out.probs.shape()));
    }
    check(net.to_records() == before, format!("one parameter set, {}", shapes.join(", ")))
}

fn train_only_regularization() -> Outcome {
    let mut rng = RngStream::new(6);
    let net = CapsuleNet::<f32>::new(CapsuleNetConfig::light(2), &mut rng).map_err(|e| e.to_string())?;
    let features = Tensor::from_vec([256, 12, 12], (0..256 * 144).map(|_| rng.normal(0.0, 1.0) as f32).collect()).unwrap();
    let bits = |p: &[f32], v: &capsule::OutputCapsules<f32>| -> Vec<u32> {
        p.iter().chain(v.v.iter().flatten()).chain(v.uhat.data()).map(|x| x.to_bits()).collect()
    };
    let (p0, o0) = net.forward(&features, Mode::Infer, None).map_err(|e| e.to_string())?;
    let first = bits(&p0, &o0);
    for _ in 1..INFER_REPEATS {
        let (p, o) = net.forward(&features, Mode::Infer, None).map_err(|e| e.to_string())?;
        if bits(&p, &o) != first {
            return Err("infer mode output changed between calls".into());
        }
    }
    let uhat = |seed| -> Result<Vec<f32>, String> {
        let (_, o) = net
            .forward(&features, Mode::Train, Some(&mut RngStream::new(seed)))
            .map_err(|e| e.to_string())?;
        Ok(o.uhat.into_data())
    };
    let (a, b) = (uhat(1)?, uhat(2)?);
    let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    let (a2, _) = (uhat(1)?, ());
    check(
        differing > 0 && a == a2,
        format!("{INFER_REPEATS} infer calls bit-identical; seeds 1 and 2 differ in {differing}/{} entries of u-hat; seed 1 replays", a.len()),
    )
}

/// State shared by the toy learning and aggregation criteria.
struct ToyRun {
    test_report: ScoreReport,
    best: Trainer<f32>,
    manifest: Manifest,
    classes: Vec<String>,
}

fn toy_learning(dir: &Path) -> (Outcome, Option<ToyRun>) {
    let t0 = Instant::now();
    let spec = ToySpec {
        task: ToyTask::Binary,
        size: 100,
        groups_per_class: 100,
        frames_per_group: 5,
        seed: 11,
    };
    let manifest = toy::write_dataset(dir, &spec, 40).expect("toy dataset");
    let classes = ToyTask::Binary.class_names();
    let prep = Preprocess::default();
    let train_units = common::load_split(&manifest, Split::Train, 5, &classes, &prep);
    let val_units = common::load_split(&manifest, Split::Val, 5, &classes, &prep);
    let test_units = common::load_split(&manifest, Split::Test, 5, &classes, &prep);
    let per_class = train_units.iter().filter(|u| u.label == 1).count();
    let root = RngStream::new(21);
    let prefix = VggPrefix::<f32>::random(&mut root.split(1));
    let net = CapsuleNet::new(CapsuleNetConfig::light(2), &mut root.split(2)).expect("net");
    let config = TrainConfig {
        epochs: TOY_EPOCHS,
        batch: Some(20),
        seed: 5,
        ..TrainConfig::default()
    };
    let train = Examples::prepare(&prefix, &train_units).expect("train features");
    let val = Examples::prepare(&prefix, &val_units).expect("val features");
    let test = Examples::prepare(&prefix, &test_units).expect("test features");
    println!("       features for {} images in {:.0} s", train.len() + val.len() + test.len(), t0.elapsed().as_secs_f64());
    let mut trainer = Trainer::new(prefix, net, config).expect("trainer");
    let fit = training::fit(&mut trainer, &train, Some(&val), 20, &classes, &mut |_, r, v, best| {
        println!(
            "       epoch {:>2}: loss {:.4}, train-mode acc {:.3}, val acc {:.3}{}",
            r.epoch,
            r.mean_loss,
            r.accuracy,
            v.map_or(f64::NAN, |v| v.unit_metrics.accuracy),
            if best { " *" } else { "" }
        );
        Ok(())
    })
    .expect("training");
    let best = fit.best.expect("validation split is not empty");
    let train_report = training::evaluate(&best.prefix, &best.net, &train, &classes, 0.5).expect("train scoring");
    let test_report = training::evaluate(&best.prefix, &best.net, &test, &classes, 0.5).expect("test scoring");
    let eer = test_report.unit_metrics.binary.as_ref().map_or(1.0, |b| b.eer);
    let elapsed = t0.elapsed();
    let outcome = check(
        train_report.unit_metrics.accuracy >= TOY_TRAIN_ACC
            && test_report.unit_metrics.accuracy >= TOY_HELD_OUT_ACC
            && eer < TOY_EER
            && elapsed < TOY_TIME_LIMIT
            && per_class == 500,
        format!(
            "{per_class} images/class; epoch {} selected on val; train acc {:.3}, held-out acc {:.3} ({} images), held-out EER {eer:.3}; {:.1} min",
            fit.best_epoch.map_or(0, |b| b.epoch),
            train_report.unit_metrics.accuracy,
            test_report.unit_metrics.accuracy,
            test.len(),
            elapsed.as_secs_f64() / 60.0
        ),
    );
    (
        outcome,
        Some(ToyRun {
            test_report,
            best,
            manifest,
            classes,
        }),
    )
}

/// Accuracy of group-averaged scores recomputed from a score file.
fn brute_force_group_accuracy(samples: &[SampleScore]) -> (f64, f64) {
    let mut order = Vec::new();
    let mut sums: HashMap<&str, (Vec<f64>, usize, usize)> = HashMap::new();
    let mut unit_correct = 0usize;
    for s in samples {
        let pred = usize::from(s.probs[1] >= 0.5);
        unit_correct += usize::from(pred == s.label);
        let e = sums.entry(&s.group_id).or_insert_with(|| {
            order.push(s.group_id.as_str());
            (vec![0.0; s.probs.len()], 0, s.label)
        });
        for (a, p) in e.0.iter_mut().zip(&s.probs) {
            *a += p;
        }
        e.1 += 1;
    }
    let correct = order
        .iter()
        .filter(|g| {
            let (sum, n, label) = &sums[*g];
            usize::from(sum[1] / *n as f64 >= 0.5) == *label
        })
        .count();
    (
        unit_correct as f64 / samples.len() as f64,
        correct as f64 / order.len() as f64,
    )
}

fn aggregation(run: &ToyRun, dir: &Path) -> Outcome {
    let path = dir.join("test_scores.jsonl");
    training::write_scores(&path, &run.test_report.samples).map_err(|e| e.to_string())?;
    let replay = training::read_scores(&path).map_err(|e| e.to_string())?;
    let (unit_acc, video_acc) = brute_force_group_accuracy(&replay);
    let r = &run.test_report;
    let video_ok = unit_acc == r.unit_metrics.accuracy && video_acc == r.group_metrics.accuracy;

    // Patch protocol: every test image is its own group, tiled into 50x50 patches.
    let entries: Vec<ManifestEntry> = run
        .manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| ManifestEntry {
            group_id: e.path.display().to_string(),
            frame_index: None,
            ..e.clone()
        })
        .collect();
    let patches = Manifest {
        entries,
        root: run.manifest.root.clone(),
    };
    let prep = Preprocess {
        patch_size: Some(50),
        ..Preprocess::default()
    };
    let units = common::load_split(&patches, Split::Test, usize::MAX, &run.classes, &prep);
    let data = Examples::prepare(&run.best.prefix, &units).map_err(|e| e.to_string())?;
    let pr = training::evaluate(&run.best.prefix, &run.best.net, &data, &run.classes, 0.5).map_err(|e| e.to_string())?;
    let ppath = dir.join("patch_scores.jsonl");
    training::write_scores(&ppath, &pr.samples).map_err(|e| e.to_string())?;
    let (patch_acc, image_acc) = brute_force_group_accuracy(&training::read_scores(&ppath).map_err(|e| e.to_string())?);
    let patch_ok = patch_acc == pr.unit_metrics.accuracy && image_acc == pr.group_metrics.accuracy;
    let direction = |agg: f64, unit: f64| if agg >= unit { "aggregated >= unit" } else { "aggregated < unit" };
    check(
        video_ok && patch_ok && pr.groups.len() * 4 == pr.samples.len(),
        format!(
            "frames {:.4} -> videos {:.4} ({}); patches {:.4} -> images {:.4} ({}); replay exact: videos {video_ok}, patches {patch_ok}",
            r.unit_metrics.accuracy,
            r.group_metrics.accuracy,
            direction(r.group_metrics.accuracy, r.unit_metrics.accuracy),
            pr.unit_metrics.accuracy,
            pr.group_metrics.accuracy,
            direction(pr.group_metrics.accuracy, pr.unit_metrics.accuracy),
        ),
    )
}

/// Exhaustive sweep: FAR and FRR at every distinct score and `+inf`, EER
/// read at the first threshold where FAR <= FRR, interpolated from the
/// previous threshold.
fn eer_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut ts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    ts.push(f64::INFINITY);
    let rates = |t: f64| {
        let far = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
        let frr = pos.iter().filter(|&&s| s < t).count() as f64 / pos.len() as f64;
        (far, frr)
    };
    let mut prev = None;
    for t in ts {
        let (far, frr) = rates(t);
        if far <= frr {
            return match prev {
                Some((pf, pr)) if far < frr => {
                    let (d0, d1) = (pf - pr, far - frr);
                    pf + d0 / (d0 - d1) * (far - pf)
                }
                _ => far,
            };
        }
        prev = Some((far, frr));
    }
    unreachable!("FAR - FRR is -1 at +inf")
}

fn metric_oracles() -> Outcome {
    let eer = |p: &[f64], n: &[f64]| metrics::eer(p, n).unwrap();
    let fixtures: [(&[f64], &[f64], f64); 4] = [
        (&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1], 1.0 / 3.0),
        (&[0.9, 0.8], &[0.2, 0.1], 0.0),
        (&[0.4, 0.6, 0.6], &[0.6, 0.4, 0.6], 0.5),
        (&[0.5, 0.9], &[0.1, 0.5], 0.25),
    ];
    for (p, n, want) in fixtures {
        let (got, oracle) = (eer(p, n), eer_oracle(p, n));
        if got != oracle || got != want {
            return Err(format!("EER {p:?} vs {n:?}: got {got}, oracle {oracle}, expected {want}"));
        }
    }
    let acc = metrics::accuracy(&Confusion::binary(45, 45, 5, 5)).map_err(|e| e.to_string())?;
    if acc != 0.9 || metrics::accuracy(&Confusion::binary(7, 3, 0, 0)).unwrap() != 1.0 {
        return Err(format!("accuracy fixture gave {acc}"));
    }
    let diag = [8957u64, 9217, 9000, 9279];
    let rows: Vec<Vec<u64>> = (0..4)
        .map(|i| (0..4).map(|j| if i == j { diag[i] } else { (10_000 - diag[i]) / 3 + u64::from(j == (i + 1) % 4) * ((10_000 - diag[i]) % 3) }).collect())
        .collect();
    let per = metrics::per_class_accuracy(&Confusion::from_rows(&rows).map_err(|e| e.to_string())?);
    if per != [Some(0.8957), Some(0.9217), Some(0.9), Some(0.9279)] {
        return Err(format!("per-class accuracy {per:?}"));
    }
    let hters = [(0.2, 0.1), (0.0, 0.0), (0.35, 0.05)];
    for (far, frr) in hters {
        if metrics::hter(far, frr) != (far + frr) / 2.0 {
            return Err(format!("HTER({far}, {frr})"));
        }
    }
    let mut rng = RngStream::new(99);
    let maps: [fn(f64, f64) -> f64; 5] = [
        |x, a| a * x + 0.3,
        |x, a| x.powf(a),
        |x, a| (a * x).exp(),
        |x, a| 1.0 / (1.0 + (-a * (x - 0.5)).exp()),
        |x, a| (x + a).ln(),
    ];
    for k in 0..MONOTONE_MAPS {
        let grid = rng.uniform() < 0.5;
        let mut draw = |shift: f64| -> Vec<f64> {
            (0..20 + rng.below(60))
                .map(|_| {
                    let x = (rng.uniform() + shift).clamp(0.001, 0.999);
                    if grid {
                        (x * 20.0).round().max(1.0) / 20.0
                    } else {
                        x
                    }
                })
                .collect()
        };
        let (pos, neg) = (draw(0.2), draw(-0.2));
        let a = 0.5 + 2.0 * rng.uniform();
        let f = maps[k % maps.len()];
        let (mp, mn): (Vec<f64>, Vec<f64>) = (pos.iter().map(|&x| f(x, a)).collect(), neg.iter().map(|&x| f(x, a)).collect());
        let (base, mapped) = (eer(&pos, &neg), eer(&mp, &mn));
        if base != mapped || base != eer_oracle(&pos, &neg) {
            return Err(format!("map {k}: EER {base} vs mapped {mapped}"));
        }
    }
    Ok(format!(
        "4 EER fixtures equal the sweep oracle; accuracy, per-class and HTER fixtures exact; EER unchanged under {MONOTONE_MAPS} monotone maps"
    ))
}

fn multi_class(dir: &Path) -> Outcome {
    let spec = ToySpec {
        task: ToyTask::FourWay,
        size: 64,
        groups_per_class: 25,
        frames_per_group: 4,
        seed: 4,
    };
    let manifest = toy::write_dataset(dir, &spec, 10).map_err(|e| e.to_string())?;
    let classes = ToyTask::FourWay.class_names();
    let prep = Preprocess::default();
    let root = RngStream::new(40);
    let prefix = VggPrefix::<f32>::random(&mut root.split(1));
    let net = CapsuleNet::new(CapsuleNetConfig::light(4), &mut root.split(2)).map_err(|e| e.to_string())?;
    let train = Examples::prepare(&prefix, &common::load_split(&manifest, Split::Train, 4, &classes, &prep)).map_err(|e| e.to_string())?;
    let test = Examples::prepare(&prefix, &common::load_split(&manifest, Split::Test, 4, &classes, &prep)).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        epochs: 5,
        batch: Some(20),
        seed: 8,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(prefix, net, config).map_err(|e| e.to_string())?;
    let mut last = None;
    for _ in 0..config.epochs {
        last = Some(trainer.train_epoch(&train, 20).map_err(|e| e.to_string())?);
    }
    let r = training::evaluate(&trainer.prefix, &trainer.net, &test, &classes, 0.5).map_err(|e| e.to_string())?;
    let worst = r
        .samples
        .iter()
        .map(|s| (s.probs.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0f64, f64::max);
    let conf = &r.unit_metrics.confusion;
    let shape_ok = conf.len() == 4 && conf.iter().all(|row| row.len() == 4);
    let total: u64 = conf.iter().flatten().sum();
    let last = last.expect("at least one epoch");
    check(
        shape_ok && total as usize == r.samples.len() && worst <= PROB_SUM_TOL && last.mean_loss.is_finite(),
        format!(
            "confusion {conf:?} over {total} samples, max |sum p - 1| {worst:.1e}; final loss {:.3}, train-mode acc {:.3}, held-out acc {:.3}",
            last.mean_loss, last.accuracy, r.unit_metrics.accuracy
        ),
    )
}

fn resume_determinism(dir: &Path) -> Outcome {
    let spec = ToySpec {
        task: ToyTask::Binary,
        size: 48,
        groups_per_class: 8,
        frames_per_group: 3,
        seed: 13,
    };
    let manifest = toy::write_dataset(dir, &spec, 0).map_err(|e| e.to_string())?;
    let classes = ToyTask::Binary.class_names();
    let units = common::load_split(&manifest, Split::Train, 3, &classes, &Preprocess::default());
    let (n, k) = (4usize, 2usize);
    let fresh = |epochs: usize| -> Trainer<f32> {
        let root = RngStream::new(50);
        let prefix = VggPrefix::<f32>::random(&mut root.split(1));
        let net = CapsuleNet::new(CapsuleNetConfig::light(2), &mut root.split(2)).unwrap();
        let config = TrainConfig {
            epochs,
            batch: Some(8),
            seed: 17,
            ..TrainConfig::default()
        };
        Trainer::new(prefix, net, config).unwrap()
    };
    let run_to_end = |t: &mut Trainer<f32>| -> Result<(), String> {
        let data = Examples::prepare(&t.prefix, &units).map_err(|e| e.to_string())?;
        training::fit(t, &data, None, 8, &classes, &mut |_, _, _, _| Ok(())).map_err(|e| e.to_string())?;
        Ok(())
    };
    let mut straight = fresh(n);
    run_to_end(&mut straight)?;
    let mut first = fresh(k);
    run_to_end(&mut first)?;
    let path = dir.join("resume.ckpt");
    Checkpoint::from_trainer(&first, &classes, Preprocess::default())
        .save(&path)
        .map_err(|e| e.to_string())?;
    let mut resumed = Checkpoint::load(&path).map_err(|e| e.to_string())?.into_trainer();
    resumed.config.epochs = n;
    run_to_end(&mut resumed)?;
    let a = Checkpoint::from_trainer(&straight, &classes, Preprocess::default()).to_bytes();
    let b = Checkpoint::from_trainer(&resumed, &classes, Preprocess::default()).to_bytes();
    check(
        a == b && resumed.epoch == n,
        format!("{n} epochs straight vs {k} + resume: {} checkpoint bytes, identical {}", a.len(), a == b),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results = vec![
        run(1, "gradient oracles", gradient_oracles),
        run(2, "routing invariants", routing_invariants),
        run(3, "statistical pooling oracle", statistical_pool_oracle),
        run(4, "parameter counts", parameter_counts),
        run(5, "input-size independence", size_independence),
        run(6, "train-only regularization", train_only_regularization),
    ];
    let mut toy_run = None;
    results.push(run(7, "toy end-to-end learning", || {
        let (outcome, state) = toy_learning(&tmp.path().join("binary"));
        toy_run = state;
        outcome
    }));
    results.push(run(8, "aggregation equivalence", || match &toy_run {
        Some(r) => aggregation(r, tmp.path()),
        None => Err("needs the toy training run".into()),
    }));
    results.push(run(9, "metric oracles", metric_oracles));
    results.push(run(10, "multi-class head", || multi_class(&tmp.path().join("fourway"))));
    results.push(run(11, "checkpoint resume determinism", || resume_determinism(&tmp.path().join("resume"))));
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
