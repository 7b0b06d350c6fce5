//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p pgseg-cli --test acceptance`. The learning and
//! ablation criteria train real networks and take several minutes on one core.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{grad_check, jitter_params, kink_free_tensor, random_points, random_tensor, rel_err, rng};
use pgseg::augmenter::FeatureAugmenterBlock;
use pgseg::autodiff::Tape;
use pgseg::geometry::{
    centroid_offset, knn, nn_upsample, relative_neighbor_encoding, squared_distance, NeighborIndex, Point,
    PointCloud, SamplingTrace,
};
use pgseg::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use pgseg::io::cloud_file::{read_labeled_cloud, write_cloud, CloudFormat};
use pgseg::io::synth::{generate_scene, SceneSpec};
use pgseg::local_context::{neighbor_features, EncoderLayer, LocalContextBlock};
use pgseg::metrics::{ConfusionMatrix, EvalReport};
use pgseg::network::{Mode, NetworkConfig, SegmentationNetwork};
use pgseg::nn::{LinearLayer, Mlp, ParamStore};
use pgseg::Tensor;
use pgseg_cli::commands::{self, tail_accuracy_variance, tail_mean_accuracy};
use pgseg_cli::config::{Overrides, RunConfig, TEST_MODE_RATIOS, TEST_MODE_WIDTHS};
use rand::seq::SliceRandom;
use rand::Rng;

const H: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;
const NET_H: f64 = 1e-6;
const NET_TOL: f64 = 1e-3;
const NET_SAMPLES: usize = 60;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const KNN_CLOUDS: usize = 50;
const CENTROID_TOL: f64 = 1e-9;
const SYMMETRIC_TOL: f64 = 1e-12;
const EQUIV_TOL: f64 = 1e-9;
const METRIC_CASES: usize = 100;

const DESK_MIOU: f64 = 0.85;
const DESK_OA: f64 = 0.95;
const DESK_LOSS_RATIO: f64 = 0.25;
const DESK_BUDGET: Duration = Duration::from_secs(30 * 60);
const DESK_POINTS: usize = 2048;

const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const ABLATION_MEAN_TAIL: usize = 10;
const ABLATION_VAR_TAIL: usize = 30;

const DESK_RUN: &str = r#"
test_mode = true
[train]
epochs = 60
checkpoint_every = 0
[data]
synthetic_train = 20
synthetic_val = 0
synthetic_test = 5
"#;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, bool);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn desk_config(seed: u64, out: &Path) -> RunConfig {
    RunConfig::parse(DESK_RUN)
        .unwrap()
        .resolve(&Overrides {
            seed: Some(seed),
            out: Some(out.to_path_buf()),
            test_mode: true,
        })
        .unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let none = ParamStore::new();
    let mut r = rng(1);
    let mut checks: Vec<(&str, f64)> = Vec::new();

    let (a, b) = (random_tensor(&[3, 4], &mut r), random_tensor(&[4, 2], &mut r));
    checks.push(("matmul", grad_check(&[a, b], &none, H, |t, _, v| t.matmul(v[0], v[1]))));
    let (a, b) = (random_tensor(&[2, 3, 4], &mut r), random_tensor(&[4, 5], &mut r));
    checks.push(("batched matmul", grad_check(&[a, b], &none, H, |t, _, v| t.matmul(v[0], v[1]))));
    let a = random_tensor(&[2, 3, 4], &mut r);
    let (b, c) = (random_tensor(&[4], &mut r), random_tensor(&[3, 1], &mut r));
    checks.push(("add", grad_check(&[a.clone(), b], &none, H, |t, _, v| t.add(v[0], v[1]))));
    checks.push(("sub", grad_check(&[a.clone(), c.clone()], &none, H, |t, _, v| t.sub(v[0], v[1]))));
    checks.push(("mul", grad_check(&[c, a], &none, H, |t, _, v| t.mul(v[0], v[1]))));
    let x = kink_free_tensor(&[4, 5], &mut r);
    checks.push(("relu", grad_check(std::slice::from_ref(&x), &none, H, |t, _, v| Ok(t.relu(v[0])))));
    checks.push(("scale", grad_check(std::slice::from_ref(&x), &none, H, |t, _, v| Ok(t.scale(v[0], -2.5)))));
    checks.push(("sum", grad_check(std::slice::from_ref(&x), &none, H, |t, _, v| Ok(t.sum(v[0])))));
    checks.push(("reshape", grad_check(&[x], &none, H, |t, _, v| t.reshape(v[0], &[2, 10]))));
    let x = random_tensor(&[3, 4, 5], &mut r);
    for axis in 0..3 {
        let e = grad_check(std::slice::from_ref(&x), &none, H, |t, _, v| Ok(t.max_pool_axis(v[0], axis)?.0));
        checks.push(("max pool", e));
    }
    let (a, b) = (random_tensor(&[3, 2], &mut r), random_tensor(&[3, 4], &mut r));
    checks.push(("concat", grad_check(&[a, b], &none, H, |t, _, v| t.concat(&[v[0], v[1], v[0]], 1))));
    let x = random_tensor(&[2, 6, 3], &mut r);
    checks.push(("slice", grad_check(&[x], &none, H, |t, _, v| t.slice_axis(v[0], 1, 2, 3))));
    let row = random_tensor(&[1, 4], &mut r);
    checks.push(("repeat", grad_check(&[row], &none, H, |t, _, v| t.repeat_rows(v[0], 5))));
    let x = random_tensor(&[4, 3], &mut r);
    checks.push((
        "gather",
        grad_check(&[x], &none, H, |t, _, v| t.gather_rows(v[0], &[0, 2, 2, 3, 0, 0], &[3, 2])),
    ));
    let x = random_tensor(&[6, 5], &mut r);
    checks.push(("dropout", grad_check(&[x], &none, H, |t, _, v| t.dropout(v[0], 0.3, true, &mut rng(99)))));
    let logits = random_tensor(&[6, 3], &mut r);
    let labels = [0, 2, 1, 1, 0, 2];
    checks.push((
        "cross entropy",
        grad_check(std::slice::from_ref(&logits), &none, H, |t, _, v| t.cross_entropy(v[0], &labels, None)),
    ));
    checks.push((
        "weighted cross entropy",
        grad_check(&[logits], &none, H, |t, _, v| t.cross_entropy(v[0], &labels, Some(&[0.5, 2.0, 1.25]))),
    ));

    let x = random_tensor(&[5, 4], &mut r);
    let mut store = ParamStore::new();
    let lin = LinearLayer::new(&mut store, "lin", 4, 3, &mut r);
    jitter_params(&mut store, &mut r);
    checks.push(("linear", grad_check(std::slice::from_ref(&x), &store, H, |t, s, v| lin.forward(t, s, v[0]))));
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[4, 6, 3], true, &mut r);
    jitter_params(&mut store, &mut r);
    checks.push(("mlp", grad_check(&[x], &store, H, |t, s, v| mlp.forward(t, s, v[0]))));

    let mut store = ParamStore::new();
    let fa = FeatureAugmenterBlock::new(&mut store, "fa", 4, 2, &mut r).unwrap();
    jitter_params(&mut store, &mut r);
    let x = random_tensor(&[7, 4], &mut r);
    checks.push(("feature augmenter", grad_check(&[x], &store, H, |t, s, v| fa.augment(t, s, v[0]))));

    let pts = random_points(12, &mut r);
    let nb = knn(&pts, 4).unwrap();
    let enc = relative_neighbor_encoding(&pts, &nb);
    let feats = random_tensor(&[12, 3], &mut r);
    let mut store = ParamStore::new();
    let block = LocalContextBlock::new(&mut store, "lc", 3, 5, 2, &mut r).unwrap();
    jitter_params(&mut store, &mut r);
    checks.push((
        "local context block",
        grad_check(&[enc, feats.clone()], &store, H, |t, s, v| {
            let g = neighbor_features(t, v[0], Some(v[1]), &nb)?;
            let out = block.forward(t, s, g)?;
            t.concat(&[out.context, out.pooled], 1)
        }),
    ));
    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(&mut store, "enc", 3, 6, 1, 4, &mut r).unwrap();
    jitter_params(&mut store, &mut r);
    checks.push(("encoder layer", grad_check(&[feats], &store, H, |t, s, v| layer.forward(t, s, &pts, v[0]))));

    let pts = random_points(10, &mut r);
    let trace = SamplingTrace::from_kept(&pts, vec![1, 4, 7]).unwrap();
    let coarse = random_tensor(&[3, 2], &mut r);
    checks.push(("upsample", grad_check(&[coarse], &none, H, |t, _, v| nn_upsample(t, v[0], &trace, 10))));

    let (worst_name, worst) = checks.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    ensure(worst < OP_TOL, || format!("{worst_name}: relative error {worst:.2e} >= {OP_TOL:.0e}"))?;

    let net_err = network_gradient_error();
    ensure(net_err < NET_TOL, || format!("full network: relative error {net_err:.2e} >= {NET_TOL:.0e}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < GRAD_BUDGET, || format!("runtime {elapsed:.1?} over {GRAD_BUDGET:?}"))?;
    Ok(format!(
        "{} op/block checks, worst {worst:.2e} ({worst_name}); network {net_err:.2e}; {elapsed:.1?}",
        checks.len()
    ))
}

/// Central differences on randomly chosen parameters of the test-mode
/// network, training mode, same sampling and dropout stream every pass.
fn network_gradient_error() -> f64 {
    let cloud = generate_scene(&SceneSpec {
        extent: 2.0,
        seed: 40,
        ..SceneSpec::default()
    })
    .unwrap();
    assert_eq!(cloud.len(), 512);
    let labels = cloud.labels().unwrap().to_vec();
    let cfg = NetworkConfig::test_mode(TEST_MODE_WIDTHS.to_vec(), TEST_MODE_RATIOS.to_vec());
    let mut net = SegmentationNetwork::build(cfg, &mut rng(41)).unwrap();
    jitter_params(net.params_mut(), &mut rng(42));
    let loss_of = |net: &SegmentationNetwork| -> f64 {
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &cloud, Mode::Train, &mut rng(43)).unwrap();
        let loss = tape.cross_entropy(out.logits, &labels, None).unwrap();
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &cloud, Mode::Train, &mut rng(43)).unwrap();
    let loss = tape.cross_entropy(out.logits, &labels, None).unwrap();
    let grads = tape.backward(loss).unwrap().for_store(net.params());

    let ids: Vec<_> = net.params().ids().collect();
    let mut pick = rng(44);
    let mut worst: f64 = 0.0;
    for _ in 0..NET_SAMPLES {
        let id = ids[pick.gen_range(0..ids.len())];
        let j = pick.gen_range(0..net.params().value(id).len());
        let orig = net.params().value(id).data()[j];
        net.params_mut().value_mut(id).data_mut()[j] = orig + NET_H;
        let up = loss_of(&net);
        net.params_mut().value_mut(id).data_mut()[j] = orig - NET_H;
        let down = loss_of(&net);
        net.params_mut().value_mut(id).data_mut()[j] = orig;
        worst = worst.max(rel_err(grads[id.index()].data()[j], (up - down) / (2.0 * NET_H)));
    }
    worst
}

fn brute_knn(pts: &[Point], k: usize) -> Vec<Vec<usize>> {
    pts.iter()
        .map(|p| {
            let mut order: Vec<(f64, usize)> =
                pts.iter().enumerate().map(|(j, q)| (squared_distance(p, q), j)).collect();
            order.sort_by(|a, b| a.partial_cmp(b).unwrap());
            order.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

fn geometry_oracles() -> Outcome {
    let mut r = rng(2);
    for c in 0..KNN_CLOUDS {
        let pts = random_points(r.gen_range(16..=500), &mut r);
        let want16 = brute_knn(&pts, 16);
        for k in [1, 4, 16] {
            let got = knn(&pts, k).unwrap();
            for (i, row) in want16.iter().enumerate() {
                ensure(got.row(i) == &row[..k], || format!("cloud {c}, k {k}, point {i}"))?;
            }
        }
    }

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let pts = random_points(r.gen_range(16..200), &mut r);
        let k = 8;
        let nb = knn(&pts, k).unwrap();
        let got = centroid_offset(&pts, &nb);
        for (i, p) in pts.iter().enumerate() {
            let mut c = [0.0; 3];
            for &j in nb.row(i) {
                for a in 0..3 {
                    c[a] += pts[j][a] / k as f64;
                }
            }
            worst = worst.max((got.distances[i] - squared_distance(p, &c).sqrt()).abs());
        }
    }
    ensure(worst < CENTROID_TOL, || format!("centroid distance off by {worst:.2e}"))?;

    let mut sym: f64 = 0.0;
    for trial in 0..10 {
        let center: Point = [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)];
        let mut pts = vec![center];
        for s in 0..3 {
            let d: Point = random_points(1, &mut r)[0];
            let scale = (0.5 + 0.25 * s as f64 + 0.01 * trial as f64) / d.iter().map(|x| x * x).sum::<f64>().sqrt();
            pts.push([center[0] + d[0] * scale, center[1] + d[1] * scale, center[2] + d[2] * scale]);
            pts.push([center[0] - d[0] * scale, center[1] - d[1] * scale, center[2] - d[2] * scale]);
        }
        let off = centroid_offset(&pts, &knn(&pts, 7).unwrap());
        sym = sym.max(off.distances[0].abs());
    }
    ensure(sym < SYMMETRIC_TOL, || format!("symmetric neighborhood offset {sym:.2e}"))?;
    Ok(format!(
        "KNN exact on {KNN_CLOUDS} clouds; centroid distance err {worst:.1e}; symmetric offset {sym:.1e}"
    ))
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::new(vec![perm.len(), t.cols()], data).unwrap()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

fn equivariance() -> Outcome {
    let mut fa_err: f64 = 0.0;
    let mut lc_err: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng(1000 + seed);
        let n = r.gen_range(1..40);
        let mut store = ParamStore::new();
        let fa = FeatureAugmenterBlock::new(&mut store, "fa", 6, 1 + seed as usize % 2, &mut r).unwrap();
        jitter_params(&mut store, &mut r);
        let x = random_tensor(&[n, 6], &mut r);
        let perm = shuffled(n, seed);
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(x);
            let out = fa.augment(&mut tape, &store, v).unwrap();
            tape.value(out).clone()
        };
        fa_err = fa_err.max(permute_rows(&run(x.clone()), &perm).max_abs_diff(&run(permute_rows(&x, &perm))));

        let n = r.gen_range(8..40);
        let k = r.gen_range(2..8);
        let pts = random_points(n, &mut r);
        let nb = knn(&pts, k).unwrap();
        let mut rows = nb.as_flat().to_vec();
        for row in rows.chunks_mut(k) {
            row.shuffle(&mut r);
        }
        let mixed = NeighborIndex::from_rows(k, rows, n).unwrap();
        let mut store = ParamStore::new();
        let block = LocalContextBlock::new(&mut store, "lc", 4, 6, 1, &mut r).unwrap();
        jitter_params(&mut store, &mut r);
        let feats = random_tensor(&[n, 4], &mut r);
        let run = |nb: &NeighborIndex| {
            let mut tape = Tape::new();
            let enc = tape.constant(relative_neighbor_encoding(&pts, nb));
            let f = tape.constant(feats.clone());
            let g = neighbor_features(&mut tape, enc, Some(f), nb).unwrap();
            let out = block.forward(&mut tape, &store, g).unwrap();
            tape.value(out.context).clone()
        };
        lc_err = lc_err.max(run(&nb).max_abs_diff(&run(&mixed)));
    }
    ensure(fa_err <= EQUIV_TOL, || format!("feature augmenter: {fa_err:.2e}"))?;
    ensure(lc_err <= EQUIV_TOL, || format!("local context: {lc_err:.2e}"))?;

    let cfg = NetworkConfig::test_mode(TEST_MODE_WIDTHS.to_vec(), TEST_MODE_RATIOS.to_vec());
    let mut net = SegmentationNetwork::build(cfg, &mut rng(31)).unwrap();
    jitter_params(net.params_mut(), &mut rng(32));
    let pts = random_points(512, &mut rng(33));
    let cloud = PointCloud::from_positions(pts.clone(), None).unwrap();
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &cloud, Mode::Infer, &mut rng(34)).unwrap();
    let base = tape.value(out.logits).clone();
    let plan = out.trace.kept_sets();
    let mut net_err: f64 = 0.0;
    for seed in 0..5 {
        let perm = shuffled(pts.len(), 100 + seed);
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let moved = PointCloud::from_positions(perm.iter().map(|&i| pts[i]).collect(), None).unwrap();
        let mut moved_plan = plan.clone();
        moved_plan[0] = plan[0].iter().map(|&i| inv[i]).collect();
        let mut tape = Tape::new();
        let out = net
            .forward_with_plan(&mut tape, &moved, Mode::Infer, &mut rng(35), Some(&moved_plan))
            .unwrap();
        net_err = net_err.max(tape.value(out.logits).max_abs_diff(&permute_rows(&base, &perm)));
    }
    ensure(net_err <= EQUIV_TOL, || format!("network: {net_err:.2e}"))?;
    Ok(format!("max deviation: augmenter {fa_err:.1e}, local context {lc_err:.1e}, network {net_err:.1e}"))
}

/// Per-point recount, independent of the confusion matrix.
fn recount(classes: usize, truth: &[usize], pred: &[usize]) -> (f64, f64, f64) {
    let oa = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64;
    let mut accs = Vec::new();
    let mut ious = Vec::new();
    for c in 0..classes {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count();
        let t = truth.iter().filter(|&&t| t == c).count();
        let u = truth.iter().zip(pred).filter(|&(&t, &p)| t == c || p == c).count();
        if t > 0 {
            accs.push(tp as f64 / t as f64);
        }
        if u > 0 {
            ious.push(tp as f64 / u as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (oa, mean(&accs), mean(&ious))
}

fn metric_oracles() -> Outcome {
    let mut r = rng(4);
    for case in 0..METRIC_CASES {
        let classes = r.gen_range(2..6);
        let n = r.gen_range(1..300);
        let truth: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let rep = EvalReport::from_predictions(classes, &truth, &pred).unwrap();
        let want = recount(classes, &truth, &pred);
        ensure((rep.oa, rep.macc, rep.miou) == want, || format!("case {case}: {:?} vs {want:?}", (rep.oa, rep.macc, rep.miou)))?;
    }
    let rep = EvalReport::from_confusion(ConfusionMatrix::from_counts(&[vec![3, 1], vec![1, 3]]).unwrap()).unwrap();
    ensure(rep.oa == 0.75 && (rep.miou - 0.6).abs() < 1e-15, || {
        format!("hand case OA {} mIoU {}", rep.oa, rep.miou)
    })?;
    Ok(format!("{METRIC_CASES} random cases exact; hand case OA 0.75 mIoU 0.6"))
}

fn desk_learning() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(1, dir.path());
    let train_set = commands::load_split(&cfg, commands::Split::Train).unwrap();
    let test_set = commands::load_split(&cfg, commands::Split::Test).unwrap();
    ensure(train_set.len() == 20 && test_set.len() == 5, || "split sizes".into())?;
    ensure(
        train_set.iter().chain(&test_set).all(|c| c.len() == DESK_POINTS),
        || format!("clouds are not {DESK_POINTS} points"),
    )?;

    let start = Instant::now();
    let outcome = commands::train(&cfg, false, false).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let report = commands::eval(&cfg, &outcome.checkpoint_dir.join("last.pgck"), &[]).map_err(|e| e.to_string())?;
    let recs = &outcome.log.records;
    let ratio = recs.last().unwrap().mean_loss / recs[0].mean_loss;
    let detail = format!(
        "test mIoU {:.4} OA {:.4}; loss ratio {ratio:.3}; {} epochs in {elapsed:.1?}",
        report.miou,
        report.oa,
        recs.len()
    );
    ensure(recs.len() == 60, || format!("{} epochs logged", recs.len()))?;
    ensure(report.miou >= DESK_MIOU && report.oa >= DESK_OA, || detail.clone())?;
    ensure(ratio < DESK_LOSS_RATIO, || detail.clone())?;
    ensure(elapsed < DESK_BUDGET, || detail.clone())?;
    Ok(detail)
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut held = 0;
    let mut lines = Vec::new();
    for seed in ABLATION_SEEDS {
        let cfg = desk_config(seed, &dir.path().join(seed.to_string()));
        let o = commands::ablate(&cfg, false, false).map_err(|e| e.to_string())?;
        let (on, off) = (&o.with_fa.log, &o.without_fa.log);
        let mean = (tail_mean_accuracy(on, ABLATION_MEAN_TAIL), tail_mean_accuracy(off, ABLATION_MEAN_TAIL));
        let var = (
            tail_accuracy_variance(on, ABLATION_VAR_TAIL),
            tail_accuracy_variance(off, ABLATION_VAR_TAIL),
        );
        let ok = mean.0 >= mean.1 && var.0 <= var.1;
        held += ok as usize;
        lines.push(format!(
            "seed {seed}: mean {:.4}/{:.4} var {:.2e}/{:.2e} {}",
            mean.0,
            mean.1,
            var.0,
            var.1,
            if ok { "holds" } else { "fails" }
        ));
    }
    let detail = format!("on/off {}; {held}/{} seeds", lines.join("; "), ABLATION_SEEDS.len());
    ensure(2 * held > ABLATION_SEEDS.len(), || detail.clone())?;
    Ok(detail)
}

fn collect_files(root: &Path, rel: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = std::fs::read_dir(root.join(rel)).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let name = rel.join(p.file_name().unwrap());
        if p.is_dir() {
            collect_files(root, &name, out);
        } else {
            out.push((name.display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
}

fn smoke_run(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let cfg = "seed = 9\ntest_mode = true\n[scene]\npoint_density = 32.0\n[train]\nepochs = 2\ncheckpoint_every = 1\n[data]\nsynthetic_train = 3\nsynthetic_val = 1\n";
    std::fs::write(dir.join("run.toml"), cfg).unwrap();
    for args in [&["gen", "--count", "2"][..], &["train"][..]] {
        let out = Command::new(env!("CARGO_BIN_EXE_pgseg"))
            .current_dir(dir)
            .args(["--quiet", "--config", "run.toml", "--out", "run"])
            .args(args)
            .output()
            .unwrap();
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    }
    let mut files = Vec::new();
    collect_files(&dir.join("run"), Path::new(""), &mut files);
    Ok(files)
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();

    let cfg = NetworkConfig::test_mode(TEST_MODE_WIDTHS.to_vec(), TEST_MODE_RATIOS.to_vec());
    let mut net = SegmentationNetwork::build(cfg, &mut rng(3)).unwrap();
    jitter_params(net.params_mut(), &mut rng(4));
    let cloud = generate_scene(&SceneSpec { extent: 2.0, ..SceneSpec::default() }).unwrap();
    let logits = |net: &SegmentationNetwork| -> Vec<u64> {
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &cloud, Mode::Infer, &mut rng(5)).unwrap();
        tape.value(out.logits).data().iter().map(|x| x.to_bits()).collect()
    };
    let path = dir.path().join("n.pgck");
    save_checkpoint(&Checkpoint::from_network(&net, None, 0, None), &path).unwrap();
    let restored = load_checkpoint(&path).unwrap().restore().unwrap();
    ensure(logits(&net) == logits(&restored), || "restored logits differ".into())?;

    let mut r = rng(6);
    let pts: Vec<Point> = random_points(1024, &mut r).into_iter().map(|p| [p[0] * 1e3, p[1] * 1e-3, p[2]]).collect();
    let feats = (0..2048).map(|_| r.gen_range(-10.0..10.0)).collect();
    let labels = (0..1024).map(|_| r.gen_range(0..5)).collect();
    let cloud = PointCloud::new(pts, feats, 2, Some(labels)).unwrap();
    for (format, name) in [(CloudFormat::Xyzl, "c.xyzl"), (CloudFormat::AsciiPly, "c.ply")] {
        write_cloud(&cloud, dir.path().join(name), format).unwrap();
        let back = read_labeled_cloud(dir.path().join(name), 5).unwrap();
        ensure(back == cloud, || format!("{name} round trip differs"))?;
    }

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let (fa, fb) = (smoke_run(&a)?, smoke_run(&b)?);
    ensure(!fa.is_empty() && fa == fb, || {
        let names: Vec<_> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.clone()).collect();
        format!("smoke runs differ: {names:?}")
    })?;
    Ok(format!(
        "checkpoint logits bit-equal; xyzl and ply round trips lossless; gen+train byte-identical over {} files",
        fa.len()
    ))
}

fn parameter_count() -> Outcome {
    let configs = [
        NetworkConfig::default(),
        NetworkConfig::test_mode(TEST_MODE_WIDTHS.to_vec(), TEST_MODE_RATIOS.to_vec()),
        NetworkConfig {
            local_repetition: 3,
            input_channels: 7,
            num_classes: 5,
            feature_augmenter: false,
            ..NetworkConfig::test_mode(vec![4, 12, 20], vec![2, 3, 2])
        },
    ];
    let mut counts = Vec::new();
    for cfg in configs {
        let tally = SegmentationNetwork::build(cfg.clone(), &mut rng(0)).unwrap().params().scalar_count();
        let closed = cfg.parameter_count();
        ensure(tally == closed, || format!("{cfg:?}: registry {tally}, closed form {closed}"))?;
        counts.push(closed.to_string());
    }
    Ok(format!("registry equals closed form: {}", counts.join(", ")))
}

fn main() {
    // (name, check, hard): a failing soft criterion is reported but does not
    // fail the run.
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite, true),
        ("geometry oracles", geometry_oracles, true),
        ("equivariance", equivariance, true),
        ("metric oracles", metric_oracles, true),
        ("desk-scale learning", desk_learning, true),
        ("ablation direction", ablation, false),
        ("persistence", persistence, true),
        ("parameter count", parameter_count, true),
    ];
    let mut failed = 0;
    let mut hard_failed = 0;
    for (name, check, hard) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                hard_failed += hard as usize;
                let soft = if hard { "" } else { " (soft criterion)" };
                println!("FAIL {name}{soft}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if hard_failed > 0 {
        std::process::exit(1);
    }
}
