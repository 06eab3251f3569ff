//! Acceptance criteria 1-8. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a gated criterion fails. Criterion 6 is reported only.
//!
//! Set `NRSFM_ACCEPTANCE_STEPS` to shorten the end-to-end run while iterating;
//! criterion 5 then reports FAIL because the step budget differs.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3};
use ndarray::Array2;
use nrsfm::cli::main_with_args;
use nrsfm::data::{read_keypoints, save_keypoints, synth_sequence, SyntheticSpec};
use nrsfm::diffcore::gradcheck::op_suite;
use nrsfm::diffcore::Tape;
use nrsfm::geometry::{random_rotation, Rotation3};
use nrsfm::losses::{loss_data, loss_nuclear};
use nrsfm::metrics::{depth_flip_eval, e3d, flip_depth, mpjpe, stress, EvalReport, Metric};
use nrsfm::rank_oracle::{basis_rotations, decompose_rotation, RankReport};
use nrsfm::runner::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, Width};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FULL_STEPS: usize = 20_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("nrsfm").chain(args.iter().copied()))
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let checks = op_suite(None, 20, 2024).expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst_nuclear = checks
        .iter()
        .find(|c| c.name == "nuclear_norm")
        .map(|c| c.max_rel_error)
        .unwrap_or(f64::NAN);
    let worst_other = checks
        .iter()
        .filter(|c| c.name != "nuclear_norm")
        .map(|c| c.max_rel_error)
        .fold(0.0, f64::max);
    let covered = ["rodrigues", "nuclear_norm", "total_loss"]
        .iter()
        .all(|n| checks.iter().any(|c| c.name == *n));
    let trials_ok = checks.iter().all(|c| c.trials >= 20);
    let pass = covered && trials_ok && worst_other < 1e-4 && worst_nuclear < 1e-3 && secs < 120.0;
    outcome(
        pass,
        format!("{} ops x 20 points, max rel err {worst_other:.2e} (nuclear {worst_nuclear:.2e}), {secs:.1}s", checks.len()),
    )
}

/// Inclusive bounds on the reshuffled rank implied by the theorem, written out independently.
fn theorem_bounds(k: usize, s: usize) -> (usize, usize) {
    match s {
        1 => (k, k),
        2..=9 => ((s - 1) * k + 1, s * k),
        _ => (9 * k, 9 * k),
    }
}

fn criterion_2(dir: &Path) -> Outcome {
    let start = Instant::now();
    let small = dir.join("theorem_small.json");
    let large = dir.join("theorem_large.json");
    let base = [
        "verify-theorem",
        "--rank",
        "3",
        "--points",
        "20",
        "--trials",
        "100",
        "--tol",
        "1e-8",
        "--seed",
        "0",
    ];
    let mut a = base.to_vec();
    a.extend([
        "--frames",
        "60",
        "--components",
        "1,2,3,4,5,6,7,8,9",
        "--out",
        path_str(&small),
    ]);
    let mut b = base.to_vec();
    b.extend([
        "--frames",
        "120",
        "--components",
        "12",
        "--out",
        path_str(&large),
    ]);
    let codes = (cli(&a), cli(&b));
    let secs = start.elapsed().as_secs_f64();

    let mut reports: Vec<RankReport> =
        serde_json::from_str(&std::fs::read_to_string(&small).unwrap()).unwrap();
    reports.extend(
        serde_json::from_str::<Vec<RankReport>>(&std::fs::read_to_string(&large).unwrap()).unwrap(),
    );
    let mut violations = 0;
    let mut ranges = Vec::new();
    for r in &reports {
        let (lo, hi) = theorem_bounds(3, r.components);
        violations += r.ranks.iter().filter(|&&x| x < lo || x > hi).count();
        violations += r.base_ranks.iter().filter(|&&x| x != 3).count();
        let trials_ok = r.ranks.len() == 100;
        violations += usize::from(!trials_ok);
        ranges.push(format!(
            "s={}:{}-{}",
            r.components,
            r.ranks.iter().min().unwrap(),
            r.ranks.iter().max().unwrap()
        ));
    }
    let settings = reports.len() == 10;
    let pass = codes == (0, 0) && settings && violations == 0 && secs < 120.0;
    outcome(
        pass,
        format!(
            "{violations} violations over {} settings [{}], {secs:.1}s",
            reports.len(),
            ranges.join(" ")
        ),
    )
}

fn criterion_3() -> Outcome {
    let basis = basis_rotations();
    let mut invariant_err: f64 = 0.0;
    for b in &basis {
        let m = b.matrix();
        invariant_err = invariant_err.max((m.transpose() * m - Matrix3::identity()).abs().max());
        invariant_err = invariant_err.max((m.determinant() - 1.0).abs());
    }
    let vecs = DMatrix::from_fn(9, 9, |i, j| basis[i].matrix()[(j / 3, j % 3)]);
    let sv = vecs.clone().svd(false, false).singular_values;
    let rank = sv.iter().filter(|&&x| x > 1e-10 * sv.max()).count();

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut residual: f64 = 0.0;
    for _ in 0..1000 {
        let r = random_rotation(&mut rng);
        let c = decompose_rotation(&r);
        let rebuilt = basis
            .iter()
            .zip(c.iter())
            .fold(Matrix3::zeros(), |acc, (b, ci)| acc + b.matrix() * *ci);
        residual = residual.max((rebuilt - r.matrix()).norm());
    }
    let pass = invariant_err < 1e-12 && rank == 9 && residual < 1e-10;
    outcome(
        pass,
        format!(
            "invariant err {invariant_err:.1e}, basis rank {rank}, max residual {residual:.2e}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let m = |rows: usize, data: &[f64]| DMatrix::from_row_slice(3, rows, data);
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let gt = DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
    check("mpjpe identity", mpjpe(&gt, &gt).unwrap() == 0.0);
    check(
        "mpjpe 3-4-5",
        mpjpe(&m(1, &[3.0, 4.0, 0.0]), &m(1, &[0.0, 0.0, 0.0])).unwrap() == 5.0,
    );
    check(
        "mpjpe mean",
        mpjpe(
            &m(2, &[1.0, 0.0, 0.0, 0.0, 0.0, 2.0]),
            &DMatrix::zeros(3, 2),
        )
        .unwrap()
            == 1.5,
    );
    check("stress identity", stress(&gt, &gt).unwrap() == 0.0);
    let r = random_rotation(&mut rng);
    let moved = DMatrix::from_column_slice(3, 3, r.matrix().as_slice()) * &gt;
    let moved = DMatrix::from_fn(3, 6, |i, j| moved[(i, j)] + [0.3, -2.0, 5.0][i]);
    check("stress rigid", stress(&moved, &gt).unwrap() < 1e-9);
    check(
        "stress single pair",
        stress(
            &m(2, &[0.0, 3.0, 0.0, 0.0, 0.0, 0.0]),
            &m(2, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        )
        .unwrap()
            == 1.0,
    );
    check(
        "stress P<2",
        stress(&m(1, &[1.0, 2.0, 3.0]), &m(1, &[1.0, 2.0, 3.0])).is_err(),
    );
    check("e3d identity", e3d(&gt, &gt).unwrap() == 0.0);
    check("e3d zero", e3d(&DMatrix::zeros(3, 6), &gt).unwrap() == 1.0);
    check(
        "e3d double",
        (e3d(&(&gt * 2.0), &gt).unwrap() - 1.0).abs() < 1e-15,
    );
    check("e3d zero gt", e3d(&gt, &DMatrix::zeros(3, 6)).is_err());
    check("mpjpe mismatch", mpjpe(&gt, &DMatrix::zeros(3, 5)).is_err());
    for metric in Metric::ALL {
        let flipped = depth_flip_eval(&[flip_depth(&gt)], &[gt.clone()], metric, true).unwrap();
        check("flip recovers truth", flipped.mean == 0.0);
        check(
            "length mismatch",
            depth_flip_eval(&[gt.clone()], &[], metric, true).is_err(),
        );
    }

    let preds: Vec<_> = (0..100)
        .map(|_| DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let gts: Vec<_> = (0..100)
        .map(|_| DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let mut dominated = 0;
    for metric in Metric::ALL {
        let with = depth_flip_eval(&preds, &gts, metric, true).unwrap();
        for (i, v) in with.per_frame.iter().enumerate() {
            let plain = metric.eval(&preds[i], &gts[i]).unwrap();
            let flipped = metric.eval(&flip_depth(&preds[i]), &gts[i]).unwrap();
            if *v <= plain && *v == plain.min(flipped) {
                dominated += 1;
            }
        }
    }
    check("flip dominance", dominated == 300);
    outcome(
        fails.is_empty(),
        if fails.is_empty() {
            format!("all examples exact, flip dominance {dominated}/300")
        } else {
            format!("failed: {}", fails.join(", "))
        },
    )
}

fn eval_report(ckpt: &Path, data: &Path, out: &Path, extra: &[&str]) -> EvalReport {
    let mut args = vec![
        "eval",
        "--ckpt",
        path_str(ckpt),
        "--data",
        path_str(data),
        "--out",
        path_str(out),
    ];
    args.extend(extra);
    assert_eq!(cli(&args), 0, "eval {extra:?}");
    serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap()
}

/// Returns the criterion-5 outcome and the trained checkpoint path.
fn criterion_5(dir: &Path) -> (Outcome, std::path::PathBuf) {
    let steps = std::env::var("NRSFM_ACCEPTANCE_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(FULL_STEPS);
    let data = dir.join("synthetic");
    let synth = [
        "synth",
        "--frames",
        "2048",
        "--points",
        "15",
        "--rank",
        "3",
        "--rot-mode",
        "smooth",
    ];
    let mut a = synth.to_vec();
    a.extend(["--noise", "0.01", "--seed", "0", "--out", path_str(&data)]);
    assert_eq!(cli(&a), 0);

    let init = dir.join("init.ckpt");
    assert_eq!(
        cli(&[
            "train",
            "--data",
            path_str(&data),
            "--steps",
            "0",
            "--seed",
            "0",
            "--out",
            path_str(&init)
        ]),
        0
    );
    let trained = dir.join("trained.ckpt");
    let steps_arg = steps.to_string();
    let start = Instant::now();
    let code = cli(&[
        "train",
        "--data",
        path_str(&data),
        "--seq-len",
        "32",
        "--alpha",
        "0.01",
        "--lambda",
        "0.003",
        "--lr",
        "0.001",
        "--steps",
        &steps_arg,
        "--seed",
        "0",
        "--out",
        path_str(&trained),
    ]);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    assert_eq!(code, 0, "training failed");

    let before = eval_report(&init, &data, &dir.join("init.json"), &["--flip"]);
    let after = eval_report(&trained, &data, &dir.join("trained.json"), &["--flip"]);
    let e0 = before.mean(Metric::E3d).unwrap();
    let e1 = after.mean(Metric::E3d).unwrap();
    let rep = after.reprojection_rmse;
    let pass = steps == FULL_STEPS && minutes < 30.0 && e1 < 0.30 && rep < 1e-2 && e0 >= 5.0 * e1;
    let detail = format!(
        "{steps} steps in {minutes:.1} min; held-out e3d {e1:.4} (init {e0:.4}, ratio {:.2}x), reprojection {rep:.4}",
        e0 / e1
    );
    (outcome(pass, detail), trained)
}

fn criterion_6(dir: &Path, ckpt: &Path) -> Outcome {
    let data = dir.join("synthetic");
    let normal = eval_report(
        ckpt,
        &data,
        &dir.join("normal.json"),
        &["--flip", "--mode", "normal"],
    )
    .mean(Metric::E3d)
    .unwrap();
    let reverse = eval_report(
        ckpt,
        &data,
        &dir.join("reverse.json"),
        &["--flip", "--mode", "reverse"],
    )
    .mean(Metric::E3d)
    .unwrap();
    let mut worse = 0;
    let mut shuffle_sum = 0.0;
    for seed in 0..10 {
        let s = seed.to_string();
        let e = eval_report(
            ckpt,
            &data,
            &dir.join("shuffle.json"),
            &["--flip", "--mode", "shuffle", "--seed", &s],
        )
        .mean(Metric::E3d)
        .unwrap();
        worse += usize::from(e > normal);
        shuffle_sum += e;
    }
    let shuffle = shuffle_sum / 10.0;
    let pass = worse >= 7 && reverse - normal < shuffle - normal;
    outcome(pass, format!("e3d normal {normal:.4}, reverse {reverse:.4}, shuffle mean {shuffle:.4}; shuffle worse in {worse}/10 seeds"))
}

fn criterion_7(dir: &Path) -> Outcome {
    let d = synth_sequence(&SyntheticSpec {
        seed: 70,
        noise_sigma: 0.01,
        ..SyntheticSpec::new(200, 8, 2)
    })
    .unwrap();
    let cfg = TrainConfig {
        total_steps: 30,
        seq_len: 16,
        width: Width::Tiny,
        seed: 71,
        ..TrainConfig::default()
    };
    let a = train(&d, &cfg, &mut |_| {}).unwrap();
    let b = train(&d, &cfg, &mut |_| {}).unwrap();
    let log_bits = |log: &[nrsfm::runner::LogRecord]| {
        log.iter()
            .flat_map(|r| {
                [
                    r.step,
                    r.lr.to_bits(),
                    r.data.to_bits(),
                    r.nuclear.to_bits(),
                    r.cano.to_bits(),
                    r.total.to_bits(),
                ]
            })
            .collect::<Vec<_>>()
    };
    let logs_equal = log_bits(&a.log) == log_bits(&b.log);
    let bytes_a = a.checkpoint.to_bytes().unwrap();
    let ckpts_equal = bytes_a == b.checkpoint.to_bytes().unwrap();

    let path = dir.join("roundtrip.ckpt");
    save_checkpoint(&path, &a.checkpoint).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let file_equal = std::fs::read(&path).unwrap() == bytes_a;
    let params_equal = loaded
        .params
        .values
        .iter()
        .zip(&a.checkpoint.params.values)
        .all(|(x, y)| {
            x.iter()
                .zip(y.iter())
                .all(|(p, q)| p.to_bits() == q.to_bits())
        });
    let reencoded = Checkpoint::from_bytes(&bytes_a)
        .unwrap()
        .to_bytes()
        .unwrap()
        == bytes_a;

    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let pts = Array2::from_shape_fn((25, 27), |_| {
        rng.random_range(-1e3..1e3) * 10f64.powi(rng.random_range(-6..4))
    });
    let csv = dir.join("roundtrip_3d.csv");
    save_keypoints(&csv, &pts, 3).unwrap();
    let back = read_keypoints(&csv, 3).unwrap();
    let csv_err = back
        .iter()
        .zip(pts.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let pass =
        logs_equal && ckpts_equal && file_equal && params_equal && reencoded && csv_err < 1e-9;
    outcome(
        pass,
        format!(
            "logs identical {logs_equal}, checkpoints identical {ckpts_equal}, round trip bit-exact {}, csv max err {csv_err:.1e}",
            file_equal && params_equal && reencoded
        ),
    )
}

/// `Q^T` applied to each reshuffled row, via an explicit 3 x P frame.
fn ambiguous_shapes(shapes: &Array2<f64>, q: &[Rotation3]) -> Array2<f64> {
    let p = shapes.ncols() / 3;
    let mut out = shapes.clone();
    for (i, qi) in q.iter().enumerate() {
        let frame = DMatrix::from_fn(3, p, |a, j| shapes[[i, a * p + j]]);
        let rotated = qi.matrix().transpose() * frame;
        for a in 0..3 {
            for j in 0..p {
                out[[i, a * p + j]] = rotated[(a, j)];
            }
        }
    }
    out
}

fn rotation_rows(r: &[Rotation3]) -> Array2<f64> {
    Array2::from_shape_fn((r.len(), 9), |(i, e)| r[i].matrix()[(e / 3, e % 3)])
}

fn loss_pair(w: &Array2<f64>, r: &[Rotation3], s: &Array2<f64>) -> (f64, f64) {
    let mut t = Tape::<f64>::new();
    let (wv, rv, sv) = (
        t.leaf(w.clone()),
        t.leaf(rotation_rows(r)),
        t.leaf(s.clone()),
    );
    let data = loss_data(&mut t, wv, rv, sv).unwrap();
    let nuc = loss_nuclear(&mut t, sv).unwrap();
    (t.scalar_value(data), t.scalar_value(nuc))
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut ok = 0;
    let mut worst_data: f64 = 0.0;
    let mut min_increase = f64::INFINITY;
    for trial in 0..100 {
        let d = synth_sequence(&SyntheticSpec {
            seed: 800 + trial,
            ..SyntheticSpec::new(30, 10, 3)
        })
        .unwrap();
        let shapes = d.shapes.clone().unwrap();
        let rots = d.rotations.clone().unwrap();
        let (data0, nuc0) = loss_pair(&d.observations, &rots, &shapes);
        let q: Vec<Rotation3> = (0..d.frames()).map(|_| random_rotation(&mut rng)).collect();
        let rots_q: Vec<Rotation3> = rots
            .iter()
            .zip(&q)
            .map(|(r, qi)| Rotation3::from_matrix_unchecked(r.matrix() * qi.matrix()))
            .collect();
        let (data1, nuc1) = loss_pair(&d.observations, &rots_q, &ambiguous_shapes(&shapes, &q));
        let delta = (data1 - data0).abs();
        worst_data = worst_data.max(delta);
        min_increase = min_increase.min(nuc1 - nuc0);
        if delta < 1e-10 && nuc1 > nuc0 {
            ok += 1;
        }
    }
    outcome(ok == 100, format!("{ok}/100 trials; max |delta L_data| {worst_data:.1e}, min L_norm increase {min_increase:.3}"))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let (c5, ckpt) = criterion_5(dir.path());
    let outcomes = [
        (1, true, criterion_1()),
        (2, true, criterion_2(dir.path())),
        (3, true, criterion_3()),
        (4, true, criterion_4()),
        (5, true, c5),
        (6, false, criterion_6(dir.path(), &ckpt)),
        (7, true, criterion_7(dir.path())),
        (8, true, criterion_8()),
    ];
    let mut gated_failures = 0;
    for (n, gated, o) in outcomes {
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if gated { "" } else { " (soft, not gated)" };
        println!("criterion {n}: {status}{note} - {}", o.detail);
        gated_failures += usize::from(gated && !o.pass);
    }
    if gated_failures > 0 {
        eprintln!("{gated_failures} gated acceptance criteria failed");
        std::process::exit(1);
    }
}
