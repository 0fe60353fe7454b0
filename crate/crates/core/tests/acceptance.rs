//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use kpdk::geometry::{
    apply_affine, reprojection_loss, solve_affine, solve_affine_2d, AffineMap, DepthVector,
    KeypointSet2D, KeypointSet3D, DEFAULT_DAMPING,
};
use kpdk::lsqgrad::{finite_diff_grad, structured_loss};
use kpdk::metrics::{depth_corr, evaluate};
use kpdk::nnet::{
    init_model, predict_target, train, training_loss, MlpModel, TrainConfig, Variant,
};
use kpdk::synth::{face68, generate_dataset, PairSample, PoseRange};
use kpdk::warp::{coverage_counts, triangulate, warp_image, Image, SUBPIXEL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = (bool, String);

fn random_pair(
    rng: &mut ChaCha8Rng,
    k: usize,
    noise: f64,
) -> (DepthVector, KeypointSet2D, KeypointSet2D) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let src: Vec<[f64; 2]> = (0..k).map(|_| [rng.random(), rng.random()]).collect();
    let z: Vec<f64> = (0..k).map(|_| 0.3 * normal.sample(rng)).collect();
    let mut rows = [[0.0; 4]; 2];
    for r in rows.iter_mut().flatten() {
        *r = rng.random_range(-1.0..1.0);
    }
    let map = AffineMap::from_rows(rows).unwrap();
    let tgt: Vec<[f64; 2]> = src
        .iter()
        .zip(&z)
        .map(|(p, &zi)| {
            let q = map.apply_point([p[0], p[1], zi]);
            [
                q[0] + noise * normal.sample(rng),
                q[1] + noise * normal.sample(rng),
            ]
        })
        .collect();
    let test_z: Vec<f64> = (0..k).map(|_| 0.3 * normal.sample(rng)).collect();
    (
        DepthVector::new(test_z).unwrap(),
        KeypointSet2D::new(src).unwrap(),
        KeypointSet2D::new(tgt).unwrap(),
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let k = if i % 2 == 0 { 5 } else { 68 };
        let damping = if (i / 2) % 2 == 0 { 1e-8 } else { 1e-4 };
        let (z, src, tgt) = random_pair(&mut rng, k, 0.05);
        let an = structured_loss(&z, &src, &tgt, damping).unwrap().grad_z;
        let fd = finite_diff_grad(&z, &src, &tgt, damping, 1e-5).unwrap();
        for (a, f) in an.iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *f));
        }
    }
    let lsq_secs = start.elapsed().as_secs_f64();

    let mut worst_model: f64 = 0.0;
    let variants = [
        Variant::Pseudoinverse,
        Variant::Separate,
        Variant::SecondaryLsq,
    ];
    let template = face68();
    for i in 0..20 {
        let variant = variants[i % 3];
        let sample =
            &generate_dataset(&template, 1, &PoseRange::default(), 200 + i as u64).unwrap()[0];
        let mut model = init_model(68, variant, i as u64).unwrap();
        // Move away from the zero-initialized output layer so every
        // parameter block carries gradient.
        let normal = Normal::new(0.0, 0.01).unwrap();
        for block in model.params_mut().into_iter().skip(2) {
            for v in block.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        let (_, grad) = training_loss(&model, sample, DEFAULT_DAMPING).unwrap();
        let grads = [
            grad.w1.as_slice(),
            grad.b1.as_slice(),
            grad.w2.as_slice(),
            grad.b2.as_slice(),
        ];
        for _ in 0..25 {
            let block = rng.random_range(0..4);
            let idx = rng.random_range(0..grads[block].len());
            let an = grads[block][idx];
            let h = 1e-5;
            let eval = |delta: f64| -> f64 {
                let mut m: MlpModel = model.clone();
                m.params_mut()[block][idx] += delta;
                training_loss(&m, sample, DEFAULT_DAMPING).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            worst_model = worst_model.max(rel_err(an, fd));
        }
    }
    let ok = worst < 1e-4 && worst_model < 1e-4 && lsq_secs < 30.0;
    (
        ok,
        format!(
            "max rel err {worst:.2e} over 200 structured-loss instances ({lsq_secs:.1}s), \
             {worst_model:.2e} over 20 full-model instances"
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut violations = 0;
    let instances = 50;
    for i in 0..instances {
        let k = [4, 5, 10, 68][i % 4];
        let (z, src, tgt) = random_pair(&mut rng, k, 0.05);
        let pts = KeypointSet3D::from_parts(&src, &z).unwrap();
        let best = solve_affine(&pts, &tgt, 0.0).unwrap();
        let base = reprojection_loss(&best, &pts, &tgt);
        let sol = best.solution();
        for j in 0..1000i32 {
            let scale = 10f64.powi(-(j % 6) - 1);
            let mut p = sol;
            for v in p.iter_mut() {
                *v += scale * normal.sample(&mut rng);
            }
            if reprojection_loss(&AffineMap::from_solution(&p), &pts, &tgt) < base {
                violations += 1;
            }
        }
    }

    let template = face68();
    let mut recovery: f64 = 0.0;
    for s in generate_dataset(&template, 50, &PoseRange::default(), 203).unwrap() {
        let meta = s.meta.as_ref().unwrap();
        let pts = KeypointSet3D::from_parts(&s.src, s.gt_depth.as_ref().unwrap()).unwrap();
        let fit = solve_affine(&pts, &s.tgt, 0.0).unwrap();
        recovery = recovery.max(fit.max_abs_diff(&meta.generating_map()));
    }
    (
        violations == 0 && recovery < 1e-10,
        format!("{violations} perturbations beat the solver on {instances} instances; generating-map recovery error {recovery:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let k = [4, 10, 68][i % 3];
        let (_, src, tgt) = random_pair(&mut rng, k, 0.05);
        let c = rng.random_range(-2.0..2.0);
        let z = DepthVector::constant(k, c);
        let structured = structured_loss(&z, &src, &tgt, DEFAULT_DAMPING)
            .unwrap()
            .loss;
        let map2d = solve_affine_2d(&src, &tgt).unwrap();
        let flat = KeypointSet3D::from_parts(&src, &DepthVector::zeros(k)).unwrap();
        let baseline = reprojection_loss(&map2d, &flat, &tgt);
        worst = worst.max((structured - baseline).abs());
    }
    (
        worst < 1e-9,
        format!("max |structured - 2D| = {worst:.2e} over 100 pairs"),
    )
}

struct Benchmark {
    pseudo: MlpModel,
    separate: MlpModel,
    test: Vec<PairSample>,
    pseudo_secs: f64,
}

fn benchmark() -> Benchmark {
    let template = face68();
    let train_set = generate_dataset(&template, 2000, &PoseRange::default(), 1).unwrap();
    let test = generate_dataset(&template, 500, &PoseRange::default(), 2).unwrap();

    let start = Instant::now();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 200,
        variant: Variant::Pseudoinverse,
        ..TrainConfig::default()
    };
    let (pseudo, _) = train(init_model(68, cfg.variant, 0).unwrap(), &train_set, &cfg).unwrap();
    let pseudo_secs = start.elapsed().as_secs_f64();

    let cfg = TrainConfig {
        learning_rate: 0.001,
        epochs: 500,
        variant: Variant::Separate,
        ..TrainConfig::default()
    };
    let (separate, _) = train(init_model(68, cfg.variant, 0).unwrap(), &train_set, &cfg).unwrap();
    Benchmark {
        pseudo,
        separate,
        test,
        pseudo_secs,
    }
}

fn predictions(
    model: &MlpModel,
    variant: Variant,
    test: &[PairSample],
) -> (Vec<KeypointSet2D>, Vec<DepthVector>) {
    test.iter()
        .map(|s| {
            let (p, _, z) = predict_target(model, s, variant, DEFAULT_DAMPING).unwrap();
            (p, z)
        })
        .unzip()
}

fn criterion_4(b: &Benchmark) -> Outcome {
    let (_, z) = predictions(&b.pseudo, Variant::Pseudoinverse, &b.test);
    let gt: Vec<DepthVector> = b.test.iter().map(|s| s.gt_depth.clone().unwrap()).collect();
    let (total, _) = depth_corr(&z, &gt).unwrap();
    let k = 68.0;
    (
        total > 0.9 * k && b.pseudo_secs < 600.0,
        format!(
            "DepthCorr {total:.2} = {:.3}·K (need > 0.9·K), training {:.0}s",
            total / k,
            b.pseudo_secs
        ),
    )
}

fn criterion_5(b: &Benchmark) -> Outcome {
    let mse_of = |preds: Vec<KeypointSet2D>| evaluate(&b.test, &preds, None, None).unwrap().mse;
    let pseudo = mse_of(predictions(&b.pseudo, Variant::Pseudoinverse, &b.test).0);
    let secondary = mse_of(predictions(&b.separate, Variant::SecondaryLsq, &b.test).0);
    let separate = mse_of(predictions(&b.separate, Variant::Separate, &b.test).0);
    let affine2d = mse_of(
        b.test
            .iter()
            .map(|s| {
                let map = solve_affine_2d(&s.src, &s.tgt).unwrap();
                apply_affine(
                    &map,
                    &KeypointSet3D::from_parts(&s.src, &DepthVector::zeros(s.len())).unwrap(),
                )
            })
            .collect(),
    );
    let tol = 1.05;
    let ok = pseudo <= secondary * tol
        && secondary <= separate * tol
        && separate <= affine2d
        && pseudo < affine2d;
    (
        ok,
        format!(
            "MSE pseudoinverse {pseudo:.3e}, secondary-LSQ {secondary:.3e}, separate {separate:.3e}, 2D affine {affine2d:.3e}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let gt: Vec<DepthVector> = (0..200)
        .map(|_| DepthVector::new((0..66).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let neg: Vec<DepthVector> = gt
        .iter()
        .map(|z| DepthVector::new(z.values().iter().map(|v| -v).collect()).unwrap())
        .collect();
    let (same, _) = depth_corr(&gt, &gt).unwrap();
    let (anti, _) = depth_corr(&neg, &gt).unwrap();
    (
        (same - 66.0).abs() < 1e-9 && (anti - 66.0).abs() < 1e-9,
        format!("identical {same:.12}, anti-correlated {anti:.12}"),
    )
}

fn hull(points: &[[i64; 2]]) -> Vec<[i64; 2]> {
    let mut p = points.to_vec();
    p.sort_unstable();
    p.dedup();
    let cross = |o: [i64; 2], a: [i64; 2], b: [i64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[i64; 2]> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<[i64; 2]> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);

    let (w, h) = (96, 80);
    let pixels = (0..3 * w * h).map(|_| rng.random()).collect();
    let img = Image::new(w, h, pixels).unwrap();
    let mut pts: Vec<[f64; 2]> = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    pts.extend((0..30).map(|_| [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]));
    let z = DepthVector::new(
        (0..pts.len())
            .map(|_| rng.random_range(-0.5..0.5))
            .collect(),
    )
    .unwrap();
    let kp = KeypointSet2D::new(pts).unwrap();
    let out = warp_image(&img, &kp, &z, &AffineMap::identity(), (w, h)).unwrap();
    let mut max_diff = 0;
    let mut uncovered = 0;
    for y in 0..h {
        for x in 0..w {
            if out.mask[y * w + x] == 0 {
                uncovered += 1;
                continue;
            }
            let (a, b) = (out.image.get(x, y), img.get(x, y));
            for c in 0..3 {
                max_diff = max_diff.max((a[c] as i32 - b[c] as i32).abs());
            }
        }
    }

    let (cw, ch) = (64usize, 64usize);
    let mut bad_meshes = 0;
    for _ in 0..50 {
        let n = rng.random_range(3..60);
        let fixed: Vec<[i64; 2]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-8 * SUBPIXEL..(cw as i64 + 8) * SUBPIXEL),
                    rng.random_range(-8 * SUBPIXEL..(ch as i64 + 8) * SUBPIXEL),
                ]
            })
            .collect();
        let px: Vec<[f64; 2]> = fixed
            .iter()
            .map(|p| [p[0] as f64 / SUBPIXEL as f64, p[1] as f64 / SUBPIXEL as f64])
            .collect();
        let mesh = triangulate(&KeypointSet2D::new(px.clone()).unwrap()).unwrap();
        let (counts, _) = coverage_counts(&mesh, &px, cw, ch).unwrap();
        let hull = hull(&fixed);
        let mut ok = true;
        for y in 0..ch {
            for x in 0..cw {
                let c = [
                    x as i64 * SUBPIXEL + SUBPIXEL / 2,
                    y as i64 * SUBPIXEL + SUBPIXEL / 2,
                ];
                let inside = (0..hull.len()).all(|i| {
                    let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]) > 0
                });
                let n = counts[y * cw + x];
                if n > 1 || (inside && n != 1) {
                    ok = false;
                }
            }
        }
        if !ok {
            bad_meshes += 1;
        }
    }
    (
        max_diff <= 1 && uncovered == 0 && bad_meshes == 0,
        format!("identity warp max diff {max_diff}/255 ({uncovered} hull pixels unwritten); {bad_meshes}/50 meshes with cracks or overlaps"),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_kpdk"))
        .current_dir(dir)
        .env_remove("KPDK_SEED")
        .args(args)
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    let mut failed = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let pixels = (0..3 * 64 * 64).map(|_| rng.random()).collect();
    Image::new(64, 64, pixels)
        .unwrap()
        .write_png(&tmp.path().join("face.png"))
        .unwrap();
    let sample = &generate_dataset(&face68(), 1, &PoseRange::default(), 9).unwrap()[0];
    std::fs::write(
        tmp.path().join("src.json"),
        serde_json::to_string(&sample.src).unwrap(),
    )
    .unwrap();
    std::fs::write(
        tmp.path().join("tgt.json"),
        serde_json::to_string(&sample.tgt).unwrap(),
    )
    .unwrap();

    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        std::fs::create_dir(&dir).unwrap();
        for f in ["face.png", "src.json", "tgt.json"] {
            std::fs::copy(tmp.path().join(f), dir.join(f)).unwrap();
        }
        let steps: [&[&str]; 5] = [
            &["gen", "--count", "100", "--seed", "7", "--out", "d.jsonl"],
            &[
                "train", "--data", "d.jsonl", "--epochs", "3", "--seed", "1", "--out", "m.json",
            ],
            &[
                "eval",
                "--model",
                "m.json",
                "--data",
                "d.jsonl",
                "--out",
                "r.json",
                "--heatmap",
                "h.csv",
            ],
            &[
                "eval",
                "--baseline",
                "template",
                "--data",
                "d.jsonl",
                "--out",
                "t.json",
            ],
            &[
                "warp", "--image", "face.png", "--src", "src.json", "--tgt", "tgt.json", "--model",
                "m.json", "--out", "w.png", "--ppm",
            ],
        ];
        for s in steps {
            if !run_cli(&dir, s) {
                failed.push(format!("{run}: {}", s[0]));
            }
        }
    }
    let outputs = [
        "d.jsonl",
        "m.json",
        "m.trainlog.csv",
        "r.json",
        "h.csv",
        "t.json",
        "w.png",
        "w.ppm",
        "w.mask.pgm",
    ];
    for f in outputs {
        let a = std::fs::read(tmp.path().join("a").join(f)).ok();
        let b = std::fs::read(tmp.path().join("b").join(f)).ok();
        if a.is_none() || a != b {
            mismatched.push(f);
        }
    }
    (
        failed.is_empty() && mismatched.is_empty(),
        format!(
            "{} outputs compared; failed commands {:?}; differing outputs {:?}",
            outputs.len(),
            failed,
            mismatched
        ),
    )
}

fn main() {
    let bench = benchmark();
    let results = [
        ("1 gradient correctness", criterion_1()),
        ("2 solver optimality", criterion_2()),
        ("3 degenerate-depth equivalence", criterion_3()),
        ("4 synthetic depth recovery", criterion_4(&bench)),
        ("5 model ordering", criterion_5(&bench)),
        ("6 DepthCorr calibration", criterion_6()),
        ("7 warper exactness", criterion_7()),
        ("8 CLI determinism", criterion_8()),
    ];
    let mut failures = 0;
    for (name, (ok, detail)) in &results {
        println!(
            "criterion {name}: {} ({detail})",
            if *ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("{failures} criterion/criteria failed");
        std::process::exit(1);
    }
}
