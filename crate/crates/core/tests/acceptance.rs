//! Acceptance suite. Runs every criterion sequentially (training criteria
//! are timed, so they must not share the CPU with each other) and prints one
//! PASS/FAIL line per criterion. Exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use awing::heatmap::{argmax, decode_channel, render_heatmap, Frame, FramePolicy, GaussianSpec};
use awing::loss_map::{apply_weighted_loss, build_mask_array};
use awing::losses::{awing_linear, awing_loss, awing_nonlinear, influence, loss_grid, wing_linear, wing_nonlinear};
use awing::metrics::{ced_auc, failure_rate, nme, pck, NormalizationRule, CED_POINTS};
use awing::trainer::{self, net, Ablation, TinyNet, TrainConfig};
use awing::{LandmarkSet, LossKind, LossParams};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let h = 1e-6;
    let n = 50;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for kind in LossKind::ALL {
        let p = LossParams::with_kind(kind);
        for i in 0..n {
            for j in 0..n {
                let y = i as f64 / (n - 1) as f64;
                let yhat = j as f64 / (n - 1) as f64;
                let d = (yhat - y).abs();
                // Branch points: the L1 kink and the AWing/Wing switches.
                if d < 1e-9 || (d - p.theta).abs() < 1e-4 || (d - p.omega).abs() < 1e-4 {
                    continue;
                }
                let a = p.eval(y, yhat).unwrap().gradient;
                let fd = (p.eval(y, yhat + h).unwrap().value - p.eval(y, yhat - h).unwrap().value) / (2.0 * h);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
                worst = worst.max(rel);
                count += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-5 && secs < 5.0,
        format!("{count} points, worst relative error {worst:.2e} (< 1e-5), {secs:.2}s (< 5s)"),
    )
}

fn awing_continuity() -> Outcome {
    let p = LossParams::default();
    let mut value_gap: f64 = 0.0;
    let mut grad_gap: f64 = 0.0;
    for k in 0..=10 {
        let y = k as f64 / 10.0;
        value_gap = value_gap.max((awing_nonlinear(y, p.theta, &p) - awing_linear(y, p.theta, &p)).abs());
        // One-sided derivatives from each branch's closed form at |Δ| = θ.
        let e = p.alpha - y;
        let r = p.theta / p.epsilon;
        let left = p.omega * e * r.powf(e - 1.0) / (p.epsilon * (1.0 + r.powf(e)));
        let right = awing_loss(y, y + p.theta + 1e-3, &p).unwrap().gradient;
        grad_gap = grad_gap.max((left - right).abs());
    }
    let wing_gap = (wing_nonlinear(p.omega, &p) - wing_linear(p.omega, &p)).abs();
    check(
        value_gap < 1e-9 && grad_gap < 1e-6 && wing_gap < 1e-9,
        format!("AWing value gap {value_gap:.1e}, gradient gap {grad_gap:.1e}; Wing gap at omega {wing_gap:.1e}"),
    )
}

fn adaptation() -> Outcome {
    let p = LossParams::default();
    let d: f64 = 0.05;
    let mut got = Vec::new();
    let mut oracle_err: f64 = 0.0;
    for y in [0.0, 0.5, 1.0] {
        let v = influence(d, y, &p).unwrap();
        let e = p.alpha - y;
        let want = p.omega * e * (d / p.epsilon).powf(e - 1.0) / (p.epsilon * (1.0 + (d / p.epsilon).powf(e)));
        oracle_err = oracle_err.max((v - want).abs() / want);
        got.push(v);
    }
    check(
        got[0] < got[1] && got[1] < got[2] && oracle_err < 1e-12,
        format!(
            "influence at 0.05: y=0 {:.4} < y=0.5 {:.4} < y=1 {:.4}; oracle rel err {oracle_err:.1e}",
            got[0], got[1], got[2]
        ),
    )
}

fn foreground_fraction() -> Outcome {
    let lm = LandmarkSet::new(vec![[31.0, 20.0]]);
    let hm = render_heatmap(&lm, Frame::new(64, 64), GaussianSpec::default(), FramePolicy::Reject).unwrap();
    let nonzero = hm.channel(0).iter().filter(|&&v| v > 0.0).count();
    check(
        nonzero == 49,
        format!("{nonzero}/4096 nonzero = {:.2}%", 100.0 * nonzero as f64 / 4096.0),
    )
}

fn weighted_map_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = LossParams::default();
    let w = 10.0;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let gt = Array3::from_shape_fn((3, 8, 8), |_| if rng.gen_bool(0.3) { rng.gen::<f64>() } else { 0.0 });
        let pred = Array3::from_shape_fn((3, 8, 8), |_| rng.gen::<f64>());
        let mask = build_mask_array(gt.view(), w).unwrap();
        let grid = loss_grid(gt.view(), pred.view(), &p).unwrap();
        let (_, mean) = apply_weighted_loss(grid.values.view(), &mask).unwrap();

        let mut sum = 0.0;
        for c in 0..3 {
            for r in 0..8i64 {
                for col in 0..8i64 {
                    let mut m = f64::NEG_INFINITY;
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            let (rr, cc) = (r + dr, col + dc);
                            if (0..8).contains(&rr) && (0..8).contains(&cc) {
                                m = m.max(gt[[c, rr as usize, cc as usize]]);
                            }
                        }
                    }
                    let y = gt[[c, r as usize, col as usize]];
                    let yhat = pred[[c, r as usize, col as usize]];
                    let e = p.alpha - y;
                    let d = (y - yhat).abs();
                    let loss = if d < p.theta {
                        p.omega * (1.0 + (d / p.epsilon).powf(e)).ln()
                    } else {
                        let rt = p.theta / p.epsilon;
                        let a = p.omega / (1.0 + rt.powf(e)) * e * rt.powf(e - 1.0) / p.epsilon;
                        let cc = p.theta * a - p.omega * (1.0 + rt.powf(e)).ln();
                        a * d - cc
                    };
                    let weight = if m >= 0.2 { w + 1.0 } else { 1.0 };
                    sum += weight * loss;
                }
            }
        }
        let oracle = sum / 192.0;
        worst = worst.max((mean - oracle).abs());
    }
    check(worst < 1e-12, format!("200 stacks, max |pipeline - oracle| {worst:.1e} (< 1e-12)"))
}

fn decode_accuracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let frame = Frame::new(32, 32);
    let spec = GaussianSpec {
        subpixel: true,
        ..GaussianSpec::default()
    };
    let (mut q, mut a) = ([0.0f64; 2], [0.0f64; 2]);
    let n = 1000;
    for _ in 0..n {
        let t = [rng.gen_range(4.0..27.0), rng.gen_range(4.0..27.0)];
        let hm = render_heatmap(&LandmarkSet::new(vec![t]), frame, spec, FramePolicy::Reject).unwrap();
        let (p, _) = decode_channel(hm.channel(0));
        let (r, c) = argmax(hm.channel(0));
        let plain = [c as f64, r as f64];
        for k in 0..2 {
            q[k] += (p[k] - t[k]).abs() / n as f64;
            a[k] += (plain[k] - t[k]).abs() / n as f64;
        }
    }
    let mut worst_int: f64 = 0.0;
    for x in 3..29 {
        for y in [3usize, 15, 28] {
            let t = [x as f64, y as f64];
            let hm = render_heatmap(&LandmarkSet::new(vec![t]), frame, GaussianSpec::default(), FramePolicy::Reject).unwrap();
            let (p, _) = decode_channel(hm.channel(0));
            worst_int = worst_int.max((p[0] - t[0]).abs()).max((p[1] - t[1]).abs());
        }
    }
    check(
        q[0] < a[0] && q[1] < a[1] && worst_int <= 0.25,
        format!(
            "MAE x {:.4} < {:.4}, y {:.4} < {:.4}; integer round trip max {worst_int}",
            q[0], a[0], q[1], a[1]
        ),
    )
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let norm = NormalizationRule::InterOcular(0, 1);
    let mut worst: f64 = 0.0;
    let mut nmes = Vec::new();
    let mut pck_worst: f64 = 0.0;
    for _ in 0..100 {
        let gt: Vec<[f64; 2]> = (0..10).map(|_| [rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)]).collect();
        let pred: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + rng.gen_range(-8.0..8.0), p[1] + rng.gen_range(-8.0..8.0)]).collect();
        let d = ((gt[0][0] - gt[1][0]).powi(2) + (gt[0][1] - gt[1][1]).powi(2)).sqrt();
        let mut s = 0.0;
        let mut within = 0;
        for (g, p) in gt.iter().zip(&pred) {
            let e = ((g[0] - p[0]).powi(2) + (g[1] - p[1]).powi(2)).sqrt();
            s += e;
            if e <= 0.1 * d {
                within += 1;
            }
        }
        let oracle = s / 10.0 / d;
        let (g, p) = (LandmarkSet::new(gt), LandmarkSet::new(pred));
        let got = nme(&g, &p, &norm).unwrap();
        worst = worst.max((got - oracle).abs());
        pck_worst = pck_worst.max((pck(&g, &p, &norm, 0.1).unwrap() - within as f64 / 10.0).abs());
        nmes.push(got);
    }
    let mut fr_worst: f64 = 0.0;
    let mut auc_worst: f64 = 0.0;
    for thr in [0.05, 0.08, 0.1, 0.2] {
        let fails = nmes.iter().filter(|&&v| v > thr).count() as f64 / nmes.len() as f64;
        fr_worst = fr_worst.max((failure_rate(&nmes, thr).unwrap() - fails).abs());
        let pts: Vec<f64> = (0..CED_POINTS)
            .map(|k| {
                let t = thr * k as f64 / (CED_POINTS - 1) as f64;
                nmes.iter().filter(|&&v| v <= t).count() as f64 / nmes.len() as f64
            })
            .collect();
        let step = thr / (CED_POINTS - 1) as f64;
        let area: f64 = pts.windows(2).map(|w| 0.5 * (w[0] + w[1]) * step).sum();
        auc_worst = auc_worst.max((ced_auc(&nmes, thr).unwrap().auc - area / thr).abs());
    }
    let exact = nme(
        &LandmarkSet::new(vec![[0.0, 0.0], [10.0, 0.0]]),
        &LandmarkSet::new(vec![[0.0, 0.0], [13.0, 4.0]]),
        &NormalizationRule::Constant(10.0),
    )
    .unwrap();
    let zero_auc = ced_auc(&[0.0; 7], 0.1).unwrap().auc;
    check(
        worst < 1e-12 && pck_worst < 1e-12 && fr_worst < 1e-12 && auc_worst < 1e-12 && exact == 0.25 && zero_auc == 1.0,
        format!(
            "NME {worst:.1e}, PCK {pck_worst:.1e}, FR {fr_worst:.1e}, AUC {auc_worst:.1e}; 3-4-5 case {exact}, all-zero AUC {zero_auc}"
        ),
    )
}

fn directional_ablation() -> Outcome {
    let start = Instant::now();
    let base = TrainConfig::default();
    let rows = [Ablation::Mse, Ablation::AWing, Ablation::AWingWm];
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); rows.len()];
    for seed in 0..5 {
        let result = trainer::ablation_run(seed, &base, &rows).map_err(|e| e.to_string())?;
        for (k, r) in result.iter().enumerate() {
            per[k].push(r.nme);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let med: Vec<f64> = per.iter().map(|v| trainer::median(v)).collect();
    check(
        med[2] < med[1] && med[1] < med[0] && secs < 900.0,
        format!(
            "median NME AW+WM {:.4} < AW {:.4} < MSE {:.4}; {:.0}s (< 900s)",
            med[2], med[1], med[0], secs
        ),
    )
}

fn foreground_reduction() -> Outcome {
    let base = TrainConfig {
        epochs: 50,
        lr_decay_epochs: vec![40],
        train_count: 200,
        test_count: 1,
        ..TrainConfig::default()
    };
    let (train_set, _) = trainer::split(&base);
    let mut fg = Vec::new();
    for kind in [LossKind::Mse, LossKind::AWing] {
        let cfg = TrainConfig {
            loss: LossParams::with_kind(kind),
            ..base.clone()
        };
        let data = trainer::prepare_all(&cfg, &train_set).map_err(|e| e.to_string())?;
        let out = trainer::train(&cfg, &data).map_err(|e| e.to_string())?;
        fg.push(out.trace[49].mse_fg);
    }
    let reduction = 1.0 - fg[1] / fg[0];
    check(
        reduction >= 0.10,
        format!(
            "epoch 50 foreground MSE: AWing {:.5} vs MSE {:.5}, reduction {:.1}% (>= 10%)",
            fg[1],
            fg[0],
            100.0 * reduction
        ),
    )
}

fn backprop_4x4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = net::NetSpec {
        boundary_coords: true,
        ..net::NetSpec::new(4, 6)
    };
    let mut tiny = TinyNet::new(spec, &mut rng);
    // Unit-scale parameters everywhere (including the biases and the
    // down-scaled heads) keep every gradient far above finite-difference
    // round-off.
    for t in tiny.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let input = Array3::from_shape_fn((4, 4, 4), |_| rng.gen::<f64>());
    let target = Array2::from_shape_fn((2 * 2 * 2, 6), |_| if rng.gen_bool(0.5) { rng.gen::<f64>() } else { 0.0 });
    let btarget = Array2::from_shape_fn((8, 1), |_| rng.gen::<f64>());
    let mult = Array2::from_shape_fn((8, 6), |_| if rng.gen_bool(0.3) { 11.0 } else { 1.0 });
    let params = LossParams::default();
    let objective = |n: &TinyNet| -> (f64, net::Grads) {
        let cache = n.forward(net::stack_images([input.view(), input.view()], 4, 4, 4));
        let (v1, g1) = trainer::weighted_objective(&cache.output.data, &target, Some(&mult), &params).unwrap();
        let b = cache.boundary.as_ref().expect("boundary head");
        let (v2, g2) = trainer::weighted_objective(&b.data, &btarget, None, &params).unwrap();
        let grads = n.backward(&cache, &g1, Some(&g2));
        (v1 + v2, grads)
    };
    let (_, grads) = objective(&tiny);
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    // Relative error per parameter tensor, ||a - fd|| / max(||a||, ||fd||),
    // over a random subset of its entries.
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (ti, a) in analytic.iter().enumerate() {
        let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
        for k in 0..a.len() {
            if a.len() > 16 && !rng.gen_bool(0.3) {
                continue;
            }
            let orig = tiny.tensors()[ti][k];
            tiny.tensors_mut()[ti][k] = orig + h;
            let up = objective(&tiny).0;
            tiny.tensors_mut()[ti][k] = orig - h;
            let down = objective(&tiny).0;
            tiny.tensors_mut()[ti][k] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (fd - a[k]).powi(2);
            na += a[k] * a[k];
            nf += fd * fd;
            count += 1;
        }
        worst = worst.max(diff.sqrt() / na.sqrt().max(nf.sqrt()));
    }
    check(
        worst < 1e-4 && count > 100,
        format!("{count} parameters over {} tensors, worst tensor relative error {worst:.2e} (< 1e-4)", analytic.len()),
    )
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_awing"))
        .current_dir(dir)
        .args(args)
        .env_remove("AWING_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    std::fs::write(
        dir.join("gt.txt"),
        "a 32 24 10,8 20,8 15,12 11,18 19,18\nb 32 24 9.5,7 21,9 15.5,13 10,19 20.5,17\n",
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(
        dir.join("pred.txt"),
        "a 32 24 10.5,8 20,9 15,12 11,17 19,18\nb 32 24 9,7 21,9 16,13 10,19 22,17\n",
    )
    .map_err(|e| e.to_string())?;
    let tiny = ["--set", "train_count=6", "--set", "test_count=3", "--set", "epochs=2", "--set", "frame=16", "--set", "batch_size=3"];
    let mut commands: Vec<(&str, Vec<&str>)> = vec![
        ("curves", vec!["curves", "--steps", "41"]),
        ("render", vec!["render", "--annotations", "gt.txt", "--out-dir", "hm", "--subpixel"]),
        ("decode", vec!["decode", "hm/a.hmap", "hm/b.hmap"]),
        ("mask", vec!["mask", "--heatmaps", "hm/a.hmap"]),
        ("boundary", vec!["boundary", "--annotations", "gt.txt", "--out-dir", "bd"]),
        ("coords", vec!["coords", "--width", "32", "--height", "24", "--boundary", "bd/a.boundary.hmap"]),
        ("evaluate", vec!["evaluate", "--gt", "gt.txt", "--pred", "pred.txt", "--pck", "0.1"]),
    ];
    let mut train = vec!["train", "--seed", "4"];
    train.extend(tiny);
    commands.push(("train", train));
    let mut sweep = vec!["sweep", "--omega", "10,14", "--seed", "4"];
    sweep.extend(tiny);
    commands.push(("sweep", sweep));
    let mut ablate = vec!["ablate", "--seeds", "2", "--configs", "MSE,AW+WM,AW+WM+coords+boundary"];
    ablate.extend(tiny);
    commands.push(("ablate", ablate));

    let mut names = Vec::new();
    for (name, args) in &commands {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let file = format!("{name}{run}.csv");
            let mut full = args.clone();
            full.extend(["--out", file.as_str()]);
            cli(dir, &full)?;
            outputs.push(std::fs::read(dir.join(&file)).map_err(|e| e.to_string())?);
        }
        if outputs[0] != outputs[1] || outputs[0].is_empty() {
            return Err(format!("{name}: outputs differ between identical runs"));
        }
        names.push(*name);
    }
    Ok(format!("byte-identical reruns: {}", names.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient suite", gradient_suite),
        ("AWing continuity and smoothness", awing_continuity),
        ("adaptation of influence with y", adaptation),
        ("foreground fraction", foreground_fraction),
        ("weighted loss map oracle", weighted_map_oracle),
        ("decode accuracy", decode_accuracy),
        ("metrics oracle", metrics_oracle),
        ("directional ablation", directional_ablation),
        ("foreground loss reduction", foreground_reduction),
        ("backprop verification", backprop_4x4),
        ("CLI determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS criterion {:>2} {name}: {d} [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {d} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
