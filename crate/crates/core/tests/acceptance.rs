//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `DEFORMKIT_ACCEPT_SKIP_TRAINING=1` skips the two training criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use deformkit::autograd::{concat0, conv3d, correlation_local, warp, Var};
use deformkit::data::SyntheticSpec;
use deformkit::designs::{compose, correlation, upsample_field, Radius};
use deformkit::grid::{warp_nearest, warp_trilinear};
use deformkit::harness::{evaluate, train_with, DataProvider, DataSource, ModelSpec, Predictor, RunConfig, TrainOutcome};
use deformkit::metrics::{jacobian_map, ndv_pct, sdlogj, MetricsReport, NdvMode};
use deformkit::models::{RegistrationModel, VariantConfig, VariantName};
use deformkit::objectives::{
    similarity, smoothness, soft_dice, total_loss, total_loss_var, LossInputs, LossWeights, SimilarityKind,
};
use deformkit::{DisplacementField, Dims3, FeatureMap, LabelMap, Tensor, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn grid_tensor(d: Dims3, c: usize, seed: u64) -> Tensor {
    Tensor::new(d.shape_with_channels(c), rand_vec(c * d.len(), seed)).unwrap()
}

// ---------------------------------------------------------------- counts

fn parameter_counts() -> Outcome {
    let start = Instant::now();
    let want = [
        (VariantName::Vxm, 2.6e6),
        (VariantName::MamVxm, 2.4e6),
        (VariantName::Tm, 46.6e6),
        (VariantName::MamTm, 39.0e6),
        (VariantName::Lku, 8.3e6),
        (VariantName::Dual, 1.9e6),
        (VariantName::Dwp, 1.9e6),
        (VariantName::Dwcp, 8.4e6),
        (VariantName::Dwcpi, 8.1e6),
    ];
    let mut parts = Vec::new();
    for (v, target) in want {
        let n = RegistrationModel::build(&VariantConfig::published(v)).map_err(|e| e.to_string())?.count_parameters();
        let rel = n as f64 / target - 1.0;
        ensure(rel.abs() <= 0.15, || format!("{} has {n} parameters, {:+.1}% from {target}", v.as_str(), rel * 100.0))?;
        parts.push(format!("{} {:.2}M", v.as_str(), n as f64 / 1e6));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.0}s"))?;
    Ok(format!("{} in {secs:.1}s", parts.join(", ")))
}

// ----------------------------------------------------------- correlation

fn correlation_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for fixture in 0..20u64 {
        let (d, c) = (Dims3::cube(4), 8);
        let (ft, fs) = (grid_tensor(d, c, 2 * fixture), grid_tensor(d, c, 2 * fixture + 1));
        for r in [1usize, 2] {
            let out = correlation(&FeatureMap::new(ft.clone(), 2).unwrap(), &FeatureMap::new(fs.clone(), 2).unwrap(), Radius::Local(r))
                .map_err(|e| e.to_string())?
                .data;
            let ri = r as isize;
            let mut k = 0;
            for dz in -ri..=ri {
                for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        for (x, y, z) in d.iter() {
                            let (sx, sy, sz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                            let inside = [sx, sy, sz].iter().all(|&p| (0..4).contains(&p));
                            let mut want = 0.0;
                            if inside {
                                for ch in 0..c {
                                    want += ft.data()[ch * d.len() + d.index(x, y, z)]
                                        * fs.data()[ch * d.len() + d.index(sx as usize, sy as usize, sz as usize)];
                                }
                                want /= c as f64;
                            }
                            worst = worst.max((out.data()[k * d.len() + d.index(x, y, z)] - want).abs());
                        }
                        k += 1;
                    }
                }
            }
        }
        let d2 = Dims3::cube(2);
        let (gt, gs) = (grid_tensor(d2, c, 100 + fixture), grid_tensor(d2, c, 200 + fixture));
        let out = correlation(&FeatureMap::new(gt.clone(), 4).unwrap(), &FeatureMap::new(gs.clone(), 4).unwrap(), Radius::Global)
            .map_err(|e| e.to_string())?
            .data;
        let n = d2.len();
        ensure(out.shape() == [n, 2, 2, 2], || format!("global output shape {:?}", out.shape()))?;
        for u in 0..n {
            for x in 0..n {
                let want = (0..c).map(|ch| gt.data()[ch * n + x] * gs.data()[ch * n + u]).sum::<f64>() / c as f64;
                worst = worst.max((out.data()[u * n + x] - want).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- warps

fn warping_oracle() -> Outcome {
    let d = Dims3::cube(8);
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let src = Volume::new(d, (0..d.len()).map(|_| r.gen::<f64>()).collect()).unwrap();
    let lab = LabelMap::new(d, (0..d.len()).map(|_| r.gen_range(0..6)).collect()).unwrap();
    let clampi = |p: isize| p.clamp(0, 7) as usize;
    // Trilinear at a constant shift is a product of per-axis two-point blends.
    let axis = |p: usize, s: f64| -> [(usize, f64); 2] {
        let q = (p as f64 + s).clamp(0.0, 7.0);
        let lo = q.floor();
        let f = q - lo;
        [(lo as usize, 1.0 - f), ((lo as usize + 1).min(7), f)]
    };
    let mut worst: f64 = 0.0;
    let shifts = [
        [1.0, 0.0, 0.0],
        [-2.0, 1.0, 3.0],
        [0.0, -1.0, -1.0],
        [0.5, 0.0, 0.0],
        [-0.5, 1.5, -2.5],
        [2.5, -0.5, 0.5],
        [-1.5, -1.5, -1.5],
    ];
    for s in shifts {
        let field = DisplacementField::constant(d, 0, s);
        let tri = warp_trilinear(&src, &field).map_err(|e| e.to_string())?;
        let near = warp_nearest(&lab, &field).map_err(|e| e.to_string())?;
        for (x, y, z) in d.iter() {
            let mut want = 0.0;
            for (ix, wx) in axis(x, s[0]) {
                for (iy, wy) in axis(y, s[1]) {
                    for (iz, wz) in axis(z, s[2]) {
                        want += wx * wy * wz * src.get(ix, iy, iz);
                    }
                }
            }
            worst = worst.max((tri.get(x, y, z) - want).abs());
            // Halves round away from zero, then clamp to the border.
            let n = |p: usize, s: f64| clampi((p as f64 + s).round() as isize);
            let want_label = lab.get(n(x, s[0]), n(y, s[1]), n(z, s[2]));
            ensure(near.get(x, y, z) == want_label, || format!("nearest mismatch at {:?} for shift {s:?}", (x, y, z)))?;
        }
    }
    ensure(worst <= 1e-6, || format!("trilinear max deviation {worst:e}"))?;
    let zero = DisplacementField::zeros(d, 0);
    let id = warp_trilinear(&src, &zero).map_err(|e| e.to_string())?;
    ensure(id.data().iter().zip(src.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || "zero field is not bitwise identity".into())?;
    ensure(warp_nearest(&lab, &zero).unwrap().data() == lab.data(), || "zero field moves labels".into())?;
    Ok(format!("{} shifts, trilinear max deviation {worst:.1e}", shifts.len()))
}

// ------------------------------------------------------------- jacobian

fn jacobian_suite() -> Outcome {
    let d = Dims3::cube(8);
    let mask = vec![true; d.len()];
    let id = DisplacementField::zeros(d, 0);
    let s = sdlogj(&jacobian_map(&id), &mask).unwrap();
    let n = ndv_pct(&id, &mask, NdvMode::Simplex).unwrap();
    ensure(s == 0.0 && n == 0.0, || format!("identity: sdlogj {s}, ndv {n}"))?;

    let (a, b, c) = (0.3, -0.2, 0.45);
    let field = |fx: &dyn Fn(f64) -> f64, fy: &dyn Fn(f64) -> f64, fz: &dyn Fn(f64) -> f64| {
        let mut data = Vec::with_capacity(3 * d.len());
        data.extend(d.iter().map(|(x, _, _)| fx(x as f64)));
        data.extend(d.iter().map(|(_, y, _)| fy(y as f64)));
        data.extend(d.iter().map(|(_, _, z)| fz(z as f64)));
        DisplacementField::new(Tensor::new(d.shape_with_channels(3), data).unwrap(), 0).unwrap()
    };
    let affine = field(&|x| a * x, &|y| b * y, &|z| c * z);
    let jac = jacobian_map(&affine);
    let want = (1.0 + a) * (1.0 + b) * (1.0 + c);
    let mut worst: f64 = 0.0;
    for (x, y, z) in d.iter() {
        if [x, y, z].iter().all(|&p| p > 0 && p < 7) {
            worst = worst.max((jac.data[d.index(x, y, z)] - want).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("affine det deviation {worst:e}"))?;

    let fold = field(&|x| -2.0 * x, &|_| 0.0, &|_| 0.0);
    let n = ndv_pct(&fold, &mask, NdvMode::Simplex).unwrap();
    ensure(n == 100.0, || format!("folding field NDV {n}"))?;
    Ok(format!("affine det deviation {worst:.1e}, folding NDV {n}%"))
}

// ------------------------------------------------------------ gradients

/// Worst relative error between the graph gradient of `f` and central
/// differences, over every coordinate of every input.
fn fd_check(inputs: &[Tensor], f: &dyn Fn(&[Var]) -> Var) -> f64 {
    let h = 1e-5;
    let leaves: Vec<Var> = inputs.iter().cloned().map(Var::leaf).collect();
    let grads = f(&leaves).backward();
    let mut worst: f64 = 0.0;
    for (i, inp) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[i]).cloned().unwrap_or_else(|| Tensor::zeros(inp.shape().to_vec()));
        for j in 0..inp.len() {
            let at = |delta: f64| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        Var::constant(t)
                    })
                    .collect();
                f(&vars).item()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Sub-voxel flow that keeps sample points away from voxel boundaries,
/// where trilinear interpolation is not differentiable.
fn smooth_flow(d: Dims3, seed: u64) -> Tensor {
    let v = rand_vec(3 * d.len(), seed).into_iter().map(|u| 0.25 + 0.2 * u).collect();
    Tensor::new(d.shape_with_channels(3), v).unwrap()
}

fn gradient_checks() -> Outcome {
    let d = Dims3::cube(6);
    let pos = |seed| grid_tensor(d, 1, seed).map(|v| 0.5 + 0.4 * v);
    let mut report = Vec::new();
    let mut check = |name: &str, err: f64| -> Result<(), String> {
        report.push(format!("{name} {err:.1e}"));
        ensure(err <= 1e-3, || format!("{name} relative error {err:e}"))
    };
    for kind in [SimilarityKind::Lncc, SimilarityKind::Mse] {
        let f = |v: &[Var]| similarity(&v[0], &warp(&v[1], &v[2]), kind);
        check(&format!("{kind:?}"), fd_check(&[pos(1), pos(2), smooth_flow(d, 3)], &f))?;
    }
    let soft = |seed| grid_tensor(d, 3, seed).map(|v| 0.5 + 0.45 * v);
    check("dice", fd_check(&[soft(4), soft(5), smooth_flow(d, 6)], &|v| soft_dice(&v[0], &warp(&v[1], &v[2]))))?;
    check("smoothness", fd_check(&[grid_tensor(d, 3, 7)], &|v| smoothness(&v[0])))?;

    // Two-level pipeline on 8^3: strided encoders, local correlation at the
    // coarse level, upsample, warp fine source features, refine, compose,
    // then the full objective.
    let full = Dims3::cube(8);
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let vol = |r: &mut ChaCha8Rng| Volume::new(full, (0..full.len()).map(|_| r.gen::<f64>()).collect()).unwrap();
    let labels = |r: &mut ChaCha8Rng| LabelMap::new(full, (0..full.len()).map(|_| r.gen_range(0..3)).collect()).unwrap();
    let (t, s, lt, ls) = (vol(&mut r), vol(&mut r), labels(&mut r), labels(&mut r));
    let inputs = LossInputs::new(&t, &s, Some((&lt, &ls)), &[1, 2]).unwrap();
    let (tv, sv) = (Var::constant(t.to_tensor()), Var::constant(s.to_tensor()));
    let weights = |shape: &[usize], seed: u64, amp: f64| {
        Tensor::new(shape.to_vec(), rand_vec(shape.iter().product(), seed).into_iter().map(|v| amp * v).collect()).unwrap()
    };
    let params = [
        weights(&[4, 1, 3, 3, 3], 10, 0.3),
        weights(&[4, 4, 3, 3, 3], 11, 0.3),
        weights(&[3, 27, 3, 3, 3], 12, 0.05),
        weights(&[3, 8, 3, 3, 3], 13, 0.05),
    ];
    let w = LossWeights::default();
    let pipeline = |p: &[Var]| {
        let (f1t, f1s) = (conv3d(&tv, &p[0], None, 2), conv3d(&sv, &p[0], None, 2));
        let (f2t, f2s) = (conv3d(&f1t, &p[1], None, 2), conv3d(&f1s, &p[1], None, 2));
        let coarse = conv3d(&correlation_local(&f2t, &f2s, 1), &p[2], None, 1);
        let up = upsample_field(&coarse);
        let moved = warp(&f1s, &up);
        let delta = conv3d(&concat0(&[&f1t, &moved]), &p[3], None, 1);
        let phi = compose(&delta, &up);
        total_loss_var(&inputs, &phi, &[], &w).unwrap().0
    };
    check("two-level pipeline", fd_check(&params, &pipeline))?;
    Ok(report.join(", "))
}

// -------------------------------------------------------------- scaling

fn pyramid_scaling() -> Outcome {
    let d = Dims3::cube(32);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let vol = |r: &mut ChaCha8Rng| Volume::new(d, (0..d.len()).map(|_| r.gen::<f64>()).collect()).unwrap();
    let (t, s) = (vol(&mut r), vol(&mut r));
    let inputs = LossInputs::new(&t, &s, None, &[]).unwrap();
    let field_at = |level: usize, seed: u64| {
        let dl = d.at_level(level);
        let v = rand_vec(3 * dl.len(), seed).into_iter().map(|u| 0.5 * u).collect();
        DisplacementField::new(Tensor::new(dl.shape_with_channels(3), v).unwrap(), level).unwrap()
    };
    let per_level: Vec<_> = [4, 3, 2, 1].iter().map(|&l| field_at(l, 20 + l as u64)).collect();
    let b = total_loss(&inputs, &per_level[3], &per_level, &LossWeights::default()).map_err(|e| e.to_string())?;
    let l4 = b.levels.iter().find(|l| l.level == 4).ok_or("no level-4 term")?;
    ensure(l4.scale == 2f64.powi(-4), || format!("level-4 scale {}", l4.scale))?;
    ensure(l4.scaled == l4.unscaled * 2f64.powi(-4), || format!("scaled {} vs unscaled {}", l4.scaled, l4.unscaled))?;
    Ok(format!("level-4 scaled {:.6} = 2^-4 x {:.6}", l4.scaled, l4.unscaled))
}

// ------------------------------------------------------------- training

/// Desk-scale run settings shared by the training criteria.
fn desk_config(variant: VariantName) -> RunConfig {
    RunConfig {
        epochs: 100,
        iterations_per_epoch: Some(10),
        lr: DESK_LR,
        eval_pairs: 20,
        model: ModelSpec { variant, ..ModelSpec::default() },
        data: DataSource::Synthetic { spec: SyntheticSpec { shape: Dims3::cube(32), ..SyntheticSpec::default() }, train_pool: 64 },
        ..RunConfig::default()
    }
}

/// 1000 iterations are far fewer than a full schedule, so the desk runs start
/// ten times higher than the default rate; the decay is unchanged.
const DESK_LR: f64 = 1e-3;

struct DeskRuns {
    baseline: MetricsReport,
    vxm: (TrainOutcome, MetricsReport),
    dwcpi: (TrainOutcome, MetricsReport),
}

fn desk_runs() -> Result<DeskRuns, String> {
    let base = desk_config(VariantName::Vxm);
    let provider = DataProvider::from_config(&base).map_err(|e| e.to_string())?;
    let baseline = evaluate(&Predictor::Identity, &provider, base.eval_pairs, base.seed, false).map_err(|e| e.to_string())?;
    let run = |v: VariantName| -> Result<(TrainOutcome, MetricsReport), String> {
        let cfg = desk_config(v);
        let start = Instant::now();
        let out = train_with(&cfg, &provider, None).map_err(|e| e.to_string())?;
        eprintln!("  trained {} in {:.0}s", v.as_str(), start.elapsed().as_secs_f64());
        let rep = evaluate(&Predictor::Model(Box::new(out.model.clone())), &provider, cfg.eval_pairs, cfg.seed, false)
            .map_err(|e| e.to_string())?;
        Ok((out, rep.report))
    };
    Ok(DeskRuns { baseline: baseline.report, vxm: run(VariantName::Vxm)?, dwcpi: run(VariantName::Dwcpi)? })
}

fn training_trend(runs: &DeskRuns) -> Outcome {
    let base = runs.baseline.dsc.mean;
    let (v, w) = (&runs.vxm.1, &runs.dwcpi.1);
    let epe = |r: &MetricsReport| r.endpoint_error.as_ref().map(|s| s.mean).unwrap_or(f64::NAN);
    let summary = format!(
        "Dice baseline {:.3}, VXM {:.3}, DWCPI {:.3}; NDV VXM {:.3}% DWCPI {:.3}%; EPE VXM {:.3} DWCPI {:.3}",
        base,
        v.dsc.mean,
        w.dsc.mean,
        v.ndv_pct.mean,
        w.ndv_pct.mean,
        epe(v),
        epe(w)
    );
    ensure(v.dsc.mean - base >= 0.10, || format!("VXM gains {:.1} Dice points ({summary})", 100.0 * (v.dsc.mean - base)))?;
    ensure(w.dsc.mean - base >= 0.10, || format!("DWCPI gains {:.1} Dice points ({summary})", 100.0 * (w.dsc.mean - base)))?;
    ensure(w.ndv_pct.mean <= v.ndv_pct.mean, || format!("NDV ordering ({summary})"))?;
    ensure(epe(w) <= epe(v), || format!("endpoint error ordering ({summary})"))?;
    Ok(summary)
}

fn determinism(runs: &DeskRuns) -> Outcome {
    let cfg = desk_config(VariantName::Vxm);
    let provider = DataProvider::from_config(&cfg).map_err(|e| e.to_string())?;
    let again = train_with(&cfg, &provider, None).map_err(|e| e.to_string())?;
    let first = &runs.vxm.0;
    ensure(again.pairs == first.pairs, || "pair lists differ between runs".into())?;
    ensure(again.log == first.log, || {
        let i = again.log.iter().zip(&first.log).position(|(a, b)| a != b).unwrap_or(again.log.len().min(first.log.len()));
        format!("loss logs diverge at iteration {}", i + 1)
    })?;
    ensure(runs.dwcpi.0.pair_hash == first.pair_hash, || "pair hash differs between VXM and DWCPI".into())?;
    Ok(format!("{} iterations identical, pair hash {}", first.log.len(), &first.pair_hash[..12]))
}

// ------------------------------------------------------------- schedule

fn schedule() -> Outcome {
    let cfg = RunConfig {
        epochs: 100,
        iterations_per_epoch: Some(1),
        model: ModelSpec { variant: VariantName::Vxm, width_divisor: 4, ..ModelSpec::default() },
        data: DataSource::Synthetic { spec: SyntheticSpec { shape: Dims3::cube(16), ..SyntheticSpec::default() }, train_pool: 4 },
        ..RunConfig::default()
    };
    let provider = DataProvider::from_config(&cfg).map_err(|e| e.to_string())?;
    let out = train_with(&cfg, &provider, None).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for e in [1usize, 50, 100] {
        let want = 1e-4 * 0.996f64.powi(e as i32);
        let rec = out.log.iter().find(|r| r.epoch == e).ok_or(format!("no record for epoch {e}"))?;
        worst = worst.max((rec.lr - want).abs() / want);
        worst = worst.max((cfg.lr_at(e) - want).abs() / want);
    }
    ensure(worst <= 1e-12, || format!("relative deviation {worst:e}"))?;
    Ok(format!("relative deviation {worst:.1e}"))
}

// ----------------------------------------------------------------- main

fn run(name: &str, f: impl FnOnce() -> Outcome, failed: &mut Vec<String>) {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = start.elapsed().as_secs_f64();
    match res {
        Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
        Err(why) => {
            println!("FAIL {name} ({secs:.1}s): {why}");
            failed.push(name.to_string());
        }
    }
}

fn main() -> ExitCode {
    // Accept and ignore libtest flags so `cargo test -- <args>` still works.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failed = Vec::new();
    run("parameter counts", parameter_counts, &mut failed);
    run("correlation oracle", correlation_oracle, &mut failed);
    run("warping oracle", warping_oracle, &mut failed);
    run("jacobian suite", jacobian_suite, &mut failed);
    run("gradient checks", gradient_checks, &mut failed);
    run("pyramid loss scaling", pyramid_scaling, &mut failed);
    if std::env::var_os("DEFORMKIT_ACCEPT_SKIP_TRAINING").is_some() {
        println!("SKIP desk-scale training trend");
        println!("SKIP determinism");
    } else {
        let mut runs = None;
        run(
            "desk-scale training trend",
            || {
                let r = desk_runs()?;
                let out = training_trend(&r);
                runs = Some(r);
                out
            },
            &mut failed,
        );
        match &runs {
            Some(r) => run("determinism", || determinism(r), &mut failed),
            None => {
                println!("FAIL determinism: desk runs did not complete");
                failed.push("determinism".into());
            }
        }
    }
    run("learning-rate schedule", schedule, &mut failed);
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        ExitCode::FAILURE
    }
}
