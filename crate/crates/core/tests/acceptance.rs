//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. The training criteria share the synthetic preset and take a
//! while on one core.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dbfnet::data::{synth_generate, Dataset};
use dbfnet::labelgen::split_labels;
use dbfnet::losses::{total_loss, LabelBatch, LossWeights};
use dbfnet::metrics::{dsc, hausdorff, pr_roc, ThresholdSweep};
use dbfnet::network::{count_parameters, fuse, DbfNet, Ffm, ModelConfig, ParamStore};
use dbfnet::train::{
    ablate, evaluate_model, lr_schedule, train_on, window_means, GridSpec, RunLog, TrainConfig, SYNTHETIC_IMAGES,
    SYNTHETIC_SIZE,
};
use dbfnet::BinaryMask;

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_mask(rng: &mut ChaCha8Rng, max_side: usize) -> BinaryMask {
    let h = rng.random_range(1..=max_side);
    let w = rng.random_range(1..=max_side);
    let density: f64 = rng.random_range(0.05..0.95);
    let mut m = BinaryMask::zeros(h, w).unwrap();
    if rng.random_bool(0.5) {
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, rng.random_bool(density));
            }
        }
    } else {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (ry, rx) = (rng.random_range(0.5..h as f64), rng.random_range(0.5..w as f64));
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                m.set(y, x, d <= 1.0);
            }
        }
    }
    m
}

/// Euclidean distance from each foreground pixel to the nearest background
/// pixel, by exhaustive search.
fn brute_distance(m: &BinaryMask, y: usize, x: usize) -> f64 {
    let (h, w) = m.dims();
    let mut best = f64::INFINITY;
    for by in 0..h {
        for bx in 0..w {
            if !m.get(by, bx) {
                let d = ((by as f64 - y as f64).powi(2) + (bx as f64 - x as f64).powi(2)).sqrt();
                best = best.min(d);
            }
        }
    }
    best
}

fn label_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut cases, mut mismatches, mut partition_failures) = (0, 0, 0);
    for _ in 0..200 {
        let m = random_mask(&mut rng, 32);
        for alpha in [0.0, 1.0, 2.0, 3.0] {
            cases += 1;
            let labels = split_labels(&m, alpha).map_err(|e| e.to_string())?;
            let (h, w) = m.dims();
            let mut exact = true;
            for y in 0..h {
                for x in 0..w {
                    let fg = m.get(y, x);
                    let bound = fg && brute_distance(&m, y, x) <= alpha;
                    if labels.bound.get(y, x) != bound || labels.body.get(y, x) != (fg && !bound) {
                        exact = false;
                    }
                }
            }
            mismatches += usize::from(!exact);
            let disjoint = labels.body.intersection_count(&labels.bound).unwrap() == 0;
            let union = labels.body.or(&labels.bound).unwrap() == m;
            partition_failures += usize::from(!(disjoint && union));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && partition_failures == 0 && secs < 30.0,
        format!("{cases} cases, {mismatches} oracle mismatches, {partition_failures} partition failures, {secs:.1}s"),
    )
}

fn parameter_budget() -> Outcome {
    let n = count_parameters(&ModelConfig::default()).map_err(|e| e.to_string())?;
    check((2_700_000..=3_700_000).contains(&n), format!("{n} parameters (window 2.7M..3.7M, target 3.2M)"))
}

fn shape_contract() -> Outcome {
    let net = DbfNet::new(&ModelConfig::default(), DType::F32, 0).map_err(|e| e.to_string())?;
    let x = Tensor::randn(0f32, 1.0, (1, 3, 256, 256), &Device::Cpu).map_err(|e| e.to_string())?;
    let feats = net.encode(&x, false).map_err(|e| e.to_string())?;
    let ladder: Vec<Vec<usize>> = feats.iter().map(|f| f.dims()[1..].to_vec()).collect();
    let expected_ladder = vec![
        vec![32, 256, 256],
        vec![64, 128, 128],
        vec![128, 64, 64],
        vec![256, 32, 32],
        vec![256, 16, 16],
    ];
    let spec_rows: Vec<(usize, usize, usize, usize)> = net
        .config()
        .encoder
        .blocks
        .iter()
        .map(|b| (b.kernel_size, b.dilation, b.in_channels, b.out_channels))
        .collect();
    let expected_rows = vec![(3, 1, 3, 32), (3, 2, 32, 64), (3, 3, 64, 128), (3, 5, 128, 256), (3, 7, 256, 256)];
    let out = net.forward(&x, false).map_err(|e| e.to_string())?;
    let mut sup = Vec::new();
    for s in &out.supervision {
        for t in [&s.body_logits, &s.bound_logits].into_iter().flatten() {
            sup.push((s.level, t.dims().to_vec()));
        }
    }
    let expected_sup = vec![
        (1, vec![1, 1, 256, 256]),
        (1, vec![1, 1, 256, 256]),
        (2, vec![1, 1, 128, 128]),
        (2, vec![1, 1, 128, 128]),
    ];
    let final_dims = out.final_logits.dims().to_vec();
    check(
        final_dims == [1, 1, 256, 256] && sup == expected_sup && ladder == expected_ladder && spec_rows == expected_rows,
        format!("final {final_dims:?}, supervision {sup:?}, encoder {ladder:?}"),
    )
}

fn identities() -> Outcome {
    let dev = Device::Cpu;
    let t = |seed: u64| -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..2 * 6 * 9 * 7).map(|_| rng.random_range(-3.0..3.0)).collect();
        Tensor::from_vec(v, (2, 6, 9, 7), &dev).unwrap()
    };
    let mut fusion_ok = true;
    let mut ffm_ok = true;
    for seed in 0..5 {
        let (body, bound) = (t(2 * seed), t(2 * seed + 1));
        let zero = Tensor::zeros(1, DType::F32, &dev).unwrap();
        let fused = fuse(&zero, &body, &bound).map_err(|e| e.to_string())?;
        let a: Vec<u32> = fused.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = bound.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
        fusion_ok &= a == b;

        let mut store = ParamStore::new(DType::F32, seed);
        let ffm = Ffm::new(&mut store, "ffm", 6, 3).map_err(|e| e.to_string())?;
        for (name, var) in store.params() {
            store.assign(name, &var.as_tensor().zeros_like().unwrap()).map_err(|e| e.to_string())?;
        }
        let (b2, d2) = ffm.forward(&body, &bound).map_err(|e| e.to_string())?;
        let same = |x: &Tensor, y: &Tensor| x.flatten_all().unwrap().to_vec1::<f32>().unwrap() == y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        ffm_ok &= same(&b2, &body) && same(&d2, &bound);
    }
    check(
        fusion_ok && ffm_ok,
        format!("zero-weight fusion equals boundary stream bitwise: {fusion_ok}; zeroed FFM is identity: {ffm_ok} (5 random draws)"),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let dev = Device::Cpu;
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for seed in 0..5u64 {
        let net = DbfNet::new(&ModelConfig::toy(8), DType::F64, seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (h, w) = (32, 32);
        let img: Vec<f64> = (0..2 * 3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::from_vec(img, (2, 3, h, w), &dev).unwrap();
        let masks: Vec<_> = (0..2)
            .map(|i| {
                let (cy, cx, r) = (14.0 + 3.0 * i as f64, 16.0, 7.0 + rng.random_range(0.0..4.0));
                let m = BinaryMask::from_fn(h, w, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r).unwrap();
                split_labels(&m, 1.0).unwrap()
            })
            .collect();
        let labels = LabelBatch::from_labels(&masks.iter().collect::<Vec<_>>(), DType::F64).unwrap();
        let weights = LossWeights::default();
        let loss_at = || -> f64 {
            let out = net.forward(&x, true).unwrap();
            total_loss(&out, &labels, &weights).unwrap().total_value().unwrap()
        };

        let params: Vec<(String, Var)> = net.store().params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let base: Vec<Tensor> = params.iter().map(|(_, v)| v.as_tensor().copy().unwrap()).collect();
        let dirs: Vec<Tensor> = params
            .iter()
            .map(|(_, v)| {
                let d: Vec<f64> = (0..v.elem_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::from_vec(d, v.shape(), &dev).unwrap()
            })
            .collect();

        let out = net.forward(&x, true).unwrap();
        let grads = total_loss(&out, &labels, &weights).unwrap().total.backward().unwrap();
        let mut analytic = 0.0;
        for ((_, v), d) in params.iter().zip(&dirs) {
            if let Some(g) = grads.get(v.as_tensor()) {
                analytic += (g * d).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            }
        }

        let eps = 1e-7;
        let shift = |sign: f64| {
            for (((_, v), b), d) in params.iter().zip(&base).zip(&dirs) {
                v.set(&(b + (d * (sign * eps)).unwrap()).unwrap()).unwrap();
            }
        };
        shift(1.0);
        let plus = loss_at();
        shift(-1.0);
        let minus = loss_at();
        shift(0.0);
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
        details.push(format!("{rel:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-3,
        format!("directional derivative rel. error per seed [{}], worst {worst:.2e}, {secs:.1}s", details.join(", ")),
    )
}

fn metric_oracles() -> Outcome {
    let e = |e: dbfnet::Error| e.to_string();
    let a = BinaryMask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
    let b = BinaryMask::new(1, 4, vec![0, 0, 1, 1]).unwrap();
    let c = BinaryMask::new(1, 4, vec![0, 1, 1, 0]).unwrap();
    let hand = (dsc(&a, &a).map_err(e)?, dsc(&a, &b).map_err(e)?, dsc(&a, &c).map_err(e)?);
    let hand_ok = hand == (100.0, 0.0, 50.0);

    let boundary = |m: &BinaryMask| -> Vec<(f64, f64)> {
        let (h, w) = m.dims();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !m.get(y, x) {
                    continue;
                }
                let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                if edge || !m.get(y - 1, x) || !m.get(y + 1, x) || !m.get(y, x - 1) || !m.get(y, x + 1) {
                    out.push((y as f64, x as f64));
                }
            }
        }
        out
    };
    let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| -> f64 {
        p.iter()
            .map(|a| q.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_hd: f64 = 0.0;
    let mut hd_cases = 0;
    while hd_cases < 100 {
        let p = random_mask(&mut rng, 24);
        let mut t = BinaryMask::zeros(p.height(), p.width()).unwrap();
        for y in 0..p.height() {
            for x in 0..p.width() {
                t.set(y, x, rng.random_bool(0.3));
            }
        }
        if p.is_empty() || t.is_empty() {
            continue;
        }
        hd_cases += 1;
        let (bp, bt) = (boundary(&p), boundary(&t));
        let oracle = directed(&bp, &bt).max(directed(&bt, &bp));
        worst_hd = worst_hd.max((hausdorff(&p, &t, None).map_err(e)? - oracle).abs());
    }

    let target = BinaryMask::from_fn(32, 32, |y, x| (y as i64 - 15).pow(2) + (x as i64 - 12).pow(2) < 80).unwrap();
    let perfect: Vec<f64> = target.pixels().iter().map(|&p| f64::from(p)).collect();
    let curves = pr_roc(&[perfect], std::slice::from_ref(&target), &ThresholdSweep::default()).map_err(e)?;
    let perfect_ok = curves.auc == 1.0 && curves.map == 1.0;

    let mut probs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..4 {
        probs.push((0..64 * 64).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>());
        let mut m = BinaryMask::zeros(64, 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                m.set(y, x, rng.random_bool(0.3));
            }
        }
        targets.push(m);
    }
    let chance = pr_roc(&probs, &targets, &ThresholdSweep::default()).map_err(e)?.auc;
    let chance_ok = (chance - 0.5).abs() <= 0.02;

    check(
        hand_ok && worst_hd <= 1e-9 && perfect_ok && chance_ok,
        format!(
            "DSC hand cases {hand:?}; HD max |err| {worst_hd:.1e} over {hd_cases} masks; perfect AUC {} MAP {}; chance AUC {chance:.4}",
            curves.auc, curves.map
        ),
    )
}

fn schedule() -> Outcome {
    let total = 1000;
    let first = lr_schedule(0, total, 0.001, 0.9).map_err(|e| e.to_string())?;
    let last = lr_schedule(total, total, 0.001, 0.9).map_err(|e| e.to_string())?;
    check(first == 0.001 && last == 0.0, format!("lr(0) = {first}, lr(end) = {last}"))
}

struct Synthetic {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    config: TrainConfig,
    dataset: Dataset,
}

fn synthetic() -> Synthetic {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_generate(&data, SYNTHETIC_IMAGES, [SYNTHETIC_SIZE, SYNTHETIC_SIZE], 0).unwrap();
    let mut config = TrainConfig::preset("synthetic", &data).unwrap();
    config.deterministic = true;
    let dataset = Dataset::open(config.dataset.clone()).unwrap();
    Synthetic {
        root: dir.path().to_path_buf(),
        _dir: dir,
        config,
        dataset,
    }
}

fn run(s: &Synthetic, name: &str) -> std::result::Result<(RunLog, f64), String> {
    let cfg = TrainConfig {
        checkpoint_dir: s.root.join(name),
        ..s.config.clone()
    };
    let outcome = train_on(&cfg, &s.dataset).map_err(|e| e.to_string())?;
    let report = evaluate_model(&outcome.model, &s.dataset, &outcome.train_ids, None, &ThresholdSweep::Uniform(50))
        .map_err(|e| e.to_string())?;
    Ok((outcome.run_log, report.dsc.mean))
}

fn overfit(s: &Synthetic) -> (Outcome, Option<RunLog>) {
    let start = Instant::now();
    let (log, train_dsc) = match run(s, "overfit_a") {
        Ok(r) => r,
        Err(e) => return (Err(e), None),
    };
    let secs = start.elapsed().as_secs_f64();
    let losses = log.losses();
    let means = window_means(&losses, 50);
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.3}")).collect();
    let outcome = check(
        train_dsc > 95.0 && decreasing && losses.len() <= 500,
        format!(
            "{} steps in {secs:.0}s, train DSC {train_dsc:.2}, 50-step means [{}]",
            losses.len(),
            shown.join(", ")
        ),
    );
    (outcome, Some(log))
}

fn determinism(s: &Synthetic, first: Option<RunLog>) -> Outcome {
    let first = match first {
        Some(log) => log,
        None => run(s, "overfit_a")?.0,
    };
    let (second, _) = run(s, "overfit_b")?;
    let (a, b) = (first.without_timing(), second.without_timing());
    let first_diff = a.records.iter().zip(&b.records).position(|(x, y)| x != y);
    check(
        a == b,
        format!(
            "{} vs {} records, first difference at {first_diff:?}",
            a.records.len(),
            b.records.len()
        ),
    )
}

fn ablation(s: &Synthetic) -> Outcome {
    let e = |e: dbfnet::Error| e.to_string();
    let quick = TrainConfig {
        max_steps: Some(2),
        ..s.config.clone()
    };
    let mut shapes = Vec::new();
    for (grid, rows) in [(GridSpec::Modules, 5), (GridSpec::LossTerms, 4)] {
        let cells = grid.cells().map_err(e)?;
        let table = ablate(&quick, &cells, &[0], &s.dataset, &s.root.join(format!("{grid:?}"))).map_err(e)?;
        let labels: Vec<&str> = table.rows.iter().map(|r| r.cell.label.as_str()).collect();
        if table.rows.len() != rows || cells.len() != rows {
            return Err(format!("{grid:?} produced {} rows: {labels:?}", table.rows.len()));
        }
        shapes.push(format!("{grid:?} {labels:?}"));
    }

    let losses = GridSpec::LossTerms.cells().map_err(e)?;
    let pair = [losses[0].clone(), losses[3].clone()];
    let table = ablate(&s.config, &pair, &[0, 1, 2], &s.dataset, &s.root.join("ordering")).map_err(e)?;
    let (seg, full) = (&table.rows[0], &table.rows[1]);
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>().join("/");
    check(
        full.dsc.mean >= seg.dsc.mean,
        format!(
            "{}; full supervision DSC {:.2} [{}] vs seg only {:.2} [{}] over seeds 0,1,2",
            shapes.join("; "),
            full.dsc.mean,
            fmt(&full.dsc_per_seed),
            seg.dsc.mean,
            fmt(&seg.dsc_per_seed)
        ),
    )
}

fn report(name: &str, outcome: &Outcome, secs: f64) -> bool {
    match outcome {
        Ok(d) => println!("PASS {name} ({secs:.1}s): {d}"),
        Err(d) => println!("FAIL {name} ({secs:.1}s): {d}"),
    }
    outcome.is_ok()
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let mut all_ok = true;
    let mut timed = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(name) {
            let start = Instant::now();
            let outcome = f();
            all_ok &= report(name, &outcome, start.elapsed().as_secs_f64());
        }
    };
    timed("label oracle", &mut label_oracle);
    timed("parameter budget", &mut parameter_budget);
    timed("shape contract", &mut shape_contract);
    timed("fusion identities", &mut identities);
    timed("gradient check", &mut gradient_check);
    timed("metric oracles", &mut metric_oracles);
    timed("schedule", &mut schedule);

    let needs_training = ["desk-scale learning", "determinism", "ablation"].iter().any(|n| wanted(n));
    if needs_training {
        let s = synthetic();
        let mut first = None;
        timed("desk-scale learning", &mut || {
            let (o, log) = overfit(&s);
            first = log;
            o
        });
        timed("determinism", &mut || determinism(&s, first.take()));
        timed("ablation", &mut || ablation(&s));
    }
    if !all_ok {
        std::process::exit(1);
    }
}
