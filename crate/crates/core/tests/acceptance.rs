//! Acceptance suite. Runs every criterion in sequence (timings are measured,
//! so nothing else runs alongside), prints one line per criterion and exits
//! non-zero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

use zvrd::constraints::{distance_gradient, DistanceNorm};
use zvrd::denoiser::unet::{UNetArch, WeightSource};
use zvrd::denoiser::{oracle_predict, AttentionLayer, Matrix, OracleDenoiser, ShrinkageDenoiser, TinyUNet, TinyUNetSpec};
use zvrd::flow::{estimate_flow, mean_epe, warp, FlowField, FlowParams, OcclusionMask};
use zvrd::io;
use zvrd::metrics::warping_error;
use zvrd::operators::{
    awgn, blur_conv, gaussian_kernel, grayscale, inpaint_mask, low_light, random_mask, sr_avgpool, DegradationOperator,
};
use zvrd::sampler::{ablation_run, restore_video, FlowSource, SamplerConfig, ABLATION_ROWS};
use zvrd::schedule::DiffusionSchedule;
use zvrd::temporal::tc_loss_and_grad;
use zvrd::video::{make_fixture, FixtureKind, FixtureSpec, Frame, VideoTensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, u64);
type Probe = (Box<dyn DegradationOperator>, (usize, usize, usize));

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)*));
        }
    };
}

fn within(elapsed: Duration, limit: Duration) -> Outcome {
    if elapsed <= limit {
        Ok(String::new())
    } else {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Frame {
    Frame::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
}

fn normal_frame(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Frame {
    use rand_distr::{Distribution, StandardNormal};
    Frame::from_fn(h, w, c, |_, _, _| StandardNormal.sample(rng)).unwrap()
}

fn observe(truth: &VideoTensor, op: &dyn DegradationOperator) -> VideoTensor {
    VideoTensor::new(truth.frames().iter().map(|f| op.apply(f).unwrap()).collect()).unwrap()
}

fn c1_diffusion_roundtrip() -> Outcome {
    let schedule = DiffusionSchedule::linear(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x0 = random_frame(&mut rng, 8, 8, 3);
        let t = rng.random_range(1..=1000);
        let eps = normal_frame(&mut rng, 8, 8, 3);
        let x_t = schedule.forward_sample(&x0, t, &eps).unwrap();
        let eps_hat = oracle_predict(&schedule, &x_t, t, &x0).unwrap();
        let back = schedule.predict_x0(&x_t, t, &eps_hat).unwrap();
        worst = worst.max(back.max_abs_diff(&x0));
    }
    ensure!(worst < 1e-6, "max abs error {worst:e}");
    Ok(format!("max abs error {worst:.2e}"))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn c2_attention_swap() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, d) = (64, 8, 4);
        let layer = AttentionLayer::new(
            random_matrix(&mut rng, d, c),
            random_matrix(&mut rng, d, c),
            random_matrix(&mut rng, c, c),
        )
        .unwrap();
        let features = random_matrix(&mut rng, n, c);
        let own = layer.self_attention(&features).unwrap();
        let context = layer.key_value(&features.clone()).unwrap();
        let swapped = layer.cross_prev_frame_attention(&features, &context).unwrap();
        for (a, b) in own.data().iter().zip(swapped.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst < 1e-6, "max difference {worst:e}");
    Ok(format!("max difference {worst:.2e}"))
}

/// Operators with exact linear `apply`, plus low-light whose map is affine.
fn probe_operators() -> Vec<Probe> {
    vec![
        (Box::new(sr_avgpool(2).unwrap()), (16, 16, 3)),
        (Box::new(sr_avgpool(4).unwrap()), (16, 16, 3)),
        (
            Box::new(inpaint_mask(16, 16, random_mask(16, 16, 0.3, 7)).unwrap()),
            (16, 16, 3),
        ),
        (Box::new(grayscale()), (16, 16, 3)),
        (Box::new(blur_conv(gaussian_kernel(5, 1.2)).unwrap()), (16, 16, 3)),
        (Box::new(awgn(0.1).unwrap()), (16, 16, 3)),
        (Box::new(low_light(0.3).unwrap()), (16, 16, 3)),
    ]
}

fn c3_operator_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for (op, (h, w, c)) in probe_operators() {
        let affine = op.name() == "low-light";
        let zero = Frame::zeros(h, w, c);
        let offset = op.apply(&zero).unwrap();
        // The linear part of `apply`; equal to `apply` except for low-light.
        let lin = |x: &Frame| op.apply(x).unwrap().sub(&offset);
        let (oh, ow, oc) = op.output_shape((h, w, c)).unwrap();
        for _ in 0..100 {
            // Low-light clips outside its range, so probe it with values that stay inside.
            let k = if affine { 0.5 } else { 1.0 };
            let x = random_frame(&mut rng, h, w, c).scale(k);
            let z = random_frame(&mut rng, h, w, c).scale(k);
            let (a, b) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let combo = x.scale(a).add(&z.scale(b));
            let expected = lin(&x).scale(a).add(&lin(&z).scale(b));
            worst.0 = worst.0.max(lin(&combo).max_abs_diff(&expected));

            let r = random_frame(&mut rng, oh, ow, oc);
            let lhs = lin(&x).dot(&r);
            let rhs = x.dot(&op.adjoint(&r).unwrap());
            worst.1 = worst.1.max((lhs - rhs).abs() / (1.0 + lhs.abs()));

            if op.has_pseudo_inverse() {
                let ax = op.apply(&x).unwrap();
                let again = op.apply(&op.pseudo_inverse(&ax).unwrap()).unwrap();
                worst.2 = worst.2.max(again.max_abs_diff(&ax));
            }
        }
    }
    ensure!(worst.0 < 1e-6, "linearity error {:e}", worst.0);
    ensure!(worst.1 < 1e-6, "adjoint error {:e}", worst.1);
    ensure!(worst.2 < 1e-6, "A A+ A error {:e}", worst.2);
    Ok(format!(
        "linearity {:.1e}, adjoint {:.1e}, A A+ A {:.1e}",
        worst.0, worst.1, worst.2
    ))
}

fn c4_projection_consistency() -> Outcome {
    let truth = make_fixture(&FixtureSpec::new(FixtureKind::TranslatingTexture, 64, 8, (1.0, 0.5), 11)).unwrap();
    let cfg = SamplerConfig::default();
    let ops: Vec<Box<dyn DegradationOperator>> = vec![
        Box::new(sr_avgpool(4).unwrap()),
        Box::new(inpaint_mask(64, 64, random_mask(64, 64, 0.5, 2)).unwrap()),
        Box::new(grayscale()),
    ];
    let mut parts = Vec::new();
    for op in &ops {
        let obs = observe(&truth, op.as_ref());
        let model = OracleDenoiser::new(cfg.schedule().unwrap(), truth.clone());
        let (out, _) = restore_video(&obs, op.as_ref(), &model, &cfg, &FlowSource::Internal).map_err(|e| e.to_string())?;
        let mut worst: f64 = 0.0;
        for (f, y) in out.frames().iter().zip(obs.frames()) {
            worst = worst.max(op.apply(f).unwrap().max_abs_diff(y));
        }
        ensure!(worst < 1e-5, "{}: max |A(out) - y| = {worst:e}", op.name());
        parts.push(format!("{} {worst:.1e}", op.name()));
    }
    Ok(parts.join(", "))
}

fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn c5_gradients() -> Outcome {
    let h_fd = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_tc: f64 = 0.0;
    for _ in 0..3 {
        let prev = random_frame(&mut rng, 16, 16, 3).scale(0.8);
        let cur = random_frame(&mut rng, 16, 16, 3).scale(0.8);
        let flow = FlowField::constant(16, 16, (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)));
        let mask = OcclusionMask::new(16, 16, random_mask(16, 16, 0.3, rng.random())).unwrap();
        let (_, grad) = tc_loss_and_grad(&cur, &prev, &flow, &mask, 1e-3).unwrap();
        for _ in 0..20 {
            let k = rng.random_range(0..cur.data().len());
            let bump = |d: f64| {
                let mut v = cur.data().to_vec();
                v[k] += d;
                let f = Frame::new(16, 16, 3, v).unwrap();
                tc_loss_and_grad(&f, &prev, &flow, &mask, 1e-3).unwrap().0
            };
            let fd = (bump(h_fd) - bump(-h_fd)) / (2.0 * h_fd);
            worst_tc = worst_tc.max(relative(grad.data()[k], fd));
        }
    }
    let ops: Vec<Box<dyn DegradationOperator>> = vec![
        Box::new(sr_avgpool(4).unwrap()),
        Box::new(inpaint_mask(16, 16, random_mask(16, 16, 0.4, 9)).unwrap()),
        Box::new(blur_conv(gaussian_kernel(5, 1.0)).unwrap()),
    ];
    let mut worst_dist: f64 = 0.0;
    for op in &ops {
        for norm in [DistanceNorm::L2Squared, DistanceNorm::L1Smooth] {
            let x = random_frame(&mut rng, 16, 16, 3);
            let y = op.apply(&random_frame(&mut rng, 16, 16, 3)).unwrap();
            let (grad, _) = distance_gradient(&x, &y, op.as_ref(), norm).unwrap();
            for _ in 0..20 {
                let k = rng.random_range(0..x.data().len());
                let bump = |d: f64| {
                    let mut v = x.data().to_vec();
                    v[k] += d;
                    let f = Frame::new(16, 16, 3, v).unwrap();
                    distance_gradient(&f, &y, op.as_ref(), norm).unwrap().1
                };
                let fd = (bump(h_fd) - bump(-h_fd)) / (2.0 * h_fd);
                worst_dist = worst_dist.max(relative(grad.data()[k], fd));
            }
        }
    }
    ensure!(worst_tc < 1e-4, "temporal gradient relative error {worst_tc:e}");
    ensure!(worst_dist < 1e-4, "distance gradient relative error {worst_dist:e}");
    Ok(format!("temporal {worst_tc:.1e}, distance {worst_dist:.1e}"))
}

fn unet(seed: u64) -> TinyUNet {
    TinyUNet::from_spec(&TinyUNetSpec {
        arch: UNetArch::default(),
        weights: WeightSource::Seed(seed),
    })
    .unwrap()
}

fn c6_static_exactness() -> Outcome {
    let truth = make_fixture(&FixtureSpec::new(FixtureKind::Static, 32, 4, (0.0, 0.0), 6)).unwrap();
    let op = sr_avgpool(2).unwrap();
    let obs = observe(&truth, &op);
    let cfg = SamplerConfig::default();
    let (out, _) = restore_video(&obs, &op, &unet(6), &cfg, &FlowSource::Internal).map_err(|e| e.to_string())?;
    for (i, f) in out.frames().iter().enumerate().skip(1) {
        ensure!(f == &out.frames()[0], "frame {i} differs from frame 0");
    }
    let we = warping_error(&out, &out, &FlowParams::default()).unwrap();
    ensure!(we == 0.0, "warping error {we:e}");
    Ok("4 identical frames, WE 0".into())
}

fn c7_flow_oracle() -> Outcome {
    let margin = 8;
    let mut worst_epe: f64 = 0.0;
    let mut worst_ratio = f64::INFINITY;
    for seed in 0..5 {
        let spec = FixtureSpec::new(FixtureKind::TranslatingTexture, 64, 2, (1.5, -0.75), 100 + seed);
        let v = make_fixture(&spec).unwrap();
        let (prev, cur) = (&v.frames()[0], &v.frames()[1]);
        let (flow, _) = estimate_flow(prev, cur, &FlowParams::default()).unwrap();
        worst_epe = worst_epe.max(mean_epe(&flow, spec.ground_truth_flow(), margin));
        let warped = warp(prev, &flow).unwrap();
        let (h, w, c) = cur.shape();
        let (mut aligned, mut raw) = (0.0, 0.0);
        for y in margin..h - margin {
            for x in margin..w - margin {
                for ch in 0..c {
                    aligned += (warped.get(y, x, ch) - cur.get(y, x, ch)).abs();
                    raw += (prev.get(y, x, ch) - cur.get(y, x, ch)).abs();
                }
            }
        }
        worst_ratio = worst_ratio.min(raw / aligned);
    }
    ensure!(worst_epe < 0.5, "mean interior EPE {worst_epe:.3} px");
    ensure!(worst_ratio >= 5.0, "L1 reduction only {worst_ratio:.2}x");
    Ok(format!("worst EPE {worst_epe:.3} px, worst L1 reduction {worst_ratio:.1}x"))
}

fn c8_ablation_trend() -> Outcome {
    let truth = make_fixture(&FixtureSpec::new(FixtureKind::TranslatingTexture, 64, 8, (1.0, 0.0), 0)).unwrap();
    let op = sr_avgpool(4).unwrap();
    let obs = observe(&truth, &op);
    let base = SamplerConfig::default();
    let model = ShrinkageDenoiser::new(base.schedule().unwrap(), 1.0).unwrap();
    let (table, _) =
        ablation_run(&obs, &op, &model, &base, &FlowSource::Internal, Some(&truth)).map_err(|e| e.to_string())?;
    let we: Vec<f64> = table.rows.iter().map(|r| r.warping_error).collect();
    let listing = table
        .rows
        .iter()
        .map(|r| format!("{} {:.3}", r.mechanisms, 100.0 * r.warping_error))
        .collect::<Vec<_>>()
        .join(", ");
    ensure!(we.len() == ABLATION_ROWS.len(), "{} rows", we.len());
    ensure!(we[4] < we[0], "full {:.5} not below baseline {:.5} ({listing})", we[4], we[0]);
    let drops: Vec<f64> = we.windows(2).map(|p| p[0] - p[1]).collect();
    let largest = (0..drops.len()).max_by(|&a, &b| drops[a].total_cmp(&drops[b])).unwrap();
    ensure!(
        ABLATION_ROWS[largest + 1] == "+noise_sharing",
        "largest drop at {} ({listing})",
        ABLATION_ROWS[largest + 1]
    );
    Ok(format!("WE x100: {listing}"))
}

fn c9_baseline_reduction() -> Outcome {
    let truth = make_fixture(&FixtureSpec::new(FixtureKind::TranslatingTexture, 32, 3, (1.0, 0.0), 9)).unwrap();
    let op = sr_avgpool(2).unwrap();
    let obs = observe(&truth, &op);
    let cfg = SamplerConfig {
        s: 0.0,
        lambda: 1.0,
        attention: false,
        early_stop: false,
        seed: 9,
        ..SamplerConfig::default()
    };
    let model = unet(9);
    let (out, _) = restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).map_err(|e| e.to_string())?;
    for (i, y) in obs.frames().iter().enumerate() {
        let single = VideoTensor::new(vec![y.clone()]).unwrap();
        let (alone, _) = restore_video(&single, &op, &model, &cfg, &FlowSource::Internal).map_err(|e| e.to_string())?;
        ensure!(alone.frames()[0] == out.frames()[i], "frame {i} differs from its single-image run");
    }
    Ok(format!("{} frames bitwise equal", obs.len()))
}

fn tree(dir: &Path) -> BTreeMap<String, String> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn c10_determinism() -> Outcome {
    let clean = make_fixture(&FixtureSpec::new(FixtureKind::MovingSquare, 32, 4, (1.0, 1.0), 10)).unwrap();
    let run = || -> Result<BTreeMap<String, String>, String> {
        let tmp = TempDir::new().unwrap();
        io::write_frames(&tmp.path().join("clean"), &clean).unwrap();
        for args in [
            &["degrade", "--input", "clean", "--output", "deg", "--task", "inpaint", "--seed", "1"][..],
            &["restore", "--input", "deg", "--output", "out", "--seed", "1"][..],
        ] {
            let out = Command::new(env!("CARGO_BIN_EXE_zvrd"))
                .args(args)
                .current_dir(tmp.path())
                .env("SOURCE_DATE_EPOCH", "1700000000")
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(String::from_utf8_lossy(&out.stderr).into_owned());
            }
        }
        let mut all = tree(&tmp.path().join("deg"));
        all.extend(tree(&tmp.path().join("out")).into_iter().map(|(k, v)| (format!("out/{k}"), v)));
        Ok(all)
    };
    let (a, b) = (run()?, run()?);
    ensure!(a == b, "output trees differ");
    Ok(format!("{} files identical", a.len()))
}

fn c11_early_stopping() -> Outcome {
    let truth = make_fixture(&FixtureSpec::new(FixtureKind::TranslatingTexture, 32, 2, (1.0, 0.0), 12)).unwrap();
    let op = sr_avgpool(2).unwrap();
    let obs = observe(&truth, &op);
    let base = SamplerConfig::default();
    let model = ShrinkageDenoiser::new(base.schedule().unwrap(), 1.0).unwrap();
    let (_, report) = restore_video(&obs, &op, &model, &base, &FlowSource::Internal).map_err(|e| e.to_string())?;
    for f in &report.frames {
        ensure!(
            f.reverse_steps == 950 && f.steps.len() == 950 && f.output_t == 50,
            "frame {}: {} steps, output at t={}",
            f.index,
            f.steps.len(),
            f.output_t
        );
        ensure!(f.steps.last().map(|s| s.t) == Some(51), "last transition not from t=51");
    }

    // Guidance over the whole chain makes every step cost the same.
    let mut points = Vec::new();
    for t_es in [100, 300, 500, 700, 900] {
        let cfg = SamplerConfig {
            t_tc: 1000,
            t_es,
            ..base
        };
        let best = (0..5)
            .map(|_| {
                let start = Instant::now();
                restore_video(&obs, &op, &model, &cfg, &FlowSource::Internal).unwrap();
                start.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min);
        points.push(((1000 - t_es) as f64, best));
    }
    let n = points.len() as f64;
    let (mx, my) = (
        points.iter().map(|p| p.0).sum::<f64>() / n,
        points.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let intercept = my - slope * mx;
    let worst = points
        .iter()
        .map(|&(x, y)| ((intercept + slope * x) - y).abs() / y)
        .fold(0.0, f64::max);
    ensure!(slope > 0.0, "time does not grow with the step count");
    ensure!(worst <= 0.10, "worst deviation from the linear fit {:.1}%", 100.0 * worst);
    Ok(format!(
        "950 steps, output t=50; {:.2} ms/step, worst deviation {:.1}%",
        1e3 * slope,
        100.0 * worst
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("1 diffusion round trip", c1_diffusion_roundtrip, 1),
        ("2 attention swap equivalence", c2_attention_swap, 5),
        ("3 operator identities", c3_operator_identities, 10),
        ("4 projection consistency", c4_projection_consistency, 120),
        ("5 gradient correctness", c5_gradients, 30),
        ("6 static-video exactness", c6_static_exactness, 120),
        ("7 flow oracle", c7_flow_oracle, 20),
        ("8 ablation trend", c8_ablation_trend, 900),
        ("9 baseline reduction", c9_baseline_reduction, 300),
        ("10 determinism", c10_determinism, 600),
        ("11 early-stopping contract", c11_early_stopping, 600),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f, limit) in criteria {
        let number = name.split(' ').next().unwrap();
        if !filter.is_empty() && !filter.iter().any(|x| x == number) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|d| within(elapsed, Duration::from_secs(limit)).map(|_| d));
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail}; {elapsed:.2?})"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({why}; {elapsed:.2?})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
