//! Acceptance checks, one PASS/FAIL line each. Runs as a plain binary so the
//! lines always reach the test log; exits nonzero if any check fails.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::{gaussian, reference_truncation_error, scaled_channels};
use kdep::align::{fit_channel_select, fit_svd_projector, reconstruction_mse, SelectMode};
use kdep::data::{InputShape, TensorContainer};
use kdep::distill::{cross_entropy, kdep_loss, logits_kd_loss};
use kdep::eval::{verify_variance_identity, VarianceCheckConfig};
use kdep::experiment::{check_trend, method_means, run_experiment, ExperimentConfig, Method};
use kdep::linalg::{channel_stats, std_ratio};
use kdep::nn::{grad_check, ForwardOutput, Layer, Network, NetworkSpec};
use kdep::transform::{pts, scale_normalize, std_match};
use kdep::{Error, FeatureMatrix, Result};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn record(list: &mut Vec<Outcome>, name: &'static str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    list.push(Outcome { name, pass, detail });
}

fn worked_examples(out: &mut Vec<Outcome>) {
    let f = FeatureMatrix::new(1, 3, vec![10.0, 2.0, 2.0]).unwrap();
    let sn = scale_normalize(&f, &[50.0, 5.0, 1.0]).unwrap();
    let sm = std_match(&f, &[50.0, 5.0, 1.0], &[4.0, 3.0, 2.0]).unwrap();
    let err = |got: &FeatureMatrix, want: [f64; 3]| {
        got.values().iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
    };
    let (e1, e2) = (err(&sn, [0.2, 0.4, 2.0]), err(&sm, [0.8, 1.2, 4.0]));
    record(
        out,
        "1 SN/SM worked examples",
        e1 <= 1e-12 && e2 <= 1e-12,
        format!("SN {:?} (max err {e1:.1e}), SM {:?} (max err {e2:.1e}), tol 1e-12", sn.values(), sm.values()),
    );
}

fn theorem(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let rows = verify_variance_identity(&VarianceCheckConfig::default());
    let secs = start.elapsed().as_secs_f64();
    match rows {
        Ok(rows) => {
            let all = rows.iter().all(|r| r.pass);
            let increasing = rows.windows(2).all(|w| w[1].estimate > w[0].estimate);
            let table: Vec<String> = rows
                .iter()
                .map(|r| format!("σ={} est {:.4} vs {:.4} ({:+.2} se)", r.sigma, r.estimate, r.analytic, (r.estimate - r.analytic) / r.stderr))
                .collect();
            record(
                out,
                "2 Monte-Carlo variance identity",
                all && increasing && secs < 5.0,
                format!("{}; {secs:.2}s (limit 5s)", table.join(", ")),
            );
        }
        Err(e) => record(out, "2 Monte-Carlo variance identity", false, e.to_string()),
    }
}

fn svd_optimality(out: &mut Vec<Outcome>) {
    let mut worst_rel = 0.0f64;
    let mut order_violations = 0;
    let mut instances = 0;
    for seed in 0..20u64 {
        let x = gaussian(50, 16, 1000 + seed);
        let mean: Vec<f64> = channel_stats(&x).means;
        let centered = x.sub_row_vector(&mean).unwrap();
        for k in [1, 4, 8] {
            instances += 1;
            let svd = reconstruction_mse(&fit_svd_projector(&x, k).unwrap(), &x).unwrap();
            let brute = reference_truncation_error(&centered, k) / 50.0;
            worst_rel = worst_rel.max((svd - brute).abs() / brute);

            let var = reconstruction_mse(&fit_channel_select(&x, k, SelectMode::Var, 0).unwrap(), &x).unwrap();
            let rand = (0..20)
                .map(|s| reconstruction_mse(&fit_channel_select(&x, k, SelectMode::Rand, s).unwrap(), &x).unwrap())
                .sum::<f64>()
                / 20.0;
            if !(svd <= var && var <= rand) {
                order_violations += 1;
            }
        }
    }
    record(
        out,
        "3 SVD optimality",
        worst_rel <= 1e-8 && order_violations == 0,
        format!(
            "{instances} instances; worst rel error vs brute-force truncation {worst_rel:.1e} (tol 1e-8); \
             SVD <= CS.var <= mean CS.rand violated on {order_violations}"
        ),
    );
}

type LossFn = Box<dyn Fn(&ForwardOutput) -> Result<(f64, Option<FeatureMatrix>, Option<FeatureMatrix>)>>;

fn feature_loss(dim: usize, seed: u64) -> LossFn {
    let targets = gaussian(6, dim, seed);
    Box::new(move |o: &ForwardOutput| {
        let (l, g) = kdep_loss(&o.features, &targets, 0.7)?;
        Ok((l, Some(g), None))
    })
}

fn logit_loss(classes: usize, seed: u64) -> LossFn {
    let teacher = gaussian(6, classes, seed).scale(3.0);
    Box::new(move |o: &ForwardOutput| {
        let (l, g) = logits_kd_loss(o.logits.as_ref().unwrap(), &teacher, 4.0)?;
        Ok((l, None, Some(g)))
    })
}

fn gradients(out: &mut Vec<Outcome>) {
    let vector = InputShape::Vector(5);
    let image = InputShape::Image { h: 4, w: 4, ch: 2 };
    let ce: LossFn = Box::new(|o: &ForwardOutput| {
        let (l, g) = cross_entropy(o.logits.as_ref().unwrap(), &[0, 1, 2, 0, 1, 2])?;
        Ok((l, None, Some(g)))
    });
    let cases: Vec<(&str, NetworkSpec, LossFn)> = vec![
        (
            "dense",
            NetworkSpec { input: vector, layers: vec![Layer::Dense { inputs: 5, outputs: 4 }, Layer::Dense { inputs: 4, outputs: 3 }], tap: 1 },
            feature_loss(3, 1),
        ),
        (
            "conv3x3",
            NetworkSpec {
                input: image,
                layers: vec![Layer::Conv3x3 { in_ch: 2, out_ch: 3 }, Layer::Conv3x3 { in_ch: 3, out_ch: 2 }, Layer::Gap],
                tap: 2,
            },
            feature_loss(2, 2),
        ),
        (
            "relu",
            NetworkSpec {
                input: vector,
                layers: vec![Layer::Dense { inputs: 5, outputs: 4 }, Layer::Relu, Layer::Dense { inputs: 4, outputs: 3 }],
                tap: 2,
            },
            feature_loss(3, 3),
        ),
        (
            "gap",
            NetworkSpec {
                input: image,
                layers: vec![Layer::Conv3x3 { in_ch: 2, out_ch: 3 }, Layer::Gap, Layer::Dense { inputs: 3, outputs: 2 }],
                tap: 2,
            },
            feature_loss(2, 4),
        ),
        (
            "linear_head",
            NetworkSpec {
                input: vector,
                layers: vec![Layer::Dense { inputs: 5, outputs: 4 }, Layer::LinearHead { inputs: 4, classes: 3 }],
                tap: 0,
            },
            ce,
        ),
        ("kdep_loss", NetworkSpec::mlp(5, &[6], 4, None), feature_loss(4, 5)),
        ("logits_kd_loss", NetworkSpec::mlp(5, &[6], 4, Some(3)), logit_loss(3, 6)),
    ];

    let mut parts = Vec::new();
    let mut all = true;
    for (i, (name, spec, loss)) in cases.into_iter().enumerate() {
        let batch = gaussian(6, spec.input.flat_len(), 100 + i as u64);
        let net = Network::init(spec, 200 + i as u64).unwrap();
        match grad_check(&net, loss, &batch, 1e-4) {
            Ok(r) => {
                all &= r.pass && r.max_rel_error < 1e-4;
                parts.push(format!("{name} {:.1e}", r.max_rel_error));
            }
            Err(e) => {
                all = false;
                parts.push(format!("{name} error: {e}"));
            }
        }
    }
    record(out, "4 gradient checks", all, format!("max rel error: {} (tol 1e-4)", parts.join(", ")));
}

fn pts_ordering(out: &mut Vec<Outcome>) {
    let x = scaled_channels(2000, &[50.0, 5.0, 1.0], 7);
    let y = pts(&x, 0.1, 3.0).unwrap();
    let (sx, sy) = (channel_stats(&x), channel_stats(&y));
    let (rx, ry) = (std_ratio(&sx, 1e-12), std_ratio(&sy, 1e-12));
    let std_order = sy.stds.windows(2).all(|w| w[0] > w[1]);

    let mut idx: Vec<usize> = (0..x.values().len()).collect();
    idx.sort_by(|&a, &b| x.values()[a].total_cmp(&x.values()[b]));
    let violations = idx
        .windows(2)
        .filter(|w| {
            let (xa, xb) = (x.values()[w[0]], x.values()[w[1]]);
            let (ya, yb) = (y.values()[w[0]], y.values()[w[1]]);
            if xa < xb { ya >= yb } else { ya != yb }
        })
        .count();
    record(
        out,
        "5 PTS ordering",
        ry < rx && std_order && violations == 0,
        format!(
            "std ratio {rx:.2} -> {ry:.3}; stds after {:?}; {violations} ordering violations over {} values",
            sy.stds.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>(),
            idx.len()
        ),
    );
}

fn trend_and_determinism(out: &mut Vec<Outcome>) {
    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let first = run_experiment(&cfg, &Method::ALL);
    let secs = start.elapsed().as_secs_f64();
    let first = match first {
        Ok(o) => o,
        Err(e) => {
            record(out, "6 directional trend", false, e.to_string());
            record(out, "7 determinism", false, "first run failed".into());
            return;
        }
    };
    let means: Vec<String> = method_means(&first.rows).iter().map(|(m, a)| format!("{m} {:.1}", 100.0 * a)).collect();
    match check_trend(&first.rows, 1.0) {
        Ok(t) => record(
            out,
            "6 directional trend",
            t.pass && first.teacher_accuracy >= 0.95 && secs < 600.0,
            format!(
                "teacher {:.3} (>= 0.95); means {}; PTS>=SVD {}, SVD>=parametric {}, not above random {:?}; \
                 margin {:+.2} pts (>= 1); {secs:.1}s (limit 600s)",
                first.teacher_accuracy,
                means.join(", "),
                t.pts_ge_svd,
                t.svd_ge_parametric,
                t.not_above_random,
                t.margin_points
            ),
        ),
        Err(e) => record(out, "6 directional trend", false, e.to_string()),
    }

    match run_experiment(&cfg, &Method::ALL) {
        Ok(second) => {
            let blocks = |o: &kdep::experiment::ExperimentOutcome| -> Vec<(String, Option<String>)> {
                o.manifests.iter().map(|m| (m.metrics_block(), m.hash("student").map(str::to_owned))).collect()
            };
            let (a, b) = (blocks(&first), blocks(&second));
            let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            let same = a.len() == b.len() && differing == 0 && a.iter().all(|(_, h)| h.is_some());
            record(
                out,
                "7 determinism",
                same,
                format!("{} manifests compared; {differing} differ in metrics block or student hash", a.len()),
            );
        }
        Err(e) => record(out, "7 determinism", false, e.to_string()),
    }
}

fn golden_files(out: &mut Vec<Outcome>) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut notes = Vec::new();
    let mut ok = true;
    for name in ["empty.kdt", "mixed.kdt"] {
        let raw = std::fs::read(dir.join(name)).unwrap();
        let same = TensorContainer::read(&dir.join(name)).and_then(|c| c.encode()).map(|b| b == raw).unwrap_or(false);
        ok &= same;
        notes.push(format!("{name} round trip {}", if same { "identical" } else { "DIFFERS" }));
    }
    for name in ["bad_magic.kdt", "truncated.kdt"] {
        let rejected = matches!(TensorContainer::read(&dir.join(name)), Err(Error::Format { .. }));
        ok &= rejected;
        notes.push(format!("{name} {}", if rejected { "rejected" } else { "ACCEPTED" }));
    }
    record(out, "8 container golden files", ok, notes.join(", "));
}

fn main() {
    let mut out = Vec::new();
    worked_examples(&mut out);
    theorem(&mut out);
    svd_optimality(&mut out);
    gradients(&mut out);
    pts_ordering(&mut out);
    trend_and_determinism(&mut out);
    golden_files(&mut out);

    let failed: Vec<&Outcome> = out.iter().filter(|o| !o.pass).collect();
    println!("acceptance: {} passed, {} failed", out.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        for f in failed {
            eprintln!("failed: {} ({})", f.name, f.detail);
        }
        std::process::exit(1);
    }
}
