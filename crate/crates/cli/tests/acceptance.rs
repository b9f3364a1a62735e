//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use imgrisk_core::default_schema;
use imgrisk_core::eval::{
    auc_to_cohens_d, compare_models_ttest, mean_ci_t, repeated_splits, roc_auc, split_scores, ComparisonMode,
    LogisticTrainer, SplitPlan,
};
use imgrisk_core::features::{build_design_matrix, score_image, UserVector};
use imgrisk_core::glm::{
    fit_irls, penalized_gradient, penalized_log_likelihood, wald_stats, FitOptions, ROUNDING_SLACK,
};
use imgrisk_core::stats::{group_ttest, pooled_t, run_stats, table_csv, TTestMode};
use imgrisk_core::synth::{generate_user_vectors, table4_preset};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Upper 2.5% point of Student's t with 999 df.
const T975_999: f64 = 1.962_341_461_133_449;

// ---------------------------------------------------------------- table 2

const IMAGE_1: [f64; 24] = [
    0.67, 0.21, 0.01, 0.01, 0.10, 0.79, 0.21, 0.96, 0.04, 0.25, 0.75, 0.99, 0.01, 0.60, 0.11, 0.29, 0.0, 0.0,
    0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
];

const IMAGE_3: [f64; 24] = [
    0.06, 0.92, 0.01, 0.01, 0.01, 0.03, 0.97, 0.02, 0.98, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.92, 0.08,
    0.97, 0.03, 0.96, 0.0, 0.0, 0.04,
];

fn table2() -> Outcome {
    let schema = default_schema();
    let mut worst = 0.0f64;
    for (name, published, routed, cluster) in [
        ("image 1", IMAGE_1, 9..16, "person characterization"),
        ("image 3", IMAGE_3, 16..24, "people characterization"),
    ] {
        let logits: Vec<f64> = published
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                if j < 9 || routed.contains(&j) {
                    p.max(1e-300).ln()
                } else {
                    0.0
                }
            })
            .collect();
        let f = score_image(name, &logits, &schema, 1.0).map_err(|e| e.to_string())?;
        ensure(f.fired_clusters == [cluster], || {
            format!("{name} fired {:?}", f.fired_clusters)
        })?;
        // the printed content task of image 3 sums to 1.01; compare to the
        // printed values divided by their task sum
        let mut want = published.to_vec();
        for layout in schema.layout() {
            let total: f64 = published[layout.columns.clone()].iter().sum();
            if total > 0.0 {
                for j in layout.columns.clone() {
                    want[j] = published[j] / total;
                }
            }
        }
        for (j, (g, w)) in f.probs.iter().zip(&want).enumerate() {
            if j >= 9 && !routed.contains(&j) {
                ensure(*g == 0.0, || format!("{name} column {j} not masked: {g}"))?;
            }
            worst = worst.max((g - w).abs());
        }
    }
    ensure(worst < 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "max deviation {worst:.1e} (image 3 content renormalized from 1.01)"
    ))
}

// ---------------------------------------------------------------- table 3

fn auc_to_d() -> Outcome {
    let mut parts = Vec::new();
    for (auc, d) in [(0.720, 0.82), (0.696, 0.72), (0.623, 0.44)] {
        let got = auc_to_cohens_d(auc).map_err(|e| e.to_string())?;
        ensure((got - d).abs() <= 0.01, || {
            format!("{auc} -> {got:.4}, published {d}")
        })?;
        parts.push(format!("{auc}->{got:.3}"));
    }
    Ok(parts.join(", "))
}

/// `m` values with exactly the requested sample mean and SD.
fn matched_sample(mean: f64, sd: f64, m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let mu = raw.iter().sum::<f64>() / m as f64;
    let s = (raw.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
    raw.iter().map(|x| mean + sd * (x - mu) / s).collect()
}

fn ci_consistency() -> Outcome {
    let mut parts = Vec::new();
    for (mean, lo, hi) in [
        (0.720, 0.716, 0.724),
        (0.696, 0.694, 0.698),
        (0.623, 0.621, 0.625),
    ] {
        let s = (hi - lo) / 2.0 * (1000f64).sqrt() / T975_999;
        let sample = matched_sample(mean, s, 1000, 11);
        let (m, l, h) = mean_ci_t(&sample, 0.95).map_err(|e| e.to_string())?;
        let half = (h - l) / 2.0;
        ensure((half - (hi - lo) / 2.0).abs() <= 0.0005, || {
            format!("half-width {half}")
        })?;
        ensure((l - lo).abs() <= 0.0005 && (h - hi).abs() <= 0.0005, || {
            format!("interval ({l:.4}, {h:.4}) vs ({lo}, {hi})")
        })?;
        parts.push(format!("{m:.3} ({l:.4}, {h:.4}) s={s:.4}"));
    }
    Ok(parts.join("; "))
}

fn model_comparison() -> Outcome {
    let sd = |lo: f64, hi: f64| (hi - lo) / 2.0 * (1000f64).sqrt() / T975_999;
    let (s_hybrid, s_resnet, s_clip) = (sd(0.716, 0.724), sd(0.621, 0.625), sd(0.694, 0.698));
    let mut t_resnet = Vec::new();
    let mut t_clip = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut draw = |mean: f64, s: f64| -> Vec<f64> {
            let n = Normal::new(mean, s).unwrap();
            (0..1000).map(|_| n.sample(&mut rng)).collect()
        };
        let hybrid = draw(0.720, s_hybrid);
        let resnet = draw(0.623, s_resnet);
        let clip = draw(0.696, s_clip);
        let a =
            compare_models_ttest(&hybrid, &resnet, ComparisonMode::Unpaired).map_err(|e| e.to_string())?;
        let b = compare_models_ttest(&hybrid, &clip, ComparisonMode::Unpaired).map_err(|e| e.to_string())?;
        ensure((38.0..=48.0).contains(&a.t), || {
            format!("seed {seed}: hybrid vs resnet t = {:.2}", a.t)
        })?;
        ensure((8.5..=13.0).contains(&b.t), || {
            format!("seed {seed}: hybrid vs clip t = {:.2}", b.t)
        })?;
        t_resnet.push(a.t);
        t_clip.push(b.t);
    }
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        format!("[{lo:.1}, {hi:.1}]")
    };
    Ok(format!(
        "10 seeds: t vs resnet {} (published 44.3), t vs clip {} (published 11.4)",
        range(&t_resnet),
        range(&t_clip)
    ))
}

// ---------------------------------------------------------------- table 4

/// (feature, mean_pos, sd_pos, mean_neg, sd_neg, published t)
const TABLE4: [(&str, f64, f64, f64, f64, f64); 11] = [
    ("sentiment.negative", 0.42, 0.09, 0.34, 0.10, 6.99),
    ("brightness.dark", 0.50, 0.15, 0.41, 0.18, 5.27),
    ("people.selfie", 0.33, 0.07, 0.29, 0.08, 3.97),
    ("person.sad", 0.47, 0.10, 0.41, 0.11, 5.00),
    ("person.child", 0.56, 0.16, 0.49, 0.16, 3.99),
    ("person.selfie", 0.66, 0.16, 0.58, 0.17, 4.45),
    ("people.friends", 0.27, 0.09, 0.23, 0.08, 4.12),
    ("person.old", 0.40, 0.12, 0.34, 0.11, 4.58),
    ("people.sad", 0.30, 0.18, 0.41, 0.24, -5.10),
    ("people.family", 0.25, 0.09, 0.29, 0.10, -3.55),
    ("content.people", 0.25, 0.07, 0.27, 0.09, -2.95),
];

fn oracle_pooled_t(m1: f64, s1: f64, n1: f64, m2: f64, s2: f64, n2: f64) -> f64 {
    let sp2 = ((n1 - 1.0) * s1 * s1 + (n2 - 1.0) * s2 * s2) / (n1 + n2 - 2.0);
    (m1 - m2) / (sp2 * (1.0 / n1 + 1.0 / n2)).sqrt()
}

fn table4_bracket() -> Outcome {
    let (n1, n2) = (92usize, 749usize);
    let mut worst_rel = 0.0f64;
    let mut check = |m1: f64, s1: f64, m2: f64, s2: f64| -> f64 {
        let (t, _) = pooled_t(m1, s1 * s1, n1, m2, s2 * s2, n2);
        let o = oracle_pooled_t(m1, s1, n1 as f64, m2, s2, n2 as f64);
        worst_rel = worst_rel.max(((t - o) / o).abs());
        t
    };
    let mut bracketed = Vec::new();
    let mut missed = Vec::new();
    for (id, m1, s1, m2, s2, published) in TABLE4 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let h = 0.005;
        for dm1 in [-h, h] {
            for ds1 in [-h, h] {
                for dm2 in [-h, h] {
                    for ds2 in [-h, h] {
                        let t = check(m1 + dm1, s1 + ds1, m2 + dm2, s2 + ds2);
                        lo = lo.min(t);
                        hi = hi.max(t);
                    }
                }
            }
        }
        if (lo..=hi).contains(&published) {
            bracketed.push(id);
        } else {
            missed.push(format!("{id} [{lo:.2}, {hi:.2}] vs {published}"));
        }
    }
    // the oracle also has to agree on raw samples
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let a: Vec<f64> = (0..92).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..749).map(|_| rng.random_range(0.0..1.0)).collect();
        let t = group_ttest(&a, &b, TTestMode::Pooled)
            .map_err(|e| e.to_string())?
            .t;
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
            (m, s)
        };
        let ((ma, sa), (mb, sb)) = (stats(&a), stats(&b));
        let o = oracle_pooled_t(ma, sa, 92.0, mb, sb, 749.0);
        worst_rel = worst_rel.max(((t - o) / o).abs());
    }
    ensure(worst_rel < 1e-10, || {
        format!("pooled t vs oracle rel. error {worst_rel:e}")
    })?;
    ensure(bracketed.len() >= 8, || {
        format!("{}/11 bracketed; missed {missed:?}", bracketed.len())
    })?;
    Ok(format!(
        "{}/11 rows bracket the published t; oracle rel. error {worst_rel:.1e}; outside: {}",
        bracketed.len(),
        missed.join(", ")
    ))
}

fn wald_identity() -> Outcome {
    let mut worst_published = 0.0f64;
    for (beta, se, chi2) in [
        (0.517, 0.072, 51.509),
        (0.353, 0.1258, 7.873),
        (0.301, 0.0435, 47.775),
        (0.230, 0.0644, 12.748),
        (0.140, 0.0450, 9.705),
        (0.130, 0.0451, 8.238),
    ] {
        let w: f64 = (beta / se) * (beta / se);
        ensure((w - chi2).abs() <= 0.15, || {
            format!("({beta}/{se})^2 = {w:.3} vs {chi2}")
        })?;
        worst_published = worst_published.max((w - chi2).abs());
    }

    let schema = default_schema();
    let ids = schema.query_ids();
    let mut worst_emitted = 0.0f64;
    let mut rows = 0;
    for seed in 1..=3 {
        let users = generate_user_vectors(&table4_preset(seed), &schema).map_err(|e| e.to_string())?;
        let report = run_stats(&users, &ids, &schema, TTestMode::Pooled, 0.05).map_err(|e| e.to_string())?;
        let reg = report.regression.as_ref().ok_or("no regression table")?;
        for r in reg.rows.iter().chain([&reg.intercept]) {
            let w = (r.beta / r.std_error).powi(2);
            worst_emitted = worst_emitted.max((w - r.wald_chi2).abs() / w.max(1.0));
            rows += 1;
        }
        // the written table must carry the identity too
        let csv = table_csv(&report);
        let mut lines = csv.lines();
        let header: Vec<&str> = lines.next().ok_or("empty table")?.split(',').collect();
        let col = |name: &str| header.iter().position(|h| *h == name);
        let (Some(b), Some(s), Some(c)) = (col("beta"), col("se"), col("wald")) else {
            return Err(format!("table header lacks beta/se/wald: {header:?}"));
        };
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f[b].is_empty() {
                continue;
            }
            let parse = |k: usize| f[k].parse::<f64>().map_err(|e| format!("{line}: {e}"));
            let (beta, se, chi2) = (parse(b)?, parse(s)?, parse(c)?);
            let w = (beta / se).powi(2);
            worst_emitted = worst_emitted.max((w - chi2).abs() / w.max(1.0));
        }
    }
    ensure(worst_emitted < 1e-9, || {
        format!("emitted identity error {worst_emitted:e}")
    })?;
    Ok(format!(
        "published rows within {worst_published:.3}; {rows} emitted rows within {worst_emitted:.1e}"
    ))
}

// ---------------------------------------------------------------- glm

fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (DMatrix<f64>, Vec<bool>) {
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n)
        .map(|i| {
            let eta: f64 = (0..d).map(|j| x[(i, j)] * beta[j]).sum::<f64>() - 0.3;
            rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())
        })
        .collect();
    (x, y)
}

fn ids(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

fn glm_suite() -> Outcome {
    // 2x2 table: x=0 has 10 events in 20, x=1 has 15 in 20
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (x, events, total) in [(0.0, 10, 20), (1.0, 15, 20)] {
        for k in 0..total {
            xs.push(x);
            ys.push(k < events);
        }
    }
    let x = DMatrix::from_column_slice(40, 1, &xs);
    let m = fit_irls(&x, &ys, &ids(1), &FitOptions::default())
        .and_then(|m| m.with_standard_errors(&x))
        .map_err(|e| e.to_string())?;
    let se = m.standard_errors.as_ref().ok_or("no SEs")?[1];
    let se_closed = (1.0 / 10.0 + 1.0 / 10.0 + 1.0 / 15.0 + 1.0 / 5.0f64).sqrt();
    ensure((m.coefficients[0] - 3f64.ln()).abs() < 1e-4, || {
        format!("beta {}", m.coefficients[0])
    })?;
    ensure(
        (se - se_closed).abs() < 1e-4 && (se - 0.6831).abs() < 1e-4,
        || format!("se {se}"),
    )?;

    // gradient vs central differences
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_grad = 0.0f64;
    for k in 0..20 {
        let d = 1 + k % 5;
        let (x, y) = random_problem(&mut rng, 50 + 5 * k, d);
        let lambda = if k % 2 == 0 { 0.0 } else { 0.7 };
        let b0 = rng.random_range(-0.5..0.5);
        let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8..0.8)).collect();
        let g = penalized_gradient(&x, &y, b0, &beta, lambda);
        let mut params = vec![b0];
        params.extend(&beta);
        for p in 0..=d {
            let h = 1e-5;
            let mut up = params.clone();
            let mut dn = params.clone();
            up[p] += h;
            dn[p] -= h;
            let f = |v: &[f64]| penalized_log_likelihood(&x, &y, v[0], &v[1..], lambda);
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let rel = (g[p] - fd).abs() / fd.abs().max(1.0);
            worst_grad = worst_grad.max(rel);
        }
    }
    ensure(worst_grad < 1e-5, || {
        format!("gradient rel. error {worst_grad:e}")
    })?;

    // scaling equivariance and monotone objective
    let mut worst_scale = 0.0f64;
    let mut trace_steps = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = random_problem(&mut rng, 200, 3);
        let base = fit_irls(&x, &y, &ids(3), &FitOptions::default())
            .and_then(|m| m.with_standard_errors(&x))
            .map_err(|e| e.to_string())?;
        for w in base.fit.objective_trace.windows(2) {
            trace_steps += 1;
            ensure(w[1] >= w[0] - ROUNDING_SLACK * w[0].abs().max(1.0), || {
                format!("objective fell from {} to {}", w[0], w[1])
            })?;
        }
        let c = [3.0, 0.25, 10.0];
        let scaled = DMatrix::from_fn(200, 3, |i, j| x[(i, j)] * c[j]);
        let sm = fit_irls(&scaled, &y, &ids(3), &FitOptions::default())
            .and_then(|m| m.with_standard_errors(&scaled))
            .map_err(|e| e.to_string())?;
        let (wb, ws) = (
            wald_stats(&base).map_err(|e| e.to_string())?,
            wald_stats(&sm).map_err(|e| e.to_string())?,
        );
        for j in 0..3 {
            worst_scale = worst_scale.max((sm.coefficients[j] * c[j] - base.coefficients[j]).abs());
            worst_scale = worst_scale.max((ws[j + 1].wald_chi2 - wb[j + 1].wald_chi2).abs());
        }
    }
    ensure(worst_scale < 1e-6, || {
        format!("scaling deviation {worst_scale:e}")
    })?;

    // separable data
    let xs: Vec<f64> = (0..30).map(|i| i as f64 / 10.0).collect();
    let ys: Vec<bool> = xs.iter().map(|&v| v > 1.45).collect();
    let sep = fit_irls(
        &DMatrix::from_column_slice(30, 1, &xs),
        &ys,
        &ids(1),
        &FitOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    ensure(sep.fit.separation_detected, || "separation not flagged".into())?;

    Ok(format!(
        "beta=ln3, se={se:.5}; grad rel. err {worst_grad:.1e}; scaling {worst_scale:.1e}; {trace_steps} monotone steps; separation flagged"
    ))
}

// ---------------------------------------------------------------- auc

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice = 0u64;
    let (mut np, mut nn) = (0u64, 0u64);
    for (s, &l) in scores.iter().zip(labels) {
        if l {
            np += 1;
            for (t, &m) in scores.iter().zip(labels) {
                if !m {
                    twice += if s > t {
                        2
                    } else if s == t {
                        1
                    } else {
                        0
                    };
                }
            }
        } else {
            nn += 1;
        }
    }
    twice as f64 / (2 * np * nn) as f64
}

fn auc_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut done = 0;
    while done < 200 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(1..=n.min(30)) as i64;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let a = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let b = brute_auc(&scores, &labels);
        ensure(a == b, || format!("n={n}: {a} vs brute {b}"))?;
        // integer scores keep these transforms exact and strictly increasing
        for f in [
            |s: f64| s * s * s + 2.0 * s - 7.0,
            |s: f64| (s / 4.0).exp(),
            |s: f64| -1.0 / (s + 1.0),
        ] {
            let t: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            let c = roc_auc(&t, &labels).map_err(|e| e.to_string())?;
            ensure(c == a, || format!("transform changed AUC {a} -> {c}"))?;
        }
        done += 1;
    }

    // permutation null: every split sees its own shuffle of the labels
    let schema = default_schema();
    let users = generate_user_vectors(&table4_preset(8), &schema).map_err(|e| e.to_string())?;
    let design = build_design_matrix(&users, &schema.query_ids()).map_err(|e| e.to_string())?;
    let plan = SplitPlan {
        master_seed: 17,
        n_repeats: 1000,
        train_fraction: 0.7,
    };
    let trainer = LogisticTrainer {
        options: FitOptions {
            l2_lambda: 1.0,
            ..FitOptions::default()
        },
    };
    let aucs = (0..plan.n_repeats)
        .into_par_iter()
        .map(|run| {
            let mut y = design.y.clone();
            y.shuffle(&mut ChaCha8Rng::seed_from_u64(run as u64));
            let (labels, scores, _, _) =
                split_scores(&design.x, &y, &plan, &trainer, run).map_err(|e| e.to_string())?;
            roc_auc(&scores, &labels).map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<f64>, String>>()?;
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    ensure((0.45..=0.55).contains(&mean), || {
        format!("shuffled-label mean AUC {mean}")
    })?;
    Ok(format!(
        "200 instances exact, transforms invariant; shuffled labels mean AUC {mean:.4} over 1000 splits"
    ))
}

fn eval_mean_auc(users: &[UserVector], ids: &[String], repeats: usize, seed: u64) -> Result<f64, String> {
    Ok(eval_report(users, ids, repeats, seed)?.mean_auc)
}

fn eval_report(
    users: &[UserVector],
    ids: &[String],
    repeats: usize,
    seed: u64,
) -> Result<imgrisk_core::eval::EvalReport, String> {
    let design = build_design_matrix(users, ids).map_err(|e| e.to_string())?;
    let plan = SplitPlan {
        master_seed: seed,
        n_repeats: repeats,
        train_fraction: 0.7,
    };
    let trainer = LogisticTrainer {
        options: FitOptions {
            l2_lambda: 1.0,
            ..FitOptions::default()
        },
    };
    repeated_splits("acceptance", &design.x, &design.y, &plan, &trainer).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- synthetic

fn synthetic_end_to_end() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| {
        let schema = default_schema();
        let ids = schema.query_ids();
        let start = Instant::now();
        let users = generate_user_vectors(&table4_preset(1), &schema).map_err(|e| e.to_string())?;
        let stats = run_stats(&users, &ids, &schema, TTestMode::Pooled, 0.05).map_err(|e| e.to_string())?;
        let report = eval_report(&users, &ids, 1000, 0)?;
        let elapsed = start.elapsed();
        let (lo, hi) = report.ci95.ok_or("no interval")?;
        let half = (hi - lo) / 2.0;
        ensure(elapsed < Duration::from_secs(120), || format!("pipeline took {elapsed:?}"))?;
        ensure((0.65..=0.85).contains(&report.mean_auc), || format!("mean AUC {}", report.mean_auc))?;
        ensure(half <= 0.01, || format!("CI half-width {half}"))?;
        let _ = stats;

        let mut recovered = Vec::new();
        for seed in 1..=5u64 {
            let users = generate_user_vectors(&table4_preset(seed), &schema).map_err(|e| e.to_string())?;
            let s = run_stats(&users, &ids, &schema, TTestMode::Pooled, 0.05).map_err(|e| e.to_string())?;
            let hits = TABLE4
                .iter()
                .filter(|(id, .., published)| {
                    s.comparisons
                        .iter()
                        .any(|c| c.feature_id == *id && c.significant_fdr && c.t.signum() == published.signum())
                })
                .count();
            ensure(hits >= 9, || format!("seed {seed}: {hits}/11 planted features recovered"))?;
            recovered.push(hits);
        }

        let null = generate_user_vectors(&table4_preset(1).zero_effect(), &schema).map_err(|e| e.to_string())?;
        let null_auc = eval_mean_auc(&null, &ids, 1000, 0)?;
        ensure((0.45..=0.55).contains(&null_auc), || format!("null cohort mean AUC {null_auc}"))?;
        Ok(format!(
            "mean AUC {:.4} ({lo:.4}, {hi:.4}) in {:.1}s on 1 thread; recovered {recovered:?} of 11 over seeds 1-5; null AUC {null_auc:.4}",
            report.mean_auc,
            elapsed.as_secs_f64()
        ))
    })
}

// ---------------------------------------------------------------- determinism

fn run_cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_imgrisk"))
        .args(args)
        .current_dir(cwd)
        .env_remove("IMGRISK_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn run_all_commands(root: &Path, threads: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    let t = ["--threads", threads];
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--seed", "3", "--out", "cohort"],
        vec![
            "synth",
            "--seed",
            "3",
            "--level",
            "image-logits",
            "--n-pos",
            "30",
            "--n-neg",
            "90",
            "--out",
            "images",
        ],
        vec![
            "extract",
            "--similarities",
            "images/similarities.jsonl",
            "--users",
            "images/users.csv",
            "--images",
            "images/images.csv",
            "--out",
            "extracted",
        ],
        vec![
            "eval",
            "--user-vectors",
            "cohort/user_vectors.csv",
            "--repeats",
            "200",
            "--plot-data",
            "--out",
            "full",
        ],
        vec![
            "eval",
            "--user-vectors",
            "cohort/user_vectors.csv",
            "--repeats",
            "200",
            "--columns",
            "sentiment.negative,brightness.dark",
            "--out",
            "small",
        ],
        vec![
            "eval",
            "--user-vectors",
            "extracted/user_vectors.csv",
            "--repeats",
            "100",
            "--out",
            "extracted",
        ],
        vec![
            "compare",
            "--a",
            "full/eval_report.json",
            "--b",
            "small/eval_report.json",
            "--out",
            "full",
        ],
        vec![
            "stats",
            "--user-vectors",
            "cohort/user_vectors.csv",
            "--out",
            "stats",
        ],
    ];
    for step in steps {
        run_cli(&[&t[..], &step].concat(), root)?;
    }
    let mut files = Vec::new();
    collect(root, root, &mut files)?;
    files.sort();
    Ok(files)
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> Result<(), String> {
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            out.push((rel, std::fs::read(&path).map_err(|e| e.to_string())?));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let reference = run_all_commands(&dir.path().join("t1"), "1")?;
    for (name, threads) in [("t1b", "1"), ("t4", "4"), ("t0", "0")] {
        let other = run_all_commands(&dir.path().join(name), threads)?;
        ensure(other.len() == reference.len(), || {
            format!("{name}: file sets differ")
        })?;
        for ((fa, a), (fb, b)) in reference.iter().zip(&other) {
            ensure(fa == fb && a == b, || {
                format!("--threads {threads}: {fa} differs")
            })?;
        }
    }
    Ok(format!(
        "{} output files byte-identical across --threads 1, 1, 4, 0",
        reference.len()
    ))
}

// ---------------------------------------------------------------- runner

fn main() {
    let criteria: [Criterion; 10] = [
        ("table 2 reproduction", table2, Some(Duration::from_secs(1))),
        ("table 3 AUC to Cohen's d", auc_to_d, Some(Duration::from_secs(1))),
        (
            "table 3 CI consistency",
            ci_consistency,
            Some(Duration::from_secs(1)),
        ),
        ("model comparison t windows", model_comparison, None),
        ("table 4 t-bracket", table4_bracket, None),
        ("table 4 Wald identity", wald_identity, None),
        (
            "logistic regression oracles",
            glm_suite,
            Some(Duration::from_secs(30)),
        ),
        ("AUC oracles", auc_suite, None),
        ("synthetic end-to-end", synthetic_end_to_end, None),
        ("determinism across threads", determinism, None),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let mut outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        if let (Ok(_), Some(limit)) = (&outcome, budget) {
            if elapsed > limit {
                outcome = Err(format!("took {elapsed:?}, budget {limit:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS  {name} ({:.2}s): {detail}", elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} ({:.2}s): {detail}", elapsed.as_secs_f64());
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
