//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Set `UPDATE_GOLDEN=1` to rewrite the pinned fixture report under
//! `tests/golden/`.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use halludetect::aggregation::{
    fit_logistic_regression, logit_transform, loss_and_gradient, predict_multiscore, sigmoid, FeatureMatrix, FitOptions,
    DEFAULT_EPSILON,
};
use halludetect::backends::{BackendError, Backends, Endpoint, TokenLogprobs};
use halludetect::budget::{
    budget_curve, select_cost_effective, subset_validation_loss, CostModel, SelectionParams, SharingMode,
};
use halludetect::calibration::{
    apply_calibrator, calibration_error, fit_platt, multicalibrate, CalibrationConfig, GLOBAL_GROUP,
};
use halludetect::evaluation::{brier, f1_accuracy, spearman};
use halludetect::exec::Execution;
use halludetect::model::Example;
use halludetect::pipeline::{cmd_calibrate, cmd_evaluate, cmd_score, RunConfig};
use halludetect::scorers::{score_inverse_perplexity, softmax_binary_normalize, ScoreError, Scorer, ScorerKind, ScoringConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    if elapsed.as_secs_f64() > limit_secs {
        return Err(format!("took {:.2} s, limit {limit_secs} s", elapsed.as_secs_f64()));
    }
    Ok(())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn fixture_config() -> PathBuf {
    manifest_dir().join("fixtures").join("config.toml")
}

// ---------------------------------------------------------------- criterion 1

fn chat_backend(reply: Value) -> Backends {
    let transport = move |endpoint: Endpoint, _: &Value| match endpoint {
        Endpoint::Chat => Ok(reply.clone()),
        other => Err(BackendError::InvalidRequest(format!("unexpected {} call", other.name()))),
    };
    Backends::new(Arc::new(transport), "embed")
}

fn first_token_reply(top: &[(&str, f64)]) -> Value {
    let top: Vec<Value> = top.iter().map(|(t, lp)| json!({"token": t, "logprob": lp})).collect();
    json!({"choices": [{
        "message": {"role": "assistant", "content": top[0]["token"]},
        "logprobs": {"content": [{"token": top[0]["token"], "logprob": top[0]["logprob"], "top_logprobs": top}]}
    }]})
}

fn analytic_scorer_checks() -> Outcome {
    let start = Instant::now();
    let tol = 1e-9;
    let ln3 = 3f64.ln();
    ensure!(close(softmax_binary_normalize(-1.0, -1.0).unwrap(), 0.5, tol), "equal logprobs");
    ensure!(close(softmax_binary_normalize(-2.0 + ln3, -2.0).unwrap(), 0.75, tol), "ln 3 gap");
    let s2 = 1.0 / (1.0 + (-2.0f64).exp());
    ensure!(close(softmax_binary_normalize(-1.0, -3.0).unwrap(), s2, tol), "sigmoid of difference");
    ensure!(close(s2, 0.880797, 1e-6), "sigmoid(2) reference");

    let ip = |lps: &[f64]| score_inverse_perplexity(&TokenLogprobs {
        tokens: lps.iter().map(|&lp| (String::new(), lp)).collect(),
    })
    .unwrap();
    let ln2 = 2f64.ln();
    ensure!(close(ip(&[0.0]), 1.0, tol), "certain token");
    ensure!(close(ip(&[-ln2, -ln2]), 0.5, tol), "equal halves");
    ensure!(close(ip(&[-1.0, -2.0, -3.0]), (-2.0f64).exp(), tol), "mean of three");
    ensure!(close(ip(&[-1.0, -2.0, -3.0]), 0.135335, 1e-6), "exp(-2) reference");

    // Served replies, through the scorer.
    let cfg = ScoringConfig::default();
    let ex = Example::new("e", "Which planet is largest?", "Jupiter.");
    let mut with_samples = ex.clone();
    with_samples.samples = Some(vec!["Jupiter".into(), "It is Jupiter.".into()]);
    let ptrue = |top: &[(&str, f64)]| {
        let b = chat_backend(first_token_reply(top));
        Scorer::new(&b, &cfg).score_prompted_binary(ScorerKind::PTrue, &ex)
    };
    let rail = |top: &[(&str, f64)]| {
        let b = chat_backend(first_token_reply(top));
        Scorer::new(&b, &cfg).score_hallucination_rail(&with_samples, 2)
    };
    ensure!(close(ptrue(&[("True", -0.9), ("False", -0.9)]).unwrap().value, 0.5, tol), "P(True) equal");
    ensure!(close(ptrue(&[("True", -0.3), ("False", -0.3 - ln3)]).unwrap().value, 0.75, tol), "P(True) ln 3");
    ensure!(
        matches!(ptrue(&[("True", -0.1), ("Maybe", -2.0)]), Err(ScoreError::MissingVerdictToken(_))),
        "P(True) without a False token must fail"
    );
    ensure!(close(rail(&[("yes", -0.7), ("no", -0.7)]).unwrap().value, 0.5, tol), "rail equal");
    ensure!(close(rail(&[("yes", -0.05), ("no", -0.05 - 9f64.ln())]).unwrap().value, 0.9, tol), "rail ln 9");
    ensure!(
        matches!(rail(&[("yes", -0.1), ("maybe", -2.0)]), Err(ScoreError::MissingVerdictToken(_))),
        "rail without a no token must fail"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a: f64 = rng.random_range(-40.0..0.0);
        let b: f64 = rng.random_range(-40.0..0.0);
        let sum = softmax_binary_normalize(a, b).unwrap() + softmax_binary_normalize(b, a).unwrap();
        worst = worst.max((sum - 1.0).abs());
    }
    ensure!(worst <= 1e-12, "P(True)+P(False) off by {worst:e}");
    within(start.elapsed(), 1.0)?;
    Ok(format!("max |P(True)+P(False)-1| = {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 2

fn naive_brier(p: &[f64], y: &[u8]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - y[i] as f64).powi(2);
    }
    s / p.len() as f64
}

fn naive_f1_accuracy(pred: &[u8], y: &[u8]) -> (f64, f64) {
    let count = |a: u8, b: u8| pred.iter().zip(y).filter(|(p, l)| **p == a && **l == b).count() as f64;
    let (tp, fp, fneg, tn) = (count(1, 1), count(1, 0), count(0, 1), count(0, 0));
    let acc = (tp + tn) / pred.len() as f64;
    if tp + fp == 0.0 || tp + fneg == 0.0 {
        return (0.0, acc);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fneg);
    if precision + recall == 0.0 {
        return (0.0, acc);
    }
    (2.0 * precision * recall / (precision + recall), acc)
}

/// Average rank by counting: 1 + #smaller + (#equal - 1) / 2.
fn naive_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let smaller = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

fn naive_spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (naive_ranks(a), naive_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma).powi(2);
        vb += (rb[i] - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Largest bin error over bins with at least `min_cell` members.
fn naive_calibration_error(s: &[f64], y: &[u8], bins: usize, min_cell: usize) -> (f64, Vec<usize>) {
    let mut worst = 0.0f64;
    let mut qualifying = Vec::new();
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..s.len())
            .filter(|&i| (s[i] >= lo && s[i] < hi) || (b == bins - 1 && s[i] == 1.0))
            .collect();
        if members.is_empty() || members.len() < min_cell {
            continue;
        }
        let k = members.len() as f64;
        let ms = members.iter().map(|&i| s[i]).sum::<f64>() / k;
        let my = members.iter().map(|&i| y[i] as f64).sum::<f64>() / k;
        worst = worst.max((ms - my).abs());
        qualifying.push(b);
    }
    (worst, qualifying)
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tol = 1e-12;
    let mut constant_cases = 0;
    for case in 0..100 {
        let n = rng.random_range(2..=50);
        // Every other instance draws from a coarse grid to force ties.
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if case % 2 == 0 {
                rng.random::<f64>()
            } else {
                rng.random_range(0..5) as f64 / 4.0
            }
        };
        let p: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let q: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();

        let b = brier(&p, &y).map_err(|e| e.to_string())?;
        ensure!(close(b, naive_brier(&p, &y), tol), "brier case {case}");

        let (f1, acc) = f1_accuracy(&pred, &y).map_err(|e| e.to_string())?;
        let (nf1, nacc) = naive_f1_accuracy(&pred, &y);
        ensure!(close(f1, nf1, tol) && close(acc, nacc, tol), "f1/accuracy case {case}: {f1} {acc} vs {nf1} {nacc}");

        match (spearman(&p, &q), naive_spearman(&p, &q)) {
            (Ok(r), Some(nr)) => ensure!(close(r, nr, tol), "spearman case {case}: {r} vs {nr}"),
            (Err(_), None) => constant_cases += 1,
            (r, nr) => return Err(format!("spearman case {case}: {r:?} vs {nr:?}")),
        }

        let bins = rng.random_range(2..=10);
        let min_cell = rng.random_range(1..=5);
        let (e, report) = calibration_error(&p, &y, bins, min_cell).map_err(|e| e.to_string())?;
        let (ne, nbins) = naive_calibration_error(&p, &y, bins, min_cell);
        let got_bins: Vec<usize> = report.iter().map(|r| r.bin).collect();
        ensure!(close(e, ne, tol) && got_bins == nbins, "calibration_error case {case}: {e} vs {ne}");
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!("100 instances agree to 1e-12 ({constant_cases} constant-input spearman cases both rejected)"))
}

// ---------------------------------------------------------- criteria 3 and 4

/// Four overlapping groups, each joined with probability 1/2, that shift the
/// score away from the true probability by +0.2, -0.2, +0.2 and -0.2.
fn overlapping_population(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>, Vec<Vec<u32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = [0.2, -0.2, 0.2, -0.2];
    let mut s = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    for _ in 0..n {
        let p: f64 = rng.random_range(0.05..0.95);
        let mut groups = vec![GLOBAL_GROUP];
        let mut shift = 0.0;
        for (g, off) in offsets.iter().enumerate() {
            if rng.random::<f64>() < 0.5 {
                groups.push(g as u32 + 1);
                shift += off;
            }
        }
        s.push((p + shift).clamp(0.0, 1.0));
        y.push(u8::from(rng.random::<f64>() < p));
        m.push(groups);
    }
    (s, y, m)
}

fn multicalibration_convergence() -> Outcome {
    let start = Instant::now();
    let (s, y, m) = overlapping_population(5000, 3);
    let cfg = CalibrationConfig::default();
    let c = multicalibrate(&s, &y, Some(&m), &cfg).map_err(|e| e.to_string())?;
    ensure!(!c.fit.hit_max_iters, "stopped at max_iters");
    let out = apply_calibrator(&c, &s, Some(&m)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for g in 0..=4u32 {
        let idx: Vec<usize> = (0..s.len()).filter(|&i| m[i].contains(&g)).collect();
        let gs: Vec<f64> = idx.iter().map(|&i| out[i]).collect();
        let gy: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
        let (e, _) = naive_calibration_error(&gs, &gy, cfg.bins, cfg.min_cell);
        worst = worst.max(e);
    }
    ensure!(worst <= cfg.alpha + 1e-12, "worst cell error {worst} > {}", cfg.alpha);
    let h = &c.fit.brier_history;
    ensure!(h.windows(2).all(|w| w[1] <= w[0]), "Brier increased during patching");
    within(start.elapsed(), 10.0)?;
    Ok(format!(
        "{} patches, worst cell error {worst:.4}, Brier {:.4} -> {:.4}",
        c.patch_count(),
        h[0],
        h[h.len() - 1]
    ))
}

fn calibration_ablation() -> Outcome {
    // Fit on the population above, score a fresh draw from the same generator.
    let (cs, cy, cm) = overlapping_population(5000, 3);
    let (ts, ty, tm) = overlapping_population(5000, 4);
    let c = multicalibrate(&cs, &cy, Some(&cm), &CalibrationConfig::default()).map_err(|e| e.to_string())?;
    let calibrated = apply_calibrator(&c, &ts, Some(&tm)).map_err(|e| e.to_string())?;
    let before = brier(&ts, &ty).map_err(|e| e.to_string())?;
    let after = brier(&calibrated, &ty).map_err(|e| e.to_string())?;
    ensure!(after <= before - 0.01, "test Brier {before:.4} -> {after:.4}, gain below 0.01");
    Ok(format!("test Brier {before:.4} -> {after:.4} on {} held-out rows", ts.len()))
}

// ---------------------------------------------------------------- criterion 5

fn features(columns: &[ScorerKind], rows: &[Vec<f64>]) -> FeatureMatrix {
    let values = rows
        .iter()
        .flatten()
        .map(|&s| logit_transform(s, DEFAULT_EPSILON).unwrap())
        .collect();
    FeatureMatrix::new((0..rows.len()).map(|i| i.to_string()).collect(), columns.to_vec(), values).unwrap()
}

fn multiscore_dominance() -> Outcome {
    let start = Instant::now();
    let n = 10_000;
    let cols = [ScorerKind::PTrue, ScorerKind::NliDirect];
    let mut margins = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let f = Normal::new(0.0, 1.5).unwrap();
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut rows = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let (f1, f2) = (f.sample(&mut rng), f.sample(&mut rng));
            y.push(u8::from(rng.random::<f64>() < sigmoid(f1 + f2)));
            rows.push(vec![sigmoid(f1 + noise.sample(&mut rng)), sigmoid(f2 + noise.sample(&mut rng))]);
        }
        let cut = n * 4 / 5;
        let (train, test) = (features(&cols, &rows[..cut]), features(&cols, &rows[cut..]));
        let model = fit_logistic_regression(&train, &y[..cut], FitOptions::default()).map_err(|e| e.to_string())?;
        let multi = brier(&predict_multiscore(&model, &test).unwrap(), &y[cut..]).unwrap();
        // Each component on its own, raw and Platt-scaled on the training rows.
        let mut best_single = f64::INFINITY;
        for j in 0..2 {
            let tr: Vec<f64> = rows[..cut].iter().map(|r| r[j]).collect();
            let te: Vec<f64> = rows[cut..].iter().map(|r| r[j]).collect();
            let platt = fit_platt(&tr, &y[..cut]).map_err(|e| e.to_string())?;
            let scaled = apply_calibrator(&platt, &te, None).map_err(|e| e.to_string())?;
            best_single = best_single
                .min(brier(&te, &y[cut..]).unwrap())
                .min(brier(&scaled, &y[cut..]).unwrap());
        }
        ensure!(
            multi <= best_single - 0.01,
            "seed {seed}: multi-score {multi:.4} vs best single {best_single:.4}"
        );
        margins.push(best_single - multi);
    }
    within(start.elapsed(), 30.0)?;
    let smallest = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("smallest margin over 5 seeds {smallest:.4}"))
}

// ---------------------------------------------------------------- criterion 6

fn cost_effective_boundaries() -> Outcome {
    let start = Instant::now();
    let kinds = [
        ScorerKind::PTrue,
        ScorerKind::PTrueVerbalized,
        ScorerKind::PInputContradict,
        ScorerKind::InversePerplexity,
        ScorerKind::SelfCheckNli(3),
    ];
    // Each scorer sees its own slice of the label signal; the last one the largest.
    let strength = [1.0, 0.8, 0.7, 0.6, 1.6];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = Normal::new(0.0, 1.0).unwrap();
    let n = 4000;
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let f: Vec<f64> = strength.iter().map(|w| w * z.sample(&mut rng)).collect();
        y.push(u8::from(rng.random::<f64>() < sigmoid(f.iter().sum())));
        rows.push(f.iter().map(|fi| sigmoid(fi + 0.3 * z.sample(&mut rng))).collect());
    }
    let x = features(&kinds, &rows);
    let cm = CostModel::standard(&kinds, SharingMode::Additive);
    let params = SelectionParams::with_seed(6);
    let min_cost = kinds.iter().map(|k| cm.cost(*k).unwrap()).min().unwrap();
    let total = cm.total_cost();

    let at_min = select_cost_effective(&x, &y, &cm, min_cost, &params).map_err(|e| e.to_string())?;
    let mut best_single = (f64::INFINITY, 0usize);
    for (j, k) in kinds.iter().enumerate() {
        if cm.cost(*k).unwrap() <= min_cost {
            let l = subset_validation_loss(&x, &y, &[j], &params).map_err(|e| e.to_string())?;
            if l < best_single.0 {
                best_single = (l, j);
            }
        }
    }
    ensure!(
        at_min.columns == vec![best_single.1],
        "budget {min_cost} picked {:?}, best single is {}",
        at_min.selected,
        kinds[best_single.1]
    );

    let all: Vec<usize> = (0..kinds.len()).collect();
    let full_loss = subset_validation_loss(&x, &y, &all, &params).map_err(|e| e.to_string())?;
    let at_total = select_cost_effective(&x, &y, &cm, total, &params).map_err(|e| e.to_string())?;
    ensure!(
        close(at_total.validation_loss, full_loss, 1e-12),
        "budget {total}: {} vs full fit {full_loss}",
        at_total.validation_loss
    );

    let budgets: Vec<u32> = (1..=total).collect();
    let curve = budget_curve(&x, &y, &cm, &budgets, &params).map_err(|e| e.to_string())?;
    ensure!(
        curve.windows(2).all(|w| w[1].validation_loss <= w[0].validation_loss),
        "validation loss increased along the curve"
    );
    within(start.elapsed(), 20.0)?;
    Ok(format!(
        "B={min_cost} -> {}, B={total} loss {:.6} = full fit, curve non-increasing over {} budgets",
        at_min.selected[0],
        at_total.validation_loss,
        budgets.len()
    ))
}

// ---------------------------------------------------------------- criterion 7

fn exhaustive_scale() -> Outcome {
    let kinds = [
        ScorerKind::PTrue,
        ScorerKind::PTrueVerbalized,
        ScorerKind::PInputContradict,
        ScorerKind::PSelfContradict,
        ScorerKind::PFactContradict,
        ScorerKind::InversePerplexity,
        ScorerKind::NliDirect,
        ScorerKind::SelfCheckNli(3),
        ScorerKind::SimilarityDegree(3),
        ScorerKind::HallucinationRail(3),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = Normal::new(0.0, 1.0).unwrap();
    let n = 1000;
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a = z.sample(&mut rng);
        y.push(u8::from(rng.random::<f64>() < sigmoid(2.0 * a)));
        rows.push((0..kinds.len()).map(|_| sigmoid(a + z.sample(&mut rng))).collect());
    }
    let x = features(&kinds, &rows);
    let cm = CostModel::standard(&kinds, SharingMode::Additive);
    let start = Instant::now();
    let sel = select_cost_effective(&x, &y, &cm, cm.total_cost(), &SelectionParams::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(sel.evaluated == 1023, "evaluated {} subsets", sel.evaluated);
    within(elapsed, 60.0)?;
    Ok(format!("1023 subsets fitted in {:.2} s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 8

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let kinds = [ScorerKind::PTrue, ScorerKind::NliDirect, ScorerKind::InversePerplexity, ScorerKind::PTrueVerbalized];
    let p = kinds.len();
    let n = 200;
    let values: Vec<f64> = (0..n * p).map(|_| rng.random_range(-5.0..5.0)).collect();
    let x = FeatureMatrix::new((0..n).map(|i| i.to_string()).collect(), kinds.to_vec(), values).unwrap();
    let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let w: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: f64 = rng.random_range(-2.0..2.0);
        let lambda: f64 = rng.random_range(0.0..0.5);
        let (_, g, gb) = loss_and_gradient(&x, &y, &w, b, lambda);
        for j in 0..=p {
            let at = |d: f64| {
                let mut w2 = w.clone();
                let mut b2 = b;
                if j < p {
                    w2[j] += d;
                } else {
                    b2 += d;
                }
                loss_and_gradient(&x, &y, &w2, b2, lambda).0
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let analytic = if j < p { g[j] } else { gb };
            let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    ensure!(worst <= 1e-4, "relative error {worst:e}");
    Ok(format!("worst relative error {worst:.1e} over 100 points"))
}

// ---------------------------------------------------------------- criterion 9

const REPORT_FILES: [&str; 4] = ["metrics.csv", "correlations.csv", "budget_curve.csv", "report.json"];

fn run_cli(out: &Path, extra: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_halludetect"))
        .arg("--config")
        .arg(fixture_config())
        .arg("--out")
        .arg(out)
        .args(extra)
        .arg("run")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        status.status.success(),
        "cli exited with {}: {}",
        status.status,
        String::from_utf8_lossy(&status.stderr)
    );
    Ok(())
}

fn end_to_end_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_cli(a.path(), &[])?;
    run_cli(b.path(), &["--sequential"])?;
    let golden = manifest_dir().join("tests").join("golden");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for f in REPORT_FILES {
        let first = std::fs::read(a.path().join("report").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let second = std::fs::read(b.path().join("report").join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(first == second, "{f} differs between runs");
        let pinned = golden.join(f);
        if update {
            std::fs::create_dir_all(&golden).map_err(|e| e.to_string())?;
            std::fs::write(&pinned, &first).map_err(|e| e.to_string())?;
            continue;
        }
        let expected = std::fs::read(&pinned).map_err(|e| format!("{}: {e} (run with UPDATE_GOLDEN=1)", pinned.display()))?;
        ensure!(first == expected, "{f} differs from the pinned copy in tests/golden");
    }
    Ok(if update {
        "runs identical; golden files rewritten".into()
    } else {
        format!("parallel and sequential runs byte-identical and match {} golden files", REPORT_FILES.len())
    })
}

// --------------------------------------------------------------- criterion 10

fn fixture_report(scorers: Option<Vec<ScorerKind>>, budgets: Option<Vec<u32>>) -> Result<halludetect::evaluation::EvaluationReport, String> {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::load(&fixture_config()).map_err(|e| e.to_string())?;
    cfg.out = out.path().to_path_buf();
    if let Some(s) = scorers {
        cfg.scorers = s;
    }
    if let Some(b) = budgets {
        cfg.budget.budgets = b;
    }
    cmd_score(&cfg, Execution::Parallel).map_err(|e| e.to_string())?;
    cmd_calibrate(&cfg, false).map_err(|e| e.to_string())?;
    cmd_evaluate(&cfg, Execution::Parallel).map_err(|e| e.to_string())
}

fn budget_curve_shape() -> Outcome {
    let consistency = ScorerKind::SelfCheckNli(3);
    let full = fixture_report(None, None)?;
    let at3 = full
        .budget_rows
        .iter()
        .find(|r| r.budget == 3)
        .ok_or("no budget-3 row in the fixture report")?;
    let alone = full.row(&consistency.to_string()).ok_or("no SelfCheckNli(3) row")?.brier;
    // The consistency scorer alone, through the same aggregation pipeline.
    let refit = fixture_report(Some(vec![consistency]), Some(vec![3]))?;
    let alone_refit = refit.multiscore_row().ok_or("no multi-score row")?.brier;
    ensure!(at3.cost <= 3, "budget-3 selection costs {}", at3.cost);
    ensure!(
        at3.test_brier <= alone && at3.test_brier <= alone_refit,
        "budget 3 test Brier {:.4} vs {consistency} alone {alone:.4} (refit {alone_refit:.4})",
        at3.test_brier
    );
    let names: Vec<String> = at3.selected.iter().map(ToString::to_string).collect();
    Ok(format!(
        "B=3 [{}] test Brier {:.4} <= {consistency} {alone:.4} (refit {alone_refit:.4})",
        names.join("+"),
        at3.test_brier
    ))
}

// ----------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("analytic scorer checks", analytic_scorer_checks),
        ("metric oracle equivalence", metric_oracles),
        ("multicalibration convergence", multicalibration_convergence),
        ("calibration ablation direction", calibration_ablation),
        ("multi-score dominance", multiscore_dominance),
        ("cost-effective boundaries", cost_effective_boundaries),
        ("exhaustive-search scale", exhaustive_scale),
        ("gradient correctness", gradient_check),
        ("end-to-end determinism", end_to_end_determinism),
        ("budget-curve shape", budget_curve_shape),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.2} s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.2} s): {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
