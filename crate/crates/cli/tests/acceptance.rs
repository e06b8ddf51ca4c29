//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail. An optional argument selects criteria whose name
//! contains it.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use lvef_core::cohort::{LvefClass, Split, SplitFractions};
use lvef_core::ehr::{chi_square, kruskal_wallis};
use lvef_core::eval::{auroc_ovr, select_f1_threshold};
use lvef_core::explain::{stability_from_shap, tree_shap, ShapMatrix};
use lvef_core::features::{FeatureMatrix, Modality, ModalitySubset};
use lvef_core::gbt::{mlogloss, softmax, train, GbtModel, GbtParams, TreeNode, MODEL_FORMAT, MODEL_VERSION};
use lvef_core::pipeline::{
    assemble_matrix, build_cohort, ecg_feature_names, model_columns, par_map, record_features, snapshot_index,
    train_modality, CohortConfig, EhrEncoder, FeatureConfig, SplitData,
};
use lvef_core::signal::{derive_limb_leads, EcgMeta, EcgRecord, FilterBank, Lead, PreprocessConfig};
use lvef_core::synth::{default_profiles, generate_cohort, CohortOptions, Prevalence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria = [
        Criterion { name: "limb_lead_identities", limit: Duration::from_secs(5), run: limb_lead_identities },
        Criterion { name: "filter_response", limit: Duration::from_secs(10), run: filter_response },
        Criterion { name: "auroc_oracle", limit: Duration::from_secs(30), run: auroc_oracle },
        Criterion { name: "f1_threshold_oracle", limit: Duration::from_secs(30), run: f1_threshold_oracle },
        Criterion { name: "treeshap_exactness", limit: Duration::from_secs(120), run: treeshap_exactness },
        Criterion { name: "gbt_optimization", limit: Duration::from_secs(60), run: gbt_optimization },
        Criterion { name: "stats_oracles", limit: Duration::from_secs(5), run: stats_oracles },
        Criterion { name: "stability_degenerate", limit: Duration::from_secs(60), run: stability_degenerate },
        Criterion { name: "cli_determinism", limit: Duration::from_secs(300), run: cli_determinism },
        Criterion { name: "feature_throughput", limit: Duration::from_secs(60), run: feature_throughput },
        Criterion { name: "table1_structure", limit: Duration::from_secs(600), run: table1_structure },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.as_deref().map_or(true, |f| c.name.contains(f))) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} limit", c.limit)),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} {:<22} {:>8.2}s  {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn meta(id: usize) -> EcgMeta {
    EcgMeta {
        record_id: format!("R{id:06}"),
        patient_id: format!("P{id:06}"),
        acquired_at: Utc.with_ymd_and_hms(2022, 1, 1, 0, 0, 0).unwrap(),
        sampling_rate: 500.0,
    }
}

fn limb_lead_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for r in 0..1000 {
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let leads: BTreeMap<Lead, Vec<f64>> = Lead::MEASURED
            .iter()
            .map(|&l| (l, (0..5000).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let ecg = derive_limb_leads(&EcgRecord { meta: meta(r), leads }).map_err(|e| e.to_string())?;
        let amp = ecg.leads.values().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let (i, ii, iii) = (ecg.lead(Lead::I), ecg.lead(Lead::II), ecg.lead(Lead::III));
        let (avr, avl, avf) = (ecg.lead(Lead::AVR), ecg.lead(Lead::AVL), ecg.lead(Lead::AVF));
        for t in 0..i.len() {
            let e1 = (i[t] + iii[t] - ii[t]).abs();
            let e2 = (avr[t] + avl[t] + avf[t]).abs();
            worst = worst.max(e1.max(e2) / amp);
        }
    }
    check(worst <= 1e-12, format!("worst residual {worst:.2e} x max amplitude over 1000 records"))
}

/// Amplitude of a sinusoid from the RMS of a whole number of cycles.
fn amplitude(x: &[f64]) -> f64 {
    (2.0 * x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
    (0..n).map(|t| (2.0 * PI * freq * t as f64 / fs).sin()).collect()
}

fn filter_response() -> Outcome {
    let fs = 500.0;
    let cfg = PreprocessConfig::default();
    let bank = FilterBank::new(&cfg, fs).map_err(|e| e.to_string())?;
    let n = 5000;
    let mid = 1000..4000;

    let dc_out = bank.apply(&vec![1.0; n]);
    let dc_gain = dc_out[mid.clone()].iter().fold(0.0f64, |m, v| m.max(v.abs()));

    // Analog order-n Butterworth high-pass magnitude at prewarped frequencies.
    let butter = |f: f64| {
        let ratio = (PI * cfg.highpass_cutoff / fs).tan() / (PI * f / fs).tan();
        1.0 / (1.0 + ratio.powi(2 * cfg.filter_order as i32)).sqrt()
    };
    let single = amplitude(&bank.highpass.filter_steady(&sine(10.0, fs, n))[mid.clone()]);
    let single_err = (single / butter(10.0) - 1.0).abs();
    let chain = amplitude(&bank.apply(&sine(10.0, fs, n))[mid.clone()]);
    let chain_err = (chain / butter(10.0).powi(2) - 1.0).abs();
    let at_cutoff = amplitude(&bank.highpass.filter_steady(&sine(cfg.highpass_cutoff, fs, 20000))[5000..15000]);
    let cutoff_err = (at_cutoff / butter(cfg.highpass_cutoff) - 1.0).abs();

    let notch = amplitude(&bank.apply(&sine(cfg.powerline_freq, fs, n))[mid]);
    let notch_db = -20.0 * notch.log10();
    check(
        dc_gain < 0.01 && single_err < 0.02 && chain_err < 0.02 && cutoff_err < 0.02 && notch_db >= 20.0,
        format!(
            "DC gain {dc_gain:.1e}; 10 Hz gain {single:.5} vs {:.5} (rel {single_err:.1e}), chain rel {chain_err:.1e}; \
             cutoff rel {cutoff_err:.1e}; {} Hz attenuation {notch_db:.1} dB",
            butter(10.0),
            cfg.powerline_freq
        ),
    )
}

fn pair_count_auc(scores: &[f64], labels: &[usize], k: usize) -> f64 {
    let mut wins = 0.0;
    let mut p = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != k {
            continue;
        }
        p += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == k {
                continue;
            }
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / (p as f64 * (labels.len() - p) as f64)
}

/// Random four-class scores on a coarse grid so that ties are common.
fn random_set(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<usize>) {
    let n = rng.gen_range(8..=max_n);
    let levels = rng.gen_range(3..50) as f64;
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    let scores = labels
        .iter()
        .map(|&l| ((rng.gen::<f64>() + 0.1 * l as f64) * levels).round() / levels)
        .collect();
    (scores, labels)
}

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut compared, mut mismatches) = (0, 0);
    for _ in 0..200 {
        let (scores, labels) = random_set(&mut rng, 500);
        for k in 0..4 {
            let present = labels.iter().filter(|&&l| l == k).count();
            if present == 0 || present == labels.len() {
                continue;
            }
            compared += 1;
            let got = auroc_ovr(&scores, &labels, k).map_err(|e| e.to_string())?;
            if got != pair_count_auc(&scores, &labels, k) {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("{compared} class comparisons, {mismatches} differ (|delta| > 0)"))
}

fn exhaustive_f1_threshold(scores: &[f64], labels: &[usize], k: usize) -> (f64, f64) {
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0);
    let f1_at = |t: f64| {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= t, l == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let mut best = (f64::NEG_INFINITY, -1.0);
    for t in candidates {
        let f = f1_at(t);
        if f > best.1 || (f == best.1 && t > best.0) {
            best = (t, f);
        }
    }
    best
}

fn f1_threshold_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut compared, mut mismatches) = (0, 0);
    for _ in 0..200 {
        let (scores, labels) = random_set(&mut rng, 1000);
        for k in 0..4 {
            if !labels.contains(&k) {
                continue;
            }
            compared += 1;
            let got = select_f1_threshold(&scores, &labels, k).map_err(|e| e.to_string())?;
            if got != exhaustive_f1_threshold(&scores, &labels, k).0 {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("{compared} class comparisons, {mismatches} differ"))
}

fn random_tree(rng: &mut ChaCha8Rng, depth: usize, n_features: usize) -> TreeNode {
    if depth == 0 || rng.gen_bool(0.2) {
        return TreeNode::Leaf {
            weight: rng.gen_range(-1.0..1.0),
            cover: rng.gen_range(1.0..20.0),
        };
    }
    let left = random_tree(rng, depth - 1, n_features);
    let right = random_tree(rng, depth - 1, n_features);
    TreeNode::Split {
        feature: rng.gen_range(0..n_features),
        threshold: rng.gen_range(-1.0..1.0),
        default_left: rng.gen_bool(0.5),
        gain: 1.0,
        cover: left.cover() + right.cover(),
        left: Box::new(left),
        right: Box::new(right),
    }
}

/// Expected tree output when only the features in `known` are observed;
/// unobserved splits average the children by cover.
fn conditional(node: &TreeNode, x: &[f64], known: u32) -> f64 {
    match node {
        TreeNode::Leaf { weight, .. } => *weight,
        TreeNode::Split { feature, threshold, default_left, left, right, .. } => {
            if known & (1 << feature) != 0 {
                let v = x[*feature];
                let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                conditional(if go_left { left } else { right }, x, known)
            } else {
                (left.cover() * conditional(left, x, known) + right.cover() * conditional(right, x, known))
                    / node.cover()
            }
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Shapley values by enumerating every coalition.
fn coalition_shapley(trees: &[&TreeNode], x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let value = |s: u32| trees.iter().map(|t| conditional(t, x, s)).sum::<f64>();
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        for s in 0u32..(1 << m) {
            if s & (1 << i) != 0 {
                continue;
            }
            let size = s.count_ones() as usize;
            let w = factorial(size) * factorial(m - size - 1) / factorial(m);
            *p += w * (value(s | (1 << i)) - value(s));
        }
    }
    phi
}

fn random_model(rng: &mut ChaCha8Rng) -> GbtModel {
    let n_features = rng.gen_range(1..=6);
    let k = rng.gen_range(2..=4);
    let rounds = rng.gen_range(1..=4);
    GbtModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        params: GbtParams { n_classes: k, ..GbtParams::default() },
        base_score: (0..k).map(|_| rng.gen_range(-2.0..0.0)).collect(),
        feature_names: (0..n_features).map(|j| format!("f{j}")).collect(),
        trees: (0..rounds * k).map(|_| random_tree(rng, 3, n_features)).collect(),
        history: Vec::new(),
        best_round: None,
        provenance: BTreeMap::new(),
    }
}

fn toy_classification(seed: u64, n: usize, n_features: usize) -> (FeatureMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let row: Vec<f64> = (0..n_features)
            .map(|_| if rng.gen_bool(0.05) { f64::NAN } else { rng.gen_range(-2.0..2.0) })
            .collect();
        let signal = row[0].max(-2.0) + 0.5 * row[1 % n_features].abs() + rng.gen_range(-0.7..0.7);
        y.push(((signal + 2.0).clamp(0.0, 3.999)) as usize);
        rows.push((format!("x{i}"), row));
    }
    let names = (0..n_features).map(|j| format!("f{j}")).collect();
    (FeatureMatrix::from_rows(names, Modality::Ecg, rows).unwrap(), y)
}

fn treeshap_exactness() -> Outcome {
    // local accuracy on a trained model
    let (x, y) = toy_classification(4, 1000, 8);
    let params = GbtParams { n_rounds: 30, max_depth: 5, early_stopping_rounds: None, ..GbtParams::default() };
    let model = train(&x, &y, &params, None).map_err(|e| e.to_string())?;
    let mut worst_local = 0.0f64;
    for row in x.rows() {
        let margin = model.predict_margin(row).map_err(|e| e.to_string())?;
        for (k, &mk) in margin.iter().enumerate() {
            let (phi, base) = tree_shap(&model, row, k).map_err(|e| e.to_string())?;
            worst_local = worst_local.max((phi.iter().sum::<f64>() + base - mk).abs());
        }
    }

    // coalition enumeration on random ensembles
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_brute = 0.0f64;
    for _ in 0..50 {
        let model = random_model(&mut rng);
        let m = model.n_features();
        for _ in 0..5 {
            let row: Vec<f64> = (0..m)
                .map(|_| if rng.gen_bool(0.15) { f64::NAN } else { rng.gen_range(-1.2..1.2) })
                .collect();
            for k in 0..model.n_classes() {
                let trees: Vec<&TreeNode> = model.class_trees(k).collect();
                let want = coalition_shapley(&trees, &row);
                let (got, _) = tree_shap(&model, &row, k).map_err(|e| e.to_string())?;
                for (a, b) in got.iter().zip(&want) {
                    worst_brute = worst_brute.max((a - b).abs());
                }
            }
        }
    }
    check(
        worst_local < 1e-6 && worst_brute <= 1e-8,
        format!(
            "local accuracy max residual {worst_local:.1e} over 1000 rows x 4 classes; \
             coalition max |delta| {worst_brute:.1e} on 50 ensembles"
        ),
    )
}

fn gbt_optimization() -> Outcome {
    let (x, y) = toy_classification(6, 600, 6);
    let params = GbtParams {
        n_rounds: 50,
        early_stopping_rounds: None,
        min_child_weight: 5.0,
        max_depth: 4,
        ..GbtParams::default()
    };
    let model = train(&x, &y, &params, None).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = model.history.iter().map(|h| h.train).collect();
    let monotone = losses.len() == 50 && losses.windows(2).all(|w| w[1] <= w[0]);

    // softmax cross-entropy gradient p - y against central differences
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_grad = 0.0f64;
    for _ in 0..200 {
        let margins: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let label = rng.gen_range(0..4);
        let loss = |m: &[f64]| mlogloss(&[softmax(m)], &[label]).unwrap();
        let p = softmax(&margins);
        for k in 0..4 {
            let h = 1e-6;
            let mut up = margins.clone();
            up[k] += h;
            let mut down = margins.clone();
            down[k] -= h;
            let fd = (loss(&up) - loss(&down)) / (2.0 * h);
            let g = p[k] - if k == label { 1.0 } else { 0.0 };
            worst_grad = worst_grad.max(((fd - g) / g).abs());
        }
    }

    // first-round leaves must equal -lr * sum(p - y) / (sum p(1-p) + lambda)
    let prior = softmax(&model.base_score);
    let mut worst_leaf = 0.0f64;
    for k in 0..4 {
        let tree = &model.trees[k];
        let mut groups: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        for (row, &label) in x.rows().zip(&y) {
            let w = tree.predict(row);
            let e = groups.entry(w.to_bits()).or_default();
            e.0 += prior[k] - if label == k { 1.0 } else { 0.0 };
            e.1 += prior[k] * (1.0 - prior[k]);
        }
        for (bits, (g, h)) in groups {
            let want = -g / (h + params.l2_lambda) * params.learning_rate;
            worst_leaf = worst_leaf.max((f64::from_bits(bits) - want).abs() / want.abs().max(1e-12));
        }
    }

    let mut min_cover = f64::INFINITY;
    for t in &model.trees {
        t.walk(&mut |n| {
            if let TreeNode::Leaf { cover, .. } = n {
                min_cover = min_cover.min(*cover);
            }
        });
    }
    check(
        monotone && worst_grad < 1e-5 && worst_leaf < 1e-9 && min_cover >= 5.0,
        format!(
            "mlogloss {:.4} -> {:.4} nonincreasing={monotone}; gradient rel err {worst_grad:.1e}; \
             round-1 leaf weight rel err {worst_leaf:.1e}; min leaf cover {min_cover:.2}",
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        ),
    )
}

fn stats_oracles() -> Outcome {
    let chi = chi_square(&[vec![10.0, 20.0], vec![20.0, 10.0]]).map_err(|e| e.to_string())?;
    let kw = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).map_err(|e| e.to_string())?;
    // hand-derived: chi2 = 4 * 5^2 / 15 = 20/3; H = 12/42 * (36 + 225)/3 - 21 = 27/7
    let chi_want = 20.0 / 3.0;
    let kw_want = 27.0 / 7.0;
    check(
        (chi.statistic - 6.667).abs() <= 0.001
            && (kw.h - 3.857).abs() <= 0.001
            && (chi.statistic - chi_want).abs() < 1e-9
            && (kw.h - kw_want).abs() < 1e-9,
        format!("chi2 {:.6} (df {}), H {:.6} (df {})", chi.statistic, chi.df, kw.h, kw.df),
    )
}

fn stability_degenerate() -> Outcome {
    let (x, y) = toy_classification(8, 400, 15);
    let params = GbtParams { n_rounds: 30, early_stopping_rounds: None, ..GbtParams::default() };
    let model = train(&x, &y, &params, None).map_err(|e| e.to_string())?;
    let shap = ShapMatrix::compute(&model, &x, 0).map_err(|e| e.to_string())?;
    let fixed = stability_from_shap(&shap, 20, 10, 9, false).map_err(|e| e.to_string())?;
    let all_one = fixed.jaccard.iter().flatten().all(|&j| j == 1.0) && fixed.min_jaccard == 1.0;
    let a = stability_from_shap(&shap, 20, 10, 9, true).map_err(|e| e.to_string())?.to_json();
    let b = stability_from_shap(&shap, 20, 10, 9, true).map_err(|e| e.to_string())?.to_json();
    let c = stability_from_shap(&shap, 20, 10, 10, true).map_err(|e| e.to_string())?.to_json();
    check(
        all_one && a == b && a != c,
        format!(
            "{}x{} Jaccard matrix all 1.0: {all_one}; B=20 top-10 report byte-identical under a fixed seed: {}",
            fixed.jaccard.len(),
            fixed.jaccard.len(),
            a == b
        ),
    )
}

const CLI_CONFIG: &str = r#"
seed = 5
[synth]
n = 300
prevalence = { normal = 0.4, mild = 0.2, moderate = 0.2, severe = 0.2 }
[cohort]
external_cutoff = "2023-09-01T00:00:00Z"
[evaluation]
resamples = 200
[explain]
resamples = 20
"#;

fn cli_run(dir: &Path) -> Result<(), String> {
    fs::write(dir.join("config.toml"), CLI_CONFIG).map_err(|e| e.to_string())?;
    let stages: [&[&str]; 8] = [
        &["synth"],
        &["preprocess"],
        &["extract"],
        &["cohort"],
        &["train"],
        &["evaluate"],
        &["evaluate", "--cohort", "external"],
        &["explain"],
    ];
    for args in stages {
        let out = Command::new(env!("CARGO_BIN_EXE_lvef"))
            .arg("--config")
            .arg(dir.join("config.toml"))
            .arg("--out-dir")
            .arg(dir.join("out"))
            .args(args)
            .env("RUST_LOG", "error")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stdout)));
        }
    }
    Ok(())
}

fn cli_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli_run(a.path())?;
    cli_run(b.path())?;
    let mut compared = 0;
    let mut differing = Vec::new();
    for split in ["internal", "external"] {
        for m in ModalitySubset::ALL {
            for ext in ["json", "roc.csv"] {
                let rel = format!("eval/{split}_{}.{ext}", m.as_str());
                compared += 1;
                if fs::read(a.path().join("out").join(&rel)).ok() != fs::read(b.path().join("out").join(&rel)).ok() {
                    differing.push(rel);
                }
            }
            for class in LvefClass::ALL {
                for ext in ["csv", "json"] {
                    let rel = format!("explain/{}/shap_{}.{ext}", m.as_str(), class.as_str());
                    compared += 1;
                    let x = fs::read(a.path().join("out").join(&rel)).map_err(|e| format!("{rel}: {e}"))?;
                    if Some(x) != fs::read(b.path().join("out").join(&rel)).ok() {
                        differing.push(rel);
                    }
                }
            }
        }
    }
    check(
        differing.is_empty(),
        format!("{compared} EvalReport/ShapMatrix files compared across two runs, differing: {differing:?}"),
    )
}

fn feature_throughput() -> Outcome {
    let cohort = generate_cohort(1000, Prevalence::REFERENCE, &default_profiles(), &CohortOptions::default(), 12)
        .map_err(|e| e.to_string())?;
    let records: Vec<EcgRecord> = cohort.records.iter().take(1000).map(|p| p.render().0).collect();
    let pre = PreprocessConfig::default();
    let cfg = FeatureConfig::default();
    let start = Instant::now();
    let mut n_features = 0;
    for r in &records {
        n_features = record_features(r, &pre, &cfg).map_err(|e| e.to_string())?.len();
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        records.len() == 1000 && secs < 60.0,
        format!(
            "{} records x {n_features} clinical+ts features in {secs:.1}s single-threaded (excluding synthesis)",
            records.len()
        ),
    )
}

struct SeedResult {
    auroc: BTreeMap<ModalitySubset, f64>,
    n_severe: usize,
}

fn table1_seed(seed: u64, threads: usize) -> Result<SeedResult, String> {
    let err = |e: lvef_core::Error| e.to_string();
    let start = Instant::now();
    let synth = generate_cohort(5000, Prevalence::REFERENCE, &default_profiles(), &CohortOptions::default(), seed)
        .map_err(|e| e.to_string())?;
    let ccfg = CohortConfig {
        fractions: SplitFractions { train: 0.6, val: 0.15, test: 0.25 },
        ..CohortConfig::default()
    };
    let examples = build_cohort(&synth.ecg_metas(), &synth.echos, &ccfg, seed).map_err(err)?.examples;
    let snapshots = snapshot_index(synth.snapshots.clone());
    let cfg = FeatureConfig::default();
    let encoder = EhrEncoder::fit(&examples, &snapshots, &cfg).map_err(err)?;
    let used: BTreeSet<&str> = examples.iter().map(|e| e.ecg_record_id.as_str()).collect();
    let plans: Vec<_> = synth.records.iter().filter(|p| used.contains(p.meta.record_id.as_str())).collect();
    let pre = PreprocessConfig::default();
    let rows = par_map(&plans, threads, |p| {
        record_features(&p.render().0, &pre, &cfg).map(|v| (p.meta.record_id.clone(), v.values))
    });
    let rows: BTreeMap<String, Vec<f64>> = rows.into_iter().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let x = assemble_matrix(&examples, &ecg_feature_names(&cfg), &rows, &encoder, &snapshots).map_err(err)?;

    eprintln!("table1 seed {seed}: {} x {} matrix in {:.0?}", x.n_rows(), x.n_cols(), start.elapsed());
    let mut auroc = BTreeMap::new();
    let mut n_severe = 0;
    for subset in ModalitySubset::ALL {
        let start = Instant::now();
        let model = train_modality(&x, &examples, subset, &GbtParams { seed, ..GbtParams::default() }).map_err(err)?;
        let test = SplitData::new(&model_columns(&model, &x).map_err(err)?, &examples, Split::Test);
        let proba = model.predict_proba_matrix(&test.x).map_err(|e| e.to_string())?;
        let severe = LvefClass::Severe.index();
        let scores: Vec<f64> = proba.iter().map(|p| p[severe]).collect();
        n_severe = test.y.iter().filter(|&&l| l == severe).count();
        auroc.insert(subset, auroc_ovr(&scores, &test.y, severe).map_err(|e| e.to_string())?);
        eprintln!("table1 seed {seed}: {} {} rounds in {:.0?}", subset.as_str(), model.n_rounds(), start.elapsed());
    }
    Ok(SeedResult { auroc, n_severe })
}

fn table1_structure() -> Outcome {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in [1, 2, 3] {
        let r = table1_seed(seed, threads)?;
        let (mm, ecg, ehr) = (
            r.auroc[&ModalitySubset::Multimodal],
            r.auroc[&ModalitySubset::EcgOnly],
            r.auroc[&ModalitySubset::EhrOnly],
        );
        ok &= mm >= ecg && mm >= ehr && mm > 0.8;
        parts.push(format!(
            "seed {seed}: severe AUROC multimodal {mm:.3} ecg {ecg:.3} ehr {ehr:.3} ({} test positives)",
            r.n_severe
        ));
    }
    check(ok, parts.join("; "))
}
