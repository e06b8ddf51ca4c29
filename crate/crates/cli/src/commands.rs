//! One function per subcommand. Each reads its inputs from the output
//! directory, writes its artifacts there and returns a JSON summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use lvef_core::cohort::{read_cohort, read_echos, write_cohort, write_echos, write_exclusions, CohortExample, LvefClass, Split};
use lvef_core::ehr::{cohort_summary_stats, read_snapshots, write_snapshots};
use lvef_core::eval::EvalReport;
use lvef_core::explain::{dependence_data, display_label, global_importance, stability_from_shap, ShapMatrix};
use lvef_core::features::{FeatureMatrix, Modality, ModalitySubset};
use lvef_core::gbt::{load_model, save_model, GbtModel};
use lvef_core::pipeline::{
    assemble_matrix, build_cohort, ecg_feature_names, ecg_features, evaluate_split, model_columns, par_map,
    snapshot_index, train_modality, validation_thresholds, EhrEncoder, SplitData,
};
use lvef_core::signal::io::{read_meta, read_record, read_twelve_lead, sidecar_path, write_record, write_twelve_lead};
use lvef_core::signal::{preprocess_record, LeadQuality};
use lvef_core::synth::{default_profiles, generate_cohort};
use lvef_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Config;
use crate::error::CliError;

/// Artifact locations under the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    fn dir(&self, name: &str) -> Result<PathBuf, CliError> {
        let d = self.root.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    pub fn records(&self, cfg: &Config) -> PathBuf {
        cfg.inputs.records_dir.clone().unwrap_or_else(|| self.root.join("synth/records"))
    }

    pub fn echos(&self, cfg: &Config) -> PathBuf {
        cfg.inputs.echos.clone().unwrap_or_else(|| self.root.join("synth/echos.jsonl"))
    }

    pub fn snapshots(&self, cfg: &Config) -> PathBuf {
        cfg.inputs.snapshots.clone().unwrap_or_else(|| self.root.join("synth/snapshots.jsonl"))
    }

    pub fn preprocessed(&self) -> PathBuf {
        self.root.join("preprocessed")
    }

    pub fn ecg_features(&self) -> PathBuf {
        self.root.join("features/ecg_features.csv")
    }

    pub fn cohort(&self) -> PathBuf {
        self.root.join("cohort/cohort.csv")
    }

    pub fn matrix(&self) -> PathBuf {
        self.root.join("cohort/features.csv")
    }

    pub fn model(&self, m: ModalitySubset) -> PathBuf {
        self.root.join(format!("models/{}.json", m.as_str()))
    }

    pub fn eval(&self, split: Split, m: ModalitySubset) -> PathBuf {
        self.root.join(format!("eval/{}_{}.json", cohort_name(split), m.as_str()))
    }

    pub fn explain(&self, m: ModalitySubset) -> PathBuf {
        self.root.join("explain").join(m.as_str())
    }
}

fn cohort_name(split: Split) -> &'static str {
    match split {
        Split::External => "external",
        _ => "internal",
    }
}

fn require(path: &Path, stage: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::UpstreamArtifactMissing {
            path: path.to_path_buf(),
            stage,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e).into())
}

/// CSV files in `dir`, sorted by name.
fn csv_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    out.sort();
    Ok(out)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub fn synth(cfg: &Config, layout: &Layout) -> Result<Value, CliError> {
    let s = &cfg.synth;
    let cohort = generate_cohort(s.n, s.prevalence, &default_profiles(), &s.options, cfg.seed)?;
    let dir = layout.dir("synth/records")?;
    let results = par_map(&cohort.records, cfg.threads, |plan| {
        let (record, _) = plan.render();
        write_record(&dir.join(format!("{}.csv", plan.meta.record_id)), &record, s.decimals)
    });
    results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let echos = layout.root.join("synth/echos.jsonl");
    let snapshots = layout.root.join("synth/snapshots.jsonl");
    write_echos(&echos, &cohort.echos)?;
    write_snapshots(&snapshots, &cohort.snapshots)?;
    info!("synthesized {} records and {} echos", cohort.records.len(), cohort.echos.len());
    Ok(json!({
        "records": cohort.records.len(),
        "echos": cohort.echos.len(),
        "patients": cohort.snapshots.len(),
        "artifacts": [path_str(&dir), path_str(&echos), path_str(&snapshots)],
    }))
}

pub fn preprocess(cfg: &Config, layout: &Layout) -> Result<Value, CliError> {
    let input = layout.records(cfg);
    require(&input, "synth")?;
    let files = csv_files(&input)?;
    let out = layout.dir("preprocessed")?;
    let results = par_map(&files, cfg.threads, |path| -> Result<(String, Vec<String>), CliError> {
        let record = read_record(path)?;
        let p = preprocess_record(&record, &cfg.preprocess)?;
        let id = record.meta.record_id.clone();
        write_twelve_lead(&out.join(format!("{id}.csv")), &p.ecg, cfg.synth.decimals)?;
        let degenerate = p
            .quality
            .iter()
            .filter(|(_, q)| **q == LeadQuality::Degenerate)
            .map(|(l, _)| l.name().to_string())
            .collect();
        Ok((id, degenerate))
    });
    let mut quality = BTreeMap::new();
    for r in results {
        let (id, bad) = r?;
        if !bad.is_empty() {
            quality.insert(id, bad);
        }
    }
    let qpath = out.join("degenerate_leads.json");
    write_json(&qpath, &quality)?;
    info!("preprocessed {} records", files.len());
    Ok(json!({
        "records": files.len(),
        "records_with_degenerate_leads": quality.len(),
        "artifacts": [path_str(&out)],
    }))
}

pub fn extract(cfg: &Config, layout: &Layout) -> Result<Value, CliError> {
    let input = layout.preprocessed();
    require(&input, "preprocess")?;
    let files: Vec<PathBuf> = csv_files(&input)?;
    let rows = par_map(&files, cfg.threads, |path| -> Result<(String, Vec<f64>), CliError> {
        let ecg = read_twelve_lead(path)?;
        Ok((ecg.meta.record_id.clone(), ecg_features(&ecg, &cfg.features).values))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut m = FeatureMatrix::from_rows(ecg_feature_names(&cfg.features), Modality::Ecg, rows)?;
    m.provenance = cfg.provenance();
    layout.dir("features")?;
    let path = layout.ecg_features();
    m.write(&path)?;
    info!("extracted {} features for {} records", m.n_cols(), m.n_rows());
    Ok(json!({
        "records": m.n_rows(),
        "ecg_features": m.n_cols(),
        "artifacts": [path_str(&path)],
    }))
}

pub fn cohort(cfg: &Config, layout: &Layout) -> Result<Value, CliError> {
    let ecg_path = layout.ecg_features();
    require(&ecg_path, "extract")?;
    let echos_path = layout.echos(cfg);
    let snaps_path = layout.snapshots(cfg);
    require(&echos_path, "synth")?;
    require(&snaps_path, "synth")?;
    let metas = csv_files(&layout.preprocessed())?
        .iter()
        .map(|p| read_meta(&sidecar_path(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let echos = read_echos(&echos_path)?;
    let pairing = build_cohort(&metas, &echos, &cfg.cohort, cfg.seed)?;
    let dir = layout.dir("cohort")?;
    write_cohort(&layout.cohort(), &pairing.examples)?;
    write_exclusions(&dir.join("exclusions.csv"), &pairing.exclusions)?;

    let snapshots = snapshot_index(read_snapshots(&snaps_path)?);
    let encoder = EhrEncoder::fit(&pairing.examples, &snapshots, &cfg.features)?;
    encoder.vocab_dx.save(&dir.join("vocab_dx.json"))?;
    encoder.vocab_med.save(&dir.join("vocab_med.json"))?;
    let ecg = FeatureMatrix::read(&ecg_path)?;
    let ecg_rows: BTreeMap<String, Vec<f64>> = ecg
        .row_ids
        .iter()
        .zip(ecg.rows())
        .map(|(id, r)| (id.clone(), r.to_vec()))
        .collect();
    let mut m = assemble_matrix(&pairing.examples, &ecg.names(), &ecg_rows, &encoder, &snapshots)?;
    m.provenance = cfg.provenance();
    m.write(&layout.matrix())?;

    // descriptive statistics of the EHR block over the development cohort
    let dev: Vec<usize> = (0..pairing.examples.len())
        .filter(|&i| pairing.examples[i].split != Some(Split::External))
        .collect();
    let labels: Vec<LvefClass> = dev.iter().map(|&i| pairing.examples[i].label).collect();
    let ehr = m.select_modality(ModalitySubset::EhrOnly).select_rows(&dev);
    let summary_path = dir.join("ehr_summary.json");
    match cohort_summary_stats(&ehr, &labels) {
        Ok(t) => write_json(&summary_path, &t)?,
        Err(e) => log::warn!("no cohort summary: {e}"),
    }

    let mut splits: BTreeMap<&str, usize> = BTreeMap::new();
    let mut classes: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in &pairing.examples {
        *splits.entry(ex.split.map_or("none", Split::as_str)).or_default() += 1;
        *classes.entry(ex.label.as_str()).or_default() += 1;
    }
    let exclusions: BTreeMap<&str, usize> = pairing
        .exclusion_counts()
        .into_iter()
        .map(|(r, n)| (r.as_str(), n))
        .collect();
    Ok(json!({
        "examples": pairing.examples.len(),
        "exclusions": exclusions,
        "splits": splits,
        "classes": classes,
        "features": m.n_cols(),
        "artifacts": [path_str(&layout.cohort()), path_str(&layout.matrix()), path_str(&summary_path)],
    }))
}

fn load_inputs(layout: &Layout) -> Result<(FeatureMatrix, Vec<CohortExample>), CliError> {
    require(&layout.matrix(), "cohort")?;
    require(&layout.cohort(), "cohort")?;
    Ok((FeatureMatrix::read(&layout.matrix())?, read_cohort(&layout.cohort())?))
}

#[derive(Debug, Serialize, Deserialize)]
struct Thresholds {
    thresholds: Vec<f64>,
    provenance: BTreeMap<String, String>,
}

fn thresholds_path(model: &Path) -> PathBuf {
    model.with_extension("thresholds.json")
}

pub fn train(cfg: &Config, layout: &Layout, modalities: &[ModalitySubset]) -> Result<Value, CliError> {
    let (x, examples) = load_inputs(layout)?;
    let mut out = Vec::new();
    for &m in modalities {
        let mut model = train_modality(&x, &examples, m, &cfg.gbt_params())?;
        model.provenance = cfg.provenance();
        let path = layout.model(m);
        layout.dir("models")?;
        save_model(&model, &path)?;
        let thresholds = validation_thresholds(&model, &x, &examples)?;
        write_json(
            &thresholds_path(&path),
            &Thresholds {
                thresholds: thresholds.clone(),
                provenance: cfg.provenance(),
            },
        )?;
        info!("trained {} with {} rounds", m.as_str(), model.n_rounds());
        out.push(json!({
            "modality": m.as_str(),
            "features": model.n_features(),
            "rounds": model.n_rounds(),
            "best_round": model.best_round,
            "thresholds": thresholds,
            "artifacts": [path_str(&path)],
        }));
    }
    Ok(json!({ "models": out }))
}

fn load_trained(path: &Path, x: &FeatureMatrix, examples: &[CohortExample]) -> Result<(GbtModel, Vec<f64>), CliError> {
    require(path, "train")?;
    let model = load_model(path)?;
    let tp = thresholds_path(path);
    let thresholds = if tp.exists() {
        read_json::<Thresholds>(&tp)?.thresholds
    } else {
        validation_thresholds(&model, x, examples)?
    };
    Ok((model, thresholds))
}

pub fn evaluate(
    cfg: &Config,
    layout: &Layout,
    modalities: &[ModalitySubset],
    split: Split,
    model_path: Option<&Path>,
) -> Result<Value, CliError> {
    let (x, examples) = load_inputs(layout)?;
    if !examples.iter().any(|e| e.split == Some(split)) {
        return Err(CliError::Runtime(format!("the {} cohort is empty", cohort_name(split))));
    }
    let mut out = Vec::new();
    for &m in modalities {
        let path = model_path.map_or_else(|| layout.model(m), Path::to_path_buf);
        let (model, thresholds) = load_trained(&path, &x, &examples)?;
        let mut report = evaluate_split(&model, &x, &examples, split, &thresholds, &cfg.bootstrap(), m)?;
        report.provenance = cfg.provenance();
        let rp = layout.eval(split, m);
        layout.dir("eval")?;
        report.write_json(&rp)?;
        let roc = rp.with_extension("roc.csv");
        report.write_roc_csv(&roc)?;
        out.push(json!({
            "modality": m.as_str(),
            "cohort": report.cohort.as_str(),
            "n_examples": report.n_examples,
            "auroc": report.classes.iter().map(|c| (c.class.as_str(), c.auroc.point)).collect::<BTreeMap<_, _>>(),
            "artifacts": [path_str(&rp), path_str(&roc)],
        }));
    }
    Ok(json!({ "reports": out }))
}

pub fn explain(cfg: &Config, layout: &Layout, modalities: &[ModalitySubset]) -> Result<Value, CliError> {
    let (x, examples) = load_inputs(layout)?;
    let e = &cfg.explain;
    let mut out = Vec::new();
    for &m in modalities {
        let (model, _) = load_trained(&layout.model(m), &x, &examples)?;
        let test = SplitData::new(&model_columns(&model, &x)?, &examples, Split::Test);
        let dir = layout.explain(m);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut top = BTreeMap::new();
        for class in LvefClass::ALL {
            let shap = ShapMatrix::compute(&model, &test.x, class.index())?;
            let name = class.as_str();
            let written = if e.display_labels { shap.with_display_labels() } else { shap.clone() };
            written.write(&dir.join(format!("shap_{name}.csv")))?;
            let importance = global_importance(&shap)?;
            write_json(&dir.join(format!("importance_{name}.json")), &importance)?;
            let mut stability = stability_from_shap(&shap, e.resamples, e.top_k, cfg.seed, true)?;
            stability.provenance = cfg.provenance();
            write_json(&dir.join(format!("stability_{name}.json")), &stability)?;
            let mut dependence = Vec::new();
            for imp in importance.iter().take(e.dependence_features) {
                let j = test.x.column_index(&imp.feature).expect("model column");
                let d = dependence_data(&test.x.column(j), &shap.column(j));
                dependence.push(json!({
                    "feature": imp.feature,
                    "label": display_label(&imp.feature).0,
                    "data": d.ok(),
                }));
            }
            write_json(&dir.join(format!("dependence_{name}.json")), &dependence)?;
            top.insert(
                name,
                importance.iter().take(e.top_k).map(|i| i.feature.clone()).collect::<Vec<_>>(),
            );
        }
        out.push(json!({
            "modality": m.as_str(),
            "rows": test.x.n_rows(),
            "top_features": top,
            "artifacts": [path_str(&dir)],
        }));
    }
    Ok(json!({ "explanations": out }))
}

fn fmt_estimate(e: &lvef_core::eval::Estimate) -> String {
    if e.point.is_nan() {
        "n/a".into()
    } else {
        format!("{:.3} [{:.3}-{:.3}]", e.point, e.lo, e.hi)
    }
}

/// Collates evaluation reports into discrimination, operating-point,
/// external and binary-cutoff tables.
pub fn report(_cfg: &Config, layout: &Layout) -> Result<Value, CliError> {
    let mut reports: Vec<(Split, EvalReport)> = Vec::new();
    for split in [Split::Test, Split::External] {
        for m in ModalitySubset::ALL {
            let p = layout.eval(split, m);
            if p.exists() {
                reports.push((split, EvalReport::read_json(&p)?));
            }
        }
    }
    if reports.is_empty() {
        return Err(CliError::UpstreamArtifactMissing {
            path: layout.root.join("eval"),
            stage: "evaluate",
        });
    }
    let mut md = String::new();
    let mut tables = serde_json::Map::new();
    let sections = [
        ("discrimination_internal", Split::Test, "AUROC, internal test"),
        ("discrimination_external", Split::External, "AUROC, temporal external"),
    ];
    for (key, split, title) in sections {
        let rows: Vec<&EvalReport> = reports.iter().filter(|r| r.0 == split).map(|r| &r.1).collect();
        if rows.is_empty() {
            continue;
        }
        md.push_str(&format!("## {title}\n\n| modality | severe | moderate | mild | normal |\n|---|---|---|---|---|\n"));
        let mut t = Vec::new();
        for r in &rows {
            let cells: Vec<String> = LvefClass::ALL
                .iter()
                .map(|c| r.class(*c).map_or("n/a".into(), |cr| fmt_estimate(&cr.auroc)))
                .collect();
            md.push_str(&format!("| {} | {} |\n", r.modality.as_str(), cells.join(" | ")));
            t.push(json!({ "modality": r.modality, "auroc": r.classes.iter().map(|c| (c.class.as_str(), &c.auroc)).collect::<BTreeMap<_, _>>() }));
        }
        md.push('\n');
        tables.insert(key.into(), Value::Array(t));
    }

    md.push_str("## Operating points, internal test\n\n| modality | class | threshold | F1 | sensitivity | specificity |\n|---|---|---|---|---|---|\n");
    let mut ops = Vec::new();
    for (_, r) in reports.iter().filter(|r| r.0 == Split::Test) {
        for c in &r.classes {
            md.push_str(&format!(
                "| {} | {} | {:.4} | {} | {} | {} |\n",
                r.modality.as_str(),
                c.class.as_str(),
                c.threshold,
                fmt_estimate(&c.f1),
                fmt_estimate(&c.sensitivity),
                fmt_estimate(&c.specificity)
            ));
            ops.push(json!({
                "modality": r.modality, "class": c.class, "threshold": c.threshold,
                "f1": c.f1, "sensitivity": c.sensitivity, "specificity": c.specificity,
            }));
        }
    }
    md.push('\n');
    tables.insert("operating_points".into(), Value::Array(ops));

    md.push_str("## LVEF < 50 % binary AUROC\n\n| cohort | modality | AUROC |\n|---|---|---|\n");
    let mut bin = Vec::new();
    for (split, r) in &reports {
        let cell = r.binary_auc_50.as_ref().map_or("n/a".into(), fmt_estimate);
        md.push_str(&format!("| {} | {} | {} |\n", cohort_name(*split), r.modality.as_str(), cell));
        bin.push(json!({ "cohort": r.cohort, "modality": r.modality, "auroc": r.binary_auc_50 }));
    }
    tables.insert("binary_lvef_below_50".into(), Value::Array(bin));

    let jp = layout.root.join("report.json");
    let mp = layout.root.join("report.md");
    write_json(&jp, &Value::Object(tables))?;
    fs::write(&mp, md).map_err(|e| Error::io(&mp, e))?;
    let used: BTreeSet<String> = reports.iter().map(|(s, r)| format!("{}_{}", cohort_name(*s), r.modality.as_str())).collect();
    Ok(json!({ "reports": used, "artifacts": [path_str(&jp), path_str(&mp)] }))
}
