//! The experiment pipeline behind each CLI command.
//!
//! Every command reads/writes artifacts in one output directory under
//! fixed names, and drops a manifest recording its config and the SHA-256
//! checksums of its inputs. All artifacts are reproducible byte-for-byte
//! from (config, seed); the per-attack timing files are the one deliberate
//! exception and live under their own names.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pharos_core::adv_train::{adv_train, AdvTrainConfig};
use pharos_core::attack::{
    attack_hag_indexed, attack_targeted_indexed, pgd_attack_indexed, read_adversarial,
    write_adversarial, AdvFileHeader, AdvResult, AttackMethod,
};
use pharos_core::data::{gen_synthetic, load_dataset, save_dataset, Dataset};
use pharos_core::hashcore::HashCode;
use pharos_core::model::{train_pairwise, HashNet, TrainConfig, TrainData, TrainOutcome};
use pharos_core::retrieval::{map_at_n, p_at_topn, pn_curve_csv, pr_curve, pr_curve_csv, Index, MetricsReport};
use pharos_core::semantics::{GroupedPool, LabelVector};
use pharos_core::{Error, Result};

use crate::config::ExperimentConfig;

/// Generated dataset artifact.
pub const DATASET_FILE: &str = "dataset.phf";
/// Baseline trained model artifact.
pub const MODEL_FILE: &str = "model.phm";
/// Adversarially trained model artifact.
pub const MODEL_ADV_FILE: &str = "model_adv.phm";

/// Adversarial-queries artifact for one attack tag.
pub fn adv_file(tag: &str) -> String {
    format!("adv_{tag}.pha")
}

/// Wall-clock timing sidecar for one attack tag (not byte-reproducible).
pub fn timing_file(tag: &str) -> String {
    format!("timing_{tag}.json")
}

/// Metrics artifact for one evaluation tag.
pub fn metrics_file(tag: &str) -> String {
    format!("metrics_{tag}.json")
}

/// Precision-recall curve artifact for one evaluation tag.
pub fn pr_file(tag: &str) -> String {
    format!("pr_{tag}.csv")
}

/// P@N curve artifact for one evaluation tag.
pub fn pn_file(tag: &str) -> String {
    format!("pn_{tag}.csv")
}

/// Aggregated comparison table (JSON form).
pub const REPORT_JSON: &str = "report.json";
/// Aggregated comparison table (CSV form).
pub const REPORT_CSV: &str = "report.csv";
/// MAP-with-timing table; depends on wall clocks, so excluded from the
/// byte-reproducibility guarantee.
pub const REPORT_TIMING_CSV: &str = "report_timing.csv";

/// One command's provenance record: its config and input checksums.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    /// input file name → SHA-256 hex digest
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let mut f = File::open(path)
        .map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: &[&str],
    outputs: &[String],
    summary: serde_json::Value,
) -> Result<()> {
    let mut checksums = BTreeMap::new();
    for name in inputs {
        checksums.insert((*name).to_string(), sha256_hex(&out.join(name))?);
    }
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config,
        inputs: checksums,
        outputs: outputs.to_vec(),
        summary,
    };
    write_json_pretty(&out.join(format!("{command}.manifest.json")), &manifest)
}

fn load_ds(out: &Path) -> Result<Dataset> {
    let path = out.join(DATASET_FILE);
    let mut r = BufReader::new(File::open(&path).map_err(|e| {
        Error::invalid(format!(
            "cannot open dataset {}: {e} (run gen-data first)",
            path.display()
        ))
    })?);
    load_dataset(&mut r)
}

fn load_model(path: &Path) -> Result<HashNet<f64>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        Error::invalid(format!(
            "cannot open model {}: {e} (run train first)",
            path.display()
        ))
    })?);
    HashNet::load(&mut r)
}

fn check_model_fits(net: &HashNet<f64>, ds: &Dataset, model_name: &str) -> Result<()> {
    if net.input_dim() != ds.dim() {
        return Err(Error::dimension(format!(
            "model {model_name} expects {}-dim inputs but {DATASET_FILE} has dim {}",
            net.input_dim(),
            ds.dim()
        )));
    }
    Ok(())
}

/// `gen-data`: synthesize the dataset and write `dataset.phf`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let ds = gen_synthetic(&cfg.dataset)?;
    let path = out.join(DATASET_FILE);
    let mut w = BufWriter::new(File::create(&path)?);
    save_dataset(&mut w, &ds)?;
    w.flush()?;
    write_manifest(
        out,
        "gen-data",
        serde_json::to_value(&cfg.dataset)?,
        &[],
        &[DATASET_FILE.to_string()],
        serde_json::json!({
            "rows": ds.n_rows(),
            "train": ds.train_indices.len(),
        }),
    )
}

fn train_split_data(ds: &Dataset) -> (Vec<f64>, Vec<LabelVector>) {
    let features = ds.split_features::<f64>(ds.train_indices.iter().copied());
    let labels = ds.split_labels(ds.train_indices.iter().copied());
    (features, labels)
}

fn check_trained(outcome: &TrainOutcome<f64>) -> Result<()> {
    if outcome.loss_trace.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid(
            "numerical failure: training loss diverged to a non-finite value",
        ));
    }
    Ok(())
}

fn save_model(net: &HashNet<f64>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    net.save(&mut w)?;
    w.flush()?;
    Ok(())
}

/// `train`: fit the baseline model on the recorded train split.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = load_ds(out)?;
    let (features, labels) = train_split_data(&ds);
    let data = TrainData::new(&features, &labels, ds.dim())?;
    let outcome = train_pairwise(data, cfg.model.bits, &cfg.model.hidden, &cfg.model.train)?;
    check_trained(&outcome)?;
    save_model(&outcome.net, &out.join(MODEL_FILE))?;
    write_manifest(
        out,
        "train",
        serde_json::to_value(&cfg.model)?,
        &[DATASET_FILE],
        &[MODEL_FILE.to_string()],
        serde_json::json!({
            "epochs": outcome.loss_trace.len(),
            "final_loss": outcome.loss_trace.last(),
        }),
    )
}

/// `advtrain`: fit the defended model with the adversarial objective.
pub fn cmd_advtrain(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = load_ds(out)?;
    let (features, labels) = train_split_data(&ds);
    let data = TrainData::new(&features, &labels, ds.dim())?;
    let train = TrainConfig {
        epochs: cfg.adv.epochs.unwrap_or(cfg.model.train.epochs),
        ..cfg.model.train.clone()
    };
    let adv_cfg = AdvTrainConfig {
        train,
        attack: cfg.attack.clone(),
        inner_steps: cfg.adv.inner_steps,
    };
    let outcome = adv_train(data, cfg.model.bits, &cfg.model.hidden, &adv_cfg)?;
    check_trained(&outcome)?;
    save_model(&outcome.net, &out.join(MODEL_ADV_FILE))?;
    write_manifest(
        out,
        "advtrain",
        serde_json::json!({
            "model": serde_json::to_value(&cfg.model)?,
            "attack": serde_json::to_value(&cfg.attack)?,
            "adv": serde_json::to_value(&cfg.adv)?,
        }),
        &[DATASET_FILE],
        &[MODEL_ADV_FILE.to_string()],
        serde_json::json!({
            "epochs": outcome.loss_trace.len(),
            "final_loss": outcome.loss_trace.last(),
        }),
    )
}

fn encode_split(
    net: &HashNet<f64>,
    ds: &Dataset,
    rows: impl Iterator<Item = usize>,
) -> Result<Vec<HashCode>> {
    net.encode_dataset(&ds.split_features::<f64>(rows))
}

/// `encode`: hash both splits with a trained model, emitting `.phc` codes
/// and their aligned `.phl` labels.
pub fn cmd_encode(_cfg: &ExperimentConfig, out: &Path, model_name: &str) -> Result<()> {
    let ds = load_ds(out)?;
    let net = load_model(&out.join(model_name))?;
    check_model_fits(&net, &ds, model_name)?;
    let pairs = [
        ("codes_db.phc", "labels_db.phl", ds.database_rows()),
        ("codes_query.phc", "labels_query.phl", ds.query_rows()),
    ];
    let mut outputs = Vec::new();
    for (code_name, label_name, rows) in pairs {
        let codes = encode_split(&net, &ds, rows.clone())?;
        let mut w = BufWriter::new(File::create(out.join(code_name))?);
        pharos_core::hashcore::write_codes(&mut w, &codes)?;
        w.flush()?;
        let labels = ds.split_labels(rows);
        let mut w = BufWriter::new(File::create(out.join(label_name))?);
        pharos_core::semantics::write_labels(&mut w, &labels)?;
        w.flush()?;
        outputs.push(code_name.to_string());
        outputs.push(label_name.to_string());
    }
    write_manifest(
        out,
        "encode",
        serde_json::json!({ "model": model_name, "bits": net.output_dim() }),
        &[DATASET_FILE, model_name],
        &outputs,
        serde_json::Value::Null,
    )
}

/// Wall-clock record for one attack run. `pharos_seconds` covers deriving
/// the per-query target codes from the already-encoded pool;
/// `encode_pool_seconds` is the shared cost of hashing the pool itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub attack: String,
    pub queries: usize,
    pub total_seconds: f64,
    pub encode_pool_seconds: f64,
    pub pharos_seconds: f64,
    /// pharos_seconds / total_seconds
    pub precompute_share: f64,
    pub seconds_per_sample: f64,
}

/// Per-query target codes, one entry per distinct query label set;
/// derivation runs in the worker pool.
fn target_codes(
    method: AttackMethod,
    pool_codes: &[HashCode],
    pool_labels: &[LabelVector],
    query_labels: &[LabelVector],
) -> Result<HashMap<Vec<u8>, HashCode>> {
    if method == AttackMethod::Hag {
        return Ok(HashMap::new());
    }
    let grouped = GroupedPool::build(pool_codes, pool_labels)?;
    let mut distinct: Vec<&LabelVector> = Vec::new();
    let mut seen: HashMap<&[u8], ()> = HashMap::new();
    for label in query_labels {
        if seen.insert(label.bits(), ()).is_none() {
            distinct.push(label);
        }
    }
    let derived: Vec<(Vec<u8>, HashCode)> = distinct
        .par_iter()
        .map(|label| {
            let code = match method {
                AttackMethod::AnchorTargeted => grouped.anchor(label)?,
                _ => grouped.pharos(label)?.code,
            };
            Ok((label.bits().to_vec(), code))
        })
        .collect::<Result<_>>()?;
    Ok(derived.into_iter().collect())
}

/// `attack`: perturb every query within the ε-ball and write the `.pha`
/// artifact plus a timing sidecar. Returns the per-sample results.
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    out: &Path,
    model_name: &str,
    tag: &str,
) -> Result<Vec<AdvResult<f64>>> {
    let ds = load_ds(out)?;
    let net = load_model(&out.join(model_name))?;
    check_model_fits(&net, &ds, model_name)?;
    let attack = &cfg.attack;
    attack.validate()?;

    let started = Instant::now();
    let pool_codes = encode_split(&net, &ds, ds.train_indices.iter().copied())?;
    let pool_labels = ds.split_labels(ds.train_indices.iter().copied());
    let query_labels = ds.split_labels(ds.query_rows());
    let encode_pool_seconds = started.elapsed().as_secs_f64();
    let pharos_started = Instant::now();
    let targets = target_codes(attack.method, &pool_codes, &pool_labels, &query_labels)?;
    let pharos_seconds = pharos_started.elapsed().as_secs_f64();

    let query_rows: Vec<usize> = ds.query_rows().collect();
    let results: Vec<AdvResult<f64>> = query_rows
        .par_iter()
        .enumerate()
        .map(|(i, &row)| {
            let x: Vec<f64> = ds.row(row).iter().map(|&v| v as f64).collect();
            match attack.method {
                AttackMethod::Hag => attack_hag_indexed(&net, &x, attack, i as u64),
                AttackMethod::AnchorTargeted => {
                    let anchor = &targets[query_labels[i].bits()];
                    attack_targeted_indexed(&net, &x, anchor, attack, i as u64)
                }
                _ => {
                    let pharos = &targets[query_labels[i].bits()];
                    pgd_attack_indexed(&net, &x, pharos, attack, i as u64)
                }
            }
        })
        .collect::<Result<_>>()?;
    let total_seconds = started.elapsed().as_secs_f64();

    if results
        .iter()
        .any(|r| r.x_adv.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::invalid(
            "numerical failure: attack produced a non-finite perturbation",
        ));
    }

    let header = AdvFileHeader {
        n: results.len() as u64,
        d: ds.dim() as u64,
        epsilon: attack.epsilon,
        eta: attack.eta,
        steps: attack.steps,
        margin: attack.margin,
        method: attack.method,
        seed: attack.seed,
    };
    let adv_name = adv_file(tag);
    let mut w = BufWriter::new(File::create(out.join(&adv_name))?);
    write_adversarial(&mut w, &header, &results)?;
    w.flush()?;

    let timing = TimingRecord {
        attack: tag.to_string(),
        queries: results.len(),
        total_seconds,
        encode_pool_seconds,
        pharos_seconds,
        precompute_share: pharos_seconds / total_seconds.max(f64::MIN_POSITIVE),
        seconds_per_sample: total_seconds / results.len().max(1) as f64,
    };
    write_json_pretty(&out.join(timing_file(tag)), &timing)?;

    write_manifest(
        out,
        &format!("attack_{tag}"),
        serde_json::to_value(attack)?,
        &[DATASET_FILE, model_name],
        &[adv_name],
        serde_json::json!({ "pool": "train-split", "queries": results.len() }),
    )?;
    Ok(results)
}

/// `eval`: rank each query against the database codes and write metrics
/// plus PR / P@N curves. `attack_tag` is `"clean"` or a previous attack's
/// tag; `tag` names the output files.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    model_name: &str,
    attack_tag: &str,
    tag: &str,
) -> Result<MetricsReport> {
    let ds = load_ds(out)?;
    let net = load_model(&out.join(model_name))?;
    check_model_fits(&net, &ds, model_name)?;

    let db_codes = encode_split(&net, &ds, ds.database_rows())?;
    let db_labels = ds.split_labels(ds.database_rows());
    let index = Index::build(db_codes, db_labels)?;

    let query_labels = ds.split_labels(ds.query_rows());
    let mut inputs = vec![DATASET_FILE.to_string(), model_name.to_string()];
    let query_codes = if attack_tag == "clean" {
        encode_split(&net, &ds, ds.query_rows())?
    } else {
        let adv_name = adv_file(attack_tag);
        let path = out.join(&adv_name);
        let mut r = BufReader::new(File::open(&path).map_err(|e| {
            Error::invalid(format!(
                "cannot open {}: {e} (run `attack` with --method {attack_tag} first)",
                path.display()
            ))
        })?);
        let (header, _rows, codes) = read_adversarial(&mut r)?;
        if header.d as usize != ds.dim() {
            return Err(Error::dimension(format!(
                "{adv_name} carries {}-dim samples but {DATASET_FILE} has dim {}",
                header.d,
                ds.dim()
            )));
        }
        if codes.len() != query_labels.len() {
            return Err(Error::dimension(format!(
                "{adv_name} holds {} samples but the query split has {}",
                codes.len(),
                query_labels.len()
            )));
        }
        if codes[0].len() != net.output_dim() {
            return Err(Error::dimension(format!(
                "{adv_name} codes have {} bits but model {model_name} emits {}",
                codes[0].len(),
                net.output_dim()
            )));
        }
        inputs.push(adv_name);
        codes
    };

    let report = map_at_n(
        &query_codes,
        &query_labels,
        &index,
        cfg.eval.topn,
        attack_tag,
        cfg.attack.seed,
    )?;
    write_json_pretty(&out.join(metrics_file(tag)), &report)?;

    let pr = pr_curve(&query_codes, &query_labels, &index)?;
    fs::write(out.join(pr_file(tag)), pr_curve_csv(&pr))?;
    let pn = p_at_topn(&query_codes, &query_labels, &index, &cfg.eval.pn_grid)?;
    fs::write(out.join(pn_file(tag)), pn_curve_csv(&pn))?;

    let input_names: Vec<&str> = inputs.iter().map(String::as_str).collect();
    write_manifest(
        out,
        &format!("eval_{tag}"),
        serde_json::json!({
            "model": model_name,
            "attack": attack_tag,
            "topn": cfg.eval.topn,
            "pn_grid": cfg.eval.pn_grid,
        }),
        &input_names,
        &[metrics_file(tag), pr_file(tag), pn_file(tag)],
        serde_json::json!({ "map": report.map }),
    )?;
    Ok(report)
}

/// One line of the comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    /// Evaluation tag (metrics file stem).
    pub tag: String,
    /// Attack the queries went through ("clean" for none).
    pub attack: String,
    pub map: f64,
    pub queries: usize,
    pub topn: usize,
}

/// The aggregated comparison table: clean rows first, then attacks by MAP
/// descending (strongest attack last).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// `report`: aggregate every `metrics_*.json` in the output directory.
pub fn cmd_report(out: &Path) -> Result<Report> {
    let mut names: Vec<String> = fs::read_dir(out)?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            (name.starts_with("metrics_") && name.ends_with(".json")).then_some(name)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::invalid(format!(
            "no metrics_*.json in {} (run eval first)",
            out.display()
        )));
    }

    let mut rows = Vec::with_capacity(names.len());
    for name in &names {
        let text = fs::read_to_string(out.join(name))?;
        let metrics: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{name}: bad metrics file: {e}")))?;
        let tag = name
            .trim_start_matches("metrics_")
            .trim_end_matches(".json")
            .to_string();
        rows.push(ReportRow {
            tag,
            attack: metrics.config.attack.clone(),
            map: metrics.map,
            queries: metrics.per_query_ap.len(),
            topn: metrics.config.topn,
        });
    }
    rows.sort_by(|a, b| {
        let clean_a = a.attack == "clean";
        let clean_b = b.attack == "clean";
        clean_b
            .cmp(&clean_a)
            .then(b.map.total_cmp(&a.map))
            .then(a.tag.cmp(&b.tag))
    });
    let report = Report { rows };

    write_json_pretty(&out.join(REPORT_JSON), &report)?;
    let mut csv = String::from("tag,attack,map,queries,topn\n");
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.tag, row.attack, row.map, row.queries, row.topn
        ));
    }
    fs::write(out.join(REPORT_CSV), csv)?;

    // Timing lives in its own table so the main report stays reproducible.
    let mut timing_csv = String::from("tag,map,seconds_per_sample,precompute_share\n");
    let mut have_timing = false;
    for row in &report.rows {
        let path = out.join(timing_file(&row.attack));
        if let Ok(text) = fs::read_to_string(&path) {
            let t: TimingRecord = serde_json::from_str(&text)
                .map_err(|e| Error::invalid(format!("{}: bad timing file: {e}", path.display())))?;
            timing_csv.push_str(&format!(
                "{},{},{},{}\n",
                row.tag, row.map, t.seconds_per_sample, t.precompute_share
            ));
            have_timing = true;
        }
    }
    if have_timing {
        fs::write(out.join(REPORT_TIMING_CSV), timing_csv)?;
    }

    let input_names: Vec<&str> = names.iter().map(String::as_str).collect();
    write_manifest(
        out,
        "report",
        serde_json::json!({ "metrics": names }),
        &input_names,
        &[REPORT_JSON.to_string(), REPORT_CSV.to_string()],
        serde_json::Value::Null,
    )?;
    Ok(report)
}
