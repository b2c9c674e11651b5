//! Consolidated reports: a JSON summary plus plot-ready CSV tables, built
//! only from persisted eval, transfer and training artifacts.
//!
//! Nothing here depends on wall-clock time or on where the artifacts live,
//! so two runs of the same config produce byte-identical report
//! directories.

use std::path::PathBuf;

use morphprobe_core::eval::{EvalReport, FilteredResult, IvOovReports, MICRO};
use serde::{Deserialize, Serialize};

use crate::artifacts::{read_artifact, read_json, to_json_bytes};
use crate::error::{Error, Result};
use crate::pipeline::{layer_dir, Pipeline, SelectivityRow, TransferResult, TASKS};

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::data("csv", e))?;
    }
    w.into_inner().map_err(|e| Error::data("csv", e.to_string()))
}

/// A CSV with a header row even when there are no records.
fn csv_with_header<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| Error::data("csv", e))?;
        return w.into_inner().map_err(|e| Error::data("csv", e.to_string()));
    }
    csv_bytes(rows)
}

#[derive(Debug, Serialize)]
struct LabelRow<'a> {
    set: &'a str,
    language: &'a str,
    layer: i64,
    task: &'a str,
    label: &'a str,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    support: u64,
    precision: f64,
    recall: f64,
    f1: f64,
}

#[derive(Debug, Serialize)]
struct IvOovRow<'a> {
    set: &'a str,
    language: &'a str,
    layer: i64,
    iv_tokens: u64,
    iv_f1: f64,
    oov_tokens: u64,
    oov_f1: f64,
    gap: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TransferRow<'a> {
    probe: &'a str,
    layer: i64,
    target_language: &'a str,
    label: &'a str,
    applicable: bool,
    f1: Option<f64>,
    support: Option<u64>,
}

#[derive(Debug, Serialize)]
struct FilterRow<'a> {
    name: &'a str,
    set: &'a str,
    language: &'a str,
    layer: i64,
    label: &'a str,
    matched_tokens: u64,
    support: u64,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    precision: f64,
    recall: f64,
    f1: f64,
    fn_with_additional_errors: u64,
    fp_with_additional_errors: u64,
}

#[derive(Debug, Serialize)]
struct CurveRow<'a> {
    set: &'a str,
    layer: i64,
    task: &'a str,
    epoch: usize,
    train_loss: f64,
    dev_loss: f64,
    selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub set: String,
    pub languages: Vec<String>,
    pub labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub set: String,
    pub layer: i64,
    pub target: String,
    pub applicable_labels: usize,
    pub micro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub config_digest: String,
    pub probe_kind: String,
    pub threshold: f64,
    pub layers: Vec<i64>,
    pub sets: Vec<SetSummary>,
    pub selectivity: Vec<SelectivityRow>,
    pub transfer: Vec<TransferSummary>,
    pub filters: Vec<FilteredResult>,
}

/// All report files, relative to the report directory, in a fixed order.
pub fn build(p: &Pipeline) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let cfg = &p.exp.config;
    let layers = p.layers();
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut selectivity = Vec::new();
    let mut label_reports: Vec<(String, String, EvalReport)> = Vec::new();
    let mut iv_oov: Vec<(String, String, IvOovReports)> = Vec::new();
    let mut filters: Vec<(String, String, String, i64, FilteredResult)> = Vec::new();
    let mut transfers: Vec<TransferResult> = Vec::new();
    let mut curves = Vec::new();
    let mut sets = Vec::new();

    for set in cfg.probe_sets() {
        let space = read_json::<morphprobe_core::labels::LabelSpace>(&p.labels_path(&set), "ingest")?;
        sets.push(SetSummary {
            set: set.clone(),
            languages: cfg.set_languages(&set),
            labels: space.len(),
        });
        for &layer in &layers {
            let rows: Vec<SelectivityRow> = read_json(&p.selectivity_path(&set, layer), "eval")?;
            selectivity.extend(rows);
            for task in TASKS {
                let record = p.read_record(&set, layer, task)?;
                for (epoch, (tr, dv)) in record.train_loss.iter().zip(&record.dev_loss).enumerate() {
                    curves.push((set.clone(), i64::from(layer.get()), task, epoch, *tr, *dv, epoch == record.selected_epoch));
                }
            }
            for lang in cfg.set_languages(&set) {
                for task in TASKS {
                    let path = p.eval_report_path(&set, layer, task, &lang);
                    let report: EvalReport = read_json(&path, "eval")?;
                    let name = format!("reports/{set}.{}.{}.{lang}.json", layer_dir(layer), task.as_str());
                    files.push((name.into(), to_json_bytes(&report)));
                    label_reports.push((set.clone(), lang.clone(), report));
                }
                let io: IvOovReports = read_json(&p.iv_oov_path(&set, layer, &lang), "eval")?;
                iv_oov.push((set.clone(), lang.clone(), io));
                let preds = read_artifact(&p.predictions_path(&set, layer, &lang), "eval")?;
                files.push((format!("predictions/{set}.{}.{lang}.jsonl", layer_dir(layer)).into(), preds));
                for f in cfg.filters.iter().filter(|f| f.set == set && f.language() == lang) {
                    let r: FilteredResult = read_json(&p.filter_path(&set, layer, &f.name), "eval")?;
                    filters.push((f.name.clone(), set.clone(), lang.clone(), i64::from(layer.get()), r));
                }
            }
            for t in &cfg.transfer {
                transfers.push(read_json(&p.transfer_path(&set, layer, &t.code), "transfer")?);
            }
        }
    }

    let label_rows: Vec<LabelRow> = label_reports
        .iter()
        .flat_map(|(set, lang, r)| {
            r.labels.iter().map(move |l| LabelRow {
                set,
                language: lang,
                layer: r.meta.layer,
                task: r.meta.task.as_str(),
                label: &l.label,
                tp: l.tp,
                fp: l.fp,
                fn_: l.fn_,
                support: l.support,
                precision: l.precision,
                recall: l.recall,
                f1: l.f1,
            })
        })
        .collect();
    let iv_rows: Vec<IvOovRow> = iv_oov
        .iter()
        .map(|(set, lang, r)| IvOovRow {
            set,
            language: lang,
            layer: r.iv.meta.layer,
            iv_tokens: r.iv.tokens,
            iv_f1: r.iv.micro.f1,
            oov_tokens: r.oov.tokens,
            oov_f1: r.oov.micro.f1,
            gap: r.gap,
        })
        .collect();
    let transfer_rows: Vec<TransferRow> = transfers
        .iter()
        .flat_map(|t| {
            t.cells.iter().map(move |c| TransferRow {
                probe: &c.probe,
                layer: t.layer,
                target_language: &c.target_language,
                label: &c.label,
                applicable: c.applicable,
                f1: c.f1,
                support: c.support,
            })
        })
        .collect();
    let filter_rows: Vec<FilterRow> = filters
        .iter()
        .map(|(name, set, language, layer, r)| FilterRow {
            name,
            set,
            language,
            layer: *layer,
            label: &r.label,
            matched_tokens: r.matched_tokens,
            support: r.support,
            tp: r.tp,
            fp: r.fp,
            fn_: r.fn_,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            fn_with_additional_errors: r.false_negative_co_errors.with_additional_errors,
            fp_with_additional_errors: r.false_positive_co_errors.with_additional_errors,
        })
        .collect();
    let curve_rows: Vec<CurveRow> = curves
        .iter()
        .map(|(set, layer, task, epoch, tr, dv, sel)| CurveRow {
            set,
            layer: *layer,
            task: task.as_str(),
            epoch: *epoch,
            train_loss: *tr,
            dev_loss: *dv,
            selected: *sel,
        })
        .collect();

    let summary = Summary {
        name: cfg.name.clone(),
        config_digest: p.exp.digest.clone(),
        probe_kind: cfg.probe.tag(),
        threshold: cfg.threshold,
        layers: layers.iter().map(|l| i64::from(l.get())).collect(),
        sets,
        transfer: transfers
            .iter()
            .map(|t| TransferSummary {
                set: t.set.clone(),
                layer: t.layer,
                target: t.target.clone(),
                applicable_labels: t.cells.iter().filter(|c| c.applicable && c.label != MICRO).count(),
                micro_f1: t.cells.iter().find(|c| c.label == MICRO).and_then(|c| c.f1),
            })
            .collect(),
        filters: filters.iter().map(|f| f.4.clone()).collect(),
        selectivity,
    };

    let mut tables = vec![
        ("summary.json".into(), to_json_bytes(&summary)),
        ("selectivity.csv".into(), csv_bytes(&summary.selectivity)?),
        ("labels.csv".into(), csv_bytes(&label_rows)?),
        ("iv_oov.csv".into(), csv_bytes(&iv_rows)?),
        (
            "transfer.csv".into(),
            csv_with_header(&["probe", "layer", "target_language", "label", "applicable", "f1", "support"], &transfer_rows)?,
        ),
        (
            "filters.csv".into(),
            csv_with_header(&["name", "set", "language", "layer", "label"], &filter_rows)?,
        ),
        ("training.csv".into(), csv_bytes(&curve_rows)?),
    ];
    tables.append(&mut files);
    Ok(tables)
}
