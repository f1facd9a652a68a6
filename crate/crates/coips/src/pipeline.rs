//! End-to-end orchestration: enumerate inputs, quality-gate, segment,
//! quantify, and emit reports. Per-image failures are recorded and never
//! abort the batch; output ordering is fixed by a final sort on source_id
//! so serial and parallel runs emit byte-identical reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::imaging;
use crate::qa::{self, QualityClass, QualityLabel};
use crate::report::{self, FailureRecord, ReportRecord, Summary};
use crate::seg;
use crate::tensor::checkpoint;
use crate::tensor::net::{NetSpec, Network};

/// One image queued for processing. dOCTA images may reference their sOCTA
/// sibling; the sibling's quality decision then gates segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEntry {
    pub source_id: String,
    pub image_path: PathBuf,
    pub field_mm: f64,
    pub sibling_id: Option<String>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Collects inputs from `input_manifest` (preferred) or `input_dir`.
pub fn enumerate_inputs(cfg: &PipelineConfig) -> Result<Vec<InputEntry>> {
    if let Some(manifest) = &cfg.input_manifest {
        return load_input_manifest(manifest, cfg.field_mm);
    }
    let dir = cfg
        .input_dir
        .as_ref()
        .ok_or_else(|| Error::Config("config needs input_dir or input_manifest".into()))?;
    let mut entries = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if let Some(ext) = ext {
            if IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                entries.push(InputEntry {
                    source_id: stem,
                    image_path: path,
                    field_mm: cfg.field_mm,
                    sibling_id: None,
                });
            }
        }
    }
    entries.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(entries)
}

/// Input manifest: either the 4-column pipeline format
/// `source_id,image_path,field_mm,sibling_id` or a full corpus manifest
/// (whose mask/class/split columns are ignored here).
fn load_input_manifest(path: &Path, default_field_mm: f64) -> Result<Vec<InputEntry>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Config(format!("bad input manifest header: {e}")))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let mut entries = Vec::new();
    if headers == ["source_id", "image_path", "field_mm", "sibling_id"] {
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Config(format!("input line {}: {e}", i + 2)))?;
            let field_mm: f64 = if rec[2].is_empty() {
                default_field_mm
            } else {
                rec[2]
                    .parse()
                    .map_err(|e| Error::Config(format!("input line {}: bad field_mm: {e}", i + 2)))?
            };
            entries.push(InputEntry {
                source_id: rec[0].to_string(),
                image_path: resolve(&rec[1]),
                field_mm,
                sibling_id: if rec[3].is_empty() {
                    None
                } else {
                    Some(rec[3].to_string())
                },
            });
        }
    } else if headers == crate::manifest::MANIFEST_HEADER {
        for row in crate::manifest::load_manifest(path)? {
            entries.push(InputEntry {
                source_id: row.source_id,
                image_path: row.image_path,
                field_mm: row.field_mm,
                sibling_id: None,
            });
        }
    } else {
        return Err(Error::Config(format!(
            "unrecognized input manifest header {headers:?}"
        )));
    }
    entries.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub entry: InputEntry,
    pub label: QualityLabel,
    /// Category that gates segmentation (the sibling's for paired dOCTA).
    pub gate: QualityClass,
    pub width: usize,
    pub height: usize,
}

pub fn load_classifier(path: &Path) -> Result<Network> {
    let net = checkpoint::load(path)?;
    match net.spec {
        NetSpec::Classifier(_) => Ok(net),
        _ => Err(Error::Checkpoint(format!(
            "{} is not a classifier checkpoint",
            path.display()
        ))),
    }
}

pub fn load_segmenter(path: &Path) -> Result<Network> {
    let net = checkpoint::load(path)?;
    match net.spec {
        NetSpec::UNet(_) => Ok(net),
        _ => Err(Error::Checkpoint(format!(
            "{} is not a segmentation checkpoint",
            path.display()
        ))),
    }
}

/// Classifies every input; paired dOCTA entries inherit the sibling's
/// decision when the sibling is present in the batch.
pub fn assess_batch(
    classifier: &Network,
    entries: &[InputEntry],
) -> (Vec<Assessment>, Vec<FailureRecord>) {
    let input_size = match &classifier.spec {
        NetSpec::Classifier(s) => s.input_size,
        _ => unreachable!("validated at load"),
    };
    let results: Vec<std::result::Result<Assessment, FailureRecord>> = entries
        .par_iter()
        .map(|entry| {
            let run = || -> Result<Assessment> {
                let bytes = std::fs::read(&entry.image_path)
                    .map_err(|e| Error::io(&entry.image_path, e))?;
                let img = imaging::decode_image(&bytes, entry.field_mm, &entry.source_id)?;
                let prepared = qa::preprocess_for_qa(&img, input_size)?;
                let label = qa::predict_quality(classifier, &prepared)?;
                Ok(Assessment {
                    entry: entry.clone(),
                    gate: label.category,
                    width: img.width(),
                    height: img.height(),
                    label,
                })
            };
            run().map_err(|e| FailureRecord {
                source_id: entry.source_id.clone(),
                reason: e.to_string(),
            })
        })
        .collect();
    let mut assessments = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(a) => assessments.push(a),
            Err(f) => failures.push(f),
        }
    }
    // sibling gating pass, after all own classifications are known
    let own: BTreeMap<String, QualityClass> = assessments
        .iter()
        .map(|a| (a.entry.source_id.clone(), a.label.category))
        .collect();
    for a in &mut assessments {
        if let Some(sib) = &a.entry.sibling_id {
            if let Some(&cat) = own.get(sib) {
                a.gate = cat;
            }
        }
    }
    assessments.sort_by(|a, b| a.entry.source_id.cmp(&b.entry.source_id));
    (assessments, failures)
}

/// Segments every assessment whose gate is not ungradable; returns report
/// records plus the mask PNG bytes to write.
pub fn segment_batch(
    segmenter: &Network,
    assessments: &[Assessment],
) -> (Vec<ReportRecord>, Vec<(String, Vec<u8>)>, Vec<FailureRecord>) {
    let results: Vec<std::result::Result<(ReportRecord, Option<(String, Vec<u8>)>), FailureRecord>> =
        assessments
            .par_iter()
            .map(|a| {
                let run = || -> Result<(ReportRecord, Option<(String, Vec<u8>)>)> {
                    if a.gate == QualityClass::Ungradable {
                        let record = ReportRecord::ungradable(
                            a.entry.source_id.clone(),
                            &a.label,
                            a.width,
                            a.height,
                            a.entry.field_mm,
                        );
                        return Ok((record, None));
                    }
                    let bytes = std::fs::read(&a.entry.image_path)
                        .map_err(|e| Error::io(&a.entry.image_path, e))?;
                    let img =
                        imaging::decode_image(&bytes, a.entry.field_mm, &a.entry.source_id)?;
                    let mask = seg::predict_mask_full(segmenter, &img)?;
                    let record = ReportRecord::segmented(
                        a.entry.source_id.clone(),
                        &QualityLabel {
                            category: a.gate.max(QualityClass::Gradable),
                            probs: a.label.probs,
                        },
                        &mask,
                        a.entry.field_mm,
                    )?;
                    let png = imaging::encode_mask_png(&mask)?;
                    Ok((record, Some((a.entry.source_id.clone(), png))))
                };
                run().map_err(|e| FailureRecord {
                    source_id: a.entry.source_id.clone(),
                    reason: e.to_string(),
                })
            })
            .collect();
    let mut records = Vec::new();
    let mut masks = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok((rec, m)) => {
                records.push(rec);
                masks.extend(m);
            }
            Err(f) => failures.push(f),
        }
    }
    records.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    masks.sort_by(|a, b| a.0.cmp(&b.0));
    (records, masks, failures)
}

pub struct PipelineOutcome {
    pub records: Vec<ReportRecord>,
    pub summary: Summary,
    /// 0 = success, 1 = partial (per-image failures occurred)
    pub exit_code: i32,
}

/// Writes report.csv, report.json, summary.json and masks/<id>.png under
/// the configured output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let classifier_path = cfg
        .classifier_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("classifier_checkpoint not configured".into()))?;
    let segmenter_path = cfg
        .segmenter_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("segmenter_checkpoint not configured".into()))?;
    let classifier = load_classifier(classifier_path)?;
    let segmenter = load_segmenter(segmenter_path)?;
    let entries = enumerate_inputs(cfg)?;

    let (assessments, mut failures) = assess_batch(&classifier, &entries);
    let (records, masks, seg_failures) = segment_batch(&segmenter, &assessments);
    failures.extend(seg_failures);
    failures.sort_by(|a, b| a.source_id.cmp(&b.source_id));

    write_outputs(&cfg.output_dir, &records, &masks, failures.clone())?;
    let summary = report::summarize(&records, failures);
    let exit_code = i32::from(!summary.failures.is_empty());
    Ok(PipelineOutcome {
        records,
        summary,
        exit_code,
    })
}

pub fn write_outputs(
    out_dir: &Path,
    records: &[ReportRecord],
    masks: &[(String, Vec<u8>)],
    failures: Vec<FailureRecord>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    for (id, png) in masks {
        let p = masks_dir.join(format!("{id}.png"));
        std::fs::write(&p, png).map_err(|e| Error::io(&p, e))?;
    }
    let csv_path = out_dir.join("report.csv");
    std::fs::write(&csv_path, report::report_csv(records)).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out_dir.join("report.json");
    std::fs::write(&json_path, report::report_json(records)?)
        .map_err(|e| Error::io(&json_path, e))?;
    let summary = report::summarize(records, failures);
    let sum_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization failed: {e}")))?;
    std::fs::write(&sum_path, text).map_err(|e| Error::io(&sum_path, e))?;
    Ok(())
}

pub const ASSESSMENT_HEADER: [&str; 10] = [
    "source_id",
    "image_path",
    "category",
    "p_ungradable",
    "p_gradable",
    "p_outstanding",
    "gate",
    "width",
    "height",
    "field_mm",
];

pub fn assessments_csv(assessments: &[Assessment]) -> String {
    let mut out = ASSESSMENT_HEADER.join(",");
    out.push('\n');
    for a in assessments {
        let p = a.label.probs.unwrap_or([0.0; 3]);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            a.entry.source_id,
            a.entry.image_path.display(),
            a.label.category,
            p[0],
            p[1],
            p[2],
            a.gate,
            a.width,
            a.height,
            a.entry.field_mm
        ));
    }
    out
}

/// Area quantification over a directory of mask PNGs: one CSV row per mask,
/// sorted by source id.
pub fn quantify_masks(masks_dir: &Path, field_mm: f64) -> Result<String> {
    let mut paths: Vec<PathBuf> = Vec::new();
    let rd = std::fs::read_dir(masks_dir).map_err(|e| Error::io(masks_dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(masks_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            paths.push(path);
        }
    }
    paths.sort();
    let rows: Vec<(String, u64, f64)> = paths
        .par_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let mask = imaging::decode_mask_png(&bytes, &id)?;
            let area = report::faz_area(&mask, field_mm)?;
            Ok((id, mask.foreground_count(), area))
        })
        .collect::<Result<_>>()?;
    let mut out = String::from("source_id,faz_pixels,faz_area_mm2\n");
    for (id, pixels, area) in rows {
        out.push_str(&format!("{id},{pixels},{area}\n"));
    }
    Ok(out)
}

/// Held-out evaluation against manifest ground truth.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub split: crate::split::Split,
    pub samples: usize,
    pub classification: crate::metrics::ClassificationReport,
    pub auc_per_class: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
    pub segmentation: Option<SegEval>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SegEval {
    pub samples: usize,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

/// Runs both models over one manifest split and writes metrics.json,
/// confusion.csv, roc_<class>.csv and roc.svg / confusion.svg under
/// `out_dir`.
pub fn evaluate(
    classifier: &Network,
    segmenter: Option<&Network>,
    manifest: &[crate::manifest::ManifestRow],
    split: crate::split::Split,
    out_dir: &Path,
) -> Result<EvalReport> {
    use crate::metrics;

    let rows: Vec<&crate::manifest::ManifestRow> =
        manifest.iter().filter(|r| r.split == split).collect();
    if rows.is_empty() {
        return Err(Error::Config(format!("no rows in split {split}")));
    }
    let input_size = match &classifier.spec {
        NetSpec::Classifier(s) => s.input_size,
        _ => return Err(Error::Checkpoint("classifier checkpoint expected".into())),
    };
    let preds: Vec<(usize, usize, [f64; 3])> = rows
        .par_iter()
        .map(|r| {
            let bytes = std::fs::read(&r.image_path).map_err(|e| Error::io(&r.image_path, e))?;
            let img = imaging::decode_image(&bytes, r.field_mm, &r.source_id)?;
            let prepared = qa::preprocess_for_qa(&img, input_size)?;
            let label = qa::predict_quality(classifier, &prepared)?;
            Ok((
                r.class.index(),
                label.category.index(),
                label.probs.unwrap_or([0.0; 3]),
            ))
        })
        .collect::<Result<_>>()?;
    let y_true: Vec<usize> = preds.iter().map(|p| p.0).collect();
    let y_pred: Vec<usize> = preds.iter().map(|p| p.1).collect();
    let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.2.to_vec()).collect();

    let cm = metrics::confusion_matrix(&y_true, &y_pred, qa::NUM_CLASSES)?;
    let classification = metrics::classification_report(&cm)?;
    let mut auc_per_class = Vec::new();
    for c in 0..qa::NUM_CLASSES {
        auc_per_class.push(match metrics::roc_auc(&scores, &y_true, c) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        });
    }
    let macro_auc = if auc_per_class.iter().all(|a| a.is_some()) {
        Some(auc_per_class.iter().map(|a| a.unwrap()).sum::<f64>() / qa::NUM_CLASSES as f64)
    } else {
        None
    };

    let segmentation = match segmenter {
        Some(net) => {
            let seg_rows: Vec<&&crate::manifest::ManifestRow> = rows
                .iter()
                .filter(|r| r.class != QualityClass::Ungradable)
                .collect();
            if seg_rows.is_empty() {
                None
            } else {
                let stats: Vec<(f64, f64, f64, f64)> = seg_rows
                    .par_iter()
                    .map(|r| {
                        let bytes = std::fs::read(&r.image_path)
                            .map_err(|e| Error::io(&r.image_path, e))?;
                        let img = imaging::decode_image(&bytes, r.field_mm, &r.source_id)?;
                        let pred = seg::predict_mask_full(net, &img)?;
                        let mbytes = std::fs::read(&r.mask_path)
                            .map_err(|e| Error::io(&r.mask_path, e))?;
                        let gt = imaging::decode_mask_png(&mbytes, &r.source_id)?;
                        let d = seg::dice_coefficient(&pred.pixels, &gt.pixels)?;
                        let fallback = |v: crate::error::Result<f64>| match v {
                            Ok(x) => Ok(x),
                            Err(Error::UndefinedMetric(_)) => Ok(0.0),
                            Err(e) => Err(e),
                        };
                        let j = fallback(metrics::jaccard(&pred.pixels, &gt.pixels))?;
                        let p = fallback(metrics::seg_precision(&pred.pixels, &gt.pixels))?;
                        let rc = fallback(metrics::seg_recall(&pred.pixels, &gt.pixels))?;
                        Ok((d, j, p, rc))
                    })
                    .collect::<Result<_>>()?;
                let n = stats.len() as f64;
                Some(SegEval {
                    samples: stats.len(),
                    mean_dice: stats.iter().map(|s| s.0).sum::<f64>() / n,
                    mean_jaccard: stats.iter().map(|s| s.1).sum::<f64>() / n,
                    mean_precision: stats.iter().map(|s| s.2).sum::<f64>() / n,
                    mean_recall: stats.iter().map(|s| s.3).sum::<f64>() / n,
                })
            }
        }
        None => None,
    };

    let report = EvalReport {
        split,
        samples: rows.len(),
        classification,
        auc_per_class,
        macro_auc,
        segmentation,
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("metrics serialization failed: {e}")))?;
    std::fs::write(&metrics_path, text).map_err(|e| Error::io(&metrics_path, e))?;

    let mut cm_csv = String::from("truth\\pred");
    for c in QualityClass::ALL {
        cm_csv.push_str(&format!(",{c}"));
    }
    cm_csv.push('\n');
    for t in QualityClass::ALL {
        cm_csv.push_str(t.as_str());
        for p in QualityClass::ALL {
            cm_csv.push_str(&format!(",{}", cm.get(t.index(), p.index())));
        }
        cm_csv.push('\n');
    }
    let cm_path = out_dir.join("confusion.csv");
    std::fs::write(&cm_path, cm_csv).map_err(|e| Error::io(&cm_path, e))?;

    let mut curves = Vec::new();
    for c in QualityClass::ALL {
        let curve = match metrics::roc_curve(&scores, &y_true, c.index()) {
            Ok(pts) => pts,
            Err(Error::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        };
        let mut csv_text = String::from("fpr,tpr\n");
        for (fpr, tpr) in &curve {
            csv_text.push_str(&format!("{fpr},{tpr}\n"));
        }
        let path = out_dir.join(format!("roc_{c}.csv"));
        std::fs::write(&path, csv_text).map_err(|e| Error::io(&path, e))?;
        curves.push((c.as_str().to_string(), curve));
    }
    if !curves.is_empty() {
        let svg = crate::svgplot::roc_svg(&curves);
        let path = out_dir.join("roc.svg");
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    let labels: Vec<&str> = QualityClass::ALL.iter().map(|c| c.as_str()).collect();
    let svg = crate::svgplot::confusion_svg(&cm, &labels);
    let path = out_dir.join("confusion.svg");
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;

    Ok(report)
}

pub fn parse_assessments_csv(text: &str) -> Result<Vec<Assessment>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(format!("assessments line {}: {e}", i + 2)))?;
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Config(format!("assessments line {}: {e}", i + 2)))
        };
        out.push(Assessment {
            entry: InputEntry {
                source_id: rec[0].to_string(),
                image_path: PathBuf::from(&rec[1]),
                field_mm: parse_f(&rec[9])?,
                sibling_id: None,
            },
            label: QualityLabel {
                category: rec[2].parse()?,
                probs: Some([parse_f(&rec[3])?, parse_f(&rec[4])?, parse_f(&rec[5])?]),
            },
            gate: rec[6].parse()?,
            width: rec[7]
                .parse()
                .map_err(|e| Error::Config(format!("assessments line {}: {e}", i + 2)))?,
            height: rec[8]
                .parse()
                .map_err(|e| Error::Config(format!("assessments line {}: {e}", i + 2)))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg::FazMask;

    #[test]
    fn directory_enumeration_filters_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.jpg", "c.bmp", "notes.txt", "d.jpeg"] {
            std::fs::write(dir.path().join(name), b"x").unwrap();
        }
        let mut cfg = PipelineConfig::default();
        cfg.input_dir = Some(dir.path().to_path_buf());
        cfg.field_mm = 6.0;
        let entries = enumerate_inputs(&cfg).unwrap();
        let ids: Vec<&str> = entries.iter().map(|e| e.source_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);
        assert!(entries.iter().all(|e| e.field_mm == 6.0));
        assert!(entries.iter().all(|e| e.sibling_id.is_none()));
    }

    #[test]
    fn four_column_manifest_with_siblings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inputs.csv");
        std::fs::write(
            &path,
            "source_id,image_path,field_mm,sibling_id\n\
             d1,images/d1.png,6.0,s1\n\
             s1,images/s1.png,,\n",
        )
        .unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.input_manifest = Some(path);
        let entries = enumerate_inputs(&cfg).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].source_id, "d1");
        assert_eq!(entries[0].sibling_id.as_deref(), Some("s1"));
        assert_eq!(entries[0].field_mm, 6.0);
        // empty field_mm falls back to the config default
        assert_eq!(entries[1].field_mm, cfg.field_mm);
        // relative paths resolve against the manifest directory
        assert!(entries[0].image_path.starts_with(dir.path()));
    }

    #[test]
    fn corpus_manifest_is_accepted_as_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(
            &path,
            "source_id,class,image_path,mask_path,field_mm,split\n\
             g_0001,gradable,images/g_0001.png,masks/g_0001.png,3,train\n",
        )
        .unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.input_manifest = Some(path);
        let entries = enumerate_inputs(&cfg).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].source_id, "g_0001");
    }

    #[test]
    fn unknown_manifest_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weird.csv");
        std::fs::write(&path, "id,file\nx,y\n").unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.input_manifest = Some(path);
        assert!(enumerate_inputs(&cfg).is_err());
    }

    #[test]
    fn missing_input_source_is_an_error() {
        let cfg = PipelineConfig::default();
        assert!(enumerate_inputs(&cfg).is_err());
    }

    #[test]
    fn assessments_csv_round_trips() {
        let assessments = vec![Assessment {
            entry: InputEntry {
                source_id: "x1".into(),
                image_path: PathBuf::from("/data/x1.png"),
                field_mm: 3.0,
                sibling_id: None,
            },
            label: QualityLabel {
                category: QualityClass::Gradable,
                probs: Some([0.1, 0.7, 0.2]),
            },
            gate: QualityClass::Ungradable,
            width: 64,
            height: 64,
        }];
        let csv = assessments_csv(&assessments);
        assert!(csv.starts_with("source_id,image_path,category,"));
        let back = parse_assessments_csv(&csv).unwrap();
        assert_eq!(back, assessments);
    }

    #[test]
    fn quantify_masks_reads_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = vec![0u8; 64];
        pixels[0] = 1;
        pixels[1] = 1;
        let mask = FazMask::new(pixels, 8, 8, "m1".into()).unwrap();
        let png = imaging::encode_mask_png(&mask).unwrap();
        std::fs::write(dir.path().join("m1.png"), &png).unwrap();
        std::fs::write(dir.path().join("ignored.txt"), b"x").unwrap();
        let csv = quantify_masks(dir.path(), 4.0).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("source_id,faz_pixels,faz_area_mm2"));
        // 2 pixels * 16 mm^2 / 64 = 0.5
        assert_eq!(lines.next(), Some("m1,2,0.5"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn classifier_loader_rejects_a_unet_checkpoint() {
        use crate::tensor::net::UNetConfig;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        let net = Network::build(NetSpec::UNet(UNetConfig::default()), 0).unwrap();
        checkpoint::save(&net, &path).unwrap();
        assert!(load_classifier(&path).is_err());
        assert!(load_segmenter(&path).is_ok());
    }
}
