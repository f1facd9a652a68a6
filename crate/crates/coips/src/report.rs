//! FAZ area quantification and per-image report records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qa::{QualityClass, QualityLabel};
use crate::seg::FazMask;

/// FAZ area in mm^2: `N_mask * a^2 / z^2` where `a` is the field of view in
/// mm and `z` the (square) raster side in pixels.
pub fn faz_area(mask: &FazMask, field_mm: f64) -> Result<f64> {
    if mask.height != mask.width {
        return Err(Error::Geometry(format!(
            "FAZ area needs a square raster, got {}x{}",
            mask.height, mask.width
        )));
    }
    if field_mm <= 0.0 {
        return Err(Error::Config("field_mm must be positive".into()));
    }
    let z = mask.width as f64;
    Ok(mask.foreground_count() as f64 * field_mm * field_mm / (z * z))
}

/// One pipeline-output row per image. `segmented` is false exactly for
/// ungradable images, which carry no mask statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub source_id: String,
    pub category: QualityClass,
    pub p_ungradable: f64,
    pub p_gradable: f64,
    pub p_outstanding: f64,
    pub segmented: bool,
    pub faz_pixels: Option<u64>,
    pub faz_area_mm2: Option<f64>,
    pub width: usize,
    pub height: usize,
    pub field_mm: f64,
}

impl ReportRecord {
    pub fn validate(&self) -> Result<()> {
        let ungradable = self.category == QualityClass::Ungradable;
        if self.segmented == ungradable {
            return Err(Error::Contract(format!(
                "{}: segmented={} contradicts category {}",
                self.source_id, self.segmented, self.category
            )));
        }
        if self.segmented != (self.faz_pixels.is_some() && self.faz_area_mm2.is_some()) {
            return Err(Error::Contract(format!(
                "{}: area fields must be present iff segmented",
                self.source_id
            )));
        }
        Ok(())
    }

    pub fn ungradable(
        source_id: String,
        probs: &QualityLabel,
        width: usize,
        height: usize,
        field_mm: f64,
    ) -> Self {
        let p = probs.probs.unwrap_or([0.0; 3]);
        ReportRecord {
            source_id,
            category: QualityClass::Ungradable,
            p_ungradable: p[0],
            p_gradable: p[1],
            p_outstanding: p[2],
            segmented: false,
            faz_pixels: None,
            faz_area_mm2: None,
            width,
            height,
            field_mm,
        }
    }

    pub fn segmented(
        source_id: String,
        label: &QualityLabel,
        mask: &FazMask,
        field_mm: f64,
    ) -> Result<Self> {
        let p = label.probs.unwrap_or([0.0; 3]);
        Ok(ReportRecord {
            source_id,
            category: label.category,
            p_ungradable: p[0],
            p_gradable: p[1],
            p_outstanding: p[2],
            segmented: true,
            faz_pixels: Some(mask.foreground_count()),
            faz_area_mm2: Some(faz_area(mask, field_mm)?),
            width: mask.width,
            height: mask.height,
            field_mm,
        })
    }
}

pub const REPORT_HEADER: &str = "source_id,category,p_ungradable,p_gradable,p_outstanding,\
segmented,faz_pixels,faz_area_mm2,width,height,field_mm";

/// Formats to 6 significant figures.
fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Emits the CSV report; rows are written in the given order.
pub fn report_csv(records: &[ReportRecord]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in records {
        let (pixels, area) = match (r.faz_pixels, r.faz_area_mm2) {
            (Some(p), Some(a)) => (p.to_string(), sig6(a)),
            _ => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.source_id,
            r.category,
            r.p_ungradable,
            r.p_gradable,
            r.p_outstanding,
            r.segmented,
            pixels,
            area,
            r.width,
            r.height,
            r.field_mm
        ));
    }
    out
}

/// Emits the JSON report (array of records, full precision).
pub fn report_json(records: &[ReportRecord]) -> Result<String> {
    serde_json::to_string_pretty(records)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))
}

pub fn parse_report_json(text: &str) -> Result<Vec<ReportRecord>> {
    let records: Vec<ReportRecord> = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("cannot parse JSON report: {e}")))?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// Parses the CSV report. The rounded area column is recomputed from the
/// pixel count so the round trip is lossless.
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(format!("report line {}: {e}", i + 2)))?;
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Config(format!("report line {}: bad {what}: {e}", i + 2)))
        };
        let width: usize = rec[8]
            .parse()
            .map_err(|e| Error::Config(format!("report line {}: bad width: {e}", i + 2)))?;
        let height: usize = rec[9]
            .parse()
            .map_err(|e| Error::Config(format!("report line {}: bad height: {e}", i + 2)))?;
        let field_mm = parse_f(&rec[10], "field_mm")?;
        let faz_pixels: Option<u64> = if rec[6].is_empty() {
            None
        } else {
            Some(rec[6].parse().map_err(|e| {
                Error::Config(format!("report line {}: bad faz_pixels: {e}", i + 2))
            })?)
        };
        let faz_area_mm2 = match faz_pixels {
            Some(p) => {
                let z = width as f64;
                Some(p as f64 * field_mm * field_mm / (z * z))
            }
            None => None,
        };
        let record = ReportRecord {
            source_id: rec[0].to_string(),
            category: rec[1].parse()?,
            p_ungradable: parse_f(&rec[2], "p_ungradable")?,
            p_gradable: parse_f(&rec[3], "p_gradable")?,
            p_outstanding: parse_f(&rec[4], "p_outstanding")?,
            segmented: rec[5]
                .parse()
                .map_err(|e| Error::Config(format!("report line {}: bad segmented: {e}", i + 2)))?,
            faz_pixels,
            faz_area_mm2,
            width,
            height,
            field_mm,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Batch summary: counts per category plus mean/median area of the
/// segmented images and any per-image failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total: usize,
    pub ungradable: usize,
    pub gradable: usize,
    pub outstanding: usize,
    pub mean_area_mm2: Option<f64>,
    pub median_area_mm2: Option<f64>,
    pub failures: Vec<FailureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub source_id: String,
    pub reason: String,
}

pub fn summarize(records: &[ReportRecord], failures: Vec<FailureRecord>) -> Summary {
    let count = |c: QualityClass| records.iter().filter(|r| r.category == c).count();
    let mut areas: Vec<f64> = records.iter().filter_map(|r| r.faz_area_mm2).collect();
    areas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = if areas.is_empty() {
        None
    } else {
        Some(areas.iter().sum::<f64>() / areas.len() as f64)
    };
    let median = if areas.is_empty() {
        None
    } else if areas.len() % 2 == 1 {
        Some(areas[areas.len() / 2])
    } else {
        Some((areas[areas.len() / 2 - 1] + areas[areas.len() / 2]) / 2.0)
    };
    Summary {
        total: records.len() + failures.len(),
        ungradable: count(QualityClass::Ungradable),
        gradable: count(QualityClass::Gradable),
        outstanding: count(QualityClass::Outstanding),
        mean_area_mm2: mean,
        median_area_mm2: median,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full_mask(side: usize, fg: &[usize]) -> FazMask {
        let mut pixels = vec![0u8; side * side];
        for &i in fg {
            pixels[i] = 1;
        }
        FazMask::new(pixels, side, side, "m".into()).unwrap()
    }

    #[test]
    fn area_formula_fixtures() {
        // full 10x10 mask over a 3 mm field: 100 * 9 / 100 = 9 mm^2
        let all: Vec<usize> = (0..100).collect();
        assert!((faz_area(&full_mask(10, &all), 3.0).unwrap() - 9.0).abs() < 1e-12);
        // single pixel: 9 / 100
        assert!((faz_area(&full_mask(10, &[0]), 3.0).unwrap() - 0.09).abs() < 1e-12);
        // empty mask
        assert_eq!(faz_area(&full_mask(10, &[]), 3.0).unwrap(), 0.0);
    }

    #[test]
    fn area_rejects_bad_geometry() {
        let rect = FazMask::new(vec![0; 6], 2, 3, "m".into()).unwrap();
        assert!(faz_area(&rect, 3.0).is_err());
        assert!(faz_area(&full_mask(4, &[]), 0.0).is_err());
    }

    fn sample_records() -> Vec<ReportRecord> {
        let label = QualityLabel {
            category: QualityClass::Outstanding,
            probs: Some([0.05, 0.15, 0.8]),
        };
        let mask = full_mask(8, &[0, 1, 2, 9, 10]);
        let seg = ReportRecord::segmented("a0001".into(), &label, &mask, 3.0).unwrap();
        let ung = ReportRecord::ungradable(
            "a0002".into(),
            &QualityLabel {
                category: QualityClass::Ungradable,
                probs: Some([0.9, 0.06, 0.04]),
            },
            8,
            8,
            3.0,
        );
        vec![seg, ung]
    }

    #[test]
    fn record_validation_invariant() {
        let recs = sample_records();
        for r in &recs {
            r.validate().unwrap();
        }
        let mut broken = recs[0].clone();
        broken.category = QualityClass::Ungradable;
        assert!(broken.validate().is_err());
        let mut broken = recs[0].clone();
        broken.faz_pixels = None;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn csv_round_trips_losslessly() {
        let recs = sample_records();
        let csv = report_csv(&recs);
        assert!(csv.starts_with(REPORT_HEADER));
        let back = parse_report_csv(&csv).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn json_round_trips() {
        let recs = sample_records();
        let back = parse_report_json(&report_json(&recs).unwrap()).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn parse_rejects_inconsistent_rows() {
        let mut csv = String::from(REPORT_HEADER);
        // claims ungradable yet segmented
        csv.push_str("\nx,ungradable,0.9,0.05,0.05,true,4,0.01,8,8,3\n");
        assert!(parse_report_csv(&csv).is_err());
    }

    #[test]
    fn summary_counts_and_median() {
        let mut recs = sample_records();
        let label = QualityLabel {
            category: QualityClass::Gradable,
            probs: Some([0.1, 0.7, 0.2]),
        };
        recs.push(
            ReportRecord::segmented("a0003".into(), &label, &full_mask(8, &[0]), 3.0).unwrap(),
        );
        let s = summarize(
            &recs,
            vec![FailureRecord {
                source_id: "bad".into(),
                reason: "decode".into(),
            }],
        );
        assert_eq!(s.total, 4);
        assert_eq!(s.ungradable, 1);
        assert_eq!(s.gradable, 1);
        assert_eq!(s.outstanding, 1);
        let a1 = recs[0].faz_area_mm2.unwrap();
        let a2 = recs[2].faz_area_mm2.unwrap();
        assert!((s.mean_area_mm2.unwrap() - (a1 + a2) / 2.0).abs() < 1e-12);
        assert!((s.median_area_mm2.unwrap() - (a1 + a2) / 2.0).abs() < 1e-12);
        assert_eq!(s.failures.len(), 1);
    }

    #[test]
    fn empty_summary_has_no_areas() {
        let s = summarize(&[], Vec::new());
        assert_eq!(s.total, 0);
        assert!(s.mean_area_mm2.is_none());
        assert!(s.median_area_mm2.is_none());
    }

    proptest! {
        #[test]
        fn area_scales_with_field_and_pixels(side in 2usize..32, fg_frac in 0.0f64..1.0, field in 0.5f64..12.0) {
            let n_fg = ((side * side) as f64 * fg_frac) as usize;
            let fg: Vec<usize> = (0..n_fg).collect();
            let mask = full_mask(side, &fg);
            let area = faz_area(&mask, field).unwrap();
            let expected = n_fg as f64 * field * field / (side * side) as f64;
            prop_assert!((area - expected).abs() < 1e-9);
        }
    }
}
