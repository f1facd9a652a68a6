//! Corpus manifest CSV:
//! `source_id,class,image_path,mask_path,field_mm,split`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::qa::QualityClass;
use crate::split::Split;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub source_id: String,
    pub class: QualityClass,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub field_mm: f64,
    pub split: Split,
}

pub const MANIFEST_HEADER: [&str; 6] = [
    "source_id",
    "class",
    "image_path",
    "mask_path",
    "field_mm",
    "split",
];

/// Loads a manifest; relative image/mask paths are resolved against the
/// manifest's parent directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| {
        Error::Config(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Config(format!("bad manifest header: {e}")))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Config(format!(
            "unexpected manifest header {headers:?}"
        )));
    }
    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(format!("manifest line {}: {e}", i + 2)))?;
        let field_mm: f64 = rec[4]
            .parse()
            .map_err(|e| Error::Config(format!("manifest line {}: bad field_mm: {e}", i + 2)))?;
        rows.push(ManifestRow {
            source_id: rec[0].to_string(),
            class: rec[1].parse()?,
            image_path: resolve(&rec[2]),
            mask_path: resolve(&rec[3]),
            field_mm,
            split: rec[5].parse()?,
        });
    }
    Ok(rows)
}

/// Writes a manifest with paths relative to the manifest's directory when
/// possible, so a corpus directory stays relocatable.
pub fn save_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut wtr = csv::Writer::from_path(path).map_err(|e| {
        Error::Config(format!("cannot write manifest {}: {e}", path.display()))
    })?;
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    wtr.write_record(MANIFEST_HEADER)
        .map_err(|e| Error::Config(format!("manifest write failed: {e}")))?;
    for r in rows {
        wtr.write_record([
            r.source_id.as_str(),
            &r.class.to_string(),
            &rel(&r.image_path),
            &rel(&r.mask_path),
            &format!("{}", r.field_mm),
            &r.split.to_string(),
        ])
        .map_err(|e| Error::Config(format!("manifest write failed: {e}")))?;
    }
    wtr.flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}
