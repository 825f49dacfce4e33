use std::path::{Path, PathBuf};

use super::TrainError;

/// One dataset row. Training needs `clean_path`, `noise_path`, `snr_db`,
/// and `seed`; benchmarking needs `mixture_path` and `clean_path`. One CSV
/// schema serves both, with unused columns left empty.
#[derive(Clone, Debug)]
pub struct ManifestRow {
    pub id: String,
    pub mixture_path: Option<PathBuf>,
    pub clean_path: PathBuf,
    pub noise_path: Option<PathBuf>,
    pub snr_db: f64,
    pub realized_snr_db: Option<f64>,
    pub seed: u64,
}

pub const MANIFEST_HEADER: [&str; 7] = [
    "id",
    "mixture_path",
    "clean_path",
    "noise_path",
    "snr_db",
    "realized_snr_db",
    "seed",
];

/// Joins a manifest-relative path onto the manifest's directory.
pub fn resolve_path(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, TrainError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| TrainError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| TrainError::Data(format!("bad manifest header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let c_id = col("id");
    let c_mix = col("mixture_path");
    let c_clean = col("clean_path").ok_or_else(|| {
        TrainError::Data(format!("manifest {} lacks clean_path column", path.display()))
    })?;
    let c_noise = col("noise_path");
    let c_snr = col("snr_db").ok_or_else(|| {
        TrainError::Data(format!("manifest {} lacks snr_db column", path.display()))
    })?;
    let c_realized = col("realized_snr_db");
    let c_seed = col("seed");

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| TrainError::Data(format!("manifest row {}: {e}", i + 1)))?;
        let field = |c: Option<usize>| -> Option<&str> {
            c.and_then(|c| record.get(c)).filter(|s| !s.is_empty())
        };
        let snr_raw = field(Some(c_snr))
            .ok_or_else(|| TrainError::Data(format!("manifest row {}: empty snr_db", i + 1)))?;
        let snr_db: f64 = snr_raw.parse().map_err(|_| {
            TrainError::Data(format!("manifest row {}: bad snr_db {snr_raw:?}", i + 1))
        })?;
        let clean_raw = field(Some(c_clean))
            .ok_or_else(|| TrainError::Data(format!("manifest row {}: empty clean_path", i + 1)))?;
        let seed = match field(c_seed) {
            Some(s) => s.parse::<u64>().map_err(|_| {
                TrainError::Data(format!("manifest row {}: bad seed {s:?}", i + 1))
            })?,
            None => i as u64,
        };
        let realized_snr_db = match field(c_realized) {
            Some(s) => Some(s.parse::<f64>().map_err(|_| {
                TrainError::Data(format!("manifest row {}: bad realized_snr_db {s:?}", i + 1))
            })?),
            None => None,
        };
        rows.push(ManifestRow {
            id: field(c_id)
                .map(str::to_string)
                .unwrap_or_else(|| format!("row{:04}", i + 1)),
            mixture_path: field(c_mix).map(PathBuf::from),
            clean_path: PathBuf::from(clean_raw),
            noise_path: field(c_noise).map(PathBuf::from),
            snr_db,
            realized_snr_db,
            seed,
        });
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| TrainError::Data(format!("cannot write manifest {}: {e}", path.display())))?;
    w.write_record(MANIFEST_HEADER)
        .map_err(|e| TrainError::Data(format!("manifest write: {e}")))?;
    let path_str = |p: &Option<PathBuf>| {
        p.as_ref()
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    for r in rows {
        w.write_record([
            r.id.clone(),
            path_str(&r.mixture_path),
            r.clean_path.to_string_lossy().into_owned(),
            path_str(&r.noise_path),
            format!("{}", r.snr_db),
            r.realized_snr_db.map(|v| format!("{v}")).unwrap_or_default(),
            format!("{}", r.seed),
        ])
        .map_err(|e| TrainError::Data(format!("manifest write: {e}")))?;
    }
    w.flush().map_err(|e| TrainError::Data(format!("manifest write: {e}")))?;
    Ok(())
}
