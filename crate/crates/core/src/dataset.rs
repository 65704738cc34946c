//! Image manifests with ground-truth labels: loading, splitting,
//! filename anonymization, and class support counts.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The seven ground-truth categories: six polyp histologies plus normal mucosa.
/// Serializes as its short code (`Normal`, `AC`, `TA`, `TVA`, `VA`, `HP`, `IP`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PathologyClass {
    Normal,
    Adenocarcinoma,
    TubularAdenoma,
    TubulovillousAdenoma,
    VillousAdenoma,
    HyperplasticPolyp,
    InflammatoryPolyp,
}

impl PathologyClass {
    /// All seven members, normal first, polyp classes in canonical order.
    pub const ALL: [PathologyClass; 7] = [
        PathologyClass::Normal,
        PathologyClass::Adenocarcinoma,
        PathologyClass::TubularAdenoma,
        PathologyClass::TubulovillousAdenoma,
        PathologyClass::VillousAdenoma,
        PathologyClass::HyperplasticPolyp,
        PathologyClass::InflammatoryPolyp,
    ];

    /// The six polyp classes (everything except `Normal`).
    pub const POLYP: [PathologyClass; 6] = [
        PathologyClass::Adenocarcinoma,
        PathologyClass::TubularAdenoma,
        PathologyClass::TubulovillousAdenoma,
        PathologyClass::VillousAdenoma,
        PathologyClass::HyperplasticPolyp,
        PathologyClass::InflammatoryPolyp,
    ];

    /// Canonical short code (`AC`, `TA`, `TVA`, `VA`, `HP`, `IP`, `Normal`).
    pub fn code(&self) -> &'static str {
        match self {
            PathologyClass::Normal => "Normal",
            PathologyClass::Adenocarcinoma => "AC",
            PathologyClass::TubularAdenoma => "TA",
            PathologyClass::TubulovillousAdenoma => "TVA",
            PathologyClass::VillousAdenoma => "VA",
            PathologyClass::HyperplasticPolyp => "HP",
            PathologyClass::InflammatoryPolyp => "IP",
        }
    }

    pub fn is_polyp(&self) -> bool {
        !matches!(self, PathologyClass::Normal)
    }
}

impl fmt::Display for PathologyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl Serialize for PathologyClass {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for PathologyClass {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for PathologyClass {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Normal" => Ok(PathologyClass::Normal),
            "AC" => Ok(PathologyClass::Adenocarcinoma),
            "TA" => Ok(PathologyClass::TubularAdenoma),
            "TVA" => Ok(PathologyClass::TubulovillousAdenoma),
            "VA" => Ok(PathologyClass::VillousAdenoma),
            "HP" => Ok(PathologyClass::HyperplasticPolyp),
            "IP" => Ok(PathologyClass::InflammatoryPolyp),
            other => Err(DatasetError::UnknownClass {
                code: other.to_string(),
            }),
        }
    }
}

/// Which experiment split a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Exp0,
    Main,
    Unassigned,
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub file_path: PathBuf,
    /// True when a polyp is present; implies `pathology != Normal`.
    pub presence: bool,
    pub pathology: PathologyClass,
    pub width: u32,
    pub height: u32,
    pub split: SplitTag,
}

/// An ordered collection of image records with split tags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest file not found: {path}")]
    MissingFile { path: PathBuf },
    #[error("malformed manifest row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("unknown class code {code:?}; legal codes are Normal, AC, TA, TVA, VA, HP, IP")]
    UnknownClass { code: String },
    #[error("duplicate image id {id:?}")]
    DuplicateId { id: String },
    #[error("referenced image does not exist: {path}")]
    MissingImage { path: PathBuf },
    #[error("cannot read image dimensions for {path}: {source}")]
    UnreadableImage {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("split fraction must lie in (0,1), got {0}")]
    BadFraction(f64),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("anonymized name collision persisted after 5 retries")]
    NameCollision,
    #[error("copy failed for {path}: {source}")]
    CopyFailed {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    id: String,
    file: String,
    presence: u8,
    class: String,
}

/// Loads a manifest CSV (`id,file,presence,class`) and validates every record.
///
/// Relative `file` paths are resolved against the manifest's directory. Each
/// referenced image must exist and have readable dimensions; presence must be
/// consistent with the class (`presence=0` iff class is `Normal`).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (index, row) in reader.deserialize::<ManifestRow>().enumerate() {
        // Header is line 1; data rows are reported 1-based from line 2.
        let line = index + 2;
        let row = row.map_err(|e| DatasetError::MalformedRow {
            row: line,
            reason: e.to_string(),
        })?;
        let pathology: PathologyClass = row.class.parse()?;
        let presence = match row.presence {
            0 => false,
            1 => true,
            other => {
                return Err(DatasetError::MalformedRow {
                    row: line,
                    reason: format!("presence must be 0 or 1, got {other}"),
                })
            }
        };
        if presence != pathology.is_polyp() {
            return Err(DatasetError::MalformedRow {
                row: line,
                reason: format!(
                    "presence={} is inconsistent with class {}",
                    row.presence, pathology
                ),
            });
        }
        if !seen.insert(row.id.clone()) {
            return Err(DatasetError::DuplicateId { id: row.id });
        }
        let file_path = {
            let p = PathBuf::from(&row.file);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        if !file_path.exists() {
            return Err(DatasetError::MissingImage { path: file_path });
        }
        let (width, height) =
            image::image_dimensions(&file_path).map_err(|source| DatasetError::UnreadableImage {
                path: file_path.clone(),
                source,
            })?;
        records.push(ImageRecord {
            id: row.id,
            file_path,
            presence,
            pathology,
            width,
            height,
            split: SplitTag::Unassigned,
        });
    }
    Ok(DatasetManifest { records })
}

/// Tags `round(fraction * N)` records as `Exp0` and the rest as `Main`.
///
/// The cut is stratified by presence: each stratum is shuffled with a
/// ChaCha20 stream derived from `(seed, stratum)` and a prefix is cut, with
/// quotas allocated by largest remainder. When a stratum has at least two
/// records and the overall quota allows it, both splits contain both
/// presence values.
pub fn split_dataset(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    if manifest.records.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::BadFraction(fraction));
    }
    let total = manifest.records.len();
    let quota = (fraction * total as f64).round() as usize;

    // Stratum 0: no polyp, stratum 1: polyp.
    let strata: [Vec<usize>; 2] = {
        let mut s = [Vec::new(), Vec::new()];
        for (i, r) in manifest.records.iter().enumerate() {
            s[usize::from(r.presence)].push(i);
        }
        s
    };

    let counts = allocate_quota(quota, [strata[0].len(), strata[1].len()]);

    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = SplitTag::Main;
    }
    for (stratum, indices) in strata.iter().enumerate() {
        let mut shuffled = indices.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ ((stratum as u64 + 1) << 32));
        shuffled.shuffle(&mut rng);
        for &record_index in shuffled.iter().take(counts[stratum]) {
            out.records[record_index].split = SplitTag::Exp0;
        }
    }
    Ok(out)
}

/// Splits `quota` across two strata proportionally (largest remainder),
/// then nudges so each non-empty stratum keeps at least one record on each
/// side whenever its size and the quota permit.
fn allocate_quota(quota: usize, sizes: [usize; 2]) -> [usize; 2] {
    let total: usize = sizes.iter().sum();
    if total == 0 || quota == 0 {
        return [0, 0];
    }
    let quota = quota.min(total);
    let ideal = [
        quota as f64 * sizes[0] as f64 / total as f64,
        quota as f64 * sizes[1] as f64 / total as f64,
    ];
    let mut counts = [ideal[0].floor() as usize, ideal[1].floor() as usize];
    let mut remaining = quota - counts[0] - counts[1];
    // Largest fractional remainder first; ties favor stratum 0.
    let mut order = [0usize, 1usize];
    if (ideal[1] - ideal[1].floor()) > (ideal[0] - ideal[0].floor()) {
        order = [1, 0];
    }
    for &s in &order {
        if remaining == 0 {
            break;
        }
        if counts[s] < sizes[s] {
            counts[s] += 1;
            remaining -= 1;
        }
    }
    for &s in &[0usize, 1] {
        if remaining == 0 {
            break;
        }
        let room = sizes[s] - counts[s];
        let take = room.min(remaining);
        counts[s] += take;
        remaining -= take;
    }
    // Keep both presence values represented on both sides where possible.
    for s in 0..2 {
        let o = 1 - s;
        if sizes[s] >= 2 {
            if counts[s] == 0 && quota >= 2 && counts[o] > 1 {
                counts[s] += 1;
                counts[o] -= 1;
            }
            if counts[s] == sizes[s] && quota < total && counts[o] < sizes[o] {
                counts[s] -= 1;
                counts[o] += 1;
            }
        }
    }
    counts
}

/// Copies every image into `out_dir` under a seeded random 10-hex-char name
/// and returns a manifest pointing at the copies.
///
/// Writes `mapping.csv` (`old,new`) next to the copies. Generated names never
/// contain the original file stem or any class code as a case-insensitive
/// substring. On any copy failure the copies made so far are removed and an
/// error is returned.
pub fn anonymize_filenames(
    manifest: &DatasetManifest,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut planned: Vec<(PathBuf, PathBuf, String)> = Vec::new();

    for record in &manifest.records {
        let stem = record
            .file_path
            .file_stem()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        let ext = record
            .file_path
            .extension()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_else(|| "png".into());
        let mut name = None;
        for _ in 0..=5 {
            let candidate: String = (0..10)
                .map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap())
                .collect();
            if leaks_identity(&candidate, &stem) || !used.insert(candidate.clone()) {
                continue;
            }
            name = Some(candidate);
            break;
        }
        let name = name.ok_or(DatasetError::NameCollision)?;
        let new_file = format!("{name}.{ext}");
        planned.push((
            record.file_path.clone(),
            out_dir.join(&new_file),
            new_file,
        ));
    }

    let mut copied: Vec<PathBuf> = Vec::new();
    for (src, dst, _) in &planned {
        if let Err(source) = fs::copy(src, dst) {
            for c in &copied {
                let _ = fs::remove_file(c);
            }
            return Err(DatasetError::CopyFailed {
                path: dst.clone(),
                source,
            });
        }
        copied.push(dst.clone());
    }

    let mut writer = csv::Writer::from_path(out_dir.join("mapping.csv"))?;
    writer.write_record(["old", "new"])?;
    for ((src, _, new_file), _) in planned.iter().zip(&manifest.records) {
        writer.write_record([src.to_string_lossy().as_ref(), new_file.as_str()])?;
    }
    writer.flush()?;

    let mut out = manifest.clone();
    for (record, (_, dst, _)) in out.records.iter_mut().zip(&planned) {
        record.file_path = dst.clone();
    }
    Ok(out)
}

/// True when `candidate` would leak the original stem or a class code.
/// Only lowercase-hex-expressible codes can ever collide; "ac" is the one
/// that matters, the rest contain non-hex letters.
fn leaks_identity(candidate: &str, original_stem: &str) -> bool {
    if !original_stem.is_empty() && candidate.contains(original_stem) {
        return true;
    }
    PathologyClass::ALL
        .iter()
        .any(|c| candidate.contains(&c.code().to_lowercase()))
}

/// Per-class record counts; always contains all seven classes.
pub fn class_support(manifest: &DatasetManifest) -> BTreeMap<PathologyClass, usize> {
    let mut counts: BTreeMap<PathologyClass, usize> =
        PathologyClass::ALL.iter().map(|&c| (c, 0)).collect();
    for record in &manifest.records {
        *counts.get_mut(&record.pathology).unwrap() += 1;
    }
    counts
}

impl DatasetManifest {
    /// Records matching a split filter; `None` keeps everything.
    pub fn filtered(&self, split: Option<SplitTag>) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .collect()
    }
}
