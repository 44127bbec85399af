//! Sample manifest, stratified folds and class weights.
//!
//! Layout on disk: `root/<label>/<id>_rgb.png` and `root/<label>/<id>_rgnir.png`,
//! with an optional `root/sessions.csv` (`id,session_id,lat,lon`) assigning
//! capture sessions and geotags. `root/sessions/` holds the per-session
//! calibration files and is not a label directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;
pub const SESSIONS_DIR: &str = "sessions";
pub const SESSIONS_CSV: &str = "sessions.csv";
pub const DEFAULT_SESSION: &str = "default";
const MANIFEST_HEADER: [&str; 7] = ["id", "rgb_path", "rgnir_path", "label", "session_id", "lat", "lon"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Blast,
    BrownSpot,
    Healthy,
}

pub const LABELS: [Label; NUM_CLASSES] = [Label::Blast, Label::BrownSpot, Label::Healthy];

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        LABELS.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Blast => "blast",
            Label::BrownSpot => "brown_spot",
            Label::Healthy => "healthy",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LABELS
            .iter()
            .copied()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown label {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub rgb_path: PathBuf,
    pub rgnir_path: PathBuf,
    pub label: Label,
    pub session_id: String,
    /// `(lat, lon)` in degrees.
    pub geotag: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for r in &self.records {
            c[r.label.index()] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label.index()).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Manifest {
        Manifest {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// SHA-256 over the manifest's CSV form with paths relative to `base`.
    pub fn checksum(&self, base: &Path) -> Result<String> {
        let bytes = self.to_csv_bytes(base)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }

    fn to_csv_bytes(&self, base: &Path) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER)?;
        for r in &self.records {
            let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/");
            let (lat, lon) = r
                .geotag
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .unwrap_or_default();
            w.write_record([
                r.id.as_str(),
                &rel(&r.rgb_path),
                &rel(&r.rgnir_path),
                r.label.as_str(),
                &r.session_id,
                &lat,
                &lon,
            ])?;
        }
        w.into_inner().map_err(|e| Error::Dataset(e.to_string()))
    }

    /// Writes `id,rgb_path,rgnir_path,label,session_id,lat,lon`; paths under
    /// `base` are stored relative to it.
    pub fn write_csv(&self, path: &Path, base: &Path) -> Result<()> {
        let bytes = self.to_csv_bytes(base)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest CSV; relative paths are resolved against `base`.
    pub fn read_csv(path: &Path, base: &Path) -> Result<Manifest> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::format(path, format!("manifest header must be {}", MANIFEST_HEADER.join(","))));
        }
        let mut records = Vec::new();
        let mut seen = BTreeSet::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let bad = |msg: String| Error::format(path, format!("row {}: {msg}", line + 2));
            let id = row[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(bad(format!("duplicate id {id}")));
            }
            let geotag = match (&row[5], &row[6]) {
                ("", "") => None,
                (a, b) => Some((
                    a.parse().map_err(|_| bad(format!("bad lat {a:?}")))?,
                    b.parse().map_err(|_| bad(format!("bad lon {b:?}")))?,
                )),
            };
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_relative() {
                    base.join(p)
                } else {
                    p
                }
            };
            records.push(SampleRecord {
                id,
                rgb_path: resolve(&row[1]),
                rgnir_path: resolve(&row[2]),
                label: row[3].parse().map_err(|e: Error| bad(e.to_string()))?,
                session_id: row[4].to_string(),
                geotag,
            });
        }
        Ok(Manifest { records })
    }
}

struct SessionInfo {
    session_id: String,
    geotag: Option<(f64, f64)>,
}

fn read_sessions(path: &Path) -> Result<BTreeMap<String, SessionInfo>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    if rdr.headers()?.iter().collect::<Vec<_>>() != ["id", "session_id", "lat", "lon"] {
        return Err(Error::format(path, "header must be id,session_id,lat,lon"));
    }
    for row in rdr.records() {
        let row = row?;
        let geotag = match (&row[2], &row[3]) {
            ("", "") => None,
            (a, b) => match (a.parse(), b.parse()) {
                (Ok(a), Ok(b)) => Some((a, b)),
                _ => return Err(Error::format(path, format!("bad geotag for {}", &row[0]))),
            },
        };
        out.insert(
            row[0].to_string(),
            SessionInfo {
                session_id: row[1].to_string(),
                geotag,
            },
        );
    }
    Ok(out)
}

/// Scans `root/<label>/` for `<id>_rgb.png` / `<id>_rgnir.png` pairs.
/// Records come back sorted by id regardless of directory order.
pub fn build_manifest(root: &Path) -> Result<Manifest> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut offenders = Vec::new();
    // id -> (label, rgb, rgnir)
    let mut pairs: BTreeMap<String, (Label, Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    let mut label_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().to_string();
        if !path.is_dir() {
            continue;
        }
        if name == SESSIONS_DIR {
            continue;
        }
        match name.parse::<Label>() {
            Ok(label) => label_dirs.push((label, path)),
            Err(_) => offenders.push(format!("unknown label directory {}", path.display())),
        }
    }
    label_dirs.sort();
    for (label, dir) in label_dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(&dir, e)))
            .collect::<Result<_>>()?;
        files.sort();
        for f in files {
            let name = f.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
            let (id, is_rgb) = if let Some(id) = name.strip_suffix("_rgb.png") {
                (id, true)
            } else if let Some(id) = name.strip_suffix("_rgnir.png") {
                (id, false)
            } else {
                offenders.push(format!("unexpected file {}", f.display()));
                continue;
            };
            let slot = pairs.entry(id.to_string()).or_insert((label, None, None));
            if slot.0 != label {
                offenders.push(format!("id {id} appears under both {} and {label}", slot.0));
                continue;
            }
            if is_rgb {
                slot.1 = Some(f);
            } else {
                slot.2 = Some(f);
            }
        }
    }

    let sessions = read_sessions(&root.join(SESSIONS_CSV))?;
    let mut records = Vec::with_capacity(pairs.len());
    for (id, (label, rgb, rgnir)) in pairs {
        match (rgb, rgnir) {
            (Some(rgb_path), Some(rgnir_path)) => {
                let info = sessions.get(&id);
                records.push(SampleRecord {
                    session_id: info.map_or(DEFAULT_SESSION.to_string(), |s| s.session_id.clone()),
                    geotag: info.and_then(|s| s.geotag),
                    id,
                    rgb_path,
                    rgnir_path,
                    label,
                });
            }
            (Some(p), None) | (None, Some(p)) => offenders.push(format!("unpaired file {}", p.display())),
            (None, None) => {}
        }
    }
    if !offenders.is_empty() {
        offenders.sort();
        return Err(Error::Dataset(format!(
            "{} problem(s) under {}:\n  {}",
            offenders.len(),
            root.display(),
            offenders.join("\n  ")
        )));
    }
    Ok(Manifest { records })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Fold of each manifest record, in manifest order.
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }

    pub fn write_csv(&self, manifest: &Manifest, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "fold"])?;
        for (r, f) in manifest.records.iter().zip(&self.folds) {
            w.write_record([r.id.as_str(), &f.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads `id,fold` rows and aligns them with `manifest`.
    pub fn read_csv(manifest: &Manifest, path: &Path, seed: u64) -> Result<FoldAssignment> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut by_id = BTreeMap::new();
        for row in rdr.records() {
            let row = row?;
            let fold: usize = row[1]
                .parse()
                .map_err(|_| Error::format(path, format!("bad fold {:?}", &row[1])))?;
            by_id.insert(row[0].to_string(), fold);
        }
        let folds = manifest
            .records
            .iter()
            .map(|r| {
                by_id
                    .get(&r.id)
                    .copied()
                    .ok_or_else(|| Error::format(path, format!("no fold for sample {}", r.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let k = folds.iter().max().map_or(0, |m| m + 1);
        Ok(FoldAssignment { k, seed, folds })
    }
}

/// Seeded per-class shuffle, then round-robin over folds. Each class starts
/// where the previous one stopped so fold totals stay balanced too.
pub fn stratified_kfold(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let counts = manifest.counts();
    for (label, &n) in LABELS.iter().zip(&counts) {
        if n < k {
            return Err(Error::Dataset(format!("class {label} has {n} samples, fewer than k = {k}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![usize::MAX; manifest.len()];
    let mut next = 0usize;
    for label in LABELS {
        let mut idx: Vec<usize> = (0..manifest.len()).filter(|&i| manifest.records[i].label == label).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, seed, folds })
}

/// Inverse-frequency weights `N / (K * n_c)`.
pub fn class_weights_from_counts(counts: &[usize; NUM_CLASSES]) -> Result<[f64; NUM_CLASSES]> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!("class {} has no samples", LABELS[c])));
    }
    let total: usize = counts.iter().sum();
    Ok(counts.map(|n| total as f64 / (NUM_CLASSES as f64 * n as f64)))
}

pub fn class_weights(manifest: &Manifest) -> Result<[f64; NUM_CLASSES]> {
    class_weights_from_counts(&manifest.counts())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"").unwrap();
    }

    fn mock(root: &Path, counts: [usize; 3]) {
        for (label, &n) in LABELS.iter().zip(&counts) {
            for i in 0..n {
                let id = format!("{}{i:04}", &label.as_str()[..2]);
                touch(&root.join(label.as_str()).join(format!("{id}_rgb.png")));
                touch(&root.join(label.as_str()).join(format!("{id}_rgnir.png")));
            }
        }
    }

    #[test]
    fn empty_root_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_manifest(dir.path()).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.counts(), [0, 0, 0]);
    }

    #[test]
    fn counts_and_order() {
        let dir = tempfile::tempdir().unwrap();
        mock(dir.path(), [7, 4, 5]);
        let m = build_manifest(dir.path()).unwrap();
        assert_eq!(m.counts(), [7, 4, 5]);
        assert!(m.records.windows(2).all(|w| w[0].id < w[1].id));
        assert!(m.records.iter().all(|r| r.session_id == DEFAULT_SESSION));
    }

    #[test]
    fn unpaired_and_unknown_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        mock(dir.path(), [2, 2, 2]);
        touch(&dir.path().join("blast/lonely_rgb.png"));
        touch(&dir.path().join("tungro/x_rgb.png"));
        let err = build_manifest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("lonely_rgb.png"), "{err}");
        assert!(err.contains("tungro"), "{err}");
    }

    #[test]
    fn sessions_csv_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        mock(dir.path(), [2, 1, 1]);
        fs::write(dir.path().join(SESSIONS_CSV), "id,session_id,lat,lon\nbl0001,s2,10.5,-66.25\n").unwrap();
        let m = build_manifest(dir.path()).unwrap();
        let r = m.records.iter().find(|r| r.id == "bl0001").unwrap();
        assert_eq!(r.session_id, "s2");
        assert_eq!(r.geotag, Some((10.5, -66.25)));

        let p = dir.path().join("manifest.csv");
        m.write_csv(&p, dir.path()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,rgb_path,rgnir_path,label,session_id,lat,lon\n"));
        assert!(text.contains("blast/bl0000_rgb.png"));
        assert_eq!(Manifest::read_csv(&p, dir.path()).unwrap(), m);
        assert_eq!(m.checksum(dir.path()).unwrap().len(), 64);
    }

    #[test]
    fn kfold_is_stratified_and_seeded() {
        let dir = tempfile::tempdir().unwrap();
        mock(dir.path(), [23, 11, 9]);
        let m = build_manifest(dir.path()).unwrap();
        let a = stratified_kfold(&m, 5, 7).unwrap();
        assert_eq!(a, stratified_kfold(&m, 5, 7).unwrap());
        let b = stratified_kfold(&m, 5, 8).unwrap();
        assert_ne!(a.folds, b.folds);
        for assign in [&a, &b] {
            for f in 0..5 {
                let sub = m.subset(&assign.indices(f));
                for (c, &n) in sub.counts().iter().zip(&m.counts()) {
                    let exact = n as f64 / 5.0;
                    assert!((*c as f64 - exact).abs() < 1.0 + 1e-12);
                }
            }
        }
        let one = stratified_kfold(&m, 1, 7).unwrap();
        assert!(one.folds.iter().all(|&f| f == 0));
        assert!(stratified_kfold(&m, 10, 7).is_err());
        assert!(stratified_kfold(&m, 0, 7).is_err());
    }

    #[test]
    fn fold_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        mock(dir.path(), [5, 5, 5]);
        let m = build_manifest(dir.path()).unwrap();
        let a = stratified_kfold(&m, 3, 1).unwrap();
        let p = dir.path().join("folds.csv");
        a.write_csv(&m, &p).unwrap();
        assert_eq!(FoldAssignment::read_csv(&m, &p, 1).unwrap(), a);
    }

    #[test]
    fn weights() {
        let w = class_weights_from_counts(&[1, 1, 2]).unwrap();
        let expect = [4.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0];
        assert!(w.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(class_weights_from_counts(&[4, 4, 4]).unwrap(), [1.0; 3]);
        assert!(class_weights_from_counts(&[3, 0, 1]).is_err());
    }
}
