//! Batch stages over a manifest: register, calibrate, NDVI + fusion, and
//! loading the fused cache for training. Each stage works per sample and
//! reports per-sample failures instead of aborting the batch.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::calibration::{apply_calibration, extract_panel_stats, fit_calibration, BandCalibration, Session};
use crate::dataset::{Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, Mask, RGB, RGNIR};
use crate::registration::{register_pair, Diagnostics, RegistrationParams};
use crate::spectral::{fuse_resized, ndvi_image, FusedSample};
use crate::training::{InputMode, SampleSet};

/// Runs `f` over `items` on at most `jobs` threads; results keep input order.
pub fn run_parallel<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> O + Sync + Send) -> Result<Vec<O>> {
    if jobs <= 1 {
        return Ok(items.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn registered_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}_rgb.png")), dir.join(format!("{id}_mask.png")))
}

pub fn fused_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.pspec")), dir.join(format!("{id}_mask.png")))
}

/// Outcome of registering one pair.
pub struct RegisterOutcome {
    pub id: String,
    pub result: Result<Diagnostics>,
}

/// Registers every record and, unless `dry_run`, writes the warped RGB and
/// its validity mask into `out_dir`.
pub fn register_all(
    records: &[SampleRecord],
    params: &RegistrationParams,
    out_dir: &Path,
    jobs: usize,
    dry_run: bool,
) -> Result<Vec<RegisterOutcome>> {
    if !dry_run {
        mkdir(out_dir)?;
    }
    run_parallel(records, jobs, |r| {
        let result = (|| {
            let rgb = load_image(&r.rgb_path, &RGB)?;
            let rgnir = load_image(&r.rgnir_path, &RGNIR)?;
            if dry_run {
                return Ok(None);
            }
            let reg = register_pair(&rgb, &rgnir, params)?;
            let (img, mask) = registered_paths(out_dir, &r.id);
            save_image(&reg.image, &img)?;
            reg.mask.save_png(&mask)?;
            Ok(Some(reg.diagnostics))
        })();
        RegisterOutcome {
            id: r.id.clone(),
            result: result.map(|d| d.unwrap_or_else(empty_diagnostics)),
        }
    })
}

fn empty_diagnostics() -> Diagnostics {
    Diagnostics {
        keypoints_rgb: 0,
        keypoints_rgnir: 0,
        dropped_rgb: 0,
        dropped_rgnir: 0,
        matches: 0,
        filtered: 0,
        inliers: 0,
        mean_residual: 0.0,
        homography: crate::registration::Homography::identity(),
    }
}

/// `id,status,stage,keypoints_rgb,keypoints_rgnir,matches,filtered,inliers,mean_residual,h,message`
pub fn register_report(outcomes: &[RegisterOutcome]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "id",
        "status",
        "stage",
        "keypoints_rgb",
        "keypoints_rgnir",
        "matches",
        "filtered",
        "inliers",
        "mean_residual",
        "homography",
        "message",
    ])?;
    for o in outcomes {
        match &o.result {
            Ok(d) => {
                let h = d
                    .homography
                    .rows()
                    .iter()
                    .flatten()
                    .map(|v| format!("{v:.9e}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                w.write_record([
                    o.id.clone(),
                    "ok".into(),
                    String::new(),
                    d.keypoints_rgb.to_string(),
                    d.keypoints_rgnir.to_string(),
                    d.matches.to_string(),
                    d.filtered.to_string(),
                    d.inliers.to_string(),
                    format!("{:.6}", d.mean_residual),
                    h,
                    String::new(),
                ])?;
            }
            Err(e) => {
                let stage = match e {
                    Error::Registration { stage, .. } => stage.to_string(),
                    _ => "input".to_string(),
                };
                let mut row = vec![o.id.clone(), "failed".into(), stage];
                row.extend(std::iter::repeat_n(String::new(), 7));
                row.push(e.to_string());
                w.write_record(row)?;
            }
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?).map_err(|e| Error::Invalid(e.to_string()))
}

/// Session files (`*.toml`) under `dir`, sorted by file name.
pub fn session_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    out.sort();
    Ok(out)
}

pub fn calibrate_session(path: &Path) -> Result<(String, BandCalibration)> {
    let s = Session::load(path)?;
    let target = load_image(&s.target_image, &RGNIR)?;
    let means = extract_panel_stats(&target, &s.spec())?;
    let calib = fit_calibration(&means, &s.spec().known_reflectance())?;
    Ok((s.id, calib))
}

pub fn load_calibrations(dir: &Path) -> Result<BTreeMap<String, BandCalibration>> {
    let mut out = BTreeMap::new();
    for p in session_files(dir)? {
        let id = p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        out.insert(id, BandCalibration::load(&p)?);
    }
    Ok(out)
}

pub struct NdviOutcome {
    pub id: String,
    pub result: Result<f64>,
}

/// Calibrates each R-G-NIR frame with its session, computes NDVI, and fuses
/// it with the registered RGB into the cache at `size x size`. Returns the
/// clamp rate per sample.
pub fn ndvi_all(
    records: &[SampleRecord],
    calibrations: &BTreeMap<String, BandCalibration>,
    registered_dir: &Path,
    ndvi_dir: &Path,
    fused_dir: &Path,
    size: usize,
    jobs: usize,
) -> Result<Vec<NdviOutcome>> {
    mkdir(ndvi_dir)?;
    mkdir(fused_dir)?;
    run_parallel(records, jobs, |r| {
        let result = (|| {
            let calib = calibrations
                .get(&r.session_id)
                .ok_or_else(|| Error::Calibration(format!("no calibration for session {}", r.session_id)))?;
            let dn = load_image(&r.rgnir_path, &RGNIR)?;
            let (refl, rep) = apply_calibration(&dn, calib)?;
            let ndvi = ndvi_image(&refl)?;
            crate::imaging::save_array(&ndvi, &ndvi_dir.join(format!("{}_ndvi.pspec", r.id)))?;
            let (rgb_path, mask_path) = registered_paths(registered_dir, &r.id);
            let rgb = load_image(&rgb_path, &RGB)?;
            let mask = Mask::load_png(&mask_path)?;
            let fused = fuse_resized(&rgb, &ndvi, &mask, size)?;
            let (a, m) = fused_paths(fused_dir, &r.id);
            fused.save(&a, &m)?;
            Ok(rep.clamp_rate)
        })();
        NdviOutcome {
            id: r.id.clone(),
            result: result.map_err(|e: Error| e.in_sample(&r.id)),
        }
    })
}

/// Loads the fused cache for every manifest record, in manifest order.
pub fn load_fused_set(manifest: &Manifest, fused_dir: &Path, mode: InputMode) -> Result<SampleSet> {
    let items = manifest
        .records
        .iter()
        .map(|r| {
            let (a, m) = fused_paths(fused_dir, &r.id);
            let s = FusedSample::load(&a, &m).map_err(|e| e.in_sample(&r.id))?;
            Ok((r.id.clone(), r.label.index(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    SampleSet::from_fused(&items, mode)
}
