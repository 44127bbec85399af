//! Reflectance calibration from a four-panel ground target.
//!
//! Each band gets an affine map `reflectance = gain * DN + offset` fitted by
//! least squares to the trimmed panel means.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Band, ImageF, RGNIR};

/// Fraction trimmed from each end of a panel's pixel values.
pub const TRIM: f64 = 0.05;
pub const MIN_ROI_PIXELS: usize = 25;
/// Clamp rate above which `apply_calibration` warns.
pub const CLAMP_WARN_RATE: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Roi {
    fn overlaps(&self, o: &Roi) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Panel {
    pub roi: Roi,
    /// Known reflectance in R, G, NIR order.
    pub reflectance: [f64; 3],
}

/// The four calibration panels plus the ROI quality threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSpec {
    pub panels: Vec<Panel>,
    /// Largest trimmed variance an ROI may show before it is considered
    /// misplaced.
    #[serde(default = "default_max_variance")]
    pub max_roi_variance: f64,
}

fn default_max_variance() -> f64 {
    0.01
}

impl PanelSpec {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.panels.len() != 4 {
            return Err(Error::Calibration(format!("{} panels; the target has 4", self.panels.len())));
        }
        for (i, p) in self.panels.iter().enumerate() {
            let r = &p.roi;
            if r.w * r.h < MIN_ROI_PIXELS {
                return Err(Error::Calibration(format!(
                    "panel {i}: ROI has {} pixels, need at least {MIN_ROI_PIXELS}",
                    r.w * r.h
                )));
            }
            if r.x + r.w > width || r.y + r.h > height {
                return Err(Error::Calibration(format!(
                    "panel {i}: ROI {r:?} outside the {width}x{height} image"
                )));
            }
            if p.reflectance.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Calibration(format!(
                    "panel {i}: reflectance {:?} outside [0, 1]",
                    p.reflectance
                )));
            }
            for (j, q) in self.panels.iter().enumerate().skip(i + 1) {
                if r.overlaps(&q.roi) {
                    return Err(Error::Calibration(format!("panels {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn known_reflectance(&self) -> [[f64; 3]; 4] {
        let mut out = [[0.0; 3]; 4];
        for (o, p) in out.iter_mut().zip(&self.panels) {
            *o = p.reflectance;
        }
        out
    }
}

/// Capture-session file: where the target image is and what it shows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub id: String,
    /// Relative paths resolve against the session file's directory.
    pub target_image: PathBuf,
    pub panels: Vec<Panel>,
    #[serde(default = "default_max_variance")]
    pub max_roi_variance: f64,
}

impl Session {
    pub fn load(path: &Path) -> Result<Session> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s: Session = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if s.target_image.is_relative() {
            if let Some(dir) = path.parent() {
                s.target_image = dir.join(&s.target_image);
            }
        }
        Ok(s)
    }

    pub fn spec(&self) -> PanelSpec {
        PanelSpec {
            panels: self.panels.clone(),
            max_roi_variance: self.max_roi_variance,
        }
    }
}

fn trimmed_stats(mut values: Vec<f64>) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let k = (values.len() as f64 * TRIM).floor() as usize;
    let kept = &values[k..values.len() - k];
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Trimmed per-band means of each panel ROI; rows are panels, columns R, G,
/// NIR.
pub fn extract_panel_stats(img: &ImageF, spec: &PanelSpec) -> Result<[[f64; 3]; 4]> {
    spec.validate(img.width(), img.height())?;
    let bands = RGNIR.map(|b| img.band_index(b));
    let mut out = [[0.0; 3]; 4];
    for (pi, panel) in spec.panels.iter().enumerate() {
        let r = panel.roi;
        for (bi, band) in bands.iter().enumerate() {
            let c = *band.as_ref().map_err(|e| Error::Calibration(e.to_string()))?;
            let values: Vec<f64> = (r.y..r.y + r.h)
                .flat_map(|y| (r.x..r.x + r.w).map(move |x| (x, y)))
                .map(|(x, y)| img.get(x, y, c) as f64)
                .collect();
            let (mean, var) = trimmed_stats(values);
            if var > spec.max_roi_variance {
                return Err(Error::Calibration(format!(
                    "panel {pi} band {}: trimmed variance {var:.4} exceeds {} (ROI misplaced?)",
                    RGNIR[bi], spec.max_roi_variance
                )));
            }
            out[pi][bi] = mean;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandFit {
    pub gain: f64,
    pub offset: f64,
    /// RMS of the fit over the panels.
    pub residual: f64,
}

impl BandFit {
    pub fn apply(&self, dn: f64) -> f64 {
        self.gain * dn + self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandCalibration {
    pub bands: Vec<Band>,
    pub fits: Vec<BandFit>,
}

impl BandCalibration {
    pub fn identity() -> Self {
        let fit = BandFit {
            gain: 1.0,
            offset: 0.0,
            residual: 0.0,
        };
        Self {
            bands: RGNIR.to_vec(),
            fits: vec![fit; 3],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(&CalibrationFile::from(self)).map_err(|e| Error::Calibration(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CalibrationFile = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        file.try_into().map_err(|e: Error| Error::format(path, e.to_string()))
    }
}

/// On-disk form: one table per band so the file reads naturally.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    band: Vec<BandEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BandEntry {
    name: String,
    gain: f64,
    offset: f64,
    residual: f64,
}

impl From<&BandCalibration> for CalibrationFile {
    fn from(c: &BandCalibration) -> Self {
        CalibrationFile {
            band: c
                .bands
                .iter()
                .zip(&c.fits)
                .map(|(b, f)| BandEntry {
                    name: b.to_string(),
                    gain: f.gain,
                    offset: f.offset,
                    residual: f.residual,
                })
                .collect(),
        }
    }
}

impl TryFrom<CalibrationFile> for BandCalibration {
    type Error = Error;

    fn try_from(f: CalibrationFile) -> Result<Self> {
        let bands = f.band.iter().map(|b| b.name.parse()).collect::<Result<Vec<Band>>>()?;
        let fits = f
            .band
            .iter()
            .map(|b| BandFit {
                gain: b.gain,
                offset: b.offset,
                residual: b.residual,
            })
            .collect();
        Ok(BandCalibration { bands, fits })
    }
}

/// Per-band least-squares line through (panel mean DN, known reflectance).
pub fn fit_calibration(panel_means: &[[f64; 3]; 4], known: &[[f64; 3]; 4]) -> Result<BandCalibration> {
    let mut fits = Vec::with_capacity(3);
    for b in 0..3 {
        let xs: Vec<f64> = panel_means.iter().map(|r| r[b]).collect();
        let ys: Vec<f64> = known.iter().map(|r| r[b]).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        if sxx <= 1e-12 * (1.0 + mx * mx) {
            return Err(Error::Calibration(format!(
                "band {}: panel means {xs:?} are all equal; cannot fit a line",
                RGNIR[b]
            )));
        }
        let gain = sxy / sxx;
        let offset = my - gain * mx;
        if !(gain > 0.0) {
            return Err(Error::Calibration(format!(
                "band {}: fitted gain {gain:.4} is not positive",
                RGNIR[b]
            )));
        }
        let residual = (xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (gain * x + offset - y).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        fits.push(BandFit { gain, offset, residual });
    }
    Ok(BandCalibration {
        bands: RGNIR.to_vec(),
        fits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApplyReport {
    /// Fraction of samples that fell outside `[0, 1]` before clamping.
    pub clamp_rate: f64,
}

/// Maps every band through its fit and clamps to `[0, 1]`.
pub fn apply_calibration(img: &ImageF, calib: &BandCalibration) -> Result<(ImageF, ApplyReport)> {
    if img.channels() != calib.bands.len() {
        return Err(Error::Calibration(format!(
            "image has {} bands, calibration covers {}",
            img.channels(),
            calib.bands.len()
        )));
    }
    let fits: Vec<BandFit> = img
        .bands()
        .iter()
        .map(|b| {
            calib
                .bands
                .iter()
                .position(|c| c == b)
                .map(|i| calib.fits[i])
                .ok_or_else(|| Error::Calibration(format!("no calibration for band {b}")))
        })
        .collect::<Result<_>>()?;
    let c = img.channels();
    let mut out = img.clone();
    let mut clamped = 0usize;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let r = fits[i % c].apply(*v as f64);
        if !(0.0..=1.0).contains(&r) {
            clamped += 1;
        }
        *v = r.clamp(0.0, 1.0) as f32;
    }
    let clamp_rate = clamped as f64 / img.data().len() as f64;
    if clamp_rate > CLAMP_WARN_RATE {
        log::warn!(
            "calibration clamped {:.1}% of samples to [0, 1]; check the target ROIs",
            100.0 * clamp_rate
        );
    }
    Ok((out, ApplyReport { clamp_rate }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LEVELS: [f64; 4] = [0.1, 0.3, 0.6, 0.9];

    fn target(values: [f64; 4]) -> (ImageF, PanelSpec) {
        let (w, h) = (80, 20);
        let mut data = vec![0.5f32; w * h * 3];
        let mut panels = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            let roi = Roi {
                x: 2 + 20 * i,
                y: 2,
                w: 16,
                h: 16,
            };
            for y in roi.y..roi.y + roi.h {
                for x in roi.x..roi.x + roi.w {
                    for c in 0..3 {
                        data[(y * w + x) * 3 + c] = v as f32;
                    }
                }
            }
            panels.push(Panel {
                roi,
                reflectance: [v; 3],
            });
        }
        let img = ImageF::new(w, h, RGNIR.to_vec(), data).unwrap();
        (
            img,
            PanelSpec {
                panels,
                max_roi_variance: 0.01,
            },
        )
    }

    #[test]
    fn uniform_panels_give_exact_means() {
        let (img, spec) = target(LEVELS);
        let m = extract_panel_stats(&img, &spec).unwrap();
        for (row, &v) in m.iter().zip(&LEVELS) {
            assert!(row.iter().all(|&x| (x - v).abs() < 1e-7));
        }
    }

    #[test]
    fn trimmed_mean_rejects_salt_noise() {
        let (mut img, spec) = target(LEVELS);
        let w = img.width();
        // 12 of 256 pixels per panel (under 5%) forced to white or black
        for (pi, panel) in spec.panels.iter().enumerate() {
            for k in 0..12 {
                let (x, y) = (panel.roi.x + (k * 5 + pi) % 16, panel.roi.y + (k * 7) % 16);
                let v = if k % 2 == 0 { 1.0 } else { 0.0 };
                for c in 0..3 {
                    img.data_mut()[(y * w + x) * 3 + c] = v;
                }
            }
        }
        let m = extract_panel_stats(&img, &spec).unwrap();
        for (row, &v) in m.iter().zip(&LEVELS) {
            assert!(row.iter().all(|&x| (x - v).abs() < 1e-3), "{row:?} vs {v}");
        }
    }

    #[test]
    fn roi_errors() {
        let (img, mut spec) = target(LEVELS);
        spec.panels[3].roi.x = 75;
        assert!(matches!(extract_panel_stats(&img, &spec), Err(Error::Calibration(_))));

        let (img, mut spec) = target(LEVELS);
        spec.panels[1].roi.x = 10;
        assert!(extract_panel_stats(&img, &spec).unwrap_err().to_string().contains("overlap"));

        let (img, mut spec) = target(LEVELS);
        spec.panels[0].roi = Roi { x: 0, y: 0, w: 4, h: 6 };
        assert!(extract_panel_stats(&img, &spec).is_err());

        // an ROI straddling a panel edge has high variance
        let (img, mut spec) = target(LEVELS);
        spec.panels[2].roi.x = 34;
        spec.panels[1].roi.x = 60;
        spec.panels[3].roi.y = 0;
        spec.panels[3].roi.h = 20;
        spec.panels[3].roi.x = 78;
        spec.panels[3].roi.w = 2;
        assert!(extract_panel_stats(&img, &spec).unwrap_err().to_string().contains("variance"));
    }

    #[test]
    fn identity_fit() {
        let known = LEVELS.map(|v| [v; 3]);
        let c = fit_calibration(&known, &known).unwrap();
        for f in &c.fits {
            assert!((f.gain - 1.0).abs() < 1e-12 && f.offset.abs() < 1e-12 && f.residual < 1e-12);
        }
    }

    #[test]
    fn affine_distortion_is_inverted() {
        let known = LEVELS.map(|v| [v; 3]);
        let means = LEVELS.map(|v| [0.5 * v + 0.1; 3]);
        let c = fit_calibration(&means, &known).unwrap();
        for f in &c.fits {
            assert!((f.gain - 2.0).abs() < 1e-12);
            assert!((f.offset + 0.2).abs() < 1e-12);
            assert!(f.residual < 1e-12);
        }
    }

    #[test]
    fn degenerate_or_inverted_fits_fail() {
        let known = LEVELS.map(|v| [v; 3]);
        assert!(fit_calibration(&[[0.4; 3]; 4], &known).is_err());
        let inverted = LEVELS.map(|v| [1.0 - v; 3]);
        assert!(fit_calibration(&inverted, &known).unwrap_err().to_string().contains("gain"));
    }

    #[test]
    fn apply_affine_and_clamp() {
        let img = ImageF::new(2, 1, RGNIR.to_vec(), vec![0.4, 0.4, 0.4, 0.55, 0.55, 0.55]).unwrap();
        let fit = BandFit {
            gain: 2.0,
            offset: -0.2,
            residual: 0.0,
        };
        let calib = BandCalibration {
            bands: RGNIR.to_vec(),
            fits: vec![fit; 3],
        };
        let (out, rep) = apply_calibration(&img, &calib).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-6);
        assert_eq!(rep.clamp_rate, 0.0);

        let calib = BandCalibration {
            fits: vec![BandFit { offset: 0.0, ..fit }; 3],
            ..calib
        };
        let (out, rep) = apply_calibration(&img, &calib).unwrap();
        assert_eq!(out.data()[3], 1.0);
        assert!((rep.clamp_rate - 0.5).abs() < 1e-12);

        let (same, rep) = apply_calibration(&img, &BandCalibration::identity()).unwrap();
        assert_eq!(same, img);
        assert_eq!(rep.clamp_rate, 0.0);
    }

    #[test]
    fn band_count_must_match() {
        let img = ImageF::filled(2, 2, vec![Band::G], 0.5).unwrap();
        assert!(apply_calibration(&img, &BandCalibration::identity()).is_err());
    }

    #[test]
    fn calibration_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let known = LEVELS.map(|v| [v; 3]);
        let means = LEVELS.map(|v| [0.7 * v + 0.05; 3]);
        let c = fit_calibration(&means, &known).unwrap();
        let p = dir.path().join("calib.toml");
        c.save(&p).unwrap();
        assert_eq!(BandCalibration::load(&p).unwrap(), c);
    }

    #[test]
    fn session_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("session.toml");
        let text = r#"
id = "s1"
target_image = "target.png"
max_roi_variance = 0.02

[[panels]]
roi = { x = 0, y = 0, w = 5, h = 5 }
reflectance = [0.1, 0.1, 0.1]
"#;
        fs::write(&p, text).unwrap();
        let s = Session::load(&p).unwrap();
        assert_eq!(s.target_image, dir.path().join("target.png"));
        assert_eq!(s.spec().panels.len(), 1);
        assert_eq!(s.spec().max_roi_variance, 0.02);
        fs::write(&p, format!("{text}\nbogus = 1\n")).unwrap();
        assert!(Session::load(&p).is_err());
    }
}
