//! Synthetic scenes, camera pairs, calibration targets and fused datasets.
//!
//! A scene is a procedural reflectance field defined on the whole plane, so
//! either camera can sample it at any resolution without resampling another
//! image. RGB texture is identical in distribution for every class; only the
//! NIR reflectance depends on the label.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::calibration::{Panel, Roi, Session};
use crate::dataset::{Label, LABELS, SESSIONS_CSV, SESSIONS_DIR};
use crate::error::{Error, Result};
use crate::imaging::{save_image, ImageF, Mask, RGB, RGNIR};
use crate::registration::Homography;
use crate::spectral::{compute_ndvi, fuse, FusedSample, NDVI_EPS};

/// Known reflectance of the four target panels (same in every band).
pub const PANEL_REFLECTANCE: [f64; 4] = [0.05, 0.20, 0.50, 0.85];

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = splitmix(seed ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, cell: f64, seed: u64) -> f64 {
    let (fx, fy) = (x / cell, y / cell);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - x0, fy - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(ix, iy, seed) * (1.0 - tx) + lattice(ix + 1, iy, seed) * tx;
    let b = lattice(ix, iy + 1, seed) * (1.0 - tx) + lattice(ix + 1, iy + 1, seed) * tx;
    a * (1.0 - ty) + b * ty
}

/// Plant canopy reflectance field for one sample.
#[derive(Debug, Clone, Copy)]
pub struct Scene {
    pub seed: u64,
    /// Mean NIR reflectance; the only label-dependent quantity.
    pub nir_level: f64,
}

/// Class NIR level: healthy canopy reflects the most NIR.
pub fn nir_level(label: Label) -> f64 {
    match label {
        Label::Blast => 0.28,
        Label::BrownSpot => 0.38,
        Label::Healthy => 0.50,
    }
}

impl Scene {
    pub fn new(label: Label, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter: f64 = rng.random_range(-0.03..0.03);
        Self {
            seed,
            nir_level: nir_level(label) + jitter,
        }
    }

    /// Reflectance `[R, G, B, NIR]` at a scene point.
    pub fn reflectance(&self, x: f64, y: f64) -> [f64; 4] {
        let t = 0.65 * value_noise(x, y, 5.0, self.seed) + 0.35 * value_noise(x, y, 13.0, self.seed ^ 0x51);
        let t2 = value_noise(x, y, 9.0, self.seed ^ 0xa7);
        [
            0.06 + 0.12 * t,
            0.10 + 0.25 * t,
            0.04 + 0.08 * t,
            self.nir_level * (0.85 + 0.3 * t2),
        ]
    }

    /// Mean reflectance over a square pixel footprint of side `scale`.
    fn pixel(&self, x: f64, y: f64, scale: f64) -> [f64; 4] {
        const S: usize = 3;
        let mut acc = [0.0; 4];
        for j in 0..S {
            for i in 0..S {
                let dx = ((i as f64 + 0.5) / S as f64 - 0.5) * scale;
                let dy = ((j as f64 + 0.5) / S as f64 - 0.5) * scale;
                let r = self.reflectance(x + dx, y + dy);
                for c in 0..4 {
                    acc[c] += r[c];
                }
            }
        }
        acc.map(|v| v / (S * S) as f64)
    }
}

/// Affine DN response of the R-G-NIR camera in one session:
/// `DN = gain * reflectance + offset` per band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraResponse {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl CameraResponse {
    pub fn for_session(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca11);
        Self {
            gain: std::array::from_fn(|_| rng.random_range(0.7..1.0)),
            offset: std::array::from_fn(|_| rng.random_range(0.02..0.08)),
        }
    }

    pub fn dn(&self, band: usize, reflectance: f64) -> f64 {
        self.gain[band] * reflectance + self.offset[band]
    }
}

/// Phone RGB response: linear, class-agnostic.
fn phone_rgb(r: [f64; 4]) -> [f32; 3] {
    [r[0], r[1], r[2]].map(|v| (0.8 * v + 0.03) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry {
    pub rgnir_size: (usize, usize),
    pub rgb_size: (usize, usize),
    /// Scene pixels per RGB pixel (the RGB camera has the wider view).
    pub scale: f64,
    /// In-plane rotation of the RGB camera, radians.
    pub rotation: f64,
    /// Projective terms of the RGB -> R-G-NIR map.
    pub perspective: (f64, f64),
}

impl Default for PairGeometry {
    fn default() -> Self {
        Self {
            rgnir_size: (128, 128),
            rgb_size: (128, 128),
            scale: 1.44,
            rotation: 0.03,
            perspective: (2e-5, -1.5e-5),
        }
    }
}

impl PairGeometry {
    /// Maps RGB pixel coordinates to R-G-NIR pixel (= scene) coordinates; the
    /// two image centres coincide.
    pub fn homography(&self) -> Result<Homography> {
        let (cu, cv) = ((self.rgb_size.0 - 1) as f64 / 2.0, (self.rgb_size.1 - 1) as f64 / 2.0);
        let (cx, cy) = ((self.rgnir_size.0 - 1) as f64 / 2.0, (self.rgnir_size.1 - 1) as f64 / 2.0);
        let (s, c) = (self.scale * self.rotation.sin(), self.scale * self.rotation.cos());
        let (p, q) = self.perspective;
        let centre = Homography::translation(-cu, -cv);
        let core = Homography::from_rows([[c, -s, 0.0], [s, c, 0.0], [p, q, 1.0]])?;
        Homography::translation(cx, cy).after(&core.after(&centre)?)
    }
}

/// Renders an (RGB, R-G-NIR DN) pair of one scene.
pub fn render_pair(scene: &Scene, camera: &CameraResponse, geo: &PairGeometry) -> Result<(ImageF, ImageF)> {
    let h = geo.homography()?;
    let (rw, rh) = geo.rgb_size;
    let mut rgb = Vec::with_capacity(rw * rh * 3);
    for v in 0..rh {
        for u in 0..rw {
            let (x, y) = h
                .apply(u as f64, v as f64)
                .ok_or_else(|| Error::Invalid("fixture homography sends a pixel to infinity".into()))?;
            rgb.extend_from_slice(&phone_rgb(scene.pixel(x, y, geo.scale)));
        }
    }
    let (w, hh) = geo.rgnir_size;
    let mut dn = Vec::with_capacity(w * hh * 3);
    for y in 0..hh {
        for x in 0..w {
            let r = scene.pixel(x as f64, y as f64, 1.0);
            for (b, refl) in [r[0], r[1], r[3]].into_iter().enumerate() {
                dn.push(camera.dn(b, refl).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok((ImageF::new(rw, rh, RGB.to_vec(), rgb)?, ImageF::new(w, hh, RGNIR.to_vec(), dn)?))
}

/// Calibration target as seen by the R-G-NIR camera: four uniform panels on
/// a textured background, with slight sensor noise.
pub fn render_target(camera: &CameraResponse, w: usize, h: usize, seed: u64) -> Result<(ImageF, Vec<Panel>)> {
    let side = (w.min(h) / 4).max(8);
    let margin = 2;
    let origins = [(w / 4, h / 4), (3 * w / 4, h / 4), (w / 4, 3 * h / 4), (3 * w / 4, 3 * h / 4)]
        .map(|(cx, cy)| (cx - side / 2, cy - side / 2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a26);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let panel = origins
                .iter()
                .position(|&(ox, oy)| x >= ox && x < ox + side && y >= oy && y < oy + side);
            let refl = match panel {
                Some(i) => PANEL_REFLECTANCE[i],
                None => 0.3 + 0.2 * value_noise(x as f64, y as f64, 6.0, seed),
            };
            for b in 0..3 {
                let noise: f64 = rng.random_range(-0.002..0.002);
                data.push((camera.dn(b, refl) + noise).clamp(0.0, 1.0) as f32);
            }
        }
    }
    let panels = origins
        .iter()
        .zip(PANEL_REFLECTANCE)
        .map(|(&(ox, oy), r)| Panel {
            roi: Roi {
                x: ox + margin,
                y: oy + margin,
                w: side - 2 * margin,
                h: side - 2 * margin,
            },
            reflectance: [r; 3],
        })
        .collect();
    Ok((ImageF::new(w, h, RGNIR.to_vec(), data)?, panels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureParams {
    /// Samples per class in blast, brown_spot, healthy order.
    pub per_class: [usize; 3],
    pub sessions: usize,
    pub geometry: PairGeometry,
    pub seed: u64,
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self {
            per_class: [4, 3, 2],
            sessions: 2,
            geometry: PairGeometry::default(),
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct SessionOut<'a> {
    id: &'a str,
    target_image: &'a str,
    panels: &'a [Panel],
}

pub fn sample_id(label: Label, i: usize) -> String {
    let tag = match label {
        Label::Blast => "bl",
        Label::BrownSpot => "bs",
        Label::Healthy => "he",
    };
    format!("{tag}{i:04}")
}

/// Writes a complete data root: `<label>/<id>_rgb.png`, `<label>/<id>_rgnir.png`,
/// `sessions.csv`, and `sessions/<sid>.toml` with its target image.
pub fn write_fixtures(root: &Path, params: &FixtureParams) -> Result<usize> {
    if params.sessions == 0 {
        return Err(Error::Config("fixtures need at least one session".into()));
    }
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let sess_dir = root.join(SESSIONS_DIR);
    mkdir(&sess_dir)?;
    let cameras: Vec<CameraResponse> = (0..params.sessions)
        .map(|s| CameraResponse::for_session(params.seed.wrapping_add(s as u64)))
        .collect();
    for (s, cam) in cameras.iter().enumerate() {
        let sid = format!("s{}", s + 1);
        let (w, h) = params.geometry.rgnir_size;
        let (target, panels) = render_target(cam, w, h, params.seed.wrapping_add(1000 + s as u64))?;
        let img_name = format!("{sid}_target.png");
        save_image(&target, &sess_dir.join(&img_name))?;
        let text = toml::to_string(&SessionOut {
            id: &sid,
            target_image: &img_name,
            panels: &panels,
        })
        .map_err(|e| Error::Invalid(e.to_string()))?;
        let p = sess_dir.join(format!("{sid}.toml"));
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        // parse back so a broken writer fails here rather than downstream
        Session::load(&p)?;
    }

    let mut sessions_csv = String::from("id,session_id,lat,lon\n");
    let mut n = 0;
    for (label, &count) in LABELS.iter().zip(&params.per_class) {
        let dir = root.join(label.as_str());
        mkdir(&dir)?;
        for i in 0..count {
            let id = sample_id(*label, i);
            let s = n % params.sessions;
            let seed = splitmix(params.seed ^ splitmix(n as u64 + 1));
            let scene = Scene::new(*label, seed);
            let (rgb, rgnir) = render_pair(&scene, &cameras[s], &params.geometry)?;
            save_image(&rgb, &dir.join(format!("{id}_rgb.png")))?;
            save_image(&rgnir, &dir.join(format!("{id}_rgnir.png")))?;
            let lat = 10.0 + (n as f64) * 1e-4;
            sessions_csv.push_str(&format!("{id},s{},{lat:.4},-66.9000\n", s + 1));
            n += 1;
        }
    }
    let p = root.join(SESSIONS_CSV);
    fs::write(&p, sessions_csv).map_err(|e| Error::io(&p, e))?;
    Ok(n)
}

/// Directly rendered, already aligned fused samples: RGB from the phone
/// response, NDVI from the true reflectance. Used where registration and
/// calibration are not under test.
pub fn fused_dataset(per_class: [usize; 3], size: usize, seed: u64) -> Result<Vec<(String, Label, FusedSample)>> {
    let mut out = Vec::with_capacity(per_class.iter().sum());
    let mut n = 0u64;
    for (label, &count) in LABELS.iter().zip(&per_class) {
        for i in 0..count {
            let scene = Scene::new(*label, splitmix(seed ^ splitmix(n + 1)));
            n += 1;
            // each sample views a different patch of its scene
            let field = 96.0;
            let step = field / size as f64;
            let mut rgb = Vec::with_capacity(size * size * 3);
            let (mut red, mut nir) = (Vec::with_capacity(size * size), Vec::with_capacity(size * size));
            for y in 0..size {
                for x in 0..size {
                    let r = scene.pixel((x as f64 + 0.5) * step, (y as f64 + 0.5) * step, step);
                    rgb.extend_from_slice(&phone_rgb(r));
                    red.push(r[0] as f32);
                    nir.push(r[3] as f32);
                }
            }
            let ndvi = compute_ndvi(&red, &nir, NDVI_EPS)?;
            let rgb = ImageF::new(size, size, RGB.to_vec(), rgb)?;
            let ndvi = ImageF::new(size, size, vec![crate::imaging::Band::Ndvi], ndvi)?;
            let fused = fuse(&rgb, &ndvi, &Mask::all_valid(size, size))?;
            out.push((sample_id(*label, i), *label, fused));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Band;

    #[test]
    fn noise_is_deterministic_and_bounded() {
        for i in 0..200 {
            let (x, y) = (i as f64 * 0.37 - 20.0, i as f64 * 1.3);
            let v = value_noise(x, y, 5.0, 9);
            assert!((0.0..1.0).contains(&v));
            assert_eq!(v, value_noise(x, y, 5.0, 9));
        }
    }

    #[test]
    fn pair_is_consistent_with_its_homography() {
        let geo = PairGeometry {
            rgnir_size: (64, 64),
            rgb_size: (64, 64),
            ..Default::default()
        };
        let scene = Scene::new(Label::Healthy, 3);
        let cam = CameraResponse::for_session(1);
        let (rgb, rgnir) = render_pair(&scene, &cam, &geo).unwrap();
        assert_eq!(rgb.bands(), RGB);
        assert_eq!(rgnir.bands(), RGNIR);
        // the R-G-NIR view lies inside the wider RGB view
        let inv = geo.homography().unwrap().inverse().unwrap();
        for (x, y) in [(0.0, 0.0), (63.0, 0.0), (0.0, 63.0), (63.0, 63.0)] {
            let (u, v) = inv.apply(x, y).unwrap();
            assert!((0.0..=63.0).contains(&u) && (0.0..=63.0).contains(&v), "{u},{v}");
        }
    }

    #[test]
    fn ndvi_separates_classes_but_rgb_does_not() {
        let data = fused_dataset([6, 6, 6], 24, 5).unwrap();
        let mean = |s: &FusedSample, b: Band| {
            let p = s.image.plane(b).unwrap();
            p.iter().sum::<f32>() / p.len() as f32
        };
        let mut ndvi = [Vec::new(), Vec::new(), Vec::new()];
        let mut green = [Vec::new(), Vec::new(), Vec::new()];
        for (_, l, s) in &data {
            ndvi[l.index()].push(mean(s, Band::Ndvi));
            green[l.index()].push(mean(s, Band::G));
        }
        let max = |v: &Vec<f32>| v.iter().cloned().fold(f32::MIN, f32::max);
        let min = |v: &Vec<f32>| v.iter().cloned().fold(f32::MAX, f32::min);
        assert!(max(&ndvi[0]) < min(&ndvi[1]) && max(&ndvi[1]) < min(&ndvi[2]));
        // green ranges overlap across classes
        assert!(min(&green[0]) < max(&green[2]) && min(&green[2]) < max(&green[0]));
    }

    #[test]
    fn fixtures_form_a_valid_root() {
        let dir = tempfile::tempdir().unwrap();
        let params = FixtureParams {
            per_class: [1, 1, 1],
            geometry: PairGeometry {
                rgnir_size: (48, 48),
                rgb_size: (48, 48),
                ..Default::default()
            },
            ..Default::default()
        };
        assert_eq!(write_fixtures(dir.path(), &params).unwrap(), 3);
        let m = crate::dataset::build_manifest(dir.path()).unwrap();
        assert_eq!(m.counts(), [1, 1, 1]);
        assert_eq!(m.records[0].session_id, "s1");
        let s = Session::load(&dir.path().join("sessions/s2.toml")).unwrap();
        assert!(s.target_image.exists());
    }
}
