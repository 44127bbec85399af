//! Oriented FAST keypoints and rotated BRIEF descriptors.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::imaging::{resize_bilinear, ImageF};

/// Descriptor tests must stay this far (in level pixels) from every border.
pub const BORDER: usize = 16;
/// Radius of the disc used for the intensity centroid.
const CENTROID_RADIUS: i32 = 15;
/// Pattern points lie inside this radius, so any rotation stays in bounds.
const PATTERN_RADIUS: f64 = 13.0;
const HARRIS_K: f32 = 0.04;
const HARRIS_RADIUS: i32 = 3;
/// Gaussian window on the structure tensor. A flat window puts the response
/// peak two pixels inside a right-angle corner; this one puts it on the
/// corner pixel.
const HARRIS_SIGMA: f32 = 0.8;
/// Lowest FAST threshold tried when tuning toward the target count.
const MIN_THRESHOLD: f32 = 1.0 / 512.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Position in the base image.
    pub x: f64,
    pub y: f64,
    /// Harris response at the detection level.
    pub score: f32,
    /// Intensity-centroid orientation, radians.
    pub angle: f64,
    pub level: usize,
    /// Integer position at the detection level.
    pub level_x: usize,
    pub level_y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn complement(&self) -> Descriptor {
        Descriptor(self.0.map(|w| !w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    pub target_count: usize,
    pub octaves: usize,
    pub scale_factor: f64,
    /// Starting FAST threshold on `[0, 1]` intensities; lowered per level
    /// until the level's quota is met.
    pub fast_threshold: f32,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            target_count: 10_000,
            octaves: 4,
            scale_factor: 1.2,
            fast_threshold: 20.0 / 255.0,
        }
    }
}

/// Single-channel plane used inside the detector.
#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub px: Vec<f32>,
}

impl Plane {
    fn at(&self, x: i32, y: i32) -> f32 {
        self.px[y as usize * self.w + x as usize]
    }

    fn from_image(img: &ImageF) -> Result<Plane> {
        if img.channels() != 1 {
            return Err(Error::Invalid(format!(
                "feature detection needs a single-band image, got {} bands",
                img.channels()
            )));
        }
        Ok(Plane {
            w: img.width(),
            h: img.height(),
            px: img.data().to_vec(),
        })
    }
}

/// One pyramid level: raw plane for detection, smoothed plane for tests,
/// and the per-axis factor back to base coordinates.
pub(crate) struct Level {
    raw: Plane,
    smooth: Plane,
    sx: f64,
    sy: f64,
}

impl Level {
    fn to_base(&self, x: f64, y: f64) -> (f64, f64) {
        ((x + 0.5) * self.sx - 0.5, (y + 0.5) * self.sy - 0.5)
    }
}

pub(crate) fn pyramid(img: &ImageF, params: &DetectorParams) -> Result<Vec<Level>> {
    if img.width() < 32 || img.height() < 32 {
        return Err(Error::stage(
            Stage::Detect,
            format!("image {}x{} is smaller than 32x32", img.width(), img.height()),
        ));
    }
    if params.octaves == 0 || !(params.scale_factor > 1.0) {
        return Err(Error::Config(format!(
            "pyramid needs octaves >= 1 and scale_factor > 1 (got {}, {})",
            params.octaves, params.scale_factor
        )));
    }
    let mut levels = Vec::with_capacity(params.octaves);
    for l in 0..params.octaves {
        let s = params.scale_factor.powi(l as i32);
        let w = (img.width() as f64 / s).round() as usize;
        let h = (img.height() as f64 / s).round() as usize;
        if w < 2 * BORDER + 1 || h < 2 * BORDER + 1 {
            break;
        }
        let scaled = if l == 0 { img.clone() } else { resize_bilinear(img, w, h)? };
        let raw = Plane::from_image(&scaled)?;
        let smooth = gaussian_blur(&raw, 2.0);
        levels.push(Level {
            raw,
            smooth,
            sx: img.width() as f64 / w as f64,
            sy: img.height() as f64 / h as f64,
        });
    }
    Ok(levels)
}

fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    let r = (3.0 * sigma).ceil() as i32;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    let clamp = |v: i32, n: usize| v.clamp(0, n as i32 - 1);
    let mut tmp = vec![0.0f32; p.px.len()];
    for y in 0..p.h as i32 {
        for x in 0..p.w as i32 {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * p.at(clamp(x + i as i32 - r, p.w), y);
            }
            tmp[y as usize * p.w + x as usize] = acc;
        }
    }
    let t = Plane { w: p.w, h: p.h, px: tmp };
    let mut out = vec![0.0f32; p.px.len()];
    for y in 0..p.h as i32 {
        for x in 0..p.w as i32 {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * t.at(x, clamp(y + i as i32 - r, p.h));
            }
            out[y as usize * p.w + x as usize] = acc;
        }
    }
    Plane { w: p.w, h: p.h, px: out }
}

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Segment test: at least 9 contiguous circle pixels all brighter than
/// `c + t` or all darker than `c - t`.
fn is_fast_corner(p: &Plane, x: i32, y: i32, t: f32) -> bool {
    let c = p.at(x, y);
    let mut state = [0i8; 16];
    for (i, &(dx, dy)) in CIRCLE.iter().enumerate() {
        let v = p.at(x + dx, y + dy);
        state[i] = if v > c + t {
            1
        } else if v < c - t {
            -1
        } else {
            0
        };
    }
    // quick reject: of the 4 compass points, a 9-arc covers at least 2
    let compass = [state[0], state[4], state[8], state[12]];
    let bright = compass.iter().filter(|&&s| s == 1).count();
    let dark = compass.iter().filter(|&&s| s == -1).count();
    if bright < 2 && dark < 2 {
        return false;
    }
    for sign in [1i8, -1] {
        let mut run = 0;
        for i in 0..32 {
            if state[i % 16] == sign {
                run += 1;
                if run >= 9 {
                    return true;
                }
            } else {
                run = 0;
            }
        }
    }
    false
}

struct Gradients {
    ix: Vec<f32>,
    iy: Vec<f32>,
}

fn sobel(p: &Plane) -> Gradients {
    let mut ix = vec![0.0f32; p.px.len()];
    let mut iy = vec![0.0f32; p.px.len()];
    for y in 1..p.h as i32 - 1 {
        for x in 1..p.w as i32 - 1 {
            let i = y as usize * p.w + x as usize;
            ix[i] = (p.at(x + 1, y - 1) + 2.0 * p.at(x + 1, y) + p.at(x + 1, y + 1))
                - (p.at(x - 1, y - 1) + 2.0 * p.at(x - 1, y) + p.at(x - 1, y + 1));
            iy[i] = (p.at(x - 1, y + 1) + 2.0 * p.at(x, y + 1) + p.at(x + 1, y + 1))
                - (p.at(x - 1, y - 1) + 2.0 * p.at(x, y - 1) + p.at(x + 1, y - 1));
        }
    }
    Gradients { ix, iy }
}

fn harris(g: &Gradients, w: usize, x: i32, y: i32) -> f32 {
    let (mut a, mut b, mut c) = (0.0f32, 0.0f32, 0.0f32);
    for dy in -HARRIS_RADIUS..=HARRIS_RADIUS {
        for dx in -HARRIS_RADIUS..=HARRIS_RADIUS {
            let i = (y + dy) as usize * w + (x + dx) as usize;
            let (gx, gy) = (g.ix[i], g.iy[i]);
            let wt = (-((dx * dx + dy * dy) as f32) / (2.0 * HARRIS_SIGMA * HARRIS_SIGMA)).exp();
            a += wt * gx * gx;
            b += wt * gy * gy;
            c += wt * gx * gy;
        }
    }
    a * b - c * c - HARRIS_K * (a + b) * (a + b)
}

/// Offset of a parabola's vertex through three samples, in [-0.5, 0.5].
fn vertex(l: f32, m: f32, r: f32) -> f64 {
    let d = l - 2.0 * m + r;
    if d.abs() < 1e-20 {
        return 0.0;
    }
    (0.5 * (l - r) / d).clamp(-0.5, 0.5) as f64
}

struct Candidate {
    x: i32,
    y: i32,
    score: f32,
}

fn level_candidates(level: &Level, grads: &Gradients, t: f32) -> Vec<Candidate> {
    let p = &level.raw;
    let lo = BORDER as i32;
    let (hx, hy) = (p.w as i32 - BORDER as i32, p.h as i32 - BORDER as i32);
    let mut corner = vec![false; p.px.len()];
    let mut score = vec![f32::MIN; p.px.len()];
    for y in lo..hy {
        for x in lo..hx {
            if is_fast_corner(p, x, y, t) {
                let i = y as usize * p.w + x as usize;
                corner[i] = true;
                score[i] = harris(grads, p.w, x, y);
            }
        }
    }
    let mut out = Vec::new();
    for y in lo..hy {
        for x in lo..hx {
            let i = y as usize * p.w + x as usize;
            if !corner[i] {
                continue;
            }
            let s = score[i];
            // 3x3 non-maximum suppression; ties go to the first in raster order
            let suppressed = (-1..=1).any(|dy: i32| {
                (-1..=1).any(|dx: i32| {
                    if dx == 0 && dy == 0 {
                        return false;
                    }
                    let j = (y + dy) as usize * p.w + (x + dx) as usize;
                    corner[j] && (score[j] > s || (score[j] == s && (dy, dx) < (0, 0)))
                })
            });
            if !suppressed {
                out.push(Candidate { x, y, score: s });
            }
        }
    }
    out
}

fn centroid_angle(p: &Plane, x: i32, y: i32) -> f64 {
    let (mut m10, mut m01) = (0.0f64, 0.0f64);
    let r2 = CENTROID_RADIUS * CENTROID_RADIUS;
    for dy in -CENTROID_RADIUS..=CENTROID_RADIUS {
        for dx in -CENTROID_RADIUS..=CENTROID_RADIUS {
            if dx * dx + dy * dy > r2 {
                continue;
            }
            let v = p.at(x + dx, y + dy) as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    m01.atan2(m10)
}

/// Splits `total` across levels in proportion to their areas.
fn quotas(levels: &[Level], total: usize) -> Vec<usize> {
    let areas: Vec<f64> = levels.iter().map(|l| (l.raw.w * l.raw.h) as f64).collect();
    let sum: f64 = areas.iter().sum();
    let mut q: Vec<usize> = areas.iter().map(|a| (total as f64 * a / sum).floor() as usize).collect();
    let mut rest = total - q.iter().sum::<usize>();
    for v in q.iter_mut() {
        if rest == 0 {
            break;
        }
        *v += 1;
        rest -= 1;
    }
    q
}

/// FAST corners scored by Harris response across a scale pyramid; the
/// strongest `target_count` are kept (per-level quotas by area, unused quota
/// passed to the best remaining candidates of any level).
pub fn detect_keypoints(img: &ImageF, params: &DetectorParams) -> Result<Vec<Keypoint>> {
    let levels = pyramid(img, params)?;
    detect_in_pyramid(&levels, params)
}

pub(crate) fn detect_in_pyramid(levels: &[Level], params: &DetectorParams) -> Result<Vec<Keypoint>> {
    if params.target_count == 0 {
        return Err(Error::Config("target_count must be positive".into()));
    }
    let quota = quotas(levels, params.target_count);
    let mut per_level: Vec<Vec<Candidate>> = Vec::with_capacity(levels.len());
    let mut grads_all = Vec::with_capacity(levels.len());
    for (li, level) in levels.iter().enumerate() {
        let grads = sobel(&level.raw);
        let mut t = params.fast_threshold;
        let mut cands = level_candidates(level, &grads, t);
        while cands.len() < quota[li] && t / 2.0 >= MIN_THRESHOLD {
            t /= 2.0;
            cands = level_candidates(level, &grads, t);
        }
        log::debug!("level {li}: {} candidates at threshold {t:.4}", cands.len());
        // strongest first; raster order breaks ties
        cands.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.y, a.x).cmp(&(b.y, b.x))));
        per_level.push(cands);
        grads_all.push(grads);
    }

    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut leftovers: Vec<(usize, usize)> = Vec::new();
    for (li, cands) in per_level.iter().enumerate() {
        let take = quota[li].min(cands.len());
        chosen.extend((0..take).map(|i| (li, i)));
        leftovers.extend((take..cands.len()).map(|i| (li, i)));
    }
    let missing = params.target_count.saturating_sub(chosen.len());
    if missing > 0 {
        leftovers.sort_by(|&(la, ia), &(lb, ib)| {
            per_level[lb][ib]
                .score
                .total_cmp(&per_level[la][ia].score)
                .then((la, ia).cmp(&(lb, ib)))
        });
        chosen.extend(leftovers.into_iter().take(missing));
    }

    let mut keypoints: Vec<Keypoint> = chosen
        .into_iter()
        .map(|(li, i)| {
            let c = &per_level[li][i];
            let level = &levels[li];
            let g = &grads_all[li];
            let w = level.raw.w;
            let dx = vertex(harris(g, w, c.x - 1, c.y), c.score, harris(g, w, c.x + 1, c.y));
            let dy = vertex(harris(g, w, c.x, c.y - 1), c.score, harris(g, w, c.x, c.y + 1));
            let (x, y) = level.to_base(c.x as f64 + dx, c.y as f64 + dy);
            Keypoint {
                x,
                y,
                score: c.score,
                angle: centroid_angle(&level.raw, c.x, c.y),
                level: li,
                level_x: c.x as usize,
                level_y: c.y as usize,
            }
        })
        .collect();
    keypoints.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.level.cmp(&b.level))
            .then((a.level_y, a.level_x).cmp(&(b.level_y, b.level_x)))
    });
    if keypoints.len() < 4 {
        return Err(Error::stage(
            Stage::Detect,
            format!("found {} keypoints; need at least 4", keypoints.len()),
        ));
    }
    Ok(keypoints)
}

/// Fixed test pattern: 256 point pairs drawn from an isotropic Gaussian
/// (sigma = 31/5, the patch-size rule for BRIEF) truncated to a disc.
pub fn test_pattern() -> &'static [[(f64, f64); 2]; 256] {
    static PATTERN: OnceLock<[[(f64, f64); 2]; 256]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0b1e_f00d);
        let normal = Normal::new(0.0, 31.0 / 5.0).expect("positive sigma");
        let point = |rng: &mut ChaCha8Rng| loop {
            let p: (f64, f64) = (normal.sample(rng), normal.sample(rng));
            let p = (p.0.round(), p.1.round());
            if p.0 * p.0 + p.1 * p.1 <= PATTERN_RADIUS * PATTERN_RADIUS {
                return p;
            }
        };
        let mut out = [[(0.0, 0.0); 2]; 256];
        for pair in out.iter_mut() {
            loop {
                let a = point(&mut rng);
                let b = point(&mut rng);
                if a != b {
                    *pair = [a, b];
                    break;
                }
            }
        }
        out
    })
}

#[derive(Debug, Clone, Default)]
pub struct Described {
    /// Index into the input keypoint list for each descriptor.
    pub kept: Vec<usize>,
    pub descriptors: Vec<Descriptor>,
    /// Keypoints too close to the border after rotation.
    pub dropped: Vec<usize>,
}

fn describe_one(p: &Plane, x: usize, y: usize, angle: f64) -> Option<Descriptor> {
    let (s, c) = angle.sin_cos();
    let (x, y) = (x as f64, y as f64);
    let mut d = [0u64; 4];
    let inside = |u: f64, v: f64| u >= 0.0 && v >= 0.0 && u <= (p.w - 1) as f64 && v <= (p.h - 1) as f64;
    for (i, [a, b]) in test_pattern().iter().enumerate() {
        let pa = (x + (c * a.0 - s * a.1).round(), y + (s * a.0 + c * a.1).round());
        let pb = (x + (c * b.0 - s * b.1).round(), y + (s * b.0 + c * b.1).round());
        if !inside(pa.0, pa.1) || !inside(pb.0, pb.1) {
            return None;
        }
        if p.at(pa.0 as i32, pa.1 as i32) < p.at(pb.0 as i32, pb.1 as i32) {
            d[i / 64] |= 1 << (i % 64);
        }
    }
    Some(d).map(Descriptor)
}

/// Rotated BRIEF on the Gaussian-smoothed pyramid level of each keypoint.
/// Keypoints within [`BORDER`] pixels of a level border are dropped.
pub fn compute_descriptors(img: &ImageF, keypoints: &[Keypoint], params: &DetectorParams) -> Result<Described> {
    let levels = pyramid(img, params)?;
    Ok(describe_in_pyramid(&levels, keypoints))
}

pub(crate) fn describe_in_pyramid(levels: &[Level], keypoints: &[Keypoint]) -> Described {
    let mut out = Described::default();
    for (i, kp) in keypoints.iter().enumerate() {
        let desc = levels.get(kp.level).and_then(|level| {
            let p = &level.smooth;
            let near_border = kp.level_x < BORDER
                || kp.level_y < BORDER
                || kp.level_x + BORDER >= p.w
                || kp.level_y + BORDER >= p.h;
            if near_border {
                None
            } else {
                describe_one(p, kp.level_x, kp.level_y, kp.angle)
            }
        });
        match desc {
            Some(d) => {
                out.kept.push(i);
                out.descriptors.push(d);
            }
            None => out.dropped.push(i),
        }
    }
    out
}
