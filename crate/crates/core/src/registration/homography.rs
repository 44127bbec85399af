//! Planar homographies: normalized DLT and RANSAC.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};

/// 3x3 projective map acting on column vectors `(x, y, 1)`, scaled so that
/// `h33 = 1` whenever `|h33| > 1e-12`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

const DET_EPS: f64 = 1e-12;

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("homography has non-finite entries".into()));
        }
        let h33 = m[(2, 2)];
        Ok(Homography(if h33.abs() > DET_EPS { m / h33 } else { m }))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]])
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn inverse(&self) -> Result<Homography> {
        if self.determinant().abs() <= DET_EPS {
            return Err(Error::Invalid(format!(
                "homography is singular (det {:.3e})",
                self.determinant()
            )));
        }
        let inv = self
            .0
            .try_inverse()
            .ok_or_else(|| Error::Invalid("homography is not invertible".into()))?;
        Self::from_matrix(inv)
    }

    /// `self` after `first`: maps `p` to `self(first(p))`.
    pub fn after(&self, first: &Homography) -> Result<Homography> {
        Self::from_matrix(self.0 * first.0)
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let v = self.0 * Vector3::new(x, y, 1.0);
        if v.z.abs() < 1e-15 {
            return None;
        }
        Some((v.x / v.z, v.y / v.z))
    }

    /// Largest displacement between `self` and `other` over the four corners
    /// of a `width x height` image.
    pub fn corner_error(&self, other: &Homography, width: usize, height: usize) -> f64 {
        let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
        [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
            .iter()
            .map(|&(x, y)| match (self.apply(x, y), other.apply(x, y)) {
                (Some(a), Some(b)) => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}

/// Point pair `a -> b` with `b ~ H a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

/// Similarity that moves the centroid to the origin and the mean distance
/// from it to sqrt(2).
fn normalizer(points: impl Iterator<Item = (f64, f64)> + Clone) -> Option<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_r = points.map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    if !(mean_r > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_r;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, (x, y): (f64, f64)) -> (f64, f64) {
    let v = t * Vector3::new(x, y, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Direct linear transform with Hartley normalization over >= 4 pairs.
pub fn dlt(pairs: &[Correspondence]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::stage(Stage::Estimate, format!("{} correspondences; need at least 4", pairs.len())));
    }
    let degenerate = || Error::stage(Stage::Estimate, "degenerate point configuration");
    let ta = normalizer(pairs.iter().map(|p| p.a)).ok_or_else(degenerate)?;
    let tb = normalizer(pairs.iter().map(|p| p.b)).ok_or_else(degenerate)?;

    // pad to at least 9 rows so the SVD exposes the full right null space
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, p) in pairs.iter().enumerate() {
        let (x, y) = transform(&ta, p.a);
        let (u, v) = transform(&tb, p.b);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(degenerate)?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .ok_or_else(degenerate)?;
    let hn = Matrix3::from_fn(|r, c| v_t[(k, 3 * r + c)]);
    let tb_inv = tb.try_inverse().ok_or_else(degenerate)?;
    let h = Homography::from_matrix(tb_inv * hn * ta)?;
    if h.determinant().abs() <= DET_EPS {
        return Err(degenerate());
    }
    Ok(h)
}

/// Symmetric transfer error: forward residual in `b`'s frame and backward
/// residual in `a`'s frame, combined in quadrature.
pub fn transfer_error(h: &Homography, h_inv: &Homography, p: &Correspondence) -> f64 {
    let fwd = h
        .apply(p.a.0, p.a.1)
        .map(|(x, y)| (x - p.b.0).powi(2) + (y - p.b.1).powi(2))
        .unwrap_or(f64::INFINITY);
    let bwd = h_inv
        .apply(p.b.0, p.b.1)
        .map(|(x, y)| (x - p.a.0).powi(2) + (y - p.a.1).powi(2))
        .unwrap_or(f64::INFINITY);
    (fwd + bwd).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    pub iters: usize,
    pub inlier_px: f64,
    /// Fewest inliers an accepted model may have.
    pub min_inliers: usize,
    /// Taken from the pipeline seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iters: 2000,
            inlier_px: 3.0,
            min_inliers: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacResult {
    pub homography: Homography,
    /// Indices into the input slice, ascending.
    pub inliers: Vec<usize>,
    /// Mean symmetric transfer error over the inliers.
    pub mean_residual: f64,
}

fn collinear(p: (f64, f64), q: (f64, f64), r: (f64, f64)) -> bool {
    let cross = (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0);
    let scale = ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).max((r.0 - p.0).powi(2) + (r.1 - p.1).powi(2));
    cross.abs() <= 1e-9 * scale.max(1e-300)
}

fn degenerate_sample(s: &[Correspondence; 4]) -> bool {
    let triples = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)];
    triples.iter().any(|&(i, j, k)| {
        collinear(s[i].a, s[j].a, s[k].a) || collinear(s[i].b, s[j].b, s[k].b)
    })
}

fn inliers_of(h: &Homography, pairs: &[Correspondence], tol: f64) -> Option<(Vec<usize>, f64)> {
    let inv = h.inverse().ok()?;
    let mut idx = Vec::new();
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let e = transfer_error(h, &inv, p);
        if e < tol {
            idx.push(i);
            total += e;
        }
    }
    Some((idx, total))
}

/// RANSAC over 4-point samples, then a DLT refit on the consensus set
/// (repeated while the consensus set keeps changing, at most a few times).
///
/// Samples are drawn over the correspondences in a canonical (coordinate)
/// order, so the result does not depend on the order of `pairs`.
pub fn ransac(pairs: &[Correspondence], params: &RansacParams) -> Result<RansacResult> {
    if pairs.len() < 4 {
        return Err(Error::stage(Stage::Estimate, format!("{} matches; need at least 4", pairs.len())));
    }
    if !(params.inlier_px > 0.0) || params.iters == 0 {
        return Err(Error::Config(format!(
            "ransac needs iters > 0 and inlier_px > 0 (got {}, {})",
            params.iters, params.inlier_px
        )));
    }
    let key = |p: &Correspondence| [p.a.0, p.a.1, p.b.0, p.b.1];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&i, &j| {
        key(&pairs[i])
            .iter()
            .zip(key(&pairs[j]).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let canonical: Vec<Correspondence> = order.iter().map(|&i| pairs[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut solved = 0usize;
    for _ in 0..params.iters {
        let idx = sample(&mut rng, canonical.len(), 4);
        let s = [0, 1, 2, 3].map(|k| canonical[idx.index(k)]);
        if degenerate_sample(&s) {
            continue;
        }
        let Ok(h) = dlt(&s) else { continue };
        let Some((inl, err)) = inliers_of(&h, &canonical, params.inlier_px) else {
            continue;
        };
        solved += 1;
        let better = match &best {
            None => true,
            Some((b, berr)) => inl.len() > b.len() || (inl.len() == b.len() && err < *berr),
        };
        if better {
            best = Some((inl, err));
        }
    }
    let Some((mut inliers, _)) = best else {
        return Err(Error::stage(
            Stage::Estimate,
            format!("all {} samples were degenerate", params.iters),
        ));
    };
    log::debug!("ransac: {solved} non-degenerate samples, best consensus {}", inliers.len());
    if inliers.len() < params.min_inliers.max(4) {
        return Err(Error::stage(
            Stage::Estimate,
            format!("best consensus has {} inliers; need {}", inliers.len(), params.min_inliers.max(4)),
        ));
    }

    let mut h = fit_subset(&canonical, &inliers)?;
    for _ in 0..5 {
        let (next, _) = inliers_of(&h, &canonical, params.inlier_px)
            .ok_or_else(|| Error::stage(Stage::Estimate, "refit produced a singular homography"))?;
        if next == inliers || next.len() < params.min_inliers.max(4) {
            break;
        }
        inliers = next;
        h = fit_subset(&canonical, &inliers)?;
    }
    let inv = h.inverse()?;
    let mean_residual =
        inliers.iter().map(|&i| transfer_error(&h, &inv, &canonical[i])).sum::<f64>() / inliers.len() as f64;
    let mut original: Vec<usize> = inliers.iter().map(|&i| order[i]).collect();
    original.sort_unstable();
    Ok(RansacResult {
        homography: h,
        inliers: original,
        mean_residual,
    })
}

fn fit_subset(pairs: &[Correspondence], idx: &[usize]) -> Result<Homography> {
    let subset: Vec<Correspondence> = idx.iter().map(|&i| pairs[i]).collect();
    dlt(&subset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_pairs(h: &Homography, n: usize) -> Vec<Correspondence> {
        (0..n)
            .map(|i| {
                let a = ((i % 10) as f64 * 37.0 + 5.0, (i / 10) as f64 * 29.0 + 3.0 + (i % 3) as f64);
                Correspondence {
                    a,
                    b: h.apply(a.0, a.1).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn normalizes_h33() {
        let h = Homography::from_rows([[2.0, 0.0, 4.0], [0.0, 2.0, 6.0], [0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(h, Homography::translation(2.0, 3.0));
    }

    #[test]
    fn minimal_translation_solve() {
        let pts = [(0.0, 0.0), (100.0, 0.0), (100.0, 80.0), (0.0, 80.0)];
        let pairs: Vec<_> = pts
            .iter()
            .map(|&(x, y)| Correspondence {
                a: (x, y),
                b: (x + 5.0, y - 3.0),
            })
            .collect();
        let h = dlt(&pairs).unwrap();
        let expect = Homography::translation(5.0, -3.0);
        let diff = (h.matrix() - expect.matrix()).abs().max();
        assert!(diff < 1e-6, "{h:?}");

        let params = RansacParams {
            min_inliers: 4,
            ..Default::default()
        };
        let r = ransac(&pairs, &params).unwrap();
        assert!((r.homography.matrix() - expect.matrix()).abs().max() < 1e-6);
        assert_eq!(r.inliers, vec![0, 1, 2, 3]);
    }

    #[test]
    fn identity_pairs_give_identity() {
        let pairs = grid_pairs(&Homography::identity(), 30);
        let r = ransac(&pairs, &RansacParams::default()).unwrap();
        assert!((r.homography.matrix() - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn noise_free_ransac_matches_dlt_on_everything() {
        let h = Homography::from_rows([[1.2, 0.05, 10.0], [-0.03, 0.95, -4.0], [1e-4, -5e-5, 1.0]]).unwrap();
        let pairs = grid_pairs(&h, 60);
        let all = dlt(&pairs).unwrap();
        let r = ransac(&pairs, &RansacParams::default()).unwrap();
        assert_eq!(r.inliers.len(), 60);
        assert!((r.homography.matrix() - all.matrix()).abs().max() < 1e-9);
    }

    #[test]
    fn permutation_does_not_change_the_result() {
        let h = Homography::from_rows([[0.9, 0.1, 3.0], [-0.1, 1.1, 7.0], [2e-4, 1e-4, 1.0]]).unwrap();
        let mut pairs = grid_pairs(&h, 50);
        for i in (0..50).step_by(4) {
            pairs[i].b.0 += 40.0 + i as f64;
        }
        let r1 = ransac(&pairs, &RansacParams::default()).unwrap();
        let mut perm: Vec<usize> = (0..50).collect();
        perm.reverse();
        perm.swap(3, 17);
        let shuffled: Vec<_> = perm.iter().map(|&i| pairs[i]).collect();
        let r2 = ransac(&shuffled, &RansacParams::default()).unwrap();
        let mut back: Vec<usize> = r2.inliers.iter().map(|&i| perm[i]).collect();
        back.sort_unstable();
        assert_eq!(r1.inliers, back);
        assert_eq!(r1.homography, r2.homography);
    }

    #[test]
    fn too_few_matches_or_inliers() {
        let pairs = grid_pairs(&Homography::identity(), 3);
        assert!(matches!(
            ransac(&pairs, &RansacParams::default()),
            Err(Error::Registration { stage: Stage::Estimate, .. })
        ));
        let pairs = grid_pairs(&Homography::identity(), 8);
        assert!(ransac(&pairs, &RansacParams::default()).is_err());
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pairs: Vec<_> = (0..6)
            .map(|i| Correspondence {
                a: (i as f64, 2.0 * i as f64),
                b: (i as f64, 2.0 * i as f64),
            })
            .collect();
        assert!(ransac(&pairs, &RansacParams { min_inliers: 4, ..Default::default() }).is_err());
    }

    #[test]
    fn composition_and_inverse() {
        let a = Homography::translation(3.0, -1.0);
        let b = Homography::from_rows([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let ba = b.after(&a).unwrap();
        assert_eq!(ba.apply(1.0, 1.0), Some((8.0, 0.0)));
        let back = ba.inverse().unwrap().apply(8.0, 0.0).unwrap();
        assert!((back.0 - 1.0).abs() < 1e-12 && (back.1 - 1.0).abs() < 1e-12);
    }
}
