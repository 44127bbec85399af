//! Aligns an RGB frame to its R-G-NIR partner: oriented FAST + rotated BRIEF
//! on the green band of both, brute-force Hamming matching, distance
//! filtering, RANSAC homography, then a perspective warp of the RGB frame
//! into the R-G-NIR frame.

pub mod features;
pub mod homography;
pub mod matching;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use features::{compute_descriptors, detect_keypoints, Descriptor, DetectorParams, Keypoint};
pub use homography::{dlt, ransac, Correspondence, Homography, RansacParams, RansacResult};
pub use matching::{filter_matches, match_bruteforce, DropSide, Match};

use crate::error::{Error, Result, Stage};
use crate::imaging::{warp_perspective, Band, ImageF, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationParams {
    pub detector: DetectorParams,
    pub drop_fraction: f64,
    pub drop_side: DropSide,
    pub ransac: RansacParams,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            detector: DetectorParams::default(),
            drop_fraction: 0.10,
            drop_side: DropSide::Worst,
            ransac: RansacParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub keypoints_rgb: usize,
    pub keypoints_rgnir: usize,
    pub dropped_rgb: usize,
    pub dropped_rgnir: usize,
    pub matches: usize,
    pub filtered: usize,
    pub inliers: usize,
    pub mean_residual: f64,
    /// Maps RGB pixel coordinates into the R-G-NIR frame.
    pub homography: Homography,
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.homography.rows();
        write!(
            f,
            "keypoints={}/{} dropped={}/{} matches={} filtered={} inliers={} mean_residual={:.4} h=[{}]",
            self.keypoints_rgb,
            self.keypoints_rgnir,
            self.dropped_rgb,
            self.dropped_rgnir,
            self.matches,
            self.filtered,
            self.inliers,
            self.mean_residual,
            h.iter()
                .flatten()
                .map(|v| format!("{v:.9e}"))
                .collect::<Vec<_>>()
                .join(",")
        )
    }
}

#[derive(Debug, Clone)]
pub struct Registered {
    /// RGB resampled onto the R-G-NIR pixel grid.
    pub image: ImageF,
    pub mask: Mask,
    pub diagnostics: Diagnostics,
}

fn tag(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Registration { .. } | Error::Config(_) => e,
        other => Error::stage(stage, other.to_string()),
    }
}

/// Names the image a detection failure came from without repeating the stage.
fn in_image(e: Error, which: &str) -> Error {
    match e {
        Error::Registration { stage, msg } => Error::stage(stage, format!("{which} image: {msg}")),
        other => other,
    }
}

/// Estimates the RGB -> R-G-NIR homography from the green bands.
pub fn estimate_pair(rgb: &ImageF, rgnir: &ImageF, params: &RegistrationParams) -> Result<(Homography, Diagnostics)> {
    let gray_a = rgb.single(Band::G).map_err(tag(Stage::Detect))?;
    let gray_b = rgnir.single(Band::G).map_err(tag(Stage::Detect))?;

    let levels_a = features::pyramid(&gray_a, &params.detector).map_err(tag(Stage::Detect))?;
    let levels_b = features::pyramid(&gray_b, &params.detector).map_err(tag(Stage::Detect))?;
    let kps_a = features::detect_in_pyramid(&levels_a, &params.detector)
        .map_err(|e| in_image(e, "RGB"))?;
    let kps_b = features::detect_in_pyramid(&levels_b, &params.detector)
        .map_err(|e| in_image(e, "R-G-NIR"))?;

    let desc_a = features::describe_in_pyramid(&levels_a, &kps_a);
    let desc_b = features::describe_in_pyramid(&levels_b, &kps_b);
    if desc_a.descriptors.is_empty() || desc_b.descriptors.is_empty() {
        return Err(Error::stage(Stage::Describe, "every keypoint fell too close to the border"));
    }

    let matches = match_bruteforce(&desc_a.descriptors, &desc_b.descriptors)?;
    let filtered = filter_matches(&matches, params.drop_fraction, params.drop_side)?;
    if filtered.len() < 4 {
        return Err(Error::stage(Stage::Filter, format!("{} matches survive filtering", filtered.len())));
    }
    let pairs: Vec<Correspondence> = filtered
        .iter()
        .map(|m| {
            let a = &kps_a[desc_a.kept[m.index_a]];
            let b = &kps_b[desc_b.kept[m.index_b]];
            Correspondence {
                a: (a.x, a.y),
                b: (b.x, b.y),
            }
        })
        .collect();
    let fit = ransac(&pairs, &params.ransac)?;
    let diagnostics = Diagnostics {
        keypoints_rgb: kps_a.len(),
        keypoints_rgnir: kps_b.len(),
        dropped_rgb: desc_a.dropped.len(),
        dropped_rgnir: desc_b.dropped.len(),
        matches: matches.len(),
        filtered: filtered.len(),
        inliers: fit.inliers.len(),
        mean_residual: fit.mean_residual,
        homography: fit.homography,
    };
    Ok((fit.homography, diagnostics))
}

/// Full registration: estimate the homography and resample the RGB frame
/// at the R-G-NIR resolution.
pub fn register_pair(rgb: &ImageF, rgnir: &ImageF, params: &RegistrationParams) -> Result<Registered> {
    let (h, diagnostics) = estimate_pair(rgb, rgnir, params)?;
    let (image, mask) = warp_perspective(rgb, &h, rgnir.width(), rgnir.height()).map_err(tag(Stage::Warp))?;
    Ok(Registered {
        image,
        mask,
        diagnostics,
    })
}
