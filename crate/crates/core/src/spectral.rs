//! NDVI and the four-band network input.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{load_array, resize_bilinear, save_array, Band, ImageF, Mask, FUSED};

pub const NDVI_EPS: f64 = 1e-6;

/// `(nir - red) / (nir + red + eps)`, clamped to `[-1, 1]`.
pub fn ndvi_value(red: f64, nir: f64, eps: f64) -> f64 {
    ((nir - red) / (nir + red + eps)).clamp(-1.0, 1.0)
}

pub fn compute_ndvi(red: &[f32], nir: &[f32], eps: f64) -> Result<Vec<f32>> {
    if red.len() != nir.len() {
        return Err(Error::Invalid(format!(
            "red band has {} samples, NIR band {}",
            red.len(),
            nir.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("ndvi eps {eps} must be positive")));
    }
    red.iter()
        .zip(nir)
        .enumerate()
        .map(|(i, (&r, &n))| {
            if !(r >= 0.0 && n >= 0.0) {
                return Err(Error::Invalid(format!(
                    "negative or non-finite reflectance at sample {i} (red {r}, nir {n})"
                )));
            }
            Ok(ndvi_value(r as f64, n as f64, eps) as f32)
        })
        .collect()
}

/// Single-band NDVI image from the R and NIR bands of a reflectance image.
pub fn ndvi_image(reflectance: &ImageF) -> Result<ImageF> {
    let red = reflectance.plane(Band::R)?;
    let nir = reflectance.plane(Band::Nir)?;
    let ndvi = compute_ndvi(&red, &nir, NDVI_EPS)?;
    ImageF::new(reflectance.width(), reflectance.height(), vec![Band::Ndvi], ndvi)
}

/// Network input: bands `[R, G, B, NDVI]` with invalid pixels zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSample {
    pub image: ImageF,
    pub mask: Mask,
}

impl FusedSample {
    pub fn save(&self, array_path: &Path, mask_path: &Path) -> Result<()> {
        save_array(&self.image, array_path)?;
        self.mask.save_png(mask_path)
    }

    pub fn load(array_path: &Path, mask_path: &Path) -> Result<Self> {
        let image = load_array(array_path)?;
        if image.bands() != FUSED {
            return Err(Error::format(array_path, format!("bands {:?}, expected R,G,B,NDVI", image.bands())));
        }
        let mask = Mask::load_png(mask_path)?;
        if (mask.width, mask.height) != (image.width(), image.height()) {
            return Err(Error::format(mask_path, "mask size differs from the sample"));
        }
        Ok(Self { image, mask })
    }
}

/// Concatenates registered RGB and NDVI (same grid) under `mask`.
pub fn fuse(rgb: &ImageF, ndvi: &ImageF, mask: &Mask) -> Result<FusedSample> {
    let (w, h) = (rgb.width(), rgb.height());
    if (ndvi.width(), ndvi.height()) != (w, h) || (mask.width, mask.height) != (w, h) {
        return Err(Error::Invalid(format!(
            "fusion inputs differ in size: rgb {w}x{h}, ndvi {}x{}, mask {}x{}",
            ndvi.width(),
            ndvi.height(),
            mask.width,
            mask.height
        )));
    }
    let planes = [Band::R, Band::G, Band::B].map(|b| rgb.plane(b));
    let [r, g, b] = planes;
    let (r, g, b) = (r?, g?, b?);
    let n = ndvi.plane(Band::Ndvi)?;
    let mut image = ImageF::from_planes(w, h, &[(Band::R, &r), (Band::G, &g), (Band::B, &b), (Band::Ndvi, &n)])?;
    for (px, &valid) in image.data_mut().chunks_exact_mut(4).zip(&mask.data) {
        if !valid {
            px.fill(0.0);
        }
    }
    Ok(FusedSample {
        image,
        mask: mask.clone(),
    })
}

/// Resizes registered RGB, its mask and the NDVI band to `size x size`, then
/// fuses them.
pub fn fuse_resized(rgb: &ImageF, ndvi: &ImageF, mask: &Mask, size: usize) -> Result<FusedSample> {
    let rgb = resize_bilinear(rgb, size, size)?;
    let ndvi = resize_bilinear(ndvi, size, size)?;
    let mask = mask.resize(size, size);
    fuse(&rgb, &ndvi, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::RGB;

    #[test]
    fn ndvi_examples() {
        let v = compute_ndvi(&[0.3, 0.2, 0.0], &[0.3, 0.8, 0.0], NDVI_EPS).unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] as f64 - 0.6).abs() < 1e-5);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn negative_reflectance_is_rejected() {
        assert!(compute_ndvi(&[-0.1], &[0.5], NDVI_EPS).is_err());
        assert!(compute_ndvi(&[f32::NAN], &[0.5], NDVI_EPS).is_err());
        assert!(compute_ndvi(&[0.1, 0.2], &[0.5], NDVI_EPS).is_err());
    }

    #[test]
    fn extremes_stay_in_range() {
        let v = compute_ndvi(&[0.0, 1.0, 1e-30], &[1.0, 0.0, 0.0], NDVI_EPS).unwrap();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    fn rgb_ndvi(w: usize, h: usize) -> (ImageF, ImageF) {
        let rgb = ImageF::new(w, h, RGB.to_vec(), (0..w * h * 3).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let ndvi = ImageF::new(w, h, vec![Band::Ndvi], (0..w * h).map(|i| (i % 5) as f32 / 5.0 - 0.5).collect()).unwrap();
        (rgb, ndvi)
    }

    #[test]
    fn all_valid_fusion_keeps_bands() {
        let (rgb, ndvi) = rgb_ndvi(4, 3);
        let f = fuse(&rgb, &ndvi, &Mask::all_valid(4, 3)).unwrap();
        assert_eq!(f.image.bands(), FUSED);
        assert_eq!(f.image.plane(Band::G).unwrap(), rgb.plane(Band::G).unwrap());
        assert_eq!(f.image.plane(Band::Ndvi).unwrap(), ndvi.plane(Band::Ndvi).unwrap());
    }

    #[test]
    fn masked_half_is_zero() {
        let (rgb, ndvi) = rgb_ndvi(6, 2);
        let mut mask = Mask::all_valid(6, 2);
        for y in 0..2 {
            for x in 0..3 {
                mask.data[y * 6 + x] = false;
            }
        }
        let f = fuse(&rgb, &ndvi, &mask).unwrap();
        for y in 0..2 {
            for x in 0..6 {
                let zero = (0..4).all(|c| f.image.get(x, y, c) == 0.0);
                assert_eq!(zero, x < 3, "({x},{y})");
            }
        }
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let (rgb, _) = rgb_ndvi(4, 3);
        let (_, ndvi) = rgb_ndvi(3, 4);
        assert!(fuse(&rgb, &ndvi, &Mask::all_valid(4, 3)).is_err());
    }

    #[test]
    fn fused_sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (rgb, ndvi) = rgb_ndvi(5, 5);
        let mut mask = Mask::all_valid(5, 5);
        mask.data[7] = false;
        let f = fuse_resized(&rgb, &ndvi, &mask, 8).unwrap();
        let (a, m) = (dir.path().join("s.pspec"), dir.path().join("s_mask.png"));
        f.save(&a, &m).unwrap();
        let back = FusedSample::load(&a, &m).unwrap();
        assert!(back.image.data().iter().zip(f.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(back.mask, f.mask);
    }
}
