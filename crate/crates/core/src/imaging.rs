//! Rasters: PNG and raw-array I/O, bilinear resize, perspective warp.
//!
//! Pixel `(x, y)` has its centre at continuous coordinate `(x, y)`; the
//! image covers `[-0.5, w - 0.5] x [-0.5, h - 0.5]`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::registration::Homography;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    R,
    G,
    B,
    Nir,
    Ndvi,
}

impl Band {
    pub fn as_str(self) -> &'static str {
        match self {
            Band::R => "R",
            Band::G => "G",
            Band::B => "B",
            Band::Nir => "NIR",
            Band::Ndvi => "NDVI",
        }
    }

    /// Closed value range of the band.
    pub fn range(self) -> (f32, f32) {
        match self {
            Band::Ndvi => (-1.0, 1.0),
            _ => (0.0, 1.0),
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" => Ok(Band::R),
            "G" => Ok(Band::G),
            "B" => Ok(Band::B),
            "NIR" => Ok(Band::Nir),
            "NDVI" => Ok(Band::Ndvi),
            _ => Err(Error::Invalid(format!("unknown band label {s:?}"))),
        }
    }
}

pub const RGB: [Band; 3] = [Band::R, Band::G, Band::B];
pub const RGNIR: [Band; 3] = [Band::R, Band::G, Band::Nir];
pub const FUSED: [Band; 4] = [Band::R, Band::G, Band::B, Band::Ndvi];

/// Row-major, channel-interleaved float image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    width: usize,
    height: usize,
    bands: Vec<Band>,
    data: Vec<f32>,
}

impl ImageF {
    pub fn new(width: usize, height: usize, bands: Vec<Band>, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("image size {width}x{height} must be positive")));
        }
        if !matches!(bands.len(), 1 | 3 | 4) {
            return Err(Error::Invalid(format!("{} bands; expected 1, 3 or 4", bands.len())));
        }
        if data.len() != width * height * bands.len() {
            return Err(Error::Invalid(format!(
                "{} samples for a {width}x{height}x{} image",
                data.len(),
                bands.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bands,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, bands: Vec<Band>, value: f32) -> Result<Self> {
        let n = width * height * bands.len();
        Self::new(width, height, bands, vec![value; n])
    }

    /// Builds an image from per-band planes.
    pub fn from_planes(width: usize, height: usize, planes: &[(Band, &[f32])]) -> Result<Self> {
        let c = planes.len();
        let n = width * height;
        if let Some((b, p)) = planes.iter().find(|(_, p)| p.len() != n) {
            return Err(Error::Invalid(format!("band {b} has {} samples, expected {n}", p.len())));
        }
        let mut data = vec![0.0; n * c];
        for (ci, (_, plane)) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * c + ci] = v;
            }
        }
        Self::new(width, height, planes.iter().map(|(b, _)| *b).collect(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.bands.len()
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.bands.len() + c]
    }

    pub fn band_index(&self, band: Band) -> Result<usize> {
        self.bands
            .iter()
            .position(|&b| b == band)
            .ok_or_else(|| Error::Invalid(format!("image has no {band} band (bands: {:?})", self.bands)))
    }

    /// Copies one band out as a plane.
    pub fn plane(&self, band: Band) -> Result<Vec<f32>> {
        let c = self.band_index(band)?;
        Ok(self.data.iter().skip(c).step_by(self.channels()).copied().collect())
    }

    /// Single-band image holding `band`.
    pub fn single(&self, band: Band) -> Result<ImageF> {
        let plane = self.plane(band)?;
        ImageF::new(self.width, self.height, vec![band], plane)
    }

    pub fn relabel(mut self, bands: Vec<Band>) -> Result<Self> {
        if bands.len() != self.bands.len() {
            return Err(Error::Invalid(format!(
                "{} band labels for a {}-band image",
                bands.len(),
                self.bands.len()
            )));
        }
        self.bands = bands;
        Ok(self)
    }

    /// Bilinear sample of channel `c` at a continuous position, or `None` if
    /// the position lies outside the pixel-centre hull.
    pub fn sample(&self, x: f64, y: f64, c: usize) -> Option<f32> {
        const TOL: f64 = 1e-9;
        let (w, h) = (self.width as f64 - 1.0, self.height as f64 - 1.0);
        if !(x >= -TOL && y >= -TOL && x <= w + TOL && y <= h + TOL) {
            return None;
        }
        Some(self.bilinear(x.clamp(0.0, w), y.clamp(0.0, h), c))
    }

    fn bilinear(&self, x: f64, y: f64, c: usize) -> f32 {
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let p00 = self.get(x0, y0, c);
        let p10 = self.get(x1, y0, c);
        let p01 = self.get(x0, y1, c);
        let p11 = self.get(x1, y1, c);
        let a = p00 + fx * (p10 - p00);
        let b = p01 + fx * (p11 - p01);
        a + fy * (b - a)
    }
}

/// Per-pixel validity after warping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn all_valid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Nearest-neighbour resize (a pixel stays valid only if its source is).
    pub fn resize(&self, out_w: usize, out_h: usize) -> Mask {
        let mut data = Vec::with_capacity(out_w * out_h);
        for y in 0..out_h {
            let sy = (((y as f64 + 0.5) * self.height as f64 / out_h as f64) as usize).min(self.height - 1);
            for x in 0..out_w {
                let sx = (((x as f64 + 0.5) * self.width as f64 / out_w as f64) as usize).min(self.width - 1);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        Mask {
            width: out_w,
            height: out_h,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        write_png(path, self.width, self.height, png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = load_image(path, &[Band::G])?;
        Ok(Mask {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| v >= 0.5).collect(),
        })
    }
}

/// Reads an 8- or 16-bit grayscale or RGB PNG, scaling codes to `[0, 1]`.
/// `bands` names the channels since PNG cannot say what they hold.
pub fn load_image(path: &Path, bands: &[Band]) -> Result<ImageF> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}; expected grayscale or RGB"))),
    };
    if bands.len() != channels {
        return Err(Error::format(
            path,
            format!("{channels}-channel PNG but {} band labels given", bands.len()),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let n = w * h * channels;
    let data: Vec<f32> = match info.bit_depth {
        png::BitDepth::Eight => buf[..n].iter().map(|&v| v as f32 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..2 * n]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        other => return Err(Error::format(path, format!("unsupported bit depth {other:?}; expected 8 or 16"))),
    };
    ImageF::new(w, h, bands.to_vec(), data).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a 1- or 3-band `[0, 1]` image as a 16-bit PNG. NDVI must go
/// through [`save_array`] instead.
pub fn save_image(img: &ImageF, path: &Path) -> Result<()> {
    if img.bands.contains(&Band::Ndvi) {
        return Err(Error::Invalid(
            "NDVI bands are signed and cannot be stored as PNG; use save_array".into(),
        ));
    }
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(Error::Invalid(format!(
                "PNG output needs 1 or 3 bands, image has {c}; use save_array"
            )))
        }
    };
    let mut bytes = Vec::with_capacity(img.data.len() * 2);
    for &v in &img.data {
        let code = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        bytes.extend_from_slice(&code.to_be_bytes());
    }
    write_png(path, img.width, img.height, color, png::BitDepth::Sixteen, &bytes)
}

/// Writes an 8-bit image; used for fixtures that mimic camera exports.
pub fn save_image_8bit(img: &ImageF, path: &Path) -> Result<()> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Invalid(format!("PNG output needs 1 or 3 bands, image has {c}"))),
    };
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_png(path, img.width, img.height, color, png::BitDepth::Eight, &bytes)
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

const ARRAY_MAGIC: &[u8; 6] = b"PSPEC1";

/// Raw float format: magic, u32 width/height/channels, one length-prefixed
/// ASCII label per band, then little-endian f32 samples (interleaved).
pub fn save_array(img: &ImageF, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::new();
    header.extend_from_slice(ARRAY_MAGIC);
    for d in [img.width, img.height, img.channels()] {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for b in &img.bands {
        let s = b.as_str();
        header.push(s.len() as u8);
        header.extend_from_slice(s.as_bytes());
    }
    let mut body = Vec::with_capacity(img.data.len() * 4);
    for &v in &img.data {
        body.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&header)
        .and_then(|_| w.write_all(&body))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_array(path: &Path) -> Result<ImageF> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 18 || &bytes[..6] != ARRAY_MAGIC {
        return Err(bad("not a PSPEC1 array"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let mut pos = 18;
    let mut bands = Vec::with_capacity(c);
    for _ in 0..c {
        let len = *bytes.get(pos).ok_or_else(|| bad("truncated band labels"))? as usize;
        let label = bytes
            .get(pos + 1..pos + 1 + len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| bad("bad band label"))?;
        bands.push(label.parse().map_err(|e: Error| bad(&e.to_string()))?);
        pos += 1 + len;
    }
    let body = &bytes[pos..];
    if body.len() != w * h * c * 4 {
        return Err(bad("sample count does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    ImageF::new(w, h, bands, data).map_err(|e| bad(&e.to_string()))
}

/// Bilinear resize with half-pixel-centred mapping; edges are clamped so the
/// output never leaves the input's value range.
pub fn resize_bilinear(img: &ImageF, out_w: usize, out_h: usize) -> Result<ImageF> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Invalid(format!("resize target {out_w}x{out_h} must be positive")));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let c = img.channels();
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let mut data = Vec::with_capacity(out_w * out_h * c);
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, img.height as f64 - 1.0);
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, img.width as f64 - 1.0);
            for ch in 0..c {
                data.push(img.bilinear(fx, fy, ch));
            }
        }
    }
    ImageF::new(out_w, out_h, img.bands.clone(), data)
}

/// Inverse-maps each output pixel through `h^-1` into `img`. Samples that
/// fall outside the source are zero and marked invalid in the mask.
pub fn warp_perspective(img: &ImageF, h: &Homography, out_w: usize, out_h: usize) -> Result<(ImageF, Mask)> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Invalid(format!("warp target {out_w}x{out_h} must be positive")));
    }
    let inv = h.inverse()?;
    let c = img.channels();
    let mut data = vec![0.0f32; out_w * out_h * c];
    let mut mask = vec![false; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            let Some((sx, sy)) = inv.apply(x as f64, y as f64) else {
                continue;
            };
            let i = y * out_w + x;
            for ch in 0..c {
                match img.sample(sx, sy, ch) {
                    Some(v) => {
                        data[i * c + ch] = v;
                        mask[i] = true;
                    }
                    None => break,
                }
            }
        }
    }
    Ok((
        ImageF::new(out_w, out_h, img.bands.clone(), data)?,
        Mask {
            width: out_w,
            height: out_h,
            data: mask,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ImageF {
        let data = (0..w * h).map(|i| ((i % w) + 2 * (i / w)) as f32 / (w + 2 * h) as f32).collect();
        ImageF::new(w, h, vec![Band::G], data).unwrap()
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(ImageF::new(2, 2, vec![Band::R, Band::G], vec![0.0; 8]).is_err());
        assert!(ImageF::new(0, 2, vec![Band::R], vec![]).is_err());
        assert!(ImageF::new(2, 2, vec![Band::R], vec![0.0; 3]).is_err());
    }

    #[test]
    fn eight_and_sixteen_bit_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("a.png");
        write_png(&p8, 2, 1, png::ColorType::Grayscale, png::BitDepth::Eight, &[255, 0]).unwrap();
        let img = load_image(&p8, &[Band::G]).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0]);

        let p16 = dir.path().join("b.png");
        write_png(&p16, 1, 1, png::ColorType::Grayscale, png::BitDepth::Sixteen, &32768u16.to_be_bytes()).unwrap();
        let img = load_image(&p16, &[Band::G]).unwrap();
        assert!((img.data()[0] as f64 - 32768.0 / 65535.0).abs() < 1e-7);
    }

    #[test]
    fn band_hint_must_match_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, 1, 1, png::ColorType::Grayscale, png::BitDepth::Eight, &[3]).unwrap();
        assert!(load_image(&p, &RGB).is_err());
        let p = dir.path().join("rgba.png");
        write_png(&p, 1, 1, png::ColorType::Rgba, png::BitDepth::Eight, &[1, 2, 3, 4]).unwrap();
        assert!(matches!(load_image(&p, &[Band::R; 4]), Err(Error::Format { .. })));
        assert!(load_image(&dir.path().join("missing.png"), &[Band::G]).is_err());
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..5 * 4 * 3).map(|i| (i as f32 * 0.137).fract()).collect();
        let img = ImageF::new(5, 4, RGB.to_vec(), data).unwrap();
        let p = dir.path().join("x.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p, &RGB).unwrap();
        let worst = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst as f64 <= 1.0 / 65535.0);
    }

    #[test]
    fn ndvi_refuses_png() {
        let img = ImageF::filled(2, 2, vec![Band::Ndvi], -0.5).unwrap();
        let err = save_image(&img, Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("save_array"));
    }

    #[test]
    fn array_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 2 * 4).map(|i| (i as f32 - 7.3) / 11.0).collect();
        let img = ImageF::new(3, 2, FUSED.to_vec(), data).unwrap();
        let p = dir.path().join("x.pspec");
        save_array(&img, &p).unwrap();
        let back = load_array(&p).unwrap();
        assert_eq!(back.bands(), img.bands());
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(7, 5);
        assert_eq!(resize_bilinear(&img, 7, 5).unwrap(), img);
        let c = ImageF::filled(6, 3, RGB.to_vec(), 0.3).unwrap();
        let r = resize_bilinear(&c, 13, 8).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn resize_two_pixels_to_four() {
        let img = ImageF::new(2, 1, vec![Band::G], vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&img, 4, 1).unwrap();
        // source x = (x + 0.5) / 2 - 0.5, clamped to [0, 1]
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_stays_within_input_range() {
        let img = ramp(9, 4);
        let (lo, hi) = img.data().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for (w, h) in [(3, 2), (20, 11), (1, 1)] {
            let r = resize_bilinear(&img, w, h).unwrap();
            assert!(r.data().iter().all(|&v| v >= lo && v <= hi));
        }
    }

    #[test]
    fn warp_identity_keeps_image() {
        let img = ramp(8, 6);
        let (out, mask) = warp_perspective(&img, &Homography::identity(), 8, 6).unwrap();
        assert_eq!(out, img);
        assert_eq!(mask.valid_count(), 48);
    }

    #[test]
    fn warp_translation_invalidates_left_columns() {
        let img = ramp(30, 4);
        let h = Homography::translation(10.0, 0.0);
        let (out, mask) = warp_perspective(&img, &h, 30, 4).unwrap();
        for y in 0..4 {
            for x in 0..30 {
                assert_eq!(mask.data[y * 30 + x], x >= 10, "x={x}");
                let expect = if x >= 10 { img.get(x - 10, y, 0) } else { 0.0 };
                assert!((out.get(x, y, 0) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn warp_scale_keeps_constant() {
        let c = ImageF::filled(10, 10, vec![Band::G], 0.7).unwrap();
        let h = Homography::from_rows([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let (out, mask) = warp_perspective(&c, &h, 20, 20).unwrap();
        for (v, m) in out.data().iter().zip(&mask.data) {
            if *m {
                assert!((v - 0.7).abs() < 1e-6);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn singular_warp_is_rejected() {
        let img = ramp(4, 4);
        let h = Homography::from_rows([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert!(warp_perspective(&img, &h, 4, 4).is_err());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask {
            width: 3,
            height: 2,
            data: vec![true, false, true, false, false, true],
        };
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(Mask::load_png(&p).unwrap(), m);
    }
}
