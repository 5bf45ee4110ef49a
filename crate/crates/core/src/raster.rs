//! Raster types shared by every segmentation backend, the PNG codec
//! boundary, sRGB to CIE L*u*v* conversion and nearest-neighbour resampling.

use std::io::Cursor;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};

/// Mask pixels at or above this gray level are read as vegetation.
pub const MASK_THRESHOLD: u8 = 128;

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RgbImage {
    /// Wraps an interleaved RGB buffer.
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::validation(format!(
                "rgb buffer has {} bytes, expected {expected} for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        check_dims(width, height)?;
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel by row-major index.
    pub fn pixel(&self, index: usize) -> [u8; 3] {
        let i = index * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl ExactSizeIterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }
}

/// Per-pixel CIE L*u*v* values with the dimensions of the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct LuvImage {
    width: u32,
    height: u32,
    data: Vec<[f32; 3]>,
}

impl LuvImage {
    pub fn from_vec(width: u32, height: u32, data: Vec<[f32; 3]>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width as usize * height as usize {
            return Err(Error::validation("luv buffer length does not match dimensions"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn as_slice(&self) -> &[[f32; 3]] {
        &self.data
    }
}

/// Vegetation / non-vegetation label per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        })
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width as usize * height as usize {
            return Err(Error::validation(format!(
                "mask buffer has {} entries, expected {} for {width}x{height}",
                data.len(),
                width as usize * height as usize
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.data[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    /// Number of vegetation pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn same_dims<T: Dimensions>(&self, other: &T) -> bool {
        self.width == other.width() && self.height == other.height()
    }
}

/// Anything with raster dimensions.
pub trait Dimensions {
    fn width(&self) -> u32;
    fn height(&self) -> u32;
}

macro_rules! impl_dims {
    ($($t:ty),*) => {$(
        impl Dimensions for $t {
            fn width(&self) -> u32 { self.width }
            fn height(&self) -> u32 { self.height }
        }
    )*};
}
impl_dims!(RgbImage, LuvImage, BinaryMask);

pub(crate) fn check_dims(width: u32, height: u32) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::validation(format!(
            "raster dimensions must be at least 1x1, got {width}x{height}"
        )));
    }
    Ok(())
}

pub(crate) fn require_same_dims<A: Dimensions, B: Dimensions>(a: &A, b: &B, what: &str) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::validation(format!(
            "{what}: dimension mismatch {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PNG codec
// ---------------------------------------------------------------------------

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Codec(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RgbImage::from_raw(w, h, rgb.into_raw())
}

/// Decodes any supported still-image payload (PNG or JPEG). Used for
/// payloads returned by imagery services.
pub fn decode_any(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Codec(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RgbImage::from_raw(w, h, rgb.into_raw())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(Cursor::new(&mut out))
        .write_image(&img.data, img.width, img.height, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out)
}

/// Masks are stored as 8-bit grayscale: 255 vegetation, 0 otherwise.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let gray: Vec<u8> = mask.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
    let mut out = Vec::new();
    PngEncoder::new(Cursor::new(&mut out))
        .write_image(&gray, mask.width, mask.height, ExtendedColorType::L8)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out)
}

/// Reads a mask PNG; any pixel with luma >= 128 is vegetation.
pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Codec(e.to_string()))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|v| v >= MASK_THRESHOLD).collect();
    BinaryMask::from_vec(w, h, data)
}

// ---------------------------------------------------------------------------
// Color
// ---------------------------------------------------------------------------

// sRGB primaries, D65 white (IEC 61966-2-1).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(c: u8) -> f64 {
    let c = f64::from(c) / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn white_point() -> [f64; 3] {
    let m = RGB_TO_XYZ;
    [
        m[0][0] + m[0][1] + m[0][2],
        m[1][0] + m[1][1] + m[1][2],
        m[2][0] + m[2][1] + m[2][2],
    ]
}

fn uv_prime(xyz: [f64; 3]) -> Option<(f64, f64)> {
    let d = xyz[0] + 15.0 * xyz[1] + 3.0 * xyz[2];
    (d > 0.0).then(|| (4.0 * xyz[0] / d, 9.0 * xyz[1] / d))
}

/// Converts one sRGB triple to L*u*v* (D65, white taken from the matrix so
/// that (255,255,255) maps to u* = v* = 0).
pub fn srgb_to_luv(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let m = RGB_TO_XYZ;
    let xyz = [0, 1, 2].map(|r| m[r][0] * lin[0] + m[r][1] * lin[1] + m[r][2] * lin[2]);
    let white = white_point();
    let yr = xyz[1] / white[1];
    let l = if yr > EPSILON {
        116.0 * yr.cbrt() - 16.0
    } else {
        KAPPA * yr
    };
    let l = l.clamp(0.0, 100.0);
    let (un, vn) = uv_prime(white).expect("white point is nonzero");
    match uv_prime(xyz) {
        Some((u, v)) => [l, 13.0 * l * (u - un), 13.0 * l * (v - vn)],
        None => [0.0, 0.0, 0.0],
    }
}

pub fn rgb_to_luv(img: &RgbImage) -> LuvImage {
    // Only 256 distinct channel values, but a full 24-bit table is too big;
    // convert per pixel.
    let data = img
        .pixels()
        .map(|p| srgb_to_luv(p).map(|c| c as f32))
        .collect();
    LuvImage {
        width: img.width,
        height: img.height,
        data,
    }
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Source index for destination coordinate `d` when mapping `src` cells onto
/// `dst` cells: `floor(d * src / dst)`.
#[inline]
pub fn nearest_source(d: u32, src: u32, dst: u32) -> u32 {
    ((u64::from(d) * u64::from(src)) / u64::from(dst)) as u32
}

/// Nearest-neighbour resampling of a row-major grid of `T`.
pub fn resize_grid<T: Copy>(
    data: &[T],
    width: u32,
    height: u32,
    new_w: u32,
    new_h: u32,
) -> Result<Vec<T>> {
    check_dims(new_w, new_h)?;
    check_dims(width, height)?;
    if data.len() != width as usize * height as usize {
        return Err(Error::validation("grid length does not match dimensions"));
    }
    if new_w == width && new_h == height {
        return Ok(data.to_vec());
    }
    let cols: Vec<usize> = (0..new_w)
        .map(|x| nearest_source(x, width, new_w) as usize)
        .collect();
    let mut out = Vec::with_capacity(new_w as usize * new_h as usize);
    for y in 0..new_h {
        let row = nearest_source(y, height, new_h) as usize * width as usize;
        out.extend(cols.iter().map(|&c| data[row + c]));
    }
    Ok(out)
}

pub fn resize_nearest(img: &RgbImage, new_w: u32, new_h: u32) -> Result<RgbImage> {
    let px: Vec<[u8; 3]> = img.pixels().collect();
    let out = resize_grid(&px, img.width, img.height, new_w, new_h)?;
    RgbImage::from_raw(new_w, new_h, out.into_iter().flatten().collect())
}

pub fn resize_mask_nearest(mask: &BinaryMask, new_w: u32, new_h: u32) -> Result<BinaryMask> {
    let out = resize_grid(&mask.data, mask.width, mask.height, new_w, new_h)?;
    BinaryMask::from_vec(new_w, new_h, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    // 2x2 RGB PNG written by an independent encoder (Python zlib + struct):
    // red, green / blue, white.
    const GOLDEN_2X2: &[u8] = &[
        0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44,
        0x52, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0x08, 0x02, 0x00, 0x00, 0x00, 0xfd,
        0xd4, 0x9a, 0x73, 0x00, 0x00, 0x00, 0x12, 0x49, 0x44, 0x41, 0x54, 0x78, 0xda, 0x63, 0xf8,
        0xcf, 0xc0, 0xc0, 0x00, 0xc2, 0x0c, 0xff, 0x81, 0x00, 0x00, 0x1f, 0xee, 0x05, 0xfb, 0xf1,
        0xab, 0xba, 0x77, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
    ];

    #[test]
    fn golden_png_decodes_to_known_pixels() {
        let img = decode_png(GOLDEN_2X2).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.get(0, 0), [255, 0, 0]);
        assert_eq!(img.get(1, 0), [0, 255, 0]);
        assert_eq!(img.get(0, 1), [0, 0, 255]);
        assert_eq!(img.get(1, 1), [255, 255, 255]);
    }

    #[test]
    fn truncated_png_is_codec_error() {
        let bytes = encode_png(&RgbImage::filled(8, 8, [1, 2, 3]).unwrap()).unwrap();
        let err = decode_png(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Codec(_)), "{err}");
    }

    #[test]
    fn mask_threshold_on_ingest() {
        let gray = [0u8, 127, 128, 255];
        let mut out = Vec::new();
        PngEncoder::new(Cursor::new(&mut out))
            .write_image(&gray, 2, 2, ExtendedColorType::L8)
            .unwrap();
        let m = decode_mask_png(&out).unwrap();
        assert_eq!(m.as_slice(), &[false, false, true, true]);
        let back = decode_mask_png(&encode_mask_png(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn black_and_white_reference_points() {
        assert_eq!(srgb_to_luv([0, 0, 0]), [0.0, 0.0, 0.0]);
        let [l, u, v] = srgb_to_luv([255, 255, 255]);
        assert!((l - 100.0).abs() < 1e-9, "{l}");
        assert!(u.abs() < 0.01 && v.abs() < 0.01, "{u} {v}");
    }

    #[test]
    fn mid_gray_matches_scalar_reference() {
        // Reference from an independent scalar conversion (Python, float64,
        // nominal CIE constants): L* of sRGB (119,119,119).
        const L_REF: f64 = 50.034_438_792_538_225;
        let [l, u, v] = srgb_to_luv([119, 119, 119]);
        assert!((l - L_REF).abs() < 1e-6, "{l}");
        assert!(u.abs() < 1e-9 && v.abs() < 1e-9);
    }

    #[test]
    fn saturated_green_has_negative_u() {
        let [_, u, v] = srgb_to_luv([0, 255, 0]);
        assert!(u < -50.0 && v > 50.0);
    }

    #[test]
    fn resize_rules() {
        let img = RgbImage::from_fn(3, 2, |x, y| [x as u8, y as u8, 7]).unwrap();
        assert_eq!(resize_nearest(&img, 3, 2).unwrap(), img);

        let one = RgbImage::filled(1, 1, [9, 8, 7]).unwrap();
        let up = resize_nearest(&one, 4, 4).unwrap();
        assert!(up.pixels().all(|p| p == [9, 8, 7]));
        assert_eq!(up.pixel_count(), 16);

        assert!(matches!(resize_nearest(&img, 0, 3), Err(Error::Validation(_))));
    }

    #[test]
    fn checkerboard_downsample_takes_block_corners() {
        let board = RgbImage::from_fn(4, 4, |x, y| {
            if (x + y) % 2 == 0 { [255; 3] } else { [0; 3] }
        })
        .unwrap();
        let small = resize_nearest(&board, 2, 2).unwrap();
        // Brute-force index map: destination (i,j) reads source (2i,2j).
        for j in 0..2 {
            for i in 0..2 {
                assert_eq!(small.get(i, j), board.get(2 * i, 2 * j));
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = BinaryMask::new(2, 2).unwrap();
        let b = BinaryMask::new(2, 3).unwrap();
        assert!(require_same_dims(&a, &b, "test").is_err());
        assert!(RgbImage::from_raw(2, 2, vec![0; 11]).is_err());
    }
}
