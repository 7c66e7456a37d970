//! Binary PPM/PGM images, the area-preserving resize, and conversion to
//! network input tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor3};

/// 8-bit raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ImageFormat(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::ImageFormat(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::ImageFormat(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn sample(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Grayscale images become three identical channels; RGB is returned as is.
    pub fn to_rgb(&self) -> RasterImage {
        if self.channels == 3 {
            return self.clone();
        }
        let pixels = self.pixels.iter().flat_map(|&v| [v, v, v]).collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 3,
            pixels,
        }
    }

    /// Bilinear resize to exactly `width x height`.
    pub fn resize(&self, width: usize, height: usize) -> Result<RasterImage> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("cannot resize to {width}x{height}")));
        }
        let mut out = vec![0u8; width * height * self.channels];
        for c in 0..self.channels {
            let plane: Vec<f64> = (0..self.height)
                .flat_map(|y| (0..self.width).map(move |x| (x, y)))
                .map(|(x, y)| self.sample(x, y, c) as f64)
                .collect();
            let resized = bilinear_resize(&plane, self.width, self.height, width, height);
            for (i, v) in resized.into_iter().enumerate() {
                out[i * self.channels + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        RasterImage::new(width, height, self.channels, out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Bilinear resampling of a row-major `f64` plane with pixel-center
/// alignment and edge clamping.
pub fn bilinear_resize(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    assert_eq!(src.len(), sw * sh, "plane size");
    let axis = |d: usize, dn: usize, sn: usize| -> (usize, usize, f64) {
        let pos = ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).clamp(0.0, (sn - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(sn - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let (y0, y1, fy) = axis(y, dh, sh);
        for x in 0..dw {
            let (x0, x1, fx) = axis(x, dw, sw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&b) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ImageFormat(format!("missing or invalid {what} in header")))
    }
}

/// Decodes a binary PGM (P5) or PPM (P6) with maxval 255.
pub fn decode_image(bytes: &[u8]) -> Result<RasterImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) => {
            return Err(Error::ImageFormat(format!(
                "unsupported format `{}`; only binary P5/P6 are read",
                String::from_utf8_lossy(m)
            )))
        }
        None => return Err(Error::ImageFormat("file too short".into())),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("maxval {maxval} unsupported; expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !r.bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::ImageFormat("missing whitespace after maxval".into()));
    }
    let payload = &bytes[r.pos + 1..];
    let needed = width * height * channels;
    if payload.len() < needed {
        return Err(Error::ImageFormat(format!(
            "truncated payload: {width}x{height}x{channels} needs {needed} bytes, found {}",
            payload.len()
        )));
    }
    RasterImage::new(width, height, channels, payload[..needed].to_vec())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn write_image(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, img.encode()).map_err(|e| Error::io(path, e))
}

/// Default pixel budget: roughly 512 x 512.
pub const DEFAULT_TARGET_AREA: usize = 512 * 512;
/// Default size divisor (total down-sampling of a five-pool network).
pub const DEFAULT_DIVISOR: usize = 32;

/// Output size of [`area_resize`] for an input of `width x height`.
///
/// Scales both axes by `min(1, sqrt(target_area / (w * h)))` and rounds each
/// to the nearest multiple of `divisor`, never below `divisor`. Images
/// already under budget are not upsampled beyond that rounding.
pub fn resize_dims(width: usize, height: usize, target_area: usize, divisor: usize) -> (usize, usize) {
    let s = (target_area as f64 / (width * height) as f64).sqrt().min(1.0);
    let snap = |len: usize| {
        let units = (s * len as f64 / divisor as f64).round().max(1.0);
        units as usize * divisor
    };
    (snap(width), snap(height))
}

/// Resizes so the pixel count is close to `target_area`, both sides are
/// multiples of `divisor`, and the aspect ratio is kept as far as that allows.
pub fn area_resize(img: &RasterImage, target_area: usize, divisor: usize) -> Result<RasterImage> {
    if target_area == 0 || divisor == 0 {
        return Err(Error::InvalidArgument(
            "target area and divisor must be positive".into(),
        ));
    }
    let (w, h) = resize_dims(img.width, img.height, target_area, divisor);
    img.resize(w, h)
}

/// `sample - mean[c]` as a `W x H x C` tensor.
pub fn to_input_tensor(img: &RasterImage, mean: &[f64]) -> Result<Tensor3> {
    if mean.len() != img.channels {
        return Err(Error::InvalidArgument(format!(
            "mean has {} entries but image has {} channels",
            mean.len(),
            img.channels
        )));
    }
    Tensor3::from_fn(Shape::new(img.width, img.height, img.channels), |w, h, c| {
        img.sample(w, h, c) as f64 - mean[c]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_p5() {
        let mut bytes = b"P5\n# comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 255]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 1));
        assert_eq!(img.pixels(), &[0, 64, 128, 255]);
    }

    #[test]
    fn decode_p6_truncated() {
        let mut bytes = b"P6 4 4 255\n".to_vec();
        bytes.extend_from_slice(&[7; 10]);
        let err = decode_image(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_ascii_and_deep_images() {
        let err = decode_image(b"P3\n1 1\n255\n0 0 0\n").unwrap_err();
        assert!(err.to_string().contains("unsupported format"), "{err}");
        let err = decode_image(b"P5\n1 1\n65535\n\0\0").unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
    }

    #[test]
    fn encode_decode_round_trip() {
        let img = RasterImage::new(3, 2, 3, (0..18).collect()).unwrap();
        assert_eq!(decode_image(&img.encode()).unwrap(), img);
    }

    #[test]
    fn resize_protocol_examples() {
        // s = sqrt(512^2 / 600000) ~= 0.66100; 660.99/32 = 20.66 -> 21, 396.60/32 = 12.39 -> 12
        assert_eq!(resize_dims(1000, 600, DEFAULT_TARGET_AREA, 32), (672, 384));
        assert_eq!(resize_dims(512, 512, DEFAULT_TARGET_AREA, 32), (512, 512));
        assert_eq!(resize_dims(10, 10, DEFAULT_TARGET_AREA, 32), (32, 32));
        assert_eq!(resize_dims(100, 40, DEFAULT_TARGET_AREA, 32), (96, 32));
    }

    #[test]
    fn small_image_clamps_to_divisor() {
        let img = RasterImage::new(10, 10, 1, vec![9; 100]).unwrap();
        let out = area_resize(&img, DEFAULT_TARGET_AREA, 32).unwrap();
        assert_eq!((out.width(), out.height()), (32, 32));
        assert!(out.pixels().iter().all(|&v| v == 9));
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(bilinear_resize(&src, 4, 3, 4, 3), src);
        let c = vec![5.0; 6];
        assert!(bilinear_resize(&c, 3, 2, 7, 5).iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn bilinear_upsample_interpolates() {
        // 2x1 -> 4x1: centers at -0.25, 0.25, 0.75, 1.25 in source coords (clamped).
        let out = bilinear_resize(&[0.0, 4.0], 2, 1, 4, 1);
        assert_eq!(out, vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn input_tensor_examples() {
        let gray = RasterImage::new(2, 1, 1, vec![3, 200]).unwrap();
        assert_eq!(to_input_tensor(&gray, &[0.0]).unwrap().data(), &[3.0, 200.0]);
        let flat = RasterImage::new(2, 2, 1, vec![128; 4]).unwrap();
        assert!(to_input_tensor(&flat, &[128.0])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let rgb = RasterImage::new(1, 1, 3, vec![10, 20, 30]).unwrap();
        assert_eq!(
            to_input_tensor(&rgb, &[1.0, 2.0, 3.0]).unwrap().data(),
            &[9.0, 18.0, 27.0]
        );
        assert!(to_input_tensor(&rgb, &[0.0]).is_err());
    }

    #[test]
    fn input_tensor_uses_x_as_width() {
        // row-major 3x2 image; tensor(w=x, h=y)
        let img = RasterImage::new(3, 2, 1, vec![0, 1, 2, 10, 11, 12]).unwrap();
        let t = to_input_tensor(&img, &[0.0]).unwrap();
        assert_eq!(t.get(2, 0, 0), 2.0);
        assert_eq!(t.get(0, 1, 0), 10.0);
    }

    proptest! {
        #[test]
        fn resize_dims_are_multiples(w in 1usize..5000, h in 1usize..5000) {
            let (rw, rh) = resize_dims(w, h, DEFAULT_TARGET_AREA, 32);
            prop_assert!(rw % 32 == 0 && rh % 32 == 0);
            prop_assert!(rw >= 32 && rh >= 32);
        }

        #[test]
        fn resize_stays_in_area_and_aspect_envelope(w in 256usize..6000, ratio in 0.25f64..4.0) {
            let h = ((w as f64 / ratio).round() as usize).max(1);
            let aspect = w as f64 / h as f64;
            prop_assume!((0.25..=4.0).contains(&aspect));
            // Only downscaling inputs can hit the budget.
            prop_assume!(w * h >= DEFAULT_TARGET_AREA);
            let (rw, rh) = resize_dims(w, h, DEFAULT_TARGET_AREA, 32);
            let area = (rw * rh) as f64;
            let target = DEFAULT_TARGET_AREA as f64;
            prop_assert!((area - target).abs() <= 0.25 * target, "{w}x{h} -> {rw}x{rh}");
            let distortion = ((rw as f64 / rh as f64) / aspect - 1.0).abs();
            prop_assert!(distortion <= 0.2, "{w}x{h} -> {rw}x{rh}: {distortion}");
        }
    }
}
