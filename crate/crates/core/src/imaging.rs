//! Byte-stream to RGB-image packing and lossless serialization.
//!
//! Consecutive bytes become channel triplets: flat pixel index `idx` reads
//! `r = bytes[3*idx]`, `g = bytes[3*idx+1]`, `b = bytes[3*idx+2]`. Missing
//! bytes pad with zeros; surplus bytes are dropped and flagged.

use std::io::Cursor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid geometry {width}x{height}: both extents must be at least 1")]
    InvalidGeometry { width: u32, height: u32 },
    #[error("encode failure: {0}")]
    EncodeFailure(String),
    #[error("malformed image container: {0}")]
    MalformedContainer(String),
}

/// Output pixel grid dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageGeometry {
    pub width: u32,
    pub height: u32,
}

impl ImageGeometry {
    pub fn new(width: u32, height: u32) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidGeometry { width, height });
        }
        Ok(ImageGeometry { width, height })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Bytes the grid can hold: three channels per pixel.
    pub fn byte_capacity(&self) -> usize {
        self.pixel_count() * 3
    }
}

/// Row-major RGB pixel grid. `truncated` records that the source byte stream
/// exceeded the grid capacity and the tail was dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub geometry: ImageGeometry,
    pixels: Vec<u8>,
    pub truncated: bool,
}

impl RgbImage {
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> (u8, u8, u8) {
        let idx = (y as usize * self.geometry.width as usize + x as usize) * 3;
        (self.pixels[idx], self.pixels[idx + 1], self.pixels[idx + 2])
    }
}

/// Pack a byte stream into an RGB grid of the given geometry.
pub fn pack_rgb(bytes: &[u8], geom: ImageGeometry) -> RgbImage {
    let capacity = geom.byte_capacity();
    let mut pixels = vec![0u8; capacity];
    let n = bytes.len().min(capacity);
    pixels[..n].copy_from_slice(&bytes[..n]);
    RgbImage {
        geometry: geom,
        pixels,
        truncated: bytes.len() > capacity,
    }
}

/// Image a manifest byte stream. The manifest is consumed as-is (binary AXML
/// or plain text); the packing rule is the same as for DEX index bytes.
pub fn xml_to_image(xml_bytes: &[u8], geom: ImageGeometry) -> RgbImage {
    pack_rgb(xml_bytes, geom)
}

/// Serialization containers. PNG round-trips exactly; JPEG is lossy and only
/// kept for parity with pipelines that store jpg.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ImageFormat {
    LosslessPng,
    Jpeg,
}

pub fn encode_image(img: &RgbImage, format: ImageFormat) -> Result<Vec<u8>, ImageError> {
    let buffer: ::image::RgbImage = ::image::ImageBuffer::from_raw(
        img.geometry.width,
        img.geometry.height,
        img.pixels.clone(),
    )
    .expect("pixel buffer length matches geometry");
    let mut out = Cursor::new(Vec::new());
    let fmt = match format {
        ImageFormat::LosslessPng => ::image::ImageFormat::Png,
        ImageFormat::Jpeg => ::image::ImageFormat::Jpeg,
    };
    ::image::DynamicImage::ImageRgb8(buffer)
        .write_to(&mut out, fmt)
        .map_err(|e| ImageError::EncodeFailure(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decode a PNG (or JPEG) container back to a pixel grid. Only the PNG path
/// is an exact inverse of [`encode_image`]; `truncated` is not stored in the
/// container and always comes back false.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    let decoded = ::image::load_from_memory(bytes)
        .map_err(|e| ImageError::MalformedContainer(e.to_string()))?
        .into_rgb8();
    let geometry = ImageGeometry::new(decoded.width(), decoded.height())
        .map_err(|_| ImageError::MalformedContainer("zero-sized image".into()))?;
    Ok(RgbImage {
        geometry,
        pixels: decoded.into_raw(),
        truncated: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(w: u32, h: u32) -> ImageGeometry {
        ImageGeometry::new(w, h).unwrap()
    }

    #[test]
    fn worked_example_single_pixel() {
        let img = pack_rgb(&[0x86, 0x88, 0x12], geom(1, 1));
        assert_eq!(img.pixel(0, 0), (134, 136, 18));
        assert!(!img.truncated);
    }

    #[test]
    fn empty_input_pads_with_zeros() {
        let img = pack_rgb(&[], geom(2, 2));
        assert_eq!(img.pixels(), &[0u8; 12]);
        assert!(!img.truncated);
    }

    #[test]
    fn partial_pixel_pads_remaining_channels() {
        let img = pack_rgb(&[1, 2, 3, 4], geom(2, 1));
        assert_eq!(img.pixel(0, 0), (1, 2, 3));
        assert_eq!(img.pixel(1, 0), (4, 0, 0));
    }

    #[test]
    fn overflow_sets_truncated() {
        let img = pack_rgb(&[7u8; 100], geom(4, 4));
        assert!(img.truncated);
        assert_eq!(img.pixels().len(), 48);
    }

    #[test]
    fn xml_path_uses_same_packing() {
        let img = xml_to_image(b"ABC", geom(1, 1));
        assert_eq!(img.pixel(0, 0), (65, 66, 67));
        assert_eq!(xml_to_image(b"ABC", geom(1, 1)), img);
        assert!(xml_to_image(&[0u8; 100], geom(4, 4)).truncated);
    }

    #[test]
    fn zero_geometry_is_rejected() {
        assert!(ImageGeometry::new(0, 4).is_err());
        assert!(ImageGeometry::new(4, 0).is_err());
    }

    #[test]
    fn png_round_trip_is_exact() {
        let img = pack_rgb(&[0x86, 0x88, 0x12, 9, 8], geom(2, 2));
        let png = encode_image(&img, ImageFormat::LosslessPng).unwrap();
        let back = decode_image(&png).unwrap();
        assert_eq!(back.pixels(), img.pixels());
        assert_eq!(back.geometry, img.geometry);
    }

    #[test]
    fn jpeg_encodes_and_decodes_with_right_shape() {
        let img = pack_rgb(&[33u8; 48], geom(4, 4));
        let jpg = encode_image(&img, ImageFormat::Jpeg).unwrap();
        let back = decode_image(&jpg).unwrap();
        assert_eq!(back.geometry, img.geometry);
    }

    #[test]
    fn garbage_container_is_rejected() {
        assert!(matches!(
            decode_image(&[1, 2, 3, 4]),
            Err(ImageError::MalformedContainer(_))
        ));
    }

    proptest! {
        // Independent brute-force packer: walk pixel positions and assemble
        // each channel from the byte stream one index at a time.
        #[test]
        fn matches_bruteforce_packer(
            bytes in proptest::collection::vec(any::<u8>(), 0..300),
            w in 1u32..12,
            h in 1u32..12,
        ) {
            let g = geom(w, h);
            let img = pack_rgb(&bytes, g);
            for i in 0..h {
                for j in 0..w {
                    let idx = (i * w + j) as usize;
                    let pick = |k: usize| bytes.get(3 * idx + k).copied().unwrap_or(0);
                    prop_assert_eq!(img.pixel(j, i), (pick(0), pick(1), pick(2)));
                }
            }
            prop_assert_eq!(img.truncated, bytes.len() > g.byte_capacity());
        }

        #[test]
        fn prefix_of_bytes_gives_prefix_of_pixels(
            bytes in proptest::collection::vec(any::<u8>(), 0..200),
            cut in 0usize..200,
            w in 1u32..10,
            h in 1u32..10,
        ) {
            let cut = cut.min(bytes.len());
            let g = geom(w, h);
            let full = pack_rgb(&bytes, g);
            let part = pack_rgb(&bytes[..cut], g);
            let covered = cut.min(g.byte_capacity());
            prop_assert_eq!(&full.pixels()[..covered], &part.pixels()[..covered]);
        }

        #[test]
        fn png_round_trip_random(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let img = pack_rgb(&bytes, geom(5, 7));
            let png = encode_image(&img, ImageFormat::LosslessPng).unwrap();
            let back = decode_image(&png).unwrap();
            prop_assert_eq!(back.pixels(), img.pixels());
        }
    }
}
