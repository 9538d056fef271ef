//! PNG container checks against a reference decoder written here from the
//! container spec: chunk walking, zlib inflate, and per-scanline defiltering
//! are all independent of the production decode path.

use bido_core::imaging::{decode_image, encode_image, pack_rgb, ImageFormat, ImageGeometry};

fn be32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

struct OraclePng {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

/// Minimal truecolor-PNG reader: signature, IHDR (8-bit RGB, no interlace),
/// concatenated IDAT inflate, filter reversal.
fn oracle_decode(bytes: &[u8]) -> OraclePng {
    assert_eq!(
        &bytes[..8],
        &[0x89, 0x50, 0x4E, 0x47, 0x0D, 0x0A, 0x1A, 0x0A],
        "png signature"
    );
    let mut at = 8;
    let mut width = 0usize;
    let mut height = 0usize;
    let mut idat = Vec::new();
    while at + 8 <= bytes.len() {
        let len = be32(&bytes[at..]) as usize;
        let kind = &bytes[at + 4..at + 8];
        let data = &bytes[at + 8..at + 8 + len];
        match kind {
            b"IHDR" => {
                width = be32(&data[0..]) as usize;
                height = be32(&data[4..]) as usize;
                assert_eq!(data[8], 8, "bit depth");
                assert_eq!(data[9], 2, "color type must be truecolor");
                assert_eq!(data[12], 0, "no interlace");
            }
            b"IDAT" => idat.extend_from_slice(data),
            b"IEND" => break,
            _ => {}
        }
        at += 12 + len; // len + type + data + crc
    }
    let raw = miniz_oxide::inflate::decompress_to_vec_zlib(&idat).expect("zlib stream");

    // Reverse scanline filters; 3 bytes per pixel.
    let bpp = 3;
    let stride = width * bpp;
    assert_eq!(raw.len(), height * (stride + 1), "scanline layout");
    let mut rgb = vec![0u8; height * stride];
    let paeth = |a: i16, b: i16, c: i16| -> u8 {
        let p = a + b - c;
        let (pa, pb, pc) = ((p - a).abs(), (p - b).abs(), (p - c).abs());
        if pa <= pb && pa <= pc {
            a as u8
        } else if pb <= pc {
            b as u8
        } else {
            c as u8
        }
    };
    for y in 0..height {
        let filter = raw[y * (stride + 1)];
        let src = &raw[y * (stride + 1) + 1..(y + 1) * (stride + 1)];
        for x in 0..stride {
            let left = if x >= bpp { rgb[y * stride + x - bpp] } else { 0 } as i16;
            let up = if y > 0 { rgb[(y - 1) * stride + x] } else { 0 } as i16;
            let up_left = if y > 0 && x >= bpp {
                rgb[(y - 1) * stride + x - bpp]
            } else {
                0
            } as i16;
            let recon = match filter {
                0 => src[x],
                1 => src[x].wrapping_add(left as u8),
                2 => src[x].wrapping_add(up as u8),
                3 => src[x].wrapping_add(((left + up) / 2) as u8),
                4 => src[x].wrapping_add(paeth(left, up, up_left)),
                f => panic!("unexpected filter {f}"),
            };
            rgb[y * stride + x] = recon;
        }
    }
    OraclePng { width, height, rgb }
}

#[test]
fn single_pixel_example_survives_the_container() {
    let img = pack_rgb(&[0x86, 0x88, 0x12], ImageGeometry::new(1, 1).unwrap());
    let png = encode_image(&img, ImageFormat::LosslessPng).unwrap();
    let oracle = oracle_decode(&png);
    assert_eq!((oracle.width, oracle.height), (1, 1));
    assert_eq!(oracle.rgb, vec![134, 136, 18]);
}

#[test]
fn encoded_pngs_match_reference_decoder() {
    let geoms = [(1u32, 1u32), (3, 2), (16, 16), (64, 64), (31, 7)];
    let mut state = 0x12345u64;
    for (w, h) in geoms {
        let n = (w * h * 3) as usize;
        let bytes: Vec<u8> = (0..n)
            .map(|_| {
                // Small xorshift keeps the fixture self-contained.
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                state as u8
            })
            .collect();
        let img = pack_rgb(&bytes, ImageGeometry::new(w, h).unwrap());
        let png = encode_image(&img, ImageFormat::LosslessPng).unwrap();

        let oracle = oracle_decode(&png);
        assert_eq!((oracle.width as u32, oracle.height as u32), (w, h));
        assert_eq!(oracle.rgb.as_slice(), img.pixels(), "{w}x{h} oracle");

        let back = decode_image(&png).unwrap();
        assert_eq!(back.pixels(), img.pixels(), "{w}x{h} production");
    }
}
