//! Binary PPM (P6, 8-bit) and PNG reading and writing.
//!
//! Loading maps an 8-bit sample `v` to `v / 255`; saving clamps to `[0, 1]`
//! and stores `round(v * 255)`, so a PPM load/save cycle is byte-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("ppm") => Ok(Self::Ppm),
            Some("png") => Ok(Self::Png),
            _ => Err(Error::UnsupportedFormat(format!(
                "{} (expected .ppm or .png)",
                path.display()
            ))),
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)?;
    let bytes = fs::read(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        ImageFormat::Ppm => decode_ppm(&bytes),
        ImageFormat::Png => decode_png(&bytes),
    }
}

pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Ppm => encode_ppm(img),
        ImageFormat::Png => encode_png(img)?,
    };
    fs::write(path, bytes).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn interleave(img: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.height() * img.width() * img.channels());
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..img.channels() {
                out.push(to_byte(img.get(c, y, x)));
            }
        }
    }
    out
}

fn deinterleave(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<ImageTensor> {
    ImageTensor::from_planar(
        height,
        width,
        channels,
        (0..channels)
            .flat_map(|c| (0..height * width).map(move |i| bytes[i * channels + c] as f64 / 255.0))
            .collect(),
    )
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let mut cursor = 0usize;
    let magic = next_token(bytes, &mut cursor)
        .ok_or_else(|| Error::MalformedHeader("empty file".into()))?;
    if magic != b"P6" {
        return Err(Error::MalformedHeader(format!(
            "expected magic P6, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut field = |name: &str| -> Result<usize> {
        let tok = next_token(bytes, &mut cursor)
            .ok_or_else(|| Error::MalformedHeader(format!("missing {name}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                Error::MalformedHeader(format!("bad {name}: {:?}", String::from_utf8_lossy(tok)))
            })
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("empty raster {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedBitDepth(format!("maxval {maxval}, only 255 is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cursor) {
        Some(b) if b.is_ascii_whitespace() => cursor += 1,
        _ => return Err(Error::MalformedHeader("missing separator after maxval".into())),
    }
    let needed = width * height * 3;
    let raster = &bytes[cursor..];
    if raster.len() < needed {
        return Err(Error::Truncated(format!(
            "PPM raster has {} of {needed} bytes",
            raster.len()
        )));
    }
    deinterleave(height, width, 3, &raster[..needed])
}

fn next_token<'a>(bytes: &'a [u8], cursor: &mut usize) -> Option<&'a [u8]> {
    loop {
        match bytes.get(*cursor) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*cursor) {
                    *cursor += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *cursor += 1,
            Some(_) => break,
            None => return None,
        }
    }
    let start = *cursor;
    while let Some(b) = bytes.get(*cursor) {
        if b.is_ascii_whitespace() || *b == b'#' {
            break;
        }
        *cursor += 1;
    }
    Some(&bytes[start..*cursor])
}

/// Encodes as P6; single-channel images are replicated to RGB.
pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let rgb = img.to_rgb();
    let mut out = format!("P6\n{} {}\n255\n", rgb.width(), rgb.height()).into_bytes();
    out.extend(interleave(&rgb));
    out
}

fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let decoded = ::image::load_from_memory_with_format(bytes, ::image::ImageFormat::Png)?;
    use ::image::DynamicImage::*;
    match decoded {
        ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            deinterleave(h as usize, w as usize, 1, buf.as_raw())
        }
        ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            deinterleave(h as usize, w as usize, 3, buf.as_raw())
        }
        other => Err(Error::UnsupportedBitDepth(format!(
            "PNG color type {:?}; only 8-bit gray or RGB are supported",
            other.color()
        ))),
    }
}

fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let color = if img.channels() == 1 {
        ::image::ExtendedColorType::L8
    } else {
        ::image::ExtendedColorType::Rgb8
    };
    let mut out = Vec::new();
    ::image::ImageEncoder::write_image(
        ::image::codecs::png::PngEncoder::new(&mut out),
        &interleave(img),
        img.width() as u32,
        img.height() as u32,
        color,
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_minimal_p6() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([0, 0, 0, 255, 255, 255, 10, 20, 30, 40, 50, 60]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 2, 3));
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(2, 0, 1), 1.0);
        assert_eq!(img.get(1, 1, 0), 20.0 / 255.0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 1\n# depth\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap())[..], b"P6\n1 1\n255\n\x01\x02\x03"[..]);
    }

    #[test]
    fn malformed_files_have_distinct_errors() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_ppm(b"P6\n1 x\n255\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(Error::UnsupportedBitDepth(_))
        ));
        assert!(matches!(decode_ppm(b"P6\n2 1\n255\nabc"), Err(Error::Truncated(_))));
        let missing = load_image("/definitely/not/here.ppm");
        assert!(matches!(missing, Err(Error::Unreadable { .. })));
        assert!(matches!(load_image("x.bmp"), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn png_roundtrip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(3, 4, 3, |c, y, x| ((c * 50 + y * 20 + x * 7) % 256) as f64 / 255.0);
        let path = dir.path().join("a.png");
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);

        let gray = ImageTensor::from_fn(2, 5, 1, |_, y, x| (y * 5 + x) as f64 / 255.0);
        let path = dir.path().join("g.png");
        save_image(&gray, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), gray);
    }

    #[test]
    fn save_clamps_out_of_range() {
        let img = ImageTensor::from_planar(1, 2, 1, vec![-0.5, 1.5]).unwrap();
        assert_eq!(&encode_ppm(&img)[11..], &[0, 0, 0, 255, 255, 255]);
    }

    proptest! {
        #[test]
        fn ppm_roundtrip_is_byte_exact(
            (w, h, raster) in (1usize..9, 1usize..9).prop_flat_map(|(w, h)|
                (Just(w), Just(h), proptest::collection::vec(any::<u8>(), w * h * 3)))
        ) {
            let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
            bytes.extend(raster);
            prop_assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()), bytes);
        }
    }
}
