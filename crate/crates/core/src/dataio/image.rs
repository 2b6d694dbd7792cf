use std::path::Path;

use super::{read_file, write_file, DataError, Manifest};

pub const HEIGHT: usize = 32;
pub const WIDTH: usize = 32;
pub const CHANNELS: usize = 3;

/// An `H×W×C` image with values in `[0,1]` and its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub subject_id: String,
    pub age: f32,
    pub style_id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pixels: Vec<f32>,
}

impl ImageSample {
    /// Builds a sample, clamping pixels into `[0,1]`.
    pub fn new(
        subject_id: impl Into<String>,
        age: f32,
        style_id: impl Into<String>,
        (height, width, channels): (usize, usize, usize),
        mut pixels: Vec<f32>,
    ) -> Result<Self, DataError> {
        if pixels.len() != height * width * channels {
            return Err(DataError::Dimension {
                expected: height * width * channels,
                found: pixels.len(),
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(DataError::Invalid("non-finite pixel".into()));
        }
        pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        Ok(Self {
            subject_id: subject_id.into(),
            age,
            style_id: style_id.into(),
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn at(&self, r: usize, c: usize, ch: usize) -> f32 {
        self.pixels[(r * self.width + c) * self.channels + ch]
    }
}

/// Binary 8-bit portable pixmap (`P6`). Values are rounded to the nearest 1/255.
pub fn encode_ppm(img: &ImageSample) -> Result<Vec<u8>, DataError> {
    encode_ppm_tagged(img, None)
}

/// As [`encode_ppm`], with an optional single-line header comment.
pub fn encode_ppm_tagged(img: &ImageSample, comment: Option<&str>) -> Result<Vec<u8>, DataError> {
    if img.channels != 3 {
        return Err(DataError::Invalid(format!(
            "PPM needs 3 channels, image has {}",
            img.channels
        )));
    }
    if comment.is_some_and(|c| c.contains(['\n', '\r'])) {
        return Err(DataError::Invalid(
            "PPM comment must be a single line".into(),
        ));
    }
    let comment = comment.map(|c| format!("# {c}\n")).unwrap_or_default();
    let mut out = format!("P6\n{comment}{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&p| (p * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(
    bytes: &[u8],
    subject_id: &str,
    age: f32,
    style_id: &str,
) -> Result<ImageSample, DataError> {
    let corrupt = |detail: &str| DataError::Corrupt {
        what: "pixel file",
        detail: detail.to_string(),
    };
    // header: 4 whitespace-separated tokens, then a single whitespace byte;
    // `#` starts a comment running to the end of the line
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("header"))?);
    }
    if tokens[0] != "P6" {
        return Err(corrupt("not a binary P6 pixmap"));
    }
    let parse = |t: &str| t.parse::<usize>().map_err(|_| corrupt("bad header number"));
    let (w, h, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
    if maxval != 255 {
        return Err(corrupt("only 8-bit pixmaps are supported"));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != w * h * 3 {
        return Err(corrupt(&format!(
            "expected {} pixel bytes, found {}",
            w * h * 3,
            body.len()
        )));
    }
    let pixels = body.iter().map(|&b| b as f32 / 255.0).collect();
    ImageSample::new(subject_id, age, style_id, (h, w, 3), pixels)
}

pub fn write_ppm(path: &Path, img: &ImageSample) -> Result<(), DataError> {
    write_file(path, &encode_ppm(img)?)
}

pub fn write_ppm_tagged(path: &Path, img: &ImageSample, comment: &str) -> Result<(), DataError> {
    write_file(path, &encode_ppm_tagged(img, Some(comment))?)
}

pub fn read_ppm(
    path: &Path,
    subject_id: &str,
    age: f32,
    style_id: &str,
) -> Result<ImageSample, DataError> {
    decode_ppm(&read_file(path)?, subject_id, age, style_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_comments_are_skipped() {
        let img = ImageSample::new(
            "s",
            3.0,
            "st0",
            (2, 2, 3),
            (0..12).map(|v| v as f32 / 255.0).collect(),
        )
        .unwrap();
        let bytes = encode_ppm_tagged(&img, Some("config abc")).unwrap();
        assert!(bytes.starts_with(b"P6\n# config abc\n2 2\n255\n"));
        assert_eq!(decode_ppm(&bytes, "s", 3.0, "st0").unwrap(), img);
        assert!(encode_ppm_tagged(&img, Some("a\nb")).is_err());
    }

    #[test]
    fn clamps_into_unit_range() {
        let img = ImageSample::new(
            "s",
            4.0,
            "st0",
            (1, 2, 3),
            vec![-0.5, 0.2, 1.7, 0.0, 1.0, 0.5],
        )
        .unwrap();
        assert_eq!(img.pixels(), &[0.0, 0.2, 1.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn quantized_pixels_survive_ppm() {
        let px: Vec<f32> = (0..2 * 3 * 3)
            .map(|i| (i * 13 % 256) as f32 / 255.0)
            .collect();
        let img = ImageSample::new("s", 4.0, "st0", (2, 3, 3), px).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap(), "s", 4.0, "st0").unwrap();
        assert_eq!(back, img);
        let bytes = encode_ppm(&img).unwrap();
        assert!(decode_ppm(&bytes[..bytes.len() - 1], "s", 4.0, "st0").is_err());
    }
}

/// Reads every image listed in `manifest`, with paths relative to `dir`.
pub fn read_images(dir: &Path, manifest: &Manifest) -> Result<Vec<ImageSample>, DataError> {
    manifest
        .records()
        .iter()
        .map(|r| read_ppm(&dir.join(&r.path), &r.subject_id, r.age, &r.style_id))
        .collect()
}
