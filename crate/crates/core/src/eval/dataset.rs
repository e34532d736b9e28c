//! CSV manifests of (path, score, split) and image decoding.

use crate::image::Image;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub score: f64,
    pub split: String,
}

/// Paths in the records are as written in the manifest; relative paths
/// resolve against `root`, the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// One decoded image per record, in manifest order.
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.manifest.records.iter().map(|r| r.score).collect()
    }

    /// (image, score) pairs whose split tag equals `split`.
    pub fn split(&self, split: &str) -> Vec<(Image, f64)> {
        self.manifest
            .records
            .iter()
            .zip(&self.images)
            .filter(|(r, _)| r.split == split)
            .map(|(r, im)| (im.clone(), r.score))
            .collect()
    }
}

/// Decodes an 8-bit PNG or binary PPM/PGM to [0, 1] by dividing by 255.
/// Grayscale files stay single-channel.
pub fn decode_image(path: &Path) -> Result<Image> {
    let dynimg = ::image::open(path).map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
    let (channels, w, h, raw) = if dynimg.color().has_color() {
        let rgb = dynimg.to_rgb8();
        (3, rgb.width() as usize, rgb.height() as usize, rgb.into_raw())
    } else {
        let g = dynimg.to_luma8();
        (1, g.width() as usize, g.height() as usize, g.into_raw())
    };
    let mut data = vec![0.0; raw.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = raw[(y * w + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    Image::new(h, w, channels, data)
}

/// Writes an image as 8-bit PNG, rounding to the nearest code value.
pub fn encode_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut raw = vec![0u8; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                raw[(y * w + x) * c + ch] = (img.get(ch, y, x) * 255.0).round() as u8;
            }
        }
    }
    let color = if c == 3 { ::image::ExtendedColorType::Rgb8 } else { ::image::ExtendedColorType::L8 };
    ::image::save_buffer(path, &raw, w as u32, h as u32, color).map_err(|e| Error::Codec(format!("{}: {e}", path.display())))
}

/// Parses a manifest without decoding images. Line numbers in errors count
/// the header as line 1.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, root)
}

pub fn parse_manifest(text: &str, root: PathBuf) -> Result<DatasetManifest> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Manifest { line: 1, msg: e.to_string() })?
        .iter()
        .map(str::to_ascii_lowercase)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Manifest { line: 1, msg: format!("header must contain path,score,split (missing `{name}`)") })
    };
    let (pc, sc, tc) = (col("path")?, col("score")?, col("split")?);
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Manifest {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.iter().all(str::is_empty) {
            continue;
        }
        let field = |i: usize, name: &str| {
            row.get(i).filter(|s| !s.is_empty()).ok_or_else(|| Error::Manifest { line, msg: format!("missing `{name}`") })
        };
        let p = field(pc, "path")?;
        let s = field(sc, "score")?;
        let score: f64 = s.parse().map_err(|_| Error::Manifest { line, msg: format!("score `{s}` is not a number") })?;
        if !score.is_finite() {
            return Err(Error::Manifest { line, msg: format!("score `{s}` is not finite") });
        }
        let split = row.get(tc).unwrap_or("").to_string();
        records.push(ManifestRecord { path: PathBuf::from(p), score, split });
    }
    Ok(DatasetManifest { root, records })
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let text = std::fs::read_to_string(manifest_path)?;
    // data rows start on line 2; skip blank lines the parser also skipped
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().trim_matches(',').is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    let mut images = Vec::with_capacity(manifest.records.len());
    for (k, r) in manifest.records.iter().enumerate() {
        let full = manifest.root.join(&r.path);
        let line = lines.get(k).copied().unwrap_or(0);
        if !full.exists() {
            return Err(Error::Manifest { line, msg: format!("missing file {}", full.display()) });
        }
        images.push(decode_image(&full).map_err(|e| Error::Manifest { line, msg: e.to_string() })?);
    }
    Ok(Dataset { manifest, images })
}

/// Writes `rows` as a manifest next to already-written images.
pub fn write_manifest(path: &Path, rows: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["path", "score", "split"])?;
    for r in rows {
        w.write_record([r.path.to_string_lossy().as_ref(), &format!("{:?}", r.score), &r.split])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows_and_rejects_bad_score() {
        let m = parse_manifest("path,score,split\na.png,0.5,train\nb.png,1,test\n", PathBuf::new()).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].score, 1.0);
        let e = parse_manifest("path,score,split\na.png,0.5,train\nb.png,abc,test\n", PathBuf::new()).unwrap_err();
        assert!(matches!(e, Error::Manifest { line: 3, .. }), "{e}");
        assert!(parse_manifest("file,score\na.png,1\n", PathBuf::new()).is_err());
    }
}
