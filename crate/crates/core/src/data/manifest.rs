//! `manifest.csv` ingestion and export.
//!
//! Layout: `<root>/manifest.csv` with header `path,label,split`, paths
//! relative to `<root>`, split one of `train`/`test`. Images are 8- or 16-bit
//! grayscale PNG/PGM and are scaled to [0, 1] by the format maximum, with no
//! other preprocessing.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageReader};
use serde::Serialize;

use super::{Dataset, Image, Sample, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const META_FILE: &str = "meta.csv";

struct Row {
    line: usize,
    path: String,
    label: String,
    split: Split,
}

fn manifest_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn decode(file: &Path) -> std::result::Result<Image, String> {
    let img = ImageReader::open(file)
        .map_err(|e| format!("cannot open {}: {e}", file.display()))?
        .with_guessed_format()
        .map_err(|e| format!("cannot read {}: {e}", file.display()))?
        .decode()
        .map_err(|e| format!("cannot decode {}: {e}", file.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect(),
        DynamicImage::ImageLuma16(g) => g
            .into_raw()
            .into_iter()
            .map(|v| f32::from(v) / 65535.0)
            .collect(),
        other => {
            return Err(format!(
                "{} is not single-channel ({:?})",
                file.display(),
                other.color()
            ))
        }
    };
    Image::new(h, w, 1, data).map_err(|e| e.to_string())
}

/// Loads `<dir>/manifest.csv`. Integer labels must be exactly `0..K`;
/// textual labels are indexed in sorted order.
pub fn load_manifest(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(&mpath)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                &mpath,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => Error::Csv(e),
        })?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != ["path", "label", "split"] {
        return Err(manifest_err(
            &mpath,
            1,
            format!("header must be `path,label,split`, got `{}`", header.join(",")),
        ));
    }

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            manifest_err(&mpath, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(manifest_err(&mpath, line, format!("expected 3 fields, got {}", rec.len())));
        }
        let (path, label, split) = (&rec[0], &rec[1], &rec[2]);
        if path.is_empty() || label.is_empty() {
            return Err(manifest_err(&mpath, line, "empty path or label"));
        }
        let split: Split = split
            .parse()
            .map_err(|_| manifest_err(&mpath, line, format!("unknown split tag `{split}`")))?;
        if !seen.insert(path.to_owned()) {
            return Err(manifest_err(&mpath, line, format!("duplicate path `{path}`")));
        }
        rows.push(Row {
            line,
            path: path.to_owned(),
            label: label.to_owned(),
            split,
        });
    }
    if rows.is_empty() {
        return Err(manifest_err(&mpath, 1, "manifest has no rows"));
    }

    let class_names = class_index(&mpath, &rows)?;
    let mut samples = Vec::with_capacity(rows.len());
    let mut geom = None;
    for row in &rows {
        let file = dir.join(&row.path);
        if !file.is_file() {
            return Err(manifest_err(&mpath, row.line, format!("missing file `{}`", row.path)));
        }
        let image = decode(&file).map_err(|m| manifest_err(&mpath, row.line, m))?;
        let g = (image.height, image.width);
        match geom {
            None => geom = Some(g),
            Some(first) if first != g => {
                return Err(manifest_err(
                    &mpath,
                    row.line,
                    format!("image is {}x{}, expected {}x{}", g.0, g.1, first.0, first.1),
                ))
            }
            _ => {}
        }
        let label = class_names
            .iter()
            .position(|c| *c == row.label)
            .expect("label indexed above");
        samples.push(Sample {
            image,
            label,
            split: row.split,
            fg_mask: None,
            bg_id: None,
        });
    }
    Dataset::new(samples, class_names)
}

fn class_index(mpath: &Path, rows: &[Row]) -> Result<Vec<String>> {
    let numeric: Option<Vec<usize>> = rows.iter().map(|r| r.label.parse().ok()).collect();
    match numeric {
        Some(nums) => {
            let distinct: BTreeSet<usize> = nums.iter().copied().collect();
            let k = distinct.len();
            if let Some((row, &v)) = rows.iter().zip(&nums).find(|(_, &v)| v >= k) {
                return Err(manifest_err(
                    mpath,
                    row.line,
                    format!("label {v} breaks the contiguous range 0..{}", k - 1),
                ));
            }
            Ok((0..k).map(|i| i.to_string()).collect())
        }
        None => {
            let names: BTreeSet<&str> = rows.iter().map(|r| r.label.as_str()).collect();
            Ok(names.into_iter().map(str::to_owned).collect())
        }
    }
}

fn to_gray8(img: &Image) -> GrayImage {
    let raw: Vec<u8> = (0..img.height * img.width)
        .map(|p| (img.data[p * img.channels] * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::from_raw(img.width as u32, img.height as u32, raw).expect("buffer sized from image")
}

#[derive(Serialize)]
struct ManifestRow<'a> {
    path: &'a str,
    label: &'a str,
    split: &'a str,
}

#[derive(Serialize)]
struct MetaRow<'a> {
    path: &'a str,
    bg_id: Option<usize>,
    fg_mask_path: Option<&'a str>,
}

/// Writes images as 8-bit PNG plus `manifest.csv`, and `meta.csv` with
/// background ids and mask paths for synthetic samples.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mk = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mk(dir)?;
    let mpath = dir.join(MANIFEST_FILE);
    let meta_path = dir.join(META_FILE);
    let mut manifest = csv::Writer::from_path(&mpath)?;
    let mut meta = csv::Writer::from_path(&meta_path)?;
    let mut counters = [0usize; 2];
    for s in &ds.samples {
        let slot = &mut counters[s.split as usize];
        let idx = *slot;
        *slot += 1;
        let rel = format!("images/{}/{idx:05}.png", s.split);
        let file: PathBuf = dir.join(&rel);
        mk(file.parent().expect("nested path"))?;
        to_gray8(&s.image).save(&file)?;
        let mask_rel = match &s.fg_mask {
            Some(mask) => {
                let rel = format!("masks/{}/{idx:05}.png", s.split);
                let file = dir.join(&rel);
                mk(file.parent().expect("nested path"))?;
                let raw = mask.iter().map(|&m| if m { 255u8 } else { 0 }).collect();
                GrayImage::from_raw(s.image.width as u32, s.image.height as u32, raw)
                    .expect("mask sized from image")
                    .save(&file)?;
                Some(rel)
            }
            None => None,
        };
        manifest.serialize(ManifestRow {
            path: &rel,
            label: &ds.class_names[s.label],
            split: s.split.as_str(),
        })?;
        meta.serialize(MetaRow {
            path: &rel,
            bg_id: s.bg_id,
            fg_mask_path: mask_rel.as_deref(),
        })?;
    }
    manifest.flush().map_err(|e| Error::io(&mpath, e))?;
    meta.flush().map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) {
        fs::write(dir.join(MANIFEST_FILE), body).unwrap();
    }

    fn png(dir: &Path, rel: &str, v: u8) {
        let p = dir.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        GrayImage::from_raw(4, 4, vec![v; 16]).unwrap().save(p).unwrap();
    }

    fn line_of(e: Error) -> usize {
        match e {
            Error::Manifest { line, .. } => line,
            other => panic!("expected manifest error, got {other}"),
        }
    }

    #[test]
    fn loads_and_scales() {
        let d = tempfile::tempdir().unwrap();
        png(d.path(), "a.png", 255);
        png(d.path(), "b.png", 0);
        write(d.path(), "path,label,split\na.png,1,train\nb.png,0,test\n");
        let ds = load_manifest(d.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[0].label, 1);
        assert!(ds.samples[0].image.data.iter().all(|&v| v == 1.0));
        assert_eq!(ds.samples[1].split, Split::Test);
    }

    #[test]
    fn sixteen_bit_scaled_by_format_max() {
        let d = tempfile::tempdir().unwrap();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 2, vec![65535u16, 0, 32768, 1]).unwrap();
        img.save(d.path().join("a.png")).unwrap();
        png(d.path(), "b.png", 1);
        write(d.path(), "path,label,split\na.png,x,train\nb.png,y,test\n");
        let ds = load_manifest(d.path());
        // mixed geometry is rejected on the second row
        assert_eq!(line_of(ds.unwrap_err()), 3);
        fs::remove_file(d.path().join("b.png")).unwrap();
        write(d.path(), "path,label,split\na.png,x,train\n");
        let ds = load_manifest(d.path()).unwrap();
        assert_eq!(ds.samples[0].image.data[0], 1.0);
        assert!((ds.samples[0].image.data[2] - 32768.0 / 65535.0).abs() < 1e-7);
    }

    #[test]
    fn textual_labels_sorted() {
        let d = tempfile::tempdir().unwrap();
        png(d.path(), "a.png", 3);
        png(d.path(), "b.png", 3);
        write(d.path(), "path,label,split\na.png,T72,train\nb.png,2S1,train\n");
        let ds = load_manifest(d.path()).unwrap();
        assert_eq!(ds.class_names, vec!["2S1", "T72"]);
        assert_eq!(ds.labels(), vec![1, 0]);
    }

    #[test]
    fn malformed_manifests_name_the_row() {
        let d = tempfile::tempdir().unwrap();
        png(d.path(), "a.png", 3);
        png(d.path(), "b.png", 3);

        write(d.path(), "path,label,split\n");
        assert!(load_manifest(d.path()).is_err());

        write(d.path(), "path,label,split\na.png,0,train\nmissing.png,1,test\n");
        assert_eq!(line_of(load_manifest(d.path()).unwrap_err()), 3);

        write(d.path(), "path,label,split\na.png,0,train\nb.png,1,validation\n");
        assert_eq!(line_of(load_manifest(d.path()).unwrap_err()), 3);

        write(d.path(), "path,label,split\na.png,0,train\na.png,1,test\n");
        assert_eq!(line_of(load_manifest(d.path()).unwrap_err()), 3);

        write(d.path(), "path,label,split\na.png,0,train\nb.png,2,test\n");
        assert_eq!(line_of(load_manifest(d.path()).unwrap_err()), 3);

        fs::write(d.path().join("bad.png"), b"not an image").unwrap();
        write(d.path(), "path,label,split\nbad.png,0,train\n");
        assert_eq!(line_of(load_manifest(d.path()).unwrap_err()), 2);

        write(d.path(), "file,label,split\na.png,0,train\n");
        assert_eq!(line_of(load_manifest(d.path()).unwrap_err()), 1);

        let rgb = image::RgbImage::from_raw(4, 4, vec![0; 48]).unwrap();
        rgb.save(d.path().join("rgb.png")).unwrap();
        write(d.path(), "path,label,split\nrgb.png,0,train\n");
        assert_eq!(line_of(load_manifest(d.path()).unwrap_err()), 2);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(d.path()), Err(Error::Io { .. })));
    }
}
