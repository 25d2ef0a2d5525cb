//! On-disk datasets and metric tables.
//!
//! A dataset directory holds `manifest.txt` (`id,domain,seed` per line, no
//! header), `images/<id>.png` (8-bit RGB) and `masks/<id>.png` (8-bit
//! labels). `.ppm` / `.pgm` files are accepted on read when the PNG is
//! missing.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::{Mask, MetricRecord};
use crate::tensor::Tensor;
use crate::toy::{Domain, LabeledSample, CHANNELS, NUM_CLASSES};

pub const MANIFEST: &str = "manifest.txt";
pub const IMAGES: &str = "images";
pub const MASKS: &str = "masks";
/// Optional `key=value` description written next to generated data.
pub const INFO: &str = "info.txt";

/// `[-1, 1]` to a byte, rounding to nearest.
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Rounds every value to the nearest representable 8-bit level.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| from_byte(to_byte(v)))
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

pub fn encode_png_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::shape(format!(
            "expected [h, w, 3], got {:?}",
            image.shape()
        )));
    };
    if c != CHANNELS {
        return Err(Error::shape(format!(
            "expected {CHANNELS} channels, got {c}"
        )));
    }
    let bytes = image.data().iter().map(|&v| to_byte(v)).collect();
    let buf = RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| image_err(Path::new("<memory>"), e))?;
    Ok(out)
}

pub fn encode_png_mask(mask: &Mask) -> Result<Vec<u8>> {
    let buf = GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.labels.clone())
        .expect("sized buffer");
    let mut out = Vec::new();
    buf.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| image_err(Path::new("<memory>"), e))?;
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    write_bytes(path, &encode_png_rgb(image)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_bytes(path, &encode_png_mask(mask)?)
}

/// Reads an 8-bit RGB image (PNG or PPM) as `[h, w, 3]` in `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    if img.color().channel_count() != 3 || img.color().bytes_per_pixel() != 3 {
        return Err(image_err(
            path,
            format!("expected 8-bit RGB, got {:?}", img.color()),
        ));
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(from_byte).collect();
    Tensor::new(vec![h as usize, w as usize, CHANNELS], data)
}

/// Reads an 8-bit label image (PNG or PGM).
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    if img.color().channel_count() != 1 || img.color().bytes_per_pixel() != 1 {
        return Err(image_err(
            path,
            format!("expected 8-bit grayscale, got {:?}", img.color()),
        ));
    }
    let g = img.into_luma8();
    let (w, h) = g.dimensions();
    let labels = g.into_raw();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(image_err(path, format!("label {bad} out of range")));
    }
    Mask::new(h as usize, w as usize, labels)
}

/// First existing file among `stem.<ext>` for the given extensions.
fn find_with_ext(dir: &Path, stem: &str, exts: &[&str]) -> Result<PathBuf> {
    for ext in exts {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(format!("{stem}.{}", exts[0])),
        std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
    ))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: Domain,
    pub seed: u64,
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{},{},{}\n", e.id, e.domain, e.seed))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .map(|(no, line)| {
            let bad = |d: &str| Error::format("manifest", format!("line {}: {d}", no + 1));
            let fields: Vec<&str> = line.split(',').collect();
            let [id, domain, seed] = fields[..] else {
                return Err(bad("expected id,domain,seed"));
            };
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(bad("bad id"));
            }
            Ok(ManifestEntry {
                id: id.to_string(),
                domain: domain.parse().map_err(|_| bad("bad domain"))?,
                seed: seed.parse().map_err(|_| bad("bad seed"))?,
            })
        })
        .collect()
}

/// Creates `dir` for writing; an existing non-empty directory requires
/// `force`, in which case its old contents are removed.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!(
                "{} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes samples as a dataset directory. Ids follow sample order.
pub fn write_dataset(
    dir: &Path,
    samples: &[LabeledSample],
    force: bool,
) -> Result<Vec<ManifestEntry>> {
    prepare_output_dir(dir, force)?;
    for sub in [IMAGES, MASKS] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = sample_id(i);
        write_image(&dir.join(IMAGES).join(format!("{id}.png")), &s.image)?;
        write_mask(&dir.join(MASKS).join(format!("{id}.png")), &s.mask)?;
        entries.push(ManifestEntry {
            id,
            domain: s.domain,
            seed: s.seed,
        });
    }
    write_bytes(&dir.join(MANIFEST), manifest_text(&entries).as_bytes())?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text)
}

/// Loads every manifest entry with its image and mask.
pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledSample>> {
    let entries = read_manifest(dir)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let image = read_image(&find_with_ext(&dir.join(IMAGES), &e.id, &["png", "ppm"])?)?;
        let mask = read_mask(&find_with_ext(&dir.join(MASKS), &e.id, &["png", "pgm"])?)?;
        if image.shape()[..2] != [mask.height, mask.width] {
            return Err(Error::format(
                "dataset",
                format!("{}: image and mask sizes differ", e.id),
            ));
        }
        out.push(LabeledSample {
            image,
            mask,
            domain: e.domain,
            seed: e.seed,
        });
    }
    Ok(out)
}

pub fn write_info(dir: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    write_bytes(&dir.join(INFO), text.as_bytes())
}

/// `key=value` pairs of a dataset's info file; empty when absent.
pub fn read_info(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = dir.join(INFO);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

pub const METRICS_HEADER: &str = "metric,dataset,model,steps,seed,value,meta";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Metric rows with `.` decimals in shortest round-trip form; missing
/// values are written as `undefined`.
pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let steps = r.steps.map(|k| k.to_string()).unwrap_or_default();
        let value = match r.value {
            Some(v) if v.is_finite() => format!("{v:?}"),
            _ => "undefined".to_string(),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&r.metric),
            csv_field(&r.dataset),
            csv_field(&r.model),
            steps,
            r.seed,
            value,
            csv_field(&r.meta)
        ));
    }
    s
}

fn split_csv_line(line: &str) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', true) => quoted = false,
            ('"', false) if cur.is_empty() => quoted = true,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            (c, _) => cur.push(c),
        }
    }
    if quoted {
        return Err(Error::format("csv", "unterminated quote"));
    }
    fields.push(cur);
    Ok(fields)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format("csv", "missing metrics header"));
    }
    lines
        .enumerate()
        .map(|(no, line)| {
            let bad = |d: &str| Error::format("csv", format!("row {}: {d}", no + 1));
            let f = split_csv_line(line)?;
            let [metric, dataset, model, steps, seed, value, meta] = &f[..] else {
                return Err(bad("expected 7 fields"));
            };
            Ok(MetricRecord {
                metric: metric.clone(),
                dataset: dataset.clone(),
                model: model.clone(),
                steps: if steps.is_empty() {
                    None
                } else {
                    Some(steps.parse().map_err(|_| bad("bad steps"))?)
                },
                seed: seed.parse().map_err(|_| bad("bad seed"))?,
                value: match value.as_str() {
                    "undefined" => None,
                    v => Some(v.parse().map_err(|_| bad("bad value"))?),
                },
                meta: meta.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::gen_simulated;

    #[test]
    fn byte_levels_round_trip() {
        for b in 0..=255u8 {
            assert_eq!(to_byte(from_byte(b)), b);
        }
        assert_eq!(to_byte(-3.0), 0);
        assert_eq!(to_byte(3.0), 255);
    }

    #[test]
    fn dataset_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_simulated(4, 9).unwrap();
        write_dataset(dir.path(), &samples, false).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(quantize(&a.image), b.image);
            assert_eq!(a.mask, b.mask);
            assert_eq!((a.domain, a.seed), (b.domain, b.seed));
        }
        let again = tempfile::tempdir().unwrap();
        write_dataset(again.path(), &back, false).unwrap();
        for sub in [IMAGES, MASKS] {
            let p = |d: &Path| fs::read(d.join(sub).join("000002.png")).unwrap();
            assert_eq!(p(dir.path()), p(again.path()));
        }
        assert!(write_dataset(dir.path(), &samples, false).is_err());
        write_dataset(dir.path(), &samples[..1], true).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn pnm_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let s = &gen_simulated(1, 3).unwrap()[0];
        write_dataset(dir.path(), std::slice::from_ref(s), false).unwrap();
        let img = image::open(dir.path().join("images/000000.png")).unwrap();
        img.save(dir.path().join("images/000000.ppm")).unwrap();
        fs::remove_file(dir.path().join("images/000000.png")).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back[0].image, quantize(&s.image));
    }

    #[test]
    fn manifest_rejects_garbage() {
        assert!(parse_manifest("000000,sim,1\n").is_ok());
        assert!(parse_manifest("000000,sim\n").is_err());
        assert!(parse_manifest("000000,moon,1\n").is_err());
        assert!(parse_manifest("../x,sim,1\n").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let records = vec![
            MetricRecord {
                metric: "fd".into(),
                dataset: "gen".into(),
                model: "cm".into(),
                steps: Some(2),
                seed: 0,
                value: Some(0.1 + 0.2),
                meta: "k=5, \"quoted\"".into(),
            },
            MetricRecord {
                metric: "hausdorff".into(),
                dataset: "gen".into(),
                model: "cm".into(),
                steps: None,
                seed: 7,
                value: None,
                meta: String::new(),
            },
        ];
        let text = metrics_csv(&records);
        assert!(text.contains("undefined"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), records);
    }
}
