//! On-disk formats: PPM images, PGM heatmaps, RGF region files,
//! labels.jsonl, the dataset manifest, and whole-dataset read/write.
//!
//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/{train,val,test}/labels.jsonl
//! <dir>/{train,val,test}/images/<id>.ppm
//! <dir>/{train,val,test}/regions/<id>.rgf
//! ```
//!
//! Everything is deterministic: the same `SynthConfig` always produces
//! the same bytes in every file, which the tests rely on.

use std::fs;
use std::path::Path;

use super::gen::{generate_scene, Family, GeneratorConfig};
use super::{
    extractor_seed_for, region_features_for, scene_seed, Image, LabelPair, PixelBox, RegionSet,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

// ── PPM (P6) ───────────────────────────────────────────────────────────

/// Write an image as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.reserve(image.rgb.len());
    for &v in &image.rgb {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a binary PPM (P6, maxval 255) back into `[0, 1]` floats.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(p.clone(), "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(Error::format(p, "not a P6 PPM"));
    }
    let width: usize =
        token(&bytes)?.parse().map_err(|_| Error::format(p.clone(), "bad width"))?;
    let height: usize =
        token(&bytes)?.parse().map_err(|_| Error::format(p.clone(), "bad height"))?;
    let maxval: usize =
        token(&bytes)?.parse().map_err(|_| Error::format(p.clone(), "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::format(p, format!("maxval must be 255, got {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    let need = width * height * 3;
    if bytes.len() - pos != need {
        return Err(Error::format(
            p,
            format!("raster has {} bytes, expected {need}", bytes.len() - pos),
        ));
    }
    let rgb = bytes[pos..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image { height, width, rgb })
}

// ── PGM (P5) heatmaps ──────────────────────────────────────────────────

/// Write a matrix as an 8-bit grayscale PGM, scaled linearly so the
/// matrix maximum maps to 255 (all-zero matrices stay black).
pub fn write_pgm(path: &Path, values: &Tensor2) -> Result<()> {
    let max = values.data().iter().fold(0.0f64, |m, &v| m.max(v));
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", values.cols(), values.rows()).into_bytes();
    for &v in values.data() {
        bytes.push((v.max(0.0) * scale).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── RGF region-feature files ───────────────────────────────────────────

const RGF_MAGIC: &[u8; 4] = b"RGF1";

/// Write a region set: 16-byte header (magic "RGF1", region count,
/// feature width, reserved zero, all u32 little-endian), then one record
/// per region of `4 + f` little-endian f32 values — the pixel box as
/// (x0, y0, x1, y1) followed by the feature row.
pub fn write_regions(path: &Path, regions: &RegionSet) -> Result<()> {
    let f = regions.features.cols();
    let mut bytes = Vec::with_capacity(16 + regions.len() * (4 + f) * 4);
    bytes.extend_from_slice(RGF_MAGIC);
    bytes.extend_from_slice(&(regions.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(f as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for (i, b) in regions.boxes.iter().enumerate() {
        for v in [b.x0 as f32, b.y0 as f32, b.x1 as f32, b.y1 as f32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &v in regions.features.row_slice(i) {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a region set written by [`write_regions`].
pub fn read_regions(path: &Path) -> Result<RegionSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    if bytes.len() < 16 {
        return Err(Error::format(p, "shorter than the 16-byte header"));
    }
    if &bytes[0..4] != RGF_MAGIC {
        return Err(Error::format(p, "magic mismatch, not an RGF1 file"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 16 + count * (4 + f) * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            p,
            format!("truncated: {} bytes, expected {expected} for {count} regions", bytes.len()),
        ));
    }
    let mut boxes = Vec::with_capacity(count);
    let mut features = Tensor2::zeros(count, f);
    let mut pos = 16;
    let mut next = |bytes: &[u8]| -> f32 {
        let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        pos += 4;
        v
    };
    for i in 0..count {
        let (x0, y0, x1, y1) =
            (next(&bytes), next(&bytes), next(&bytes), next(&bytes));
        boxes.push(PixelBox { x0: x0 as u32, y0: y0 as u32, x1: x1 as u32, y1: y1 as u32 });
        for j in 0..f {
            features.set(i, j, next(&bytes) as f64);
        }
    }
    Ok(RegionSet { boxes, features })
}

// ── labels.jsonl ───────────────────────────────────────────────────────

/// One line of `labels.jsonl`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LabelRecord {
    pub id: u32,
    /// Image path relative to the split directory, e.g. `images/000017.ppm`.
    pub image: String,
    pub actions: Vec<u8>,
    pub reasons: Vec<u8>,
}

impl LabelRecord {
    pub fn label_pair(&self) -> Result<LabelPair> {
        let actions: [u8; 4] = self.actions.as_slice().try_into().map_err(|_| {
            Error::Integrity(format!("record {}: expected 4 actions, got {}", self.id, self.actions.len()))
        })?;
        let explanations: [u8; 21] = self.reasons.as_slice().try_into().map_err(|_| {
            Error::Integrity(format!("record {}: expected 21 reasons, got {}", self.id, self.reasons.len()))
        })?;
        Ok(LabelPair { actions, explanations })
    }
}

/// Read every record of a labels.jsonl file.
pub fn read_labels_jsonl(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(line).map_err(|e| {
            Error::format(path.display().to_string(), format!("line {}: {e}", lineno + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}

// ── manifest ───────────────────────────────────────────────────────────

/// Dataset manifest, written last so a directory without one is visibly
/// incomplete.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub family: Family,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Feature width of the frozen patch extractor.
    pub feat: usize,
    pub extractor_seed: u64,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("format_version {} unsupported (want {DATASET_FORMAT_VERSION})", m.format_version),
        ));
    }
    Ok(m)
}

// ── whole-dataset write/read ───────────────────────────────────────────

/// Everything `write_dataset` needs.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub seed: u64,
    pub family: Family,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub feat: usize,
}

impl SynthConfig {
    fn manifest(&self) -> Manifest {
        Manifest {
            format_version: DATASET_FORMAT_VERSION,
            seed: self.seed,
            family: self.family,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            height: self.height,
            width: self.width,
            patch: self.patch,
            feat: self.feat,
            extractor_seed: extractor_seed_for(self.seed),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::Config("synth: n_train must be >= 1".into()));
        }
        if self.feat == 0 {
            return Err(Error::Config("synth: feature width must be >= 1".into()));
        }
        GeneratorConfig {
            family: self.family,
            height: self.height,
            width: self.width,
            patch: self.patch,
        }
        .validate()
    }
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Generate and write a full dataset.
///
/// If the directory already carries a manifest, it must match this
/// config exactly (then the rewrite is byte-identical by determinism);
/// a differing manifest is refused instead of silently clobbered.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    let manifest = cfg.manifest();

    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let existing = read_manifest(&manifest_path)?;
        if existing != manifest {
            return Err(Error::Config(format!(
                "refusing to overwrite {}: existing manifest differs (seed {} family {} vs requested seed {} family {})",
                dir.display(),
                existing.seed,
                existing.family,
                manifest.seed,
                manifest.family,
            )));
        }
    }

    let extractor =
        crate::network::feature_extractor_matrix(cfg.patch, cfg.feat, manifest.extractor_seed);
    let gen_cfg = GeneratorConfig {
        family: cfg.family,
        height: cfg.height,
        width: cfg.width,
        patch: cfg.patch,
    };

    let counts = [cfg.n_train, cfg.n_val, cfg.n_test];
    for (tag, (split, &count)) in SPLIT_NAMES.iter().zip(counts.iter()).enumerate() {
        let split_dir = dir.join(split);
        let images_dir = split_dir.join("images");
        let regions_dir = split_dir.join("regions");
        fs::create_dir_all(&images_dir)
            .map_err(|e| Error::io(images_dir.display().to_string(), e))?;
        fs::create_dir_all(&regions_dir)
            .map_err(|e| Error::io(regions_dir.display().to_string(), e))?;

        let mut jsonl = String::new();
        for i in 0..count {
            let scene = generate_scene(&gen_cfg, scene_seed(cfg.seed, tag as u64, i as u64))?;
            let id = i as u32;
            let image_rel = format!("images/{id:06}.ppm");
            write_ppm(&images_dir.join(format!("{id:06}.ppm")), &scene.image)?;
            let regions =
                region_features_for(&scene.image, &scene.objects, &extractor, cfg.patch)?;
            write_regions(&regions_dir.join(format!("{id:06}.rgf")), &regions)?;
            let record = LabelRecord {
                id,
                image: image_rel,
                actions: scene.labels.actions.to_vec(),
                reasons: scene.labels.explanations.to_vec(),
            };
            jsonl.push_str(&serde_json::to_string(&record).expect("label record serializes"));
            jsonl.push('\n');
        }
        let labels_path = split_dir.join("labels.jsonl");
        fs::write(&labels_path, jsonl)
            .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    }

    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n")
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest)
}

/// One loaded scene: image, labels, and stored region features.
#[derive(Debug, Clone)]
pub struct DatasetScene {
    pub id: u32,
    pub image: Image,
    pub labels: LabelPair,
    pub regions: RegionSet,
}

/// One loaded split, in labels.jsonl order.
#[derive(Debug, Clone)]
pub struct Split {
    pub scenes: Vec<DatasetScene>,
}

/// A fully loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val, or test)"
            ))),
        }
    }
}

fn read_split(dir: &Path, name: &str, expected: usize, manifest: &Manifest) -> Result<Split> {
    let split_dir = dir.join(name);
    let records = read_labels_jsonl(&split_dir.join("labels.jsonl"))?;
    if records.len() != expected {
        return Err(Error::Integrity(format!(
            "split '{name}' has {} records but the manifest declares {expected}",
            records.len()
        )));
    }
    let mut scenes = Vec::with_capacity(records.len());
    for rec in records {
        let image = read_ppm(&split_dir.join(&rec.image))?;
        if image.height != manifest.height || image.width != manifest.width {
            return Err(Error::Integrity(format!(
                "split '{name}' image {} is {}x{}, manifest says {}x{}",
                rec.id, image.height, image.width, manifest.height, manifest.width
            )));
        }
        let regions = read_regions(&split_dir.join(format!("regions/{:06}.rgf", rec.id)))?;
        if regions.features.cols() != manifest.feat {
            return Err(Error::Integrity(format!(
                "split '{name}' regions {} have width {}, manifest says {}",
                rec.id,
                regions.features.cols(),
                manifest.feat
            )));
        }
        scenes.push(DatasetScene { id: rec.id, image, labels: rec.label_pair()?, regions });
    }
    Ok(Split { scenes })
}

/// Load a dataset directory, validating counts and dimensions against
/// the manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(&dir.join("manifest.json"))?;
    Ok(Dataset {
        train: read_split(dir, "train", manifest.n_train, &manifest)?,
        val: read_split(dir, "val", manifest.n_val, &manifest)?,
        test: read_split(dir, "test", manifest.n_test, &manifest)?,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn ppm_round_trip_is_exact_after_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut img = Image::black(5, 7);
        img.set_pixel(0, 0, [1.0, 0.25, 0.5]);
        img.set_pixel(4, 6, [0.123, 0.999, 0.0]);
        img.quantize_u8();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back, img, "quantized images survive the round trip bit-for-bit");
    }

    #[test]
    fn ppm_round_trip_error_is_within_one_level() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut img = Image::black(2, 2);
        img.set_pixel(1, 1, [0.1234, 0.5678, 0.9]);
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        for (a, b) in img.rgb.iter().zip(&back.rgb) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn ppm_rejects_garbage() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        fs::write(&path, b"P3\n2 2\n255\n").unwrap();
        let err = read_ppm(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "got {err:?}");
        fs::write(&path, b"P6\n2 2\n255\nxx").unwrap();
        assert!(read_ppm(&path).is_err(), "short raster must fail");
    }

    #[test]
    fn regions_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.rgf");
        let rs = RegionSet {
            boxes: vec![
                PixelBox { x0: 0, y0: 4, x1: 8, y1: 12 },
                PixelBox { x0: 0, y0: 0, x1: 32, y1: 32 },
            ],
            features: Tensor2::from_fn(2, 3, |i, j| (i * 3 + j) as f64 * 0.25),
        };
        write_regions(&path, &rs).unwrap();
        let back = read_regions(&path).unwrap();
        assert_eq!(back.boxes, rs.boxes);
        // Quarters are exact in f32, so the features survive unchanged.
        assert_eq!(back.features, rs.features);
    }

    #[test]
    fn regions_reject_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.rgf");
        fs::write(&path, b"NOPE\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let msg = read_regions(&path).unwrap_err().to_string();
        assert!(msg.contains("magic"), "{msg}");

        let rs = RegionSet {
            boxes: vec![PixelBox { x0: 0, y0: 0, x1: 4, y1: 4 }],
            features: Tensor2::zeros(1, 4),
        };
        write_regions(&path, &rs).unwrap();
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() - 3]).unwrap();
        let msg = read_regions(&path).unwrap_err().to_string();
        assert!(msg.contains("truncated") && msg.contains("r.rgf"), "{msg}");
    }

    fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            family: Family::Relativity,
            n_train: 6,
            n_val: 3,
            n_test: 3,
            height: 32,
            width: 32,
            patch: 4,
            feat: 8,
        }
    }

    #[test]
    fn dataset_write_read_round_trip() {
        let dir = tempdir().unwrap();
        let cfg = small_cfg(404);
        let manifest = write_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(manifest.n_train, 6);

        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.train.scenes.len(), 6);
        assert_eq!(ds.val.scenes.len(), 3);
        assert_eq!(ds.test.scenes.len(), 3);
        for scene in &ds.train.scenes {
            assert_eq!(scene.image.height, 32);
            assert_eq!(scene.regions.features.cols(), 8);
            assert!(!scene.regions.is_empty(), "whole-image region is always present");
            // Whole-image region comes last and spans everything.
            let last = *scene.regions.boxes.last().unwrap();
            assert_eq!((last.x0, last.y0, last.x1, last.y1), (0, 0, 32, 32));
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let cfg = small_cfg(777);
        write_dataset(dir_a.path(), &cfg).unwrap();
        write_dataset(dir_b.path(), &cfg).unwrap();
        // Also valid: rewriting in place over identical content.
        write_dataset(dir_a.path(), &cfg).unwrap();

        for split in ["train", "val", "test"] {
            let la = fs::read(dir_a.path().join(split).join("labels.jsonl")).unwrap();
            let lb = fs::read(dir_b.path().join(split).join("labels.jsonl")).unwrap();
            assert_eq!(la, lb, "labels.jsonl differs in {split}");
            for entry in fs::read_dir(dir_a.path().join(split).join("images")).unwrap() {
                let name = entry.unwrap().file_name();
                let a = fs::read(dir_a.path().join(split).join("images").join(&name)).unwrap();
                let b = fs::read(dir_b.path().join(split).join("images").join(&name)).unwrap();
                assert_eq!(a, b, "{split}/{name:?} differs");
            }
            for entry in fs::read_dir(dir_a.path().join(split).join("regions")).unwrap() {
                let name = entry.unwrap().file_name();
                let a = fs::read(dir_a.path().join(split).join("regions").join(&name)).unwrap();
                let b = fs::read(dir_b.path().join(split).join("regions").join(&name)).unwrap();
                assert_eq!(a, b, "{split}/{name:?} differs");
            }
        }
    }

    #[test]
    fn conflicting_manifest_is_refused() {
        let dir = tempdir().unwrap();
        write_dataset(dir.path(), &small_cfg(1)).unwrap();
        let err = write_dataset(dir.path(), &small_cfg(2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn zero_train_scenes_is_a_config_error() {
        let dir = tempdir().unwrap();
        let mut cfg = small_cfg(1);
        cfg.n_train = 0;
        assert!(write_dataset(dir.path(), &cfg).is_err());
        assert!(!dir.path().join("manifest.json").exists(), "nothing written");
    }

    #[test]
    fn count_mismatch_is_an_integrity_error() {
        let dir = tempdir().unwrap();
        write_dataset(dir.path(), &small_cfg(5)).unwrap();
        // Drop one label line from the train split.
        let labels = dir.path().join("train/labels.jsonl");
        let text = fs::read_to_string(&labels).unwrap();
        let shorter: Vec<&str> = text.lines().take(5).collect();
        fs::write(&labels, shorter.join("\n") + "\n").unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "got {err:?}");
    }
}
