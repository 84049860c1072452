//! Synthetic driving scenes: label schema, scene generation, region
//! features, batching, and the on-disk dataset formats.
//!
//! The label schema is fixed: 4 binary driving actions and 21 binary
//! explanation classes, indexed in the canonical order of
//! [`ACTION_NAMES`] and [`EXPLANATION_NAMES`]. Scenes are small RGB
//! images with axis-aligned colored blocks whose placement fully
//! determines the labels through a deterministic rule table, so ground
//! truth is exact and regenerating a dataset from its seed reproduces
//! every byte.

mod gen;
mod io;

pub use gen::{generate_scene, Family, GeneratorConfig, Scene, SceneObject};
pub use io::{
    read_dataset, read_labels_jsonl, read_manifest, read_ppm, read_regions, write_dataset,
    write_pgm, write_ppm, write_regions, Dataset, DatasetScene, LabelRecord, Manifest, Split,
    SynthConfig,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Canonical action names, in label order.
pub const ACTION_NAMES: [&str; 4] =
    ["Move forward", "Stop/Slow down", "Turn left", "Turn right"];

/// Action indices into [`LabelPair::actions`].
pub const ACTION_MOVE_FORWARD: usize = 0;
pub const ACTION_STOP_SLOW: usize = 1;
pub const ACTION_TURN_LEFT: usize = 2;
pub const ACTION_TURN_RIGHT: usize = 3;

/// Canonical explanation names, in label order. Index 13 and 19 share
/// the same text; they are distinct classes nonetheless.
pub const EXPLANATION_NAMES: [&str; 21] = [
    "Traffic light is green",
    "Follow traffic",
    "Road is clear",
    "Traffic light is red",
    "Traffic sign",
    "Obstacle: car",
    "Obstacle: person",
    "Obstacle: rider",
    "Obstacle: others",
    "No lane on the left",
    "Obstacles on the left lane",
    "Solid line on the left",
    "On the left-turn lane",
    "Traffic light allows",
    "Front car turning left",
    "No lane on the right",
    "Obstacles on the right lane",
    "Solid line on the right",
    "On the right-turn lane",
    "Traffic light allows",
    "Front car turning right",
];

/// Explanation indices the synthetic rule table can set.
pub const EXPL_LIGHT_GREEN: usize = 0;
pub const EXPL_ROAD_CLEAR: usize = 2;
pub const EXPL_LIGHT_RED: usize = 3;
pub const EXPL_OBSTACLE_LEFT: usize = 10;
pub const EXPL_OBSTACLE_RIGHT: usize = 16;

/// One multilabel target: 4 action bits and 21 explanation bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPair {
    pub actions: [u8; 4],
    pub explanations: [u8; 21],
}

impl LabelPair {
    pub fn empty() -> Self {
        LabelPair { actions: [0; 4], explanations: [0; 21] }
    }
}

/// An RGB image with values in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `height * width * 3` values, pixel (y, x) at `3 * (y * width + x)`.
    pub rgb: Vec<f64>,
}

impl Image {
    pub fn black(height: usize, width: usize) -> Self {
        Image { height, width, rgb: vec![0.0; height * width * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.rgb[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fill the half-open rectangle rows `y0..y1`, cols `x0..x1`.
    pub fn fill_rect(&mut self, y0: usize, x0: usize, y1: usize, x1: usize, rgb: [f64; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.set_pixel(y, x, rgb);
            }
        }
    }

    /// Snap every channel to the nearest 8-bit level `k/255`.
    ///
    /// Generated scenes are quantized before features are computed so the
    /// in-memory image and its PPM round-trip are bit-identical.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.rgb {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
    }
}

/// Axis-aligned half-open pixel rectangle: `x0..x1` × `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

/// What a scene object is; drives both pixels and labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectClass {
    TrafficLightRed,
    TrafficLightGreen,
    Car,
    Person,
    /// The gray reference column of the relativity family; "left" and
    /// "right" are measured against it.
    EgoColumn,
}

/// Ground-truth region features for one scene: one row per object region
/// plus a whole-image row appended last.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    pub boxes: Vec<PixelBox>,
    /// n×f, row i pooled from the patches under `boxes[i]`.
    pub features: Tensor2,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Mean-pool rows of a patch feature sequence over ground-truth boxes.
///
/// For every object box the pooled row is the mean of the
/// `extract_features` rows whose patch centers fall inside the box; a
/// whole-image region is appended last, so the result always has
/// `objects.len() + 1` rows. A box that covers no patch center yields a
/// zero row (cannot happen for the block-based generator, whose blocks
/// are at least one patch in every dimension).
pub fn region_features_for(
    image: &Image,
    objects: &[SceneObject],
    extractor: &Tensor2,
    patch: usize,
) -> Result<RegionSet> {
    let feats = crate::network::extract_features(image, patch, extractor)?;
    let grid_w = image.width / patch;
    let grid_h = image.height / patch;
    let f = feats.cols();

    let mut boxes: Vec<PixelBox> = objects.iter().map(|o| o.bounds).collect();
    boxes.push(PixelBox { x0: 0, y0: 0, x1: image.width as u32, y1: image.height as u32 });

    let mut features = Tensor2::zeros(boxes.len(), f);
    for (r, b) in boxes.iter().enumerate() {
        let mut count = 0usize;
        let mut acc = vec![0.0; f];
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let cx = (gx * patch) as f64 + (patch as f64 - 1.0) / 2.0;
                let cy = (gy * patch) as f64 + (patch as f64 - 1.0) / 2.0;
                if b.contains_point(cx, cy) {
                    let row = feats.row_slice(gy * grid_w + gx);
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                    count += 1;
                }
            }
        }
        if count > 0 {
            let inv = 1.0 / count as f64;
            for (j, a) in acc.iter().enumerate() {
                features.set(r, j, a * inv);
            }
        }
    }
    Ok(RegionSet { boxes, features })
}

// ── seeding and batching ───────────────────────────────────────────────

/// SplitMix64 finalizer; the crate's standard way to derive independent
/// sub-seeds from one root seed.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic per-scene seed: mixes the dataset seed, a split tag, and
/// the scene index, so scene generation is order-independent and could be
/// parallelized without changing a single byte.
pub fn scene_seed(dataset_seed: u64, split_tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(dataset_seed ^ (split_tag << 56)) ^ index)
}

/// Seed of the frozen feature extractor derived from the dataset seed.
pub fn extractor_seed_for(dataset_seed: u64) -> u64 {
    splitmix64(dataset_seed ^ 0x4558_5452) // "EXTR"
}

/// Ordered batches of indices for one epoch: a Fisher–Yates shuffle of
/// `0..n` keyed by `(seed, epoch)`, chunked into `batch_size` groups with
/// the final short batch kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batches: batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    ));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
