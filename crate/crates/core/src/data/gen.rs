//! Scene generation: colored blocks on a black background, labeled by a
//! fixed rule table.
//!
//! Two task families share the same block vocabulary:
//!
//! * **basic** — "left" and "right" mean the left and right halves of the
//!   image. A traffic-light block may sit in the top band (red or green)
//!   and up to two obstacle blocks (car or person) sit in the road band
//!   below, each wholly inside one half.
//! * **relativity** — identical, plus a gray vertical ego column at a
//!   uniformly random (patch-aligned) x position spanning the road band.
//!   "Left" and "right" are measured **relative to the ego column**, so
//!   the same obstacle pixels can flip the turn bits depending on where
//!   the ego column stands. Solving this family requires relating two
//!   positions in one scene, not just detecting pixels.
//!
//! Rule table (the only source of labels):
//!
//! | condition                       | effect                                        |
//! |---------------------------------|-----------------------------------------------|
//! | green light                     | `Move forward` = 1, explanation 0 (green)     |
//! | red light                       | `Stop/Slow down` = 1, explanation 3 (red)     |
//! | obstacle on the left            | `Turn left` = 0, explanation 10 (left lane)   |
//! | obstacle on the right           | `Turn right` = 0, explanation 16 (right lane) |
//! | green light and no obstacles    | explanation 2 (road is clear)                 |
//!
//! `Turn left`/`Turn right` default to 1 (feasible) and are only blocked
//! by an obstacle on that side; `Move forward` and `Stop/Slow down`
//! default to 0 and are only set by a light. Everything is deterministic
//! given the per-scene seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    Image, LabelPair, ObjectClass, PixelBox, EXPL_LIGHT_GREEN, EXPL_LIGHT_RED,
    EXPL_OBSTACLE_LEFT, EXPL_OBSTACLE_RIGHT, EXPL_ROAD_CLEAR,
};
use crate::error::{Error, Result};

/// Which side semantics a family uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Basic,
    Relativity,
}

impl std::fmt::Display for Family {
    fn fmt(&self, fmt: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Basic => fmt.write_str("basic"),
            Family::Relativity => fmt.write_str("relativity"),
        }
    }
}

/// Geometry and family of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub family: Family,
    pub height: usize,
    pub width: usize,
    /// Patch edge length; all blocks are patch-aligned so downstream
    /// patch features see clean block boundaries.
    pub patch: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Config("generator: patch must be >= 1".into()));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "generator: image {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        let gw = self.width / self.patch;
        let gh = self.height / self.patch;
        if gw < 4 || gw % 2 != 0 {
            return Err(Error::Config(format!(
                "generator: need an even patch-grid width of at least 4, got {gw}"
            )));
        }
        if gh < 3 {
            return Err(Error::Config(format!(
                "generator: need a patch-grid height of at least 3, got {gh}"
            )));
        }
        Ok(())
    }
}

/// A placed object: class plus pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub bounds: PixelBox,
}

/// One generated scene: pixels, the objects that produced them, the
/// labels the rule table assigned, and the ego column (relativity only).
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<SceneObject>,
    pub labels: LabelPair,
    /// Patch column of the ego column, when the family has one.
    pub ego_patch_col: Option<usize>,
}

// Block colors (RGB in [0,1]); pure primaries survive 8-bit
// quantization exactly.
const RED: [f64; 3] = [1.0, 0.0, 0.0];
const GREEN: [f64; 3] = [0.0, 1.0, 0.0];
const BLUE_CAR: [f64; 3] = [0.0, 0.0, 1.0];
const YELLOW_PERSON: [f64; 3] = [1.0, 1.0, 0.0];
const GRAY_EGO: [f64; 3] = [0.5, 0.5, 0.5];

/// Probability that a scene has a traffic light.
const LIGHT_PROB: f64 = 0.75;
/// Cumulative distribution over obstacle counts 0, 1, 2.
const OBSTACLE_COUNT_CDF: [f64; 3] = [0.25, 0.70, 1.0];
/// Obstacle blocks are 2×2 patches.
const OBSTACLE_PATCHES: usize = 2;
/// Placement attempts before giving up on an obstacle.
const MAX_PLACEMENT_TRIES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

/// Generate one scene from its own seed.
///
/// The image is quantized to the 8-bit grid before return, so writing it
/// as PPM and reading it back reproduces the pixel values bit-for-bit.
pub fn generate_scene(cfg: &GeneratorConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.patch;
    let gw = cfg.width / p;
    let gh = cfg.height / p;

    let mut image = Image::black(cfg.height, cfg.width);
    let mut objects: Vec<SceneObject> = Vec::new();

    // 1. Traffic light: one patch tall, two patches wide, top band.
    let light: Option<bool> = if rng.gen_bool(LIGHT_PROB) {
        let is_green = rng.gen_bool(0.5);
        let gx = rng.gen_range(0..=gw - 2);
        let bounds = PixelBox {
            x0: (gx * p) as u32,
            y0: 0,
            x1: ((gx + 2) * p) as u32,
            y1: p as u32,
        };
        image.fill_rect(0, gx * p, p, (gx + 2) * p, if is_green { GREEN } else { RED });
        objects.push(SceneObject {
            class: if is_green {
                ObjectClass::TrafficLightGreen
            } else {
                ObjectClass::TrafficLightRed
            },
            bounds,
        });
        Some(is_green)
    } else {
        None
    };

    // 2. Ego column (relativity family): one patch wide, spans the road
    //    band (everything below the light band).
    let ego_patch_col = match cfg.family {
        Family::Basic => None,
        Family::Relativity => Some(rng.gen_range(0..gw)),
    };

    // 3. Obstacles: occupied patch-grid rectangles, non-overlapping with
    //    each other and with the ego column.
    let n_target = {
        let u: f64 = rng.gen_range(0.0..1.0);
        OBSTACLE_COUNT_CDF.iter().position(|&c| u < c).unwrap_or(2)
    };
    let mut placed: Vec<(usize, usize)> = Vec::new(); // (gy, gx) of top-left
    let mut obstacle_sides: Vec<Side> = Vec::new();
    for _ in 0..n_target {
        let class = if rng.gen_bool(0.5) { ObjectClass::Car } else { ObjectClass::Person };
        let mut placed_at: Option<(usize, usize, Side)> = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let (gy, gx, side) = match cfg.family {
                Family::Basic => {
                    // Pick the half first, then a slot wholly inside it.
                    let side = if rng.gen_bool(0.5) { Side::Left } else { Side::Right };
                    let gx = match side {
                        Side::Left => rng.gen_range(0..=gw / 2 - OBSTACLE_PATCHES),
                        Side::Right => rng.gen_range(gw / 2..=gw - OBSTACLE_PATCHES),
                    };
                    let gy = rng.gen_range(1..=gh - OBSTACLE_PATCHES);
                    (gy, gx, side)
                }
                Family::Relativity => {
                    let gx = rng.gen_range(0..=gw - OBSTACLE_PATCHES);
                    let gy = rng.gen_range(1..=gh - OBSTACLE_PATCHES);
                    // Side relative to the ego column, by pixel centers.
                    let ego = ego_patch_col.unwrap();
                    let obstacle_center = ((gx * p) + p) as f64;
                    let ego_center = (ego * p) as f64 + p as f64 / 2.0;
                    let side = if obstacle_center < ego_center { Side::Left } else { Side::Right };
                    (gy, gx, side)
                }
            };
            let clash_obstacle = placed.iter().any(|&(oy, ox)| {
                gy < oy + OBSTACLE_PATCHES
                    && oy < gy + OBSTACLE_PATCHES
                    && gx < ox + OBSTACLE_PATCHES
                    && ox < gx + OBSTACLE_PATCHES
            });
            let clash_ego = ego_patch_col
                .map(|ego| gx < ego + 1 && ego < gx + OBSTACLE_PATCHES)
                .unwrap_or(false);
            if !clash_obstacle && !clash_ego {
                placed_at = Some((gy, gx, side));
                break;
            }
        }
        let Some((gy, gx, side)) = placed_at else {
            continue; // crowded scene: fewer obstacles than targeted
        };
        placed.push((gy, gx));
        obstacle_sides.push(side);
        let color = match class {
            ObjectClass::Car => BLUE_CAR,
            _ => YELLOW_PERSON,
        };
        image.fill_rect(gy * p, gx * p, (gy + OBSTACLE_PATCHES) * p, (gx + OBSTACLE_PATCHES) * p, color);
        objects.push(SceneObject {
            class,
            bounds: PixelBox {
                x0: (gx * p) as u32,
                y0: (gy * p) as u32,
                x1: ((gx + OBSTACLE_PATCHES) * p) as u32,
                y1: ((gy + OBSTACLE_PATCHES) * p) as u32,
            },
        });
    }

    // 4. Paint the ego column and record it as an object.
    if let Some(ego) = ego_patch_col {
        image.fill_rect(p, ego * p, cfg.height, (ego + 1) * p, GRAY_EGO);
        objects.push(SceneObject {
            class: ObjectClass::EgoColumn,
            bounds: PixelBox {
                x0: (ego * p) as u32,
                y0: p as u32,
                x1: ((ego + 1) * p) as u32,
                y1: cfg.height as u32,
            },
        });
    }

    image.quantize_u8();

    // 5. The rule table.
    let left_occupied = obstacle_sides.iter().any(|&s| s == Side::Left);
    let right_occupied = obstacle_sides.iter().any(|&s| s == Side::Right);
    let any_obstacle = !obstacle_sides.is_empty();

    let mut labels = LabelPair::empty();
    labels.actions[super::ACTION_MOVE_FORWARD] = u8::from(light == Some(true));
    labels.actions[super::ACTION_STOP_SLOW] = u8::from(light == Some(false));
    labels.actions[super::ACTION_TURN_LEFT] = u8::from(!left_occupied);
    labels.actions[super::ACTION_TURN_RIGHT] = u8::from(!right_occupied);
    if light == Some(true) {
        labels.explanations[EXPL_LIGHT_GREEN] = 1;
    }
    if light == Some(false) {
        labels.explanations[EXPL_LIGHT_RED] = 1;
    }
    if left_occupied {
        labels.explanations[EXPL_OBSTACLE_LEFT] = 1;
    }
    if right_occupied {
        labels.explanations[EXPL_OBSTACLE_RIGHT] = 1;
    }
    if light == Some(true) && !any_obstacle {
        labels.explanations[EXPL_ROAD_CLEAR] = 1;
    }

    Ok(Scene { image, objects, labels, ego_patch_col })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{scene_seed, ACTION_MOVE_FORWARD, ACTION_STOP_SLOW, ACTION_TURN_LEFT, ACTION_TURN_RIGHT};

    fn cfg(family: Family) -> GeneratorConfig {
        GeneratorConfig { family, height: 32, width: 32, patch: 4 }
    }

    /// Independent re-derivation of the rule table from the object list
    /// alone — written against the geometry, not the generator's internal
    /// bookkeeping, so the two implementations can check each other.
    fn derive_labels_from_objects(scene: &Scene, width: usize, patch: usize) -> LabelPair {
        let mut green = false;
        let mut red = false;
        let mut obstacle_centers: Vec<f64> = Vec::new();
        let mut ego_center: Option<f64> = None;
        for o in &scene.objects {
            let cx = (o.bounds.x0 as f64 + o.bounds.x1 as f64) / 2.0;
            match o.class {
                ObjectClass::TrafficLightGreen => green = true,
                ObjectClass::TrafficLightRed => red = true,
                ObjectClass::Car | ObjectClass::Person => obstacle_centers.push(cx),
                ObjectClass::EgoColumn => ego_center = Some(cx),
            }
        }
        let boundary = match scene.ego_patch_col {
            Some(ego) => {
                let from_box = ego_center.expect("ego object must be listed");
                let from_col = (ego * patch) as f64 + patch as f64 / 2.0;
                assert_eq!(from_box, from_col, "ego box disagrees with ego_patch_col");
                from_box
            }
            None => width as f64 / 2.0,
        };
        let left = obstacle_centers.iter().any(|&c| c < boundary);
        let right = obstacle_centers.iter().any(|&c| c >= boundary);

        let mut lp = LabelPair::empty();
        lp.actions[ACTION_MOVE_FORWARD] = u8::from(green);
        lp.actions[ACTION_STOP_SLOW] = u8::from(red);
        lp.actions[ACTION_TURN_LEFT] = u8::from(!left);
        lp.actions[ACTION_TURN_RIGHT] = u8::from(!right);
        lp.explanations[EXPL_LIGHT_GREEN] = u8::from(green);
        lp.explanations[EXPL_LIGHT_RED] = u8::from(red);
        lp.explanations[EXPL_OBSTACLE_LEFT] = u8::from(left);
        lp.explanations[EXPL_OBSTACLE_RIGHT] = u8::from(right);
        lp.explanations[EXPL_ROAD_CLEAR] = u8::from(green && obstacle_centers.is_empty());
        lp
    }

    #[test]
    fn generator_agrees_with_independent_rule_checker_on_10k_scenes() {
        for family in [Family::Basic, Family::Relativity] {
            let c = cfg(family);
            for i in 0..5_000u64 {
                let scene = generate_scene(&c, scene_seed(99, 0, i)).unwrap();
                let expected = derive_labels_from_objects(&scene, c.width, c.patch);
                assert_eq!(
                    scene.labels, expected,
                    "family {family}, scene {i}: rule tables disagree"
                );
            }
        }
    }

    #[test]
    fn green_light_only_scene_is_fully_permissive() {
        // Find a scene with a green light and no obstacles; its labels
        // are pinned by the rule table.
        let c = cfg(Family::Basic);
        let mut found = false;
        for i in 0..500u64 {
            let scene = generate_scene(&c, scene_seed(7, 0, i)).unwrap();
            let has_green = scene
                .objects
                .iter()
                .any(|o| o.class == ObjectClass::TrafficLightGreen);
            let obstacle_count = scene
                .objects
                .iter()
                .filter(|o| matches!(o.class, ObjectClass::Car | ObjectClass::Person))
                .count();
            if has_green && obstacle_count == 0 {
                assert_eq!(scene.labels.actions, [1, 0, 1, 1]);
                assert_eq!(scene.labels.explanations[EXPL_LIGHT_GREEN], 1);
                assert_eq!(scene.labels.explanations[EXPL_ROAD_CLEAR], 1);
                assert_eq!(scene.labels.explanations[EXPL_LIGHT_RED], 0);
                found = true;
                break;
            }
        }
        assert!(found, "no green-only scene in 500 draws");
    }

    #[test]
    fn red_light_sets_stop_and_red_explanation() {
        let c = cfg(Family::Basic);
        let mut found = false;
        for i in 0..500u64 {
            let scene = generate_scene(&c, scene_seed(8, 0, i)).unwrap();
            if scene.objects.iter().any(|o| o.class == ObjectClass::TrafficLightRed) {
                assert_eq!(scene.labels.actions[ACTION_MOVE_FORWARD], 0);
                assert_eq!(scene.labels.actions[ACTION_STOP_SLOW], 1);
                assert_eq!(scene.labels.explanations[EXPL_LIGHT_RED], 1);
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn same_seed_reproduces_scene_exactly() {
        for family in [Family::Basic, Family::Relativity] {
            let c = cfg(family);
            let a = generate_scene(&c, 1234).unwrap();
            let b = generate_scene(&c, 1234).unwrap();
            assert_eq!(a.image, b.image);
            assert_eq!(a.objects, b.objects);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn relativity_side_is_relative_to_ego() {
        // Scan generated scenes for a single-obstacle case on each side of
        // the ego column and check the bits flip accordingly.
        let c = cfg(Family::Relativity);
        let (mut saw_left, mut saw_right) = (false, false);
        for i in 0..2_000u64 {
            let scene = generate_scene(&c, scene_seed(21, 1, i)).unwrap();
            let obstacles: Vec<&SceneObject> = scene
                .objects
                .iter()
                .filter(|o| matches!(o.class, ObjectClass::Car | ObjectClass::Person))
                .collect();
            if obstacles.len() != 1 {
                continue;
            }
            let ego = scene.ego_patch_col.unwrap();
            let ego_center = (ego * c.patch) as f64 + c.patch as f64 / 2.0;
            let ob_center = (obstacles[0].bounds.x0 as f64 + obstacles[0].bounds.x1 as f64) / 2.0;
            if ob_center < ego_center {
                assert_eq!(scene.labels.actions[ACTION_TURN_LEFT], 0);
                assert_eq!(scene.labels.actions[ACTION_TURN_RIGHT], 1);
                assert_eq!(scene.labels.explanations[EXPL_OBSTACLE_LEFT], 1);
                saw_left = true;
            } else {
                assert_eq!(scene.labels.actions[ACTION_TURN_LEFT], 1);
                assert_eq!(scene.labels.actions[ACTION_TURN_RIGHT], 0);
                assert_eq!(scene.labels.explanations[EXPL_OBSTACLE_RIGHT], 1);
                saw_right = true;
            }
            if saw_left && saw_right {
                break;
            }
        }
        assert!(saw_left && saw_right, "needed one-obstacle scenes on both sides");
    }

    #[test]
    fn objects_never_overlap() {
        for family in [Family::Basic, Family::Relativity] {
            let c = cfg(family);
            for i in 0..300u64 {
                let scene = generate_scene(&c, scene_seed(33, 2, i)).unwrap();
                let boxes: Vec<PixelBox> = scene.objects.iter().map(|o| o.bounds).collect();
                for a in 0..boxes.len() {
                    for b in a + 1..boxes.len() {
                        let (p, q) = (boxes[a], boxes[b]);
                        let overlap = p.x0 < q.x1 && q.x0 < p.x1 && p.y0 < q.y1 && q.y0 < p.y1;
                        assert!(!overlap, "objects {a} and {b} overlap in scene {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let c = GeneratorConfig { family: Family::Basic, height: 30, width: 32, patch: 4 };
        assert!(generate_scene(&c, 0).is_err());
        let c = GeneratorConfig { family: Family::Basic, height: 8, width: 8, patch: 4 };
        assert!(generate_scene(&c, 0).is_err(), "grid narrower than 4 patches");
    }
}
