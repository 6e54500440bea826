//! Procedural shape categories for unseen-category experiments.
//!
//! Each category is a shape family instance (regular polygon, star, cross,
//! house) whose keypoints are named vertices. Names and descriptions follow
//! one relational scheme across categories ("topmost vertex", "second vertex
//! clockwise from topmost", ...), so held-out categories share semantics
//! with trained ones. Rendering, colors, and pose jitter are all driven by
//! per-image seeded streams; the same config and seed produce byte-identical
//! datasets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{
    CategoryInfo, CropTransform, Dataset, ImageData, Keypoint, PoseSample, Split,
};
use crate::error::{Error, Result};
use crate::instructions::Registry;
use crate::rng::{stream, tag_str};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_categories: usize,
    pub images_per_category: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Fraction of categories held out for the test split.
    pub test_fraction: f64,
    /// Fraction of categories held out for validation.
    pub val_fraction: f64,
    /// Rotation jitter in radians (uniform in +-range).
    pub rotation_range: f64,
    /// Shape diameter as a fraction of the frame.
    pub scale_range: (f64, f64),
    /// Center translation jitter (uniform in +-range, normalized units).
    pub translation_range: f64,
    /// Per-channel pixel noise amplitude.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_categories: 10,
            images_per_category: 200,
            image_size: 64,
            seed: 0,
            test_fraction: 0.2,
            val_fraction: 0.0,
            rotation_range: 0.26,
            scale_range: (0.55, 0.85),
            translation_range: 0.08,
            noise: 0.02,
        }
    }
}

/// A category blueprint: canonical vertices (unit circle, y down, index 0
/// topmost, clockwise) and named keypoints.
struct Blueprint {
    name: String,
    /// Polygon outline in canonical coordinates.
    outline: Vec<(f64, f64)>,
    /// (keypoint name, description, canonical position).
    keypoints: Vec<(String, String, (f64, f64))>,
}

fn ordinal(i: usize) -> &'static str {
    const WORDS: [&str; 12] = [
        "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth",
        "tenth", "eleventh", "twelfth",
    ];
    WORDS[i - 1]
}

/// Vertices of a regular n-gon: index 0 at the top, then clockwise on
/// screen (y grows downward).
fn ring(n: usize, radius: f64, phase: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let theta = -std::f64::consts::FRAC_PI_2 + phase + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            (radius * theta.cos(), radius * theta.sin())
        })
        .collect()
}

fn polygon_blueprint(n: usize, name: &str) -> Blueprint {
    let verts = ring(n, 1.0, 0.0);
    let mut keypoints = Vec::new();
    for i in 0..n {
        let (kp_name, desc) = if i == 0 {
            (
                "topmost vertex".to_string(),
                format!(
                    "The topmost vertex is the highest corner of the {name}. The second vertex clockwise from topmost comes after it."
                ),
            )
        } else {
            let kp_name = format!("{} vertex clockwise from topmost", ordinal(i + 1));
            let prev = if i == 1 {
                "the topmost vertex".to_string()
            } else {
                format!("the {} vertex clockwise from topmost", ordinal(i))
            };
            let desc = format!(
                "The {} vertex clockwise from topmost is a corner of the {name}. It comes right after {prev}, going clockwise.",
                ordinal(i + 1)
            );
            (kp_name, desc)
        };
        keypoints.push((kp_name, desc, verts[i]));
    }
    Blueprint {
        name: name.to_string(),
        outline: verts,
        keypoints,
    }
}

fn star_blueprint(points: usize, name: &str) -> Blueprint {
    let outer = ring(points, 1.0, 0.0);
    let inner = ring(points, 0.45, std::f64::consts::PI / points as f64);
    let mut outline = Vec::with_capacity(points * 2);
    for i in 0..points {
        outline.push(outer[i]);
        outline.push(inner[i]);
    }
    let mut keypoints = Vec::new();
    for i in 0..points {
        let (kp_name, desc) = if i == 0 {
            (
                "topmost point".to_string(),
                format!(
                    "The topmost point is the highest tip of the {name}. The second point clockwise from topmost comes after it."
                ),
            )
        } else {
            let prev = if i == 1 {
                "the topmost point".to_string()
            } else {
                format!("the {} point clockwise from topmost", ordinal(i))
            };
            (
                format!("{} point clockwise from topmost", ordinal(i + 1)),
                format!(
                    "The {} point clockwise from topmost is a tip of the {name}. It comes right after {prev}, going clockwise.",
                    ordinal(i + 1)
                ),
            )
        };
        keypoints.push((kp_name, desc, outer[i]));
    }
    Blueprint {
        name: name.to_string(),
        outline,
        keypoints,
    }
}

fn cross_blueprint() -> Blueprint {
    let w = 0.32;
    let outline = vec![
        (-w, -1.0),
        (w, -1.0),
        (w, -w),
        (1.0, -w),
        (1.0, w),
        (w, w),
        (w, 1.0),
        (-w, 1.0),
        (-w, w),
        (-1.0, w),
        (-1.0, -w),
        (-w, -w),
    ];
    let keypoints = vec![
        (
            "tip of the top arm".to_string(),
            "The tip of the top arm is the upper end of the cross. It sits directly above the center of the cross.".to_string(),
            (0.0, -1.0),
        ),
        (
            "tip of the right arm".to_string(),
            "The tip of the right arm is the right end of the cross. It sits directly to the right of the center of the cross.".to_string(),
            (1.0, 0.0),
        ),
        (
            "tip of the bottom arm".to_string(),
            "The tip of the bottom arm is the lower end of the cross. It sits directly below the center of the cross.".to_string(),
            (0.0, 1.0),
        ),
        (
            "tip of the left arm".to_string(),
            "The tip of the left arm is the left end of the cross. It sits directly to the left of the center of the cross.".to_string(),
            (-1.0, 0.0),
        ),
        (
            "center of the cross".to_string(),
            "The center of the cross is where the two bars meet. It lies between the tip of the top arm and the tip of the bottom arm.".to_string(),
            (0.0, 0.0),
        ),
    ];
    Blueprint {
        name: "cross".to_string(),
        outline,
        keypoints,
    }
}

fn house_blueprint() -> Blueprint {
    let outline = vec![
        (0.0, -1.0),
        (0.85, -0.15),
        (0.85, 1.0),
        (-0.85, 1.0),
        (-0.85, -0.15),
    ];
    let keypoints = vec![
        (
            "peak of the roof".to_string(),
            "The peak of the roof is the highest point of the house. It sits above the left eave and the right eave.".to_string(),
            (0.0, -1.0),
        ),
        (
            "right eave".to_string(),
            "The right eave is where the roof meets the right wall. It lies below the peak of the roof, on the right side.".to_string(),
            (0.85, -0.15),
        ),
        (
            "bottom right corner".to_string(),
            "The bottom right corner is the base of the right wall. It sits directly below the right eave.".to_string(),
            (0.85, 1.0),
        ),
        (
            "bottom left corner".to_string(),
            "The bottom left corner is the base of the left wall. It sits directly below the left eave.".to_string(),
            (-0.85, 1.0),
        ),
        (
            "left eave".to_string(),
            "The left eave is where the roof meets the left wall. It lies below the peak of the roof, on the left side.".to_string(),
            (-0.85, -0.15),
        ),
    ];
    Blueprint {
        name: "house".to_string(),
        outline,
        keypoints,
    }
}

/// Family order: polygons and stars first, the structurally distinct shapes
/// in the middle, and two held-back family members at the end so the default
/// test split sees familiar semantics on unfamiliar shapes.
fn blueprint(index: usize) -> Blueprint {
    match index {
        0 => polygon_blueprint(3, "triangle"),
        1 => polygon_blueprint(4, "square"),
        2 => polygon_blueprint(5, "pentagon"),
        3 => polygon_blueprint(6, "hexagon"),
        4 => star_blueprint(4, "star-4"),
        5 => star_blueprint(5, "star-5"),
        6 => cross_blueprint(),
        7 => house_blueprint(),
        8 => polygon_blueprint(7, "heptagon"),
        9 => star_blueprint(6, "star-6"),
        10 => polygon_blueprint(8, "octagon"),
        11 => star_blueprint(7, "star-7"),
        _ => polygon_blueprint(3 + index % 6, &format!("polygon-{index}")),
    }
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if ((yi > py) != (yj > py)) && (px < (xj - xi) * (py - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

struct Placement {
    verts: Vec<(f64, f64)>,
    kp_pos: Vec<(f64, f64)>,
}

/// Rotate/scale/translate the canonical shape into normalized image
/// coordinates, retrying with shrinking jitter until everything is in frame.
fn place_shape(
    bp: &Blueprint,
    cfg: &SynthConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Placement {
    for attempt in 0..32 {
        let damp = 1.0 / (1.0 + attempt as f64 * 0.5);
        let rot = rng.gen_range(-cfg.rotation_range..=cfg.rotation_range) * damp;
        let diameter = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
        let r = diameter / 2.0;
        let tx = rng.gen_range(-cfg.translation_range..=cfg.translation_range) * damp;
        let ty = rng.gen_range(-cfg.translation_range..=cfg.translation_range) * damp;
        let (cx, cy) = (0.5 + tx, 0.5 + ty);
        let place = |(x, y): (f64, f64)| {
            let xr = x * rot.cos() - y * rot.sin();
            let yr = x * rot.sin() + y * rot.cos();
            (cx + r * xr, cy + r * yr)
        };
        let verts: Vec<(f64, f64)> = bp.outline.iter().map(|&v| place(v)).collect();
        let kp_pos: Vec<(f64, f64)> = bp.keypoints.iter().map(|k| place(k.2)).collect();
        let in_frame = verts
            .iter()
            .chain(kp_pos.iter())
            .all(|&(x, y)| (0.03..=0.97).contains(&x) && (0.03..=0.97).contains(&y));
        if in_frame {
            return Placement { verts, kp_pos };
        }
    }
    // Final fallback: centered, smallest scale, no jitter.
    let r = cfg.scale_range.0 / 2.0;
    Placement {
        verts: bp.outline.iter().map(|&(x, y)| (0.5 + r * x, 0.5 + r * y)).collect(),
        kp_pos: bp
            .keypoints
            .iter()
            .map(|k| (0.5 + r * k.2 .0, 0.5 + r * k.2 .1))
            .collect(),
    }
}

fn render(
    verts: &[(f64, f64)],
    size: usize,
    noise: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> ImageData {
    let bg: [f64; 3] = [
        rng.gen_range(0.70..0.95),
        rng.gen_range(0.70..0.95),
        rng.gen_range(0.70..0.95),
    ];
    let fg: [f64; 3] = [
        rng.gen_range(0.0..0.45),
        rng.gen_range(0.0..0.45),
        rng.gen_range(0.0..0.45),
    ];
    let mut rgb = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let px = (x as f64 + 0.5) / size as f64;
            let py = (y as f64 + 0.5) / size as f64;
            let inside = point_in_polygon(px, py, verts);
            mask.push(if inside { 255 } else { 0 });
            let base = if inside { fg } else { bg };
            for c in base {
                let v = (c + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0);
                rgb.push((v * 255.0).round() as u8);
            }
        }
    }
    ImageData {
        height: size,
        width: size,
        rgb,
        mask: Some(mask),
    }
}

/// Generate the dataset and its description registry.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, Registry)> {
    if cfg.n_categories < 2 {
        return Err(Error::Config(
            "synthetic generation needs at least 2 categories".into(),
        ));
    }
    if cfg.images_per_category == 0 {
        return Err(Error::Config("images_per_category must be positive".into()));
    }
    let n_test = ((cfg.n_categories as f64 * cfg.test_fraction).round() as usize)
        .max(1)
        .min(cfg.n_categories - 1);
    let n_val = (cfg.n_categories as f64 * cfg.val_fraction).round() as usize;
    let n_train = cfg.n_categories - n_test - n_val;
    if n_train == 0 {
        return Err(Error::Config("split fractions leave no training categories".into()));
    }

    let mut registry = Registry::default();
    let mut dataset = Dataset::default();
    let mut next_sample_id: u64 = 1;
    for ci in 0..cfg.n_categories {
        let bp = blueprint(ci);
        let split = if ci < n_train {
            Split::Train
        } else if ci < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let cat_id = (ci + 1) as u32;
        dataset.categories.push(CategoryInfo {
            id: cat_id,
            name: bp.name.clone(),
            split,
            keypoints: bp.keypoints.iter().map(|k| k.0.clone()).collect(),
        });
        registry.add_category(
            &bp.name,
            bp.keypoints
                .iter()
                .map(|k| (k.0.clone(), k.1.clone()))
                .collect(),
        )?;

        let cat_tag = tag_str(&bp.name);
        for ii in 0..cfg.images_per_category {
            let mut rng = stream(cfg.seed, &[0x5359_4e54, cat_tag, ii as u64]);
            let placement = place_shape(&bp, cfg, &mut rng);
            let image = render(&placement.verts, cfg.image_size, cfg.noise, &mut rng);
            let px = cfg.image_size as f64;
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &(x, y) in &placement.verts {
                x0 = x0.min(x * px);
                y0 = y0.min(y * px);
                x1 = x1.max(x * px);
                y1 = y1.max(y * px);
            }
            dataset.samples.push(PoseSample {
                id: next_sample_id,
                category_id: cat_id,
                keypoints: placement
                    .kp_pos
                    .iter()
                    .map(|&(x, y)| Keypoint { x, y, visible: true })
                    .collect(),
                bbox: [x0, y0, x1 - x0, y1 - y0],
                crop: CropTransform::identity_for(cfg.image_size, cfg.image_size),
                image,
                lint_flags: Vec::new(),
            });
            next_sample_id += 1;
        }
    }
    dataset.assert_split_disjoint()?;
    Ok((dataset, registry))
}

/// Generate and write `dataset.json`, `registry.json`, images and masks.
pub fn write_synthetic(cfg: &SynthConfig, dir: &std::path::Path) -> Result<()> {
    let (dataset, registry) = generate_synthetic(cfg)?;
    std::fs::create_dir_all(dir)?;
    dataset.save(dir)?;
    registry.save(&dir.join("registry.json"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_categories: 10,
            images_per_category: 3,
            image_size: 32,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (d1, r1) = generate_synthetic(&small_cfg()).unwrap();
        let (d2, r2) = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(r1.to_json(), r2.to_json());
        assert_eq!(d1.samples.len(), d2.samples.len());
        for (a, b) in d1.samples.iter().zip(&d2.samples) {
            assert_eq!(a.image.rgb, b.image.rgb);
            assert_eq!(a.keypoints, b.keypoints);
        }
    }

    #[test]
    fn pentagon_keypoints_reference_clockwise_neighbors() {
        let (_, registry) = generate_synthetic(&small_cfg()).unwrap();
        let specs = registry.keypoints("pentagon").unwrap();
        assert_eq!(specs.len(), 5);
        assert_eq!(specs[0].name, "topmost vertex");
        assert_eq!(specs[1].name, "second vertex clockwise from topmost");
        // Every description references at least one other keypoint name.
        for (i, s) in specs.iter().enumerate() {
            let refs_other = specs
                .iter()
                .enumerate()
                .any(|(j, o)| j != i && s.description.contains(&o.name));
            assert!(refs_other, "{} references no neighbor", s.name);
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let (dataset, _) = generate_synthetic(&small_cfg()).unwrap();
        let train: Vec<_> = dataset
            .categories
            .iter()
            .filter(|c| c.split == Split::Train)
            .collect();
        let test: Vec<_> = dataset
            .categories
            .iter()
            .filter(|c| c.split == Split::Test)
            .collect();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        dataset.assert_split_disjoint().unwrap();
    }

    #[test]
    fn keypoints_lie_inside_frame_and_bbox_positive() {
        let (dataset, _) = generate_synthetic(&small_cfg()).unwrap();
        for s in &dataset.samples {
            for k in &s.keypoints {
                assert!((0.0..=1.0).contains(&k.x) && (0.0..=1.0).contains(&k.y));
            }
            assert!(s.bbox[2] > 0.0 && s.bbox[3] > 0.0);
        }
    }

    #[test]
    fn descriptions_are_tokenizable() {
        let (_, registry) = generate_synthetic(&small_cfg()).unwrap();
        let vocab = Vocabulary::default_charset();
        for cat in registry.categories() {
            for spec in registry.keypoints(cat).unwrap() {
                vocab.encode_text(&spec.name).unwrap();
                vocab.encode_text(&spec.description).unwrap();
            }
        }
    }

    #[test]
    fn topmost_vertex_is_topmost_without_rotation() {
        let cfg = SynthConfig {
            rotation_range: 0.0,
            ..small_cfg()
        };
        let (dataset, _) = generate_synthetic(&cfg).unwrap();
        let pentagon = dataset.category_by_name("pentagon").unwrap().id;
        for s in dataset.samples.iter().filter(|s| s.category_id == pentagon) {
            let top = &s.keypoints[0];
            for other in &s.keypoints[1..] {
                assert!(top.y <= other.y + 1e-9);
            }
        }
    }

    #[test]
    fn masks_cover_shape_interior() {
        let (dataset, _) = generate_synthetic(&small_cfg()).unwrap();
        let s = &dataset.samples[0];
        let mask = s.image.mask.as_ref().unwrap();
        let inside: usize = mask.iter().filter(|&&v| v > 0).count();
        let frac = inside as f64 / mask.len() as f64;
        assert!(frac > 0.05 && frac < 0.9, "mask fraction {frac}");
    }
}
