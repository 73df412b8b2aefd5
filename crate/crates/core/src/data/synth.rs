use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, Registry};
use crate::error::{Error, Result};
use crate::types::{BBox, GroundingSample};

pub const BASE_SHAPES: [&str; 2] = ["square", "circle"];
pub const NOVEL_SHAPES: [&str; 2] = ["bar", "oval"];
pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [230, 220, 50]),
    ("magenta", [210, 60, 210]),
    ("cyan", [60, 210, 210]),
];
const BACKGROUND: [u8; 3] = [16, 16, 16];
const PLACEMENT_TRIES: usize = 200;

/// Scene generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Square canvas side in pixels.
    pub canvas: u32,
    /// Range of the longer object side in pixels, inclusive.
    pub min_side: u32,
    pub max_side: u32,
    /// Other objects besides the target.
    pub distractors: usize,
    /// Probability that a scene's target is a novel shape.
    pub novel_fraction: f64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: 64,
            min_side: 14,
            max_side: 28,
            distractors: 1,
            novel_fraction: 0.0,
            id_prefix: "scene".into(),
        }
    }
}

pub struct SyntheticSet {
    pub manifest: DatasetManifest,
    /// One image per record, in record order.
    pub images: Vec<RgbImage>,
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: &'static str,
    color: usize,
    bbox: BBox,
}

fn object_size(shape: &str, side: u32) -> (u32, u32) {
    match shape {
        "bar" => (side, (side / 3).max(2)),
        "oval" => (side, (side / 2).max(2)),
        _ => (side, side),
    }
}

fn overlaps(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x1 < b.x2 + margin && b.x1 < a.x2 + margin && a.y1 < b.y2 + margin && b.y1 < a.y2 + margin
}

fn place(rng: &mut ChaCha8Rng, cfg: &SynthConfig, shape: &'static str, color: usize, taken: &[Object]) -> Object {
    let mut last = None;
    for _ in 0..PLACEMENT_TRIES {
        let side = rng.random_range(cfg.min_side..=cfg.max_side);
        let (w, h) = object_size(shape, side);
        let x = rng.random_range(0..=cfg.canvas - w);
        let y = rng.random_range(0..=cfg.canvas - h);
        let bbox = BBox {
            x1: x as f64,
            y1: y as f64,
            x2: (x + w) as f64,
            y2: (y + h) as f64,
        };
        let obj = Object { shape, color, bbox };
        if taken.iter().all(|t| !overlaps(&t.bbox, &bbox, 2.0)) {
            return obj;
        }
        last = Some(obj);
    }
    // crowded canvas: accept an overlap, the target is painted last
    last.expect("at least one placement attempt")
}

fn paint(img: &mut RgbImage, obj: &Object) {
    let rgb = Rgb(COLORS[obj.color].1);
    let b = obj.bbox;
    let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
    let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
    let round = matches!(obj.shape, "circle" | "oval");
    for y in b.y1 as u32..b.y2 as u32 {
        for x in b.x1 as u32..b.x2 as u32 {
            let inside = !round || {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            };
            if inside {
                img.put_pixel(x, y, rgb);
            }
        }
    }
}

fn relation(target: &BBox, other: &BBox) -> &'static str {
    let dx = (target.x1 + target.x2 - other.x1 - other.x2) / 2.0;
    let dy = (target.y1 + target.y2 - other.y1 - other.y2) / 2.0;
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            "left of"
        } else {
            "right of"
        }
    } else if dy < 0.0 {
        "above"
    } else {
        "below"
    }
}

fn describe(o: &Object) -> String {
    format!("{} {}", COLORS[o.color].0, o.shape)
}

/// Generate `n` scenes of colored shapes, each with one referring expression.
///
/// Squares and circles are base categories; bars and ovals are novel. Output is a
/// pure function of `(n, cfg, seed)`.
pub fn generate_synthetic(n: usize, cfg: &SynthConfig, seed: u64) -> SyntheticSet {
    assert!(n >= 1, "need at least one scene");
    assert!(
        cfg.min_side >= 2 && cfg.min_side <= cfg.max_side && cfg.max_side <= cfg.canvas,
        "object sides {}..={} do not fit a {} canvas",
        cfg.min_side,
        cfg.max_side,
        cfg.canvas
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registry = Registry {
        base: BASE_SHAPES.iter().map(|s| s.to_string()).collect(),
        novel: NOVEL_SHAPES.iter().map(|s| s.to_string()).collect(),
    };
    let all: Vec<&'static str> = BASE_SHAPES.iter().chain(&NOVEL_SHAPES).copied().collect();
    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let novel = rng.random_bool(cfg.novel_fraction.clamp(0.0, 1.0));
        let shape = if novel {
            *NOVEL_SHAPES.choose(&mut rng).expect("nonempty")
        } else {
            *BASE_SHAPES.choose(&mut rng).expect("nonempty")
        };
        let pool: &[&'static str] = if novel { &all } else { &BASE_SHAPES };
        let color = rng.random_range(0..COLORS.len());

        let mut others: Vec<Object> = Vec::with_capacity(cfg.distractors);
        for _ in 0..cfg.distractors {
            let (s, c) = loop {
                let s = *pool.choose(&mut rng).expect("nonempty");
                let c = rng.random_range(0..COLORS.len());
                if (s, c) != (shape, color) {
                    break (s, c);
                }
            };
            let placed = place(&mut rng, cfg, s, c, &others);
            others.push(placed);
        }
        let target = place(&mut rng, cfg, shape, color, &others);

        let mut img = RgbImage::from_pixel(cfg.canvas, cfg.canvas, Rgb(BACKGROUND));
        for o in &others {
            paint(&mut img, o);
        }
        paint(&mut img, &target);

        let expression = match others.first() {
            Some(o) => format!("the {} {} the {}", describe(&target), relation(&target.bbox, &o.bbox), describe(o)),
            None => format!("the {}", describe(&target)),
        };
        records.push(GroundingSample {
            image_id: format!("{}-{i:04}", cfg.id_prefix),
            image_width: cfg.canvas,
            image_height: cfg.canvas,
            expression,
            target: target.bbox,
            category: shape.to_string(),
            is_novel: novel,
        });
        images.push(img);
    }
    SyntheticSet {
        manifest: DatasetManifest::vg(&cfg.id_prefix, registry, records),
        images,
    }
}

/// Write `manifest.json` and `images/<image_id>.png` under `dir`. Returns the manifest path.
pub fn write_synthetic(dir: &Path, set: &SyntheticSet) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let records = set.manifest.grounding().expect("synthetic sets are grounding manifests");
    for (r, img) in records.iter().zip(&set.images) {
        let path = images.join(format!("{}.png", r.image_id));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    let path = dir.join("manifest.json");
    set.manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{size_bucket, SizeBucket};

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic(16, &cfg, 7);
        let b = generate_synthetic(16, &cfg, 7);
        assert_eq!(a.manifest.to_json_string(), b.manifest.to_json_string());
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.as_raw() == y.as_raw()));
        let c = generate_synthetic(16, &cfg, 8);
        assert_ne!(a.manifest.to_json_string(), c.manifest.to_json_string());
    }

    #[test]
    fn records_are_valid_and_targets_visible() {
        let cfg = SynthConfig { novel_fraction: 0.5, distractors: 2, ..SynthConfig::default() };
        let set = generate_synthetic(40, &cfg, 3);
        set.manifest.validate().unwrap();
        for (r, img) in set.manifest.grounding().unwrap().iter().zip(&set.images) {
            assert!(r.target.is_valid() && r.target.fits_within(64.0, 64.0));
            let c = img.get_pixel(((r.target.x1 + r.target.x2) / 2.0) as u32, ((r.target.y1 + r.target.y2) / 2.0) as u32);
            assert_ne!(c.0, BACKGROUND);
            assert!(r.expression.starts_with("the "));
        }
    }

    #[test]
    fn size_knob_controls_buckets() {
        let small = SynthConfig { min_side: 8, max_side: 24, ..SynthConfig::default() };
        let set = generate_synthetic(50, &small, 1);
        assert!(set.manifest.grounding().unwrap().iter().all(|r| size_bucket(&r.target) == SizeBucket::Small));

        let big = SynthConfig { canvas: 160, min_side: 110, max_side: 150, distractors: 0, ..SynthConfig::default() };
        let set = generate_synthetic(20, &big, 1);
        assert!(set
            .manifest
            .grounding()
            .unwrap()
            .iter()
            .all(|r| r.category != "square" || size_bucket(&r.target) == SizeBucket::Large));
    }

    #[test]
    fn writes_loadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_synthetic(3, &SynthConfig::default(), 2);
        let path = write_synthetic(dir.path(), &set).unwrap();
        let m = super::super::load_vg_manifest(&path).unwrap();
        assert_eq!(m, set.manifest);
        let id = &m.grounding().unwrap()[0].image_id;
        let t = super::super::load_image(&super::super::image_path(&path, id), 64).unwrap();
        assert_eq!(t.dim(), (64, 64, 3));
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
