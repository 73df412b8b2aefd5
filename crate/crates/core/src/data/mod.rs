//! Annotation manifests: schema, loading, validation, images.
//!
//! A manifest file is one JSON object:
//!
//! ```json
//! {
//!   "split": "train",
//!   "task": "vg",
//!   "registry": {"base": ["square"], "novel": ["oval"]},
//!   "records": [
//!     {"image_id": "0001", "width": 64, "height": 64, "expression": "the red square",
//!      "bbox": [4, 4, 20, 20], "category": "square", "is_novel": false}
//!   ]
//! }
//! ```
//!
//! `task` is `"vg"` for grounding records or `"pl"` for phrase-localization records.
//! Boxes are pixel corners `[x1, y1, x2, y2]`.

mod audit;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::ImageTensor;
use crate::error::{Error, Issue, Result};
use crate::types::{BBox, GroundingSample, PLSample};

pub use audit::{check_disjointness, DisjointnessReport};
pub use synth::{generate_synthetic, write_synthetic, SynthConfig, SyntheticSet, BASE_SHAPES, COLORS, NOVEL_SHAPES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vg,
    Pl,
}

/// Category names split into the training vocabulary and the held-out one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registry {
    pub base: Vec<String>,
    pub novel: Vec<String>,
}

impl Registry {
    /// `Some(true)` for novel, `Some(false)` for base, `None` if unknown. A name in
    /// both lists counts as novel.
    pub fn is_novel(&self, category: &str) -> Option<bool> {
        if self.novel.iter().any(|c| c == category) {
            Some(true)
        } else if self.base.iter().any(|c| c == category) {
            Some(false)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Vg(Vec<GroundingSample>),
    Pl(Vec<PLSample>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Vg(r) => r.len(),
            Records::Pl(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Records::Vg(_) => Task::Vg,
            Records::Pl(_) => Task::Pl,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub registry: Registry,
    pub records: Records,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    split: String,
    task: Task,
    registry: Registry,
    records: Vec<Value>,
}

impl DatasetManifest {
    pub fn vg(split: &str, registry: Registry, records: Vec<GroundingSample>) -> Self {
        DatasetManifest {
            split: split.to_string(),
            registry,
            records: Records::Vg(records),
        }
    }

    pub fn pl(split: &str, registry: Registry, records: Vec<PLSample>) -> Self {
        DatasetManifest {
            split: split.to_string(),
            registry,
            records: Records::Pl(records),
        }
    }

    pub fn task(&self) -> Task {
        self.records.task()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn grounding(&self) -> Option<&[GroundingSample]> {
        match &self.records {
            Records::Vg(r) => Some(r),
            Records::Pl(_) => None,
        }
    }

    pub fn phrases(&self) -> Option<&[PLSample]> {
        match &self.records {
            Records::Pl(r) => Some(r),
            Records::Vg(_) => None,
        }
    }

    /// Distinct image ids in first-seen order.
    pub fn image_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let ids: Vec<&str> = match &self.records {
            Records::Vg(r) => r.iter().map(|s| s.image_id.as_str()).collect(),
            Records::Pl(r) => r.iter().map(|s| s.image_id.as_str()).collect(),
        };
        ids.into_iter().filter(|id| seen.insert(*id)).collect()
    }

    /// Parse and validate. `origin` names the source in error messages.
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut issues = Vec::new();
        let records = match env.task {
            Task::Vg => Records::Vg(parse_records(env.records, &mut issues)),
            Task::Pl => Records::Pl(parse_records(env.records, &mut issues)),
        };
        if !issues.is_empty() {
            return Err(Error::Validation(issues));
        }
        let manifest = DatasetManifest {
            split: env.split,
            registry: env.registry,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json_string(&self) -> String {
        let records = match &self.records {
            Records::Vg(r) => r.iter().map(|s| serde_json::to_value(s).expect("record")).collect(),
            Records::Pl(r) => r.iter().map(|s| serde_json::to_value(s).expect("record")).collect(),
        };
        let env = Envelope {
            split: self.split.clone(),
            task: self.task(),
            registry: self.registry.clone(),
            records,
        };
        serde_json::to_string_pretty(&env).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    /// Check every invariant and report all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut issues = registry_issues(&self.registry);
        match &self.records {
            Records::Vg(r) => vg_issues(r, &self.registry, &mut issues),
            Records::Pl(r) => pl_issues(r, &mut issues),
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(issues))
        }
    }
}

fn parse_records<T: for<'de> Deserialize<'de>>(raw: Vec<Value>, issues: &mut Vec<Issue>) -> Vec<T> {
    let mut out = Vec::with_capacity(raw.len());
    for (i, v) in raw.into_iter().enumerate() {
        match serde_json::from_value(v) {
            Ok(r) => out.push(r),
            Err(e) => issues.push(Issue {
                record: Some(i),
                field: "record".into(),
                message: e.to_string(),
            }),
        }
    }
    out
}

fn issue(record: Option<usize>, field: &str, message: impl Into<String>) -> Issue {
    Issue {
        record,
        field: field.to_string(),
        message: message.into(),
    }
}

fn registry_issues(reg: &Registry) -> Vec<Issue> {
    let mut issues = Vec::new();
    for (name, list) in [("registry.base", &reg.base), ("registry.novel", &reg.novel)] {
        let mut seen = BTreeSet::new();
        for c in list {
            if c.trim().is_empty() {
                issues.push(issue(None, name, "empty category name"));
            } else if !seen.insert(c) {
                issues.push(issue(None, name, format!("duplicate category {c:?}")));
            }
        }
    }
    // a name listed as both base and novel is leakage, reported by the disjointness audit
    issues
}

fn box_issue(b: &BBox) -> Option<String> {
    if ![b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite()) {
        Some(format!("non-finite coordinates {:?}", b.to_array()))
    } else if b.x1 < 0.0 || b.y1 < 0.0 {
        Some(format!("negative coordinates {:?}", b.to_array()))
    } else if !(b.x2 > b.x1 && b.y2 > b.y1) {
        Some(format!("corners out of order or zero area {:?}", b.to_array()))
    } else {
        None
    }
}

fn vg_issues(records: &[GroundingSample], reg: &Registry, issues: &mut Vec<Issue>) {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in records.iter().enumerate() {
        let at = Some(i);
        if s.image_id.trim().is_empty() {
            issues.push(issue(at, "image_id", "empty image id"));
        } else if let Some(first) = ids.insert(&s.image_id, i) {
            issues.push(issue(at, "image_id", format!("{:?} already used by record {first}", s.image_id)));
        }
        if s.image_width == 0 || s.image_height == 0 {
            issues.push(issue(at, "width/height", "image dimensions must be positive"));
        }
        if s.expression.trim().is_empty() {
            issues.push(issue(at, "expression", "empty expression"));
        }
        if let Some(m) = box_issue(&s.target) {
            issues.push(issue(at, "bbox", m));
        } else if s.image_width > 0
            && s.image_height > 0
            && !s.target.fits_within(s.image_width as f64, s.image_height as f64)
        {
            issues.push(issue(
                at,
                "bbox",
                format!("{:?} exceeds {}x{} image", s.target.to_array(), s.image_width, s.image_height),
            ));
        }
        match reg.is_novel(&s.category) {
            None => issues.push(issue(at, "category", format!("{:?} not in registry", s.category))),
            Some(novel) if novel != s.is_novel => issues.push(issue(
                at,
                "is_novel",
                format!("{:?} is registered as {}", s.category, if novel { "novel" } else { "base" }),
            )),
            Some(_) => {}
        }
    }
}

fn pl_issues(records: &[PLSample], issues: &mut Vec<Issue>) {
    let mut per_image: BTreeMap<&str, Vec<(usize, bool)>> = BTreeMap::new();
    for (i, s) in records.iter().enumerate() {
        let at = Some(i);
        if s.image_id.trim().is_empty() {
            issues.push(issue(at, "image_id", "empty image id"));
        }
        per_image.entry(&s.image_id).or_default().push((i, s.uses_novel));
        let len = s.sentence.chars().count();
        if len == 0 {
            issues.push(issue(at, "sentence", "empty sentence"));
        }
        for (j, c) in s.chunks.iter().enumerate() {
            if c.start >= c.end || c.end > len {
                issues.push(issue(
                    at,
                    &format!("chunks[{j}]"),
                    format!("span {}..{} invalid for sentence of {len} characters", c.start, c.end),
                ));
            }
            if !s.chains.contains_key(&c.chain_id) {
                issues.push(issue(at, &format!("chunks[{j}].chain"), format!("chain {} not defined", c.chain_id)));
            }
        }
        for (id, boxes) in &s.chains {
            for (j, b) in boxes.iter().enumerate() {
                if let Some(m) = box_issue(b) {
                    issues.push(issue(at, &format!("chains.{id}[{j}]"), m));
                }
            }
        }
    }
    for (id, entries) in per_image {
        let flags: BTreeSet<bool> = entries.iter().map(|e| e.1).collect();
        if entries.len() != 2 || flags.len() != 2 {
            issues.push(issue(
                Some(entries[0].0),
                "uses_novel",
                format!(
                    "image {id:?} needs one base-only and one novel sentence, found {} sentence(s) with flags {:?}",
                    entries.len(),
                    entries.iter().map(|e| e.1).collect::<Vec<_>>()
                ),
            ));
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_json_str(&text, path)
}

fn load_task(path: &Path, task: Task) -> Result<DatasetManifest> {
    let m = load_manifest(path)?;
    if m.task() != task {
        return Err(Error::Validation(vec![issue(
            None,
            "task",
            format!("expected {task:?} manifest, found {:?}", m.task()),
        )]));
    }
    Ok(m)
}

pub fn load_vg_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    load_task(path.as_ref(), Task::Vg)
}

pub fn load_pl_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    load_task(path.as_ref(), Task::Pl)
}

/// Images for a manifest live in `images/<image_id>.png` next to the manifest file.
pub fn image_path(manifest_path: &Path, image_id: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("images")
        .join(format!("{image_id}.png"))
}

/// Load an image as `(size, size, 3)` RGB in `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(rgb_to_tensor(&img.to_rgb8(), size))
}

/// Resize (bilinear) to a square and scale to `[0, 1]`.
pub fn rgb_to_tensor(img: &image::RgbImage, size: usize) -> ImageTensor {
    let s = size as u32;
    let resized;
    let img = if img.width() == s && img.height() == s {
        img
    } else {
        resized = image::imageops::resize(img, s, s, image::imageops::FilterType::Triangle);
        &resized
    };
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Chunk;

    fn sample(id: &str) -> GroundingSample {
        GroundingSample {
            image_id: id.into(),
            image_width: 64,
            image_height: 64,
            expression: "the red square".into(),
            target: BBox { x1: 4.0, y1: 4.0, x2: 20.0, y2: 20.0 },
            category: "square".into(),
            is_novel: false,
        }
    }

    fn registry() -> Registry {
        Registry {
            base: vec!["square".into(), "circle".into()],
            novel: vec!["oval".into()],
        }
    }

    fn pl(id: &str, novel: bool) -> PLSample {
        PLSample {
            image_id: id.into(),
            sentence: "a dog on the grass".into(),
            uses_novel: novel,
            chunks: vec![Chunk { start: 0, end: 5, chain_id: 1 }, Chunk { start: 9, end: 18, chain_id: 2 }],
            chains: BTreeMap::from([(1, vec![BBox { x1: 1.0, y1: 1.0, x2: 5.0, y2: 5.0 }]), (2, vec![])]),
        }
    }

    fn issues_of(r: Result<DatasetManifest>) -> Vec<Issue> {
        match r {
            Err(Error::Validation(v)) => v,
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_vg_round_trip() {
        let m = DatasetManifest::vg("train", registry(), vec![sample("a")]);
        let text = m.to_json_string();
        let back = DatasetManifest::from_json_str(&text, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.len(), 1);
        assert_eq!(back.to_json_string(), text);
    }

    #[test]
    fn vg_violations_name_the_record() {
        let mut bad = sample("b");
        bad.target = BBox { x1: 30.0, y1: 4.0, x2: 20.0, y2: 20.0 };
        let mut unknown = sample("c");
        unknown.category = "hexagon".into();
        let m = DatasetManifest::vg("t", registry(), vec![sample("a"), bad, unknown]);
        let issues = issues_of(DatasetManifest::from_json_str(&m.to_json_string(), Path::new("mem")));
        assert_eq!(issues.len(), 2);
        assert_eq!((issues[0].record, issues[0].field.as_str()), (Some(1), "bbox"));
        assert_eq!((issues[1].record, issues[1].field.as_str()), (Some(2), "category"));
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(
            DatasetManifest::from_json_str("{\"split\": ", Path::new("x.json")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn pl_flag_pairs_and_spans() {
        let ok = DatasetManifest::pl("e", registry(), vec![pl("i", false), pl("i", true)]);
        assert!(ok.validate().is_ok());
        let round = DatasetManifest::from_json_str(&ok.to_json_string(), Path::new("m")).unwrap();
        assert_eq!(round, ok);

        let two_base = DatasetManifest::pl("e", registry(), vec![pl("i", false), pl("i", false)]);
        let issues = issues_of(two_base.validate().map(|_| two_base.clone()));
        assert_eq!(issues[0].field, "uses_novel");

        let mut long = pl("j", true);
        long.chunks[0].end = 99;
        let m = DatasetManifest::pl("e", registry(), vec![pl("j", false), long]);
        let issues = issues_of(m.validate().map(|_| m.clone()));
        assert_eq!((issues[0].record, issues[0].field.as_str()), (Some(1), "chunks[0]"));
    }

    #[test]
    fn wrong_task_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        DatasetManifest::vg("t", registry(), vec![sample("a")]).save(&p).unwrap();
        assert!(load_vg_manifest(&p).is_ok());
        assert!(matches!(load_pl_manifest(&p), Err(Error::Validation(_))));
    }
}
