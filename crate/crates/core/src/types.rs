//! Box types and annotation records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel corner form (top-left, bottom-right).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::DegenerateBox(format!(
                "({x1}, {y1}, {x2}, {y2}) violates x1<=x2, y1<=y2 or is not finite"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clamp all coordinates into `[0, w] x [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    /// True when the box lies inside `[0, w] x [0, h]`.
    pub fn fits_within(&self, w: f64, h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w && self.y2 <= h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

/// Center-size box normalized by image width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let n = NormBox { cx, cy, w, h };
        if n.is_valid() {
            Ok(n)
        } else {
            Err(Error::DegenerateBox(format!(
                "normalized box ({cx}, {cy}, {w}, {h}) must lie in [0,1] with positive size"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        unit(self.cx) && unit(self.cy) && unit(self.w) && unit(self.h) && self.w > 0.0 && self.h > 0.0
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corner form in normalized units; may extend past `[0,1]`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }
}

fn check_dims(w: f64, h: f64) -> Result<()> {
    if w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Dimension {
            width: w,
            height: h,
        })
    }
}

/// Pixel corner box to normalized center-size box.
pub fn bbox_to_norm(b: &BBox, w: f64, h: f64) -> Result<NormBox> {
    check_dims(w, h)?;
    if !b.is_valid() {
        return Err(Error::DegenerateBox(format!("{b:?}")));
    }
    NormBox::new(
        (b.x1 + b.x2) / (2.0 * w),
        (b.y1 + b.y2) / (2.0 * h),
        b.width() / w,
        b.height() / h,
    )
}

/// Normalized center-size box to pixel corners, optionally clamped to the image.
pub fn norm_to_bbox(n: &NormBox, w: f64, h: f64, clip: bool) -> Result<BBox> {
    check_dims(w, h)?;
    if !(n.w > 0.0 && n.h > 0.0) || ![n.cx, n.cy, n.w, n.h].iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateBox(format!("{n:?}")));
    }
    let b = BBox {
        x1: (n.cx - 0.5 * n.w) * w,
        y1: (n.cy - 0.5 * n.h) * h,
        x2: (n.cx + 0.5 * n.w) * w,
        y2: (n.cy + 0.5 * n.h) * h,
    };
    Ok(if clip { b.clip(w, h) } else { b })
}

/// One referring-expression instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingSample {
    pub image_id: String,
    #[serde(rename = "width")]
    pub image_width: u32,
    #[serde(rename = "height")]
    pub image_height: u32,
    pub expression: String,
    #[serde(rename = "bbox", with = "bbox_array")]
    pub target: BBox,
    pub category: String,
    pub is_novel: bool,
}

/// A noun-phrase chunk `[start, end)` in character offsets, linked to a coreference chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "chain")]
    pub chain_id: u32,
}

/// One phrase-localization sentence with its coreference chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PLSample {
    pub image_id: String,
    pub sentence: String,
    pub uses_novel: bool,
    pub chunks: Vec<Chunk>,
    /// Chain id to boxes; scene and event chains carry no boxes.
    #[serde(with = "chain_map")]
    pub chains: BTreeMap<u32, Vec<BBox>>,
}

impl PLSample {
    /// Text of a chunk, using character (not byte) offsets.
    pub fn chunk_text(&self, chunk: &Chunk) -> String {
        self.sentence
            .chars()
            .skip(chunk.start)
            .take(chunk.end.saturating_sub(chunk.start))
            .collect()
    }
}

mod bbox_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    // Ordering violations are left to manifest validation so they can be
    // reported per record rather than as a parse failure.
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        Ok(BBox { x1, y1, x2, y2 })
    }
}

mod chain_map {
    use std::collections::BTreeMap;

    use super::BBox;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        chains: &BTreeMap<u32, Vec<BBox>>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let out: BTreeMap<String, Vec<[f64; 4]>> = chains
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(BBox::to_array).collect()))
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<u32, Vec<BBox>>, D::Error> {
        let raw = BTreeMap::<String, Vec<[f64; 4]>>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, boxes)| {
                let id = k
                    .parse::<u32>()
                    .map_err(|_| D::Error::custom(format!("chain id {k:?} is not an integer")))?;
                let boxes = boxes
                    .into_iter()
                    .map(|[x1, y1, x2, y2]| BBox { x1, y1, x2, y2 })
                    .collect();
                Ok((id, boxes))
            })
            .collect()
    }
}
