//! Run a predictor over a manifest and score it.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::ImageTensor;
use crate::data::{image_path, load_image, DatasetManifest, Records};
use crate::error::{Error, Result};
use crate::metrics::{recall_at_k, summarize, EvalReport, PredictionRecord, RecallAtK};
use crate::model::{Checkpoint, GroundingModel};
use crate::train::TrainSample;
use crate::types::{norm_to_bbox, BBox, PLSample};

/// Anything that turns an image and an expression into ranked pixel boxes.
pub trait Grounder {
    /// Resolution images must be resized to, or `None` if images are not needed.
    fn input_size(&self) -> Option<usize>;

    /// Candidate boxes in image pixels, best first, clipped to the image.
    fn rank(&self, image_id: &str, image: Option<&ImageTensor>, expression: &str, width: f64, height: f64)
        -> Result<Vec<BBox>>;
}

impl Grounder for GroundingModel {
    fn input_size(&self) -> Option<usize> {
        Some(self.cfg.image_size)
    }

    fn rank(&self, _id: &str, image: Option<&ImageTensor>, expression: &str, width: f64, height: f64) -> Result<Vec<BBox>> {
        let image = image.ok_or_else(|| Error::Input("model needs the image".into()))?;
        // ranked order starts with the top-1 box: both break ties toward the lower index
        let out = self.predict(image, expression, width, height)?;
        out.ranked_boxes()
            .iter()
            .map(|b| norm_to_bbox(b, width, height, true))
            .collect()
    }
}

/// Fixed answers keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerTable {
    pub boxes: BTreeMap<String, [f64; 4]>,
}

impl AnswerTable {
    /// The ground truth of a grounding manifest, i.e. a perfect predictor.
    pub fn from_ground_truth(manifest: &DatasetManifest) -> Result<Self> {
        let records = manifest
            .grounding()
            .ok_or_else(|| Error::Input("answer tables are built from grounding manifests".into()))?;
        Ok(AnswerTable {
            boxes: records.iter().map(|r| (r.image_id.clone(), r.target.to_array())).collect(),
        })
    }
}

impl Grounder for AnswerTable {
    fn input_size(&self) -> Option<usize> {
        None
    }

    fn rank(&self, image_id: &str, _image: Option<&ImageTensor>, _e: &str, width: f64, height: f64) -> Result<Vec<BBox>> {
        let b = self
            .boxes
            .get(image_id)
            .ok_or_else(|| Error::Input(format!("no answer for image {image_id:?}")))?;
        Ok(vec![BBox::from_array(*b)?.clip(width, height)])
    }
}

/// A loaded checkpoint of either kind.
pub enum Predictor {
    Model(Box<GroundingModel>),
    Answers(AnswerTable),
}

impl Predictor {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        Ok(match ckpt {
            Checkpoint::Model { config, vocab, params } => {
                Predictor::Model(Box::new(GroundingModel::from_parts(&config, vocab, &params)?))
            }
            Checkpoint::Answers { boxes } => Predictor::Answers(AnswerTable { boxes }),
        })
    }

    pub fn grounder(&self) -> &dyn Grounder {
        match self {
            Predictor::Model(m) => m.as_ref(),
            Predictor::Answers(a) => a,
        }
    }
}

fn load_for(grounder: &dyn Grounder, manifest_path: &Path, image_id: &str) -> Result<Option<ImageTensor>> {
    grounder
        .input_size()
        .map(|s| load_image(&image_path(manifest_path, image_id), s))
        .transpose()
}

/// Score already loaded samples.
pub fn evaluate_samples(grounder: &dyn Grounder, samples: &[TrainSample]) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let ranked = grounder.rank(&s.image_id, Some(&s.image), &s.expression, s.width, s.height)?;
        let top = ranked.first().ok_or_else(|| Error::Input("predictor returned no box".into()))?;
        preds.push(PredictionRecord::new(&s.image_id, top, &s.gt));
    }
    let outcomes: Vec<_> = preds.iter().map(PredictionRecord::outcome).collect();
    Ok((summarize(&outcomes, true), preds))
}

/// Evaluate on a grounding or phrase-localization manifest.
pub fn evaluate_manifest(
    grounder: &dyn Grounder,
    manifest: &DatasetManifest,
    manifest_path: &Path,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    match &manifest.records {
        Records::Vg(records) => {
            let mut preds = Vec::with_capacity(records.len());
            for r in records {
                let image = load_for(grounder, manifest_path, &r.image_id)?;
                let (w, h) = (r.image_width as f64, r.image_height as f64);
                let ranked = grounder.rank(&r.image_id, image.as_ref(), &r.expression, w, h)?;
                let top = ranked.first().ok_or_else(|| Error::Input("predictor returned no box".into()))?;
                preds.push(PredictionRecord::new(&r.image_id, top, &r.target));
            }
            let outcomes: Vec<_> = preds.iter().map(PredictionRecord::outcome).collect();
            Ok((summarize(&outcomes, true), preds))
        }
        Records::Pl(records) => {
            let (base, novel) = evaluate_phrases(grounder, records, manifest_path)?;
            Ok((summarize(&[], true).with_recall(Some(base), Some(novel)), Vec::new()))
        }
    }
}

fn evaluate_phrases(grounder: &dyn Grounder, records: &[PLSample], manifest_path: &Path) -> Result<(RecallAtK, RecallAtK)> {
    let mut split: [(Vec<Vec<BBox>>, Vec<Vec<BBox>>); 2] = Default::default();
    for r in records {
        let path = image_path(manifest_path, &r.image_id);
        let (w, h) = image::image_dimensions(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let image = load_for(grounder, manifest_path, &r.image_id)?;
        let bucket = &mut split[usize::from(r.uses_novel)];
        for chunk in &r.chunks {
            let targets = r.chains.get(&chunk.chain_id).cloned().unwrap_or_default();
            let ranked = if targets.is_empty() {
                Vec::new()
            } else {
                grounder.rank(&r.image_id, image.as_ref(), &r.chunk_text(chunk), w as f64, h as f64)?
            };
            bucket.0.push(ranked);
            bucket.1.push(targets);
        }
    }
    let [base, novel] = split;
    Ok((recall_at_k(&base.0, &base.1)?, recall_at_k(&novel.0, &novel.1)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, write_synthetic, SynthConfig};

    #[test]
    fn answer_table_of_ground_truth_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { canvas: 160, min_side: 12, max_side: 120, ..SynthConfig::default() };
        let set = generate_synthetic(30, &cfg, 4);
        let path = write_synthetic(dir.path(), &set).unwrap();
        let oracle = AnswerTable::from_ground_truth(&set.manifest).unwrap();
        let (report, preds) = evaluate_manifest(&oracle, &set.manifest, &path).unwrap();
        assert_eq!(report.acc50, 100.0);
        assert_eq!(preds.len(), 30);
        assert!(preds.iter().all(|p| p.correct && p.iou == 1.0));
    }

    #[test]
    fn missing_answer_is_an_error() {
        let set = generate_synthetic(2, &SynthConfig::default(), 4);
        let table = AnswerTable { boxes: BTreeMap::new() };
        let dir = tempfile::tempdir().unwrap();
        let path = write_synthetic(dir.path(), &set).unwrap();
        assert!(evaluate_manifest(&table, &set.manifest, &path).is_err());
    }
}
