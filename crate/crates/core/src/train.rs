//! Optimizer and training loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, ParamStore};
use crate::backbone::{ImageTensor, Vocab};
use crate::config::ModelConfig;
use crate::data::{image_path, load_image, DatasetManifest};
use crate::error::{Error, Result};
use crate::losses::{tape_object_to_text, LossBreakdown};
use crate::metrics::EvalReport;
use crate::model::GroundingModel;
use crate::types::{bbox_to_norm, BBox, NormBox};

/// Mixed into the seed of the sample-order stream.
const ORDER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store.ids().map(|id| Mat::zeros(store.get(id).dim())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p -= self.lr * (update + self.weight_decay * *p);
            });
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// A grounding record with its image already loaded and resized.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image_id: String,
    pub image: ImageTensor,
    pub expression: String,
    pub target: NormBox,
    pub gt: BBox,
    pub width: f64,
    pub height: f64,
}

/// Load every grounding record of a manifest together with its image.
pub fn load_samples(manifest: &DatasetManifest, manifest_path: &Path, image_size: usize) -> Result<Vec<TrainSample>> {
    let records = manifest
        .grounding()
        .ok_or_else(|| Error::Input("training needs a grounding (vg) manifest".into()))?;
    records
        .iter()
        .map(|r| {
            let (w, h) = (r.image_width as f64, r.image_height as f64);
            Ok(TrainSample {
                image_id: r.image_id.clone(),
                image: load_image(&image_path(manifest_path, &r.image_id), image_size)?,
                expression: r.expression.clone(),
                target: bbox_to_norm(&r.target, w, h)?,
                gt: r.target,
                width: w,
                height: h,
            })
        })
        .collect()
}

/// Vocabulary over every expression of a grounding manifest.
pub fn build_vocab(manifest: &DatasetManifest) -> Vocab {
    match manifest.grounding() {
        Some(r) => Vocab::build(r.iter().map(|s| s.expression.as_str())),
        None => Vocab::build(manifest.phrases().unwrap_or(&[]).iter().map(|s| s.sentence.as_str())),
    }
}

/// Everything needed to reproduce and judge a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ModelConfig,
    pub seed: u64,
    /// Mean batch loss after each optimizer step.
    pub losses: Vec<f64>,
    pub components: Vec<LossBreakdown>,
    /// Training-set evaluation after the final step.
    pub report: EvalReport,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// One `step loss` line per step, losses printed in shortest round-trip form.
    pub fn loss_log(&self) -> String {
        self.losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{} {l}\n", i + 1))
            .collect()
    }
}

pub struct Trainer {
    pub model: GroundingModel,
    pub optimizer: AdamW,
    order_rng: ChaCha8Rng,
    queue: Vec<usize>,
}

impl Trainer {
    pub fn new(model: GroundingModel) -> Self {
        let optimizer = AdamW::new(&model.store, model.cfg.learning_rate, model.cfg.weight_decay);
        // sample order has its own stream so it does not depend on how many draws initialization made
        let order_rng = ChaCha8Rng::seed_from_u64(model.cfg.seed ^ ORDER_STREAM);
        Trainer {
            model,
            optimizer,
            order_rng,
            queue: Vec::new(),
        }
    }

    /// Next `batch` sample indices, reshuffling once per pass over the data.
    fn next_batch(&mut self, n: usize, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.queue.is_empty() {
                self.queue = (0..n).collect();
                self.queue.shuffle(&mut self.order_rng);
                self.queue.reverse();
            }
            out.push(self.queue.pop().expect("refilled"));
        }
        out
    }

    /// One optimizer step on the given samples. Returns the mean batch loss.
    pub fn step(&mut self, samples: &[&TrainSample]) -> Result<LossBreakdown> {
        let model = &self.model;
        let mut g = Graph::new(&model.store);
        let mut losses = Vec::with_capacity(samples.len());
        let mut texts = Vec::with_capacity(samples.len());
        let mut positives = Vec::with_capacity(samples.len());
        let mut parts = LossBreakdown::default();
        for s in samples {
            let pass = model.forward(&mut g, &s.image, &s.expression)?;
            let l = model.sample_loss(&mut g, &pass, &s.target)?;
            losses.push(l.total);
            texts.push(l.text);
            positives.push(l.positive);
            parts.giou += l.parts.giou;
            parts.l1 += l.parts.l1;
            parts.contrastive += l.parts.contrastive;
        }
        let scale = 1.0 / samples.len() as f64;
        let stacked = g.concat_rows(&losses);
        let sum = g.sum_all(stacked);
        let mut total = g.scale(sum, scale);
        if model.cfg.symmetric_contrastive {
            let objs = g.concat_rows(&positives);
            let txts = g.concat_rows(&texts);
            let back = tape_object_to_text(&mut g, objs, txts, model.cfg.temperature)?;
            parts.contrastive += g.scalar(back) * samples.len() as f64;
            let weighted = g.scale(back, model.cfg.lambda_cts);
            total = g.add(total, weighted);
        }
        let breakdown = LossBreakdown {
            giou: parts.giou * scale,
            l1: parts.l1 * scale,
            contrastive: parts.contrastive * scale,
            total: g.scalar(total),
        };
        if !breakdown.total.is_finite() {
            return Err(Error::Input(format!("non-finite loss {breakdown:?}")));
        }
        let mut grads = g.backward(total).into_param_grads(&model.store);
        drop(g);
        clip_grad_norm(&mut grads, self.model.cfg.grad_clip);
        self.optimizer.step(&mut self.model.store, &grads);
        Ok(breakdown)
    }

    /// Run `steps` optimizer steps over `samples`. `on_step` sees each step's
    /// 1-based index and loss and may return `false` to stop early.
    pub fn fit(
        &mut self,
        samples: &[TrainSample],
        steps: usize,
        mut on_step: impl FnMut(&Trainer, usize, &LossBreakdown) -> bool,
    ) -> Result<Vec<LossBreakdown>> {
        if samples.is_empty() {
            return Err(Error::Input("no training samples".into()));
        }
        let batch = self.model.cfg.batch_size.max(1);
        let mut log = Vec::with_capacity(steps);
        for step in 1..=steps {
            let idx = self.next_batch(samples.len(), batch);
            let picked: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
            self.optimizer.lr = self.model.cfg.lr_at(step);
            let l = self.step(&picked)?;
            log.push(l);
            if !on_step(self, step, &l) {
                break;
            }
        }
        Ok(log)
    }
}

/// Train on a manifest and evaluate on the same samples.
pub fn train_on(
    cfg: &ModelConfig,
    manifest: &DatasetManifest,
    manifest_path: &Path,
    steps: usize,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<(GroundingModel, RunRecord)> {
    let start = Instant::now();
    let samples = load_samples(manifest, manifest_path, cfg.image_size)?;
    let model = GroundingModel::new(cfg, build_vocab(manifest))?;
    let mut trainer = Trainer::new(model);
    let log = trainer.fit(&samples, steps, |_, s, l| {
        on_step(s, l);
        true
    })?;
    let report = crate::eval::evaluate_samples(&trainer.model, &samples)?.0;
    let record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        losses: log.iter().map(|l| l.total).collect(),
        components: log,
        report,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((trainer.model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Mat::from_elem((1, 2), 1.0));
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store, &[Mat::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap()]);
        let p = store.get(id);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((p[[0, 1]] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.add("p", Mat::from_elem((1, 1), 2.0));
        let mut opt = AdamW::new(&store, 0.1, 0.5);
        opt.step(&mut store, &[Mat::zeros((1, 1))]);
        // zero gradient: only the decay term acts
        assert!((store.get(id)[[0, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", Mat::from_elem((1, 3), 5.0));
        let mut opt = AdamW::new(&store, 0.05, 0.0);
        for _ in 0..2000 {
            let g = store.get(id).mapv(|v| 2.0 * (v - 1.5));
            opt.step(&mut store, &[g]);
        }
        assert!(store.get(id).iter().all(|v| (v - 1.5).abs() < 1e-3));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Mat::from_elem((1, 1), 3.0), Mat::from_elem((1, 1), 4.0)];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-12 && (g[1][[0, 0]] - 0.8).abs() < 1e-12);
        let mut h = vec![Mat::from_elem((1, 1), 0.3)];
        clip_grad_norm(&mut h, 1.0);
        assert_eq!(h[0][[0, 0]], 0.3);
    }
}
