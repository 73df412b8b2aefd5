use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Panics on a duplicate name, which is a wiring bug.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_archive(&self) -> Vec<NamedParam> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| NamedParam {
                name: name.clone(),
                shape: [v.nrows(), v.ncols()],
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrite every parameter from an archive; names and shapes must match exactly.
    pub fn load_archive(&mut self, archive: &[NamedParam]) -> Result<()> {
        if archive.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model expects {}",
                archive.len(),
                self.len()
            )));
        }
        for p in archive {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {}", p.name)))?;
            let cur = &self.values[id.0];
            if [cur.nrows(), cur.ncols()] != p.shape || p.data.len() != cur.len() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    p.shape,
                    [cur.nrows(), cur.ncols()]
                )));
            }
            self.values[id.0] = Mat::from_shape_vec((p.shape[0], p.shape[1]), p.data.clone())
                .expect("shape checked above");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Glorot-uniform matrix of shape `(fan_in, fan_out)`.
pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(fan_in, fan_out, bound, rng)
}

pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Mat {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Mat::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}
