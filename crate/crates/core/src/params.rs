//! Named parameter storage and initialization.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly declared parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation, resampled outside two sigma.
    TruncNormal(f64),
    /// Normal with standard deviation `sqrt(2 / fan_out)`.
    FanOut(usize),
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub value: Mat,
}

/// All parameters of a model, addressable by canonical path strings.
///
/// A store created with [`ParamStore::shapes_only`] records names and shapes
/// without allocating values, which is what parameter counting uses.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    rng: ChaCha8Rng,
    materialize: bool,
    trainable: bool,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            materialize: true,
            trainable: true,
        }
    }

    pub fn shapes_only() -> Self {
        Self { materialize: false, ..Self::new(0) }
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: (usize, usize), init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let value = if self.materialize { self.sample(shape, init) } else { Mat::zeros((0, 0)) };
        self.entries.push(ParamEntry { name, shape, value });
        ParamId(self.entries.len() - 1)
    }

    fn sample(&mut self, shape: (usize, usize), init: Init) -> Mat {
        match init {
            Init::Zeros => Array2::zeros(shape),
            Init::Ones => Array2::ones(shape),
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, 1.0).expect("valid normal");
                Array2::from_shape_simple_fn(shape, || loop {
                    let z: f64 = normal.sample(&mut self.rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
            }
            Init::FanOut(fan_out) => {
                let std = (2.0 / fan_out.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid normal");
                Array2::from_shape_simple_fn(shape, || normal.sample(&mut self.rng))
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.shape.0 * e.shape.1).sum()
    }

    /// Parameter total over entries whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.shape.0 * e.shape.1)
            .sum()
    }

    /// Whether tape leaves created from this store track gradients.
    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Fills every parameter whose name contains `pattern` with `value`.
    pub fn fill_matching(&mut self, pattern: &str, value: f64) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.contains(pattern)) {
            e.value.fill(value);
            n += 1;
        }
        n
    }

    /// Adds small deterministic noise to every entry (used to move tests off
    /// degenerate initializations such as all-zero biases).
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &mut self.entries {
            e.value.mapv_inplace(|v| v + scale * (rng.random::<f64>() - 0.5));
        }
    }
}
