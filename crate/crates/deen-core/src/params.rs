//! Named parameter and buffer storage for a model instance.
//!
//! Parameters are plain value buffers between steps; each forward pass binds
//! them into fresh leaf tensors so gradients can be read back afterwards.
//! Buffers (batch-norm running statistics) are updated in place during a
//! training forward pass.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DeenError, Result};
use crate::tensor::Tensor;

pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Rc<RefCell<Vec<f64>>>,
    pub trainable: bool,
    /// SGD momentum state; kept alongside the data so checkpoints restart cleanly.
    pub velocity: RefCell<Vec<f64>>,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, trainable: bool) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n = data.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data: Rc::new(RefCell::new(data)),
            trainable,
            velocity: RefCell::new(vec![0.0; n]),
        });
    }

    pub fn add_param(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        self.insert(name, shape.to_vec(), data, true);
    }

    pub fn add_buffer(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        self.insert(name, shape.to_vec(), data, false);
    }

    /// Kaiming-style normal init: std = sqrt(2 / fan_in).
    pub fn add_conv(&mut self, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| gauss(rng) * std).collect();
        self.insert(name, shape.to_vec(), data, true);
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) {
        let n: usize = shape.iter().product();
        self.insert(name, shape.to_vec(), vec![0.0; n], true);
    }

    /// Scale 1 / shift 0 / running mean 0 / running var 1 for `c` channels.
    pub fn add_batchnorm(&mut self, prefix: &str, c: usize) {
        self.add_param(&format!("{prefix}.gamma"), &[c], vec![1.0; c]);
        self.add_param(&format!("{prefix}.beta"), &[c], vec![0.0; c]);
        self.add_buffer(&format!("{prefix}.running_mean"), &[c], vec![0.0; c]);
        self.add_buffer(&format!("{prefix}.running_var"), &[c], vec![1.0; c]);
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| DeenError::Contract(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<Rc<RefCell<Vec<f64>>>> {
        Ok(self.get(name)?.data.clone())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per normal keeps the stream simple and portable.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Leaf tensors bound from the store for one forward pass, so that the
/// optimizer can pair gradients with store entries afterwards.
pub struct BoundParams {
    pub bound: Vec<(usize, Tensor)>,
}

impl BoundParams {
    pub fn new() -> BoundParams {
        BoundParams { bound: Vec::new() }
    }

    pub fn bind(&mut self, store: &ParamStore, name: &str) -> Result<Tensor> {
        let idx = store
            .entry_index(name)
            .ok_or_else(|| DeenError::Contract(format!("unknown parameter {name}")))?;
        let e = store.entry(idx);
        let t = Tensor::leaf(&e.shape, e.data.borrow().clone())?;
        self.bound.push((idx, t.clone()));
        Ok(t)
    }
}

impl Default for BoundParams {
    fn default() -> Self {
        Self::new()
    }
}
