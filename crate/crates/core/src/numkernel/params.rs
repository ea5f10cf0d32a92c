use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{KernelError, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step: u64,
    pub trainable: bool,
}

/// Named parameter matrices with gradient buffers and AdamW state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Re-registering an existing name is an error.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId, KernelError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(KernelError::DuplicateParam(name));
        }
        let (r, c) = value.shape();
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.clone(),
            value,
            grad: Matrix::zeros(r, c),
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
            step: 0,
            trainable: true,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId, KernelError> {
        let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, Matrix::new(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, KernelError> {
        self.by_name.get(name).copied().ok_or_else(|| KernelError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn get(&self, name: &str) -> Result<&Matrix, KernelError> {
        Ok(self.value(self.id(name)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Marks exactly the parameters whose name starts with one of `prefixes`
    /// as trainable; everything else is frozen.
    pub fn set_trainable_prefixes(&mut self, prefixes: &[&str]) {
        for e in &mut self.entries {
            e.trainable = prefixes.iter().any(|p| e.name.starts_with(p));
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * grad` into the accumulator of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Matrix, scale: f64) -> Result<(), KernelError> {
        let e = &mut self.entries[id.0];
        if e.grad.shape() != grad.shape() {
            return Err(KernelError::Shape { op: "accumulate_grad", left: e.grad.shape(), right: grad.shape() });
        }
        for (a, b) in e.grad.data_mut().iter_mut().zip(grad.data()) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Resets optimizer moments and step counters.
    pub fn reset_optimizer_state(&mut self) {
        for e in &mut self.entries {
            let (r, c) = e.value.shape();
            e.first_moment = Matrix::zeros(r, c);
            e.second_moment = Matrix::zeros(r, c);
            e.step = 0;
        }
    }

    /// Copies every parameter under `from` to the same suffix under `to`,
    /// creating or overwriting as needed.
    pub fn copy_prefix(&mut self, from: &str, to: &str) -> Result<(), KernelError> {
        let pairs: Vec<(String, Matrix)> = self
            .entries
            .iter()
            .filter(|e| e.name.starts_with(from))
            .map(|e| (format!("{to}{}", &e.name[from.len()..]), e.value.clone()))
            .collect();
        for (name, value) in pairs {
            match self.by_name.get(&name) {
                Some(&id) => self.entries[id.0].value = value,
                None => {
                    self.insert(name, value)?;
                }
            }
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }

    /// Parameters whose names start with `prefix`, in registration order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a ParamEntry> + 'a {
        self.entries.iter().filter(move |e| e.name.starts_with(prefix))
    }
}
