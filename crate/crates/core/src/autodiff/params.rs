use ndarray::Array2;

/// Index of a trainable array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub value: Array2<f64>,
}

/// Named, ordered collection of trainable 2-D arrays.
///
/// Slot order is insertion order and is part of the checkpoint contract.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: Vec<ParamSlot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.slots.push(ParamSlot {
            name: name.into(),
            value,
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.slots[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [ParamSlot] {
        &mut self.slots
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Zero-filled gradient buffers shaped like every slot.
    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            grads: self
                .slots
                .iter()
                .map(|s| Array2::zeros(s.value.raw_dim()))
                .collect(),
        }
    }
}

/// Per-slot gradient arrays, index-aligned with the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += other`, slot by slot.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}
