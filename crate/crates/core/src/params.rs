//! Parameter storage, grouping and checksums.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Training partition. The locator group holds the cross-modal encoder and the
/// proposal-scoring fusion; alternating training freezes one side at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Locator,
    Answerer,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Encoder, ParamGroup::Locator, ParamGroup::Answerer];

    pub fn is_locator(self) -> bool {
        self == ParamGroup::Locator
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        self.add(name, group, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn group_scalar_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names and raw bit patterns of every parameter in `group`.
    pub fn checksum(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            hasher.update(p.name.as_bytes());
            for v in p.value.as_slice() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    pub fn checksums(&self) -> GroupChecksums {
        GroupChecksums {
            encoder: self.checksum(ParamGroup::Encoder),
            locator: self.checksum(ParamGroup::Locator),
            answerer: self.checksum(ParamGroup::Answerer),
        }
    }

    /// True when both stores have the same names, groups and shapes in order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name && a.group == b.group && a.value.shape() == b.value.shape()
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupChecksums {
    pub encoder: String,
    pub locator: String,
    pub answerer: String,
}

impl GroupChecksums {
    pub fn get(&self, group: ParamGroup) -> &str {
        match group {
            ParamGroup::Encoder => &self.encoder,
            ParamGroup::Locator => &self.locator,
            ParamGroup::Answerer => &self.answerer,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub(crate) grads: Vec<Matrix>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }

    /// Zero every buffer whose parameter belongs to a group rejected by `keep`.
    pub fn retain_groups(&mut self, store: &ParamStore, keep: impl Fn(ParamGroup) -> bool) {
        for (g, p) in self.grads.iter_mut().zip(&store.params) {
            if !keep(p.group) {
                g.as_mut_slice().fill(0.0);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Matrix::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_bit_changes_per_group() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Encoder, Matrix::filled(2, 2, 1.0));
        store.add("b", ParamGroup::Locator, Matrix::filled(1, 3, 2.0));
        let before = store.checksums();
        store.get_mut(a).set(0, 0, 1.0 + f64::EPSILON);
        let after = store.checksums();
        assert_ne!(before.encoder, after.encoder);
        assert_eq!(before.locator, after.locator);
        assert_eq!(before.answerer, after.answerer);
    }

    #[test]
    fn retain_groups_zeroes_the_rest() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Encoder, Matrix::zeros(1, 2));
        let b = store.add("b", ParamGroup::Locator, Matrix::zeros(1, 2));
        let mut g = Grads::zeros_like(&store);
        g.get_mut(a).as_mut_slice().fill(1.0);
        g.get_mut(b).as_mut_slice().fill(1.0);
        g.retain_groups(&store, ParamGroup::is_locator);
        assert_eq!(g.get(a).sum(), 0.0);
        assert_eq!(g.get(b).sum(), 2.0);
    }
}
