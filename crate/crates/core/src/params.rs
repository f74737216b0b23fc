//! Flat parameter storage shared by the backbone, prompt generators and heads.
//!
//! Every tensor lives in one [`ParamStore`] and is addressed by a [`ParamId`].
//! Tensors are tagged with a [`ParamGroup`]; freezing and optimizer state are
//! expressed in terms of groups.

use std::fmt;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Tvp,
    TextProjection,
    Vrm,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::Tvp,
        ParamGroup::TextProjection,
        ParamGroup::Vrm,
        ParamGroup::Head,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Tvp => "tvp",
            ParamGroup::TextProjection => "text_projection",
            ParamGroup::Vrm => "vrm",
            ParamGroup::Head => "head",
        };
        f.write_str(name)
    }
}

/// Small bitset over [`ParamGroup`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);

    pub fn all() -> Self {
        ParamGroup::ALL.iter().copied().collect()
    }

    pub fn contains(self, group: ParamGroup) -> bool {
        self.0 & group.bit() != 0
    }

    pub fn insert(&mut self, group: ParamGroup) {
        self.0 |= group.bit();
    }

    pub fn iter(self) -> impl Iterator<Item = ParamGroup> {
        ParamGroup::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

impl FromIterator<ParamGroup> for GroupSet {
    fn from_iter<I: IntoIterator<Item = ParamGroup>>(iter: I) -> Self {
        let mut set = GroupSet::EMPTY;
        for g in iter {
            set.insert(g);
        }
        set
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Array2<f64>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn groups_present(&self) -> GroupSet {
        self.params.iter().map(|p| p.group).collect()
    }

    /// SHA-256 over the exact bit patterns of every tensor in `group`.
    pub fn checksum(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            hasher.update(p.name.as_bytes());
            hash_array(&mut hasher, &p.value);
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hash_array(hasher: &mut Sha256, value: &Array2<f64>) {
    hasher.update((value.nrows() as u64).to_le_bytes());
    hasher.update((value.ncols() as u64).to_le_bytes());
    for v in value.iter() {
        hasher.update(v.to_bits().to_le_bytes());
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Uniform on `[-r, r]` with `r = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let denom = (fan_in + fan_out).max(1) as f64;
    let r = (6.0 / denom).sqrt();
    uniform(rng, rows, cols, r)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, r: f64) -> Array2<f64> {
    if r == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Uniform::new_inclusive(-r, r).expect("finite range");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}
