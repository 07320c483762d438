//! The interface shared by every trainable continuous field.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub len: usize,
}

/// Locates the group owning flat parameter index `i`.
pub fn group_of(groups: &[ParamGroup], i: usize) -> Option<&str> {
    let mut start = 0;
    for g in groups {
        if i < start + g.len {
            return Some(&g.name);
        }
        start += g.len;
    }
    None
}

/// A set of field queries `(coordinate, time)` sharing coordinates and times.
///
/// Queries are also indexed by coordinate so models whose spatial part is
/// time-independent evaluate it once per distinct coordinate.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub coords: Vec<[f64; 2]>,
    pub times: Vec<f64>,
    pub pairs: Vec<(u32, u32)>,
    /// CSR offsets into `by_coord` per coordinate.
    coord_offsets: Vec<usize>,
    /// `(pair index, time index)` sorted by coordinate.
    by_coord: Vec<(u32, u32)>,
}

impl QuerySet {
    pub fn new(coords: Vec<[f64; 2]>, times: Vec<f64>, pairs: Vec<(u32, u32)>) -> Result<Self> {
        let mut counts = vec![0usize; coords.len() + 1];
        for &(c, t) in &pairs {
            if c as usize >= coords.len() || t as usize >= times.len() {
                return Err(Error::Shape(format!(
                    "query ({c}, {t}) out of range for {} coordinates and {} times",
                    coords.len(),
                    times.len()
                )));
            }
            counts[c as usize + 1] += 1;
        }
        if coords.iter().flatten().chain(&times).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query coordinates or times".into()));
        }
        for i in 0..coords.len() {
            counts[i + 1] += counts[i];
        }
        let coord_offsets = counts.clone();
        let mut fill = counts;
        let mut by_coord = vec![(0u32, 0u32); pairs.len()];
        for (pi, &(c, t)) in pairs.iter().enumerate() {
            let slot = &mut fill[c as usize];
            by_coord[*slot] = (pi as u32, t);
            *slot += 1;
        }
        Ok(Self {
            coords,
            times,
            pairs,
            coord_offsets,
            by_coord,
        })
    }

    /// Every coordinate at every time, time-major: pair index `t * n + c`.
    pub fn dense(coords: Vec<[f64; 2]>, times: Vec<f64>) -> Result<Self> {
        let n = coords.len() as u32;
        let pairs = (0..times.len() as u32)
            .flat_map(|t| (0..n).map(move |c| (c, t)))
            .collect();
        Self::new(coords, times, pairs)
    }

    /// Builds a query set from raw `(x, y, t)` triples, deduplicating
    /// coordinates and times by exact bit pattern.
    pub fn from_points(points: impl IntoIterator<Item = (f64, f64, f64)>) -> Result<Self> {
        use std::collections::HashMap;
        let mut coord_index: HashMap<(u64, u64), u32> = HashMap::new();
        let mut time_index: HashMap<u64, u32> = HashMap::new();
        let mut coords = Vec::new();
        let mut times = Vec::new();
        let mut pairs = Vec::new();
        for (x, y, t) in points {
            let c = *coord_index.entry((x.to_bits(), y.to_bits())).or_insert_with(|| {
                coords.push([x, y]);
                (coords.len() - 1) as u32
            });
            let ti = *time_index.entry(t.to_bits()).or_insert_with(|| {
                times.push(t);
                (times.len() - 1) as u32
            });
            pairs.push((c, ti));
        }
        Self::new(coords, times, pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Queries at coordinate `c` as `(pair index, time index)`.
    pub fn at_coord(&self, c: usize) -> &[(u32, u32)] {
        &self.by_coord[self.coord_offsets[c]..self.coord_offsets[c + 1]]
    }
}

/// A differentiable real field over normalized space and physical time.
pub trait FieldModel: Clone + Send + Sync {
    type Cache: Send + Sync;

    fn param_groups(&self) -> Vec<ParamGroup>;

    fn num_params(&self) -> usize {
        self.param_groups().iter().map(|g| g.len).sum()
    }

    fn flat_params(&self) -> Vec<f64>;

    fn set_flat_params(&mut self, params: &[f64]) -> Result<()>;

    /// Field values for every pair of `q`, plus whatever the reverse pass needs.
    fn predict(&self, q: &QuerySet) -> Result<(Vec<f64>, Self::Cache)>;

    /// Flat gradient of `Σ_i dpred[i] · pred[i]`.
    fn gradient(&self, q: &QuerySet, cache: &Self::Cache, dpred: &[f64]) -> Result<Vec<f64>>;
}
