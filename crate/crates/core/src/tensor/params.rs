use std::collections::{BTreeMap, HashMap};

use super::{Result, Tensor, TensorError};
use crate::real::Real;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

/// Named, trainable tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, decay });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<F>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameter ids in lexicographic name order, the checkpoint order.
    pub fn sorted_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = (0..self.params.len()).map(ParamId).collect();
        ids.sort_by(|a, b| self.params[a.0].name.cmp(&self.params[b.0].name));
        ids
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Gradient storage for one tensor: dense, or a sparse set of rows for
/// embedding tables where only a few rows are touched per step.
#[derive(Clone, Debug, PartialEq)]
pub enum GradBuf<F> {
    Dense(Vec<F>),
    Rows {
        width: usize,
        rows: BTreeMap<usize, Vec<F>>,
    },
}

impl<F: Real> GradBuf<F> {
    pub fn add_dense(&mut self, g: &[F]) {
        match self {
            GradBuf::Dense(d) => {
                debug_assert_eq!(d.len(), g.len());
                d.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            GradBuf::Rows { width, rows } => {
                let mut d = g.to_vec();
                for (&r, vals) in rows.iter() {
                    d[r * *width..(r + 1) * *width]
                        .iter_mut()
                        .zip(vals)
                        .for_each(|(a, &b)| *a += b);
                }
                *self = GradBuf::Dense(d);
            }
        }
    }

    /// Adds `scale * g` to row `row`.
    pub fn add_row(&mut self, row: usize, scale: F, g: &[F]) {
        match self {
            GradBuf::Dense(d) => {
                let w = g.len();
                d[row * w..(row + 1) * w]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &b)| *a += scale * b);
            }
            GradBuf::Rows { width, rows } => {
                debug_assert_eq!(*width, g.len());
                let r = rows.entry(row).or_insert_with(|| vec![F::zero(); g.len()]);
                r.iter_mut().zip(g).for_each(|(a, &b)| *a += scale * b);
            }
        }
    }

    pub fn add(&mut self, other: &GradBuf<F>) {
        match other {
            GradBuf::Dense(g) => self.add_dense(g),
            GradBuf::Rows { rows, .. } => {
                for (&r, vals) in rows {
                    self.add_row(r, F::one(), vals);
                }
            }
        }
    }

    pub fn scale(&mut self, c: F) {
        match self {
            GradBuf::Dense(d) => d.iter_mut().for_each(|v| *v *= c),
            GradBuf::Rows { rows, .. } => rows
                .values_mut()
                .flat_map(|r| r.iter_mut())
                .for_each(|v| *v *= c),
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<F> {
        match self {
            GradBuf::Dense(d) => d.clone(),
            GradBuf::Rows { width, rows } => {
                let mut d = vec![F::zero(); len];
                for (&r, vals) in rows {
                    d[r * width..(r + 1) * width].copy_from_slice(vals);
                }
                d
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            GradBuf::Dense(d) => d.iter().all(|v| v.is_finite()),
            GradBuf::Rows { rows, .. } => rows.values().flatten().all(|v| v.is_finite()),
        }
    }
}

/// Accumulated parameter gradients. Backward adds into this; call
/// [`Gradients::zero`] to reset.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    bufs: Vec<Option<GradBuf<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn for_store(store: &ParamStore<F>) -> Self {
        Self {
            bufs: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&GradBuf<F>> {
        self.bufs.get(id.0).and_then(Option::as_ref)
    }

    /// Dense gradient of `id`, zeros when the parameter was unreachable.
    pub fn dense(&self, id: ParamId, len: usize) -> Vec<F> {
        self.get(id)
            .map_or_else(|| vec![F::zero(); len], |g| g.to_dense(len))
    }

    pub(crate) fn slot(&mut self, id: ParamId) -> &mut Option<GradBuf<F>> {
        if self.bufs.len() <= id.0 {
            self.bufs.resize(id.0 + 1, None);
        }
        &mut self.bufs[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &GradBuf<F>) {
        match self.slot(id) {
            Some(existing) => existing.add(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn zero(&mut self) {
        self.bufs.iter_mut().for_each(|b| *b = None);
    }

    pub fn scale(&mut self, c: F) {
        self.bufs.iter_mut().flatten().for_each(|b| b.scale(c));
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &GradBuf<F>)> {
        self.bufs
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_ref().map(|b| (ParamId(i), b)))
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(GradBuf::is_finite)
    }
}
