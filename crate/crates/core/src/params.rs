//! Named parameter storage and the per-forward session that binds
//! parameters onto a fresh tape.

use crate::error::{Error, Result};
use crate::nn::{Mode, RunningStats};
use crate::tensor::{momentum_update, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
}

/// Ordered collection of named arrays: trainable weights plus
/// non-trainable buffers (batch-norm running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Buffer ids holding one batch-norm layer's running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsIds {
    pub mean: ParamId,
    pub var: ParamId,
    pub batches: ParamId,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::invalid(
                "param_store",
                format!("duplicate parameter name `{name}`"),
            ));
        }
        let grad = Tensor::zeros(value.shape())?;
        self.entries.push(Entry {
            name,
            value,
            grad,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
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

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Euclidean norm of all trainable gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales trainable gradients so their joint norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            let f = max_norm / norm;
            for e in self.entries.iter_mut().filter(|e| e.trainable) {
                e.grad.data_mut().iter_mut().for_each(|g| *g *= f);
            }
        }
        norm
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn running_stats(&self, ids: StatsIds) -> RunningStats {
        RunningStats {
            mean: self.value(ids.mean).data().to_vec(),
            var: self.value(ids.var).data().to_vec(),
            batches: self.value(ids.batches).data()[0] as u64,
        }
    }

    pub fn set_running_stats(&mut self, ids: StatsIds, stats: &RunningStats) {
        self.value_mut(ids.mean).data_mut().copy_from_slice(&stats.mean);
        self.value_mut(ids.var).data_mut().copy_from_slice(&stats.var);
        self.value_mut(ids.batches).data_mut()[0] = stats.batches as f64;
    }

    /// Folds a finished session's gradients and statistic updates in.
    pub fn absorb(&mut self, out: SessionOutput) {
        for (id, g) in out.grads {
            self.entries[id.0]
                .grad
                .data_mut()
                .iter_mut()
                .zip(&g)
                .for_each(|(a, v)| *a += v);
        }
        for (ids, stats) in out.stats {
            self.set_running_stats(ids, &stats);
        }
    }

    /// Trainable ids paired with their names, in store order.
    pub fn named_trainable(&self) -> Vec<(ParamId, String)> {
        self.trainable_ids().map(|id| (id, self.name(id).to_string())).collect()
    }
}

/// Momentum SGD over every trainable entry of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        let velocity = store
            .entries
            .iter()
            .map(|e| e.trainable.then(|| vec![0.0; e.value.len()]))
            .collect();
        Self { lr, momentum, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.velocity.len() != store.entries.len() {
            return Err(Error::invalid(
                "sgd",
                format!(
                    "optimizer built for {} entries, store has {}",
                    self.velocity.len(),
                    store.len()
                ),
            ));
        }
        for (e, v) in store.entries.iter_mut().zip(&mut self.velocity) {
            if let Some(v) = v {
                if v.len() != e.value.len() {
                    return Err(Error::shape("sgd", &[v.len()], e.value.shape()));
                }
                momentum_update(e.value.data_mut(), e.grad.data(), v, self.lr, self.momentum);
            }
        }
        Ok(())
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity[id.0].as_deref()
    }
}

/// Gradients and running-statistic updates produced by one session.
#[derive(Debug, Default)]
pub struct SessionOutput {
    pub grads: Vec<(ParamId, Vec<f64>)>,
    pub stats: Vec<(StatsIds, RunningStats)>,
}

/// One define-by-run forward pass over a read-only [`ParamStore`].
///
/// Parameters are copied onto the tape lazily on first use. Batch-norm
/// statistic updates are collected here and applied by
/// [`ParamStore::absorb`], so the store can be shared across threads.
pub struct Session<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    stats: Vec<(StatsIds, RunningStats)>,
    probes: Option<Vec<(&'static str, Var)>>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            stats: Vec::new(),
            probes: None,
        }
    }

    /// Enables recording of intermediate values (attention maps) via
    /// [`Session::probe`].
    pub fn with_probes(mut self) -> Self {
        self.probes = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = self.store.is_trainable(id);
        let v = self.tape.leaf(self.store.value(id).clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    /// Running statistics as seen by this session (including updates made
    /// earlier in the same pass).
    pub(crate) fn running_stats(&self, ids: StatsIds) -> RunningStats {
        self.stats
            .iter()
            .rev()
            .find(|(i, _)| *i == ids)
            .map(|(_, s)| s.clone())
            .unwrap_or_else(|| self.store.running_stats(ids))
    }

    pub(crate) fn record_stats(&mut self, ids: StatsIds, stats: RunningStats) {
        self.stats.push((ids, stats));
    }

    pub fn probe(&mut self, tag: &'static str, v: Var) {
        if let Some(p) = &mut self.probes {
            p.push((tag, v));
        }
    }

    pub fn probes(&self, tag: &str) -> Vec<&Tensor> {
        self.probes
            .iter()
            .flatten()
            .filter(|(t, _)| *t == tag)
            .map(|(_, v)| self.tape.value(*v))
            .collect()
    }

    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.tape.backward(root)
    }

    /// Gradients of every bound trainable parameter plus pending statistic
    /// updates.
    pub fn finish(self) -> SessionOutput {
        let grads = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.tape.grad(v)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect();
        let mut stats: Vec<(StatsIds, RunningStats)> = Vec::new();
        for (ids, s) in self.stats {
            match stats.iter_mut().find(|(i, _)| *i == ids) {
                Some(slot) => slot.1 = s,
                None => stats.push((ids, s)),
            }
        }
        SessionOutput { grads, stats }
    }
}
