//! Named parameter storage and the per-forward binding session.

use std::collections::BTreeSet;

use crate::tensor::{NormStats, Real, Result, Tape, Tensor, Var, BN_MOMENTUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: String,
    pub value: Tensor<T>,
}

/// Batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub group: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// All trainable tensors and batch-norm buffers of a model, addressed by id
/// and grouped by network (`enc.rgb`, `dec.seg`, `disc`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<RunningStats<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, group: &str, name: String, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name,
            group: group.to_string(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, group: &str, name: String, channels: usize) -> BufferId {
        self.buffers.push(RunningStats {
            name,
            group: group.to_string(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats<T> {
        &self.buffers[id.0]
    }

    pub fn buffers(&self) -> &[RunningStats<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.buffers
    }

    pub fn groups(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.params.iter().map(|p| p.group.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn group_ids(&self, group: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.group == group)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Order-sensitive FNV-1a hash over the bits of a group's parameters and
    /// buffers. Equal checksums mean bitwise-equal values in practice.
    pub fn checksum(&self, group: Option<&str>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: T| {
            let bits = v.to_f64().unwrap_or(f64::NAN).to_bits();
            for b in bits.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        let keep = |g: &str| group.map_or(true, |want| want == g);
        for p in self.params.iter().filter(|p| keep(&p.group)) {
            p.value.data().iter().for_each(|&v| eat(v));
        }
        for b in self.buffers.iter().filter(|b| keep(&b.group)) {
            b.mean.iter().chain(&b.var).for_each(|&v| eat(v));
        }
        h
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// A pending running-statistics update collected during a forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub buffer: BufferId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// One forward computation over a [`ParamStore`].
///
/// Parameters are bound to tape leaves lazily. Groups listed as trainable get
/// gradient-tracking leaves and normalize with batch statistics; every other
/// group is constant and uses its running statistics.
pub struct Session<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: BTreeSet<String>,
    updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Real> Session<'a, T> {
    /// Inference session: nothing trainable, running statistics everywhere.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::training(store, std::iter::empty::<&str>())
    }

    pub fn training<S: AsRef<str>>(store: &'a ParamStore<T>, trainable: impl IntoIterator<Item = S>) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.params.len()],
            trainable: trainable.into_iter().map(|s| s.as_ref().to_string()).collect(),
            updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn is_trainable(&self, group: &str) -> bool {
        self.trainable.contains(group)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let rg = self.trainable.contains(&p.group);
        let v = self.tape.leaf(p.value.clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    /// Tape node bound to `id`, if the forward pass touched it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: BufferId) -> Result<Var> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let buf = &self.store.buffers[stats.0];
        let mode = if self.trainable.contains(&buf.group) {
            NormStats::Batch
        } else {
            NormStats::Fixed {
                mean: buf.mean.clone(),
                var: buf.var.clone(),
            }
        };
        let (y, moments) = self.tape.batch_norm(x, g, b, &mode)?;
        if let Some((mean, var)) = moments {
            self.updates.push(StatUpdate {
                buffer: stats,
                mean,
                var,
            });
        }
        Ok(y)
    }

    pub fn into_parts(self) -> (Tape<T>, Vec<Option<Var>>, Vec<StatUpdate<T>>) {
        (self.tape, self.bound, self.updates)
    }
}

/// Folds collected batch moments into the running statistics, in order.
pub fn apply_stat_updates<T: Real>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>]) {
    let m = T::lit(BN_MOMENTUM);
    let one = T::one();
    for u in updates {
        let buf = &mut store.buffers[u.buffer.0];
        for (r, &b) in buf.mean.iter_mut().zip(&u.mean) {
            *r = m * *r + (one - m) * b;
        }
        for (r, &b) in buf.var.iter_mut().zip(&u.var) {
            *r = m * *r + (one - m) * b;
        }
    }
}

/// Collects a group's gradients from a finished backward pass, in
/// [`ParamStore::group_ids`] order.
pub fn group_grads<'g, T: Real>(
    ids: &[ParamId],
    bound: &[Option<Var>],
    grads: &'g crate::tensor::Gradients<T>,
) -> Vec<Option<&'g [T]>> {
    ids.iter()
        .map(|id| bound[id.0].and_then(|v| grads.get(v)))
        .collect()
}
