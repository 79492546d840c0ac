use crate::error::{contract_err, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters still take part in the forward pass but never
    /// receive gradients and are excluded from the trainable count.
    pub trainable: bool,
}

/// Owns every named parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Trainable scalar count of parameters whose name starts with `prefix`.
    pub fn count_trainable_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(len: usize) -> Self {
        ParamGrads { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }

    /// Element-wise sum with another shard's gradients.
    pub fn accumulate(&mut self, other: ParamGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => {
                    for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: Scalar) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> Scalar {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<Scalar>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the old norm.
    pub fn clip_global_norm(&mut self, max_norm: Scalar) -> Scalar {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Session<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'p> Session<'p> {
    /// `training` enables dropout; `track_grads` registers trainable
    /// parameters as gradient-requiring leaves.
    pub fn new(store: &'p ParamStore, training: bool, track_grads: bool, rng: ChaCha8Rng) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track_grads,
            training,
            rng,
        }
    }

    /// Inference session: no dropout, no gradients.
    pub fn eval(store: &'p ParamStore) -> Self {
        use rand::SeedableRng;
        Self::new(store, false, false, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Tape variable for a parameter, registering it on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), self.track_grads && p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Runs backward from `loss` and collects gradients per parameter.
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads> {
        if !self.track_grads {
            return Err(contract_err!("backward on a session created without gradient tracking"));
        }
        let mut grads: Gradients = self.tape.backward(loss)?;
        let per_param = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect();
        Ok(ParamGrads { grads: per_param })
    }

    /// Uniform sample in `[0, 1)` from the session stream.
    pub(crate) fn uniform(&mut self) -> Scalar {
        self.rng.random::<f64>() as Scalar
    }
}
