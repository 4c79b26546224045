use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnState, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Index of a batch-norm running-statistics buffer in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Named trainable tensors plus non-trainable batch-norm buffers, in
/// registration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    buffers: Vec<BnState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_bn(&mut self, cols: usize) -> BufferId {
        self.buffers.push(BnState::new(cols));
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn buffers(&self) -> &[BnState] {
        &self.buffers
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    /// Replaces every tensor and buffer with those of `other`, which must
    /// have the same layout.
    pub fn load_from(&mut self, other: ParamStore) -> Result<()> {
        if other.names != self.names || other.shapes() != self.shapes() {
            return Err(Error::Config("saved parameters do not match the model layout".into()));
        }
        let cols = |b: &[BnState]| b.iter().map(|s| s.running_mean.len()).collect::<Vec<_>>();
        if cols(&other.buffers) != cols(&self.buffers) {
            return Err(Error::Config(
                "saved batch-norm buffers do not match the model layout".into(),
            ));
        }
        *self = other;
        Ok(())
    }

    /// Opens a forward pass: every tensor becomes a `requires_grad` leaf on
    /// `tape`.
    pub fn session<'a>(&'a mut self, tape: &'a mut Tape, training: bool, rng: &'a mut ChaCha8Rng) -> Session<'a> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Session {
            tape,
            params: vars,
            buffers: &mut self.buffers,
            training,
            rng,
        }
    }
}

/// One forward pass: the tape, the leaf bound to each parameter, the
/// batch-norm buffers, the mode flag and the dropout generator.
pub struct Session<'a> {
    pub tape: &'a mut Tape,
    params: Vec<Var>,
    buffers: &'a mut [BnState],
    pub training: bool,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Session<'a> {
    /// Binds caller-made variables as the parameters, in store order.
    pub fn with_vars(
        tape: &'a mut Tape,
        params: Vec<Var>,
        buffers: &'a mut [BnState],
        training: bool,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        Session {
            tape,
            params,
            buffers,
            training,
            rng,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn buffer(&mut self, id: BufferId) -> &mut BnState {
        &mut self.buffers[id.0]
    }

    /// Gradients of every parameter after `tape.backward`, in store order.
    pub fn grads(&self) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|&v| {
                self.tape
                    .grad(v)
                    .cloned()
                    .ok_or_else(|| Error::Backward("parameter gradient missing; run backward first".into()))
            })
            .collect()
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, buffer: BufferId) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        let training = self.training;
        let state = &mut self.buffers[buffer.0];
        self.tape.batch_norm(x, g, b, state, training)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.tape.dropout(x, p, self.training, &mut *self.rng)
    }
}
