use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, BnState, Tape, Tensor, Var};
use crate::error::Result;

/// Named parameter tensors of one network, in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub(crate) fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        Self { names, tensors }
    }
}

/// Running batch-norm moments of a network, one entry per normalization layer.
pub enum NormStates<'a> {
    Train(&'a mut [BnState]),
    Eval(&'a [BnState]),
}

impl NormStates<'_> {
    fn mode(&mut self, idx: usize) -> BnMode<'_> {
        match self {
            NormStates::Train(s) => BnMode::Train(&mut s[idx]),
            NormStates::Eval(s) => BnMode::Eval(&s[idx]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    padding: usize,
}

impl Conv {
    /// He-uniform kernel, zero bias.
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..c_out * c_in * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let kernel = Tensor::new(vec![c_out, c_in, k, k], data).expect("kernel shape");
        let w = store.push(format!("{name}.weight"), kernel);
        let b = store.push(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Self {
            w,
            b,
            stride,
            padding: k / 2,
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.w], p[self.b], self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    gamma: usize,
    beta: usize,
    state: usize,
}

impl Norm {
    pub(crate) fn new(store: &mut ParamStore, states: &mut Vec<BnState>, name: &str, c: usize) -> Self {
        let gamma = store.push(format!("{name}.gamma"), Tensor::full(vec![c], 1.0));
        let beta = store.push(format!("{name}.beta"), Tensor::zeros(vec![c]));
        states.push(BnState::new(c));
        Self {
            gamma,
            beta,
            state: states.len() - 1,
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, p: &[Var], x: Var, states: &mut NormStates<'_>) -> Result<Var> {
        tape.batch_norm(x, p[self.gamma], p[self.beta], states.mode(self.state))
    }
}
