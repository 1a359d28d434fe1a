//! Parameter storage and the small set of layers the models are built from.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.tensors.push(value);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            bail!(
                Dimension,
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            );
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

impl Tape {
    /// A tape whose first `store.len()` nodes are the parameters, in order.
    pub fn with_params(store: &ParamStore, requires_grad: bool) -> Self {
        let mut tape = Tape::new();
        for t in &store.tensors {
            tape.leaf(t.clone(), requires_grad);
        }
        tape
    }

    /// Node holding parameter `id`; only valid on tapes from [`Tape::with_params`].
    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.len(), "tape was not built from this parameter store");
        Var(id.0)
    }
}

pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-bound, bound)).collect()).expect("finite init")
}

/// Affine map `x W + b` over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / libm::sqrt(d_in as f64);
        let weight = store.add(
            alloc::format!("{name}.weight"),
            uniform_tensor(&[d_in, d_out], bound, rng),
        );
        let bias = store.add(alloc::format!("{name}.bias"), uniform_tensor(&[d_out], bound, rng));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.set(self.weight, Tensor::zeros([self.d_in, self.d_out])).unwrap();
        store.set(self.bias, Tensor::zeros([self.d_out])).unwrap();
    }

    /// Applies the map to a `[n, d_in]` matrix.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.param(self.weight))?;
        tape.add_bias(y, tape.param(self.bias))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(alloc::format!("{name}.gain"), Tensor::full([d], 1.0));
        let bias = store.add(alloc::format!("{name}.bias"), Tensor::zeros([d]));
        Self { gain, bias, eps: 1e-6 }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, tape.param(self.gain), tape.param(self.bias), self.eps)
    }
}

/// Two linear maps with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &alloc::format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &alloc::format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_kv: usize,
        heads: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            bail!(Config, "{name}: width {d_model} not divisible into {heads} heads");
        }
        Ok(Self {
            q: Linear::new(store, &alloc::format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &alloc::format!("{name}.k"), d_kv, d_model, rng),
            v: Linear::new(store, &alloc::format!("{name}.v"), d_kv, d_model, rng),
            o: Linear::new(store, &alloc::format!("{name}.o"), d_model, d_model, rng),
            heads,
        })
    }

    /// `x` is `[n, d_model]`, `kv` is `[m, d_kv]`; returns `[n, d_model]`.
    ///
    /// When `weights` is given, the `[n, m]` attention matrix of every head is
    /// appended to it.
    pub fn forward(&self, tape: &mut Tape, x: Var, kv: Var, weights: Option<&mut Vec<Var>>) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, kv)?;
        let v = self.v.forward(tape, kv)?;
        let mixed = if weights.is_none() && ![q, k, v].iter().any(|&n| tape.requires_grad(n)) {
            // Nothing downstream needs the intermediates: run the heads on a
            // scratch tape and keep only their output.
            let mut scratch = Tape::new();
            let (sq, sk, sv) = (
                scratch.constant(tape.value(q).clone()),
                scratch.constant(tape.value(k).clone()),
                scratch.constant(tape.value(v).clone()),
            );
            let out = self.heads_forward(&mut scratch, sq, sk, sv, None)?;
            tape.constant(scratch.value(out).clone())
        } else {
            self.heads_forward(tape, q, k, v, weights)?
        };
        self.o.forward(tape, mixed)
    }

    fn heads_forward(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        mut weights: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let d = tape.shape(q)[1];
        let dh = d / self.heads;
        let kt = tape.transpose(k)?;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(kt, 0, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let scores = tape.matmul(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let p = tape.softmax_rows(scores)?;
            if let Some(w) = weights.as_deref_mut() {
                w.push(p);
            }
            outs.push(tape.matmul(p, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat(&outs, 1)
        }
    }
}
