//! Named parameter storage, forward sessions and the basic layers.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained and weight-decayed.
    Weight,
    /// Trained without weight decay (biases, norm affines, embeddings).
    NoDecay,
    /// Persistent state updated outside of gradient descent.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
    /// Projection applied after every optimizer step.
    pub clamp: Option<(f64, f64)>,
}

impl ParamEntry {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            kind,
            clamp: None,
        });
        id
    }

    pub fn set_clamp(&mut self, id: ParamId, lo: f64, hi: f64) {
        self.entries[id.0].clamp = Some((lo, hi));
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
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

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Folds the leaf gradients of a finished session into the store.
    pub fn accumulate_grads(&mut self, rec: &Recorded) {
        for (&id, &v) in &rec.bound {
            if let Some(g) = rec.graph.grad(v) {
                self.entries[id.0].grad.add_assign(g);
            }
        }
    }

    pub fn apply_updates(&mut self, rec: &Recorded) {
        for (id, t) in &rec.updates {
            self.entries[id.0].value = t.clone();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh graph bound to read-only parameters.
pub struct Session<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    mode: Mode,
    track_params: bool,
    bound: HashMap<ParamId, Var>,
    updates: Vec<(ParamId, Tensor)>,
}

/// What a session leaves behind once its forward pass is complete.
pub struct Recorded {
    pub graph: Graph,
    pub bound: HashMap<ParamId, Var>,
    pub updates: Vec<(ParamId, Tensor)>,
}

impl<'s> Session<'s> {
    /// Trainable parameters become differentiable leaves.
    pub fn train(store: &'s ParamStore) -> Self {
        Self::with(store, Mode::Train, true)
    }

    /// Parameters are constants; inputs may still be differentiated.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::with(store, Mode::Eval, false)
    }

    pub fn with(store: &'s ParamStore, mode: Mode, track_params: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            mode,
            track_params,
            bound: HashMap::new(),
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let e = self.store.entry(id);
        let v = if self.track_params && e.trainable() {
            self.g.variable(e.value.clone())
        } else {
            self.g.constant(e.value.clone())
        };
        self.bound.insert(id, v);
        v
    }

    /// Routes every later use of parameter `id` to `v` instead of its stored
    /// value; used to differentiate with respect to a parameter.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    /// Swaps an external graph in or out of the session.
    pub fn swap_graph(&mut self, g: &mut Graph) {
        std::mem::swap(&mut self.g, g);
    }

    /// Queues a buffer overwrite applied by [`ParamStore::apply_updates`].
    pub fn record_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn finish(self) -> Recorded {
        Recorded {
            graph: self.g,
            bound: self.bound,
            updates: self.updates,
        }
    }
}

pub const INIT_STD: f64 = 0.02;

/// Affine map over the last axis, `y = x·W + b` with `W: (in, out)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::trunc_normal(&[in_dim, out_dim], INIT_STD, rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[out_dim]),
                ParamKind::NoDecay,
            )
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let last = *s.g.shape(x).last().unwrap_or(&0);
        if last != self.in_dim {
            return Err(contract(format!(
                "linear expects last extent {}, got {:?}",
                self.in_dim,
                s.g.shape(x)
            )));
        }
        let w = s.param(self.weight);
        let y = if s.g.shape(x).len() == 1 {
            let x2 = s.g.reshape(x, &[1, self.in_dim])?;
            let y2 = s.g.matmul(x2, w)?;
            s.g.reshape(y2, &[self.out_dim])?
        } else {
            s.g.matmul(x, w)?
        };
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::ones(&[dim]),
                ParamKind::NoDecay,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros(&[dim]),
                ParamKind::NoDecay,
            ),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let n = s.g.layer_norm(x, self.eps)?;
        let gm = s.param(self.gamma);
        let bt = s.param(self.beta);
        let y = s.g.mul(n, gm)?;
        s.g.add(y, bt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn session_binds_each_param_once_and_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, true, &mut rng);
        let mut s = Session::train(&store);
        let x = s.g.constant(Tensor::ones(&[4, 3]));
        let y1 = lin.forward(&mut s, x).unwrap();
        let y2 = lin.forward(&mut s, x).unwrap();
        let y = s.g.add(y1, y2).unwrap();
        let l = s.g.sum_all(y).unwrap();
        s.g.backward(l).unwrap();
        let rec = s.finish();
        assert_eq!(rec.bound.len(), 2);
        store.accumulate_grads(&rec);
        // d/db of sum over 4 rows, used twice
        assert_eq!(store.grad(lin.bias.unwrap()).data(), &[8.0, 8.0]);
        // every weight entry sees x = 1 in 4 rows, twice
        assert!(store.grad(lin.weight).data().iter().all(|&g| g == 8.0));
    }

    #[test]
    fn eval_session_params_are_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, true, &mut rng);
        let mut s = Session::eval(&store);
        let x = s.g.variable(Tensor::ones(&[1, 3]));
        let y = lin.forward(&mut s, x).unwrap();
        let w = s.param(lin.weight);
        assert!(!s.g.requires_grad(w));
        assert!(s.g.requires_grad(y));
    }
}
