//! Named parameter storage and the small layer vocabulary built on the tape.
//!
//! Every learnable tensor lives in a [`ParamPool`] under a unique dotted name
//! so checkpoints are self-describing and the optimizer can walk parameters
//! uniformly. Layers hold lightweight [`Param`] handles; a [`Forward`] binds
//! handles to tape leaves lazily, once per tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Handle to one named tensor in a [`ParamPool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Param(usize);

#[derive(Debug, Default)]
pub struct ParamPool {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Param {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        Param(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, p: Param) -> &str {
        &self.names[p.0]
    }

    pub fn value(&self, p: Param) -> &Tensor {
        &self.values[p.0]
    }

    pub fn value_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.values[p.0]
    }

    pub fn params(&self) -> impl Iterator<Item = Param> {
        (0..self.values.len()).map(Param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn lookup(&self, name: &str) -> Option<Param> {
        self.index.get(name).copied().map(Param)
    }

    /// Replace every tensor from a name -> tensor map, checking shapes.
    /// Unknown and missing names are errors so stale checkpoints fail loudly.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                self.values.len()
            )));
        }
        for (name, tensor) in entries {
            let p = self
                .lookup(name)
                .ok_or_else(|| Error::Data(format!("unknown parameter `{name}` in checkpoint")))?;
            let expected = self.values[p.0].shape();
            if tensor.shape() != expected {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected,
                    got: tensor.shape(),
                });
            }
            self.values[p.0] = tensor.clone();
        }
        Ok(())
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// One forward pass: a tape plus the lazy binding of pool parameters to leaves.
pub struct Forward<'a> {
    pub tape: Tape,
    pool: &'a ParamPool,
    bound: Vec<Option<NodeId>>,
}

impl<'a> Forward<'a> {
    pub fn new(pool: &'a ParamPool) -> Self {
        Forward {
            tape: Tape::new(),
            pool,
            bound: vec![None; pool.len()],
        }
    }

    pub fn pool(&self) -> &ParamPool {
        self.pool
    }

    /// Tape leaf for a parameter, created on first use.
    pub fn param(&mut self, p: Param) -> NodeId {
        if let Some(id) = self.bound[p.0] {
            return id;
        }
        let id = self.tape.leaf(self.pool.value(p).clone());
        self.bound[p.0] = Some(id);
        id
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.tape.leaf(t)
    }

    /// Gradient of a scalar root for every bound parameter.
    pub fn param_grads(&self, root: NodeId) -> Vec<(Param, Tensor)> {
        let grads = self.tape.backward(root);
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, bound)| bound.map(|node| (Param(i), grads[node].clone())))
            .collect()
    }
}

/// Uniform init scaled by fan-in; biases start at zero.
fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_data(rows, cols, data)
}

/// Dense map `y = Wx (+ b)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        pool: &mut ParamPool,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = pool.register(&format!("{name}.w"), init_weight(rng, out_dim, in_dim));
        let b = bias.then(|| pool.register(&format!("{name}.b"), Tensor::zeros(out_dim, 1)));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, fw: &mut Forward, x: NodeId) -> NodeId {
        assert_eq!(
            fw.tape.value(x).rows(),
            self.in_dim,
            "linear input dim mismatch"
        );
        let w = fw.param(self.w);
        let y = fw.tape.matvec(w, x);
        match self.b {
            Some(b) => {
                let b = fw.param(b);
                fw.tape.add(y, b)
            }
            None => y,
        }
    }

    /// Value-level application, for inference helpers that skip the tape.
    pub fn apply_value(&self, pool: &ParamPool, x: &Tensor) -> Tensor {
        let mut y = pool.value(self.w).matvec(x);
        if let Some(b) = self.b {
            y.add_assign(pool.value(b));
        }
        y
    }
}

/// Layer normalization with learnable gain (init 1) and bias (init 0).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(pool: &mut ParamPool, name: &str, dim: usize) -> Self {
        let gain = pool.register(
            &format!("{name}.gain"),
            Tensor::from_data(dim, 1, vec![1.0; dim]),
        );
        let bias = pool.register(&format!("{name}.bias"), Tensor::zeros(dim, 1));
        LayerNorm { gain, bias, dim }
    }

    pub fn apply(&self, fw: &mut Forward, x: NodeId) -> NodeId {
        let gain = fw.param(self.gain);
        let bias = fw.param(self.bias);
        fw.tape.layer_norm(x, gain, bias)
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        pool: &mut ParamPool,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
    ) -> Self {
        Mlp {
            hidden: Linear::new(pool, rng, &format!("{name}.hidden"), in_dim, hidden_dim, true),
            out: Linear::new(pool, rng, &format!("{name}.out"), hidden_dim, out_dim, true),
        }
    }

    pub fn apply(&self, fw: &mut Forward, x: NodeId) -> NodeId {
        let h = self.hidden.apply(fw, x);
        let h = fw.tape.relu(h);
        self.out.apply(fw, h)
    }
}
