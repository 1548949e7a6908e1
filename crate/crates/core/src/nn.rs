//! Layers built from tape primitives: dense, MLP, LSTM, bidirectional LSTM
//! and embedding tables.
//!
//! Initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero, LSTM
//! forget-gate bias `+1`, embedding rows standard normal.

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            input,
            output,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.insert(&self.weight, uniform(rng, &[self.input, self.output], self.input));
        store.insert(&self.bias, Tensor::zeros(&[self.output]));
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.input {
            return Err(Error::dim(
                format!("layer `{}`", self.weight),
                format!("input width {width}, expected {}", self.input),
            ));
        }
        let w = tape.param(store, &self.weight)?;
        let b = tape.param(store, &self.bias)?;
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }
}

/// Stack of dense layers with the activation applied after every layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes = [input, hidden_1, ..., hidden_n]`.
    pub fn new(prefix: &str, sizes: &[usize], activation: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{prefix}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers, activation }
    }

    pub fn input(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            let z = l.forward(tape, store, h)?;
            h = self.activation.apply(tape, z);
        }
        Ok(h)
    }
}

/// Single-direction LSTM. Gate layout along the `4 * cell` axis is
/// input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_input: String,
    pub w_hidden: String,
    pub bias: String,
    pub input: usize,
    pub cell: usize,
}

/// Hidden and cell state, each `batch x cell`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new(prefix: &str, input: usize, cell: usize) -> Self {
        Lstm {
            w_input: format!("{prefix}.w_x"),
            w_hidden: format!("{prefix}.w_h"),
            bias: format!("{prefix}.b"),
            input,
            cell,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let fan_in = self.input + self.cell;
        let g = 4 * self.cell;
        store.insert(&self.w_input, uniform(rng, &[self.input, g], fan_in));
        store.insert(&self.w_hidden, uniform(rng, &[self.cell, g], fan_in));
        let mut b = Tensor::zeros(&[g]);
        b.data_mut()[self.cell..2 * self.cell].fill(1.0);
        store.insert(&self.bias, b);
    }

    /// Zero state for a batch.
    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        LstmState {
            h: tape.constant(Tensor::zeros(&[batch, self.cell])),
            c: tape.constant(Tensor::zeros(&[batch, self.cell])),
        }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, state: LstmState) -> Result<LstmState> {
        let width = tape.value(x).cols();
        if width != self.input {
            return Err(Error::dim(
                format!("layer `{}`", self.w_input),
                format!("input width {width}, expected {}", self.input),
            ));
        }
        if self.cell == 0 {
            return Err(Error::Config("LSTM cell size must be positive".into()));
        }
        let wx = tape.param(store, &self.w_input)?;
        let wh = tape.param(store, &self.w_hidden)?;
        let b = tape.param(store, &self.bias)?;
        let zx = tape.matmul(x, wx)?;
        let zh = tape.matmul(state.h, wh)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_row(z, b)?;
        let n = self.cell;
        let i = tape.slice_cols(z, 0, n)?;
        let f = tape.slice_cols(z, n, n)?;
        let g = tape.slice_cols(z, 2 * n, n)?;
        let o = tape.slice_cols(z, 3 * n, n)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Run over a sequence; returns the state after every step.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
        initial: LstmState,
    ) -> Result<Vec<LstmState>> {
        if inputs.is_empty() {
            return Err(Error::EmptySequence("lstm"));
        }
        let mut state = initial;
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            state = self.step(tape, store, x, state)?;
            out.push(state);
        }
        Ok(out)
    }
}

/// Forward and backward LSTMs over the same sequence; output is the
/// concatenation of both final hidden states (`batch x 2*cell`).
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new(prefix: &str, input: usize, cell: usize) -> Self {
        BiLstm {
            forward: Lstm::new(&format!("{prefix}.fwd"), input, cell),
            backward: Lstm::new(&format!("{prefix}.bwd"), input, cell),
        }
    }

    /// Both directions share one weight set.
    pub fn tied(prefix: &str, input: usize, cell: usize) -> Self {
        let l = Lstm::new(prefix, input, cell);
        BiLstm {
            forward: l.clone(),
            backward: l,
        }
    }

    pub fn output(&self) -> usize {
        self.forward.cell + self.backward.cell
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.forward.init(store, rng);
        if self.backward.w_input != self.forward.w_input {
            self.backward.init(store, rng);
        }
    }

    pub fn run(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Var]) -> Result<Var> {
        let last = *inputs.last().ok_or(Error::EmptySequence("bilstm"))?;
        let batch = tape.value(last).rows();
        let s0 = self.forward.zero_state(tape, batch);
        let fwd = self.forward.forward(tape, store, inputs, s0)?;
        let reversed: Vec<Var> = inputs.iter().rev().copied().collect();
        let s0 = self.backward.zero_state(tape, batch);
        let bwd = self.backward.forward(tape, store, &reversed, s0)?;
        let hf = fwd.last().expect("non-empty").h;
        let hb = bwd.last().expect("non-empty").h;
        tape.concat_cols(&[hf, hb])
    }
}

/// Learned lookup table, one row per index.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: String,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: &str, rows: usize, dim: usize) -> Self {
        Embedding {
            table: name.to_string(),
            rows,
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let data = (0..self.rows * self.dim).map(|_| StandardNormal.sample(rng)).collect();
        store.insert(&self.table, Tensor::matrix(self.rows, self.dim, data));
    }

    /// Re-draw a single row, leaving the rest of the table untouched.
    pub fn reinit_row(&self, store: &mut ParamStore, row: usize, rng: &mut Rng) -> Result<()> {
        let t = store.get_mut(&self.table)?;
        let dim = t.cols();
        for x in &mut t.data_mut()[row * dim..(row + 1) * dim] {
            *x = StandardNormal.sample(rng);
        }
        Ok(())
    }

    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, indices: &[usize]) -> Result<Var> {
        let t = tape.param(store, &self.table)?;
        tape.gather_rows(t, indices)
    }
}
