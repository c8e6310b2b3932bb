//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Hidden layers use ReLU. The output head is either the identity (critics)
//! or a softmax (actors). Weights are stored row-major, `out × in`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &str = "fleetdesign-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Identity,
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer { inputs, outputs, weights: vec![0.0; inputs * outputs], biases: vec![0.0; outputs] }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.biases);
        // inputs are often one-hot, so iterate columns and skip zeros
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs)) {
                *o += row[j] * xj;
            }
        }
    }

    fn affine_dense(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.biases)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
    head: Head,
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Glorot-uniform initialization, biases zero.
pub fn mlp_init(sizes: &[usize], seed: u64, head: Head) -> Result<Mlp> {
    if sizes.len() < 2 {
        return Err(Error::InvalidArgument("an MLP needs at least an input and an output size".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("layer sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = sizes
        .windows(2)
        .map(|w| {
            let mut layer = Layer::zeros(w[0], w[1]);
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            for x in &mut layer.weights {
                *x = rng.random_range(-bound..=bound);
            }
            layer
        })
        .collect();
    Ok(Mlp { sizes: sizes.to_vec(), layers, head })
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    /// `acts[0]` is the input; `acts[i]` the post-ReLU output of layer `i-1`.
    acts: Vec<Vec<f64>>,
    /// Pre-head output.
    logits: Vec<f64>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Output of the last layer before the head.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }
}

/// Gradients congruent with an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
    /// Gradient with respect to the input; empty unless requested.
    pub input: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(net: &Mlp) -> Self {
        GradientSet {
            layers: net.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect(),
            input: Vec::new(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
        self.input.clear();
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= k);
            l.biases.iter_mut().for_each(|x| *x *= k);
        }
        self.input.iter_mut().for_each(|x| *x *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|x| x.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|&x| x == 0.0))
    }

    /// Parameter gradients flattened in the same order as [`Mlp::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }
}

impl Mlp {
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    /// Mutable access to the `k`-th parameter in [`Mlp::parameters`] order.
    pub fn parameter_mut(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            let n = l.weights.len();
            if k < n {
                return &mut l.weights[k];
            }
            k -= n;
            if k < l.biases.len() {
                return &mut l.biases[k];
            }
            k -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|x| x.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_size() {
            return Err(Error::DimensionMismatch { expected: self.input_size(), got: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = Vec::new();
        let mut next = Vec::new();
        self.layers[0].affine(x, &mut cur);
        for layer in &self.layers[1..] {
            cur.iter_mut().for_each(|v| *v = v.max(0.0));
            layer.affine_dense(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        if self.head == Head::Softmax {
            softmax_in_place(&mut cur);
        }
        Ok(cur)
    }

    /// Forward pass recording activations into `tape`, reusing its buffers.
    pub fn forward_tape(&self, x: &[f64], tape: &mut Tape) -> Result<()> {
        self.check_input(x)?;
        let n = self.layers.len();
        tape.acts.resize_with(n, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);
        for i in 0..n {
            let layer = &self.layers[i];
            let mut out = std::mem::take(if i + 1 < n { &mut tape.acts[i + 1] } else { &mut tape.logits });
            if i == 0 {
                layer.affine(&tape.acts[0], &mut out);
            } else {
                layer.affine_dense(&tape.acts[i], &mut out);
            }
            if i + 1 < n {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                tape.acts[i + 1] = out;
            } else {
                tape.logits = out;
            }
        }
        tape.output.clear();
        tape.output.extend_from_slice(&tape.logits);
        if self.head == Head::Softmax {
            softmax_in_place(&mut tape.output);
        }
        Ok(())
    }

    pub fn tape(&self, x: &[f64]) -> Result<Tape> {
        let mut tape = Tape::default();
        self.forward_tape(x, &mut tape)?;
        Ok(tape)
    }

    /// Gradient of `upstream · output` with respect to every parameter and
    /// the input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(self);
        let g = self.head_gradient(tape, upstream)?;
        self.backprop(tape, g, 1.0, &mut grads, true);
        Ok(grads)
    }

    /// Accumulate `scale ×` the gradient of `upstream · output` into `grads`.
    pub fn accumulate(&self, tape: &Tape, upstream: &[f64], scale: f64, grads: &mut GradientSet) -> Result<()> {
        let g = self.head_gradient(tape, upstream)?;
        self.backprop(tape, g, scale, grads, false);
        Ok(())
    }

    /// Accumulate `scale ×` the gradient of `upstream · logits`, bypassing
    /// the head. For a softmax head and `upstream = e_a − p` this is the
    /// gradient of `log p_a`.
    pub fn accumulate_logits(&self, tape: &Tape, upstream: &[f64], scale: f64, grads: &mut GradientSet) -> Result<()> {
        if upstream.len() != self.output_size() {
            return Err(Error::DimensionMismatch { expected: self.output_size(), got: upstream.len() });
        }
        self.backprop(tape, upstream.to_vec(), scale, grads, false);
        Ok(())
    }

    fn head_gradient(&self, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.output_size() {
            return Err(Error::DimensionMismatch { expected: self.output_size(), got: upstream.len() });
        }
        Ok(match self.head {
            Head::Identity => upstream.to_vec(),
            Head::Softmax => {
                let p = &tape.output;
                let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
                p.iter().zip(upstream).map(|(pi, gi)| pi * (gi - dot)).collect()
            }
        })
    }

    fn backprop(&self, tape: &Tape, mut delta: Vec<f64>, scale: f64, grads: &mut GradientSet, want_input: bool) {
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = &tape.acts[i];
            let gl = &mut grads.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let ds = d * scale;
                gl.biases[o] += ds;
                let row = &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, &xj) in row.iter_mut().zip(x) {
                    if xj != 0.0 {
                        *w += ds * xj;
                    }
                }
            }
            if i == 0 && !want_input {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            if i == 0 {
                grads.input = prev.into_iter().map(|v| v * scale).collect();
                break;
            }
            // ReLU derivative: the recorded activation is zero where inactive
            for (p, &a) in prev.iter_mut().zip(x) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    fn check_congruent(&self, grads: &GradientSet) -> Result<()> {
        let ok = grads.layers.len() == self.layers.len()
            && grads
                .layers
                .iter()
                .zip(&self.layers)
                .all(|(g, l)| g.inputs == l.inputs && g.outputs == l.outputs);
        if ok {
            Ok(())
        } else {
            Err(Error::ArchitectureMismatch)
        }
    }

    /// Plain gradient descent: `θ ← θ − eta·g`.
    pub fn apply_update(&mut self, grads: &GradientSet, eta: f64) -> Result<()> {
        self.check_congruent(grads)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= eta * d);
            l.biases.iter_mut().zip(&g.biases).for_each(|(b, d)| *b -= eta * d);
        }
        Ok(())
    }

    /// Overwrite `target` with this network's parameters.
    pub fn copy_into_target(&self, target: &mut Mlp) -> Result<()> {
        if self.sizes != target.sizes || self.head != target.head {
            return Err(Error::ArchitectureMismatch);
        }
        target.layers.clone_from(&self.layers);
        Ok(())
    }

    /// Versioned text dump. Floats use the shortest representation that
    /// parses back to the same bits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let head = match self.head {
            Head::Identity => "identity",
            Head::Softmax => "softmax",
        };
        let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(s, "head {head}");
        let sizes: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "sizes {}", sizes.join(" "));
        for l in &self.layers {
            let w: Vec<String> = l.weights.iter().map(f64::to_string).collect();
            let b: Vec<String> = l.biases.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "w {}", w.join(" "));
            let _ = writeln!(s, "b {}", b.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Mlp> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut field = |key: &str| -> Result<Vec<&str>> {
            let line = lines.next().ok_or_else(|| Error::Parse(format!("missing {key:?} line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(Error::Parse(format!("expected {key:?} line, got {line:?}")));
            }
            Ok(parts.collect())
        };
        let magic = field(CHECKPOINT_MAGIC)?;
        if magic != [CHECKPOINT_VERSION.to_string()] {
            return Err(Error::Parse(format!("unsupported checkpoint version {magic:?}")));
        }
        let head = match field("head")?.as_slice() {
            ["identity"] => Head::Identity,
            ["softmax"] => Head::Softmax,
            other => return Err(Error::Parse(format!("unknown head {other:?}"))),
        };
        let sizes = field("sizes")?
            .iter()
            .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut net = mlp_init(&sizes, 0, head)?;
        let parse = |vals: Vec<&str>, n: usize| -> Result<Vec<f64>> {
            if vals.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: vals.len() });
            }
            vals.iter()
                .map(|v| {
                    let x = v.parse::<f64>().map_err(|e| Error::Parse(format!("{v:?}: {e}")))?;
                    if x.is_finite() {
                        Ok(x)
                    } else {
                        Err(Error::NonFinite("checkpoint parameter".into()))
                    }
                })
                .collect()
        };
        for l in &mut net.layers {
            l.weights = parse(field("w")?, l.inputs * l.outputs)?;
            l.biases = parse(field("b")?, l.outputs)?;
        }
        Ok(net)
    }
}

/// Adam moment estimates for one network.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: GradientSet,
    v: GradientSet,
    t: i32,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: GradientSet::zeros_like(net),
            v: GradientSet::zeros_like(net),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &GradientSet, eta: f64) -> Result<()> {
        net.check_congruent(grads)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (((l, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let params = l.weights.iter_mut().chain(l.biases.iter_mut());
            let gs = g.weights.iter().chain(&g.biases);
            let ms = m.weights.iter_mut().chain(m.biases.iter_mut());
            let vs = v.weights.iter_mut().chain(v.biases.iter_mut());
            for (((p, &gi), mi), vi) in params.zip(gs).zip(ms).zip(vs) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *p -= eta * (*mi / c1) / ((*vi / c2).sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Per-network optimizer state.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, net: &Mlp) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(net)),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &GradientSet, eta: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => net.apply_update(grads, eta),
            Optimizer::Adam(a) => a.step(net, grads, eta),
        }
    }
}
