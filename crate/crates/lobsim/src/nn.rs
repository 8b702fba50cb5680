//! Small MLPs with exact reverse-mode gradients on a Wengert-list tape.
//!
//! The tape records scalar operations with eagerly evaluated local
//! partials; one reverse sweep yields gradients of any recorded scalar
//! with respect to every leaf. Double backward (needed for the gradient
//! penalty) is obtained by recording the analytic input-gradient
//! recurrence of the network as ordinary tape operations and then
//! differentiating the recorded penalty once.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("input length {got} does not match declared input dim {want}")]
    ShapeError { want: usize, got: usize },
    #[error("non-finite value encountered in {0}")]
    NumericalError(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu,
    Tanh,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Row-major, `output_dim` rows of `input_dim` weights.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// He-style initialization. `dims` includes input and output dims.
    pub fn init<R: Rng>(dims: &[usize], hidden_act: Activation, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let (nin, nout) = (w[0], w[1]);
            let scale = (2.0 / nin as f64).sqrt();
            let is_last = layers.len() + 2 == dims.len();
            layers.push(Layer {
                input_dim: nin,
                output_dim: nout,
                weights: (0..nin * nout)
                    .map(|_| rng.gen_range(-1.0..1.0) * scale)
                    .collect(),
                biases: vec![0.0; nout],
                activation: if is_last { Activation::Linear } else { hidden_act },
            });
        }
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Plain forward pass; returns the output plus per-layer activations
    /// (activations[0] is the input), enough to reproduce gradients.
    pub fn forward(&self, input: &[f64]) -> Result<ForwardPass, NnError> {
        if input.len() != self.input_dim() && !self.layers.is_empty() {
            return Err(NnError::ShapeError {
                want: self.input_dim(),
                got: input.len(),
            });
        }
        let mut activations = vec![input.to_vec()];
        let mut preacts = Vec::new();
        for layer in &self.layers {
            let prev = activations.last().unwrap();
            let mut z = layer.biases.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                *zo += row.iter().zip(prev).map(|(w, a)| w * a).sum::<f64>();
            }
            let a: Vec<f64> = z.iter().map(|&v| apply_act(layer.activation, v)).collect();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NumericalError("forward"));
            }
            preacts.push(z);
            activations.push(a);
        }
        Ok(ForwardPass {
            activations,
            preacts,
        })
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(&mut f);
            layer.biases.iter_mut().for_each(&mut f);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
        out
    }
}

fn apply_act(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Linear => v,
        Activation::Relu => v.max(0.0),
        Activation::LeakyRelu => {
            if v > 0.0 {
                v
            } else {
                0.01 * v
            }
        }
        Activation::Tanh => v.tanh(),
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub activations: Vec<Vec<f64>>,
    pub preacts: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Index of a tape node.
pub type Var = u32;

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    pa: u32,
    pb: u32,
    da: f64,
    db: f64,
}

/// Wengert list with eagerly evaluated local partials.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v as usize].value
    }

    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(value, NONE, 0.0, NONE, 0.0)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(value)
    }

    fn push(&mut self, value: f64, pa: u32, da: f64, pb: u32, db: f64) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, pa, pb, da, db });
        idx
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, a, 1.0, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, a, 1.0, b, -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va * vb, a, vb, b, va)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va / vb, a, 1.0 / vb, b, -va / (vb * vb))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, a, -1.0, NONE, 0.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, a, c, NONE, 0.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, a, 1.0, NONE, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, a, v, NONE, 0.0)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.ln(), a, 1.0 / va, NONE, 0.0)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).sqrt();
        self.push(v, a, 0.5 / v, NONE, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.push(t, a, 1.0 - t * t, NONE, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (v, d) = if va > 0.0 { (va, 1.0) } else { (0.0, 0.0) };
        self.push(v, a, d, NONE, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (v, d) = if va > 0.0 { (va, 1.0) } else { (0.01 * va, 0.01) };
        self.push(v, a, d, NONE, 0.0)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let va = self.value(a);
        // Stable ln(1+e^x).
        let v = if va > 30.0 { va } else { va.exp().ln_1p() };
        let d = 1.0 / (1.0 + (-va).exp());
        self.push(v, a, d, NONE, 0.0)
    }

    pub fn activate(&mut self, act: Activation, a: Var) -> Var {
        match act {
            Activation::Linear => a,
            Activation::Relu => self.relu(a),
            Activation::LeakyRelu => self.leaky_relu(a),
            Activation::Tanh => self.tanh(a),
        }
    }

    /// Derivative of the activation at preactivation `z` (given the
    /// activated value `a`), as a tape expression so second derivatives
    /// flow through it.
    fn activation_deriv(&mut self, act: Activation, z: Var, a: Var) -> Var {
        match act {
            Activation::Linear => self.constant(1.0),
            Activation::Relu => {
                let d = if self.value(z) > 0.0 { 1.0 } else { 0.0 };
                self.constant(d)
            }
            Activation::LeakyRelu => {
                let d = if self.value(z) > 0.0 { 1.0 } else { 0.01 };
                self.constant(d)
            }
            Activation::Tanh => {
                let sq = self.mul(a, a);
                let neg = self.neg(sq);
                self.add_const(neg, 1.0)
            }
        }
    }

    pub fn sum(&mut self, vars: &[Var]) -> Var {
        let mut acc = self.constant(0.0);
        for &v in vars {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Softmax over a slice of vars.
    pub fn softmax(&mut self, logits: &[Var]) -> Vec<Var> {
        let max = logits
            .iter()
            .map(|&v| self.value(v))
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<Var> = logits.iter().map(|&v| self.add_const(v, -max)).collect();
        let exps: Vec<Var> = shifted.iter().map(|&v| self.exp(v)).collect();
        let denom = self.sum(&exps);
        exps.iter().map(|&e| self.div(e, denom)).collect()
    }

    /// Reverse sweep: adjoints of every node w.r.t. `output`.
    pub fn grad(&self, output: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.nodes.len()];
        adj[output as usize] = 1.0;
        for i in (0..=output as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = &self.nodes[i];
            if n.pa != NONE {
                adj[n.pa as usize] += a * n.da;
            }
            if n.pb != NONE {
                adj[n.pb as usize] += a * n.db;
            }
        }
        adj
    }
}

/// Tape handles for one network's parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<(Vec<Var>, Vec<Var>)>,
    dims: Vec<(usize, usize, Activation)>,
}

impl MlpVars {
    pub fn insert(tape: &mut Tape, params: &MlpParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| {
                let w = l.weights.iter().map(|&x| tape.leaf(x)).collect();
                let b = l.biases.iter().map(|&x| tape.leaf(x)).collect();
                (w, b)
            })
            .collect();
        let dims = params
            .layers
            .iter()
            .map(|l| (l.input_dim, l.output_dim, l.activation))
            .collect();
        MlpVars { layers, dims }
    }

    /// Forward pass on the tape; returns the output vars plus the cached
    /// per-layer (preactivation, activation) vars.
    pub fn forward(&self, tape: &mut Tape, input: &[Var]) -> TapedForward {
        let mut act: Vec<Var> = input.to_vec();
        let mut cache = Vec::with_capacity(self.layers.len());
        for ((w, b), &(nin, nout, activation)) in self.layers.iter().zip(&self.dims) {
            debug_assert_eq!(act.len(), nin);
            let mut z = Vec::with_capacity(nout);
            for o in 0..nout {
                let mut acc = b[o];
                for i in 0..nin {
                    let prod = tape.mul(w[o * nin + i], act[i]);
                    acc = tape.add(acc, prod);
                }
                z.push(acc);
            }
            let a: Vec<Var> = z.iter().map(|&zv| tape.activate(activation, zv)).collect();
            cache.push((z, a.clone()));
            act = a;
        }
        TapedForward { output: act, cache }
    }

    /// Gradient of the scalar output w.r.t. the network input, expressed
    /// as tape variables so it can itself be differentiated. The network
    /// must end in a single linear output.
    pub fn input_gradient(&self, tape: &mut Tape, fwd: &TapedForward) -> Vec<Var> {
        assert_eq!(fwd.output.len(), 1, "input gradient needs a scalar head");
        let mut g: Vec<Var> = vec![tape.constant(1.0)];
        for (li, ((w, _b), &(nin, nout, activation))) in
            self.layers.iter().zip(&self.dims).enumerate().rev()
        {
            let (z, a) = &fwd.cache[li];
            // u = act'(z) ⊙ g
            let u: Vec<Var> = (0..nout)
                .map(|o| {
                    let d = tape.activation_deriv(activation, z[o], a[o]);
                    tape.mul(d, g[o])
                })
                .collect();
            // g_prev = W^T u
            let mut g_prev = Vec::with_capacity(nin);
            for i in 0..nin {
                let mut acc = tape.constant(0.0);
                for o in 0..nout {
                    let prod = tape.mul(w[o * nin + i], u[o]);
                    acc = tape.add(acc, prod);
                }
                g_prev.push(acc);
            }
            g = g_prev;
        }
        g
    }

    /// Reads parameter gradients out of a completed adjoint vector,
    /// shaped like the original params.
    pub fn gradients(&self, adjoints: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .map(|(w, b)| {
                (
                    w.iter().map(|&v| adjoints[v as usize]).collect(),
                    b.iter().map(|&v| adjoints[v as usize]).collect(),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TapedForward {
    pub output: Vec<Var>,
    pub cache: Vec<(Vec<Var>, Vec<Var>)>,
}

/// Accumulates parameter gradients across a batch.
#[derive(Debug, Clone)]
pub struct GradAccum {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub count: usize,
}

impl GradAccum {
    pub fn zeros_like(params: &MlpParams) -> Self {
        GradAccum {
            layers: params
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
                .collect(),
            count: 0,
        }
    }

    pub fn add(&mut self, grads: &[(Vec<f64>, Vec<f64>)], scale: f64) {
        for ((aw, ab), (gw, gb)) in self.layers.iter_mut().zip(grads) {
            for (a, g) in aw.iter_mut().zip(gw) {
                *a += g * scale;
            }
            for (a, g) in ab.iter_mut().zip(gb) {
                *a += g * scale;
            }
        }
        self.count += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn zero_net_outputs_zero() {
        let params = MlpParams {
            layers: vec![Layer {
                input_dim: 3,
                output_dim: 2,
                weights: vec![0.0; 6],
                biases: vec![0.0; 2],
                activation: Activation::Linear,
            }],
        };
        let out = params.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out.output(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_through() {
        let params = MlpParams {
            layers: vec![Layer {
                input_dim: 2,
                output_dim: 2,
                weights: vec![1.0, 0.0, 0.0, 1.0],
                biases: vec![0.0, 0.0],
                activation: Activation::Linear,
            }],
        };
        let out = params.forward(&[0.3, -1.7]).unwrap();
        assert_eq!(out.output(), &[0.3, -1.7]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let params = MlpParams::init(&[4, 3], Activation::Tanh, &mut rng);
        assert!(matches!(
            params.forward(&[1.0, 2.0]),
            Err(NnError::ShapeError { want: 4, got: 2 })
        ));
    }

    /// Independent straight-line matrix-arithmetic oracle for a 2-layer net.
    #[test]
    fn forward_matches_matrix_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let params = MlpParams::init(&[3, 4, 2], Activation::Tanh, &mut rng);
        let x = [0.5, -0.25, 1.5];
        let out = params.forward(&x).unwrap();

        // Oracle: explicit loops, no shared code path.
        let l0 = &params.layers[0];
        let mut h = [0.0f64; 4];
        for o in 0..4 {
            let mut z = l0.biases[o];
            for i in 0..3 {
                z += l0.weights[o * 3 + i] * x[i];
            }
            h[o] = z.tanh();
        }
        let l1 = &params.layers[1];
        let mut y = [0.0f64; 2];
        for o in 0..2 {
            let mut z = l1.biases[o];
            for i in 0..4 {
                z += l1.weights[o * 4 + i] * h[i];
            }
            y[o] = z;
        }
        for (a, b) in out.output().iter().zip(y.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let params = MlpParams::init(&[5, 8, 1], Activation::Tanh, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| 0.1 * i as f64 - 0.2).collect();
        let plain = params.forward(&x).unwrap();

        let mut tape = Tape::new();
        let vars = MlpVars::insert(&mut tape, &params);
        let xv: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
        let fwd = vars.forward(&mut tape, &xv);
        assert!((tape.value(fwd.output[0]) - plain.output()[0]).abs() < 1e-14);
    }

    #[test]
    fn tape_gradient_matches_finite_difference() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut params = MlpParams::init(&[3, 6, 1], Activation::Tanh, &mut rng);
        let x = [0.4, -0.9, 0.3];

        let loss = |p: &MlpParams| {
            let out = p.forward(&x).unwrap().output()[0];
            out * out
        };

        let mut tape = Tape::new();
        let vars = MlpVars::insert(&mut tape, &params);
        let xv: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
        let fwd = vars.forward(&mut tape, &xv);
        let sq = tape.mul(fwd.output[0], fwd.output[0]);
        let adj = tape.grad(sq);
        let grads = vars.gradients(&adj);

        let h = 1e-5;
        let base_flat = params.flat();
        let mut idx = 0;
        let analytic: Vec<f64> = grads
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect();
        let n = base_flat.len();
        for k in 0..n {
            let mut i = 0;
            params.for_each_param_mut(|p| {
                if i == k {
                    *p += h;
                }
                i += 1;
            });
            let up = loss(&params);
            let mut i = 0;
            params.for_each_param_mut(|p| {
                if i == k {
                    *p -= 2.0 * h;
                }
                i += 1;
            });
            let down = loss(&params);
            let mut i = 0;
            params.for_each_param_mut(|p| {
                if i == k {
                    *p += h;
                }
                i += 1;
            });
            let fd = (up - down) / (2.0 * h);
            let rel = (analytic[k] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "param {k}: analytic {} fd {}", analytic[k], fd);
            idx += 1;
        }
        assert_eq!(idx, n);
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let params = MlpParams::init(&[4, 7, 1], Activation::Tanh, &mut rng);
        let x = [0.2, -0.1, 0.6, -0.4];

        let mut tape = Tape::new();
        let vars = MlpVars::insert(&mut tape, &params);
        let xv: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
        let fwd = vars.forward(&mut tape, &xv);
        let g = vars.input_gradient(&mut tape, &fwd);

        let h = 1e-6;
        for i in 0..4 {
            let mut up = x;
            up[i] += h;
            let mut dn = x;
            dn[i] -= h;
            let fu = params.forward(&up).unwrap().output()[0];
            let fd_ = params.forward(&dn).unwrap().output()[0];
            let fd = (fu - fd_) / (2.0 * h);
            assert!((tape.value(g[i]) - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape = Tape::new();
        let logits: Vec<Var> = [2.0, -1.0, 0.5].iter().map(|&v| tape.leaf(v)).collect();
        let p = tape.softmax(&logits);
        let total: f64 = p.iter().map(|&v| tape.value(v)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
