//! Minimal dense network engine: forward pass, exact backpropagation and an
//! Adam update, sized for the small prediction topologies used here
//! (4/16/16/1, 12/16/16/1 and 12/64/64/1).
//!
//! Parameters are plain `f64` vectors; nothing is vectorised beyond what the
//! compiler does on its own. Forward passes over a frozen net are safe to run
//! from any number of threads; training mutates one net from a single writer.

mod adam;
mod io;
mod schedule;

pub use adam::Adam;
pub use io::{load_weights, load_weights_expecting, save_weights};
pub use schedule::CyclicLr;

use crate::error::{Error, Result};
use rand::Rng;

/// Activation functions supported by [`TinyMlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    /// Leaky ReLU with fixed negative slope 0.01.
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    0.01 * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative with respect to the pre-activation, given both the
    /// pre-activation `z` and the activation value `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.01
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    pub(crate) fn id(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::LeakyRelu => 2,
            Activation::Tanh => 3,
            Activation::Sigmoid => 4,
        }
    }

    pub(crate) fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu,
            3 => Activation::Tanh,
            4 => Activation::Sigmoid,
            _ => return Err(Error::Mlp(format!("unknown activation id {id}"))),
        })
    }
}

/// A fully connected feed-forward network.
///
/// Weights of layer `l` are stored row-major: `weights[l][o * in + i]` is the
/// weight from input `i` to output `o`.
#[derive(Debug, Clone)]
pub struct TinyMlp {
    sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    hidden: Activation,
    output: Activation,
    /// Per-input scale factors applied by callers before the forward pass.
    /// Recorded here so weight files carry them; the engine itself does not
    /// apply them.
    input_scales: Vec<f64>,
}

impl TinyMlp {
    /// Build a network with uniform fan-in initialisation (±sqrt(1/fan_in)).
    pub fn new<R: Rng>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Mlp("need at least input and output layer".into()));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Mlp("zero-width layer".into()));
        }
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let bound = (1.0 / n_in as f64).sqrt();
            let w = (0..n_in * n_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b = (0..n_out).map(|_| rng.random_range(-bound..bound)).collect();
            weights.push(w);
            biases.push(b);
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            hidden,
            output,
            input_scales: vec![1.0; sizes[0]],
        })
    }

    /// Zero-initialised network (used in tests and as a load target).
    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut net = Self::new(sizes, hidden, output, &mut rng)?;
        for w in &mut net.weights {
            w.fill(0.0);
        }
        for b in &mut net.biases {
            b.fill(0.0);
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn input_scales(&self) -> &[f64] {
        &self.input_scales
    }

    pub fn set_input_scales(&mut self, scales: &[f64]) -> Result<()> {
        if scales.len() != self.sizes[0] {
            return Err(Error::Mlp(format!(
                "input scale length {} does not match input width {}",
                scales.len(),
                self.sizes[0]
            )));
        }
        self.input_scales = scales.to_vec();
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Total parameter count (weights + biases).
    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub(crate) fn params(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.weights, &self.biases)
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [Vec<f64>], &mut [Vec<f64>]) {
        (&mut self.weights, &mut self.biases)
    }

    pub(crate) fn from_parts(
        sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        hidden: Activation,
        output: Activation,
        input_scales: Vec<f64>,
    ) -> Self {
        Self { sizes, weights, biases, hidden, output, input_scales }
    }

    /// Mutable access to a flat view of all parameters, visiting weights then
    /// biases of each layer in order. Used by the finite-difference oracle.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in 0..self.weights.len() {
            for w in &mut self.weights[l] {
                f(w);
            }
            for b in &mut self.biases[l] {
                f(b);
            }
        }
    }

    /// Forward pass into a caller-provided workspace; returns the output slice.
    pub fn forward_ws<'w>(&self, x: &[f64], ws: &'w mut Workspace) -> Result<&'w [f64]> {
        if x.len() != self.sizes[0] {
            return Err(Error::Mlp(format!(
                "input width {} does not match layer size {}",
                x.len(),
                self.sizes[0]
            )));
        }
        ws.ensure(&self.sizes);
        ws.input.clear();
        ws.input.extend_from_slice(x);
        let n_layers = self.n_layers();
        let Workspace { input, pre, act } = ws;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let activation = if l + 1 == n_layers { self.output } else { self.hidden };
            let (done, rest) = act.split_at_mut(l);
            let prev: &[f64] = if l == 0 { input } else { &done[l - 1] };
            let out = &mut rest[0];
            let pre_l = &mut pre[l];
            let w = &self.weights[l];
            let b = &self.biases[l];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut z = b[o];
                for i in 0..n_in {
                    z += row[i] * prev[i];
                }
                pre_l[o] = z;
                out[o] = activation.apply(z);
            }
        }
        Ok(&ws.act[n_layers - 1])
    }

    /// Convenience forward pass that allocates its own workspace.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut ws = Workspace::default();
        Ok(self.forward_ws(x, &mut ws)?.to_vec())
    }

    /// Single-output convenience.
    pub fn forward_scalar(&self, x: &[f64], ws: &mut Workspace) -> Result<f64> {
        let out = self.forward_ws(x, ws)?;
        Ok(out[0])
    }

    /// Exact gradients of `upstream · output` with respect to every parameter
    /// and the input, given the workspace of the matching forward pass.
    ///
    /// With `accumulate` the gradients are added onto `tape`, otherwise the
    /// tape is overwritten. The tape is resized to fit if empty.
    pub fn backward_ws(
        &self,
        ws: &Workspace,
        upstream: &[f64],
        tape: &mut GradientTape,
        accumulate: bool,
    ) -> Result<()> {
        let n_layers = self.n_layers();
        if upstream.len() != self.output_width() {
            return Err(Error::Mlp(format!(
                "upstream width {} does not match output width {}",
                upstream.len(),
                self.output_width()
            )));
        }
        if ws.act.len() != n_layers || ws.act[n_layers - 1].len() != self.output_width() {
            return Err(Error::Mlp("workspace does not match a forward pass of this net".into()));
        }
        tape.ensure(&self.sizes);
        if !accumulate {
            tape.zero();
        }

        // delta = dL/dz for the current layer, walking backwards.
        let mut delta: Vec<f64> = Vec::with_capacity(self.output_width());
        for (o, &u) in upstream.iter().enumerate() {
            let z = ws.pre[n_layers - 1][o];
            let a = ws.act[n_layers - 1][o];
            delta.push(u * self.output.derivative(z, a));
        }

        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let prev: &[f64] = if l == 0 { &ws.input } else { &ws.act[l - 1] };
            let dw = &mut tape.dw[l];
            let db = &mut tape.db[l];
            for o in 0..n_out {
                let d = delta[o];
                db[o] += d;
                let row = &mut dw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    row[i] += d * prev[i];
                }
            }
            // Propagate to the previous layer (or the input).
            let w = &self.weights[l];
            let mut next_delta = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    next_delta[i] += d * row[i];
                }
            }
            if l == 0 {
                for i in 0..n_in {
                    tape.dx[i] += next_delta[i];
                }
            } else {
                let act = self.hidden;
                for i in 0..n_in {
                    let z = ws.pre[l - 1][i];
                    let a = ws.act[l - 1][i];
                    next_delta[i] *= act.derivative(z, a);
                }
            }
            delta = next_delta;
        }
        Ok(())
    }

    /// Forward + backward in one call, allocating a fresh tape.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<GradientTape> {
        let mut ws = Workspace::default();
        self.forward_ws(x, &mut ws)?;
        let mut tape = GradientTape::default();
        self.backward_ws(&ws, upstream, &mut tape, false)?;
        Ok(tape)
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().flatten().all(|w| w.is_finite())
            && self.biases.iter().flatten().all(|b| b.is_finite())
    }
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

impl Workspace {
    fn ensure(&mut self, sizes: &[usize]) {
        let n_layers = sizes.len() - 1;
        if self.pre.len() != n_layers || self.pre.iter().zip(&sizes[1..]).any(|(p, &s)| p.len() != s) {
            self.pre = sizes[1..].iter().map(|&s| vec![0.0; s]).collect();
            self.act = sizes[1..].iter().map(|&s| vec![0.0; s]).collect();
        }
    }

}

/// Per-parameter gradient buffers matching a [`TinyMlp`], plus the gradient
/// with respect to the input.
#[derive(Debug, Default, Clone)]
pub struct GradientTape {
    pub dw: Vec<Vec<f64>>,
    pub db: Vec<Vec<f64>>,
    pub dx: Vec<f64>,
    sizes: Vec<usize>,
}

impl GradientTape {
    pub fn for_net(net: &TinyMlp) -> Self {
        let mut t = Self::default();
        t.ensure(net.sizes());
        t
    }

    fn ensure(&mut self, sizes: &[usize]) {
        if self.sizes != sizes {
            self.dw = (0..sizes.len() - 1)
                .map(|l| vec![0.0; sizes[l] * sizes[l + 1]])
                .collect();
            self.db = sizes[1..].iter().map(|&s| vec![0.0; s]).collect();
            self.dx = vec![0.0; sizes[0]];
            self.sizes = sizes.to_vec();
        }
    }

    pub fn zero(&mut self) {
        for w in &mut self.dw {
            w.fill(0.0);
        }
        for b in &mut self.db {
            b.fill(0.0);
        }
        self.dx.fill(0.0);
    }

    /// Merge another tape into this one. Associative and commutative, so
    /// tapes accumulated on parallel rollouts can be reduced in any fixed
    /// order.
    pub fn merge(&mut self, other: &GradientTape) {
        assert_eq!(self.sizes, other.sizes, "tape shape mismatch");
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.dx.iter_mut().zip(&other.dx) {
            *x += y;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for w in &mut self.dw {
            for x in w.iter_mut() {
                *x *= k;
            }
        }
        for b in &mut self.db {
            for x in b.iter_mut() {
                *x *= k;
            }
        }
        for x in self.dx.iter_mut() {
            *x *= k;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.dw.iter().flatten().all(|v| v.is_finite())
            && self.db.iter().flatten().all(|v| v.is_finite())
    }

    /// Visit every parameter gradient in the same order as
    /// [`TinyMlp::for_each_param_mut`].
    pub fn for_each_grad(&self, mut f: impl FnMut(f64)) {
        for l in 0..self.dw.len() {
            for g in &self.dw[l] {
                f(*g);
            }
            for g in &self.db[l] {
                f(*g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line reimplementation of the forward pass, kept deliberately
    /// independent of the engine (nested Vec matrices, no workspaces).
    fn naive_forward(net: &TinyMlp, x: &[f64]) -> Vec<f64> {
        let (weights, biases) = net.params();
        let n_layers = net.n_layers();
        let mut cur = x.to_vec();
        for l in 0..n_layers {
            let n_in = net.sizes()[l];
            let n_out = net.sizes()[l + 1];
            let act = if l + 1 == n_layers {
                net.output_activation()
            } else {
                net.hidden_activation()
            };
            let mut next = vec![0.0; n_out];
            for o in 0..n_out {
                let mut z = biases[l][o];
                for i in 0..n_in {
                    z += weights[l][o * n_in + i] * cur[i];
                }
                next[o] = act.apply(z);
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn zero_net_sigmoid_outputs_half() {
        let net = TinyMlp::zeros(&[4, 16, 16, 1], Activation::LeakyRelu, Activation::Sigmoid).unwrap();
        let y = net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(y[0], 0.5);
    }

    #[test]
    fn zero_weights_identity_output_is_bias() {
        let mut net = TinyMlp::zeros(&[3, 4, 2], Activation::Tanh, Activation::Identity).unwrap();
        {
            let (_, biases) = net.params_mut();
            biases[1][0] = 1.25;
            biases[1][1] = -0.5;
        }
        let y = net.forward(&[0.3, 0.7, -0.1]).unwrap();
        assert_eq!(y, vec![1.25, -0.5]);
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = TinyMlp::new(&[4, 16, 16, 1], Activation::LeakyRelu, Activation::Sigmoid, &mut rng).unwrap();
        let x = [0.3, -1.2, 0.9, 2.0];
        let fast = net.forward(&x).unwrap();
        let slow = naive_forward(&net, &x);
        assert!((fast[0] - slow[0]).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = TinyMlp::zeros(&[4, 8, 1], Activation::Tanh, Activation::Identity).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_linear_layer_gradients() {
        let mut net = TinyMlp::zeros(&[3, 2], Activation::Tanh, Activation::Identity).unwrap();
        {
            let (weights, _) = net.params_mut();
            weights[0].copy_from_slice(&[1.0, 2.0, 3.0, -1.0, 0.5, 0.25]);
        }
        let x = [0.5, -1.0, 2.0];
        let upstream = [2.0, -3.0];
        let tape = net.backward(&x, &upstream).unwrap();
        // dy/db = upstream
        assert_eq!(tape.db[0], vec![2.0, -3.0]);
        // dy/dW = upstream ⊗ x
        assert_eq!(tape.dw[0], vec![1.0, -2.0, 4.0, -1.5, 3.0, -6.0]);
        // dx = W^T upstream
        assert_eq!(tape.dx, vec![2.0 * 1.0 - 3.0 * -1.0, 2.0 * 2.0 - 3.0 * 0.5, 2.0 * 3.0 - 3.0 * 0.25]);
    }

    #[test]
    fn leaky_relu_negative_preactivation_scales_gradient() {
        let mut net = TinyMlp::zeros(&[1, 1, 1], Activation::LeakyRelu, Activation::Identity).unwrap();
        {
            let (weights, _) = net.params_mut();
            weights[0][0] = -1.0; // pre-activation for x>0 is negative
            weights[1][0] = 1.0;
        }
        let tape = net.backward(&[2.0], &[1.0]).unwrap();
        // d out / d x = w1 * slope * w0 = 1 * 0.01 * -1
        assert!((tape.dx[0] - (-0.01)).abs() < 1e-15);
    }

    /// Central finite differences against the analytic gradients.
    fn finite_difference_check(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = TinyMlp::new(sizes, hidden, output, &mut rng).unwrap();
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upstream = vec![1.0; *sizes.last().unwrap()];
        let tape = net.backward(&x, &upstream).unwrap();

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        let mut analytic = Vec::new();
        tape.for_each_grad(|g| analytic.push(g));
        let mut idx = 0;
        let mut probe = net.clone();
        let n_params = analytic.len();
        for k in 0..n_params {
            let mut i = 0;
            let mut plus = 0.0;
            let mut minus = 0.0;
            probe.for_each_param_mut(|p| {
                if i == k {
                    *p += h;
                }
                i += 1;
            });
            plus += probe.forward(&x).unwrap().iter().sum::<f64>();
            i = 0;
            probe.for_each_param_mut(|p| {
                if i == k {
                    *p -= 2.0 * h;
                }
                i += 1;
            });
            minus += probe.forward(&x).unwrap().iter().sum::<f64>();
            i = 0;
            probe.for_each_param_mut(|p| {
                if i == k {
                    *p += h;
                }
                i += 1;
            });
            let fd = (plus - minus) / (2.0 * h);
            let denom = analytic[idx].abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((analytic[idx] - fd).abs() / denom);
            idx += 1;
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, (hidden, output)) in [
            (Activation::LeakyRelu, Activation::Sigmoid),
            (Activation::Tanh, Activation::Tanh),
            (Activation::Relu, Activation::Identity),
        ]
        .iter()
        .enumerate()
        {
            let err = finite_difference_check(&[4, 8, 8, 1], *hidden, *output, 100 + i as u64);
            assert!(err < 1e-4, "max relative error {err} for {hidden:?}/{output:?}");
        }
    }

    #[test]
    fn tape_merge_is_commutative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = TinyMlp::new(&[4, 8, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let t1 = net.backward(&[1.0, 0.0, -1.0, 0.5], &[1.0]).unwrap();
        let t2 = net.backward(&[0.2, 0.4, 0.6, 0.8], &[-2.0]).unwrap();
        let mut a = t1.clone();
        a.merge(&t2);
        let mut b = t2.clone();
        b.merge(&t1);
        let mut ga = Vec::new();
        let mut gb = Vec::new();
        a.for_each_grad(|g| ga.push(g));
        b.for_each_grad(|g| gb.push(g));
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
