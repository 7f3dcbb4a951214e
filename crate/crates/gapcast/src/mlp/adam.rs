use crate::error::{Error, Result};
use crate::mlp::{GradientTape, TinyMlp};

/// Adaptive-moment optimizer. First and second moments persist across calls,
/// one instance per trained network.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &TinyMlp) -> Self {
        let (weights, biases) = net.params();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_w: weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v_w: weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            m_b: biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update with gradients from `tape`, descending the loss whose
    /// gradient the tape holds.
    pub fn step(&mut self, net: &mut TinyMlp, tape: &GradientTape, lr: f64) -> Result<()> {
        if !tape.all_finite() {
            return Err(Error::Training("non-finite gradient in update".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (weights, biases) = net.params_mut();
        for l in 0..weights.len() {
            update_block(
                &mut weights[l],
                &tape.dw[l],
                &mut self.m_w[l],
                &mut self.v_w[l],
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
            update_block(
                &mut biases[l],
                &tape.db[l],
                &mut self.m_b[l],
                &mut self.v_b[l],
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
        }
        Ok(())
    }

    /// Serialize moments for checkpointing: (step, flat m, flat v) in the
    /// canonical weights-then-biases per-layer order.
    pub fn snapshot(&self) -> (u64, Vec<f64>, Vec<f64>) {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for l in 0..self.m_w.len() {
            m.extend_from_slice(&self.m_w[l]);
            m.extend_from_slice(&self.m_b[l]);
            v.extend_from_slice(&self.v_w[l]);
            v.extend_from_slice(&self.v_b[l]);
        }
        (self.step, m, v)
    }

    pub fn restore(&mut self, step: u64, m: &[f64], v: &[f64]) -> Result<()> {
        let total: usize = self.m_w.iter().map(Vec::len).sum::<usize>()
            + self.m_b.iter().map(Vec::len).sum::<usize>();
        if m.len() != total || v.len() != total {
            return Err(Error::Training(format!(
                "moment snapshot length {} does not match optimizer size {total}",
                m.len()
            )));
        }
        self.step = step;
        let mut off = 0;
        for l in 0..self.m_w.len() {
            let nw = self.m_w[l].len();
            self.m_w[l].copy_from_slice(&m[off..off + nw]);
            self.v_w[l].copy_from_slice(&v[off..off + nw]);
            off += nw;
            let nb = self.m_b[l].len();
            self.m_b[l].copy_from_slice(&m[off..off + nb]);
            self.v_b[l].copy_from_slice(&v[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update_block(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
