//! Adam optimizer and the warmup-plus-cosine learning-rate schedule.
//!
//! Parameters live in a [`ParamStore`]; gradients are harvested from
//! per-sample graphs into a [`GradBuffer`] aligned with the store's
//! registration order, which the optimizer then consumes. Moments are
//! stored as `f32` tensors (the checkpoint payload type) while each update
//! is evaluated in `f64`, so resumed runs replay updates bit-exactly.

use crate::error::Error;
use crate::graph::Graph;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Result;

/// Learning rate at `step` (0-based): linear ramp from 0 over
/// `warmup_steps`, then a single cosine decay from `peak` to 0 at
/// `total_steps`.
pub fn lr_at(step: u64, warmup_steps: u64, total_steps: u64, peak: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps);
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / span as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter gradient accumulator, aligned to store order.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    bufs: Vec<Vec<f32>>,
}

impl GradBuffer {
    /// Zeroed buffers matching every parameter in the store.
    pub fn zeros(store: &ParamStore<f32>) -> Self {
        GradBuffer { bufs: (0..store.len()).map(|i| vec![0.0; store.get(ParamId(i)).numel()]).collect() }
    }

    /// Reset all buffers to zero.
    pub fn clear(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add the gradients a graph computed for its bound parameters.
    /// Parameters the graph did not touch contribute nothing.
    pub fn accumulate(&mut self, g: &Graph<f32>) -> Result<()> {
        for &(id, _) in g.bound_params() {
            if let Some(grad) = g.param_grad(id) {
                let buf = self.bufs.get_mut(id.0).ok_or_else(|| {
                    Error::invalid("grad_buffer", "graph bound a parameter outside this store")
                })?;
                if buf.len() != grad.len() {
                    return Err(Error::shape("grad_buffer", "gradient length mismatch"));
                }
                for (b, &g) in buf.iter_mut().zip(grad) {
                    *b += g;
                }
            }
        }
        Ok(())
    }

    /// Scale all buffers (e.g. by 1/batch for mean gradients).
    pub fn scale(&mut self, factor: f32) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Global L2 norm across every buffer.
    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Gradient slice for one parameter.
    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.bufs[id.0]
    }
}

/// Bias-corrected Adam with first/second-moment buffers per parameter,
/// updated in the store's fixed registration order.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Completed update count; bias correction uses `step + 1` during a step.
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    /// Fresh optimizer with zeroed moments shaped like the store.
    pub fn new(store: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let shapes: Vec<usize> = (0..store.len()).map(|i| store.get(ParamId(i)).numel()).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update; `grads` must be aligned with `store`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &GradBuffer, lr: f64) -> Result<()> {
        if self.m.len() != store.len() || grads.bufs.len() != store.len() {
            return Err(Error::invalid("adam", "optimizer state does not match the parameter store"));
        }
        let t = self.step + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..store.len() {
            let tensor = store.get_mut(ParamId(i));
            let data = tensor.data_mut();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.bufs[i]);
            for j in 0..data.len() {
                let gj = g[j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                data[j] = (data[j] as f64 - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
        self.step = t;
        Ok(())
    }

    /// Serialize moments and step count as named tensors
    /// (`adam.step`, `adam.m.<param>`, `adam.v.<param>`).
    pub fn snapshot(&self, store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![("adam.step".to_string(), Tensor::full(vec![1], self.step as f32))];
        for i in 0..store.len() {
            let name = store.name(ParamId(i));
            let shape = store.get(ParamId(i)).shape().to_vec();
            out.push((format!("adam.m.{name}"), Tensor::new(shape.clone(), self.m[i].clone()).unwrap()));
            out.push((format!("adam.v.{name}"), Tensor::new(shape, self.v[i].clone()).unwrap()));
        }
        out
    }

    /// Rebuild from a snapshot; every parameter must have both moments.
    pub fn restore(
        store: &ParamStore<f32>,
        beta1: f64,
        beta2: f64,
        eps: f64,
        mut lookup: impl FnMut(&str) -> Option<Tensor<f32>>,
    ) -> Result<Self> {
        let missing = |what: &str| Error::Format {
            path: String::new(),
            detail: format!("optimizer state missing `{what}`"),
        };
        let step_t = lookup("adam.step").ok_or_else(|| missing("adam.step"))?;
        let step = step_t.data().first().copied().unwrap_or(0.0) as u64;
        let mut adam = Adam::new(store, beta1, beta2, eps);
        adam.step = step;
        for i in 0..store.len() {
            let name = store.name(ParamId(i)).to_string();
            for (which, buf) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("adam.{which}.{name}");
                let t = lookup(&key).ok_or_else(|| missing(&key))?;
                if t.numel() != buf.len() {
                    return Err(Error::Format {
                        path: String::new(),
                        detail: format!("`{key}` has {} elements, expected {}", t.numel(), buf.len()),
                    });
                }
                buf.copy_from_slice(t.data());
            }
        }
        Ok(adam)
    }
}
