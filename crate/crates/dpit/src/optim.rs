//! Adam optimizer over named `Var`s, with plain gradient accumulation. All
//! state lives in f64 tensors; updates are applied in place via `Var::set`.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    t: usize,
    // First/second moment per parameter, allocated on first step.
    state: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, num_params: usize) -> Self {
        Self {
            cfg,
            t: 0,
            state: vec![None; num_params],
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update over `vars`, using `grads[i]` for `vars[i]`. Parameters with
    /// no gradient entry are left untouched (their moments do not advance).
    pub fn step(&mut self, vars: &[(String, Var)], grads: &[Option<Tensor>]) -> Result<()> {
        assert_eq!(vars.len(), self.state.len());
        assert_eq!(vars.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, ((_, var), grad)) in vars.iter().zip(grads).enumerate() {
            let Some(g) = grad else { continue };
            // Detach so the optimizer state does not keep the autodiff graph
            // of every past step alive.
            let g = g.detach();
            let (m, v) = match self.state[i].take() {
                Some(mv) => mv,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.cfg.beta1)? + (&g * (1.0 - self.cfg.beta1))?)?.detach();
            let v = ((v * self.cfg.beta2)? + ((&g * &g)? * (1.0 - self.cfg.beta2))?)?.detach();
            let m_hat = (&m / c1)?;
            let v_hat = (&v / c2)?;
            let step = ((m_hat * self.cfg.lr)? / (v_hat.sqrt()? + self.cfg.eps)?)?;
            var.set(&(var.as_tensor() - step)?)?;
            self.state[i] = Some((m, v));
        }
        Ok(())
    }
}

/// Pull gradients for `vars` out of a backward pass, in parameter order.
pub fn collect_grads(vars: &[(String, Var)], store: &GradStore) -> Vec<Option<Tensor>> {
    vars.iter().map(|(_, v)| store.get(v).cloned()).collect()
}

/// Add `new` into `acc` elementwise (micro-batch gradient accumulation).
pub fn accumulate(acc: &mut Vec<Option<Tensor>>, new: &[Option<Tensor>]) -> Result<()> {
    if acc.is_empty() {
        acc.extend(new.iter().cloned());
        return Ok(());
    }
    assert_eq!(acc.len(), new.len());
    for (a, n) in acc.iter_mut().zip(new) {
        *a = match (a.take(), n) {
            (Some(a), Some(n)) => Some((a + n)?),
            (Some(a), None) => Some(a),
            (None, Some(n)) => Some(n.clone()),
            (None, None) => None,
        };
    }
    Ok(())
}

/// Divide every accumulated gradient by `n` (averaging micro-batches).
pub fn scale_grads(acc: &mut [Option<Tensor>], n: f64) -> Result<()> {
    for g in acc.iter_mut() {
        if let Some(t) = g.take() {
            *g = Some((t / n)?);
        }
    }
    Ok(())
}
