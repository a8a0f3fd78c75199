//! Parameter plumbing: named parameter groups, moving-average updates,
//! hashing, and the two optimizers used by the training loops.

use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A collection of named tensors. Implementations must visit parameters in
/// a stable order; two structurally identical groups visit the same names
/// with the same shapes in the same order.
pub trait ParamGroup {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// Visit a nested group with a dotted name prefix.
pub fn visit_prefixed(prefix: &str, group: &dyn ParamGroup, f: &mut dyn FnMut(&str, &Tensor)) {
    group.visit(&mut |name, t| f(&format!("{prefix}.{name}"), t));
}

pub fn visit_prefixed_mut(
    prefix: &str,
    group: &mut dyn ParamGroup,
    f: &mut dyn FnMut(&str, &mut Tensor),
) {
    group.visit_mut(&mut |name, t| f(&format!("{prefix}.{name}"), t));
}

pub fn collect(group: &dyn ParamGroup) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    group.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn param_count(group: &dyn ParamGroup) -> usize {
    let mut n = 0;
    group.visit(&mut |_, t| n += t.len());
    n
}

/// SHA-256 over names, shapes, and raw little-endian contents. Used by the
/// freeze-contract tests and checkpoints.
pub fn param_hash(group: &dyn ParamGroup) -> String {
    let mut hasher = Sha256::new();
    group.visit(&mut |name, t| {
        hasher.update(name.as_bytes());
        hasher.update((t.rows() as u64).to_le_bytes());
        hasher.update((t.cols() as u64).to_le_bytes());
        hasher.update(t.to_le_bytes());
    });
    hex(&hasher.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `target <- momentum * target + (1 - momentum) * source`, element by
/// element. This is both the indicator's EMA teacher update and the
/// bootstrap branch's WMA sync. Fails if the two groups are not
/// structurally identical.
pub fn moving_average(
    target: &mut dyn ParamGroup,
    source: &dyn ParamGroup,
    momentum: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::config(format!(
            "momentum must be in [0, 1], got {momentum}"
        )));
    }
    let src = collect(source);
    let mut idx = 0;
    let mut err: Option<Error> = None;
    target.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match src.get(idx) {
            Some((sname, s)) if sname == name && s.shape() == t.shape() => {
                for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                    *tv = momentum * *tv + (1.0 - momentum) * sv;
                }
            }
            Some((sname, s)) => {
                err = Some(Error::config(format!(
                    "parameter structure mismatch: target '{name}' {:?} vs source '{sname}' {:?}",
                    t.shape(),
                    s.shape()
                )));
            }
            None => {
                err = Some(Error::config(
                    "parameter structure mismatch: source has fewer tensors".to_string(),
                ));
            }
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != src.len() {
        return Err(Error::config(
            "parameter structure mismatch: source has more tensors".to_string(),
        ));
    }
    Ok(())
}

/// Leaves registered for a parameter group, in visit order; pairs the
/// structured node handles used by forward code with the flat list the
/// optimizer consumes.
pub struct TrackedLeaves {
    pub ids: Vec<NodeId>,
}

impl TrackedLeaves {
    pub fn track(graph: &mut Graph, group: &dyn ParamGroup) -> Self {
        let mut ids = Vec::new();
        group.visit(&mut |_, t| ids.push(graph.leaf(t)));
        TrackedLeaves { ids }
    }

    /// Gradients aligned with visit order; zeros where the loss did not
    /// touch a parameter.
    pub fn grads(&self, graph: &Graph, gradients: &Gradients) -> Vec<Tensor> {
        self.ids
            .iter()
            .map(|&id| gradients.wrt_or_zeros(id, graph.value(id).shape()))
            .collect()
    }
}

/// Rescale gradients in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| g.frob_norm().powi(2)).sum::<f64>().sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    total
}

/// Per-step parameter updaters. `begin_step` sees every gradient at once
/// (clipping, schedules, state setup); `update` is then applied to each
/// parameter in visit order via [`apply_step`].
pub trait Optimizer {
    fn begin_step(&mut self, grads: &mut [Tensor]);
    fn update(&mut self, idx: usize, param: &mut Tensor, grad: &Tensor);
}

/// Apply one optimizer step to a parameter group with gradients aligned to
/// its visit order.
pub fn apply_step(opt: &mut dyn Optimizer, group: &mut dyn ParamGroup, grads: &mut [Tensor]) {
    opt.begin_step(grads);
    let mut i = 0;
    group.visit_mut(&mut |_, t| {
        opt.update(i, t, &grads[i]);
        i += 1;
    });
    assert_eq!(i, grads.len(), "gradient list does not match parameter group");
}

/// Plain stochastic gradient descent with linear warmup, exponential decay,
/// and optional global-norm clipping.
pub struct Sgd {
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Per-step multiplicative decay applied after warmup completes.
    pub decay: f64,
    pub clip_norm: Option<f64>,
    step: usize,
    lr_now: f64,
}

impl Sgd {
    pub fn new(base_lr: f64, warmup_steps: usize, decay: f64, clip_norm: Option<f64>) -> Self {
        Sgd {
            base_lr,
            warmup_steps,
            decay,
            clip_norm,
            step: 0,
            lr_now: 0.0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        let t = self.step;
        let warm = if self.warmup_steps > 0 {
            ((t + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let decay_steps = t.saturating_sub(self.warmup_steps) as f64;
        self.base_lr * warm * self.decay.powf(decay_steps)
    }
}

impl Optimizer for Sgd {
    fn begin_step(&mut self, grads: &mut [Tensor]) {
        if let Some(max) = self.clip_norm {
            clip_grad_norm(grads, max);
        }
        self.lr_now = self.current_lr();
        self.step += 1;
    }

    fn update(&mut self, _idx: usize, param: &mut Tensor, grad: &Tensor) {
        param.add_scaled(grad, -self.lr_now);
    }
}

/// Adam with bias correction (the "adaptive-moment" optimizer of the fusion
/// and bootstrap stages).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    bias1: f64,
    bias2: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
            bias1: 1.0,
            bias2: 1.0,
        }
    }
}

impl Optimizer for Adam {
    fn begin_step(&mut self, grads: &mut [Tensor]) {
        if self.m.is_empty() {
            self.m = grads
                .iter()
                .map(|g| Tensor::zeros(g.rows(), g.cols()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), grads.len(), "optimizer reused across models");
        self.t += 1;
        self.bias1 = 1.0 - self.beta1.powi(self.t as i32);
        self.bias2 = 1.0 - self.beta2.powi(self.t as i32);
    }

    fn update(&mut self, idx: usize, param: &mut Tensor, grad: &Tensor) {
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        for j in 0..grad.len() {
            let gj = grad.data()[j];
            m.data_mut()[j] = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
            v.data_mut()[j] = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
            let mhat = m.data()[j] / self.bias1;
            let vhat = v.data()[j] / self.bias2;
            param.data_mut()[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Pair {
        a: Tensor,
        b: Tensor,
    }

    impl ParamGroup for Pair {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("a", &self.a);
            f("b", &self.b);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("a", &mut self.a);
            f("b", &mut self.b);
        }
    }

    #[test]
    fn moving_average_endpoints() {
        let mut t = Pair {
            a: Tensor::filled(1, 2, 1.0),
            b: Tensor::filled(2, 1, 1.0),
        };
        let s = Pair {
            a: Tensor::filled(1, 2, 0.0),
            b: Tensor::filled(2, 1, 0.0),
        };
        moving_average(&mut t, &s, 1.0).unwrap();
        assert_eq!(t.a.data(), &[1.0, 1.0]);
        moving_average(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.a.data(), &[0.0, 0.0]);
        t.a = Tensor::filled(1, 2, 1.0);
        moving_average(&mut t, &s, 0.99).unwrap();
        assert!((t.a.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn moving_average_rejects_structure_mismatch() {
        let mut t = Pair {
            a: Tensor::filled(1, 2, 1.0),
            b: Tensor::filled(2, 1, 1.0),
        };
        let s = Pair {
            a: Tensor::filled(1, 3, 0.0),
            b: Tensor::filled(2, 1, 0.0),
        };
        assert!(moving_average(&mut t, &s, 0.5).is_err());
    }

    #[test]
    fn param_hash_tracks_contents() {
        let p1 = Pair {
            a: Tensor::filled(1, 2, 1.0),
            b: Tensor::filled(2, 1, 2.0),
        };
        let mut p2 = Pair {
            a: Tensor::filled(1, 2, 1.0),
            b: Tensor::filled(2, 1, 2.0),
        };
        assert_eq!(param_hash(&p1), param_hash(&p2));
        p2.b.set(0, 0, 2.5);
        assert_ne!(param_hash(&p1), param_hash(&p2));
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = vec![Tensor::filled(1, 4, 3.0)]; // norm 6
        let pre = clip_grad_norm(&mut grads, 1.0);
        assert!((pre - 6.0).abs() < 1e-12);
        let post: f64 = grads[0].frob_norm();
        assert!((post - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sgd_schedule_warms_up_then_decays() {
        let mut opt = Sgd::new(1.0, 4, 0.5, None);
        let mut lrs = Vec::new();
        for _ in 0..7 {
            lrs.push(opt.current_lr());
            opt.begin_step(&mut [Tensor::zeros(1, 1)]);
        }
        assert!((lrs[0] - 0.25).abs() < 1e-12);
        assert!((lrs[3] - 1.0).abs() < 1e-12);
        assert!((lrs[4] - 1.0).abs() < 1e-12, "decay starts after warmup");
        assert!((lrs[5] - 0.5).abs() < 1e-12);
        assert!((lrs[6] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn apply_step_walks_group_in_visit_order() {
        let mut group = Pair {
            a: Tensor::filled(1, 2, 1.0),
            b: Tensor::filled(2, 1, 1.0),
        };
        let mut opt = Sgd::new(0.5, 0, 1.0, None);
        let mut grads = vec![Tensor::filled(1, 2, 2.0), Tensor::filled(2, 1, 4.0)];
        apply_step(&mut opt, &mut group, &mut grads);
        assert_eq!(group.a.data(), &[0.0, 0.0]);
        assert_eq!(group.b.data(), &[-1.0, -1.0]);
    }
}
