//! Trainable parameters and per-forward leaf bindings.
//!
//! Modules own their parameters as named `Arc` buffers. A forward pass does
//! not touch them directly: it goes through a [`Binding`], which lifts each
//! parameter into a leaf tensor on the caller's tape. Frozen bindings make
//! untracked leaves on the fly; trainable bindings pre-create one tracked
//! leaf per parameter so gradients accumulate across reuse and can be read
//! back in parameter order after `backward`.
//!
//! Buffers are `Send + Sync`, so concurrent forwards over one module from
//! several threads are safe; updates go through `&mut` access and
//! copy-on-write, leaving in-flight readers untouched.

use crate::error::{Error, Result};
use crate::tensor::{Buf, DType, Tensor};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct Param {
    id: u64,
    name: String,
    shape: Vec<usize>,
    value: Arc<Buf>,
}

impl Param {
    pub fn new(name: impl Into<String>, tensor: &Tensor) -> Param {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            shape: tensor.shape().to_vec(),
            value: Arc::clone(tensor.buf()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rename(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn dtype(&self) -> DType {
        self.value.dtype()
    }

    pub fn value(&self) -> &Arc<Buf> {
        &self.value
    }

    /// Replace the buffer. Copy-on-write: clones only if shared.
    pub fn update(&mut self, f: impl FnOnce(&mut Buf)) {
        f(Arc::make_mut(&mut self.value));
    }

    pub fn set_value(&mut self, buf: Buf) -> Result<()> {
        if buf.len() != self.numel() {
            return Err(Error::InvalidShape {
                op: "param-set",
                shape: self.shape.clone(),
                reason: format!("buffer length {} != {}", buf.len(), self.numel()),
            });
        }
        self.value = Arc::new(buf);
        Ok(())
    }

    /// Fresh ids for a deep-copied module so a binding cannot confuse the
    /// copy with the original.
    pub fn reissue_id(&mut self) {
        self.id = NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn untracked_leaf(&self) -> Tensor {
        Tensor::leaf(&self.shape, Arc::clone(&self.value), false).expect("param shape consistent")
    }

    fn tracked_leaf(&self) -> Tensor {
        Tensor::leaf(&self.shape, Arc::clone(&self.value), true)
            .expect("param shape consistent")
    }
}

/// Anything that owns parameters, visited in a stable order.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn params_flat(&self) -> Vec<(String, Vec<usize>, Arc<Buf>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            out.push((p.name().to_string(), p.shape().to_vec(), Arc::clone(p.value())))
        });
        out
    }
}

enum Mode {
    Frozen,
    Trainable(HashMap<u64, Tensor>),
}

/// Leaf factory for one forward pass.
pub struct Binding {
    mode: Mode,
    overrides: HashMap<u64, Tensor>,
}

impl Binding {
    /// Untracked leaves; for inference and capture.
    pub fn frozen() -> Binding {
        Binding {
            mode: Mode::Frozen,
            overrides: HashMap::new(),
        }
    }

    /// One tracked leaf per parameter of `module`.
    pub fn trainable(module: &impl Module) -> Binding {
        let mut map = HashMap::new();
        module.visit_params(&mut |p| {
            map.insert(p.id(), p.tracked_leaf());
        });
        Binding {
            mode: Mode::Trainable(map),
            overrides: HashMap::new(),
        }
    }

    /// Substitute a specific parameter's leaf (used by gradient checks).
    pub fn override_param(&mut self, param: &Param, leaf: Tensor) {
        self.overrides.insert(param.id(), leaf);
    }

    pub fn leaf(&self, p: &Param) -> Tensor {
        if let Some(t) = self.overrides.get(&p.id()) {
            return t.clone();
        }
        match &self.mode {
            Mode::Frozen => p.untracked_leaf(),
            Mode::Trainable(map) => map
                .get(&p.id())
                .unwrap_or_else(|| panic!("parameter '{}' not bound", p.name()))
                .clone(),
        }
    }

    /// Gradients in `module`'s visit order. `None` for parameters that no
    /// gradient reached.
    pub fn grads(&self, module: &impl Module) -> Vec<Option<Buf>> {
        let mut out = Vec::new();
        module.visit_params(&mut |p| {
            let g = match &self.mode {
                Mode::Trainable(map) => map.get(&p.id()).and_then(|t| t.grad()),
                Mode::Frozen => None,
            };
            out.push(g);
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    struct Pair {
        a: Param,
        b: Param,
    }

    impl Module for Pair {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.a);
            f(&self.b);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.a);
            f(&mut self.b);
        }
    }

    fn pair() -> Pair {
        let mut rng = Rng::new(1);
        Pair {
            a: Param::new("a", &Tensor::randn(&[2, 2], 1.0, &mut rng, DType::F64)),
            b: Param::new("b", &Tensor::randn(&[2], 1.0, &mut rng, DType::F64)),
        }
    }

    #[test]
    fn shared_leaf_accumulates_across_uses() {
        let m = pair();
        let bind = Binding::trainable(&m);
        let x = bind.leaf(&m.a);
        // loss = sum(a) + sum(a): grad must be 2 everywhere
        let loss = x.sum_all().unwrap().add(&bind.leaf(&m.a).sum_all().unwrap()).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        let grads = bind.grads(&m);
        assert_eq!(grads[0].as_ref().unwrap().to_f64_vec(), vec![2.0; 4]);
        assert!(grads[1].is_none());
    }

    #[test]
    fn frozen_leaves_record_nothing() {
        let m = pair();
        let bind = Binding::frozen();
        let y = bind.leaf(&m.a).sum_all().unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn copy_on_write_update_leaves_clones_untouched() {
        let mut m = pair();
        let snapshot = Arc::clone(m.a.value());
        m.a.update(|buf| buf.set(0, 99.0));
        assert_eq!(snapshot.get(0), snapshot.get(0));
        assert_ne!(m.a.value().get(0), snapshot.get(0));
    }
}
