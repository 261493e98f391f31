//! Shared parameters for asynchronous workers.
//!
//! Readers take an `Arc` snapshot under a short read lock. Writers clone the
//! current parameters, step the optimizer on the clone and swap it in under the
//! write lock, so a snapshot is always either fully before or fully after an
//! update.

use std::sync::{Arc, RwLock};

use r3l_core::networks::{ModelParams, ParamGrads};
use r3l_core::training::{apply_gradients, Adam};
use r3l_core::Result;

#[derive(Debug)]
struct State {
    params: Arc<ModelParams>,
    adam: Adam,
    updates: u64,
}

#[derive(Debug)]
pub struct ParamStore {
    state: RwLock<State>,
    limit: u64,
}

/// Outcome of [`ParamStore::apply`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Applied {
    /// The update counter after applying, and the pre-clip gradient norm.
    Step { update: u64, grad_norm: f64 },
    /// The store already reached its update limit; the gradient was dropped.
    Exhausted,
}

impl ParamStore {
    pub fn new(params: ModelParams, learning_rate: f64, limit: u64) -> Self {
        let adam = Adam::new(&params, learning_rate);
        Self {
            state: RwLock::new(State {
                params: Arc::new(params),
                adam,
                updates: 0,
            }),
            limit,
        }
    }

    /// Consistent view of the parameters and how many updates produced them.
    pub fn snapshot(&self) -> (Arc<ModelParams>, u64) {
        let s = self.state.read().expect("param store lock poisoned");
        (Arc::clone(&s.params), s.updates)
    }

    pub fn updates(&self) -> u64 {
        self.state.read().expect("param store lock poisoned").updates
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    /// Clips `grads` to `max_norm` and applies one optimizer step atomically.
    pub fn apply(&self, grads: &mut ParamGrads, max_norm: f64) -> Result<Applied> {
        let mut s = self.state.write().expect("param store lock poisoned");
        if s.updates >= self.limit {
            return Ok(Applied::Exhausted);
        }
        let mut next = ModelParams::clone(&s.params);
        let grad_norm = apply_gradients(&mut next, &mut s.adam, grads, max_norm)?;
        s.params = Arc::new(next);
        s.updates += 1;
        Ok(Applied::Step {
            update: s.updates,
            grad_norm,
        })
    }

    pub fn into_params(self) -> ModelParams {
        let s = self.state.into_inner().expect("param store lock poisoned");
        Arc::try_unwrap(s.params).unwrap_or_else(|a| ModelParams::clone(&a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use r3l_core::networks::{init_params, ModelKind};

    #[test]
    fn snapshots_are_whole_updates() {
        let p = init_params(ModelKind::R3N, 1);
        let store = ParamStore::new(p.clone(), 1e-2, 2);
        let (before, n0) = store.snapshot();
        assert_eq!(n0, 0);
        let mut g = ParamGrads::zeros_like(&p);
        g.kernels.iter_mut().for_each(|k| k.data_mut().fill(1.0));
        assert!(matches!(store.apply(&mut g.clone(), 40.0).unwrap(), Applied::Step { update: 1, .. }));
        let (after, n1) = store.snapshot();
        assert_eq!(n1, 1);
        assert_eq!(*before, p);
        assert_ne!(*after, p);
        store.apply(&mut g.clone(), 40.0).unwrap();
        assert_eq!(store.apply(&mut g, 40.0).unwrap(), Applied::Exhausted);
        assert_eq!(store.updates(), 2);
    }

    #[test]
    fn concurrent_readers_see_consistent_params() {
        let p = init_params(ModelKind::R3N, 2);
        let store = ParamStore::new(p.clone(), 1e-2, 20);
        let mut g = ParamGrads::zeros_like(&p);
        g.kernels.iter_mut().for_each(|k| k.data_mut().fill(1.0));
        g.biases.iter_mut().for_each(|k| k.data_mut().fill(1.0));
        std::thread::scope(|s| {
            s.spawn(|| {
                for _ in 0..20 {
                    store.apply(&mut g.clone(), 1e9).unwrap();
                }
            });
            s.spawn(|| {
                for _ in 0..200 {
                    let (snap, _) = store.snapshot();
                    // Adam moves every coordinate by the same amount per step with a
                    // constant unit gradient, so all biases stay equal within a snapshot.
                    let b0 = snap.layers[0].bias.data()[0];
                    for l in &snap.layers {
                        assert!(l.bias.data().iter().all(|&b| (b - b0).abs() < 1e-12));
                    }
                }
            });
        });
        assert_eq!(store.updates(), 20);
    }
}
