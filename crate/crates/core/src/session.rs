//! A [`Session`] is one forward computation: a fresh tape plus lazy bindings
//! of named parameters onto it. Training sessions additionally carry the
//! noise source used by the differentiable quantizer surrogate.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, NodeId, ParamStore, Tape};

pub struct Session<'m> {
    pub tape: Tape,
    store: &'m ParamStore,
    bound: BTreeMap<String, NodeId>,
    rng: Option<ChaCha8Rng>,
}

impl<'m> Session<'m> {
    /// Inference session: deterministic, no noise source.
    pub fn infer(store: &'m ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            rng: None,
        }
    }

    /// Training session with a seeded noise source.
    pub fn train(store: &'m ParamStore, rng: ChaCha8Rng) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            rng: Some(rng),
        }
    }

    /// Inference session adopting an existing tape. Used by numeric gradient
    /// probes, which own the tape and the perturbed inputs.
    pub fn over(tape: Tape, store: &'m ParamStore) -> Self {
        Session {
            tape,
            store,
            bound: BTreeMap::new(),
            rng: None,
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Pre-binds a name to a node already on the tape, shadowing the store
    /// value. Lets callers route an externally built input (e.g. a gradient
    /// probe's perturbed copy) through code that looks parameters up by name.
    pub fn bind_param(&mut self, name: &str, id: NodeId) {
        assert!(
            self.store.get(name).is_some(),
            "bind_param: unknown parameter {:?}",
            name
        );
        self.bound.insert(name.to_string(), id);
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    /// Binds the named parameter onto the tape (once per session).
    /// A missing name is a wiring bug, not a data error.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let p = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {:?}", name));
        let id = self.tape.input(p.value.clone());
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Uniform (−0.5, 0.5) noise; only valid in training sessions.
    pub fn uniform_noise(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let rng = self
            .rng
            .as_mut()
            .expect("uniform_noise outside a training session");
        Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() - 0.5)
    }

    /// Extracts gradients for every bound parameter. Parameters bound but
    /// unreached by the loss get zero gradients.
    pub fn param_grads(&self, grads: &Gradients) -> HashMap<String, Array2<f64>> {
        let mut out = HashMap::new();
        for (name, &id) in &self.bound {
            let g = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(self.tape.shape(id)));
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}
