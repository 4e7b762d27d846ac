//! Named parameters and the per-step forward context.
//!
//! All model weights live in one [`ParamStore`] keyed by dotted path
//! (`asr.enc.0.mhsa.wq`, `mt.src_emb.weight`, ...). Freezing is a flag on
//! the parameter: frozen parameters never receive optimizer updates but
//! may still sit on the gradient path to trainable ones.

use std::cell::RefCell;
use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::graph::{Graph, Tx};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Ordered map of named parameters. BTreeMap keeps iteration order
/// deterministic, which the reproducibility contract relies on.
#[derive(Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.map.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.map.insert(name.to_string(), Param { tensor, frozen: false });
    }

    pub fn get(&self, name: &str) -> &Param {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn set_tensor(&mut self, name: &str, tensor: Tensor) {
        let p = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"));
        assert_eq!(p.tensor.shape, tensor.shape, "shape change for {name}");
        p.tensor = tensor;
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .frozen = frozen;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    /// Freeze every parameter whose name starts with one of the prefixes;
    /// everything else becomes trainable.
    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) {
        for (name, p) in self.map.iter_mut() {
            p.frozen = prefixes.iter().any(|pre| name.starts_with(pre));
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.map
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Merge another store in; colliding names are overwritten.
    pub fn absorb(&mut self, other: ParamStore) {
        for (name, p) in other.map {
            self.map.insert(name, p);
        }
    }

    /// Sub-store of parameters under a prefix.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    /// SHA-256 of one tensor's dtype tag, shape, and raw value bytes.
    pub fn tensor_hash(t: &Tensor) -> String {
        let mut h = Sha256::new();
        h.update([t.dtype.tag()]);
        for &d in &t.shape {
            h.update((d as u64).to_le_bytes());
        }
        for &v in &t.data {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Name -> tensor hash for every parameter under a prefix.
    pub fn hashes(&self, prefix: &str) -> BTreeMap<String, String> {
        self.map
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, p)| (n.clone(), Self::tensor_hash(&p.tensor)))
            .collect()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One forward pass over a store: lazily registers each parameter as a
/// graph leaf (once per tape) and remembers the node id so gradients can
/// be read back by name.
pub struct Ctx<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    ids: RefCell<BTreeMap<String, usize>>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: Graph, store: &'a ParamStore) -> Ctx<'a> {
        Ctx { g, store, ids: RefCell::new(BTreeMap::new()) }
    }

    pub fn param(&self, name: &str) -> Tx {
        if let Some(&id) = self.ids.borrow().get(name) {
            return self.g.tx(id);
        }
        let t = self.store.get(name).tensor.clone();
        let tx = self.g.leaf(t);
        self.ids.borrow_mut().insert(name.to_string(), tx.id);
        tx
    }

    /// Gradients keyed by parameter name for every parameter that was
    /// touched this pass and is reachable from the loss.
    pub fn grads(&self, loss: &Tx) -> BTreeMap<String, Tensor> {
        let all = self.g.backward(loss);
        let mut out = BTreeMap::new();
        for (name, &id) in self.ids.borrow().iter() {
            if let Some(g) = &all[id] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dtype;

    #[test]
    fn freeze_prefixes_sets_flags() {
        let mut s = ParamStore::new();
        s.insert("asr.w", Tensor::scalar(1.0, Dtype::F64));
        s.insert("exporter.w", Tensor::scalar(2.0, Dtype::F64));
        s.freeze_prefixes(&["asr."]);
        assert!(s.get("asr.w").frozen);
        assert!(!s.get("exporter.w").frozen);
        assert_eq!(s.trainable_names(), vec!["exporter.w"]);
    }

    #[test]
    fn tensor_hash_is_value_sensitive() {
        let a = Tensor::scalar(1.0, Dtype::F64);
        let b = Tensor::scalar(1.0 + 1e-15, Dtype::F64);
        assert_ne!(ParamStore::tensor_hash(&a), ParamStore::tensor_hash(&b));
        assert_eq!(ParamStore::tensor_hash(&a), ParamStore::tensor_hash(&a.clone()));
    }
}
