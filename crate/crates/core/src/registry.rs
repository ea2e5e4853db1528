//! Named registries for problems, models, and hyperparameter sets.
//!
//! Registered entries are immutable: re-registering a name with a different
//! value is an error, re-registering the identical value is a no-op. This is
//! what lets a (problem, model, hparams_set) triple stay a reproducibility key
//! while the codebase keeps moving.

use std::collections::BTreeMap;
use std::sync::Mutex;

use crate::error::{Error, Result};

pub struct Registry<T> {
    kind: &'static str,
    entries: Mutex<BTreeMap<String, T>>,
}

impl<T: Clone + PartialEq> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn register(&self, name: &str, value: T) -> Result<()> {
        let mut entries = self.entries.lock().expect("registry poisoned");
        match entries.get(name) {
            Some(existing) if *existing != value => Err(Error::RegistryConflict(format!(
                "{} {:?} already registered with different contents",
                self.kind, name
            ))),
            Some(_) => Ok(()),
            None => {
                entries.insert(name.to_string(), value);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<T> {
        let entries = self.entries.lock().expect("registry poisoned");
        entries.get(name).cloned().ok_or_else(|| Error::UnknownName {
            kind: self.kind,
            name: name.to_string(),
        })
    }

    /// Registered names, sorted.
    pub fn names(&self) -> Vec<String> {
        let entries = self.entries.lock().expect("registry poisoned");
        entries.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_identical_registration_is_ok() {
        let reg = Registry::new("thing");
        reg.register("a", 1).unwrap();
        reg.register("a", 1).unwrap();
        assert_eq!(reg.get("a").unwrap(), 1);
    }

    #[test]
    fn duplicate_conflicting_registration_errors() {
        let reg = Registry::new("thing");
        reg.register("a", 1).unwrap();
        let err = reg.register("a", 2).unwrap_err();
        assert!(matches!(err, Error::RegistryConflict(_)));
    }

    #[test]
    fn empty_registry_lists_nothing() {
        let reg: Registry<u32> = Registry::new("thing");
        assert!(reg.names().is_empty());
    }

    #[test]
    fn names_are_sorted() {
        let reg = Registry::new("thing");
        reg.register("b", 2).unwrap();
        reg.register("a", 1).unwrap();
        assert_eq!(reg.names(), vec!["a".to_string(), "b".to_string()]);
    }
}
