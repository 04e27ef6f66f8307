//! Name-keyed registries of interchangeable strategies.
//!
//! A strategy is created from a spec string `name` or `name:arg`; the part after the
//! colon is handed to the factory unparsed.

use std::collections::BTreeMap;

use crate::error::{config, Result};

type Factory<T> = Box<dyn Fn(Option<&str>) -> Result<Box<T>> + Send + Sync>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, (&'static str, Factory<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &'static str, description: &'static str, factory: F)
    where
        F: Fn(Option<&str>) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.entries.insert(name, (description, Box::new(factory)));
    }

    pub fn create(&self, spec: &str) -> Result<Box<T>> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let (_, factory) = self.entries.get(name).ok_or_else(|| {
            config(format!(
                "unknown {} '{name}' (known: {})",
                self.kind,
                self.names().join(", ")
            ))
        })?;
        factory(arg)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn describe(&self) -> Vec<(&'static str, &'static str)> {
        self.entries.iter().map(|(k, (d, _))| (*k, *d)).collect()
    }

    pub fn contains(&self, spec: &str) -> bool {
        let name = spec.split_once(':').map_or(spec, |(n, _)| n);
        self.entries.contains_key(name)
    }
}
