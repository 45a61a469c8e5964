//! Name-keyed registries of interchangeable strategies.
//!
//! Every family of variants in the pipeline (triplet objectives, feature
//! fusion, position encoders, occluders) sits behind a trait object and is
//! looked up here by the name used in run configs and on the command line.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{DropError, Result};

/// Constructor for a registered strategy. `A` carries whatever the variant
/// needs at build time (parameter scopes, channel counts, ...).
pub type Constructor<T, A> = fn(&A) -> Result<Box<T>>;

pub struct Registry<T: ?Sized, A = ()> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Constructor<T, A>>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `ctor` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: &'static str, ctor: Constructor<T, A>) -> &mut Self {
        self.entries.insert(name, ctor);
        self
    }

    pub fn with(mut self, name: &'static str, ctor: Constructor<T, A>) -> Self {
        self.register(name, ctor);
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    /// Fails with [`DropError::UnknownStrategy`] if nothing is registered under `name`.
    pub fn check(&self, name: &str) -> Result<()> {
        if self.contains(name) {
            Ok(())
        } else {
            Err(DropError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
        }
    }

    pub fn create(&self, name: &str, args: &A) -> Result<Box<T>> {
        self.check(name)?;
        (self.entries[name])(args)
    }
}

impl<T: ?Sized, A> fmt::Debug for Registry<T, A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }

    struct Hello;
    impl Greeter for Hello {
        fn greet(&self) -> String {
            "hello".into()
        }
    }

    struct Repeat(usize);
    impl Greeter for Repeat {
        fn greet(&self) -> String {
            "hi".repeat(self.0)
        }
    }

    fn registry() -> Registry<dyn Greeter, usize> {
        Registry::<dyn Greeter, usize>::new("greeter")
            .with("hello", |_| Ok(Box::new(Hello)))
            .with("repeat", |n| Ok(Box::new(Repeat(*n))))
    }

    #[test]
    fn create_by_name() {
        let reg = registry();
        assert_eq!(reg.create("hello", &0).unwrap().greet(), "hello");
        assert_eq!(reg.create("repeat", &3).unwrap().greet(), "hihihi");
        assert_eq!(reg.names(), vec!["hello", "repeat"]);
    }

    #[test]
    fn unknown_name_lists_alternatives() {
        let err = registry().create("bogus", &0).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("hello, repeat"), "{msg}");
        assert_eq!(err.exit_code(), 1);
    }
}
