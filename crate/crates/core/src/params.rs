//! Named parameter trees.
//!
//! Model parameters are plain structs generic over their leaf type: with
//! `T = Tensor` they hold weights, with `T = Var` they are the same weights
//! bound to a [`Tape`]. [`ParamTree`] walks the leaves in a fixed order with
//! dotted names (`vit.layers.0.w_q`), which is the order used by the
//! optimizer state and by checkpoints.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub trait ParamTree<T> {
    type Mapped<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U>;
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        let mut s = String::with_capacity(prefix.len() + 1 + name.len());
        s.push_str(prefix);
        s.push('.');
        s.push_str(name);
        s
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    type Mapped<U> = Vec<P::Mapped<U>>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U> {
        self.iter()
            .enumerate()
            .map(|(i, p)| p.map_named(&join(prefix, &alloc::format!("{i}")), f))
            .collect()
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &alloc::format!("{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &alloc::format!("{i}")), f);
        }
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Option<P> {
    type Mapped<U> = Option<P::Mapped<U>>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U> {
        self.as_ref().map(|p| p.map_named(prefix, f))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// Implements [`ParamTree`] for a struct whose fields are either leaves
/// (`T`) or nested trees.
macro_rules! param_tree {
    ($name:ident { leaves: [$($leaf:ident),* $(,)?] $(, nodes: [$($node:ident),* $(,)?])? $(,)? }) => {
        impl<T> $crate::params::ParamTree<T> for $name<T> {
            type Mapped<U> = $name<U>;

            fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($leaf: f(&$crate::params::join(prefix, stringify!($leaf)), &self.$leaf),)*
                    $($($node: self.$node.map_named(&$crate::params::join(prefix, stringify!($node)), f),)*)?
                }
            }

            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
                $(f(&$crate::params::join(prefix, stringify!($leaf)), &self.$leaf);)*
                $($(self.$node.visit(&$crate::params::join(prefix, stringify!($node)), f);)*)?
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&$crate::params::join(prefix, stringify!($leaf)), &mut self.$leaf);)*
                $($(self.$node.visit_mut(&$crate::params::join(prefix, stringify!($node)), f);)*)?
            }
        }
    };
}
pub(crate) use param_tree;

/// Dense layer `y = x·W + b` with `W: [in × out]`, `b: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}
param_tree!(Linear { leaves: [weight, bias] });

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

/// Bind every leaf of a tree to a tape as a trainable input.
pub fn bind<P: ParamTree<Tensor>>(tree: &P, tape: &mut Tape) -> Result<P::Mapped<Var>> {
    let mut err = None;
    let bound = tree.map_named("", &mut |_, t| match tape.param(t.clone()) {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            Var::placeholder()
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(bound),
    }
}

/// Leaves of a tree in visit order.
pub fn flatten<T: Clone, P: ParamTree<T>>(tree: &P) -> Vec<(String, T)> {
    let mut out = Vec::new();
    tree.visit("", &mut |name, t| out.push((String::from(name), t.clone())));
    out
}

/// Total number of scalar parameters.
pub fn count<P: ParamTree<Tensor>>(tree: &P) -> usize {
    let mut n = 0;
    tree.visit("", &mut |_, t| n += t.len());
    n
}

impl Var {
    pub(crate) fn placeholder() -> Self {
        // never dereferenced: only returned alongside an error
        crate::tensor::Var::from_index(usize::MAX)
    }
}
