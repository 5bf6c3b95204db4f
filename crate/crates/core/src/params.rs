//! Named parameter groups.
//!
//! Every parameter struct implements [`ParamGroup`], which walks its tensors
//! in declaration order under dotted names (`localizer.gru.fwd.w_z`). The
//! walk order is the registry order used for checkpoints, the optimizer and
//! gradient checking. Gradients are stored in the same struct type.

use crate::tensor::{Real, Tensor};

pub trait ParamGroup<F: Real>: Sized {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<F>));
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>));
    fn zeros_like(&self) -> Self;

    fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.for_each("", &mut |n, t| out.push((n.to_string(), t)));
        out
    }

    fn num_elements(&self) -> usize {
        let mut n = 0;
        self.for_each("", &mut |_, t| n += t.len());
        n
    }

    /// All values concatenated in registry order.
    fn flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_elements());
        self.for_each("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    fn set_flat(&mut self, values: &[F]) {
        let mut off = 0;
        self.for_each_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        });
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each("", &mut |_, t| ok &= t.is_finite());
        ok
    }
}

impl<F: Real> ParamGroup<F> for Tensor<F> {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<F>)) {
        f(prefix, self)
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f(prefix, self)
    }

    fn zeros_like(&self) -> Self {
        Tensor::zeros(self.shape())
    }
}

#[doc(hidden)]
pub fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

/// Declares a parameter struct generic over the float type. Every field type
/// must itself be a `ParamGroup` taking the float type as its only generic.
#[macro_export]
macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident { $($field:ident : $ty:ident),* $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<F> {
            $(pub $field: $ty<F>,)*
        }

        impl<F: $crate::tensor::Real> $crate::params::ParamGroup<F> for $name<F> {
            fn for_each<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a $crate::tensor::Tensor<F>),
            ) {
                $(
                    $crate::params::ParamGroup::for_each(
                        &self.$field,
                        &$crate::params::join(prefix, stringify!($field)),
                        f,
                    );
                )*
            }

            fn for_each_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor<F>),
            ) {
                $(
                    $crate::params::ParamGroup::for_each_mut(
                        &mut self.$field,
                        &$crate::params::join(prefix, stringify!($field)),
                        f,
                    );
                )*
            }

            fn zeros_like(&self) -> Self {
                Self {
                    $($field: $crate::params::ParamGroup::zeros_like(&self.$field),)*
                }
            }
        }
    };
}
