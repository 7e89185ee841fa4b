//! Named parameter collections, shared by optimisers, checkpoints and tests.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A fixed, ordered set of named tensors.
///
/// Both accessors must list the same names in the same order; gradients of a
/// parameter set are stored in a value of the same type.
pub trait ParamSet<T: Scalar> {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Sum of squares over every tensor, in listing order.
    fn sum_sq(&self) -> T {
        self.named().iter().fold(T::zero(), |acc, (_, t)| acc + t.sum_sq())
    }

    fn scale_all(&mut self, s: T) {
        for (_, t) in self.named_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Prefixes every name of `inner` with `prefix.`.
pub fn prefixed<'a, T: Scalar>(prefix: &str, inner: Vec<(String, &'a Tensor<T>)>) -> Vec<(String, &'a Tensor<T>)> {
    inner.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

pub fn prefixed_mut<'a, T: Scalar>(
    prefix: &str,
    inner: Vec<(String, &'a mut Tensor<T>)>,
) -> Vec<(String, &'a mut Tensor<T>)> {
    inner.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Implements [`ParamSet`] for a struct generic over `T` by listing its tensor fields.
#[macro_export]
macro_rules! impl_param_set {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::scalar::Scalar> $crate::params::ParamSet<T> for $ty<T> {
            fn named(&self) -> Vec<(String, &$crate::tensor::Tensor<T>)> {
                vec![$((stringify!($field).to_string(), &self.$field)),*]
            }
            fn named_mut(&mut self) -> Vec<(String, &mut $crate::tensor::Tensor<T>)> {
                vec![$((stringify!($field).to_string(), &mut self.$field)),*]
            }
        }
    };
}
