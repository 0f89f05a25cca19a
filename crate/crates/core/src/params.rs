//! Named parameter traversal shared by quantization, serialization and
//! parameter counting.

use crate::nn::Linear;
use crate::tensor::Tensor;

pub trait Params {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.collect(prefix, &mut out);
        out
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.collect_mut(prefix, &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params("").iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Tensor {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((prefix.to_string(), self));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<T: Params> Params for Option<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        if let Some(p) = self {
            p.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        if let Some(p) = self {
            p.collect_mut(prefix, out);
        }
    }
}

impl<T: Params> Params for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, p) in self.iter().enumerate() {
            p.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`Params`] for a struct by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::params::Params for $ty {
            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::tensor::Tensor)>) {
                $( $crate::params::Params::collect(&self.$field, &$crate::params::join(prefix, stringify!($field)), out); )*
            }

            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut $crate::tensor::Tensor)>) {
                $( $crate::params::Params::collect_mut(&mut self.$field, &$crate::params::join(prefix, stringify!($field)), out); )*
            }
        }
    };
}

crate::impl_params!(Linear { weight, bias });

/// Overwrites every parameter of `dst` with the same-named tensor from `src`.
pub fn copy_params<T: Params>(dst: &mut T, src: &[(String, Tensor)]) -> crate::Result<()> {
    let mut targets = dst.named_params_mut("");
    if targets.len() != src.len() {
        return Err(crate::Error::Format(format!(
            "expected {} tensors, found {}",
            targets.len(),
            src.len()
        )));
    }
    for ((name, t), (src_name, s)) in targets.iter_mut().zip(src) {
        if name != src_name || t.shape() != s.shape() {
            return Err(crate::Error::Format(format!(
                "tensor `{src_name}` {:?} does not match `{name}` {:?}",
                s.shape(),
                t.shape()
            )));
        }
        **t = s.clone();
    }
    Ok(())
}
