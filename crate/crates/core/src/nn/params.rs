use std::collections::HashMap;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use crate::{Error, Result};

/// Anything that owns named trainable tensors. Gradients are represented by
/// a value of the same type, so optimizers can zip the two tensor lists.
pub trait Params<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn prefixed<V>(prefix: &str, items: Vec<(String, V)>) -> Vec<(String, V)> {
    items
        .into_iter()
        .map(|(name, v)| (format!("{prefix}.{name}"), v))
        .collect()
}

pub fn collect_tensors<T: Clone, P: Params<T> + ?Sized>(p: &P) -> Vec<(String, ArrayD<T>)> {
    p.tensors().into_iter().map(|(name, t)| (name, t.to_owned())).collect()
}

/// Overwrites every tensor of `p` from `source`, requiring exact names and shapes.
pub fn assign_tensors<T: Clone, P: Params<T> + ?Sized>(p: &mut P, source: &HashMap<String, ArrayD<T>>) -> Result<()> {
    for (name, mut dst) in p.tensors_mut() {
        let src = source
            .get(&name)
            .ok_or_else(|| Error::Incompatible(format!("missing tensor `{name}`")))?;
        if src.shape() != dst.shape() {
            return Err(Error::Incompatible(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.assign(src);
    }
    Ok(())
}
