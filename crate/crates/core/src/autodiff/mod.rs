//! Minimal reverse-mode differentiation and optimization used by both the
//! retriever heads and the response generator.

mod optim;
mod tape;

pub use optim::{init_normal, Adam, AdamConfig};
pub use tape::{
    gelu, log_softmax_rows, masked_softmax_rows, normalize_rows, Gradients, Mat, Tape, Var,
};

/// A tree of parameter tensors with a fixed traversal order.
///
/// Implemented generically over the tensor type so the same structure can
/// hold stored matrices (`Mat`), tape handles (`Var`) or optimizer state.
pub trait ParamTree<T> {
    type Mapped<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U>;
    fn params(&self) -> Vec<&T>;
    fn params_mut(&mut self) -> Vec<&mut T>;
}

/// Puts every parameter on the tape as a leaf.
pub fn to_tape<P>(params: &P, tape: &Tape) -> P::Mapped<Var>
where
    P: ParamTree<Mat>,
{
    params.map_params(&mut |m| tape.leaf(m.clone()))
}

/// Reads the gradients for a tape mirror of `params`, zero where unused.
pub fn collect_grads<P, V>(params: &P, vars: &V, grads: &Gradients) -> Vec<Mat>
where
    P: ParamTree<Mat>,
    V: ParamTree<Var>,
{
    params
        .params()
        .into_iter()
        .zip(vars.params())
        .map(|(m, v)| grads.get_or_zeros(*v, m.dim()).as_standard_layout().into_owned())
        .collect()
}

pub fn param_count<P: ParamTree<Mat>>(params: &P) -> usize {
    params.params().iter().map(|m| m.len()).sum()
}
