//! Dense-layer helpers shared by the flow, the critics and the KL classifier.

use crate::graph::{Graph, NodeId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

pub fn weight_name(prefix: &str) -> String {
    format!("{prefix}.w")
}

pub fn bias_name(prefix: &str) -> String {
    format!("{prefix}.b")
}

/// Adds `prefix.w: [fan_in, fan_out]` drawn from `N(0, gain²/fan_in)` and a
/// zero `prefix.b: [1, fan_out]`.
pub fn init_dense<T: Scalar>(
    params: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut RngStream,
) {
    let std = gain / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| T::from_f64(std * rng.normal()))
        .collect();
    params.insert(
        weight_name(prefix),
        Tensor::from_rows(fan_in, fan_out, w).expect("positive extents"),
    );
    params.insert(bias_name(prefix), Tensor::zeros(&[1, fan_out]));
}

/// Adds a layer with weights and biases uniform on `[-limit, limit]`.
pub fn init_dense_uniform<T: Scalar>(
    params: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    limit: f64,
    rng: &mut RngStream,
) {
    let mut draw = |n: usize| -> Vec<T> {
        (0..n)
            .map(|_| T::from_f64(limit * (2.0 * rng.uniform() - 1.0)))
            .collect()
    };
    let w = draw(fan_in * fan_out);
    let b = draw(fan_out);
    params.insert(
        weight_name(prefix),
        Tensor::from_rows(fan_in, fan_out, w).expect("positive extents"),
    );
    params.insert(bias_name(prefix), Tensor::from_rows(1, fan_out, b).expect("positive extents"));
}

/// Adds an all-zero layer.
pub fn init_dense_zero<T: Scalar>(params: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize) {
    params.insert(weight_name(prefix), Tensor::zeros(&[fan_in, fan_out]));
    params.insert(bias_name(prefix), Tensor::zeros(&[1, fan_out]));
}

/// `x · prefix.w + prefix.b`.
pub fn dense<T: Scalar>(g: &mut Graph<T>, x: NodeId, prefix: &str) -> NodeId {
    let w = g.param(&weight_name(prefix));
    let b = g.param(&bias_name(prefix));
    g.affine(x, w, b)
}
