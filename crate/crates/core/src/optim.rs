//! RMSProp and Adam updates over a [`ParamStore`], plus box clipping.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Numerical floor added under square roots.
pub const EPS_NUM: f64 = 1e-8;

/// Which update rule a training loop uses for a given parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    RmsProp { lr: f64, decay: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64 },
}

impl Optimizer {
    /// Critic / adversarial default.
    pub fn rmsprop_default() -> Self {
        Optimizer::RmsProp { lr: 5e-5, decay: 0.99 }
    }

    /// Maximum-likelihood default.
    pub fn adam_default() -> Self {
        Optimizer::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
        }
    }

    pub fn step<T: Scalar>(&self, params: &mut ParamStore<T>, grads: &ParamStore<T>, state: &mut OptState<T>) -> Result<()> {
        match *self {
            Optimizer::RmsProp { lr, decay } => rmsprop_step(params, grads, state, lr, decay),
            Optimizer::Adam { lr, beta1, beta2 } => adam_step(params, grads, state, lr, beta1, beta2),
        }
    }
}

/// Per-parameter accumulators. RMSProp uses `second` only; Adam uses both
/// moments and the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptState<T> {
    pub step: u64,
    pub first: ParamStore<T>,
    pub second: ParamStore<T>,
}

impl<T: Scalar> OptState<T> {
    pub fn new() -> Self {
        OptState {
            step: 0,
            first: ParamStore::new(),
            second: ParamStore::new(),
        }
    }
}

fn validate<T: Scalar>(params: &ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    Ok(())
}

fn slot<'a, T: Scalar>(store: &'a mut ParamStore<T>, name: &str, like: &Tensor<T>) -> &'a mut Tensor<T> {
    store
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(like.shape()))
}

/// `acc ← decay·acc + (1−decay)·g²`, then `p ← p − lr·g/√(acc+ε)`.
///
/// On a non-finite gradient nothing is modified.
pub fn rmsprop_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptState<T>,
    lr: f64,
    decay: f64,
) -> Result<()> {
    if !(lr > 0.0) || !(decay > 0.0 && decay < 1.0) {
        return Err(Error::InvalidArgument(format!("rmsprop lr={lr} decay={decay}")));
    }
    validate(params, grads)?;
    let (lr, decay, eps) = (T::from_f64(lr), T::from_f64(decay), T::from_f64(EPS_NUM));
    let one = T::one();
    for (name, g) in grads {
        let acc = slot(&mut state.second, name, g);
        let p = params.get_mut(name).expect("validated");
        for ((pv, av), &gv) in p.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
            *av = decay * *av + (one - decay) * gv * gv;
            *pv -= lr * gv / (*av + eps).sqrt();
        }
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
        return Err(Error::InvalidArgument(format!(
            "adam lr={lr} beta1={beta1} beta2={beta2}"
        )));
    }
    validate(params, grads)?;
    let t = state.step + 1;
    let c1 = T::from_f64(1.0 - beta1.powi(t as i32));
    let c2 = T::from_f64(1.0 - beta2.powi(t as i32));
    let (lr, b1, b2, eps) = (
        T::from_f64(lr),
        T::from_f64(beta1),
        T::from_f64(beta2),
        T::from_f64(EPS_NUM),
    );
    let one = T::one();
    for (name, g) in grads {
        slot(&mut state.first, name, g);
        slot(&mut state.second, name, g);
        let m = state.first.get_mut(name).expect("inserted");
        let v = state.second.get_mut(name).expect("inserted");
        let p = params.get_mut(name).expect("validated");
        for (((pv, mv), vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

/// Names of parameters subject to box clipping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClipSet(BTreeSet<String>);

impl ClipSet {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ClipSet(names.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

/// Projects every scalar of every parameter named in `clip_set` onto `[−c, c]`.
pub fn clip_to_box<T: Scalar>(params: &mut ParamStore<T>, c: T, clip_set: &ClipSet) {
    for (name, p) in params.iter_mut() {
        if clip_set.contains(name) {
            for v in p.data_mut() {
                *v = v.max(-c).min(c);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(name: &str, v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name.into(), Tensor::row(v.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store("w", &[1.5, -2.0]);
        let g = store("w", &[0.0, 0.0]);
        let mut st = OptState::new();
        rmsprop_step(&mut p, &g, &mut st, 0.1, 0.9).unwrap();
        assert_eq!(p["w"].data(), &[1.5, -2.0]);
        let mut st = OptState::new();
        adam_step(&mut p, &g, &mut st, 0.1, 0.9, 0.999).unwrap();
        assert_eq!(p["w"].data(), &[1.5, -2.0]);
    }

    #[test]
    fn rmsprop_hand_arithmetic() {
        let mut p = store("w", &[0.0]);
        let g = store("w", &[1.0]);
        let mut st = OptState::new();
        rmsprop_step(&mut p, &g, &mut st, 0.1, 0.9).unwrap();
        let acc = 1.0 - 0.9;
        assert_eq!(st.second["w"].item(), acc);
        let expected = -0.1 * 1.0 / (0.1f64 + 1e-8).sqrt();
        assert!((p["w"].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_effective_step_shrinks() {
        let mut p = store("w", &[0.0]);
        let g = store("w", &[1.0]);
        let mut st = OptState::new();
        rmsprop_step(&mut p, &g, &mut st, 0.1, 0.9).unwrap();
        let first = -p["w"].item();
        rmsprop_step(&mut p, &g, &mut st, 0.1, 0.9).unwrap();
        let second = -p["w"].item() - first;
        assert!(second < first);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = store("w", &[0.0]);
        let g = store("w", &[1.0]);
        let mut st = OptState::new();
        adam_step(&mut p, &g, &mut st, 0.01, 0.9, 0.999).unwrap();
        assert!((p["w"].item() + 0.01).abs() <= 0.01 * 1e-7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn nan_gradient_leaves_state_untouched() {
        let mut p = store("w", &[1.0]);
        let g = store("w", &[f64::NAN]);
        let mut st = OptState::new();
        let before = (p.clone(), st.clone());
        assert!(matches!(
            rmsprop_step(&mut p, &g, &mut st, 0.1, 0.9),
            Err(Error::NonFiniteGradient(_))
        ));
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 0.1, 0.9, 0.999),
            Err(Error::NonFiniteGradient(_))
        ));
        assert_eq!((p, st), before);
    }

    #[test]
    fn clip_respects_clip_set() {
        let mut p = store("critic.w", &[0.5, -0.5, 0.004]);
        p.insert("embed.w".into(), Tensor::row(vec![0.5]));
        let set = ClipSet::new(["critic.w"]);
        clip_to_box(&mut p, 0.01, &set);
        assert_eq!(p["critic.w"].data(), &[0.01, -0.01, 0.004]);
        assert_eq!(p["embed.w"].data(), &[0.5]);
    }
}
