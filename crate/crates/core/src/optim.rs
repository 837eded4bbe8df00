//! Named parameters, SGD with optional momentum, the step learning-rate
//! schedule and parameter accounting.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named model tensor. Trainable parameters are updated by the optimizer;
/// non-trainable ones (batch-norm running statistics) are not.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn trainable(name: impl Into<String>, tensor: &Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            tensor: tensor.clone(),
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, tensor: &Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            tensor: tensor.clone(),
            trainable: false,
        }
    }
}

/// Element counts; `total == trainable + non_trainable`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

pub fn count_params<T: Scalar>(params: &[Parameter<T>]) -> ParamCount {
    params.iter().fold(ParamCount::default(), |mut c, p| {
        let n = p.tensor.numel();
        c.total += n;
        if p.trainable {
            c.trainable += n;
        } else {
            c.non_trainable += n;
        }
        c
    })
}

/// Checks that parameter names are unique.
pub fn check_unique_names<T: Scalar>(params: &[Parameter<T>]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for p in params {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::Config(format!(
                "duplicate parameter name {}",
                p.name
            )));
        }
    }
    Ok(())
}

pub fn zero_grads<T: Scalar>(params: &[Parameter<T>]) {
    for p in params.iter().filter(|p| p.trainable) {
        p.tensor.zero_grad();
    }
}

/// Stochastic gradient descent: `v ← momentum·v + g`, `w ← w − lr·v`.
/// With momentum 0 this is plain SGD.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    momentum: T,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Sgd {
            momentum: T::lit(momentum),
            velocity: HashMap::new(),
        })
    }

    pub fn step(&mut self, params: &[Parameter<T>], lr: f64) -> Result<()> {
        let lr = T::lit(lr);
        // Validate first so a missing gradient leaves every parameter untouched.
        for p in params.iter().filter(|p| p.trainable) {
            if p.tensor.grad().is_none() {
                return Err(Error::Contract(format!(
                    "parameter {} has no gradient",
                    p.name
                )));
            }
        }
        for p in params.iter().filter(|p| p.trainable) {
            let g = p.tensor.grad().expect("checked above");
            let mut w = p.tensor.data_mut();
            if self.momentum == T::zero() {
                w.iter_mut().zip(&g).for_each(|(w, &g)| *w -= lr * g);
                continue;
            }
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(&g) {
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Training schedule. The learning rate decays by `gamma` every
/// `step_epochs` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub lr0: f64,
    pub gamma: f64,
    pub step_epochs: usize,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr0: 0.01,
            gamma: 0.1,
            step_epochs: 20,
            momentum: 0.0,
            epochs: 70,
            batch_size: 8,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if self.step_epochs == 0 {
            return bad("step_epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }

    /// `lr0 · gamma^⌊epoch / step_epochs⌋`, evaluated by repeated
    /// multiplication so that e.g. 0.01·0.1·0.1 lands exactly on 1e-4.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = epoch / self.step_epochs.max(1);
        (0..decays).fold(self.lr0, |lr, _| lr * self.gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Parameter<f64> {
        let t = Tensor::<f64>::from_f64(&[1], &[v]).unwrap().requires_grad();
        t.set_grad(Some(vec![g]));
        Parameter::trainable("w", &t)
    }

    #[test]
    fn plain_sgd_step() {
        let p = param(1.0, 0.5);
        Sgd::new(0.0)
            .unwrap()
            .step(std::slice::from_ref(&p), 0.1)
            .unwrap();
        assert_eq!(p.tensor.to_vec(), vec![0.95]);
    }

    #[test]
    fn zero_grad_leaves_weight() {
        let p = param(1.0, 0.0);
        Sgd::new(0.0)
            .unwrap()
            .step(std::slice::from_ref(&p), 0.1)
            .unwrap();
        assert_eq!(p.tensor.to_vec(), vec![1.0]);
    }

    #[test]
    fn momentum_two_steps() {
        let p = param(1.0, 1.0);
        let mut opt = Sgd::new(0.9).unwrap();
        opt.step(std::slice::from_ref(&p), 0.1).unwrap();
        assert!((p.tensor.to_vec()[0] - 0.9).abs() < 1e-15);
        opt.step(std::slice::from_ref(&p), 0.1).unwrap();
        assert!((p.tensor.to_vec()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let t = Tensor::<f64>::ones(&[2]).requires_grad();
        let p = Parameter::trainable("w", &t);
        let err = Sgd::new(0.0).unwrap().step(&[p], 0.1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn frozen_params_are_never_updated() {
        let t = Tensor::<f64>::ones(&[2]);
        t.set_grad(Some(vec![5.0, 5.0]));
        let p = Parameter::frozen("running_mean", &t);
        Sgd::new(0.0).unwrap().step(&[p], 1.0).unwrap();
        assert_eq!(t.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn schedule_table() {
        let s = ScheduleConfig::default();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(19), 0.01);
        assert_eq!(s.lr_at(20), 0.001);
        assert_eq!(s.lr_at(45), 0.0001);
    }

    #[test]
    fn schedule_validation() {
        let mut s = ScheduleConfig::default();
        assert!(s.validate().is_ok());
        s.gamma = 1.5;
        assert!(s.validate().is_err());
        s = ScheduleConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn counts() {
        assert_eq!(count_params::<f64>(&[]), ParamCount::default());
        let w = Tensor::<f64>::zeros(&[4, 4]).requires_grad();
        let b = Tensor::<f64>::zeros(&[4]).requires_grad();
        let params = vec![Parameter::trainable("w", &w), Parameter::trainable("b", &b)];
        assert_eq!(
            count_params(&params),
            ParamCount {
                total: 20,
                trainable: 20,
                non_trainable: 0
            }
        );
    }

    #[test]
    fn duplicate_names_rejected() {
        let w = Tensor::<f64>::zeros(&[1]);
        let params = vec![Parameter::frozen("a", &w), Parameter::frozen("a", &w)];
        assert!(check_unique_names(&params).is_err());
    }
}
