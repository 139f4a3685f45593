//! Named parameter storage with momentum-SGD updates.
//!
//! Parameters live outside any tape. Each training step uploads them as
//! leaves onto a fresh tape, runs forward/backward, harvests the gradients
//! back, and applies one optimizer step.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor};

pub struct Param<T: Real = f64> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
    momentum: Vec<T>,
}

#[derive(Default)]
pub struct ParamSet<T: Real = f64> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    /// Registers a parameter and returns its index. Order of registration is
    /// the canonical order for upload/harvest and checkpoints.
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<usize> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let n: usize = shape.iter().product();
        if n == 0 || n != data.len() {
            return Err(Error::invalid(format!(
                "parameter {name:?}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad: vec![T::zero(); n],
            momentum: vec![T::zero(); n],
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = T::zero();
            }
        }
    }

    /// Creates one leaf per parameter on `tape`, in registration order.
    pub fn upload(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| {
                tape.leaf(&p.shape, p.data.clone())
                    .expect("parameter shapes are validated at registration")
            })
            .collect()
    }

    /// Copies gradients from uploaded leaves back into the set.
    pub fn harvest(&mut self, leaves: &[Tensor<T>]) -> Result<()> {
        if leaves.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "harvest expects {} tensors, got {}",
                self.params.len(),
                leaves.len()
            )));
        }
        for (p, t) in self.params.iter_mut().zip(leaves) {
            let g = t.grad();
            if g.len() != p.grad.len() {
                return Err(Error::invalid(format!(
                    "gradient length mismatch for parameter {:?}",
                    p.name
                )));
            }
            p.grad.copy_from_slice(&g);
        }
        Ok(())
    }

    /// Standard momentum SGD with decoupled-from-nothing weight decay folded
    /// into the gradient: g += wd * p; buf = m * buf + g; p -= lr * buf.
    pub fn sgd_step(&mut self, lr: T, momentum: T, weight_decay: T) {
        for p in &mut self.params {
            for j in 0..p.data.len() {
                let g = p.grad[j] + weight_decay * p.data[j];
                p.momentum[j] = momentum * p.momentum[j] + g;
                p.data[j] = p.data[j] - lr * p.momentum[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_set(data: Vec<f64>) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("w", &[data.len()], data).unwrap();
        ps
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut ps = one_param_set(vec![1.0, -2.0]);
        ps.get_mut(0).grad = vec![10.0, 10.0];
        ps.sgd_step(0.0, 0.9, 1e-4);
        assert_eq!(ps.get(0).data, vec![1.0, -2.0]);
    }

    #[test]
    fn plain_sgd_definition() {
        let mut ps = one_param_set(vec![1.0]);
        ps.get_mut(0).grad = vec![0.5];
        ps.sgd_step(0.1, 0.0, 0.0);
        assert!((ps.get(0).data[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_match_hand_unrolled_recurrence() {
        let (lr, m, wd) = (0.1, 0.9, 0.01);
        let (p0, g1, g2) = (2.0, 0.3, -0.4);
        // step 1
        let gt1 = g1 + wd * p0;
        let buf1 = gt1;
        let p1 = p0 - lr * buf1;
        // step 2
        let gt2 = g2 + wd * p1;
        let buf2 = m * buf1 + gt2;
        let p2 = p1 - lr * buf2;

        let mut ps = one_param_set(vec![p0]);
        ps.get_mut(0).grad = vec![g1];
        ps.sgd_step(lr, m, wd);
        assert!((ps.get(0).data[0] - p1).abs() < 1e-15);
        ps.get_mut(0).grad = vec![g2];
        ps.sgd_step(lr, m, wd);
        assert!((ps.get(0).data[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn upload_harvest_round_trip() {
        let mut ps = ParamSet::new();
        ps.add("a", &[2], vec![3.0, 4.0]).unwrap();
        ps.add("b", &[1], vec![5.0]).unwrap();
        let tape: Tape = Tape::new();
        let leaves = ps.upload(&tape);
        let z = leaves[0].sum().add(&leaves[1].affine(2.0, 0.0)).unwrap();
        z.backward().unwrap();
        ps.harvest(&leaves).unwrap();
        assert_eq!(ps.get(0).grad, vec![1.0, 1.0]);
        assert_eq!(ps.get(1).grad, vec![2.0]);
    }

    #[test]
    fn duplicate_and_mismatched_registration_fail() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add("w", &[1], vec![0.0]).unwrap();
        assert!(ps.add("w", &[1], vec![0.0]).is_err());
        assert!(ps.add("v", &[2], vec![0.0]).is_err());
    }
}
