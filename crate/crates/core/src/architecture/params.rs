use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter, used by the optimizer's weight-decay policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    /// Normalization gains.
    Gain,
    /// Bandwidth thetas and value blends.
    Scalar,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named parameters in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds every parameter to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect()
    }

    /// Replaces all values, checking names and shapes line up.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!("{} tensors for {} parameters", values.len(), self.params.len())));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if v.shape() != p.value.shape() {
                return Err(Error::Shape(format!("{}: {:?} vs {:?}", p.name, v.shape(), p.value.shape())));
            }
            p.value = v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Normal samples with std `std`, redrawn outside ±2 std.
pub fn truncated_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("nonzero dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_is_bounded() {
        let t = truncated_normal(&mut ChaCha8Rng::seed_from_u64(1), &[100, 50], 0.02);
        assert!(t.data().iter().all(|x| x.abs() <= 0.04));
        let std = (t.sq_norm() / t.len() as f64).sqrt();
        assert!((std - 0.0176).abs() < 0.002, "{std}");
    }

    #[test]
    fn assign_checks_shapes() {
        let mut s = ParamStore::default();
        s.push("a", ParamKind::Matrix, Tensor::zeros(&[2, 2]));
        assert!(s.assign(vec![Tensor::zeros(&[4])]).is_err());
        s.assign(vec![Tensor::full(&[2, 2], 1.0)]).unwrap();
        assert_eq!(s.numel(), 4);
        assert_eq!(s.find("a"), Some(ParamId(0)));
    }
}
