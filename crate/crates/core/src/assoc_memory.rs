//! Kernel-regression associative memory.
//!
//! A query retrieves `Σᵢ softmax_i(β·qᵀkᵢ)·vᵢ` over the visible pairs. With
//! unit-norm keys this is Gaussian kernel smoothing with bandwidth `1/√(2β)`;
//! [`retrieve_distance`] keeps the distance form for checking. The bandwidth
//! grows with the number of visible pairs: `β(n) = β₁·n^α + β₀`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_masked_row, Graph, Tensor, Var};

const UNIT_TOL: f64 = 1e-6;

/// Raw bandwidth parameters; `β₀ = e^θ₀`, `β₁ = e^θ₁`, `α = e^{−|θ_α|}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthParams {
    pub theta0: f64,
    pub theta1: f64,
    pub theta_alpha: f64,
}

impl BandwidthParams {
    pub fn beta0(&self) -> f64 {
        self.theta0.exp()
    }

    pub fn beta1(&self) -> f64 {
        self.theta1.exp()
    }

    pub fn alpha(&self) -> f64 {
        (-self.theta_alpha.abs()).exp()
    }
}

/// `β(n) = β₁·n^α + β₀` for `n ≥ 1` visible pairs.
pub fn bandwidth(n: usize, p: &BandwidthParams) -> Result<f64> {
    if n == 0 {
        return Err(Error::Input("bandwidth of an empty store".into()));
    }
    Ok(p.beta1() * (n as f64).powf(p.alpha()) + p.beta0())
}

/// Graph form of the bandwidth schedule: one β per entry of `counts`.
///
/// Entries with `n = 0` get `β₁ + β₀`; they belong to empty stores whose
/// retrieval is zero regardless of β. The thetas are 1-element nodes.
pub fn bandwidth_schedule(g: &mut Graph, counts: &[usize], theta0: Var, theta1: Var, theta_alpha: Var) -> Result<Var> {
    let ln_n = g.constant(Tensor::vector(counts.iter().map(|&n| (n.max(1) as f64).ln()).collect()));
    let mag = g.abs(theta_alpha);
    let neg = g.neg(mag);
    let alpha = g.exp(neg);
    let scaled = g.mul_scalar(ln_n, alpha)?;
    let powered = g.exp(scaled);
    let beta1 = g.exp(theta1);
    let slope = g.mul_scalar(powered, beta1)?;
    let beta0 = g.exp(theta0);
    g.add_scalar(slope, beta0)
}

/// A set of key-value pairs with per-pair visibility.
#[derive(Clone, Debug)]
pub struct MemoryStore {
    keys: Tensor,
    values: Tensor,
    valid: Vec<bool>,
}

impl MemoryStore {
    /// Keys must be unit-norm rows; `valid[i]` marks pair `i` visible.
    pub fn new(keys: Tensor, values: Tensor, valid: Vec<bool>) -> Result<Self> {
        if keys.rank() != 2 || values.rank() != 2 || keys.rows() != values.rows() || valid.len() != keys.rows() {
            return Err(Error::Shape(format!(
                "store: keys {:?}, values {:?}, mask of {}",
                keys.shape(),
                values.shape(),
                valid.len()
            )));
        }
        for r in 0..keys.rows() {
            let n = keys.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Input(format!("key {r} has norm {n}")));
            }
        }
        Ok(Self { keys, values, valid })
    }

    /// Every pair visible.
    pub fn full(keys: Tensor, values: Tensor) -> Result<Self> {
        let n = keys.leading();
        Self::new(keys, values, vec![true; n])
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn n_visible(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// The store with its pairs reordered so that new pair `j` is old pair `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || !order.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Input("not a permutation".into()));
        }
        let pick = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&rows)
        };
        Ok(Self {
            keys: pick(&self.keys)?,
            values: pick(&self.values)?,
            valid: order.iter().map(|&i| self.valid[i]).collect(),
        })
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.keys.cols() {
            return Err(Error::Shape(format!(
                "query of length {} for keys of width {}",
                query.len(),
                self.keys.cols()
            )));
        }
        Ok(())
    }

    fn combine(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.values.cols()];
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(self.values.row(i)) {
                    *o += w * v;
                }
            }
        }
        out
    }
}

fn check_unit_query(query: &[f64]) {
    let n = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        if cfg!(debug_assertions) {
            panic!("retrieve_dot: query norm {n} is not 1");
        }
        log::warn!("retrieve_dot: query norm {n} is not 1");
    }
}

/// Softmax weights of the dot-product form; all zero for an empty store.
pub fn attention_weights(query: &[f64], store: &MemoryStore, beta: f64) -> Result<Vec<f64>> {
    store.check_query(query)?;
    let logits: Vec<f64> = (0..store.len())
        .map(|i| beta * store.keys.row(i).iter().zip(query).map(|(k, q)| k * q).sum::<f64>())
        .collect();
    let mut w = vec![0.0; store.len()];
    softmax_masked_row(&logits, &store.valid, &mut w);
    Ok(w)
}

/// `Σᵢ softmax_i(β·qᵀkᵢ)·vᵢ` over visible pairs, for a unit-norm query.
pub fn retrieve_dot(query: &[f64], store: &MemoryStore, beta: f64) -> Result<Vec<f64>> {
    check_unit_query(query);
    let w = attention_weights(query, store, beta)?;
    Ok(store.combine(&w))
}

/// `Σᵢ softmax_i(−β·‖q−kᵢ‖²)·vᵢ` over visible pairs; no norm requirement on the query.
pub fn retrieve_distance(query: &[f64], store: &MemoryStore, beta: f64) -> Result<Vec<f64>> {
    store.check_query(query)?;
    let logits: Vec<f64> = (0..store.len())
        .map(|i| {
            let d2: f64 = store.keys.row(i).iter().zip(query).map(|(k, q)| (q - k) * (q - k)).sum();
            -beta * d2
        })
        .collect();
    let mut w = vec![0.0; store.len()];
    softmax_masked_row(&logits, &store.valid, &mut w);
    Ok(store.combine(&w))
}

/// Differentiable dot-product retrieval of one query against a store.
///
/// `query` is `1×d`, `keys` `n×d`, `values` `n×d_v`, `beta` a 1-element node.
/// Returns the `1×d_v` output.
pub fn retrieve_dot_graph(
    g: &mut Graph,
    query: Var,
    keys: Var,
    values: Var,
    valid: Arc<Vec<bool>>,
    beta: Var,
) -> Result<Var> {
    let scores = g.matmul_nt(query, keys)?;
    let scaled = g.mul_scalar(scores, beta)?;
    let weights = g.masked_softmax(scaled, valid)?;
    g.matmul(weights, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameters_give_n_plus_one() {
        assert_eq!(bandwidth(3, &BandwidthParams::default()).unwrap(), 4.0);
        assert!(bandwidth(0, &BandwidthParams::default()).is_err());
    }

    #[test]
    fn half_exponent_at_sixteen() {
        let p = BandwidthParams {
            theta0: 0.0,
            theta1: 2f64.ln(),
            theta_alpha: 2f64.ln(),
        };
        assert!((p.alpha() - 0.5).abs() < 1e-15);
        assert!((bandwidth(16, &p).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_matches_scalar_form() {
        let p = BandwidthParams {
            theta0: -0.3,
            theta1: 0.7,
            theta_alpha: -1.1,
        };
        let mut g = Graph::new();
        let t0 = g.constant(Tensor::scalar(p.theta0));
        let t1 = g.constant(Tensor::scalar(p.theta1));
        let ta = g.constant(Tensor::scalar(p.theta_alpha));
        let counts = [1, 2, 5, 40];
        let b = bandwidth_schedule(&mut g, &counts, t0, t1, ta).unwrap();
        for (&n, &beta) in counts.iter().zip(g.value(b).data()) {
            assert!((beta - bandwidth(n, &p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pair_returns_its_value() {
        let store = MemoryStore::full(
            Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap(),
            Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap(),
        )
        .unwrap();
        let q = [1.0, 0.0];
        assert_eq!(retrieve_dot(&q, &store, 5.0).unwrap(), vec![1.0, -2.0, 0.5]);
        assert_eq!(retrieve_distance(&[3.0, 1.0], &store, 5.0).unwrap(), vec![1.0, -2.0, 0.5]);
        assert_eq!(attention_weights(&q, &store, 5.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn empty_store_returns_zero() {
        let store = MemoryStore::new(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap(),
            vec![false, false],
        )
        .unwrap();
        assert_eq!(retrieve_dot(&[1.0, 0.0], &store, 2.0).unwrap(), vec![0.0]);
        assert_eq!(attention_weights(&[1.0, 0.0], &store, 2.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let store = MemoryStore::full(
            Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap(),
            Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap(),
        )
        .unwrap();
        for beta in [0.0, 1.0, 50.0] {
            let out = retrieve_dot(&[0.6, -0.8], &store, beta).unwrap();
            assert!((out[0] - 2.0).abs() < 1e-12 && (out[1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn equidistant_query_averages() {
        let store = MemoryStore::full(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::matrix(2, 1, vec![2.0, 4.0]).unwrap(),
        )
        .unwrap();
        let out = retrieve_distance(&[0.5, 0.5], &store, 3.0).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_bandwidth_is_uniform() {
        let store = MemoryStore::new(
            Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap(),
            Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap(),
            vec![true, false, true],
        )
        .unwrap();
        let w = attention_weights(&[0.0, 1.0], &store, 0.0).unwrap();
        assert_eq!(w, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn rejects_non_unit_keys() {
        let keys = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(MemoryStore::full(keys, Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "query norm")]
    fn non_unit_query_is_a_contract_violation() {
        let store = MemoryStore::full(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), Tensor::zeros(&[1, 1])).unwrap();
        let _ = retrieve_dot(&[2.0, 0.0], &store, 1.0);
    }
}
