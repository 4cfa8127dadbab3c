//! Key and value feature extraction.
//!
//! Keys summarize the recent past with a leaky recurrence over projected inputs;
//! values blend the current and next projected input. Both are L2-normalized, so
//! every stored key has the same norm and dot-product retrieval is exact kernel
//! smoothing.
//!
//! The graph-level functions take a `(L, d_model)` input and a per-position
//! `resets` mask; a set entry starts a new document, dropping the carried key
//! state and (for the previous position) the value lookahead.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Bound on the gate exponent `W_g·x` before exponentiation.
pub const GATE_CLAMP: f64 = 30.0;

/// Parameters of one head's extractors.
#[derive(Clone, Debug)]
pub struct ExtractorWeights {
    /// `d_head × d_model`
    pub w_phi: Tensor,
    /// `1 × d_model`
    pub w_g: Tensor,
    /// `1 × d_model`
    pub w_lambda: Tensor,
    /// `d_head × d_model`
    pub w_psi: Tensor,
    pub gamma: f64,
    /// Decay of the time-invariant extractor, in `(0, 1)`.
    pub lambda_fixed: f64,
}

impl ExtractorWeights {
    pub fn validate(&self) -> Result<()> {
        let d_model = self.w_phi.cols();
        let d_head = self.w_phi.rows();
        let ok = self.w_phi.rank() == 2
            && self.w_psi.shape() == [d_head, d_model]
            && self.w_g.shape() == [1, d_model]
            && self.w_lambda.shape() == [1, d_model];
        if !ok {
            return Err(Error::Shape(format!(
                "extractor weights: w_phi {:?}, w_psi {:?}, w_g {:?}, w_lambda {:?}",
                self.w_phi.shape(),
                self.w_psi.shape(),
                self.w_g.shape(),
                self.w_lambda.shape()
            )));
        }
        // the closed endpoints are the degenerate pointwise and cumulative-sum limits
        if !(0.0..=1.0).contains(&self.lambda_fixed) {
            return Err(Error::Config(format!("lambda_fixed {} outside [0, 1]", self.lambda_fixed)));
        }
        let finite = [&self.w_phi, &self.w_g, &self.w_lambda, &self.w_psi]
            .iter()
            .all(|t| t.is_finite())
            && self.gamma.is_finite();
        if !finite {
            return Err(Error::Input("non-finite extractor weights".into()));
        }
        Ok(())
    }
}

/// Reset mask with only the first position set: one document.
pub fn single_document(len: usize) -> Arc<Vec<bool>> {
    Arc::new((0..len).map(|t| t == 0).collect())
}

/// Time-invariant leaky average: `k̄_T = W_φ x_T + λ k̄_{T−1}`, `k_T = Norm(k̄_T)`.
pub fn key_features_leaky(g: &mut Graph, x: Var, w_phi: Var, lambda: f64, resets: Arc<Vec<bool>>) -> Result<Var> {
    let projected = g.matmul_nt(x, w_phi)?;
    let len = projected_len(g, projected);
    let ones = g.constant(Tensor::full(&[len], 1.0));
    let decay = g.constant(Tensor::full(&[len], lambda));
    let summed = g.leaky_scan(projected, ones, decay, resets)?;
    Ok(g.l2_normalize(summed))
}

/// Gated time-variant keys:
/// `k̄_T = g_T·W_φ x_T + λ_T·k̄_{T−1}` with `g_T = exp(W_g x_T)` and
/// `λ_T = exp(−|W_λ x_T|)`; returns `Norm(k̄_T)`.
pub fn key_features_gated(
    g: &mut Graph,
    x: Var,
    w_phi: Var,
    w_g: Var,
    w_lambda: Var,
    resets: Arc<Vec<bool>>,
) -> Result<Var> {
    let projected = g.matmul_nt(x, w_phi)?;
    let len = projected_len(g, projected);
    let gate = write_gate(g, x, w_g, len)?;
    let decay = decay_gate(g, x, w_lambda, len)?;
    let summed = g.leaky_scan(projected, gate, decay, resets)?;
    Ok(g.l2_normalize(summed))
}

/// `g_T = exp(clamp(W_g x_T, ±30))` as a length-`L` vector.
pub fn write_gate(g: &mut Graph, x: Var, w_g: Var, len: usize) -> Result<Var> {
    let logit = g.matmul_nt(x, w_g)?;
    let logit = g.reshape(logit, &[len])?;
    let logit = g.clamp(logit, -GATE_CLAMP, GATE_CLAMP);
    Ok(g.exp(logit))
}

/// `λ_T = exp(−|W_λ x_T|)` as a length-`L` vector.
pub fn decay_gate(g: &mut Graph, x: Var, w_lambda: Var, len: usize) -> Result<Var> {
    let logit = g.matmul_nt(x, w_lambda)?;
    let logit = g.reshape(logit, &[len])?;
    let mag = g.abs(logit);
    let neg = g.neg(mag);
    Ok(g.exp(neg))
}

/// Convolutional values: `v_T = Norm(γ·W_ψ x_T + (1−γ)·W_ψ x_{T+1})`, where the
/// lookahead term is zero at the last position of each document.
pub fn value_features(g: &mut Graph, x: Var, w_psi: Var, gamma: Var, resets: &[bool]) -> Result<Var> {
    let projected = g.matmul_nt(x, w_psi)?;
    let len = projected_len(g, projected);
    let d_head = g.shape(projected)[1];
    let ahead = if len == 1 {
        g.constant(Tensor::zeros(&[1, d_head]))
    } else {
        let next = g.slice(projected, 0, 1, len - 1)?;
        let pad = g.constant(Tensor::zeros(&[1, d_head]));
        let shifted = g.concat(&[next, pad], 0)?;
        // the row before a document start must not see the next document
        if resets[1..].iter().any(|&r| r) {
            let keep: Vec<f64> = (0..len)
                .map(|t| if t + 1 < len && resets[t + 1] { 0.0 } else { 1.0 })
                .collect();
            let keep = g.constant(Tensor::vector(keep));
            g.mul_rows(shifted, keep)?
        } else {
            shifted
        }
    };
    let now = g.mul_scalar(projected, gamma)?;
    let one_minus = g.neg(gamma);
    let one_minus = g.offset(one_minus, 1.0);
    let later = g.mul_scalar(ahead, one_minus)?;
    let blended = g.add(now, later)?;
    Ok(g.l2_normalize(blended))
}

fn projected_len(g: &Graph, v: Var) -> usize {
    g.shape(v)[0]
}

fn check_input(x: &Tensor, w: &ExtractorWeights) -> Result<()> {
    w.validate()?;
    if x.rank() != 2 || x.cols() != w.w_phi.cols() {
        return Err(Error::Shape(format!(
            "input {:?} does not match d_model {}",
            x.shape(),
            w.w_phi.cols()
        )));
    }
    Ok(())
}

/// Keys from the time-invariant extractor using `w.lambda_fixed`.
pub fn extract_keys_v1(x: &Tensor, w: &ExtractorWeights) -> Result<Tensor> {
    check_input(x, w)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let phi = g.constant(w.w_phi.clone());
    let k = key_features_leaky(&mut g, xv, phi, w.lambda_fixed, single_document(x.rows()))?;
    Ok(g.value(k).clone())
}

pub fn extract_keys_gated(x: &Tensor, w: &ExtractorWeights) -> Result<Tensor> {
    let init = vec![0.0; w.w_phi.rows()];
    Ok(extract_keys_gated_from(x, w, &init)?.0)
}

/// Gated keys continuing from a carried unnormalized state `k̄₀ = init`.
/// Returns the keys and the final unnormalized state.
pub fn extract_keys_gated_from(x: &Tensor, w: &ExtractorWeights, init: &[f64]) -> Result<(Tensor, Vec<f64>)> {
    check_input(x, w)?;
    let d_head = w.w_phi.rows();
    if init.len() != d_head {
        return Err(Error::Shape(format!("initial state of length {} for d_head {d_head}", init.len())));
    }
    let len = x.rows();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let phi = g.constant(w.w_phi.clone());
    let wg = g.constant(w.w_g.clone());
    let wl = g.constant(w.w_lambda.clone());
    let projected = g.matmul_nt(xv, phi)?;
    let gate = write_gate(&mut g, xv, wg, len)?;
    let decay = decay_gate(&mut g, xv, wl, len)?;
    // the carried state enters as a virtual leading row with unit gate
    let state = g.constant(Tensor::new(&[1, d_head], init.to_vec())?);
    let one = g.constant(Tensor::vector(vec![1.0]));
    let zero = g.constant(Tensor::vector(vec![0.0]));
    let rows = g.concat(&[state, projected], 0)?;
    let gates = g.concat(&[one, gate], 0)?;
    let decays = g.concat(&[zero, decay], 0)?;
    let summed = g.leaky_scan(rows, gates, decays, single_document(len + 1))?;
    let summed = g.slice(summed, 0, 1, len)?;
    let last = g.value(summed).row(len - 1).to_vec();
    let k = g.l2_normalize(summed);
    Ok((g.value(k).clone(), last))
}

pub fn extract_values(x: &Tensor, w: &ExtractorWeights) -> Result<Tensor> {
    check_input(x, w)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let psi = g.constant(w.w_psi.clone());
    let gamma = g.constant(Tensor::scalar(w.gamma));
    let resets = single_document(x.rows());
    let v = value_features(&mut g, xv, psi, gamma, &resets)?;
    Ok(g.value(v).clone())
}

/// Gate values `(g_T, λ_T)` of the gated extractor for inspection.
pub fn gate_values(x: &Tensor, w: &ExtractorWeights) -> Result<(Vec<f64>, Vec<f64>)> {
    check_input(x, w)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wg = g.constant(w.w_g.clone());
    let wl = g.constant(w.w_lambda.clone());
    let gate = write_gate(&mut g, xv, wg, x.rows())?;
    let decay = decay_gate(&mut g, xv, wl, x.rows())?;
    Ok((g.value(gate).data().to_vec(), g.value(decay).data().to_vec()))
}
