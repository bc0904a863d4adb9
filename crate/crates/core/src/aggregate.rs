//! Server-side model combination: FedAvg, FedOpt with server momentum, and
//! similarity-guided aggregation (SMA).
//!
//! All weighted sums run over clients in ascending index order with Kahan
//! compensation, so a fixed client list always reduces to the same bits.

use log::{debug, info};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{self, KahanSum, Tensor};
use crate::synthdata::MultiModalSample;

/// Nonnegative client weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::param("weights", "need at least one client"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::param("weights", format!("must be finite and >= 0: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param("weights", format!("sum to {total}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// `n_i / sum(n)`.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::param("sizes", "every client needs a positive sample count"));
        }
        let total: usize = sizes.iter().sum();
        Ok(Self(sizes.iter().map(|&n| n as f64 / total as f64).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptState {
    pub momentum: Vec<f64>,
    pub beta: f64,
    pub server_lr: f64,
}

impl ServerOptState {
    pub fn new(num_params: usize, beta: f64, server_lr: f64) -> Self {
        Self {
            momentum: vec![0.0; num_params],
            beta,
            server_lr,
        }
    }
}

fn check_manifests(models: &[ModelParams]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::param("models", "need at least one client model"))?;
    let manifest = first.manifest();
    for (i, m) in models.iter().enumerate().skip(1) {
        if m.manifest() != manifest {
            return Err(Error::Manifest(format!("client {i} has a different model layout")));
        }
    }
    Ok(())
}

/// `sum_i w_i * v_i` per coordinate, clients in index order.
pub fn weighted_sum(vectors: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let len = vectors.first().map_or(0, Vec::len);
    (0..len)
        .map(|p| {
            let mut acc = KahanSum::default();
            for (v, &w) in vectors.iter().zip(weights) {
                acc.add(w * v[p]);
            }
            acc.value()
        })
        .collect()
}

pub fn fedavg(models: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    check_manifests(models)?;
    if sizes.len() != models.len() {
        return Err(Error::param("sizes", "one size per model"));
    }
    let weights = AggregationWeights::from_sizes(sizes)?;
    let flats: Vec<Vec<f64>> = models.iter().map(|m| m.flatten().into_data()).collect();
    models[0].with_flat(&weighted_sum(&flats, weights.as_slice()))
}

/// One FedOpt step: pseudo-gradient `D = sum_i w_i (m_i - g)`, momentum
/// `v = beta v + D`, new global `g + lr v`.
///
/// The update is evaluated as `avg + (lr v - D)` where `avg = sum_i w_i m_i`
/// (equal to `g + D`), so `beta = 0, lr = 1` returns exactly the FedAvg bits.
pub fn fedopt(
    global: &ModelParams,
    models: &[ModelParams],
    sizes: &[usize],
    state: &ServerOptState,
) -> Result<(ModelParams, ServerOptState)> {
    check_manifests(models)?;
    if global.manifest() != models[0].manifest() {
        return Err(Error::Manifest("global and client layouts differ".into()));
    }
    if sizes.len() != models.len() {
        return Err(Error::param("sizes", "one size per model"));
    }
    let g = global.flatten().into_data();
    if state.momentum.len() != g.len() {
        return Err(Error::Manifest(format!(
            "momentum buffer has {} entries, model {}",
            state.momentum.len(),
            g.len()
        )));
    }
    let weights = AggregationWeights::from_sizes(sizes)?;
    let flats: Vec<Vec<f64>> = models.iter().map(|m| m.flatten().into_data()).collect();
    let deltas: Vec<Vec<f64>> = flats
        .iter()
        .map(|f| f.iter().zip(&g).map(|(x, y)| x - y).collect())
        .collect();
    let pseudo_grad = weighted_sum(&deltas, weights.as_slice());
    let mut avg = weighted_sum(&flats, weights.as_slice());
    let mut next = state.clone();
    for p in 0..g.len() {
        next.momentum[p] = state.beta * state.momentum[p] + pseudo_grad[p];
        let correction = state.server_lr * next.momentum[p] - pseudo_grad[p];
        if correction != 0.0 {
            avg[p] += correction;
        }
    }
    Ok((global.with_flat(&avg)?, next))
}

/// Mean fused embedding of the proxy set under one model.
pub fn summary_vector(model: &ModelParams, proxy: &[MultiModalSample]) -> Result<Vec<f64>> {
    if proxy.is_empty() {
        return Err(Error::param("proxy", "summary needs at least one sample"));
    }
    let mut acc = vec![KahanSum::default(); model.fused_dim()];
    for s in proxy {
        let e = model.embed(s)?;
        for (a, &v) in acc.iter_mut().zip(e.data()) {
            a.add(v);
        }
    }
    let n = proxy.len() as f64;
    Ok(acc.iter().map(|a| a.value() / n).collect())
}

/// Pairwise cosine similarity of summary vectors.
pub fn similarity_matrix(summaries: &[Vec<f64>]) -> Result<Tensor> {
    let c = summaries.len();
    let mut s = Tensor::zeros(&[c, c]);
    for i in 0..c {
        for j in 0..c {
            s.set(i, j, numerics::cosine(&summaries[i], &summaries[j])?);
        }
    }
    Ok(s)
}

/// Row sums of the (clamped) similarity matrix over its total.
///
/// Negative entries count as 0. An all-zero matrix gives uniform weights.
pub fn weights_from_similarity(sim: &Tensor, include_diagonal: bool) -> Result<AggregationWeights> {
    let c = sim.rows();
    if c == 0 || sim.cols() != c {
        return Err(Error::Shape {
            op: "weights_from_similarity",
            left: sim.shape().to_vec(),
            right: vec![],
        });
    }
    let mut clamped = 0usize;
    let mut rows = Vec::with_capacity(c);
    let mut total = KahanSum::default();
    for i in 0..c {
        let mut row = KahanSum::default();
        for j in 0..c {
            if i == j && !include_diagonal {
                continue;
            }
            let v = sim.get(i, j);
            let v = if v.is_finite() { v } else { 0.0 };
            if v < 0.0 {
                clamped += 1;
            } else {
                row.add(v);
            }
        }
        total.add(row.value());
        rows.push(row.value());
    }
    if clamped > 0 {
        info!("clamped {clamped} negative client similarities to 0");
    }
    let total = total.value();
    if !(total > 0.0) {
        debug!("similarity mass is zero, falling back to uniform weights");
        return Ok(AggregationWeights::uniform(c));
    }
    let mut w: Vec<f64> = rows.iter().map(|r| r / total).collect();
    // renormalize so the rounding residue does not leave the 1e-9 band
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    AggregationWeights::new(w)
}

pub fn sma_weights(
    models: &[ModelParams],
    proxy: &[MultiModalSample],
    include_diagonal: bool,
) -> Result<AggregationWeights> {
    if proxy.is_empty() {
        return Err(Error::param("proxy", "SMA needs a nonempty labelled proxy set"));
    }
    if models.is_empty() {
        return Err(Error::param("models", "need at least one client model"));
    }
    let summaries = models
        .par_iter()
        .map(|m| summary_vector(m, proxy))
        .collect::<Result<Vec<_>>>()?;
    weights_from_similarity(&similarity_matrix(&summaries)?, include_diagonal)
}

/// Weighted sum of client encoders; the head is taken from the clients,
/// which must all carry the same head.
pub fn sma_aggregate(models: &[ModelParams], weights: &AggregationWeights) -> Result<ModelParams> {
    check_manifests(models)?;
    if weights.len() != models.len() {
        return Err(Error::param(
            "weights",
            format!("{} weights for {} models", weights.len(), models.len()),
        ));
    }
    if let Some(i) = models.iter().position(|m| !m.head_bit_equal(&models[0])) {
        return Err(Error::Protocol(format!(
            "client {i} uploaded a head that differs from client 0; heads are frozen during local training"
        )));
    }
    let flats: Vec<Vec<f64>> = models.iter().map(ModelParams::flatten_encoders).collect();
    let mut out = models[0].clone();
    out.set_encoders_from_flat(&weighted_sum(&flats, weights.as_slice()))?;
    Ok(out)
}
