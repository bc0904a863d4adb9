//! Temporal segmentation, tIoU soft targets, and the symmetric cross-modal
//! contrastive loss.
//!
//! For a batch of N samples every sample is cut into two windows of
//! fraction `w` placed at the start and the end of its timeline, giving
//! `2N` segments per modality in the order
//! `(s0, chunk0), (s0, chunk1), (s1, chunk0), ...`.
//! The soft target for segment `i` of one modality against segment `j` of
//! the other is `tIoU(i, j)` normalized over `j`; segments of different
//! samples have tIoU 0.
//!
//! With `S(i, j)` the cosine of the two embeddings, the loss is
//!
//! ```text
//! L = 1/(2M) * sum_i sum_j [ -T_ab(i,j) log softmax_j(S(i,.)/tau)
//!                            -T_ba(j,i) log softmax_i(S(.,j)/tau) ]
//! ```
//!
//! with `M = 2N` and every softmax taken over all `M` segments.

use log::warn;

use crate::error::{Error, Result};
use crate::model::{encode_traced, encoder_backward, EncoderParams, EncoderTrace};
use crate::numerics::{self, Tensor};
use crate::rng::SplitMix64;
use crate::synthdata::{ModalityId, MultiModalSample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalSegment {
    pub sample_id: u32,
    /// Normalized half-open interval `[start, end)`.
    pub start: f64,
    pub end: f64,
    /// Timestep slice `[first_step, end_step)`.
    pub first_step: usize,
    pub end_step: usize,
}

impl TemporalSegment {
    pub fn steps(&self) -> usize {
        self.end_step - self.first_step
    }
}

pub fn validate_window(w: f64) -> Result<()> {
    if !(0.5..=1.0).contains(&w) {
        return Err(Error::param(
            "window_fraction",
            format!("must be in [0.5, 1], got {w}"),
        ));
    }
    Ok(())
}

/// The two windows of a `t_len`-step sequence.
pub fn chunk_bounds(t_len: usize, w: f64) -> Result<[(usize, usize); 2]> {
    validate_window(w)?;
    let len = (w * t_len as f64).floor() as usize;
    if len < 1 {
        return Err(Error::Input(format!(
            "window {w} of {t_len} timesteps is shorter than one step"
        )));
    }
    Ok([(0, len), (t_len - len, t_len)])
}

/// Cut every sample into its two windows.
///
/// Interval endpoints are the realized timestep boundaries divided by `T`,
/// so the tIoU always describes the data actually sliced.
pub fn segment_batch(batch: &[&MultiModalSample], w: f64) -> Result<Vec<TemporalSegment>> {
    validate_window(w)?;
    let mut out = Vec::with_capacity(2 * batch.len());
    for s in batch {
        let t_len = s.timesteps();
        for (first_step, end_step) in chunk_bounds(t_len, w)? {
            out.push(TemporalSegment {
                sample_id: s.sample_id,
                start: first_step as f64 / t_len as f64,
                end: end_step as f64 / t_len as f64,
                first_step,
                end_step,
            });
        }
    }
    Ok(out)
}

/// Temporal IoU; zero across different samples.
pub fn tiou(a: &TemporalSegment, b: &TemporalSegment) -> f64 {
    if a.sample_id != b.sample_id {
        return 0.0;
    }
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.end.max(b.end) - a.start.min(b.start);
    // disjoint intervals with a gap: union of lengths, not the hull
    let union = if inter > 0.0 {
        union
    } else {
        (a.end - a.start) + (b.end - b.start)
    };
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Row-stochastic matrix of normalized tIoU scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetMatrix(Tensor);

impl SoftTargetMatrix {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    /// Normalize raw nonnegative scores row by row.
    pub fn from_scores(raw: Tensor) -> Result<Self> {
        let n = raw.cols();
        let mut data = raw.data().to_vec();
        for (i, row) in data.chunks_mut(n.max(1)).enumerate() {
            let total: f64 = row.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Invariant(format!(
                    "soft-target row {i} has no positive entry"
                )));
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Self(Tensor::new(raw.shape().to_vec(), data)?))
    }
}

pub fn soft_targets(
    segments_a: &[TemporalSegment],
    segments_b: &[TemporalSegment],
) -> Result<SoftTargetMatrix> {
    if segments_a.len() != segments_b.len() {
        return Err(Error::Shape {
            op: "soft_targets",
            left: vec![segments_a.len()],
            right: vec![segments_b.len()],
        });
    }
    let rows: Vec<Vec<f64>> = segments_a
        .iter()
        .map(|a| segments_b.iter().map(|b| tiou(a, b)).collect())
        .collect();
    SoftTargetMatrix::from_scores(Tensor::from_rows(&rows)?)
}

/// Feature slices of one modality for each segment.
pub fn segment_features(
    batch: &[&MultiModalSample],
    segments: &[TemporalSegment],
    modality: ModalityId,
) -> Result<Vec<Tensor>> {
    segments
        .iter()
        .map(|seg| {
            let s = batch
                .iter()
                .find(|s| s.sample_id == seg.sample_id)
                .ok_or_else(|| Error::Input(format!("segment of unknown sample {}", seg.sample_id)))?;
            let x = s.modalities.get(&modality).ok_or_else(|| {
                Error::Input(format!("sample {} lacks modality {modality}", s.sample_id))
            })?;
            Ok(x.slice_rows(seg.first_step, seg.end_step))
        })
        .collect()
}

/// Duplicate a single modality's segment features into two noisy views.
pub fn pseudo_pair(features: &[Tensor], sigma: f64, rng: &mut SplitMix64) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut view = |x: &Tensor| {
        let mut y = x.clone();
        if sigma > 0.0 {
            y.data_mut().iter_mut().for_each(|v| *v += sigma * rng.normal());
        }
        y
    };
    let a: Vec<Tensor> = features.iter().map(&mut view).collect();
    let b: Vec<Tensor> = features.iter().map(&mut view).collect();
    (a, b)
}

/// Loss and `dL/dS` from a similarity matrix and the two target matrices.
pub fn similarity_loss_grad(
    sim: &Tensor,
    targets_ab: &SoftTargetMatrix,
    targets_ba: &SoftTargetMatrix,
    tau: f64,
) -> Result<(f64, Tensor)> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", format!("must be > 0, got {tau}")));
    }
    let m = sim.rows();
    if sim.cols() != m || targets_ab.size() != m || targets_ba.size() != m {
        return Err(Error::Shape {
            op: "similarity_loss_grad",
            left: sim.shape().to_vec(),
            right: vec![targets_ab.size(), targets_ba.size()],
        });
    }
    let scale = 1.0 / (2.0 * m as f64);
    let mut grad = vec![0.0; m * m];
    let mut loss = 0.0;
    let mut buf = vec![0.0; m];

    // A -> B: rows of S
    for i in 0..m {
        let row = sim.row(i);
        let lse = numerics::log_sum_exp(row, tau);
        let t_sum: f64 = targets_ab.tensor().row(i).iter().sum();
        for j in 0..m {
            let t = targets_ab.get(i, j);
            loss += t * (lse - row[j] / tau);
            let p = (row[j] / tau - lse).exp();
            grad[i * m + j] += scale * (p * t_sum - t) / tau;
        }
    }
    // B -> A: columns of S
    for j in 0..m {
        for i in 0..m {
            buf[i] = sim.get(i, j);
        }
        let lse = numerics::log_sum_exp(&buf, tau);
        let t_sum: f64 = targets_ba.tensor().row(j).iter().sum();
        for i in 0..m {
            let t = targets_ba.get(j, i);
            loss += t * (lse - buf[i] / tau);
            let p = (buf[i] / tau - lse).exp();
            grad[i * m + j] += scale * (p * t_sum - t) / tau;
        }
    }
    Ok((loss * scale, Tensor::new(vec![m, m], grad)?))
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_a: EncoderParams,
    pub grad_b: EncoderParams,
    /// Cosine similarity matrix `[2N x 2N]`.
    pub similarity: Tensor,
}

fn normalized(trace: &EncoderTrace) -> (Vec<f64>, f64) {
    let n = numerics::norm(&trace.embedding);
    if n == 0.0 {
        return (vec![0.0; trace.embedding.len()], 0.0);
    }
    (trace.embedding.iter().map(|v| v / n).collect(), n)
}

/// Contrastive loss over paired segment features and its gradients for
/// both encoders. For pseudo-pairs pass the same encoder twice and add the
/// two gradients.
pub fn contrastive_loss_grad(
    enc_a: &EncoderParams,
    enc_b: &EncoderParams,
    inputs_a: &[Tensor],
    inputs_b: &[Tensor],
    targets_ab: &SoftTargetMatrix,
    targets_ba: &SoftTargetMatrix,
    tau: f64,
) -> Result<ContrastiveOutput> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", format!("must be > 0, got {tau}")));
    }
    if inputs_a.len() != inputs_b.len() || inputs_a.is_empty() {
        return Err(Error::Shape {
            op: "contrastive_loss_grad",
            left: vec![inputs_a.len()],
            right: vec![inputs_b.len()],
        });
    }
    let m = inputs_a.len();
    let traces_a = inputs_a.iter().map(|x| encode_traced(enc_a, x)).collect::<Result<Vec<_>>>()?;
    let traces_b = inputs_b.iter().map(|x| encode_traced(enc_b, x)).collect::<Result<Vec<_>>>()?;
    let unit_a: Vec<(Vec<f64>, f64)> = traces_a.iter().map(normalized).collect();
    let unit_b: Vec<(Vec<f64>, f64)> = traces_b.iter().map(normalized).collect();
    if unit_a.iter().chain(&unit_b).any(|u| u.1 == 0.0) {
        warn!("zero-norm embedding in contrastive batch; its similarities are 0");
    }

    let mut sim = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            let s = numerics::dot(&unit_a[i].0, &unit_b[j].0).clamp(-1.0, 1.0);
            sim.set(i, j, s);
        }
    }
    let (loss, d_sim) = similarity_loss_grad(&sim, targets_ab, targets_ba, tau)?;

    // d cos(a, b) / d a = (b_hat - cos * a_hat) / |a|
    let de_a = enc_a.embed_dim();
    let de_b = enc_b.embed_dim();
    let mut g_a = vec![vec![0.0; de_a]; m];
    let mut g_b = vec![vec![0.0; de_b]; m];
    for i in 0..m {
        for j in 0..m {
            let g = d_sim.get(i, j);
            if g == 0.0 {
                continue;
            }
            let s = sim.get(i, j);
            let (ah, an) = (&unit_a[i].0, unit_a[i].1);
            let (bh, bn) = (&unit_b[j].0, unit_b[j].1);
            if an > 0.0 && bn > 0.0 {
                for k in 0..de_a {
                    g_a[i][k] += g * (bh[k] - s * ah[k]) / an;
                }
                for k in 0..de_b {
                    g_b[j][k] += g * (ah[k] - s * bh[k]) / bn;
                }
            }
        }
    }
    let mut grad_a = enc_a.zeros_like();
    let mut grad_b = enc_b.zeros_like();
    for i in 0..m {
        encoder_backward(enc_a, &inputs_a[i], &traces_a[i], &g_a[i], &mut grad_a);
        encoder_backward(enc_b, &inputs_b[i], &traces_b[i], &g_b[i], &mut grad_b);
    }
    Ok(ContrastiveOutput {
        loss,
        grad_a,
        grad_b,
        similarity: sim,
    })
}
