//! Per-modality encoders, concatenation fusion, and the linear task head,
//! with hand-written backward passes and a flat parameter view.
//!
//! Encoder: per-timestep linear, ReLU, temporal mean-pool, linear.
//!
//! ```text
//! e = W_outᵀ · mean_t ReLU(W_inᵀ x_t + b_in) + b_out
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};
use crate::rng::SplitMix64;
use crate::synthdata::{ModalityId, MultiModalSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `[d_m x h]`
    pub w_in: Tensor,
    /// `[h]`
    pub b_in: Tensor,
    /// `[h x d_e]`
    pub w_out: Tensor,
    /// `[d_e]`
    pub b_out: Tensor,
}

impl EncoderParams {
    pub fn zeros(input_dim: usize, hidden: usize, embed_dim: usize) -> Self {
        Self {
            w_in: Tensor::zeros(&[input_dim, hidden]),
            b_in: Tensor::zeros(&[hidden]),
            w_out: Tensor::zeros(&[hidden, embed_dim]),
            b_out: Tensor::zeros(&[embed_dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden(), self.embed_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_in.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_out.cols()
    }

    fn blocks(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_in", &self.w_in),
            ("b_in", &self.b_in),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_in, &mut self.b_in, &mut self.w_out, &mut self.b_out]
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.blocks_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    /// `self += alpha * other`, block by block.
    pub fn add_scaled(&mut self, alpha: f64, other: &EncoderParams) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            numerics::axpy(alpha, src.1.data(), dst.data_mut());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `[d_fused x K]`
    pub weight: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

impl HeadParams {
    pub fn zeros(fused_dim: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fused_dim, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &HeadParams) {
        numerics::axpy(alpha, other.weight.data(), self.weight.data_mut());
        numerics::axpy(alpha, other.bias.data(), self.bias.data_mut());
    }
}

/// One named parameter block in flattening order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub name: String,
    pub shape: Vec<usize>,
}

pub type Manifest = Vec<BlockShape>;

pub fn manifest_len(manifest: &[BlockShape]) -> usize {
    manifest.iter().map(|b| b.shape.iter().product::<usize>()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoders: BTreeMap<ModalityId, EncoderParams>,
    pub head: HeadParams,
}

fn init_block(seed: u64, index: u64, shape: &[usize], fan_in: usize) -> Tensor {
    let mut rng = SplitMix64::from_tags(seed, &[0x1417, index]);
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-bound, bound)).collect()).unwrap()
}

impl ModelParams {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization, one PRNG
    /// stream per parameter block (block index in manifest order).
    pub fn init(
        input_dims: &BTreeMap<ModalityId, usize>,
        num_classes: usize,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        if input_dims.is_empty() || num_classes == 0 || cfg.hidden == 0 || cfg.embed_dim == 0 {
            return Err(Error::param(
                "model",
                "need >= 1 modality, >= 1 class, and nonzero hidden/embed widths",
            ));
        }
        let (h, de) = (cfg.hidden, cfg.embed_dim);
        let mut block = 0u64;
        let mut next = |shape: &[usize], fan_in: usize| {
            let t = init_block(seed, block, shape, fan_in);
            block += 1;
            t
        };
        let mut encoders = BTreeMap::new();
        for (&m, &d) in input_dims {
            let enc = EncoderParams {
                w_in: next(&[d, h], d),
                b_in: next(&[h], d),
                w_out: next(&[h, de], h),
                b_out: next(&[de], h),
            };
            encoders.insert(m, enc);
        }
        let fused = de * input_dims.len();
        let head = HeadParams {
            weight: next(&[fused, num_classes], fused),
            bias: next(&[num_classes], fused),
        };
        Ok(Self { encoders, head })
    }

    pub fn fused_dim(&self) -> usize {
        self.encoders.values().map(EncoderParams::embed_dim).sum()
    }

    fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (m, enc) in &self.encoders {
            for (name, t) in enc.blocks() {
                out.push((format!("encoder/{}/{name}", m.0), t));
            }
        }
        out.push(("head/weight".into(), &self.head.weight));
        out.push(("head/bias".into(), &self.head.bias));
        out
    }

    pub fn manifest(&self) -> Manifest {
        self.blocks()
            .into_iter()
            .map(|(name, t)| BlockShape {
                name,
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        manifest_len(&self.manifest())
    }

    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self
            .blocks()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect();
        Tensor::vector(data)
    }

    /// Rebuild parameters from a manifest and a flat vector.
    pub fn unflatten(manifest: &[BlockShape], flat: &[f64]) -> Result<Self> {
        if manifest_len(manifest) != flat.len() {
            return Err(Error::Manifest(format!(
                "manifest holds {} values, payload {}",
                manifest_len(manifest),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut take = |b: &BlockShape| {
            let n: usize = b.shape.iter().product();
            let t = Tensor::new(b.shape.clone(), flat[offset..offset + n].to_vec());
            offset += n;
            t
        };
        let mut encoders: BTreeMap<ModalityId, [Option<Tensor>; 4]> = BTreeMap::new();
        let (mut weight, mut bias) = (None, None);
        for b in manifest {
            let parts: Vec<&str> = b.name.split('/').collect();
            match parts.as_slice() {
                ["encoder", id, role] => {
                    let id: u32 = id
                        .parse()
                        .map_err(|_| Error::Manifest(format!("bad modality in `{}`", b.name)))?;
                    let slot = match *role {
                        "w_in" => 0,
                        "b_in" => 1,
                        "w_out" => 2,
                        "b_out" => 3,
                        _ => return Err(Error::Manifest(format!("unknown block `{}`", b.name))),
                    };
                    encoders.entry(ModalityId(id)).or_default()[slot] = Some(take(b)?);
                }
                ["head", "weight"] => weight = Some(take(b)?),
                ["head", "bias"] => bias = Some(take(b)?),
                _ => return Err(Error::Manifest(format!("unknown block `{}`", b.name))),
            }
        }
        let mut out = BTreeMap::new();
        for (m, [w_in, b_in, w_out, b_out]) in encoders {
            match (w_in, b_in, w_out, b_out) {
                (Some(w_in), Some(b_in), Some(w_out), Some(b_out)) => {
                    out.insert(m, EncoderParams { w_in, b_in, w_out, b_out });
                }
                _ => return Err(Error::Manifest(format!("encoder {m} is incomplete"))),
            }
        }
        let head = match (weight, bias) {
            (Some(weight), Some(bias)) => HeadParams { weight, bias },
            _ => return Err(Error::Manifest("head is incomplete".into())),
        };
        let model = Self {
            encoders: out,
            head,
        };
        // a manifest in a different order than ours would not round-trip
        if model.manifest() != manifest {
            return Err(Error::Manifest("blocks out of canonical order".into()));
        }
        Ok(model)
    }

    /// Same structure as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        Self::unflatten(&self.manifest(), flat)
    }

    /// Encoder parameters only, in manifest order.
    pub fn flatten_encoders(&self) -> Vec<f64> {
        self.encoders
            .values()
            .flat_map(|e| e.blocks().into_iter().flat_map(|(_, t)| t.data().iter().copied()))
            .collect()
    }

    pub fn set_encoders_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self.encoders.values().map(|e| e.blocks().iter().map(|b| b.1.len()).sum::<usize>()).sum();
        if flat.len() != expected {
            return Err(Error::Manifest(format!(
                "encoder payload has {} values, expected {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for enc in self.encoders.values_mut() {
            for t in enc.blocks_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoders: self
                .encoders
                .iter()
                .map(|(&m, e)| (m, e.zeros_like()))
                .collect(),
            head: HeadParams::zeros(self.head.weight.rows(), self.head.num_classes()),
        }
    }

    /// Fused embedding of a full sample. Modalities missing from the sample
    /// or masked off are zero-filled.
    pub fn embed(&self, sample: &MultiModalSample) -> Result<Tensor> {
        let mut embeddings = BTreeMap::new();
        for (m, x) in &sample.modalities {
            if let Some(enc) = self.encoders.get(m) {
                embeddings.insert(*m, encode(enc, x)?);
            }
        }
        let present = embeddings.keys().map(|&m| (m, true)).collect();
        self.fuse(&embeddings, &present)
    }

    pub fn fuse(
        &self,
        embeddings: &BTreeMap<ModalityId, Tensor>,
        present: &BTreeMap<ModalityId, bool>,
    ) -> Result<Tensor> {
        let layout: Vec<(ModalityId, usize)> = self
            .encoders
            .iter()
            .map(|(&m, e)| (m, e.embed_dim()))
            .collect();
        fuse(embeddings, present, &layout)
    }

    pub fn predict(&self, sample: &MultiModalSample) -> Result<usize> {
        let logits = head_forward(&self.head, &self.embed(sample)?)?;
        Ok(argmax(logits.data()))
    }

    /// Encoder blocks equal bit-for-bit.
    pub fn encoders_bit_equal(&self, other: &ModelParams) -> bool {
        bit_equal(&self.flatten_encoders(), &other.flatten_encoders())
    }

    pub fn head_bit_equal(&self, other: &ModelParams) -> bool {
        bit_equal(self.head.weight.data(), other.head.weight.data())
            && bit_equal(self.head.bias.data(), other.head.bias.data())
    }
}

pub fn bit_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Intermediate values of one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// `[T' x h]` pre-activations.
    pub pre: Vec<f64>,
    /// `[h]` mean of the rectified hidden states.
    pub pooled: Vec<f64>,
    pub embedding: Vec<f64>,
}

fn check_segment(enc: &EncoderParams, segment: &Tensor) -> Result<()> {
    if segment.shape().len() != 2 || segment.cols() != enc.input_dim() {
        return Err(Error::Shape {
            op: "encode",
            left: segment.shape().to_vec(),
            right: enc.w_in.shape().to_vec(),
        });
    }
    if segment.rows() == 0 {
        return Err(Error::Input("cannot encode an empty segment".into()));
    }
    Ok(())
}

pub fn encode_traced(enc: &EncoderParams, segment: &Tensor) -> Result<EncoderTrace> {
    check_segment(enc, segment)?;
    let (t_len, d, h) = (segment.rows(), enc.input_dim(), enc.hidden());
    let w_in = enc.w_in.data();
    let mut pre = vec![0.0; t_len * h];
    let mut pooled = vec![0.0; h];
    for t in 0..t_len {
        let row = &mut pre[t * h..(t + 1) * h];
        row.copy_from_slice(enc.b_in.data());
        for (i, &x) in segment.row(t).iter().enumerate().take(d) {
            if x != 0.0 {
                numerics::axpy(x, &w_in[i * h..(i + 1) * h], row);
            }
        }
        for (p, &v) in pooled.iter_mut().zip(row.iter()) {
            *p += v.max(0.0);
        }
    }
    let inv = 1.0 / t_len as f64;
    pooled.iter_mut().for_each(|p| *p *= inv);
    let de = enc.embed_dim();
    let mut embedding = enc.b_out.data().to_vec();
    let w_out = enc.w_out.data();
    for (j, &p) in pooled.iter().enumerate() {
        if p != 0.0 {
            numerics::axpy(p, &w_out[j * de..(j + 1) * de], &mut embedding);
        }
    }
    Ok(EncoderTrace {
        pre,
        pooled,
        embedding,
    })
}

pub fn encode(enc: &EncoderParams, segment: &Tensor) -> Result<Tensor> {
    Ok(Tensor::vector(encode_traced(enc, segment)?.embedding))
}

/// Accumulate into `grads` the gradient of a scalar objective whose
/// derivative w.r.t. the embedding is `grad_embedding`.
pub fn encoder_backward(
    enc: &EncoderParams,
    segment: &Tensor,
    trace: &EncoderTrace,
    grad_embedding: &[f64],
    grads: &mut EncoderParams,
) {
    let (t_len, h, de) = (segment.rows(), enc.hidden(), enc.embed_dim());
    numerics::axpy(1.0, grad_embedding, grads.b_out.data_mut());
    let gw_out = grads.w_out.data_mut();
    for (j, &p) in trace.pooled.iter().enumerate() {
        if p != 0.0 {
            numerics::axpy(p, grad_embedding, &mut gw_out[j * de..(j + 1) * de]);
        }
    }
    let w_out = enc.w_out.data();
    let inv = 1.0 / t_len as f64;
    let grad_pooled: Vec<f64> = (0..h)
        .map(|j| numerics::dot(&w_out[j * de..(j + 1) * de], grad_embedding) * inv)
        .collect();
    let mut grad_pre = vec![0.0; h];
    let gw_in = grads.w_in.data_mut();
    for t in 0..t_len {
        for j in 0..h {
            grad_pre[j] = if trace.pre[t * h + j] > 0.0 { grad_pooled[j] } else { 0.0 };
        }
        numerics::axpy(1.0, &grad_pre, grads.b_in.data_mut());
        for (i, &x) in segment.row(t).iter().enumerate() {
            if x != 0.0 {
                numerics::axpy(x, &grad_pre, &mut gw_in[i * h..(i + 1) * h]);
            }
        }
    }
}

/// Concatenate embeddings in `layout` order; absent entries become zeros.
pub fn fuse(
    embeddings: &BTreeMap<ModalityId, Tensor>,
    present: &BTreeMap<ModalityId, bool>,
    layout: &[(ModalityId, usize)],
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(layout.iter().map(|l| l.1).sum());
    let mut any = false;
    for &(m, d) in layout {
        let on = present.get(&m).copied().unwrap_or(false);
        match embeddings.get(&m) {
            Some(e) if on => {
                if e.len() != d {
                    return Err(Error::Shape {
                        op: "fuse",
                        left: vec![d],
                        right: e.shape().to_vec(),
                    });
                }
                out.extend_from_slice(e.data());
                any = true;
            }
            _ => out.extend(std::iter::repeat(0.0).take(d)),
        }
    }
    if !any {
        return Err(Error::Input("fusion needs at least one present modality".into()));
    }
    Ok(Tensor::vector(out))
}

pub fn head_forward(head: &HeadParams, fused: &Tensor) -> Result<Tensor> {
    if fused.len() != head.weight.rows() {
        return Err(Error::Shape {
            op: "head_forward",
            left: head.weight.shape().to_vec(),
            right: fused.shape().to_vec(),
        });
    }
    let k = head.num_classes();
    let mut logits = head.bias.data().to_vec();
    let w = head.weight.data();
    for (i, &x) in fused.data().iter().enumerate() {
        numerics::axpy(x, &w[i * k..(i + 1) * k], &mut logits);
    }
    Ok(Tensor::vector(logits))
}

#[derive(Debug, Clone)]
pub struct HeadLossGrad {
    pub loss: f64,
    pub grad: HeadParams,
    /// `[n x d_fused]` derivative of the mean loss w.r.t. each input row.
    pub grad_inputs: Tensor,
}

/// Mean softmax cross-entropy over a batch of fused rows.
pub fn head_loss_grad(head: &HeadParams, fused: &[Tensor], labels: &[u32]) -> Result<HeadLossGrad> {
    if fused.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if fused.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} inputs but {} labels",
            fused.len(),
            labels.len()
        )));
    }
    let k = head.num_classes();
    let d = head.weight.rows();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    let n = fused.len() as f64;
    let mut grad = HeadParams::zeros(d, k);
    let mut grad_inputs = vec![0.0; fused.len() * d];
    let mut loss = 0.0;
    let w = head.weight.data();
    for (r, (x, &y)) in fused.iter().zip(labels).enumerate() {
        let logits = head_forward(head, x)?;
        let lse = numerics::log_sum_exp(logits.data(), 1.0);
        loss += lse - logits.data()[y as usize];
        // d loss / d logits = softmax - onehot, scaled by 1/n
        let mut delta: Vec<f64> = logits.data().iter().map(|&z| (z - lse).exp() / n).collect();
        delta[y as usize] -= 1.0 / n;
        numerics::axpy(1.0, &delta, grad.bias.data_mut());
        let gw = grad.weight.data_mut();
        let gx = &mut grad_inputs[r * d..(r + 1) * d];
        for (i, &xi) in x.data().iter().enumerate() {
            numerics::axpy(xi, &delta, &mut gw[i * k..(i + 1) * k]);
            gx[i] = numerics::dot(&w[i * k..(i + 1) * k], &delta);
        }
    }
    Ok(HeadLossGrad {
        loss: loss / n,
        grad,
        grad_inputs: Tensor::new(vec![fused.len(), d], grad_inputs)?,
    })
}

/// Mean cross-entropy of the full model over labelled samples, with
/// gradients for every block (encoders and head).
pub fn supervised_loss_grad(
    model: &ModelParams,
    samples: &[&MultiModalSample],
) -> Result<(f64, ModelParams)> {
    let mut fused = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut traces = Vec::with_capacity(samples.len());
    for s in samples {
        let label = s
            .label
            .ok_or_else(|| Error::Input(format!("sample {} is unlabelled", s.sample_id)))?;
        let mut embeddings = BTreeMap::new();
        let mut per_mod = Vec::new();
        for (m, x) in &s.modalities {
            if let Some(enc) = model.encoders.get(m) {
                let tr = encode_traced(enc, x)?;
                embeddings.insert(*m, Tensor::vector(tr.embedding.clone()));
                per_mod.push((*m, tr));
            }
        }
        let present = embeddings.keys().map(|&m| (m, true)).collect();
        fused.push(model.fuse(&embeddings, &present)?);
        labels.push(label);
        traces.push(per_mod);
    }
    let out = head_loss_grad(&model.head, &fused, &labels)?;
    let mut grads = model.zeros_like();
    grads.head = out.grad;
    // offsets of each modality inside the fused vector
    let mut offsets = BTreeMap::new();
    let mut acc = 0;
    for (&m, e) in &model.encoders {
        offsets.insert(m, acc);
        acc += e.embed_dim();
    }
    for (r, (s, per_mod)) in samples.iter().zip(&traces).enumerate() {
        let gx = out.grad_inputs.row(r);
        for (m, tr) in per_mod {
            let enc = &model.encoders[m];
            let off = offsets[m];
            let g = &gx[off..off + enc.embed_dim()];
            encoder_backward(enc, &s.modalities[m], tr, g, grads.encoders.get_mut(m).unwrap());
        }
    }
    Ok((out.loss, grads))
}

const CKPT_MAGIC: &[u8; 4] = b"TCTM";
const CKPT_VERSION: u32 = 1;

/// Checkpoint layout (little-endian): magic `TCTM`, u32 version, u32 block
/// count, then per block u32 name length, UTF-8 name, u32 rank, u32 dims;
/// then every value as f64 in manifest order.
pub fn encode_checkpoint(model: &ModelParams) -> Vec<u8> {
    let manifest = model.manifest();
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for b in &manifest {
        buf.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(b.name.as_bytes());
        buf.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in model.flatten().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parse a checkpoint; if `expected` is given the stored manifest must
/// equal it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&[BlockShape]>) -> Result<ModelParams> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::format(pos as u64, "truncated checkpoint"));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != CKPT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let version = u32_at(take(4)?);
    if version != CKPT_VERSION as usize {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let blocks = u32_at(take(4)?);
    let mut manifest = Vec::with_capacity(blocks.min(1024));
    for _ in 0..blocks {
        let len = u32_at(take(4)?);
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::format(0, "block name is not UTF-8"))?
            .to_string();
        let rank = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(u32_at(take(4)?));
        }
        manifest.push(BlockShape { name, shape });
    }
    if let Some(exp) = expected {
        if exp != manifest.as_slice() {
            return Err(Error::Manifest("checkpoint manifest differs from the model".into()));
        }
    }
    let n = manifest_len(&manifest);
    let payload = take(n * 8)?;
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, "trailing bytes after checkpoint payload"));
    }
    ModelParams::unflatten(&manifest, &flat)
}

pub fn save_checkpoint(path: &Path, model: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&[BlockShape]>) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, matmul};

    fn dims(a: usize, b: usize) -> BTreeMap<ModalityId, usize> {
        [(ModalityId(0), a), (ModalityId(1), b)].into_iter().collect()
    }

    fn random_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn model(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            hidden: 5,
            embed_dim: 3,
        };
        ModelParams::init(&dims(4, 3), 3, &cfg, seed).unwrap()
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_embedding() {
        let mut enc = model(1).encoders[&ModalityId(0)].clone();
        enc.b_in = Tensor::zeros(&[5]);
        enc.b_out = Tensor::zeros(&[3]);
        let e = encode(&enc, &Tensor::zeros(&[6, 4])).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_segment_encodes_the_same() {
        let mut rng = SplitMix64::new(2);
        let enc = model(2).encoders[&ModalityId(0)].clone();
        let x = random_tensor(&mut rng, &[5, 4]);
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let xx = Tensor::new(vec![10, 4], doubled).unwrap();
        let a = encode(&enc, &x).unwrap();
        let b = encode(&enc, &xx).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn encode_matches_straight_line_formula() {
        let mut rng = SplitMix64::new(3);
        let enc = model(3).encoders[&ModalityId(1)].clone();
        let x = random_tensor(&mut rng, &[5, 3]);
        // matmul-based re-evaluation
        let pre = matmul(&x, &enc.w_in).unwrap();
        let mut pooled = vec![0.0; 5];
        for t in 0..5 {
            for j in 0..5 {
                pooled[j] += (pre.get(t, j) + enc.b_in.data()[j]).max(0.0) / 5.0;
            }
        }
        let row = Tensor::from_rows(&[pooled]).unwrap();
        let out = matmul(&row, &enc.w_out).unwrap();
        let e = encode(&enc, &x).unwrap();
        for k in 0..3 {
            assert!((e.data()[k] - (out.get(0, k) + enc.b_out.data()[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_bad_shapes() {
        let enc = model(1).encoders[&ModalityId(0)].clone();
        assert!(matches!(encode(&enc, &Tensor::zeros(&[3, 2])), Err(Error::Shape { .. })));
        assert!(encode(&enc, &Tensor::zeros(&[0, 4])).is_err());
    }

    #[test]
    fn fuse_examples() {
        let layout = [(ModalityId(0), 2), (ModalityId(1), 2)];
        let mut emb = BTreeMap::new();
        emb.insert(ModalityId(1), Tensor::vector(vec![3.0, 4.0]));
        emb.insert(ModalityId(0), Tensor::vector(vec![1.0, 2.0]));
        let both: BTreeMap<_, _> = [(ModalityId(0), true), (ModalityId(1), true)].into();
        assert_eq!(fuse(&emb, &both, &layout).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let only_a: BTreeMap<_, _> = [(ModalityId(0), true), (ModalityId(1), false)].into();
        assert_eq!(fuse(&emb, &only_a, &layout).unwrap().data(), &[1.0, 2.0, 0.0, 0.0]);
        let none: BTreeMap<_, _> = [(ModalityId(0), false), (ModalityId(1), false)].into();
        assert!(matches!(fuse(&emb, &none, &layout), Err(Error::Input(_))));
    }

    #[test]
    fn head_forward_examples() {
        let head = HeadParams {
            weight: Tensor::zeros(&[2, 2]),
            bias: Tensor::vector(vec![1.0, 2.0]),
        };
        assert_eq!(head_forward(&head, &Tensor::vector(vec![7.0, 9.0])).unwrap().data(), &[1.0, 2.0]);
        let head = HeadParams {
            weight: Tensor::identity(2),
            bias: Tensor::zeros(&[2]),
        };
        assert_eq!(head_forward(&head, &Tensor::vector(vec![3.0, 5.0])).unwrap().data(), &[3.0, 5.0]);
        assert!(head_forward(&head, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn head_forward_matches_matmul() {
        let mut rng = SplitMix64::new(8);
        let head = HeadParams {
            weight: random_tensor(&mut rng, &[6, 4]),
            bias: random_tensor(&mut rng, &[4]),
        };
        let x = random_tensor(&mut rng, &[1, 6]);
        let via = matmul(&x, &head.weight).unwrap();
        let out = head_forward(&head, &Tensor::vector(x.data().to_vec())).unwrap();
        for k in 0..4 {
            assert!((out.data()[k] - via.data()[k] - head.bias.data()[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let head = HeadParams::zeros(3, 4);
        let x = vec![Tensor::vector(vec![0.3, -0.2, 0.9]); 2];
        let out = head_loss_grad(&head, &x, &[0, 3]).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        assert!((out.loss - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let head = HeadParams {
            weight: Tensor::identity(3),
            bias: Tensor::zeros(&[3]),
        };
        let x = vec![Tensor::vector(vec![100.0, 0.0, 0.0]), Tensor::vector(vec![0.0, 0.0, 100.0])];
        let out = head_loss_grad(&head, &x, &[0, 2]).unwrap();
        assert!(out.loss < 1e-40);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let head = HeadParams::zeros(2, 2);
        let x = vec![Tensor::vector(vec![0.0, 0.0])];
        assert!(matches!(head_loss_grad(&head, &x, &[2]), Err(Error::Input(_))));
        assert!(head_loss_grad(&head, &[], &[]).is_err());
    }

    #[test]
    fn head_gradient_passes_finite_differences() {
        let mut rng = SplitMix64::new(12);
        let head = HeadParams {
            weight: random_tensor(&mut rng, &[5, 3]),
            bias: random_tensor(&mut rng, &[3]),
        };
        let x: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[5])).collect();
        let labels = [0, 2, 1, 2];
        let out = head_loss_grad(&head, &x, &labels).unwrap();
        let flat = |h: &HeadParams| {
            let mut v = h.weight.data().to_vec();
            v.extend_from_slice(h.bias.data());
            Tensor::vector(v)
        };
        let f = |p: &Tensor| {
            let h = HeadParams {
                weight: Tensor::new(vec![5, 3], p.data()[..15].to_vec()).unwrap(),
                bias: Tensor::vector(p.data()[15..].to_vec()),
            };
            head_loss_grad(&h, &x, &labels).unwrap().loss
        };
        let err = check_gradient(f, &flat(&head), &flat(&out.grad), 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
        // input gradient
        let g = |p: &Tensor| {
            let mut xs = x.clone();
            xs[1] = p.clone();
            head_loss_grad(&head, &xs, &labels).unwrap().loss
        };
        let gx = Tensor::vector(out.grad_inputs.row(1).to_vec());
        assert!(check_gradient(g, &x[1], &gx, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn supervised_gradient_passes_finite_differences() {
        let mut rng = SplitMix64::new(21);
        let m = model(21);
        let samples: Vec<MultiModalSample> = (0..3)
            .map(|i| MultiModalSample {
                sample_id: i,
                label: Some(i % 3),
                modalities: [
                    (ModalityId(0), random_tensor(&mut rng, &[4, 4])),
                    (ModalityId(1), random_tensor(&mut rng, &[4, 3])),
                ]
                .into(),
            })
            .collect();
        let refs: Vec<&MultiModalSample> = samples.iter().collect();
        let (_, grads) = supervised_loss_grad(&m, &refs).unwrap();
        let f = |p: &Tensor| {
            let mm = m.with_flat(p.data()).unwrap();
            supervised_loss_grad(&mm, &refs).unwrap().0
        };
        let err = check_gradient(f, &m.flatten(), &grads.flatten(), 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let (da, db, h, de, k) = (7, 5, 32, 16, 4);
        let cfg = ModelConfig { hidden: h, embed_dim: de };
        let m = ModelParams::init(&dims(da, db), k, &cfg, 0).unwrap();
        let expected = (da + 1) * h + (h + 1) * de + (db + 1) * h + (h + 1) * de + (2 * de + 1) * k;
        assert_eq!(m.num_params(), expected);
        assert_eq!(m.flatten().len(), expected);
    }

    #[test]
    fn flatten_round_trip_and_linearity() {
        let a = model(4);
        let b = model(5);
        assert_eq!(ModelParams::unflatten(&a.manifest(), a.flatten().data()).unwrap(), a);
        let sum: Vec<f64> = a.flatten().data().iter().zip(b.flatten().data()).map(|(x, y)| x + y).collect();
        let c = a.with_flat(&sum).unwrap();
        let mut expected = a.clone();
        for (m, e) in expected.encoders.iter_mut() {
            e.add_scaled(1.0, &b.encoders[m]);
        }
        expected.head.add_scaled(1.0, &b.head);
        assert_eq!(c, expected);
    }

    #[test]
    fn unflatten_rejects_mismatch() {
        let a = model(4);
        let flat = a.flatten();
        assert!(matches!(
            ModelParams::unflatten(&a.manifest(), &flat.data()[1..]),
            Err(Error::Manifest(_))
        ));
        let mut bad = a.manifest();
        bad[0].name = "encoder/0/w_mid".into();
        assert!(ModelParams::unflatten(&bad, flat.data()).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        assert_eq!(model(9), model(9));
        assert_ne!(model(9), model(10));
        let m = model(9);
        let bound = 1.0 / 2.0; // fan_in 4 for modality 0
        assert!(m.encoders[&ModalityId(0)].w_in.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn averaged_heads_give_averaged_logits() {
        let mut rng = SplitMix64::new(30);
        for _ in 0..10 {
            let h1 = HeadParams { weight: random_tensor(&mut rng, &[4, 3]), bias: random_tensor(&mut rng, &[3]) };
            let h2 = HeadParams { weight: random_tensor(&mut rng, &[4, 3]), bias: random_tensor(&mut rng, &[3]) };
            let mut avg = h1.clone();
            avg.add_scaled(1.0, &h2);
            avg.weight.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            avg.bias.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            let x = random_tensor(&mut rng, &[4]);
            let l = head_forward(&avg, &x).unwrap();
            let l1 = head_forward(&h1, &x).unwrap();
            let l2 = head_forward(&h2, &x).unwrap();
            for k in 0..3 {
                assert!((l.data()[k] - 0.5 * (l1.data()[k] + l2.data()[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let a = model(6);
        let bytes = encode_checkpoint(&a);
        assert_eq!(decode_checkpoint(&bytes, Some(&a.manifest())).unwrap(), a);
        let other = ModelParams::init(&dims(4, 2), 3, &ModelConfig { hidden: 5, embed_dim: 3 }, 0).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes, Some(&other.manifest())),
            Err(Error::Manifest(_))
        ));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], None).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &a).unwrap();
        assert_eq!(load_checkpoint(&p, None).unwrap(), a);
    }
}
