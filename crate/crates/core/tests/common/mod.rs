//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's math; only its data types.

#![allow(dead_code)]

use std::collections::BTreeMap;

use tempfed::contrastive::TemporalSegment;
use tempfed::model::EncoderParams;
use tempfed::numerics::Tensor;
use tempfed::rng::SplitMix64;
use tempfed::synthdata::{ModalityId, MultiModalSample};

pub fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

pub fn rand_encoder(rng: &mut SplitMix64, d: usize, h: usize, de: usize) -> EncoderParams {
    EncoderParams {
        w_in: rand_tensor(rng, &[d, h], 1.0 / (d as f64).sqrt()),
        b_in: rand_tensor(rng, &[h], 0.1),
        w_out: rand_tensor(rng, &[h, de], 1.0 / (h as f64).sqrt()),
        b_out: rand_tensor(rng, &[de], 0.1),
    }
}

pub fn encoder_flat(e: &EncoderParams) -> Tensor {
    let mut v = Vec::new();
    for t in [&e.w_in, &e.b_in, &e.w_out, &e.b_out] {
        v.extend_from_slice(t.data());
    }
    Tensor::vector(v)
}

pub fn encoder_from_flat(template: &EncoderParams, flat: &[f64]) -> EncoderParams {
    let mut out = template.clone();
    let mut off = 0;
    for t in [&mut out.w_in, &mut out.b_in, &mut out.w_out, &mut out.b_out] {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    out
}

/// Per-timestep affine map, ReLU, mean over time, affine map.
pub fn naive_encode(e: &EncoderParams, x: &Tensor) -> Vec<f64> {
    let (t_len, d) = (x.rows(), x.cols());
    let h = e.b_in.len();
    let de = e.b_out.len();
    let mut pooled = vec![0.0; h];
    for t in 0..t_len {
        for k in 0..h {
            let mut a = e.b_in.data()[k];
            for i in 0..d {
                a += x.get(t, i) * e.w_in.get(i, k);
            }
            pooled[k] += a.max(0.0) / t_len as f64;
        }
    }
    (0..de)
        .map(|j| e.b_out.data()[j] + (0..h).map(|k| pooled[k] * e.w_out.get(k, j)).sum::<f64>())
        .collect()
}

pub fn naive_cosine(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)
}

/// The symmetric soft-target contrastive loss written as literal double
/// loops over directed pairs.
pub fn naive_contrastive_loss(
    enc_a: &EncoderParams,
    enc_b: &EncoderParams,
    xs_a: &[Tensor],
    xs_b: &[Tensor],
    t_ab: &[Vec<f64>],
    t_ba: &[Vec<f64>],
    tau: f64,
) -> f64 {
    let m = xs_a.len();
    let ea: Vec<Vec<f64>> = xs_a.iter().map(|x| naive_encode(enc_a, x)).collect();
    let eb: Vec<Vec<f64>> = xs_b.iter().map(|x| naive_encode(enc_b, x)).collect();
    let s = |i: usize, j: usize| naive_cosine(&ea[i], &eb[j]);
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let denom: f64 = (0..m).map(|k| (s(i, k) / tau).exp()).sum();
            total += -t_ab[i][j] * ((s(i, j) / tau).exp() / denom).ln();
        }
    }
    for i in 0..m {
        for j in 0..m {
            let denom: f64 = (0..m).map(|k| (s(k, i) / tau).exp()).sum();
            total += -t_ba[i][j] * ((s(j, i) / tau).exp() / denom).ln();
        }
    }
    total / (2.0 * m as f64)
}

/// Overlap of two intervals counted on a uniform grid over [0, 1).
pub fn brute_tiou(a: (f64, f64), b: (f64, f64), step: f64) -> f64 {
    let n = (1.0 / step).round() as usize;
    let (mut inter, mut union) = (0usize, 0usize);
    for k in 0..n {
        let x = (k as f64 + 0.5) * step;
        let ia = x >= a.0 && x < a.1;
        let ib = x >= b.0 && x < b.1;
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn segment(sample_id: u32, start: f64, end: f64) -> TemporalSegment {
    TemporalSegment {
        sample_id,
        start,
        end,
        first_step: 0,
        end_step: 1,
    }
}

/// Random samples with the given modality widths and `t_len` steps.
pub fn random_samples(rng: &mut SplitMix64, n: usize, t_len: usize, dims: &[usize]) -> Vec<MultiModalSample> {
    (0..n)
        .map(|i| MultiModalSample {
            sample_id: i as u32,
            label: Some((i % 2) as u32),
            modalities: dims
                .iter()
                .enumerate()
                .map(|(m, &d)| (ModalityId(m as u32), rand_tensor(rng, &[t_len, d], 1.0)))
                .collect::<BTreeMap<_, _>>(),
        })
        .collect()
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}
