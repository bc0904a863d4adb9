//! Synthetic multi-modal temporal data and the binary feature-file format.
//!
//! Every sample owns a smooth latent trajectory `z(t)` made of a
//! class-specific Fourier mixture (shifted in time per sample) plus a
//! sample-specific one. A mixture has a constant term and a few sinusoids
//! per coordinate. Modality A observes `W_A z(t)`, modality B observes
//! `tanh(W_B z(t))`, each with additive noise scaled by `noise_sigma`. The
//! noise has an i.i.d. part and a smooth modality-private part `U_m q(t)`
//! where `q` is a low-rank latent of the sample that the other modality
//! never sees. Only the shared latent carries the label.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::SplitMix64;

/// Index of a modality stream. Ordering is the fixed fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModalityId(pub u32);

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // A, B, C, ... for the first 26 streams
        match self.0 {
            n @ 0..=25 => write!(f, "{}", (b'A' + n as u8) as char),
            n => write!(f, "M{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub sample_id: u32,
    /// `None` once a sample has been handed to an unlabelled client.
    pub label: Option<u32>,
    /// Feature sequence `[T x d_m]` per present modality.
    pub modalities: BTreeMap<ModalityId, Tensor>,
}

impl MultiModalSample {
    pub fn timesteps(&self) -> usize {
        self.modalities.values().next().map_or(0, Tensor::rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub timesteps: usize,
    /// Feature width of each modality, in modality order.
    pub modality_dims: Vec<usize>,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Sinusoids per latent coordinate in each Fourier mixture.
    pub num_frequencies: usize,
    /// Scale of the per-sample latent component relative to the class one.
    pub sample_variation: f64,
    /// Weight of the smooth modality-private noise (times `noise_sigma`).
    pub private_noise: f64,
    /// Rank of the modality-private noise latent.
    pub private_rank: usize,
    /// Scale of the constant term in the class mixtures.
    pub class_offset: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 200,
            timesteps: 16,
            modality_dims: vec![64, 64],
            latent_dim: 6,
            noise_sigma: 0.5,
            seed: 0,
            num_frequencies: 3,
            sample_variation: 0.8,
            private_noise: 6.0,
            private_rank: 8,
            class_offset: 1.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("samples_per_class", self.samples_per_class),
            ("timesteps", self.timesteps),
            ("latent_dim", self.latent_dim),
            ("num_frequencies", self.num_frequencies),
            ("private_rank", self.private_rank),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::param(name, "must be >= 1"));
            }
        }
        if self.modality_dims.is_empty() || self.modality_dims.contains(&0) {
            return Err(Error::param(
                "modality_dims",
                "need at least one modality, each with dim >= 1",
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("sample_variation", self.sample_variation),
            ("private_noise", self.private_noise),
            ("class_offset", self.class_offset),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.num_classes * self.samples_per_class
    }
}

/// Per latent coordinate, `c + sum_j a_j sin(TAU f_j t + phi_j)`.
#[derive(Debug, Clone)]
struct FourierMixture {
    offsets: Vec<f64>,
    // [latent_dim][num_frequencies] of (amplitude, frequency, phase)
    terms: Vec<Vec<(f64, f64, f64)>>,
}

impl FourierMixture {
    fn draw(rng: &mut SplitMix64, latent_dim: usize, num_freq: usize, offset_scale: f64) -> Self {
        let offsets = (0..latent_dim).map(|_| offset_scale * rng.normal()).collect();
        let terms = (0..latent_dim)
            .map(|_| {
                (0..num_freq)
                    .map(|_| {
                        let amp = rng.normal();
                        // between half a cycle and two cycles over the sequence
                        let freq = rng.uniform(0.5, 2.0);
                        let phase = rng.uniform(0.0, TAU);
                        (amp, freq, phase)
                    })
                    .collect()
            })
            .collect();
        Self { offsets, terms }
    }

    fn eval(&self, t: f64, out: &mut [f64], scale: f64) {
        for ((o, comps), c) in out.iter_mut().zip(&self.terms).zip(&self.offsets) {
            *o += scale
                * (c + comps
                    .iter()
                    .map(|&(a, f, p)| a * (TAU * f * t + p).sin())
                    .sum::<f64>());
        }
    }
}

fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| scale * rng.normal()).collect()
}

/// Generate the dataset described by `spec`; a pure function of `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<MultiModalSample>> {
    Ok(generate_with_latents(spec)?.0)
}

/// Like [`generate`], also returning each sample's latent trajectory
/// `[T x latent_dim]`.
pub fn generate_with_latents(spec: &DatasetSpec) -> Result<(Vec<MultiModalSample>, Vec<Tensor>)> {
    spec.validate()?;
    let dz = spec.latent_dim;
    let t_len = spec.timesteps;

    // dataset-level structure: observation maps and class mixtures
    let mut world = SplitMix64::from_tags(spec.seed, &[0]);
    let projections: Vec<Vec<f64>> = spec
        .modality_dims
        .iter()
        .map(|&d| random_matrix(&mut world, d, dz, 1.0 / (dz as f64).sqrt()))
        .collect();
    let private_maps: Vec<Vec<f64>> = spec
        .modality_dims
        .iter()
        .map(|&d| random_matrix(&mut world, d, spec.private_rank, 1.0 / (spec.private_rank as f64).sqrt()))
        .collect();
    let classes: Vec<FourierMixture> = (0..spec.num_classes)
        .map(|k| {
            let mut crng = SplitMix64::from_tags(spec.seed, &[1, k as u64]);
            FourierMixture::draw(&mut crng, dz, spec.num_frequencies, spec.class_offset)
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.num_samples());
    let mut latents = Vec::with_capacity(spec.num_samples());
    let mut z = vec![0.0; dz];
    for k in 0..spec.num_classes {
        for s in 0..spec.samples_per_class {
            let sample_id = (k * spec.samples_per_class + s) as u32;
            let mut srng = SplitMix64::from_tags(spec.seed, &[2, sample_id as u64]);
            let shift = srng.next_f64();
            let own = FourierMixture::draw(&mut srng, dz, spec.num_frequencies, 1.0);
            let private: Vec<FourierMixture> = spec
                .modality_dims
                .iter()
                .map(|_| FourierMixture::draw(&mut srng, spec.private_rank, spec.num_frequencies, 1.0))
                .collect();
            let mut q = vec![0.0; spec.private_rank];

            let mut latent = Vec::with_capacity(t_len * dz);
            let mut streams: Vec<Vec<f64>> = spec
                .modality_dims
                .iter()
                .map(|&d| Vec::with_capacity(t_len * d))
                .collect();
            for step in 0..t_len {
                let t = step as f64 / t_len as f64;
                z.iter_mut().for_each(|v| *v = 0.0);
                classes[k].eval(t + shift, &mut z, 1.0);
                own.eval(t, &mut z, spec.sample_variation);
                latent.extend_from_slice(&z);

                for (m, &d) in spec.modality_dims.iter().enumerate() {
                    let w = &projections[m];
                    let u = &private_maps[m];
                    let pr = spec.private_rank;
                    q.iter_mut().for_each(|v| *v = 0.0);
                    private[m].eval(t, &mut q, spec.private_noise);
                    for r in 0..d {
                        let nuisance: f64 = (0..pr).map(|c| u[r * pr + c] * q[c]).sum();
                        let mut v: f64 = (0..dz).map(|c| w[r * dz + c] * z[c]).sum();
                        // odd modalities see a saturating view of the latent
                        if m % 2 == 1 {
                            v = v.tanh();
                        }
                        let noise = if spec.noise_sigma > 0.0 {
                            spec.noise_sigma * (srng.normal() + nuisance)
                        } else {
                            0.0
                        };
                        streams[m].push(v + noise);
                    }
                }
            }
            let modalities = streams
                .into_iter()
                .enumerate()
                .map(|(m, data)| {
                    let d = spec.modality_dims[m];
                    (ModalityId(m as u32), Tensor::new(vec![t_len, d], data).unwrap())
                })
                .collect();
            samples.push(MultiModalSample {
                sample_id,
                label: Some(k as u32),
                modalities,
            });
            latents.push(Tensor::new(vec![t_len, dz], latent).unwrap());
        }
    }
    Ok((samples, latents))
}

const MAGIC: &[u8; 4] = b"TCTF";
const VERSION: u32 = 1;
/// Label value stored for unlabelled samples.
pub const NO_LABEL: u32 = u32::MAX;

/// Serialize samples into the little-endian feature-file layout.
///
/// Every sample must carry the same modality set as `dims` describes;
/// missing modalities are written with a zero present flag.
pub fn encode_features(samples: &[MultiModalSample], dims: &[usize]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in samples {
        let t = s.timesteps();
        buf.extend_from_slice(&s.sample_id.to_le_bytes());
        buf.extend_from_slice(&s.label.unwrap_or(NO_LABEL).to_le_bytes());
        buf.extend_from_slice(&(t as u32).to_le_bytes());
        if let Some(extra) = s.modalities.keys().find(|m| m.0 as usize >= dims.len()) {
            return Err(Error::Input(format!(
                "sample {} has modality {extra} beyond the declared {}",
                s.sample_id,
                dims.len()
            )));
        }
        for (m, &d) in dims.iter().enumerate() {
            match s.modalities.get(&ModalityId(m as u32)) {
                Some(x) => {
                    if x.shape() != [t, d] {
                        return Err(Error::Shape {
                            op: "encode_features",
                            left: vec![t, d],
                            right: x.shape().to_vec(),
                        });
                    }
                    buf.push(1);
                    for v in x.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                None => buf.push(0),
            }
        }
    }
    Ok(buf)
}

pub fn write_features(path: &Path, samples: &[MultiModalSample], dims: &[usize]) -> Result<()> {
    let bytes = encode_features(samples, dims)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Vec<MultiModalSample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated: need {n} bytes for {what}, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<MultiModalSample>> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.is_empty() {
        return Err(Error::format(0, "empty file"));
    }
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"TCTF\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let num_samples = r.u32("sample count")? as usize;
    let num_modalities = r.u32("modality count")? as usize;
    if num_modalities == 0 {
        return Err(Error::format(12, "zero modalities declared"));
    }
    let mut dims = Vec::with_capacity(num_modalities);
    for _ in 0..num_modalities {
        let at = r.pos as u64;
        let d = r.u32("modality dim")? as usize;
        if d == 0 {
            return Err(Error::format(at, "modality dim is zero"));
        }
        dims.push(d);
    }

    let mut samples = Vec::with_capacity(num_samples.min(1 << 20));
    for i in 0..num_samples {
        let start = r.pos as u64;
        let sample_id = r.u32(&format!("sample {i} id"))?;
        let label = match r.u32("label")? {
            NO_LABEL => None,
            l => Some(l),
        };
        let t = r.u32("timesteps")? as usize;
        if t == 0 {
            return Err(Error::format(start + 8, format!("sample {sample_id} has T = 0")));
        }
        let mut modalities = BTreeMap::new();
        for (m, &d) in dims.iter().enumerate() {
            let flag_at = r.pos as u64;
            match r.take(1, "present flag")?[0] {
                0 => {}
                1 => {
                    let raw = r.take(t * d * 8, &format!("sample {sample_id} modality {m} payload"))?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    modalities.insert(ModalityId(m as u32), Tensor::new(vec![t, d], data)?);
                }
                other => {
                    return Err(Error::format(flag_at, format!("invalid present flag {other}")));
                }
            }
        }
        samples.push(MultiModalSample {
            sample_id,
            label,
            modalities,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after last sample", bytes.len() - r.pos),
        ));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            num_classes: 3,
            samples_per_class: 4,
            timesteps: 6,
            modality_dims: vec![3, 2],
            latent_dim: 2,
            seed: 7,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(encode_features(&a, &[3, 2]).unwrap(), encode_features(&b, &[3, 2]).unwrap());
        let c = generate(&DatasetSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_are_balanced() {
        let spec = DatasetSpec {
            num_classes: 4,
            samples_per_class: 50,
            ..small()
        };
        let data = generate(&spec).unwrap();
        assert_eq!(data.len(), 200);
        for k in 0..4 {
            assert_eq!(data.iter().filter(|s| s.label == Some(k)).count(), 50);
        }
        let mut ids: Vec<u32> = data.iter().map(|s| s.sample_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 200);
    }

    #[test]
    fn noiseless_modalities_are_functions_of_latent() {
        let spec = DatasetSpec {
            noise_sigma: 0.0,
            ..small()
        };
        let (data, latents) = generate_with_latents(&spec).unwrap();
        // rebuild the observation maps the same way the generator does
        let mut world = SplitMix64::from_tags(spec.seed, &[0]);
        let wa = random_matrix(&mut world, 3, 2, 1.0 / 2f64.sqrt());
        let wb = random_matrix(&mut world, 2, 2, 1.0 / 2f64.sqrt());
        for (s, z) in data.iter().zip(&latents) {
            let a = &s.modalities[&ModalityId(0)];
            let b = &s.modalities[&ModalityId(1)];
            for t in 0..spec.timesteps {
                let zt = z.row(t);
                for r in 0..3 {
                    let v = wa[r * 2] * zt[0] + wa[r * 2 + 1] * zt[1];
                    assert!((a.get(t, r) - v).abs() < 1e-12);
                }
                for r in 0..2 {
                    let v = (wb[r * 2] * zt[0] + wb[r * 2 + 1] * zt[1]).tanh();
                    assert!((b.get(t, r) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        assert!(generate(&DatasetSpec { num_classes: 0, ..small() }).is_err());
        assert!(generate(&DatasetSpec { noise_sigma: -1.0, ..small() }).is_err());
        assert!(generate(&DatasetSpec { modality_dims: vec![], ..small() }).is_err());
    }

    #[test]
    fn round_trip_through_file() {
        let data = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        write_features(&path, &data, &[3, 2]).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back, data);
        // bit-exact on re-encode
        assert_eq!(
            encode_features(&back, &[3, 2]).unwrap(),
            fs::read(&path).unwrap()
        );
    }

    #[test]
    fn absent_modality_and_missing_label_round_trip() {
        let mut data = generate(&small()).unwrap();
        data[0].modalities.remove(&ModalityId(1));
        data[1].label = None;
        let bytes = encode_features(&data, &[3, 2]).unwrap();
        assert_eq!(decode_features(&bytes).unwrap(), data);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let data = generate(&small()).unwrap();
        let three = &data[..3];
        let mut bytes = encode_features(three, &[3, 2]).unwrap();
        let two_len = encode_features(&three[..2], &[3, 2]).unwrap().len();
        bytes.truncate(two_len);
        match decode_features(&bytes) {
            Err(Error::Format { offset, reason }) => {
                assert_eq!(offset as usize, two_len);
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_garbage_files_fail() {
        assert!(matches!(decode_features(&[]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            decode_features(b"NOPE\x01\0\0\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = encode_features(&generate(&small()).unwrap(), &[3, 2]).unwrap();
        bytes.push(0);
        assert!(decode_features(&bytes).is_err());
    }
}
