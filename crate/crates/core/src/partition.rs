//! Test/proxy/client splitting, Dirichlet non-IID sharding, and the
//! missing-modality regime.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::synthdata::{ModalityId, MultiModalSample};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub samples: Vec<MultiModalSample>,
    pub modality_present: BTreeMap<ModalityId, bool>,
}

impl ClientDataset {
    pub fn present_modalities(&self) -> Vec<ModalityId> {
        self.modality_present
            .iter()
            .filter(|(_, &p)| p)
            .map(|(&m, _)| m)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub num_clients: usize,
    pub alpha: f64,
    /// Missing-label rate: share of the non-test data given to clients.
    pub r_l: f64,
    /// Per (client, modality) drop probability.
    pub r_m: f64,
    pub test_fraction: f64,
    /// Also zero modalities on the proxy and test sets.
    pub drop_modalities_on_server: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            num_clients: 8,
            alpha: 0.1,
            r_l: 0.9,
            r_m: 0.0,
            test_fraction: 0.1,
            drop_modalities_on_server: false,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::param("num_clients", "must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::param("alpha", format!("must be > 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.r_l) {
            return Err(Error::param(
                "r_l",
                format!("must be in [0, 1), got {}; the server needs labels", self.r_l),
            ));
        }
        if !(0.0..1.0).contains(&self.r_m) {
            return Err(Error::param("r_m", format!("must be in [0, 1), got {}", self.r_m)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::param(
                "test_fraction",
                format!("must be in [0, 1), got {}", self.test_fraction),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedSplit {
    pub clients: Vec<ClientDataset>,
    pub server_labelled: Vec<MultiModalSample>,
    pub test: Vec<MultiModalSample>,
    pub config: SplitConfig,
    pub seed: u64,
    /// Present modalities on the proxy and test sets.
    pub server_modalities: BTreeMap<ModalityId, bool>,
}

/// Group sample indices by label, classes in ascending order.
fn by_class(samples: &[MultiModalSample]) -> Result<BTreeMap<u32, Vec<usize>>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let label = s
            .label
            .ok_or_else(|| Error::Input(format!("sample {} has no label", s.sample_id)))?;
        groups.entry(label).or_default().push(i);
    }
    Ok(groups)
}

/// Split `total` into integer parts proportional to `shares`: floors of the
/// exact parts, then +1 in order of largest fractional part (ties to the
/// lower index). Parts stay within 1 of exact and sum to `total`.
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total.saturating_sub(parts.iter().sum());
    for &k in order.iter().take(short) {
        parts[k] += 1;
    }
    parts
}

/// Stratified random split: about `fraction` of every class goes to the
/// first output.
pub fn stratified_split(
    samples: Vec<MultiModalSample>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<MultiModalSample>, Vec<MultiModalSample>)> {
    let groups = by_class(&samples)?;
    let target = (fraction * samples.len() as f64).round() as usize;
    let shares: Vec<f64> = groups.values().map(|idx| idx.len() as f64).collect();
    let takes = largest_remainder(&shares, target);
    let mut rng = SplitMix64::new(seed);
    let mut chosen = BTreeSet::new();
    for ((_, mut idx), take) in groups.into_iter().zip(takes) {
        rng.shuffle(&mut idx);
        chosen.extend(idx.into_iter().take(take));
    }
    let (mut first, mut rest) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if chosen.contains(&i) {
            first.push(s);
        } else {
            rest.push(s);
        }
    }
    Ok((first, rest))
}

/// Split labelled data into the server proxy set (fraction `1 - r_l`, labels
/// kept) and the client pool (fraction `r_l`).
pub fn split_labels(
    samples: Vec<MultiModalSample>,
    r_l: f64,
    seed: u64,
) -> Result<(Vec<MultiModalSample>, Vec<MultiModalSample>)> {
    if !(0.0..1.0).contains(&r_l) {
        return Err(Error::param(
            "r_l",
            format!("must be in [0, 1), got {r_l}; head training needs labelled data"),
        ));
    }
    stratified_split(samples, 1.0 - r_l, seed)
}

/// Per-class Dirichlet allocation of samples to `num_clients` shards.
pub fn dirichlet_partition(
    samples: Vec<MultiModalSample>,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<MultiModalSample>>> {
    if num_clients < 1 {
        return Err(Error::param("num_clients", "must be >= 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param("alpha", format!("must be > 0, got {alpha}")));
    }
    let groups = by_class(&samples)?;
    let mut rng = SplitMix64::new(seed);
    let mut owner = vec![0usize; samples.len()];
    for (_, mut idx) in groups {
        rng.shuffle(&mut idx);
        let p = rng.dirichlet(alpha, num_clients);
        // contiguous blocks of the shuffled class, sized by p
        let mut start = 0;
        for (c, len) in largest_remainder(&p, idx.len()).into_iter().enumerate() {
            for &i in &idx[start..start + len] {
                owner[i] = c;
            }
            start += len;
        }
    }
    let mut shards: Vec<Vec<MultiModalSample>> = vec![Vec::new(); num_clients];
    for (s, c) in samples.into_iter().zip(owner) {
        shards[c].push(s);
    }
    // starved shards take one sample from the current largest
    let total: usize = shards.iter().map(Vec::len).sum();
    if total >= num_clients {
        while let Some(empty) = shards.iter().position(Vec::is_empty) {
            let largest = (0..num_clients)
                .max_by_key(|&c| (shards[c].len(), std::cmp::Reverse(c)))
                .unwrap();
            let moved = shards[largest].pop().unwrap();
            debug!("empty client {empty} repaired with sample {}", moved.sample_id);
            shards[empty].push(moved);
        }
    } else if total > 0 {
        warn!("{total} samples cannot fill {num_clients} clients; some stay empty");
    }
    Ok(shards)
}

/// Bernoulli modality dropping per (client, modality) with the keep-one
/// repair. Returns the number of drops drawn before the repair.
pub fn drop_modalities(
    clients: &mut [ClientDataset],
    r_m: f64,
    seed: u64,
) -> Result<usize> {
    if !(0.0..1.0).contains(&r_m) {
        return Err(Error::param("r_m", format!("must be in [0, 1), got {r_m}")));
    }
    let mut rng = SplitMix64::new(seed);
    let mut dropped = 0;
    for client in clients.iter_mut() {
        let mods: Vec<ModalityId> = client.modality_present.keys().copied().collect();
        for &m in &mods {
            let keep = !rng.bernoulli(r_m);
            if !keep {
                dropped += 1;
            }
            client.modality_present.insert(m, keep);
        }
        if !mods.is_empty() && client.modality_present.values().all(|p| !p) {
            let keep = mods[rng.below(mods.len())];
            client.modality_present.insert(keep, true);
        }
    }
    Ok(dropped)
}

/// Draw a single mask for the server-side sets under the same regime.
fn server_mask(mods: &[ModalityId], r_m: f64, seed: u64) -> BTreeMap<ModalityId, bool> {
    let mut rng = SplitMix64::new(seed);
    let mut mask: BTreeMap<ModalityId, bool> = mods.iter().map(|&m| (m, !rng.bernoulli(r_m))).collect();
    if !mods.is_empty() && mask.values().all(|p| !p) {
        mask.insert(mods[rng.below(mods.len())], true);
    }
    mask
}

/// Remove absent modalities' tensors from samples.
fn apply_mask(samples: &mut [MultiModalSample], mask: &BTreeMap<ModalityId, bool>) {
    for s in samples {
        s.modalities.retain(|m, _| mask.get(m).copied().unwrap_or(false));
    }
}

/// Build the full federated split: test carve-out, label split, Dirichlet
/// sharding of the unlabelled pool, and modality masks.
pub fn build_split(
    dataset: Vec<MultiModalSample>,
    cfg: &SplitConfig,
    seed: u64,
) -> Result<FederatedSplit> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let modalities: Vec<ModalityId> = dataset
        .iter()
        .flat_map(|s| s.modalities.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let (test, rest) = stratified_split(dataset, cfg.test_fraction, derive_seed(seed, &[10]))?;
    let (server_labelled, pool) = split_labels(rest, cfg.r_l, derive_seed(seed, &[11]))?;
    let shards = dirichlet_partition(pool, cfg.num_clients, cfg.alpha, derive_seed(seed, &[12]))?;

    let mut clients: Vec<ClientDataset> = shards
        .into_iter()
        .enumerate()
        .map(|(client_id, mut samples)| {
            samples.iter_mut().for_each(|s| s.label = None);
            ClientDataset {
                client_id,
                samples,
                modality_present: modalities.iter().map(|&m| (m, true)).collect(),
            }
        })
        .collect();
    drop_modalities(&mut clients, cfg.r_m, derive_seed(seed, &[13]))?;
    for c in &mut clients {
        let mask = c.modality_present.clone();
        apply_mask(&mut c.samples, &mask);
    }

    let mut split = FederatedSplit {
        clients,
        server_labelled,
        test,
        config: cfg.clone(),
        seed,
        server_modalities: modalities.iter().map(|&m| (m, true)).collect(),
    };
    if cfg.drop_modalities_on_server {
        let mask = server_mask(&modalities, cfg.r_m, derive_seed(seed, &[14]));
        apply_mask(&mut split.server_labelled, &mask);
        apply_mask(&mut split.test, &mask);
        split.server_modalities = mask;
    }
    Ok(split)
}

fn mask_string(mask: &BTreeMap<ModalityId, bool>) -> String {
    mask.iter()
        .map(|(m, &p)| format!("{m}={}", u8::from(p)))
        .collect::<Vec<_>>()
        .join(";")
}

impl FederatedSplit {
    /// Audit manifest, one record per sample sorted by sample id.
    ///
    /// ```text
    /// # sample_id,shard,client_id,label,modalities
    /// 17,client,3,,A=1;B=0
    /// 42,server,,2,A=1;B=1
    /// ```
    ///
    /// `shard` is one of `client`, `server`, `test`; `client_id` is empty
    /// off-client; `label` is empty when the sample is unlabelled.
    pub fn manifest(&self) -> String {
        let mut rows: Vec<(u32, String)> = Vec::new();
        let server_mask = mask_string(&self.server_modalities);
        for c in &self.clients {
            let mask = mask_string(&c.modality_present);
            for s in &c.samples {
                rows.push((s.sample_id, format!("client,{},,{mask}", c.client_id)));
            }
        }
        for (shard, set) in [("server", &self.server_labelled), ("test", &self.test)] {
            for s in set {
                let label = s.label.map(|l| l.to_string()).unwrap_or_default();
                rows.push((s.sample_id, format!("{shard},,{label},{server_mask}")));
            }
        }
        rows.sort_by_key(|r| r.0);
        let mut out = String::from("# sample_id,shard,client_id,label,modalities\n");
        for (id, rest) in rows {
            let _ = writeln!(out, "{id},{rest}");
        }
        out
    }

    /// SHA-256 of the manifest, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.manifest().as_bytes()))
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(ClientDataset::len).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.server_labelled
            .iter()
            .chain(&self.test)
            .filter_map(|s| s.label)
            .max()
            .map_or(0, |m| m as usize + 1)
    }
}
