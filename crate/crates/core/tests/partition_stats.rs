mod common;

use std::collections::BTreeMap;

use common::median;
use tempfed::numerics::Tensor;
use tempfed::partition::{build_split, dirichlet_partition, drop_modalities, ClientDataset, SplitConfig};
use tempfed::synthdata::{generate, DatasetSpec, ModalityId, MultiModalSample};

fn balanced(k: usize, per_class: usize) -> Vec<MultiModalSample> {
    (0..k * per_class)
        .map(|i| MultiModalSample {
            sample_id: i as u32,
            label: Some((i % k) as u32),
            modalities: BTreeMap::from([(ModalityId(0), Tensor::zeros(&[2, 1]))]),
        })
        .collect()
}

fn class_dist(shard: &[MultiModalSample], k: usize) -> Vec<f64> {
    let mut counts = vec![0.0; k];
    for s in shard {
        counts[s.label.unwrap() as usize] += 1.0;
    }
    let n = shard.len().max(1) as f64;
    counts.iter().map(|c| c / n).collect()
}

fn max_tv(shards: &[Vec<MultiModalSample>], k: usize) -> f64 {
    shards
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| 0.5 * class_dist(s, k).iter().map(|p| (p - 1.0 / k as f64).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[test]
fn huge_alpha_is_nearly_uniform() {
    for seed in 0..5 {
        let shards = dirichlet_partition(balanced(4, 100), 4, 1e9, seed).unwrap();
        for s in &shards {
            for p in class_dist(s, 4) {
                assert!((p - 0.25).abs() <= 0.05, "seed {seed}: {p}");
            }
        }
    }
}

#[test]
fn small_alpha_is_more_skewed() {
    let skewed: Vec<f64> = (0..20)
        .map(|s| max_tv(&dirichlet_partition(balanced(4, 100), 4, 0.1, s).unwrap(), 4))
        .collect();
    let flat: Vec<f64> = (0..20)
        .map(|s| max_tv(&dirichlet_partition(balanced(4, 100), 4, 1e9, s).unwrap(), 4))
        .collect();
    assert!(median(skewed) > median(flat));
}

#[test]
fn one_client_takes_everything() {
    for alpha in [0.01, 1.0, 100.0] {
        let shards = dirichlet_partition(balanced(3, 10), 1, alpha, 0).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].len(), 30);
    }
}

#[test]
fn no_client_is_left_empty() {
    for seed in 0..20 {
        let shards = dirichlet_partition(balanced(4, 25), 8, 0.05, seed).unwrap();
        assert!(shards.iter().all(|s| !s.is_empty()), "seed {seed}");
    }
}

fn two_modality_clients(n: usize) -> Vec<ClientDataset> {
    (0..n)
        .map(|client_id| ClientDataset {
            client_id,
            samples: Vec::new(),
            modality_present: BTreeMap::from([(ModalityId(0), true), (ModalityId(1), true)]),
        })
        .collect()
}

#[test]
fn half_dropout_rate_is_binomial() {
    let mut clients = two_modality_clients(100);
    let dropped = drop_modalities(&mut clients, 0.5, 17).unwrap();
    let frac = dropped as f64 / 200.0;
    assert!((0.40..=0.60).contains(&frac), "{frac}");
    assert!(clients
        .iter()
        .all(|c| c.modality_present.values().any(|&p| p)));
}

#[test]
fn single_modality_always_survives() {
    let mut clients: Vec<ClientDataset> = (0..50)
        .map(|client_id| ClientDataset {
            client_id,
            samples: Vec::new(),
            modality_present: BTreeMap::from([(ModalityId(0), true)]),
        })
        .collect();
    drop_modalities(&mut clients, 0.9, 3).unwrap();
    assert!(clients.iter().all(|c| c.modality_present[&ModalityId(0)]));
}

#[test]
fn split_is_reproducible_and_labelled_share_matches() {
    let spec = DatasetSpec {
        samples_per_class: 50,
        modality_dims: vec![3, 3],
        ..DatasetSpec::default()
    };
    let data = generate(&spec).unwrap();
    let cfg = SplitConfig {
        num_clients: 5,
        alpha: 0.3,
        r_l: 0.9,
        r_m: 0.3,
        ..SplitConfig::default()
    };
    let a = build_split(data.clone(), &cfg, 4).unwrap();
    let b = build_split(data, &cfg, 4).unwrap();
    assert_eq!(a.manifest(), b.manifest());
    assert_eq!(a.fingerprint(), b.fingerprint());
    // 180 non-test samples, 45 per class -> 4 or 5 labelled per class
    let pool: usize = a.client_sizes().iter().sum();
    assert_eq!(a.server_labelled.len() + pool, 180);
    for k in 0..4 {
        let n = a.server_labelled.iter().filter(|s| s.label == Some(k)).count();
        assert!((4..=5).contains(&n), "class {k}: {n}");
    }
}
