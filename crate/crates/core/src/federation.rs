//! The round loop: broadcast, local temporal-contrastive training with a
//! frozen head, aggregation, server-side head training with frozen
//! encoders, and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, AggregationWeights, ServerOptState};
use crate::contrastive::{self, pseudo_pair, segment_batch, segment_features, soft_targets};
use crate::error::{Error, Result};
use crate::model::{self, head_loss_grad, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::partition::{build_split, ClientDataset, FederatedSplit, SplitConfig};
use crate::rng::SplitMix64;
use crate::synthdata::{self, DatasetSpec, ModalityId, MultiModalSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    FedAvg,
    FedOpt,
    Sma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Temporal contrastive training with the configured aggregator.
    Full,
    /// Temporal contrastive training with the baseline aggregator.
    TctOnly,
    /// No client compute; the server trains the whole model on its labels.
    SsflOnly,
    /// Client labels restored; supervised training of the whole model.
    Supervised,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::SsflOnly,
        AblationMode::TctOnly,
        AblationMode::Full,
        AblationMode::Supervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::TctOnly => "tct_only",
            AblationMode::SsflOnly => "ssfl_only",
            AblationMode::Supervised => "supervised",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seed: u64,
    pub mode: AblationMode,
    /// Pre-extracted features to use instead of the synthetic generator.
    pub feature_file: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: AblationMode::Full,
            feature_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub window_fraction: f64,
    pub tau: f64,
    pub local_lr: f64,
    pub head_lr: f64,
    pub head_epochs: usize,
    /// Gaussian input noise on each side of a single-modality pseudo-pair.
    pub pseudo_pair_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_epochs: 1,
            batch_size: 16,
            window_fraction: 0.8,
            tau: 0.1,
            local_lr: 0.05,
            head_lr: 0.1,
            head_epochs: 5,
            pseudo_pair_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregateConfig {
    pub aggregator: Aggregator,
    /// Standard aggregator used by the `tct_only` and `supervised` modes.
    pub baseline: Aggregator,
    pub fedopt_beta: f64,
    pub fedopt_server_lr: f64,
    /// Count the self-similarity `S(i, i)` in SMA row sums.
    pub sma_include_diagonal: bool,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            aggregator: Aggregator::Sma,
            baseline: Aggregator::FedAvg,
            fedopt_beta: 0.9,
            fedopt_server_lr: 1.0,
            sma_include_diagonal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DatasetSpec,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub aggregate: AggregateConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experiment.feature_file.is_none() {
            self.data.validate()?;
        }
        self.split.validate()?;
        let t = &self.train;
        if t.rounds < 1 {
            return Err(Error::param("rounds", "must be >= 1"));
        }
        if t.batch_size < 1 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        contrastive::validate_window(t.window_fraction)?;
        if !(t.tau > 0.0) {
            return Err(Error::param("tau", format!("must be > 0, got {}", t.tau)));
        }
        for (name, v) in [
            ("local_lr", t.local_lr),
            ("head_lr", t.head_lr),
            ("pseudo_pair_sigma", t.pseudo_pair_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.model.hidden == 0 || self.model.embed_dim == 0 {
            return Err(Error::param("model", "hidden and embed_dim must be >= 1"));
        }
        let a = &self.aggregate;
        if a.baseline == Aggregator::Sma {
            return Err(Error::param("baseline", "must be fedavg or fedopt"));
        }
        if !(0.0..1.0).contains(&a.fedopt_beta) {
            return Err(Error::param("fedopt_beta", format!("must be in [0, 1), got {}", a.fedopt_beta)));
        }
        if !(a.fedopt_server_lr > 0.0) {
            return Err(Error::param("fedopt_server_lr", "must be > 0"));
        }
        Ok(())
    }

    /// Aggregator actually used for the configured mode.
    pub fn effective_aggregator(&self) -> Option<Aggregator> {
        match self.experiment.mode {
            AblationMode::Full => Some(self.aggregate.aggregator),
            AblationMode::TctOnly | AblationMode::Supervised => Some(self.aggregate.baseline),
            AblationMode::SsflOnly => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean local loss per client; `None` when the client was skipped.
    pub client_losses: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    pub head_loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub model: ModelParams,
    /// Mean batch loss over the whole local run.
    pub mean_loss: f64,
    /// Mean batch loss of each local epoch.
    pub epoch_losses: Vec<f64>,
}

fn sgd_encoders(model: &mut ModelParams, grads: &BTreeMap<ModalityId, model::EncoderParams>, lr: f64) {
    for (m, g) in grads {
        if let Some(enc) = model.encoders.get_mut(m) {
            enc.add_scaled(-lr, g);
        }
    }
}

fn seed_for(seed: u64, tags: &[u64]) -> SplitMix64 {
    SplitMix64::from_tags(seed, tags)
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Contrastive loss and encoder gradients for one mini-batch.
///
/// Two or more present modalities: every unordered pair, averaged. One
/// modality: a noisy pseudo-pair through the same encoder.
pub fn batch_contrastive_grad(
    model: &ModelParams,
    batch: &[&MultiModalSample],
    present: &[ModalityId],
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
) -> Result<(f64, BTreeMap<ModalityId, model::EncoderParams>)> {
    let segments = segment_batch(batch, cfg.window_fraction)?;
    let targets = soft_targets(&segments, &segments)?;
    let mut grads: BTreeMap<ModalityId, model::EncoderParams> = present
        .iter()
        .map(|m| (*m, model.encoders[m].zeros_like()))
        .collect();
    match present {
        [] => Err(Error::Input("client has no modalities".into())),
        [only] => {
            let feats = segment_features(batch, &segments, *only)?;
            let (a, b) = pseudo_pair(&feats, cfg.pseudo_pair_sigma, rng);
            let enc = &model.encoders[only];
            let out = contrastive::contrastive_loss_grad(enc, enc, &a, &b, &targets, &targets, cfg.tau)?;
            let g = grads.get_mut(only).unwrap();
            g.add_scaled(1.0, &out.grad_a);
            g.add_scaled(1.0, &out.grad_b);
            Ok((out.loss, grads))
        }
        _ => {
            let feats: BTreeMap<ModalityId, Vec<Tensor>> = present
                .iter()
                .map(|&m| Ok((m, segment_features(batch, &segments, m)?)))
                .collect::<Result<_>>()?;
            let mut pairs = 0usize;
            let mut loss = 0.0;
            for (i, ma) in present.iter().enumerate() {
                for mb in &present[i + 1..] {
                    let out = contrastive::contrastive_loss_grad(
                        &model.encoders[ma],
                        &model.encoders[mb],
                        &feats[ma],
                        &feats[mb],
                        &targets,
                        &targets,
                        cfg.tau,
                    )?;
                    loss += out.loss;
                    grads.get_mut(ma).unwrap().add_scaled(1.0, &out.grad_a);
                    grads.get_mut(mb).unwrap().add_scaled(1.0, &out.grad_b);
                    pairs += 1;
                }
            }
            let inv = 1.0 / pairs as f64;
            grads.values_mut().for_each(|g| g.scale(inv));
            Ok((loss * inv, grads))
        }
    }
}

/// Local temporal-contrastive training: plain SGD on the encoders of the
/// client's present modalities; the head is never touched.
pub fn local_train(
    client: &ClientDataset,
    global: &ModelParams,
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
) -> Result<LocalUpdate> {
    if client.is_empty() {
        return Err(Error::Input(format!("client {} has no samples", client.client_id)));
    }
    let present = client.present_modalities();
    let mut model = global.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    let mut total = 0.0;
    let mut batches_run = 0usize;
    for _ in 0..cfg.local_epochs {
        let mut epoch_loss = 0.0;
        let batches = shuffled_batches(client.len(), cfg.batch_size, rng);
        for idx in &batches {
            let batch: Vec<&MultiModalSample> = idx.iter().map(|&i| &client.samples[i]).collect();
            let (loss, grads) = batch_contrastive_grad(&model, &batch, &present, cfg, rng)?;
            if cfg.local_lr != 0.0 {
                sgd_encoders(&mut model, &grads, cfg.local_lr);
            }
            epoch_loss += loss;
        }
        total += epoch_loss;
        batches_run += batches.len();
        epoch_losses.push(epoch_loss / batches.len() as f64);
    }
    if !model.head_bit_equal(global) {
        return Err(Error::Invariant("local training modified the frozen head".into()));
    }
    Ok(LocalUpdate {
        model,
        mean_loss: if batches_run > 0 { total / batches_run as f64 } else { 0.0 },
        epoch_losses,
    })
}

/// Supervised training of the full model (encoders and head) on labelled
/// samples. Used by the `supervised` and `ssfl_only` modes.
pub fn supervised_train(
    samples: &[MultiModalSample],
    global: &ModelParams,
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
) -> Result<LocalUpdate> {
    if samples.is_empty() {
        return Err(Error::Input("no labelled samples".into()));
    }
    let mut model = global.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    let mut total = 0.0;
    let mut batches_run = 0usize;
    for _ in 0..cfg.local_epochs {
        let batches = shuffled_batches(samples.len(), cfg.batch_size, rng);
        let mut epoch_loss = 0.0;
        for idx in &batches {
            let batch: Vec<&MultiModalSample> = idx.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = model::supervised_loss_grad(&model, &batch)?;
            sgd_encoders(&mut model, &grads.encoders, cfg.local_lr);
            model.head.add_scaled(-cfg.head_lr, &grads.head);
            epoch_loss += loss;
        }
        total += epoch_loss;
        batches_run += batches.len();
        epoch_losses.push(epoch_loss / batches.len() as f64);
    }
    Ok(LocalUpdate {
        model,
        mean_loss: total / batches_run.max(1) as f64,
        epoch_losses,
    })
}

/// Train the head on fused embeddings of the proxy set; encoders frozen.
/// Returns the model and the mean loss of the last epoch (`NaN` when no
/// epoch ran).
pub fn server_head_train(
    global: &ModelParams,
    proxy: &[MultiModalSample],
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
) -> Result<(ModelParams, f64)> {
    if proxy.is_empty() {
        return Err(Error::param("proxy", "head training needs labelled samples"));
    }
    let fused: Vec<Tensor> = proxy
        .par_iter()
        .map(|s| global.embed(s))
        .collect::<Result<_>>()?;
    let labels: Vec<u32> = proxy
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Input(format!("proxy sample {} unlabelled", s.sample_id))))
        .collect::<Result<_>>()?;
    let mut model = global.clone();
    let mut last = f64::NAN;
    for _ in 0..cfg.head_epochs {
        let batches = shuffled_batches(proxy.len(), cfg.batch_size, rng);
        let mut epoch_loss = 0.0;
        for idx in &batches {
            let x: Vec<Tensor> = idx.iter().map(|&i| fused[i].clone()).collect();
            let y: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            let out = head_loss_grad(&model.head, &x, &y)?;
            model.head.add_scaled(-cfg.head_lr, &out.grad);
            epoch_loss += out.loss;
        }
        last = epoch_loss / batches.len() as f64;
    }
    if !model.encoders_bit_equal(global) {
        return Err(Error::Invariant("head training modified the frozen encoders".into()));
    }
    Ok((model, last))
}

/// Top-1 accuracy and macro-F1, both in percent.
pub fn evaluate(global: &ModelParams, test: &[MultiModalSample]) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::param("test", "evaluation needs samples"));
    }
    let preds: Vec<usize> = test
        .par_iter()
        .map(|s| global.predict(s))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = test
        .iter()
        .map(|s| {
            s.label
                .map(|l| l as usize)
                .ok_or_else(|| Error::Input(format!("test sample {} unlabelled", s.sample_id)))
        })
        .collect::<Result<_>>()?;
    Ok(classification_scores(&preds, &labels, global.head.num_classes()))
}

/// Accuracy and macro-F1 (percent) from predictions; classes without
/// support or predictions score F1 = 0.
pub fn classification_scores(preds: &[usize], labels: &[usize], num_classes: usize) -> (f64, f64) {
    let k = num_classes.max(preds.iter().chain(labels).map(|&c| c + 1).max().unwrap_or(0));
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&p, &y) in preds.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let accuracy = 100.0 * correct as f64 / labels.len().max(1) as f64;
    let f1_sum: f64 = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    (accuracy, 100.0 * f1_sum / k.max(1) as f64)
}

/// Everything that persists between rounds.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub global: ModelParams,
    pub opt: ServerOptState,
    pub split: FederatedSplit,
    /// Clients with labels restored, for the `supervised` mode.
    pub labelled_clients: Option<Vec<Vec<MultiModalSample>>>,
    pub round: usize,
    pub seed: u64,
}

fn input_dims(samples: &[MultiModalSample]) -> BTreeMap<ModalityId, usize> {
    let mut dims = BTreeMap::new();
    for s in samples {
        for (m, x) in &s.modalities {
            dims.entry(*m).or_insert(x.cols());
        }
    }
    dims
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<MultiModalSample>> {
    match &cfg.experiment.feature_file {
        Some(path) => synthdata::load_features(path),
        None => synthdata::generate(&cfg.data),
    }
}

impl FederationState {
    pub fn new(dataset: Vec<MultiModalSample>, cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.experiment.seed;
        let labels: BTreeMap<u32, Option<u32>> = dataset.iter().map(|s| (s.sample_id, s.label)).collect();
        let dims = input_dims(&dataset);
        let num_classes = dataset
            .iter()
            .filter_map(|s| s.label)
            .max()
            .map(|m| m as usize + 1)
            .ok_or_else(|| Error::Input("dataset has no labels".into()))?;
        let split = build_split(dataset, &cfg.split, seed)?;
        if split.server_labelled.is_empty() {
            return Err(Error::Input("labelled proxy set is empty".into()));
        }
        if split.test.is_empty() {
            return Err(Error::Input("test set is empty".into()));
        }
        let global = ModelParams::init(&dims, num_classes, &cfg.model, seed)?;
        let opt = ServerOptState::new(
            global.num_params(),
            cfg.aggregate.fedopt_beta,
            cfg.aggregate.fedopt_server_lr,
        );
        let labelled_clients = (cfg.experiment.mode == AblationMode::Supervised).then(|| {
            split
                .clients
                .iter()
                .map(|c| {
                    c.samples
                        .iter()
                        .map(|s| MultiModalSample {
                            label: labels[&s.sample_id],
                            ..s.clone()
                        })
                        .collect()
                })
                .collect()
        });
        Ok(Self {
            global,
            opt,
            split,
            labelled_clients,
            round: 0,
            seed,
        })
    }
}

fn aggregate_standard(
    state: &mut FederationState,
    kind: Aggregator,
    models: &[ModelParams],
    sizes: &[usize],
) -> Result<ModelParams> {
    match kind {
        Aggregator::FedAvg => aggregate::fedavg(models, sizes),
        Aggregator::FedOpt => {
            let (g, opt) = aggregate::fedopt(&state.global, models, sizes, &state.opt)?;
            state.opt = opt;
            Ok(g)
        }
        Aggregator::Sma => Err(Error::Config("SMA is not a standard aggregator".into())),
    }
}

/// One federated round.
pub fn run_round(state: &mut FederationState, cfg: &ExperimentConfig) -> Result<RoundRecord> {
    let start = Instant::now();
    let round = state.round;
    let seed = state.seed;
    let train = &cfg.train;
    let mode = cfg.experiment.mode;
    let num_clients = state.split.clients.len();

    let mut client_losses = vec![None; num_clients];
    let mut weights = Vec::new();
    let mut head_loss = f64::NAN;

    match mode {
        AblationMode::SsflOnly => {
            let mut rng = seed_for(seed, &[u64::MAX, round as u64, 2]);
            let up = supervised_train(&state.split.server_labelled, &state.global, train, &mut rng)?;
            head_loss = up.mean_loss;
            state.global = up.model;
        }
        AblationMode::Supervised => {
            let shards = state.labelled_clients.as_ref().expect("labels restored at init");
            let global = &state.global;
            let updates: Vec<Option<LocalUpdate>> = shards
                .par_iter()
                .enumerate()
                .map(|(c, samples)| {
                    if samples.is_empty() {
                        return Ok(None);
                    }
                    let mut rng = seed_for(seed, &[c as u64, round as u64, 1]);
                    supervised_train(samples, global, train, &mut rng).map(Some)
                })
                .collect::<Result<_>>()?;
            let (models, sizes, ids) = collect_updates(updates, &mut client_losses, |c| shards[c].len());
            let kind = cfg.aggregate.baseline;
            state.global = aggregate_standard(state, kind, &models, &sizes)?;
            weights = expand_weights(&AggregationWeights::from_sizes(&sizes)?, &ids, num_clients);
        }
        AblationMode::Full | AblationMode::TctOnly => {
            let global = &state.global;
            let updates: Vec<Option<LocalUpdate>> = state
                .split
                .clients
                .par_iter()
                .map(|client| {
                    if client.is_empty() {
                        warn!("client {} is empty, skipped in round {round}", client.client_id);
                        return Ok(None);
                    }
                    let mut rng = seed_for(seed, &[client.client_id as u64, round as u64, 1]);
                    local_train(client, global, train, &mut rng).map(Some)
                })
                .collect::<Result<_>>()?;
            let clients = &state.split.clients;
            let (models, sizes, ids) = collect_updates(updates, &mut client_losses, |c| clients[c].len());
            if models.is_empty() {
                return Err(Error::Input("no client produced an update".into()));
            }
            if let Some(i) = models.iter().position(|m| !m.head_bit_equal(&state.global)) {
                return Err(Error::Protocol(format!("upload {i} carries a modified head")));
            }
            let kind = cfg.effective_aggregator().unwrap();
            let mut next = match kind {
                Aggregator::Sma => {
                    let w = aggregate::sma_weights(
                        &models,
                        &state.split.server_labelled,
                        cfg.aggregate.sma_include_diagonal,
                    )?;
                    weights = expand_weights(&w, &ids, num_clients);
                    aggregate::sma_aggregate(&models, &w)?
                }
                standard => {
                    weights = expand_weights(&AggregationWeights::from_sizes(&sizes)?, &ids, num_clients);
                    aggregate_standard(state, standard, &models, &sizes)?
                }
            };
            // the head is not aggregated: every upload carries the global head
            next.head = state.global.head.clone();
            let mut rng = seed_for(seed, &[u64::MAX, round as u64, 3]);
            let (trained, loss) = server_head_train(&next, &state.split.server_labelled, train, &mut rng)?;
            state.global = trained;
            head_loss = loss;
        }
    }

    let (accuracy, macro_f1) = evaluate(&state.global, &state.split.test)?;
    state.round += 1;
    let record = RoundRecord {
        round,
        client_losses,
        weights,
        head_loss,
        accuracy,
        macro_f1,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    info!(
        "round {round} mode {mode}: acc {accuracy:.2} f1 {macro_f1:.2} head loss {head_loss:.4}"
    );
    Ok(record)
}

fn collect_updates(
    updates: Vec<Option<LocalUpdate>>,
    losses: &mut [Option<f64>],
    size: impl Fn(usize) -> usize,
) -> (Vec<ModelParams>, Vec<usize>, Vec<usize>) {
    let mut models = Vec::new();
    let mut sizes = Vec::new();
    let mut ids = Vec::new();
    for (c, up) in updates.into_iter().enumerate() {
        if let Some(up) = up {
            losses[c] = Some(up.mean_loss);
            models.push(up.model);
            sizes.push(size(c));
            ids.push(c);
        }
    }
    (models, sizes, ids)
}

/// Place per-participant weights at their client index; skipped clients get 0.
fn expand_weights(w: &AggregationWeights, ids: &[usize], num_clients: usize) -> Vec<f64> {
    let mut out = vec![0.0; num_clients];
    for (&c, &v) in ids.iter().zip(w.as_slice()) {
        out[c] = v;
    }
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub final_model: ModelParams,
    pub split_fingerprint: String,
    pub split_manifest: String,
}

impl ExperimentResult {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.accuracy)
    }

    pub fn final_macro_f1(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.macro_f1)
    }

    /// Best accuracy and the round it was reached (first on ties).
    pub fn best_accuracy(&self) -> (f64, usize) {
        self.records
            .iter()
            .fold((f64::NEG_INFINITY, 0), |best, r| {
                if r.accuracy > best.0 {
                    (r.accuracy, r.round)
                } else {
                    best
                }
            })
    }
}

/// Build data and split, then run all rounds inside a pool of `workers`
/// threads (0 = rayon default). Results do not depend on `workers`.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    run_experiment_on(dataset, cfg, workers)
}

pub fn run_experiment_on(
    dataset: Vec<MultiModalSample>,
    cfg: &ExperimentConfig,
    workers: usize,
) -> Result<ExperimentResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| {
        let mut state = FederationState::new(dataset, cfg)?;
        let mut records = Vec::with_capacity(cfg.train.rounds);
        for _ in 0..cfg.train.rounds {
            records.push(run_round(&mut state, cfg)?);
        }
        Ok(ExperimentResult {
            records,
            split_fingerprint: state.split.fingerprint(),
            split_manifest: state.split.manifest(),
            final_model: state.global,
        })
    })
}
