//! Round engine for the split-training strategy and its two baselines.
//!
//! Centaur alternates rounds: even rounds run the UCD phase (frozen encoder,
//! on-device classifier training with data selection) followed by classifier
//! averaging; odd rounds let each participant's AP train the full model on
//! the samples its UCD transmitted, followed by full-model averaging.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::cost::{Category, CostLedger, Tier};
use crate::datagen::{
    dirichlet_partition, empty_clients, split_online_extra, BlobTask, ClientShards, DataError,
    Dataset,
};
use crate::mobility::{
    generate_eoam, offline_to_epochs, ConnectivityTrace, ConnectivityVector, LinkModel,
    MobilityError,
};
use crate::nn::{
    forward, loss_and_grad_with, sgd_step_in_place, softmax_cross_entropy, Activation, Network,
    NnError,
};
use crate::partition::{
    attach_classifier, select_classifier, ClassifierCandidate, EncoderSpec, ModelPartition,
    PartitionError,
};
use crate::rng::{stream, Stream};
use crate::selector::{route_by_grad, route_by_loss, SelectionParams, SelectionState, SelectorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Centaur,
    ApOnly,
    UcdOnly,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::Centaur,
        StrategyKind::ApOnly,
        StrategyKind::UcdOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Centaur => "centaur",
            StrategyKind::ApOnly => "ap_only",
            StrategyKind::UcdOnly => "ucd_only",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| format!("unknown strategy '{s}' (expected centaur|ap_only|ucd_only)"))
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
    #[error("aggregation: {0}")]
    Aggregation(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl SimError {
    pub fn is_budget_infeasible(&self) -> bool {
        matches!(self, SimError::Partition(PartitionError::BudgetInfeasible { .. }))
    }
}

type Result<T> = std::result::Result<T, SimError>;

/// Everything fixed by `(config, seed)` before the first round: data, client
/// shards, the starting model and each client's link model.
#[derive(Debug, Clone)]
pub struct Environment {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<ClientShards>,
    pub empty_clients: Vec<usize>,
    pub classifier: ClassifierCandidate,
    pub initial: ModelPartition,
    pub links: Vec<LinkModel>,
    /// Mean connectivity over clients and locations when mobility is on.
    pub mean_lambda: Option<f64>,
}

impl Environment {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let (train, test, pretrain) = match &d.csv {
            Some(path) => split_csv(&Dataset::from_csv(path)?, cfg, seed)?,
            None => {
                let mut rng = stream(seed, Stream::Data);
                let task = BlobTask::new(d.classes, d.dim, d.spread, &mut rng)?;
                let train = task.sample(d.per_class, &mut rng);
                let test = task.sample(d.test_per_class, &mut rng);
                let pretrain = task.sample(d.pretrain_per_class, &mut rng);
                (train, test, pretrain)
            }
        };

        let clients = cfg.federation.num_clients;
        let parts = dirichlet_partition(
            &train.labels,
            train.classes,
            clients,
            d.lda_alpha,
            &mut stream(seed, Stream::Partition),
        )?;
        let empty = empty_clients(&parts);
        if !empty.is_empty() {
            log::warn!("{} clients received no samples: {:?}", empty.len(), empty);
        }
        let mut split_rng = stream(seed, Stream::Split);
        let shards = parts
            .iter()
            .map(|p| split_online_extra(p, d.online_fraction, &mut split_rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;

        let encoder = EncoderSpec {
            input_dim: train.dim(),
            widths: cfg.model.encoder_widths.clone(),
        };
        let budget = cfg.model.budget();
        let chosen = select_classifier(
            &cfg.model.candidates(train.classes),
            encoder.output_dim(),
            &budget,
            cfg.model.policy,
        )?;
        let mut init_rng = stream(seed, Stream::Init);
        let enc = pretrain_encoder(encoder.build(&mut init_rng), &pretrain, cfg, seed)?;
        let initial = attach_classifier(enc, &chosen, &budget, &mut init_rng)?;

        let (links, mean_lambda) = build_links(cfg, seed)?;
        Ok(Self {
            train,
            test,
            shards,
            empty_clients: empty,
            classifier: chosen,
            initial,
            links,
            mean_lambda,
        })
    }
}

fn split_csv(all: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if all.classes > cfg.data.classes {
        return Err(ConfigError::Field {
            field: "data.classes".into(),
            msg: format!("csv has {} classes, config allows {}", all.classes, cfg.data.classes),
        }
        .into());
    }
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut stream(seed, Stream::Data));
    let n = idx.len();
    let n_test = (n as f64 * cfg.data.csv_test_fraction).round() as usize;
    let n_pre = (n as f64 * cfg.data.csv_pretrain_fraction).round() as usize;
    if n_test == 0 || n_pre == 0 || n_test + n_pre >= n {
        return Err(DataError::InvalidParam(format!("csv with {n} rows is too small to split")).into());
    }
    let with_classes = |d: Dataset| Dataset {
        classes: cfg.data.classes,
        ..d
    };
    Ok((
        with_classes(all.subset(&idx[n_test + n_pre..])),
        with_classes(all.subset(&idx[..n_test])),
        with_classes(all.subset(&idx[n_test..n_test + n_pre])),
    ))
}

/// Trains the encoder with a throwaway linear head on a shard whose labels
/// are shuffled across samples, giving a deliberately imperfect start.
fn pretrain_encoder(
    encoder: Network,
    shard: &Dataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Network> {
    let epochs = cfg.model.pretrain_epochs;
    if epochs == 0 || shard.is_empty() {
        return Ok(encoder);
    }
    let mut rng = stream(seed, Stream::Pretrain);
    let width = encoder.output_dim().unwrap_or(shard.dim());
    let head = Network::init(
        width,
        &[shard.classes],
        Activation::Identity,
        Activation::Identity,
        &mut rng,
    );
    let mut labels = shard.labels.clone();
    labels.shuffle(&mut rng);
    let noisy = Dataset {
        labels,
        ..shard.clone()
    };
    let layers = encoder.layers().len();
    let mut net = encoder.concat(&head)?;
    let idx: Vec<usize> = (0..noisy.len()).collect();
    train_network(
        &mut net,
        &noisy,
        &idx,
        epochs,
        cfg.federation.batch_size,
        cfg.model.pretrain_lr,
        cfg.model.backward_mac_multiplier,
        &mut rng,
    )?;
    Ok(net.split_at(layers).0)
}

fn build_links(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<LinkModel>, Option<f64>)> {
    let n = cfg.federation.num_clients;
    let m = &cfg.mobility;
    if !m.enabled {
        let link = LinkModel::Bernoulli {
            disconnect_prob: cfg.devices.ucd.disconnect_prob,
        };
        return Ok((vec![link; n], None));
    }
    let mut eoam_rng = stream(seed, Stream::Eoam);
    let mut lambda_rng = stream(seed, Stream::Lambda);
    let mut links = Vec::with_capacity(n);
    let mut total = 0.0;
    for _ in 0..n {
        let eoam = generate_eoam(m.slots, m.locations, &mut eoam_rng)?;
        let lambda = ConnectivityVector::sample(m.locations, m.lambda_low, m.lambda_high, &mut lambda_rng)?;
        total += lambda.mean();
        links.push(LinkModel::Mobility { eoam, lambda });
    }
    Ok((links, Some(total / n as f64)))
}

/// Plain minibatch SGD over every layer of `net`; returns forward+backward MACs.
#[allow(clippy::too_many_arguments)]
pub fn train_network<R: Rng + ?Sized>(
    net: &mut Network,
    data: &Dataset,
    idx: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    backward_multiplier: u64,
    rng: &mut R,
) -> Result<u64> {
    let mut order = idx.to_vec();
    let mut macs = 0;
    for _ in 0..epochs {
        order.shuffle(rng);
        for batch in order.chunks(batch_size.max(1)) {
            let x = data.features.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let lg = loss_and_grad_with(net, &x, &y, backward_multiplier)?;
            macs += lg.macs();
            sgd_step_in_place(net, &lg.grads, lr)?;
        }
    }
    Ok(macs)
}

/// `K = round(a * fraction)` distinct ids from `0..a`, ascending.
pub fn sample_clients<R: Rng + ?Sized>(a: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ConfigError::Field {
            field: "federation.fraction".into(),
            msg: format!("must be in (0, 1], got {fraction}"),
        }
        .into());
    }
    let all: Vec<usize> = (0..a).collect();
    Ok(sample_from(&all, target_participants(a, fraction), rng))
}

pub fn target_participants(a: usize, fraction: f64) -> usize {
    ((a as f64 * fraction).round() as usize).min(a)
}

/// Up to `k` distinct entries of `candidates`, uniformly without replacement,
/// returned in ascending order.
pub fn sample_from<R: Rng + ?Sized>(candidates: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let k = k.min(candidates.len());
    let mut out: Vec<usize> = index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    out.sort_unstable();
    out
}

/// Weighted elementwise mean anchored at the first model:
/// `x_0 + sum_k w_k (x_k - x_0) / sum_k w_k`, so identical inputs come back
/// bit-for-bit.
fn average_flat(models: &[&Network], weights: &[f64]) -> Result<Network> {
    let first = *models
        .first()
        .ok_or_else(|| SimError::Aggregation("no models to average".into()))?;
    if weights.len() != models.len() {
        return Err(SimError::Aggregation("weight count differs from model count".into()));
    }
    if let Some(i) = models.iter().position(|m| !m.same_shape(first)) {
        return Err(SimError::Aggregation(format!("model {i} has a different shape")));
    }
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(SimError::Aggregation("weights must be >= 0 with a positive sum".into()));
    }
    let mut out = first.clone();
    for (li, layer) in out.layers_mut().iter_mut().enumerate() {
        let n_w = layer.weights().data().len();
        for j in 0..n_w {
            let base = layer.weights().data()[j];
            let mut acc = 0.0;
            for (m, w) in models.iter().zip(weights) {
                acc += w * (m.layers()[li].weights().data()[j] - base);
            }
            layer.weights_mut().data_mut()[j] = base + acc / total;
        }
        for j in 0..layer.bias().len() {
            let base = layer.bias()[j];
            let mut acc = 0.0;
            for (m, w) in models.iter().zip(weights) {
                acc += w * (m.layers()[li].bias()[j] - base);
            }
            layer.bias_mut()[j] = base + acc / total;
        }
    }
    Ok(out)
}

/// Unweighted `1/K` mean of the classifiers.
pub fn classifier_fedavg(classifiers: &[Network]) -> Result<Network> {
    let refs: Vec<&Network> = classifiers.iter().collect();
    average_flat(&refs, &vec![1.0; refs.len()])
}

pub fn classifier_fedavg_weighted(classifiers: &[Network], weights: &[f64]) -> Result<Network> {
    let refs: Vec<&Network> = classifiers.iter().collect();
    average_flat(&refs, weights)
}

/// Unweighted mean of encoder and classifier.
pub fn full_fedavg(models: &[ModelPartition]) -> Result<ModelPartition> {
    full_fedavg_weighted(models, &vec![1.0; models.len()])
}

pub fn full_fedavg_weighted(models: &[ModelPartition], weights: &[f64]) -> Result<ModelPartition> {
    let enc: Vec<&Network> = models.iter().map(|m| &m.encoder).collect();
    let cls: Vec<&Network> = models.iter().map(|m| &m.classifier).collect();
    Ok(ModelPartition::new(
        average_flat(&enc, weights)?,
        average_flat(&cls, weights)?,
    )?)
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shards: ClientShards,
    pub selection: SelectionState,
    pub local_classifier: Network,
    pub connectivity: ConnectivityTrace,
    /// D_M sample indices not yet uploaded.
    pub pending: Vec<usize>,
    pub link: LinkModel,
    link_rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(id: usize, env: &Environment, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            id,
            shards: env.shards[id].clone(),
            selection: SelectionState::new(cfg.selection.queue_capacity)?,
            local_classifier: env.initial.classifier.clone(),
            connectivity: ConnectivityTrace::default(),
            pending: Vec::new(),
            link: env.links[id].clone(),
            link_rng: stream(seed, Stream::Link(id as u32)),
        })
    }

    /// Samples and records this round's link state.
    pub fn observe_link(&mut self, round: usize) -> bool {
        let online = self.link.sample(round, &mut self.link_rng);
        self.connectivity.record(online);
        online
    }
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    pub round: usize,
    pub model: ModelPartition,
    sampling_rng: ChaCha8Rng,
}

/// Shared read-only inputs of a client phase.
#[derive(Clone, Copy)]
pub struct PhaseCtx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub train: &'a Dataset,
    pub params: SelectionParams,
    pub round: usize,
    pub seed: u64,
}

impl PhaseCtx<'_> {
    fn model_bytes(&self, m: &ModelPartition) -> u64 {
        m.param_count() as u64 * self.cfg.model.bytes_per_param
    }

    fn net_bytes(&self, n: &Network) -> u64 {
        n.param_count() as u64 * self.cfg.model.bytes_per_param
    }
}

#[derive(Debug, Clone, Default)]
struct UcdWork {
    selection_macs: u64,
    train_macs: u64,
    trained: usize,
    trained_ids: HashSet<usize>,
    noop_batches: usize,
    transmit: Vec<usize>,
    transmit_seen: HashSet<usize>,
}

impl UcdWork {
    fn push_transmit(&mut self, id: usize) {
        if self.transmit_seen.insert(id) {
            self.transmit.push(id);
        }
    }
}

#[derive(Debug, Clone)]
pub struct UcdOutcome {
    pub client: usize,
    pub classifier: Network,
    /// D_M sample indices uploaded to the AP at the end of the phase.
    pub uploaded: Vec<usize>,
    pub trained_samples: usize,
    pub noop_batches: usize,
    pub storage_warning: bool,
    pub ledger: CostLedger,
}

/// One UCD-selection epoch over `idx` with the frozen `encoder`.
fn selective_epoch<R: Rng + ?Sized>(
    ctx: &PhaseCtx,
    encoder: &Network,
    classifier: &mut Network,
    selection: &mut SelectionState,
    idx: &[usize],
    work: &mut UcdWork,
    rng: &mut R,
) -> Result<()> {
    let mut order = idx.to_vec();
    order.shuffle(rng);
    for batch in order.chunks(ctx.cfg.federation.batch_size) {
        let x = ctx.train.features.select_rows(batch);
        let y: Vec<usize> = batch.iter().map(|&i| ctx.train.labels[i]).collect();
        let enc = forward(encoder, &x)?;
        let cls = forward(classifier, &enc.logits)?;
        work.selection_macs += enc.macs + cls.macs;
        let (losses, _) = softmax_cross_entropy(&cls.logits, &y)?;
        let routed = route_by_loss(&losses, &mut selection.loss_cdf, &ctx.params, rng);
        for &p in &routed.transmit_by_loss {
            work.push_transmit(batch[p]);
        }
        if routed.classifier.is_empty() {
            work.noop_batches += 1;
            continue;
        }
        let fx = enc.logits.select_rows(&routed.classifier);
        let fy: Vec<usize> = routed.classifier.iter().map(|&p| y[p]).collect();
        // The forward over D_C was already paid for during selection.
        let lg = loss_and_grad_with(classifier, &fx, &fy, ctx.cfg.model.backward_mac_multiplier)?;
        work.train_macs += lg.backward_macs;
        let picked = route_by_grad(
            &routed.classifier,
            &lg.last_layer_norms,
            &mut selection.grad_cdf,
            &ctx.params,
            rng,
        )?;
        for p in picked {
            work.push_transmit(batch[p]);
        }
        sgd_step_in_place(classifier, &lg.grads, ctx.cfg.federation.lr)?;
        work.trained += routed.classifier.len();
        work.trained_ids.extend(routed.classifier.iter().map(|&p| batch[p]));
    }
    Ok(())
}

/// One plain classifier epoch (no selection) with the frozen `encoder`.
fn plain_epoch<R: Rng + ?Sized>(
    ctx: &PhaseCtx,
    encoder: &Network,
    classifier: &mut Network,
    idx: &[usize],
    work: &mut UcdWork,
    rng: &mut R,
) -> Result<()> {
    let mut order = idx.to_vec();
    order.shuffle(rng);
    for batch in order.chunks(ctx.cfg.federation.batch_size) {
        let x = ctx.train.features.select_rows(batch);
        let y: Vec<usize> = batch.iter().map(|&i| ctx.train.labels[i]).collect();
        let enc = forward(encoder, &x)?;
        let lg = loss_and_grad_with(
            classifier,
            &enc.logits,
            &y,
            ctx.cfg.model.backward_mac_multiplier,
        )?;
        work.train_macs += enc.macs + lg.macs();
        sgd_step_in_place(classifier, &lg.grads, ctx.cfg.federation.lr)?;
        work.trained += batch.len();
        work.trained_ids.extend(batch.iter().copied());
    }
    Ok(())
}

/// Random `ceil(20%)` slices of the extra shard, one per accrued offline unit.
fn extra_slices<R: Rng + ?Sized>(extra: &[usize], units: u32, rng: &mut R) -> Vec<Vec<usize>> {
    let (epochs, len) = offline_to_epochs(units, extra.len());
    if len == 0 {
        return Vec::new();
    }
    (0..epochs)
        .map(|_| sample_from(extra, len, rng))
        .collect()
}

/// UCD side of a Centaur round, or the whole round for UCD-only training
/// when `select` is false.
pub fn ucd_phase(
    client: &mut ClientState,
    global: &ModelPartition,
    ctx: &PhaseCtx,
    select: bool,
) -> Result<UcdOutcome> {
    let cfg = ctx.cfg;
    let ucd = &cfg.devices.ucd;
    let mut rng = stream(
        ctx.seed,
        Stream::Selection {
            client: client.id as u32,
            round: ctx.round as u32,
        },
    );
    let mut ledger = CostLedger::new();
    // Centaur refreshes the whole model since the encoder moves on the APs;
    // UCD-only keeps its preinstalled encoder and only needs the classifier.
    let down = if select {
        ctx.model_bytes(global)
    } else {
        ctx.net_bytes(&global.classifier)
    };
    ledger.record(ctx.round, Tier::Ucd, Category::CommDown, 0, down, ucd);
    client.local_classifier = global.classifier.clone();

    let mut classifier = global.classifier.clone();
    let mut work = UcdWork::default();
    let units = client.connectivity.spend();
    let mut plan = extra_slices(&client.shards.extra, units, &mut rng);
    plan.extend((0..cfg.federation.epochs).map(|_| client.shards.online.clone()));
    for idx in &plan {
        if idx.is_empty() {
            continue;
        }
        if select {
            selective_epoch(
                ctx,
                &global.encoder,
                &mut classifier,
                &mut client.selection,
                idx,
                &mut work,
                &mut rng,
            )?;
        } else {
            plain_epoch(ctx, &global.encoder, &mut classifier, idx, &mut work, &mut rng)?;
        }
    }

    let bps = cfg.data.bytes_per_sample;
    let queue_bytes = client.selection.queued_values() as u64 * 8;
    client.pending.extend(work.transmit.iter().copied());
    let room = ucd.storage_bytes.saturating_sub(queue_bytes) / bps;
    let mut storage_warning = false;
    if client.pending.len() as u64 > room {
        client.pending.truncate(room as usize);
        storage_warning = true;
    }
    let used = (client.pending.len() + work.trained_ids.len()) as u64 * bps + queue_bytes;
    if used > ucd.storage_bytes {
        storage_warning = true;
    }
    if storage_warning {
        log::warn!(
            "round {}: client {} exceeded UCD storage ({} > {} bytes)",
            ctx.round,
            client.id,
            used,
            ucd.storage_bytes
        );
    }

    let uploaded = std::mem::take(&mut client.pending);
    let category = if select {
        Category::SelectionCompute
    } else {
        Category::TrainCompute
    };
    ledger
        .record(ctx.round, Tier::Ucd, category, work.selection_macs, 0, ucd)
        .record(ctx.round, Tier::Ucd, Category::TrainCompute, work.train_macs, 0, ucd)
        .record(
            ctx.round,
            Tier::Ucd,
            Category::CommUp,
            0,
            ctx.net_bytes(&classifier) + uploaded.len() as u64 * bps,
            ucd,
        );
    client.local_classifier = classifier.clone();
    Ok(UcdOutcome {
        client: client.id,
        classifier,
        uploaded,
        trained_samples: work.trained,
        noop_batches: work.noop_batches,
        storage_warning,
        ledger,
    })
}

#[derive(Debug, Clone)]
pub struct ApOutcome {
    pub client: usize,
    /// `None` when there was nothing to train on or the AP was unreachable.
    pub model: Option<ModelPartition>,
    pub trained_samples: usize,
    pub train_macs: u64,
    pub ledger: CostLedger,
}

/// Full-model training on an AP. `plan` lists the sample sets of each epoch.
fn ap_train(
    client: usize,
    global: &ModelPartition,
    ctx: &PhaseCtx,
    plan: &[Vec<usize>],
) -> Result<ApOutcome> {
    let ap = &ctx.cfg.devices.ap;
    let mut rng = stream(
        ctx.seed,
        Stream::ApTrain {
            client: client as u32,
            round: ctx.round as u32,
        },
    );
    let mut ledger = CostLedger::new();
    let trained: usize = plan.iter().map(Vec::len).sum();
    if trained == 0 || rng.random::<f64>() < ap.disconnect_prob {
        return Ok(ApOutcome {
            client,
            model: None,
            trained_samples: 0,
            train_macs: 0,
            ledger,
        });
    }
    let bytes = ctx.model_bytes(global);
    ledger.record(ctx.round, Tier::Ap, Category::CommDown, 0, bytes, ap);
    let mut net = global.compose();
    let mut macs = 0;
    for idx in plan {
        if !idx.is_empty() {
            macs += train_network(
                &mut net,
                ctx.train,
                idx,
                1,
                ctx.cfg.federation.batch_size,
                ctx.cfg.federation.lr,
                ctx.cfg.model.backward_mac_multiplier,
                &mut rng,
            )?;
        }
    }
    let model = ModelPartition::from_composed(&net, global.encoder_layers())?;
    ledger
        .record(ctx.round, Tier::Ap, Category::TrainCompute, macs, 0, ap)
        .record(ctx.round, Tier::Ap, Category::CommUp, 0, bytes, ap);
    Ok(ApOutcome {
        client,
        model: Some(model),
        trained_samples: trained,
        train_macs: macs,
        ledger,
    })
}

/// AP side of a Centaur round: `epochs` passes over the transmitted D_M.
pub fn ap_phase(
    client: usize,
    global: &ModelPartition,
    samples: &[usize],
    ctx: &PhaseCtx,
) -> Result<ApOutcome> {
    let plan: Vec<Vec<usize>> = (0..ctx.cfg.federation.epochs)
        .map(|_| samples.to_vec())
        .collect();
    ap_train(client, global, ctx, &plan)
}

/// AP-only round for one client: the UCD ships its online shard (plus the
/// extra slices earned offline) and the AP trains the full model on them.
pub fn ap_only_phase(
    client: &mut ClientState,
    global: &ModelPartition,
    ctx: &PhaseCtx,
) -> Result<(ApOutcome, u64)> {
    let mut rng = stream(
        ctx.seed,
        Stream::Selection {
            client: client.id as u32,
            round: ctx.round as u32,
        },
    );
    let units = client.connectivity.spend();
    let mut plan = extra_slices(&client.shards.extra, units, &mut rng);
    let mut shipped: HashSet<usize> = plan.iter().flatten().copied().collect();
    shipped.extend(client.shards.online.iter().copied());
    plan.extend((0..ctx.cfg.federation.epochs).map(|_| client.shards.online.clone()));
    let mut out = ap_train(client.id, global, ctx, &plan)?;
    let uploaded = shipped.len() as u64;
    out.ledger.record(
        ctx.round,
        Tier::Ucd,
        Category::CommUp,
        0,
        uploaded * ctx.cfg.data.bytes_per_sample,
        &ctx.cfg.devices.ucd,
    );
    Ok((out, uploaded))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub accuracy: f64,
    pub online: usize,
    pub participants: usize,
    /// Samples sent from UCDs to APs this round.
    pub uploaded_samples: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    pub final_model: ModelPartition,
    pub ledger: CostLedger,
    pub classifier: ClassifierCandidate,
    pub storage_warnings: usize,
    /// MACs spent on full-model (encoder-updating) training.
    pub encoder_train_macs: u64,
    pub mean_lambda: Option<f64>,
    pub initial_accuracy: f64,
}

impl RunResult {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(self.initial_accuracy, |m| m.accuracy)
    }

    pub fn best_accuracy(&self) -> f64 {
        self.metrics
            .iter()
            .map(|m| m.accuracy)
            .fold(self.initial_accuracy, f64::max)
    }
}

pub fn run(strategy: StrategyKind, cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    let env = Environment::build(cfg, seed)?;
    run_in(strategy, cfg, &env, seed)
}

/// Runs one strategy on a prebuilt environment. Client phases run on
/// `cfg.workers` threads; their results are reduced in ascending client id,
/// so the output does not depend on the worker count.
pub fn run_in(
    strategy: StrategyKind,
    cfg: &ExperimentConfig,
    env: &Environment,
    seed: u64,
) -> Result<RunResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| SimError::Pool(e.to_string()))?;
    pool.install(|| simulate(strategy, cfg, env, seed))
}

fn simulate(
    strategy: StrategyKind,
    cfg: &ExperimentConfig,
    env: &Environment,
    seed: u64,
) -> Result<RunResult> {
    let fed = &cfg.federation;
    let mut clients = (0..fed.num_clients)
        .map(|c| ClientState::new(c, env, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut global = GlobalState {
        round: 0,
        model: env.initial.clone(),
        sampling_rng: stream(seed, Stream::Sampling),
    };
    let evaluate = |m: &ModelPartition| m.accuracy(&env.test.features, &env.test.labels);
    let initial_accuracy = evaluate(&global.model)?;
    let mut ledger = CostLedger::new();
    let mut metrics = Vec::with_capacity(fed.rounds);
    let mut storage_warnings = 0;
    let mut encoder_train_macs = 0;
    let mut awaiting_ap: Vec<(usize, Vec<usize>)> = Vec::new();
    let k = target_participants(fed.num_clients, fed.fraction);

    for round in 0..fed.rounds {
        global.round = round;
        let ctx = PhaseCtx {
            cfg,
            train: &env.train,
            params: cfg.selection.params(),
            round,
            seed,
        };
        let online: Vec<usize> = clients
            .iter_mut()
            .filter_map(|c| c.observe_link(round).then_some(c.id))
            .collect();
        let ap_round = strategy == StrategyKind::Centaur && round % 2 == 1;
        let selected = if ap_round {
            Vec::new()
        } else {
            sample_from(&online, k, &mut global.sampling_rng)
        };
        let mut row = RoundMetrics {
            round,
            accuracy: 0.0,
            online: online.len(),
            participants: selected.len(),
            uploaded_samples: 0,
        };

        match strategy {
            StrategyKind::Centaur | StrategyKind::UcdOnly if !ap_round => {
                let select = strategy == StrategyKind::Centaur;
                let model = &global.model;
                let outcomes = participants(&mut clients, &selected)
                    .into_par_iter()
                    .map(|c| ucd_phase(c, model, &ctx, select))
                    .collect::<Result<Vec<_>>>()?;
                if !outcomes.is_empty() {
                    let nets: Vec<Network> = outcomes.iter().map(|o| o.classifier.clone()).collect();
                    let weights = client_weights(
                        fed.weighted_fedavg,
                        outcomes.iter().map(|o| o.trained_samples),
                    );
                    global.model.classifier = classifier_fedavg_weighted(&nets, &weights)?;
                }
                for o in outcomes {
                    ledger.merge(&o.ledger);
                    storage_warnings += usize::from(o.storage_warning);
                    row.uploaded_samples += o.uploaded.len() as u64;
                    if select {
                        awaiting_ap.push((o.client, o.uploaded));
                    }
                }
                for &c in &selected {
                    clients[c].local_classifier = global.model.classifier.clone();
                }
            }
            StrategyKind::Centaur => {
                let model = &global.model;
                let jobs = std::mem::take(&mut awaiting_ap);
                let outcomes = jobs
                    .par_iter()
                    .map(|(c, samples)| ap_phase(*c, model, samples, &ctx))
                    .collect::<Result<Vec<_>>>()?;
                row.participants = outcomes.iter().filter(|o| o.model.is_some()).count();
                aggregate_full(&mut global.model, &outcomes, fed.weighted_fedavg)?;
                for o in outcomes {
                    ledger.merge(&o.ledger);
                    encoder_train_macs += o.train_macs;
                }
            }
            StrategyKind::ApOnly => {
                let model = &global.model;
                let results = participants(&mut clients, &selected)
                    .into_par_iter()
                    .map(|c| ap_only_phase(c, model, &ctx))
                    .collect::<Result<Vec<_>>>()?;
                let outcomes: Vec<ApOutcome> = results
                    .into_iter()
                    .map(|(o, up)| {
                        row.uploaded_samples += up;
                        o
                    })
                    .collect();
                aggregate_full(&mut global.model, &outcomes, fed.weighted_fedavg)?;
                for o in outcomes {
                    ledger.merge(&o.ledger);
                    encoder_train_macs += o.train_macs;
                }
            }
            StrategyKind::UcdOnly => unreachable!("UCD-only rounds never take the AP branch"),
        }
        row.accuracy = evaluate(&global.model)?;
        log::debug!(
            "{strategy} seed {seed} round {round}: acc {:.4} online {} participants {}",
            row.accuracy,
            row.online,
            row.participants
        );
        metrics.push(row);
    }

    Ok(RunResult {
        strategy,
        seed,
        metrics,
        final_model: global.model,
        ledger,
        classifier: env.classifier.clone(),
        storage_warnings,
        encoder_train_macs,
        mean_lambda: env.mean_lambda,
        initial_accuracy,
    })
}

/// Mutable handles to the selected clients, ascending by id.
fn participants<'a>(clients: &'a mut [ClientState], selected: &[usize]) -> Vec<&'a mut ClientState> {
    clients
        .iter_mut()
        .filter(|c| selected.binary_search(&c.id).is_ok())
        .collect()
}

fn client_weights(weighted: bool, counts: impl Iterator<Item = usize>) -> Vec<f64> {
    let counts: Vec<f64> = counts.map(|n| n as f64).collect();
    if weighted && counts.iter().sum::<f64>() > 0.0 {
        counts
    } else {
        vec![1.0; counts.len()]
    }
}

/// Averages the APs that actually trained; keeps the model when none did.
fn aggregate_full(model: &mut ModelPartition, outcomes: &[ApOutcome], weighted: bool) -> Result<()> {
    let trained: Vec<&ApOutcome> = outcomes.iter().filter(|o| o.model.is_some()).collect();
    if trained.is_empty() {
        return Ok(());
    }
    let models: Vec<ModelPartition> = trained
        .iter()
        .map(|o| o.model.clone().expect("filtered above"))
        .collect();
    let weights = client_weights(weighted, trained.iter().map(|o| o.trained_samples));
    *model = full_fedavg_weighted(&models, &weights)?;
    Ok(())
}
