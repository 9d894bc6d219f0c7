//! The round protocol.
//!
//! Each round the server delivers `G_t`; every client trains a local copy on
//! its source domain, exchanging encoder features with the server for
//! domain-classifier and MMD gradients; the server averages the updates,
//! optionally pseudo-labels target samples by client vote and fine-tunes the
//! aggregate on them.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_indices, DataError, DomainDataset, RoundPool};
use crate::losses::{disentangler_loss, kernel_bank_from, lambda_schedule, mk_mmd_sq, LossError, ScheduleClock};
use crate::metrics::{group_effect_from, tta_on, MetricsError, RoundRecord};
use crate::nn::{AdamState, Mode, Model, ModelArch, ModelOptimizer, ModelParams, NnError, StepError};
use crate::seeds::{stream_rng, Stream, StreamRng};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("client {client}: {source}")]
    Client { client: usize, source: Box<FederationError> },
    #[error("dataset has {available} samples, fewer than one batch of {batch}")]
    DatasetTooSmall { available: usize, batch: usize },
    #[error("source domain `{0}` has unlabeled rows")]
    UnlabeledSource(String),
    #[error("non-finite loss, round aborted")]
    NonFiniteLoss,
    #[error("packet has {packet} rows but target batch has {target}")]
    RowMismatch { packet: usize, target: usize },
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("client sample counts sum to zero")]
    ZeroSamples,
    #[error("{labels} pseudo-labels for {samples} samples")]
    LabelLength { labels: usize, samples: usize },
    #[error("nothing to vote on")]
    EmptyVote,
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<StepError> for FederationError {
    fn from(e: StepError) -> Self {
        match e {
            StepError::Nn(e) => e.into(),
            StepError::Loss(e) => e.into(),
            StepError::NonFiniteLoss => FederationError::NonFiniteLoss,
            StepError::Exchange(msg) => FederationError::Nn(NnError::InvalidSpec(msg)),
        }
    }
}

/// The seven ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantTag {
    FedAvg,
    FDann,
    FDan,
    Voting,
    DisVoting,
    DisMmd,
    FedKA,
}

impl VariantTag {
    pub const ALL: [VariantTag; 7] = [
        VariantTag::FedAvg,
        VariantTag::FDann,
        VariantTag::FDan,
        VariantTag::Voting,
        VariantTag::DisVoting,
        VariantTag::DisMmd,
        VariantTag::FedKA,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantTag::FedAvg => "FedAvg",
            VariantTag::FDann => "f-DANN",
            VariantTag::FDan => "f-DAN",
            VariantTag::Voting => "Voting",
            VariantTag::DisVoting => "Dis+Voting",
            VariantTag::DisMmd => "Dis+MMD",
            VariantTag::FedKA => "FedKA",
        }
    }

    /// `(disentangler, mmd, voting)`
    pub fn blocks(&self) -> (bool, bool, bool) {
        match self {
            VariantTag::FedAvg => (false, false, false),
            VariantTag::FDann => (true, false, false),
            VariantTag::FDan => (false, true, false),
            VariantTag::Voting => (false, false, true),
            VariantTag::DisVoting => (true, false, true),
            VariantTag::DisMmd => (true, true, false),
            VariantTag::FedKA => (true, true, true),
        }
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantTag {
    type Err = FederationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "fedavg" => VariantTag::FedAvg,
            "fdann" => VariantTag::FDann,
            "fdan" => VariantTag::FDan,
            "voting" => VariantTag::Voting,
            "disvoting" | "disentanglervoting" => VariantTag::DisVoting,
            "dismmd" | "disentanglermkmmd" | "dismkmmd" | "disentanglermmd" => VariantTag::DisMmd,
            "fedka" => VariantTag::FedKA,
            _ => return Err(FederationError::UnknownVariant(s.to_string())),
        })
    }
}

/// Number of target samples pseudo-labeled per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VotingSize {
    Small,
    Large,
    All,
}

impl VotingSize {
    /// Capped at the size of the target training split.
    pub fn resolve(&self, available: usize) -> usize {
        match self {
            VotingSize::Small => 512.min(available),
            VotingSize::Large => 2048.min(available),
            VotingSize::All => available,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    pub tag: VariantTag,
    pub use_disentangler: bool,
    pub use_mmd: bool,
    pub voting: Option<VotingSize>,
}

impl VariantFlags {
    pub fn new(tag: VariantTag, voting_size: VotingSize) -> Self {
        let (d, m, v) = tag.blocks();
        Self { tag, use_disentangler: d, use_mmd: m, voting: v.then_some(voting_size) }
    }

    pub fn exchanges(&self) -> bool {
        self.use_disentangler || self.use_mmd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PacketKind {
    /// One training mini-batch, for the domain classifier.
    Disentangler,
    /// A group of consecutive mini-batches, for MMD matching.
    Mmd,
}

/// Client -> server: encoder features of a batch of source samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePacket {
    pub client: usize,
    pub kind: PacketKind,
    /// Mini-batch index (disentangler) or group index (MMD) within the round.
    pub batch: usize,
    pub sample_indices: Vec<usize>,
    pub features: Array2<f64>,
}

/// Server -> client: feature gradients for the matching packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGradPacket {
    pub client: usize,
    pub kind: PacketKind,
    pub batch: usize,
    /// `-dJ_dis/dH`: already reversed, so the encoder ascends the domain loss.
    pub grad_disentangler: Option<Array2<f64>>,
    /// `dJ_mmd/dH`
    pub grad_mmd: Option<Array2<f64>>,
    pub j_dis: f64,
    pub j_mmd: f64,
}

/// `L_{t+1} - G_t` and the number of samples trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client: usize,
    pub delta: Model,
    pub samples: usize,
}

/// Server-held domain classifier for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifierSlot {
    pub params: ModelParams,
    pub adam: AdamState,
}

impl DomainClassifierSlot {
    pub fn new(arch: &ModelArch, seed: u64) -> Result<Self, NnError> {
        let params = crate::nn::init_network(&arch.domain_classifier_spec()?, seed);
        let adam = AdamState::new(&params);
        Ok(Self { params, adam })
    }
}

/// Answer one feature packet. `target_features` are the global encoder's
/// eval-mode features of the matching target samples.
pub fn server_exchange(
    packet: &FeaturePacket,
    target_features: ArrayView2<f64>,
    slot: &mut DomainClassifierSlot,
    flags: &VariantFlags,
    lr: f64,
) -> Result<FeatureGradPacket, FederationError> {
    if packet.features.nrows() != target_features.nrows() {
        return Err(FederationError::RowMismatch { packet: packet.features.nrows(), target: target_features.nrows() });
    }
    let mut reply = FeatureGradPacket {
        client: packet.client,
        kind: packet.kind,
        batch: packet.batch,
        grad_disentangler: None,
        grad_mmd: None,
        j_dis: 0.0,
        j_mmd: 0.0,
    };
    match packet.kind {
        PacketKind::Disentangler if flags.use_disentangler => {
            let out = disentangler_loss(packet.features.view(), target_features, &slot.params)?;
            slot.adam.step(&mut slot.params, &out.grad_fd, lr)?;
            slot.params.update_running_stats(&out.tape);
            reply.j_dis = out.loss;
            reply.grad_disentangler = Some(-out.grad_a);
        }
        PacketKind::Mmd if flags.use_mmd => {
            let bank = kernel_bank_from(packet.features.view(), target_features)?;
            let (value, grad) = mk_mmd_sq(packet.features.view(), target_features, &bank)?;
            reply.j_mmd = value;
            reply.grad_mmd = Some(grad);
        }
        _ => {}
    }
    Ok(reply)
}

/// Anything a client can send feature packets to.
pub trait FeatureExchange {
    fn exchange(&mut self, packet: FeaturePacket) -> Result<FeatureGradPacket, FederationError>;
}

/// In-process server endpoint bound to one client's domain classifier.
pub struct ServerEndpoint<'a> {
    pub slot: &'a mut DomainClassifierSlot,
    /// Features of the round's target pool, in pool order.
    pub target_features: ArrayView2<'a, f64>,
    pub flags: VariantFlags,
    pub lr: f64,
    pub batch_size: usize,
    pub mmd_group: usize,
}

impl FeatureExchange for ServerEndpoint<'_> {
    fn exchange(&mut self, packet: FeaturePacket) -> Result<FeatureGradPacket, FederationError> {
        let (start, len) = match packet.kind {
            PacketKind::Disentangler => (packet.batch * self.batch_size, self.batch_size),
            PacketKind::Mmd => {
                let span = self.batch_size * self.mmd_group;
                (packet.batch * span, span)
            }
        };
        let end = (start + len).min(self.target_features.nrows());
        let target = self.target_features.slice(s![start..end, ..]);
        server_exchange(&packet, target, self.slot, &self.flags, self.lr)
    }
}

/// Local-training hyperparameters shared by clients and the server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub rounds: usize,
    pub batches_per_round: usize,
    pub batch_size: usize,
    /// Mini-batches per MMD group.
    pub mmd_group: usize,
    pub lr: f64,
    pub gamma: f64,
    pub group_effect: bool,
    pub parallel_clients: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            batches_per_round: 32,
            batch_size: 16,
            mmd_group: 8,
            lr: 3e-4,
            gamma: 5.0,
            group_effect: true,
            parallel_clients: true,
        }
    }
}

impl ProtocolConfig {
    pub fn clock(&self, round: usize, batch: usize) -> Result<ScheduleClock, LossError> {
        ScheduleClock::new(batch, self.batches_per_round, round, self.rounds, self.gamma)
    }
}

pub struct ClientState {
    pub id: usize,
    pub data: DomainDataset,
    labels: Vec<usize>,
    pub rng: StreamRng,
    pub optimizer: Option<ModelOptimizer>,
}

impl ClientState {
    pub fn new(id: usize, data: DomainDataset, rng: StreamRng) -> Result<Self, FederationError> {
        let labels = data.label_vec().ok_or_else(|| FederationError::UnlabeledSource(data.domain_id.clone()))?;
        Ok(Self { id, data, labels, rng, optimizer: None })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientLog {
    pub cls_losses: Vec<f64>,
    pub dis_losses: Vec<f64>,
    pub mmd_losses: Vec<f64>,
    pub dis_packets: usize,
    pub mmd_packets: usize,
}

pub struct LocalOutcome {
    pub update: ClientUpdate,
    pub local: Model,
    pub log: ClientLog,
}

/// One round of local training starting from `global`.
pub fn client_local_round<E: FeatureExchange>(
    client: &mut ClientState,
    global: &Model,
    server: &mut E,
    flags: &VariantFlags,
    cfg: &ProtocolConfig,
    round: usize,
) -> Result<LocalOutcome, FederationError> {
    let n = client.data.len();
    if n < cfg.batch_size {
        return Err(FederationError::DatasetTooSmall { available: n, batch: cfg.batch_size });
    }
    let batches = cfg.batches_per_round.min(n / cfg.batch_size);
    let pool = RoundPool::draw(n, &mut client.rng, batches, cfg.batch_size)?;
    let mut local = global.clone();
    let opt = client.optimizer.get_or_insert_with(|| ModelOptimizer::new(global));
    let mut log = ClientLog::default();
    let mut mmd_grads: Option<Array2<f64>> = None;

    for b in 0..batches {
        let lambda = lambda_schedule(&cfg.clock(round, b)?);

        if flags.use_mmd && b % cfg.mmd_group == 0 {
            mmd_grads = None;
            if b + cfg.mmd_group <= batches {
                let idx = pool.span(b, cfg.mmd_group);
                let (h, _) = local.encoder.forward(client.data.rows(idx).view(), Mode::Train)?;
                let reply = server.exchange(FeaturePacket {
                    client: client.id,
                    kind: PacketKind::Mmd,
                    batch: b / cfg.mmd_group,
                    sample_indices: idx.to_vec(),
                    features: h,
                })?;
                log.mmd_packets += 1;
                log.mmd_losses.push(reply.j_mmd);
                mmd_grads = reply.grad_mmd;
            }
        }

        let idx = pool.batch(b);
        let x = client.data.rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| client.labels[i]).collect();
        let offset = (b % cfg.mmd_group) * cfg.batch_size;
        let mmd_rows = mmd_grads.as_ref().map(|g| g.slice(s![offset..offset + cfg.batch_size, ..]));
        let client_id = client.id;
        let log_ref = &mut log;

        let step = local.supervised_step(opt, x.view(), &y, cfg.lr, |h| {
            let mut extra: Option<Array2<f64>> = None;
            if flags.use_disentangler {
                let reply = server
                    .exchange(FeaturePacket {
                        client: client_id,
                        kind: PacketKind::Disentangler,
                        batch: b,
                        sample_indices: idx.to_vec(),
                        features: h.clone(),
                    })
                    .map_err(|e| StepError::Exchange(e.to_string()))?;
                log_ref.dis_packets += 1;
                log_ref.dis_losses.push(reply.j_dis);
                if let Some(g) = reply.grad_disentangler {
                    extra = Some(g * lambda);
                }
            }
            if let Some(g) = mmd_rows {
                let scaled = &g * lambda;
                extra = Some(match extra {
                    Some(e) => e + scaled,
                    None => scaled,
                });
            }
            Ok(extra)
        })?;
        log.cls_losses.push(step.loss);
    }

    if !local.is_finite() {
        return Err(FederationError::NonFiniteLoss);
    }
    let delta = local.delta(global)?;
    Ok(LocalOutcome {
        update: ClientUpdate { client: client.id, delta, samples: batches * cfg.batch_size },
        local,
        log,
    })
}

/// `N_k / sum N`, in the order given.
pub fn aggregation_weights(updates: &[ClientUpdate]) -> Result<Vec<f64>, FederationError> {
    if updates.is_empty() {
        return Err(FederationError::NoUpdates);
    }
    let total: usize = updates.iter().map(|u| u.samples).sum();
    if total == 0 {
        return Err(FederationError::ZeroSamples);
    }
    Ok(updates.iter().map(|u| u.samples as f64 / total as f64).collect())
}

/// Sample-weighted FedAvg over every tensor, batch-norm statistics included.
/// Updates are summed in client-id order, so the result does not depend on
/// the order of `updates`.
pub fn fedavg_aggregate(global: &Model, updates: &[ClientUpdate]) -> Result<Model, FederationError> {
    let weights = aggregation_weights(updates)?;
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client);
    let mut step = global.zeros_like_model();
    for i in order {
        step.add_scaled(&updates[i].delta, weights[i])?;
    }
    let mut out = global.clone();
    out.add_scaled(&step, 1.0)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteOutcome {
    pub labels: Vec<usize>,
    pub ties: usize,
}

/// Majority vote over per-model predictions (`predictions[k][i]`). Ties draw
/// uniformly among the top classes from `rng`; untied samples use no
/// randomness.
pub fn vote_from_predictions<R: Rng>(
    predictions: &[Vec<usize>],
    classes: usize,
    rng: &mut R,
) -> Result<VoteOutcome, FederationError> {
    let Some(first) = predictions.first() else {
        return Err(FederationError::EmptyVote);
    };
    let n = first.len();
    if n == 0 {
        return Err(FederationError::EmptyVote);
    }
    let mut labels = Vec::with_capacity(n);
    let mut ties = 0;
    let mut counts = vec![0usize; classes];
    let mut top = Vec::with_capacity(classes);
    for i in 0..n {
        counts.fill(0);
        for p in predictions {
            counts[p[i]] += 1;
        }
        let best = *counts.iter().max().expect("classes > 0");
        top.clear();
        top.extend(counts.iter().enumerate().filter(|(_, &c)| c == best).map(|(c, _)| c));
        if top.len() == 1 {
            labels.push(top[0]);
        } else {
            ties += 1;
            labels.push(top[rng.random_range(0..top.len())]);
        }
    }
    Ok(VoteOutcome { labels, ties })
}

pub fn federated_vote<R: Rng>(models: &[Model], x: ArrayView2<f64>, rng: &mut R) -> Result<VoteOutcome, FederationError> {
    if models.is_empty() || x.nrows() == 0 {
        return Err(FederationError::EmptyVote);
    }
    let classes = models[0].classifier.spec().output_dim();
    let preds = models.iter().map(|m| m.predict(x)).collect::<Result<Vec<_>, _>>()?;
    vote_from_predictions(&preds, classes, rng)
}

/// One pass over the pseudo-labeled set in mini-batches, with learning rate
/// `lambda * lr`. Returns the mean batch loss, or `None` when `lambda == 0`
/// (nothing changes).
pub fn fine_tune_global(
    model: &mut Model,
    opt: &mut ModelOptimizer,
    x: ArrayView2<f64>,
    labels: &[usize],
    lambda: f64,
    lr: f64,
    batch_size: usize,
) -> Result<Option<f64>, FederationError> {
    if labels.len() != x.nrows() {
        return Err(FederationError::LabelLength { labels: labels.len(), samples: x.nrows() });
    }
    if lambda == 0.0 {
        return Ok(None);
    }
    let mut losses = Vec::new();
    let mut start = 0;
    while start < labels.len() {
        let end = (start + batch_size).min(labels.len());
        if end - start >= 2 {
            let step =
                model.supervised_step(opt, x.slice(s![start..end, ..]), &labels[start..end], lambda * lr, |_| Ok(None))?;
            losses.push(step.loss);
        }
        start = end;
    }
    if losses.is_empty() {
        return Ok(None);
    }
    Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
}

/// Everything the simulation carries between rounds.
pub struct Federation {
    pub arch: ModelArch,
    pub flags: VariantFlags,
    pub cfg: ProtocolConfig,
    pub global: Model,
    pub global_opt: ModelOptimizer,
    pub clients: Vec<ClientState>,
    pub domain_classifiers: Vec<DomainClassifierSlot>,
    pub server_rng: StreamRng,
    pub round: usize,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
}

impl Federation {
    /// Streams: encoder/classifier init, one per client, one per domain
    /// classifier and one for the server, all derived from `seed`.
    pub fn new(
        arch: ModelArch,
        flags: VariantFlags,
        cfg: ProtocolConfig,
        sources: Vec<DomainDataset>,
        target_train: DomainDataset,
        target_test: DomainDataset,
        seed: u64,
    ) -> Result<Self, FederationError> {
        let global = Model::init(
            &arch,
            crate::seeds::derive_seed(seed, Stream::EncoderInit, 0),
            crate::seeds::derive_seed(seed, Stream::ClassifierInit, 0),
        )?;
        let clients = sources
            .into_iter()
            .enumerate()
            .map(|(k, d)| ClientState::new(k, d, stream_rng(seed, Stream::Client, k as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let domain_classifiers = (0..clients.len())
            .map(|k| DomainClassifierSlot::new(&arch, crate::seeds::derive_seed(seed, Stream::DomainClassifier, k as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        if target_test.label_vec().is_none() {
            return Err(MetricsError::Unlabeled(target_test.domain_id.clone()).into());
        }
        Ok(Self {
            global_opt: ModelOptimizer::new(&global),
            global,
            arch,
            flags,
            cfg,
            clients,
            domain_classifiers,
            server_rng: stream_rng(seed, Stream::Server, 0),
            round: 0,
            target_train: target_train.unlabeled(),
            target_test,
        })
    }

    /// Deliver, train, aggregate, measure, vote and fine-tune.
    pub fn run_round(&mut self) -> Result<RoundRecord, FederationError> {
        let cfg = self.cfg;
        let flags = self.flags;
        let round = self.round;
        let b_last = cfg.batches_per_round - 1;

        let target_features = if flags.exchanges() {
            let pool = RoundPool::draw(self.target_train.len(), &mut self.server_rng, cfg.batches_per_round, cfg.batch_size)?;
            self.global.encode(self.target_train.rows(&pool.indices).view(), Mode::Eval)?
        } else {
            Array2::zeros((0, self.arch.feature_dim))
        };

        let global = &self.global;
        let tf = target_features.view();
        let work = |(client, slot): (&mut ClientState, &mut DomainClassifierSlot)| {
            let mut endpoint = ServerEndpoint {
                slot,
                target_features: tf,
                flags,
                lr: cfg.lr,
                batch_size: cfg.batch_size,
                mmd_group: cfg.mmd_group,
            };
            client_local_round(client, global, &mut endpoint, &flags, &cfg, round)
                .map_err(|e| FederationError::Client { client: client.id, source: Box::new(e) })
        };
        let pairs = self.clients.iter_mut().zip(self.domain_classifiers.iter_mut());
        let outcomes: Vec<LocalOutcome> = if cfg.parallel_clients {
            pairs.collect::<Vec<_>>().into_par_iter().map(work).collect::<Result<_, _>>()?
        } else {
            pairs.map(work).collect::<Result<_, _>>()?
        };

        let updates: Vec<ClientUpdate> = outcomes.iter().map(|o| o.update.clone()).collect();
        let mut next = fedavg_aggregate(&self.global, &updates)?;

        let tta_aggregated = tta_on(&next, &self.target_test)?;
        let (tta_patched, ge) = if cfg.group_effect {
            let patched = updates
                .iter()
                .map(|u| {
                    let mut m = self.global.clone();
                    m.add_scaled(&u.delta, 1.0)?;
                    Ok(tta_on(&m, &self.target_test)?)
                })
                .collect::<Result<Vec<f64>, FederationError>>()?;
            let ge = group_effect_from(&patched, tta_aggregated);
            (patched, Some(ge))
        } else {
            (Vec::new(), None)
        };

        let lambda_end = lambda_schedule(&cfg.clock(round, b_last)?);
        let (mut voted_samples, mut vote_ties, mut j_finetune) = (0, 0, None);
        if let Some(size) = flags.voting {
            let n = size.resolve(self.target_train.len());
            let idx = sample_indices(self.target_train.len(), &mut self.server_rng, n)?;
            let x = self.target_train.rows(&idx);
            let locals: Vec<Model> = outcomes.iter().map(|o| o.local.clone()).collect();
            let vote = federated_vote(&locals, x.view(), &mut self.server_rng)?;
            j_finetune =
                fine_tune_global(&mut next, &mut self.global_opt, x.view(), &vote.labels, lambda_end, cfg.lr, cfg.batch_size)?;
            voted_samples = n;
            vote_ties = vote.ties;
        }
        if !next.is_finite() {
            return Err(FederationError::NonFiniteLoss);
        }
        let tta_global = if flags.voting.is_some() { tta_on(&next, &self.target_test)? } else { tta_aggregated };

        let mean = |v: Vec<f64>| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
        let logs: Vec<&ClientLog> = outcomes.iter().map(|o| &o.log).collect();
        let record = RoundRecord {
            variant: flags.tag.to_string(),
            replicate: 0,
            round,
            tta_global,
            tta_aggregated,
            tta_patched,
            ge,
            j_cls: mean(logs.iter().flat_map(|l| l.cls_losses.iter().copied()).collect()).unwrap_or(f64::NAN),
            j_dis: mean(logs.iter().flat_map(|l| l.dis_losses.iter().copied()).collect()),
            j_mmd: mean(logs.iter().flat_map(|l| l.mmd_losses.iter().copied()).collect()),
            j_finetune,
            lambda_p: lambda_end,
            voted_samples,
            vote_ties,
            dis_packets: logs.iter().map(|l| l.dis_packets).sum(),
            mmd_packets: logs.iter().map(|l| l.mmd_packets).sum(),
        };
        self.global = next;
        self.round += 1;
        Ok(record)
    }
}
