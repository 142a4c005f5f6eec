//! Round orchestration: client sampling, local updates against a frozen
//! bank snapshot, weighted aggregation of the shared parameters, and bank
//! maintenance.
//!
//! This module only talks to the task head through its generic interface
//! (`forward`, `loss`, `evaluate`). Clients receive their own samples and a
//! read-only bank; they hand back parameters, one spectral token, retrieval
//! counts and metrics.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{barycenter, BankConfig, BankError, KnowledgeBank, RetrievalLog, RetrievalResult};
use crate::fusion::{init_suffix, FusionConfig, FusionParams, FusionVars};
use crate::models::{Backbone, BackboneConfig, HeadConfig, HeadVars, ModelError, TaskHead};
use crate::rng::{stream, Stream};
use crate::spectral::{SpectralError, SpectralToken, TokenizerParams, TokenizerVars, DEFAULT_CUTOFF};
use crate::synthdata::{self, DataConfig, DataError, Dataset, ModalityMode, Sample};
use crate::tensor::{self, sgd_step, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid federation configuration: {0}")]
    Config(String),
    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<FederationError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, FederationError>;

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FederationError::Config(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub hidden: usize,
    pub bands: usize,
    pub sectors: usize,
    pub cutoff: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            bands: 4,
            sectors: 8,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub tokenizer: TokenizerConfig,
    pub fusion: FusionConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Cosine top-k from the bank.
    TopK,
    /// The mean of every prototype in the bank.
    BankMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionConfig {
    Dirichlet { gamma: f64 },
    Modality { mode: ModalityMode },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub participation_ratio: f64,
    pub local_epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub top_k: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub retrieval: RetrievalMode,
    pub partition: PartitionConfig,
    /// Share of each client shard held out for per-round metrics.
    pub test_fraction: f64,
    pub bank: BankConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 4,
            rounds: 30,
            participation_ratio: 1.0,
            local_epochs: 2,
            lr: 0.05,
            lambda: 0.1,
            top_k: 2,
            batch_size: 16,
            seed: 0,
            retrieval: RetrievalMode::TopK,
            partition: PartitionConfig::Dirichlet { gamma: 0.5 },
            test_fraction: 0.2,
            bank: BankConfig::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return config_err("num_clients must be at least 1");
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return config_err(format!("participation_ratio must lie in (0, 1], got {}", self.participation_ratio));
        }
        if self.local_epochs == 0 {
            return config_err("local_epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config_err(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.top_k == 0 {
            return config_err("top_k must be at least 1");
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return config_err(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        self.bank.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.federation.validate()?;
        let p = self.model.backbone.patch_size;
        if p == 0 || self.data.height % p != 0 || self.data.width % p != 0 {
            return config_err(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.data.height, self.data.width
            ));
        }
        if self.model.head.sr_scale != self.data.hr_scale {
            return config_err("model.head.sr_scale must equal data.hr_scale");
        }
        if self.model.head.num_classes != self.data.num_classes {
            return config_err("model.head.num_classes must equal data.num_classes");
        }
        if let Some(h) = self.model.fusion.head_dim {
            if h == 0 {
                return config_err("fusion head_dim must be positive");
            }
        }
        Ok(())
    }
}

/// Parameters aggregated across clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    pub backbone: Backbone,
    pub tokenizer: TokenizerParams,
    pub fusion: FusionParams,
}

impl SharedParams {
    pub fn init(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let m = &config.model;
        let d = &config.data;
        let backbone = Backbone::init(&m.backbone, d.height, d.width, 1, &mut stream(seed, Stream::Init, 0, 0))?;
        let t = &m.tokenizer;
        let tokenizer = TokenizerParams::init(t.hidden, backbone.dim, t.bands, t.sectors, t.cutoff, &mut stream(seed, Stream::Init, 0, 1))?;
        let fusion = FusionParams::init(m.fusion.clone(), backbone.dim, &mut stream(seed, Stream::Init, 0, 2));
        Ok(Self {
            backbone,
            tokenizer,
            fusion,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.backbone.tensors();
        v.extend(self.tokenizer.tensors());
        v.extend(self.fusion.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.tensors_mut();
        v.extend(self.tokenizer.tensors_mut());
        v.extend(self.fusion.tensors_mut());
        v
    }
}

/// Element-wise `Σ_k (n_k/N)·p_k`, accumulated in the given client order.
pub fn aggregate_tensors(updates: &[Vec<&Tensor>], weights: &[f64]) -> Result<Vec<Tensor>> {
    if updates.is_empty() || updates.len() != weights.len() {
        return Err(TensorError::Contract(format!("{} updates for {} weights", updates.len(), weights.len())).into());
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(TensorError::Contract("aggregation weights must be positive".into()).into());
    }
    let total: f64 = weights.iter().sum();
    let first = &updates[0];
    for (k, u) in updates.iter().enumerate() {
        if u.len() != first.len() || u.iter().zip(first).any(|(a, b)| a.shape() != b.shape()) {
            return Err(TensorError::Contract(format!("update {k} is structurally different from update 0")).into());
        }
    }
    let mut out = Vec::with_capacity(first.len());
    for (ti, template) in first.iter().enumerate() {
        let mut acc = vec![0.0; template.numel()];
        for (u, &w) in updates.iter().zip(weights) {
            let w = w / total;
            for (a, &x) in acc.iter_mut().zip(u[ti].data()) {
                *a += w * x;
            }
        }
        out.push(Tensor::new(template.shape().to_vec(), acc)?.with_requires_grad(template.requires_grad()));
    }
    Ok(out)
}

/// Weighted average of shared parameter sets; heads and suffix tokens are
/// not part of [`SharedParams`] and never move.
pub fn aggregate_backbones(updates: &[&SharedParams], weights: &[f64]) -> Result<SharedParams> {
    let first = updates
        .first()
        .ok_or_else(|| FederationError::Config("aggregation needs at least one update".into()))?;
    let lists: Vec<Vec<&Tensor>> = updates.iter().map(|u| u.tensors()).collect();
    let averaged = aggregate_tensors(&lists, weights)?;
    let mut out = (*first).clone();
    for (dst, src) in out.tensors_mut().into_iter().zip(averaged) {
        *dst = src;
    }
    Ok(out)
}

/// `⌈ratio·K⌉` distinct clients, uniform without replacement, in id order.
pub fn sample_clients<R: Rng + ?Sized>(num_clients: usize, ratio: f64, rng: &mut R) -> Vec<usize> {
    let m = ((ratio * num_clients as f64).ceil() as usize).clamp(1, num_clients.max(1));
    if m >= num_clients {
        return (0..num_clients).collect();
    }
    let mut ids = rand::seq::index::sample(rng, num_clients, m).into_vec();
    ids.sort_unstable();
    ids
}

/// `‖s − s̄_g‖²` with the barycenter of the retrieved prototypes held
/// constant.
pub fn spalign_loss(tape: &mut Tape, s: Var, retrieved: &RetrievalResult) -> tensor::Result<Var> {
    if retrieved.k() == 0 {
        return Err(TensorError::Contract("spalign needs at least one prototype".into()));
    }
    let bary = barycenter(retrieved);
    let target = tape.constant(&[1, bary.len()], bary)?;
    tape.squared_distance(s, target)
}

/// One sample with its parameter-independent inputs precomputed.
#[derive(Clone, Debug)]
pub struct Prepared<'a> {
    pub sample: &'a Sample,
    pub features: Tensor,
    pub patches: Tensor,
}

/// Spectral features and patch matrices for a whole dataset.
pub fn prepare<'a>(dataset: &'a Dataset, shared: &SharedParams) -> Result<Vec<Prepared<'a>>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                sample: s,
                features: shared.tokenizer.features(&s.image)?.with_requires_grad(false),
                patches: shared.backbone.patchify(&s.image)?.with_requires_grad(false),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: usize,
    /// Training indices into the dataset.
    pub shard: Vec<usize>,
    /// Held-out indices for per-round metrics.
    pub test: Vec<usize>,
    /// Training samples per modality.
    pub modality_mix: Vec<usize>,
    pub head: TaskHead,
    pub suffix: Option<Tensor>,
    /// Local copy of the shared parameters after the last update.
    pub shared: SharedParams,
}

impl ClientState {
    pub fn n_k(&self) -> usize {
        self.shard.len()
    }
}

/// Everything a client sends back to the server after one round.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub n_k: usize,
    pub shared: SharedParams,
    pub token: SpectralToken,
    pub log: RetrievalLog,
    pub metrics: Vec<(&'static str, f64)>,
}

/// Per-client training knobs, fixed for a round.
#[derive(Clone, Copy, Debug)]
pub struct LocalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub top_k: usize,
    pub batch_size: usize,
    pub retrieval: RetrievalMode,
    pub seed: u64,
    pub round: usize,
}

impl LocalConfig {
    pub fn from_federation(cfg: &FederationConfig, round: usize) -> Self {
        Self {
            epochs: cfg.local_epochs,
            lr: cfg.lr,
            lambda: cfg.lambda,
            top_k: cfg.top_k,
            batch_size: cfg.batch_size,
            retrieval: cfg.retrieval,
            seed: cfg.seed,
            round,
        }
    }
}

fn retrieve(bank: &KnowledgeBank, mode: RetrievalMode, query: &[f64], k: usize) -> Result<RetrievalResult> {
    if bank.is_empty() {
        return Ok(RetrievalResult::cold_start(query, k));
    }
    Ok(match mode {
        RetrievalMode::TopK => bank.query(query, k)?,
        RetrievalMode::BankMean => bank.mean_embedding()?,
    })
}

struct Bound {
    backbone: Vec<Var>,
    tokenizer: TokenizerVars,
    fusion: FusionVars,
    head: HeadVars,
    suffix: Option<Var>,
}

impl Bound {
    fn new(tape: &mut Tape, shared: &SharedParams, head: &TaskHead, suffix: Option<&Tensor>) -> Self {
        Self {
            backbone: shared.backbone.bind(tape),
            tokenizer: shared.tokenizer.bind(tape),
            fusion: shared.fusion.bind(tape),
            head: head.bind(tape),
            suffix: suffix.map(|s| tape.param(s)),
        }
    }
}

struct SampleOutput {
    loss: Var,
    prediction: Var,
    token: Var,
    retrieved: RetrievalResult,
}

/// Tokenize, retrieve, fuse, prompt, predict and score one sample.
fn forward_sample(
    tape: &mut Tape,
    b: &Bound,
    shared: &SharedParams,
    head: &TaskHead,
    item: &Prepared,
    bank: &KnowledgeBank,
    cfg: &LocalConfig,
) -> Result<SampleOutput> {
    let features = tape.param(&item.features);
    let s = shared.tokenizer.forward(tape, &b.tokenizer, features)?;
    let retrieved = retrieve(bank, cfg.retrieval, tape.value(s), cfg.top_k)?;
    let s_g = tape.constant(&[retrieved.k(), retrieved.dim()], retrieved.matrix())?;
    let patches = tape.param(&item.patches);
    let r = shared.backbone.forward(tape, &b.backbone, patches)?;
    let z = shared.fusion.fuse(tape, &b.fusion, r, s_g)?;
    let seq = shared.fusion.prompt(tape, &b.fusion, z, r, b.suffix)?;
    let prediction = head.forward(tape, &b.head, &seq)?;
    let mut loss = head.loss(tape, prediction, item.sample)?;
    if cfg.lambda > 0.0 {
        let align = spalign_loss(tape, s, &retrieved)?;
        let align = tape.scale(align, cfg.lambda);
        loss = tape.add(loss, align)?;
    }
    Ok(SampleOutput {
        loss,
        prediction,
        token: s,
        retrieved,
    })
}

/// Mean-of-losses minibatch step over `batch`; returns the batch loss and
/// the per-sample token values.
pub fn train_batch(
    client: &mut ClientState,
    batch: &[&Prepared],
    bank: &KnowledgeBank,
    cfg: &LocalConfig,
    log: &mut RetrievalLog,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, &client.shared, &client.head, client.suffix.as_ref());
    let mut total: Option<Var> = None;
    let mut tokens = Vec::with_capacity(batch.len());
    for item in batch {
        let out = forward_sample(&mut tape, &b, &client.shared, &client.head, item, bank, cfg)?;
        log.observe(&out.retrieved);
        tokens.push(tape.value(out.token).to_vec());
        total = Some(match total {
            Some(t) => tape.add(t, out.loss)?,
            None => out.loss,
        });
    }
    let total = total.ok_or_else(|| FederationError::Config("empty minibatch".into()))?;
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    tape.backward(loss)?;
    let value = tape.value(loss)[0];

    tape.accumulate_all(&b.backbone, client.shared.backbone.tensors_mut())?;
    tape.accumulate_all(&b.tokenizer.ids(), client.shared.tokenizer.tensors_mut())?;
    tape.accumulate_all(&b.fusion.ids(), client.shared.fusion.tensors_mut())?;
    tape.accumulate_all(&b.head.ids(), client.head.tensors_mut())?;
    if let (Some(v), Some(t)) = (b.suffix, client.suffix.as_mut()) {
        tape.accumulate_into(v, t)?;
    }
    let ClientState { shared, head, suffix, .. } = client;
    let params = shared.tensors_mut().into_iter().chain(head.tensors_mut()).chain(suffix.as_mut());
    sgd_step(params, cfg.lr)?;
    Ok((value, tokens))
}

/// Predictions for `items` without recording retrievals.
pub fn predict(client: &ClientState, items: &[&Prepared], bank: &KnowledgeBank, cfg: &LocalConfig) -> Result<Vec<Vec<f64>>> {
    items
        .iter()
        .map(|item| {
            let mut tape = Tape::new();
            let b = Bound::new(&mut tape, &client.shared, &client.head, client.suffix.as_ref());
            let out = forward_sample(&mut tape, &b, &client.shared, &client.head, item, bank, cfg)?;
            Ok(tape.value(out.prediction).to_vec())
        })
        .collect()
}

/// Task metrics of the client's current model on `items`.
pub fn evaluate_client(client: &ClientState, items: &[&Prepared], bank: &KnowledgeBank, cfg: &LocalConfig) -> Result<Vec<(&'static str, f64)>> {
    let preds = predict(client, items, bank, cfg)?;
    let pairs: Vec<(Vec<f64>, &Sample)> = preds.into_iter().zip(items.iter().map(|i| i.sample)).collect();
    Ok(client.head.evaluate(&pairs)?)
}

/// `E` epochs of shuffled minibatch SGD starting from the global shared
/// parameters. The uploaded token is the re-normalized mean of the final
/// epoch's per-sample tokens.
pub fn local_update(
    client: &mut ClientState,
    global: &SharedParams,
    train: &[&Prepared],
    test: &[&Prepared],
    bank: &KnowledgeBank,
    cfg: &LocalConfig,
) -> Result<ClientUpdate> {
    if train.is_empty() {
        return config_err(format!("client {} has no training samples", client.client_id));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return config_err("local_epochs and batch_size must be at least 1");
    }
    client.shared = global.clone();
    let mut rng = stream(cfg.seed, Stream::LocalShuffle, cfg.round as u64, client.client_id as u64);
    let mut log = RetrievalLog::new(bank.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_tokens = Vec::with_capacity(train.len());
    let mut final_loss = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let last = epoch + 1 == cfg.epochs;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, tokens) = train_batch(client, &batch, bank, cfg, &mut log)?;
            loss_sum += loss * batch.len() as f64;
            if last {
                final_tokens.extend(tokens);
            }
        }
        final_loss = loss_sum / train.len() as f64;
    }
    let dim = final_tokens[0].len();
    let mut mean = vec![0.0; dim];
    for t in &final_tokens {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= final_tokens.len() as f64);
    let mut token = SpectralToken::new(mean).normalized();
    token.source_client = Some(client.client_id);
    token.round = Some(cfg.round);

    let eval_items = if test.is_empty() { train } else { test };
    let mut metrics = vec![("train_loss", final_loss)];
    metrics.extend(evaluate_client(client, eval_items, bank, cfg)?);
    Ok(ClientUpdate {
        client_id: client.client_id,
        n_k: train.len(),
        shared: client.shared.clone(),
        token,
        log,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: usize,
    pub client_id: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub bank_size: usize,
    pub records: Vec<MetricRecord>,
}

impl RoundReport {
    /// Mean of `metric` over the participating clients.
    pub fn mean(&self, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self.records.iter().filter(|r| r.metric == metric).map(|r| r.value).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Full server-side state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Federation {
    pub config: ExperimentConfig,
    pub shared: SharedParams,
    pub clients: Vec<ClientState>,
    pub bank: KnowledgeBank,
    pub round: usize,
}

impl Federation {
    /// Partitions `dataset` and initializes global and per-client state.
    pub fn new(config: &ExperimentConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let fc = &config.federation;
        let seed = fc.seed;
        let k = fc.num_clients;
        let mut prng = stream(seed, Stream::Partition, 0, 0);
        let shards = match &fc.partition {
            PartitionConfig::Dirichlet { gamma } => synthdata::dirichlet_partition(&dataset.labels(), k, *gamma, &mut prng)?,
            PartitionConfig::Modality { mode } => synthdata::modality_partition(&dataset.modalities(), k, *mode)?,
        };
        let shared = SharedParams::init(config, seed)?;
        let mut clients = Vec::with_capacity(k);
        for (id, mut shard) in shards.into_iter().enumerate() {
            if shard.is_empty() {
                return config_err(format!("client {id} received an empty shard"));
            }
            shard.shuffle(&mut stream(seed, Stream::Split, id as u64, 0));
            let n_test = ((shard.len() as f64) * fc.test_fraction).floor() as usize;
            let n_test = n_test.min(shard.len() - 1);
            let test = shard.split_off(shard.len() - n_test);
            let mut modality_mix = vec![0; dataset.num_modalities];
            for &i in &shard {
                modality_mix[dataset.samples[i].modality] += 1;
            }
            let head = TaskHead::init(&config.model.head, &shared.backbone, &mut stream(seed, Stream::Init, id as u64 + 1, 3))?;
            let suffix_count = if config.model.fusion.uses_suffix() { config.model.fusion.suffix_count } else { 0 };
            let suffix = init_suffix(suffix_count, shared.backbone.dim, &mut stream(seed, Stream::Init, id as u64 + 1, 4));
            clients.push(ClientState {
                client_id: id,
                shard,
                test,
                modality_mix,
                head,
                suffix,
                shared: shared.clone(),
            });
        }
        Ok(Self {
            config: config.clone(),
            shared,
            clients,
            bank: KnowledgeBank::new(fc.bank.clone())?,
            round: 0,
        })
    }

    /// Metrics of every client's current model on its held-out split,
    /// without training or touching the bank.
    pub fn evaluate(&self, prepared: &[Prepared]) -> Result<Vec<MetricRecord>> {
        let local = LocalConfig::from_federation(&self.config.federation, self.round);
        let mut records = Vec::new();
        for client in &self.clients {
            let idx = if client.test.is_empty() { &client.shard } else { &client.test };
            let items: Vec<&Prepared> = idx.iter().map(|&i| &prepared[i]).collect();
            for (name, value) in evaluate_client(client, &items, &self.bank, &local)? {
                records.push(MetricRecord {
                    round: self.round,
                    client_id: client.client_id,
                    task: client.head.task().to_string(),
                    metric: name.to_string(),
                    value,
                });
            }
        }
        Ok(records)
    }

    /// One communication round. Clients run concurrently on `workers`
    /// threads; every server-side mutation happens afterwards in client-id
    /// order, so the result does not depend on `workers`.
    pub fn run_round(&mut self, prepared: &[Prepared], workers: usize) -> Result<RoundReport> {
        let fc = &self.config.federation;
        let round = self.round;
        let participants = sample_clients(
            self.clients.len(),
            fc.participation_ratio,
            &mut stream(fc.seed, Stream::ClientSampling, round as u64, 0),
        );
        let local = LocalConfig::from_federation(fc, round);
        let task = self.clients[0].head.task().to_string();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| FederationError::Config(format!("thread pool: {e}")))?;
        let (global, bank) = (&self.shared, &self.bank);
        let updates: Vec<Result<ClientUpdate>> = pool.install(|| {
            self.clients
                .par_iter_mut()
                .filter(|c| participants.binary_search(&c.client_id).is_ok())
                .map(|client| {
                    let pick = |idx: &[usize]| idx.iter().map(|&i| &prepared[i]).collect::<Vec<_>>();
                    let (train, test) = (pick(&client.shard), pick(&client.test));
                    let id = client.client_id;
                    local_update(client, global, &train, &test, bank, &local).map_err(|e| FederationError::Client {
                        round,
                        client: id,
                        source: Box::new(e),
                    })
                })
                .collect()
        });
        let updates = updates.into_iter().collect::<Result<Vec<_>>>()?;

        let params: Vec<&SharedParams> = updates.iter().map(|u| &u.shared).collect();
        let weights: Vec<f64> = updates.iter().map(|u| u.n_k as f64).collect();
        self.shared = aggregate_backbones(&params, &weights)?;

        for u in &updates {
            self.bank.record(&u.log)?;
        }
        self.bank.close_round();
        let tokens: Vec<SpectralToken> = updates.iter().map(|u| u.token.clone()).collect();
        self.bank.insert_and_project(&tokens)?;
        let window = self.bank.config().window;
        if (round + 1) % window == 0 {
            let removed = self.bank.prune(window);
            log::debug!("round {round}: pruned {removed} prototypes");
        }

        let records = updates
            .iter()
            .flat_map(|u| {
                let task = task.clone();
                u.metrics.iter().map(move |(name, value)| MetricRecord {
                    round,
                    client_id: u.client_id,
                    task: task.clone(),
                    metric: name.to_string(),
                    value: *value,
                })
            })
            .collect();
        self.round += 1;
        Ok(RoundReport {
            round,
            participants,
            bank_size: self.bank.len(),
            records,
        })
    }
}

/// Outcome of a complete experiment.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub federation: Federation,
    pub reports: Vec<RoundReport>,
}

impl ExperimentResult {
    /// Mean of `metric` over the clients of the last round.
    pub fn final_mean(&self, metric: &str) -> Option<f64> {
        self.reports.last().and_then(|r| r.mean(metric))
    }
}

/// Generates the dataset from `config.data` and the federation seed, then
/// runs every configured round.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<ExperimentResult> {
    config.validate()?;
    let dataset = synthdata::generate_dataset(&config.data, config.federation.seed)?;
    run_on_dataset(config, &dataset, workers)
}

pub fn run_on_dataset(config: &ExperimentConfig, dataset: &Dataset, workers: usize) -> Result<ExperimentResult> {
    let mut federation = Federation::new(config, dataset)?;
    let prepared = prepare(dataset, &federation.shared)?;
    let mut reports = Vec::with_capacity(config.federation.rounds);
    for _ in 0..config.federation.rounds {
        reports.push(federation.run_round(&prepared, workers)?);
    }
    Ok(ExperimentResult { federation, reports })
}
