use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::message::{Direction, RoundMessage};
use super::server::{SerqConfig, ServerState};
use super::site::{evaluate, train_step, Route, SiteSetup, SiteState};
use super::transport::{Peer, Transport, TransportMode, WireRecord, WireStats};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{Indicator, IndicatorKind, ModelConfig, ParamTree, Partition, StModel, VideoClip};
use crate::synthdata::{BatchSampler, Dataset};
use crate::tensor::{AdamW, AdamWConfig, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    FedSt,
    FedAvg,
    LocalOnly,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedSt => "fedst",
            Method::FedAvg => "fedavg",
            Method::LocalOnly => "local",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedst" => Ok(Method::FedSt),
            "fedavg" => Ok(Method::FedAvg),
            "local" | "local_only" => Ok(Method::LocalOnly),
            other => Err(Error::config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Local optimizer steps per round.
    pub local_steps: usize,
    pub rounds: usize,
    pub seed: u64,
    /// Weight sites by sample count instead of uniformly.
    pub weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 2,
            local_steps: 20,
            rounds: 10,
            seed: 0,
            weighted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            batch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub serq: SerqConfig,
    pub indicator: IndicatorKind,
    pub transport: TransportMode,
    /// Sites trained at once within a round.
    pub parallelism: usize,
    /// Evaluate on the site test splits every this many rounds (0: only at
    /// the end).
    pub eval_every: usize,
    pub capture_wire: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            serq: SerqConfig::default(),
            indicator: IndicatorKind::TextHash,
            transport: TransportMode::InProcess,
            parallelism: 1,
            eval_every: 1,
            capture_wire: false,
        }
    }
}

/// One participating site's data.
#[derive(Debug, Clone)]
pub struct SiteData {
    pub id: u32,
    pub name: String,
    pub text: String,
    /// Drives the site's batch order together with the run seed.
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub sites: Vec<SiteData>,
    pub synth: Arc<Dataset>,
}

#[derive(Debug, Clone)]
pub struct RoundLog {
    pub round: usize,
    pub reports: Vec<MetricReport>,
}

impl RoundLog {
    pub fn mean_dice(&self) -> f64 {
        self.reports.iter().map(MetricReport::mean_dice).sum::<f64>() / self.reports.len() as f64
    }
}

pub struct RunOutput {
    pub method: Method,
    /// Final personalized (or local) model of every site, in site order.
    pub site_models: Vec<ParamTree>,
    /// Server model: aggregated shared set with the server's private set.
    pub global: ParamTree,
    pub log: Vec<RoundLog>,
    pub wire: WireStats,
    pub captured: Vec<WireRecord>,
    pub server_steps: u64,
    pub site_iterations: Vec<u64>,
    /// Whether a transport was ever constructed.
    pub used_transport: bool,
}

impl RunOutput {
    pub fn final_reports(&self) -> &[MetricReport] {
        self.log.last().map(|l| l.reports.as_slice()).unwrap_or(&[])
    }

    pub fn final_mean_dice(&self) -> f64 {
        self.log.last().map(RoundLog::mean_dice).unwrap_or(f64::NAN)
    }
}

/// Batch-order seed of a site.
pub fn site_shuffle_seed(run_seed: u64, site_seed: u64) -> u64 {
    run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ site_seed.rotate_left(17)
}

pub fn site_indicator(kind: IndicatorKind, text: &str, site_id: u32, seed: u64, dim: usize) -> Result<Indicator> {
    Indicator::build(kind, text, site_id as usize, seed, dim)
}

/// Spatial-route training on the synthetic set. Every method starts from
/// the result.
pub fn pretrain(model: &StModel, synth: &Dataset, cfg: &PretrainConfig, indicator: &Indicator, seed: u64) -> Result<ParamTree> {
    let mut params = model.init_params(seed);
    if cfg.steps == 0 {
        return Ok(params);
    }
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr));
    let mut sampler = BatchSampler::new(synth.len(), seed ^ 0x9e7a)?;
    for _ in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch);
        let clips: Vec<&VideoClip> = idx.iter().map(|&i| &synth.clips[i]).collect();
        train_step(model, &mut params, &mut opt, &clips, indicator, Route::Spatial)?;
    }
    Ok(params)
}

/// Element-wise mean of full trees (same paths and shapes); partitions are
/// taken from the first tree.
pub fn average_trees(trees: &[ParamTree]) -> Result<ParamTree> {
    let first = trees.first().ok_or_else(|| Error::contract("no trees to average"))?;
    let mut out = ParamTree::new();
    for (path, p) in first.iter() {
        let mut data = vec![0.0; p.tensor.numel()];
        for t in trees {
            let other = t.tensor(path)?;
            if other.shape() != p.tensor.shape() {
                return Err(Error::dim(format!("{path}: shapes differ between trees")));
            }
            for (d, v) in data.iter_mut().zip(other.data()) {
                *d += v;
            }
        }
        let k = trees.len() as f64;
        data.iter_mut().for_each(|v| *v /= k);
        out.insert(path, Tensor::new(p.tensor.shape().to_vec(), data)?, p.partition);
    }
    Ok(out)
}

fn validate(cfg: &FederationConfig, work: &Workload) -> Result<()> {
    cfg.model.validate()?;
    if work.sites.is_empty() {
        return Err(Error::config("no sites"));
    }
    if cfg.train.batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let ids: BTreeSet<u32> = work.sites.iter().map(|s| s.id).collect();
    if ids.len() != work.sites.len() {
        return Err(Error::config("duplicate site ids"));
    }
    for (name, v) in [("lambda2", cfg.serq.lambda2), ("lambda3", cfg.serq.lambda3), ("mu", cfg.serq.mu)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
        }
    }
    if cfg.serq.seg_weight < 0.0 {
        return Err(Error::config("serq seg_weight must be non-negative"));
    }
    for s in &work.sites {
        if s.train.is_empty() || s.test.is_empty() {
            return Err(Error::data(format!("site {} has an empty split", s.name)));
        }
    }
    Ok(())
}

fn build_sites(cfg: &FederationConfig, work: &Workload, model: &Arc<StModel>, init: &ParamTree) -> Result<Vec<SiteState>> {
    work.sites
        .iter()
        .map(|s| {
            let indicator = site_indicator(cfg.indicator, &s.text, s.id, cfg.train.seed, cfg.model.indicator_dim)?;
            SiteState::new(
                SiteSetup {
                    site_id: s.id,
                    name: s.name.clone(),
                    indicator,
                    train: s.train.clone(),
                    test: s.test.clone(),
                },
                Arc::clone(model),
                init.clone(),
                AdamWConfig::with_lr(cfg.train.lr),
                cfg.train.batch,
                cfg.train.local_steps,
                site_shuffle_seed(cfg.train.seed, s.seed),
            )
        })
        .collect()
}

fn should_eval(cfg: &FederationConfig, round: usize) -> bool {
    round == cfg.train.rounds || (cfg.eval_every > 0 && round % cfg.eval_every == 0)
}

/// Runs one method from the shared initialization `init`.
pub fn run(method: Method, cfg: &FederationConfig, work: &Workload, init: &ParamTree) -> Result<RunOutput> {
    match method {
        Method::FedSt => run_federation(cfg, work, init),
        Method::FedAvg => run_fedavg(cfg, work, init),
        Method::LocalOnly => run_local_only(cfg, work, init),
    }
}

/// Plain federated averaging: every parameter shared, no server training.
pub fn run_fedavg(cfg: &FederationConfig, work: &Workload, init: &ParamTree) -> Result<RunOutput> {
    let mut all_shared = init.clone();
    all_shared.make_all_shared();
    let cfg = FederationConfig {
        serq: SerqConfig {
            enabled: false,
            ..cfg.serq.clone()
        },
        ..cfg.clone()
    };
    let mut out = federate(&cfg, work, &all_shared)?;
    out.method = Method::FedAvg;
    Ok(out)
}

/// Each site trains alone for the same number of steps; nothing is sent.
pub fn run_local_only(cfg: &FederationConfig, work: &Workload, init: &ParamTree) -> Result<RunOutput> {
    validate(cfg, work)?;
    let model = Arc::new(StModel::new(cfg.model.clone())?);
    let mut sites = build_sites(cfg, work, &model, init)?;
    let mut log = Vec::new();
    for round in 1..=cfg.train.rounds {
        for site in &mut sites {
            for _ in 0..cfg.train.local_steps {
                site.step()?;
            }
        }
        if should_eval(cfg, round) {
            log.push(RoundLog {
                round,
                reports: sites.iter().map(|s| s.evaluate(round)).collect::<Result<_>>()?,
            });
        }
    }
    if cfg.train.rounds == 0 {
        log.push(RoundLog {
            round: 0,
            reports: sites.iter().map(|s| s.evaluate(0)).collect::<Result<_>>()?,
        });
    }
    let site_models: Vec<ParamTree> = sites.iter().map(|s| s.params.clone()).collect();
    Ok(RunOutput {
        method: Method::LocalOnly,
        global: average_trees(&site_models)?,
        site_models,
        log,
        wire: WireStats::default(),
        captured: Vec::new(),
        server_steps: 0,
        site_iterations: sites.iter().map(|s| s.iterations).collect(),
        used_transport: false,
    })
}

/// The full protocol: private query and channel-selection parameters stay
/// on the sites, the rest is averaged, and the server runs the synthetic
/// quantification and synchronization steps every round.
pub fn run_federation(cfg: &FederationConfig, work: &Workload, init: &ParamTree) -> Result<RunOutput> {
    federate(cfg, work, init)
}

fn local_rounds(sites: &mut [SiteState], round: u32, inbox: &[BTreeMap<String, Tensor>], parallelism: usize) -> Result<Vec<RoundMessage>> {
    if parallelism <= 1 {
        return sites.iter_mut().zip(inbox).map(|(s, g)| s.local_round(round, g)).collect();
    }
    let mut out = Vec::with_capacity(sites.len());
    for (chunk, gammas) in sites.chunks_mut(parallelism).zip(inbox.chunks(parallelism)) {
        let results: Vec<Result<RoundMessage>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter_mut()
                .zip(gammas)
                .map(|(s, g)| scope.spawn(move || s.local_round(round, g)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::protocol("site worker panicked"))))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn federate(cfg: &FederationConfig, work: &Workload, init: &ParamTree) -> Result<RunOutput> {
    validate(cfg, work)?;
    let model = Arc::new(StModel::new(cfg.model.clone())?);
    let mut sites = build_sites(cfg, work, &model, init)?;
    let ids: Vec<u32> = sites.iter().map(|s| s.site_id).collect();
    let private: BTreeSet<String> = init.paths_in(Partition::Private).into_iter().collect();
    let mut transport = Transport::new(cfg.transport, private)?;
    if cfg.capture_wire {
        transport.enable_capture();
    }
    let synth_ind = site_indicator(cfg.indicator, &work.synth.meta.text, u32::MAX, cfg.train.seed, cfg.model.indicator_dim)
        .unwrap_or_else(|_| Indicator::zeros(cfg.model.indicator_dim));
    let mut server = ServerState::new(
        Arc::clone(&model),
        init,
        Arc::clone(&work.synth),
        synth_ind,
        cfg.serq.clone(),
        cfg.train.seed ^ 0x53e7,
    )?;

    let distribute = |transport: &mut Transport, server: &ServerState, round: u32| -> Result<()> {
        let gamma = server.shared();
        for &id in &ids {
            transport.send(
                Peer::Server,
                Peer::Site(id),
                &RoundMessage {
                    direction: Direction::ServerToSite,
                    round,
                    site_id: id,
                    sample_count: 0,
                    payload: gamma.clone(),
                },
            )?;
        }
        Ok(())
    };
    let receive = |transport: &mut Transport, round: u32| -> Result<Vec<BTreeMap<String, Tensor>>> {
        ids.iter()
            .map(|&id| {
                let m = transport.recv(Peer::Server, Peer::Site(id))?;
                if m.direction != Direction::ServerToSite || m.round != round || m.site_id != id {
                    return Err(Error::protocol(format!("site {id} received an unexpected message")));
                }
                Ok(m.payload)
            })
            .collect()
    };

    let mut log = Vec::new();
    distribute(&mut transport, &server, 0)?;
    for t in 0..cfg.train.rounds {
        let round = t as u32;
        let inbox = receive(&mut transport, round)?;
        let outgoing = local_rounds(&mut sites, round, &inbox, cfg.parallelism)?;
        for m in &outgoing {
            transport.send(Peer::Site(m.site_id), Peer::Server, m)?;
        }
        let received = ids
            .iter()
            .map(|&id| transport.recv(Peer::Site(id), Peer::Server))
            .collect::<Result<Vec<_>>>()?;
        server.absorb(&received, &ids, round, cfg.train.weighted)?;
        if cfg.serq.enabled {
            server.serq_round()?;
        }
        distribute(&mut transport, &server, round + 1)?;
        if should_eval(cfg, t + 1) && t + 1 < cfg.train.rounds {
            let gamma = server.shared();
            let reports = sites
                .iter()
                .map(|s| {
                    let mut merged = s.params.clone();
                    merged.load_shared(&gamma)?;
                    evaluate(&model, &merged, &s.test, &s.indicator, t + 1, &s.name)
                })
                .collect::<Result<Vec<_>>>()?;
            log.push(RoundLog { round: t + 1, reports });
        }
    }
    // final merge: latest shared set with each site's own private set
    let last = cfg.train.rounds as u32;
    let inbox = receive(&mut transport, last)?;
    for (s, g) in sites.iter_mut().zip(&inbox) {
        s.params.load_shared(g)?;
    }
    log.push(RoundLog {
        round: cfg.train.rounds,
        reports: sites.iter().map(|s| s.evaluate(cfg.train.rounds)).collect::<Result<_>>()?,
    });

    Ok(RunOutput {
        method: Method::FedSt,
        site_models: sites.iter().map(|s| s.params.clone()).collect(),
        global: server.global.clone(),
        log,
        wire: transport.stats(),
        captured: transport.take_captured(),
        server_steps: server.serq_steps,
        site_iterations: sites.iter().map(|s| s.iterations).collect(),
        used_transport: true,
    })
}

/// Inference model for a site outside the federation: the mean of the
/// final site models' full trees.
pub fn global_model(out: &RunOutput) -> Result<ParamTree> {
    average_trees(&out.site_models)
}
