use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::message::RoundMessage;
use super::site::{apply_grads, batch_loss, Route};
use crate::error::{Error, Result};
use crate::model::{Binder, Indicator, ParamTree, Partition, StModel, VideoClip};
use crate::synthdata::{BatchSampler, Dataset};
use crate::tensor::{AdamW, AdamWConfig, Graph, Tensor, Var};

const D_SY: &str = "serq.d_sy";

/// Pairwise sum; the split points depend only on the length.
fn pairwise(values: &[&[f64]], out: &mut [f64]) {
    match values.len() {
        0 => out.iter_mut().for_each(|v| *v = 0.0),
        1 => out.copy_from_slice(values[0]),
        n => {
            let mid = n / 2;
            let mut right = vec![0.0; out.len()];
            pairwise(&values[..mid], out);
            pairwise(&values[mid..], &mut right);
            for (o, r) in out.iter_mut().zip(right) {
                *o += r;
            }
        }
    }
}

/// Per-path mean of the site payloads of one round. Sites are ordered by id
/// before summation, so the result does not depend on arrival order. With
/// `weighted`, sites count in proportion to their sample counts.
pub fn aggregate(
    messages: &[RoundMessage],
    expected_sites: &[u32],
    round: u32,
    weighted: bool,
) -> Result<BTreeMap<String, Tensor>> {
    let mut sorted: Vec<&RoundMessage> = messages.iter().collect();
    sorted.sort_by_key(|m| m.site_id);
    let mut want = expected_sites.to_vec();
    want.sort_unstable();
    let got: Vec<u32> = sorted.iter().map(|m| m.site_id).collect();
    if got != want {
        return Err(Error::protocol(format!("round {round}: expected sites {want:?}, got {got:?}")));
    }
    if let Some(m) = sorted.iter().find(|m| m.round != round) {
        return Err(Error::protocol(format!(
            "site {} sent round {} during round {round}",
            m.site_id, m.round
        )));
    }
    let first = sorted.first().ok_or_else(|| Error::protocol("no messages to aggregate"))?;
    for m in &sorted[1..] {
        if m.payload.len() != first.payload.len() || m.payload.keys().any(|k| !first.payload.contains_key(k)) {
            return Err(Error::protocol(format!("site {} sent a different path set", m.site_id)));
        }
    }
    let total: f64 = sorted.iter().map(|m| m.sample_count as f64).sum();
    if weighted && total == 0.0 {
        return Err(Error::protocol("weighted aggregation with zero samples"));
    }
    let mut out = BTreeMap::new();
    for (path, t0) in &first.payload {
        let scaled: Vec<Vec<f64>>;
        let rows: Vec<&[f64]> = if weighted {
            scaled = sorted
                .iter()
                .map(|m| {
                    let w = m.sample_count as f64 / total;
                    m.payload[path].data().iter().map(|v| v * w).collect()
                })
                .collect();
            scaled.iter().map(Vec::as_slice).collect()
        } else {
            sorted.iter().map(|m| m.payload[path].data()).collect()
        };
        for (m, r) in sorted.iter().zip(&rows) {
            if m.payload[path].shape() != t0.shape() || r.len() != t0.numel() {
                return Err(Error::protocol(format!("{path}: shape differs at site {}", m.site_id)));
            }
        }
        let mut sum = vec![0.0; t0.numel()];
        pairwise(&rows, &mut sum);
        if !weighted {
            let k = sorted.len() as f64;
            sum.iter_mut().for_each(|v| *v /= k);
        }
        out.insert(path.clone(), Tensor::new(t0.shape().to_vec(), sum)?);
    }
    Ok(out)
}

/// Joins the aggregated shared set with the server's own private set.
pub fn assemble_global(gamma: &BTreeMap<String, Tensor>, rho: &BTreeMap<String, Tensor>) -> Result<ParamTree> {
    ParamTree::assemble(gamma, rho)
}

/// `(1 - mu) * f_hat + mu * f_new`.
pub fn ema_update(f_hat: &Tensor, f_new: &Tensor, mu: f64) -> Result<Tensor> {
    if f_hat.shape() != f_new.shape() {
        return Err(Error::contract(format!(
            "moving-average shape {:?} vs new feature {:?}",
            f_hat.shape(),
            f_new.shape()
        )));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::contract(format!("mu {mu} outside [0, 1]")));
    }
    let data = f_hat.data().iter().zip(f_new.data()).map(|(a, b)| (1.0 - mu) * a + mu * b).collect();
    Tensor::new(f_hat.shape().to_vec(), data)
}

/// `lambda2 * mean((f_sy - d - f_hat)^2)`: distance between the instrument
/// representation and the global feature average.
pub fn quantification_loss(g: &mut Graph, f_sy: Var, d: Var, f_hat: Var, lambda2: f64) -> Result<Var> {
    let i_sy = g.sub(f_sy, d)?;
    let q = g.mse_mean(i_sy, f_hat)?;
    g.scale(q, lambda2)
}

/// `lambda3 * mean((f_g - i_sy)^2)`.
pub fn synchronization_loss(g: &mut Graph, f_g: Var, i_sy: Var, lambda3: f64) -> Result<Var> {
    let q = g.mse_mean(f_g, i_sy)?;
    g.scale(q, lambda3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerqConfig {
    pub enabled: bool,
    pub batches_per_round: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub mu: f64,
    /// Weight of the segmentation term in both server objectives.
    pub seg_weight: f64,
}

impl Default for SerqConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            batches_per_round: 10,
            batch: 2,
            lr: 1e-4,
            lambda2: 0.3,
            lambda3: 0.3,
            mu: 0.5,
            seg_weight: 1.0,
        }
    }
}

/// Global model, pre-trained spatial model, domain descriptor and the
/// moving average of global features.
pub struct ServerState {
    pub model: Arc<StModel>,
    /// Full global model: aggregated shared set plus the server's private set.
    pub global: ParamTree,
    pub pretrained: ParamTree,
    /// Shares the feature shape `[h * w, c]`.
    pub d_sy: Tensor,
    pub f_hat: Option<Tensor>,
    pub cfg: SerqConfig,
    pub indicator: Indicator,
    rho: BTreeMap<String, Tensor>,
    opt_pre: AdamW,
    opt_global: AdamW,
    synth: Arc<Dataset>,
    sampler: BatchSampler,
    pub serq_steps: u64,
}

impl ServerState {
    pub fn new(
        model: Arc<StModel>,
        init: &ParamTree,
        synth: Arc<Dataset>,
        indicator: Indicator,
        cfg: SerqConfig,
        seed: u64,
    ) -> Result<Self> {
        let mc = model.config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_sy = Tensor::randn(&[mc.tokens(), mc.channels], 0.01, &mut rng);
        let sampler = BatchSampler::new(synth.len().max(1), seed ^ 0x5e39)?;
        Ok(Self {
            model,
            global: init.clone(),
            pretrained: init.clone(),
            d_sy,
            f_hat: None,
            rho: init.subset(Partition::Private),
            opt_pre: AdamW::new(AdamWConfig::with_lr(cfg.lr)),
            opt_global: AdamW::new(AdamWConfig::with_lr(cfg.lr)),
            cfg,
            indicator,
            synth,
            sampler,
            serq_steps: 0,
        })
    }

    pub fn rho(&self) -> &BTreeMap<String, Tensor> {
        &self.rho
    }

    /// Aggregates the site messages and rebuilds the global model.
    pub fn absorb(&mut self, messages: &[RoundMessage], sites: &[u32], round: u32, weighted: bool) -> Result<()> {
        let gamma = aggregate(messages, sites, round, weighted)?;
        self.global = assemble_global(&gamma, &self.rho)?;
        Ok(())
    }

    pub fn shared(&self) -> BTreeMap<String, Tensor> {
        self.global.shared()
    }

    /// Batch-mean post-selection feature of the global model.
    pub fn global_features(&self, clips: &[&VideoClip]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.global);
        let (_, feat) = batch_loss(&mut g, &mut b, &self.model, clips, &self.indicator, Route::Full)?;
        Ok(g.value(feat).clone())
    }

    /// Batch-mean spatial feature of the pre-trained model minus the domain
    /// descriptor: the instrument representation.
    pub fn instrument_representation(&self, clips: &[&VideoClip]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.pretrained);
        let (_, feat) = batch_loss(&mut g, &mut b, &self.model, clips, &self.indicator, Route::Spatial)?;
        let d = g.constant(&self.d_sy);
        let i_sy = g.sub(feat, d)?;
        Ok(g.value(i_sy).clone())
    }

    /// One step on the pre-trained model and the domain descriptor with the
    /// global model held fixed. Returns the loss.
    pub fn serq_eq(&mut self, clips: &[&VideoClip]) -> Result<f64> {
        let f_hat = self
            .f_hat
            .as_ref()
            .ok_or_else(|| Error::contract("feature average not initialized before quantification"))?;
        if f_hat.shape() != self.d_sy.shape() {
            return Err(Error::contract(format!(
                "feature average shape {:?} drifted from {:?}",
                f_hat.shape(),
                self.d_sy.shape()
            )));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&self.pretrained);
        let (seg, f_sy) = batch_loss(&mut g, &mut b, &self.model, clips, &self.indicator, Route::Spatial)?;
        let d = g.param(&self.d_sy);
        let target = g.constant(f_hat);
        let q = quantification_loss(&mut g, f_sy, d, target, self.cfg.lambda2)?;
        let seg = g.scale(seg, self.cfg.seg_weight)?;
        let loss = g.add(seg, q)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];

        let vars = b.into_vars();
        self.pretrained.zero_grad();
        self.pretrained.accumulate_grads(&g, &vars)?;
        self.d_sy.zero_grad();
        self.d_sy.accumulate_grad(g.grad(d).expect("descriptor is on the loss path"))?;
        let paths: Vec<String> = vars.keys().filter(|p| g.grad(vars[*p]).is_some()).cloned().collect();
        let mut targets = self.pretrained.select_mut(&paths);
        targets.push((D_SY, &mut self.d_sy));
        self.opt_pre.step(targets)?;
        self.pretrained.zero_grad();
        self.d_sy.zero_grad();
        self.serq_steps += 1;
        Ok(value)
    }

    /// One step on the shared part of the global model toward the synthetic
    /// instrument representation, with the pre-trained model and descriptor
    /// held fixed. Returns the loss.
    pub fn serq_sc(&mut self, clips: &[&VideoClip]) -> Result<f64> {
        let target = self.instrument_representation(clips)?;
        let mut g = Graph::new();
        let mut b = Binder::new(&self.global);
        let (seg, f_g) = batch_loss(&mut g, &mut b, &self.model, clips, &self.indicator, Route::Full)?;
        let t = g.constant(&target);
        let q = synchronization_loss(&mut g, f_g, t, self.cfg.lambda3)?;
        let seg = g.scale(seg, self.cfg.seg_weight)?;
        let loss = g.add(seg, q)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        let vars: BTreeMap<_, _> = b
            .into_vars()
            .into_iter()
            .filter(|(p, _)| self.global.partition_of(p) == Some(Partition::Shared))
            .collect();
        apply_grads(&mut self.global, &mut self.opt_global, &g, &vars)?;
        self.serq_steps += 1;
        Ok(value)
    }

    fn draw(&mut self) -> Vec<usize> {
        self.sampler.next_batch(self.cfg.batch)
    }

    /// The server half of a round: refresh the feature average from the
    /// current global model, quantify, then synchronize.
    pub fn serq_round(&mut self) -> Result<()> {
        if !self.cfg.enabled || self.cfg.batches_per_round == 0 {
            return Ok(());
        }
        if self.synth.is_empty() {
            return Err(Error::data("synthetic dataset is empty"));
        }
        let batches: Vec<Vec<usize>> = (0..self.cfg.batches_per_round).map(|_| self.draw()).collect();
        let synth = Arc::clone(&self.synth);
        let pick = |idx: &[usize]| idx.iter().map(|&i| &synth.clips[i]).collect::<Vec<_>>();
        let mut f_new: Option<Tensor> = None;
        for idx in &batches {
            let f = self.global_features(&pick(idx))?;
            f_new = Some(match f_new {
                None => f,
                Some(acc) => {
                    let data = acc.data().iter().zip(f.data()).map(|(a, b)| a + b).collect();
                    Tensor::new(acc.shape().to_vec(), data)?
                }
            });
        }
        let mut f_new = f_new.expect("at least one batch");
        let inv = 1.0 / batches.len() as f64;
        f_new.data_mut().iter_mut().for_each(|v| *v *= inv);
        self.f_hat = Some(match &self.f_hat {
            None => f_new,
            Some(prev) => ema_update(prev, &f_new, self.cfg.mu)?,
        });
        for idx in &batches {
            self.serq_eq(&pick(idx))?;
        }
        for idx in &batches {
            self.serq_sc(&pick(idx))?;
        }
        Ok(())
    }
}
