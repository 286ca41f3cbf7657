use std::collections::BTreeMap;
use std::sync::Arc;

use super::message::{Direction, RoundMessage};
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, MetricAccumulator, MetricReport};
use crate::model::{seg_loss, Binder, Indicator, ParamTree, Partition, StModel, VideoClip};
use crate::synthdata::{BatchSampler, Dataset};
use crate::tensor::{AdamW, AdamWConfig, Graph, Tensor, Var};

/// Which forward route a model is trained or evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Encoder, temporal block (when enabled), channel selection, decoder.
    Full,
    /// Current frame only, temporal block bypassed.
    Spatial,
}

/// Batch-mean segmentation loss plus the batch-mean post-selection feature.
pub(crate) fn batch_loss(
    g: &mut Graph,
    b: &mut Binder,
    model: &StModel,
    clips: &[&VideoClip],
    indicator: &Indicator,
    route: Route,
) -> Result<(Var, Var)> {
    if clips.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let lambda = model.config().lambda_dice;
    let mut loss: Option<Var> = None;
    let mut feat: Option<Var> = None;
    for clip in clips {
        let out = match route {
            Route::Full => model.forward(g, b, clip, indicator)?,
            Route::Spatial => model.forward_spatial(g, b, clip, indicator)?,
        };
        let l = seg_loss(g, out.logits, clip.current_mask(), lambda)?;
        loss = Some(match loss {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
        feat = Some(match feat {
            None => out.feature,
            Some(acc) => g.add(acc, out.feature)?,
        });
    }
    let inv = 1.0 / clips.len() as f64;
    let loss = g.scale(loss.expect("non-empty"), inv)?;
    let feat = g.scale(feat.expect("non-empty"), inv)?;
    Ok((loss, feat))
}

/// Applies the optimizer to every parameter that received a gradient.
pub(crate) fn apply_grads(params: &mut ParamTree, opt: &mut AdamW, g: &Graph, vars: &BTreeMap<String, Var>) -> Result<()> {
    params.zero_grad();
    params.accumulate_grads(g, vars)?;
    let paths: Vec<String> = vars.keys().filter(|p| g.grad(vars[*p]).is_some()).cloned().collect();
    opt.step(params.select_mut(&paths))?;
    params.zero_grad();
    Ok(())
}

/// One optimizer step on the segmentation loss of a batch. Returns the loss.
pub fn train_step(
    model: &StModel,
    params: &mut ParamTree,
    opt: &mut AdamW,
    clips: &[&VideoClip],
    indicator: &Indicator,
    route: Route,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let (loss, _) = batch_loss(&mut g, &mut b, model, clips, indicator, route)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0];
    let vars = b.into_vars();
    apply_grads(params, opt, &g, &vars)?;
    Ok(value)
}

/// Arg-max labels of the current frame.
pub fn predict(model: &StModel, params: &ParamTree, clip: &VideoClip, indicator: &Indicator, route: Route) -> Result<Vec<u8>> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let out = match route {
        Route::Full => model.forward(&mut g, &mut b, clip, indicator)?,
        Route::Spatial => model.forward_spatial(&mut g, &mut b, clip, indicator)?,
    };
    Ok(argmax_labels(g.value(out.logits).data(), model.config().classes))
}

pub fn evaluate(
    model: &StModel,
    params: &ParamTree,
    data: &Dataset,
    indicator: &Indicator,
    round: usize,
    name: &str,
) -> Result<MetricReport> {
    let cfg = model.config();
    let mut acc = MetricAccumulator::new(cfg.classes, cfg.frame_h, cfg.frame_w);
    for clip in &data.clips {
        let pred = predict(model, params, clip, indicator, Route::Full)?;
        acc.add(&pred, &clip.current_mask())?;
    }
    acc.report(round, name)
}

/// A participating site: its model, optimizer moments and data stream.
pub struct SiteState {
    pub site_id: u32,
    pub name: String,
    pub model: Arc<StModel>,
    pub params: ParamTree,
    pub optimizer: AdamW,
    pub indicator: Indicator,
    pub train: Dataset,
    pub test: Dataset,
    pub sampler: BatchSampler,
    pub batch: usize,
    pub local_steps: usize,
    pub iterations: u64,
}

pub struct SiteSetup {
    pub site_id: u32,
    pub name: String,
    pub indicator: Indicator,
    pub train: Dataset,
    pub test: Dataset,
}

impl SiteState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        setup: SiteSetup,
        model: Arc<StModel>,
        params: ParamTree,
        opt: AdamWConfig,
        batch: usize,
        local_steps: usize,
        shuffle_seed: u64,
    ) -> Result<Self> {
        let sampler = BatchSampler::new(setup.train.len(), shuffle_seed)?;
        Ok(Self {
            site_id: setup.site_id,
            name: setup.name,
            model,
            params,
            optimizer: AdamW::new(opt),
            indicator: setup.indicator,
            train: setup.train,
            test: setup.test,
            sampler,
            batch,
            local_steps,
            iterations: 0,
        })
    }

    pub fn step(&mut self) -> Result<f64> {
        let idx = self.sampler.next_batch(self.batch);
        let clips: Vec<&VideoClip> = idx.iter().map(|&i| &self.train.clips[i]).collect();
        let loss = train_step(&self.model, &mut self.params, &mut self.optimizer, &clips, &self.indicator, Route::Full)?;
        self.iterations += 1;
        Ok(loss)
    }

    /// Loads the incoming shared set, runs the local steps and reports the
    /// updated shared set.
    pub fn local_round(&mut self, round: u32, gamma_in: &BTreeMap<String, Tensor>) -> Result<RoundMessage> {
        self.params.load_shared(gamma_in)?;
        for _ in 0..self.local_steps {
            self.step()?;
        }
        Ok(RoundMessage {
            direction: Direction::SiteToServer,
            round,
            site_id: self.site_id,
            sample_count: self.train.len() as u32,
            payload: self.params.subset(Partition::Shared),
        })
    }

    pub fn evaluate(&self, round: usize) -> Result<MetricReport> {
        evaluate(&self.model, &self.params, &self.test, &self.indicator, round, &self.name)
    }
}
