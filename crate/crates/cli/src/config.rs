use std::fs;
use std::path::{Path, PathBuf};

use fedst_core::federation::{FederationConfig, PretrainConfig, SerqConfig, TrainConfig, TransportMode};
use fedst_core::model::{IndicatorKind, ModelConfig, ModuleFlags};
use fedst_core::synthdata::{BackgroundFamily, SceneSpec, CHANNELS, CLASSES};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "FEDST_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Relative paths are taken from the config file's directory.
    pub output_dir: PathBuf,
    #[serde(default = "default_indicator")]
    pub indicator: String,
    /// Sites trained concurrently within a round.
    #[serde(default = "one")]
    pub parallelism: usize,
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default)]
    pub transport: TransportSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub serq: SerqSection,
    pub sites: Vec<SiteSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    /// `in_process` or `loopback`.
    pub mode: String,
    #[serde(default)]
    pub port: u16,
}

impl Default for TransportSection {
    fn default() -> Self {
        Self {
            mode: "in_process".into(),
            port: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Defaults to `<output_dir>/data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Held-out clips appended to every site file.
    pub test_clips: usize,
    pub synthetic_clips: usize,
    pub synthetic_seed: u64,
    pub out_of_fed_clips: usize,
    pub out_of_fed_seed: u64,
    pub out_of_fed_text: String,
    #[serde(default = "default_instruments")]
    pub instruments: [usize; 2],
    #[serde(default = "default_speed")]
    pub max_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub h0: usize,
    pub w0: usize,
    pub c: usize,
    /// Window side.
    pub s: usize,
    /// Pooling size per frame, oldest first; `m + 1` entries.
    pub p: Vec<usize>,
    #[serde(default)]
    pub r: Vec<usize>,
    /// Past frames per clip.
    pub m: usize,
    #[serde(default = "two")]
    pub patch: usize,
    pub mlp_hidden: usize,
    pub decoder_hidden: usize,
    pub indicator_dim: usize,
    #[serde(default = "yes")]
    pub ts: bool,
    #[serde(default = "yes")]
    pub prompt: bool,
    #[serde(default = "yes")]
    pub cs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    #[serde(rename = "E")]
    pub local_steps: usize,
    #[serde(rename = "T")]
    pub rounds: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub mu: f64,
    pub seed: u64,
    #[serde(default)]
    pub weighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            steps: d.steps,
            lr: d.lr,
            batch: d.batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SerqSection {
    pub enabled: bool,
    pub batches_per_round: usize,
    #[serde(default = "two")]
    pub batch: usize,
    pub lr: f64,
}

impl Default for SerqSection {
    fn default() -> Self {
        let d = SerqConfig::default();
        Self {
            enabled: d.enabled,
            batches_per_round: d.batches_per_round,
            batch: d.batch,
            lr: d.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSection {
    pub id: u32,
    pub text: String,
    /// Training clips; the file also holds `data.test_clips` more.
    pub clips: usize,
    pub seed: u64,
}

fn default_indicator() -> String {
    IndicatorKind::TextHash.as_str().into()
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

fn yes() -> bool {
    true
}

fn default_instruments() -> [usize; 2] {
    [1, 2]
}

fn default_speed() -> f64 {
    3.0
}

/// A parsed config together with the directory relative paths hang off.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        for (name, v) in [
            ("lambda1", t.lambda1),
            ("lambda2", t.lambda2),
            ("lambda3", t.lambda3),
            ("mu", t.mu),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::config(format!("train.{name} = {v} outside [0, 1]")));
            }
        }
        if !(t.lr > 0.0) || !(self.serq.lr > 0.0) || !(self.pretrain.lr > 0.0) {
            return Err(CliError::config("learning rates must be positive"));
        }
        if t.batch == 0 || self.serq.batch == 0 || self.pretrain.batch == 0 {
            return Err(CliError::config("batch sizes must be positive"));
        }
        if self.sites.is_empty() {
            return Err(CliError::config("at least one site is required"));
        }
        let mut ids: Vec<u32> = self.sites.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.sites.len() {
            return Err(CliError::config("site ids must be unique"));
        }
        if self.sites.iter().any(|s| s.clips == 0) {
            return Err(CliError::config("every site needs at least one training clip"));
        }
        if self.data.test_clips == 0 || self.data.synthetic_clips == 0 || self.data.out_of_fed_clips == 0 {
            return Err(CliError::config("test, synthetic and out-of-federation clip counts must be positive"));
        }
        let [lo, hi] = self.data.instruments;
        if lo == 0 || lo > hi {
            return Err(CliError::config("data.instruments must be a range [lo, hi] with 1 <= lo <= hi"));
        }
        if !(self.data.max_speed >= 1.0) {
            return Err(CliError::config("data.max_speed must be at least 1"));
        }
        self.indicator_kind()?;
        self.transport_mode()?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn indicator_kind(&self) -> Result<IndicatorKind> {
        Ok(self.indicator.parse()?)
    }

    pub fn transport_mode(&self) -> Result<TransportMode> {
        match self.transport.mode.as_str() {
            "in_process" => Ok(TransportMode::InProcess),
            "loopback" => Ok(TransportMode::Loopback {
                port: self.transport.port,
            }),
            other => Err(CliError::config(format!("unknown transport mode {other:?}"))),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            in_channels: CHANNELS,
            frame_h: m.h0,
            frame_w: m.w0,
            patch: m.patch,
            channels: m.c,
            window: m.s,
            pools: m.p.clone(),
            receptive_fields: m.r.clone(),
            frames: m.m + 1,
            classes: CLASSES,
            mlp_hidden: m.mlp_hidden,
            decoder_hidden: m.decoder_hidden,
            indicator_dim: m.indicator_dim,
            lambda_dice: self.train.lambda1,
            flags: ModuleFlags {
                temporal: m.ts,
                channel_select: m.cs,
                prompt: m.prompt,
            },
        }
    }

    pub fn federation_config(&self) -> Result<FederationConfig> {
        let t = &self.train;
        Ok(FederationConfig {
            model: self.model_config(),
            train: TrainConfig {
                lr: t.lr,
                batch: t.batch,
                local_steps: t.local_steps,
                rounds: t.rounds,
                seed: t.seed,
                weighted: t.weighted,
            },
            serq: SerqConfig {
                enabled: self.serq.enabled,
                batches_per_round: self.serq.batches_per_round,
                batch: self.serq.batch,
                lr: self.serq.lr,
                lambda2: t.lambda2,
                lambda3: t.lambda3,
                mu: t.mu,
                ..SerqConfig::default()
            },
            indicator: self.indicator_kind()?,
            transport: self.transport_mode()?,
            parallelism: self.parallelism.max(1),
            eval_every: self.eval_every,
            capture_wire: false,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            lr: self.pretrain.lr,
            batch: self.pretrain.batch,
        }
    }

    fn scene(&self, site_id: usize, family: BackgroundFamily, frames: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            site_id,
            family,
            instruments: (self.data.instruments[0], self.data.instruments[1]),
            height: self.model.h0,
            width: self.model.w0,
            frames,
            max_speed: self.data.max_speed,
            alignment: self.model_config().frame_alignment(),
            seed,
        }
    }

    /// Scene of the site at position `index` in the site list; each position
    /// gets its own background family.
    pub fn site_scene(&self, index: usize) -> SceneSpec {
        let s = &self.sites[index];
        self.scene(s.id as usize, BackgroundFamily::indexed(index), self.model.m + 1, s.seed)
    }

    /// The family after the last federated one: never seen in training.
    pub fn out_of_fed_scene(&self) -> SceneSpec {
        let k = self.sites.len();
        self.scene(k, BackgroundFamily::indexed(k), self.model.m + 1, self.data.out_of_fed_seed)
    }

    pub fn synthetic_scene(&self) -> SceneSpec {
        self.scene(self.sites.len() + 1, BackgroundFamily::flat(), 1, self.data.synthetic_seed)
    }

    /// Identifier used for the out-of-federation site in indicators.
    pub fn out_of_fed_id(&self) -> u32 {
        self.sites.iter().map(|s| s.id).max().map_or(0, |m| m + 1)
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let config = RunConfig::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base })
    }

    pub fn from_config(config: RunConfig, base: PathBuf) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, base })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.resolve(&self.config.output_dir),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        match &self.config.data.dir {
            Some(d) => self.resolve(d),
            None => self.output_dir().join("data"),
        }
    }
}
