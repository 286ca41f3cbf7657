use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use fedst_core::federation::{
    average_trees, evaluate, pretrain, run, site_indicator, Method, RunOutput, SiteData, Workload,
};
use fedst_core::metrics::MetricReport;
use fedst_core::model::{Indicator, ParamTree, StModel};
use fedst_core::synthdata::{gen_out_of_fed_site, gen_site_dataset, gen_synth_dataset, Dataset, DatasetKind};

use crate::checkpoint;
use crate::config::{LoadedConfig, RunConfig};
use crate::error::{CliError, Result};
use crate::report::{dice_curve_svg, metrics_csv, wire_csv};

pub const SYNTHETIC_FILE: &str = "synthetic.fstd";
pub const OUT_OF_FED_FILE: &str = "out_of_fed.fstd";
pub const OUT_OF_FED_NAME: &str = "out_of_fed";

pub fn site_file(id: u32) -> String {
    format!("site_{id}.fstd")
}

pub fn site_name(id: u32) -> String {
    format!("site{id}")
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Creates `dir`, clearing it first with `force`; refuses to touch an
/// existing one otherwise.
fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(CliError::config(format!("{} exists; pass --force to overwrite", dir.display())));
        }
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    create_dir(dir)
}

/// Writes the K site files, the synthetic set and the out-of-federation
/// site. Returns the written paths.
pub fn cmd_gen(loaded: &LoadedConfig, force: bool) -> Result<Vec<PathBuf>> {
    let cfg = &loaded.config;
    let dir = loaded.data_dir();
    let mut targets: Vec<PathBuf> = cfg.sites.iter().map(|s| dir.join(site_file(s.id))).collect();
    targets.push(dir.join(SYNTHETIC_FILE));
    targets.push(dir.join(OUT_OF_FED_FILE));
    if !force {
        if let Some(p) = targets.iter().find(|p| p.exists()) {
            return Err(CliError::config(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    create_dir(&dir)?;
    for (i, s) in cfg.sites.iter().enumerate() {
        let d = gen_site_dataset(&cfg.site_scene(i), s.clips + cfg.data.test_clips, &s.text)?;
        d.save(&targets[i])?;
    }
    gen_synth_dataset(&cfg.synthetic_scene(), cfg.data.synthetic_clips)?.save(&targets[cfg.sites.len()])?;
    gen_out_of_fed_site(&cfg.out_of_fed_scene(), cfg.data.out_of_fed_clips, &cfg.data.out_of_fed_text)?
        .save(&targets[cfg.sites.len() + 1])?;
    Ok(targets)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(CliError::data(format!("{} not found; run `fedst gen` first", path.display())));
    }
    Ok(Dataset::load(path)?)
}

fn check_meta(d: &Dataset, path: &Path, cfg: &RunConfig, kind: DatasetKind, frames: usize, clips: usize) -> Result<()> {
    let m = &d.meta;
    if m.kind != kind || m.frames != frames || m.height != cfg.model.h0 || m.width != cfg.model.w0 || d.len() != clips {
        return Err(CliError::data(format!(
            "{} does not match the config ({:?}, {} clips of {}x{}x{}); regenerate with `fedst gen --force`",
            path.display(),
            m.kind,
            d.len(),
            m.frames,
            m.height,
            m.width
        )));
    }
    Ok(())
}

/// Site train/test splits, synthetic set and out-of-federation site, as
/// described by the config.
pub struct Experiment {
    pub loaded: LoadedConfig,
    pub workload: Workload,
    pub out_of_fed: Dataset,
}

impl Experiment {
    pub fn load(loaded: LoadedConfig) -> Result<Self> {
        let cfg = &loaded.config;
        let dir = loaded.data_dir();
        let frames = cfg.model.m + 1;
        let mut sites = Vec::with_capacity(cfg.sites.len());
        for s in &cfg.sites {
            let path = dir.join(site_file(s.id));
            let d = load_dataset(&path)?;
            check_meta(&d, &path, cfg, DatasetKind::Site, frames, s.clips + cfg.data.test_clips)?;
            let (train, test) = d.split(cfg.data.test_clips)?;
            sites.push(SiteData {
                id: s.id,
                name: site_name(s.id),
                text: s.text.clone(),
                seed: s.seed,
                train,
                test,
            });
        }
        let path = dir.join(SYNTHETIC_FILE);
        let synth = load_dataset(&path)?;
        check_meta(&synth, &path, cfg, DatasetKind::Synthetic, 1, cfg.data.synthetic_clips)?;
        let path = dir.join(OUT_OF_FED_FILE);
        let out_of_fed = load_dataset(&path)?;
        check_meta(
            &out_of_fed,
            &path,
            cfg,
            DatasetKind::OutOfFederation,
            frames,
            cfg.data.out_of_fed_clips,
        )?;
        Ok(Self {
            workload: Workload {
                sites,
                synth: Arc::new(synth),
            },
            out_of_fed,
            loaded,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.loaded.config
    }

    /// Index of the site with the fewest training clips (first on ties).
    pub fn smallest_site(&self) -> usize {
        let sizes: Vec<usize> = self.workload.sites.iter().map(|s| s.train.len()).collect();
        let min = sizes.iter().copied().min().unwrap_or(0);
        sizes.iter().position(|&n| n == min).unwrap_or(0)
    }
}

pub struct MethodResult {
    pub method: Method,
    pub output: RunOutput,
    /// Mean of the final site models, used for the unseen site.
    pub global_model: ParamTree,
    pub out_of_fed: MetricReport,
}

impl MethodResult {
    /// Mean Dice over the federated sites after the last round.
    pub fn federation_dice(&self) -> f64 {
        self.output.final_mean_dice()
    }

    pub fn site_dice(&self, index: usize) -> f64 {
        self.output.final_reports()[index].mean_dice()
    }

    pub fn out_of_fed_dice(&self) -> f64 {
        self.out_of_fed.mean_dice()
    }
}

fn synth_indicator(cfg: &RunConfig, synth: &Dataset) -> Result<Indicator> {
    let kind = cfg.indicator_kind()?;
    let id = synth.meta.site_id as u32;
    Ok(site_indicator(kind, &synth.meta.text, id, cfg.train.seed, cfg.model.indicator_dim)
        .unwrap_or_else(|_| Indicator::zeros(cfg.model.indicator_dim)))
}

pub fn out_of_fed_indicator(cfg: &RunConfig, data: &Dataset) -> Result<Indicator> {
    Ok(site_indicator(
        cfg.indicator_kind()?,
        &data.meta.text,
        cfg.out_of_fed_id(),
        cfg.train.seed,
        cfg.model.indicator_dim,
    )?)
}

/// Pre-training on the synthetic set, then one method.
pub fn execute(exp: &Experiment, method: Method) -> Result<MethodResult> {
    let cfg = exp.config();
    let fed = cfg.federation_config()?;
    let model = StModel::new(fed.model.clone())?;
    let synth = &exp.workload.synth;
    let init = pretrain(
        &model,
        synth,
        &cfg.pretrain_config(),
        &synth_indicator(cfg, synth)?,
        cfg.train.seed,
    )?;
    let output = run(method, &fed, &exp.workload, &init)?;
    let global_model = average_trees(&output.site_models)?;
    let out_of_fed = evaluate(
        &model,
        &global_model,
        &exp.out_of_fed,
        &out_of_fed_indicator(cfg, &exp.out_of_fed)?,
        cfg.train.rounds,
        OUT_OF_FED_NAME,
    )?;
    Ok(MethodResult {
        method,
        output,
        global_model,
        out_of_fed,
    })
}

pub fn seed_record(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "train.seed = {}", cfg.train.seed);
    let _ = writeln!(s, "pretrain.seed = {}", cfg.train.seed);
    let _ = writeln!(s, "data.synthetic_seed = {}", cfg.data.synthetic_seed);
    let _ = writeln!(s, "data.out_of_fed_seed = {}", cfg.data.out_of_fed_seed);
    for site in &cfg.sites {
        let _ = writeln!(
            s,
            "site.{}.seed = {}  # batch order seed {}",
            site.id,
            site.seed,
            fedst_core::federation::site_shuffle_seed(cfg.train.seed, site.seed)
        );
    }
    s
}

/// What `run` leaves behind.
pub struct RunRecord {
    pub dir: PathBuf,
    pub result: MethodResult,
}

/// Runs one method and writes the run directory: config snapshot, seed
/// record, metrics CSV, learning curve, byte accounting and checkpoints.
pub fn cmd_run(loaded: LoadedConfig, method: Method, name: Option<&str>, force: bool) -> Result<RunRecord> {
    let name = name.map(str::to_string).unwrap_or_else(|| method.to_string());
    if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
        return Err(CliError::config(format!("invalid run name {name:?}")));
    }
    let dir = loaded.output_dir().join("runs").join(&name);
    let exp = Experiment::load(loaded)?;
    let result = execute(&exp, method)?;
    fresh_dir(&dir, force)?;
    let cfg = exp.config();
    write(&dir.join("config.toml"), cfg.to_toml())?;
    write(&dir.join("seeds.txt"), seed_record(cfg))?;
    let run_id = format!("{method}-{}", cfg.train.seed);
    let mut reports: Vec<&MetricReport> = result.output.log.iter().flat_map(|l| l.reports.iter()).collect();
    reports.push(&result.out_of_fed);
    write(&dir.join("metrics.csv"), metrics_csv(&run_id, &reports))?;
    write(&dir.join("wire.csv"), wire_csv(&result.output.wire))?;
    write(
        &dir.join("curve.svg"),
        dice_curve_svg(&format!("{name}: test Dice per round"), &result.output.log),
    )?;
    let ck = dir.join("checkpoints");
    create_dir(&ck)?;
    for (site, tree) in cfg.sites.iter().zip(&result.output.site_models) {
        checkpoint::save(tree, &ck.join(format!("site_{}.fstk", site.id)))?;
    }
    checkpoint::save(&result.output.global, &ck.join("server.fstk"))?;
    Ok(RunRecord { dir, result })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    /// Mean of every site model's full tree.
    Global,
    Site(u32),
}

/// Scores a saved run on a dataset file. `test_split` keeps only the
/// trailing held-out clips of a site file.
pub fn cmd_eval(run_dir: &Path, dataset: &Path, target: EvalTarget, test_split: bool) -> Result<MetricReport> {
    let snapshot = run_dir.join("config.toml");
    if !snapshot.exists() {
        return Err(CliError::data(format!("{} is not a run directory (no config.toml)", run_dir.display())));
    }
    let text = fs::read_to_string(&snapshot).map_err(|e| CliError::io(&snapshot, e))?;
    let cfg = RunConfig::parse(&text)?;
    let model = StModel::new(cfg.model_config())?;
    let ck = run_dir.join("checkpoints");
    let load_site = |id: u32| -> Result<ParamTree> {
        let path = ck.join(format!("site_{id}.fstk"));
        if !path.exists() {
            return Err(CliError::data(format!("no checkpoint at {}", path.display())));
        }
        checkpoint::load(&path)
    };
    let mut data = Dataset::load(dataset).map_err(|e| match e {
        fedst_core::Error::Io(io) => CliError::data(format!("cannot read dataset {}: {io}", dataset.display())),
        other => other.into(),
    })?;
    if test_split {
        data = data.split(cfg.data.test_clips)?.1;
    }
    let kind = cfg.indicator_kind()?;
    let dim = cfg.model.indicator_dim;
    let (params, indicator, name) = match target {
        EvalTarget::Global => {
            let trees = cfg.sites.iter().map(|s| load_site(s.id)).collect::<Result<Vec<_>>>()?;
            let ind = match data.meta.kind {
                DatasetKind::OutOfFederation => out_of_fed_indicator(&cfg, &data)?,
                _ => site_indicator(kind, &data.meta.text, data.meta.site_id as u32, cfg.train.seed, dim)?,
            };
            (average_trees(&trees)?, ind, "global".to_string())
        }
        EvalTarget::Site(id) => {
            let site = cfg
                .sites
                .iter()
                .find(|s| s.id == id)
                .ok_or_else(|| CliError::config(format!("site {id} is not part of this run")))?;
            let ind = site_indicator(kind, &site.text, id, cfg.train.seed, dim)?;
            (load_site(id)?, ind, site_name(id))
        }
    };
    Ok(evaluate(&model, &params, &data, &indicator, cfg.train.rounds, &name)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Toggle {
    Ts,
    Prompt,
    Cs,
    Serq,
}

impl Toggle {
    pub fn as_str(self) -> &'static str {
        match self {
            Toggle::Ts => "ts",
            Toggle::Prompt => "prompt",
            Toggle::Cs => "cs",
            Toggle::Serq => "serq",
        }
    }

    /// The config with this component switched off.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Toggle::Ts => c.model.ts = false,
            Toggle::Prompt => c.model.prompt = false,
            Toggle::Cs => c.model.cs = false,
            Toggle::Serq => c.serq.enabled = false,
        }
        c
    }
}

impl FromStr for Toggle {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ts" => Ok(Toggle::Ts),
            "prompt" => Ok(Toggle::Prompt),
            "cs" => Ok(Toggle::Cs),
            "serq" => Ok(Toggle::Serq),
            other => Err(CliError::config(format!("unknown toggle {other:?} (ts, prompt, cs, serq)"))),
        }
    }
}

pub struct AblationRow {
    pub name: String,
    pub site_dice: Vec<f64>,
    pub federation_dice: f64,
    pub out_of_fed_dice: f64,
    pub server_steps: u64,
}

pub struct AblationTable {
    pub sites: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("config,{},federation,out_of_fed,server_steps\n", self.sites.join(","));
        for r in &self.rows {
            let sites: Vec<String> = r.site_dice.iter().map(|d| format!("{d:.6}")).collect();
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{}",
                r.name,
                sites.join(","),
                r.federation_dice,
                r.out_of_fed_dice,
                r.server_steps
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12}", "config");
        for name in self.sites.iter().map(String::as_str).chain(["federation", "out_of_fed"]) {
            let _ = write!(s, "{name:>12}");
        }
        let _ = writeln!(s, "{:>14}", "server_steps");
        for r in &self.rows {
            let _ = write!(s, "{:<12}", r.name);
            for d in r.site_dice.iter().chain([&r.federation_dice, &r.out_of_fed_dice]) {
                let _ = write!(s, "{d:>12.4}");
            }
            let _ = writeln!(s, "{:>14}", r.server_steps);
        }
        s
    }
}

fn ablation_row(name: &str, r: &MethodResult) -> AblationRow {
    AblationRow {
        name: name.to_string(),
        site_dice: r.output.final_reports().iter().map(MetricReport::mean_dice).collect(),
        federation_dice: r.federation_dice(),
        out_of_fed_dice: r.out_of_fed_dice(),
        server_steps: r.output.server_steps,
    }
}

/// The full method plus one run per toggle with that component off.
pub fn ablate(exp: &Experiment, toggles: &[Toggle]) -> Result<AblationTable> {
    let mut rows = vec![ablation_row("full", &execute(exp, Method::FedSt)?)];
    for &t in toggles {
        let variant = Experiment {
            loaded: LoadedConfig::from_config(t.apply(exp.config()), exp.loaded.base.clone())?,
            workload: exp.workload.clone(),
            out_of_fed: exp.out_of_fed.clone(),
        };
        rows.push(ablation_row(&format!("no_{}", t.as_str()), &execute(&variant, Method::FedSt)?));
    }
    Ok(AblationTable {
        sites: exp.workload.sites.iter().map(|s| s.name.clone()).collect(),
        rows,
    })
}

pub fn cmd_ablate(loaded: LoadedConfig, toggles: &[Toggle], force: bool) -> Result<(PathBuf, AblationTable)> {
    let dir = loaded.output_dir().join("ablation");
    let exp = Experiment::load(loaded)?;
    let table = ablate(&exp, toggles)?;
    fresh_dir(&dir, force)?;
    write(&dir.join("config.toml"), exp.config().to_toml())?;
    write(&dir.join("ablation.csv"), table.to_csv())?;
    Ok((dir, table))
}
