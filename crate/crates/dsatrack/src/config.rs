//! Flat `key = value` configuration. Every key has a default; a config file
//! overrides defaults and command-line flags override the file.

use std::fs;
use std::path::{Path, PathBuf};

use dsatrack_core::eval::TrainConfig;
use dsatrack_core::model::ModelConfig;
use dsatrack_core::relevance::RelevanceKind;
use dsatrack_core::semantic::DegreeMode;
use dsatrack_core::tracker::TrackerConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub weights: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            tracker: TrackerConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            jobs: 1,
            out: PathBuf::from("out"),
            weights: None,
            data: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse().map_err(|_| CliError::invalid(format!("{key}: cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn optional(key: &str, v: &str) -> CliResult<Option<f64>> {
    match v {
        "none" | "off" | "" => Ok(None),
        _ => num(key, v).map(Some),
    }
}

impl Config {
    pub const KEYS: &'static [&'static str] = &[
        "d_model",
        "heads",
        "depth",
        "dsa_layers",
        "retention",
        "mlp_ratio",
        "patch",
        "template_size",
        "search_size",
        "templates",
        "tau",
        "relevance",
        "degree",
        "ln_eps",
        "template_factor",
        "search_factor",
        "quality_gate",
        "min_side",
        "steps",
        "lr",
        "batch",
        "clip",
        "train_blocks",
        "loss_l1",
        "loss_giou",
        "loss_focal",
        "center_jitter",
        "scale_jitter",
        "seed",
        "jobs",
        "out",
        "weights",
        "data",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "d_model" => m.d_model = num(key, v)?,
            "heads" => m.heads = num(key, v)?,
            "depth" => m.depth = num(key, v)?,
            "dsa_layers" => m.dsa_layers = list(key, v)?,
            "retention" => m.retention = list(key, v)?,
            "mlp_ratio" => m.mlp_ratio = num(key, v)?,
            "patch" => m.patch = num(key, v)?,
            "template_size" => m.template_size = num(key, v)?,
            "search_size" => m.search_size = num(key, v)?,
            "templates" => m.templates = num(key, v)?,
            "tau" => m.tau = num(key, v)?,
            "relevance" => {
                m.relevance = match v {
                    "dynamic" => RelevanceKind::Dynamic,
                    "static" | "static-grid" => RelevanceKind::StaticGrid,
                    _ => return Err(CliError::invalid(format!("relevance: `{v}` (dynamic|static)"))),
                }
            }
            "degree" => {
                m.degree = match v {
                    "self-loop" => DegreeMode::SelfLoop,
                    "literal" => DegreeMode::Literal,
                    _ => return Err(CliError::invalid(format!("degree: `{v}` (self-loop|literal)"))),
                }
            }
            "ln_eps" => m.ln_eps = num(key, v)?,
            "template_factor" => self.tracker.template_factor = num(key, v)?,
            "search_factor" => self.tracker.search_factor = num(key, v)?,
            "quality_gate" => self.tracker.quality_gate = optional(key, v)?,
            "min_side" => self.tracker.min_side = num(key, v)?,
            "steps" => self.train.steps = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "batch" => self.train.batch = num(key, v)?,
            "clip" => self.train.clip = optional(key, v)?,
            "train_blocks" => self.train.blocks = list(key, v)?,
            "loss_l1" => self.train.weights.l1 = num(key, v)?,
            "loss_giou" => self.train.weights.giou = num(key, v)?,
            "loss_focal" => self.train.weights.focal = num(key, v)?,
            "center_jitter" => self.train.jitter.center = num(key, v)?,
            "scale_jitter" => self.train.jitter.scale = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "jobs" => self.jobs = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "weights" => self.weights = Some(PathBuf::from(v)),
            "data" => self.data = Some(PathBuf::from(v)),
            other => return Err(CliError::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::invalid(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k, v).map_err(|e| match e {
                CliError::Invalid(m) => CliError::invalid(format!("config line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let mut c = Self::default();
        c.apply_text(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)?;
        Ok(c)
    }

    /// Renders every key, such that parsing the text reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let join = |v: &[String]| v.join(",");
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("d_model", m.d_model.to_string());
        kv("heads", m.heads.to_string());
        kv("depth", m.depth.to_string());
        kv(
            "dsa_layers",
            join(&m.dsa_layers.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
        );
        kv(
            "retention",
            join(&m.retention.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
        );
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("patch", m.patch.to_string());
        kv("template_size", m.template_size.to_string());
        kv("search_size", m.search_size.to_string());
        kv("templates", m.templates.to_string());
        kv("tau", m.tau.to_string());
        kv(
            "relevance",
            match m.relevance {
                RelevanceKind::Dynamic => "dynamic",
                RelevanceKind::StaticGrid => "static",
            }
            .into(),
        );
        kv(
            "degree",
            match m.degree {
                DegreeMode::SelfLoop => "self-loop",
                DegreeMode::Literal => "literal",
            }
            .into(),
        );
        kv("ln_eps", m.ln_eps.to_string());
        kv("template_factor", self.tracker.template_factor.to_string());
        kv("search_factor", self.tracker.search_factor.to_string());
        kv("quality_gate", opt(self.tracker.quality_gate));
        kv("min_side", self.tracker.min_side.to_string());
        kv("steps", self.train.steps.to_string());
        kv("lr", self.train.lr.to_string());
        kv("batch", self.train.batch.to_string());
        kv("clip", opt(self.train.clip));
        kv(
            "train_blocks",
            join(&self.train.blocks.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
        );
        kv("loss_l1", self.train.weights.l1.to_string());
        kv("loss_giou", self.train.weights.giou.to_string());
        kv("loss_focal", self.train.weights.focal.to_string());
        kv("center_jitter", self.train.jitter.center.to_string());
        kv("scale_jitter", self.train.jitter.scale.to_string());
        kv("seed", self.seed.to_string());
        kv("jobs", self.jobs.to_string());
        kv("out", self.out.display().to_string());
        if let Some(w) = &self.weights {
            kv("weights", w.display().to_string());
        }
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        s
    }
}
