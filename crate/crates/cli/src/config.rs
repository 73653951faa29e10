//! Flat `key = value` run configuration with command-line overrides.
//!
//! Unknown keys are rejected. Every run writes its fully-resolved config
//! next to its outputs, and a run is reproducible from that file alone.
//! The `FANET_SEED` environment variable overrides the seed last.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use fanet_core::model::{AblationConfig, ModelConfig, TalVariant};
use fanet_core::optim::SgdConfig;
use fanet_core::rng::sample_seed;
use fanet_core::schedule::ScheduleConfig;
use fanet_core::synth::DatasetSpec;
use fanet_core::train::TrainConfig;
use fanet_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    // paths
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    // dataset
    pub persons: usize,
    pub cameras: usize,
    pub images_per_pair: usize,
    pub height: usize,
    pub width: usize,
    pub unseen_scene: bool,
    // architecture switches
    pub tem: bool,
    pub bg: bool,
    pub ia: bool,
    pub tal: TalVariant,
    pub hpp: bool,
    pub k: usize,
    pub embed_dim: usize,
    pub final_stage_stride: usize,
    // schedule
    pub schedule: String,
    pub epochs: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub lr_start: Option<f32>,
    pub lr_peak: Option<f32>,
    /// Comma-separated `epoch:lr` pairs, e.g. `16:0.06,32:0.006`.
    pub decay: Option<String>,
    pub batch_p: Option<usize>,
    pub batch_k: Option<usize>,
    // optimizer
    pub weight_decay: f32,
    pub momentum: f32,
    pub lr_multipliers: BTreeMap<String, f32>,
    // run
    pub seed: u64,
    pub flip_prob: f64,
    pub passes_per_epoch: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub mask_threshold: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            checkpoint: None,
            persons: 32,
            cameras: 6,
            images_per_pair: 6,
            height: 128,
            width: 48,
            unseen_scene: false,
            tem: true,
            bg: true,
            ia: true,
            tal: TalVariant::Full,
            hpp: true,
            k: 256,
            embed_dim: 64,
            final_stage_stride: 1,
            schedule: "desk".into(),
            epochs: None,
            warmup_epochs: None,
            lr_start: None,
            lr_peak: None,
            decay: None,
            batch_p: None,
            batch_k: None,
            weight_decay: 5e-4,
            momentum: 0.9,
            lr_multipliers: BTreeMap::new(),
            seed: 7,
            flip_prob: 0.5,
            passes_per_epoch: 1,
            checkpoint_every: 1,
            eval_every: 0,
            mask_threshold: 0.5,
        }
    }
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value `{value}` for key `{key}`"))
}

impl RunConfig {
    /// Applies one `key = value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! parse {
            () => {
                value.parse().map_err(|_| bad_value(key, value))?
            };
        }
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "persons" => self.persons = parse!(),
            "cameras" => self.cameras = parse!(),
            "images_per_pair" => self.images_per_pair = parse!(),
            "height" => self.height = parse!(),
            "width" => self.width = parse!(),
            "unseen_scene" => self.unseen_scene = parse!(),
            "tem" => self.tem = parse!(),
            "bg" => self.bg = parse!(),
            "ia" => self.ia = parse!(),
            "tal" => self.tal = TalVariant::parse(value)?,
            "hpp" => self.hpp = parse!(),
            "k" => self.k = parse!(),
            "embed_dim" => self.embed_dim = parse!(),
            "final_stage_stride" => self.final_stage_stride = parse!(),
            "schedule" => {
                if value != "desk" && value != "paper" {
                    return Err(bad_value(key, value));
                }
                self.schedule = value.to_string();
            }
            "epochs" => self.epochs = Some(parse!()),
            "warmup_epochs" => self.warmup_epochs = Some(parse!()),
            "lr_start" => self.lr_start = Some(parse!()),
            "lr_peak" => self.lr_peak = Some(parse!()),
            "decay" => self.decay = Some(value.to_string()),
            "batch_p" => self.batch_p = Some(parse!()),
            "batch_k" => self.batch_k = Some(parse!()),
            "weight_decay" => self.weight_decay = parse!(),
            "momentum" => self.momentum = parse!(),
            "seed" => self.seed = parse!(),
            "flip_prob" => self.flip_prob = parse!(),
            "passes_per_epoch" => self.passes_per_epoch = parse!(),
            "checkpoint_every" => self.checkpoint_every = parse!(),
            "eval_every" => self.eval_every = parse!(),
            "mask_threshold" => self.mask_threshold = parse!(),
            _ => {
                if let Some(group) = key.strip_prefix("lr_mult.") {
                    let v: f32 = value.parse().map_err(|_| bad_value(key, value))?;
                    self.lr_multipliers.insert(group.to_string(), v);
                } else {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Parses a line-oriented config file ('#' starts a comment).
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", i + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("FANET_SEED") {
            self.seed = v
                .parse()
                .map_err(|_| Error::Config(format!("bad FANET_SEED `{v}`")))?;
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_persons: self.persons,
            n_cameras: self.cameras,
            images_per_pair: self.images_per_pair,
            height: self.height,
            width: self.width,
            master_seed: self.seed,
            unseen_scene: self.unseen_scene,
        }
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            enable_tem: self.tem,
            enable_background_branch: self.bg,
            enable_interaction: self.ia,
            tal_variant: self.tal,
            enable_hpp: self.hpp,
            k: self.k,
            embed_dim: self.embed_dim,
        }
    }

    /// Copies one of the Table-style ablation rows into the switches.
    pub fn set_ablation(&mut self, a: &AblationConfig) {
        self.tem = a.enable_tem;
        self.bg = a.enable_background_branch;
        self.ia = a.enable_interaction;
        self.tal = a.tal_variant;
        self.hpp = a.enable_hpp;
        self.k = a.k;
        self.embed_dim = a.embed_dim;
    }

    /// Model geometry for a dataset of the given size and label counts.
    pub fn model_config(
        &self,
        height: usize,
        width: usize,
        n_persons: usize,
        n_cameras: usize,
    ) -> ModelConfig {
        let mut cfg = ModelConfig::desk(n_persons, n_cameras);
        cfg.input_h = height;
        cfg.input_w = width;
        cfg.final_stage_stride = self.final_stage_stride;
        cfg.ablation = self.ablation();
        cfg
    }

    pub fn schedule_config(&self) -> Result<ScheduleConfig> {
        let mut s = match self.schedule.as_str() {
            "paper" => ScheduleConfig::paper(),
            _ => ScheduleConfig::desk(),
        };
        if let Some(v) = self.epochs {
            s.total_epochs = v;
        }
        if let Some(v) = self.warmup_epochs {
            s.warmup_epochs = v;
        }
        if let Some(v) = self.lr_start {
            s.lr_start = v;
        }
        if let Some(v) = self.lr_peak {
            s.lr_peak = v;
        }
        if let Some(d) = &self.decay {
            let mut pairs = Vec::new();
            for part in d.split(',').filter(|p| !p.trim().is_empty()) {
                let (e, lr) = part
                    .split_once(':')
                    .ok_or_else(|| bad_value("decay", d))?;
                pairs.push((
                    e.trim().parse().map_err(|_| bad_value("decay", d))?,
                    lr.trim().parse().map_err(|_| bad_value("decay", d))?,
                ));
            }
            s.decay_epochs = pairs;
        }
        if let Some(v) = self.batch_p {
            s.batch_p = v;
        }
        if let Some(v) = self.batch_k {
            s.batch_k = v;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            base_lr: 0.1,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            group_multipliers: self.lr_multipliers.clone(),
        }
    }

    pub fn train_config(&self, out_dir: Option<PathBuf>) -> Result<TrainConfig> {
        Ok(TrainConfig {
            schedule: self.schedule_config()?,
            sgd: self.sgd_config(),
            seed: self.seed,
            flip_prob: self.flip_prob,
            passes_per_epoch: self.passes_per_epoch,
            checkpoint_every: self.checkpoint_every,
            out_dir,
        })
    }

    /// Seed for model weight initialization, derived from the run seed.
    pub fn init_seed(&self) -> u64 {
        sample_seed(self.seed, 0xFA, 0, 0)
    }

    /// Full key = value rendering; `apply_file` on this text reproduces
    /// the configuration.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        let schedule = self.schedule_config().expect("validated before emit");
        if let Some(p) = &self.data {
            let _ = writeln!(out, "data = {}", p.display());
        }
        if let Some(p) = &self.out {
            let _ = writeln!(out, "out = {}", p.display());
        }
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(out, "checkpoint = {}", p.display());
        }
        let _ = writeln!(out, "persons = {}", self.persons);
        let _ = writeln!(out, "cameras = {}", self.cameras);
        let _ = writeln!(out, "images_per_pair = {}", self.images_per_pair);
        let _ = writeln!(out, "height = {}", self.height);
        let _ = writeln!(out, "width = {}", self.width);
        let _ = writeln!(out, "unseen_scene = {}", self.unseen_scene);
        let _ = writeln!(out, "tem = {}", self.tem);
        let _ = writeln!(out, "bg = {}", self.bg);
        let _ = writeln!(out, "ia = {}", self.ia);
        let _ = writeln!(out, "tal = {}", self.tal.name());
        let _ = writeln!(out, "hpp = {}", self.hpp);
        let _ = writeln!(out, "k = {}", self.k);
        let _ = writeln!(out, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(out, "final_stage_stride = {}", self.final_stage_stride);
        let _ = writeln!(out, "schedule = {}", self.schedule);
        let _ = writeln!(out, "epochs = {}", schedule.total_epochs);
        let _ = writeln!(out, "warmup_epochs = {}", schedule.warmup_epochs);
        let _ = writeln!(out, "lr_start = {}", schedule.lr_start);
        let _ = writeln!(out, "lr_peak = {}", schedule.lr_peak);
        let decay: Vec<String> = schedule
            .decay_epochs
            .iter()
            .map(|(e, lr)| format!("{e}:{lr}"))
            .collect();
        let _ = writeln!(out, "decay = {}", decay.join(","));
        let _ = writeln!(out, "batch_p = {}", schedule.batch_p);
        let _ = writeln!(out, "batch_k = {}", schedule.batch_k);
        let _ = writeln!(out, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(out, "momentum = {}", self.momentum);
        for (group, mult) in &self.lr_multipliers {
            let _ = writeln!(out, "lr_mult.{group} = {mult}");
        }
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "flip_prob = {}", self.flip_prob);
        let _ = writeln!(out, "passes_per_epoch = {}", self.passes_per_epoch);
        let _ = writeln!(out, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(out, "eval_every = {}", self.eval_every);
        let _ = writeln!(out, "mask_threshold = {}", self.mask_threshold);
        out
    }
}
