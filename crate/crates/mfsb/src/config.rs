//! Flat key=value experiment configuration.
//!
//! Every knob of an experiment — space size, data generation, prompt forms,
//! fusion, loss weights, training schedule, evaluation world — lives in one
//! struct with documented defaults. A config file sets any subset of keys;
//! unknown keys and out-of-range values are rejected with the offending key
//! and line number. The canonical echo of the effective config doubles as
//! the input of the run-directory hash.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{FusionOrder, IntraSemantics};
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::prompt::{Element, PromptForm};
use crate::space::World;
use crate::train::{AdamHyper, FitConfig};

/// Which world(s) an experiment reports on.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum WorldChoice {
    Open,
    Closed,
    Both,
}

impl WorldChoice {
    pub fn key(self) -> &'static str {
        match self {
            WorldChoice::Open => "open",
            WorldChoice::Closed => "closed",
            WorldChoice::Both => "both",
        }
    }

    pub fn parse(text: &str) -> Result<WorldChoice> {
        match text {
            "open" => Ok(WorldChoice::Open),
            "closed" => Ok(WorldChoice::Closed),
            "both" => Ok(WorldChoice::Both),
            other => Err(Error::Config(format!("unknown world {other:?}"))),
        }
    }

    pub fn worlds(self) -> Vec<World> {
        match self {
            WorldChoice::Open => vec![World::Open],
            WorldChoice::Closed => vec![World::Closed],
            WorldChoice::Both => vec![World::Open, World::Closed],
        }
    }
}

/// Complete description of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    // Composition space and data generation.
    pub n_states: usize,
    pub n_objects: usize,
    pub unseen_fraction: f64,
    pub samples_per_pair: usize,
    pub eval_per_pair: usize,
    pub noise_sigma: f64,
    pub d_in: usize,
    pub d: usize,
    // Model shape.
    pub n_heads: usize,
    pub prefix_len: usize,
    pub fusion_sigma: f64,
    // Prompts and fusion, indexed like [`Element::ALL`] (pair, attr, obj).
    pub forms: [PromptForm; 3],
    pub active: [bool; 3],
    pub order: FusionOrder,
    pub semantics: IntraSemantics,
    // Loss weights.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    // Training.
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    // Evaluation.
    pub world: WorldChoice,
    pub sweep_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            seed: 0,
            n_states: 8,
            n_objects: 10,
            unseen_fraction: 0.3,
            samples_per_pair: 4,
            eval_per_pair: 2,
            noise_sigma: 0.1,
            d_in: 32,
            d: 16,
            n_heads: 1,
            prefix_len: 3,
            fusion_sigma: 0.02,
            forms: [PromptForm::Hard, PromptForm::Soft, PromptForm::Soft],
            active: [true, true, true],
            order: FusionOrder::InterThenIntra,
            semantics: IntraSemantics::AsEquations,
            alpha: 0.2,
            beta: 0.2,
            gamma: 0.2,
            temperature: 0.07,
            epochs: 20,
            lr: 5e-3,
            batch: 16,
            world: WorldChoice::Both,
            sweep_points: 21,
        }
    }
}

fn parse_form(text: &str) -> Result<PromptForm> {
    match text {
        "hard" => Ok(PromptForm::Hard),
        "soft" => Ok(PromptForm::Soft),
        "hard_soft" => Ok(PromptForm::HardPlusSoft),
        other => Err(Error::Config(format!("unknown prompt form {other:?}"))),
    }
}

fn parse_bool(text: &str) -> Result<bool> {
    match text {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("expected true or false, got {other:?}"))),
    }
}

impl ExperimentConfig {
    /// Apply one `key = value` assignment.
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("unparsable value {value:?}")))
        }
        match key {
            "seed" => self.seed = num(value)?,
            "space.n_states" => self.n_states = num(value)?,
            "space.n_objects" => self.n_objects = num(value)?,
            "space.unseen_fraction" => self.unseen_fraction = num(value)?,
            "space.samples_per_pair" => self.samples_per_pair = num(value)?,
            "space.eval_per_pair" => self.eval_per_pair = num(value)?,
            "space.noise_sigma" => self.noise_sigma = num(value)?,
            "space.d_in" => self.d_in = num(value)?,
            "space.d" => self.d = num(value)?,
            "model.n_heads" => self.n_heads = num(value)?,
            "model.prefix_len" => self.prefix_len = num(value)?,
            "model.fusion_sigma" => self.fusion_sigma = num(value)?,
            "prompt.pair" => self.forms[0] = parse_form(value)?,
            "prompt.attr" => self.forms[1] = parse_form(value)?,
            "prompt.obj" => self.forms[2] = parse_form(value)?,
            "active.pair" => self.active[0] = parse_bool(value)?,
            "active.attr" => self.active[1] = parse_bool(value)?,
            "active.obj" => self.active[2] = parse_bool(value)?,
            "fusion.order" => self.order = FusionOrder::parse(value)?,
            "fusion.semantics" => self.semantics = IntraSemantics::parse(value)?,
            "alpha" => self.alpha = num(value)?,
            "beta" => self.beta = num(value)?,
            "gamma" => self.gamma = num(value)?,
            "temperature" => self.temperature = num(value)?,
            "train.epochs" => self.epochs = num(value)?,
            "train.lr" => self.lr = num(value)?,
            "train.batch" => self.batch = num(value)?,
            "world" => self.world = WorldChoice::parse(value)?,
            "bias.n_points" => self.sweep_points = num(value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Range checks beyond per-key parsing; errors name the key.
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool); 10] = [
            ("space.unseen_fraction", self.unseen_fraction > 0.0 && self.unseen_fraction < 1.0),
            ("space.noise_sigma", self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()),
            ("model.fusion_sigma", self.fusion_sigma >= 0.0 && self.fusion_sigma.is_finite()),
            ("alpha", self.alpha >= 0.0 && self.alpha.is_finite()),
            ("beta", self.beta >= 0.0 && self.beta.is_finite()),
            ("gamma", self.gamma >= 0.0 && self.gamma.is_finite()),
            ("temperature", self.temperature > 0.0 && self.temperature.is_finite()),
            ("train.lr", self.lr >= 0.0 && self.lr.is_finite()),
            ("train.batch", self.batch >= 1),
            ("bias.n_points", self.sweep_points >= 3),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::Config(format!("value out of range for key {key}")));
            }
        }
        if !self.active.iter().any(|&a| a) {
            return Err(Error::Config("at least one of active.pair/active.attr/active.obj must be true".into()));
        }
        self.model_config().validate()
    }

    /// Parse flat `key = value` text with `#` comments.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected key = value, got {raw:?}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            config
                .set(key, value)
                .map_err(|e| Error::Config(format!("line {line_no}, key {key}: {e}")))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical echo: every key with its effective value, parseable back
    /// into an identical config. Also the hash input.
    pub fn echo(&self) -> String {
        let lines = [
            format!("seed = {}", self.seed),
            format!("space.n_states = {}", self.n_states),
            format!("space.n_objects = {}", self.n_objects),
            format!("space.unseen_fraction = {}", self.unseen_fraction),
            format!("space.samples_per_pair = {}", self.samples_per_pair),
            format!("space.eval_per_pair = {}", self.eval_per_pair),
            format!("space.noise_sigma = {}", self.noise_sigma),
            format!("space.d_in = {}", self.d_in),
            format!("space.d = {}", self.d),
            format!("model.n_heads = {}", self.n_heads),
            format!("model.prefix_len = {}", self.prefix_len),
            format!("model.fusion_sigma = {}", self.fusion_sigma),
            format!("prompt.pair = {}", self.forms[0].key()),
            format!("prompt.attr = {}", self.forms[1].key()),
            format!("prompt.obj = {}", self.forms[2].key()),
            format!("active.pair = {}", self.active[0]),
            format!("active.attr = {}", self.active[1]),
            format!("active.obj = {}", self.active[2]),
            format!("fusion.order = {}", self.order.key()),
            format!("fusion.semantics = {}", self.semantics.key()),
            format!("alpha = {}", self.alpha),
            format!("beta = {}", self.beta),
            format!("gamma = {}", self.gamma),
            format!("temperature = {}", self.temperature),
            format!("train.epochs = {}", self.epochs),
            format!("train.lr = {}", self.lr),
            format!("train.batch = {}", self.batch),
            format!("world = {}", self.world.key()),
            format!("bias.n_points = {}", self.sweep_points),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// FNV-1a hash of the canonical echo; names run directories and stamps
    /// checkpoints.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.echo().as_bytes())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_in: self.d_in,
            d: self.d,
            n_heads: self.n_heads,
            prefix_len: self.prefix_len,
            active: self.active,
            forms: self.forms,
            order: self.order,
            semantics: self.semantics,
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
                temperature: self.temperature,
                ..LossWeights::default()
            },
            fusion_sigma: self.fusion_sigma,
        }
    }

    /// Fit settings; per-epoch validation reports use the open world unless
    /// the config asks for closed only.
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            hyper: AdamHyper { lr: self.lr, ..AdamHyper::default() },
            seed: self.seed,
            world: match self.world {
                WorldChoice::Closed => World::Closed,
                _ => World::Open,
            },
            sweep_points: self.sweep_points,
        }
    }

    /// Human-readable label for single-run report rows: the prompt form per
    /// element plus the fusion order.
    pub fn method_label(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        for (i, element) in Element::ALL.iter().enumerate() {
            if self.active[i] {
                parts.push(format!("{} {{{}}}", form_label(self.forms[i]), element_label(*element)));
            }
        }
        format!("{} / {}", parts.join(", "), self.order.label())
    }
}

/// Display name of a prompt form in result tables.
pub fn form_label(form: PromptForm) -> &'static str {
    match form {
        PromptForm::Hard => "Hard",
        PromptForm::Soft => "Soft",
        PromptForm::HardPlusSoft => "Hard+Soft",
    }
}

/// Display name of an element in result tables.
pub fn element_label(element: Element) -> &'static str {
    match element {
        Element::Pair => "Pair",
        Element::Attr => "State",
        Element::Obj => "Object",
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
