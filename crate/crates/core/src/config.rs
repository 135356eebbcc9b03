//! Run configuration: flat `key=value` text with `#` comments. Later
//! sources win: defaults, then the file, then `OFCL_SEED`, then flags.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::aks::ClusterParams;
use crate::error::{OfclError, Result};
use crate::features::{BackboneKind, BackboneSpec};
use crate::geometry::Quantile;
use crate::ita::parse_field;
use crate::mob::MarginConfig;
use crate::optim::AdamConfig;
use crate::stream::StreamSpec;
use crate::trainer::{ItaConfig, TrainConfig};

pub const SEED_ENV: &str = "OFCL_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stream: StreamSpec<f64>,
    /// Read episodes from this manifest instead of generating them.
    pub manifest: Option<PathBuf>,
    pub backbone: BackboneKind,
    pub embed_dim: usize,
    pub ita: ItaConfig<f64>,
    pub margin: MarginConfig<f64>,
    pub cluster: ClusterParams<f64>,
    pub train: TrainConfig<f64>,
    pub tpr_target: f64,
    /// Seed for the backbone, tokens and shuffling.
    pub seed: u64,
    /// Seed for stream generation; falls back to `seed`.
    pub stream_seed: Option<u64>,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stream: StreamSpec::default(),
            manifest: None,
            backbone: BackboneKind::RandomProjection,
            embed_dim: 64,
            ita: ItaConfig::default(),
            margin: MarginConfig {
                m: 0.5,
                alpha: 10.0,
                beta: 10.0,
                lambda_r: 0.01,
                sigma: Quantile::new(0.05).expect("valid default"),
            },
            cluster: ClusterParams {
                epsilon: 0.5,
                min_pts: 3,
            },
            train: TrainConfig::default(),
            tpr_target: 0.95,
            seed: 0,
            stream_seed: None,
            output: PathBuf::from("ofcl-run"),
        }
    }
}

/// Every key accepted in config files and `--set` overrides.
pub const KEYS: &[&str] = &[
    "input_dim",
    "num_base_classes",
    "base_samples_per_class",
    "num_tasks",
    "n_way",
    "k_shot",
    "test_per_class",
    "separation",
    "spread",
    "manifest",
    "backbone",
    "embed_dim",
    "tokens_per_task",
    "token_len",
    "top_k",
    "lambda_key",
    "alpha",
    "beta",
    "lambda_r",
    "m",
    "sigma",
    "gamma",
    "epsilon",
    "min_pts",
    "epochs",
    "batch",
    "lr",
    "tpr_target",
    "seed",
    "stream_seed",
    "output",
];

fn value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| OfclError::Config(format!("invalid value '{v}' for {key}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "input_dim" => self.stream.input_dim = value(key, v)?,
            "num_base_classes" => self.stream.num_base_classes = value(key, v)?,
            "base_samples_per_class" => self.stream.base_samples_per_class = value(key, v)?,
            "num_tasks" => self.stream.num_tasks = value(key, v)?,
            "n_way" => self.stream.n_way = value(key, v)?,
            "k_shot" => self.stream.k_shot = value(key, v)?,
            "test_per_class" => self.stream.test_per_class = value(key, v)?,
            "separation" => self.stream.cluster_separation = value(key, v)?,
            "spread" => self.stream.cluster_spread = value(key, v)?,
            "manifest" => self.manifest = Some(PathBuf::from(v)),
            "backbone" => {
                self.backbone =
                    BackboneKind::from_name(v).map_err(|e| OfclError::Config(e.to_string()))?
            }
            "embed_dim" => self.embed_dim = value(key, v)?,
            "tokens_per_task" => self.ita.tokens_per_task = value(key, v)?,
            "token_len" => self.ita.token_len = value(key, v)?,
            "top_k" => self.ita.top_k = value(key, v)?,
            "lambda_key" => self.ita.lambda_key = value(key, v)?,
            "alpha" => self.margin.alpha = value(key, v)?,
            "beta" => self.margin.beta = value(key, v)?,
            "lambda_r" => self.margin.lambda_r = value(key, v)?,
            "m" => self.margin.m = value(key, v)?,
            "sigma" => {
                self.margin.sigma =
                    Quantile::new(value(key, v)?).map_err(|e| OfclError::Config(e.to_string()))?;
            }
            "gamma" => self.train.gamma = value(key, v)?,
            "epsilon" => self.cluster.epsilon = value(key, v)?,
            "min_pts" => self.cluster.min_pts = value(key, v)?,
            "epochs" => self.train.epochs = value(key, v)?,
            "batch" => self.train.batch_size = value(key, v)?,
            "lr" => self.train.adam.learning_rate = value(key, v)?,
            "tpr_target" => self.tpr_target = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            "stream_seed" => self.stream_seed = Some(value(key, v)?),
            "output" => self.output = PathBuf::from(v),
            other => return Err(OfclError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a config file's contents; errors cite the line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                OfclError::parse(i + 1, format!("expected key=value, got '{line}'"))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| OfclError::parse(i + 1, e.to_string()))?;
        }
        Ok(())
    }

    /// Layers the sources in precedence order and validates the result.
    pub fn resolve(
        file_text: Option<&str>,
        env_seed: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(text) = file_text {
            cfg.apply_text(text)?;
        }
        if let Some(s) = env_seed {
            cfg.seed = parse_field(0, s.trim()).map_err(|_| {
                OfclError::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer"))
            })?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| OfclError::Config(e.to_string()));
        wrap(self.stream_spec().validate())?;
        wrap(self.margin.validate())?;
        wrap(self.train_config().validate())?;
        wrap(ClusterParams::new(self.cluster.epsilon, self.cluster.min_pts).map(|_| ()))?;
        wrap(
            AdamConfig::new(
                self.train.adam.learning_rate,
                self.train.adam.beta1,
                self.train.adam.beta2,
                self.train.adam.epsilon,
            )
            .map(|_| ()),
        )?;
        if self.embed_dim == 0
            || self.ita.token_len == 0
            || self.ita.top_k == 0
            || self.ita.top_k > self.ita.tokens_per_task
        {
            return Err(OfclError::Config(
                "need embed_dim, token_len >= 1 and 1 <= top_k <= tokens_per_task".into(),
            ));
        }
        if !(self.tpr_target > 0.0 && self.tpr_target <= 1.0) {
            return Err(OfclError::Config("tpr_target must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn stream_spec(&self) -> StreamSpec<f64> {
        StreamSpec {
            seed: self.stream_seed.unwrap_or(self.seed),
            ..self.stream
        }
    }

    pub fn train_config(&self) -> TrainConfig<f64> {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn backbone_spec(&self, input_dim: usize) -> BackboneSpec {
        let output_dim = match self.backbone {
            BackboneKind::Identity => input_dim,
            BackboneKind::RandomProjection => self.embed_dim,
        };
        BackboneSpec {
            kind: self.backbone,
            input_dim,
            output_dim,
            seed: self.seed,
        }
    }

    /// Canonical text form; `apply_text` on it reproduces `self`.
    pub fn render(&self) -> String {
        let s = &self.stream;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("input_dim", s.input_dim.to_string());
        kv("num_base_classes", s.num_base_classes.to_string());
        kv(
            "base_samples_per_class",
            s.base_samples_per_class.to_string(),
        );
        kv("num_tasks", s.num_tasks.to_string());
        kv("n_way", s.n_way.to_string());
        kv("k_shot", s.k_shot.to_string());
        kv("test_per_class", s.test_per_class.to_string());
        kv("separation", s.cluster_separation.to_string());
        kv("spread", s.cluster_spread.to_string());
        if let Some(m) = &self.manifest {
            kv("manifest", m.display().to_string());
        }
        kv("backbone", self.backbone.name().to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("tokens_per_task", self.ita.tokens_per_task.to_string());
        kv("token_len", self.ita.token_len.to_string());
        kv("top_k", self.ita.top_k.to_string());
        kv("lambda_key", self.ita.lambda_key.to_string());
        kv("alpha", self.margin.alpha.to_string());
        kv("beta", self.margin.beta.to_string());
        kv("lambda_r", self.margin.lambda_r.to_string());
        kv("m", self.margin.m.to_string());
        kv("sigma", self.margin.sigma.sigma().to_string());
        kv("gamma", self.train.gamma.to_string());
        kv("epsilon", self.cluster.epsilon.to_string());
        kv("min_pts", self.cluster.min_pts.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("batch", self.train.batch_size.to_string());
        kv("lr", self.train.adam.learning_rate.to_string());
        kv("tpr_target", self.tpr_target.to_string());
        kv("seed", self.seed.to_string());
        if let Some(s) = self.stream_seed {
            kv("stream_seed", s.to_string());
        }
        kv("output", self.output.display().to_string());
        out
    }
}
