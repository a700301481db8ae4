//! Flags, the key=value config file, and their merge.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use ddad_core::data::SyntheticParams;
use ddad_core::eval::DEFAULT_AR_GRID;
use ddad_core::{BackboneKind, DdadError, Result, ScoreKind, SigmaPooling, TrainConfig};
use serde::Serialize;

/// Options shared by every subcommand. Any of them may also come from a
/// `--config` file; flags win.
#[derive(Args, Debug, Clone, Default)]
pub struct Options {
    /// key=value file with defaults for the flags below
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// dataset root with normal/, unlabeled/, test/normal/, test/abnormal/
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// ae or aeu
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
    /// networks per module
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// anomaly rate of the synthetic unlabeled pool
    #[arg(long)]
    pub ar: Option<f64>,
    /// comma-separated score kinds
    #[arg(long, value_delimiter = ',')]
    pub score: Option<Vec<ScoreKind>>,
    /// output directory, created if absent
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// directory holding module{A|B}_member{i}.ckpt (default: --out)
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// scores CSV written by `score` (default: <out>/scores.csv)
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// comma-separated anomaly rates for `sweep`
    #[arg(long, value_delimiter = ',')]
    pub ar_grid: Option<Vec<f64>>,
    /// root_mean_variance or mean_sigma
    #[arg(long)]
    pub sigma_pooling: Option<SigmaPooling>,
    #[arg(long)]
    pub n_normal: Option<usize>,
    #[arg(long)]
    pub m_unlabeled: Option<usize>,
    #[arg(long)]
    pub t_normal: Option<usize>,
    #[arg(long)]
    pub t_abnormal: Option<usize>,
    /// also write per-image anomaly maps (PGM and raw f32)
    #[arg(long)]
    pub maps: bool,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| DdadError::Config(format!("config key '{key}': cannot parse '{value}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl Options {
    /// Reads `key = value` lines; `#` starts a comment. Keys are the flag
    /// names with either `-` or `_`.
    pub fn from_config_file(path: &Path) -> Result<Options> {
        let text = fs::read_to_string(path)
            .map_err(|e| DdadError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        let mut o = Options::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(DdadError::Config(format!("{}:{}: expected key = value", path.display(), n + 1)));
            };
            let key = key.trim().replace('-', "_");
            let value = value.trim();
            match key.as_str() {
                "data" => o.data = Some(value.into()),
                "backbone" => o.backbone = Some(parse(&key, value)?),
                "k" => o.k = Some(parse(&key, value)?),
                "epochs" => o.epochs = Some(parse(&key, value)?),
                "lr" => o.lr = Some(parse(&key, value)?),
                "batch_size" => o.batch_size = Some(parse(&key, value)?),
                "seed" => o.seed = Some(parse(&key, value)?),
                "ar" => o.ar = Some(parse(&key, value)?),
                "score" => o.score = Some(parse_list(&key, value)?),
                "out" => o.out = Some(value.into()),
                "checkpoints" => o.checkpoints = Some(value.into()),
                "scores" => o.scores = Some(value.into()),
                "ar_grid" => o.ar_grid = Some(parse_list(&key, value)?),
                "sigma_pooling" => o.sigma_pooling = Some(parse(&key, value)?),
                "n_normal" => o.n_normal = Some(parse(&key, value)?),
                "m_unlabeled" => o.m_unlabeled = Some(parse(&key, value)?),
                "t_normal" => o.t_normal = Some(parse(&key, value)?),
                "t_abnormal" => o.t_abnormal = Some(parse(&key, value)?),
                "maps" => o.maps = parse(&key, value)?,
                other => return Err(DdadError::Config(format!("{}:{}: unknown key '{other}'", path.display(), n + 1))),
            }
        }
        Ok(o)
    }

    /// Fills every unset flag from `file`.
    pub fn or(self, file: Options) -> Options {
        Options {
            config: self.config,
            data: self.data.or(file.data),
            backbone: self.backbone.or(file.backbone),
            k: self.k.or(file.k),
            epochs: self.epochs.or(file.epochs),
            lr: self.lr.or(file.lr),
            batch_size: self.batch_size.or(file.batch_size),
            seed: self.seed.or(file.seed),
            ar: self.ar.or(file.ar),
            score: self.score.or(file.score),
            out: self.out.or(file.out),
            checkpoints: self.checkpoints.or(file.checkpoints),
            scores: self.scores.or(file.scores),
            ar_grid: self.ar_grid.or(file.ar_grid),
            sigma_pooling: self.sigma_pooling.or(file.sigma_pooling),
            n_normal: self.n_normal.or(file.n_normal),
            m_unlabeled: self.m_unlabeled.or(file.m_unlabeled),
            t_normal: self.t_normal.or(file.t_normal),
            t_abnormal: self.t_abnormal.or(file.t_abnormal),
            maps: self.maps || file.maps,
        }
    }

    /// Flags merged over the config file, if one was given.
    pub fn resolve(self) -> Result<Options> {
        match self.config.clone() {
            Some(path) => Ok(self.or(Options::from_config_file(&path)?)),
            None => Ok(self),
        }
    }

    pub fn backbone(&self) -> BackboneKind {
        self.backbone.unwrap_or(BackboneKind::Ae)
    }

    pub fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("ddad-out"))
    }

    pub fn data(&self, command: &str) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| DdadError::Config(format!("`{command}` needs --data")))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            k: self.k.unwrap_or(d.k),
            base_seed: self.seed.unwrap_or(d.base_seed),
            ..d
        };
        c.validate()?;
        Ok(c)
    }

    pub fn synthetic(&self) -> SyntheticParams {
        SyntheticParams {
            n_normal: self.n_normal.unwrap_or(512),
            m_unlabeled: self.m_unlabeled.unwrap_or(512),
            anomaly_rate: self.ar.unwrap_or(0.6),
            t_normal: self.t_normal.unwrap_or(128),
            t_abnormal: self.t_abnormal.unwrap_or(128),
            seed: self.seed.unwrap_or(0),
        }
    }

    /// Requested score kinds, or the standard set for `backbone`.
    pub fn score_kinds(&self, backbone: BackboneKind) -> Vec<ScoreKind> {
        self.score.clone().unwrap_or_else(|| {
            let mut kinds = vec![ScoreKind::Rec, ScoreKind::Intra, ScoreKind::Inter];
            if backbone == BackboneKind::Aeu {
                kinds.extend([ScoreKind::IntraRefined, ScoreKind::InterRefined]);
            }
            kinds
        })
    }

    pub fn ar_grid(&self) -> Vec<f64> {
        self.ar_grid.clone().unwrap_or_else(|| DEFAULT_AR_GRID.to_vec())
    }

    pub fn sigma_pooling(&self) -> SigmaPooling {
        self.sigma_pooling.unwrap_or_default()
    }
}

/// Fully resolved settings as recorded in a manifest.
#[derive(Debug, Serialize)]
pub struct ResolvedConfig {
    pub data: Option<PathBuf>,
    pub backbone: BackboneKind,
    pub train: TrainConfig,
    pub synthetic: SyntheticParams,
    pub score: Vec<ScoreKind>,
    pub sigma_pooling: SigmaPooling,
    pub ar_grid: Vec<f64>,
    pub out: PathBuf,
    pub checkpoints: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub maps: bool,
}

impl ResolvedConfig {
    pub fn new(o: &Options) -> Result<Self> {
        Ok(Self {
            data: o.data.clone(),
            backbone: o.backbone(),
            train: o.train_config()?,
            synthetic: o.synthetic(),
            score: o.score_kinds(o.backbone()),
            sigma_pooling: o.sigma_pooling(),
            ar_grid: o.ar_grid(),
            out: o.out(),
            checkpoints: o.checkpoints.clone(),
            scores: o.scores.clone(),
            maps: o.maps,
        })
    }
}
