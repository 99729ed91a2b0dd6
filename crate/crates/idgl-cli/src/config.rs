//! Run configuration: flag/file overrides layered over dataset presets.
//!
//! Precedence, lowest to highest: built-in defaults, the preset for the
//! named dataset, `--config` file entries, explicit command-line flags.

use std::path::{Path, PathBuf};

use idgl_core::data_io::{paper_split, SplitSpec};
use idgl_core::trainer::{paper_hyperparams, HyperParams, Variant};
use idgl_core::{IdglError, Result};

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub variant: Option<Variant>,
    pub seeds: Option<Vec<u64>>,
    pub data_dir: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub eta: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub eps: Option<f64>,
    pub m: Option<usize>,
    pub delta: Option<f64>,
    pub t_max: Option<usize>,
    pub k: Option<usize>,
    pub anchors: Option<usize>,
    pub hidden: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub dropout: Option<f64>,
    pub iter_dropout: Option<f64>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub split_train: Option<usize>,
    pub split_dev: Option<usize>,
    pub split_test: Option<usize>,
    pub no_reg: bool,
}

fn parse_as<T: std::str::FromStr>(path: &Path, line_no: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| IdglError::Parse {
        file: path.display().to_string(),
        line: line_no,
        msg: format!("bad value {v:?} for {key}"),
    })
}

pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| IdglError::InvalidInput(format!("bad seed {t:?}")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(IdglError::InvalidInput("empty seed list".into()));
    }
    Ok(seeds)
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| IdglError::InvalidInput(format!("bad number {t:?}")))
        })
        .collect()
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| IdglError::InvalidInput(format!("bad count {t:?}")))
        })
        .collect()
}

fn parse_variant(path: &Path, line_no: usize, v: &str) -> Result<Variant> {
    match v {
        "idgl" => Ok(Variant::Idgl),
        "idgl-anch" => Ok(Variant::IdglAnch),
        other => Err(IdglError::Parse {
            file: path.display().to_string(),
            line: line_no,
            msg: format!("unknown variant {other:?}; use idgl or idgl-anch"),
        }),
    }
}

/// `key = value` per line, `#` comments, keys named like the long flags.
pub fn parse_config(path: &Path) -> Result<Overrides> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| IdglError::Io { path: path.display().to_string(), source: e })?;
    let mut o = Overrides::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| IdglError::Parse {
            file: path.display().to_string(),
            line: line_no,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let (key, v) = (key.trim(), value.trim());
        match key {
            "dataset" => o.dataset = Some(v.to_string()),
            "variant" => o.variant = Some(parse_variant(path, line_no, v)?),
            "seeds" => {
                o.seeds = Some(parse_seed_list(v).map_err(|e| IdglError::Parse {
                    file: path.display().to_string(),
                    line: line_no,
                    msg: e.to_string(),
                })?)
            }
            "data-dir" => o.data_dir = Some(PathBuf::from(v)),
            "lambda" => o.lambda = Some(parse_as(path, line_no, key, v)?),
            "eta" => o.eta = Some(parse_as(path, line_no, key, v)?),
            "alpha" => o.alpha = Some(parse_as(path, line_no, key, v)?),
            "beta" => o.beta = Some(parse_as(path, line_no, key, v)?),
            "gamma" => o.gamma = Some(parse_as(path, line_no, key, v)?),
            "eps" => o.eps = Some(parse_as(path, line_no, key, v)?),
            "m" => o.m = Some(parse_as(path, line_no, key, v)?),
            "delta" => o.delta = Some(parse_as(path, line_no, key, v)?),
            "t-max" => o.t_max = Some(parse_as(path, line_no, key, v)?),
            "k" => o.k = Some(parse_as(path, line_no, key, v)?),
            "anchors" => o.anchors = Some(parse_as(path, line_no, key, v)?),
            "hidden" => o.hidden = Some(parse_as(path, line_no, key, v)?),
            "lr" => o.lr = Some(parse_as(path, line_no, key, v)?),
            "weight-decay" => o.weight_decay = Some(parse_as(path, line_no, key, v)?),
            "dropout" => o.dropout = Some(parse_as(path, line_no, key, v)?),
            "iter-dropout" => o.iter_dropout = Some(parse_as(path, line_no, key, v)?),
            "epochs" => o.epochs = Some(parse_as(path, line_no, key, v)?),
            "patience" => o.patience = Some(parse_as(path, line_no, key, v)?),
            "split-train" => o.split_train = Some(parse_as(path, line_no, key, v)?),
            "split-dev" => o.split_dev = Some(parse_as(path, line_no, key, v)?),
            "split-test" => o.split_test = Some(parse_as(path, line_no, key, v)?),
            "no-reg" => o.no_reg = parse_as(path, line_no, key, v)?,
            other => {
                return Err(IdglError::Parse {
                    file: path.display().to_string(),
                    line: line_no,
                    msg: format!("unknown key {other:?}"),
                })
            }
        }
    }
    Ok(o)
}

/// Field-wise overlay: `high` wins wherever it is set.
pub fn merge(high: Overrides, low: Overrides) -> Overrides {
    Overrides {
        dataset: high.dataset.or(low.dataset),
        variant: high.variant.or(low.variant),
        seeds: high.seeds.or(low.seeds),
        data_dir: high.data_dir.or(low.data_dir),
        lambda: high.lambda.or(low.lambda),
        eta: high.eta.or(low.eta),
        alpha: high.alpha.or(low.alpha),
        beta: high.beta.or(low.beta),
        gamma: high.gamma.or(low.gamma),
        eps: high.eps.or(low.eps),
        m: high.m.or(low.m),
        delta: high.delta.or(low.delta),
        t_max: high.t_max.or(low.t_max),
        k: high.k.or(low.k),
        anchors: high.anchors.or(low.anchors),
        hidden: high.hidden.or(low.hidden),
        lr: high.lr.or(low.lr),
        weight_decay: high.weight_decay.or(low.weight_decay),
        dropout: high.dropout.or(low.dropout),
        iter_dropout: high.iter_dropout.or(low.iter_dropout),
        epochs: high.epochs.or(low.epochs),
        patience: high.patience.or(low.patience),
        split_train: high.split_train.or(low.split_train),
        split_dev: high.split_dev.or(low.split_dev),
        split_test: high.split_test.or(low.split_test),
        no_reg: high.no_reg || low.no_reg,
    }
}

/// Preset for the dataset (when one exists) with overrides applied, for one
/// run seed. `--no-reg` zeroes all three regularizer weights.
pub fn assemble_hyperparams(o: &Overrides, variant: Variant, seed: u64) -> HyperParams {
    let mut hp = o
        .dataset
        .as_deref()
        .and_then(|d| paper_hyperparams(d, variant))
        .unwrap_or_default();
    hp.seed = seed;
    if let Some(v) = o.lambda {
        hp.lambda_ = v;
    }
    if let Some(v) = o.eta {
        hp.eta = v;
    }
    if let Some(v) = o.alpha {
        hp.alpha = v;
    }
    if let Some(v) = o.beta {
        hp.beta = v;
    }
    if let Some(v) = o.gamma {
        hp.gamma = v;
    }
    if let Some(v) = o.eps {
        hp.eps = v;
    }
    if let Some(v) = o.m {
        hp.m = v;
    }
    if let Some(v) = o.delta {
        hp.delta = v;
    }
    if let Some(v) = o.t_max {
        hp.t_max = v;
    }
    if let Some(v) = o.k {
        hp.k = Some(v);
    }
    if let Some(v) = o.anchors {
        hp.s = v;
    }
    if let Some(v) = o.hidden {
        hp.hidden = v;
    }
    if let Some(v) = o.lr {
        hp.lr = v;
    }
    if let Some(v) = o.weight_decay {
        hp.weight_decay = v;
    }
    if let Some(v) = o.dropout {
        hp.dropout = v;
    }
    if let Some(v) = o.iter_dropout {
        hp.iter_dropout = v;
    }
    if let Some(v) = o.epochs {
        hp.epochs = v;
    }
    if let Some(v) = o.patience {
        hp.patience = v;
    }
    if o.no_reg {
        hp.alpha = 0.0;
        hp.beta = 0.0;
        hp.gamma = 0.0;
    }
    hp
}

/// Published split for the dataset with any size overrides, for one seed.
pub fn assemble_split(o: &Overrides, dataset: &str, seed: u64) -> Result<SplitSpec> {
    let mut split = paper_split(dataset, seed).ok_or_else(|| {
        IdglError::InvalidInput(format!(
            "unknown dataset {dataset}; expected cora, citeseer, pubmed, wine, cancer, or digits"
        ))
    })?;
    if let Some(v) = o.split_train {
        split.train = v;
    }
    if let Some(v) = o.split_dev {
        split.dev = v;
    }
    if let Some(v) = o.split_test {
        split.test = Some(v);
    }
    Ok(split)
}
