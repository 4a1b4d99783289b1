//! Text checkpoints: a header line, then `name<TAB>shape<TAB>values` records.
//!
//! Tensor values are the hex images of their IEEE-754 bits, so a round trip
//! is exact. Records with shape `text` carry a plain string instead.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{AdamState, TrainConfig, TrainState};
use crate::diffmath::Tensor;
use crate::encoders::{ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const CHECKPOINT_HEADER: &str = "NRCCR-CKPT v1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelParams,
    pub adam: Option<AdamState>,
    /// Parameters of the best validation epoch, kept for resuming.
    pub best_params: Option<ParamSet>,
    pub epoch: usize,
    pub lr: f64,
    pub best_val_sumr: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub stopped: bool,
}

impl Checkpoint {
    /// Best-validation parameters only.
    pub fn best(state: &TrainState, config: &TrainConfig) -> Self {
        Checkpoint {
            config: config.clone(),
            model: state.best_model(),
            adam: None,
            best_params: None,
            epoch: state.best_epoch,
            lr: state.lr,
            best_val_sumr: state.best_val_sumr,
            best_epoch: state.best_epoch,
            since_improvement: state.since_improvement,
            stopped: state.stopped,
        }
    }

    /// Full resumable state after the latest epoch.
    pub fn last(state: &TrainState, config: &TrainConfig) -> Self {
        Checkpoint {
            config: config.clone(),
            model: state.model.clone(),
            adam: Some(state.adam.clone()),
            best_params: Some(state.best_params.clone()),
            epoch: state.epoch,
            lr: state.lr,
            best_val_sumr: state.best_val_sumr,
            best_epoch: state.best_epoch,
            since_improvement: state.since_improvement,
            stopped: state.stopped,
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        let (Some(adam), Some(best_params)) = (self.adam, self.best_params) else {
            return Err(Error::Invalid("checkpoint holds no optimizer state to resume from".into()));
        };
        Ok(TrainState {
            model: self.model,
            adam,
            epoch: self.epoch,
            lr: self.lr,
            best_val_sumr: self.best_val_sumr,
            best_params,
            best_epoch: self.best_epoch,
            since_improvement: self.since_improvement,
            stopped: self.stopped,
        })
    }
}

fn dims_pairs(d: &ModelDims) -> [(&'static str, usize); 9] {
    [
        ("frame_dim", d.frame_dim),
        ("word_dim", d.word_dim),
        ("common_dim", d.common_dim),
        ("heads", d.heads),
        ("ffn_dim", d.ffn_dim),
        ("src_vocab", d.src_vocab),
        ("tgt_vocab", d.tgt_vocab),
        ("max_positions", d.max_positions),
        ("max_frames", d.max_frames),
    ]
}

fn text_record(out: &mut String, name: &str, value: &str) {
    writeln!(out, "{name}\ttext\t{value}").unwrap();
}

fn tensor_record(out: &mut String, name: &str, shape: &[usize], data: &[f64]) {
    out.push_str(name);
    out.push('\t');
    if shape.is_empty() {
        out.push_str("scalar");
    } else {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        out.push_str(&dims.join(","));
    }
    out.push('\t');
    for (i, x) in data.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{:016x}", x.to_bits()).unwrap();
    }
    out.push('\n');
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    for (k, v) in ckpt.config.pairs() {
        text_record(&mut out, &format!("config.{k}"), &v);
    }
    for (k, v) in dims_pairs(&ckpt.model.model.dims) {
        text_record(&mut out, &format!("dims.{k}"), &v.to_string());
    }
    for (k, v) in [
        ("epoch", ckpt.epoch),
        ("best_epoch", ckpt.best_epoch),
        ("since_improvement", ckpt.since_improvement),
    ] {
        text_record(&mut out, &format!("meta.{k}"), &v.to_string());
    }
    text_record(&mut out, "meta.stopped", &ckpt.stopped.to_string());
    tensor_record(&mut out, "meta.lr", &[], &[ckpt.lr]);
    tensor_record(&mut out, "meta.best_val_sumr", &[], &[ckpt.best_val_sumr]);
    let params = &ckpt.model.params;
    for (name, t) in params.iter() {
        tensor_record(&mut out, &format!("param.{name}"), t.shape(), t.data());
    }
    if let Some(adam) = &ckpt.adam {
        for (i, (name, t)) in params.iter().enumerate() {
            tensor_record(&mut out, &format!("adam.m.{name}"), t.shape(), &adam.m[i]);
            tensor_record(&mut out, &format!("adam.v.{name}"), t.shape(), &adam.v[i]);
            text_record(&mut out, &format!("adam.steps.{name}"), &adam.steps[i].to_string());
        }
    }
    if let Some(best) = &ckpt.best_params {
        for (name, t) in best.iter() {
            tensor_record(&mut out, &format!("best.{name}"), t.shape(), t.data());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

enum Record {
    Text(String),
    Tensor(Tensor),
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != CHECKPOINT_HEADER {
        return Err(Error::Version(format!("checkpoint header `{header}`, expected `{CHECKPOINT_HEADER}`")));
    }
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut records: HashMap<String, Record> = HashMap::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let mut f = line.splitn(3, '\t');
        let (Some(name), Some(shape), Some(values)) = (f.next(), f.next(), f.next()) else {
            return Err(parse_err(n, "expected name, shape and values".into()));
        };
        let rec = if shape == "text" {
            Record::Text(values.to_string())
        } else {
            let dims: Vec<usize> = if shape == "scalar" {
                Vec::new()
            } else {
                shape
                    .split(',')
                    .map(|d| d.parse().map_err(|_| parse_err(n, format!("bad shape `{shape}`"))))
                    .collect::<Result<_>>()?
            };
            let data: Vec<f64> = values
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|h| {
                    u64::from_str_radix(h, 16)
                        .map(f64::from_bits)
                        .map_err(|_| parse_err(n, format!("bad hex value `{h}`")))
                })
                .collect::<Result<_>>()?;
            let expect: usize = dims.iter().product();
            if data.len() != expect {
                return Err(parse_err(n, format!("`{name}` has {} values for shape {shape}", data.len())));
            }
            if dims.iter().any(|&d| d == 0) {
                return Err(parse_err(n, format!("bad shape `{shape}`")));
            }
            // `meta.best_val_sumr` is −∞ before the first validation.
            if name.starts_with("meta.") {
                Record::Tensor(Tensor::raw(dims, data))
            } else {
                Record::Tensor(Tensor::new(dims, data).map_err(|e| parse_err(n, e.to_string()))?)
            }
        };
        if records.insert(name.to_string(), rec).is_some() {
            return Err(parse_err(n, format!("duplicate record `{name}`")));
        }
    }

    let text_of = |key: &str| -> Result<&str> {
        match records.get(key) {
            Some(Record::Text(s)) => Ok(s),
            _ => Err(Error::Invalid(format!("checkpoint lacks `{key}`"))),
        }
    };
    let mut config = TrainConfig::default();
    for (k, _) in TrainConfig::default().pairs() {
        config.set(k, text_of(&format!("config.{k}"))?)?;
    }
    let dim = |k: &str| -> Result<usize> { crate::config::parse_value(k, text_of(&format!("dims.{k}"))?) };
    let dims = ModelDims {
        frame_dim: dim("frame_dim")?,
        word_dim: dim("word_dim")?,
        common_dim: dim("common_dim")?,
        heads: dim("heads")?,
        ffn_dim: dim("ffn_dim")?,
        src_vocab: dim("src_vocab")?,
        tgt_vocab: dim("tgt_vocab")?,
        max_positions: dim("max_positions")?,
        max_frames: dim("max_frames")?,
    };
    let meta = |k: &str| -> Result<usize> { crate::config::parse_value(k, text_of(&format!("meta.{k}"))?) };
    let scalar = |key: &str| -> Result<f64> {
        match records.get(key) {
            Some(Record::Tensor(t)) if t.is_scalar() => Ok(t.item()),
            _ => Err(Error::Invalid(format!("checkpoint lacks scalar `{key}`"))),
        }
    };
    let mut model = ModelParams::init(dims, 0)?;
    let tensors_with = |prefix: &str, required: bool| -> Result<Option<Vec<Tensor>>> {
        let mut out = Vec::with_capacity(model.params.len());
        for (name, t) in model.params.iter() {
            match records.get(&format!("{prefix}{name}")) {
                Some(Record::Tensor(x)) if x.shape() == t.shape() => out.push(x.clone()),
                Some(_) => return Err(Error::Shape(format!("`{prefix}{name}` does not match {:?}", t.shape()))),
                None if !required && out.is_empty() => return Ok(None),
                None => return Err(Error::Invalid(format!("checkpoint lacks `{prefix}{name}`"))),
            }
        }
        Ok(Some(out))
    };
    let params = tensors_with("param.", true)?.expect("required");
    let adam_m = tensors_with("adam.m.", false)?;
    let adam_v = tensors_with("adam.v.", false)?;
    let best = tensors_with("best.", false)?;
    let adam = match (adam_m, adam_v) {
        (Some(m), Some(v)) => {
            let steps = model
                .params
                .iter()
                .map(|(name, _)| {
                    let key = format!("adam.steps.{name}");
                    crate::config::parse_value::<u64>(&key, text_of(&key)?)
                })
                .collect::<Result<_>>()?;
            Some(AdamState {
                m: m.into_iter().map(Tensor::into_data).collect(),
                v: v.into_iter().map(Tensor::into_data).collect(),
                steps,
            })
        }
        (None, None) => None,
        _ => return Err(Error::Invalid("checkpoint has partial optimizer state".into())),
    };
    let best_params = match best {
        Some(b) => {
            let mut set = model.params.clone();
            set.replace_all(b)?;
            Some(set)
        }
        None => None,
    };
    model.params.replace_all(params)?;
    Ok(Checkpoint {
        config,
        model,
        adam,
        best_params,
        epoch: meta("epoch")?,
        lr: scalar("meta.lr")?,
        best_val_sumr: scalar("meta.best_val_sumr")?,
        best_epoch: meta("best_epoch")?,
        since_improvement: meta("since_improvement")?,
        stopped: crate::config::parse_bool("meta.stopped", text_of("meta.stopped")?)?,
    })
}
