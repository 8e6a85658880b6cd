//! Click / conversion model family.
//!
//! All architectures share per-field embedding tables whose concatenation
//! feeds the network. Multi-task models emit a CTR and a CVR head and derive
//! `p_ctcvr = p_ctr * p_cvr`; the single-task DNN emits only the CTR head.

mod network;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_tensors, write_tensors, NamedTensor};
use crate::nn::{ParamStore, Tape};

pub use network::Heads;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    SharedBottom,
    Mmoe,
    Ple,
    Dnn,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::SharedBottom, Arch::Mmoe, Arch::Ple, Arch::Dnn];

    /// Code stored in the `meta/arch` checkpoint tensor.
    pub fn code(self) -> u32 {
        match self {
            Arch::SharedBottom => 0,
            Arch::Mmoe => 1,
            Arch::Ple => 2,
            Arch::Dnn => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Arch> {
        Arch::ALL.into_iter().find(|a| a.code() == code)
    }

    pub fn is_multi_task(self) -> bool {
        self != Arch::Dnn
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::SharedBottom => "shared_bottom",
            Arch::Mmoe => "mmoe",
            Arch::Ple => "ple",
            Arch::Dnn => "dnn",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.to_string() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown architecture '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub embed_dim: usize,
    /// MMoE experts.
    pub num_experts: usize,
    /// PLE shared experts.
    pub num_shared_experts: usize,
    /// PLE experts per task.
    pub num_task_experts: usize,
    /// Hidden widths of each expert (and of the shared bottom).
    pub expert_widths: Vec<usize>,
    /// Hidden widths of each task tower; for `dnn`, of the single MLP.
    pub tower_widths: Vec<usize>,
    pub field_vocab_sizes: Vec<usize>,
}

impl ModelConfig {
    /// Defaults for `num_fields` fields sharing one vocabulary size.
    pub fn new(arch: Arch, field_vocab_sizes: Vec<usize>) -> Self {
        ModelConfig {
            arch,
            embed_dim: 128,
            num_experts: 8,
            num_shared_experts: 4,
            num_task_experts: 2,
            expert_widths: vec![128],
            tower_widths: vec![256, 128],
            field_vocab_sizes,
        }
    }

    pub fn num_fields(&self) -> usize {
        self.field_vocab_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("embed_dim", self.embed_dim)?;
        if self.field_vocab_sizes.is_empty() {
            return Err(Error::Config(
                "model needs at least one feature field".into(),
            ));
        }
        for &v in &self.field_vocab_sizes {
            positive("field vocabulary size", v)?;
        }
        for &w in self.expert_widths.iter().chain(&self.tower_widths) {
            positive("layer width", w)?;
        }
        match self.arch {
            Arch::SharedBottom => {
                if self.expert_widths.is_empty() {
                    return Err(Error::Config(
                        "shared_bottom needs at least one bottom layer".into(),
                    ));
                }
            }
            Arch::Mmoe => {
                positive("num_experts", self.num_experts)?;
                if self.expert_widths.is_empty() {
                    return Err(Error::Config("mmoe experts need at least one layer".into()));
                }
            }
            Arch::Ple => {
                positive("num_shared_experts", self.num_shared_experts)?;
                positive("num_task_experts", self.num_task_experts)?;
                if self.expert_widths.is_empty() {
                    return Err(Error::Config("ple experts need at least one layer".into()));
                }
            }
            Arch::Dnn => {
                if self.tower_widths.is_empty() {
                    return Err(Error::Config("dnn needs at least one hidden layer".into()));
                }
            }
        }
        Ok(())
    }

    fn meta_tensors(&self) -> Vec<NamedTensor> {
        let widths = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        vec![
            NamedTensor::scalar("meta/arch", self.arch.code() as f64),
            NamedTensor::scalar("meta/embed_dim", self.embed_dim as f64),
            NamedTensor::vector("meta/expert_widths", widths(&self.expert_widths)),
            NamedTensor::vector("meta/field_vocab_sizes", widths(&self.field_vocab_sizes)),
            NamedTensor::scalar("meta/num_experts", self.num_experts as f64),
            NamedTensor::scalar("meta/num_shared_experts", self.num_shared_experts as f64),
            NamedTensor::scalar("meta/num_task_experts", self.num_task_experts as f64),
            NamedTensor::vector("meta/tower_widths", widths(&self.tower_widths)),
        ]
    }

    fn from_meta(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks '{name}'")))
        };
        let as_usize = |x: f64, name: &str| {
            if x >= 0.0 && x.fract() == 0.0 && x < u32::MAX as f64 {
                Ok(x as usize)
            } else {
                Err(Error::Checkpoint(format!(
                    "'{name}' holds non-integer value {x}"
                )))
            }
        };
        let scalar = |name: &str| -> Result<usize> {
            let t = find(name)?;
            match t.data.as_slice() {
                [x] => as_usize(*x, name),
                _ => Err(Error::Checkpoint(format!("'{name}' is not a scalar"))),
            }
        };
        let list = |name: &str| -> Result<Vec<usize>> {
            find(name)?
                .data
                .iter()
                .map(|&x| as_usize(x, name))
                .collect()
        };

        let code = scalar("meta/arch")?;
        let arch = Arch::from_code(code as u32)
            .ok_or_else(|| Error::Checkpoint(format!("unknown architecture code {code}")))?;
        let cfg = ModelConfig {
            arch,
            embed_dim: scalar("meta/embed_dim")?,
            num_experts: scalar("meta/num_experts")?,
            num_shared_experts: scalar("meta/num_shared_experts")?,
            num_task_experts: scalar("meta/num_task_experts")?,
            expert_widths: list("meta/expert_widths")?,
            tower_widths: list("meta/tower_widths")?,
            field_vocab_sizes: list("meta/field_vocab_sizes")?,
        };
        cfg.validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cfg)
    }
}

/// Per-sample head probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPredictions {
    pub p_ctr: Vec<f64>,
    pub p_cvr: Option<Vec<f64>>,
    pub p_ctcvr: Option<Vec<f64>>,
}

impl TaskPredictions {
    pub fn multi_task(p_ctr: Vec<f64>, p_cvr: Vec<f64>) -> Self {
        let p_ctcvr = p_ctr.iter().zip(&p_cvr).map(|(a, b)| a * b).collect();
        TaskPredictions {
            p_ctr,
            p_cvr: Some(p_cvr),
            p_ctcvr: Some(p_ctcvr),
        }
    }

    pub fn single_task(p_ctr: Vec<f64>) -> Self {
        TaskPredictions {
            p_ctr,
            p_cvr: None,
            p_ctcvr: None,
        }
    }

    pub fn len(&self) -> usize {
        self.p_ctr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_ctr.is_empty()
    }

    pub fn ctcvr(&self) -> Result<&[f64]> {
        self.p_ctcvr
            .as_deref()
            .ok_or_else(|| Error::Config("single-task model has no CTCVR head".into()))
    }
}

/// A configured network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    net: network::Network,
}

impl Model {
    /// Build and initialise a model from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, net) = network::Network::build(&config, seed)?;
        Ok(Model {
            config,
            params,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Record the forward pass for `fields` (one index vector per field) on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, fields: &[Vec<usize>]) -> Result<Heads> {
        self.net.forward(&self.config, tape, fields)
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, fields: &[Vec<usize>]) -> Result<TaskPredictions> {
        let mut tape = Tape::new(&self.params);
        let heads = self.forward_tape(&mut tape, fields)?;
        Ok(heads.predictions(&tape))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut all = self.params.to_tensors();
        all.extend(self.config.meta_tensors());
        all.sort_by(|a, b| a.name.cmp(&b.name));
        all
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let config = ModelConfig::from_meta(tensors)?;
        let mut model = Model::new(config, 0)?;
        model.params.assign_from(tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_tensors(std::io::BufWriter::new(file), &self.to_tensors())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Model::from_tensors(&read_tensors(std::io::BufReader::new(file))?)
    }
}
