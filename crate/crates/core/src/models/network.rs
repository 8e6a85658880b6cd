use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Arch, ModelConfig, TaskPredictions};
use crate::error::{Error, Result};
use crate::loss::CombinedLoss;
use crate::nn::{
    dense_forward, softmax_gate, Activation, NodeId, ParamId, ParamKind, ParamStore, Tape,
};

const TASKS: [&str; 2] = ["ctr", "cvr"];
const EMBED_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// Stack of ReLU layers whose first layer reads the field embeddings.
#[derive(Debug, Clone)]
struct FieldMlp {
    first: Dense,
    rest: Vec<Dense>,
}

#[derive(Debug, Clone)]
struct Tower {
    hidden: Vec<Dense>,
    out: Dense,
}

#[derive(Debug, Clone)]
enum Body {
    SharedBottom {
        bottom: FieldMlp,
    },
    Mmoe {
        experts: Vec<FieldMlp>,
        gates: Vec<Dense>,
    },
    Ple {
        shared: Vec<FieldMlp>,
        task: Vec<Vec<FieldMlp>>,
        gates: Vec<Dense>,
    },
    Dnn {
        mlp: FieldMlp,
    },
}

#[derive(Debug, Clone)]
pub(super) struct Network {
    embeddings: Vec<ParamId>,
    body: Body,
    towers: Vec<Tower>,
}

/// Tape nodes of the model outputs, each `n x 1`.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub ctr: NodeId,
    pub cvr: Option<NodeId>,
    pub ctcvr: Option<NodeId>,
}

impl Heads {
    pub fn predictions(&self, tape: &Tape<'_>) -> TaskPredictions {
        let col = |n: NodeId| tape.value(n).column(0).to_vec();
        TaskPredictions {
            p_ctr: col(self.ctr),
            p_cvr: self.cvr.map(col),
            p_ctcvr: self.ctcvr.map(col),
        }
    }

    /// Backward seeds carrying the loss gradients w.r.t. the head scores.
    pub fn seeds(&self, loss: &CombinedLoss) -> Result<Vec<(NodeId, Array2<f64>)>> {
        let column =
            |g: &[f64]| Array2::from_shape_vec((g.len(), 1), g.to_vec()).expect("column shape");
        let mut seeds = vec![(self.ctr, column(&loss.grad_ctr))];
        match (self.ctcvr, &loss.grad_ctcvr) {
            (Some(node), Some(g)) => seeds.push((node, column(g))),
            (None, None) => {}
            _ => {
                return Err(Error::Config(
                    "loss and model disagree on the CTCVR head".into(),
                ))
            }
        }
        Ok(seeds)
    }
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Dense> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit));
        let w = self
            .store
            .insert(format!("{name}/w"), ParamKind::Weight, w)?;
        let b = self.store.insert(
            format!("{name}/b"),
            ParamKind::Bias,
            Array2::zeros((1, fan_out)),
        )?;
        Ok(Dense { w, b })
    }

    fn field_mlp(&mut self, name: &str, input: usize, widths: &[usize]) -> Result<FieldMlp> {
        let first = self.dense(&format!("{name}/0"), input, widths[0])?;
        let rest = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| self.dense(&format!("{name}/{}", l + 1), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(FieldMlp { first, rest })
    }
}

/// Embedding rows used by one field of a batch.
struct FieldInput {
    rows: NodeId,
    /// Batch position -> row of `rows`, which holds the distinct indices.
    local: Vec<usize>,
}

impl Network {
    pub(super) fn build(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore, Network)> {
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = cfg.embed_dim;
        let input = d * cfg.num_fields();

        let normal = Normal::new(0.0, EMBED_STD).expect("valid std");
        let mut embeddings = Vec::with_capacity(cfg.num_fields());
        for (f, &vocab) in cfg.field_vocab_sizes.iter().enumerate() {
            let rng = &mut b.rng;
            let table = Array2::from_shape_simple_fn((vocab, d), || normal.sample(rng));
            embeddings.push(
                b.store
                    .insert(format!("emb/{f}"), ParamKind::Embedding, table)?,
            );
        }

        let experts = &cfg.expert_widths;
        let (body, rep_width) = match cfg.arch {
            Arch::SharedBottom => {
                let bottom = b.field_mlp("bottom", input, experts)?;
                (Body::SharedBottom { bottom }, *experts.last().unwrap())
            }
            Arch::Mmoe => {
                let ex = (0..cfg.num_experts)
                    .map(|e| b.field_mlp(&format!("expert/{e}"), input, experts))
                    .collect::<Result<_>>()?;
                let gates = TASKS
                    .iter()
                    .map(|t| b.dense(&format!("gate/{t}"), input, cfg.num_experts))
                    .collect::<Result<_>>()?;
                (Body::Mmoe { experts: ex, gates }, *experts.last().unwrap())
            }
            Arch::Ple => {
                let shared = (0..cfg.num_shared_experts)
                    .map(|e| b.field_mlp(&format!("shared_expert/{e}"), input, experts))
                    .collect::<Result<_>>()?;
                let task = TASKS
                    .iter()
                    .map(|t| {
                        (0..cfg.num_task_experts)
                            .map(|e| b.field_mlp(&format!("task_expert/{t}/{e}"), input, experts))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?;
                let per_gate = cfg.num_task_experts + cfg.num_shared_experts;
                let gates = TASKS
                    .iter()
                    .map(|t| b.dense(&format!("gate/{t}"), input, per_gate))
                    .collect::<Result<_>>()?;
                (
                    Body::Ple {
                        shared,
                        task,
                        gates,
                    },
                    *experts.last().unwrap(),
                )
            }
            Arch::Dnn => {
                let mlp = b.field_mlp("mlp", input, &cfg.tower_widths)?;
                (Body::Dnn { mlp }, *cfg.tower_widths.last().unwrap())
            }
        };

        let towers = if cfg.arch == Arch::Dnn {
            vec![Tower {
                hidden: Vec::new(),
                out: b.dense("mlp/out", rep_width, 1)?,
            }]
        } else {
            TASKS
                .iter()
                .map(|t| {
                    let mut width = rep_width;
                    let hidden = cfg
                        .tower_widths
                        .iter()
                        .enumerate()
                        .map(|(l, &w)| {
                            let layer = b.dense(&format!("tower/{t}/{l}"), width, w);
                            width = w;
                            layer
                        })
                        .collect::<Result<_>>()?;
                    Ok(Tower {
                        hidden,
                        out: b.dense(&format!("tower/{t}/out"), width, 1)?,
                    })
                })
                .collect::<Result<_>>()?
        };

        Ok((
            b.store,
            Network {
                embeddings,
                body,
                towers,
            },
        ))
    }

    pub(super) fn forward(
        &self,
        cfg: &ModelConfig,
        tape: &mut Tape<'_>,
        fields: &[Vec<usize>],
    ) -> Result<Heads> {
        if fields.len() != self.embeddings.len() {
            return Err(Error::Config(format!(
                "model expects {} feature fields, batch has {}",
                self.embeddings.len(),
                fields.len()
            )));
        }
        let n = fields[0].len();
        if n == 0 || fields.iter().any(|f| f.len() != n) {
            return Err(Error::Argument(
                "batch fields must be non-empty and equally long".into(),
            ));
        }

        let inputs = fields
            .iter()
            .zip(&self.embeddings)
            .map(|(idx, &table)| field_input(tape, table, idx))
            .collect::<Result<Vec<_>>>()?;
        let d = cfg.embed_dim;

        let reps: Vec<NodeId> = match &self.body {
            Body::SharedBottom { bottom } => {
                let h = field_mlp(tape, &inputs, d, bottom)?;
                vec![h, h]
            }
            Body::Dnn { mlp } => vec![field_mlp(tape, &inputs, d, mlp)?],
            Body::Mmoe { experts, gates } => {
                let outs = experts
                    .iter()
                    .map(|e| field_mlp(tape, &inputs, d, e))
                    .collect::<Result<Vec<_>>>()?;
                gates
                    .iter()
                    .map(|g| {
                        let logits = field_layer(tape, &inputs, d, *g, Activation::None)?;
                        let w = softmax_gate(tape, logits);
                        tape.mixture(w, &outs)
                    })
                    .collect::<Result<_>>()?
            }
            Body::Ple {
                shared,
                task,
                gates,
            } => {
                let shared_out = shared
                    .iter()
                    .map(|e| field_mlp(tape, &inputs, d, e))
                    .collect::<Result<Vec<_>>>()?;
                task.iter()
                    .zip(gates)
                    .map(|(experts, g)| {
                        let mut outs = experts
                            .iter()
                            .map(|e| field_mlp(tape, &inputs, d, e))
                            .collect::<Result<Vec<_>>>()?;
                        outs.extend_from_slice(&shared_out);
                        let logits = field_layer(tape, &inputs, d, *g, Activation::None)?;
                        let w = softmax_gate(tape, logits);
                        tape.mixture(w, &outs)
                    })
                    .collect::<Result<_>>()?
            }
        };

        let probs = self
            .towers
            .iter()
            .zip(reps)
            .map(|(tower, rep)| {
                let mut h = rep;
                for layer in &tower.hidden {
                    h = dense(tape, h, *layer, Activation::Relu)?;
                }
                let logit = dense(tape, h, tower.out, Activation::None)?;
                Ok(tape.sigmoid(logit))
            })
            .collect::<Result<Vec<_>>>()?;

        if cfg.arch.is_multi_task() {
            let ctcvr = tape.mul(probs[0], probs[1])?;
            Ok(Heads {
                ctr: probs[0],
                cvr: Some(probs[1]),
                ctcvr: Some(ctcvr),
            })
        } else {
            Ok(Heads {
                ctr: probs[0],
                cvr: None,
                ctcvr: None,
            })
        }
    }
}

fn dense(tape: &mut Tape<'_>, x: NodeId, layer: Dense, act: Activation) -> Result<NodeId> {
    let (w, b) = (tape.param(layer.w), tape.param(layer.b));
    dense_forward(tape, x, w, b, act)
}

fn field_input(tape: &mut Tape<'_>, table: ParamId, idx: &[usize]) -> Result<FieldInput> {
    let t = tape.param(table);
    let vocab = tape.shape(t).0;
    if let Some(&bad) = idx.iter().find(|&&i| i >= vocab) {
        return Err(Error::Index {
            index: bad,
            len: vocab,
        });
    }
    let mut unique = idx.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let local = idx
        .iter()
        .map(|i| unique.binary_search(i).expect("present"))
        .collect();
    Ok(FieldInput {
        rows: tape.gather(t, unique)?,
        local,
    })
}

/// `act(concat(embeddings) W + b)`, computed field by field: each field's
/// distinct embedding rows are projected by its slice of `W`, then gathered
/// into batch order.
fn field_layer(
    tape: &mut Tape<'_>,
    inputs: &[FieldInput],
    embed_dim: usize,
    layer: Dense,
    act: Activation,
) -> Result<NodeId> {
    let w = tape.param(layer.w);
    let mut parts = Vec::with_capacity(inputs.len());
    for (f, input) in inputs.iter().enumerate() {
        let w_f = tape.slice_rows(w, f * embed_dim, (f + 1) * embed_dim)?;
        let proj = tape.matmul(input.rows, w_f)?;
        parts.push((proj, input.local.clone()));
    }
    let sum = tape.gather_sum(parts)?;
    let b = tape.param(layer.b);
    let y = tape.add_bias(sum, b)?;
    Ok(match act {
        Activation::Relu => tape.relu(y),
        Activation::None => y,
    })
}

fn field_mlp(
    tape: &mut Tape<'_>,
    inputs: &[FieldInput],
    embed_dim: usize,
    mlp: &FieldMlp,
) -> Result<NodeId> {
    let mut h = field_layer(tape, inputs, embed_dim, mlp.first, Activation::Relu)?;
    for layer in &mlp.rest {
        h = dense(tape, h, *layer, Activation::Relu)?;
    }
    Ok(h)
}
