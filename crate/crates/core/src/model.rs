//! A complete classifier: projections, one fusion strategy, detector head(s).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureDims, FeatureRecord};
use crate::detector::{bce_loss, DetectorConfig, DetectorParams};
use crate::error::{Error, Result};
use crate::fusion::{
    early_fuse, mean_probability, pool_channels, project_inputs, tensor_fuse, tri_transformer_fuse, FusedVector,
    FusionConfig, ModalityBatch, Projections, Strategy, TriTransformer, CHANNEL_NAMES,
};
use crate::nn::{BatchNormState, Bindings, Linear, Mode, ParamStore};
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Rows per eval-mode forward pass.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: FeatureDims,
    pub fusion: FusionConfig,
    pub detector: DetectorConfig,
    /// Initialization seed.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum Layout {
    TriTransformer {
        tri: TriTransformer,
        head: DetectorParams,
    },
    Concat {
        head: DetectorParams,
    },
    Late {
        heads: [DetectorParams; 3],
    },
    Hybrid {
        head: DetectorParams,
        heads: [DetectorParams; 3],
    },
    Tensor {
        reduce: [Linear; 3],
        head: DetectorParams,
    },
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub bindings: Bindings,
    /// Final fake probabilities `[B]`.
    pub probs: Var,
    pub fused: Var,
    pub per_branch: Option<[Var; 3]>,
    /// Probability vectors that each receive a cross-entropy term.
    pub loss_heads: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    bn: Vec<BatchNormState>,
    proj: Projections,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    config: ModelConfig,
    params: Vec<NamedTensor>,
    batchnorm: Vec<BatchNormState>,
}

const MODEL_FORMAT: &str = "trifuse-model/1";

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.fusion.validate()?;
        config.dims.validate()?;
        if config.detector.h1 == 0 || config.detector.h2 == 0 {
            return Err(Error::Config("detector widths must be positive".into()));
        }
        let seed = config.seed;
        let f = config.fusion;
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let proj = Projections::new(&mut params, seed, &config.dims, f.d_model);
        let det = |params: &mut ParamStore, bn: &mut Vec<BatchNormState>, name: &str, d_in: usize| {
            DetectorParams::new(params, bn, seed, name, d_in, config.detector)
        };
        let layout = match f.strategy {
            Strategy::TriTransformer => {
                let tri = TriTransformer::new(&mut params, seed, &f)?;
                let head = det(&mut params, &mut bn, "det", f.fused_width());
                Layout::TriTransformer { tri, head }
            }
            Strategy::Early | Strategy::ConcatOnly => Layout::Concat {
                head: det(&mut params, &mut bn, "det", f.fused_width()),
            },
            Strategy::Late => Layout::Late {
                heads: std::array::from_fn(|c| {
                    det(&mut params, &mut bn, &format!("late.{}", CHANNEL_NAMES[c]), f.d_model)
                }),
            },
            Strategy::Hybrid => {
                let head = det(&mut params, &mut bn, "det", f.fused_width());
                let heads = std::array::from_fn(|c| {
                    det(&mut params, &mut bn, &format!("late.{}", CHANNEL_NAMES[c]), f.d_model)
                });
                Layout::Hybrid { head, heads }
            }
            Strategy::Tensor => {
                let reduce = std::array::from_fn(|c| {
                    Linear::new(
                        &mut params,
                        seed,
                        &format!("reduce.{}", CHANNEL_NAMES[c]),
                        f.d_model,
                        f.d_f,
                    )
                });
                let head = det(&mut params, &mut bn, "det", f.fused_width());
                Layout::Tensor { reduce, head }
            }
        };
        Ok(Self {
            config,
            params,
            bn,
            proj,
            layout,
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

    pub fn batchnorm_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn strategy(&self) -> Strategy {
        self.config.fusion.strategy
    }

    /// Scalar weights held by attention blocks.
    pub fn attention_param_count(&self) -> usize {
        self.params.numel_with_prefix("att.")
    }

    /// Forward pass on `tape`. In train mode batch statistics are used and,
    /// if `update_stats` is set, folded into the running averages.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        batch: &ModalityBatch,
        mode: Mode,
        update_stats: bool,
    ) -> Result<ForwardOut> {
        let mut states = std::mem::take(&mut self.bn);
        let out = self.run(tape, batch, mode, &mut states, update_stats);
        self.bn = states;
        out
    }

    fn run(
        &self,
        tape: &mut Tape,
        batch: &ModalityBatch,
        mode: Mode,
        states: &mut [BatchNormState],
        update: bool,
    ) -> Result<ForwardOut> {
        if batch.dims != self.config.dims {
            return Err(Error::Contract(format!(
                "batch dims {:?} do not match the model's {:?}",
                batch.dims, self.config.dims
            )));
        }
        let f = &self.config.fusion;
        let vars = self.params.bind(tape)?;
        let projected = project_inputs(tape, &vars, &self.proj, batch, f.channel_mask)?;
        let lens = batch.lens();
        let b = batch.batch;
        let out = match &self.layout {
            Layout::TriTransformer { tri, head } => {
                let fused = tri_transformer_fuse(tape, &vars, tri, projected, b, lens[0])?;
                let probs = head.classify(tape, &vars, states, fused.values, mode, update)?;
                ForwardOut {
                    bindings: vars,
                    probs,
                    fused: fused.values,
                    per_branch: fused.per_branch,
                    loss_heads: vec![probs],
                }
            }
            Layout::Concat { head } => {
                let fused = early_fuse(tape, projected, lens)?;
                let probs = head.classify(tape, &vars, states, fused.values, mode, update)?;
                ForwardOut {
                    bindings: vars,
                    probs,
                    fused: fused.values,
                    per_branch: None,
                    loss_heads: vec![probs],
                }
            }
            Layout::Late { heads } => {
                let pooled = pool_channels(tape, projected, lens)?;
                let mut ps = Vec::with_capacity(3);
                for c in 0..3 {
                    ps.push(heads[c].classify(tape, &vars, states, pooled[c], mode, update)?);
                }
                let probs = mean_probability(tape, &ps)?;
                let fused = tape.concat_cols(&pooled)?;
                ForwardOut {
                    bindings: vars,
                    probs,
                    fused,
                    per_branch: None,
                    loss_heads: ps,
                }
            }
            Layout::Hybrid { head, heads } => {
                let pooled = pool_channels(tape, projected, lens)?;
                let fused = tape.concat_cols(&pooled)?;
                let early = head.classify(tape, &vars, states, fused, mode, update)?;
                let mut ps = Vec::with_capacity(3);
                for c in 0..3 {
                    ps.push(heads[c].classify(tape, &vars, states, pooled[c], mode, update)?);
                }
                let late = mean_probability(tape, &ps)?;
                let probs = mean_probability(tape, &[early, late])?;
                let mut loss_heads = vec![early];
                loss_heads.extend(ps);
                ForwardOut {
                    bindings: vars,
                    probs,
                    fused,
                    per_branch: None,
                    loss_heads,
                }
            }
            Layout::Tensor { reduce, head } => {
                let fused = tensor_fuse(tape, &vars, reduce, projected, lens, f.tensor_budget)?;
                let probs = head.classify(tape, &vars, states, fused.values, mode, update)?;
                ForwardOut {
                    bindings: vars,
                    probs,
                    fused: fused.values,
                    per_branch: None,
                    loss_heads: vec![probs],
                }
            }
        };
        Ok(out)
    }

    /// Training objective: sum of mean cross-entropies over the loss heads.
    /// Late and hybrid fusion train each per-modality classifier on its own
    /// term; every other strategy has exactly one.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardOut, labels: &[u8]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &p in &out.loss_heads {
            let l = bce_loss(tape, p, labels)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        total.ok_or_else(|| Error::Contract("model has no loss heads".into()))
    }

    /// Eval-mode forward over `records` in fixed-size chunks.
    pub fn eval_pass<T>(
        &self,
        records: &[&FeatureRecord],
        precision: Precision,
        mut collect: impl FnMut(&Tape, &ForwardOut, &ModalityBatch) -> T,
    ) -> Result<Vec<T>> {
        let mut states = self.bn.clone();
        let mut out = Vec::new();
        for chunk in records.chunks(EVAL_CHUNK) {
            let batch = ModalityBatch::from_records(chunk, &self.config.dims, self.config.fusion.channel_mask)?;
            let mut tape = Tape::new(precision);
            let fwd = self.run(&mut tape, &batch, Mode::Eval, &mut states, false)?;
            out.push(collect(&tape, &fwd, &batch));
        }
        Ok(out)
    }

    /// Eval-mode fake probabilities, one per record.
    pub fn predict(&self, records: &[&FeatureRecord]) -> Result<Vec<f64>> {
        let chunks = self.eval_pass(records, Precision::Double, |tape, fwd, _| {
            tape.value(fwd.probs).data().to_vec()
        })?;
        Ok(chunks.concat())
    }

    /// Eval-mode mean loss over `records`.
    pub fn eval_loss(&self, records: &[&FeatureRecord]) -> Result<f64> {
        let mut states = self.bn.clone();
        let mut total = 0.0;
        for chunk in records.chunks(EVAL_CHUNK) {
            let batch = ModalityBatch::from_records(chunk, &self.config.dims, self.config.fusion.channel_mask)?;
            let mut tape = Tape::new(Precision::Double);
            let fwd = self.run(&mut tape, &batch, Mode::Eval, &mut states, false)?;
            let l = self.loss(&mut tape, &fwd, &batch.labels)?;
            total += tape.value(l).data()[0] * chunk.len() as f64;
        }
        Ok(total / records.len().max(1) as f64)
    }

    /// Eval-mode fused vectors (the detector input), one per record.
    pub fn fused_vectors(&self, records: &[&FeatureRecord]) -> Result<Vec<FusedVector>> {
        let chunks = self.eval_pass(records, Precision::Double, |tape, fwd, batch| {
            let width = tape.value(fwd.fused).cols();
            (0..batch.batch)
                .map(|r| FusedVector {
                    values: tape.value(fwd.fused).data()[r * width..(r + 1) * width].to_vec(),
                    per_branch: fwd.per_branch.map(|br| {
                        br.map(|v| {
                            let t = tape.value(v);
                            t.row(r).to_vec()
                        })
                    }),
                })
                .collect::<Vec<_>>()
        })?;
        Ok(chunks.concat())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            config: self.config,
            params: self
                .params
                .iter()
                .map(|(n, t)| NamedTensor {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            batchnorm: self.bn.clone(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Model(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s).map_err(|e| Error::Model(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Model(format!("unsupported format {:?}", file.format)));
        }
        let mut model = Model::new(file.config)?;
        if file.params.len() != model.params.len() {
            return Err(Error::Model(format!(
                "expected {} parameters, file has {}",
                model.params.len(),
                file.params.len()
            )));
        }
        for p in file.params {
            let slot = model
                .params
                .by_name_mut(&p.name)
                .ok_or_else(|| Error::Model(format!("unknown parameter {}", p.name)))?;
            if slot.shape() != p.shape.as_slice() {
                return Err(Error::Model(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    p.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(p.shape, p.data)?;
        }
        if file.batchnorm.len() != model.bn.len()
            || file
                .batchnorm
                .iter()
                .zip(&model.bn)
                .any(|(a, b)| a.running_mean.len() != b.running_mean.len())
        {
            return Err(Error::Model("batchnorm state does not match the architecture".into()));
        }
        model.bn = file.batchnorm;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = self.to_json()?;
        crate::data::write_atomic(path.as_ref(), json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::Io {
            path: path.as_ref().display().to_string(),
            source: e,
        })?;
        Self::from_json(&s)
    }
}
