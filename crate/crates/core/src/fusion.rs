//! Fusion of the text, image and image-text channels into one vector per sample.
//!
//! All strategies start from a learned per-channel projection of the raw
//! encoder features to a shared width `d_model`:
//!
//! * `tri_transformer`: text self-attention plus two cross-attentions whose
//!   queries come from text (keys/values from image and image-text); each
//!   branch runs its own MLP `d_model → d_f → d_f`, is mean-pooled over the
//!   text axis, and the three pooled vectors are concatenated
//!   (text, image, imgtext). Width `3·d_f`.
//! * `early` / `concat_only`: mean-pool each projected channel and
//!   concatenate. Width `3·d_model`.
//! * `late`: one detector per pooled channel, probabilities averaged.
//! * `hybrid`: average of the early-fusion probability and the late one.
//! * `tensor`: pooled channels reduced to `d_f`, each extended with a
//!   trailing 1, and the flattened three-way outer product. Width `(d_f+1)³`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, AttentionParams};
use crate::data::{FeatureDims, FeatureRecord};
use crate::nn::{Bindings, Linear, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TriTransformer,
    Early,
    Late,
    Hybrid,
    Tensor,
    ConcatOnly,
}

impl Strategy {
    /// The strategies compared head to head, in report order.
    pub const COMPARED: [Strategy; 5] = [
        Strategy::Early,
        Strategy::Late,
        Strategy::Hybrid,
        Strategy::Tensor,
        Strategy::TriTransformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::TriTransformer => "tri_transformer",
            Strategy::Early => "early",
            Strategy::Late => "late",
            Strategy::Hybrid => "hybrid",
            Strategy::Tensor => "tensor",
            Strategy::ConcatOnly => "concat_only",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        [
            Strategy::TriTransformer,
            Strategy::Early,
            Strategy::Late,
            Strategy::Hybrid,
            Strategy::Tensor,
            Strategy::ConcatOnly,
        ]
        .into_iter()
        .find(|st| st.name() == s)
        .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// Which channels feed the model. A masked channel is replaced by zeros
/// after projection; its raw features are never read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelMask {
    pub text: bool,
    pub image: bool,
    pub imgtext: bool,
}

impl ChannelMask {
    pub const ALL: ChannelMask = ChannelMask {
        text: true,
        image: true,
        imgtext: true,
    };

    pub fn as_array(self) -> [bool; 3] {
        [self.text, self.image, self.imgtext]
    }

    pub fn from_array(a: [bool; 3]) -> Self {
        Self {
            text: a[0],
            image: a[1],
            imgtext: a[2],
        }
    }

    pub fn any(self) -> bool {
        self.text || self.image || self.imgtext
    }

    /// The seven non-empty masks, full mask first.
    pub fn all_nonempty() -> Vec<ChannelMask> {
        let order = [0b111, 0b110, 0b101, 0b011, 0b100, 0b010, 0b001];
        order
            .into_iter()
            .map(|bits: u8| Self::from_array([bits & 0b100 != 0, bits & 0b010 != 0, bits & 0b001 != 0]))
            .collect()
    }

    pub fn label(self) -> String {
        let names: Vec<&str> = ["text", "image", "imgtext"]
            .into_iter()
            .zip(self.as_array())
            .filter_map(|(n, on)| on.then_some(n))
            .collect();
        names.join("+")
    }
}

impl Default for ChannelMask {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub strategy: Strategy,
    pub d_model: usize,
    pub d_f: usize,
    pub n_heads: usize,
    pub channel_mask: ChannelMask,
    pub pooling: Pooling,
    /// Largest allowed tensor-fusion width `(d_f + 1)³`.
    pub tensor_budget: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TriTransformer,
            d_model: 32,
            d_f: 16,
            n_heads: 4,
            channel_mask: ChannelMask::ALL,
            pooling: Pooling::Mean,
            tensor_budget: 64 * 64 * 64,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(TensorError::Contract {
                op: "fusion_config",
                msg,
            })
        };
        if self.d_model == 0 || self.d_f == 0 || self.n_heads == 0 {
            return bad("d_model, d_f and n_heads must be positive".into());
        }
        if !self.channel_mask.any() {
            return bad("at least one channel must be unmasked".into());
        }
        if self.strategy == Strategy::TriTransformer && !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.strategy == Strategy::Tensor {
            let needed = (self.d_f + 1).pow(3);
            if needed > self.tensor_budget {
                return bad(format!(
                    "tensor fusion width (d_f+1)^3 = {needed} exceeds the budget of {}",
                    self.tensor_budget
                ));
            }
        }
        Ok(())
    }

    /// Width of the fused vector handed to the detector.
    pub fn fused_width(&self) -> usize {
        match self.strategy {
            Strategy::TriTransformer => 3 * self.d_f,
            Strategy::Early | Strategy::ConcatOnly | Strategy::Late | Strategy::Hybrid => 3 * self.d_model,
            Strategy::Tensor => (self.d_f + 1).pow(3),
        }
    }
}

/// One sample's three feature sequences, `[L_*, d_*]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    pub text: Tensor,
    pub image: Tensor,
    pub imgtext: Tensor,
}

impl ModalityFeatures {
    pub fn from_record(r: &FeatureRecord, dims: &FeatureDims) -> Result<Self> {
        let t = |block: &[f32], l: usize, d: usize| Tensor::new(vec![l, d], block.iter().map(|&v| v as f64).collect());
        Ok(Self {
            text: t(&r.text, dims.len_text, dims.d_text)?,
            image: t(&r.image, dims.len_image, dims.d_image)?,
            imgtext: t(&r.imgtext, dims.len_imgtext, dims.d_imgtext)?,
        })
    }
}

/// Samples stacked row-wise per channel: `[B·L_*, d_*]`. Masked channels are
/// left unread (`None`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch {
    pub batch: usize,
    pub dims: FeatureDims,
    pub channels: [Option<Tensor>; 3],
    pub labels: Vec<u8>,
    pub ids: Vec<u64>,
}

impl ModalityBatch {
    pub fn from_records(records: &[&FeatureRecord], dims: &FeatureDims, mask: ChannelMask) -> Result<Self> {
        if records.is_empty() {
            return Err(TensorError::Contract {
                op: "batch",
                msg: "empty batch".into(),
            });
        }
        let b = records.len();
        let stack = |sel: fn(&FeatureRecord) -> &[f32], l: usize, d: usize| -> Result<Tensor> {
            let mut data = Vec::with_capacity(b * l * d);
            for r in records {
                let block = sel(r);
                if block.len() != l * d {
                    return Err(TensorError::Shape {
                        op: "batch",
                        left: vec![block.len()],
                        right: vec![l, d],
                    });
                }
                data.extend(block.iter().map(|&v| v as f64));
            }
            Tensor::new(vec![b * l, d], data)
        };
        let m = mask.as_array();
        let text = m[0]
            .then(|| stack(|r| &r.text, dims.len_text, dims.d_text))
            .transpose()?;
        let image = m[1]
            .then(|| stack(|r| &r.image, dims.len_image, dims.d_image))
            .transpose()?;
        let imgtext = m[2]
            .then(|| stack(|r| &r.imgtext, dims.len_imgtext, dims.d_imgtext))
            .transpose()?;
        Ok(Self {
            batch: b,
            dims: *dims,
            channels: [text, image, imgtext],
            labels: records.iter().map(|r| r.label).collect(),
            ids: records.iter().map(|r| r.id).collect(),
        })
    }

    /// Single-sample batch from in-memory features (all channels present).
    pub fn from_features(f: &ModalityFeatures) -> Self {
        let dims = FeatureDims {
            len_text: f.text.rows(),
            d_text: f.text.cols(),
            len_image: f.image.rows(),
            d_image: f.image.cols(),
            len_imgtext: f.imgtext.rows(),
            d_imgtext: f.imgtext.cols(),
        };
        Self {
            batch: 1,
            dims,
            channels: [Some(f.text.clone()), Some(f.image.clone()), Some(f.imgtext.clone())],
            labels: vec![0],
            ids: vec![0],
        }
    }

    pub fn lens(&self) -> [usize; 3] {
        [self.dims.len_text, self.dims.len_image, self.dims.len_imgtext]
    }
}

/// Per-channel projections to `d_model`.
#[derive(Debug, Clone, Copy)]
pub struct Projections(pub [Linear; 3]);

pub const CHANNEL_NAMES: [&str; 3] = ["text", "image", "imgtext"];

impl Projections {
    pub fn new(store: &mut ParamStore, seed: u64, dims: &FeatureDims, d_model: usize) -> Self {
        let raw = [dims.d_text, dims.d_image, dims.d_imgtext];
        Self(std::array::from_fn(|c| {
            Linear::new(store, seed, &format!("proj.{}", CHANNEL_NAMES[c]), raw[c], d_model)
        }))
    }
}

/// Projects each channel to `[B·L_*, d_model]`; masked channels become zeros.
pub fn project_inputs(
    tape: &mut Tape,
    vars: &Bindings,
    proj: &Projections,
    batch: &ModalityBatch,
    mask: ChannelMask,
) -> Result<[Var; 3]> {
    let lens = batch.lens();
    let on = mask.as_array();
    let mut out = Vec::with_capacity(3);
    for c in 0..3 {
        let layer = &proj.0[c];
        let v = match (&batch.channels[c], on[c]) {
            (Some(raw), true) => {
                if raw.cols() != layer.d_in {
                    return Err(TensorError::Shape {
                        op: "project_inputs",
                        left: raw.shape().to_vec(),
                        right: vec![layer.d_in, layer.d_out],
                    });
                }
                let x = tape.constant(raw.clone())?;
                layer.forward(tape, vars, x)?
            }
            _ => tape.constant(Tensor::zeros(&[batch.batch * lens[c], layer.d_out]))?,
        };
        out.push(v);
    }
    Ok([out[0], out[1], out[2]])
}

/// Two-layer perceptron `d_in → d_f → d_f` with a ReLU between the layers.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, d_in: usize, d_f: usize) -> Self {
        Self {
            l1: Linear::new(store, seed, &format!("{name}.l1"), d_in, d_f),
            l2: Linear::new(store, seed, &format!("{name}.l2"), d_f, d_f),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &Bindings, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, vars, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, vars, h)
    }
}

/// Attention blocks and MLPs of the tri-transformer, ordered text, image, imgtext.
#[derive(Debug, Clone, Copy)]
pub struct TriTransformer {
    pub attention: [AttentionParams; 3],
    pub mlps: [Mlp; 3],
}

impl TriTransformer {
    pub fn new(store: &mut ParamStore, seed: u64, cfg: &FusionConfig) -> Result<Self> {
        let mut att = Vec::with_capacity(3);
        for name in CHANNEL_NAMES {
            att.push(AttentionParams::new(
                store,
                seed,
                &format!("att.{name}"),
                cfg.d_model,
                cfg.n_heads,
            )?);
        }
        let mlps =
            std::array::from_fn(|c| Mlp::new(store, seed, &format!("mlp.{}", CHANNEL_NAMES[c]), cfg.d_model, cfg.d_f));
        Ok(Self {
            attention: [att[0], att[1], att[2]],
            mlps,
        })
    }
}

/// Fused rows `[B, d_fused]` and, for the tri-transformer, the pooled
/// branch outputs `(f_t, f_it, f_mt)`, each `[B, d_f]`.
#[derive(Debug, Clone, Copy)]
pub struct FusedVars {
    pub values: Var,
    pub per_branch: Option<[Var; 3]>,
}

/// One fused vector with optional per-branch parts.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVector {
    pub values: Vec<f64>,
    pub per_branch: Option<[Vec<f64>; 3]>,
}

pub fn tri_transformer_fuse(
    tape: &mut Tape,
    vars: &Bindings,
    tri: &TriTransformer,
    projected: [Var; 3],
    batch: usize,
    len_text: usize,
) -> Result<FusedVars> {
    let [t, i, m] = projected;
    let kv = [t, i, m];
    let mut pooled = Vec::with_capacity(3);
    for c in 0..3 {
        // text always supplies the queries
        let y = multi_head(tape, vars, &tri.attention[c], t, kv[c], batch)?.output;
        let f = tri.mlps[c].forward(tape, vars, y)?;
        pooled.push(tape.group_mean_rows(f, len_text)?);
    }
    let values = tape.concat_cols(&pooled)?;
    Ok(FusedVars {
        values,
        per_branch: Some([pooled[0], pooled[1], pooled[2]]),
    })
}

/// Mean-pools each projected channel to `[B, d_model]`.
pub fn pool_channels(tape: &mut Tape, projected: [Var; 3], lens: [usize; 3]) -> Result<[Var; 3]> {
    let a = tape.group_mean_rows(projected[0], lens[0])?;
    let b = tape.group_mean_rows(projected[1], lens[1])?;
    let c = tape.group_mean_rows(projected[2], lens[2])?;
    Ok([a, b, c])
}

/// Pooled channels concatenated; also the `concat_only` (no fusion) path.
pub fn early_fuse(tape: &mut Tape, projected: [Var; 3], lens: [usize; 3]) -> Result<FusedVars> {
    let pooled = pool_channels(tape, projected, lens)?;
    Ok(FusedVars {
        values: tape.concat_cols(&pooled)?,
        per_branch: None,
    })
}

pub fn tensor_fuse(
    tape: &mut Tape,
    vars: &Bindings,
    reduce: &[Linear; 3],
    projected: [Var; 3],
    lens: [usize; 3],
    budget: usize,
) -> Result<FusedVars> {
    let d_f = reduce[0].d_out;
    let needed = (d_f + 1).pow(3);
    if needed > budget {
        return Err(TensorError::Contract {
            op: "tensor_fuse",
            msg: format!("(d_f+1)^3 = {needed} exceeds the budget of {budget}"),
        });
    }
    let pooled = pool_channels(tape, projected, lens)?;
    let mut ext = Vec::with_capacity(3);
    for c in 0..3 {
        let z = reduce[c].forward(tape, vars, pooled[c])?;
        ext.push(tape.append_one(z)?);
    }
    Ok(FusedVars {
        values: tape.outer3(ext[0], ext[1], ext[2])?,
        per_branch: None,
    })
}

/// Arithmetic mean of per-modality fake probabilities.
pub fn late_aggregate(probs: [f64; 3]) -> f64 {
    (probs[0] + probs[1] + probs[2]) / 3.0
}

/// Mean of the early-fusion probability and the late-fusion probability.
pub fn hybrid_aggregate(early: f64, late: f64) -> f64 {
    0.5 * (early + late)
}

/// On-tape mean of equally shaped probability vectors.
pub fn mean_probability(tape: &mut Tape, probs: &[Var]) -> Result<Var> {
    let (first, rest) = probs.split_first().ok_or(TensorError::Contract {
        op: "mean_probability",
        msg: "no inputs".into(),
    })?;
    let mut acc = *first;
    for &p in rest {
        acc = tape.add(acc, p)?;
    }
    tape.scale(acc, 1.0 / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn mask_listing_and_labels() {
        let masks = ChannelMask::all_nonempty();
        assert_eq!(masks.len(), 7);
        assert_eq!(masks[0], ChannelMask::ALL);
        assert_eq!(masks[0].label(), "text+image+imgtext");
        assert_eq!(masks[6].label(), "imgtext");
    }

    #[test]
    fn config_validation() {
        let mut c = FusionConfig::default();
        c.validate().unwrap();
        c.channel_mask = ChannelMask::from_array([false; 3]);
        assert!(c.validate().is_err());
        let mut c = FusionConfig {
            strategy: Strategy::Tensor,
            ..Default::default()
        };
        c.d_f = 64;
        assert!(c.validate().unwrap_err().to_string().contains("budget"));
        assert_eq!("hybrid".parse::<Strategy>().unwrap(), Strategy::Hybrid);
        assert!("bogus".parse::<Strategy>().is_err());
    }

    #[test]
    fn aggregates() {
        assert_eq!(late_aggregate([1.0, 1.0, 1.0]), 1.0);
        assert_eq!(late_aggregate([1.0, 0.0, 0.5]), 0.5);
        assert_eq!(hybrid_aggregate(1.0, 0.0), 0.5);
        assert_eq!(hybrid_aggregate(0.3, 0.3), 0.3);
    }

    #[test]
    fn identity_projection_keeps_features_and_mask_zeros() {
        let dims = FeatureDims {
            len_text: 2,
            d_text: 3,
            len_image: 1,
            d_image: 3,
            len_imgtext: 2,
            d_imgtext: 3,
        };
        let mut store = ParamStore::new();
        let proj = Projections::new(&mut store, 1, &dims, 3);
        for l in proj.0 {
            *store.get_mut(l.w) = Tensor::eye(3);
        }
        let rec = FeatureRecord {
            id: 1,
            label: 1,
            text: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            image: vec![7.0, 8.0, 9.0],
            imgtext: vec![0.5; 6],
        };
        let mask = ChannelMask::from_array([true, false, true]);
        let batch = ModalityBatch::from_records(&[&rec], &dims, mask).unwrap();
        assert!(batch.channels[1].is_none());
        let mut tape = Tape::new(Precision::Double);
        let vars = store.bind(&mut tape).unwrap();
        let [t, i, m] = project_inputs(&mut tape, &vars, &proj, &batch, mask).unwrap();
        assert_eq!(tape.value(t).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(tape.value(i).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(m), &[2, 3]);
    }
}
