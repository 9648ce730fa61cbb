//! Binary fake-news head: three linear layers with batchnorm and ReLU on the
//! hidden layers, a single logistic output, and mean binary cross-entropy.

use serde::{Deserialize, Serialize};

use crate::nn::{BatchNorm, BatchNormState, Bindings, Linear, Mode, ParamStore};
use crate::tensor::{Result, Tape, TensorError, Var};

/// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub h1: usize,
    pub h2: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { h1: 64, h2: 32 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DetectorParams {
    pub l1: Linear,
    pub bn1: BatchNorm,
    pub l2: Linear,
    pub bn2: BatchNorm,
    pub out: Linear,
}

impl DetectorParams {
    pub fn new(
        store: &mut ParamStore,
        states: &mut Vec<BatchNormState>,
        seed: u64,
        name: &str,
        d_in: usize,
        cfg: DetectorConfig,
    ) -> Self {
        let l1 = Linear::new(store, seed, &format!("{name}.l1"), d_in, cfg.h1);
        let bn1 = BatchNorm::new(store, states, &format!("{name}.bn1"), cfg.h1);
        let l2 = Linear::new(store, seed, &format!("{name}.l2"), cfg.h1, cfg.h2);
        let bn2 = BatchNorm::new(store, states, &format!("{name}.bn2"), cfg.h2);
        let out = Linear::new(store, seed, &format!("{name}.out"), cfg.h2, 1);
        Self { l1, bn1, l2, bn2, out }
    }

    pub fn d_in(&self) -> usize {
        self.l1.d_in
    }

    /// Raw logits `[B]` for fused rows `[B, d_in]`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        vars: &Bindings,
        states: &mut [BatchNormState],
        fused: Var,
        mode: Mode,
        update_stats: bool,
    ) -> Result<Var> {
        let shape = tape.shape(fused).to_vec();
        if shape.len() != 2 || shape[1] != self.d_in() {
            return Err(TensorError::Shape {
                op: "classify",
                left: shape,
                right: vec![self.d_in()],
            });
        }
        let batch = shape[0];
        let h = self.l1.forward(tape, vars, fused)?;
        let h = self.bn1.forward(tape, vars, states, h, mode, update_stats)?;
        let h = tape.relu(h)?;
        let h = self.l2.forward(tape, vars, h)?;
        let h = self.bn2.forward(tape, vars, states, h, mode, update_stats)?;
        let h = tape.relu(h)?;
        let z = self.out.forward(tape, vars, h)?;
        tape.reshape(z, vec![batch])
    }

    /// Fake probabilities `ŷ[B]`.
    pub fn classify(
        &self,
        tape: &mut Tape,
        vars: &Bindings,
        states: &mut [BatchNormState],
        fused: Var,
        mode: Mode,
        update_stats: bool,
    ) -> Result<Var> {
        let z = self.logits(tape, vars, states, fused, mode, update_stats)?;
        tape.sigmoid(z)
    }
}

/// Mean binary cross-entropy over the batch.
pub fn bce_loss(tape: &mut Tape, preds: Var, labels: &[u8]) -> Result<Var> {
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(TensorError::Contract {
            op: "bce_loss",
            msg: format!("label {bad} outside {{0, 1}}"),
        });
    }
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    tape.bce(preds, &y, BCE_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub prob_fake: f64,
    pub label: u8,
}

impl LabeledPrediction {
    pub fn predicted_fake(&self, threshold: f64) -> bool {
        self.prob_fake >= threshold
    }
}
