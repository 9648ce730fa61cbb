//! Central finite-difference verification of every differentiable op.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, AttentionParams};
use crate::data::{synth_generate, FeatureDims, FeatureRecord, SynthConfig};
use crate::detector::{bce_loss, DetectorConfig, DetectorParams};
use crate::error::{Error, Result};
use crate::fusion::{tri_transformer_fuse, ChannelMask, FusionConfig, ModalityBatch, Strategy, TriTransformer};
use crate::model::{Model, ModelConfig};
use crate::nn::{Bindings, Mode, ParamStore};
use crate::tensor::{Precision, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub batch: usize,
    /// Query-side sequence length.
    pub len_q: usize,
    /// Key/value-side sequence length.
    pub len_kv: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_f: usize,
    /// Test hook: scales the analytic gradient of the named check by 1.05.
    pub fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 3,
            len_q: 2,
            len_kv: 3,
            d_model: 4,
            n_heads: 2,
            d_f: 3,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.op.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let w = self.checks.iter().map(|c| c.op.len()).max().unwrap_or(2);
        let mut out = format!("{:<w$}  max_rel_error  result\n", "op");
        for c in &self.checks {
            out += &format!(
                "{:<w$}  {:>13.3e}  {}\n",
                c.op,
                c.max_rel_error,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        out
    }
}

/// `||a - n|| / (||a|| + ||n||)`. Below `GRAD_FLOOR` the absolute difference
/// is used instead: a bias feeding batchnorm has an exactly zero gradient
/// while its finite difference is pure rounding noise.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let den = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if den < GRAD_FLOOR {
        diff
    } else {
        diff / den
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive extents")
}

/// Checks the gradient of `sum(build(inputs) ∘ R)` for a fixed random `R`
/// with respect to every input, at double precision.
pub fn check_gradients<F>(op: &str, inputs: &[Tensor], seed: u64, scale_fault: f64, build: F) -> Result<OpCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut tape = Tape::new(Precision::Double);
        let vars = inputs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = build(&mut tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::nn::stable_hash(op));
        random_tensor(&mut rng, tape.shape(out), -1.0, 1.0)
    };
    let objective = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let r = tape.constant(weights.clone())?;
        let prod = tape.mul(out, r)?;
        Ok(tape.sum(prod)?)
    };
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(Precision::Double);
        let vars = values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let l = objective(&mut tape, &vars)?;
        Ok(tape.value(l).data()[0])
    };

    let mut tape = Tape::new(Precision::Double);
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let loss = objective(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad(v)
            .ok_or_else(|| Error::MissingGrad(format!("{op} input {k}")))?
            .data()
            .iter()
            .map(|g| g * scale_fault)
            .collect();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..numeric.len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(OpCheck {
        op: op.into(),
        max_rel_error: worst,
        passed: worst < TOLERANCE,
    })
}

/// Same check for a complete model, perturbing its parameters in place.
fn check_model(op: &str, model: &mut Model, batch: &ModalityBatch, scale_fault: f64) -> Result<OpCheck> {
    let loss_of = |model: &mut Model| -> Result<(Tape, Var, Bindings)> {
        let mut tape = Tape::new(Precision::Double);
        let out = model.forward(&mut tape, batch, Mode::Train, false)?;
        let l = model.loss(&mut tape, &out, &batch.labels)?;
        Ok((tape, l, out.bindings))
    };
    let (mut tape, l, bound) = loss_of(model)?;
    tape.backward(l)?;
    let grads = model.params().collect_grads(&tape, &bound);
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let name = model.params().name(id).to_string();
        let analytic: Vec<f64> = grads
            .get(&name)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?
            .data()
            .iter()
            .map(|g| g * scale_fault)
            .collect();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = orig + STEP;
            let (t, l, _) = loss_of(model)?;
            let up = t.value(l).data()[0];
            model.params_mut().get_mut(id).data_mut()[j] = orig - STEP;
            let (t, l, _) = loss_of(model)?;
            let down = t.value(l).data()[0];
            model.params_mut().get_mut(id).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(OpCheck {
        op: op.into(),
        max_rel_error: worst,
        passed: worst < TOLERANCE,
    })
}

fn store_inputs(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

/// Every op check plus one full-model check per fusion strategy.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let started = Instant::now();
    if cfg.batch < 2 || cfg.len_q == 0 || cfg.len_kv == 0 || cfg.d_f == 0 {
        return Err(Error::Config("gradcheck needs batch >= 2 and positive lengths".into()));
    }
    if cfg.n_heads == 0 || !cfg.d_model.is_multiple_of(cfg.n_heads) {
        return Err(Error::Config(format!(
            "d_model {} not divisible by n_heads {}",
            cfg.d_model, cfg.n_heads
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (b, lq, lk, d, df) = (cfg.batch, cfg.len_q, cfg.len_kv, cfg.d_model, cfg.d_f);
    let fault = |op: &str| if cfg.fault.as_deref() == Some(op) { 1.05 } else { 1.0 };
    let mut checks = Vec::new();
    let seed = cfg.seed;

    let a = random_tensor(&mut rng, &[b, d], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[d, df], -1.0, 1.0);
    checks.push(check_gradients(
        "matmul",
        &[a.clone(), w.clone()],
        seed,
        fault("matmul"),
        |t, v| Ok(t.matmul(v[0], v[1])?),
    )?);

    let bias = random_tensor(&mut rng, &[df], -1.0, 1.0);
    checks.push(check_gradients(
        "linear",
        &[a.clone(), w, bias],
        seed,
        fault("linear"),
        |t, v| Ok(t.linear(v[0], v[1], v[2])?),
    )?);

    let gamma = random_tensor(&mut rng, &[d], 0.5, 1.5);
    let beta = random_tensor(&mut rng, &[d], -0.5, 0.5);
    let xb = random_tensor(&mut rng, &[b + 1, d], -2.0, 2.0);
    checks.push(check_gradients(
        "batchnorm",
        &[xb, gamma, beta],
        seed,
        fault("batchnorm"),
        |t, v| Ok(t.batchnorm(v[0], v[1], v[2], None)?.0),
    )?);

    let s = random_tensor(&mut rng, &[b, lk], -2.0, 2.0);
    checks.push(check_gradients("softmax", &[s], seed, fault("softmax"), |t, v| {
        Ok(t.softmax_rows(v[0])?)
    })?);

    let q = random_tensor(&mut rng, &[lq, d], -1.0, 1.0);
    let k = random_tensor(&mut rng, &[lk, d], -1.0, 1.0);
    let vv = random_tensor(&mut rng, &[lk, d], -1.0, 1.0);
    checks.push(check_gradients(
        "scaled_attention",
        &[q, k, vv],
        seed,
        fault("scaled_attention"),
        |t, v| Ok(t.attention(v[0], v[1], v[2], 1, 1)?),
    )?);

    {
        let mut store = ParamStore::new();
        let att = AttentionParams::new(&mut store, seed, "att", d, cfg.n_heads)?;
        let np = store.len();
        let mut inputs = store_inputs(&store);
        inputs.push(random_tensor(&mut rng, &[b * lq, d], -1.0, 1.0));
        inputs.push(random_tensor(&mut rng, &[b * lk, d], -1.0, 1.0));
        checks.push(check_gradients(
            "multi_head",
            &inputs,
            seed,
            fault("multi_head"),
            |t, v| {
                let vars = Bindings::from_vars(v[..np].to_vec());
                Ok(multi_head(t, &vars, &att, v[np], v[np + 1], b)?.output)
            },
        )?);
    }

    {
        let mut store = ParamStore::new();
        let fc = FusionConfig {
            d_model: d,
            d_f: df,
            n_heads: cfg.n_heads,
            ..Default::default()
        };
        let tri = TriTransformer::new(&mut store, seed, &fc)?;
        let np = store.len();
        let mut inputs = store_inputs(&store);
        inputs.push(random_tensor(&mut rng, &[b * lq, d], -1.0, 1.0));
        inputs.push(random_tensor(&mut rng, &[b * lk, d], -1.0, 1.0));
        inputs.push(random_tensor(&mut rng, &[b * (lk + 1), d], -1.0, 1.0));
        checks.push(check_gradients(
            "tri_transformer_fuse",
            &inputs,
            seed,
            fault("tri_transformer_fuse"),
            |t, v| {
                let vars = Bindings::from_vars(v[..np].to_vec());
                Ok(tri_transformer_fuse(t, &vars, &tri, [v[np], v[np + 1], v[np + 2]], b, lq)?.values)
            },
        )?);
    }

    {
        let mut store = ParamStore::new();
        let mut states = Vec::new();
        let det = DetectorParams::new(&mut store, &mut states, seed, "det", d, DetectorConfig { h1: 6, h2: 4 });
        let np = store.len();
        let mut inputs = store_inputs(&store);
        // perturb gamma/beta away from their init so every path is exercised
        for t in inputs.iter_mut() {
            for x in t.data_mut() {
                *x += rng.random_range(-0.1..0.1);
            }
        }
        inputs.push(random_tensor(&mut rng, &[b + 1, d], -1.0, 1.0));
        checks.push(check_gradients(
            "classify",
            &inputs,
            seed,
            fault("classify"),
            |t, v| {
                let vars = Bindings::from_vars(v[..np].to_vec());
                let mut st = states.clone();
                Ok(det.classify(t, &vars, &mut st, v[np], Mode::Train, false)?)
            },
        )?);
    }

    let p = random_tensor(&mut rng, &[b + 1], 0.05, 0.95);
    let labels: Vec<u8> = (0..b + 1).map(|i| (i % 2) as u8).collect();
    checks.push(check_gradients("bce_loss", &[p], seed, fault("bce_loss"), |t, v| {
        Ok(bce_loss(t, v[0], &labels)?)
    })?);

    let dims = FeatureDims {
        len_text: lq,
        d_text: d + 1,
        len_image: lk,
        d_image: d,
        len_imgtext: lk + 1,
        d_imgtext: d - 1,
    };
    let data = synth_generate(&SynthConfig {
        n: 4.max(b + 1),
        dims,
        class_separation: 1.0,
        cross_modal_weight: 0.5,
        seed,
    })?;
    let refs: Vec<&FeatureRecord> = data.records.iter().collect();
    let batch = ModalityBatch::from_records(&refs, &dims, ChannelMask::ALL)?;
    for s in Strategy::COMPARED.into_iter().chain([Strategy::ConcatOnly]) {
        let mut model = Model::new(ModelConfig {
            dims,
            fusion: FusionConfig {
                strategy: s,
                d_model: d,
                d_f: df,
                n_heads: cfg.n_heads,
                ..Default::default()
            },
            detector: DetectorConfig { h1: 5, h2: 3 },
            seed,
        })?;
        let name = format!("model/{}", s.name());
        checks.push(check_model(&name, &mut model, &batch, fault(&name))?);
    }

    log::info!("gradcheck: {} checks in {:.2?}", checks.len(), started.elapsed());
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        checks,
    })
}
