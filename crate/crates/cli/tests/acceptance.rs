//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trifuse::attention::{multi_head, AttentionParams};
use trifuse::data::{
    decode_dataset, encode_dataset, read_dataset, synth_generate, write_dataset, DataError, Dataset, FeatureRecord,
    SynthConfig, HEADER_LEN,
};
use trifuse::detector::bce_loss;
use trifuse::fusion::{tri_transformer_fuse, ChannelMask, FusionConfig, Strategy, TriTransformer};
use trifuse::gradcheck::{run_gradcheck, GradcheckConfig};
use trifuse::nn::ParamStore;
use trifuse::train::{
    compare_fusions, evaluate, run_ablation, train, AblationToggles, Confusion, Metrics, TrainConfig,
};
use trifuse::{Model, Precision, Tape, Tensor};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8)
}

fn synth(n: usize, sep: f64, w: f64, seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        n,
        dims: SynthConfig::default_dims(),
        class_separation: sep,
        cross_modal_weight: w,
        seed,
    })
    .expect("valid generator parameters")
}

// ---- straight-line reference implementations -------------------------------

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn cols(m: &Mat, lo: usize, hi: usize) -> Mat {
    m.iter().map(|r| r[lo..hi].to_vec()).collect()
}

fn attend(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(p, vr)| p / z * vr[c]).sum())
                .collect()
        })
        .collect()
}

fn param(store: &ParamStore, name: &str) -> Mat {
    let t = store.get(store.id(name).unwrap_or_else(|| panic!("missing {name}")));
    if t.shape().len() == 1 {
        vec![t.data().to_vec()]
    } else {
        to_mat(t)
    }
}

fn affine(x: &Mat, store: &ParamStore, name: &str) -> Mat {
    let b = &param(store, &format!("{name}.b"))[0];
    mm(x, &param(store, &format!("{name}.w")))
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(a, c)| a + c).collect())
        .collect()
}

fn heads_reference(store: &ParamStore, name: &str, xq: &Mat, xkv: &Mat, n_heads: usize) -> Mat {
    let q = mm(xq, &param(store, &format!("{name}.w_q")));
    let k = mm(xkv, &param(store, &format!("{name}.w_k")));
    let v = mm(xkv, &param(store, &format!("{name}.w_v")));
    let dh = q[0].len() / n_heads;
    let mut concat: Mat = vec![Vec::new(); xq.len()];
    for h in 0..n_heads {
        let o = attend(
            &cols(&q, h * dh, (h + 1) * dh),
            &cols(&k, h * dh, (h + 1) * dh),
            &cols(&v, h * dh, (h + 1) * dh),
        );
        for (row, part) in concat.iter_mut().zip(o) {
            row.extend(part);
        }
    }
    mm(&concat, &param(store, &format!("{name}.w_o")))
}

/// Self-attention on text, cross-attention text→image and text→imgtext,
/// per-branch MLP, mean over text positions, concatenation.
fn tri_reference(store: &ParamStore, x: [&Mat; 3]) -> Vec<f64> {
    let mut fused = Vec::new();
    for (c, name) in ["text", "image", "imgtext"].iter().enumerate() {
        let y = heads_reference(store, &format!("att.{name}"), x[0], x[c], 1);
        let h: Mat = affine(&y, store, &format!("mlp.{name}.l1"))
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let f = affine(&h, store, &format!("mlp.{name}.l2"));
        let len = f.len() as f64;
        fused.extend((0..f[0].len()).map(|j| f.iter().map(|r| r[j]).sum::<f64>() / len));
    }
    fused
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

fn tensor_of(rows: &[Mat]) -> Tensor {
    let flat: Vec<&[f64]> = rows.iter().flat_map(|m| m.iter().map(|r| r.as_slice())).collect();
    Tensor::from_rows(&flat)
}

// ---- criteria --------------------------------------------------------------

const OPS: [&str; 9] = [
    "matmul",
    "linear",
    "batchnorm",
    "softmax",
    "scaled_attention",
    "multi_head",
    "tri_transformer_fuse",
    "classify",
    "bce_loss",
];

fn gradient_integrity() -> Check {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckConfig::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    for op in OPS {
        ensure(report.checks.iter().any(|c| c.op == op), format!("no check for {op}"))?;
    }
    let worst = report
        .checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    ensure(report.passed(), format!("failed: {:?}", report.failures()))?;
    ensure(worst.max_rel_error < 1e-4, "tolerance")?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} checks, worst {} at {:.2e}, {secs:.2}s",
        report.checks.len(),
        worst.op,
        worst.max_rel_error
    ))
}

fn equation_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = FusionConfig {
        d_model: 4,
        d_f: 3,
        n_heads: 1,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let tri = TriTransformer::new(&mut store, 5, &cfg).map_err(|e| e.to_string())?;
    // two samples, L = 2 for every channel
    let x: Vec<[Mat; 3]> = (0..2)
        .map(|_| std::array::from_fn(|_| random_mat(&mut rng, 2, 4)))
        .collect();
    let mut tape = Tape::new(Precision::Double);
    let vars = store.bind(&mut tape).map_err(|e| e.to_string())?;
    let chans: Vec<_> = (0..3)
        .map(|c| tape.constant(tensor_of(&[x[0][c].clone(), x[1][c].clone()])).unwrap())
        .collect();
    let fused = tri_transformer_fuse(&mut tape, &vars, &tri, [chans[0], chans[1], chans[2]], 2, 2)
        .map_err(|e| e.to_string())?;
    let got = tape.value(fused.values);
    let mut worst_tri: f64 = 0.0;
    for (b, xb) in x.iter().enumerate() {
        let want = tri_reference(&store, [&xb[0], &xb[1], &xb[2]]);
        ensure(want.len() == 9 && got.cols() == 9, "fused width")?;
        for (g, w) in got.row(b).iter().zip(&want) {
            worst_tri = worst_tri.max((g - w).abs());
        }
    }
    ensure(worst_tri < 1e-6, format!("tri_transformer_fuse off by {worst_tri:.2e}"))?;
    ensure(
        got.data().iter().any(|v| v.abs() > 1e-3),
        "fused output is trivially zero",
    )?;

    let mut store = ParamStore::new();
    let att = AttentionParams::new(&mut store, 3, "att", 4, 2).map_err(|e| e.to_string())?;
    let xq = random_mat(&mut rng, 3, 4);
    let xkv = random_mat(&mut rng, 5, 4);
    let mut tape = Tape::new(Precision::Double);
    let vars = store.bind(&mut tape).map_err(|e| e.to_string())?;
    let q = tape.constant(tensor_of(std::slice::from_ref(&xq))).unwrap();
    let kv = tape.constant(tensor_of(std::slice::from_ref(&xkv))).unwrap();
    let out = multi_head(&mut tape, &vars, &att, q, kv, 1)
        .map_err(|e| e.to_string())?
        .output;
    let want = heads_reference(&store, "att", &xq, &xkv, 2);
    let worst_mh = to_mat(tape.value(out))
        .iter()
        .flatten()
        .zip(want.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(worst_mh < 1e-6, format!("multi_head off by {worst_mh:.2e}"))?;
    Ok(format!(
        "tri max diff {worst_tri:.1e}, two-head max diff {worst_mh:.1e}"
    ))
}

fn loss_oracle() -> Check {
    let bce = |p: Vec<f64>, y: &[u8]| {
        let mut tape = Tape::new(Precision::Double);
        let v = tape.constant(Tensor::vector(p)).unwrap();
        let l = bce_loss(&mut tape, v, y).unwrap();
        tape.value(l).data()[0]
    };
    let a = bce(vec![0.9, 0.2], &[1, 0]);
    let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
    ensure((a - want).abs() < 1e-9, format!("{a} vs {want}"))?;
    let u = bce(vec![0.5; 4], &[1, 0, 0, 1]);
    ensure((u - std::f64::consts::LN_2).abs() < 1e-9, format!("uniform {u}"))?;
    Ok(format!("{a:.12} and {u:.12}"))
}

fn brute_confusion(probs: &[f64], labels: &[u8]) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &y) in probs.iter().zip(labels) {
        let pred = p >= 0.5;
        if pred && y == 1 {
            c.tp += 1
        } else if pred {
            c.fp += 1
        } else if y == 0 {
            c.tn += 1
        } else {
            c.fn_ += 1
        }
    }
    c
}

fn brute_metrics(c: Confusion) -> [f64; 7] {
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let (fp_, fr) = (div(c.tp, c.tp + c.fp), div(c.tp, c.tp + c.fn_));
    let (rp, rr) = (div(c.tn, c.tn + c.fn_), div(c.tn, c.tn + c.fp));
    [
        div(c.tp + c.tn, c.tp + c.fp + c.tn + c.fn_),
        fp_,
        fr,
        f1(fp_, fr),
        rp,
        rr,
        f1(rp, rr),
    ]
}

fn as_array(m: &Metrics) -> [f64; 7] {
    [
        m.accuracy,
        m.fake.precision,
        m.fake.recall,
        m.fake.f1,
        m.real.precision,
        m.real.recall,
        m.real.f1,
    ]
}

fn metrics_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut degenerate = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..40);
        // every tenth set is single-class or single-prediction to hit zero denominators
        let probs: Vec<f64> = (0..n)
            .map(|_| if i % 10 == 0 { 0.2 } else { rng.random_range(0.0..1.0) })
            .collect();
        let labels: Vec<u8> = (0..n)
            .map(|_| if i % 10 == 5 { 1 } else { rng.random_range(0..2) })
            .collect();
        let m = Metrics::from_predictions(&probs, &labels).map_err(|e| e.to_string())?;
        let c = brute_confusion(&probs, &labels);
        if c.tp + c.fp == 0 || c.tn + c.fn_ == 0 || c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
            degenerate += 1;
        }
        ensure(m.confusion == c, format!("set {i}: confusion"))?;
        ensure(as_array(&m) == brute_metrics(c), format!("set {i}: metrics"))?;
    }
    ensure(degenerate >= 100, "too few degenerate sets")?;
    let ds = synth(120, 1.0, 0.5, 3);
    let model = Model::new(TrainConfig::default().model_config(ds.dims())).map_err(|e| e.to_string())?;
    let recs: Vec<&FeatureRecord> = ds.records.iter().collect();
    let probs = model.predict(&recs).map_err(|e| e.to_string())?;
    let labels: Vec<u8> = recs.iter().map(|r| r.label).collect();
    let m = evaluate(&model, &recs).map_err(|e| e.to_string())?;
    ensure(
        as_array(&m) == brute_metrics(brute_confusion(&probs, &labels)),
        "evaluate() on a model",
    )?;
    Ok(format!("1000 sets exact, {degenerate} with a zero denominator"))
}

fn desk_training() -> Check {
    let ds = synth(800, 3.0, 0.5, 7);
    let cfg = TrainConfig {
        seed: 7,
        epochs: 30,
        lr: 1e-3,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&ds, &cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let acc = out.final_metrics().accuracy;
    ensure(acc >= 0.95, format!("test accuracy {acc:.4}"))?;
    ensure(secs < 300.0, format!("took {secs:.1}s"))?;
    Ok(format!("test accuracy {acc:.4} in {secs:.1}s"))
}

fn comparison_w08() -> Check {
    let mut lines = Vec::new();
    for seed in [7, 8, 9] {
        let ds = synth(800, 3.0, 0.8, seed);
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let report = compare_fusions(&ds, &cfg, threads()).map_err(|e| e.to_string())?;
        let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
        ensure(names == Strategy::COMPARED.map(|s| s.name()), format!("rows {names:?}"))?;
        let acc = |name: &str| report.row(name).and_then(|r| r.metrics).map(|m| m.accuracy);
        let rows: Option<Vec<f64>> = names.iter().map(|n| acc(n)).collect();
        let rows = rows.ok_or("a strategy failed")?;
        let best = rows.iter().cloned().fold(0.0, f64::max);
        let tri = acc("tri_transformer").unwrap();
        ensure(tri >= best - 0.02, format!("seed {seed}: tri {tri:.4} best {best:.4}"))?;
        lines.push(format!("seed {seed}: tri {tri:.4} best {best:.4}"));
    }
    Ok(lines.join("; "))
}

fn comparison_chance() -> Check {
    let ds = synth(1000, 0.0, 0.5, 7);
    let cfg = TrainConfig {
        test_fraction: 0.5,
        ..TrainConfig::default()
    };
    let report = compare_fusions(&ds, &cfg, threads()).map_err(|e| e.to_string())?;
    ensure(report.rows.len() == 5, "five rows")?;
    let mut parts = Vec::new();
    for r in &report.rows {
        let a = r.metrics.ok_or_else(|| format!("{} failed", r.name))?.accuracy;
        ensure((0.4..=0.6).contains(&a), format!("{} at {a:.4}", r.name))?;
        parts.push(format!("{} {a:.3}", r.name));
    }
    Ok(parts.join(", "))
}

fn ablation() -> Check {
    let ds = synth(200, 2.5, 0.5, 4);
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let report = run_ablation(&ds, &cfg, &AblationToggles::default(), threads()).map_err(|e| e.to_string())?;
    ensure(report.rows.len() == 14, format!("{} rows", report.rows.len()))?;
    for mask in ChannelMask::all_nonempty() {
        let on = report
            .row(&format!("tri_transformer/{}", mask.label()))
            .ok_or("missing fusion row")?;
        let off = report
            .row(&format!("concat_only/{}", mask.label()))
            .ok_or("missing concat_only row")?;
        ensure(
            on.metrics.is_some() && off.metrics.is_some(),
            format!("{} failed", mask.label()),
        )?;
        ensure(
            off.attention_params == 0,
            format!("concat_only/{} allocates attention", mask.label()),
        )?;
        ensure(
            on.attention_params == 3 * 4 * 32 * 32,
            format!("tri/{} attention count", mask.label()),
        )?;
    }
    // perturb text only; every text-masked row must be unchanged
    let mut perturbed = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for r in &mut perturbed.records {
        r.text.iter_mut().for_each(|v| *v = rng.random_range(-50.0..50.0));
    }
    let text_masked = AblationToggles {
        masks: ChannelMask::all_nonempty().into_iter().filter(|m| !m.text).collect(),
        fusion: vec![true, false],
    };
    let a = run_ablation(&ds, &cfg, &text_masked, threads()).map_err(|e| e.to_string())?;
    let b = run_ablation(&perturbed, &cfg, &text_masked, threads()).map_err(|e| e.to_string())?;
    ensure(
        a.rows.len() == 6 && a == b,
        "text-masked rows changed under text perturbation",
    )?;
    for r in &a.rows {
        ensure(
            report.row(&r.name) == Some(r),
            format!("{} differs from the full grid", r.name),
        )?;
    }
    Ok("14 rows; concat_only allocates 0 attention weights; 6 text-masked rows invariant".into())
}

fn format_checks() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = synth(25, 1.0, 0.5, 1);
    let p = dir.path().join("d.ttbf");
    write_dataset(&ds, &p).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
    let back = read_dataset(&p).map_err(|e| e.to_string())?;
    ensure(back == ds, "records differ after reading back")?;
    ensure(
        encode_dataset(&back).map_err(|e| e.to_string())? == bytes,
        "re-encoding differs",
    )?;

    let rec_bytes = ds.dims().record_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let e1 = decode_dataset(&bad_magic).expect_err("bad magic accepted");
    ensure(matches!(e1, DataError::BadMagic(_)), format!("bad magic gave {e1}"))?;

    let cut = &bytes[..HEADER_LEN + 9 * rec_bytes + 7];
    let e2 = decode_dataset(cut).expect_err("truncation accepted");
    ensure(
        matches!(e2, DataError::Truncated { record: 9, .. }),
        format!("truncation gave {e2}"),
    )?;

    let mut bad_label = bytes.clone();
    bad_label[HEADER_LEN + 4 * rec_bytes + 8] = 7;
    let e3 = decode_dataset(&bad_label).expect_err("bad label accepted");
    ensure(
        matches!(e3, DataError::BadLabel { record: 4, label: 7 }),
        format!("bad label gave {e3}"),
    )?;
    Ok(format!("round trip bit-exact; \"{e1}\"; \"{e2}\"; \"{e3}\""))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_trifuse"))
        .args(args)
        .current_dir(dir)
        .env("TRIFUSE_THREADS", "4")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

fn cli_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let runs: [(&[&str], &[&str], &str); 7] = [
        (
            &["gen", "--n", "120", "--seed", "5", "-o", "d.ttbf"],
            &["d.ttbf", "d.ttbf.manifest.json"],
            "d.ttbf.run.json",
        ),
        (
            &["train", "--data", "d.ttbf", "--epochs", "2", "-o", "m.json"],
            &["m.json", "m.json.log.csv", "m.json.split.json"],
            "m.json.run.json",
        ),
        (
            &["eval", "--model", "m.json", "--data", "d.ttbf", "-o", "e.csv"],
            &["e.csv"],
            "e.csv.run.json",
        ),
        (
            &["compare", "--data", "d.ttbf", "--epochs", "1", "-o", "c.csv"],
            &["c.csv"],
            "c.csv.run.json",
        ),
        (
            &["ablate", "--data", "d.ttbf", "--epochs", "1", "-o", "a.csv"],
            &["a.csv"],
            "a.csv.run.json",
        ),
        (
            &["export-fused", "--model", "m.json", "--data", "d.ttbf", "-o", "f.csv"],
            &["f.csv"],
            "f.csv.run.json",
        ),
        (&["gradcheck", "-o", "g.json"], &["g.json"], "g.json.run.json"),
    ];
    let mut first = Vec::new();
    for (args, outputs, _) in &runs {
        run_cli(d, args)?;
        for o in *outputs {
            first.push((
                PathBuf::from(o),
                std::fs::read(d.join(o)).map_err(|e| format!("{o}: {e}"))?,
            ));
        }
    }
    for (_, outputs, manifest) in &runs {
        for o in *outputs {
            std::fs::remove_file(d.join(o)).map_err(|e| e.to_string())?;
        }
        run_cli(d, &["rerun", manifest])?;
    }
    for (path, bytes) in &first {
        let again = std::fs::read(d.join(path)).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(&again == bytes, format!("{} differs on re-run", path.display()))?;
    }
    Ok(format!(
        "7 commands, {} artifacts byte-identical after re-running from manifests",
        first.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient integrity", gradient_integrity),
        ("equation oracle", equation_oracle),
        ("loss oracle", loss_oracle),
        ("metrics oracle", metrics_oracle),
        ("desk-scale training", desk_training),
        ("fusion comparison, cross-modal weight 0.8", comparison_w08),
        ("fusion comparison, zero separation", comparison_chance),
        ("ablation grid and parameter audit", ablation),
        ("feature file format", format_checks),
        ("cli determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
