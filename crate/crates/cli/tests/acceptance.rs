//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 4 7`.

mod common;

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::sync::Arc;
use std::time::{Duration, Instant};

use spectra_core::checkpoint;
use spectra_core::data::caption::CaptionMetadata;
use spectra_core::data::synth::{self, read_labels, write_labels};
use spectra_core::data::{
    load_msi, read_jsonl, save_msi, write_jsonl, InstructionSample, MultispectralImage, Split, StubCaptioner,
    SynthConfig,
};
use spectra_core::encoder::{EncoderConfig, EncoderWeights, SpectralPatchConfig};
use spectra_core::eval::{
    fold_blocks, read_sweep_csv, sweep_splits, train_split, write_sweep_csv, FeatureMatrix, ProbeConfig, ProbeResult,
    Provenance, RATIOS,
};
use spectra_core::lm::tokenizer::{prompt, tokenize};
use spectra_core::lm::{LmConfig, LoraAdapters, LoraConfig, MiniLm, Sampling, Task};
use spectra_core::projector::{ProjectorWeights, WEIGHT};
use spectra_core::tensor::gradcheck::{gradcheck, relative_error};
use spectra_core::tensor::{Tape, Tensor, Var};
use spectra_core::train::{
    accumulate_gradients, load_checkpoint, save_checkpoint, train_alignment, train_finetune, ModelConfig, Stage,
    StageConfig, TrainExample,
};
use spectra_core::{rng, Error};

use common::{sha256, Fixture};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

trait OrFail<T> {
    fn or_fail(self, what: &str) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> OrFail<T> for Result<T, E> {
    fn or_fail(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

fn within(started: Instant, budget: Duration) -> Result<f64, String> {
    let t = started.elapsed();
    ensure!(
        t <= budget,
        "took {:.1}s, budget {}s",
        t.as_secs_f64(),
        budget.as_secs()
    );
    Ok(t.as_secs_f64())
}

// ---------------------------------------------------------------------------
// Toy models

/// 32×32×12 images, 8×8 spatial patches in groups of 3 bands: 64 tokens.
fn toy_patch() -> SpectralPatchConfig {
    SpectralPatchConfig {
        image_size: 32,
        bands: 12,
        patch: 8,
        spectral_group: 3,
    }
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            patch: toy_patch(),
            ..EncoderConfig::default()
        },
        lm: LmConfig {
            dim: 64,
            layers: 4,
            heads: 4,
            context: 768,
            mlp_ratio: 4,
        },
        ..ModelConfig::default()
    }
}

fn toy_images(per_class: usize) -> synth::SynthDataset {
    synth::generate(
        7,
        4,
        per_class,
        &SynthConfig {
            image_size: 32,
            ..SynthConfig::default()
        },
    )
    .unwrap()
}

fn sample(id: &str, task: Task, instruction: &str, response: &str, label: &str) -> InstructionSample {
    InstructionSample {
        id: id.into(),
        image: String::new(),
        task,
        instruction: instruction.into(),
        response: response.into(),
        labels: vec![label.into()],
        split: Split::Train,
    }
}

// ---------------------------------------------------------------------------
// 1. Gradients

const SEEDS: u64 = 10;
const GRAD_TOL: f64 = 1e-3;

fn randn(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r).with_requires_grad(true)
}

type OpCase = (
    &'static str,
    f32,
    fn(&mut rng::Rng) -> Vec<Tensor>,
    fn(&mut Tape, &[Var]) -> spectra_core::Result<Var>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        (
            "matmul",
            1e-3,
            |r| vec![randn(&[4, 4], r), randn(&[4, 4], r)],
            |t, v| {
                let p = t.matmul(v[0], v[1])?;
                Ok(t.sum(p))
            },
        ),
        (
            "matmul_nt",
            1e-2,
            |r| vec![randn(&[3, 4], r), randn(&[5, 4], r)],
            |t, v| t.matmul_nt(v[0], v[1]),
        ),
        (
            "linear",
            1e-2,
            |r| vec![randn(&[3, 4], r), randn(&[5, 4], r), randn(&[5], r)],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
        ("transpose", 1e-2, |r| vec![randn(&[3, 4], r)], |t, v| t.transpose(v[0])),
        (
            "add",
            1e-2,
            |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)],
            |t, v| t.add(v[0], v[1]),
        ),
        (
            "add_row",
            1e-2,
            |r| vec![randn(&[3, 4], r), randn(&[4], r)],
            |t, v| t.add_row(v[0], v[1]),
        ),
        (
            "mul",
            1e-2,
            |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)],
            |t, v| t.mul(v[0], v[1]),
        ),
        (
            "scale",
            1e-2,
            |r| vec![randn(&[3, 4], r)],
            |t, v| Ok(t.scale(v[0], -1.7)),
        ),
        ("gelu", 1e-2, |r| vec![randn(&[4, 5], r)], |t, v| Ok(t.gelu(v[0]))),
        (
            "softmax/0",
            1e-2,
            |r| vec![randn(&[3, 5], r)],
            |t, v| t.softmax(v[0], 0),
        ),
        (
            "softmax/1",
            1e-2,
            |r| vec![randn(&[3, 5], r)],
            |t, v| t.softmax(v[0], 1),
        ),
        (
            "layer_norm",
            1e-2,
            |r| vec![randn(&[3, 6], r), randn(&[6], r), randn(&[6], r)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        (
            "cross_entropy",
            1e-2,
            |r| vec![randn(&[5, 7], r)],
            |t, v| t.cross_entropy(v[0], &[0, 3, 6, 2, 2], &[true, false, true, true, true]),
        ),
        (
            "embedding",
            1e-2,
            |r| vec![randn(&[7, 3], r)],
            |t, v| t.embedding(v[0], &[0, 2, 2, 6]),
        ),
        ("mean_rows", 1e-2, |r| vec![randn(&[4, 3], r)], |t, v| t.mean_rows(v[0])),
        ("sum", 1e-2, |r| vec![randn(&[4, 3], r)], |t, v| Ok(t.sum(v[0]))),
        (
            "causal_mask",
            1e-2,
            |r| vec![randn(&[3, 5], r)],
            |t, v| {
                let m = t.causal_mask(v[0], 2)?;
                t.softmax(m, 1)
            },
        ),
        (
            "slice_rows",
            1e-2,
            |r| vec![randn(&[5, 2], r)],
            |t, v| t.slice_rows(v[0], 2, 2),
        ),
        (
            "slice_cols",
            1e-2,
            |r| vec![randn(&[3, 6], r)],
            |t, v| t.slice_cols(v[0], 1, 3),
        ),
        (
            "concat_rows",
            1e-2,
            |r| vec![randn(&[1, 3], r), randn(&[4, 3], r)],
            |t, v| t.concat_rows(&[v[1], v[0]]),
        ),
        (
            "concat_cols",
            1e-2,
            |r| vec![randn(&[3, 2], r), randn(&[3, 4], r)],
            |t, v| t.concat_cols(&[v[0], v[1], v[0]]),
        ),
    ]
}

/// `Σ out ⊙ R` for a fixed random `R`.
fn to_scalar(tape: &mut Tape, out: Var, seed: u64) -> spectra_core::Result<Var> {
    if tape.shape(out).iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let r = Tensor::randn(tape.shape(out), 1.0, &mut rng::stream(seed, "projection"));
    let rv = tape.leaf(&r);
    let p = tape.mul(out, rv)?;
    Ok(tape.sum(p))
}

fn composite_error(seed: u64) -> Result<f64, String> {
    let model = ModelConfig {
        encoder: EncoderConfig {
            patch: SpectralPatchConfig {
                image_size: 16,
                bands: 4,
                patch: 8,
                spectral_group: 2,
            },
            dim: 16,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
        },
        lm: LmConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            context: 64,
            mlp_ratio: 2,
        },
        ..ModelConfig::default()
    };
    let image =
        MultispectralImage::from_planes(16, 16, 4, rng::normal_vec(&mut rng::seeded(seed), 16 * 16 * 4, 0.3)).unwrap();
    let encoder = EncoderWeights::init(seed, model.encoder).unwrap();
    let lm = MiniLm::init(seed, model.lm).unwrap();
    let s = sample("s", Task::Caption, "Hi", "sea", "sea");
    let z = Arc::new(encoder.encode(&image).unwrap());
    let ex = TrainExample::new(&s, z.clone(), model.lm.context).unwrap();
    let (targets, mask) = ex.sequence.shifted();
    let loss = |proj: &ProjectorWeights| -> (f64, Tape, Var) {
        let mut tape = Tape::new();
        let zv = tape.leaf(&z.tokens);
        let h = proj.forward(&mut tape, zv).unwrap();
        let logits = lm
            .forward_tape(&mut tape, &ex.sequence.tokens, Some(h), None, None)
            .unwrap();
        let ce = tape.cross_entropy(logits, &targets, &mask).unwrap();
        (tape.value(ce)[0] as f64, tape, ce)
    };
    let proj = ProjectorWeights::init(seed, model.projector()).unwrap();
    let (_, tape, ce) = loss(&proj);
    let grads = tape.backward(ce).unwrap();
    let analytic = grads
        .named()
        .find(|(n, _)| *n == WEIGHT)
        .map(|(_, g)| g.to_vec())
        .unwrap();
    let h = 1e-2f32;
    let mut p = proj.clone();
    let n = analytic.len();
    let numeric: Vec<f64> = (0..n)
        .map(|i| {
            let orig = p.store().get(WEIGHT).unwrap().data()[i];
            let mut at = |v: f32| {
                p.store_mut().get_mut(WEIGHT).unwrap().data_mut()[i] = v;
                loss(&p).0
            };
            let d = (at(orig + h) - at(orig - h)) / (2.0 * h as f64);
            p.store_mut().get_mut(WEIGHT).unwrap().data_mut()[i] = orig;
            d
        })
        .collect();
    Ok(relative_error(&analytic, &numeric))
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut worst = (0.0f64, "");
    let cases = op_cases();
    for &(name, h, make, op) in &cases {
        for seed in 0..SEEDS {
            let inputs = make(&mut rng::seeded(seed));
            let errors = gradcheck(&inputs, h, |t, v| {
                let out = op(t, v)?;
                to_scalar(t, out, seed)
            })
            .or_fail(name)?;
            for (k, e) in errors.into_iter().enumerate() {
                let Some(e) = e else { continue };
                ensure!(e < GRAD_TOL, "{name} input {k} seed {seed}: relative error {e:.2e}");
                if e > worst.0 {
                    worst = (e, name);
                }
            }
        }
    }
    let mut composite = 0.0f64;
    for seed in 0..3 {
        let e = composite_error(seed)?;
        ensure!(e < GRAD_TOL, "composite graph seed {seed}: relative error {e:.2e}");
        composite = composite.max(e);
    }
    let t = within(started, Duration::from_secs(120))?;
    Ok(format!(
        "{} ops × {SEEDS} seeds, worst {:.1e} ({}); composite d/dW {composite:.1e}; {t:.1}s",
        cases.len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------------------
// 2. Frozen weights

fn frozen_weights() -> Outcome {
    let started = Instant::now();
    let f = Fixture::new(5);
    let inst = "inst/instructions.jsonl";
    f.align("align");
    f.ok(&[
        "train",
        "finetune",
        "--config",
        "toy.toml",
        "--instructions",
        inst,
        "--checkpoint",
        "align/checkpoint.splv",
        "--out",
        "ft",
    ]);
    let model: ModelConfig =
        serde_json::from_str(&std::fs::read_to_string(f.join("align/model.json")).unwrap()).or_fail("model.json")?;
    let a = load_checkpoint(&f.join("align/checkpoint.splv"), &model).or_fail("align checkpoint")?;
    let ft = load_checkpoint(&f.join("ft/checkpoint.splv"), &model).or_fail("finetune checkpoint")?;
    let enc0 = EncoderWeights::init(7, model.encoder).unwrap().to_bytes();
    let lm0 = MiniLm::init(7, model.lm).unwrap().to_bytes();
    ensure!(a.encoder.to_bytes() == enc0, "encoder bytes changed during alignment");
    ensure!(ft.encoder.to_bytes() == enc0, "encoder bytes changed during finetuning");
    ensure!(a.lm.to_bytes() == lm0, "LM base bytes changed during alignment");
    ensure!(ft.lm.to_bytes() == lm0, "LM base bytes changed during finetuning");
    ensure!(a.projector != ft.projector, "finetuning left the projector untouched");
    ensure!(ft.adapters.is_some(), "finetune checkpoint carries no adapters");

    // The contract is enforced, not just observed: a trainable encoder is refused.
    let mut enc = a.encoder.clone();
    let samples = read_jsonl(&f.join(inst)).unwrap();
    let cfg = StageConfig {
        steps: Some(1),
        effective_batch: 1,
        image_size: 32,
        ..StageConfig::align()
    };
    let ex = spectra_core::train::prepare_examples(&samples, &f.join("inst"), &enc, &model.lm, &cfg).unwrap();
    enc.set_frozen(false);
    let mut proj = a.projector.clone();
    let r = train_alignment(&ex, &enc, &mut proj, &a.lm, &cfg, None);
    ensure!(
        matches!(r, Err(Error::FrozenViolation(_))),
        "unfrozen encoder was accepted: {r:?}"
    );
    let t = within(started, Duration::from_secs(300))?;
    Ok(format!(
        "encoder and LM base bit-identical across both stages; violation rejected; {t:.1}s"
    ))
}

// ---------------------------------------------------------------------------
// 3. LoRA

fn lora() -> Outcome {
    let cfg = toy_model();
    let lm = MiniLm::init(11, cfg.lm).unwrap();
    let tokens = tokenize("the quick brown fox");
    let base = lm.forward(&tokens, None, None).unwrap();
    let zero_b = LoraAdapters::init(11, cfg.lora, &cfg.lm).unwrap();
    let with = lm.forward(&tokens, None, Some(&zero_b)).unwrap();
    let bit_equal = base
        .data()
        .iter()
        .zip(with.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure!(bit_equal, "B = 0 adapters changed the logits");

    let mut ad = zero_b.clone();
    for (name, t) in ad.store_mut().iter_mut() {
        if name.ends_with(".b") {
            *t = Tensor::randn(t.shape(), 0.2, &mut rng::stream(12, name));
        }
    }
    let adapted = lm.forward(&tokens, None, Some(&ad)).unwrap();
    let merged = ad.merge(&lm).unwrap().forward(&tokens, None, None).unwrap();
    let diff = adapted
        .data()
        .iter()
        .zip(merged.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    ensure!(diff < 1e-4, "merged vs adapter logits differ by {diff:.2e}");
    let moved = adapted
        .data()
        .iter()
        .zip(base.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    ensure!(moved > 1e-3, "non-zero B left the logits unchanged");

    for rank in [1, 4, 8] {
        let c = LoraConfig { rank, alpha: None };
        let a = LoraAdapters::init(0, c, &cfg.lm).unwrap();
        let closed = cfg.lm.layers * 4 * rank * 2 * cfg.lm.dim;
        ensure!(
            a.num_params() == closed,
            "rank {rank}: {} parameters, closed form {closed}",
            a.num_params()
        );
    }
    Ok(format!(
        "B=0 bit-equal; merged max |Δ| {diff:.1e}; counts match L·4·r·2d"
    ))
}

// ---------------------------------------------------------------------------
// 4. Overfitting

fn overfit() -> Outcome {
    let started = Instant::now();
    let model = toy_model();
    let ds = toy_images(1);
    let enc = EncoderWeights::init(1, model.encoder).unwrap();
    let lm = MiniLm::init(3, model.lm).unwrap();

    // Alignment on one image with its full stub caption.
    let s0 = &ds.samples[0];
    let meta = CaptionMetadata {
        id: s0.id.clone(),
        labels: vec![ds.classes[s0.class].clone()],
        height: 32,
        width: 32,
        bands: s0.image.bands().to_vec(),
    };
    let caption = StubCaptioner::render(&meta);
    let one = sample("one", Task::Caption, "Describe this image.", &caption, &meta.labels[0]);
    let z0 = Arc::new(enc.encode(&s0.image).unwrap());
    let ex = vec![TrainExample::new(&one, z0, model.lm.context).unwrap()];
    let mut proj = ProjectorWeights::init(2, model.projector()).unwrap();
    let cfg = StageConfig {
        effective_batch: 1,
        steps: Some(500),
        lr: 1e-3,
        image_size: 32,
        ..StageConfig::align()
    };
    let r = train_alignment(&ex, &enc, &mut proj, &lm, &cfg, None).or_fail("align")?;
    let ratio = r.final_loss().unwrap() / r.initial_loss().unwrap();
    ensure!(ratio <= 0.1, "alignment loss ratio {ratio:.4} after 500 steps");

    // Finetuning memorizes two images × two tasks.
    let mut examples = Vec::new();
    let mut toy = Vec::new();
    for s in ds.samples.iter().take(2) {
        let label = &ds.classes[s.class];
        let z = Arc::new(enc.encode(&s.image).unwrap());
        for (task, instr, resp) in [
            (Task::Caption, "Describe this image.", format!("A scene of {label}.")),
            (Task::Classification, "Classify this scene.", label.clone()),
        ] {
            let smp = sample(&format!("{}-{}", s.id, task.name()), task, instr, &resp, label);
            examples.push(TrainExample::new(&smp, z.clone(), model.lm.context).unwrap());
            toy.push((smp, z.clone()));
        }
    }
    let mut proj = ProjectorWeights::init(2, model.projector()).unwrap();
    let mut ad = LoraAdapters::init(4, model.lora, &model.lm).unwrap();
    let cfg = StageConfig {
        effective_batch: 4,
        micro_batch: 4,
        steps: Some(300),
        lr: 2e-4,
        image_size: 32,
        ..StageConfig::finetune()
    };
    train_finetune(&examples, &enc, &mut proj, &lm, &mut ad, &cfg, None).or_fail("finetune")?;
    let mut exact = 0;
    let mut misses = Vec::new();
    for (s, z) in &toy {
        let h = proj.project(z).unwrap();
        let g = lm
            .generate(
                &prompt(s.task, &s.instruction),
                Some(&h),
                Some(&ad),
                64,
                Sampling::Greedy,
            )
            .unwrap();
        if g.text == s.response && g.hit_eos {
            exact += 1;
        } else {
            misses.push(format!("{:?} ≠ {:?}", g.text, s.response));
        }
    }
    ensure!(exact == 4, "finetune exact match {exact}/4: {}", misses.join("; "));
    let t = within(started, Duration::from_secs(300))?;
    Ok(format!(
        "align loss ratio {ratio:.3} in 500 steps; finetune exact match 4/4; {t:.1}s"
    ))
}

// ---------------------------------------------------------------------------
// 5. Gradient accumulation

fn effective_batch() -> Outcome {
    let model = toy_model();
    let ds = toy_images(2);
    let enc = EncoderWeights::init(5, model.encoder).unwrap();
    let lm = MiniLm::init(5, model.lm).unwrap();
    let examples: Vec<TrainExample> = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let label = &ds.classes[s.class];
            // Different response lengths make per-sample normalization matter.
            let resp = format!("A scene of {}.{}", label, " Clear sky.".repeat(i % 3));
            let task = if i % 2 == 0 {
                Task::Caption
            } else {
                Task::Classification
            };
            let smp = sample(&s.id, task, "Describe this image.", &resp, label);
            TrainExample::new(&smp, Arc::new(enc.encode(&s.image).unwrap()), model.lm.context).unwrap()
        })
        .collect();
    let batch: Vec<&TrainExample> = examples.iter().collect();
    ensure!(batch.len() == 8, "expected 8 samples, got {}", batch.len());

    let mut worst = 0.0f64;
    for stage in [Stage::Align, Stage::Finetune] {
        let mut ad = LoraAdapters::init(5, model.lora, &model.lm).unwrap();
        for (name, t) in ad.store_mut().iter_mut() {
            if name.ends_with(".b") {
                *t = Tensor::randn(t.shape(), 0.1, &mut rng::stream(6, name)).with_requires_grad(true);
            }
        }
        let mut proj = ProjectorWeights::init(5, model.projector()).unwrap();
        fn adapters(stage: Stage, a: &mut LoraAdapters) -> Option<&mut LoraAdapters> {
            (stage == Stage::Finetune).then_some(a)
        }
        let mut ad1 = ad.clone();
        let g1 = accumulate_gradients(stage, &batch, 1, &mut proj, &lm, adapters(stage, &mut ad1)).or_fail("8×1")?;
        let mut ad8 = ad.clone();
        let g8 = accumulate_gradients(stage, &batch, 8, &mut proj, &lm, adapters(stage, &mut ad8)).or_fail("1×8")?;
        ensure!(g1.keys().eq(g8.keys()), "{}: different gradient sets", stage.name());
        for (name, a) in &g1 {
            let b: Vec<f64> = g8[name].iter().map(|&x| x as f64).collect();
            ensure!(a.iter().any(|&x| x != 0.0), "{} `{name}`: zero gradient", stage.name());
            let e = relative_error(a, &b);
            ensure!(e < 1e-5, "{} `{name}`: relative difference {e:.2e}", stage.name());
            worst = worst.max(e);
        }
    }
    Ok(format!("8×1 vs 1×8 gradients, worst relative difference {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 6. Probing protocol

fn band_mean_features(ds: &synth::SynthDataset, labels: &[String]) -> FeatureMatrix {
    let means = ds.band_means();
    let dim = means[0].len();
    FeatureMatrix::new(
        Provenance::VisionOnly,
        ds.samples.iter().map(|s| s.id.clone()).collect(),
        labels.to_vec(),
        dim,
        means.iter().flatten().map(|&v| v as f32).collect(),
    )
    .unwrap()
}

fn check_grid(results: &[ProbeResult], folds: usize) -> Result<(), String> {
    ensure!(
        results.len() == RATIOS.len() * folds,
        "{} results, expected 9 × {folds}",
        results.len()
    );
    for (i, ratio) in RATIOS.iter().enumerate() {
        let got: Vec<usize> = results[i * folds..(i + 1) * folds]
            .iter()
            .filter(|r| r.ratio == *ratio)
            .map(|r| r.fold)
            .collect();
        ensure!(got == (0..folds).collect::<Vec<_>>(), "ratio {ratio}: folds {got:?}");
    }
    Ok(())
}

fn probing_protocol() -> Outcome {
    let d = ProbeConfig::default();
    ensure!(
        (d.lr, d.batch, d.epochs, d.folds) == (1e-4, 100, 100, 5),
        "defaults lr {} batch {} epochs {} folds {}",
        d.lr,
        d.batch,
        d.epochs,
        d.folds
    );
    let ds = synth::generate(
        7,
        4,
        50,
        &SynthConfig {
            image_size: 16,
            sigma: 0.0,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    let labels: Vec<String> = ds.samples.iter().map(|s| ds.classes[s.class].clone()).collect();
    let n = labels.len();

    let clean = band_mean_features(&ds, &labels);
    let results = sweep_splits(&clean, &d).or_fail("separable sweep")?;
    check_grid(&results, d.folds)?;
    let at_09: Vec<f64> = results.iter().filter(|r| r.ratio == 0.9).map(|r| r.accuracy).collect();
    ensure!(at_09.iter().all(|&a| a == 1.0), "separable accuracy at 0.9: {at_09:?}");

    // Chance level: the same features with the labels shuffled.
    let keys = rng::normal_vec(&mut rng::seeded(99), n, 1.0);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    let shuffled: Vec<String> = perm.iter().map(|&i| labels[i].clone()).collect();
    let noise = band_mean_features(&ds, &shuffled);
    let results = sweep_splits(&noise, &d).or_fail("permuted sweep")?;
    check_grid(&results, d.folds)?;
    let chance = results.iter().map(|r| r.accuracy).sum::<f64>() / results.len() as f64;
    ensure!(
        (chance - 0.25).abs() <= 0.1,
        "permuted-label accuracy {chance:.3}, chance 0.25"
    );

    // Folds partition the indices; every split is a partition too.
    let (_, classes) = clean.class_indices();
    let mut all: Vec<usize> = fold_blocks(&classes, 4, d.folds, d.seed).concat();
    all.sort_unstable();
    ensure!(all == (0..n).collect::<Vec<_>>(), "fold blocks do not partition 0..{n}");
    for ratio in RATIOS {
        for k in 0..d.folds {
            let (train, test) = train_split(&classes, 4, ratio, d.folds, k, d.seed).or_fail("split")?;
            let mut both = [train.clone(), test].concat();
            both.sort_unstable();
            ensure!(
                both == (0..n).collect::<Vec<_>>(),
                "ratio {ratio} fold {k}: not a partition"
            );
            ensure!(
                train.len() == (ratio * n as f64).round() as usize,
                "ratio {ratio}: {} train",
                train.len()
            );
        }
    }
    Ok(format!(
        "9 × 5 per provenance; separable 1.0 at 0.9; permuted {chance:.3}; partitions hold"
    ))
}

// ---------------------------------------------------------------------------
// 7. Language-grounded vs vision-only features

const PIPELINE_CONFIG: &str = r#"
seed = 7

[synth]
image_size = 32

[model.encoder.patch]
image_size = 32
patch = 8
spectral_group = 3
"#;

fn grounded_vs_vision() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| common::ok(args, dir.path());
    std::fs::write(dir.path().join("c.toml"), PIPELINE_CONFIG).unwrap();
    run(&[
        "dataset",
        "synth",
        "--config",
        "c.toml",
        "--classes",
        "4",
        "--per-class",
        "50",
        "--out",
        "data",
    ]);
    run(&[
        "dataset",
        "build",
        "--config",
        "c.toml",
        "--dataset",
        "data",
        "--out",
        "inst",
    ]);
    run(&[
        "train",
        "align",
        "--config",
        "c.toml",
        "--instructions",
        "inst/instructions.jsonl",
        "--out",
        "align",
    ]);
    for (prov, out) in [("vision_only", "vis"), ("language_grounded_scenedesc", "lang")] {
        run(&[
            "embed",
            "export",
            "--config",
            "c.toml",
            "--checkpoint",
            "align/checkpoint.splv",
            "--dataset",
            "data",
            "--provenance",
            prov,
            "--out",
            out,
        ]);
    }
    run(&[
        "probe",
        "sweep",
        "--config",
        "c.toml",
        "--features",
        "vis/features.csv",
        "lang/features.csv",
        "--out",
        "probe",
    ]);
    let results = read_sweep_csv(&dir.path().join("probe/probe.csv")).or_fail("probe.csv")?;
    let mean = |p: Provenance, ratio: f64| {
        let v: Vec<f64> = results
            .iter()
            .filter(|r| r.provenance == p && r.ratio == ratio)
            .map(|r| r.accuracy)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut rows = Vec::new();
    for ratio in RATIOS {
        let (v, l) = (
            mean(Provenance::VisionOnly, ratio),
            mean(Provenance::LanguageGroundedScenedesc, ratio),
        );
        ensure!(l >= v, "ratio {ratio}: grounded {l:.3} < vision {v:.3}");
        rows.push(format!("{ratio:.1}:{l:.3}/{v:.3}"));
    }
    let t = within(started, Duration::from_secs(900))?;
    Ok(format!("grounded/vision {}; {t:.1}s", rows.join(" ")))
}

// ---------------------------------------------------------------------------
// 8. Replay determinism

fn determinism() -> Outcome {
    let f = Fixture::new(10);
    let inst = "inst/instructions.jsonl";
    f.ok(&["dataset", "to-rgb", "--input", "data", "--out", "rgb"]);
    f.align("align");
    f.ok(&[
        "train",
        "finetune",
        "--config",
        "toy.toml",
        "--instructions",
        inst,
        "--checkpoint",
        "align/checkpoint.splv",
        "--out",
        "ft",
    ]);
    for (prov, out) in [("vision_only", "vis"), ("language_grounded_classlabel", "lang")] {
        f.ok(&[
            "embed",
            "export",
            "--checkpoint",
            "ft/checkpoint.splv",
            "--dataset",
            "data",
            "--provenance",
            prov,
            "--out",
            out,
        ]);
    }
    f.ok(&[
        "probe",
        "sweep",
        "--config",
        "toy.toml",
        "--features",
        "vis/features.csv",
        "lang/features.csv",
        "--out",
        "probe",
    ]);
    f.ok(&[
        "score",
        "--checkpoint",
        "ft/checkpoint.splv",
        "--instructions",
        inst,
        "--max-tokens",
        "24",
        "--out",
        "gen",
    ]);
    f.ok(&["score", "--descriptions", "gen/descriptions.jsonl", "--out", "scored"]);

    let runs = [
        "data", "inst", "rgb", "align", "ft", "vis", "lang", "probe", "gen", "scored",
    ];
    let mut files = 0;
    for run in runs {
        let manifest = f.join(&format!("{run}/run_manifest.json"));
        let recorded: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
        let out = format!("replay/{run}");
        let o = f.run(&["replay", "--manifest", manifest.to_str().unwrap(), "--out", &out]);
        ensure!(
            o.status.success(),
            "replay of {run} failed: {}",
            String::from_utf8_lossy(&o.stderr).trim()
        );
        let artifacts = recorded["artifacts"].as_object().unwrap();
        ensure!(!artifacts.is_empty(), "{run}: no artifacts recorded");
        for (rel, hash) in artifacts {
            let got = sha256(&f.join(&format!("{out}/{rel}")));
            ensure!(got == hash.as_str().unwrap(), "{run}/{rel}: hash differs on replay");
            files += 1;
        }
    }
    Ok(format!(
        "{} subcommand runs replayed, {files} artifacts identical",
        runs.len()
    ))
}

// ---------------------------------------------------------------------------
// 9. File formats

fn expect_err<T: std::fmt::Debug>(
    r: spectra_core::Result<T>,
    what: &str,
    ok: fn(&Error) -> bool,
) -> Result<(), String> {
    match r {
        Err(e) if ok(&e) => Ok(()),
        other => Err(format!("{what}: got {other:?}")),
    }
}

fn formats() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    // MSI1
    let ds = toy_images(1);
    let img = &ds.samples[0].image;
    save_msi(&p("a.msi"), img).unwrap();
    let back = load_msi(&p("a.msi")).unwrap();
    ensure!(
        back.to_bytes() == img.to_bytes() && back == *img,
        "MSI1 round trip is not bit-exact"
    );
    let bytes = std::fs::read(p("a.msi")).unwrap();
    let parse = MultispectralImage::from_bytes;
    expect_err(parse(b"XXXX\0\0\0\0"), "MSI bad magic", |e| {
        matches!(e, Error::MsiBadMagic)
    })?;
    expect_err(parse(&bytes[..bytes.len() - 3]), "MSI truncated", |e| {
        matches!(e, Error::MsiTruncated { .. })
    })?;
    expect_err(parse(&bytes[..10]), "MSI short header", |e| {
        matches!(e, Error::MsiTruncated { .. })
    })?;
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 4]);
    expect_err(parse(&long), "MSI oversize", |e| {
        matches!(e, Error::MsiSizeMismatch { .. })
    })?;
    let mut nan = bytes.clone();
    let at = nan.len() - 4;
    nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
    expect_err(parse(&nan), "MSI NaN", |e| matches!(e, Error::NonFiniteValue { .. }))?;

    // SPLV1
    let model = toy_model();
    let enc = EncoderWeights::init(1, model.encoder).unwrap();
    let proj = ProjectorWeights::init(1, model.projector()).unwrap();
    let lm = MiniLm::init(1, model.lm).unwrap();
    let ad = LoraAdapters::init(1, model.lora, &model.lm).unwrap();
    save_checkpoint(&p("a.splv"), &enc, &proj, &lm, Some(&ad)).unwrap();
    let ck = load_checkpoint(&p("a.splv"), &model).unwrap();
    save_checkpoint(&p("b.splv"), &ck.encoder, &ck.projector, &ck.lm, ck.adapters.as_ref()).unwrap();
    ensure!(
        sha256(&p("a.splv")) == sha256(&p("b.splv")),
        "SPLV1 round trip is not bit-exact"
    );
    ensure!(
        ck.lm == lm && ck.projector == proj && ck.adapters.as_ref() == Some(&ad),
        "SPLV1 tensors differ"
    );
    let bytes = std::fs::read(p("a.splv")).unwrap();
    expect_err(checkpoint::from_bytes(b"NOPE1\x01\0\0\0"), "SPLV bad magic", |e| {
        matches!(e, Error::BadMagic)
    })?;
    expect_err(
        checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
        "SPLV truncated",
        |e| matches!(e, Error::Truncated { .. }),
    )?;
    let mut v2 = bytes.clone();
    v2[5..9].copy_from_slice(&2u32.to_le_bytes());
    expect_err(checkpoint::from_bytes(&v2), "SPLV version", |e| {
        matches!(e, Error::UnsupportedVersion(2))
    })?;
    std::fs::write(p("lm.splv"), checkpoint::to_bytes([lm.store()])).unwrap();
    expect_err(
        load_checkpoint(&p("lm.splv"), &model).map(|_| ()),
        "SPLV missing tensor",
        |e| matches!(e, Error::MissingTensor(_)),
    )?;

    // JSONL
    let samples = vec![
        sample(
            "a",
            Task::Caption,
            "Describe \"this\".",
            "Line one\nline two — ünïcode.",
            "sea",
        ),
        sample("b", Task::Classification, "Classify.", "forest, sea", "forest"),
    ];
    write_jsonl(&p("i.jsonl"), &samples).unwrap();
    ensure!(
        read_jsonl(&p("i.jsonl")).unwrap() == samples,
        "JSONL does not re-parse losslessly"
    );
    std::fs::write(p("bad.jsonl"), "{\"id\": \"a\"\n").unwrap();
    expect_err(read_jsonl(&p("bad.jsonl")), "JSONL malformed", |e| {
        matches!(e, Error::Json(_) | Error::Dataset(_))
    })?;

    // CSV
    let entries: Vec<synth::LabeledImage> = read_labels(&{
        let d = p("ds");
        ds.write(&d).unwrap();
        d.join(synth::LABELS_FILE)
    })
    .unwrap();
    write_labels(&p("labels.csv"), &entries).unwrap();
    ensure!(
        read_labels(&p("labels.csv")).unwrap() == entries,
        "labels.csv does not re-parse losslessly"
    );
    let m = FeatureMatrix::new(
        Provenance::LanguageGroundedClasslabel,
        vec!["x".into(), "y".into()],
        vec!["sea".into(), "urban".into()],
        3,
        vec![0.1, -1e-7, 3.4028235e38, f32::MIN_POSITIVE, 1.0 / 3.0, -0.0],
    )
    .unwrap();
    m.write_csv(&p("f.csv")).unwrap();
    let back = FeatureMatrix::read_csv(&p("f.csv")).unwrap();
    let same = back.data.iter().zip(&m.data).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure!(
        same && back.ids == m.ids && back.labels == m.labels,
        "features.csv does not re-parse losslessly"
    );
    let results = vec![ProbeResult {
        provenance: Provenance::VisionOnly,
        ratio: 0.3,
        fold: 4,
        accuracy: 2.0 / 3.0,
    }];
    write_sweep_csv(&p("probe.csv"), &results).unwrap();
    ensure!(
        read_sweep_csv(&p("probe.csv")).unwrap() == results,
        "probe.csv does not re-parse losslessly"
    );
    std::fs::write(
        p("broken.csv"),
        "provenance,ratio,fold,accuracy\nvision_only,zero,1,0.5\n",
    )
    .unwrap();
    expect_err(read_sweep_csv(&p("broken.csv")), "malformed CSV", |e| {
        matches!(e, Error::Csv(_) | Error::Eval(_))
    })?;
    Ok("MSI1/SPLV1 bit-exact; JSONL/CSV lossless; corruptions yield typed errors".into())
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradients),
        ("frozen-weight contract", frozen_weights),
        ("LoRA contracts", lora),
        ("overfit oracles", overfit),
        ("effective-batch equivalence", effective_batch),
        ("probing protocol", probing_protocol),
        ("grounded ≥ vision-only", grounded_vs_vision),
        ("determinism", determinism),
        ("format fidelity", formats),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut summary = BTreeMap::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n} {name}: {why} [{secs:.1}s]");
            }
        }
        summary.insert(n, secs);
    }
    println!("acceptance: {} run, {failed} failed", summary.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}
