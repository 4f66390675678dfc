//! End-to-end acceptance checks, one line per criterion.
//!
//! Run with `cargo test --test acceptance`; pass criterion numbers after `--`
//! to run a subset, e.g. `cargo test --test acceptance -- 3 10`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use audioctx::attention::{attend_explicit, attend_planned, AttentionBatch};
use audioctx::extension::{build_plan, plan_partial, plan_vanilla, plan_vlat, plan_whole_pi};
use audioctx::matrix::argmax;
use audioctx::rope::relative_dot;
use audioctx::synthtask::{generate, DatasetSpec, Split, TaskInstance};
use audioctx::toymodel::{
    evaluate, predict_all, save_checkpoint, train, Example, ModelConfig, ModelParams, TrainConfig, VlatStrategy,
};
use audioctx::{ExtensionConfig, FrequencyTable, Matrix, Method, Modality, SequenceLayout, YarnParams};
use audioctx_harness::commands::inference_plan;
use audioctx_harness::commands::sweep::{best, sweep_grid, SweepConfig, SweepOpts, DEFAULT_CUTOFFS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

fn gauss_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, gauss_vec(rng, rows * cols)).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant, detail: String) -> Outcome {
    let took = started.elapsed();
    check(took <= limit, format!("{detail}, {:.2}s of {}s", took.as_secs_f64(), limit.as_secs()))
}

/// Random text/audio/text layout with `audio` audio tokens.
fn layout_around(rng: &mut ChaCha8Rng, audio: usize) -> (usize, SequenceLayout, usize) {
    let prefix = rng.gen_range(0..6);
    let suffix = rng.gen_range(0..6);
    (prefix, SequenceLayout::text_audio_text(prefix, audio, suffix), suffix)
}

fn c1_shift_invariance() -> Outcome {
    let started = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for d in [8, 64, 128] {
        let table = FrequencyTable::new(d, 10_000.0).unwrap();
        for _ in 0..1000 {
            let q = gauss_vec(&mut r, d);
            let k = gauss_vec(&mut r, d);
            let m = r.gen_range(0.0..4096.0);
            let n = r.gen_range(0.0..4096.0);
            let delta = r.gen_range(-2048.0..2048.0);
            let a = relative_dot(&q, &k, m, n, &table).unwrap();
            let b = relative_dot(&q, &k, m + delta, n + delta, &table).unwrap();
            // Cauchy-Schwarz bounds the dot product, so |q||k| is its scale.
            let scale = q.iter().map(|x| x * x).sum::<f64>().sqrt() * k.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst = worst.max((a - b).abs() / scale);
        }
    }
    if worst > 1e-6 {
        return Err(format!("worst relative error {worst:.3e} > 1e-6"));
    }
    within(Duration::from_secs(5), started, format!("3000 samples, worst relative error {worst:.3e}"))
}

fn c2_pi_equivalence() -> Outcome {
    let started = Instant::now();
    let mut r = rng(2);
    let table = FrequencyTable::new(128, 10_000.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let n_tokens = r.gen_range(1..512usize);
        let anchor = r.gen_range(1..=n_tokens);
        let j = r.gen_range(0..n_tokens);
        let i = r.gen_range(0..table.num_pairs());
        let cfg = ExtensionConfig::new(Method::WholePi, anchor, n_tokens, 0, 1.0).unwrap();
        let s = n_tokens as f64 / anchor as f64;
        let plan = plan_whole_pi(&cfg, n_tokens).unwrap();
        let via_positions = plan.effective_angles(&table, j).unwrap().angles[i];
        let via_frequency = j as f64 * (table.freq(i) / s);
        let err = (via_positions - via_frequency).abs() / via_frequency.abs().max(f64::MIN_POSITIVE);
        if via_frequency != 0.0 {
            worst = worst.max(err);
        } else if via_positions != 0.0 {
            return Err(format!("token 0 rotated by {via_positions}"));
        }
    }
    if worst > 1e-12 {
        return Err(format!("worst relative error {worst:.3e} > 1e-12"));
    }
    within(Duration::from_secs(1), started, format!("10000 samples, worst relative error {worst:.3e}"))
}

fn c3_reduction_law() -> Outcome {
    let mut r = rng(3);
    let table = FrequencyTable::new(128, 10_000.0).unwrap();
    for case in 0..100 {
        let target = r.gen_range(1..400);
        let anchor = r.gen_range(1..400);
        let (_, layout, _) = layout_around(&mut r, target);
        let yarn = plan_partial(&ExtensionConfig::partial_yarn(anchor, target, 0, 1.0).unwrap(), &layout, &table).unwrap();
        let pi = plan_partial(&ExtensionConfig::partial_pi(anchor, target).unwrap(), &layout, &table).unwrap();
        if yarn != pi {
            return Err(format!("layout {case} (anchor {anchor}, target {target}) differs"));
        }
    }
    Ok("100 layouts identical".into())
}

fn c4_temperature_folding() -> Outcome {
    let started = Instant::now();
    let mut r = rng(4);
    let d = 16;
    let table = FrequencyTable::new(d, 10_000.0).unwrap();
    let mut worst_logit = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for batch in 0..100 {
        let target = r.gen_range(2..24);
        let anchor = r.gen_range(1..24);
        let (_, layout, _) = layout_around(&mut r, target);
        let n = layout.total_tokens();
        let audio: Vec<bool> = layout
            .segments()
            .iter()
            .flat_map(|s| std::iter::repeat(s.modality == Modality::Audio).take(s.token_count))
            .collect();
        let b = AttentionBatch::new(
            gauss_matrix(&mut r, n, d),
            gauss_matrix(&mut r, n, d),
            gauss_matrix(&mut r, n, d),
            batch % 2 == 0,
        )
        .unwrap();
        let neutral = plan_partial(&ExtensionConfig::partial_yarn(anchor, target, 0, 1.0).unwrap(), &layout, &table).unwrap();
        let base = attend_planned(&b, &neutral, &table).unwrap().logits;
        for t in [0.5, 1.0, 1.6, 4.0] {
            // Cutoff 0 puts every pair in the interpolated group, so a single
            // position per token describes the whole rotation.
            let plan = plan_partial(&ExtensionConfig::partial_yarn(anchor, target, 0, t).unwrap(), &layout, &table).unwrap();
            let mut temps = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let ti = if audio[i] { t.sqrt() } else { 1.0 };
                    let tj = if audio[j] { t.sqrt() } else { 1.0 };
                    temps.set(i, j, ti * tj);
                }
            }
            let planned = attend_planned(&b, &plan, &table).unwrap().logits;
            let explicit = attend_explicit(&b, plan.interp_positions(), &temps, &table).unwrap().logits;
            for i in 0..n {
                for j in 0..n {
                    let (p, e) = (planned.get(i, j), explicit.get(i, j));
                    if p.is_infinite() || e.is_infinite() {
                        if p != e {
                            return Err(format!("mask mismatch at ({i}, {j})"));
                        }
                        continue;
                    }
                    worst_logit = worst_logit.max((p - e).abs());
                    if audio[i] != audio[j] && base.get(i, j).abs() > 1e-9 {
                        let ratio = p / base.get(i, j);
                        worst_ratio = worst_ratio.max((ratio - 1.0 / t.sqrt()).abs());
                    }
                }
            }
        }
    }
    if worst_logit > 1e-7 || worst_ratio > 1e-7 {
        return Err(format!("logit gap {worst_logit:.3e}, mixed ratio gap {worst_ratio:.3e} (limit 1e-7)"));
    }
    within(
        Duration::from_secs(10),
        started,
        format!("100 batches x 4 temperatures, logit gap {worst_logit:.3e}, mixed ratio gap {worst_ratio:.3e}"),
    )
}

fn c5_capacity() -> Outcome {
    let mut r = rng(5);
    let table = FrequencyTable::new(128, 10_000.0).unwrap();
    for _ in 0..100 {
        let audio = r.gen_range(1..300);
        let extended = r.gen_range(1..3000);
        let (prefix, original, suffix) = layout_around(&mut r, audio);
        let total = original.total_tokens();
        let layout = SequenceLayout::text_audio_text(prefix, extended, suffix);
        let cfg = ExtensionConfig::partial_yarn(audio, extended, 32, 1.0).unwrap();
        let plan = plan_partial(&cfg, &layout, &table).unwrap();
        if plan.len() != total + extended - audio {
            return Err(format!("length {} for L={total}, audio {audio} -> {extended}", plan.len()));
        }
        let last = *plan.interp_positions().last().unwrap();
        if last != (total - 1) as f64 {
            return Err(format!("last interpolated position {last}, expected {}", total - 1));
        }
    }
    Ok("100 layouts".into())
}

fn c6_vlat_duality() -> Outcome {
    let table = FrequencyTable::new(16, 10_000.0).unwrap();
    for d in 1..=64 {
        let layout = SequenceLayout::text_audio_text(3, d, 2);
        for w in 1..=64 {
            let vlat = plan_vlat(&layout, w, 0, 1.0, &table).unwrap();
            let partial = plan_partial(&ExtensionConfig::partial_pi(w, d).unwrap(), &layout, &table).unwrap();
            let audio = 3..3 + d;
            if vlat.interp_positions()[audio.clone()] != partial.interp_positions()[audio] {
                return Err(format!("audio positions differ at D={d}, W={w}"));
            }
        }
    }
    Ok("4096 (D, W) pairs".into())
}

fn c7_gradients() -> Outcome {
    let started = Instant::now();
    let spec = DatasetSpec::new(1, 4, Split::Train, 7);
    let question = generate(&spec).unwrap()[0].question_tokens.len();
    let spec = DatasetSpec::new(1, 12 - 1 - question, Split::Train, 7);
    let inst = generate(&spec).unwrap().remove(0);
    let tokens = inst.prompt_tokens();
    if tokens.len() != 12 {
        return Err(format!("prompt has {} tokens", tokens.len()));
    }
    let config = ModelConfig {
        vocab_size: spec.vocab.size(),
        embed_dim: 8,
        n_layers: 2,
        mlp_hidden: 8,
        rope_base: 100.0,
    };
    let model = ModelParams::init(config, 17).unwrap();
    let audio = inst.audio_tokens.len();
    let plan = plan_partial(
        &ExtensionConfig::partial_yarn(audio / 2, audio, 2, 1.3).unwrap(),
        &inst.prompt_layout(),
        model.table(),
    )
    .unwrap();
    let ex = [Example {
        tokens: &tokens,
        choices: &inst.choices[..],
        plan: &plan,
        answer: inst.answer_index,
    }];
    let analytic = model.loss_and_grads(&ex).unwrap().grads;
    let loss_at = |w: &[f64]| {
        let mut m = model.clone();
        m.weights_mut().copy_from_slice(w);
        m.loss_and_grads(&ex).unwrap().loss
    };
    let h = 1e-5;
    let mut w = model.weights().to_vec();
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + h;
        let up = loss_at(&w);
        w[i] = orig - h;
        let down = loss_at(&w);
        w[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    if worst > 1e-4 {
        return Err(format!("worst relative error {worst:.3e} > 1e-4"));
    }
    within(
        Duration::from_secs(60),
        started,
        format!("{} parameters, worst relative error {worst:.3e}", w.len()),
    )
}

/// Training recipe shared by the two toy-model experiments.
fn fit(seed: u64, embed_dim: usize, train_tokens: usize, epochs: usize, lr: f64, strategy: VlatStrategy) -> ModelParams {
    let spec = DatasetSpec::new(2000, train_tokens, Split::Train, seed);
    let data = generate(&spec).unwrap();
    let config = ModelConfig {
        vocab_size: spec.vocab.size(),
        embed_dim,
        n_layers: 2,
        mlp_hidden: 32,
        rope_base: 100.0,
    };
    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size: 16,
        epochs,
        seed,
        base_audio_context: 8,
        ..TrainConfig::default()
    };
    train(&ModelParams::init(config, seed).unwrap(), &data, &cfg, strategy)
        .unwrap()
        .params
}

fn vanilla_accuracy(model: &ModelParams, data: &[TaskInstance]) -> f64 {
    evaluate(model, data, |i| Ok(plan_vanilla(i.prompt_tokens().len()))).unwrap()
}

fn c8_vlat_beats_vanilla() -> Outcome {
    const SEEDS: [u64; 3] = [11, 22, 33];
    const TRAIN_TOKENS: usize = 32;
    let started = Instant::now();
    let mut gaps = Vec::new();
    let mut means = [[0.0; 2]; 2];
    for seed in SEEDS {
        let short = generate(&DatasetSpec::new(400, TRAIN_TOKENS, Split::Test, seed + 1000)).unwrap();
        let long = generate(&DatasetSpec::new(400, 4 * TRAIN_TOKENS, Split::Test, seed + 1000)).unwrap();
        let mut at_long = [0.0; 2];
        for (k, strategy) in [VlatStrategy::None, VlatStrategy::Default].into_iter().enumerate() {
            let model = fit(seed, 16, TRAIN_TOKENS, 16, 3e-3, strategy);
            let acc_short = vanilla_accuracy(&model, &short);
            at_long[k] = vanilla_accuracy(&model, &long);
            means[k][0] += acc_short / SEEDS.len() as f64;
            means[k][1] += at_long[k] / SEEDS.len() as f64;
        }
        gaps.push(format!("{seed}: {:.3} vs {:.3}", at_long[1], at_long[0]));
    }
    let gap = means[1][1] - means[0][1];
    let detail = format!(
        "4x length VLAT {:.3} vs vanilla {:.3} (gap {gap:.3}, need 0.10; seeds {}), training length {:.3} / {:.3}",
        means[1][1],
        means[0][1],
        gaps.join(", "),
        means[1][0],
        means[0][0]
    );
    if gap < 0.10 || means[0][0] <= 0.25 || means[1][0] <= 0.25 {
        return Err(detail);
    }
    within(Duration::from_secs(600), started, detail)
}

struct Ablation {
    model: ModelParams,
    val: Vec<TaskInstance>,
    test: Vec<TaskInstance>,
}

const ABLATION_TRAIN_TOKENS: usize = 16;

fn ablation_setup() -> Ablation {
    const SEED: u64 = 11;
    let long = 4 * ABLATION_TRAIN_TOKENS;
    Ablation {
        model: fit(SEED, 128, ABLATION_TRAIN_TOKENS, 4, 1e-3, VlatStrategy::None),
        val: generate(&DatasetSpec::new(1000, long, Split::Validation, SEED + 7)).unwrap(),
        test: generate(&DatasetSpec::new(1000, long, Split::Test, SEED + 9)).unwrap(),
    }
}

/// Seconds at the default 8 tokens per 30 s chunk.
fn seconds(tokens: usize) -> f64 {
    tokens as f64 * 30.0 / 8.0
}

fn c9_ablation(ab: &Ablation) -> Outcome {
    let anchor = ABLATION_TRAIN_TOKENS;
    let yarn = YarnParams::default();
    let table = ab.model.table();
    let sweep = SweepConfig::resolve(SweepOpts {
        anchor_seconds: Some(seconds(anchor)),
        target_seconds: Some(seconds(4 * anchor)),
        ..SweepOpts::default()
    })
    .unwrap();
    let records = sweep_grid(&sweep, &ab.model, &ab.val).unwrap();
    let tuned = best(&records).unwrap();
    let (cutoff, temperature) = (tuned.cutoff, tuned.temperature);
    let with = |method, c, t| {
        move |i: &TaskInstance| inference_plan(i, method, anchor, c, t, &yarn, table)
    };
    let pi = evaluate(&ab.model, &ab.test, with(Method::PartialPi, 0, 1.0)).unwrap();
    let yarn_acc = evaluate(&ab.model, &ab.test, with(Method::PartialYarn2, cutoff, temperature)).unwrap();
    let vanilla = vanilla_accuracy(&ab.model, &ab.test);
    let pi_preds = predict_all(&ab.model, &ab.test, with(Method::PartialPi, 0, 1.0)).unwrap();
    let reduced = predict_all(&ab.model, &ab.test, with(Method::PartialYarn2, 0, 1.0)).unwrap();
    let plans_equal = ab.test.iter().all(|i| {
        let a = build_plan(&ExtensionConfig::partial_pi(anchor, 4 * anchor).unwrap(), &i.prompt_layout(), table, &yarn);
        let b = build_plan(&ExtensionConfig::partial_yarn(anchor, 4 * anchor, 0, 1.0).unwrap(), &i.prompt_layout(), table, &yarn);
        a.unwrap() == b.unwrap()
    });
    let detail = format!(
        "tuned partial-yarn (cutoff {cutoff}, t {temperature}, val {:.3}) {yarn_acc:.3} vs partial-pi {pi:.3}, vanilla {vanilla:.3}, reduction exact: {}",
        tuned.accuracy,
        plans_equal && pi_preds == reduced
    );
    check(yarn_acc >= pi - 0.01 && pi >= 0.25 && plans_equal && pi_preds == reduced, detail)
}

fn c10_sweep_shape(ab: &Ablation) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ab.model, &ckpt).unwrap();
    let data = dir.path().join("val.jsonl");
    let spec = DatasetSpec::new(24, 160, Split::Validation, 5);
    audioctx::synthtask::export_jsonl(&generate(&spec).unwrap(), &data).unwrap();
    let mut bytes = Vec::new();
    // Same configuration both times, so the echoed header must match too.
    let out = dir.path().join("sweep.csv");
    for run in 0..2 {
        let cfg = SweepConfig::resolve(SweepOpts {
            checkpoint: Some(ckpt.clone()),
            data: Some(data.clone()),
            out: Some(out.clone()),
            ..SweepOpts::default()
        })
        .unwrap();
        let records = audioctx_harness::commands::sweep::run(&cfg, run > 0).unwrap();
        let mut expected = Vec::new();
        let mut cutoffs = DEFAULT_CUTOFFS.to_vec();
        cutoffs.sort();
        for c in cutoffs {
            for i in 5..=16 {
                expected.push((c, i as f64 / 10.0));
            }
        }
        let got: Vec<(usize, f64)> = records.iter().map(|r| (r.cutoff, r.temperature)).collect();
        if got != expected {
            return Err(format!("grid has {} cells or is out of order", got.len()));
        }
        bytes.push(std::fs::read(&out).unwrap());
    }
    let rows = String::from_utf8_lossy(&bytes[0]).lines().filter(|l| !l.starts_with('#')).count() - 1;
    check(
        rows == 84 && bytes[0] == bytes[1],
        format!("{rows} records, identical bytes across runs: {}", bytes[0] == bytes[1]),
    )
}

fn c11_argmax_invariance() -> Outcome {
    let mut r = rng(11);
    let d = 16;
    let table = FrequencyTable::new(d, 10_000.0).unwrap();
    let mut rows = 0;
    while rows < 1000 {
        let n = r.gen_range(2..30);
        let layout = SequenceLayout::new(vec![audioctx::Segment::audio(n)]);
        let b = AttentionBatch::new(
            gauss_matrix(&mut r, n, d),
            gauss_matrix(&mut r, n, d),
            gauss_matrix(&mut r, n, d),
            false,
        )
        .unwrap();
        let anchor = r.gen_range(1..=n);
        let plan_at = |t| plan_partial(&ExtensionConfig::partial_yarn(anchor, n, 0, t).unwrap(), &layout, &table).unwrap();
        let reference = attend_planned(&b, &plan_at(1.0), &table).unwrap();
        for t in [0.5, 1.6, 4.0] {
            let scaled = attend_planned(&b, &plan_at(t), &table).unwrap();
            for i in 0..n {
                if argmax(reference.logits.row(i)) != argmax(scaled.logits.row(i))
                    || argmax(reference.weights.row(i)) != argmax(scaled.weights.row(i))
                {
                    return Err(format!("argmax moved at t={t}, row {i}"));
                }
            }
        }
        rows += n;
    }
    Ok(format!("{rows} rows x 3 temperatures"))
}

fn main() -> ExitCode {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| only.is_empty() || only.contains(&n);
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut run = |n: u32, f: &dyn Fn() -> Outcome| {
        if wanted(n) {
            let started = Instant::now();
            let outcome = f();
            let (tag, detail) = match &outcome {
                Ok(d) => ("PASS", d),
                Err(d) => ("FAIL", d),
            };
            println!("criterion {n}: {tag} {detail} [{:.1}s]", started.elapsed().as_secs_f64());
            results.push((n, outcome));
        }
    };
    run(1, &c1_shift_invariance);
    run(2, &c2_pi_equivalence);
    run(3, &c3_reduction_law);
    run(4, &c4_temperature_folding);
    run(5, &c5_capacity);
    run(6, &c6_vlat_duality);
    run(7, &c7_gradients);
    run(8, &c8_vlat_beats_vanilla);
    if wanted(9) || wanted(10) {
        let ab = ablation_setup();
        run(9, &|| c9_ablation(&ab));
        run(10, &|| c10_sweep_shape(&ab));
    }
    run(11, &c11_argmax_invariance);
    let failed: Vec<u32> = results.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| *n).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
