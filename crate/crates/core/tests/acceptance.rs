//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria and
//! `ACCEPTANCE_STRICT=1` turns any failure into a nonzero exit.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use mtgan::config::{Margin, SamplingMode, SamplingPlan, TripletReduction};
use mtgan::evalkit::{
    choose_holdout, compute_accuracy, compute_eer, embedding_dim_sweep, evaluate, format_sweep,
    split_enroll_test, Protocol, TrialScoreSet,
};
use mtgan::featio::FeatureSet;
use mtgan::losses::{gan_losses, gradient_penalty_at, softmax_loss, triplet_loss, triplet_loss_indexed};
use mtgan::nets::{init_params, DiscriminatorNet};
use mtgan::nn::{Layer, Linear, Mode, Sequential};
use mtgan::sampler::{epoch_pair_count, mine_batch, Sampler};
use mtgan::trainer::{loss_csv, Trainer};
use ndarray::{s, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const PROBES: usize = 24;
const GRAD_TOL: f64 = 1e-4;

fn max(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

/// 1. Analytic gradients against central differences on 8 × 8 networks.
fn gradient_correctness() -> Outcome {
    let arch = small_arch();
    let nets = init_params(&arch, 3, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 6;
    let x = normal4(&mut rng, (n, 1, 8, 8));
    let x_fake = normal4(&mut rng, (n, 1, 8, 8));
    let labels = vec![0, 1, 2, 0, 1, 2];
    let z = normal2(&mut rng, (n, arch.noise_dim));
    let triples = vec![(0, 3, 1), (1, 4, 2), (2, 5, 0), (3, 0, 4), (4, 1, 5)];
    let margin = Margin(0.9);
    let mut report = Vec::new();

    // Triplet loss → encoder parameters.
    let triplet = |net: &Sequential| {
        let (e, _) = net.clone().forward(&x, Mode::Train).unwrap();
        triplet_loss_indexed(&rows(&e), &triples, margin, TripletReduction::Sum).unwrap().0
    };
    let enc = &nets.encoder.net;
    let (e, trace) = enc.clone().forward(&x, Mode::Train).unwrap();
    let (lt, g) = triplet_loss_indexed(&rows(&e), &triples, margin, TripletReduction::Sum).unwrap();
    let grads = enc.backward(&trace, as4(g), true).1.unwrap();
    report.push(("triplet", lt, directional_probes(enc, &grads, &triplet, PROBES, &mut rng)));

    // Softmax loss → classifier parameters.
    let cls = &nets.classifier.net;
    let softmax = |net: &Sequential| {
        let (l, _) = net.clone().forward(&x, Mode::Train).unwrap();
        softmax_loss(&rows(&l), &labels).unwrap().0
    };
    let (logits, trace) = cls.clone().forward(&x, Mode::Train).unwrap();
    let (ls, g) = softmax_loss(&rows(&logits), &labels).unwrap();
    let grads = cls.backward(&trace, as4(g), true).1.unwrap();
    report.push(("softmax", ls, directional_probes(cls, &grads, &softmax, PROBES, &mut rng)));

    // Softmax on generated samples → encoder parameters (through the generator).
    let generator = nets.generator.clone();
    let chain = |net: &Sequential| {
        let (e, _) = net.clone().forward(&x, Mode::Train).unwrap();
        let cond = generator.condition(&rows(&e), &z).unwrap();
        let (f, _) = generator.net.clone().forward(&cond, Mode::Train).unwrap();
        let (l, _) = cls.clone().forward(&f, Mode::Train).unwrap();
        softmax_loss(&rows(&l), &labels).unwrap().0
    };
    let (e, e_trace) = enc.clone().forward(&x, Mode::Train).unwrap();
    let cond = generator.condition(&rows(&e), &z).unwrap();
    let (f, g_trace) = generator.net.clone().forward(&cond, Mode::Train).unwrap();
    let (l, c_trace) = cls.clone().forward(&f, Mode::Train).unwrap();
    let (lc, g) = softmax_loss(&rows(&l), &labels).unwrap();
    let (df, _) = cls.backward(&c_trace, as4(g), false);
    let (dcond, _) = generator.net.backward(&g_trace, df, false);
    let de = rows(&dcond).slice(s![.., ..arch.embed_dim]).to_owned();
    let grads = enc.backward(&e_trace, as4(de), true).1.unwrap();
    report.push(("softmax via generator", lc, directional_probes(enc, &grads, &chain, PROBES, &mut rng)));

    // Generator loss → generator parameters (through the critic).
    let critic = nets.critic.net.clone();
    let emb = rows(&e);
    let gen_cond = generator.condition(&emb, &z).unwrap();
    let gen_loss = |net: &Sequential| {
        let (f, _) = net.clone().forward(&gen_cond, Mode::Train).unwrap();
        let s = critic.infer(&f).unwrap().into_raw_vec_and_offset().0;
        gan_losses(&[], &s, 0.0, 10.0).generator
    };
    let (f, g_trace) = generator.net.clone().forward(&gen_cond, Mode::Train).unwrap();
    let (s_fake, c_trace) = critic.clone().forward(&f, Mode::Eval).unwrap();
    let gl = gan_losses(&[], &s_fake.into_raw_vec_and_offset().0, 0.0, 10.0);
    let dscore = Array4::from_shape_vec((n, 1, 1, 1), gl.g_fake.clone()).unwrap();
    let (df, _) = critic.backward(&c_trace, dscore, false);
    let grads = generator.net.backward(&g_trace, df, true).1.unwrap();
    report.push(("generator", gl.generator, directional_probes(&generator.net, &grads, &gen_loss, PROBES, &mut rng)));

    // Critic loss with gradient penalty → critic parameters.
    let eps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let lambda = 10.0;
    let critic_loss = |net: &Sequential| {
        let d = DiscriminatorNet::from_layers(&arch, net.layers.clone());
        let r = net.infer(&x).unwrap().into_raw_vec_and_offset().0;
        let f = net.infer(&x_fake).unwrap().into_raw_vec_and_offset().0;
        let (gp, _) = gradient_penalty_at(&d, &x, &x_fake, &eps, 1.0).unwrap();
        gan_losses(&r, &f, gp, lambda).critic
    };
    let (r, r_trace) = critic.clone().forward(&x, Mode::Eval).unwrap();
    let (f, f_trace) = critic.clone().forward(&x_fake, Mode::Eval).unwrap();
    let (gp, gp_grads) = gradient_penalty_at(&nets.critic, &x, &x_fake, &eps, lambda).unwrap();
    let gl = gan_losses(&r.into_raw_vec_and_offset().0, &f.into_raw_vec_and_offset().0, gp, lambda);
    let col = |v: &[f64]| Array4::from_shape_vec((n, 1, 1, 1), v.to_vec()).unwrap();
    let mut grads = critic.backward(&r_trace, col(&gl.d_real), true).1.unwrap();
    grads.add_scaled(&critic.backward(&f_trace, col(&gl.d_fake), true).1.unwrap(), 1.0);
    grads.add_scaled(&gp_grads, 1.0);
    report.push(("critic + gradient penalty", gl.critic, directional_probes(&critic, &grads, &critic_loss, PROBES, &mut rng)));

    // Input gradient of the critic, which the penalty is built on.
    let (_, trace) = critic.clone().forward(&x, Mode::Eval).unwrap();
    let (gx, _) = critic.backward(&trace, Array4::ones((n, 1, 1, 1)), false);
    let mut input_errs = Vec::new();
    for _ in 0..PROBES {
        let d = normal4(&mut rng, x.dim());
        let h = 1e-6;
        let sum = |x: &Array4<f64>| critic.infer(x).unwrap().sum();
        let numeric = (sum(&(&x + &(&d * h))) - sum(&(&x - &(&d * h)))) / (2.0 * h);
        input_errs.push(rel_err((&gx * &d).sum(), numeric));
    }
    report.push(("critic input gradient", f64::NAN, input_errs));

    let mut pass = true;
    let mut parts = Vec::new();
    for (name, _, errs) in &report {
        let worst = max(errs);
        pass &= errs.len() >= 20 && worst < GRAD_TOL;
        parts.push(format!("{name} {} probes max rel err {worst:.1e}", errs.len()));
    }
    outcome(pass, parts.join("; "))
}

/// 2. EER and accuracy against O(n²) threshold recounting.
fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_eer, mut worst_acc, mut largest) = (0.0f64, 0.0f64, 0);
    let mut threshold_mismatch = 0;
    for _ in 0..200 {
        let pairs = random_trials(&mut rng, 1000);
        largest = largest.max(pairs.len());
        let set = TrialScoreSet::from_pairs(&pairs);
        let (eer, _) = compute_eer(&set).unwrap();
        let (acc, thr) = compute_accuracy(&set).unwrap();
        let (b_acc, b_thr) = brute_accuracy(&pairs);
        worst_eer = worst_eer.max((eer - brute_eer(&pairs)).abs());
        worst_acc = worst_acc.max((acc - b_acc).abs());
        if thr != b_thr {
            threshold_mismatch += 1;
        }
    }
    outcome(
        worst_eer <= 1e-9 && worst_acc <= 1e-9 && threshold_mismatch == 0,
        format!(
            "200 sets (largest {largest} trials): max |ΔEER| {worst_eer:.1e}, max |ΔACC| {worst_acc:.1e}, \
             accuracy threshold mismatches {threshold_mismatch}"
        ),
    )
}

/// 3. Semi-hard negatives against enumeration of the window with fallback.
fn semi_hard_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut checked, mut mismatches, mut fallbacks) = (0usize, 0usize, 0usize);
    for _ in 0..100 {
        let n = rng.random_range(4..=64);
        let classes = rng.random_range(2..=6.min(n / 2));
        let labels: Vec<usize> = (0..n).map(|i| if i < classes * 2 { i % classes } else { rng.random_range(0..classes) }).collect();
        let dim = rng.random_range(2..=8);
        let emb = unit_rows(&mut rng, n, dim);
        let alpha = rng.random_range(0.05..0.6);
        let mined = mine_batch(&emb, &labels, Margin(alpha));
        let mut expected = Vec::new();
        for a in 0..n {
            let negs: Vec<usize> = (0..n).filter(|&i| labels[i] != labels[a]).collect();
            for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
                let (neg, fb) = brute_semi_hard(&emb, a, p, &negs, alpha);
                expected.push(((a, p, neg), fb));
            }
        }
        checked += expected.len();
        fallbacks += expected.iter().filter(|e| e.1).count();
        if mined != expected {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("100 batches, {checked} anchor-positive pairs ({fallbacks} fallbacks), {mismatches} mismatching batches"),
    )
}

/// 4. Triples per epoch equal n·A·P·K·J.
fn sampling_count() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let encoder = init_params(&small_arch(), 2, 1).unwrap().encoder;
    let mut bad = Vec::new();
    for i in 0..50 {
        let speakers = rng.random_range(3..=10);
        let per: Vec<usize> = (0..speakers).map(|_| rng.random_range(2..=6)).collect();
        let fs = random_features(&mut rng, &per, 8);
        let n = rng.random_range(2..=speakers);
        let plan = SamplingPlan {
            speakers: Some(n),
            anchors: rng.random_range(1..=3),
            positives: rng.random_range(1..=3),
            other_classes: rng.random_range(1..n),
            negatives: rng.random_range(1..=3),
            mode: if i % 5 == 0 { SamplingMode::SemiHard } else { SamplingMode::Random },
            mining_batch: rng.random_range(8..=64),
            seed: i,
        };
        let sampler = Sampler::new(&plan, Margin::default(), &fs).unwrap();
        let total: usize = sampler
            .epoch_groups(rng.random_range(0..5))
            .iter()
            .map(|g| {
                let b = sampler.resolve(g, Some(&encoder)).unwrap();
                b.validate(&fs).unwrap();
                b.triples.len()
            })
            .sum();
        let formula = n * plan.anchors * plan.positives * plan.other_classes * plan.negatives;
        if total != formula || epoch_pair_count(&plan).unwrap() != formula as u64 {
            bad.push(format!("plan {i}: {total} vs {formula}"));
        }
    }
    outcome(bad.is_empty(), format!("50 plans (10 semi-hard), {} mismatches {}", bad.len(), bad.join(", ")))
}

/// 5. Closed-form loss values.
fn loss_analytics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut parts = Vec::new();
    let mut pass = true;

    let mut worst = 0.0f64;
    for c in [2usize, 3, 10, 1000] {
        let logits = Array2::from_elem((4, c), rng.random_range(-5.0..5.0));
        let (l, _) = softmax_loss(&logits, &[0, 1, c - 1, 1]).unwrap();
        worst = worst.max((l - (c as f64).ln()).abs());
    }
    pass &= worst <= 1e-9;
    parts.push(format!("uniform softmax |L − ln C| {worst:.1e}"));

    let mut worst = 0.0f64;
    for n_trip in [1usize, 5, 64] {
        let a = unit_rows(&mut rng, n_trip, 16);
        let l = triplet_loss(&a, &a, &a, Margin(0.2), TripletReduction::Sum).unwrap();
        worst = worst.max((l - n_trip as f64 * 0.2).abs());
    }
    pass &= worst <= 1e-9;
    parts.push(format!("degenerate triplet |L − Nα| {worst:.1e}"));

    let arch = small_arch();
    let mut lin = Linear::new(&mut rng, 64, 1);
    let w = normal2(&mut rng, (1, 64));
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    lin.weight = w / norm;
    let critic = DiscriminatorNet::from_layers(&arch, vec![Layer::Linear(lin)]);
    let real = normal4(&mut rng, (8, 1, 8, 8));
    let fake = normal4(&mut rng, (8, 1, 8, 8));
    let eps: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
    let (gp, _) = gradient_penalty_at(&critic, &real, &fake, &eps, 1.0).unwrap();
    pass &= gp.abs() <= 1e-8;
    parts.push(format!("unit-norm linear critic gp {gp:.1e}"));

    let mut identical = true;
    for _ in 0..100 {
        let k = rng.random_range(1..50);
        let fake: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mean = fake.iter().sum::<f64>() / k as f64;
        identical &= gan_losses(&[0.0], &fake, 0.0, 10.0).generator == -mean;
    }
    pass &= identical;
    parts.push(format!("L_G = −mean(fake) identically: {identical}"));
    outcome(pass, parts.join("; "))
}

fn tiny_run_config(seed: u64) -> mtgan::config::TrainConfig {
    let mut cfg = mtgan::config::TrainConfig {
        arch: mtgan::config::Architecture {
            frames: 16,
            mels: 16,
            embed_dim: 8,
            noise_dim: 4,
            encoder_channels: vec![2, 4],
            generator_channels: vec![4, 2],
            critic_channels: vec![2, 4],
            classifier_channels: vec![2],
            ..Default::default()
        },
        plan: SamplingPlan {
            speakers: Some(4),
            anchors: 1,
            positives: 2,
            other_classes: 2,
            negatives: 1,
            ..SamplingPlan::default()
        },
        batch_speakers: 2,
        epochs: 100,
        ..Default::default()
    };
    cfg.set_seed(seed);
    cfg
}

fn snapshot(net: &Sequential) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (
        net.params().iter().map(|p| p.to_vec()).collect(),
        net.buffers().iter().map(|b| b.to_vec()).collect(),
    )
}

/// 6. Disabled terms leave their parameter groups bitwise unchanged.
fn ablation_contract() -> Outcome {
    let fs = tiny_corpus(6, 4, 16, 8);
    let run = |f: &dyn Fn(&mut mtgan::config::TrainConfig)| {
        let mut cfg = tiny_run_config(6);
        f(&mut cfg);
        let mut t = Trainer::new(cfg, &fs).unwrap();
        let before = t.nets.clone();
        t.run_steps(&fs, None, Some(10)).unwrap();
        assert_eq!(t.history.len(), 10);
        (before, t)
    };
    let mut parts = Vec::new();
    let mut pass = true;

    let (b, t) = run(&|c| c.use_gan = false);
    let ok = snapshot(&b.generator.net) == snapshot(&t.nets.generator.net)
        && snapshot(&b.critic.net) == snapshot(&t.nets.critic.net)
        && t.history.iter().all(|r| r.components.generator == 0.0 && r.components.critic == 0.0)
        && snapshot(&b.encoder.net) != snapshot(&t.nets.encoder.net);
    pass &= ok;
    parts.push(format!("w/o gan: generator+critic unchanged {ok}"));

    let (b, t) = run(&|c| c.use_softmax = false);
    let ok = snapshot(&b.classifier.net) == snapshot(&t.nets.classifier.net)
        && t.history.iter().all(|r| r.components.softmax == 0.0)
        && snapshot(&b.generator.net) != snapshot(&t.nets.generator.net);
    pass &= ok;
    parts.push(format!("w/o softmax: classifier unchanged {ok}"));

    let (b, t) = run(&|c| {
        c.use_triplet = false;
        c.use_gan = false;
    });
    let ok = snapshot(&b.encoder.net) == snapshot(&t.nets.encoder.net)
        && t.history.iter().all(|r| r.components.triplet == 0.0);
    pass &= ok;
    parts.push(format!("w/o triplet (no other encoder objective): encoder unchanged {ok}"));

    let (_, off) = run(&|c| c.use_triplet = false);
    let (_, zero) = run(&|c| c.weights.triplet = 0.0);
    let ok = snapshot(&off.nets.encoder.net) == snapshot(&zero.nets.encoder.net)
        && off.history.iter().all(|r| r.components.triplet == 0.0);
    pass &= ok;
    parts.push(format!("w/o triplet: encoder update identical to a zero triplet weight {ok}"));
    outcome(pass, format!("10 steps each; {}", parts.join("; ")))
}

struct E2eRun {
    eer: f64,
    secs: f64,
    enc_first: f64,
    enc_last: f64,
    steps: usize,
}

fn e2e_run(corpus: &FeatureSet, seed: u64, use_softmax: bool) -> E2eRun {
    let mut cfg = toy_config(seed);
    cfg.use_softmax = use_softmax;
    let (train_ids, held) = choose_holdout(corpus, 5, seed).unwrap();
    let train = corpus.subset(&train_ids).unwrap();
    let split = split_enroll_test(corpus, &held, Protocol::default(), seed).unwrap();
    let start = Instant::now();
    let mut t = Trainer::new(cfg.clone(), &train).unwrap();
    t.run(&train, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let report = evaluate(&t.nets.encoder, corpus, &split).unwrap();
    E2eRun {
        eer: report.eer,
        secs,
        enc_first: t.history[0].encoder_loss(&cfg),
        enc_last: t.history.last().unwrap().encoder_loss(&cfg),
        steps: t.history.len(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// 7. Toy-scale verification quality and the softmax ablation direction.
fn toy_end_to_end() -> Outcome {
    let seeds = [1u64, 2, 3, 4, 5];
    let mut full = Vec::new();
    let mut ablated = Vec::new();
    for &seed in &seeds {
        let corpus = toy_corpus(seed);
        full.push(e2e_run(&corpus, seed, true));
        ablated.push(e2e_run(&corpus, seed, false));
        let (f, a) = (full.last().unwrap(), ablated.last().unwrap());
        eprintln!(
            "  seed {seed}: full EER {:.2}% ({:.0}s), w/o softmax EER {:.2}% ({:.0}s)",
            100.0 * f.eer,
            f.secs,
            100.0 * a.eer,
            a.secs
        );
    }
    let median_full = median(full.iter().map(|r| r.eer).collect());
    let worse = full.iter().zip(&ablated).filter(|(f, a)| a.eer > f.eer).count();
    let slowest = full.iter().chain(&ablated).map(|r| r.secs).fold(0.0, f64::max);
    let loss_drop = median(full.iter().map(|r| r.enc_last - r.enc_first).collect());
    let pass = full.iter().all(|r| r.eer < 0.20) && worse >= 4 && slowest <= 900.0;
    outcome(
        pass,
        format!(
            "full EER {} (median {:.2}%); w/o softmax EER {}; w/o softmax worse in {worse}/5 seeds; \
             median encoder-loss change over {} steps {loss_drop:+.3}; slowest run {slowest:.0}s",
            full.iter().map(|r| format!("{:.2}%", 100.0 * r.eer)).collect::<Vec<_>>().join(" "),
            100.0 * median_full,
            ablated.iter().map(|r| format!("{:.2}%", 100.0 * r.eer)).collect::<Vec<_>>().join(" "),
            full[0].steps,
        ),
    )
}

/// 8. Repeatable runs and exact resume.
fn determinism() -> Outcome {
    let fs = tiny_corpus(6, 4, 16, 21);
    let mut cfg = tiny_run_config(13);
    cfg.epochs = 6;
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, cfg: &mtgan::config::TrainConfig| {
        let out = dir.path().join(name);
        let mut t = Trainer::new(cfg.clone(), &fs).unwrap();
        t.run(&fs, Some(&out)).unwrap();
        (t, std::fs::read_to_string(out.join(mtgan::trainer::LOSS_CSV_FILE)).unwrap())
    };
    let (full, csv_a) = run("a", &cfg);
    let (_, csv_b) = run("b", &cfg);
    let same_csv = csv_a == csv_b && csv_a.lines().count() == full.history.len() + 1;

    let mut half = cfg.clone();
    half.epochs = 3;
    let (_, _) = run("half", &half);
    let ckpt = dir.path().join("half").join(mtgan::trainer::CHECKPOINT_FILE);
    let mut resumed = Trainer::resume(&ckpt, cfg.clone()).unwrap();
    resumed.run(&fs, Some(&dir.path().join("half"))).unwrap();
    let same_history = loss_csv(&resumed.history) == loss_csv(&full.history);

    let x = mtgan::nets::batch_from_matrices(fs.slices.iter().map(|s| s.matrix.as_slice()), 16, 16).unwrap();
    let z = Array2::from_elem((x.shape()[0], cfg.arch.noise_dim), 0.3);
    let outputs = |t: &Trainer| {
        let e = t.nets.encoder.encode_batch(&x).unwrap();
        let f = t.nets.generator.net.infer(&t.nets.generator.condition(&e, &z).unwrap()).unwrap();
        (
            e,
            f,
            t.nets.critic.discriminate_batch(&x).unwrap(),
            t.nets.classifier.classify_batch(&x).unwrap(),
        )
    };
    let same_outputs = outputs(&resumed) == outputs(&full);

    // Reloading a checkpoint reproduces the saved model's outputs exactly.
    let path = dir.path().join("a").join(mtgan::trainer::CHECKPOINT_FILE);
    let loaded = mtgan::checkpoint::load(&path).unwrap();
    let same_reload = outputs(&loaded) == outputs(&full);
    outcome(
        same_csv && same_history && same_outputs && same_reload,
        format!(
            "identical loss CSVs {same_csv}; resumed history identical {same_history}; \
             resumed forward outputs bit-identical {same_outputs}; reload bit-identical {same_reload}"
        ),
    )
}

/// 9. Embedding-dimension sweep table.
fn dim_sweep() -> Outcome {
    let corpus = toy_corpus(9);
    let mut cfg = toy_config(9);
    cfg.epochs = 4;
    let dims = [64, 128, 256, 512];
    let rows = embedding_dim_sweep(&corpus, &dims, &cfg, 5, Protocol::default()).unwrap();
    let table = format_sweep(&rows);
    let lines: Vec<&str> = table.lines().collect();
    let well_formed = lines[0] == "dim,eer,acc"
        && lines.len() == dims.len() + 1
        && rows.iter().zip(dims).all(|(r, d)| r.embed_dim == d && (0.0..=1.0).contains(&r.eer));
    for l in &lines {
        eprintln!("  {l}");
    }
    outcome(
        well_formed,
        format!(
            "dims {:?}: {}",
            dims,
            rows.iter().map(|r| format!("{}→{:.2}%", r.embed_dim, 100.0 * r.eer)).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "EER/accuracy oracle equivalence", metric_oracles),
        (3, "semi-hard mining oracle", semi_hard_oracle),
        (4, "sampling count", sampling_count),
        (5, "loss analytics", loss_analytics),
        (6, "ablation contract", ablation_contract),
        (7, "toy-scale end-to-end", toy_end_to_end),
        (8, "determinism", determinism),
        (9, "embedding-dim sweep", dim_sweep),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        println!(
            "[{}] criterion {id} {name} ({secs:.1}s): {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
        if !result.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
        return;
    }
    println!("acceptance: all criteria passed");
}

