//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs under `cargo test` (it is a `harness = false` target). The blob
//! experiment trains six full-size models and takes roughly half an hour on
//! one core. The process exits non-zero on failures only when
//! `ACCEPTANCE_STRICT=1`; otherwise failures are reported and the run
//! completes so the rest of the workspace tests still gate the build.

mod common;

use std::time::Instant;

use common::oracles::{centroid_penalty, cross_entropy, mean_abs_error, Accumulator};
use compass_core::metrics::{alignment_with, eval_ppl, eval_rca, evaluate, factor_alignment, EmbeddingNet};
use compass_core::nn::Params;
use compass_core::rng::{normal_matrix, seeded_rng};
use compass_core::training::{
    centroid_loss, classification_loss, load_checkpoint, regression_loss, save_checkpoint, train_loop, CHECKPOINT_FILE,
};
use compass_core::{
    BlobGenerator, CentroidBank, Deformator, DeformatorMode, DirectionSpec, Generator, GeneratorSpec, MagnitudeRange,
    Scalar, TrainConfig, Trainer,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};

struct Outcome {
    name: &'static str,
    pass: bool,
}

fn report(results: &mut Vec<Outcome>, name: &'static str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    results.push(Outcome { name, pass });
}

fn flat<T: Scalar>(p: &impl Params<T>) -> Vec<T> {
    p.tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
        .collect()
}

fn loss_kernels() -> (bool, String) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let (mut worst_cl, mut worst_r, mut worst_c) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..16);
        let k = rng.random_range(2..12);
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-40.0..40.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let m = Array2::from_shape_fn((n, k), |(i, j)| logits[i][j]);
        let got = classification_loss(m.view(), &labels).unwrap();
        worst_cl = worst_cl.max((got - cross_entropy(&logits, &labels)).abs());

        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let got = regression_loss(Array1::from(pred.clone()).view(), Array1::from(target.clone()).view()).unwrap();
        worst_r = worst_r.max((got - mean_abs_error(&pred, &target)).abs());

        let d = rng.random_range(1..10);
        let mut bank = CentroidBank::<f64>::new(DirectionSpec::new(k, d).unwrap());
        let mut acc = Accumulator::new(k);
        for _ in 0..rng.random_range(0..3 * k) {
            let dir = rng.random_range(0..k);
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            bank.update(dir, Array1::from(v.clone()).view()).unwrap();
            acc.push(dir, v);
        }
        let shifts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let s = Array2::from_shape_fn((n, d), |(i, j)| shifts[i][j]);
        let got = centroid_loss(&bank, s.view(), &labels).unwrap().loss;
        let centroids: Vec<Option<Vec<f64>>> = (0..k).map(|i| acc.mean(i)).collect();
        worst_c = worst_c.max((got - centroid_penalty(&shifts, &labels, &centroids)).abs());
    }

    let mut bank = CentroidBank::<f64>::new(DirectionSpec::new(4, 8).unwrap());
    let mut acc = Accumulator::new(4);
    for _ in 0..1000 {
        let dir = rng.random_range(0..4);
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-6.0..6.0)).collect();
        bank.update(dir, Array1::from(v.clone()).view()).unwrap();
        acc.push(dir, v);
    }
    let mut worst_mean = 0.0f64;
    let mut counts_ok = true;
    for dir in 0..4 {
        counts_ok &= bank.count(dir) == acc.seen[dir].len() as u64;
        for (g, w) in bank.centroid(dir).unwrap().iter().zip(acc.mean(dir).unwrap()) {
            worst_mean = worst_mean.max((g - w).abs());
        }
    }
    let pass = worst_cl <= 1e-6 && worst_r <= 1e-9 && worst_c <= 1e-6 && worst_mean <= 1e-6 && counts_ok;
    (
        pass,
        format!(
            "max |err| classification {worst_cl:.1e} (tol 1e-6), regression {worst_r:.1e} (tol 1e-9), \
             centroid {worst_c:.1e} (tol 1e-6), running mean over 1000 updates {worst_mean:.1e} (tol 1e-6)"
        ),
    )
}

fn tiny(mode: DeformatorMode, hidden: usize) -> TrainConfig {
    TrainConfig {
        latent_dim: 4,
        num_directions: 3,
        batch_size: 2,
        deformator_hidden: hidden,
        deformator_mode: mode,
        eval_interval: 0,
        checkpoint_interval: 0,
        seed: 17,
        generator: GeneratorSpec {
            resolution: 8,
            ..GeneratorSpec::default()
        },
        ..TrainConfig::default()
    }
}

/// Central differences on `stride`-spaced coordinates of every tensor.
fn gradient_check(cfg: TrainConfig, stride: usize) -> (f64, usize) {
    let mut trainer = Trainer::<f64>::from_config(cfg).unwrap();
    for _ in 0..4 {
        trainer.train_step().unwrap();
    }
    let batch = trainer.batch_for_step(trainer.step());
    let out = trainer.batch_outcome(&batch).unwrap();
    let grads: Vec<Vec<f64>> = out
        .deformator_grads
        .tensors()
        .iter()
        .map(|(_, t)| t.iter().copied().collect())
        .collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (ti, g) in grads.iter().enumerate() {
        for j in (0..g.len()).step_by(stride) {
            let orig = *trainer.deformator().tensors()[ti].1.iter().nth(j).unwrap();
            let mut at = |v: f64| {
                *trainer.deformator_mut().tensors_mut()[ti].1.iter_mut().nth(j).unwrap() = v;
                trainer.batch_outcome(&batch).unwrap().losses.total
            };
            let fd = (at(orig + h) - at(orig - h)) / (2.0 * h);
            at(orig);
            let rel = (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-7);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

fn metric_degeneracies() -> (bool, String) {
    let gen = BlobGenerator::<f32>::new(compass_core::generators::BlobConfig::new(8, 32).unwrap()).unwrap();
    let embed = EmbeddingNet::new(gen.output_shape(), 0);
    let mags = MagnitudeRange::default();
    let spec = DirectionSpec::new(8, 8).unwrap();
    let mut zero_ok = true;
    for mode in [DeformatorMode::Nonlinear, DeformatorMode::Linear] {
        let def = Deformator::<f32>::zeros(spec, mode, 1024).unwrap();
        let ppl = eval_ppl(&def, &gen, &embed, 1000, 0.1, &mags, &mut seeded_rng(0, "ppl")).unwrap();
        zero_ok &= ppl == 0.0;
    }

    let trainer = Trainer::<f32>::from_config(TrainConfig::default()).unwrap();
    let def_before = flat(trainer.deformator());
    let rec_before = flat(trainer.reconstructor());
    let bank_before = trainer.bank().clone();
    evaluate(
        trainer.deformator(),
        trainer.reconstructor(),
        &gen,
        &embed,
        256,
        0.1,
        &mags,
        3,
    )
    .unwrap();
    eval_rca(
        trainer.deformator(),
        trainer.reconstructor(),
        &gen,
        64,
        &mags,
        &mut seeded_rng(1, "rca"),
    )
    .unwrap();
    factor_alignment(trainer.deformator(), &gen).unwrap();
    trainer.evaluate(128).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let unchanged = bits(&def_before) == bits(&flat(trainer.deformator()))
        && bits(&rec_before) == bits(&flat(trainer.reconstructor()))
        && &bank_before == trainer.bank();
    (
        zero_ok && unchanged,
        format!("zero deformator PPL exactly 0 (both modes): {zero_ok}; parameters bitwise unchanged by evaluation: {unchanged}"),
    )
}

fn reproducibility() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 200,
        eval_interval: 0,
        checkpoint_interval: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = |cfg: &TrainConfig| {
        let mut t = Trainer::<f32>::from_config(cfg.clone()).unwrap();
        let out = train_loop(&mut t, None, |_| {}).unwrap();
        (t, out.last_losses.unwrap().total)
    };
    let (straight, loss_a) = run(&cfg);
    let (_, loss_b) = run(&cfg);
    let same_loss = (loss_a - loss_b).abs() <= 1e-6;

    let half = TrainConfig {
        steps: 100,
        ..cfg.clone()
    };
    let mut first = Trainer::<f32>::from_config(half).unwrap();
    let first_dir = dir.path().join("first");
    train_loop(&mut first, Some(&first_dir), |_| {}).unwrap();
    let path = first_dir.join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    let again = dir.path().join("again.bin");
    save_checkpoint(&again, &loaded).unwrap();
    let roundtrip = bytes == std::fs::read(&again).unwrap()
        && loaded.deformator == *first.deformator()
        && flat(&loaded.reconstructor) == flat(first.reconstructor())
        && loaded.bank == *first.bank();

    let mut resumed_ckpt = loaded;
    resumed_ckpt.config.steps = 200;
    let mut resumed = Trainer::from_checkpoint(resumed_ckpt, first.generator().clone()).unwrap();
    let resumed_loss = train_loop(&mut resumed, None, |_| {})
        .unwrap()
        .last_losses
        .unwrap()
        .total;
    let resume_equal = flat(resumed.deformator()) == flat(straight.deformator())
        && flat(resumed.reconstructor()) == flat(straight.reconstructor())
        && resumed.bank() == straight.bank()
        && resumed_loss == loss_a;
    (
        same_loss && roundtrip && resume_equal,
        format!(
            "repeat-run final loss |Δ| {:.1e} (tol 1e-6); checkpoint bytes and tensors round-trip: {roundtrip}; \
             resume at 100 → 200 bitwise equal to uninterrupted run: {resume_equal}",
            (loss_a - loss_b).abs()
        ),
    )
}

struct BlobRun {
    seed: u64,
    gamma: f64,
    rca: f64,
    ppl: f64,
    alignment: f64,
    factors: Array2<f64>,
}

fn blob_run(seed: u64, gamma: f64) -> BlobRun {
    let start = Instant::now();
    let cfg = TrainConfig {
        seed,
        gamma,
        eval_interval: 0,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::from_config(cfg).unwrap();
    train_loop(&mut trainer, None, |_| {}).unwrap();
    let report = trainer.evaluate(10_000).unwrap();
    let alignment = factor_alignment(trainer.deformator(), &**trainer.generator())
        .unwrap()
        .score;
    println!(
        "  blob run seed {seed} gamma {gamma}: held-out RCA {:.4}, PPL {:.4}, factor alignment {alignment:.4} [{:.0?}]",
        report.rca,
        report.ppl,
        start.elapsed()
    );
    BlobRun {
        seed,
        gamma,
        rca: report.rca,
        ppl: report.ppl,
        alignment,
        factors: trainer.generator().factor_matrix().unwrap().mapv(|v| v.as_f64()),
    }
}

/// Mean greedy alignment score of deformators with i.i.d. normal columns,
/// against the blob generator's four factor rows.
fn alignment_baseline(factors: &Array2<f64>, draws: u64) -> f64 {
    let mut rng = seeded_rng(0, "alignment-baseline");
    let (k, d) = (8, factors.ncols());
    (0..draws)
        .map(|_| {
            alignment_with(normal_matrix::<f64, _>(&mut rng, k, d), factors.clone())
                .unwrap()
                .score
        })
        .sum::<f64>()
        / draws as f64
}

fn main() {
    let mut results = Vec::new();
    let start = Instant::now();

    let (pass, detail) = loss_kernels();
    report(&mut results, "loss-kernel oracles", pass, detail);

    let (nl_worst, nl_n) = gradient_check(tiny(DeformatorMode::Nonlinear, 1024), 997);
    let (small_worst, small_n) = gradient_check(tiny(DeformatorMode::Nonlinear, 16), 1);
    let (lin_worst, lin_n) = gradient_check(tiny(DeformatorMode::Linear, 16), 1);
    let worst = nl_worst.max(small_worst).max(lin_worst);
    report(
        &mut results,
        "gradient check",
        worst <= 1e-3,
        format!(
            "max relative error {worst:.2e} (tol 1e-3) over {nl_n} sampled coordinates of the width-1024 deformator, \
             all {small_n} of a width-16 one and all {lin_n} of a linear one"
        ),
    );

    let (pass, detail) = metric_degeneracies();
    report(&mut results, "metric degeneracies", pass, detail);

    let untrained = Trainer::<f32>::from_config(TrainConfig::default()).unwrap();
    let chance = untrained.evaluate(10_000).unwrap().rca;
    report(
        &mut results,
        "chance-level sanity",
        (chance - 0.125).abs() <= 0.02,
        format!("untrained RCA {chance:.4} at 10000 samples (target 0.125 ± 0.02)"),
    );

    let (pass, detail) = reproducibility();
    report(&mut results, "reproducibility", pass, detail);

    println!("  training the blob experiment: 3 seeds × gamma ∈ {{0.25, 0}}, 5000 steps each");
    let runs: Vec<(BlobRun, BlobRun)> = (0..3).map(|seed| (blob_run(seed, 0.25), blob_run(seed, 0.0))).collect();

    let rca_hits = runs.iter().filter(|(with, _)| with.rca >= 0.70).count();
    report(
        &mut results,
        "blob discovery",
        rca_hits >= 2,
        format!(
            "held-out RCA ≥ 0.70 in {rca_hits}/3 seeds: {}",
            runs.iter()
                .map(|(w, _)| format!("{:.3}", w.rca))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );

    let ordered = runs
        .iter()
        .filter(|(with, without)| with.ppl < without.ppl && with.rca >= without.rca - 0.05)
        .count();
    report(
        &mut results,
        "centroid-loss ordering",
        ordered >= 2,
        format!(
            "PPL(0.25) < PPL(0) with RCA drop ≤ 0.05 in {ordered}/3 seeds: {}",
            runs.iter()
                .map(|(w, wo)| format!(
                    "seed {} PPL {:.3} vs {:.3}, RCA {:.3} vs {:.3}",
                    w.seed, w.ppl, wo.ppl, w.rca, wo.rca
                ))
                .collect::<Vec<_>>()
                .join("; ")
        ),
    );

    let baseline = alignment_baseline(&runs[0].0.factors, 100_000);
    let aligned = runs.iter().filter(|(w, _)| w.alignment >= baseline + 0.15).count();
    report(
        &mut results,
        "factor alignment",
        aligned >= 2,
        format!(
            "score ≥ random baseline {baseline:.4} + 0.15 in {aligned}/3 seeds: {}",
            runs.iter()
                .map(|(w, _)| format!("seed {} gamma {} → {:.3}", w.seed, w.gamma, w.alignment))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );

    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0?}{}",
        results.len() - failed.len(),
        results.len(),
        start.elapsed(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {}", failed.join(", "))
        }
    );
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
