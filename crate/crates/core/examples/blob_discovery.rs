//! Trains on the blob generator and prints the metric history.
//!
//! ```text
//! cargo run --release -p compass-core --example blob_discovery -- [seed] [steps] [gamma]
//! ```

use compass_core::metrics::factor_alignment;
use compass_core::training::train_loop;
use compass_core::{TrainConfig, Trainer};

fn main() -> compass_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let steps = args.next().map_or(5_000, |s| s.parse().expect("steps"));
    let gamma = args.next().map_or(0.25, |s| s.parse().expect("gamma"));
    let cfg = TrainConfig {
        seed,
        steps,
        gamma,
        eval_samples: 1_000,
        eval_interval: std::env::var("EVAL_INTERVAL").map_or(500, |v| v.parse().unwrap()),
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let mut trainer = Trainer::<f32>::from_config(cfg)?;
    train_loop(&mut trainer, None, |row| {
        println!(
            "step {:>6}  cl {:.4}  r {:.4}  c {:.4}  total {:.4}  rca {:.3}  ppl {:.3}  [{:.0?}]",
            row.step,
            row.classification,
            row.regression,
            row.centroid,
            row.total,
            row.rca,
            row.ppl,
            start.elapsed()
        );
    })?;
    let alignment = factor_alignment(trainer.deformator(), &**trainer.generator())?;
    println!("factor alignment {:.3} {:?}", alignment.score, alignment.assignment);
    if std::env::var("DIAG").is_ok() {
        let q = trainer.generator().factor_matrix().unwrap();
        let dirs = trainer.deformator().direction_vectors();
        for (k, v) in dirs.outer_iter().enumerate() {
            let n = v.dot(&v).sqrt();
            let proj = q.dot(&v);
            let pn = proj.dot(&proj).sqrt();
            println!(
                "dir {k}: norm {n:.3} in-subspace {:.3} proj {:?}",
                pn / n,
                (&proj / pn).to_vec()
            );
        }
        let mut greedy = 0.0;
        let mut permax = 0.0;
        let trials = 2000;
        for t in 0..trials {
            let mut rng = compass_core::rng::seeded_rng(t, "mc");
            let r = compass_core::rng::normal_matrix::<f32, _>(&mut rng, 8, 8);
            let a = compass_core::metrics::alignment_with(r, q.clone()).unwrap();
            greedy += a.score;
            permax += a.per_direction.iter().sum::<f64>() / 8.0;
        }
        println!(
            "baseline greedy {:.3} per-direction max {:.3}",
            greedy / trials as f64,
            permax / trials as f64
        );
        println!(
            "trained per-direction mean {:.3}",
            alignment.per_direction.iter().sum::<f64>() / 8.0
        );
    }
    Ok(())
}
