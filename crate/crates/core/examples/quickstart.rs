//! Train VALOR with learned context embeddings on the point environment,
//! then score each context by its final distance from the origin.
//!
//! `cargo run --release -p optdisc-core --example quickstart [epochs] [out-dir]`

use std::path::PathBuf;

use optdisc::eval;
use optdisc::par::Executor;
use optdisc::policy::ActionMode;
use optdisc::trainer::{self, Algo, ContextSchedule, Trainer, TrainerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(Ok(300), |a| a.parse())?;
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("optdisc-quickstart"), PathBuf::from);

    let mut config = TrainerConfig::new(Algo::Valor);
    config.contexts = ContextSchedule::Fixed { k: 4 };
    config.embed_dim = Some(32);
    config.epochs = epochs;
    config.stop_at_mastery = true;

    let exec = Executor::with_workers(std::thread::available_parallelism().map_or(1, |n| n.get()));
    let summary = trainer::train(&config, &out, &exec, &mut |m| {
        if m.epoch % 25 == 0 {
            println!(
                "epoch {:>4}  E[P_D] {:.3}  entropy {:.3}",
                m.epoch, m.mean_pd, m.mean_entropy
            );
        }
    })?;
    println!(
        "mastered at {:?} after {} epochs",
        summary.mastered_epoch, summary.epochs_completed
    );

    let t = Trainer::load(&out)?;
    let scores = eval::collect_scores(
        &t.policy,
        &t.policy_store,
        &t.env,
        t.curriculum.k_current,
        &eval::score_final_distance,
        &eval::eval_seeds(0),
        ActionMode::Deterministic,
        &exec,
    )?;
    print!("{}", eval::scores_csv(&scores));
    println!("run directory: {}", out.display());
    Ok(())
}
