//! Overfit the toy model on a handful of synthetic scenes and report progress.
//!
//! `cargo run --release -p ovg-core --example overfit -- [scenes] [steps]`

use std::time::Instant;

use ovg_core::data::{generate_synthetic, write_synthetic, SynthConfig};
use ovg_core::eval::evaluate_samples;
use ovg_core::train::{build_vocab, load_samples, Trainer};
use ovg_core::{GroundingModel, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let scenes: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(16);
    let steps: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(500);
    let data_seed: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0);

    let dir = tempfile::tempdir()?;
    let set = generate_synthetic(scenes, &SynthConfig::default(), data_seed);
    let path = write_synthetic(dir.path(), &set)?;
    let mut cfg = ModelConfig::toy();
    if let Ok(lr) = std::env::var("LR") {
        cfg.learning_rate = lr.parse()?;
    }
    if let Ok(seed) = std::env::var("OVG_SEED") {
        cfg.seed = seed.parse()?;
    }
    let samples = load_samples(&set.manifest, &path, cfg.image_size)?;
    let mut trainer = Trainer::new(GroundingModel::new(&cfg, build_vocab(&set.manifest))?);
    println!("{} parameters", trainer.model.store.num_scalars());

    let start = Instant::now();
    trainer.fit(&samples, steps, |t, step, loss| {
        if step % 25 == 0 {
            let (report, _) = evaluate_samples(&t.model, &samples).expect("eval");
            println!(
                "step {step:4} loss {:.4} (giou {:.3} l1 {:.3} cts {:.3}) acc50 {:.1} [{:.1}s]",
                loss.total,
                loss.giou,
                loss.l1,
                loss.contrastive,
                report.acc50,
                start.elapsed().as_secs_f64()
            );
            return report.acc50 < 100.0;
        }
        true
    })?;
    Ok(())
}
