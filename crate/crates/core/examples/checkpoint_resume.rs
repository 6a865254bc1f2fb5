//! Stop a run after one epoch, resume it from the saved checkpoint, and compare the
//! result with an uninterrupted run byte for byte.
//!
//! cargo run --release --example checkpoint_resume

use reid_forge::data::{synth_generate, SynthConfig};
use reid_forge::runner::{parse_config, run_training, Checkpoint, RunPaths, Trainer};

fn main() -> reid_forge::error::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let m = synth_generate(&SynthConfig { n_ids: 4, imgs_per_id: 6, resolution: (32, 32), seed: 0 }, &dir.path().join("data"))?;
    let sets: Vec<String> = ["data.resolution=32x32", "backbone.base_channels=4", "sampler.P=2", "sampler.K=4", "optim.epochs=3"]
        .map(String::from)
        .to_vec();
    let cfg = parse_config("profile = default\n", &sets)?;

    let whole = RunPaths::new(&dir.path().join("whole"));
    run_training(&mut Trainer::new(&cfg, &m)?, &whole.dir, None)?;

    let split = RunPaths::new(&dir.path().join("split"));
    run_training(&mut Trainer::new(&cfg, &m)?, &split.dir, Some(1))?;
    let saved = Checkpoint::load(&split.latest())?;
    println!("checkpoint after epoch 1: {} records", saved.records.len());
    let mut t = Trainer::resume(&saved, &m)?;
    println!("resuming at step {} of {}", t.state.step, t.total_steps());
    run_training(&mut t, &split.dir, None)?;

    let a = std::fs::read(whole.final_ckpt()).expect("read");
    let b = std::fs::read(split.final_ckpt()).expect("read");
    println!("{} bytes each, identical: {}", a.len(), a == b);
    Ok(())
}
