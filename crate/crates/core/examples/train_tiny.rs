//! Train a deliberately small model for a few epochs and print the loss log.
//!
//! cargo run --release --example train_tiny

use reid_forge::data::{synth_generate, SynthConfig};
use reid_forge::nn::Module;
use reid_forge::runner::{parse_config, run_training, Trainer, LOG_NAME};

fn main() -> reid_forge::error::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let m = synth_generate(&SynthConfig { n_ids: 6, imgs_per_id: 8, resolution: (32, 32), seed: 0 }, &dir.path().join("data"))?;
    let sets: Vec<String> = [
        "data.resolution=32x32",
        "backbone.base_channels=8",
        "head.embed_dim=16",
        "sampler.P=3",
        "sampler.K=4",
        "optim.epochs=8",
        "optim.lr=0.001",
    ]
    .map(String::from)
    .to_vec();
    let cfg = parse_config("profile = default\n", &sets)?;
    let mut t = Trainer::new(&cfg, &m)?;
    println!(
        "{} classes, {} steps per epoch, {} parameters",
        t.data.num_classes(),
        t.data.steps_per_epoch(),
        t.state.model.param_count()
    );
    let out = dir.path().join("run");
    run_training(&mut t, &out, None)?;
    print!("{}", std::fs::read_to_string(out.join(LOG_NAME)).expect("log"));
    Ok(())
}
