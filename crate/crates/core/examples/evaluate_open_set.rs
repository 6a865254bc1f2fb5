//! Train on half the identities and rank the other half: open-set metrics plus the
//! sanity score on the training identities.
//!
//! cargo run --release --example evaluate_open_set

use reid_forge::data::{synth_generate, SynthConfig, MANIFEST_NAME};
use reid_forge::runner::{cmd_train, evaluate, parse_config};

fn main() -> reid_forge::error::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let data = dir.path().join("data");
    let m = synth_generate(&SynthConfig { n_ids: 12, imgs_per_id: 10, resolution: (32, 32), seed: 4 }, &data)?;
    let sets: Vec<String> = [
        "data.resolution=32x32",
        "backbone.base_channels=8",
        "backbone.last_stride=1",
        "head.embed_dim=32",
        "sampler.P=4",
        "sampler.K=8",
        "optim.epochs=20",
        "optim.lr=0.001",
    ]
    .map(String::from)
    .to_vec();
    let cfg = parse_config("profile = default\n", &sets)?;
    let ckpt = cmd_train(&cfg, &data.join(MANIFEST_NAME), &dir.path().join("run"), None)?;

    let open = evaluate(&ckpt, &m, None, false)?;
    println!("open set ({} probe images)\n{}", open.split.probe.len(), open.report);
    let sanity = evaluate(&ckpt, &m, None, true)?;
    println!("training identities\n{}", sanity.report);
    Ok(())
}
