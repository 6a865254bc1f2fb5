//! Channel-max activation heatmaps for a few synthetic images, written as PGM.
//!
//! cargo run --example heatmap -- [out_dir]

use reid_forge::data::{synth_generate, SynthConfig, MANIFEST_NAME};
use reid_forge::runner::{cmd_heatmap, cmd_train, parse_config};

fn main() -> reid_forge::error::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "heatmaps".into());
    let dir = tempfile::tempdir().expect("temp dir");
    let data = dir.path().join("data");
    let m = synth_generate(&SynthConfig { n_ids: 4, imgs_per_id: 6, resolution: (64, 64), seed: 2 }, &data)?;
    let sets: Vec<String> = ["backbone.base_channels=8", "backbone.last_stride=1", "sampler.P=2", "sampler.K=4", "optim.epochs=2"]
        .map(String::from)
        .to_vec();
    let cfg = parse_config("profile = default\n", &sets)?;
    let ckpt = cmd_train(&cfg, &data.join(MANIFEST_NAME), &dir.path().join("run"), None)?;
    // Stems repeat across identity folders, so each identity gets its own output folder.
    for (id, group) in m.by_identity().iter().enumerate() {
        let images: Vec<_> = group.iter().take(2).map(|&i| m.resolve(i)).collect();
        for p in cmd_heatmap(&ckpt, &images, &std::path::Path::new(&out).join(&m.identities[id]))? {
            println!("{}", p.display());
        }
    }
    Ok(())
}
