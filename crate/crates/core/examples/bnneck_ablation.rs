//! Toggle one design choice from config alone and compare open-set mAP.
//! Pass any key, e.g. `head.bnneck`, `loss.label_smoothing` or `data.random_erasing`.
//!
//! cargo run --release --example bnneck_ablation -- [key]

use reid_forge::data::{synth_generate, SynthConfig, MANIFEST_NAME};
use reid_forge::runner::{cmd_train, evaluate, parse_config};

fn main() -> reid_forge::error::Result<()> {
    let key = std::env::args().nth(1).unwrap_or_else(|| "head.bnneck".into());
    let dir = tempfile::tempdir().expect("temp dir");
    let data = dir.path().join("data");
    let m = synth_generate(&SynthConfig { n_ids: 12, imgs_per_id: 10, resolution: (32, 32), seed: 1 }, &data)?;
    for value in ["true", "false"] {
        let sets: Vec<String> = [
            "data.resolution=32x32",
            "backbone.base_channels=8",
            "backbone.last_stride=1",
            "head.embed_dim=32",
            "sampler.P=4",
            "sampler.K=8",
            "optim.epochs=15",
            "optim.lr=0.001",
        ]
        .iter()
        .map(|s| s.to_string())
        .chain([format!("{key}={value}")])
        .collect();
        let cfg = parse_config("profile = default\n", &sets)?;
        let ckpt = cmd_train(&cfg, &data.join(MANIFEST_NAME), &dir.path().join(value), None)?;
        let r = evaluate(&ckpt, &m, None, false)?;
        println!("{key}={value:5}  rank-1 {:.4}  mAP {:.4}", r.report.rank_1, r.report.map);
    }
    Ok(())
}
