//! Write a synthetic corpus, then draw an open-set split and a sanity split from it.
//!
//! cargo run --example synth_and_split -- [out_dir]

use reid_forge::data::{closed_set_split, make_splits, synth_generate, SynthConfig};

fn main() -> reid_forge::error::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth_example".into());
    let m = synth_generate(&SynthConfig::default(), out.as_ref())?;
    println!("{} images of {} identities in {out}\n", m.len(), m.num_identities());

    let open = make_splits(&m, 0.5, 2, 0)?;
    println!("open set, seed 0\n{}", open.report());
    println!("train ids {:?}\ntest ids  {:?}\n", open.train_ids, open.test_ids);

    let sanity = closed_set_split(&m, 2, 0)?;
    println!("closed set (sanity)\n{}", sanity.report());
    Ok(())
}
