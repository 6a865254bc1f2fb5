use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::Manifest;
use crate::error::{Error, Result};

pub const DEFAULT_QUERIES_PER_ID: usize = 2;

/// Identity-disjoint train/test partition plus the probe/gallery draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    /// Sorted identity indices; position = class index during training.
    pub train_ids: Vec<usize>,
    /// Sorted identities on the evaluation side (probe and gallery).
    pub test_ids: Vec<usize>,
    /// Test-side identities dropped for having too few samples.
    pub excluded_ids: Vec<usize>,
    /// Entry indices used for training.
    pub train: Vec<usize>,
    pub probe: Vec<usize>,
    pub gallery: Vec<usize>,
    pub queries_per_id: usize,
    pub seed: u64,
    /// Evaluation identities are the training identities (sanity mode).
    pub closed_set: bool,
}

/// Seeded identity shuffle; the first `round(fraction * n_ids)` go to training.
/// Both returned lists are sorted.
pub fn partition_identities(n_ids: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config("data.train_fraction", "must lie in [0, 1]"));
    }
    let mut ids: Vec<usize> = (0..n_ids).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * n_ids as f64).round() as usize;
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Open-set split: disjoint identities, with `queries_per_id` probes per test identity.
pub fn make_splits(m: &Manifest, train_fraction: f64, queries_per_id: usize, seed: u64) -> Result<SplitSpec> {
    let (train_ids, test_ids) = partition_identities(m.num_identities(), train_fraction, seed)?;
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(Error::Split(format!(
            "{} identities at train fraction {train_fraction} leave one side empty ({} train, {} test)",
            m.num_identities(),
            train_ids.len(),
            test_ids.len()
        )));
    }
    let groups = m.by_identity();
    let train = train_ids.iter().flat_map(|&i| groups[i].iter().copied()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROBE_STREAM);
    let (kept, excluded_ids, probe, gallery) = draw_queries(m, &groups, &test_ids, queries_per_id, &mut rng);
    if kept.is_empty() {
        return Err(Error::Split(format!(
            "no test identity has the {} samples needed for probe and gallery",
            queries_per_id + 1
        )));
    }
    Ok(SplitSpec {
        train_ids,
        test_ids: kept,
        excluded_ids,
        train,
        probe,
        gallery,
        queries_per_id,
        seed,
        closed_set: false,
    })
}

/// Sanity split: train on every identity and draw probe/gallery from the same identities.
pub fn closed_set_split(m: &Manifest, queries_per_id: usize, seed: u64) -> Result<SplitSpec> {
    closed_over(m, (0..m.num_identities()).collect(), (0..m.len()).collect(), queries_per_id, seed)
}

fn closed_over(m: &Manifest, train_ids: Vec<usize>, train: Vec<usize>, queries_per_id: usize, seed: u64) -> Result<SplitSpec> {
    if train_ids.len() < 2 {
        return Err(Error::Split("closed-set evaluation needs at least two identities".into()));
    }
    let groups = m.by_identity();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROBE_STREAM);
    let (kept, excluded_ids, probe, gallery) = draw_queries(m, &groups, &train_ids, queries_per_id, &mut rng);
    if kept.is_empty() {
        return Err(Error::Split("no identity has enough samples for probe and gallery".into()));
    }
    Ok(SplitSpec {
        train,
        train_ids,
        test_ids: kept,
        excluded_ids,
        probe,
        gallery,
        queries_per_id,
        seed,
        closed_set: true,
    })
}

const PROBE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

type Drawn = (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>);

fn draw_queries(m: &Manifest, groups: &[Vec<usize>], ids: &[usize], q: usize, rng: &mut ChaCha8Rng) -> Drawn {
    let (mut kept, mut excluded, mut probe, mut gallery) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &id in ids {
        let g = &groups[id];
        if g.len() < q + 1 {
            log::info!(
                "identity `{}` has {} samples, needs {}; excluded from evaluation",
                m.identities[id],
                g.len(),
                q + 1
            );
            excluded.push(id);
            continue;
        }
        let mut order = g.clone();
        order.shuffle(rng);
        let mut chosen = order[..q].to_vec();
        chosen.sort_unstable();
        probe.extend(&chosen);
        gallery.extend(g.iter().filter(|i| !chosen.contains(i)));
        kept.push(id);
    }
    (kept, excluded, probe, gallery)
}

impl SplitSpec {
    /// Sanity variant of this split: probe and gallery drawn from its training identities.
    pub fn on_train(&self, m: &Manifest) -> Result<SplitSpec> {
        closed_over(m, self.train_ids.clone(), self.train.clone(), self.queries_per_id, self.seed)
    }

    /// `(entry index, class index)` for every training sample.
    pub fn train_labels(&self, m: &Manifest) -> Vec<(usize, usize)> {
        let mut class_of = vec![usize::MAX; m.num_identities()];
        for (c, &id) in self.train_ids.iter().enumerate() {
            class_of[id] = c;
        }
        self.train.iter().map(|&i| (i, class_of[m.entries[i].identity])).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.train_ids.len()
    }

    pub fn report(&self) -> SplitReport {
        SplitReport {
            rows: vec![
                ("train", self.train_ids.len(), self.train.len()),
                ("probe", self.test_ids.len(), self.probe.len()),
                ("gallery", self.test_ids.len(), self.gallery.len()),
            ],
        }
    }
}

/// Identity and image counts per subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitReport {
    pub rows: Vec<(&'static str, usize, usize)>,
}

impl SplitReport {
    pub fn get(&self, subset: &str) -> Option<(usize, usize)> {
        self.rows.iter().find(|r| r.0 == subset).map(|r| (r.1, r.2))
    }
}

impl fmt::Display for SplitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "subset,ids,images")?;
        for (name, ids, imgs) in &self.rows {
            writeln!(f, "{name},{ids},{imgs}")?;
        }
        Ok(())
    }
}
