//! Embedding extraction, exact Euclidean ranking, CMC / mAP, and feature heatmaps.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::backbone::BranchTag;
use crate::data::{encode_pgm, eval_batch, AugmentConfig};
use crate::error::{Error, Result};
use crate::model::ReidModel;
use crate::nn::Ctx;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CMC_KS: [usize; 3] = [1, 5, 10];

/// Test descriptors for pre-loaded `[3,H,W]` images in `[0,1]`, one row per image.
pub fn extract_embeddings(
    model: &ReidModel<f32>,
    images: &[&Tensor<f32>],
    aug: &AugmentConfig,
    batch_size: usize,
) -> Result<Tensor<f32>> {
    let d = model.embedding_dim();
    let mut rows = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(batch_size.max(1)) {
        let e = model.embed(eval_batch(chunk, aug)?)?;
        rows.extend_from_slice(e.data());
    }
    Tensor::from_vec([images.len(), d], rows)
}

/// Gallery order per query, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub order: Vec<Vec<usize>>,
    /// Euclidean distances aligned with `order`.
    pub distances: Vec<Vec<f64>>,
    pub query_ids: Vec<usize>,
    pub gallery_ids: Vec<usize>,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Full sort of the gallery for every query; ties go to the lower gallery index.
pub fn rank<T: Scalar>(
    queries: &Tensor<T>,
    query_ids: &[usize],
    gallery: &Tensor<T>,
    gallery_ids: &[usize],
) -> Result<RankingResult> {
    if queries.rank() != 2 || gallery.rank() != 2 || queries.shape()[1] != gallery.shape()[1] {
        return Err(Error::Shape(format!(
            "query {:?} and gallery {:?} embeddings disagree",
            queries.shape(),
            gallery.shape()
        )));
    }
    if gallery.shape()[0] == 0 {
        return Err(Error::Shape("gallery is empty".into()));
    }
    if query_ids.len() != queries.shape()[0] || gallery_ids.len() != gallery.shape()[0] {
        return Err(Error::Shape("identity lists do not match embedding rows".into()));
    }
    let n_g = gallery.shape()[0];
    let per_query: Vec<(Vec<usize>, Vec<f64>)> = (0..queries.shape()[0])
        .into_par_iter()
        .map(|q| {
            let qrow = queries.row(q);
            let d: Vec<f64> = (0..n_g).map(|g| sq_dist(qrow, gallery.row(g))).collect();
            let mut order: Vec<usize> = (0..n_g).collect();
            order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
            let dist = order.iter().map(|&g| d[g].sqrt()).collect();
            (order, dist)
        })
        .collect();
    let (order, distances) = per_query.into_iter().unzip();
    Ok(RankingResult {
        order,
        distances,
        query_ids: query_ids.to_vec(),
        gallery_ids: gallery_ids.to_vec(),
    })
}

impl RankingResult {
    /// 1-based ranks of every same-identity gallery item; empty when none exists.
    pub fn match_ranks(&self, q: usize) -> Vec<usize> {
        let id = self.query_ids[q];
        self.order[q]
            .iter()
            .enumerate()
            .filter(|(_, &g)| self.gallery_ids[g] == id)
            .map(|(r, _)| r + 1)
            .collect()
    }
}

/// Average precision from the sorted 1-based ranks of the relevant items.
pub fn average_precision(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let s: f64 = ranks.iter().enumerate().map(|(j, &r)| (j + 1) as f64 / r as f64).sum();
    s / ranks.len() as f64
}

/// Rank-k accuracies over queries that have a match, plus the skip count.
pub fn cmc(r: &RankingResult, ks: &[usize]) -> Result<(Vec<f64>, usize)> {
    let firsts: Vec<Option<usize>> = (0..r.order.len()).map(|q| r.match_ranks(q).first().copied()).collect();
    let kept: Vec<usize> = firsts.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Metrics("no query has a same-identity gallery item".into()));
    }
    let n = kept.len() as f64;
    let values = ks.iter().map(|&k| kept.iter().filter(|&&f| f <= k).count() as f64 / n).collect();
    Ok((values, firsts.len() - kept.len()))
}

/// mAP over queries that have a match, and per-query AP (`None` for skipped queries).
pub fn mean_ap(r: &RankingResult) -> Result<(f64, Vec<Option<f64>>)> {
    let per: Vec<Option<f64>> = (0..r.order.len())
        .map(|q| {
            let ranks = r.match_ranks(q);
            (!ranks.is_empty()).then(|| average_precision(&ranks))
        })
        .collect();
    let kept: Vec<f64> = per.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Metrics("no query has a same-identity gallery item".into()));
    }
    Ok((kept.iter().sum::<f64>() / kept.len() as f64, per))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub ap: Option<f64>,
    pub first_match_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rank_1: f64,
    pub rank_5: f64,
    pub rank_10: f64,
    pub map: f64,
    pub queries: usize,
    pub skipped: usize,
    pub per_query: Vec<QueryResult>,
}

impl MetricsReport {
    pub fn from_ranking(r: &RankingResult) -> Result<Self> {
        let (ranks, skipped) = cmc(r, &CMC_KS)?;
        let (map, aps) = mean_ap(r)?;
        let per_query = aps
            .into_iter()
            .enumerate()
            .map(|(q, ap)| QueryResult {
                ap,
                first_match_rank: r.match_ranks(q).first().copied(),
            })
            .collect();
        Ok(MetricsReport {
            rank_1: ranks[0],
            rank_5: ranks[1],
            rank_10: ranks[2],
            map,
            queries: r.order.len() - skipped,
            skipped,
            per_query,
        })
    }

    /// `query_path,ap,first_match_rank`; skipped queries leave both fields empty.
    pub fn per_query_csv(&self, paths: &[String]) -> String {
        let mut s = String::from("query_path,ap,first_match_rank\n");
        for (p, q) in paths.iter().zip(&self.per_query) {
            let ap = q.ap.map(|v| v.to_string()).unwrap_or_default();
            let fm = q.first_match_rank.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{p},{ap},{fm}");
        }
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric,value")?;
        writeln!(f, "rank_1,{}", self.rank_1)?;
        writeln!(f, "rank_5,{}", self.rank_5)?;
        writeln!(f, "rank_10,{}", self.rank_10)?;
        writeln!(f, "mAP,{}", self.map)?;
        writeln!(f, "queries,{}", self.queries)?;
        writeln!(f, "skipped,{}", self.skipped)
    }
}

/// Per-position maximum over the channels of a `[C,H,W]` map.
pub fn channel_max<T: Scalar>(fm: &Tensor<T>) -> Result<Tensor<f64>> {
    let &[c, h, w] = fm.shape() else {
        return Err(Error::Shape(format!("heatmap needs [C,H,W], got {:?}", fm.shape())));
    };
    let plane = h * w;
    let d = fm.data();
    let mut m: Vec<f64> = d[..plane].iter().map(|v| v.as_f64()).collect();
    for ch in 1..c {
        for (acc, v) in m.iter_mut().zip(&d[ch * plane..(ch + 1) * plane]) {
            *acc = acc.max(v.as_f64());
        }
    }
    Tensor::from_vec([h, w], m)
}

/// Channel max, min-max scaled to `[0,1]`. A constant map gives all zeros.
pub fn channel_max_normalized<T: Scalar>(fm: &Tensor<T>) -> Result<Tensor<f32>> {
    let m = channel_max(fm)?;
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let out = m
        .data()
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
        .collect();
    Tensor::from_vec(m.shape().to_vec(), out)
}

/// Heatmap of the global branch (or the first branch present) for one image in `[0,1]`.
pub fn heatmap(model: &ReidModel<f32>, image: &Tensor<f32>, aug: &AugmentConfig) -> Result<Tensor<f32>> {
    let x = eval_batch(&[image], aug)?;
    let tape = Tape::no_grad();
    let ctx = Ctx::eval(&tape);
    let maps = model.backbone.forward(&ctx, ctx.input(x))?;
    let fm = maps
        .iter()
        .find(|m| m.tag == BranchTag::Global)
        .unwrap_or(&maps[0])
        .tensor
        .value();
    let s = fm.shape();
    let single = Tensor::from_vec([s[1], s[2], s[3]], fm.data().to_vec())?;
    channel_max_normalized(&single)
}

/// `<out_dir>/<stem>.heat.pgm` for an input path.
pub fn heatmap_path(input: &Path, out_dir: &Path) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out_dir.join(format!("{stem}.heat.pgm"))
}

pub fn write_heatmap(map: &Tensor<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, data: Vec<f64>) -> Tensor<f64> {
        let d = data.len() / rows;
        Tensor::from_vec([rows, d], data).unwrap()
    }

    #[test]
    fn duplicate_is_rank_one() {
        let g = t(3, vec![0.0, 0.0, 1.0, 1.0, 5.0, 5.0]);
        let q = t(1, vec![1.0, 1.0]);
        let r = rank(&q, &[7], &g, &[3, 7, 4]).unwrap();
        assert_eq!(r.order[0][0], 1);
        assert_eq!(r.distances[0][0], 0.0);
        let one = rank(&q, &[7], &t(1, vec![9.0, 9.0]), &[7]).unwrap();
        assert_eq!(one.order[0], vec![0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let g = t(3, vec![1.0, -1.0, 1.0]);
        let r = rank(&t(1, vec![0.0]), &[0], &g, &[0, 1, 2]).unwrap();
        assert_eq!(r.order[0], vec![0, 1, 2]);
    }

    #[test]
    fn worked_ap_and_cmc() {
        assert!((average_precision(&[1, 3]) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[1, 2, 3]), 1.0);
        let r = RankingResult {
            order: vec![vec![0, 1, 2], vec![0, 1, 2]],
            distances: vec![vec![0.0; 3]; 2],
            query_ids: vec![1, 2],
            gallery_ids: vec![1, 3, 2],
        };
        let (v, skipped) = cmc(&r, &[1, 5]).unwrap();
        assert_eq!((v, skipped), (vec![0.5, 1.0], 0));
    }

    #[test]
    fn skipped_queries_and_all_skipped() {
        let r = RankingResult {
            order: vec![vec![0], vec![0]],
            distances: vec![vec![0.0]; 2],
            query_ids: vec![1, 9],
            gallery_ids: vec![1],
        };
        let m = MetricsReport::from_ranking(&r).unwrap();
        assert_eq!((m.queries, m.skipped, m.rank_1), (1, 1, 1.0));
        assert!(m.to_string().starts_with("metric,value\nrank_1,1\n"));
        assert_eq!(m.per_query_csv(&["a".into(), "b".into()]), "query_path,ap,first_match_rank\na,1,1\nb,,\n");
        let none = RankingResult { query_ids: vec![8, 9], ..r };
        assert!(matches!(cmc(&none, &[1]), Err(Error::Metrics(_))));
    }

    #[test]
    fn heatmap_rules() {
        let two = Tensor::from_vec([2, 1, 1], vec![1.0f64, 3.0]).unwrap();
        assert_eq!(channel_max(&two).unwrap().data(), &[3.0]);
        let fm = Tensor::from_vec([2, 1, 2], vec![1.0f64, 0.0, 3.0, 2.0]).unwrap();
        assert_eq!(channel_max_normalized(&fm).unwrap().data(), &[1.0, 0.0]);
        let flat = Tensor::full([4, 2, 3], 0.7f64);
        assert!(channel_max_normalized(&flat).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(heatmap_path(Path::new("x/cat.ppm"), Path::new("o")), PathBuf::from("o/cat.heat.pgm"));
    }
}
