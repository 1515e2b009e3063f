//! Retrieval and segmentation scoring: AP, CMC, gIoU, cIoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{foreground_count, mask_iou, BinaryMask, MaskError};
use crate::model::{AnnotationStore, IdentityId, ImageId, QueryId};

pub const DEFAULT_MIN_MASK_PIXELS: u64 = 50;
pub const CMC_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("gallery image {0} is not in the annotation store")]
    UnknownImage(ImageId),
    #[error("no ground-truth mask for identity {identity} in image {image}")]
    MissingGroundTruth { image: ImageId, identity: IdentityId },
    #[error("mask for image {image}: {source}")]
    Mask { image: ImageId, source: MaskError },
    #[error("no queries to aggregate")]
    NoQueries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "SEG")]
    Seg,
    #[serde(rename = "REJ")]
    Rej,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Seg => "SEG",
            Decision::Rej => "REJ",
        })
    }
}

/// A mask with fewer than `min_px` foreground pixels, or no mask, counts as a rejection.
pub fn apply_empty_rule(mask: Option<&BinaryMask>, min_px: u64) -> Decision {
    match mask {
        Some(m) if foreground_count(m) >= min_px => Decision::Seg,
        _ => Decision::Rej,
    }
}

/// The decision after the empty-mask rule: SEG survives only with a large enough mask.
pub fn effective_decision(decision: Decision, mask: Option<&BinaryMask>, min_px: u64) -> Decision {
    match decision {
        Decision::Rej => Decision::Rej,
        Decision::Seg => apply_empty_rule(mask, min_px),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub gallery_image_id: ImageId,
    pub score: f64,
    pub decision: Decision,
    pub predicted_mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedGalleryResult {
    pub query_id: QueryId,
    pub items: Vec<RankedItem>,
}

impl RankedGalleryResult {
    /// Sorts by descending score (ties by image id) and applies the empty-mask
    /// rule, dropping masks on rejected items.
    pub fn new(query_id: QueryId, mut items: Vec<RankedItem>, min_px: u64) -> Self {
        for it in &mut items {
            it.decision = effective_decision(it.decision, it.predicted_mask.as_ref(), min_px);
            if it.decision == Decision::Rej {
                it.predicted_mask = None;
            }
        }
        items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.gallery_image_id.cmp(&b.gallery_image_id)));
        Self { query_id, items }
    }
}

/// `(1/num_positives) sum_k P@k rel(k)`; `None` when there are no positives.
pub fn average_precision(relevance: &[bool], num_positives: usize) -> Option<f64> {
    if num_positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / num_positives as f64)
}

pub fn cmc_hits(relevance: &[bool], ks: &[usize]) -> Vec<bool> {
    let first = relevance.iter().position(|&r| r);
    ks.iter().map(|&k| first.is_some_and(|i| i < k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Tp,
    Fp,
    Fn,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouSample {
    pub query_id: QueryId,
    pub gallery_image_id: ImageId,
    pub kind: SampleKind,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

/// One IoU sample per gallery image in TP, FP or FN; true negatives are skipped.
/// Ground truth is the union of `identity`'s masks in each image.
pub fn segmentation_scores(
    result: &RankedGalleryResult,
    identity: &IdentityId,
    gt: &AnnotationStore,
) -> Result<Vec<IouSample>, MetricsError> {
    let mut out = Vec::new();
    for it in &result.items {
        let image = &it.gallery_image_id;
        let positive = is_positive(gt, image, identity)?;
        let sample = |kind, intersection, union, iou| IouSample {
            query_id: result.query_id.clone(),
            gallery_image_id: image.clone(),
            kind,
            intersection,
            union,
            iou,
        };
        let pred = it.predicted_mask.as_ref().filter(|_| it.decision == Decision::Seg);
        match (positive, pred) {
            (true, Some(pred)) => {
                let gt_mask = gt_mask(gt, image, identity)?;
                let c = mask_iou(pred, &gt_mask).map_err(|source| MetricsError::Mask { image: image.clone(), source })?;
                out.push(sample(SampleKind::Tp, c.intersection, c.union, c.iou));
            }
            (true, None) => {
                let gt_mask = gt_mask(gt, image, identity)?;
                out.push(sample(SampleKind::Fn, 0, foreground_count(&gt_mask), 0.0));
            }
            (false, Some(pred)) => out.push(sample(SampleKind::Fp, 0, foreground_count(pred), 0.0)),
            (false, None) => {}
        }
    }
    Ok(out)
}

fn is_positive(gt: &AnnotationStore, image: &ImageId, identity: &IdentityId) -> Result<bool, MetricsError> {
    if !gt.images.contains_key(image) {
        return Err(MetricsError::UnknownImage(image.clone()));
    }
    Ok(gt.identities_in(image).contains(identity))
}

fn gt_mask(gt: &AnnotationStore, image: &ImageId, identity: &IdentityId) -> Result<BinaryMask, MetricsError> {
    gt.identity_mask(image, identity)
        .map_err(|source| MetricsError::Mask { image: image.clone(), source })?
        .ok_or_else(|| MetricsError::MissingGroundTruth { image: image.clone(), identity: identity.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub query_id: QueryId,
    pub num_positives: usize,
    /// Absent for queries whose gallery holds no positive.
    pub ap: Option<f64>,
    /// Hit flags for [`CMC_KS`].
    pub cmc: Vec<bool>,
}

/// Relevance along the ranked list: a positive image that was also segmented.
pub fn score_query(
    result: &RankedGalleryResult,
    identity: &IdentityId,
    gt: &AnnotationStore,
) -> Result<(QueryMetrics, Vec<IouSample>), MetricsError> {
    let mut relevance = Vec::with_capacity(result.items.len());
    let mut num_positives = 0;
    for it in &result.items {
        let positive = is_positive(gt, &it.gallery_image_id, identity)?;
        num_positives += usize::from(positive);
        relevance.push(positive && it.decision == Decision::Seg);
    }
    let samples = segmentation_scores(result, identity, gt)?;
    let q = QueryMetrics {
        query_id: result.query_id.clone(),
        num_positives,
        ap: average_precision(&relevance, num_positives),
        cmc: cmc_hits(&relevance, &CMC_KS),
    };
    Ok((q, samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counts {
    pub queries: usize,
    pub excluded_queries: usize,
    pub galleries: usize,
    pub samples: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub map: f64,
    pub cmc_topk: BTreeMap<String, f64>,
    pub g_iou: f64,
    pub c_iou: f64,
    pub counts: Counts,
    pub per_query: Vec<QueryMetrics>,
}

impl MetricsReport {
    pub fn top_k(&self, k: usize) -> Option<f64> {
        self.cmc_topk.get(&k.to_string()).copied()
    }
}

/// Ordered reduction: queries by id, samples by `(query_id, gallery_image_id)`.
/// Ratios over an empty set are reported as 0.
pub fn aggregate(
    mut queries: Vec<QueryMetrics>,
    mut samples: Vec<IouSample>,
    galleries: usize,
) -> Result<MetricsReport, MetricsError> {
    if queries.is_empty() {
        return Err(MetricsError::NoQueries);
    }
    queries.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    samples.sort_by(|a, b| (&a.query_id, &a.gallery_image_id).cmp(&(&b.query_id, &b.gallery_image_id)));

    let included: Vec<&QueryMetrics> = queries.iter().filter(|q| q.ap.is_some()).collect();
    let n = included.len();
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    let map = mean(included.iter().filter_map(|q| q.ap).sum(), n);
    let cmc_topk = CMC_KS
        .iter()
        .enumerate()
        .map(|(i, k)| (k.to_string(), mean(included.iter().filter(|q| q.cmc[i]).count() as f64, n)))
        .collect();
    let g_iou = mean(samples.iter().map(|s| s.iou).sum(), samples.len());
    let inter: u64 = samples.iter().map(|s| s.intersection).sum();
    let union: u64 = samples.iter().map(|s| s.union).sum();
    let c_iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    let kind_count = |k| samples.iter().filter(|s| s.kind == k).count();
    let counts = Counts {
        queries: queries.len(),
        excluded_queries: queries.len() - n,
        galleries,
        samples: samples.len(),
        true_positives: kind_count(SampleKind::Tp),
        false_positives: kind_count(SampleKind::Fp),
        false_negatives: kind_count(SampleKind::Fn),
    };
    Ok(MetricsReport { map, cmc_topk, g_iou, c_iou, counts, per_query: queries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, InstanceAnnotation};
    use crate::rng::SplitMix64;

    fn sq(w: u32, n: u32) -> BinaryMask {
        BinaryMask::from_fn(w, w, |x, y| x < n && y < n).unwrap()
    }

    #[test]
    fn empty_rule_boundary() {
        let m49 = BinaryMask::from_fn(10, 10, |x, y| y * 10 + x < 49).unwrap();
        let m50 = BinaryMask::from_fn(10, 10, |x, y| y * 10 + x < 50).unwrap();
        assert_eq!(apply_empty_rule(Some(&m49), DEFAULT_MIN_MASK_PIXELS), Decision::Rej);
        assert_eq!(apply_empty_rule(Some(&m50), DEFAULT_MIN_MASK_PIXELS), Decision::Seg);
        assert_eq!(apply_empty_rule(None, DEFAULT_MIN_MASK_PIXELS), Decision::Rej);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, false], 2), Some(1.0));
        assert!((average_precision(&[false, false, true], 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((average_precision(&[true, false, true], 2).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false], 0), None);
    }

    #[test]
    fn cmc_examples() {
        assert_eq!(cmc_hits(&[true, false], &[1, 5]), vec![true, true]);
        assert_eq!(cmc_hits(&[false, true, false], &[1, 5]), vec![false, true]);
        let mut rng = SplitMix64::new(3);
        for _ in 0..200 {
            let rel: Vec<bool> = (0..20).map(|_| rng.below(6) == 0).collect();
            let got = cmc_hits(&rel, &CMC_KS);
            for (i, &k) in CMC_KS.iter().enumerate() {
                let mut naive = false;
                for r in rel.iter().take(k) {
                    naive |= r;
                }
                assert_eq!(got[i], naive);
            }
            assert!(got.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    /// Two 10x10 images. `img_a` holds identity `p` (mask 8x8), `img_b` holds `o`.
    fn store() -> AnnotationStore {
        let mut s = AnnotationStore::default();
        for (img, ident) in [("img_a", "p"), ("img_b", "o")] {
            s.insert_image(10, 10, img).unwrap();
            s.insert_instance(InstanceAnnotation {
                instance_id: format!("{img}_0").into(),
                image_id: img.into(),
                identity_id: ident.into(),
                bbox: BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
                mask_rle: sq(10, 8),
                description: None,
            })
            .unwrap();
        }
        s
    }

    fn item(id: &str, score: f64, d: Decision, m: Option<BinaryMask>) -> RankedItem {
        RankedItem { gallery_image_id: id.into(), score, decision: d, predicted_mask: m }
    }

    #[test]
    fn seg_samples() {
        let s = store();
        let r = RankedGalleryResult::new(
            "q".into(),
            vec![item("img_a", 0.9, Decision::Seg, Some(sq(10, 8))), item("img_b", 0.1, Decision::Rej, None)],
            50,
        );
        let samples = segmentation_scores(&r, &"p".into(), &s).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!((samples[0].kind, samples[0].iou), (SampleKind::Tp, 1.0));

        let r = RankedGalleryResult::new("q".into(), vec![item("img_a", 0.9, Decision::Rej, None)], 50);
        let samples = segmentation_scores(&r, &"p".into(), &s).unwrap();
        assert_eq!((samples[0].kind, samples[0].iou, samples[0].union), (SampleKind::Fn, 0.0, 64));

        let r = RankedGalleryResult::new("q".into(), vec![item("img_b", 0.9, Decision::Seg, Some(sq(10, 9)))], 50);
        let samples = segmentation_scores(&r, &"p".into(), &s).unwrap();
        assert_eq!((samples[0].kind, samples[0].union), (SampleKind::Fp, 81));

        let r = RankedGalleryResult::new("q".into(), vec![item("img_z", 0.9, Decision::Rej, None)], 50);
        assert!(matches!(segmentation_scores(&r, &"p".into(), &s), Err(MetricsError::UnknownImage(_))));
    }

    #[test]
    fn small_mask_becomes_rejection() {
        let r = RankedGalleryResult::new("q".into(), vec![item("img_a", 0.9, Decision::Seg, Some(sq(10, 7)))], 50);
        assert_eq!(r.items[0].decision, Decision::Rej);
        assert!(r.items[0].predicted_mask.is_none());
    }

    fn sample(q: &str, img: &str, inter: u64, union: u64) -> IouSample {
        IouSample {
            query_id: q.into(),
            gallery_image_id: img.into(),
            kind: SampleKind::Tp,
            intersection: inter,
            union,
            iou: inter as f64 / union as f64,
        }
    }

    fn qm(id: &str, ap: f64) -> QueryMetrics {
        QueryMetrics { query_id: id.into(), num_positives: 1, ap: Some(ap), cmc: vec![ap == 1.0; 3] }
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate(vec![qm("q", 1.0)], vec![sample("q", "a", 10, 20), sample("q", "b", 30, 40)], 1).unwrap();
        assert!((r.c_iou - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.g_iou, 0.625);
        assert_eq!(r.map, 1.0);

        let r = aggregate(vec![qm("q", 1.0)], vec![sample("q", "a", 1, 2), sample("q", "b", 4, 4)], 1).unwrap();
        assert_eq!(r.g_iou, 0.75);
        assert!(aggregate(vec![], vec![], 0).is_err());
    }

    #[test]
    fn excluded_queries_counted() {
        let none = QueryMetrics { query_id: "z".into(), num_positives: 0, ap: None, cmc: vec![false; 3] };
        let r = aggregate(vec![qm("a", 0.5), none], vec![], 1).unwrap();
        assert_eq!((r.counts.queries, r.counts.excluded_queries), (2, 1));
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn ciou_weighted_toward_large_union() {
        let small = sample("q", "a", 9, 10);
        let big = sample("q", "b", 100, 1000);
        let base = aggregate(vec![qm("q", 1.0)], vec![small.clone(), big.clone()], 1).unwrap().c_iou;
        let dup = IouSample { gallery_image_id: "c".into(), ..big.clone() };
        let more = aggregate(vec![qm("q", 1.0)], vec![small, big, dup], 1).unwrap().c_iou;
        assert!((more - 0.1).abs() < (base - 0.1).abs());
    }

    #[test]
    fn aggregate_permutation_invariant() {
        let mut rng = SplitMix64::new(17);
        let mut qs: Vec<QueryMetrics> = (0..30).map(|i| qm(&format!("q{i:02}"), rng.unit_f64())).collect();
        let mut ss: Vec<IouSample> = (0..60)
            .map(|i| {
                let u = 1 + rng.below(500);
                sample(&format!("q{:02}", i % 30), &format!("g{i}"), rng.below(u + 1), u)
            })
            .collect();
        let a = aggregate(qs.clone(), ss.clone(), 1).unwrap();
        rng.shuffle(&mut qs);
        rng.shuffle(&mut ss);
        let b = aggregate(qs, ss, 1).unwrap();
        assert_eq!(a, b);
    }
}
