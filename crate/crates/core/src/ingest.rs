//! Dataset construction: detection filtering, NMS, and query/gallery splits.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    gallery_name, AnnotationStore, BBox, CropRef, Detection, IdentityId, ImageId, QueryId, QueryRecord,
    SplitManifest,
};
use crate::rng::{SplitMix64, RNG_ALGORITHM};

/// Defaults: confidence 0.5, height 75 px, width 25 px.
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.5;
pub const DEFAULT_MIN_HEIGHT: f64 = 75.0;
pub const DEFAULT_MIN_WIDTH: f64 = 25.0;
pub const DEFAULT_NMS_IOU: f64 = 0.7;
pub const DEFAULT_GALLERY_SIZES: [usize; 3] = [50, 100, 500];
pub const DEFAULT_TEST_FRACTION: f64 = 0.25;

pub const GALLERY_CONSTRUCTION: &str = "per-query; every positive image of the query identity \
(query source image excluded, at most N-1, seeded subsample when more) plus seeded distractors \
with no instance of the query identity; lists stored in canonical id order";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("test identity {0} has no instances")]
    NoInstances(IdentityId),
    #[error("test identity {0} has no gallery image besides its query source image")]
    NoPositiveImage(IdentityId),
    #[error("gallery size {size} needs {needed} distractors for query {query}, only {available} available")]
    GalleryTooLarge { size: usize, query: QueryId, needed: usize, available: usize },
    #[error("invalid split request: {0}")]
    InvalidSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_confidence: f64,
    pub min_height: f64,
    pub min_width: f64,
    pub nms_iou: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_confidence: DEFAULT_MIN_CONFIDENCE,
            min_height: DEFAULT_MIN_HEIGHT,
            min_width: DEFAULT_MIN_WIDTH,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(IngestError::InvalidConfig(format!("min_confidence {} not in [0,1]", self.min_confidence)));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(IngestError::InvalidConfig(format!("nms_iou {} not in (0,1]", self.nms_iou)));
        }
        if !(self.min_height > 0.0 && self.min_width > 0.0) {
            return Err(IngestError::InvalidConfig("min sizes must be > 0".into()));
        }
        Ok(())
    }
}

/// Why a detection was dropped; the first failing rule wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DropReason {
    Confidence,
    Height,
    Width,
}

pub fn drop_reason(d: &Detection, cfg: &FilterConfig) -> Option<DropReason> {
    if d.confidence < cfg.min_confidence {
        Some(DropReason::Confidence)
    } else if d.bbox.h < cfg.min_height {
        Some(DropReason::Height)
    } else if d.bbox.w < cfg.min_width {
        Some(DropReason::Width)
    } else {
        None
    }
}

/// Keeps detections meeting every threshold (inclusive), in input order.
pub fn filter_detections(dets: &[Detection], cfg: &FilterConfig) -> Vec<Detection> {
    dets.iter().filter(|d| drop_reason(d, cfg).is_none()).cloned().collect()
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

fn tie_key(d: &Detection) -> String {
    format!("{}|{:?}|{:?}|{:?}|{:?}", d.image_id, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h)
}

/// Greedy NMS over detections of one image. Output is in descending confidence,
/// ties ordered by a canonical `(image_id, box)` key.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<(String, &Detection)> = dets.iter().map(|d| (tie_key(d), d)).collect();
    order.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence).then_with(|| a.0.cmp(&b.0)));
    let mut kept: Vec<Detection> = Vec::new();
    for (_, d) in order {
        if kept.iter().all(|k| box_iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}

/// Groups by image (canonical order) and runs NMS per image.
pub fn nms_per_image(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut by_image: BTreeMap<&ImageId, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_image.entry(&d.image_id).or_default().push(d.clone());
    }
    by_image.values().flat_map(|v| nms(v, iou_threshold)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub gallery_sizes: Vec<usize>,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { gallery_sizes: DEFAULT_GALLERY_SIZES.to_vec(), seed: 0, test_fraction: DEFAULT_TEST_FRACTION }
    }
}

pub fn query_id_for(identity: &IdentityId) -> QueryId {
    QueryId(format!("q_{identity}"))
}

/// Builds the train/test partition, one query per test identity and per-query galleries.
///
/// Identities are shuffled with the `identity-split` stream and the first
/// `round(test_fraction * n)` (at least one) become test identities. Gallery
/// candidates are images whose every instance belongs to a test identity.
pub fn build_splits(store: &AnnotationStore, cfg: &SplitConfig) -> Result<SplitManifest, IngestError> {
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction <= 1.0) {
        return Err(IngestError::InvalidSplit(format!("test_fraction {} not in (0,1]", cfg.test_fraction)));
    }
    if cfg.gallery_sizes.is_empty() || cfg.gallery_sizes.contains(&0) {
        return Err(IngestError::InvalidSplit("gallery sizes must be non-empty and positive".into()));
    }
    let by_identity = store.by_identity();
    let mut identities: Vec<IdentityId> = by_identity.keys().cloned().collect();
    if identities.is_empty() {
        return Err(IngestError::InvalidSplit("annotation store has no identities".into()));
    }
    SplitMix64::derive(cfg.seed, "identity-split").shuffle(&mut identities);
    let n_test = ((cfg.test_fraction * identities.len() as f64).round() as usize).clamp(1, identities.len());
    let test_ids: BTreeSet<IdentityId> = identities[..n_test].iter().cloned().collect();
    let train_ids: BTreeSet<IdentityId> = identities[n_test..].iter().cloned().collect();

    let mut eligible: Vec<&ImageId> = Vec::new();
    let mut identity_images: BTreeMap<&IdentityId, BTreeSet<&ImageId>> = BTreeMap::new();
    for (image_id, img) in &store.images {
        let ids: Vec<&IdentityId> = img.instances.iter().map(|i| &store.instances[i].identity_id).collect();
        if ids.iter().all(|id| test_ids.contains(*id)) {
            eligible.push(image_id);
            for id in ids {
                identity_images.entry(id).or_default().insert(image_id);
            }
        }
    }

    let mut queries = Vec::with_capacity(test_ids.len());
    for identity in &test_ids {
        let instances = by_identity.get(identity).filter(|v| !v.is_empty());
        let instances = instances.ok_or_else(|| IngestError::NoInstances(identity.clone()))?;
        let mut rng = SplitMix64::derive(cfg.seed, &format!("query/{identity}"));
        let chosen = instances[rng.below(instances.len() as u64) as usize];
        queries.push(QueryRecord {
            query_id: query_id_for(identity),
            identity_id: identity.clone(),
            crop_ref: CropRef { image_id: chosen.image_id.clone(), instance_id: chosen.instance_id.clone() },
            description: chosen.description.clone(),
        });
    }

    let mut galleries = BTreeMap::new();
    for &size in &cfg.gallery_sizes {
        let name = gallery_name(size);
        let lists: Vec<(QueryId, Vec<ImageId>)> = queries
            .par_iter()
            .map(|q| {
                let rng = SplitMix64::derive(cfg.seed, &format!("gallery/{name}/{}", q.query_id));
                let positives = identity_images.get(&q.identity_id).into_iter().flatten();
                gallery_for(q, size, positives.copied(), &eligible, &identity_images, rng)
                    .map(|g| (q.query_id.clone(), g))
            })
            .collect::<Result<_, _>>()?;
        galleries.insert(name, lists.into_iter().collect());
    }

    Ok(SplitManifest {
        seed: cfg.seed,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        gallery_construction: GALLERY_CONSTRUCTION.to_string(),
        train_ids,
        test_ids,
        queries,
        galleries,
    })
}

fn gallery_for<'a>(
    q: &QueryRecord,
    size: usize,
    positives: impl Iterator<Item = &'a ImageId>,
    eligible: &[&'a ImageId],
    identity_images: &BTreeMap<&IdentityId, BTreeSet<&'a ImageId>>,
    mut rng: SplitMix64,
) -> Result<Vec<ImageId>, IngestError> {
    let source = &q.crop_ref.image_id;
    let mut pos: Vec<&ImageId> = positives.filter(|&i| i != source).collect();
    if pos.is_empty() {
        return Err(IngestError::NoPositiveImage(q.identity_id.clone()));
    }
    if pos.len() > size.saturating_sub(1).max(1) {
        let keep = size.saturating_sub(1).max(1);
        let idx = rng.sample_indices(pos.len(), keep);
        pos = idx.into_iter().map(|i| pos[i]).collect();
    }
    let own: &BTreeSet<&ImageId> = &identity_images[&q.identity_id];
    let distractors: Vec<&ImageId> = eligible.iter().copied().filter(|i| !own.contains(i) && *i != source).collect();
    let needed = size - pos.len();
    if needed > distractors.len() {
        return Err(IngestError::GalleryTooLarge {
            size,
            query: q.query_id.clone(),
            needed,
            available: distractors.len(),
        });
    }
    let idx = rng.sample_indices(distractors.len(), needed);
    let mut out: Vec<ImageId> = pos.into_iter().chain(idx.into_iter().map(|i| distractors[i])).cloned().collect();
    out.sort();
    Ok(out)
}
