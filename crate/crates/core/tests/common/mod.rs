#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;

use reidkit::mask::{bbox_of_mask, BinaryMask};
use reidkit::metrics::Decision;
use reidkit::model::{AnnotationStore, BBox, CropRef, IdentityId, ImageId, InstanceAnnotation, QueryId, QueryRecord, SplitManifest};
use reidkit::retrieval::Prediction;
use reidkit::rng::{SplitMix64, RNG_ALGORITHM};

pub fn fixtures_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn reference_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/toy_reference.cfg")
}

/// Runs the built binary, returning its exit code and stderr.
pub fn reidkit(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_reidkit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("REIDKIT_OUT_DIR")
        .output()
        .expect("spawn reidkit");
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

/// Every file under `dir`, relative path to bytes.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn image_id(i: usize) -> ImageId {
    format!("img_{i:04}").into()
}

pub fn identity(i: usize) -> IdentityId {
    format!("person_{i:03}").into()
}

/// Row-major pixels: either a random rectangle or sparse noise.
pub fn random_pixels(rng: &mut SplitMix64, w: u32, h: u32) -> Vec<bool> {
    let n = (w * h) as usize;
    match rng.below(3) {
        0 => {
            let p = rng.unit_f64() * 0.5;
            (0..n).map(|_| rng.unit_f64() < p).collect()
        }
        _ => {
            let x0 = rng.below(u64::from(w)) as u32;
            let y0 = rng.below(u64::from(h)) as u32;
            let x1 = x0 + 1 + rng.below(u64::from(w - x0)) as u32;
            let y1 = y0 + 1 + rng.below(u64::from(h - y0)) as u32;
            (0..n).map(|i| {
                let (x, y) = ((i as u32) % w, (i as u32) / w);
                (x0..x1).contains(&x) && (y0..y1).contains(&y)
            })
            .collect()
        }
    }
}

pub fn mask_of(w: u32, h: u32, px: &[bool]) -> BinaryMask {
    BinaryMask::from_pixels(w, h, px).unwrap()
}

pub fn instance(id: &str, image: &ImageId, who: &IdentityId, mask: BinaryMask) -> InstanceAnnotation {
    let bbox = bbox_of_mask(&mask).unwrap_or(BBox::new(0.0, 0.0, 1.0, 1.0).unwrap());
    InstanceAnnotation {
        instance_id: id.into(),
        image_id: image.clone(),
        identity_id: who.clone(),
        bbox,
        mask_rle: mask,
        description: None,
    }
}

pub fn query(qid: &QueryId, who: &IdentityId, image: &ImageId, inst: &str) -> QueryRecord {
    QueryRecord {
        query_id: qid.clone(),
        identity_id: who.clone(),
        crop_ref: CropRef { image_id: image.clone(), instance_id: inst.into() },
        description: None,
    }
}

pub fn manifest(queries: Vec<QueryRecord>, name: &str, galleries: BTreeMap<QueryId, Vec<ImageId>>) -> SplitManifest {
    let test_ids: BTreeSet<IdentityId> = queries.iter().map(|q| q.identity_id.clone()).collect();
    SplitManifest {
        seed: 0,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        gallery_construction: "test".into(),
        train_ids: BTreeSet::new(),
        test_ids,
        queries,
        galleries: BTreeMap::from([(name.to_string(), galleries)]),
    }
}

/// A random evaluation case with its pixel-level truth kept alongside.
pub type Truth = BTreeMap<ImageId, (u32, Vec<(IdentityId, Vec<bool>)>)>;

pub struct Case {
    pub store: AnnotationStore,
    pub manifest: SplitManifest,
    pub predictions: Vec<Prediction>,
    /// Per image: width, and `(identity, pixels)` per instance.
    pub truth: Truth,
    /// Per prediction: the predicted pixels, if a mask was given.
    pub predicted: BTreeMap<(QueryId, ImageId), Option<Vec<bool>>>,
    pub gallery_name: String,
    pub query_identity: BTreeMap<QueryId, IdentityId>,
}

pub fn random_case(seed: u64, max_gallery: usize, max_side: u32) -> Case {
    let mut rng = SplitMix64::derive(seed, "oracle-case");
    let w = 8 + rng.below(u64::from(max_side - 7)) as u32;
    let h = 8 + rng.below(u64::from(max_side - 7)) as u32;
    let n_ids = 1 + rng.below(4) as usize;
    let n_images = 1 + rng.below(max_gallery as u64) as usize;
    let mut store = AnnotationStore::default();
    let mut truth = BTreeMap::new();
    let mut k = 0;
    for i in 0..n_images {
        let img = image_id(i);
        store.insert_image(w, h, img.clone()).unwrap();
        let mut people = Vec::new();
        for _ in 0..rng.below(3) {
            let who = identity(rng.below(n_ids as u64) as usize);
            let px = random_pixels(&mut rng, w, h);
            store.insert_instance(instance(&format!("inst_{k:05}"), &img, &who, mask_of(w, h, &px))).unwrap();
            k += 1;
            people.push((who, px));
        }
        truth.insert(img, (w, people));
    }
    let name = "TestG".to_string();
    let mut queries = Vec::new();
    let mut galleries = BTreeMap::new();
    let mut predictions = Vec::new();
    let mut predicted = BTreeMap::new();
    let mut query_identity = BTreeMap::new();
    for qi in 0..1 + rng.below(3) as usize {
        let qid: QueryId = format!("q_{qi}").into();
        let who = identity(rng.below(n_ids as u64) as usize);
        let mut ids: Vec<usize> = (0..n_images).collect();
        rng.shuffle(&mut ids);
        ids.truncate(1 + rng.below(n_images as u64) as usize);
        let gallery: Vec<ImageId> = ids.iter().map(|&i| image_id(i)).collect();
        for img in &gallery {
            let score = rng.below(6) as f64 / 5.0;
            let decision = if rng.below(4) == 0 { Decision::Rej } else { Decision::Seg };
            let px = match rng.below(4) {
                0 => None,
                1 => {
                    let (_, people) = &truth[img];
                    let mut px = vec![false; (w * h) as usize];
                    for (_, m) in people.iter().filter(|(p, _)| *p == who) {
                        for (a, b) in px.iter_mut().zip(m) {
                            *a |= *b;
                        }
                    }
                    Some(px)
                }
                _ => Some(random_pixels(&mut rng, w, h)),
            };
            predictions.push(Prediction {
                query_id: qid.clone(),
                gallery_image_id: img.clone(),
                score,
                decision,
                mask_rle: px.as_ref().map(|p| mask_of(w, h, p)),
            });
            predicted.insert((qid.clone(), img.clone()), px);
        }
        queries.push(query(&qid, &who, &gallery[0], "inst_00000"));
        galleries.insert(qid.clone(), gallery);
        query_identity.insert(qid, who);
    }
    Case {
        store,
        manifest: manifest(queries, &name, galleries),
        predictions,
        truth,
        predicted,
        gallery_name: name,
        query_identity,
    }
}

/// Pixel-level metrics for a case: `(mAP, [top1, top5, top10], gIoU, cIoU)`.
pub fn brute_force(case: &Case, min_px: usize) -> (f64, [f64; 3], f64, f64) {
    let mut aps = Vec::new();
    let mut hits = [0usize; 3];
    let mut ious = Vec::new();
    let (mut inter_total, mut union_total) = (0usize, 0usize);
    for (qid, gallery) in &case.manifest.galleries[&case.gallery_name] {
        let who = &case.query_identity[qid];
        let mut rows: Vec<&Prediction> = case.predictions.iter().filter(|p| &p.query_id == qid).collect();
        assert_eq!(rows.len(), gallery.len());
        rows.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).unwrap().then(a.gallery_image_id.as_str().cmp(b.gallery_image_id.as_str()))
        });
        let mut relevant = Vec::new();
        let mut positives = 0;
        for p in &rows {
            let (_, people) = &case.truth[&p.gallery_image_id];
            let gt: Option<Vec<bool>> = people.iter().filter(|(id, _)| id == who).fold(None, |acc, (_, m)| {
                Some(match acc {
                    None => m.clone(),
                    Some(a) => a.iter().zip(m).map(|(x, y)| *x || *y).collect(),
                })
            });
            let pred = case.predicted[&(qid.clone(), p.gallery_image_id.clone())].clone();
            let seg = p.decision == Decision::Seg && pred.as_ref().is_some_and(|m| m.iter().filter(|&&b| b).count() >= min_px);
            positives += usize::from(gt.is_some());
            relevant.push(gt.is_some() && seg);
            let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
            match (gt, seg) {
                (Some(g), true) => {
                    let pm = pred.unwrap();
                    let i = g.iter().zip(&pm).filter(|(a, b)| **a && **b).count();
                    let u = g.iter().zip(&pm).filter(|(a, b)| **a || **b).count();
                    ious.push(if u == 0 { 0.0 } else { i as f64 / u as f64 });
                    inter_total += i;
                    union_total += u;
                }
                (Some(g), false) => {
                    ious.push(0.0);
                    union_total += count(&g);
                }
                (None, true) => {
                    ious.push(0.0);
                    union_total += count(&pred.unwrap());
                }
                (None, false) => {}
            }
        }
        if positives == 0 {
            continue;
        }
        let mut found = 0;
        let mut sum = 0.0;
        for (r, &rel) in relevant.iter().enumerate() {
            if rel {
                found += 1;
                sum += found as f64 / (r + 1) as f64;
            }
        }
        aps.push(sum / positives as f64);
        let first = relevant.iter().position(|&r| r);
        for (slot, k) in [1usize, 5, 10].into_iter().enumerate() {
            if first.is_some_and(|f| f < k) {
                hits[slot] += 1;
            }
        }
    }
    let n = aps.len();
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (
        mean(aps.iter().sum(), n),
        hits.map(|h| mean(h as f64, n)),
        mean(ious.iter().sum(), ious.len()),
        if union_total == 0 { 0.0 } else { inter_total as f64 / union_total as f64 },
    )
}
