//! Shared domain types: identifiers, boxes, annotations, tokens and split manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::mask::{bbox_of_mask, BinaryMask, MaskError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid box [{x}, {y}, {w}, {h}]: width/height must be > 0 and coordinates finite and non-negative")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("invalid detection confidence {0}")]
    InvalidConfidence(f64),
    #[error("embedding for {owner} has non-finite components")]
    NonFiniteEmbedding { owner: String },
    #[error("embedding for {owner} has zero norm")]
    ZeroEmbedding { owner: String },
    #[error("dangling reference: instance {instance} refers to image {image}, which is not available")]
    DanglingReference { instance: String, image: String },
    #[error("image {0} must have positive width and height")]
    EmptyImage(String),
    #[error("duplicate {kind} id {id}")]
    Duplicate { kind: &'static str, id: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(ImageId);
id_type!(InstanceId);
id_type!(IdentityId);
id_type!(QueryId);

/// Lexicographic byte order of identifiers, so `"img_10" < "img_2"`.
pub fn canonical_ordering<T: Ord + Clone>(items: &[T]) -> Vec<T> {
    let mut v = items.to_vec();
    v.sort();
    v
}

/// Axis-aligned box in pixels: left, top, width, height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, ModelError> {
        let ok = [x, y, w, h].iter().all(|v| v.is_finite()) && x >= 0.0 && y >= 0.0 && w > 0.0 && h > 0.0;
        if !ok {
            return Err(ModelError::InvalidBox { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_array(p: [f64; 4]) -> Result<Self, ModelError> {
        Self::new(p[0], p[1], p[2], p[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// True when `inner` lies within this box grown by `slack` on every side.
    pub fn contains_with_slack(&self, inner: &BBox, slack: f64) -> bool {
        inner.x >= self.x - slack
            && inner.y >= self.y - slack
            && inner.right() <= self.right() + slack
            && inner.bottom() <= self.bottom() + slack
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let a = <[f64; 4]>::deserialize(deserializer)?;
        Self::from_array(a).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    #[serde(rename = "bbox")]
    pub bbox: BBox,
    #[serde(deserialize_with = "de_confidence")]
    pub confidence: f64,
}

fn de_confidence<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let c = f64::deserialize(d)?;
    if !(0.0..=1.0).contains(&c) {
        return Err(serde::de::Error::custom(ModelError::InvalidConfidence(c)));
    }
    Ok(c)
}

impl Detection {
    pub fn new(image_id: impl Into<ImageId>, bbox: BBox, confidence: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(ModelError::InvalidConfidence(confidence));
        }
        Ok(Self { image_id: image_id.into(), bbox, confidence })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub instance_id: InstanceId,
    pub image_id: ImageId,
    pub identity_id: IdentityId,
    pub bbox: BBox,
    pub mask_rle: BinaryMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub width: u32,
    pub height: u32,
    #[serde(skip)]
    pub instances: Vec<InstanceId>,
}

pub const DEFAULT_CONTAINMENT_SLACK: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DimensionMismatch { mask: (u32, u32), image: (u32, u32) },
    MaskOutsideBox { mask_box: BBox, bbox: BBox, slack: f64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks an instance against its owning image record.
pub fn validate_annotation(
    a: &InstanceAnnotation,
    img: &ImageRecord,
    slack: f64,
) -> Result<ValidationReport, ModelError> {
    if a.image_id != img.image_id {
        return Err(ModelError::DanglingReference {
            instance: a.instance_id.0.clone(),
            image: a.image_id.0.clone(),
        });
    }
    let mut violations = Vec::new();
    let dims = (a.mask_rle.width(), a.mask_rle.height());
    if dims != (img.width, img.height) {
        violations.push(Violation::DimensionMismatch { mask: dims, image: (img.width, img.height) });
    }
    if let Some(mask_box) = bbox_of_mask(&a.mask_rle) {
        if !a.bbox.contains_with_slack(&mask_box, slack) {
            violations.push(Violation::MaskOutsideBox { mask_box, bbox: a.bbox, slack });
        }
    }
    Ok(ValidationReport { violations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "QRY")]
    Qry,
    #[serde(rename = "SEG")]
    Seg,
    #[serde(rename = "REJ")]
    Rej,
}

/// A role-tagged dense vector; finite and nonzero by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    role: Role,
    vector: Vec<f64>,
    owner: String,
}

impl TokenEmbedding {
    pub fn new(role: Role, vector: Vec<f64>, owner: impl Into<String>) -> Result<Self, ModelError> {
        let owner = owner.into();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteEmbedding { owner });
        }
        if vector.iter().all(|&v| v == 0.0) {
            return Err(ModelError::ZeroEmbedding { owner });
        }
        Ok(Self { role, vector, owner })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRef {
    pub image_id: ImageId,
    pub instance_id: InstanceId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: QueryId,
    pub identity_id: IdentityId,
    pub crop_ref: CropRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

/// Gallery configuration name for a size, e.g. `TestG100`.
pub fn gallery_name(size: usize) -> String {
    format!("TestG{size}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub rng_algorithm: String,
    #[serde(default)]
    pub gallery_construction: String,
    pub train_ids: BTreeSet<IdentityId>,
    pub test_ids: BTreeSet<IdentityId>,
    pub queries: Vec<QueryRecord>,
    pub galleries: BTreeMap<String, BTreeMap<QueryId, Vec<ImageId>>>,
}

impl SplitManifest {
    pub fn query(&self, id: &QueryId) -> Option<&QueryRecord> {
        self.queries.iter().find(|q| &q.query_id == id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        serde_json::from_str(s).map_err(|e| ModelError::Parse { line: e.line(), message: e.to_string() })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum StoreRecord {
    Image(ImageRecord),
    Instance(InstanceAnnotation),
}

/// In-memory annotation store keyed canonically by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationStore {
    pub images: BTreeMap<ImageId, ImageRecord>,
    pub instances: BTreeMap<InstanceId, InstanceAnnotation>,
}

impl AnnotationStore {
    pub fn insert_image(&mut self, width: u32, height: u32, image_id: impl Into<ImageId>) -> Result<(), ModelError> {
        let image_id = image_id.into();
        if width == 0 || height == 0 {
            return Err(ModelError::EmptyImage(image_id.0));
        }
        if self.images.contains_key(&image_id) {
            return Err(ModelError::Duplicate { kind: "image", id: image_id.0 });
        }
        self.images.insert(image_id.clone(), ImageRecord { image_id, width, height, instances: Vec::new() });
        Ok(())
    }

    pub fn insert_instance(&mut self, inst: InstanceAnnotation) -> Result<(), ModelError> {
        if self.instances.contains_key(&inst.instance_id) {
            return Err(ModelError::Duplicate { kind: "instance", id: inst.instance_id.0 });
        }
        let img = self.images.get_mut(&inst.image_id).ok_or_else(|| ModelError::DanglingReference {
            instance: inst.instance_id.0.clone(),
            image: inst.image_id.0.clone(),
        })?;
        img.instances.push(inst.instance_id.clone());
        img.instances.sort();
        self.instances.insert(inst.instance_id.clone(), inst);
        Ok(())
    }

    /// Instances grouped by identity, each list in canonical instance order.
    pub fn by_identity(&self) -> BTreeMap<IdentityId, Vec<&InstanceAnnotation>> {
        let mut m: BTreeMap<IdentityId, Vec<&InstanceAnnotation>> = BTreeMap::new();
        for inst in self.instances.values() {
            m.entry(inst.identity_id.clone()).or_default().push(inst);
        }
        m
    }

    pub fn instances_in(&self, image: &ImageId) -> impl Iterator<Item = &InstanceAnnotation> {
        self.images
            .get(image)
            .into_iter()
            .flat_map(|img| img.instances.iter())
            .filter_map(|id| self.instances.get(id))
    }

    pub fn identities_in(&self, image: &ImageId) -> BTreeSet<IdentityId> {
        self.instances_in(image).map(|i| i.identity_id.clone()).collect()
    }

    /// Union of every mask of `identity` inside `image`, `None` when absent.
    pub fn identity_mask(&self, image: &ImageId, identity: &IdentityId) -> Result<Option<BinaryMask>, MaskError> {
        let mut acc: Option<BinaryMask> = None;
        for inst in self.instances_in(image).filter(|i| &i.identity_id == identity) {
            acc = Some(match acc {
                None => inst.mask_rle.clone(),
                Some(m) => m.union(&inst.mask_rle)?,
            });
        }
        Ok(acc)
    }

    /// Runs `validate_annotation` on every instance.
    pub fn validate(&self, slack: f64) -> Result<Vec<(InstanceId, ValidationReport)>, ModelError> {
        let mut out = Vec::new();
        for inst in self.instances.values() {
            let img = self.images.get(&inst.image_id).ok_or_else(|| ModelError::DanglingReference {
                instance: inst.instance_id.0.clone(),
                image: inst.image_id.0.clone(),
            })?;
            let rep = validate_annotation(inst, img, slack)?;
            if !rep.is_ok() {
                out.push((inst.instance_id.clone(), rep));
            }
        }
        Ok(out)
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, ModelError> {
        let mut images = Vec::new();
        let mut instances = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StoreRecord = serde_json::from_str(&line)
                .map_err(|e| ModelError::Parse { line: i + 1, message: e.to_string() })?;
            match rec {
                StoreRecord::Image(img) => images.push((i + 1, img)),
                StoreRecord::Instance(inst) => instances.push((i + 1, inst)),
            }
        }
        let mut store = Self::default();
        for (line, img) in images {
            store
                .insert_image(img.width, img.height, img.image_id)
                .map_err(|e| ModelError::Parse { line, message: e.to_string() })?;
        }
        for (line, inst) in instances {
            store.insert_instance(inst).map_err(|e| ModelError::Parse { line, message: e.to_string() })?;
        }
        Ok(store)
    }

    /// Images first, then instances, both in canonical id order.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), ModelError> {
        for img in self.images.values() {
            let line = serde_json::to_string(&StoreRecord::Image(img.clone())).expect("serializable");
            writeln!(w, "{line}")?;
        }
        for inst in self.instances.values() {
            let line = serde_json::to_string(&StoreRecord::Instance(inst.clone())).expect("serializable");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: &str, w: u32, h: u32) -> ImageRecord {
        ImageRecord { image_id: id.into(), width: w, height: h, instances: vec![] }
    }

    fn instance(mask: BinaryMask, bbox: BBox) -> InstanceAnnotation {
        InstanceAnnotation {
            instance_id: "i0".into(),
            image_id: "img".into(),
            identity_id: "p0".into(),
            bbox,
            mask_rle: mask,
            description: None,
        }
    }

    #[test]
    fn consistent_annotation_ok() {
        let mask = BinaryMask::from_fn(10, 10, |_, _| true).unwrap();
        let a = instance(mask, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        assert!(validate_annotation(&a, &image("img", 10, 10), 2.0).unwrap().is_ok());
    }

    #[test]
    fn dimension_mismatch_reported() {
        let mask = BinaryMask::from_fn(8, 8, |_, _| true).unwrap();
        let a = instance(mask, BBox::new(0.0, 0.0, 8.0, 8.0).unwrap());
        let rep = validate_annotation(&a, &image("img", 10, 10), 2.0).unwrap();
        assert_eq!(rep.violations, vec![Violation::DimensionMismatch { mask: (8, 8), image: (10, 10) }]);
    }

    #[test]
    fn containment_violation_matches_pixel_scan() {
        // Box covers columns 2..6; foreground reaches column 10, 5 px past the right edge.
        let mask = BinaryMask::from_fn(16, 16, |x, y| (2..=10).contains(&x) && (2..6).contains(&y)).unwrap();
        let bbox = BBox::new(2.0, 2.0, 4.0, 4.0).unwrap();
        let decoded = crate::mask::rle_decode(&mask);
        let max_fg_x = (0..256).filter(|&i| decoded[i]).map(|i| i % 16).max().unwrap() as f64;
        let outside = max_fg_x + 1.0 - bbox.right();
        assert_eq!(outside, 5.0);
        let rep = validate_annotation(&instance(mask, bbox), &image("img", 16, 16), 2.0).unwrap();
        assert!(matches!(rep.violations.as_slice(), [Violation::MaskOutsideBox { .. }]));
    }

    #[test]
    fn dangling_reference() {
        let mask = BinaryMask::empty(4, 4).unwrap();
        let a = instance(mask, BBox::new(0.0, 0.0, 1.0, 1.0).unwrap());
        assert!(matches!(
            validate_annotation(&a, &image("other", 4, 4), 2.0),
            Err(ModelError::DanglingReference { .. })
        ));
    }

    #[test]
    fn validation_is_pure() {
        let mask = BinaryMask::from_fn(6, 6, |x, _| x > 3).unwrap();
        let a = instance(mask, BBox::new(0.0, 0.0, 2.0, 2.0).unwrap());
        let img = image("img", 6, 6);
        let before = a.clone();
        assert_eq!(validate_annotation(&a, &img, 2.0).unwrap(), validate_annotation(&a, &img, 2.0).unwrap());
        assert_eq!(a, before);
    }

    #[test]
    fn canonical_ordering_examples() {
        assert_eq!(canonical_ordering(&["b", "a"]), vec!["a", "b"]);
        assert_eq!(canonical_ordering::<&str>(&[]), Vec::<&str>::new());
        assert_eq!(canonical_ordering(&["img_10", "img_2"]), vec!["img_10", "img_2"]);
    }

    #[test]
    fn bbox_invariants() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(-1.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn token_invariants() {
        assert!(TokenEmbedding::new(Role::Qry, vec![0.0, 0.0], "q").is_err());
        assert!(TokenEmbedding::new(Role::Seg, vec![f64::INFINITY], "q").is_err());
        assert_eq!(TokenEmbedding::new(Role::Rej, vec![0.0, 2.0], "g").unwrap().dim(), 2);
    }

    #[test]
    fn store_roundtrip() {
        let text = concat!(
            r#"{"kind":"image","image_id":"img_1","width":4,"height":4}"#, "\n",
            r#"{"kind":"instance","instance_id":"a","image_id":"img_1","identity_id":"p","bbox":[0,0,2,2],"mask_rle":"4x4:0,2,2,2,10","description":"red coat"}"#, "\n",
        );
        let store = AnnotationStore::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(store.images[&ImageId::from("img_1")].instances, vec![InstanceId::from("a")]);
        let mut out = Vec::new();
        store.write_jsonl(&mut out).unwrap();
        let again = AnnotationStore::read_jsonl(out.as_slice()).unwrap();
        assert_eq!(store, again);
    }

    #[test]
    fn store_parse_errors_are_line_numbered() {
        let text = "{\"kind\":\"image\",\"image_id\":\"a\",\"width\":2,\"height\":2}\n{\"kind\":\"instance\"}\n";
        match AnnotationStore::read_jsonl(text.as_bytes()) {
            Err(ModelError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
