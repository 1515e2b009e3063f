//! Decision protocol over provider embeddings: rank, decide SEG/REJ, score.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::metrics::{
    aggregate, effective_decision, score_query, Decision, IouSample, MetricsError, MetricsReport, QueryMetrics,
    RankedGalleryResult, RankedItem,
};
use crate::model::{AnnotationStore, ImageId, ModelError, QueryId, Role, SplitManifest, TokenEmbedding};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const EMBEDDING_MAGIC: [u8; 4] = *b"RFEB";
pub const EMBEDDING_VERSION: u16 = 1;

const FLAG_DECISION: u8 = 1;
const FLAG_MASK: u8 = 2;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("threshold must lie in [0, 2], got {0}")]
    InvalidThreshold(f64),
    #[error("invalid policy {0:?}; expected `provider` or `threshold:<theta>`")]
    InvalidPolicy(String),
    #[error("no query embedding for {0}")]
    MissingQuery(QueryId),
    #[error("no target embedding for query {query}, gallery image {image}")]
    MissingTarget { query: QueryId, image: ImageId },
    #[error("provider mode needs a decision for query {query}, gallery image {image}")]
    MissingDecision { query: QueryId, image: ImageId },
    #[error("embedding for {owner} has dimension {found}, table dimension is {expected}")]
    Dimension { owner: String, expected: usize, found: usize },
    #[error("unknown query {0} in manifest gallery")]
    UnknownQuery(QueryId),
    #[error("manifest has no gallery named {0}")]
    UnknownGallery(String),
    #[error("duplicate entry {0}")]
    Duplicate(String),
    #[error("{} manifest pair(s) without a prediction: {}", .0.len(), format_pairs(.0))]
    MissingPredictions(Vec<(QueryId, ImageId)>),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RetrievalError {
    /// True for malformed or unreadable inputs as opposed to domain failures.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Self::Parse { .. } | Self::Format(_) | Self::Io(_))
    }
}

fn format_pairs(pairs: &[(QueryId, ImageId)]) -> String {
    pairs.iter().map(|(q, i)| format!("{q}/{i}")).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecisionPolicy {
    /// Pass the provider's own SEG/REJ token through.
    Provider,
    /// SEG iff cosine distance <= theta.
    Threshold(f64),
}

impl DecisionPolicy {
    pub fn threshold(theta: f64) -> Result<Self, RetrievalError> {
        if (0.0..=2.0).contains(&theta) {
            Ok(Self::Threshold(theta))
        } else {
            Err(RetrievalError::InvalidThreshold(theta))
        }
    }
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        Self::Threshold(DEFAULT_THRESHOLD)
    }
}

impl std::fmt::Display for DecisionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Provider => f.write_str("provider"),
            Self::Threshold(t) => write!(f, "threshold:{t}"),
        }
    }
}

impl std::str::FromStr for DecisionPolicy {
    type Err = RetrievalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "provider" {
            return Ok(Self::Provider);
        }
        let theta = s
            .strip_prefix("threshold:")
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| RetrievalError::InvalidPolicy(s.to_string()))?;
        Self::threshold(theta)
    }
}

pub fn decide_by_distance(distance: f64, theta: f64) -> Decision {
    if distance <= theta {
        Decision::Seg
    } else {
        Decision::Rej
    }
}

/// `1 - cos(u, v)` without gradient bookkeeping.
pub fn cosine_distance_value(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (1.0 - dot / (nu * nv)).clamp(0.0, 2.0)
}

/// Returns the decision and the ranking score `1 - distance`.
pub fn decide(
    query: &TokenEmbedding,
    target: &TokenEmbedding,
    policy: DecisionPolicy,
    provider_decision: Option<Decision>,
) -> Result<(Decision, f64), RetrievalError> {
    if query.dim() != target.dim() {
        return Err(RetrievalError::Dimension {
            owner: target.owner().to_string(),
            expected: query.dim(),
            found: target.dim(),
        });
    }
    let d = cosine_distance_value(query.vector(), target.vector());
    let decision = match policy {
        DecisionPolicy::Threshold(t) => decide_by_distance(d, t),
        DecisionPolicy::Provider => provider_decision.ok_or_else(|| {
            let (q, i) = target.owner().split_once('\t').unwrap_or(("", target.owner()));
            RetrievalError::MissingDecision { query: q.into(), image: i.into() }
        })?,
    };
    Ok((decision, 1.0 - d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetEntry {
    pub embedding: TokenEmbedding,
    pub decision: Option<Decision>,
    pub mask: Option<BinaryMask>,
}

/// Query `[QRY]` embeddings and gallery target embeddings. A target is looked up
/// per `(query, image)` pair first, then as a shared per-image entry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub queries: BTreeMap<QueryId, TokenEmbedding>,
    pub pairs: BTreeMap<(QueryId, ImageId), TargetEntry>,
    pub shared: BTreeMap<ImageId, TargetEntry>,
}

fn pair_owner(q: &QueryId, img: &ImageId) -> String {
    format!("{q}\t{img}")
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Default::default() }
    }

    fn check_dim(&mut self, e: &TokenEmbedding) -> Result<(), RetrievalError> {
        if self.dim == 0 && self.is_empty() {
            self.dim = e.dim();
        }
        if e.dim() != self.dim {
            return Err(RetrievalError::Dimension { owner: e.owner().to_string(), expected: self.dim, found: e.dim() });
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty() && self.pairs.is_empty() && self.shared.is_empty()
    }

    pub fn len(&self) -> usize {
        self.queries.len() + self.pairs.len() + self.shared.len()
    }

    pub fn insert_query(&mut self, id: QueryId, vector: Vec<f64>) -> Result<(), RetrievalError> {
        let e = TokenEmbedding::new(Role::Qry, vector, id.as_str())?;
        self.check_dim(&e)?;
        if self.queries.insert(id.clone(), e).is_some() {
            return Err(RetrievalError::Duplicate(format!("query {id}")));
        }
        Ok(())
    }

    pub fn insert_pair(
        &mut self,
        query: QueryId,
        image: ImageId,
        vector: Vec<f64>,
        decision: Option<Decision>,
        mask: Option<BinaryMask>,
    ) -> Result<(), RetrievalError> {
        let role = decision.map_or(Role::Seg, role_of);
        let e = TokenEmbedding::new(role, vector, pair_owner(&query, &image))?;
        self.check_dim(&e)?;
        let key = (query, image);
        if self.pairs.contains_key(&key) {
            return Err(RetrievalError::Duplicate(format!("target {}/{}", key.0, key.1)));
        }
        self.pairs.insert(key, TargetEntry { embedding: e, decision, mask });
        Ok(())
    }

    pub fn insert_shared(
        &mut self,
        image: ImageId,
        vector: Vec<f64>,
        decision: Option<Decision>,
        mask: Option<BinaryMask>,
    ) -> Result<(), RetrievalError> {
        let role = decision.map_or(Role::Seg, role_of);
        let e = TokenEmbedding::new(role, vector, image.as_str())?;
        self.check_dim(&e)?;
        if self.shared.contains_key(&image) {
            return Err(RetrievalError::Duplicate(format!("target {image}")));
        }
        self.shared.insert(image, TargetEntry { embedding: e, decision, mask });
        Ok(())
    }

    pub fn target(&self, query: &QueryId, image: &ImageId) -> Option<&TargetEntry> {
        self.pairs.get(&(query.clone(), image.clone())).or_else(|| self.shared.get(image))
    }

    /// Little-endian: magic, version u16, dim u32, count u64, then entries
    /// (queries, shared targets, per-pair targets, each in id order).
    pub fn write_binary(&self, mut w: impl Write) -> Result<(), RetrievalError> {
        w.write_all(&EMBEDDING_MAGIC)?;
        w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for e in self.queries.values() {
            write_entry(&mut w, 0, e.owner(), None, None, e.vector())?;
        }
        for t in self.shared.values().chain(self.pairs.values()) {
            write_entry(&mut w, 1, t.embedding.owner(), t.decision, t.mask.as_ref(), t.embedding.vector())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if magic != EMBEDDING_MAGIC {
            return Err(RetrievalError::Format("bad magic; expected RFEB".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != EMBEDDING_VERSION {
            return Err(RetrievalError::Format(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let count = u64::from_le_bytes(read_array(&mut r)?);
        let mut table = Self::new(dim);
        for _ in 0..count {
            let role = read_array::<1>(&mut r)?[0];
            let owner = read_string(&mut r)?;
            let flags = read_array::<1>(&mut r)?[0];
            let decision_byte = read_array::<1>(&mut r)?[0];
            let mask_str = read_string(&mut r)?;
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                vector.push(f64::from(f32::from_le_bytes(read_array(&mut r)?)));
            }
            let decision = if flags & FLAG_DECISION != 0 {
                Some(match decision_byte {
                    0 => Decision::Rej,
                    1 => Decision::Seg,
                    b => return Err(RetrievalError::Format(format!("bad decision byte {b} for {owner}"))),
                })
            } else {
                None
            };
            let mask = if flags & FLAG_MASK != 0 {
                Some(mask_str.parse::<BinaryMask>().map_err(|e| RetrievalError::Format(format!("{owner}: {e}")))?)
            } else {
                None
            };
            match role {
                0 => table.insert_query(owner.into(), vector)?,
                1 => match owner.split_once('\t') {
                    Some((q, img)) => table.insert_pair(q.into(), img.into(), vector, decision, mask)?,
                    None => table.insert_shared(owner.into(), vector, decision, mask)?,
                },
                b => return Err(RetrievalError::Format(format!("bad role byte {b} for {owner}"))),
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(RetrievalError::Format("trailing bytes after last entry".into()));
        }
        Ok(table)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), RetrievalError> {
        for (id, e) in &self.queries {
            let rec = JsonEntry {
                role: "QRY".into(),
                query_id: Some(id.clone()),
                gallery_image_id: None,
                decision: None,
                mask_rle: None,
                vector_b64: encode_vector(e.vector()),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("serializable"))?;
        }
        let targets = self
            .shared
            .iter()
            .map(|(img, t)| (None, img, t))
            .chain(self.pairs.iter().map(|((q, img), t)| (Some(q.clone()), img, t)));
        for (q, img, t) in targets {
            let rec = JsonEntry {
                role: "TGT".into(),
                query_id: q,
                gallery_image_id: Some(img.clone()),
                decision: t.decision,
                mask_rle: t.mask.clone(),
                vector_b64: encode_vector(t.embedding.vector()),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("serializable"))?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, RetrievalError> {
        let mut table = Self::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |message: String| RetrievalError::Parse { line: i + 1, message };
            let rec: JsonEntry = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
            let vector = decode_vector(&rec.vector_b64).map_err(parse)?;
            let res = match (rec.role.as_str(), rec.query_id, rec.gallery_image_id) {
                ("QRY", Some(q), None) => table.insert_query(q, vector),
                ("TGT", Some(q), Some(img)) => table.insert_pair(q, img, vector, rec.decision, rec.mask_rle),
                ("TGT", None, Some(img)) => table.insert_shared(img, vector, rec.decision, rec.mask_rle),
                (role, ..) => Err(parse(format!("bad entry for role {role:?}"))),
            };
            res.map_err(|e| match e {
                RetrievalError::Parse { .. } => e,
                other => parse(other.to_string()),
            })?;
        }
        Ok(table)
    }

    /// Binary when the bytes start with the magic, JSON-Lines otherwise.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        if bytes.starts_with(&EMBEDDING_MAGIC) {
            Self::read_binary(bytes)
        } else {
            Self::read_jsonl(bytes)
        }
    }
}

fn role_of(d: Decision) -> Role {
    match d {
        Decision::Seg => Role::Seg,
        Decision::Rej => Role::Rej,
    }
}

#[derive(Serialize, Deserialize)]
struct JsonEntry {
    role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_id: Option<QueryId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gallery_image_id: Option<ImageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    decision: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_rle: Option<BinaryMask>,
    vector_b64: String,
}

fn encode_vector(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_vector(s: &str) -> Result<Vec<f64>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("vector_b64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("vector_b64 holds {} bytes, not a multiple of 4", bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect())
}

fn write_entry(
    w: &mut impl Write,
    role: u8,
    owner: &str,
    decision: Option<Decision>,
    mask: Option<&BinaryMask>,
    vector: &[f64],
) -> Result<(), RetrievalError> {
    w.write_all(&[role])?;
    write_string(w, owner)?;
    let flags = if decision.is_some() { FLAG_DECISION } else { 0 } | if mask.is_some() { FLAG_MASK } else { 0 };
    w.write_all(&[flags, u8::from(decision == Some(Decision::Seg))])?;
    write_string(w, &mask.map(ToString::to_string).unwrap_or_default())?;
    for &x in vector {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

fn write_string(w: &mut impl Write, s: &str) -> Result<(), RetrievalError> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), RetrievalError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => RetrievalError::Format("truncated file".into()),
        _ => RetrievalError::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], RetrievalError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_string(r: &mut impl Read) -> Result<String, RetrievalError> {
    let len = u32::from_le_bytes(read_array(r)?) as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| RetrievalError::Format("owner id is not UTF-8".into()))
}

/// Scores and orders every gallery image for one query.
pub fn rank_gallery(
    query_id: &QueryId,
    gallery: &[ImageId],
    table: &EmbeddingTable,
    policy: DecisionPolicy,
    min_px: u64,
) -> Result<RankedGalleryResult, RetrievalError> {
    let q = table.queries.get(query_id).ok_or_else(|| RetrievalError::MissingQuery(query_id.clone()))?;
    let mut items = Vec::with_capacity(gallery.len());
    for img in gallery {
        let t = table
            .target(query_id, img)
            .ok_or_else(|| RetrievalError::MissingTarget { query: query_id.clone(), image: img.clone() })?;
        let (decision, score) = decide(q, &t.embedding, policy, t.decision).map_err(|e| match e {
            RetrievalError::MissingDecision { .. } => {
                RetrievalError::MissingDecision { query: query_id.clone(), image: img.clone() }
            }
            other => other,
        })?;
        items.push(RankedItem { gallery_image_id: img.clone(), score, decision, predicted_mask: t.mask.clone() });
    }
    Ok(RankedGalleryResult::new(query_id.clone(), items, min_px))
}

/// One JSON-Lines record of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: QueryId,
    pub gallery_image_id: ImageId,
    pub score: f64,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<BinaryMask>,
}

pub fn write_predictions(mut w: impl Write, preds: &[Prediction]) -> Result<(), RetrievalError> {
    for p in preds {
        writeln!(w, "{}", serde_json::to_string(p).expect("serializable"))?;
    }
    Ok(())
}

pub fn read_predictions(r: impl BufRead) -> Result<Vec<Prediction>, RetrievalError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction =
            serde_json::from_str(&line).map_err(|e| RetrievalError::Parse { line: i + 1, message: e.to_string() })?;
        if !p.score.is_finite() {
            return Err(RetrievalError::Parse { line: i + 1, message: "score must be finite".into() });
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutput {
    pub reports: BTreeMap<String, MetricsReport>,
    /// Unique `(query, image)` pairs across the evaluated galleries, in id order.
    pub predictions: Vec<Prediction>,
}

fn selected<'a>(manifest: &'a SplitManifest, galleries: Option<&[String]>) -> Result<Vec<&'a String>, RetrievalError> {
    match galleries {
        None => Ok(manifest.galleries.keys().collect()),
        Some(names) => names
            .iter()
            .map(|n| {
                manifest.galleries.get_key_value(n).map(|(k, _)| k).ok_or_else(|| RetrievalError::UnknownGallery(n.clone()))
            })
            .collect(),
    }
}

fn score_gallery(
    manifest: &SplitManifest,
    results: Vec<RankedGalleryResult>,
    gt: &AnnotationStore,
) -> Result<MetricsReport, RetrievalError> {
    let scored: Vec<(QueryMetrics, Vec<IouSample>)> = results
        .par_iter()
        .map(|r| {
            let q = manifest.query(&r.query_id).ok_or_else(|| RetrievalError::UnknownQuery(r.query_id.clone()))?;
            Ok(score_query(r, &q.identity_id, gt)?)
        })
        .collect::<Result<_, RetrievalError>>()?;
    let galleries = scored.len();
    let (queries, samples): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    Ok(aggregate(queries, samples.into_iter().flatten().collect(), galleries)?)
}

/// Ranks, decides and scores every query of each selected gallery configuration.
pub fn run_protocol(
    manifest: &SplitManifest,
    table: &EmbeddingTable,
    policy: DecisionPolicy,
    gt: &AnnotationStore,
    galleries: Option<&[String]>,
    min_px: u64,
) -> Result<ProtocolOutput, RetrievalError> {
    let mut reports = BTreeMap::new();
    let mut preds: BTreeMap<(QueryId, ImageId), Prediction> = BTreeMap::new();
    for name in selected(manifest, galleries)? {
        let lists: Vec<(&QueryId, &Vec<ImageId>)> = manifest.galleries[name].iter().collect();
        let results: Vec<RankedGalleryResult> = lists
            .par_iter()
            .map(|(q, imgs)| rank_gallery(q, imgs, table, policy, min_px))
            .collect::<Result<_, _>>()?;
        for r in &results {
            for it in &r.items {
                preds.entry((r.query_id.clone(), it.gallery_image_id.clone())).or_insert_with(|| Prediction {
                    query_id: r.query_id.clone(),
                    gallery_image_id: it.gallery_image_id.clone(),
                    score: it.score,
                    decision: it.decision,
                    mask_rle: it.predicted_mask.clone(),
                });
            }
        }
        reports.insert(name.clone(), score_gallery(manifest, results, gt)?);
    }
    Ok(ProtocolOutput { reports, predictions: preds.into_values().collect() })
}

/// Scores an existing predictions file against the manifest galleries.
pub fn evaluate_predictions(
    manifest: &SplitManifest,
    predictions: &[Prediction],
    gt: &AnnotationStore,
    galleries: Option<&[String]>,
    min_px: u64,
) -> Result<BTreeMap<String, MetricsReport>, RetrievalError> {
    let mut index: BTreeMap<(&QueryId, &ImageId), &Prediction> = BTreeMap::new();
    for p in predictions {
        if index.insert((&p.query_id, &p.gallery_image_id), p).is_some() {
            return Err(RetrievalError::Duplicate(format!("prediction {}/{}", p.query_id, p.gallery_image_id)));
        }
    }
    let names = selected(manifest, galleries)?;
    let missing: Vec<(QueryId, ImageId)> = names
        .iter()
        .flat_map(|n| manifest.galleries[*n].iter())
        .flat_map(|(q, imgs)| imgs.iter().map(move |i| (q, i)))
        .filter(|(q, i)| !index.contains_key(&(*q, *i)))
        .map(|(q, i)| (q.clone(), i.clone()))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(RetrievalError::MissingPredictions(missing));
    }
    let mut reports = BTreeMap::new();
    for name in names {
        let results = manifest.galleries[name]
            .iter()
            .map(|(q, imgs)| {
                let items = imgs
                    .iter()
                    .map(|i| {
                        let p = index[&(q, i)];
                        RankedItem {
                            gallery_image_id: i.clone(),
                            score: p.score,
                            decision: effective_decision(p.decision, p.mask_rle.as_ref(), min_px),
                            predicted_mask: p.mask_rle.clone(),
                        }
                    })
                    .collect();
                RankedGalleryResult::new(q.clone(), items, min_px)
            })
            .collect();
        reports.insert(name.clone(), score_gallery(manifest, results, gt)?);
    }
    Ok(reports)
}
