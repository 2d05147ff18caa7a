//! Similar-case index: recommendation-head embeddings of stored slices,
//! scanned exhaustively by Euclidean distance.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ducn::{euclidean_distance, DuCNModel, InputStack, Prediction};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::ntf;
use crate::phantom::{ClassLabel, SliceRecord};
use crate::tensor::Tensor;

pub const ENTRIES_FILE: &str = "entries.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.ntf";
pub const META_FILE: &str = "meta.json";

const UNIT_NORM_TOLERANCE: f32 = 1e-4;

/// Which slices enter the index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexScope {
    /// Confirmed (NCP) cases only.
    #[default]
    NcpOnly,
    All,
}

impl FromStr for IndexScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncp_only" => Ok(IndexScope::NcpOnly),
            "all" => Ok(IndexScope::All),
            other => Err(Error::Config(format!("unknown index scope {other:?} (expected ncp_only or all)"))),
        }
    }
}

/// Slice identity; the derived order is the retrieval tie-break.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CaseId {
    pub patient_id: String,
    pub scan_id: String,
    pub slice_id: String,
}

impl CaseId {
    pub fn of(record: &SliceRecord) -> Self {
        Self {
            patient_id: record.patient_id.clone(),
            scan_id: record.scan_id.clone(),
            slice_id: record.slice_id.clone(),
        }
    }
}

impl std::fmt::Display for CaseId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.patient_id, self.scan_id, self.slice_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    #[serde(flatten)]
    pub id: CaseId,
    pub label: ClassLabel,
    #[serde(skip)]
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub rank: usize,
    pub entry: IndexEntry,
    pub distance: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub recommendations: Vec<Recommendation>,
    /// Set when fewer than the requested `k` candidates exist.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexMeta {
    manifest_hash: String,
    scope: IndexScope,
    dim: usize,
    count: usize,
}

/// An immutable set of unit-norm embeddings with unique identities.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
    scope: IndexScope,
    manifest_hash: String,
}

impl EmbeddingIndex {
    pub fn new(entries: Vec<IndexEntry>, scope: IndexScope, manifest_hash: String) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.embedding.len());
        let mut ids = std::collections::BTreeSet::new();
        for e in &entries {
            if e.embedding.len() != dim {
                return Err(Error::Domain(format!("entry {} has dimension {}, expected {dim}", e.id, e.embedding.len())));
            }
            let norm = e.embedding.iter().map(|v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::Domain(format!("entry {} has norm {norm}, expected 1", e.id)));
            }
            if !ids.insert(&e.id) {
                return Err(Error::Data(format!("duplicate index entry {}", e.id)));
            }
        }
        Ok(Self {
            entries,
            dim,
            scope,
            manifest_hash,
        })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scope(&self) -> IndexScope {
        self.scope
    }

    pub fn manifest_hash(&self) -> &str {
        &self.manifest_hash
    }

    pub fn get(&self, id: &CaseId) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| &e.id == id)
    }

    pub fn query_topk(&self, query: &[f32], k: usize, exclude_self: Option<&CaseId>) -> Result<QueryResult> {
        top_k(&self.entries, query, k, exclude_self)
    }

    /// Writes the identity list, the `n × dim` embedding matrix and metadata.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut lines = Vec::new();
        for e in &self.entries {
            lines.extend(serde_json::to_vec(e)?);
            lines.push(b'\n');
        }
        let data: Vec<f32> = self.entries.iter().flat_map(|e| e.embedding.iter().copied()).collect();
        let matrix = Tensor::new(vec![self.entries.len(), self.dim], data)?;
        ntf::write_f32(&dir.join(EMBEDDINGS_FILE), &matrix)?;
        fsutil::write_atomic(&dir.join(ENTRIES_FILE), &lines)?;
        fsutil::write_json(
            &dir.join(META_FILE),
            &IndexMeta {
                manifest_hash: self.manifest_hash.clone(),
                scope: self.scope,
                dim: self.dim,
                count: self.entries.len(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: IndexMeta = fsutil::read_json(&dir.join(META_FILE))?;
        let entries_path = dir.join(ENTRIES_FILE);
        let text = fsutil::read_to_string(&entries_path)?;
        let mut entries: Vec<IndexEntry> = Vec::with_capacity(meta.count);
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            entries.push(
                serde_json::from_str(line).map_err(|e| Error::format(&entries_path, format!("line {}: {e}", i + 1)))?,
            );
        }
        let emb_path = dir.join(EMBEDDINGS_FILE);
        let matrix = ntf::read_f32(&emb_path)?;
        if matrix.shape() != [meta.count, meta.dim] || entries.len() != meta.count {
            return Err(Error::format(
                &emb_path,
                format!(
                    "{} entries and a {:?} matrix do not match {} × {}",
                    entries.len(),
                    matrix.shape(),
                    meta.count,
                    meta.dim
                ),
            ));
        }
        for (e, row) in entries.iter_mut().zip(matrix.data().chunks_exact(meta.dim.max(1))) {
            e.embedding = row.to_vec();
        }
        let mut index = Self::new(entries, meta.scope, meta.manifest_hash)?;
        index.dim = meta.dim;
        Ok(index)
    }
}

fn by_distance_then_id(a: &(f32, &IndexEntry), b: &(f32, &IndexEntry)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id))
}

/// Exact top-`k` scan over arbitrary entries: ascending distance, ties broken
/// by identity. Asking for more than are available returns them all with
/// `truncated` set.
pub fn top_k(entries: &[IndexEntry], query: &[f32], k: usize, exclude_self: Option<&CaseId>) -> Result<QueryResult> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let mut scored = Vec::with_capacity(entries.len());
    for e in entries {
        if exclude_self == Some(&e.id) {
            continue;
        }
        scored.push((euclidean_distance(&e.embedding, query)?, e));
    }
    let truncated = k > scored.len();
    if !truncated && k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_distance_then_id);
        scored.truncate(k);
    }
    scored.sort_by(by_distance_then_id);
    if truncated {
        log::warn!("requested {k} neighbours but only {} candidates exist", scored.len());
    }
    Ok(QueryResult {
        recommendations: scored
            .into_iter()
            .enumerate()
            .map(|(i, (distance, entry))| Recommendation {
                rank: i + 1,
                entry: entry.clone(),
                distance,
            })
            .collect(),
        truncated,
    })
}

/// Embeds every in-scope slice with the recommendation head.
pub fn build_index(
    model: &DuCNModel,
    records: &[&SliceRecord],
    stacks: &[&InputStack],
    scope: IndexScope,
    manifest_hash: &str,
) -> Result<EmbeddingIndex> {
    if records.len() != stacks.len() {
        return Err(Error::Data(format!("{} records but {} input stacks", records.len(), stacks.len())));
    }
    let keep: Vec<usize> = (0..records.len())
        .filter(|&i| scope == IndexScope::All || records[i].label == ClassLabel::NCP)
        .collect();
    let selected: Vec<&InputStack> = keep.iter().map(|&i| stacks[i]).collect();
    let embeddings = model.forward_recommend(&selected)?;
    let entries = keep
        .iter()
        .zip(embeddings)
        .map(|(&i, embedding)| IndexEntry {
            id: CaseId::of(records[i]),
            label: records[i].label,
            embedding,
        })
        .collect();
    EmbeddingIndex::new(entries, scope, manifest_hash.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendOutcome {
    pub prediction: Prediction,
    /// Present only when the slice is predicted NCP.
    pub result: Option<QueryResult>,
}

impl RecommendOutcome {
    pub fn render(&self) -> String {
        let mut out = format!(
            "p_ncp {:.4} ({})\n",
            self.prediction.p_ncp,
            if self.prediction.positive { "positive" } else { "negative" }
        );
        let Some(result) = &self.result else {
            out.push_str("no similar cases: slice not predicted NCP\n");
            return out;
        };
        for r in &result.recommendations {
            let _ = writeln!(out, "{:>3}  {:<32} {:<6} {:.6}", r.rank, r.entry.id.to_string(), r.entry.label, r.distance);
        }
        if result.truncated {
            out.push_str("(fewer candidates than requested)\n");
        }
        out
    }
}

/// Returns similar indexed cases for a slice the detection head calls NCP.
pub fn recommend_for_confirmed(
    model: &DuCNModel,
    index: &EmbeddingIndex,
    stack: &InputStack,
    k: usize,
    exclude_self: Option<&CaseId>,
) -> Result<RecommendOutcome> {
    let prediction = model.predict(&[stack])?.remove(0);
    if !prediction.positive {
        return Ok(RecommendOutcome { prediction, result: None });
    }
    let query = model.forward_recommend(&[stack])?.remove(0);
    Ok(RecommendOutcome {
        prediction,
        result: Some(index.query_topk(&query, k, exclude_self)?),
    })
}
