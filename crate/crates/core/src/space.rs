//! Per-user ADL embedding space and user state estimation.
//!
//! Each class keeps its members, a running centroid, the mean member distance
//! to the centroid and the mean squared distance (the scalar intra-class
//! variance). An observed embedding is scored against the nearest centroid as
//!
//! ```text
//! S = d_min / max(D_k, eps) * 1 / max(var_k, eps)
//! ```
//!
//! Lower is more similar. `S` above the policy's `tau_unseen` marks an unseen
//! ADL; otherwise the class's own history of seen scores decides whether the
//! instance was performed atypically.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{AdlEmbedding, EMBED_DIM};
use crate::motion::{percentile, GateThresholds};

pub type ClassId = u32;

pub const SPACE_FORMAT: &str = "adlsense-space";
pub const SPACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionPolicy {
    pub tau_unseen: f64,
    pub atypical_z: f64,
    pub min_history: usize,
    pub epsilon: f64,
    pub min_class_count: usize,
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        DecisionPolicy {
            tau_unseen: 4.0,
            atypical_z: 2.0,
            min_history: 5,
            epsilon: 1e-6,
            min_class_count: 2,
        }
    }
}

impl DecisionPolicy {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.tau_unseen) || !positive(self.atypical_z) || !positive(self.epsilon) {
            return Err(Error::invalid(
                "policy tau_unseen, atypical_z and epsilon must be positive",
            ));
        }
        if self.min_history < 2 || self.min_class_count == 0 {
            return Err(Error::invalid(
                "policy needs min_history >= 2 and min_class_count >= 1",
            ));
        }
        Ok(())
    }
}

/// Calibrates `tau_unseen` as `margin` times a percentile of held-out scores.
pub fn calibrate_tau(held_out_scores: &[f64], pct: f64, margin: f64) -> Result<f64> {
    if held_out_scores.is_empty() {
        return Err(Error::invalid(
            "no held-out similarity scores to calibrate from",
        ));
    }
    if held_out_scores
        .iter()
        .any(|s| !(s.is_finite() && *s >= 0.0))
    {
        return Err(Error::invalid(
            "similarity scores must be finite and nonnegative",
        ));
    }
    let tau = margin * percentile(held_out_scores, pct);
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "calibrated tau {tau} is not positive"
        )));
    }
    Ok(tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: ClassId,
    pub centroid: Vec<f64>,
    pub count: usize,
    /// Mean Euclidean distance of the members to the centroid.
    pub mean_dist: f64,
    /// Mean squared Euclidean distance of the members to the centroid.
    pub variance: f64,
    #[serde(skip)]
    sum_sq: f64,
}

impl ClassStats {
    fn empty(class_id: ClassId) -> Self {
        ClassStats {
            class_id,
            centroid: vec![0.0; EMBED_DIM],
            count: 0,
            mean_dist: 0.0,
            variance: 0.0,
            sum_sq: 0.0,
        }
    }

    /// Welford step on the centroid and the summed squared deviation.
    fn push(&mut self, e: &AdlEmbedding) {
        self.count += 1;
        let n = self.count as f64;
        let mut sq = 0.0;
        for (c, x) in self.centroid.iter_mut().zip(e.as_slice()) {
            let delta = x - *c;
            *c += delta / n;
            sq += delta * (x - *c);
        }
        self.sum_sq += sq;
        self.variance = self.sum_sq / n;
    }

    fn refresh_mean_dist(&mut self, members: &[AdlEmbedding]) {
        self.mean_dist = if members.is_empty() {
            0.0
        } else {
            members
                .iter()
                .map(|m| m.distance(&self.centroid))
                .sum::<f64>()
                / members.len() as f64
        };
    }

    fn from_members(class_id: ClassId, members: &[AdlEmbedding]) -> Self {
        let mut stats = ClassStats::empty(class_id);
        for m in members {
            stats.push(m);
        }
        stats.refresh_mean_dist(members);
        stats
    }
}

/// Two-pass statistics straight from the members, for consistency checks.
pub fn batch_stats(class_id: ClassId, members: &[AdlEmbedding]) -> ClassStats {
    let n = members.len();
    let mut centroid = vec![0.0; EMBED_DIM];
    for m in members {
        for (c, x) in centroid.iter_mut().zip(m.as_slice()) {
            *c += x;
        }
    }
    if n > 0 {
        centroid.iter_mut().for_each(|c| *c /= n as f64);
    }
    let dists: Vec<f64> = members.iter().map(|m| m.distance(&centroid)).collect();
    let denom = n.max(1) as f64;
    let mean_dist = dists.iter().sum::<f64>() / denom;
    let variance = dists.iter().map(|d| d * d).sum::<f64>() / denom;
    ClassStats {
        class_id,
        centroid,
        count: n,
        mean_dist,
        variance,
        sum_sq: variance * n as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub label: String,
    pub members: Vec<AdlEmbedding>,
    pub stats: ClassStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdlType {
    NonAdl,
    Seen,
    Unseen,
    Atypical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub timestamp: f64,
    pub class_id: ClassId,
    pub s: f64,
    pub adl_type: AdlType,
}

/// Result of scoring an embedding against the nearest centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub s: f64,
    pub class_id: ClassId,
    pub d_min: f64,
    pub mean_dist: f64,
    pub variance: f64,
    pub floored_mean_dist: bool,
    pub floored_variance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub nearest_class: ClassId,
    pub d_min: f64,
    pub mean_dist: f64,
    pub variance: f64,
    pub floored_mean_dist: bool,
    pub floored_variance: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdlDecision {
    pub timestamp: f64,
    pub m_adl: bool,
    pub adl_type: AdlType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_class: Option<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

impl AdlDecision {
    pub fn non_adl(timestamp: f64) -> Self {
        AdlDecision {
            timestamp,
            m_adl: false,
            adl_type: AdlType::NonAdl,
            class_id: None,
            similarity: None,
            head_class: None,
            diagnostics: None,
        }
    }

    /// Checks the field presence rules tied to `adl_type`.
    pub fn validate(&self) -> Result<()> {
        let ok = (self.adl_type == AdlType::NonAdl) == !self.m_adl
            && self.class_id.is_some()
                == matches!(self.adl_type, AdlType::Seen | AdlType::Atypical)
            && self.similarity.is_some() == self.m_adl;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("inconsistent decision {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    pub user_id: String,
    classes: BTreeMap<ClassId, ClassEntry>,
    s_history: Vec<HistoryEntry>,
    pub gate: GateThresholds,
    pub policy: DecisionPolicy,
}

/// Builds a space from labeled embeddings.
pub fn init_space(
    user_id: &str,
    labeled: Vec<(ClassId, AdlEmbedding)>,
    gate: GateThresholds,
    policy: DecisionPolicy,
) -> Result<EmbeddingSpace> {
    EmbeddingSpace::new(user_id, labeled, BTreeMap::new(), gate, policy)
}

impl EmbeddingSpace {
    /// Classes without an entry in `labels` are labeled by their id.
    pub fn new(
        user_id: &str,
        labeled: Vec<(ClassId, AdlEmbedding)>,
        labels: BTreeMap<ClassId, String>,
        gate: GateThresholds,
        policy: DecisionPolicy,
    ) -> Result<Self> {
        policy.validate()?;
        gate.validate()?;
        if labeled.is_empty() {
            return Err(Error::invalid(
                "cannot initialize an embedding space without embeddings",
            ));
        }
        let mut grouped: BTreeMap<ClassId, Vec<AdlEmbedding>> = BTreeMap::new();
        for (c, e) in labeled {
            grouped.entry(c).or_default().push(e);
        }
        let mut classes = BTreeMap::new();
        for (c, members) in grouped {
            let label = labels.get(&c).cloned().unwrap_or_else(|| c.to_string());
            if members.len() < policy.min_class_count {
                return Err(Error::ClassTooSmall {
                    class: format!("{c} ({label})"),
                    count: members.len(),
                    required: policy.min_class_count,
                });
            }
            let stats = ClassStats::from_members(c, &members);
            classes.insert(
                c,
                ClassEntry {
                    label,
                    members,
                    stats,
                },
            );
        }
        Ok(EmbeddingSpace {
            user_id: user_id.to_string(),
            classes,
            s_history: Vec::new(),
            gate,
            policy,
        })
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.keys().copied()
    }

    pub fn class(&self, id: ClassId) -> Option<&ClassEntry> {
        self.classes.get(&id)
    }

    pub fn stats(&self, id: ClassId) -> Option<&ClassStats> {
        self.classes.get(&id).map(|c| &c.stats)
    }

    pub fn labels(&self) -> BTreeMap<ClassId, String> {
        self.classes
            .iter()
            .map(|(id, c)| (*id, c.label.clone()))
            .collect()
    }

    pub fn class_by_label(&self, label: &str) -> Option<ClassId> {
        self.classes
            .iter()
            .find(|(_, c)| c.label == label)
            .map(|(id, _)| *id)
    }

    pub fn set_label(&mut self, id: ClassId, label: &str) -> Result<()> {
        let entry = self
            .classes
            .get_mut(&id)
            .ok_or_else(|| Error::UnknownClass(id.to_string()))?;
        entry.label = label.to_string();
        Ok(())
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.s_history
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Appends an embedding to a class and updates its statistics.
    ///
    /// Unknown classes are created only when `create` is set.
    pub fn add_embedding(
        &mut self,
        class_id: ClassId,
        e: AdlEmbedding,
        create: bool,
    ) -> Result<()> {
        if let std::collections::btree_map::Entry::Vacant(e) = self.classes.entry(class_id) {
            if !create {
                return Err(Error::UnknownClass(class_id.to_string()));
            }
            e.insert(ClassEntry {
                label: class_id.to_string(),
                members: Vec::new(),
                stats: ClassStats::empty(class_id),
            });
        }
        let entry = self.classes.get_mut(&class_id).expect("present");
        entry.stats.push(&e);
        entry.members.push(e);
        entry.stats.refresh_mean_dist(&entry.members);
        Ok(())
    }

    /// Nearest-centroid score; ties go to the lowest class id.
    pub fn similarity(&self, e_o: &AdlEmbedding) -> Result<Similarity> {
        let mut best: Option<(ClassId, f64, &ClassStats)> = None;
        for (id, entry) in &self.classes {
            let d = e_o.distance(&entry.stats.centroid);
            if best.is_none_or(|(_, bd, _)| d < bd) {
                best = Some((*id, d, &entry.stats));
            }
        }
        let (class_id, d_min, stats) =
            best.ok_or_else(|| Error::invalid("embedding space is empty"))?;
        let eps = self.policy.epsilon;
        let mean_dist = stats.mean_dist.max(eps);
        let variance = stats.variance.max(eps);
        Ok(Similarity {
            s: d_min / mean_dist * (1.0 / variance),
            class_id,
            d_min,
            mean_dist: stats.mean_dist,
            variance: stats.variance,
            floored_mean_dist: stats.mean_dist < eps,
            floored_variance: stats.variance < eps,
        })
    }

    /// Mean and sample standard deviation of the prior seen scores of a class.
    pub fn baseline(&self, class_id: ClassId) -> Option<Baseline> {
        let scores: Vec<f64> = self
            .s_history
            .iter()
            .filter(|h| h.class_id == class_id && h.adl_type == AdlType::Seen)
            .map(|h| h.s)
            .collect();
        if scores.len() < 2 {
            return None;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some(Baseline {
            count: scores.len(),
            mean,
            std: var.sqrt(),
        })
    }

    /// Decides against the current state without recording history.
    pub fn evaluate(
        &self,
        m_adl: bool,
        e_o: Option<&AdlEmbedding>,
        head_class: Option<ClassId>,
        now: f64,
    ) -> Result<AdlDecision> {
        if !m_adl {
            return Ok(AdlDecision::non_adl(now));
        }
        let e_o = e_o.ok_or_else(|| Error::invalid("ADL motion decision requires an embedding"))?;
        let sim = self.similarity(e_o)?;
        let mut diagnostics = Diagnostics {
            nearest_class: sim.class_id,
            d_min: sim.d_min,
            mean_dist: sim.mean_dist,
            variance: sim.variance,
            floored_mean_dist: sim.floored_mean_dist,
            floored_variance: sim.floored_variance,
            baseline: None,
        };
        let mut decision = AdlDecision {
            timestamp: now,
            m_adl: true,
            adl_type: AdlType::Unseen,
            class_id: None,
            similarity: Some(sim.s),
            head_class,
            diagnostics: None,
        };
        if sim.s <= self.policy.tau_unseen {
            decision.class_id = Some(sim.class_id);
            decision.adl_type = AdlType::Seen;
            if let Some(b) = self
                .baseline(sim.class_id)
                .filter(|b| b.count >= self.policy.min_history)
            {
                diagnostics.baseline = Some(b);
                if sim.s > b.mean + self.policy.atypical_z * b.std {
                    decision.adl_type = AdlType::Atypical;
                }
            }
        }
        decision.diagnostics = Some(diagnostics);
        Ok(decision)
    }

    /// Decides and records the score of seen and atypical decisions.
    pub fn decide(
        &mut self,
        m_adl: bool,
        e_o: Option<&AdlEmbedding>,
        head_class: Option<ClassId>,
        now: f64,
    ) -> Result<AdlDecision> {
        if let Some(last) = self.s_history.last() {
            if now < last.timestamp {
                return Err(Error::NonMonotoneTimestamp {
                    previous: last.timestamp,
                    current: now,
                });
            }
        }
        let decision = self.evaluate(m_adl, e_o, head_class, now)?;
        if let (Some(class_id), Some(s)) = (decision.class_id, decision.similarity) {
            self.s_history.push(HistoryEntry {
                timestamp: now,
                class_id,
                s,
                adl_type: decision.adl_type,
            });
        }
        Ok(decision)
    }

    fn body(&self) -> SnapshotBody {
        SnapshotBody {
            format: SPACE_FORMAT.into(),
            version: SPACE_VERSION as u64,
            user_id: self.user_id.clone(),
            classes: self
                .classes
                .iter()
                .map(|(id, c)| ClassRecord {
                    id: *id,
                    label: c.label.clone(),
                    members: c.members.clone(),
                })
                .collect(),
            s_history: self.s_history.clone(),
            gate: self.gate,
            policy: self.policy,
        }
    }

    pub fn to_snapshot(&self) -> Result<String> {
        let body = self.body();
        let checksum = checksum(&body)?;
        Ok(serde_json::to_string(&SnapshotFile { body, checksum })?)
    }

    pub fn from_snapshot(text: &str, origin: &Path) -> Result<Self> {
        let corrupt = |e: serde_json::Error| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            reason: format!("corrupted snapshot at column {}: {e}", e.column()),
        };
        let raw: serde_json::Value = serde_json::from_str(text).map_err(corrupt)?;
        let format = raw.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if format != SPACE_FORMAT {
            return Err(Error::Format {
                expected: SPACE_FORMAT.into(),
                found: format.into(),
            });
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != SPACE_VERSION as u64 {
            return Err(Error::Version {
                format: SPACE_FORMAT.into(),
                expected: SPACE_VERSION,
                found: version,
            });
        }
        let file: SnapshotFile = serde_json::from_str(text).map_err(corrupt)?;
        let computed = checksum(&file.body)?;
        if computed != file.checksum {
            return Err(Error::Checksum {
                stored: file.checksum,
                computed,
            });
        }
        let body = file.body;
        body.policy.validate()?;
        body.gate.validate()?;
        let mut classes = BTreeMap::new();
        for rec in body.classes {
            if rec.members.is_empty() {
                return Err(Error::ClassTooSmall {
                    class: format!("{} ({})", rec.id, rec.label),
                    count: 0,
                    required: 1,
                });
            }
            let stats = ClassStats::from_members(rec.id, &rec.members);
            if classes
                .insert(
                    rec.id,
                    ClassEntry {
                        label: rec.label,
                        members: rec.members,
                        stats,
                    },
                )
                .is_some()
            {
                return Err(Error::invalid(format!("class {} appears twice", rec.id)));
            }
        }
        if body
            .s_history
            .windows(2)
            .any(|w| w[1].timestamp < w[0].timestamp)
        {
            return Err(Error::invalid(
                "snapshot history timestamps are not monotone",
            ));
        }
        Ok(EmbeddingSpace {
            user_id: body.user_id,
            classes,
            s_history: body.s_history,
            gate: body.gate,
            policy: body.policy,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_snapshot()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_snapshot(&text, path)
    }
}

pub fn save_space(space: &EmbeddingSpace, path: impl AsRef<Path>) -> Result<()> {
    space.save(path)
}

pub fn load_space(path: impl AsRef<Path>) -> Result<EmbeddingSpace> {
    EmbeddingSpace::load(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassRecord {
    id: ClassId,
    label: String,
    members: Vec<AdlEmbedding>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotBody {
    format: String,
    version: u64,
    user_id: String,
    classes: Vec<ClassRecord>,
    s_history: Vec<HistoryEntry>,
    gate: GateThresholds,
    policy: DecisionPolicy,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotFile {
    #[serde(flatten)]
    body: SnapshotBody,
    checksum: String,
}

fn checksum(body: &SnapshotBody) -> Result<String> {
    let bytes = serde_json::to_vec(body)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_decision_log(path: impl AsRef<Path>, decisions: &[AdlDecision]) -> Result<()> {
    write_lines(path.as_ref(), decisions)
}

pub fn read_decision_log(path: impl AsRef<Path>) -> Result<Vec<AdlDecision>> {
    read_lines(path.as_ref())
}

pub(crate) fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
