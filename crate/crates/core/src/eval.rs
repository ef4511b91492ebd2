//! Evaluation battery: dataset splits, classification metrics, success rates,
//! and the Friedman / McNemar significance tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class marker for samples of activities outside the label registry.
pub const UNSEEN: &str = "unseen";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample_id: String,
    pub subject_id: String,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl LabeledSample {
    pub fn is_unseen(&self) -> bool {
        self.class == UNSEEN
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabeledSample>> {
    let path = path.as_ref();
    let samples: Vec<LabeledSample> = crate::space::read_lines(path)?;
    let mut ids = BTreeSet::new();
    for (i, s) in samples.iter().enumerate() {
        if s.subject_id.is_empty() {
            return Err(Error::invalid(format!(
                "sample {} has an empty subject_id",
                s.sample_id
            )));
        }
        if s.class.is_empty() {
            return Err(Error::invalid(format!(
                "sample {} has an empty class",
                s.sample_id
            )));
        }
        if !ids.insert(s.sample_id.as_str()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("duplicate sample_id {}", s.sample_id),
            });
        }
    }
    Ok(samples)
}

/// Sorted known class labels; the position in this list is the class id.
pub fn class_registry(samples: &[LabeledSample]) -> Vec<String> {
    samples
        .iter()
        .filter(|s| !s.is_unseen())
        .map(|s| s.class.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub method: String,
    pub predictions: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct MethodHeader {
    method: String,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    sample_id: String,
    class: String,
}

impl PredictionSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing method header".into()))?;
        let header: MethodHeader =
            serde_json::from_str(header).map_err(|e| parse_err(hl + 1, e.to_string()))?;
        let mut predictions = BTreeMap::new();
        for (i, line) in lines {
            let r: PredictionRecord =
                serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            if predictions.insert(r.sample_id.clone(), r.class).is_some() {
                return Err(parse_err(
                    i + 1,
                    format!("duplicate prediction for {}", r.sample_id),
                ));
            }
        }
        Ok(PredictionSet {
            method: header.method,
            predictions,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = serde_json::to_string(&serde_json::json!({ "method": self.method }))?;
        out.push('\n');
        for (id, class) in &self.predictions {
            out.push_str(&serde_json::to_string(&PredictionRecord {
                sample_id: id.clone(),
                class: class.clone(),
            })?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Partitions samples by subject. Subjects are sorted, shuffled with the seed,
/// and the first `round(train_fraction * n)` go to training (at least one per side).
pub fn cross_subject_split(
    samples: &[LabeledSample],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut subjects: Vec<&str> = samples
        .iter()
        .map(|s| s.subject_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = subjects.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "cross-subject split needs at least 2 subjects, found {n}"
        )));
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train_subjects: BTreeSet<&str> = subjects[..n_train].iter().copied().collect();
    let (train, test) = samples
        .iter()
        .cloned()
        .partition(|s| train_subjects.contains(s.subject_id.as_str()));
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Also report support-weighted (micro) averages.
    pub micro: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: usize,
    pub predicted: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub samples: usize,
    /// Row and column order of `confusion`.
    pub labels: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro: Option<Averages>,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nuadl_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn compute_metrics(
    truth: &[LabeledSample],
    predictions: &PredictionSet,
    options: MetricOptions,
) -> Result<MetricReport> {
    let missing: Vec<String> = truth
        .iter()
        .filter(|s| !predictions.predictions.contains_key(&s.sample_id))
        .map(|s| s.sample_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let mut warnings = Vec::new();

    let mut labels: BTreeSet<&str> = BTreeSet::new();
    for s in truth {
        labels.insert(&s.class);
        labels.insert(&predictions.predictions[&s.sample_id]);
    }
    // unseen goes last
    let mut labels: Vec<String> = labels
        .into_iter()
        .filter(|l| *l != UNSEEN)
        .map(String::from)
        .collect();
    let has_unseen = truth
        .iter()
        .any(|s| s.is_unseen() || predictions.predictions[&s.sample_id] == UNSEEN);
    if has_unseen {
        labels.push(UNSEEN.into());
    }
    let index: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();

    let n = labels.len();
    let mut confusion = vec![vec![0usize; n]; n];
    for s in truth {
        let t = index[s.class.as_str()];
        let p = index[predictions.predictions[&s.sample_id].as_str()];
        confusion[t][p] += 1;
    }

    let mut per_class = Vec::with_capacity(n);
    for (i, label) in labels.iter().enumerate() {
        let support: usize = confusion[i].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[i]).sum();
        let tp = confusion[i][i];
        if predicted == 0 && support > 0 {
            warnings.push(format!(
                "class {label:?} never predicted; precision set to 0"
            ));
        }
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        per_class.push(ClassMetrics {
            label: label.clone(),
            support,
            predicted,
            true_positives: tp,
            precision,
            recall,
            f1: f1(precision, recall),
        });
    }

    let included: Vec<&ClassMetrics> = per_class
        .iter()
        .filter(|c| c.label != UNSEEN)
        .filter(|c| {
            if c.support == 0 {
                warnings.push(format!(
                    "class {:?} has no support; excluded from averages",
                    c.label
                ));
            }
            c.support > 0
        })
        .collect();
    let k = included.len().max(1) as f64;
    let macro_avg = Averages {
        precision: included.iter().map(|c| c.precision).sum::<f64>() / k,
        recall: included.iter().map(|c| c.recall).sum::<f64>() / k,
        f1: included.iter().map(|c| c.f1).sum::<f64>() / k,
    };
    let micro = options.micro.then(|| {
        let tp: usize = included.iter().map(|c| c.true_positives).sum();
        let pred: usize = included.iter().map(|c| c.predicted).sum();
        let sup: usize = included.iter().map(|c| c.support).sum();
        let (p, r) = (ratio(tp, pred), ratio(tp, sup));
        Averages {
            precision: p,
            recall: r,
            f1: f1(p, r),
        }
    });

    let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
    let nuadl_accuracy = per_class
        .iter()
        .find(|c| c.label == UNSEEN && c.support > 0)
        .map(|c| c.recall);

    Ok(MetricReport {
        method: predictions.method.clone(),
        samples: truth.len(),
        labels,
        confusion,
        per_class,
        macro_avg,
        micro,
        accuracy: ratio(correct, truth.len()),
        nuadl_accuracy,
        warnings,
    })
}

pub fn success_rate(successes: u64, attempts: u64) -> Result<f64> {
    aggregate_rates(&[(successes, attempts)])
}

/// Pooled success rate over `(successes, attempts)` rows.
pub fn aggregate_rates(rows: &[(u64, u64)]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::invalid("no rate rows"));
    }
    let mut s = 0u64;
    let mut a = 0u64;
    for (i, &(succ, att)) in rows.iter().enumerate() {
        if att == 0 {
            return Err(Error::invalid(format!("row {i} has zero attempts")));
        }
        if succ > att {
            return Err(Error::invalid(format!(
                "row {i} has {succ} successes out of {att} attempts"
            )));
        }
        s += succ;
        a += att;
    }
    Ok(s as f64 / a as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateRow {
    pub group: String,
    pub label: String,
    pub attempts: u64,
    pub successes: u64,
}

pub fn load_rates(path: impl AsRef<Path>) -> Result<Vec<RateRow>> {
    crate::space::read_lines(path.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub group: String,
    pub successes: u64,
    pub attempts: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub rows: Vec<RateRow>,
    /// Groups in first-appearance order.
    pub groups: Vec<GroupRate>,
    pub overall: GroupRate,
}

pub fn summarize_rates(rows: &[RateRow]) -> Result<RateSummary> {
    let pooled = |group: &str, rs: &[&RateRow]| -> Result<GroupRate> {
        let pairs: Vec<(u64, u64)> = rs.iter().map(|r| (r.successes, r.attempts)).collect();
        Ok(GroupRate {
            group: group.to_string(),
            successes: pairs.iter().map(|p| p.0).sum(),
            attempts: pairs.iter().map(|p| p.1).sum(),
            rate: aggregate_rates(&pairs)?,
        })
    };
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.group.as_str()) {
            order.push(&r.group);
        }
    }
    let groups = order
        .iter()
        .map(|g| {
            let rs: Vec<&RateRow> = rows.iter().filter(|r| r.group == *g).collect();
            pooled(g, &rs)
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&RateRow> = rows.iter().collect();
    Ok(RateSummary {
        rows: rows.to_vec(),
        groups,
        overall: pooled("overall", &all)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub q: f64,
    pub df: usize,
    pub p: f64,
    pub blocks: usize,
    pub rank_sums: Vec<f64>,
}

/// Ranks a row ascending, giving tied values their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Friedman test on an `n_blocks x k_methods` score matrix.
pub fn friedman_test(outcomes: &[Vec<f64>]) -> Result<FriedmanResult> {
    let n = outcomes.len();
    let k = outcomes.first().map_or(0, Vec::len);
    if n < 2 || k < 2 {
        return Err(Error::invalid(format!(
            "friedman test needs at least 2 blocks and 2 methods, got {n}x{k}"
        )));
    }
    let mut rank_sums = vec![0.0; k];
    for (i, row) in outcomes.iter().enumerate() {
        if row.len() != k {
            return Err(Error::invalid(format!(
                "block {i} has {} methods, expected {k}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("block {i} has a non-finite score")));
        }
        for (s, r) in rank_sums.iter_mut().zip(midranks(row)) {
            *s += r;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let q = (12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0)).max(0.0);
    let df = k - 1;
    Ok(FriedmanResult {
        q,
        df,
        p: chi_square_sf(q, df as f64),
        blocks: n,
        rank_sums,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    pub b: u64,
    pub c: u64,
    pub z: f64,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_p: Option<f64>,
}

/// Continuity-corrected McNemar z on discordant counts; positive when `b > c`.
pub fn mcnemar_test(b: u64, c: u64) -> McNemarResult {
    let n = b + c;
    let z = if n == 0 {
        0.0
    } else {
        let diff = b as f64 - c as f64;
        let mag = (diff.abs() - 1.0).max(0.0) / (n as f64).sqrt();
        if diff < 0.0 {
            -mag
        } else {
            mag
        }
    };
    McNemarResult {
        b,
        c,
        z,
        p: erfc(z.abs() / std::f64::consts::SQRT_2),
        exact_p: (n <= 25).then(|| binomial_two_sided(b.min(c), n)),
    }
}

/// Two-sided exact sign-test p for `k` of `n` at probability 1/2.
fn binomial_two_sided(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut tail = 0.0;
    let mut coef = 1.0;
    for i in 0..=k {
        if i > 0 {
            coef *= (n - i + 1) as f64 / i as f64;
        }
        tail += coef;
    }
    (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
}

/// Per-sample binary correctness, one column per prediction set.
pub fn correctness_matrix(
    truth: &[LabeledSample],
    sets: &[PredictionSet],
) -> Result<Vec<Vec<f64>>> {
    let missing: Vec<String> = sets
        .iter()
        .flat_map(|set| {
            truth
                .iter()
                .filter(|s| !set.predictions.contains_key(&s.sample_id))
                .map(move |s| format!("{}:{}", set.method, s.sample_id))
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    Ok(truth
        .iter()
        .map(|s| {
            sets.iter()
                .map(|set| (set.predictions[&s.sample_id] == s.class) as u8 as f64)
                .collect()
        })
        .collect())
}

/// Counts (a correct and b wrong, a wrong and b correct) over the truth samples.
pub fn discordant_pairs(
    truth: &[LabeledSample],
    a: &PredictionSet,
    b: &PredictionSet,
) -> Result<(u64, u64)> {
    let m = correctness_matrix(truth, &[a.clone(), b.clone()])?;
    let only_a = m.iter().filter(|r| r[0] > r[1]).count() as u64;
    let only_b = m.iter().filter(|r| r[1] > r[0]).count() as u64;
    Ok((only_a, only_b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub method_a: String,
    pub method_b: String,
    pub result: McNemarResult,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friedman: Option<FriedmanResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mcnemar: Vec<PairwiseTest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<RateSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn evaluate(
    truth: &[LabeledSample],
    sets: &[PredictionSet],
    rates: Option<&[RateRow]>,
    options: MetricOptions,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    if sets.is_empty() {
        report
            .warnings
            .push("no prediction sets given; metrics section omitted".into());
    }
    for set in sets {
        report.methods.push(compute_metrics(truth, set, options)?);
    }
    if sets.len() >= 2 && truth.len() >= 2 {
        report.friedman = Some(friedman_test(&correctness_matrix(truth, sets)?)?);
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                let (b, c) = discordant_pairs(truth, &sets[i], &sets[j])?;
                report.mcnemar.push(PairwiseTest {
                    method_a: sets[i].method.clone(),
                    method_b: sets[j].method.clone(),
                    result: mcnemar_test(b, c),
                });
            }
        }
    }
    if let Some(rows) = rates {
        report.rates = Some(summarize_rates(rows)?);
    }
    Ok(report)
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

/// Plain-text tables: a method summary, per-class breakdowns, tests, and rates.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    for w in &report.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    if !report.methods.is_empty() {
        let width = report
            .methods
            .iter()
            .map(|m| m.method.len())
            .max()
            .unwrap_or(0)
            .max(6);
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>8}  {:>6}\n",
            "Method", "P", "R", "F1", "Accuracy", "NUADL"
        ));
        for m in &report.methods {
            out.push_str(&format!(
                "{:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>8.3}  {:>6}\n",
                m.method,
                m.macro_avg.precision,
                m.macro_avg.recall,
                m.macro_avg.f1,
                m.accuracy,
                m.nuadl_accuracy.map_or("-".into(), |v| format!("{v:.3}")),
            ));
        }
        for m in &report.methods {
            let lw = m.labels.iter().map(String::len).max().unwrap_or(0).max(5);
            out.push_str(&format!("\n[{}]\n", m.method));
            out.push_str(&format!(
                "{:<lw$}  {:>7}  {:>6}  {:>6}  {:>6}\n",
                "Class", "Support", "P", "R", "F1"
            ));
            for c in &m.per_class {
                out.push_str(&format!(
                    "{:<lw$}  {:>7}  {:>6.3}  {:>6.3}  {:>6.3}\n",
                    c.label, c.support, c.precision, c.recall, c.f1
                ));
            }
            for w in &m.warnings {
                out.push_str(&format!("warning: {w}\n"));
            }
        }
    }
    if let Some(f) = &report.friedman {
        out.push_str(&format!(
            "\nFriedman: Q = {:.3}, df = {}, p = {:.4} (n = {})\n",
            f.q, f.df, f.p, f.blocks
        ));
    }
    for t in &report.mcnemar {
        let r = &t.result;
        out.push_str(&format!(
            "McNemar {} vs {}: b = {}, c = {}, z = {:.3}, p = {:.4}",
            t.method_a, t.method_b, r.b, r.c, r.z, r.p
        ));
        if let Some(e) = r.exact_p {
            out.push_str(&format!(", exact p = {e:.4}"));
        }
        out.push('\n');
    }
    if let Some(rates) = &report.rates {
        let gw = rates
            .rows
            .iter()
            .map(|r| r.group.len())
            .max()
            .unwrap_or(0)
            .max(7);
        let lw = rates
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max(5);
        out.push_str(&format!(
            "\n{:<gw$}  {:<lw$}  {:>8}  {:>9}  {:>7}\n",
            "Group", "Label", "Attempts", "Successes", "Rate"
        ));
        for r in &rates.rows {
            out.push_str(&format!(
                "{:<gw$}  {:<lw$}  {:>8}  {:>9}  {:>7}\n",
                r.group,
                r.label,
                r.attempts,
                r.successes,
                pct(r.successes as f64 / r.attempts as f64)
            ));
        }
        for g in rates.groups.iter().chain(std::iter::once(&rates.overall)) {
            out.push_str(&format!(
                "{:<gw$}  {:<lw$}  {:>8}  {:>9}  {:>7}\n",
                g.group,
                "total",
                g.attempts,
                g.successes,
                pct(g.rate)
            ));
        }
    }
    out
}

/// Writes the JSON report to `path` and the text table next to it with a `.txt` extension.
pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let txt = path.with_extension("txt");
    fs::write(&txt, render_table(report)).map_err(|e| Error::io(&txt, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

// Special functions.

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const GAMMA_EPS: f64 = 1e-15;
const GAMMA_ITERS: usize = 1000;

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..GAMMA_ITERS {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_ITERS {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma Q(a, x). The series is used below
/// `x = a + 1`, the continued fraction above.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    gamma_q(df / 2.0, x / 2.0)
}

pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        2.0 - erfc(-x)
    } else {
        gamma_q(0.5, x * x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, subject: &str, class: &str) -> LabeledSample {
        LabeledSample {
            sample_id: id.into(),
            subject_id: subject.into(),
            class: class.into(),
            path: None,
        }
    }

    fn preds(method: &str, pairs: &[(&str, &str)]) -> PredictionSet {
        PredictionSet {
            method: method.into(),
            predictions: pairs
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }

    /// 10 samples per class, confusion [[8,2],[1,9]].
    fn two_class() -> (Vec<LabeledSample>, PredictionSet) {
        let mut truth = Vec::new();
        let mut p = Vec::new();
        for i in 0..10 {
            let id = format!("a{i}");
            truth.push(sample(&id, "s", "a"));
            p.push((id, if i < 8 { "a" } else { "b" }));
        }
        for i in 0..10 {
            let id = format!("b{i}");
            truth.push(sample(&id, "s", "b"));
            p.push((id, if i < 1 { "a" } else { "b" }));
        }
        let set = PredictionSet {
            method: "m".into(),
            predictions: p.into_iter().map(|(a, b)| (a, b.to_string())).collect(),
        };
        (truth, set)
    }

    #[test]
    fn perfect_predictions() {
        let truth = vec![sample("1", "s", "a"), sample("2", "s", "b")];
        let r = compute_metrics(
            &truth,
            &preds("m", &[("1", "a"), ("2", "b")]),
            MetricOptions::default(),
        )
        .unwrap();
        assert_eq!(
            r.macro_avg,
            Averages {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
        assert_eq!(r.accuracy, 1.0);
        assert!(r.nuadl_accuracy.is_none());
    }

    #[test]
    fn two_class_confusion() {
        let (truth, set) = two_class();
        let r = compute_metrics(&truth, &set, MetricOptions { micro: true }).unwrap();
        assert_eq!(r.confusion, vec![vec![8, 2], vec![1, 9]]);
        let a = &r.per_class[0];
        assert!((a.precision - 8.0 / 9.0).abs() < 1e-15);
        assert!((a.recall - 0.8).abs() < 1e-15);
        let b_p = 9.0 / 11.0;
        let b_r = 0.9;
        let f_a = 2.0 * (8.0 / 9.0) * 0.8 / (8.0 / 9.0 + 0.8);
        let f_b = 2.0 * b_p * b_r / (b_p + b_r);
        assert!((r.macro_avg.f1 - (f_a + f_b) / 2.0).abs() < 1e-15);
        let micro = r.micro.unwrap();
        assert!((micro.precision - 17.0 / 20.0).abs() < 1e-15);
        assert!((micro.recall - 17.0 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn nuadl_accuracy() {
        let mut truth = Vec::new();
        let mut p = Vec::new();
        for i in 0..10 {
            let id = format!("u{i}");
            truth.push(sample(&id, "s", UNSEEN));
            p.push((id, if i < 9 { UNSEEN } else { "a" }));
        }
        truth.push(sample("k", "s", "a"));
        p.push(("k".to_string(), "a"));
        let set = PredictionSet {
            method: "m".into(),
            predictions: p.into_iter().map(|(a, b)| (a, b.to_string())).collect(),
        };
        let r = compute_metrics(&truth, &set, MetricOptions::default()).unwrap();
        assert!((r.nuadl_accuracy.unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(r.labels.last().unwrap(), UNSEEN);
        // unseen does not enter the macro average
        assert!((r.macro_avg.recall - 1.0).abs() < 1e-15);
    }

    #[test]
    fn missing_predictions_listed() {
        let truth = vec![
            sample("1", "s", "a"),
            sample("2", "s", "a"),
            sample("3", "s", "a"),
        ];
        match compute_metrics(&truth, &preds("m", &[("2", "a")]), MetricOptions::default()) {
            Err(Error::MissingPredictions(ids)) => assert_eq!(ids, vec!["1", "3"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_support_class_warned() {
        let truth = vec![sample("1", "s", "a"), sample("2", "s", "a")];
        let r = compute_metrics(
            &truth,
            &preds("m", &[("1", "a"), ("2", "c")]),
            MetricOptions::default(),
        )
        .unwrap();
        assert!(r.warnings.iter().any(|w| w.contains("\"c\"")));
        assert!((r.macro_avg.recall - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rates() {
        assert_eq!(success_rate(32, 40).unwrap(), 0.8);
        assert_eq!(success_rate(31, 40).unwrap(), 0.775);
        assert_eq!(success_rate(9, 10).unwrap(), 0.9);
        assert!(aggregate_rates(&[(1, 0)]).is_err());
        assert!(aggregate_rates(&[]).is_err());
        let seen = aggregate_rates(&[(32, 40), (31, 40), (33, 40)]).unwrap();
        assert!((seen - 0.8).abs() < 1e-15);
        let atyp = aggregate_rates(&[(16, 20), (17, 20), (19, 20)]).unwrap();
        assert!((atyp - 52.0 / 60.0).abs() < 1e-15);
    }

    #[test]
    fn split_examples() {
        let samples: Vec<_> = ["x", "y", "z"]
            .iter()
            .flat_map(|s| (0..4).map(move |i| sample(&format!("{s}{i}"), s, "a")))
            .collect();
        let (train, test) = cross_subject_split(&samples, 2.0 / 3.0, 7).unwrap();
        let ts: BTreeSet<_> = train.iter().map(|s| s.subject_id.clone()).collect();
        let es: BTreeSet<_> = test.iter().map(|s| s.subject_id.clone()).collect();
        assert_eq!((ts.len(), es.len()), (2, 1));
        assert!(ts.is_disjoint(&es));
        assert_eq!(train.len() + test.len(), samples.len());
        assert_eq!(
            cross_subject_split(&samples, 2.0 / 3.0, 7).unwrap().0,
            train
        );

        let many: Vec<_> = (0..100)
            .map(|i| sample(&i.to_string(), &format!("s{i:03}"), "a"))
            .collect();
        let (train, test) = cross_subject_split(&many, 0.7, 1).unwrap();
        assert_eq!((train.len(), test.len()), (70, 30));

        assert!(cross_subject_split(&samples[..4], 0.5, 0).is_err());
    }

    #[test]
    fn friedman_hand_cases() {
        let ident = vec![vec![1.0, 1.0, 1.0]; 4];
        assert_eq!(friedman_test(&ident).unwrap().q, 0.0);

        let ranked = vec![vec![1.0, 2.0, 3.0]; 3];
        let r = friedman_test(&ranked).unwrap();
        assert_eq!(r.rank_sums, vec![3.0, 6.0, 9.0]);
        assert!((r.q - 6.0).abs() < 1e-12);
        assert_eq!(r.df, 2);
        assert!((r.p - (-3.0f64).exp()).abs() < 1e-12);

        // one method always right, two never: ranks (3, 1.5, 1.5) per block, Q = 1.5 n
        let binary = vec![vec![1.0, 0.0, 0.0]; 10];
        assert!((friedman_test(&binary).unwrap().q - 15.0).abs() < 1e-12);

        assert!(friedman_test(&[vec![1.0, 2.0]]).is_err());
        assert!(friedman_test(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn midrank_ties() {
        assert_eq!(midranks(&[0.0, 1.0, 0.0, 1.0]), vec![1.5, 3.5, 1.5, 3.5]);
        assert_eq!(midranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn mcnemar_cases() {
        assert_eq!(mcnemar_test(4, 4).z, 0.0);
        assert_eq!(mcnemar_test(0, 0).z, 0.0);
        let r = mcnemar_test(10, 2);
        assert!((r.z - 7.0 / 12f64.sqrt()).abs() < 1e-12);
        assert!((r.z - 2.0207).abs() < 1e-4);
        assert_eq!(mcnemar_test(3, 0).exact_p, Some(0.25));
        assert!(mcnemar_test(20, 10).exact_p.is_none());
        assert_eq!(mcnemar_test(2, 10).z, -r.z);
    }

    #[test]
    fn special_functions() {
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
        assert!((erfc(1.0) - 0.157_299_207_050_285_1).abs() < 1e-13);
        assert!((erfc(0.0) - 1.0).abs() < 1e-15);
        // df = 2 tail is exp(-x/2)
        for x in [0.1, 1.0, 3.0, 10.0, 40.0] {
            assert!((chi_square_sf(x, 2.0) - (-x / 2.0).exp()).abs() < 1e-13);
        }
    }

    #[test]
    fn report_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let (truth, set) = two_class();
        let mut other = set.clone();
        other.method = "n".into();
        other.predictions.insert("a9".into(), "a".into());
        let rows = vec![RateRow {
            group: "seen".into(),
            label: "hygiene".into(),
            attempts: 40,
            successes: 32,
        }];
        let report =
            evaluate(&truth, &[set, other], Some(&rows), MetricOptions::default()).unwrap();
        let p1 = dir.path().join("r1.json");
        let p2 = dir.path().join("r2.json");
        write_report(&report, &p1).unwrap();
        write_report(&report, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(
            fs::read(p1.with_extension("txt")).unwrap(),
            fs::read(p2.with_extension("txt")).unwrap()
        );
        assert_eq!(read_report(&p1).unwrap(), report);
        let m = &report.mcnemar[0];
        assert_eq!((m.result.b, m.result.c), (0, 1));
    }

    #[test]
    fn empty_method_list_warns() {
        let report = evaluate(
            &[sample("1", "s", "a")],
            &[],
            None,
            MetricOptions::default(),
        )
        .unwrap();
        assert!(report.methods.is_empty());
        assert_eq!(report.warnings.len(), 1);
        assert!(render_table(&report).starts_with("warning:"));
    }

    #[test]
    fn prediction_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = preds("povnet", &[("1", "a"), ("2", UNSEEN)]);
        let p = dir.path().join("p.jsonl");
        set.save(&p).unwrap();
        assert_eq!(PredictionSet::load(&p).unwrap(), set);
        fs::write(&p, "{\"method\":\"m\"}\n{\"sample_id\":\"1\",\"class\":\"a\"}\n{\"sample_id\":\"1\",\"class\":\"b\"}\n").unwrap();
        assert!(matches!(
            PredictionSet::load(&p),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
