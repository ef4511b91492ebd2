//! End-to-end wiring: sampler, motion gate, feature provider, fusion, user
//! state estimation and assistive behavior selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assist::{select_behavior, AssistEvent, AssistState, BehaviorTable};
use crate::error::{Error, Result};
use crate::features::{feature_file_name, store_feature_bundle, FeatureProvider};
use crate::fusion::{fuse_bundle, AdlEmbedding, FusionWeights};
use crate::motion::{
    calibrate_thresholds, classify_motion, compute_motion_embedding, CalibrationConfig,
    GateThresholds,
};
use crate::space::{calibrate_tau, AdlDecision, AdlType, ClassId, DecisionPolicy, EmbeddingSpace};
use crate::stream::{
    sample_windows, SampleWindow, SamplerConfig, Session, SkeletonFrame, WindowSampler,
};

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window_index: u64,
    pub motion_average: f64,
    #[serde(flatten)]
    pub decision: AdlDecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub record: WindowRecord,
    pub event: AssistEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub sampler: SamplerConfig,
    /// Add the embedding of each seen window to its class.
    pub update_space: bool,
    pub cooldown: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            sampler: SamplerConfig::default(),
            update_space: true,
            cooldown: crate::assist::DEFAULT_COOLDOWN,
        }
    }
}

/// Streaming engine for one user session.
pub struct Engine<P> {
    sampler: WindowSampler,
    provider: P,
    weights: FusionWeights,
    space: EmbeddingSpace,
    table: BehaviorTable,
    assist: AssistState,
    update_space: bool,
}

impl<P: FeatureProvider> Engine<P> {
    pub fn new(
        config: EngineConfig,
        provider: P,
        weights: FusionWeights,
        space: EmbeddingSpace,
        table: BehaviorTable,
    ) -> Result<Self> {
        weights.validate()?;
        Ok(Engine {
            sampler: WindowSampler::new(config.sampler)?,
            provider,
            weights,
            space,
            table,
            assist: AssistState::new(config.cooldown),
            update_space: config.update_space,
        })
    }

    pub fn space(&self) -> &EmbeddingSpace {
        &self.space
    }

    pub fn into_space(self) -> EmbeddingSpace {
        self.space
    }

    pub fn push_frame(&mut self, frame: SkeletonFrame) -> Result<Option<StepOutput>> {
        match self
            .sampler
            .push_frame(frame)
            .map_err(|e| e.at_stage("sampler"))?
        {
            Some(w) => self.process_window(&w).map(Some),
            None => Ok(None),
        }
    }

    pub fn process_window(&mut self, window: &SampleWindow) -> Result<StepOutput> {
        let motion = compute_motion_embedding(window).map_err(|e| e.at_stage("motion"))?;
        let m_adl = classify_motion(&motion, &self.space.gate);
        let now = window.end_time();
        let (embedding, head_class) = if m_adl {
            let bundle = self
                .provider
                .features(window)
                .map_err(|e| e.at_stage("features"))?;
            let (e, task) =
                fuse_bundle(&bundle, &self.weights).map_err(|e| e.at_stage("fusion"))?;
            (Some(e), Some(task.argmax() as ClassId))
        } else {
            (None, None)
        };
        let decision = self
            .space
            .decide(m_adl, embedding.as_ref(), head_class, now)
            .map_err(|e| e.at_stage("estimator"))?;
        if self.update_space && decision.adl_type == AdlType::Seen {
            if let (Some(c), Some(e)) = (decision.class_id, embedding) {
                self.space
                    .add_embedding(c, e, false)
                    .map_err(|e| e.at_stage("estimator"))?;
            }
        }
        let event = select_behavior(&decision, &self.table, &mut self.assist)
            .map_err(|e| e.at_stage("assist"))?;
        Ok(StepOutput {
            record: WindowRecord {
                window_index: window.window_index,
                motion_average: motion.average(),
                decision,
            },
            event,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub records: Vec<WindowRecord>,
    /// Emitted events only; suppressed and non-ADL steps are dropped.
    pub events: Vec<AssistEvent>,
}

pub fn run_session<P: FeatureProvider>(
    engine: &mut Engine<P>,
    session: &Session,
) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    for frame in &session.frames {
        if let Some(step) = engine.push_frame(frame.clone())? {
            out.records.push(step.record);
            if !step.event.is_none() {
                out.events.push(step.event);
            }
        }
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[WindowRecord]) -> Result<()> {
    crate::space::write_lines(path.as_ref(), records)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<WindowRecord>> {
    crate::space::read_lines(path.as_ref())
}

/// Writes one feature file per sampled window; returns the window count.
pub fn export_features(
    session: &Session,
    sampler: SamplerConfig,
    provider: &dyn FeatureProvider,
    dir: impl AsRef<Path>,
) -> Result<usize> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let windows = sample_windows(session.frames.iter().cloned(), sampler)
        .map_err(|e| e.at_stage("sampler"))?;
    for w in &windows {
        let bundle = provider.features(w).map_err(|e| e.at_stage("features"))?;
        store_feature_bundle(&bundle, dir.join(feature_file_name(w.window_index)))?;
    }
    Ok(windows.len())
}

/// A calibration session with its activity label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSession {
    pub label: String,
    pub session: Session,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub sampler: SamplerConfig,
    pub gate: CalibrationConfig,
    pub policy: DecisionPolicy,
    /// Every n-th gated window of a class is held out for tau calibration.
    pub holdout_every: usize,
    pub tau_percentile: f64,
    pub tau_margin: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            sampler: SamplerConfig::default(),
            gate: CalibrationConfig::default(),
            policy: DecisionPolicy::default(),
            holdout_every: 5,
            tau_percentile: 99.0,
            tau_margin: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub gate: GateThresholds,
    pub space: EmbeddingSpace,
    pub held_out_scores: Vec<f64>,
    pub warnings: Vec<String>,
}

impl CalibrationResult {
    pub fn is_degenerate(&self) -> bool {
        !self.warnings.is_empty()
    }
}

/// Class ids follow the sorted order of the distinct labels.
pub fn label_ids<'a>(labels: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, ClassId> {
    labels
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l.to_string(), i as ClassId))
        .collect()
}

/// Calibrates the motion gate over every window of the corpus, builds the
/// embedding space from the gated windows, and sets `tau_unseen` from the
/// scores of held-out windows.
pub fn calibrate(
    user_id: &str,
    sessions: &[LabeledSession],
    weights: &FusionWeights,
    provider: &dyn FeatureProvider,
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    calibrate_with(user_id, sessions, weights, |_| provider, options)
}

/// Like [`calibrate`], with a feature provider chosen per session index.
pub fn calibrate_with<'p>(
    user_id: &str,
    sessions: &[LabeledSession],
    weights: &FusionWeights,
    provider_for: impl Fn(usize) -> &'p dyn FeatureProvider,
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    if sessions.is_empty() {
        return Err(Error::invalid("calibration corpus is empty"));
    }
    if options.holdout_every < 2 {
        return Err(Error::invalid("holdout_every must be at least 2"));
    }
    let mut warnings = Vec::new();
    if sessions.len() == 1 {
        warnings.push("calibration corpus has a single session".to_string());
    }
    let ids = label_ids(sessions.iter().map(|s| s.label.as_str()));

    let mut windows: Vec<(usize, ClassId, SampleWindow, f64)> = Vec::new();
    for (si, s) in sessions.iter().enumerate() {
        let class = ids[&s.label];
        for w in sample_windows(s.session.frames.iter().cloned(), options.sampler)
            .map_err(|e| e.at_stage("sampler"))?
        {
            let m = compute_motion_embedding(&w).map_err(|e| e.at_stage("motion"))?;
            windows.push((si, class, w, m.average()));
        }
    }
    if windows.is_empty() {
        return Err(Error::invalid(
            "calibration sessions are too short to yield any window",
        ));
    }
    let averages: Vec<f64> = windows.iter().map(|w| w.3).collect();
    let gate = calibrate_thresholds(&averages, &options.gate).map_err(|e| e.at_stage("motion"))?;
    if gate.calibration.degenerate {
        warnings.push("motion gate calibrated from a single window".to_string());
    }

    let mut seen_per_class: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut train: Vec<(ClassId, AdlEmbedding)> = Vec::new();
    let mut held_out: Vec<AdlEmbedding> = Vec::new();
    for (si, class, w, avg) in &windows {
        if !(*avg > gate.m_min && *avg < gate.m_max) {
            continue;
        }
        let bundle = provider_for(*si)
            .features(w)
            .map_err(|e| e.at_stage("features"))?;
        let (e, _) = fuse_bundle(&bundle, weights).map_err(|e| e.at_stage("fusion"))?;
        let n = seen_per_class.entry(*class).or_default();
        *n += 1;
        if (*n).is_multiple_of(options.holdout_every) {
            held_out.push(e);
        } else {
            train.push((*class, e));
        }
    }

    let labels: BTreeMap<ClassId, String> = ids.iter().map(|(l, id)| (*id, l.clone())).collect();
    let mut space = EmbeddingSpace::new(user_id, train, labels, gate, options.policy)
        .map_err(|e| e.at_stage("estimator"))?;
    let held_out_scores = held_out
        .iter()
        .map(|e| space.similarity(e).map(|s| s.s))
        .collect::<Result<Vec<_>>>()?;
    if held_out_scores.is_empty() {
        warnings.push("no held-out windows; tau_unseen left at the policy value".to_string());
    } else {
        space.policy.tau_unseen =
            calibrate_tau(&held_out_scores, options.tau_percentile, options.tau_margin)?;
    }
    Ok(CalibrationResult {
        gate,
        space,
        held_out_scores,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FileProvider, SyntheticProvider};
    use crate::fusion::PipelineConfig;
    use crate::synth::{synth_session, Activity, SynthConfig};

    fn corpus(activities: &[Activity], per_class: u64) -> Vec<LabeledSession> {
        let cfg = SynthConfig {
            frames: 240,
            ..SynthConfig::default()
        };
        activities
            .iter()
            .flat_map(|a| {
                (0..per_class).map(move |seed| LabeledSession {
                    label: a.name().to_string(),
                    session: synth_session(*a, &cfg, seed + 100 * *a as u64).unwrap(),
                })
            })
            .collect()
    }

    fn weights() -> FusionWeights {
        FusionWeights::random(PipelineConfig::default(), 7).unwrap()
    }

    #[test]
    fn label_ids_sorted() {
        let ids = label_ids(["eating", "brushing", "eating"]);
        assert_eq!(ids["brushing"], 0);
        assert_eq!(ids["eating"], 1);
    }

    #[test]
    fn calibrate_and_run() {
        let w = weights();
        let provider = SyntheticProvider::default();
        let cal = calibrate(
            "u",
            &corpus(&[Activity::Eating, Activity::Waving], 3),
            &w,
            &provider,
            &CalibrationOptions::default(),
        )
        .unwrap();
        assert!(cal.warnings.is_empty(), "{:?}", cal.warnings);
        assert!(cal.gate.m_min > 0.0);
        let waving = cal.space.class_by_label("waving").unwrap();
        let table = BehaviorTable::generic(&cal.space.labels());
        let mut engine =
            Engine::new(EngineConfig::default(), provider, w, cal.space, table).unwrap();
        let session = synth_session(Activity::Waving, &SynthConfig::default(), 999).unwrap();
        let out = run_session(&mut engine, &session).unwrap();
        assert!(!out.records.is_empty());
        let seen = out
            .records
            .iter()
            .filter(|r| r.decision.class_id == Some(waving))
            .count();
        assert!(
            seen * 10 >= out.records.len() * 9,
            "{seen} of {}",
            out.records.len()
        );
        assert!(!out.events.is_empty());
    }

    #[test]
    fn stationary_is_non_adl() {
        let w = weights();
        let provider = SyntheticProvider::default();
        let cal = calibrate(
            "u",
            &corpus(&[Activity::Eating], 2),
            &w,
            &provider,
            &CalibrationOptions::default(),
        )
        .unwrap();
        let table = BehaviorTable::generic(&cal.space.labels());
        let mut engine =
            Engine::new(EngineConfig::default(), provider, w, cal.space, table).unwrap();
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let out = run_session(
            &mut engine,
            &synth_session(Activity::Stationary, &cfg, 1).unwrap(),
        )
        .unwrap();
        assert!(out
            .records
            .iter()
            .all(|r| r.decision.adl_type == AdlType::NonAdl));
        assert!(out.events.is_empty());
    }

    #[test]
    fn single_session_warns() {
        let cal = calibrate(
            "u",
            &corpus(&[Activity::Eating], 1),
            &weights(),
            &SyntheticProvider::default(),
            &CalibrationOptions::default(),
        )
        .unwrap();
        assert!(cal.is_degenerate());
    }

    #[test]
    fn file_provider_matches_synthetic() {
        let dir = tempfile::tempdir().unwrap();
        let w = weights();
        let synthetic = SyntheticProvider::default();
        let cal = calibrate(
            "u",
            &corpus(&[Activity::Combing], 2),
            &w,
            &synthetic,
            &CalibrationOptions::default(),
        )
        .unwrap();
        let session = synth_session(Activity::Combing, &SynthConfig::default(), 5).unwrap();
        let n =
            export_features(&session, SamplerConfig::default(), &synthetic, dir.path()).unwrap();
        assert!(n > 0);

        let table = BehaviorTable::generic(&cal.space.labels());
        let mut a = Engine::new(
            EngineConfig::default(),
            synthetic,
            w.clone(),
            cal.space.clone(),
            table.clone(),
        )
        .unwrap();
        let files = FileProvider {
            dir: dir.path().to_path_buf(),
        };
        let mut b = Engine::new(EngineConfig::default(), files, w, cal.space, table).unwrap();
        assert_eq!(
            run_session(&mut a, &session).unwrap(),
            run_session(&mut b, &session).unwrap()
        );
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = WindowRecord {
            window_index: 3,
            motion_average: 0.25,
            decision: AdlDecision::non_adl(1.5),
        };
        let p = dir.path().join("d.jsonl");
        write_records(&p, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_records(&p).unwrap(), vec![rec]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(calibrate(
            "u",
            &[],
            &weights(),
            &SyntheticProvider::default(),
            &CalibrationOptions::default()
        )
        .is_err());
    }
}
