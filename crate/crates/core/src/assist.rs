//! Maps user-state decisions to assistive events.
//!
//! Seen ADLs get the class's task instructions, unseen ADLs a general
//! reinforcement, atypical performance a notice, non-ADL motion nothing.
//! The engine emits message keys; the text and gestures behind them live with
//! the robot.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{AdlDecision, AdlType, ClassId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Instruction,
    Reinforcement,
    AtypicalNotice,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistEvent {
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_key: Option<String>,
    pub timestamp: f64,
    /// Similarity score attached to atypical notices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

impl AssistEvent {
    pub fn none(timestamp: f64) -> Self {
        AssistEvent {
            kind: EventKind::None,
            class_id: None,
            message_key: None,
            timestamp,
            similarity: None,
        }
    }

    pub fn is_none(&self) -> bool {
        self.kind == EventKind::None
    }
}

/// On-disk behavior table, keyed by class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub classes: BTreeMap<String, Vec<String>>,
    pub reinforcement: Vec<String>,
    /// Key template for atypical notices; `{label}` and `{class_id}` are substituted.
    pub atypical: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorTable {
    instructions: BTreeMap<ClassId, Vec<String>>,
    labels: BTreeMap<ClassId, String>,
    reinforcement: Vec<String>,
    atypical_template: String,
}

impl BehaviorTable {
    /// Resolves label keys against the class labels of an embedding space.
    /// Table entries for labels the space does not know are ignored.
    pub fn resolve(spec: BehaviorSpec, labels: &BTreeMap<ClassId, String>) -> Result<Self> {
        if spec.reinforcement.is_empty() {
            return Err(Error::invalid(
                "behavior table needs at least one reinforcement key",
            ));
        }
        let mut instructions = BTreeMap::new();
        for (id, label) in labels {
            if let Some(keys) = spec.classes.get(label) {
                if keys.is_empty() {
                    return Err(Error::invalid(format!(
                        "class {label:?} has no instruction keys"
                    )));
                }
                instructions.insert(*id, keys.clone());
            }
        }
        Ok(BehaviorTable {
            instructions,
            labels: labels.clone(),
            reinforcement: spec.reinforcement,
            atypical_template: spec.atypical,
        })
    }

    pub fn load(path: impl AsRef<Path>, labels: &BTreeMap<ClassId, String>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: BehaviorSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        Self::resolve(spec, labels)
    }

    /// A table with one generic key per class, for runs without a table file.
    pub fn generic(labels: &BTreeMap<ClassId, String>) -> Self {
        BehaviorTable {
            instructions: labels
                .iter()
                .map(|(id, l)| (*id, vec![format!("instruction.{l}")]))
                .collect(),
            labels: labels.clone(),
            reinforcement: vec!["reinforcement.general".into()],
            atypical_template: "atypical.{label}".into(),
        }
    }

    fn instructions(&self, class_id: ClassId) -> Result<&[String]> {
        self.instructions
            .get(&class_id)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::UnknownClass(format!("{class_id} is missing from the behavior table"))
            })
    }

    fn atypical_key(&self, class_id: ClassId) -> Result<String> {
        self.instructions(class_id)?;
        let label = self.labels.get(&class_id).cloned().unwrap_or_default();
        Ok(self
            .atypical_template
            .replace("{label}", &label)
            .replace("{class_id}", &class_id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Emitted {
    kind: EventKind,
    class_id: Option<ClassId>,
    timestamp: f64,
}

/// Cooldown and instruction-sequencing state; one per user.
#[derive(Debug, Clone, PartialEq)]
pub struct AssistState {
    pub cooldown: f64,
    last: Option<Emitted>,
    episode_class: Option<ClassId>,
    step: usize,
    reinforcements: usize,
}

pub const DEFAULT_COOLDOWN: f64 = 10.0;

impl Default for AssistState {
    fn default() -> Self {
        AssistState::new(DEFAULT_COOLDOWN)
    }
}

impl AssistState {
    pub fn new(cooldown: f64) -> Self {
        AssistState {
            cooldown,
            last: None,
            episode_class: None,
            step: 0,
            reinforcements: 0,
        }
    }
}

pub fn select_behavior(
    decision: &AdlDecision,
    table: &BehaviorTable,
    state: &mut AssistState,
) -> Result<AssistEvent> {
    let now = decision.timestamp;
    let kind = match decision.adl_type {
        AdlType::NonAdl => return Ok(AssistEvent::none(now)),
        AdlType::Seen => EventKind::Instruction,
        AdlType::Unseen => EventKind::Reinforcement,
        AdlType::Atypical => EventKind::AtypicalNotice,
    };
    let class_id = match kind {
        EventKind::Reinforcement => None,
        _ => Some(
            decision
                .class_id
                .ok_or_else(|| Error::invalid("seen/atypical decision without a class"))?,
        ),
    };
    if let Some(c) = class_id {
        table.instructions(c)?;
        if state.episode_class != Some(c) {
            state.episode_class = Some(c);
            state.step = 0;
        }
    }
    if let Some(last) = state.last {
        if last.kind == kind && last.class_id == class_id && now - last.timestamp < state.cooldown {
            return Ok(AssistEvent::none(now));
        }
    }

    let (key, similarity) = match (kind, class_id) {
        (EventKind::Instruction, Some(c)) => {
            let keys = table.instructions(c)?;
            let key = keys[state.step.min(keys.len() - 1)].clone();
            state.step += 1;
            (key, None)
        }
        (EventKind::AtypicalNotice, Some(c)) => (table.atypical_key(c)?, decision.similarity),
        _ => {
            let key = table.reinforcement[state.reinforcements % table.reinforcement.len()].clone();
            state.reinforcements += 1;
            (key, None)
        }
    };
    state.last = Some(Emitted {
        kind,
        class_id,
        timestamp: now,
    });
    Ok(AssistEvent {
        kind,
        class_id,
        message_key: Some(key),
        timestamp: now,
        similarity,
    })
}

pub fn write_event_log(path: impl AsRef<Path>, events: &[AssistEvent]) -> Result<()> {
    crate::space::write_lines(path.as_ref(), events)
}

pub fn read_event_log(path: impl AsRef<Path>) -> Result<Vec<AssistEvent>> {
    crate::space::read_lines(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> BehaviorTable {
        let spec = BehaviorSpec {
            classes: BTreeMap::from([
                (
                    "brushing teeth".to_string(),
                    vec!["brush.pick_up".to_string(), "brush.scrub".to_string()],
                ),
                ("eating".to_string(), vec!["eat.fork".to_string()]),
            ]),
            reinforcement: vec!["reinforce.a".into(), "reinforce.b".into()],
            atypical: "atypical.{label}".into(),
        };
        let labels = BTreeMap::from([
            (0, "brushing teeth".to_string()),
            (1, "eating".to_string()),
            (2, "dressing".to_string()),
        ]);
        BehaviorTable::resolve(spec, &labels).unwrap()
    }

    fn decision(adl_type: AdlType, class_id: Option<ClassId>, t: f64) -> AdlDecision {
        AdlDecision {
            timestamp: t,
            m_adl: adl_type != AdlType::NonAdl,
            adl_type,
            class_id,
            similarity: (adl_type != AdlType::NonAdl).then_some(1.5),
            head_class: None,
            diagnostics: None,
        }
    }

    #[test]
    fn non_adl_is_silent() {
        let mut st = AssistState::default();
        let ev = select_behavior(&decision(AdlType::NonAdl, None, 0.0), &table(), &mut st).unwrap();
        assert!(ev.is_none());
        assert!(ev.message_key.is_none());
    }

    #[test]
    fn seen_gives_first_instruction() {
        let mut st = AssistState::default();
        let ev =
            select_behavior(&decision(AdlType::Seen, Some(0), 0.0), &table(), &mut st).unwrap();
        assert_eq!(ev.kind, EventKind::Instruction);
        assert_eq!(ev.class_id, Some(0));
        assert_eq!(ev.message_key.as_deref(), Some("brush.pick_up"));
    }

    #[test]
    fn cooldown_suppresses_repeat() {
        let mut st = AssistState::new(10.0);
        let t = table();
        select_behavior(&decision(AdlType::Seen, Some(0), 0.0), &t, &mut st).unwrap();
        let ev = select_behavior(&decision(AdlType::Seen, Some(0), 0.5), &t, &mut st).unwrap();
        assert!(ev.is_none());
        let ev = select_behavior(&decision(AdlType::Seen, Some(0), 10.5), &t, &mut st).unwrap();
        assert_eq!(ev.message_key.as_deref(), Some("brush.scrub"));
        let ev = select_behavior(&decision(AdlType::Seen, Some(0), 21.0), &t, &mut st).unwrap();
        assert_eq!(ev.message_key.as_deref(), Some("brush.scrub"));
    }

    #[test]
    fn sequencing_resets_on_class_change() {
        let mut st = AssistState::new(0.0);
        let t = table();
        select_behavior(&decision(AdlType::Seen, Some(0), 0.0), &t, &mut st).unwrap();
        select_behavior(&decision(AdlType::Seen, Some(1), 1.0), &t, &mut st).unwrap();
        let ev = select_behavior(&decision(AdlType::Seen, Some(0), 2.0), &t, &mut st).unwrap();
        assert_eq!(ev.message_key.as_deref(), Some("brush.pick_up"));
    }

    #[test]
    fn unseen_and_atypical() {
        let mut st = AssistState::new(0.0);
        let t = table();
        let ev = select_behavior(&decision(AdlType::Unseen, None, 0.0), &t, &mut st).unwrap();
        assert_eq!(ev.kind, EventKind::Reinforcement);
        assert_eq!(ev.message_key.as_deref(), Some("reinforce.a"));
        assert_eq!(ev.class_id, None);
        let ev = select_behavior(&decision(AdlType::Unseen, None, 1.0), &t, &mut st).unwrap();
        assert_eq!(ev.message_key.as_deref(), Some("reinforce.b"));
        let ev = select_behavior(&decision(AdlType::Atypical, Some(1), 2.0), &t, &mut st).unwrap();
        assert_eq!(ev.kind, EventKind::AtypicalNotice);
        assert_eq!(ev.message_key.as_deref(), Some("atypical.eating"));
        assert_eq!(ev.similarity, Some(1.5));
    }

    #[test]
    fn class_missing_from_table() {
        let mut st = AssistState::default();
        let err =
            select_behavior(&decision(AdlType::Seen, Some(2), 0.0), &table(), &mut st).unwrap_err();
        assert!(matches!(err, Error::UnknownClass(_)));
    }
}
