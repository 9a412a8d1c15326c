//! Process knowledge for the assembly cycle: which equipment and sensors
//! belong to each state and which anomaly classes can physically occur
//! there. Predictions are checked against it after the fact; verdicts
//! annotate results and never replace them.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnomalyClass, CycleState, NUM_CLASSES, NUM_STATES};

/// The shipped placeholder: the only published rule is that classes with
/// a missing nose cannot appear before state 8.
pub const DEFAULT_ONTOLOGY_JSON: &str = include_str!("../data/default_ontology.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub id: String,
    pub unit: String,
    pub expected_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateSpec {
    pub id: CycleState,
    pub equipment: Vec<String>,
    pub sensors: Vec<SensorSpec>,
    pub valid_anomalies: BTreeSet<AnomalyClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OntologySpec {
    pub version: String,
    /// Indexed by state value minus one.
    pub states: Vec<StateSpec>,
}

// Wire shapes, parsed loosely so validation can report every problem.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawState {
    id: i64,
    equipment: Vec<String>,
    sensors: Vec<SensorSpec>,
    valid_anomalies: Vec<i64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    version: String,
    states: Vec<RawState>,
}

impl OntologySpec {
    pub fn default_spec() -> Self {
        Self::from_json(DEFAULT_ONTOLOGY_JSON).expect("shipped ontology is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawSpec = serde_json::from_str(text).map_err(|e| Error::Schema(vec![format!("$: {e}")]))?;
        let mut errs = Vec::new();
        if raw.states.len() != NUM_STATES as usize {
            errs.push(format!("$.states: expected {NUM_STATES} states, found {}", raw.states.len()));
        }
        let mut states = Vec::with_capacity(raw.states.len());
        for (i, s) in raw.states.into_iter().enumerate() {
            let at = format!("$.states[{i}]");
            if s.id != i as i64 + 1 {
                errs.push(format!("{at}.id: expected {}, found {}", i + 1, s.id));
            }
            let mut ids = BTreeSet::new();
            for (j, sensor) in s.sensors.iter().enumerate() {
                if !ids.insert(sensor.id.as_str()) {
                    errs.push(format!("{at}.sensors[{j}].id: duplicate sensor id {:?}", sensor.id));
                }
                let (lo, hi) = sensor.expected_range;
                if !(lo <= hi) {
                    errs.push(format!("{at}.sensors[{j}].expected_range: lower bound {lo} exceeds upper bound {hi}"));
                }
            }
            let mut valid = BTreeSet::new();
            for (j, &c) in s.valid_anomalies.iter().enumerate() {
                match usize::try_from(c).ok().and_then(|c| AnomalyClass::from_index(c).ok()) {
                    Some(class) => {
                        valid.insert(class);
                    }
                    None => errs.push(format!(
                        "{at}.valid_anomalies[{j}]: {c} is not a class index 0..{NUM_CLASSES}"
                    )),
                }
            }
            if !valid.contains(&AnomalyClass::NoAnomaly) {
                errs.push(format!("{at}.valid_anomalies: must include 0 (NoAnomaly)"));
            }
            if let Ok(id) = CycleState::new(i.min(NUM_STATES as usize - 1) as u8 + 1) {
                states.push(StateSpec {
                    id,
                    equipment: s.equipment,
                    sensors: s.sensors,
                    valid_anomalies: valid,
                });
            }
        }
        if !errs.is_empty() {
            return Err(Error::Schema(errs));
        }
        Ok(OntologySpec {
            version: raw.version,
            states,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ontology serializes")
    }

    pub fn state(&self, state: CycleState) -> &StateSpec {
        &self.states[state.value() as usize - 1]
    }

    /// States admitting `class`, as compact ranges like `8-21` or `1-3, 9`.
    pub fn admissible_states(&self, class: AnomalyClass) -> String {
        let ids: Vec<u8> = self
            .states
            .iter()
            .filter(|s| s.valid_anomalies.contains(&class))
            .map(|s| s.id.value())
            .collect();
        let mut parts = Vec::new();
        let mut i = 0;
        while i < ids.len() {
            let mut j = i;
            while j + 1 < ids.len() && ids[j + 1] == ids[j] + 1 {
                j += 1;
            }
            parts.push(if i == j {
                ids[i].to_string()
            } else {
                format!("{}-{}", ids[i], ids[j])
            });
            i = j + 1;
        }
        if parts.is_empty() {
            "no state".into()
        } else {
            parts.join(", ")
        }
    }
}

pub fn load_ontology(path: impl AsRef<Path>) -> Result<OntologySpec> {
    OntologySpec::from_json(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictStatus {
    Consistent,
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub reason: String,
    pub state: CycleState,
    pub predicted: AnomalyClass,
}

impl Verdict {
    pub fn is_consistent(&self) -> bool {
        self.status == VerdictStatus::Consistent
    }
}

/// Membership test of the prediction in the state's admissible classes.
pub fn verify(state: CycleState, predicted: AnomalyClass, spec: &OntologySpec) -> Verdict {
    let ok = spec.state(state).valid_anomalies.contains(&predicted);
    let (status, reason) = if ok {
        (
            VerdictStatus::Consistent,
            format!("valid_anomalies[{state}]: {} is admissible in state {state}", predicted.name()),
        )
    } else {
        (
            VerdictStatus::Inconsistent,
            format!(
                "valid_anomalies[{state}]: {} cannot occur in state {state}; it is admissible in states {}",
                predicted.name(),
                spec.admissible_states(predicted)
            ),
        )
    };
    Verdict {
        status,
        reason,
        state,
        predicted,
    }
}

pub fn expected_sensors(state: CycleState, spec: &OntologySpec) -> &[SensorSpec] {
    &spec.state(state).sensors
}

/// User-facing explanation: the verdict plus the sensors expected in the state.
pub fn explanation_text(verdict: &Verdict, spec: &OntologySpec) -> String {
    let mut s = format!("State {}, predicted {}: {}", verdict.state, verdict.predicted.name(), verdict.reason);
    let sensors = expected_sensors(verdict.state, spec);
    if !sensors.is_empty() {
        s.push_str(". Expected sensor values:");
        for x in sensors {
            s.push_str(&format!(" {} in [{}, {}] {};", x.id, x.expected_range.0, x.expected_range.1, x.unit));
        }
        s.pop();
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub class: AnomalyClass,
    pub inconsistent: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditTable {
    pub rows: Vec<AuditRow>,
    pub records: usize,
    /// Log lines that could not be parsed.
    pub skipped: usize,
}

impl AuditTable {
    pub fn row(&self, class: AnomalyClass) -> &AuditRow {
        &self.rows[class.index()]
    }

    pub fn inconsistent_total(&self) -> usize {
        self.rows.iter().map(|r| r.inconsistent).sum()
    }
}

impl fmt::Display for AuditTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(f, "{}: {} out of {} inconsistent", r.class.name(), r.inconsistent, r.total)?;
        }
        write!(f, "{} records, {} skipped lines", self.records, self.skipped)
    }
}

/// Tallies verdicts per predicted class over `(state, predicted)` pairs.
pub fn audit<I>(records: I, spec: &OntologySpec) -> AuditTable
where
    I: IntoIterator<Item = (CycleState, AnomalyClass)>,
{
    let mut rows: Vec<AuditRow> = AnomalyClass::ALL
        .iter()
        .map(|&class| AuditRow {
            class,
            inconsistent: 0,
            total: 0,
        })
        .collect();
    let mut n = 0;
    for (state, predicted) in records {
        n += 1;
        let row = &mut rows[predicted.index()];
        row.total += 1;
        if !verify(state, predicted, spec).is_consistent() {
            row.inconsistent += 1;
        }
    }
    AuditTable {
        rows,
        records: n,
        skipped: 0,
    }
}

/// Audits a detection log, re-verifying every record against `spec`.
pub fn audit_log(path: impl AsRef<Path>, spec: &OntologySpec) -> Result<AuditTable> {
    let log = crate::gateway::log::read_log(path)?;
    let mut table = audit(log.records.iter().map(|r| (r.cycle_state, r.predicted_class)), spec);
    table.skipped = log.skipped;
    Ok(table)
}
