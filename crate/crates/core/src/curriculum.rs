//! Difficulty levels per user-action type and the four-phase schedule used
//! when the tracker is updated from its large buffer.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::CurriculumConfig;
use crate::domain::{Schema, UserAction};
use crate::error::{Error, Result};
use crate::nnet::{Net, OptimizerState};
use crate::system_agent::{dst_joint_correct, dst_supervised_update, DstExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Easy,
    Middle,
    Hard,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Easy, Level::Middle, Level::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Level::Easy => "easy",
            Level::Middle => "middle",
            Level::Hard => "hard",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Closed lower bounds: `acc >= easy` is easy, `acc >= middle` is middle.
pub fn assign_level(accuracy: f64, easy: f64, middle: f64) -> Level {
    if accuracy >= easy {
        Level::Easy
    } else if accuracy >= middle {
        Level::Middle
    } else {
        Level::Hard
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyEntry {
    pub accuracy: f64,
    pub count: usize,
    pub level: Level,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTable {
    pub entries: BTreeMap<UserAction, DifficultyEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DifficultyRow {
    action: String,
    accuracy: f64,
    count: usize,
    level: String,
}

impl DifficultyTable {
    pub fn from_accuracies(accuracies: &BTreeMap<UserAction, f64>, easy: f64, middle: f64) -> Self {
        let entries = accuracies
            .iter()
            .map(|(&a, &acc)| {
                (
                    a,
                    DifficultyEntry {
                        accuracy: acc,
                        count: 0,
                        level: assign_level(acc, easy, middle),
                    },
                )
            })
            .collect();
        Self { entries }
    }

    pub fn level_of(&self, action: UserAction) -> Result<Level> {
        self.entries
            .get(&action)
            .map(|e| e.level)
            .ok_or_else(|| Error::UnknownAction(action.name().to_string()))
    }

    pub fn accuracy_of(&self, action: UserAction) -> Option<f64> {
        self.entries.get(&action).map(|e| e.accuracy)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for (a, e) in &self.entries {
            w.serialize(DifficultyRow {
                action: a.name().to_string(),
                accuracy: e.accuracy,
                count: e.count,
                level: e.level.name().to_string(),
            })
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut entries = BTreeMap::new();
        for row in r.deserialize::<DifficultyRow>() {
            let row = row.map_err(|e| csv_err(path, e))?;
            let malformed = |reason: String| Error::Malformed {
                path: path.to_path_buf(),
                reason,
            };
            let action = UserAction::from_name(&row.action)
                .ok_or_else(|| malformed(format!("unknown action `{}`", row.action)))?;
            let level = Level::from_name(&row.level)
                .ok_or_else(|| malformed(format!("unknown level `{}`", row.level)))?;
            entries.insert(
                action,
                DifficultyEntry {
                    accuracy: row.accuracy,
                    count: row.count,
                    level,
                },
            );
        }
        Ok(Self { entries })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Per-action joint accuracy of the tracker on a labelled test set.
/// Actions listed in `required` must each appear at least `min_count` times.
pub fn measure_difficulty(
    net: &Net,
    schema: &Schema,
    test: &[DstExample],
    required: &[UserAction],
    cfg: &CurriculumConfig,
) -> Result<DifficultyTable> {
    let mut tally: BTreeMap<UserAction, (usize, usize)> = BTreeMap::new();
    for ex in test {
        let out = net.forward(&ex.input)?;
        let e = tally.entry(ex.user_action).or_default();
        e.1 += 1;
        if dst_joint_correct(schema, &out, ex) {
            e.0 += 1;
        }
    }
    for a in required {
        let n = tally.get(a).map_or(0, |t| t.1);
        if n < cfg.min_test_per_action {
            return Err(Error::UncoveredAction(format!(
                "{} ({n} < {})",
                a.name(),
                cfg.min_test_per_action
            )));
        }
    }
    let entries = tally
        .into_iter()
        .map(|(a, (ok, n))| {
            let acc = ok as f64 / n as f64;
            (
                a,
                DifficultyEntry {
                    accuracy: acc,
                    count: n,
                    level: assign_level(acc, cfg.easy_threshold, cfg.middle_threshold),
                },
            )
        })
        .collect();
    Ok(DifficultyTable { entries })
}

/// Partitions by the gold user action's level, keeping insertion order.
pub fn split_levels<'a>(
    transitions: &'a [DstExample],
    table: &DifficultyTable,
) -> Result<[Vec<&'a DstExample>; 3]> {
    let mut out: [Vec<&DstExample>; 3] = Default::default();
    for t in transitions {
        out[table.level_of(t.user_action)?.index()].push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumPhasePlan {
    pub phases: Vec<Vec<Level>>,
}

impl CurriculumPhasePlan {
    /// Easy to hard, then middle and hard, then hard alone, then a review of
    /// everything.
    pub fn standard() -> Self {
        use Level::*;
        Self {
            phases: vec![
                vec![Easy, Middle, Hard],
                vec![Middle, Hard],
                vec![Hard],
                vec![Easy, Middle, Hard],
            ],
        }
    }

    pub fn passes(&self, level: Level) -> usize {
        self.phases
            .iter()
            .flatten()
            .filter(|&&l| l == level)
            .count()
    }
}

impl Default for CurriculumPhasePlan {
    fn default() -> Self {
        Self::standard()
    }
}

/// One segment of a tracker update. `phase` is 1-based; 0 marks the single
/// uniform pass used when the curriculum is disabled, with `level` absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase: usize,
    pub level: Option<Level>,
    pub examples: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

fn pass(
    net: &mut Net,
    opt: &mut OptimizerState,
    schema: &Schema,
    data: &[&DstExample],
    batch_size: usize,
) -> Result<(usize, f64)> {
    let mut steps = 0;
    let mut loss = 0.0;
    for chunk in data.chunks(batch_size) {
        loss += dst_supervised_update(net, opt, schema, chunk)?;
        steps += 1;
    }
    Ok((steps, if steps > 0 { loss / steps as f64 } else { 0.0 }))
}

/// Runs the plan over a drained buffer, one pass of mini-batches per
/// segment. With `enabled == false` it is one pass over the drain in order.
pub fn run_curriculum_update(
    net: &mut Net,
    opt: &mut OptimizerState,
    schema: &Schema,
    drained: &[DstExample],
    table: &DifficultyTable,
    plan: &CurriculumPhasePlan,
    batch_size: usize,
    enabled: bool,
) -> Result<Vec<PhaseLog>> {
    if drained.is_empty() {
        log::warn!("tracker update requested on an empty drain; skipped");
        return Ok(Vec::new());
    }
    if !enabled {
        let all: Vec<&DstExample> = drained.iter().collect();
        let (steps, mean_loss) = pass(net, opt, schema, &all, batch_size)?;
        return Ok(vec![PhaseLog {
            phase: 0,
            level: None,
            examples: all.len(),
            steps,
            mean_loss,
        }]);
    }
    let levels = split_levels(drained, table)?;
    let mut logs = Vec::new();
    for (i, phase) in plan.phases.iter().enumerate() {
        for &level in phase {
            let data = &levels[level.index()];
            let (steps, mean_loss) = pass(net, opt, schema, data, batch_size)?;
            logs.push(PhaseLog {
                phase: i + 1,
                level: Some(level),
                examples: data.len(),
                steps,
                mean_loss,
            });
        }
    }
    Ok(logs)
}
