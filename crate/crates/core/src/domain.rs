//! The synthetic slot-filling world: schema, goals, symbolic utterances, the
//! ASR noise channel, database features and episode termination.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EnvConfig;
use crate::error::{Error, Result};

pub type SlotId = usize;

/// A value token is qualified by the slot whose vocabulary it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ValueToken {
    pub slot: SlotId,
    pub value: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemAction {
    Request,
    Confirm,
    InformResult,
    Repeat,
    Bye,
    Greet,
}

impl SystemAction {
    pub const ALL: [SystemAction; 6] = [
        SystemAction::Request,
        SystemAction::Confirm,
        SystemAction::InformResult,
        SystemAction::Repeat,
        SystemAction::Bye,
        SystemAction::Greet,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_slot_bearing(self) -> bool {
        matches!(self, SystemAction::Request | SystemAction::Confirm)
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemAction::Request => "request",
            SystemAction::Confirm => "confirm",
            SystemAction::InformResult => "inform_result",
            SystemAction::Repeat => "repeat",
            SystemAction::Bye => "bye",
            SystemAction::Greet => "greet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserAction {
    InformNorm,
    InformMulti,
    UpdateSub,
    Deny,
    Affirm,
    Silence,
    RestartSlot,
    Bye,
}

impl UserAction {
    pub const ALL: [UserAction; 8] = [
        UserAction::InformNorm,
        UserAction::InformMulti,
        UserAction::UpdateSub,
        UserAction::Deny,
        UserAction::Affirm,
        UserAction::Silence,
        UserAction::RestartSlot,
        UserAction::Bye,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_slot_bearing(self) -> bool {
        matches!(
            self,
            UserAction::InformNorm
                | UserAction::InformMulti
                | UserAction::UpdateSub
                | UserAction::RestartSlot
        )
    }

    pub fn is_inform(self) -> bool {
        matches!(
            self,
            UserAction::InformNorm | UserAction::InformMulti | UserAction::UpdateSub
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            UserAction::InformNorm => "inform_norm",
            UserAction::InformMulti => "inform_multi",
            UserAction::UpdateSub => "update_sub",
            UserAction::Deny => "deny",
            UserAction::Affirm => "affirm",
            UserAction::Silence => "silence",
            UserAction::RestartSlot => "restart_slot",
            UserAction::Bye => "bye",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl fmt::Display for SystemAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for UserAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    System,
    User,
}

/// A dialog act tagged with its speaker, so an utterance can never carry an
/// action from the other party's inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    System(SystemAction),
    User(UserAction),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub act: Act,
    pub slot: Option<SlotId>,
    pub value_tokens: Vec<ValueToken>,
    pub turn: usize,
}

impl Utterance {
    pub fn system(action: SystemAction, slot: Option<SlotId>, turn: usize) -> Self {
        Self {
            act: Act::System(action),
            slot,
            value_tokens: Vec::new(),
            turn,
        }
    }

    pub fn user(action: UserAction, slot: Option<SlotId>, turn: usize) -> Self {
        Self {
            act: Act::User(action),
            slot,
            value_tokens: Vec::new(),
            turn,
        }
    }

    pub fn with_values(mut self, tokens: Vec<ValueToken>) -> Self {
        self.value_tokens = tokens;
        self
    }

    pub fn speaker(&self) -> Speaker {
        match self.act {
            Act::System(_) => Speaker::System,
            Act::User(_) => Speaker::User,
        }
    }

    pub fn system_action(&self) -> Option<SystemAction> {
        match self.act {
            Act::System(a) => Some(a),
            Act::User(_) => None,
        }
    }

    pub fn user_action(&self) -> Option<UserAction> {
        match self.act {
            Act::User(a) => Some(a),
            Act::System(_) => None,
        }
    }

    /// Short symbolic rendering, e.g. `inform_norm(s0=s0_v3)`.
    pub fn render(&self, schema: &Schema) -> String {
        let name = match self.act {
            Act::System(a) => a.name(),
            Act::User(a) => a.name(),
        };
        let mut parts = Vec::new();
        if let Some(s) = self.slot {
            parts.push(schema.slots[s].clone());
        }
        for t in &self.value_tokens {
            parts.push(schema.token_name(*t).to_string());
        }
        format!("{name}({})", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub slots: Vec<String>,
    pub value_vocab: Vec<Vec<String>>,
    pub system_actions: Vec<SystemAction>,
    pub user_actions: Vec<UserAction>,
    pub max_turns: usize,
}

impl Schema {
    pub fn new(
        slots: Vec<String>,
        value_vocab: Vec<Vec<String>>,
        max_turns: usize,
    ) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::Config("schema needs at least one slot".into()));
        }
        if slots.len() != value_vocab.len() {
            return Err(Error::Config("one vocabulary per slot required".into()));
        }
        if has_duplicates(&slots) {
            return Err(Error::Config("slot identifiers must be unique".into()));
        }
        for (slot, vocab) in slots.iter().zip(&value_vocab) {
            if vocab.is_empty() || has_duplicates(vocab) {
                return Err(Error::Config(format!(
                    "vocabulary of `{slot}` must be non-empty and duplicate-free"
                )));
            }
        }
        if max_turns < 2 {
            return Err(Error::Config("max_turns must be >= 2".into()));
        }
        Ok(Self {
            slots,
            value_vocab,
            system_actions: SystemAction::ALL.to_vec(),
            user_actions: UserAction::ALL.to_vec(),
            max_turns,
        })
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn vocab_len(&self, slot: SlotId) -> usize {
        self.value_vocab[slot].len()
    }

    /// Largest vocabulary; encodings pad every slot to this width.
    pub fn max_vocab(&self) -> usize {
        self.value_vocab.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn token_name(&self, t: ValueToken) -> &str {
        &self.value_vocab[t.slot][t.value]
    }

    pub fn contains_token(&self, t: ValueToken) -> bool {
        t.slot < self.n_slots() && t.value < self.vocab_len(t.slot)
    }

    /// The designated confusable neighbour of a token: the next index in the
    /// same slot's vocabulary, wrapping.
    pub fn confusable(&self, t: ValueToken) -> ValueToken {
        ValueToken {
            slot: t.slot,
            value: (t.value + 1) % self.vocab_len(t.slot),
        }
    }

    pub fn validate_utterance(&self, u: &Utterance) -> Result<()> {
        if let Some(s) = u.slot {
            if s >= self.n_slots() {
                return Err(Error::Config(format!("slot {s} outside schema")));
            }
        }
        for t in &u.value_tokens {
            if !self.contains_token(*t) {
                return Err(Error::Config(format!("value token {t:?} outside schema")));
            }
        }
        Ok(())
    }
}

fn has_duplicates(items: &[String]) -> bool {
    let mut seen = std::collections::BTreeSet::new();
    items.iter().any(|s| !seen.insert(s.as_str()))
}

/// Deterministic schema for a configuration: slots `s0..`, values `s{i}_v{j}`.
pub fn build_schema(cfg: &EnvConfig) -> Result<Schema> {
    if cfg.slot_count < 1 {
        return Err(Error::Config("slot_count must be >= 1".into()));
    }
    if cfg.vocab_size < 2 {
        return Err(Error::Config("vocab_size must be >= 2".into()));
    }
    if !(0.0..1.0).contains(&cfg.noise_rate) {
        return Err(Error::Config("noise_rate must be in [0,1)".into()));
    }
    let slots: Vec<String> = (0..cfg.slot_count).map(|i| format!("s{i}")).collect();
    let vocab = (0..cfg.slot_count)
        .map(|i| (0..cfg.vocab_size).map(|j| format!("s{i}_v{j}")).collect())
        .collect();
    Schema::new(slots, vocab, cfg.max_turns)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledUpdate {
    pub revised: usize,
    pub earliest_turn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGoal {
    pub targets: Vec<usize>,
    pub update_schedule: BTreeMap<SlotId, ScheduledUpdate>,
}

impl UserGoal {
    /// The value the user wants for `slot` as of `turn`.
    pub fn value_at(&self, slot: SlotId, turn: usize) -> usize {
        match self.update_schedule.get(&slot) {
            Some(u) if turn >= u.earliest_turn => u.revised,
            _ => self.targets[slot],
        }
    }

    pub fn original(&self, slot: SlotId) -> usize {
        self.targets[slot]
    }

    /// Targets after every scheduled revision has been applied.
    pub fn final_targets(&self) -> Vec<usize> {
        (0..self.targets.len())
            .map(|s| {
                self.update_schedule
                    .get(&s)
                    .map_or(self.targets[s], |u| u.revised)
            })
            .collect()
    }

    pub fn values_at(&self, turn: usize) -> Vec<usize> {
        (0..self.targets.len())
            .map(|s| self.value_at(s, turn))
            .collect()
    }
}

/// Samples a goal: one uniform value per slot, and each slot independently
/// scheduled for a mid-dialog revision with probability `update_prob`.
pub fn sample_goal(schema: &Schema, update_prob: f64, rng: &mut impl Rng) -> UserGoal {
    let n = schema.n_slots();
    let targets: Vec<usize> = (0..n)
        .map(|s| rng.gen_range(0..schema.vocab_len(s)))
        .collect();
    let latest = n.saturating_sub(1).max(1);
    let mut update_schedule = BTreeMap::new();
    for (s, &orig) in targets.iter().enumerate() {
        let draw: f64 = rng.gen();
        if draw < update_prob && schema.vocab_len(s) > 1 {
            let mut revised = rng.gen_range(0..schema.vocab_len(s) - 1);
            if revised >= orig {
                revised += 1;
            }
            let earliest_turn = rng.gen_range(1..=latest);
            update_schedule.insert(
                s,
                ScheduledUpdate {
                    revised,
                    earliest_turn,
                },
            );
        }
    }
    UserGoal {
        targets,
        update_schedule,
    }
}

/// ASR noise: every value token is independently swapped for its confusable
/// neighbour with probability `noise_rate`. Action and slot are untouched.
pub fn corrupt(
    utterance: &Utterance,
    noise_rate: f64,
    schema: &Schema,
    rng: &mut impl Rng,
) -> Utterance {
    let mut out = utterance.clone();
    for t in &mut out.value_tokens {
        let draw: f64 = rng.gen();
        if draw < noise_rate {
            *t = schema.confusable(*t);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefState {
    pub values: Vec<Option<usize>>,
}

impl BeliefState {
    pub fn empty(schema: &Schema) -> Self {
        Self {
            values: vec![None; schema.n_slots()],
        }
    }

    pub fn filled(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    pub fn first_unfilled(&self) -> Option<SlotId> {
        self.values.iter().position(Option::is_none)
    }

    pub fn matches(&self, targets: &[usize]) -> bool {
        self.values.len() == targets.len()
            && self.values.iter().zip(targets).all(|(v, t)| *v == Some(*t))
    }

    pub fn is_valid(&self, schema: &Schema) -> bool {
        self.values.len() == schema.n_slots()
            && self
                .values
                .iter()
                .enumerate()
                .all(|(s, v)| v.is_none_or(|v| v < schema.vocab_len(s)))
    }

    /// Tokens for every filled slot, in slot order.
    pub fn tokens(&self) -> Vec<ValueToken> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(slot, v)| v.map(|value| ValueToken { slot, value }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Success,
    Failure,
    Ongoing,
}

impl Terminal {
    pub fn is_terminal(self) -> bool {
        self != Terminal::Ongoing
    }
}

/// Terminal signal. `closed` means the system has issued `bye`; the user's
/// own `bye` never ends a dialog.
pub fn success_check(
    bs: &BeliefState,
    goal: &UserGoal,
    closed: bool,
    turn: usize,
    max_turns: usize,
) -> Terminal {
    if closed {
        if turn <= max_turns && bs.matches(&goal.final_targets()) {
            Terminal::Success
        } else {
            Terminal::Failure
        }
    } else if turn >= max_turns {
        Terminal::Failure
    } else {
        Terminal::Ongoing
    }
}

/// Entity table sampled once per schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Database {
    pub entities: Vec<Vec<usize>>,
}

impl Database {
    /// Distinct random value combinations; capped at the number that exist.
    pub fn generate(schema: &Schema, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD8_D8_D8);
        let total: f64 = (0..schema.n_slots())
            .map(|s| schema.vocab_len(s) as f64)
            .product();
        let size = if total < size as f64 {
            total as usize
        } else {
            size
        };
        let mut seen = std::collections::BTreeSet::new();
        let mut entities = Vec::with_capacity(size);
        while entities.len() < size {
            let e: Vec<usize> = (0..schema.n_slots())
                .map(|s| rng.gen_range(0..schema.vocab_len(s)))
                .collect();
            if seen.insert(e.clone()) {
                entities.push(e);
            }
        }
        Self { entities }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryFeature {
    pub match_count_bucket: u8,
    pub filled_fraction: f64,
}

pub fn db_query(bs: &BeliefState, db: &Database) -> QueryFeature {
    let matches = db
        .entities
        .iter()
        .filter(|e| {
            bs.values
                .iter()
                .zip(e.iter())
                .all(|(b, v)| b.is_none_or(|b| b == *v))
        })
        .take(2)
        .count();
    QueryFeature {
        match_count_bucket: matches as u8,
        filled_fraction: bs.filled() as f64 / bs.values.len() as f64,
    }
}

/// One per-slot tracking operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotOp {
    Keep,
    Set(usize),
    Clear,
}

impl SlotOp {
    /// Class index in a head of width `vocab + 2`: keep, set-v.., clear.
    pub fn class(self, vocab: usize) -> usize {
        match self {
            SlotOp::Keep => 0,
            SlotOp::Set(v) => v + 1,
            SlotOp::Clear => vocab + 1,
        }
    }

    pub fn from_class(class: usize, vocab: usize) -> Self {
        if class == 0 {
            SlotOp::Keep
        } else if class <= vocab {
            SlotOp::Set(class - 1)
        } else {
            SlotOp::Clear
        }
    }

    pub fn apply(self, prev: Option<usize>) -> Option<usize> {
        match self {
            SlotOp::Keep => prev,
            SlotOp::Set(v) => Some(v),
            SlotOp::Clear => None,
        }
    }
}

pub fn ops_between(prev: &BeliefState, next: &BeliefState) -> Vec<SlotOp> {
    prev.values
        .iter()
        .zip(&next.values)
        .map(|(p, n)| match (p, n) {
            _ if p == n => SlotOp::Keep,
            (_, None) => SlotOp::Clear,
            (_, Some(v)) => SlotOp::Set(*v),
        })
        .collect()
}

pub fn apply_ops(prev: &BeliefState, ops: &[SlotOp]) -> BeliefState {
    BeliefState {
        values: prev
            .values
            .iter()
            .zip(ops)
            .map(|(p, op)| op.apply(*p))
            .collect(),
    }
}

/// Rule-based tracker. Fed clean user utterances it defines the gold state;
/// fed noisy ones it is what the scripted corpus system uses.
pub fn rule_track(prev: &BeliefState, system: &Utterance, user: &Utterance) -> BeliefState {
    let mut next = prev.clone();
    let Some(action) = user.user_action() else {
        return next;
    };
    match action {
        UserAction::InformNorm | UserAction::InformMulti => {
            for t in &user.value_tokens {
                if t.slot < next.values.len() {
                    next.values[t.slot] = Some(t.value);
                }
            }
        }
        UserAction::UpdateSub => {
            if let (Some(s), Some(t)) = (user.slot, user.value_tokens.last()) {
                if s < next.values.len() && t.slot == s {
                    next.values[s] = Some(t.value);
                }
            }
        }
        UserAction::Deny => {
            if system.system_action() == Some(SystemAction::Confirm) {
                if let Some(s) = system.slot {
                    next.values[s] = None;
                }
            }
        }
        UserAction::RestartSlot => {
            if let Some(s) = user.slot {
                next.values[s] = None;
            }
        }
        UserAction::Affirm | UserAction::Silence | UserAction::Bye => {}
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema(slots: usize, vocab: usize) -> Schema {
        build_schema(&EnvConfig {
            slot_count: slots,
            vocab_size: vocab,
            ..EnvConfig::default()
        })
        .unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn build_schema_three_by_eight() {
        let s = schema(3, 8);
        assert_eq!(s.n_slots(), 3);
        assert!(s.value_vocab.iter().all(|v| v.len() == 8));
    }

    #[test]
    fn build_schema_rejects_zero_slots() {
        let cfg = EnvConfig {
            slot_count: 0,
            ..EnvConfig::default()
        };
        assert!(matches!(build_schema(&cfg), Err(Error::Config(_))));
        let cfg = EnvConfig {
            vocab_size: 1,
            ..EnvConfig::default()
        };
        assert!(build_schema(&cfg).is_err());
    }

    #[test]
    fn default_inventory_sizes() {
        let s = build_schema(&EnvConfig::default()).unwrap();
        assert_eq!(s.system_actions.len(), 6);
        assert_eq!(s.user_actions.len(), 8);
    }

    #[test]
    fn schema_rejects_duplicates() {
        let err = Schema::new(
            vec!["a".into(), "a".into()],
            vec![vec!["x".into()], vec!["y".into()]],
            4,
        );
        assert!(err.is_err());
        let err = Schema::new(vec!["a".into()], vec![vec!["x".into(), "x".into()]], 4);
        assert!(err.is_err());
        let err = Schema::new(vec!["a".into()], vec![vec!["x".into()]], 1);
        assert!(err.is_err());
    }

    #[test]
    fn sample_goal_without_updates() {
        let s = schema(3, 8);
        let mut r = rng(1);
        for _ in 0..100 {
            assert!(sample_goal(&s, 0.0, &mut r).update_schedule.is_empty());
        }
    }

    #[test]
    fn sample_goal_update_frequency() {
        let s = schema(3, 8);
        let p = 1.0 - 1e-9;
        let mut r = rng(2);
        let mut scheduled = 0usize;
        let n = 10_000;
        for _ in 0..n {
            scheduled += sample_goal(&s, p, &mut r).update_schedule.len();
        }
        let frac = scheduled as f64 / (3 * n) as f64;
        assert!((frac - p).abs() <= 0.02, "{frac}");

        let mut r = rng(3);
        let mut scheduled = 0usize;
        for _ in 0..n {
            scheduled += sample_goal(&s, 0.3, &mut r).update_schedule.len();
        }
        let frac = scheduled as f64 / (3 * n) as f64;
        assert!((frac - 0.3).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn sample_goal_is_deterministic() {
        let s = schema(3, 8);
        let a = sample_goal(&s, 0.5, &mut rng(9));
        let b = sample_goal(&s, 0.5, &mut rng(9));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_goal_membership_over_many_seeds() {
        let s = schema(4, 5);
        for seed in 0..10_000u64 {
            let g = sample_goal(&s, 0.5, &mut rng(seed));
            assert_eq!(g.targets.len(), 4);
            for (slot, &v) in g.targets.iter().enumerate() {
                assert!(v < s.vocab_len(slot));
            }
            for (&slot, u) in &g.update_schedule {
                assert!(slot < 4);
                assert!(u.revised < s.vocab_len(slot));
                assert_ne!(u.revised, g.targets[slot]);
                assert!(u.earliest_turn >= 1);
            }
            let fin = g.final_targets();
            for (&slot, u) in &g.update_schedule {
                assert_eq!(fin[slot], u.revised);
            }
        }
    }

    fn inform(slot: usize, value: usize) -> Utterance {
        Utterance::user(UserAction::InformNorm, Some(slot), 1)
            .with_values(vec![ValueToken { slot, value }])
    }

    #[test]
    fn corrupt_zero_is_identity() {
        let s = schema(3, 8);
        let u = inform(0, 3);
        let mut r = rng(4);
        for _ in 0..1000 {
            assert_eq!(corrupt(&u, 0.0, &s, &mut r), u);
        }
    }

    #[test]
    fn corrupt_moves_to_neighbour() {
        let s = schema(3, 8);
        let out = corrupt(&inform(0, 3), 1.0 - 1e-12, &s, &mut rng(5));
        assert_eq!(out.value_tokens, vec![ValueToken { slot: 0, value: 4 }]);
        assert_eq!(out.act, Act::User(UserAction::InformNorm));
        assert_eq!(out.slot, Some(0));
        let wrap = corrupt(&inform(1, 7), 1.0 - 1e-12, &s, &mut rng(5));
        assert_eq!(wrap.value_tokens[0].value, 0);
    }

    #[test]
    fn corrupt_frequency() {
        let s = schema(3, 8);
        let u = inform(2, 5);
        let mut r = rng(6);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| corrupt(&u, 0.15, &s, &mut r).value_tokens[0].value != 5)
            .count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.15).abs() <= 0.01, "{f}");
    }

    fn goal(targets: Vec<usize>) -> UserGoal {
        UserGoal {
            targets,
            update_schedule: BTreeMap::new(),
        }
    }

    #[test]
    fn success_cases() {
        let g = goal(vec![1, 2, 3]);
        let bs = BeliefState {
            values: vec![Some(1), Some(2), Some(3)],
        };
        assert_eq!(success_check(&bs, &g, true, 5, 16), Terminal::Success);
        let mut wrong = bs.clone();
        wrong.values[1] = Some(0);
        assert_eq!(success_check(&wrong, &g, true, 5, 16), Terminal::Failure);
        assert_eq!(success_check(&bs, &g, false, 16, 16), Terminal::Failure);
        assert_eq!(success_check(&bs, &g, false, 5, 16), Terminal::Ongoing);
    }

    #[test]
    fn success_uses_final_targets() {
        let mut g = goal(vec![1, 2]);
        g.update_schedule.insert(
            0,
            ScheduledUpdate {
                revised: 4,
                earliest_turn: 2,
            },
        );
        let old = BeliefState {
            values: vec![Some(1), Some(2)],
        };
        let new = BeliefState {
            values: vec![Some(4), Some(2)],
        };
        assert_eq!(success_check(&old, &g, true, 3, 16), Terminal::Failure);
        assert_eq!(success_check(&new, &g, true, 3, 16), Terminal::Success);
    }

    #[test]
    fn success_requires_every_slot() {
        // exhaustive single-slot perturbation
        let s = schema(3, 4);
        let g = goal(vec![0, 3, 2]);
        let good = BeliefState {
            values: vec![Some(0), Some(3), Some(2)],
        };
        for slot in 0..3 {
            for alt in (0..s.vocab_len(slot)).map(Some).chain([None]) {
                let mut bs = good.clone();
                bs.values[slot] = alt;
                let expect = if alt == good.values[slot] {
                    Terminal::Success
                } else {
                    Terminal::Failure
                };
                assert_eq!(success_check(&bs, &g, true, 4, 16), expect);
            }
        }
    }

    fn brute_force_bucket(bs: &BeliefState, db: &Database) -> u8 {
        let mut count = 0;
        for e in &db.entities {
            let mut ok = true;
            for (s, b) in bs.values.iter().enumerate() {
                if let Some(v) = b {
                    if e[s] != *v {
                        ok = false;
                    }
                }
            }
            if ok {
                count += 1;
            }
        }
        count.min(2)
    }

    #[test]
    fn db_query_vacuous_filter() {
        let s = schema(3, 8);
        let db = Database::generate(&s, 10, 1);
        let q = db_query(&BeliefState::empty(&s), &db);
        assert_eq!(q.match_count_bucket, 2);
        assert_eq!(q.filled_fraction, 0.0);
    }

    #[test]
    fn db_query_single_and_none() {
        let s = schema(3, 8);
        let db = Database::generate(&s, 10, 1);
        let e = db.entities[0].clone();
        let bs = BeliefState {
            values: e.iter().map(|&v| Some(v)).collect(),
        };
        assert_eq!(db_query(&bs, &db).match_count_bucket, 1);
        assert_eq!(db_query(&bs, &db).filled_fraction, 1.0);
        // a full combination not in the table
        let missing = (0..8)
            .flat_map(|a| (0..8).flat_map(move |b| (0..8).map(move |c| vec![a, b, c])))
            .find(|c| !db.entities.contains(c))
            .unwrap();
        let bs = BeliefState {
            values: missing.into_iter().map(Some).collect(),
        };
        assert_eq!(db_query(&bs, &db).match_count_bucket, 0);
    }

    #[test]
    fn db_query_matches_brute_force_exhaustively() {
        let s = schema(3, 4);
        let db = Database::generate(&s, 20, 7);
        let opts: Vec<Option<usize>> = (0..4).map(Some).chain([None]).collect();
        for a in &opts {
            for b in &opts {
                for c in &opts {
                    let bs = BeliefState {
                        values: vec![*a, *b, *c],
                    };
                    assert_eq!(
                        db_query(&bs, &db).match_count_bucket,
                        brute_force_bucket(&bs, &db)
                    );
                }
            }
        }
    }

    #[test]
    fn database_is_distinct_and_capped() {
        let s = schema(2, 2);
        let db = Database::generate(&s, 50, 3);
        assert_eq!(db.entities.len(), 4);
    }

    #[test]
    fn slot_op_classes_round_trip() {
        for op in [SlotOp::Keep, SlotOp::Set(0), SlotOp::Set(7), SlotOp::Clear] {
            assert_eq!(SlotOp::from_class(op.class(8), 8), op);
        }
    }

    #[test]
    fn rule_tracker_update_and_deny() {
        let s = schema(3, 8);
        let mut bs = BeliefState::empty(&s);
        let greet = Utterance::system(SystemAction::Greet, None, 0);
        bs = rule_track(&bs, &greet, &inform(0, 3));
        assert_eq!(bs.values[0], Some(3));
        let upd = Utterance::user(UserAction::UpdateSub, Some(0), 2).with_values(vec![
            ValueToken { slot: 0, value: 3 },
            ValueToken { slot: 0, value: 5 },
        ]);
        bs = rule_track(
            &bs,
            &Utterance::system(SystemAction::Request, Some(1), 2),
            &upd,
        );
        assert_eq!(bs.values[0], Some(5));
        let confirm = Utterance::system(SystemAction::Confirm, Some(0), 3)
            .with_values(vec![ValueToken { slot: 0, value: 5 }]);
        let deny = Utterance::user(UserAction::Deny, None, 3);
        bs = rule_track(&bs, &confirm, &deny);
        assert_eq!(bs.values[0], None);
    }

    proptest! {
        #[test]
        fn corrupt_never_touches_action_or_slot(
            slot in 0usize..3, value in 0usize..8, seed in any::<u64>(), rate in 0.0f64..0.99
        ) {
            let s = schema(3, 8);
            let u = inform(slot, value);
            let out = corrupt(&u, rate, &s, &mut rng(seed));
            prop_assert_eq!(out.act, u.act);
            prop_assert_eq!(out.slot, u.slot);
            prop_assert!(s.contains_token(out.value_tokens[0]));
        }

        #[test]
        fn ops_between_reconstructs(
            a in proptest::collection::vec(proptest::option::of(0usize..8), 3),
            b in proptest::collection::vec(proptest::option::of(0usize..8), 3),
        ) {
            let prev = BeliefState { values: a };
            let next = BeliefState { values: b };
            prop_assert_eq!(apply_ops(&prev, &ops_between(&prev, &next)), next);
        }
    }
}
