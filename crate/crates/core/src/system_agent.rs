//! The dialog system: a neural tracker that rewrites the belief state from
//! the latest exchange, and a two-headed policy over system acts.

use std::path::Path;

use rand::Rng;

use crate::domain::{
    apply_ops, BeliefState, QueryFeature, Schema, SlotId, SlotOp, SystemAction, UserAction,
    Utterance, ValueToken,
};
use crate::error::{Error, Result};
use crate::nnet::{
    apply_gradients, argmax, cross_entropy_loss_grad, GradientTape, Net, OptimizerState,
};
use crate::policy::{choose, zero_critic, DecodeMode, HeadLayout};

pub const N_SYSTEM_ACTIONS: usize = SystemAction::ALL.len();
pub const N_USER_ACTIONS: usize = UserAction::ALL.len();

fn onehot(out: &mut Vec<f64>, size: usize, index: Option<usize>) {
    let start = out.len();
    out.resize(start + size, 0.0);
    if let Some(i) = index {
        out[start + i] = 1.0;
    }
}

fn push_values(out: &mut Vec<f64>, schema: &Schema, tokens: &[ValueToken]) {
    let v = schema.max_vocab();
    let start = out.len();
    out.resize(start + schema.n_slots() * v, 0.0);
    for t in tokens {
        out[start + t.slot * v + t.value] = 1.0;
    }
}

fn slot_index(schema: &Schema, slot: Option<SlotId>) -> usize {
    slot.unwrap_or(schema.n_slots())
}

/// Action one-hot, slot one-hot (last position = no slot), value multi-hot.
pub fn encode_system_utterance(schema: &Schema, utt: &Utterance) -> Vec<f64> {
    let mut out = Vec::with_capacity(system_utterance_dim(schema));
    onehot(
        &mut out,
        N_SYSTEM_ACTIONS,
        utt.system_action().map(SystemAction::index),
    );
    onehot(
        &mut out,
        schema.n_slots() + 1,
        Some(slot_index(schema, utt.slot)),
    );
    push_values(&mut out, schema, &utt.value_tokens);
    out
}

pub fn encode_user_utterance(schema: &Schema, utt: &Utterance) -> Vec<f64> {
    let mut out = Vec::with_capacity(user_utterance_dim(schema));
    onehot(
        &mut out,
        N_USER_ACTIONS,
        utt.user_action().map(UserAction::index),
    );
    onehot(
        &mut out,
        schema.n_slots() + 1,
        Some(slot_index(schema, utt.slot)),
    );
    push_values(&mut out, schema, &utt.value_tokens);
    out
}

pub fn system_utterance_dim(schema: &Schema) -> usize {
    N_SYSTEM_ACTIONS + schema.n_slots() + 1 + schema.n_slots() * schema.max_vocab()
}

pub fn user_utterance_dim(schema: &Schema) -> usize {
    N_USER_ACTIONS + schema.n_slots() + 1 + schema.n_slots() * schema.max_vocab()
}

/// Per slot, a one-hot over its values plus a final "empty" position.
pub fn encode_belief(schema: &Schema, bs: &BeliefState) -> Vec<f64> {
    let v = schema.max_vocab();
    let mut out = Vec::with_capacity(belief_dim(schema));
    for value in &bs.values {
        onehot(&mut out, v + 1, Some(value.unwrap_or(v)));
    }
    out
}

pub fn belief_dim(schema: &Schema) -> usize {
    schema.n_slots() * (schema.max_vocab() + 1)
}

pub fn dst_input(
    schema: &Schema,
    prev_sys: &Utterance,
    user: &Utterance,
    prev_bs: &BeliefState,
) -> Vec<f64> {
    let mut out = encode_system_utterance(schema, prev_sys);
    out.extend(encode_user_utterance(schema, user));
    out.extend(encode_belief(schema, prev_bs));
    out
}

pub fn dst_input_dim(schema: &Schema) -> usize {
    system_utterance_dim(schema) + user_utterance_dim(schema) + belief_dim(schema)
}

pub fn dst_output_dim(schema: &Schema) -> usize {
    schema.n_slots() * (schema.max_vocab() + 2) + N_USER_ACTIONS
}

pub fn encode_query(q: &QueryFeature) -> [f64; 4] {
    let mut out = [0.0; 4];
    out[usize::from(q.match_count_bucket.min(2))] = 1.0;
    out[3] = q.filled_fraction;
    out
}

pub fn policy_input_dim(schema: &Schema, ctx_dim: usize) -> usize {
    N_SYSTEM_ACTIONS + schema.n_slots() + 1 + belief_dim(schema) + ctx_dim + 4
}

pub fn system_layout(schema: &Schema) -> HeadLayout {
    HeadLayout {
        n_actions: N_SYSTEM_ACTIONS,
        n_slots: schema.n_slots(),
        slot_bearing: SystemAction::ALL
            .iter()
            .map(|a| a.is_slot_bearing())
            .collect(),
    }
}

/// What the tracker produced for one exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct DstOutput {
    pub bs: BeliefState,
    pub ops: Vec<SlotOp>,
    pub user_action: UserAction,
    /// Last hidden layer of the tracker; the policy reads it as dialog context.
    pub ctx: Vec<f64>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemDecision {
    pub action: SystemAction,
    pub slot: Option<SlotId>,
    pub logp_action: f64,
    pub logp_slot: f64,
}

/// One supervised example for the tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct DstExample {
    pub input: Vec<f64>,
    pub ops: Vec<SlotOp>,
    pub user_action: UserAction,
}

fn slot_head(schema: &Schema, s: SlotId) -> std::ops::Range<usize> {
    let w = schema.max_vocab() + 2;
    s * w..(s + 1) * w
}

fn action_head(schema: &Schema) -> std::ops::Range<usize> {
    let start = schema.n_slots() * (schema.max_vocab() + 2);
    start..start + N_USER_ACTIONS
}

/// Best op for one slot among the classes valid for its vocabulary.
fn decode_op(schema: &Schema, s: SlotId, logits: &[f64]) -> SlotOp {
    let v = schema.max_vocab();
    let len = schema.vocab_len(s);
    let mut best = 0;
    for c in 1..logits.len() {
        let valid = c <= len || c == v + 1;
        if valid && logits[c] > logits[best] {
            best = c;
        }
    }
    SlotOp::from_class(best, v)
}

pub fn decode_dst(schema: &Schema, out: &[f64]) -> (Vec<SlotOp>, UserAction) {
    let ops = (0..schema.n_slots())
        .map(|s| decode_op(schema, s, &out[slot_head(schema, s)]))
        .collect();
    let a = argmax(&out[action_head(schema)]);
    (ops, UserAction::ALL[a])
}

/// Summed cross-entropy over every slot head and the user-action head.
pub fn dst_loss_grad(schema: &Schema, out: &[f64], ex: &DstExample) -> Result<(f64, Vec<f64>)> {
    if ex.ops.len() != schema.n_slots() {
        return Err(Error::Dimension {
            expected: schema.n_slots(),
            got: ex.ops.len(),
            context: "dst example ops",
        });
    }
    let v = schema.max_vocab();
    let mut up = vec![0.0; out.len()];
    let mut loss = 0.0;
    for (s, op) in ex.ops.iter().enumerate() {
        let r = slot_head(schema, s);
        let (l, g) = cross_entropy_loss_grad(&out[r.clone()], op.class(v))?;
        loss += l;
        up[r].copy_from_slice(&g);
    }
    let r = action_head(schema);
    let (l, g) = cross_entropy_loss_grad(&out[r.clone()], ex.user_action.index())?;
    loss += l;
    up[r].copy_from_slice(&g);
    Ok((loss, up))
}

/// Every slot op and the user action are predicted correctly.
pub fn dst_joint_correct(schema: &Schema, out: &[f64], ex: &DstExample) -> bool {
    let (ops, act) = decode_dst(schema, out);
    ops == ex.ops && act == ex.user_action
}

/// Batch-mean tracker loss; one optimizer step.
pub fn dst_supervised_update(
    net: &mut Net,
    opt: &mut OptimizerState,
    schema: &Schema,
    batch: &[&DstExample],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("dst_supervised_update"));
    }
    let mut tape = GradientTape::zeros_like(net);
    let mut total = 0.0;
    for ex in batch {
        let acts = net.forward_cached(&ex.input)?;
        let (l, up) = dst_loss_grad(schema, acts.output(), ex)?;
        total += l;
        net.backward_into(&acts, &up, &mut tape)?;
    }
    let n = batch.len() as f64;
    tape.scale(1.0 / n);
    apply_gradients(net, &tape, opt)?;
    Ok(total / n)
}

/// Tracker, policy and critic of the dialog system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemAgent {
    pub dst: Net,
    pub dp: Net,
    pub critic: Net,
    layout: HeadLayout,
}

impl SystemAgent {
    pub fn new(schema: &Schema, hidden: usize, rng: &mut impl Rng) -> Self {
        let dst = Net::new(
            &[
                dst_input_dim(schema),
                hidden,
                hidden,
                dst_output_dim(schema),
            ],
            rng,
        );
        let p_in = policy_input_dim(schema, hidden);
        let layout = system_layout(schema);
        let dp = Net::new(&[p_in, hidden, hidden, layout.width()], rng);
        let critic = zero_critic(p_in, hidden, rng);
        Self {
            dst,
            dp,
            critic,
            layout,
        }
    }

    pub fn layout(&self) -> &HeadLayout {
        &self.layout
    }

    pub fn ctx_dim(&self) -> usize {
        let dims = self.dst.layer_dims();
        dims[dims.len() - 2]
    }

    pub fn track(
        &self,
        schema: &Schema,
        prev_bs: &BeliefState,
        prev_sys: &Utterance,
        user: &Utterance,
    ) -> Result<DstOutput> {
        let input = dst_input(schema, prev_sys, user, prev_bs);
        let acts = self.dst.forward_cached(&input)?;
        let out = acts.output();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tracker output"));
        }
        let (ops, user_action) = decode_dst(schema, out);
        Ok(DstOutput {
            bs: apply_ops(prev_bs, &ops),
            ops,
            user_action,
            ctx: acts.last_hidden().to_vec(),
            input,
        })
    }

    /// `[previous act; previous slot; belief; tracker context; query]`.
    pub fn policy_input(
        &self,
        schema: &Schema,
        prev: (SystemAction, Option<SlotId>),
        bs: &BeliefState,
        ctx: &[f64],
        q: &QueryFeature,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dp.input_dim());
        onehot(&mut out, N_SYSTEM_ACTIONS, Some(prev.0.index()));
        onehot(
            &mut out,
            schema.n_slots() + 1,
            Some(slot_index(schema, prev.1)),
        );
        out.extend(encode_belief(schema, bs));
        out.extend_from_slice(ctx);
        out.extend(encode_query(q));
        out
    }

    pub fn decide(
        &self,
        input: &[f64],
        mode: DecodeMode,
        rng: &mut impl Rng,
    ) -> Result<SystemDecision> {
        let out = self.dp.forward(input)?;
        let c = choose(&self.layout, &out, mode, rng)?;
        Ok(SystemDecision {
            action: SystemAction::ALL[c.action],
            slot: c.slot,
            logp_action: c.logp_action,
            logp_slot: c.logp_slot,
        })
    }

    pub fn value(&self, input: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(input)?[0])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dst.save(&dir.join("dst.bin"))?;
        self.dp.save(&dir.join("dp.bin"))?;
        self.critic.save(&dir.join("critic.bin"))
    }

    pub fn load(dir: &Path, schema: &Schema) -> Result<Self> {
        let dst = Net::load(&dir.join("dst.bin"))?;
        let dp = Net::load(&dir.join("dp.bin"))?;
        let critic = Net::load(&dir.join("critic.bin"))?;
        let layout = system_layout(schema);
        let ctx = dst.layer_dims().iter().rev().nth(1).copied().unwrap_or(0);
        let checks = [
            (dst.input_dim(), dst_input_dim(schema), "dst.bin"),
            (dst.output_dim(), dst_output_dim(schema), "dst.bin"),
            (dp.input_dim(), policy_input_dim(schema, ctx), "dp.bin"),
            (dp.output_dim(), layout.width(), "dp.bin"),
            (critic.input_dim(), dp.input_dim(), "critic.bin"),
            (critic.output_dim(), 1, "critic.bin"),
        ];
        for (got, expected, file) in checks {
            if got != expected {
                return Err(Error::Checkpoint {
                    path: dir.join(file),
                    reason: format!("shape {got} does not fit the schema (expected {expected})"),
                });
            }
        }
        Ok(Self {
            dst,
            dp,
            critic,
            layout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EnvConfig;
    use crate::domain::{build_schema, ValueToken};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema() -> Schema {
        build_schema(&EnvConfig::default()).unwrap()
    }

    fn agent(seed: u64) -> (Schema, SystemAgent) {
        let s = schema();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = SystemAgent::new(&s, 32, &mut r);
        (s, a)
    }

    fn sample_exchange(s: &Schema) -> (Utterance, Utterance, BeliefState) {
        let sys = Utterance::system(SystemAction::Request, Some(1), 2);
        let user = Utterance::user(UserAction::InformNorm, Some(1), 2)
            .with_values(vec![ValueToken { slot: 1, value: 4 }]);
        let mut bs = BeliefState::empty(s);
        bs.values[0] = Some(3);
        (sys, user, bs)
    }

    #[test]
    fn encodings_have_declared_sizes() {
        let s = schema();
        let (sys, user, bs) = sample_exchange(&s);
        assert_eq!(
            encode_system_utterance(&s, &sys).len(),
            system_utterance_dim(&s)
        );
        assert_eq!(
            encode_user_utterance(&s, &user).len(),
            user_utterance_dim(&s)
        );
        assert_eq!(encode_belief(&s, &bs).len(), belief_dim(&s));
        assert_eq!(dst_input(&s, &sys, &user, &bs).len(), dst_input_dim(&s));
        let b = encode_belief(&s, &bs);
        assert_eq!(b.iter().sum::<f64>(), 3.0);
        assert_eq!(b[3], 1.0);
        assert_eq!(b[9 + 8], 1.0);
    }

    #[test]
    fn tracker_output_stays_in_domain() {
        let (s, a) = agent(1);
        let (sys, user, bs) = sample_exchange(&s);
        let out = a.track(&s, &bs, &sys, &user).unwrap();
        assert!(out.bs.is_valid(&s));
        assert_eq!(out.ctx.len(), a.ctx_dim());
        assert_eq!(out.ops.len(), 3);
    }

    #[test]
    fn greedy_decision_is_deterministic() {
        let (s, a) = agent(2);
        let bs = BeliefState::empty(&s);
        let q = QueryFeature {
            match_count_bucket: 2,
            filled_fraction: 0.0,
        };
        let input = a.policy_input(&s, (SystemAction::Greet, None), &bs, &vec![0.1; 32], &q);
        assert_eq!(input.len(), a.dp.input_dim());
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let d1 = a.decide(&input, DecodeMode::Greedy, &mut r1).unwrap();
        let d2 = a.decide(&input, DecodeMode::Greedy, &mut r2).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(a.value(&input).unwrap(), 0.0);
    }

    #[test]
    fn uniform_heads_sample_uniformly() {
        let s = schema();
        let mut a = agent(3).1;
        a.dp.zero_output_layer();
        let input = vec![0.0; a.dp.input_dim()];
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let mut counts = [0usize; N_SYSTEM_ACTIONS];
        let n = 12_000;
        for _ in 0..n {
            let d = a.decide(&input, DecodeMode::Sample, &mut r).unwrap();
            counts[d.action.index()] += 1;
            assert_eq!(d.slot.is_some(), d.action.is_slot_bearing());
            if let Some(slot) = d.slot {
                assert!(slot < s.n_slots());
            }
        }
        for c in counts {
            let p = c as f64 / n as f64;
            assert!((p - 1.0 / 6.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn tracker_overfits_a_small_set() {
        let (s, mut a) = agent(4);
        let (sys, user, bs) = sample_exchange(&s);
        let ex = DstExample {
            input: dst_input(&s, &sys, &user, &bs),
            ops: vec![SlotOp::Keep, SlotOp::Set(4), SlotOp::Keep],
            user_action: UserAction::InformNorm,
        };
        let ex2 = DstExample {
            input: dst_input(
                &s,
                &Utterance::system(SystemAction::Confirm, Some(0), 3)
                    .with_values(vec![ValueToken { slot: 0, value: 3 }]),
                &Utterance::user(UserAction::Deny, None, 3),
                &bs,
            ),
            ops: vec![SlotOp::Clear, SlotOp::Keep, SlotOp::Keep],
            user_action: UserAction::Deny,
        };
        let mut opt = OptimizerState::new(&a.dst, 1e-3, 5.0);
        let batch = [&ex, &ex2];
        let first = dst_supervised_update(&mut a.dst, &mut opt, &s, &batch).unwrap();
        let mut last = first;
        for _ in 0..300 {
            last = dst_supervised_update(&mut a.dst, &mut opt, &s, &batch).unwrap();
        }
        assert!(last < first * 0.05, "{first} -> {last}");
        for ex in batch {
            let out = a.dst.forward(&ex.input).unwrap();
            assert!(dst_joint_correct(&s, &out, ex));
        }
    }

    #[test]
    fn dst_gradient_matches_finite_differences() {
        let (s, a) = agent(5);
        let (sys, user, bs) = sample_exchange(&s);
        let ex = DstExample {
            input: dst_input(&s, &sys, &user, &bs),
            ops: vec![SlotOp::Keep, SlotOp::Set(4), SlotOp::Clear],
            user_action: UserAction::InformNorm,
        };
        let out = a.dst.forward(&ex.input).unwrap();
        let (_, up) = dst_loss_grad(&s, &out, &ex).unwrap();
        let h = 1e-6;
        for i in [0usize, 5, 11, 33, out.len() - 1] {
            let mut p = out.clone();
            p[i] += h;
            let mut m = out.clone();
            m[i] -= h;
            let num = (dst_loss_grad(&s, &p, &ex).unwrap().0
                - dst_loss_grad(&s, &m, &ex).unwrap().0)
                / (2.0 * h);
            assert!((num - up[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let (s, a) = agent(6);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let b = SystemAgent::load(dir.path(), &s).unwrap();
        assert_eq!(a, b);
        let other = build_schema(&EnvConfig {
            slot_count: 4,
            ..EnvConfig::default()
        })
        .unwrap();
        assert!(matches!(
            SystemAgent::load(dir.path(), &other),
            Err(Error::Checkpoint { .. })
        ));
    }
}
