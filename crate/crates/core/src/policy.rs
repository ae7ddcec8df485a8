//! Two-headed policy nets (action head + slot head over one trunk) shared by
//! the system and user agents, and the advantage actor-critic update.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nnet::{
    advantage, apply_gradients, critic_loss_grad, cross_entropy_loss_grad, log_prob_grad,
    log_softmax, policy_loss_grad, softmax, softmax_argmax, softmax_sample, GradientTape, Net,
    OptimizerState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Sample,
    Greedy,
}

/// Output layout `[action logits | slot logits]`; the slot head is masked
/// out for actions that take no slot.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout {
    pub n_actions: usize,
    pub n_slots: usize,
    pub slot_bearing: Vec<bool>,
}

impl HeadLayout {
    pub fn width(&self) -> usize {
        self.n_actions + self.n_slots
    }

    pub fn action_logits<'a>(&self, out: &'a [f64]) -> &'a [f64] {
        &out[..self.n_actions]
    }

    pub fn slot_logits<'a>(&self, out: &'a [f64]) -> &'a [f64] {
        &out[self.n_actions..self.width()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadChoice {
    pub action: usize,
    pub slot: Option<usize>,
    pub logp_action: f64,
    pub logp_slot: f64,
}

pub fn choose(
    layout: &HeadLayout,
    out: &[f64],
    mode: DecodeMode,
    rng: &mut impl Rng,
) -> Result<HeadChoice> {
    let (action, logp_action) = match mode {
        DecodeMode::Sample => softmax_sample(layout.action_logits(out), rng)?,
        DecodeMode::Greedy => softmax_argmax(layout.action_logits(out))?,
    };
    if !(layout.slot_bearing[action] && layout.n_slots > 0) {
        return Ok(HeadChoice {
            action,
            slot: None,
            logp_action,
            logp_slot: 0.0,
        });
    }
    let (slot, logp_slot) = match mode {
        DecodeMode::Sample => softmax_sample(layout.slot_logits(out), rng)?,
        DecodeMode::Greedy => softmax_argmax(layout.slot_logits(out))?,
    };
    Ok(HeadChoice {
        action,
        slot: Some(slot),
        logp_action,
        logp_slot,
    })
}

/// Log-probability of a given (action, slot) pair under the heads.
pub fn log_prob_of(layout: &HeadLayout, out: &[f64], action: usize, slot: Option<usize>) -> f64 {
    let mut lp = log_softmax(layout.action_logits(out))[action];
    if let (true, Some(s)) = (layout.slot_bearing[action], slot) {
        lp += log_softmax(layout.slot_logits(out))[s];
    }
    lp
}

/// One supervised example for a policy net.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyExample {
    pub input: Vec<f64>,
    pub action: usize,
    pub slot: Option<usize>,
}

/// Cross-entropy over both heads (slot head only where the action takes a
/// slot), averaged over the batch; one optimizer step.
pub fn supervised_policy_update(
    net: &mut Net,
    opt: &mut OptimizerState,
    layout: &HeadLayout,
    batch: &[&PolicyExample],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("supervised_policy_update"));
    }
    let mut tape = GradientTape::zeros_like(net);
    let mut total = 0.0;
    for ex in batch {
        let acts = net.forward_cached(&ex.input)?;
        let out = acts.output();
        let mut up = vec![0.0; out.len()];
        let (l, g) = cross_entropy_loss_grad(layout.action_logits(out), ex.action)?;
        total += l;
        up[..layout.n_actions].copy_from_slice(&g);
        if let (true, Some(s)) = (layout.slot_bearing[ex.action], ex.slot) {
            let (l, g) = cross_entropy_loss_grad(layout.slot_logits(out), s)?;
            total += l;
            up[layout.n_actions..layout.width()].copy_from_slice(&g);
        }
        net.backward_into(&acts, &up, &mut tape)?;
    }
    let n = batch.len() as f64;
    tape.scale(1.0 / n);
    apply_gradients(net, &tape, opt)?;
    Ok(total / n)
}

/// One step of experience for a policy: `next_input == None` marks the
/// terminal transition.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTransition {
    pub input: Vec<f64>,
    pub action: usize,
    pub slot: Option<usize>,
    pub reward: f64,
    pub next_input: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct A2cStats {
    pub critic_loss: f64,
    pub policy_objective: f64,
    pub mean_advantage: f64,
    pub entropy: f64,
    pub transitions: usize,
}

fn entropy_grad(logits: &[f64]) -> (f64, Vec<f64>) {
    // gradient of -H with respect to the logits
    let p = softmax(logits);
    let h: f64 = -p
        .iter()
        .map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 })
        .sum::<f64>();
    let g = p
        .iter()
        .map(|&q| if q > 0.0 { q * (q.ln() + h) } else { 0.0 })
        .collect();
    (h, g)
}

/// Advantage actor-critic update over a batch of transitions: one optimizer
/// step for the critic (squared TD error) and one for the actor
/// (`-A * (log p(a) + log p(s))`, optionally minus an entropy bonus). Values
/// are computed with the pre-update critic; neither the TD target nor the
/// advantage carries gradient.
#[allow(clippy::too_many_arguments)]
pub fn a2c_update(
    actor: &mut Net,
    actor_opt: &mut OptimizerState,
    critic: &mut Net,
    critic_opt: &mut OptimizerState,
    layout: &HeadLayout,
    transitions: &[PolicyTransition],
    gamma: f64,
    entropy_coef: f64,
) -> Result<A2cStats> {
    if transitions.is_empty() {
        return Err(Error::EmptyBatch("a2c_update"));
    }
    let mut actor_tape = GradientTape::zeros_like(actor);
    let mut critic_tape = GradientTape::zeros_like(critic);
    let mut stats = A2cStats {
        transitions: transitions.len(),
        ..A2cStats::default()
    };
    for tr in transitions {
        let c_acts = critic.forward_cached(&tr.input)?;
        let v_curr = c_acts.output()[0];
        let (v_next, terminal) = match &tr.next_input {
            Some(next) => (critic.forward(next)?[0], false),
            None => (0.0, true),
        };
        let (closs, dv) = critic_loss_grad(tr.reward, gamma, v_next, v_curr, terminal);
        critic.backward_into(&c_acts, &[dv], &mut critic_tape)?;
        let adv = advantage(tr.reward, gamma, v_next, v_curr, terminal);

        let a_acts = actor.forward_cached(&tr.input)?;
        let out = a_acts.output();
        let al = layout.action_logits(out);
        let logp_a = log_softmax(al)[tr.action];
        let mut up = vec![0.0; out.len()];
        let slot_used = layout.slot_bearing[tr.action] && tr.slot.is_some();
        let logp_s = match (slot_used, tr.slot) {
            (true, Some(s)) => log_softmax(layout.slot_logits(out))[s],
            _ => 0.0,
        };
        let obj = policy_loss_grad(adv, logp_a, logp_s);
        for (u, g) in up.iter_mut().zip(log_prob_grad(al, tr.action)) {
            *u = obj.coef * g;
        }
        let (h, hg) = entropy_grad(al);
        if entropy_coef != 0.0 {
            for (u, g) in up.iter_mut().zip(hg) {
                *u += entropy_coef * g;
            }
        }
        if let (true, Some(s)) = (slot_used, tr.slot) {
            let sl = layout.slot_logits(out);
            for (u, g) in up[layout.n_actions..].iter_mut().zip(log_prob_grad(sl, s)) {
                *u = obj.coef * g;
            }
        }
        actor.backward_into(&a_acts, &up, &mut actor_tape)?;

        stats.critic_loss += closs;
        stats.policy_objective += obj.objective;
        stats.mean_advantage += adv;
        stats.entropy += h;
    }
    let n = transitions.len() as f64;
    actor_tape.scale(1.0 / n);
    critic_tape.scale(1.0 / n);
    apply_gradients(critic, &critic_tape, critic_opt)?;
    apply_gradients(actor, &actor_tape, actor_opt)?;
    stats.critic_loss /= n;
    stats.policy_objective /= n;
    stats.mean_advantage /= n;
    stats.entropy /= n;
    if !stats.critic_loss.is_finite() || !stats.policy_objective.is_finite() {
        return Err(Error::Training(format!("non-finite A2C losses: {stats:?}")));
    }
    Ok(stats)
}

/// A critic net over `input_dim` features whose output layer starts at zero.
pub fn zero_critic(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Net {
    let mut net = Net::new(&[input_dim, hidden, hidden, 1], rng);
    net.zero_output_layer();
    net
}
