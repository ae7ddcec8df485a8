//! Supervised pretraining of every network on the scripted corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::curriculum::{measure_difficulty, DifficultyTable};
use crate::domain::{SystemAction, UserAction};
use crate::error::{Error, Result};
use crate::nnet::{argmax, Net, OptimizerState};
use crate::orchestrator::episode::{Env, EpisodeLog};
use crate::policy::{supervised_policy_update, HeadLayout, PolicyExample};
use crate::system_agent::{
    dst_input, dst_joint_correct, dst_loss_grad, dst_supervised_update, DstExample, SystemAgent,
};
use crate::user_agent::{nlu_input, user_policy_input, UserAgent, UserStateVector};

/// Supervised examples for every network, built from labelled dialogs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Datasets {
    pub dst: Vec<DstExample>,
    pub nlu: Vec<PolicyExample>,
    pub user_dp: Vec<PolicyExample>,
    /// System decisions with everything but the tracker context; the
    /// context is filled in once the tracker is trained.
    pub sys_dp: Vec<SysDpSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SysDpSource {
    pub dst_index: usize,
    pub prev: (SystemAction, Option<usize>),
    pub example: PolicyExample,
}

pub fn build_datasets(env: &Env<'_>, dialogs: &[EpisodeLog]) -> Datasets {
    let schema = env.schema;
    let n = schema.n_slots();
    let mut d = Datasets::default();
    for log in dialogs {
        let mut prev_user = None;
        let mut prev_sys = (SystemAction::Greet, None);
        for r in &log.turns {
            let dst_index = d.dst.len();
            d.dst.push(DstExample {
                input: dst_input(schema, &r.system_utterance, &r.user_noisy, &r.sys_bs_before),
                ops: r.dst_target_ops(),
                user_action: r.user_action(),
            });
            let sys_act = r
                .system_utterance
                .system_action()
                .unwrap_or(SystemAction::Greet);
            d.nlu.push(PolicyExample {
                input: nlu_input(schema, &log.goal, r.turn, &r.system_utterance),
                action: sys_act.index(),
                slot: Some(r.system_utterance.slot.unwrap_or(n)),
            });
            let state = UserStateVector::from_status(r.user_state.clone());
            d.user_dp.push(PolicyExample {
                input: user_policy_input(
                    schema,
                    prev_user,
                    (sys_act, r.system_utterance.slot),
                    &state,
                ),
                action: r.user_decision.index(),
                slot: r.user_decision_slot,
            });
            d.sys_dp.push(SysDpSource {
                dst_index,
                prev: prev_sys,
                example: PolicyExample {
                    input: Vec::new(),
                    action: r.system_action.index(),
                    slot: r.system_slot,
                },
            });
            prev_user = Some(r.user_action());
            prev_sys = (r.system_action, r.system_slot);
        }
    }
    d
}

/// Held-out results of pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_dialogs: usize,
    pub held_out_dialogs: usize,
    /// Held-out tracker loss after each pass over the training set.
    pub dst_held_out_loss: Vec<f64>,
    pub dst_train_loss: Vec<f64>,
    pub dst_joint_accuracy: f64,
    pub dst_action_accuracy: BTreeMap<String, f64>,
    pub nlu_accuracy: f64,
    pub user_dp_accuracy: f64,
    pub sys_dp_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub system: SystemAgent,
    pub user: UserAgent,
    pub difficulty: DifficultyTable,
    pub report: PretrainReport,
}

impl Pretrained {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.system.save(&dir.join("system"))?;
        self.user.save(&dir.join("user"))?;
        self.difficulty.write_csv(&dir.join("difficulty.csv"))?;
        let path = dir.join("pretrain_report.json");
        let text = serde_json::to_string_pretty(&self.report).map_err(|e| Error::Malformed {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, env: &Env<'_>) -> Result<Self> {
        let system = SystemAgent::load(&dir.join("system"), env.schema)?;
        let user = UserAgent::load(&dir.join("user"), env.schema)?;
        let difficulty = DifficultyTable::read_csv(&dir.join("difficulty.csv"))?;
        let path = dir.join("pretrain_report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path,
            reason: e.to_string(),
        })?;
        Ok(Self {
            system,
            user,
            difficulty,
            report,
        })
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn policy_epochs(
    net: &mut Net,
    opt: &mut OptimizerState,
    layout: &HeadLayout,
    data: &[PolicyExample],
    epochs: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for _ in 0..epochs {
        let order = shuffled(data.len(), rng);
        for chunk in order.chunks(batch) {
            let b: Vec<&PolicyExample> = chunk.iter().map(|&i| &data[i]).collect();
            supervised_policy_update(net, opt, layout, &b)?;
        }
    }
    Ok(())
}

fn policy_accuracy(net: &Net, layout: &HeadLayout, data: &[PolicyExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut ok = 0;
    for ex in data {
        let out = net.forward(&ex.input)?;
        let a = argmax(layout.action_logits(&out));
        let slot_ok = !layout.slot_bearing[a]
            || ex
                .slot
                .is_none_or(|s| argmax(layout.slot_logits(&out)) == s);
        if a == ex.action && slot_ok {
            ok += 1;
        }
    }
    Ok(ok as f64 / data.len() as f64)
}

fn fill_sys_inputs(
    env: &Env<'_>,
    system: &SystemAgent,
    dialogs: &[EpisodeLog],
    data: &Datasets,
) -> Result<Vec<PolicyExample>> {
    let records = dialogs.iter().flat_map(|l| l.turns.iter());
    data.sys_dp
        .iter()
        .zip(records)
        .map(|(src, r)| {
            let acts = system.dst.forward_cached(&data.dst[src.dst_index].input)?;
            let input = system.policy_input(
                env.schema,
                src.prev,
                &r.sys_bs_after,
                acts.last_hidden(),
                &r.query,
            );
            Ok(PolicyExample {
                input,
                ..src.example.clone()
            })
        })
        .collect()
}

/// Trains tracker, NLU and both policies by cross-entropy, then measures
/// per-action tracker difficulty on the held-out dialogs.
pub fn pretrain_sl(
    env: &Env<'_>,
    cfg: &RunConfig,
    corpus: &[EpisodeLog],
    seed: u64,
) -> Result<Pretrained> {
    let kinds: BTreeSet<UserAction> = corpus
        .iter()
        .flat_map(|l| l.turns.iter().map(|r| r.user_action()))
        .collect();
    if kinds.len() < 2 {
        return Err(Error::DegenerateCorpus(format!(
            "{} distinct user action type(s) in {} dialogs",
            kinds.len(),
            corpus.len()
        )));
    }
    let p = &cfg.pretrain;
    let n_held = ((corpus.len() as f64) * p.held_out_fraction).round() as usize;
    let n_held = n_held.clamp(1, corpus.len().saturating_sub(1).max(1));
    if corpus.len() < 2 {
        return Err(Error::DegenerateCorpus("need at least two dialogs".into()));
    }
    let (train, held) = corpus.split_at(corpus.len() - n_held);
    let train_data = build_datasets(env, train);
    let held_data = build_datasets(env, held);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let hidden = cfg.nnet.hidden;
    let mut system = SystemAgent::new(env.schema, hidden, &mut rng);
    let mut user = UserAgent::new(env.schema, hidden, &mut rng);
    let lr = cfg.nnet.sl_lr;
    let clip = cfg.nnet.clip_norm;

    let mut dst_opt = OptimizerState::new(&system.dst, lr, clip);
    let mut dst_train_loss = Vec::new();
    let mut dst_held_out_loss = Vec::new();
    for _ in 0..p.dst_epochs {
        let order = shuffled(train_data.dst.len(), &mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(p.batch_size) {
            let b: Vec<&DstExample> = chunk.iter().map(|&i| &train_data.dst[i]).collect();
            total += dst_supervised_update(&mut system.dst, &mut dst_opt, env.schema, &b)?;
            steps += 1;
        }
        dst_train_loss.push(total / steps.max(1) as f64);
        let mut held_loss = 0.0;
        for ex in &held_data.dst {
            let out = system.dst.forward(&ex.input)?;
            held_loss += dst_loss_grad(env.schema, &out, ex)?.0;
        }
        dst_held_out_loss.push(held_loss / held_data.dst.len().max(1) as f64);
        log::debug!(
            "pretrain dst: train {:.4} held-out {:.4}",
            dst_train_loss.last().unwrap_or(&0.0),
            dst_held_out_loss.last().unwrap_or(&0.0)
        );
    }
    let mut correct = 0;
    for ex in &held_data.dst {
        let out = system.dst.forward(&ex.input)?;
        if dst_joint_correct(env.schema, &out, ex) {
            correct += 1;
        }
    }
    let dst_joint_accuracy = correct as f64 / held_data.dst.len().max(1) as f64;
    let required: Vec<UserAction> = kinds.iter().copied().collect();
    let difficulty = measure_difficulty(
        &system.dst,
        env.schema,
        &held_data.dst,
        &required,
        &cfg.curriculum,
    )?;

    let mut nlu_opt = OptimizerState::new(&user.nlu, lr, clip);
    let nlu_layout = user.nlu_layout().clone();
    policy_epochs(
        &mut user.nlu,
        &mut nlu_opt,
        &nlu_layout,
        &train_data.nlu,
        p.nlu_epochs,
        p.batch_size,
        &mut rng,
    )?;
    let mut udp_opt = OptimizerState::new(&user.dp, lr, clip);
    let ulayout = user.layout().clone();
    policy_epochs(
        &mut user.dp,
        &mut udp_opt,
        &ulayout,
        &train_data.user_dp,
        p.dp_epochs,
        p.batch_size,
        &mut rng,
    )?;

    let sys_train = fill_sys_inputs(env, &system, train, &train_data)?;
    let sys_held = fill_sys_inputs(env, &system, held, &held_data)?;
    let mut sdp_opt = OptimizerState::new(&system.dp, lr, clip);
    let slayout = system.layout().clone();
    policy_epochs(
        &mut system.dp,
        &mut sdp_opt,
        &slayout,
        &sys_train,
        p.dp_epochs,
        p.batch_size,
        &mut rng,
    )?;

    let report = PretrainReport {
        train_dialogs: train.len(),
        held_out_dialogs: held.len(),
        dst_held_out_loss,
        dst_train_loss,
        dst_joint_accuracy,
        dst_action_accuracy: difficulty
            .entries
            .iter()
            .map(|(a, e)| (a.name().to_string(), e.accuracy))
            .collect(),
        nlu_accuracy: policy_accuracy(&user.nlu, &nlu_layout, &held_data.nlu)?,
        user_dp_accuracy: policy_accuracy(&user.dp, &ulayout, &held_data.user_dp)?,
        sys_dp_accuracy: policy_accuracy(&system.dp, &slayout, &sys_held)?,
    };
    log::info!(
        "pretrained: dst joint {:.3}, nlu {:.3}, user dp {:.3}, system dp {:.3}",
        report.dst_joint_accuracy,
        report.nlu_accuracy,
        report.user_dp_accuracy,
        report.sys_dp_accuracy
    );
    Ok(Pretrained {
        system,
        user,
        difficulty,
        report,
    })
}
