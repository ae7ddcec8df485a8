//! Per-turn rewards for the system and the user.
//!
//! Both roles share the terminal signal. The system additionally pays a unit
//! per turn and units for mismatched or inappropriate acts; the user pays
//! only for inappropriate moves.

use serde::{Deserialize, Serialize};

use crate::config::RewardConfig;
use crate::domain::{BeliefState, SlotId, SystemAction, Terminal, UserAction};

/// Everything the reward functions look at for one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnContext<'a> {
    /// The system act the user was answering this turn.
    pub prompt: SystemAction,
    pub system_action: SystemAction,
    pub system_slot: Option<SlotId>,
    pub bs_before: &'a BeliefState,
    /// The system's belief when it decided.
    pub bs_after: &'a BeliefState,
    /// The goal as of this turn.
    pub goal_values: &'a [usize],
    pub user_action: UserAction,
    pub user_slot: Option<SlotId>,
    pub perceived_user_action: Option<UserAction>,
    pub prev_user: Option<(UserAction, Option<SlotId>)>,
    pub silence_fallback: bool,
    pub terminal: Terminal,
}

/// Per-category accounting, summed by [`RewardBreakdown::total`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub terminal: f64,
    pub length: f64,
    pub mismatch: f64,
    pub inappropriate: f64,
}

impl RewardBreakdown {
    pub fn total(&self) -> f64 {
        self.terminal + self.length + self.mismatch + self.inappropriate
    }
}

pub fn terminal_reward(terminal: Terminal, cfg: &RewardConfig) -> f64 {
    match terminal {
        Terminal::Success => cfg.success_reward,
        Terminal::Failure => cfg.failure_penalty,
        Terminal::Ongoing => 0.0,
    }
}

pub fn system_breakdown(ctx: &TurnContext<'_>, cfg: &RewardConfig) -> RewardBreakdown {
    let unit = cfg.system_penalty_unit;
    let mut r = RewardBreakdown {
        terminal: terminal_reward(ctx.terminal, cfg),
        ..RewardBreakdown::default()
    };
    let closing = ctx.system_action == SystemAction::Bye;
    if cfg.length_penalty && !closing {
        r.length = unit;
    }
    let slot_value = |s: SlotId| ctx.bs_after.values.get(s).copied().flatten();
    match (ctx.system_action, ctx.system_slot) {
        (SystemAction::Confirm, Some(s))
            if cfg.confirm_empty_penalty && slot_value(s).is_none() =>
        {
            r.mismatch = unit;
        }
        (SystemAction::Request, Some(s))
            if cfg.redundant_request_penalty
                && slot_value(s).is_some()
                && slot_value(s) == ctx.goal_values.get(s).copied() =>
        {
            r.mismatch = unit;
        }
        _ => {}
    }
    match ctx.system_action {
        SystemAction::InformResult
            if cfg.result_after_deny_penalty && ctx.user_action == UserAction::Deny =>
        {
            r.inappropriate = unit;
        }
        SystemAction::Bye if cfg.premature_bye_penalty && !ctx.bs_after.is_complete() => {
            r.inappropriate = unit;
        }
        SystemAction::Repeat
            if cfg.needless_repeat_penalty && ctx.user_action != UserAction::Silence =>
        {
            r.inappropriate = unit;
        }
        _ => {}
    }
    r
}

pub fn user_breakdown(ctx: &TurnContext<'_>, cfg: &RewardConfig) -> RewardBreakdown {
    let unit = cfg.user_penalty_unit;
    let mut r = RewardBreakdown {
        terminal: terminal_reward(ctx.terminal, cfg),
        ..RewardBreakdown::default()
    };
    let repeated =
        ctx.user_action.is_inform() && ctx.prev_user == Some((ctx.user_action, ctx.user_slot));
    let unprompted_affirm = ctx.user_action == UserAction::Affirm
        && !matches!(
            ctx.prompt,
            SystemAction::Confirm | SystemAction::InformResult
        );
    if cfg.repeated_inform_penalty && repeated {
        r.inappropriate += unit;
    }
    if cfg.unprompted_affirm_penalty && unprompted_affirm {
        r.inappropriate += unit;
    }
    if cfg.silence_fallback_penalty && ctx.silence_fallback {
        r.inappropriate += unit;
    }
    r
}

pub fn system_reward(ctx: &TurnContext<'_>, cfg: &RewardConfig) -> f64 {
    system_breakdown(ctx, cfg).total()
}

pub fn user_reward(ctx: &TurnContext<'_>, cfg: &RewardConfig) -> f64 {
    user_breakdown(ctx, cfg).total()
}
