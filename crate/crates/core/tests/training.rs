//! Update-schedule and run-level contracts of the trainer.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use aurl::config::{DstUnit, Mode, RunConfig};
use aurl::nnet::softmax;
use aurl::orchestrator::episode::{run_dialog, EpisodeLog, NeuralSystem, NeuralUser};
use aurl::orchestrator::pipeline::{make_pretrained, with_seed, World};
use aurl::orchestrator::pretrain::Pretrained;
use aurl::orchestrator::train::{read_csv, RunArtifacts, Trainer, UpdateEvent};
use aurl::policy::DecodeMode;
use aurl::user_agent::UserAgent;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    cfg: RunConfig,
    world: World,
    pretrained: Pretrained,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = with_seed(RunConfig::default(), 21);
        let world = World::build(&cfg).unwrap();
        let pretrained = make_pretrained(&world.env(&cfg), &cfg).unwrap();
        Fixture {
            cfg,
            world,
            pretrained,
        }
    })
}

fn config(mode: Mode, epochs: usize) -> RunConfig {
    let mut c = fixture().cfg.clone();
    c.train.mode = mode;
    c.train.epochs = epochs;
    c.train.eval_interval = 50;
    c.train.n_users = if mode == Mode::AurlMurl { 2 } else { 1 };
    c.eval.n_dialogs = 50;
    c.eval.repeats = 1;
    c.eval.interval_dialogs = 20;
    c
}

fn run(cfg: &RunConfig, dir: Option<&std::path::Path>) -> RunArtifacts {
    let f = fixture();
    Trainer::new(f.world.env(cfg), cfg, &f.pretrained)
        .unwrap()
        .run(dir)
        .unwrap()
}

fn count(updates: &[UpdateEvent], buffer: &str) -> usize {
    updates.iter().filter(|u| u.buffer == buffer).count()
}

#[test]
fn aurl_update_log_follows_the_asynchrony_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(Mode::Aurl, 600);
    let arts = run(&cfg, Some(tmp.path()));
    let log: Vec<UpdateEvent> = read_csv(&tmp.path().join("updates.csv")).unwrap();
    assert_eq!(log, arts.updates);
    for buffer in ["sys_dp", "user_dp", "user_nlu"] {
        assert_eq!(count(&log, buffer), 600, "{buffer}");
    }
    let cap = cfg.buffers.sys_dst;
    assert_eq!(cfg.buffers.dst_unit, DstUnit::Turns);
    assert_eq!(count(&log, "sys_dst"), arts.total_turns / cap);
    assert!(count(&log, "sys_dst") >= 2);
    for u in log.iter().filter(|u| u.buffer == "sys_dst") {
        assert_eq!((u.size, u.update_type.as_str()), (cap, "curriculum"));
    }
    let sys_dp_total: usize = log
        .iter()
        .filter(|u| u.buffer == "sys_dp")
        .map(|u| u.size)
        .sum();
    assert_eq!(sys_dp_total, arts.total_turns);
    for update in 1..=count(&log, "sys_dst") {
        let first: usize = arts
            .curriculum
            .iter()
            .filter(|r| r.update == update && r.phase == 1)
            .map(|r| r.examples)
            .sum();
        assert_eq!(first, cap);
    }
    assert_eq!(arts.summary.dp_updates, 600);
    assert_eq!(arts.summary.dst_updates, arts.total_turns / cap);
    assert_eq!(arts.difficulty, fixture().pretrained.difficulty);
}

#[test]
fn train_dst_baseline_is_the_aurl_code_path_with_small_buffers() {
    let baseline = run(&config(Mode::RlTrainDst, 80), None);
    assert_eq!(count(&baseline.updates, "sys_dp"), 80);
    assert_eq!(count(&baseline.updates, "sys_dst"), 80);
    assert!(baseline
        .updates
        .iter()
        .filter(|u| u.buffer == "sys_dst")
        .all(|u| u.update_type == "uniform"));

    let mut same = config(Mode::Aurl, 80);
    same.buffers.sys_dst = same.buffers.sys_dp;
    same.buffers.dst_unit = DstUnit::Dialogs;
    same.curriculum.enabled = false;
    let aurl = run(&same, None);
    assert_eq!(aurl.updates, baseline.updates);
    assert_eq!(aurl.total_turns, baseline.total_turns);
    let strip = |a: &RunArtifacts| {
        a.metrics
            .iter()
            .map(|m| (m.epoch, m.dialog_succ, m.avg_reward, m.dst_acc))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&aurl), strip(&baseline));
}

#[test]
fn fixed_dst_discards_and_keeps_the_tracker() {
    let arts = run(&config(Mode::RlFixedDst, 500), None);
    let dst: Vec<&UpdateEvent> = arts
        .updates
        .iter()
        .filter(|u| u.buffer == "sys_dst")
        .collect();
    assert!(!dst.is_empty());
    assert!(dst.iter().all(|u| u.update_type == "discard"));
    assert_eq!(arts.summary.dst_updates, 0);
    assert_eq!(
        arts.system.dst.fingerprint(),
        fixture().pretrained.system.dst.fingerprint()
    );
    assert_ne!(
        arts.system.dp.fingerprint(),
        fixture().pretrained.system.dp.fingerprint()
    );
}

#[test]
fn sl_mode_runs_no_updates() {
    let arts = run(&config(Mode::Sl, 500), None);
    assert!(arts.updates.is_empty());
    assert_eq!(arts.metrics.len(), 1);
    assert_eq!(arts.system, fixture().pretrained.system);
}

#[test]
fn runs_are_deterministic_per_seed() {
    let cfg = config(Mode::Aurl, 120);
    let a = run(&cfg, None);
    let b = run(&cfg, None);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.updates, b.updates);
    assert_eq!(a.system, b.system);
    let mut other = cfg.clone();
    other.train.seed += 1;
    let c = run(&other, None);
    assert_ne!(a.system.dp.fingerprint(), c.system.dp.fingerprint());
}

fn probe_states(n: usize) -> Vec<Vec<f64>> {
    let f = fixture();
    let env = f.world.env(&f.cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut states = Vec::new();
    while states.len() < n {
        let mut sys = NeuralSystem {
            agent: &f.pretrained.system,
            mode: DecodeMode::Sample,
            with_value: false,
        };
        let mut user = NeuralUser {
            agent: &f.pretrained.user,
            mode: DecodeMode::Sample,
        };
        let log: EpisodeLog = run_dialog(&env, &mut sys, &mut user, 0, &mut rng).unwrap();
        states.extend(
            log.turns
                .into_iter()
                .filter_map(|t| t.tensors.user_policy_input),
        );
    }
    states.truncate(n);
    states
}

fn action_distribution(user: &UserAgent, states: &[Vec<f64>]) -> Vec<f64> {
    let n = user.layout().n_actions;
    let mut mean = vec![0.0; n];
    for s in states {
        let out = user.dp.forward(s).unwrap();
        for (m, p) in mean.iter_mut().zip(softmax(&out[..n])) {
            *m += p / states.len() as f64;
        }
    }
    mean
}

#[test]
fn murl_users_stay_balanced_and_diverge() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(Mode::AurlMurl, 400);
    cfg.train.write_transcripts = true;
    let arts = run(&cfg, Some(tmp.path()));
    assert_eq!(arts.user_dialogs, [1200, 1200]);

    let text = std::fs::read_to_string(tmp.path().join("transcripts.jsonl")).unwrap();
    let ids: Vec<usize> = text
        .lines()
        .map(|l| serde_json::from_str::<EpisodeLog>(l).unwrap().user_id)
        .collect();
    assert_eq!(ids.len(), 400 * cfg.train.dialogs_per_epoch);
    for epoch in ids.chunks(cfg.train.dialogs_per_epoch) {
        let mut per: BTreeMap<usize, usize> = BTreeMap::new();
        for &u in epoch {
            *per.entry(u).or_default() += 1;
        }
        let (lo, hi) = (per.values().min().unwrap(), per.values().max().unwrap());
        assert!(per.len() == 2 && hi - lo <= 1, "{per:?}");
    }
    for u in 0..2 {
        let user = u.to_string();
        assert_eq!(
            arts.updates
                .iter()
                .filter(|e| e.buffer == "user_dp" && e.user == user)
                .count(),
            400
        );
    }

    let states = probe_states(1000);
    let p = action_distribution(&arts.users[0], &states);
    let q = action_distribution(&arts.users[1], &states);
    let tv: f64 = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(tv > 0.01, "total variation {tv}");
}
