//! Wiring shared by the command-line tools and the experiment tests: one
//! seed drives the database, the corpus, pretraining and the RL run, and
//! every artifact lands under a single output directory.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::domain::{build_schema, Database, Schema};
use crate::error::{Error, Result};
use crate::orchestrator::corpus::{generate_corpus, read_jsonl, write_jsonl};
use crate::orchestrator::episode::{Env, EpisodeLog};
use crate::orchestrator::pretrain::{pretrain_sl, Pretrained};
use crate::orchestrator::train::{run_name, RunArtifacts, Trainer};

/// Schema and database for one configuration.
#[derive(Debug, Clone)]
pub struct World {
    pub schema: Schema,
    pub db: Database,
}

impl World {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let schema = build_schema(&cfg.env)?;
        let db = Database::generate(&schema, cfg.env.db_size, cfg.env.seed);
        Ok(Self { schema, db })
    }

    pub fn env<'a>(&'a self, cfg: &'a RunConfig) -> Env<'a> {
        Env {
            schema: &self.schema,
            db: &self.db,
            cfg: &cfg.env,
            reward: &cfg.reward,
        }
    }
}

/// Routes one seed to every random stream of a run.
pub fn with_seed(mut cfg: RunConfig, seed: u64) -> RunConfig {
    cfg.env.seed = seed;
    cfg.train.seed = seed;
    cfg
}

pub fn corpus_path(out: &Path, seed: u64) -> PathBuf {
    out.join("corpus").join(format!("seed{seed}.jsonl"))
}

pub fn pretrained_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("pretrained").join(format!("seed{seed}"))
}

pub fn run_dir(out: &Path, cfg: &RunConfig) -> PathBuf {
    out.join("runs").join(run_name(cfg))
}

pub fn make_corpus(env: &Env<'_>, cfg: &RunConfig) -> Result<Vec<EpisodeLog>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(1);
    generate_corpus(env, &cfg.corpus, cfg.corpus.n_dialogs, &mut rng)
}

pub fn make_pretrained(env: &Env<'_>, cfg: &RunConfig) -> Result<Pretrained> {
    let corpus = make_corpus(env, cfg)?;
    pretrain_sl(env, cfg, &corpus, cfg.train.seed)
}

/// Writes the corpus for the configured seed and returns its path.
pub fn gen_corpus(env: &Env<'_>, cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let corpus = make_corpus(env, cfg)?;
    let path = corpus_path(out, cfg.train.seed);
    create_parent(&path)?;
    write_jsonl(&path, &corpus)?;
    Ok(path)
}

/// Pretrains on the stored corpus for this seed, generating it first when
/// absent, and saves the bundle.
pub fn pretrain_to(env: &Env<'_>, cfg: &RunConfig, out: &Path) -> Result<Pretrained> {
    let path = corpus_path(out, cfg.train.seed);
    let corpus = if path.exists() {
        read_jsonl(&path)?
    } else {
        let corpus = make_corpus(env, cfg)?;
        create_parent(&path)?;
        write_jsonl(&path, &corpus)?;
        corpus
    };
    let pretrained = pretrain_sl(env, cfg, &corpus, cfg.train.seed)?;
    pretrained.save(&pretrained_dir(out, cfg.train.seed))?;
    Ok(pretrained)
}

/// The pretrained bundle for this seed: loaded when present, otherwise
/// produced on the spot if `train.auto_pretrain` allows it.
pub fn load_or_pretrain(env: &Env<'_>, cfg: &RunConfig, out: &Path) -> Result<Pretrained> {
    let dir = pretrained_dir(out, cfg.train.seed);
    if dir.exists() {
        return Pretrained::load(&dir, env);
    }
    if !cfg.train.auto_pretrain {
        return Err(Error::Config(format!(
            "no pretrained models at {} and train.auto_pretrain is off",
            dir.display()
        )));
    }
    log::info!("pretraining for seed {}", cfg.train.seed);
    pretrain_to(env, cfg, out)
}

/// Runs the configured mode to completion and writes its run directory.
pub fn train_to(
    env: Env<'_>,
    cfg: &RunConfig,
    pretrained: &Pretrained,
    out: &Path,
) -> Result<RunArtifacts> {
    let dir = run_dir(out, cfg);
    Trainer::new(env, cfg, pretrained)?.run(Some(&dir))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}
