//! Behaviour policies used to collect offline datasets.

mod llm;
mod oracle;
mod prompt;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Transition};
use crate::seeding::{self, derive_seed, streams};
use crate::sim::{EnvConfig, Highway, MetaAction, Observation, SimError, NUM_ACTIONS};

pub use llm::{
    parse_decision, run_tool, ChatClient, ChatMessage, EndpointConfig, HttpChatClient, LlmAgent, Transcript,
    ENV_API_KEY, ENV_BASE_URL, ENV_MODEL, MAX_PARSE_FAILURES, MAX_TOOL_CALLS, MAX_TRANSPORT_RETRIES,
    REQUEST_TIMEOUT, TOOL_NAMES,
};
pub use oracle::{Neighbor, Scene, ScriptedOracle, MIN_FRONT_GAP, MIN_REAR_GAP, TTC_EVADE, TTC_FASTER};
pub use prompt::{describe_scene, output_format, HistoryEntry, PromptBundle, HISTORY_DEPTH, OUTPUT_FORMAT_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum TeacherError {
    #[error("teacher unavailable: {0}")]
    Unavailable(String),
    #[error("chat endpoint failed after {retries} retries: {message}")]
    Transport { retries: usize, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Random,
    ScriptedOracle,
    LlmAgent,
}

impl TeacherKind {
    pub fn name(self) -> &'static str {
        match self {
            TeacherKind::Random => "random",
            TeacherKind::ScriptedOracle => "scripted_oracle",
            TeacherKind::LlmAgent => "llm_agent",
        }
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TeacherKind {
    type Err = TeacherError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [TeacherKind::Random, TeacherKind::ScriptedOracle, TeacherKind::LlmAgent]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TeacherError::Invalid(format!("unknown teacher {s:?}")))
    }
}

/// A behaviour policy acting on raw observations.
pub trait Teacher {
    fn kind(&self) -> TeacherKind;
    fn act(&mut self, obs: &Observation) -> Result<MetaAction, TeacherError>;
}

pub struct RandomTeacher {
    rng: ChaCha8Rng,
}

impl RandomTeacher {
    pub fn new(seed: u64) -> Self {
        Self { rng: seeding::rng(seed, streams::POLICY) }
    }
}

impl Teacher for RandomTeacher {
    fn kind(&self) -> TeacherKind {
        TeacherKind::Random
    }

    fn act(&mut self, _obs: &Observation) -> Result<MetaAction, TeacherError> {
        Ok(MetaAction::from_index(self.rng.random_range(0..NUM_ACTIONS)).expect("in range"))
    }
}

impl Teacher for ScriptedOracle {
    fn kind(&self) -> TeacherKind {
        TeacherKind::ScriptedOracle
    }

    fn act(&mut self, obs: &Observation) -> Result<MetaAction, TeacherError> {
        Ok(self.decide(obs))
    }
}

impl Teacher for LlmAgent {
    fn kind(&self) -> TeacherKind {
        TeacherKind::LlmAgent
    }

    fn act(&mut self, obs: &Observation) -> Result<MetaAction, TeacherError> {
        self.decide(obs)
    }
}

/// Builds the teacher for `kind`; the language-model agent reads its endpoint from the environment.
pub fn make_teacher(kind: TeacherKind, env: &EnvConfig, seed: u64) -> Result<Box<dyn Teacher>, TeacherError> {
    Ok(match kind {
        TeacherKind::Random => Box::new(RandomTeacher::new(seed)),
        TeacherKind::ScriptedOracle => Box::new(ScriptedOracle::new(env.lanes)),
        TeacherKind::LlmAgent => Box::new(LlmAgent::from_env(env.lanes)?),
    })
}

/// Seed of episode `episode` in a collection run seeded with `seed`.
pub fn episode_seed(seed: u64, episode: u64) -> u64 {
    derive_seed(derive_seed(seed, streams::EPISODES), episode)
}

/// Runs closed-loop episodes until exactly `n_transitions` tuples are stored.
pub fn collect_rollouts(
    env: &EnvConfig,
    teacher: &mut dyn Teacher,
    n_transitions: usize,
    seed: u64,
) -> Result<Dataset, TeacherError> {
    if n_transitions == 0 {
        return Err(TeacherError::Invalid("n_transitions must be at least 1".into()));
    }
    let mut sim = Highway::new(env.clone(), episode_seed(seed, 0))?;
    let mut transitions = Vec::with_capacity(n_transitions);
    let mut episode = 0;
    let mut obs = sim.observe();
    while transitions.len() < n_transitions {
        let action = teacher.act(&obs)?;
        let step = sim.step(action)?;
        transitions.push(Transition {
            s: obs,
            a: action.index(),
            r: step.reward,
            s_next: step.observation.clone(),
            done: step.done,
        });
        obs = if step.done {
            episode += 1;
            sim.reset(episode_seed(seed, episode))
        } else {
            step.observation
        };
    }
    Ok(Dataset::new(env.id(), teacher.kind().name(), seed, transitions))
}

/// Re-simulates a collected dataset and returns the indices whose stored
/// `s`, `r`, `s_next` or `done` disagree with the simulator.
pub fn replay_mismatches(dataset: &Dataset) -> Result<Vec<usize>, TeacherError> {
    let env = EnvConfig::from_id(dataset.env_id())?;
    let seed = dataset.manifest.seed;
    let mut sim = Highway::new(env, episode_seed(seed, 0))?;
    let mut episode = 0;
    let mut bad = Vec::new();
    for (i, t) in dataset.transitions.iter().enumerate() {
        let action = MetaAction::from_index(t.a).ok_or_else(|| TeacherError::Invalid(format!("action {}", t.a)))?;
        let before = sim.observe();
        let step = sim.step(action)?;
        if before != t.s || step.observation != t.s_next || step.reward != t.r || step.done != t.done {
            bad.push(i);
        }
        if step.done {
            episode += 1;
            sim.reset(episode_seed(seed, episode));
        }
    }
    Ok(bad)
}

/// Writes one JSON line per decision transcript.
pub fn write_transcripts(path: &Path, transcripts: &[Transcript]) -> Result<(), TeacherError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (step, t) in transcripts.iter().enumerate() {
        let line = serde_json::json!({
            "step": step,
            "decision": t.decision,
            "fallback": t.fallback,
            "tool_calls": t.tool_calls,
            "parse_failures": t.parse_failures,
            "messages": t.messages,
        });
        serde_json::to_writer(&mut f, &line).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
