//! ReAct-style language-model teacher over a chat-completion endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::sim::{MetaAction, Observation, VEHICLE_LENGTH};

use super::oracle::Scene;
use super::prompt::PromptBundle;
use super::TeacherError;

pub const MAX_TOOL_CALLS: usize = 8;
pub const MAX_PARSE_FAILURES: usize = 3;
pub const MAX_TRANSPORT_RETRIES: usize = 3;
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(60);

pub const ENV_BASE_URL: &str = "RAPID_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "RAPID_LLM_API_KEY";
pub const ENV_MODEL: &str = "RAPID_LLM_MODEL";

pub const TOOL_NAMES: [&str; 3] = ["get_available_lanes", "check_action_safety", "get_lane_info"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self { role: role.into(), content: content.into() }
    }
}

/// A chat-completion backend. Errors are transport-level failures.
pub trait ChatClient: Send {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, String>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
}

impl EndpointConfig {
    pub fn from_env() -> Result<Self, TeacherError> {
        let base_url = std::env::var(ENV_BASE_URL)
            .map_err(|_| TeacherError::Unavailable(format!("{ENV_BASE_URL} is not set")))?;
        Ok(Self {
            base_url,
            api_key: std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty()),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-3.5-turbo".into()),
        })
    }
}

/// Blocking HTTP client speaking `POST {base}/chat/completions`.
pub struct HttpChatClient {
    config: EndpointConfig,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(REQUEST_TIMEOUT)).build().into();
        Self { config, agent }
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, String> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = serde_json::json!({ "model": self.config.model, "messages": messages, "temperature": 0.0 });
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| format!("response has no choices[0].message.content: {value}"))
    }
}

/// Audit record of one decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub decision: MetaAction,
    pub fallback: bool,
    pub tool_calls: usize,
    pub parse_failures: usize,
    pub messages: Vec<ChatMessage>,
}

enum Reply {
    Tool { name: String, input: String },
    Decision(MetaAction),
    Unparsed,
}

fn is_token_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Meta-action named in `text`, if exactly one distinct action token appears.
/// Only the part after a final-answer marker is considered when one exists.
pub fn parse_decision(text: &str) -> Option<MetaAction> {
    let lower = text.to_ascii_lowercase();
    let start = ["final answer", "final decision"]
        .iter()
        .filter_map(|m| lower.rfind(m).map(|i| i + m.len()))
        .max()
        .unwrap_or(0);
    let tail = &lower[start..];
    let mut found: Option<MetaAction> = None;
    for a in MetaAction::ALL {
        let name = a.name();
        let hit = tail.match_indices(name).any(|(i, _)| {
            let before = tail[..i].chars().next_back().is_none_or(|c| !is_token_char(c));
            let after = tail[i + name.len()..].chars().next().is_none_or(|c| !is_token_char(c));
            before && after
        });
        if hit {
            if found.is_some() {
                return None;
            }
            found = Some(a);
        }
    }
    found
}

fn parse_reply(text: &str) -> Reply {
    let lower = text.to_ascii_lowercase();
    if !lower.contains("final answer") && !lower.contains("final decision") {
        let mut name = None;
        let mut input = String::new();
        for line in text.lines() {
            let t = line.trim();
            let tl = t.to_ascii_lowercase();
            if let Some(rest) = tl.strip_prefix("action input:") {
                input = t[t.len() - rest.len()..].trim().to_string();
            } else if tl.starts_with("action:") {
                name = Some(t["action:".len()..].trim().trim_matches('`').to_string());
            }
        }
        if let Some(name) = name {
            return Reply::Tool { name, input };
        }
    }
    parse_decision(text).map_or(Reply::Unparsed, Reply::Decision)
}

fn clean_input(s: &str) -> String {
    s.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`').trim().to_ascii_lowercase()
}

/// Executes a perception tool against the scene; malformed calls yield an error string.
pub fn run_tool(scene: &Scene, name: &str, input: &str) -> String {
    match name.trim().to_ascii_lowercase().as_str() {
        "get_available_lanes" => {
            let mut parts = vec![format!("The ego is in lane {} of {}.", scene.ego_lane, scene.lanes)];
            for (a, lane) in scene.adjacent_lanes() {
                parts.push(format!("{a} leads to lane {lane}."));
            }
            if scene.ego_lane == 0 {
                parts.push("lane_left is unavailable (leftmost lane).".into());
            }
            if scene.ego_lane + 1 == scene.lanes {
                parts.push("lane_right is unavailable (rightmost lane).".into());
            }
            parts.join(" ")
        }
        "check_action_safety" => match clean_input(input).parse::<MetaAction>() {
            Err(_) => format!("Error: check_action_safety expects one meta-action name, got {input:?}."),
            Ok(a) => check_safety(scene, a),
        },
        "get_lane_info" => match clean_input(input).parse::<usize>() {
            Ok(lane) if lane < scene.lanes => {
                let mut cars: Vec<_> = scene.neighbors.iter().filter(|n| n.lane == lane).collect();
                cars.sort_by(|a, b| a.dx.total_cmp(&b.dx));
                if cars.is_empty() {
                    return format!("Lane {lane} has no observed vehicles.");
                }
                let list: Vec<String> = cars.iter().map(|n| format!("dx {:+.1} m at {:.1} m/s", n.dx, n.v)).collect();
                format!("Lane {lane}: {}.", list.join("; "))
            }
            _ => format!("Error: get_lane_info expects a lane index in 0..{}, got {input:?}.", scene.lanes),
        },
        other => format!("Error: unknown tool {other:?}. Available tools: {}.", TOOL_NAMES.join(", ")),
    }
}

fn check_safety(scene: &Scene, a: MetaAction) -> String {
    let lane_target = match a {
        MetaAction::LaneLeft => scene.ego_lane.checked_sub(1),
        MetaAction::LaneRight => Some(scene.ego_lane + 1).filter(|&l| l < scene.lanes),
        _ => Some(scene.ego_lane),
    };
    let Some(lane) = lane_target else {
        return format!("{a} is not available from lane {}.", scene.ego_lane);
    };
    let speed = scene.ego_v
        + match a {
            MetaAction::Faster => 4.0,
            MetaAction::Slower => -4.0,
            _ => 0.0,
        };
    let verdict = match scene.leader(lane) {
        Some(n) => {
            let gap = n.dx - VEHICLE_LENGTH;
            let closing = speed - n.v;
            let ttc = if closing > 0.0 { gap / closing } else { f64::INFINITY };
            if gap <= 0.0 || ttc < 4.0 {
                format!("unsafe: time to collision with the vehicle ahead in lane {lane} would be {ttc:.1} s")
            } else {
                format!("safe: gap {gap:.1} m to the vehicle ahead in lane {lane}")
            }
        }
        None => format!("safe: lane {lane} is clear ahead"),
    };
    if lane != scene.ego_lane && scene.rear_gap(lane) <= 10.0 {
        return format!("unsafe: a vehicle is less than 10 m behind in lane {lane}");
    }
    verdict
}

/// Language-model driving agent with a bounded ReAct loop.
pub struct LlmAgent {
    client: Box<dyn ChatClient>,
    lanes: usize,
    bundle: PromptBundle,
    transcripts: Vec<Transcript>,
}

impl LlmAgent {
    pub fn new(client: Box<dyn ChatClient>, lanes: usize) -> Self {
        Self { client, lanes, bundle: PromptBundle::new(), transcripts: Vec::new() }
    }

    pub fn from_env(lanes: usize) -> Result<Self, TeacherError> {
        Ok(Self::new(Box::new(HttpChatClient::new(EndpointConfig::from_env()?)), lanes))
    }

    pub fn bundle(&self) -> &PromptBundle {
        &self.bundle
    }

    pub fn transcripts(&self) -> &[Transcript] {
        &self.transcripts
    }

    pub fn take_transcripts(&mut self) -> Vec<Transcript> {
        std::mem::take(&mut self.transcripts)
    }

    fn call(&mut self, messages: &[ChatMessage]) -> Result<String, TeacherError> {
        let mut last = String::new();
        for _ in 0..=MAX_TRANSPORT_RETRIES {
            match self.client.complete(messages) {
                Ok(reply) => return Ok(reply),
                Err(e) => last = e,
            }
        }
        Err(TeacherError::Transport { retries: MAX_TRANSPORT_RETRIES, message: last })
    }

    pub fn decide(&mut self, obs: &Observation) -> Result<MetaAction, TeacherError> {
        let scene = Scene::from_observation(obs, self.lanes);
        let mut messages = vec![
            ChatMessage::new("system", self.bundle.system_prompt()),
            ChatMessage::new("user", self.bundle.user_prompt(&scene)),
        ];
        let mut tool_calls = 0;
        let mut parse_failures = 0;
        let decision = loop {
            let reply = self.call(&messages)?;
            messages.push(ChatMessage::new("assistant", reply.clone()));
            match parse_reply(&reply) {
                Reply::Decision(a) => {
                    self.bundle.push_history(a, explanation(&reply));
                    break Some(a);
                }
                Reply::Tool { name, input } if tool_calls < MAX_TOOL_CALLS => {
                    tool_calls += 1;
                    messages.push(ChatMessage::new("user", format!("Observation: {}", run_tool(&scene, &name, &input))));
                }
                Reply::Tool { .. } | Reply::Unparsed => {
                    parse_failures += 1;
                    if parse_failures >= MAX_PARSE_FAILURES {
                        break None;
                    }
                    let hint = if tool_calls >= MAX_TOOL_CALLS {
                        "The tool budget is exhausted. "
                    } else {
                        ""
                    };
                    messages.push(ChatMessage::new(
                        "user",
                        format!("{hint}Reply with `Final Answer:` followed by exactly one of: lane_left, idle, lane_right, faster, slower."),
                    ));
                }
            }
        };
        let fallback = decision.is_none();
        let decision = decision.unwrap_or(MetaAction::Idle);
        self.transcripts.push(Transcript { decision, fallback, tool_calls, parse_failures, messages });
        Ok(decision)
    }
}

fn explanation(reply: &str) -> String {
    let text: String = reply.split_whitespace().collect::<Vec<_>>().join(" ");
    text.chars().take(200).collect()
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use super::*;
    use crate::sim::{EnvConfig, Highway, VehicleState};

    struct Scripted(VecDeque<Result<String, String>>);

    impl ChatClient for Scripted {
        fn complete(&mut self, _: &[ChatMessage]) -> Result<String, String> {
            self.0.pop_front().unwrap_or_else(|| Err("script exhausted".into()))
        }
    }

    fn agent(replies: &[&str]) -> LlmAgent {
        LlmAgent::new(Box::new(Scripted(replies.iter().map(|r| Ok(r.to_string())).collect())), 3)
    }

    fn obs() -> Observation {
        Highway::from_scene(EnvConfig::default(), VehicleState::in_lane(1, 0.0, 20.0), 5, vec![]).unwrap().observe()
    }

    #[test]
    fn final_decision_line_parses() {
        assert_eq!(parse_decision("Final decision: idle"), Some(MetaAction::Idle));
        assert_eq!(parse_decision("FINAL ANSWER: Lane_Right. Overtake."), Some(MetaAction::LaneRight));
        assert_eq!(parse_decision("I could go faster or slower"), None);
        assert_eq!(parse_decision("Thinking about faster... Final Answer: slower"), Some(MetaAction::Slower));
        assert_eq!(parse_decision("idleness"), None);
    }

    #[test]
    fn tool_round_then_decision() {
        let mut a = agent(&["Thought: check lanes.\nAction: get_available_lanes\nAction Input: none", "Final Answer: faster"]);
        assert_eq!(a.decide(&obs()).unwrap(), MetaAction::Faster);
        let t = &a.transcripts()[0];
        assert_eq!(t.tool_calls, 1);
        assert!(!t.fallback);
        assert!(t.messages[3].content.contains("lane_left leads to lane 0"));
        assert_eq!(a.bundle().history().count(), 1);
    }

    #[test]
    fn three_parse_failures_fall_back_to_idle() {
        let mut a = agent(&["faster or slower?", "hmm", "lane_left and lane_right"]);
        assert_eq!(a.decide(&obs()).unwrap(), MetaAction::Idle);
        let t = &a.transcripts()[0];
        assert!(t.fallback);
        assert_eq!(t.parse_failures, 3);
    }

    #[test]
    fn tool_calls_are_capped() {
        let call = "Action: get_lane_info\nAction Input: 1";
        let mut replies = vec![call; 12];
        replies.push("Final Answer: idle");
        let mut a = agent(&replies);
        assert_eq!(a.decide(&obs()).unwrap(), MetaAction::Idle);
        let t = &a.transcripts()[0];
        assert_eq!(t.tool_calls, MAX_TOOL_CALLS);
        assert!(t.fallback);
    }

    #[test]
    fn malformed_tool_calls_return_error_strings() {
        let scene = Scene::from_observation(&obs(), 3);
        assert!(run_tool(&scene, "teleport", "").starts_with("Error"));
        assert!(run_tool(&scene, "get_lane_info", "7").starts_with("Error"));
        assert!(run_tool(&scene, "check_action_safety", "fly").starts_with("Error"));
        assert!(run_tool(&scene, "check_action_safety", "\"faster\"").starts_with("safe"));
    }

    #[test]
    fn transport_errors_surface_retry_count() {
        let failures = (0..10).map(|_| Err("connection refused".to_string())).collect();
        let mut a = LlmAgent::new(Box::new(Scripted(failures)), 3);
        match a.decide(&obs()) {
            Err(TeacherError::Transport { retries, message }) => {
                assert_eq!(retries, MAX_TRANSPORT_RETRIES);
                assert!(message.contains("refused"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transient_transport_error_is_retried() {
        let script = vec![Err("timeout".to_string()), Ok("Final Answer: slower".to_string())].into();
        let mut a = LlmAgent::new(Box::new(Scripted(script)), 3);
        assert_eq!(a.decide(&obs()).unwrap(), MetaAction::Slower);
    }
}
