//! Prompt scaffold for the language-model teacher.

use std::collections::VecDeque;
use std::fmt::Write;

use crate::sim::MetaAction;

use super::oracle::Scene;

pub const HISTORY_DEPTH: usize = 3;

const INTRO: &str = "You are a large language model acting as the driving assistant of an autonomous ego car \
on a multi-lane highway. At every decision frame you receive a description of the current scene and choose \
one meta-action for the next second of driving.";

const RULES: &str = "Common sense rules:\n\
- Avoid collisions above all else; keep a safe time gap to the vehicle ahead.\n\
- Drive as fast as is safe, up to the highest target speed.\n\
- Prefer the rightmost lane when it costs no speed.\n\
- Change lanes only when the target lane has room in front and behind.";

pub const TOOL_DESCRIPTIONS: &str = "Tools (call at most one per reply):\n\
- get_available_lanes: lists which lanes the ego can move to. Input: none.\n\
- check_action_safety: checks whether a meta-action is safe right now. Input: one meta-action name.\n\
- get_lane_info: lists vehicles in one lane relative to the ego. Input: a lane index.\n\
To call a tool reply with two lines:\nAction: <tool name>\nAction Input: <input>";

pub const OUTPUT_FORMAT_HEADER: &str = "Output format:";

/// Output-format section; names each meta-action exactly once.
pub fn output_format() -> String {
    let names: Vec<&str> = MetaAction::ALL.iter().map(|a| a.name()).collect();
    format!(
        "{OUTPUT_FORMAT_HEADER}\nWhen you are ready, reply with a line `Final Answer: <decision>` where <decision> is \
one of: {}. Follow it with a short explanation.",
        names.join(", ")
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub decision: MetaAction,
    pub explanation: String,
}

/// Prompt template plus the ring buffer of recent decisions.
#[derive(Debug, Clone, Default)]
pub struct PromptBundle {
    history: VecDeque<HistoryEntry>,
}

impl PromptBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn history(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.history.iter()
    }

    pub fn push_history(&mut self, decision: MetaAction, explanation: impl Into<String>) {
        if self.history.len() == HISTORY_DEPTH {
            self.history.pop_front();
        }
        self.history.push_back(HistoryEntry { decision, explanation: explanation.into() });
    }

    pub fn system_prompt(&self) -> String {
        format!("{INTRO}\n\n{RULES}\n\n{TOOL_DESCRIPTIONS}\n\n{}", output_format())
    }

    pub fn user_prompt(&self, scene: &Scene) -> String {
        let mut s = String::from("Previous decisions:\n");
        if self.history.is_empty() {
            s.push_str("- none\n");
        }
        for h in &self.history {
            let _ = writeln!(s, "- {}: {}", h.decision, h.explanation);
        }
        s.push('\n');
        s.push_str(&describe_scene(scene));
        s
    }
}

/// Natural-language description of the ego and its neighbours.
pub fn describe_scene(scene: &Scene) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Scenario: the road has {} lanes numbered 0 (leftmost) to {}. The ego car drives in lane {} at {:.1} m/s.",
        scene.lanes,
        scene.lanes - 1,
        scene.ego_lane,
        scene.ego_v
    );
    if scene.neighbors.is_empty() {
        s.push_str("No other vehicles are observed.\n");
    }
    for (i, n) in scene.neighbors.iter().enumerate() {
        let rel = if n.dx >= 0.0 { "ahead of" } else { "behind" };
        let _ = writeln!(s, "Vehicle {} is in lane {}, {:.1} m {rel} the ego, driving at {:.1} m/s.", i + 1, n.lane, n.dx.abs(), n.v);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::oracle::Neighbor;

    #[test]
    fn output_section_names_each_action_once() {
        let prompt = PromptBundle::new().system_prompt();
        let section = &prompt[prompt.find(OUTPUT_FORMAT_HEADER).unwrap()..];
        for a in MetaAction::ALL {
            assert_eq!(section.matches(a.name()).count(), 1, "{a}");
        }
    }

    #[test]
    fn history_keeps_last_three() {
        let mut b = PromptBundle::new();
        for (i, a) in MetaAction::ALL.into_iter().enumerate() {
            b.push_history(a, format!("reason {i}"));
        }
        let kept: Vec<MetaAction> = b.history().map(|h| h.decision).collect();
        assert_eq!(kept, vec![MetaAction::LaneRight, MetaAction::Faster, MetaAction::Slower]);
    }

    #[test]
    fn scene_description_mentions_neighbours() {
        let scene = Scene { lanes: 3, ego_lane: 1, ego_v: 20.0, neighbors: vec![Neighbor { lane: 2, dx: -12.5, v: 18.0 }] };
        let text = PromptBundle::new().user_prompt(&scene);
        assert!(text.contains("lane 1 at 20.0 m/s"));
        assert!(text.contains("12.5 m behind"));
    }
}
