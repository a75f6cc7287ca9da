//! Three critic roles, their chat templates, and prompt merging.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{ChatClient, ChatMessage, ChatRequest};
use crate::error::{Error, Result};
use crate::image::Image;

/// Bumped whenever any template text changes.
pub const TEMPLATE_VERSION: &str = "1";

const RESPONSE_FORMAT: &str = include_str!("../../templates/response_format.txt");
const FORMAT_REMINDER: &str = include_str!("../../templates/format_reminder.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    GlobalAuditor,
    ContextualEnricher,
    LocalRefiner,
}

impl AgentRole {
    /// In merge priority order.
    pub const ALL: [AgentRole; 3] = [
        AgentRole::GlobalAuditor,
        AgentRole::ContextualEnricher,
        AgentRole::LocalRefiner,
    ];

    /// Lower wins when two roles target the same entity.
    pub fn priority(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentRole::GlobalAuditor => "global_auditor",
            AgentRole::ContextualEnricher => "contextual_enricher",
            AgentRole::LocalRefiner => "local_refiner",
        }
    }

    fn role_text(self) -> &'static str {
        match self {
            AgentRole::GlobalAuditor => include_str!("../../templates/global_auditor.txt"),
            AgentRole::ContextualEnricher => {
                include_str!("../../templates/contextual_enricher.txt")
            }
            AgentRole::LocalRefiner => include_str!("../../templates/local_refiner.txt"),
        }
    }

    /// Full system prompt sent to the chat model.
    pub fn system_prompt(self) -> String {
        format!(
            "{}\n{}",
            self.role_text().trim_end(),
            RESPONSE_FORMAT.trim_end()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub target: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentCritique {
    pub role: AgentRole,
    pub findings: String,
    pub suggestions: Vec<Suggestion>,
}

#[derive(Deserialize)]
struct RawCritique {
    #[serde(default)]
    findings: String,
    suggestions: Vec<Suggestion>,
}

/// Content hash of an image, used as its reference in chat requests.
pub fn image_ref(image: &Image) -> String {
    let mut h = Sha256::new();
    h.update((image.width() as u64).to_le_bytes());
    h.update((image.height() as u64).to_le_bytes());
    for v in image.data() {
        h.update(((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_le_bytes());
    }
    let digest = h.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

/// Parses a reply, tolerating prose or code fences around one JSON object.
pub fn parse_critique(role: AgentRole, reply: &str) -> Option<AgentCritique> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end < start {
        return None;
    }
    let raw: RawCritique = serde_json::from_str(&reply[start..=end]).ok()?;
    let suggestions: Vec<Suggestion> = raw
        .suggestions
        .into_iter()
        .map(|s| Suggestion {
            target: s.target.trim().to_string(),
            instruction: s.instruction.trim().to_string(),
        })
        .filter(|s| !s.target.is_empty() && !s.instruction.is_empty())
        .collect();
    if suggestions.is_empty() {
        return None;
    }
    Some(AgentCritique {
        role,
        findings: raw.findings,
        suggestions,
    })
}

/// Asks one role to critique `image`. A malformed reply gets one reprompt
/// with a format reminder before giving up.
pub fn critique(
    image_ref: &str,
    role: AgentRole,
    client: &dyn ChatClient,
) -> Result<AgentCritique> {
    let mut request = ChatRequest {
        system: role.system_prompt(),
        image_ref: image_ref.to_string(),
        history: Vec::new(),
    };
    let first = client.complete(&request)?;
    if let Some(c) = parse_critique(role, &first) {
        return Ok(c);
    }
    log::warn!("{} reply was not parseable, reprompting", role.name());
    request.history.push(ChatMessage {
        role: "assistant".into(),
        content: first,
    });
    request.history.push(ChatMessage {
        role: "user".into(),
        content: FORMAT_REMINDER.trim_end().to_string(),
    });
    let second = client.complete(&request)?;
    parse_critique(role, &second).ok_or_else(|| {
        Error::UnparseableResponse(format!(
            "{} reply after reminder: {}",
            role.name(),
            second.chars().take(120).collect::<String>()
        ))
    })
}

/// Merged instruction and the entities it edits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesizedPrompt {
    pub prompt: String,
    pub targets: Vec<String>,
}

pub const DEFAULT_PROMPT_BUDGET: usize = 64;

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Merges suggestions into one instruction.
///
/// Suggestions are ranked by role priority, then by their order within a
/// critique; a target already claimed by a higher-priority suggestion is
/// dropped. The ranked list is taken greedily as a prefix while the joined
/// text (`" and "` between items) stays within `budget` whitespace tokens.
/// If even the first suggestion is over budget it is cut to fit.
pub fn synthesize_prompt(critiques: &[AgentCritique], budget: usize) -> Result<SynthesizedPrompt> {
    let mut ranked: Vec<&AgentCritique> = critiques.iter().collect();
    ranked.sort_by_key(|c| c.role.priority());
    let mut seen = HashSet::new();
    let merged: Vec<&Suggestion> = ranked
        .iter()
        .flat_map(|c| &c.suggestions)
        .filter(|s| seen.insert(s.target.to_lowercase()))
        .collect();
    let Some(first) = merged.first() else {
        return Err(Error::EmptyCritiques);
    };
    let budget = budget.max(1);
    if word_count(&first.instruction) > budget {
        let cut: Vec<&str> = first.instruction.split_whitespace().take(budget).collect();
        return Ok(SynthesizedPrompt {
            prompt: cut.join(" "),
            targets: vec![first.target.clone()],
        });
    }
    let mut parts = vec![first.instruction.as_str()];
    let mut targets = vec![first.target.clone()];
    let mut used = word_count(&first.instruction);
    for s in &merged[1..] {
        let cost = 1 + word_count(&s.instruction);
        if used + cost > budget {
            break;
        }
        used += cost;
        parts.push(&s.instruction);
        targets.push(s.target.clone());
    }
    Ok(SynthesizedPrompt {
        prompt: parts.join(" and "),
        targets,
    })
}
