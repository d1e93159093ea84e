//! Selection of the active assistive service.
//!
//! Decisions are pure functions of the current state and one envelope. The
//! engine applies them and performs the exit/activation side effects.

use serde::Serialize;
use thiserror::Error;

use crate::config::ContextRuleDecl;
use crate::message::payload::VoiceInput;
use crate::message::{Envelope, Namespace, TypeTag};

/// Keywords that return the kernel to idle.
pub const STOP_KEYWORDS: &[&str] = &["stop"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "pattern")]
pub enum TriggerPattern {
    /// Lower-cased keywords; multi-word keywords match contiguous words.
    VoiceKeywords(Vec<String>),
    TagPresence(TypeTag),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TriggerRule {
    pub service: String,
    pub pattern: TriggerPattern,
    pub priority: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum SwitchCause {
    Voice(String),
    Tag(TypeTag),
    Explicit,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Stay,
    /// `None` target means idle.
    SwitchTo {
        target: Option<String>,
        cause: SwitchCause,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SwitchRecord {
    pub ts_ms: u64,
    pub from: Option<String>,
    pub to: Option<String>,
    pub cause: SwitchCause,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub from: Option<String>,
    pub to: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContextError {
    #[error("unknown service {0:?}")]
    UnknownService(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContextState {
    pub active: Option<String>,
    /// Switchable services in declaration order.
    pub services: Vec<String>,
    pub rules: Vec<TriggerRule>,
    pub history: Vec<SwitchRecord>,
}

/// Lower-cases and splits on anything that is not alphanumeric.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn contains_phrase(haystack: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && haystack.windows(phrase.len()).any(|w| w == phrase)
}

/// Returns the first keyword of `keywords` found in the transcript words.
pub fn match_keywords<'a>(transcript_words: &[String], keywords: &'a [String]) -> Option<&'a str> {
    keywords
        .iter()
        .find(|k| contains_phrase(transcript_words, &words(k)))
        .map(String::as_str)
}

impl ContextState {
    pub fn new(decls: &[ContextRuleDecl]) -> Self {
        let mut services: Vec<String> = Vec::new();
        let mut rules = Vec::new();
        for d in decls {
            if !services.contains(&d.service) {
                services.push(d.service.clone());
            }
            let keywords: Vec<String> = d
                .voice_keywords
                .iter()
                .map(|k| k.trim().to_lowercase())
                .filter(|k| !k.is_empty())
                .collect();
            if !keywords.is_empty() {
                rules.push(TriggerRule {
                    service: d.service.clone(),
                    pattern: TriggerPattern::VoiceKeywords(keywords),
                    priority: d.priority,
                });
            }
            for t in &d.tags {
                rules.push(TriggerRule {
                    service: d.service.clone(),
                    pattern: TriggerPattern::TagPresence(TypeTag::parse(t)),
                    priority: d.priority,
                });
            }
        }
        Self {
            active: None,
            services,
            rules,
            history: Vec::new(),
        }
    }

    pub fn is_switchable(&self, service: &str) -> bool {
        self.services.iter().any(|s| s == service)
    }

    /// Index of the winning rule among those `matches` accepts: highest
    /// priority, earliest declaration on ties.
    fn best_rule(&self, mut matches: impl FnMut(&TriggerRule) -> bool) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, r) in self.rules.iter().enumerate() {
            if !matches(r) {
                continue;
            }
            match best {
                Some(b) if self.rules[b].priority >= r.priority => {}
                _ => best = Some(i),
            }
        }
        best
    }

    /// Decides whether `e` should change the active service.
    ///
    /// Explicit voice commands outrank tag-presence rules; a stop keyword
    /// outranks everything.
    pub fn classify_input(&self, e: &Envelope) -> Decision {
        if !matches!(e.type_tag.namespace(), Some(Namespace::Input | Namespace::Sensor)) {
            return Decision::Stay;
        }
        if let Some(voice) = e.payload_as::<VoiceInput>() {
            let heard = words(&voice.transcript);
            if STOP_KEYWORDS
                .iter()
                .any(|k| contains_phrase(&heard, &words(k)))
            {
                return Decision::SwitchTo {
                    target: None,
                    cause: SwitchCause::Stop,
                };
            }
            let best = self.best_rule(|r| match &r.pattern {
                TriggerPattern::VoiceKeywords(k) => match_keywords(&heard, k).is_some(),
                TriggerPattern::TagPresence(_) => false,
            });
            if let Some(i) = best {
                let rule = &self.rules[i];
                let TriggerPattern::VoiceKeywords(k) = &rule.pattern else {
                    unreachable!()
                };
                let keyword = match_keywords(&heard, k).unwrap_or_default().to_string();
                return Decision::SwitchTo {
                    target: Some(rule.service.clone()),
                    cause: SwitchCause::Voice(keyword),
                };
            }
        }
        let best = self.best_rule(|r| r.pattern == TriggerPattern::TagPresence(e.type_tag.clone()));
        match best {
            Some(i) => Decision::SwitchTo {
                target: Some(self.rules[i].service.clone()),
                cause: SwitchCause::Tag(e.type_tag.clone()),
            },
            None => Decision::Stay,
        }
    }

    /// Applies a decision. Returns the transition to carry out, or `None`
    /// when nothing changes.
    pub fn apply_switch(
        &mut self,
        decision: Decision,
        ts_ms: u64,
    ) -> Result<Option<Transition>, ContextError> {
        let Decision::SwitchTo { target, cause } = decision else {
            return Ok(None);
        };
        if let Some(name) = &target {
            if !self.is_switchable(name) {
                return Err(ContextError::UnknownService(name.clone()));
            }
        }
        if target == self.active {
            return Ok(None);
        }
        let from = std::mem::replace(&mut self.active, target.clone());
        self.history.push(SwitchRecord {
            ts_ms,
            from: from.clone(),
            to: target.clone(),
            cause,
        });
        Ok(Some(Transition { from, to: target }))
    }
}

/// Keyword maps used by the bundled demo pipelines.
pub fn default_rules() -> Vec<ContextRuleDecl> {
    let decl = |service: &str, kw: &[&str]| ContextRuleDecl {
        service: service.into(),
        voice_keywords: kw.iter().map(|s| s.to_string()).collect(),
        tags: vec![],
        priority: 1,
    };
    vec![
        decl("running_service", &["run", "running", "jog"]),
        decl("translation_service", &["translate", "translation"]),
        decl("query_service", &["what", "which", "is this", "tell me"]),
    ]
}
