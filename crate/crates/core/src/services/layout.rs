//! Display layout: a time slot, one primary slot and an alert slot reserved for danger.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::coach::{CoachInstruction, InstructionKind};
use crate::message::payload::{LayoutDirective, Overlay, Slot, SlotId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutSettings {
    pub primary_ttl_ms: u64,
    pub alert_ttl_ms: u64,
    pub time_ttl_ms: u64,
    pub overlay_ttl_ms: u64,
}

impl Default for LayoutSettings {
    fn default() -> Self {
        Self {
            primary_ttl_ms: 5000,
            alert_ttl_ms: 8000,
            time_ttl_ms: 1000,
            overlay_ttl_ms: 10_000,
        }
    }
}

/// Lower ranks win the primary slot.
fn rank(kind: Option<InstructionKind>) -> u8 {
    match kind {
        None | Some(InstructionKind::Summary) => 0,
        Some(InstructionKind::DangerAlert) => 0,
        Some(InstructionKind::Direction) => 1,
        Some(InstructionKind::Waterpoint) => 2,
        Some(InstructionKind::SpeedUp | InstructionKind::SlowDown) => 3,
        Some(InstructionKind::Encourage) => 4,
        Some(InstructionKind::MaintainSilent) => u8::MAX,
    }
}

#[derive(Debug, Clone)]
struct Live {
    /// `None` for free text captions.
    kind: Option<InstructionKind>,
    text: String,
    ts_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct LayoutManager {
    settings: LayoutSettings,
    alert: Option<Live>,
    primary: Vec<Live>,
    overlays: Option<(Vec<Overlay>, u64)>,
}

pub fn clock_text(now_ms: u64) -> String {
    DateTime::<Utc>::from_timestamp_millis(now_ms as i64)
        .map(|t| t.format("%H:%M:%S").to_string())
        .unwrap_or_default()
}

impl LayoutManager {
    pub fn new(settings: LayoutSettings) -> Self {
        Self { settings, ..Default::default() }
    }

    pub fn settings(&self) -> &LayoutSettings {
        &self.settings
    }

    pub fn push(&mut self, instr: &CoachInstruction) {
        if instr.kind.is_silent() {
            return;
        }
        let live = Live {
            kind: Some(instr.kind),
            text: instr.text.clone(),
            ts_ms: instr.ts_ms,
        };
        if instr.kind == InstructionKind::DangerAlert {
            self.alert = Some(live);
        } else {
            self.primary.retain(|l| l.kind != live.kind);
            self.primary.push(live);
        }
    }

    pub fn caption(&mut self, text: impl Into<String>, ts_ms: u64) {
        self.primary.retain(|l| l.kind.is_some());
        self.primary.push(Live { kind: None, text: text.into(), ts_ms });
    }

    pub fn set_overlays(&mut self, overlays: Vec<Overlay>, ts_ms: u64) {
        self.overlays = Some((overlays, ts_ms));
    }

    fn remaining(ts_ms: u64, ttl: u64, now_ms: u64) -> Option<u64> {
        let age = now_ms.saturating_sub(ts_ms);
        (age < ttl).then(|| ttl - age)
    }

    /// Builds the directive for `now_ms`, dropping anything past its ttl.
    pub fn render(&mut self, now_ms: u64) -> LayoutDirective {
        let s = self.settings.clone();
        let mut slots = vec![Slot {
            id: SlotId::Time,
            content: clock_text(now_ms),
            ttl_ms: s.time_ttl_ms,
        }];
        if self.alert.as_ref().is_some_and(|a| Self::remaining(a.ts_ms, s.alert_ttl_ms, now_ms).is_none()) {
            self.alert = None;
        }
        self.primary.retain(|l| Self::remaining(l.ts_ms, s.primary_ttl_ms, now_ms).is_some());
        if let Some(a) = &self.alert {
            slots.push(Slot {
                id: SlotId::Alert,
                content: a.text.clone(),
                ttl_ms: Self::remaining(a.ts_ms, s.alert_ttl_ms, now_ms).unwrap_or(0),
            });
        }
        let best = self
            .primary
            .iter()
            .min_by(|a, b| rank(a.kind).cmp(&rank(b.kind)).then(b.ts_ms.cmp(&a.ts_ms)));
        if let Some(p) = best {
            let suppressed = self.alert.is_some() && p.kind == Some(InstructionKind::Encourage);
            if !suppressed {
                slots.push(Slot {
                    id: SlotId::Primary,
                    content: p.text.clone(),
                    ttl_ms: Self::remaining(p.ts_ms, s.primary_ttl_ms, now_ms).unwrap_or(0),
                });
            }
        }
        if self
            .overlays
            .as_ref()
            .is_some_and(|(_, ts)| Self::remaining(*ts, s.overlay_ttl_ms, now_ms).is_none())
        {
            self.overlays = None;
        }
        LayoutDirective {
            slots,
            overlays: self.overlays.as_ref().map(|(o, _)| o.clone()).unwrap_or_default(),
            basis_ts_ms: Some(now_ms),
        }
    }

    pub fn update(&mut self, instr: Option<&CoachInstruction>, now_ms: u64) -> LayoutDirective {
        if let Some(i) = instr {
            self.push(i);
        }
        self.render(now_ms)
    }
}

/// Stateless form: the directive for a single instruction seen at `now_ms`.
pub fn layout(instr: Option<&CoachInstruction>, now_ms: u64) -> LayoutDirective {
    LayoutManager::default().update(instr, now_ms)
}
