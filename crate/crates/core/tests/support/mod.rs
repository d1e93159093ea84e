//! Independent oracles and generators shared by the property and
//! acceptance suites. Nothing here calls into the code it checks.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use tomk::config::{ComponentDescriptor, Layer, PipelineConfig};
use tomk::services::coach::InstructionKind;

/// Random valid DAG pipeline with 2..=max_nodes components named `c0..`.
pub fn random_dag(rng: &mut impl Rng, max_nodes: usize) -> PipelineConfig {
    let n = rng.random_range(2..=max_nodes);
    let mut layers: Vec<Layer> = (0..n)
        .map(|i| match i {
            0 => Layer::Input,
            i if i == n - 1 => Layer::Output,
            _ => [Layer::Input, Layer::Processing, Layer::Service, Layer::Output][rng.random_range(0..4)],
        })
        .collect();
    layers.sort();
    let density: f64 = rng.random_range(0.15..0.7);
    let legal = |a: Layer, b: Layer| {
        matches!(
            (a, b),
            (Layer::Input, Layer::Processing | Layer::Service)
                | (Layer::Processing, Layer::Processing | Layer::Service | Layer::Output)
                | (Layer::Service, Layer::Service | Layer::Output)
        )
    };
    let components = (0..n)
        .map(|i| {
            let next = (i + 1..n)
                .filter(|&j| legal(layers[i], layers[j]) && rng.random_bool(density))
                .map(|j| format!("c{j}"))
                .collect();
            ComponentDescriptor {
                name: format!("c{i}"),
                layer: layers[i],
                entry_point: format!("c{i}.on_data"),
                exit_point: format!("c{i}.stop"),
                next,
            }
        })
        .collect();
    PipelineConfig { name: "random".into(), components, context: vec![], settings: Default::default() }
}

/// Reachability by transitive closure over an adjacency matrix.
pub fn reachable(cfg: &PipelineConfig, start: &str) -> BTreeSet<String> {
    let names: Vec<&str> = cfg.components.iter().map(|c| c.name.as_str()).collect();
    let idx = |s: &str| names.iter().position(|n| *n == s);
    let n = names.len();
    let mut m = vec![vec![false; n]; n];
    for (i, c) in cfg.components.iter().enumerate() {
        for t in &c.next {
            if let Some(j) = idx(t) {
                m[i][j] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if m[i][k] && m[k][j] {
                    m[i][j] = true;
                }
            }
        }
    }
    let s = idx(start).expect("start exists");
    (0..n).filter(|&j| m[s][j]).map(|j| names[j].to_string()).collect()
}

/// Plan shapes the coach oracle understands.
#[derive(Debug, Clone)]
pub enum OraclePlan {
    /// `(duration_s, target)`; `None` target falls back to the default.
    Timed(Vec<(f64, Option<f64>)>),
    Distance(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct OracleRules {
    pub default_target: f64,
    pub band: f64,
    pub persistence: usize,
    pub refractory_ms: u64,
    pub window: usize,
    pub encourage_s: f64,
}

impl Default for OracleRules {
    fn default() -> Self {
        Self { default_target: 10.0, band: 0.5, persistence: 3, refractory_ms: 10_000, window: 5, encourage_s: 300.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Side {
    Below,
    Inside,
    Above,
}

/// Rule interpreter that recomputes everything from the full history at
/// each sample. Returns `(ts, kind)` for every non-silent instruction and
/// the index of the sample at which the plan ran out, if it did.
pub fn coach_oracle(
    plan: &OraclePlan,
    rules: &OracleRules,
    samples: &[(u64, f64)],
) -> (Vec<(u64, InstructionKind)>, Option<usize>) {
    let mut fired: Vec<(u64, InstructionKind)> = Vec::new();
    let mut sides: Vec<Side> = Vec::new();
    let t0 = match samples.first() {
        Some(s) => s.0,
        None => return (fired, None),
    };
    for i in 0..samples.len() {
        let elapsed = (samples[i].0 - t0) as f64 / 1000.0;
        let distance: f64 = (1..=i)
            .map(|k| (samples[k - 1].1 + samples[k].1) / 2.0 * ((samples[k].0 - samples[k - 1].0) as f64 / 1000.0) / 3.6)
            .sum();
        let target = match plan {
            OraclePlan::Timed(segs) => {
                let mut end = 0.0;
                let mut found = None;
                for (d, t) in segs {
                    end += d;
                    if elapsed < end {
                        found = Some(t.unwrap_or(rules.default_target));
                        break;
                    }
                }
                found
            }
            OraclePlan::Distance(m) => (distance < *m).then_some(rules.default_target),
        };
        let Some(target) = target else {
            return (fired, Some(i));
        };
        let lo = i.saturating_sub(rules.window - 1);
        let window = &samples[lo..=i];
        let mean = window.iter().map(|s| s.1).sum::<f64>() / window.len() as f64;
        let side = if mean < target - rules.band {
            Side::Below
        } else if mean > target + rules.band {
            Side::Above
        } else {
            Side::Inside
        };
        sides.push(side);
        let run = sides.iter().rev().take_while(|s| **s == side).count();
        let kind = match side {
            Side::Below if run >= rules.persistence => Some(InstructionKind::SpeedUp),
            Side::Above if run >= rules.persistence => Some(InstructionKind::SlowDown),
            _ => None,
        };
        let ts = samples[i].0;
        if let Some(kind) = kind {
            let last = fired.iter().rev().find(|(_, k)| *k == kind).map(|(t, _)| *t);
            if last.is_none_or(|l| ts - l >= rules.refractory_ms) {
                fired.push((ts, kind));
            }
        }
        let due = (elapsed / rules.encourage_s).floor() as usize;
        let given = fired.iter().filter(|(_, k)| *k == InstructionKind::Encourage).count();
        if due > given {
            fired.push((ts, InstructionKind::Encourage));
        }
    }
    (fired, None)
}

/// Trapezoid distance for `(ts_ms, speed_kmh)` samples, in metres.
pub fn trapezoid_m(samples: &[(u64, f64)]) -> f64 {
    samples
        .windows(2)
        .map(|w| (w[0].1 + w[1].1) / 2.0 * (w[1].0 - w[0].0) as f64 / 3600.0)
        .sum()
}

/// A context rule as the priority oracle sees it.
#[derive(Debug, Clone)]
pub struct OracleRule {
    pub service: String,
    /// Keywords for a voice rule; empty with `tag` set for a tag rule.
    pub keywords: Vec<String>,
    pub tag: Option<String>,
    pub priority: i32,
}

fn tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn phrase_in(words: &[String], phrase: &str) -> bool {
    let p = tokens(phrase);
    !p.is_empty() && (0..words.len()).any(|i| words[i..].starts_with(&p))
}

/// Chosen service for an input: `Some(None)` is a stop, `None` no match.
/// Among matching rules the maximum of (voice over tag, priority, earlier
/// declaration) wins; every pair of rules is compared.
pub fn priority_oracle(
    rules: &[OracleRule],
    tag: &str,
    transcript: Option<&str>,
) -> Option<Option<String>> {
    let words = transcript.map(tokens);
    if let Some(w) = &words {
        if phrase_in(w, "stop") {
            return Some(None);
        }
    }
    let matches: Vec<usize> = (0..rules.len())
        .filter(|&i| {
            let r = &rules[i];
            match (&words, &r.tag) {
                (_, Some(t)) => t == tag,
                (Some(w), None) => r.keywords.iter().any(|k| phrase_in(w, k)),
                (None, None) => false,
            }
        })
        .collect();
    let key = |i: usize| (rules[i].tag.is_none() as u8, rules[i].priority, std::cmp::Reverse(i));
    let winners: Vec<usize> = matches.iter().copied().filter(|&i| matches.iter().all(|&j| key(i) >= key(j))).collect();
    assert!(winners.len() <= 1, "maximum must be unique");
    winners.first().map(|&i| Some(rules[i].service.clone()))
}
