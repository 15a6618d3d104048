//! Scenario scripts: one action per line.
//!
//! ```text
//! # comment
//! provider <sp>                          set up a service provider
//! edge <e> [untrusted]                   declare an edge server
//! user <u> <sp>                          declare a user registered with <sp>
//! coordinator <e> <sp> [<behavior>]      onboard a coordinator on <e>
//! aggregator <e> <sp> [<behavior>]       onboard an aggregator on <e>
//! request <u> <e> [weights|update|garbage]
//! ```
//!
//! `<behavior>` is `honest` (default), `tamper`, `swap` or `replay`. Names
//! are `[A-Za-z0-9_-]+`, unique across kinds, and must be declared on an
//! earlier line than any use.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    Honest,
    /// The package is corrupted before the host checks it.
    Tamper,
    /// Rogue code replaces the enclave before attestation.
    Swap,
    /// Recorded evidence is replayed at the last attestation.
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestKind {
    Weights,
    Update,
    /// The request ciphertext is corrupted in transit.
    Garbage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Provider { sp: String },
    Edge { e: String, trusted: bool },
    User { u: String, sp: String },
    Coordinator { e: String, sp: String, behavior: Behavior },
    Aggregator { e: String, sp: String, behavior: Behavior },
    Request { u: String, e: String, kind: RequestKind },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    /// 1-based source line.
    pub line: usize,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Script {
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: undefined {kind} `{name}`")]
    UndefinedParty { line: usize, kind: &'static str, name: String },
    #[error("line {line}: `{name}` is already declared")]
    Duplicate { line: usize, name: String },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Provider,
    Edge,
    User,
}

impl Kind {
    fn word(self) -> &'static str {
        match self {
            Kind::Provider => "provider",
            Kind::Edge => "edge",
            Kind::User => "user",
        }
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Behavior {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "honest" => Behavior::Honest,
            "tamper" => Behavior::Tamper,
            "swap" => Behavior::Swap,
            "replay" => Behavior::Replay,
            _ => return None,
        })
    }

    fn word(self) -> &'static str {
        match self {
            Behavior::Honest => "honest",
            Behavior::Tamper => "tamper",
            Behavior::Swap => "swap",
            Behavior::Replay => "replay",
        }
    }
}

impl RequestKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weights" => RequestKind::Weights,
            "update" => RequestKind::Update,
            "garbage" => RequestKind::Garbage,
            _ => return None,
        })
    }

    fn word(self) -> &'static str {
        match self {
            RequestKind::Weights => "weights",
            RequestKind::Update => "update",
            RequestKind::Garbage => "garbage",
        }
    }
}

impl Script {
    /// Parses and checks that every referenced party was declared earlier.
    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        let mut names: BTreeMap<String, Kind> = BTreeMap::new();
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let w: Vec<&str> = body.split_whitespace().collect();
            let syntax = |msg: &str| ScriptError::Syntax { line, msg: msg.to_string() };
            for name in &w[1..] {
                if !valid_name(name) {
                    return Err(syntax(&format!("bad name `{name}`")));
                }
            }
            let declare = |names: &mut BTreeMap<String, Kind>, name: &str, kind: Kind| {
                if names.insert(name.to_string(), kind).is_some() {
                    Err(ScriptError::Duplicate { line, name: name.to_string() })
                } else {
                    Ok(())
                }
            };
            let need = |names: &BTreeMap<String, Kind>, name: &str, kind: Kind| {
                if names.get(name) == Some(&kind) {
                    Ok(name.to_string())
                } else {
                    Err(ScriptError::UndefinedParty { line, kind: kind.word(), name: name.to_string() })
                }
            };
            let behavior = |arg: Option<&&str>| match arg {
                None => Ok(Behavior::Honest),
                Some(b) => Behavior::parse(b).ok_or_else(|| syntax(&format!("unknown behavior `{b}`"))),
            };
            let action = match (w[0], w.len()) {
                ("provider", 2) => {
                    declare(&mut names, w[1], Kind::Provider)?;
                    Action::Provider { sp: w[1].into() }
                }
                ("edge", 2 | 3) => {
                    let trusted = match w.get(2) {
                        None => true,
                        Some(&"untrusted") => false,
                        Some(x) => return Err(syntax(&format!("unknown edge flag `{x}`"))),
                    };
                    declare(&mut names, w[1], Kind::Edge)?;
                    Action::Edge { e: w[1].into(), trusted }
                }
                ("user", 3) => {
                    let sp = need(&names, w[2], Kind::Provider)?;
                    declare(&mut names, w[1], Kind::User)?;
                    Action::User { u: w[1].into(), sp }
                }
                ("coordinator" | "aggregator", 3 | 4) => {
                    let e = need(&names, w[1], Kind::Edge)?;
                    let sp = need(&names, w[2], Kind::Provider)?;
                    let behavior = behavior(w.get(3))?;
                    if w[0] == "coordinator" {
                        Action::Coordinator { e, sp, behavior }
                    } else {
                        Action::Aggregator { e, sp, behavior }
                    }
                }
                ("request", 3 | 4) => {
                    let u = need(&names, w[1], Kind::User)?;
                    let e = need(&names, w[2], Kind::Edge)?;
                    let kind = match w.get(3) {
                        None => RequestKind::Update,
                        Some(k) => RequestKind::parse(k).ok_or_else(|| syntax(&format!("unknown request kind `{k}`")))?,
                    };
                    Action::Request { u, e, kind }
                }
                (cmd, _) => return Err(syntax(&format!("cannot parse `{cmd}` with {} arguments", w.len() - 1))),
            };
            steps.push(Step { line, action });
        }
        Ok(Script { steps })
    }

    pub fn providers(&self) -> Vec<String> {
        self.steps
            .iter()
            .filter_map(|s| match &s.action {
                Action::Provider { sp } => Some(sp.clone()),
                _ => None,
            })
            .collect()
    }

    /// Declared edges with their trust flag.
    pub fn edges(&self) -> Vec<(String, bool)> {
        self.steps
            .iter()
            .filter_map(|s| match &s.action {
                Action::Edge { e, trusted } => Some((e.clone(), *trusted)),
                _ => None,
            })
            .collect()
    }

    pub fn users(&self) -> Vec<String> {
        self.steps
            .iter()
            .filter_map(|s| match &s.action {
                Action::User { u, .. } => Some(u.clone()),
                _ => None,
            })
            .collect()
    }

    /// A well-formed random scenario: providers, edges and users first, then
    /// a mix of onboardings and requests, mostly honest.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Script {
        let mut lines = Vec::new();
        let sps: Vec<String> = (0..rng.gen_range(1..=2)).map(|i| format!("sp{i}")).collect();
        let edges: Vec<String> = (0..rng.gen_range(2..=4)).map(|i| format!("e{i}")).collect();
        let users: Vec<String> = (0..rng.gen_range(1..=3)).map(|i| format!("u{i}")).collect();
        for sp in &sps {
            lines.push(format!("provider {sp}"));
        }
        for e in &edges {
            let flag = if rng.gen_bool(0.15) { " untrusted" } else { "" };
            lines.push(format!("edge {e}{flag}"));
        }
        for u in &users {
            lines.push(format!("user {u} {}", sps.choose(rng).unwrap()));
        }
        let behavior = |rng: &mut R| match rng.gen_range(0..10) {
            0 => Behavior::Tamper,
            1 => Behavior::Swap,
            2 => Behavior::Replay,
            _ => Behavior::Honest,
        };
        for _ in 0..rng.gen_range(6..=14) {
            let e = edges.choose(rng).unwrap();
            let sp = sps.choose(rng).unwrap();
            let line = match rng.gen_range(0..10) {
                0..=1 => format!("coordinator {e} {sp} {}", behavior(rng).word()),
                2..=4 => format!("aggregator {e} {sp} {}", behavior(rng).word()),
                _ => {
                    let kind = match rng.gen_range(0..10) {
                        0..=3 => RequestKind::Weights,
                        4..=8 => RequestKind::Update,
                        _ => RequestKind::Garbage,
                    };
                    format!("request {} {e} {}", users.choose(rng).unwrap(), kind.word())
                }
            };
            lines.push(line);
        }
        Script::parse(&lines.join("\n")).expect("generated scripts are well formed")
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Provider { sp } => write!(f, "provider {sp}"),
            Action::Edge { e, trusted: true } => write!(f, "edge {e}"),
            Action::Edge { e, trusted: false } => write!(f, "edge {e} untrusted"),
            Action::User { u, sp } => write!(f, "user {u} {sp}"),
            Action::Coordinator { e, sp, behavior } => write!(f, "coordinator {e} {sp} {}", behavior.word()),
            Action::Aggregator { e, sp, behavior } => write!(f, "aggregator {e} {sp} {}", behavior.word()),
            Action::Request { u, e, kind } => write!(f, "request {u} {e} {}", kind.word()),
        }
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            writeln!(f, "{}", s.action)?;
        }
        Ok(())
    }
}
