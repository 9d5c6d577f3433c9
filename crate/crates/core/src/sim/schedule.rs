//! Adversary scripts.
//!
//! One action per line: `<virtual_nanos> <ACTION> <args...>`. Blank lines
//! and `#` comments are ignored, and an optional `SEED <n>` line sets the
//! run seed. Nodes are numbered from 1; `ext` (or 0) is the external
//! source.
//!
//! ```text
//! SEED 42
//! 20000000000 FORCE_EXIT 2 3000000
//! 21000000000 SET_COUNTER_RATE 1 0.90
//! 22000000000 OVERWRITE_COUNTER 3 12345
//! 23000000000 SET_CPU_FREQUENCY_SCALE 2 0.5
//! 24000000000 DELAY_MESSAGE src=1 dst=2 type=TsReply for=1000000000 300000
//! 25000000000 DROP_MESSAGE dst=ext for=5000000000
//! 26000000000 REPLAY_MESSAGE src=2 type=TsRequest seq=17
//! 27000000000 ISOLATE_NODE 3 2000000000
//! ```
//!
//! Message rules apply to datagrams sent while the rule is active: from
//! its time for `for=` nanoseconds, or forever when `for=` is absent.

use std::fmt;

use thiserror::Error;

use crate::time::{DriftRate, NodeId};
use crate::wire::MsgType;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid schedule, line {line}: {message}")]
pub struct ScheduleError {
    pub line: usize,
    pub message: String,
}

/// Exit duration used by `FORCE_EXIT` when none is given.
pub const DEFAULT_FORCED_OFF_NANOS: u64 = 20_000;

/// Selects datagrams by sender, receiver, type and sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MessageMatch {
    pub src: Option<NodeId>,
    pub dst: Option<NodeId>,
    pub msg_type: Option<MsgType>,
    pub seq: Option<u64>,
    /// How long the rule stays active; `None` means until the end.
    pub duration: Option<u64>,
}

impl MessageMatch {
    pub fn matches(&self, src: NodeId, dst: NodeId, msg_type: MsgType, seq: u64) -> bool {
        self.src.is_none_or(|s| s == src)
            && self.dst.is_none_or(|d| d == dst)
            && self.msg_type.is_none_or(|t| t == msg_type)
            && self.seq.is_none_or(|q| q == seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversaryAction {
    /// Preempt the node for `off_nanos`.
    ForceExit {
        node: NodeId,
        off_nanos: u64,
    },
    SetCounterRate {
        node: NodeId,
        rate: DriftRate,
    },
    OverwriteCounter {
        node: NodeId,
        ticks: u64,
    },
    SetCpuFrequencyScale {
        node: NodeId,
        scale: DriftRate,
    },
    DelayMessage {
        rule: MessageMatch,
        delay_nanos: u64,
    },
    DropMessage {
        rule: MessageMatch,
    },
    ReplayMessage {
        rule: MessageMatch,
    },
    IsolateNode {
        node: NodeId,
        duration_nanos: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledAction {
    pub at: u64,
    pub action: AdversaryAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AdversarySchedule {
    pub seed: u64,
    pub events: Vec<ScheduledAction>,
}

impl AdversarySchedule {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            events: Vec::new(),
        }
    }

    pub fn push(&mut self, at: u64, action: AdversaryAction) -> &mut Self {
        self.events.push(ScheduledAction { at, action });
        self
    }

    /// Events must be in time order.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        for (i, w) in self.events.windows(2).enumerate() {
            if w[1].at < w[0].at {
                return Err(ScheduleError {
                    line: i + 2,
                    message: format!(
                        "event at {} precedes the previous event at {}",
                        w[1].at, w[0].at
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ScheduleError> {
        let mut schedule = Self::default();
        let mut last_at = 0u64;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| ScheduleError { line, message };
            let mut tokens = content.split_whitespace();
            let first = tokens.next().expect("non-empty line");
            if first.eq_ignore_ascii_case("SEED") {
                let v = tokens
                    .next()
                    .ok_or_else(|| err("SEED needs a value".into()))?;
                schedule.seed = v.parse().map_err(|_| err(format!("bad seed {v:?}")))?;
                continue;
            }
            let at: u64 = first
                .parse()
                .map_err(|_| err(format!("expected virtual nanoseconds, found {first:?}")))?;
            if at < last_at {
                return Err(err(format!(
                    "event at {at} precedes the previous event at {last_at}"
                )));
            }
            last_at = at;
            let name = tokens.next().ok_or_else(|| err("missing action".into()))?;
            let args: Vec<&str> = tokens.collect();
            let action = parse_action(name, &args).map_err(err)?;
            schedule.events.push(ScheduledAction { at, action });
        }
        Ok(schedule)
    }
}

fn parse_node(s: &str) -> Result<NodeId, String> {
    if s.eq_ignore_ascii_case("ext") {
        return Ok(0);
    }
    s.parse().map_err(|_| format!("bad node id {s:?}"))
}

fn parse_u64(s: &str, what: &str) -> Result<u64, String> {
    s.parse().map_err(|_| format!("bad {what} {s:?}"))
}

fn parse_rate(s: &str) -> Result<DriftRate, String> {
    DriftRate::from_decimal(s).map_err(|e| format!("bad ratio {s:?}: {e}"))
}

/// Splits `key=value` predicate tokens from positional ones.
fn parse_rule<'a>(args: &[&'a str]) -> Result<(MessageMatch, Vec<&'a str>), String> {
    let mut rule = MessageMatch::default();
    let mut rest = Vec::new();
    for &a in args {
        let Some((k, v)) = a.split_once('=') else {
            rest.push(a);
            continue;
        };
        let any = v == "*";
        match k {
            "src" if !any => rule.src = Some(parse_node(v)?),
            "dst" if !any => rule.dst = Some(parse_node(v)?),
            "type" if !any => {
                rule.msg_type = Some(
                    MsgType::from_name(v).ok_or_else(|| format!("unknown message type {v:?}"))?,
                )
            }
            "seq" if !any => rule.seq = Some(parse_u64(v, "seq")?),
            "for" => rule.duration = Some(parse_u64(v, "duration")?),
            "src" | "dst" | "type" | "seq" => {}
            _ => return Err(format!("unknown predicate key {k:?}")),
        }
    }
    Ok((rule, rest))
}

fn expect_args<'a>(
    name: &str,
    args: &'a [&'a str],
    n: std::ops::RangeInclusive<usize>,
) -> Result<&'a [&'a str], String> {
    if n.contains(&args.len()) {
        Ok(args)
    } else {
        Err(format!(
            "{name} takes {}..={} arguments, got {}",
            n.start(),
            n.end(),
            args.len()
        ))
    }
}

fn parse_action(name: &str, args: &[&str]) -> Result<AdversaryAction, String> {
    let upper = name.to_ascii_uppercase();
    Ok(match upper.as_str() {
        "FORCE_EXIT" => {
            let a = expect_args(&upper, args, 1..=2)?;
            AdversaryAction::ForceExit {
                node: parse_node(a[0])?,
                off_nanos: a
                    .get(1)
                    .map_or(Ok(DEFAULT_FORCED_OFF_NANOS), |s| parse_u64(s, "duration"))?,
            }
        }
        "SET_COUNTER_RATE" => {
            let a = expect_args(&upper, args, 2..=2)?;
            AdversaryAction::SetCounterRate {
                node: parse_node(a[0])?,
                rate: parse_rate(a[1])?,
            }
        }
        "OVERWRITE_COUNTER" => {
            let a = expect_args(&upper, args, 2..=2)?;
            AdversaryAction::OverwriteCounter {
                node: parse_node(a[0])?,
                ticks: parse_u64(a[1], "tick value")?,
            }
        }
        "SET_CPU_FREQUENCY_SCALE" => {
            let a = expect_args(&upper, args, 2..=2)?;
            AdversaryAction::SetCpuFrequencyScale {
                node: parse_node(a[0])?,
                scale: parse_rate(a[1])?,
            }
        }
        "DELAY_MESSAGE" => {
            let (rule, rest) = parse_rule(args)?;
            let a = expect_args(&upper, &rest, 1..=1)?;
            AdversaryAction::DelayMessage {
                rule,
                delay_nanos: parse_u64(a[0], "delay")?,
            }
        }
        "DROP_MESSAGE" => {
            let (rule, rest) = parse_rule(args)?;
            expect_args(&upper, &rest, 0..=0)?;
            AdversaryAction::DropMessage { rule }
        }
        "REPLAY_MESSAGE" => {
            let (rule, rest) = parse_rule(args)?;
            expect_args(&upper, &rest, 0..=0)?;
            AdversaryAction::ReplayMessage { rule }
        }
        "ISOLATE_NODE" => {
            let a = expect_args(&upper, args, 2..=2)?;
            AdversaryAction::IsolateNode {
                node: parse_node(a[0])?,
                duration_nanos: parse_u64(a[1], "duration")?,
            }
        }
        other => return Err(format!("unknown action {other:?}")),
    })
}

fn fmt_node(id: NodeId) -> String {
    if id == 0 {
        "ext".into()
    } else {
        id.to_string()
    }
}

fn fmt_rate(r: DriftRate) -> String {
    format!("{:.12}", r.as_f64())
}

impl fmt::Display for MessageMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(s) = self.src {
            parts.push(format!("src={}", fmt_node(s)));
        }
        if let Some(d) = self.dst {
            parts.push(format!("dst={}", fmt_node(d)));
        }
        if let Some(t) = self.msg_type {
            parts.push(format!("type={}", t.name()));
        }
        if let Some(q) = self.seq {
            parts.push(format!("seq={q}"));
        }
        if let Some(d) = self.duration {
            parts.push(format!("for={d}"));
        }
        f.write_str(&parts.join(" "))
    }
}

fn join(rule: &MessageMatch, tail: Option<u64>) -> String {
    let r = rule.to_string();
    match (r.is_empty(), tail) {
        (true, None) => String::new(),
        (true, Some(t)) => format!(" {t}"),
        (false, None) => format!(" {r}"),
        (false, Some(t)) => format!(" {r} {t}"),
    }
}

impl fmt::Display for AdversaryAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AdversaryAction::ForceExit { node, off_nanos } => {
                write!(f, "FORCE_EXIT {} {off_nanos}", fmt_node(node))
            }
            AdversaryAction::SetCounterRate { node, rate } => {
                write!(f, "SET_COUNTER_RATE {} {}", fmt_node(node), fmt_rate(rate))
            }
            AdversaryAction::OverwriteCounter { node, ticks } => {
                write!(f, "OVERWRITE_COUNTER {} {ticks}", fmt_node(node))
            }
            AdversaryAction::SetCpuFrequencyScale { node, scale } => {
                write!(
                    f,
                    "SET_CPU_FREQUENCY_SCALE {} {}",
                    fmt_node(node),
                    fmt_rate(scale)
                )
            }
            AdversaryAction::DelayMessage { rule, delay_nanos } => {
                write!(f, "DELAY_MESSAGE{}", join(&rule, Some(delay_nanos)))
            }
            AdversaryAction::DropMessage { rule } => write!(f, "DROP_MESSAGE{}", join(&rule, None)),
            AdversaryAction::ReplayMessage { rule } => {
                write!(f, "REPLAY_MESSAGE{}", join(&rule, None))
            }
            AdversaryAction::IsolateNode {
                node,
                duration_nanos,
            } => {
                write!(f, "ISOLATE_NODE {} {duration_nanos}", fmt_node(node))
            }
        }
    }
}

impl fmt::Display for AdversarySchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "SEED {}", self.seed)?;
        for e in &self.events {
            writeln!(f, "{} {}", e.at, e.action)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# comment
SEED 42
20000000000 FORCE_EXIT 2 3000000
21000000000 SET_COUNTER_RATE 1 0.90
22000000000 OVERWRITE_COUNTER 3 12345
23000000000 SET_CPU_FREQUENCY_SCALE 2 0.5
24000000000 DELAY_MESSAGE src=1 dst=2 type=TsReply for=1000000000 300000
25000000000 DROP_MESSAGE dst=ext for=5000000000
26000000000 REPLAY_MESSAGE src=2 type=TsRequest seq=17
27000000000 ISOLATE_NODE 3 2000000000
27000000000 FORCE_EXIT 1
";

    #[test]
    fn parses_every_action() {
        let s = AdversarySchedule::parse(SAMPLE).unwrap();
        assert_eq!(s.seed, 42);
        assert_eq!(s.events.len(), 9);
        assert_eq!(
            s.events[4].action,
            AdversaryAction::DelayMessage {
                rule: MessageMatch {
                    src: Some(1),
                    dst: Some(2),
                    msg_type: Some(MsgType::TsReply),
                    seq: None,
                    duration: Some(1_000_000_000),
                },
                delay_nanos: 300_000,
            }
        );
        assert_eq!(
            s.events[8].action,
            AdversaryAction::ForceExit {
                node: 1,
                off_nanos: DEFAULT_FORCED_OFF_NANOS
            }
        );
        s.validate().unwrap();
    }

    #[test]
    fn display_round_trips() {
        let s = AdversarySchedule::parse(SAMPLE).unwrap();
        let again = AdversarySchedule::parse(&s.to_string()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn unsorted_is_rejected_with_line() {
        let e = AdversarySchedule::parse("10 FORCE_EXIT 1\n\n5 FORCE_EXIT 2\n").unwrap_err();
        assert_eq!(e.line, 3);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        for (text, line) in [
            ("x FORCE_EXIT 1", 1),
            ("1 FORCE_EXIT", 1),
            ("1 FORCE_EXIT 1\n2 NOPE 1", 2),
            ("1 SET_COUNTER_RATE 1 3.0", 1),
            ("1 DELAY_MESSAGE type=Bogus 5", 1),
            ("1 DROP_MESSAGE src=1 7", 1),
            ("SEED", 1),
        ] {
            let e = AdversarySchedule::parse(text).unwrap_err();
            assert_eq!(e.line, line, "{text}: {e}");
        }
    }

    #[test]
    fn predicate_matching() {
        let rule = MessageMatch {
            src: Some(1),
            msg_type: Some(MsgType::TsRequest),
            ..MessageMatch::default()
        };
        assert!(rule.matches(1, 2, MsgType::TsRequest, 5));
        assert!(!rule.matches(2, 1, MsgType::TsRequest, 5));
        assert!(!rule.matches(1, 2, MsgType::TsReply, 5));
    }
}
