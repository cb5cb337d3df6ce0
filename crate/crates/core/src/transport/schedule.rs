//! Fault schedule files: `AT_STEP ACTION ARGS...`, one action per line,
//! `#` starts a comment. Steps count application operations issued by the
//! workload; the simulation applies every action scheduled for a step
//! before issuing that step's operation, so a fixed seed replays
//! identically.
//!
//! Actions:
//! ```text
//! 12 crash 1                  # power off node 1 (auto-restarts later)
//! 12 restart 1                # restart now instead of the default delay
//! 3  snapshot 0 pre           # capture node 0's persisted disk as "pre"
//! 20 rollback 0 pre           # power off node 0, restore "pre", restart
//! 9  corrupt_page 2 17        # flip bytes in node 2's persisted block 17
//! 5  drop 0->1 3              # drop the next 3 frames on the link
//! 5  dup 1->0 1               # deliver the next frame twice
//! 5  delay 0->1 50000 2       # hold the next 2 frames for 50000 us
//! 5  corrupt 0->1 1           # flip a byte in the next frame
//! ```

use super::config::NodeId;
use std::fmt;

/// Directed link `from -> to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultAction {
    Crash { node: NodeId },
    Restart { node: NodeId },
    Snapshot { node: NodeId, tag: String },
    Rollback { node: NodeId, tag: String },
    CorruptPage { node: NodeId, block: u64 },
    Drop { link: Link, count: u32 },
    Dup { link: Link, count: u32 },
    Delay { link: Link, micros: u64, count: u32 },
    Corrupt { link: Link, count: u32 },
}

impl fmt::Display for FaultAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultAction::Crash { node } => write!(f, "crash {node}"),
            FaultAction::Restart { node } => write!(f, "restart {node}"),
            FaultAction::Snapshot { node, tag } => write!(f, "snapshot {node} {tag}"),
            FaultAction::Rollback { node, tag } => write!(f, "rollback {node} {tag}"),
            FaultAction::CorruptPage { node, block } => write!(f, "corrupt_page {node} {block}"),
            FaultAction::Drop { link, count } => write!(f, "drop {link} {count}"),
            FaultAction::Dup { link, count } => write!(f, "dup {link} {count}"),
            FaultAction::Delay {
                link,
                micros,
                count,
            } => write!(f, "delay {link} {micros} {count}"),
            FaultAction::Corrupt { link, count } => write!(f, "corrupt {link} {count}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultEntry {
    pub at_step: u64,
    pub action: FaultAction,
}

impl fmt::Display for FaultEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.at_step, self.action)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("fault schedule line {line}: {msg}")]
pub struct ScheduleError {
    pub line: usize,
    pub msg: String,
}

/// Entries in file order; the simulation applies all entries for a step in
/// that order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultSchedule {
    pub entries: Vec<FaultEntry>,
}

impl FaultSchedule {
    pub fn parse(text: &str) -> Result<FaultSchedule, ScheduleError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| ScheduleError { line, msg };
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let mut it = content.split_whitespace();
            let at_step = parse_num(it.next().unwrap(), "step").map_err(&err)?;
            let verb = it.next().ok_or_else(|| err("missing action".into()))?;
            let rest: Vec<&str> = it.collect();
            let action = parse_action(verb, &rest).map_err(&err)?;
            entries.push(FaultEntry { at_step, action });
        }
        Ok(FaultSchedule { entries })
    }

    /// All actions scheduled at `step`, in file order.
    pub fn at(&self, step: u64) -> impl Iterator<Item = &FaultAction> {
        self.entries
            .iter()
            .filter(move |e| e.at_step == step)
            .map(|e| &e.action)
    }

    pub fn max_step(&self) -> Option<u64> {
        self.entries.iter().map(|e| e.at_step).max()
    }
}

impl fmt::Display for FaultSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad {what} {s:?}"))
}

fn parse_link(s: &str) -> Result<Link, String> {
    let (a, b) = s
        .split_once("->")
        .ok_or_else(|| format!("bad link {s:?}, want FROM->TO"))?;
    Ok(Link {
        from: parse_num(a, "link endpoint")?,
        to: parse_num(b, "link endpoint")?,
    })
}

fn parse_action(verb: &str, args: &[&str]) -> Result<FaultAction, String> {
    let argc = |n: usize| -> Result<(), String> {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!("{verb} takes {n} argument(s), got {}", args.len()))
        }
    };
    Ok(match verb {
        "crash" => {
            argc(1)?;
            FaultAction::Crash {
                node: parse_num(args[0], "node")?,
            }
        }
        "restart" => {
            argc(1)?;
            FaultAction::Restart {
                node: parse_num(args[0], "node")?,
            }
        }
        "snapshot" => {
            argc(2)?;
            FaultAction::Snapshot {
                node: parse_num(args[0], "node")?,
                tag: args[1].to_string(),
            }
        }
        "rollback" => {
            argc(2)?;
            FaultAction::Rollback {
                node: parse_num(args[0], "node")?,
                tag: args[1].to_string(),
            }
        }
        "corrupt_page" => {
            argc(2)?;
            FaultAction::CorruptPage {
                node: parse_num(args[0], "node")?,
                block: parse_num(args[1], "block")?,
            }
        }
        "drop" | "dup" | "corrupt" => {
            argc(2)?;
            let link = parse_link(args[0])?;
            let count = parse_num(args[1], "count")?;
            match verb {
                "drop" => FaultAction::Drop { link, count },
                "dup" => FaultAction::Dup { link, count },
                _ => FaultAction::Corrupt { link, count },
            }
        }
        "delay" => {
            argc(3)?;
            FaultAction::Delay {
                link: parse_link(args[0])?,
                micros: parse_num(args[1], "microseconds")?,
                count: parse_num(args[2], "count")?,
            }
        }
        _ => return Err(format!("unknown action {verb:?}")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# warm up, then hurt node 1
3 snapshot 1 early
5 crash 1
5 drop 0->2 3
7 rollback 1 early
9 corrupt_page 0 12
11 delay 2->0 50000 2
11 dup 0->1 1
13 corrupt 1->0 4
";

    #[test]
    fn parse_display_round_trip() {
        let s = FaultSchedule::parse(SAMPLE).unwrap();
        assert_eq!(s.entries.len(), 8);
        let printed = s.to_string();
        assert_eq!(FaultSchedule::parse(&printed).unwrap(), s);
    }

    #[test]
    fn per_step_lookup_preserves_order() {
        let s = FaultSchedule::parse(SAMPLE).unwrap();
        let at5: Vec<String> = s.at(5).map(|a| a.to_string()).collect();
        assert_eq!(at5, vec!["crash 1", "drop 0->2 3"]);
        assert!(s.at(4).next().is_none());
        assert_eq!(s.max_step(), Some(13));
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let s = FaultSchedule::parse("\n# nothing\n  \n2 crash 0 # trailing\n").unwrap();
        assert_eq!(s.entries.len(), 1);
        assert_eq!(
            s.entries[0],
            FaultEntry {
                at_step: 2,
                action: FaultAction::Crash { node: 0 }
            }
        );
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = FaultSchedule::parse("1 crash 0\nnonsense here\n").unwrap_err();
        assert_eq!(err.line, 2);
        let err = FaultSchedule::parse("1 explode 3\n").unwrap_err();
        assert!(err.msg.contains("unknown action"));
        let err = FaultSchedule::parse("1 drop 0-1 2\n").unwrap_err();
        assert!(err.msg.contains("FROM->TO"));
        let err = FaultSchedule::parse("1 delay 0->1 50\n").unwrap_err();
        assert!(err.msg.contains("3 argument"));
    }
}
