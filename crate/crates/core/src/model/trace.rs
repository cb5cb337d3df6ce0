//! On-disk trace format: one event per line, ASCII,
//!
//! ```text
//! SEQ THREAD KIND BLOCK VALUE FLAGS
//! ```
//!
//! KIND is WI/WR/RI/RR/CR; FLAGS is `-`, `F`, `P` or `FP` and only present on
//! WI; absent fields are `-`. SEQ must be dense from zero. Lines starting
//! with `#` and blank lines are ignored. The writer is canonical (single
//! spaces, trailing newline), so formatting a parsed trace reproduces the
//! input byte for byte.

use super::{Event, SyncFlags};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct TraceParseError {
    pub line: usize,
    pub msg: String,
}

/// Events plus the 1-based source line of each, for diagnostics.
#[derive(Debug, Clone)]
pub struct ParsedTrace {
    pub events: Vec<Event>,
    pub lines: Vec<usize>,
}

fn err(line: usize, msg: impl Into<String>) -> TraceParseError {
    TraceParseError {
        line,
        msg: msg.into(),
    }
}

pub fn parse_trace(text: &str) -> Result<ParsedTrace, TraceParseError> {
    let mut events = Vec::new();
    let mut lines = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(
                lineno,
                format!("expected 6 fields (SEQ THREAD KIND BLOCK VALUE FLAGS), got {}", fields.len()),
            ));
        }
        let seq: usize = fields[0]
            .parse()
            .map_err(|_| err(lineno, format!("bad SEQ {:?}", fields[0])))?;
        if seq != events.len() {
            return Err(err(
                lineno,
                format!("SEQ {} out of order, expected {}", seq, events.len()),
            ));
        }
        let thread = match fields[1] {
            "-" => None,
            t => Some(
                t.parse::<u32>()
                    .map_err(|_| err(lineno, format!("bad THREAD {t:?}")))?,
            ),
        };
        let block = match fields[3] {
            "-" => None,
            b => Some(
                b.parse::<u64>()
                    .map_err(|_| err(lineno, format!("bad BLOCK {b:?}")))?,
            ),
        };
        let value = match fields[4] {
            "-" => None,
            v => Some(
                v.parse::<u64>()
                    .map_err(|_| err(lineno, format!("bad VALUE {v:?}")))?,
            ),
        };
        let flags = match fields[5] {
            "-" => None,
            "F" => Some(SyncFlags::FUA),
            "P" => Some(SyncFlags::PREFLUSH),
            "FP" => Some(SyncFlags::BOTH),
            f => return Err(err(lineno, format!("bad FLAGS {f:?}"))),
        };

        let need = |name: &str, present: bool| -> Result<(), TraceParseError> {
            if present {
                Ok(())
            } else {
                Err(err(lineno, format!("{}: missing {name}", fields[2])))
            }
        };
        let forbid = |name: &str, absent: bool| -> Result<(), TraceParseError> {
            if absent {
                Ok(())
            } else {
                Err(err(lineno, format!("{}: unexpected {name}", fields[2])))
            }
        };

        let event = match fields[2] {
            "WI" => {
                need("THREAD", thread.is_some())?;
                need("BLOCK", block.is_some())?;
                need("VALUE", value.is_some())?;
                Event::WriteInv {
                    thread: thread.unwrap(),
                    block: block.unwrap(),
                    value: value.unwrap(),
                    sync: flags.unwrap_or(SyncFlags::NONE),
                }
            }
            "WR" => {
                need("THREAD", thread.is_some())?;
                need("BLOCK", block.is_some())?;
                forbid("VALUE", value.is_none())?;
                forbid("FLAGS", flags.is_none())?;
                Event::WriteRes {
                    thread: thread.unwrap(),
                    block: block.unwrap(),
                }
            }
            "RI" => {
                need("THREAD", thread.is_some())?;
                need("BLOCK", block.is_some())?;
                forbid("VALUE", value.is_none())?;
                forbid("FLAGS", flags.is_none())?;
                Event::ReadInv {
                    thread: thread.unwrap(),
                    block: block.unwrap(),
                }
            }
            "RR" => {
                need("THREAD", thread.is_some())?;
                need("BLOCK", block.is_some())?;
                need("VALUE", value.is_some())?;
                forbid("FLAGS", flags.is_none())?;
                Event::ReadRes {
                    thread: thread.unwrap(),
                    block: block.unwrap(),
                    value: value.unwrap(),
                }
            }
            "CR" => {
                forbid("THREAD", thread.is_none())?;
                forbid("BLOCK", block.is_none())?;
                forbid("VALUE", value.is_none())?;
                forbid("FLAGS", flags.is_none())?;
                Event::Crash
            }
            k => return Err(err(lineno, format!("unknown KIND {k:?}"))),
        };
        events.push(event);
        lines.push(lineno);
    }
    Ok(ParsedTrace { events, lines })
}

pub fn format_event(seq: usize, e: &Event) -> String {
    let mut s = String::new();
    match *e {
        Event::WriteInv {
            thread,
            block,
            value,
            sync,
        } => {
            let flags = match sync.bits() {
                0 => "-",
                1 => "F",
                2 => "P",
                _ => "FP",
            };
            write!(s, "{seq} {thread} WI {block} {value} {flags}").unwrap();
        }
        Event::WriteRes { thread, block } => {
            write!(s, "{seq} {thread} WR {block} - -").unwrap();
        }
        Event::ReadInv { thread, block } => {
            write!(s, "{seq} {thread} RI {block} - -").unwrap();
        }
        Event::ReadRes {
            thread,
            block,
            value,
        } => {
            write!(s, "{seq} {thread} RR {block} {value} -").unwrap();
        }
        Event::Crash => {
            write!(s, "{seq} - CR - - -").unwrap();
        }
    }
    s
}

pub fn format_trace(events: &[Event]) -> String {
    let mut out = String::new();
    for (seq, e) in events.iter().enumerate() {
        out.push_str(&format_event(seq, e));
        out.push('\n');
    }
    out
}
