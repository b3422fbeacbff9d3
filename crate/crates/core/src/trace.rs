//! Line-oriented run logs and their offline checker.
//!
//! Every record is `t=<s.mmm> kind=<kind> node=<id>` followed by
//! `key=value` fields. Frame text is always the last field of a record,
//! so it may be taken verbatim up to the end of the line.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use crate::time::SimTime;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    lines: Vec<String>,
}

impl Trace {
    pub fn push(&mut self, at: SimTime, record: String) {
        self.lines.push(format!("t={at} {record}"));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.lines.iter().map(|l| l.len() + 1).sum());
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

/// One parsed record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record<'a> {
    pub line_no: usize,
    pub t: SimTime,
    pub kind: &'a str,
    pub node: &'a str,
    pub fields: BTreeMap<&'a str, &'a str>,
    /// Positional words: the `A -> B` part of state lines.
    pub words: Vec<&'a str>,
}

impl<'a> Record<'a> {
    pub fn get(&self, key: &str) -> Option<&'a str> {
        self.fields.get(key).copied()
    }

    pub fn parse(line_no: usize, line: &'a str) -> Result<Self, String> {
        let (head, frame) = match line.find(" frame=") {
            Some(i) => (&line[..i], Some(&line[i + 7..])),
            None => (line, None),
        };
        let mut fields = BTreeMap::new();
        let mut words = Vec::new();
        for tok in head.split(' ').filter(|t| !t.is_empty()) {
            match tok.split_once('=') {
                Some((k, v)) => {
                    fields.insert(k, v);
                }
                None => words.push(tok),
            }
        }
        if let Some(f) = frame {
            fields.insert("frame", f);
        }
        let t = fields
            .get("t")
            .ok_or("missing t")?
            .parse::<SimTime>()
            .map_err(|_| "bad t".to_string())?;
        let kind = fields.get("kind").copied().ok_or("missing kind")?;
        let node = fields.get("node").copied().ok_or("missing node")?;
        Ok(Record {
            line_no,
            t,
            kind,
            node,
            fields,
            words,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub line: usize,
    pub what: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.what)
    }
}

const KINDS: [&str; 9] = ["send", "recv", "drop", "dup", "timer", "ign", "gps", "state", "event"];

/// Re-checks a trace: well-formed records, monotone time, every receive
/// preceded by a matching send, one running session per node, bounded
/// resends and sufficiently signed confirmations.
pub fn verify(text: &str) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut bad = |line: usize, what: String| out.push(Violation { line, what });
    let mut last_t = SimTime::ZERO;
    // (sender, receiver or "*", frame text)
    let mut sent: HashSet<(String, String, String)> = HashSet::new();
    let mut active: BTreeMap<String, String> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let r = match Record::parse(n, line) {
            Ok(r) => r,
            Err(e) => {
                bad(n, format!("malformed record: {e}"));
                continue;
            }
        };
        if !KINDS.contains(&r.kind) {
            bad(n, format!("unknown kind `{}`", r.kind));
        }
        if r.t < last_t {
            bad(n, format!("time went backwards from {last_t} to {}", r.t));
        }
        last_t = last_t.max(r.t);
        match r.kind {
            "send" => {
                let (Some(to), Some(frame)) = (r.get("to"), r.get("frame")) else {
                    bad(n, "send without to/frame".into());
                    continue;
                };
                sent.insert((r.node.to_string(), to.to_string(), frame.to_string()));
            }
            "recv" => {
                let (Some(from), Some(frame)) = (r.get("from"), r.get("frame")) else {
                    bad(n, "recv without from/frame".into());
                    continue;
                };
                let key = |to: &str| (from.to_string(), to.to_string(), frame.to_string());
                if !sent.contains(&key(r.node)) && !sent.contains(&key("*")) {
                    bad(
                        n,
                        format!("node {} received a frame from {from} that was never sent", r.node),
                    );
                }
            }
            "state" if r.words.len() == 3 && r.words[1] == "->" => {
                let Some(sess) = r.get("sess") else {
                    bad(n, "transition without sess".into());
                    continue;
                };
                let to = r.words[2];
                let terminal = matches!(to, "Done" | "Aborted");
                match active.get(r.node) {
                    Some(cur) if cur != sess => {
                        bad(n, format!("node {} runs sessions {cur} and {sess} at once", r.node));
                    }
                    _ => {}
                }
                if terminal {
                    if active.get(r.node).map(String::as_str) == Some(sess) {
                        active.remove(r.node);
                    }
                } else {
                    active.insert(r.node.to_string(), sess.to_string());
                }
            }
            "state" if r.get("reason") == Some("battery") || r.get("reason") == Some("final") => {}
            "timer" if r.get("what") == Some("resend") => {
                let count = r.get("count").and_then(|c| c.parse::<u32>().ok());
                let max = r.get("max").and_then(|c| c.parse::<u32>().ok()).unwrap_or(3);
                match count {
                    Some(c) if c <= max => {}
                    _ => bad(n, format!("resend count over the limit of {max}")),
                }
            }
            "event" if r.get("action") == Some("confirm") => {
                let sigs = r.get("sigs").and_then(|s| s.parse::<usize>().ok());
                let need = r.get("need").and_then(|s| s.parse::<usize>().ok());
                match (sigs, need) {
                    (Some(s), Some(k)) if s >= k => {}
                    _ => bad(n, "confirmed event with too few signatures".into()),
                }
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const OK: &str = "\
t=0.000 kind=ign node=1 edge=on
t=1.000 kind=send node=1 to=* hdr=01 frame=01,0000000a,2012-04-13T10:00:01Z,a1*
t=1.010 kind=recv node=2 from=1 hdr=01 frame=01,0000000a,2012-04-13T10:00:01Z,a1*
t=1.010 kind=state node=2 sess=0000000a Idle -> SentD1 frame=01
t=9.000 kind=state node=2 sess=0000000a SentD1 -> Aborted frame=timeout
";

    #[test]
    fn well_formed_trace_passes() {
        assert_eq!(verify(OK), vec![]);
    }

    #[test]
    fn delivery_before_send_is_flagged() {
        let lines: Vec<&str> = OK.lines().collect();
        let swapped = [lines[0], lines[2], lines[1], lines[3], lines[4]].join("\n");
        let v = verify(&swapped);
        assert!(v.iter().any(|v| v.what.contains("never sent")), "{v:?}");
        assert!(v.iter().any(|v| v.what.contains("backwards")));
    }

    #[test]
    fn overlapping_sessions_are_flagged() {
        let t = format!("{OK}t=9.500 kind=state node=2 sess=0000000b Idle -> SentD1 frame=01\nt=9.600 kind=state node=2 sess=0000000c Idle -> SentD2 frame=D1\n");
        let v = verify(&t);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].line, 7);
    }

    #[test]
    fn counters_are_checked() {
        let t = "t=1.000 kind=timer node=1 what=resend hdr=D1 count=4 max=3\nt=2.000 kind=event node=1 action=confirm need=2 ev=jam sigs=1\n";
        assert_eq!(verify(t).len(), 2);
    }

    #[test]
    fn frame_text_may_contain_any_printable_bytes() {
        let r = Record::parse(1, "t=0.010 kind=recv node=2 from=1 hdr=01 frame=01,a b=c*").unwrap();
        assert_eq!(r.get("frame"), Some("01,a b=c*"));
    }
}
