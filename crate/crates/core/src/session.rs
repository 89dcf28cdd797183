//! Event-log schema, session grouping and per-impression behavior signals.
//!
//! A log is a JSON Lines stream of `query`, `serp` and `click` events. Events
//! are grouped into [`Session`]s by id, and every `serp` event inside a session
//! becomes one [`ImpressionSignals`] record. The click window of an impression
//! runs from its `serp` event up to (excluding) the next `query` event, or to
//! the end of the session.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("MalformedLine: line {0}")]
    MalformedLine(usize),
    #[error("InvalidTarget: line {0}")]
    InvalidTarget(usize),
    #[error("OrphanEvent: session {0} has a serp/click event before any query")]
    OrphanEvent(String),
}

/// Where a click landed on the result page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickTarget {
    /// Source URL of the answer passage.
    Answer,
    /// Expanding the folded answer passage.
    AnswerExpansion,
    /// Web documents outside the QA block.
    OutsideAnswer,
    /// Related-query suggestions.
    Related,
}

impl ClickTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            ClickTarget::Answer => "answer",
            ClickTarget::AnswerExpansion => "answer_expansion",
            ClickTarget::OutsideAnswer => "outside_answer",
            ClickTarget::Related => "related",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "answer" => Some(ClickTarget::Answer),
            "answer_expansion" => Some(ClickTarget::AnswerExpansion),
            "outside_answer" => Some(ClickTarget::OutsideAnswer),
            "related" => Some(ClickTarget::Related),
            _ => None,
        }
    }
}

impl fmt::Display for ClickTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EventKind {
    Query { text: String },
    SerpShown { qp_id: String },
    Click(ClickTarget),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SessionEvent {
    pub session_id: String,
    pub ts_ms: u64,
    pub kind: EventKind,
}

impl SessionEvent {
    pub fn query(session_id: impl Into<String>, ts_ms: u64, text: impl Into<String>) -> Self {
        SessionEvent {
            session_id: session_id.into(),
            ts_ms,
            kind: EventKind::Query { text: text.into() },
        }
    }

    pub fn serp(session_id: impl Into<String>, ts_ms: u64, qp_id: impl Into<String>) -> Self {
        SessionEvent {
            session_id: session_id.into(),
            ts_ms,
            kind: EventKind::SerpShown {
                qp_id: qp_id.into(),
            },
        }
    }

    pub fn click(session_id: impl Into<String>, ts_ms: u64, target: ClickTarget) -> Self {
        SessionEvent {
            session_id: session_id.into(),
            ts_ms,
            kind: EventKind::Click(target),
        }
    }

    pub fn is_query(&self) -> bool {
        matches!(self.kind, EventKind::Query { .. })
    }

    /// Serializes to one JSON Lines record of the log schema.
    pub fn to_json_line(&self) -> String {
        let wire = match &self.kind {
            EventKind::Query { text } => WireEvent {
                session: &self.session_id,
                ts: self.ts_ms,
                kind: "query",
                text: Some(text),
                qp: None,
                target: None,
            },
            EventKind::SerpShown { qp_id } => WireEvent {
                session: &self.session_id,
                ts: self.ts_ms,
                kind: "serp",
                text: None,
                qp: Some(qp_id),
                target: None,
            },
            EventKind::Click(target) => WireEvent {
                session: &self.session_id,
                ts: self.ts_ms,
                kind: "click",
                text: None,
                qp: None,
                target: Some(target.as_str()),
            },
        };
        serde_json::to_string(&wire).expect("event serialization cannot fail")
    }
}

#[derive(Serialize)]
struct WireEvent<'a> {
    session: &'a str,
    ts: u64,
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    qp: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<&'a str>,
}

#[derive(Deserialize)]
struct RawEvent {
    session: String,
    ts: u64,
    kind: String,
    text: Option<String>,
    qp: Option<String>,
    target: Option<String>,
}

/// Parses JSON Lines into events, in input order.
///
/// Blank lines and lines starting with `#` (metadata headers written by the
/// CLI) are skipped. Line numbers in errors are 1-based.
pub fn parse_log<I, S>(lines: I) -> Result<Vec<SessionEvent>, SessionError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut events = Vec::new();
    for (idx, line) in lines.into_iter().enumerate() {
        let line_no = idx + 1;
        let line = line.as_ref().trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        events.push(parse_line(line, line_no)?);
    }
    Ok(events)
}

fn parse_line(line: &str, line_no: usize) -> Result<SessionEvent, SessionError> {
    let raw: RawEvent =
        serde_json::from_str(line).map_err(|_| SessionError::MalformedLine(line_no))?;
    let kind = match raw.kind.as_str() {
        "query" => EventKind::Query {
            text: raw.text.ok_or(SessionError::MalformedLine(line_no))?,
        },
        "serp" => EventKind::SerpShown {
            qp_id: raw.qp.ok_or(SessionError::MalformedLine(line_no))?,
        },
        "click" => {
            let target = raw.target.ok_or(SessionError::MalformedLine(line_no))?;
            EventKind::Click(
                ClickTarget::parse(&target).ok_or(SessionError::InvalidTarget(line_no))?,
            )
        }
        _ => return Err(SessionError::MalformedLine(line_no)),
    };
    Ok(SessionEvent {
        session_id: raw.session,
        ts_ms: raw.ts,
        kind,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    session_id: String,
    events: Vec<SessionEvent>,
}

impl Session {
    /// Builds a session from events of a single id, stably sorting by timestamp.
    pub fn new(
        session_id: impl Into<String>,
        mut events: Vec<SessionEvent>,
    ) -> Result<Self, SessionError> {
        let session_id = session_id.into();
        events.sort_by_key(|e| e.ts_ms);
        match events.iter().position(SessionEvent::is_query) {
            Some(0) => {}
            _ => return Err(SessionError::OrphanEvent(session_id)),
        }
        Ok(Session { session_id, events })
    }

    pub fn id(&self) -> &str {
        &self.session_id
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }
}

/// Groups events by session id, in order of first appearance.
pub fn build_sessions(events: Vec<SessionEvent>) -> Result<Vec<Session>, SessionError> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<SessionEvent>> = HashMap::new();
    for event in events {
        match groups.get_mut(&event.session_id) {
            Some(group) => group.push(event),
            None => {
                order.push(event.session_id.clone());
                groups.insert(event.session_id.clone(), vec![event]);
            }
        }
    }
    order
        .into_iter()
        .map(|id| {
            let events = groups.remove(&id).unwrap_or_default();
            Session::new(id, events)
        })
        .collect()
}

/// How to score an answer click that is the last event of its session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalClickPolicy {
    /// The user left for the source page; the dwell counts as `sat_threshold_ms`.
    #[default]
    Satisfied,
    /// The unobservable dwell counts as zero.
    Unsatisfied,
}

impl std::str::FromStr for TerminalClickPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "satisfied" => Ok(TerminalClickPolicy::Satisfied),
            "unsatisfied" => Ok(TerminalClickPolicy::Unsatisfied),
            other => Err(format!("unknown terminal click policy {other:?}")),
        }
    }
}

impl fmt::Display for TerminalClickPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminalClickPolicy::Satisfied => "satisfied",
            TerminalClickPolicy::Unsatisfied => "unsatisfied",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractConfig {
    pub sat_threshold_ms: u64,
    pub terminal_click_policy: TerminalClickPolicy,
}

impl ExtractConfig {
    pub fn new(sat_threshold_ms: u64) -> Self {
        ExtractConfig {
            sat_threshold_ms,
            terminal_click_policy: TerminalClickPolicy::Satisfied,
        }
    }
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig::new(30_000)
    }
}

/// Behavior observed for one display of a question-passage pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImpressionSignals {
    pub qp_id: String,
    pub answer_click: bool,
    pub answer_exp_click: bool,
    pub ot_answer_click: bool,
    pub related_click: bool,
    pub answer_only: bool,
    pub ot_only: bool,
    pub both_click: bool,
    pub no_click: bool,
    pub answer_sat_click: bool,
    pub ot_sat_click: bool,
    pub reformulated: bool,
    pub abandoned: bool,
    pub serp_dwell_ms: u64,
    /// Longest dwell among the answer clicks of the impression.
    pub source_dwell_ms: Option<u64>,
}

/// Number of entries in [`ImpressionSignals::to_vector`].
pub const IMPRESSION_VECTOR_LEN: usize = 14;

/// Version tag of the per-impression vector layout.
pub const IMPRESSION_ORDER_VERSION: &str = "impression-v1";

impl ImpressionSignals {
    /// Per-impression model input. Slots mirror the aggregated feature order:
    ///
    /// 0 reformulated, 1 answer_click, 2 answer_only, 3 answer_sat_click,
    /// 4 answer_exp_click, 5 ot_answer_click, 6 ot_only, 7 ot_sat_click,
    /// 8 both_click, 9 related_click, 10 no_click, 11 abandoned,
    /// 12 source_dwell_ms (0 without an answer click), 13 serp_dwell_ms.
    pub fn to_vector(&self) -> [f64; IMPRESSION_VECTOR_LEN] {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        [
            b(self.reformulated),
            b(self.answer_click),
            b(self.answer_only),
            b(self.answer_sat_click),
            b(self.answer_exp_click),
            b(self.ot_answer_click),
            b(self.ot_only),
            b(self.ot_sat_click),
            b(self.both_click),
            b(self.related_click),
            b(self.no_click),
            b(self.abandoned),
            self.source_dwell_ms.unwrap_or(0) as f64,
            self.serp_dwell_ms as f64,
        ]
    }
}

/// Derives one [`ImpressionSignals`] per `serp` event of the session.
pub fn extract_impressions(session: &Session, cfg: &ExtractConfig) -> Vec<ImpressionSignals> {
    let events = session.events();
    let last_ts = events.last().map_or(0, |e| e.ts_ms);

    // Index of the next query strictly after each position.
    let mut next_query = vec![None; events.len()];
    let mut upcoming = None;
    for i in (0..events.len()).rev() {
        next_query[i] = upcoming;
        if events[i].is_query() {
            upcoming = Some(i);
        }
    }

    let click_dwell = |i: usize| -> u64 {
        match events.get(i + 1) {
            Some(next) => next.ts_ms - events[i].ts_ms,
            None => match cfg.terminal_click_policy {
                TerminalClickPolicy::Satisfied => cfg.sat_threshold_ms,
                TerminalClickPolicy::Unsatisfied => 0,
            },
        }
    };

    let mut out = Vec::new();
    for (i, event) in events.iter().enumerate() {
        let EventKind::SerpShown { qp_id } = &event.kind else {
            continue;
        };
        let window_end = next_query[i].unwrap_or(events.len());

        let mut answer_click = false;
        let mut answer_exp_click = false;
        let mut ot_answer_click = false;
        let mut related_click = false;
        let mut source_dwell: Option<u64> = None;
        let mut ot_dwell: Option<u64> = None;
        for j in i + 1..window_end {
            if let EventKind::Click(target) = events[j].kind {
                match target {
                    ClickTarget::Answer => {
                        answer_click = true;
                        let d = click_dwell(j);
                        source_dwell = Some(source_dwell.map_or(d, |cur| cur.max(d)));
                    }
                    ClickTarget::OutsideAnswer => {
                        ot_answer_click = true;
                        let d = click_dwell(j);
                        ot_dwell = Some(ot_dwell.map_or(d, |cur| cur.max(d)));
                    }
                    ClickTarget::AnswerExpansion => answer_exp_click = true,
                    ClickTarget::Related => related_click = true,
                }
            }
        }

        let no_click = !(answer_click || answer_exp_click || ot_answer_click || related_click);
        let reformulated = next_query[i].is_some();
        let end_ts = next_query[i].map_or(last_ts, |q| events[q].ts_ms);
        out.push(ImpressionSignals {
            qp_id: qp_id.clone(),
            answer_click,
            answer_exp_click,
            ot_answer_click,
            related_click,
            answer_only: answer_click && !ot_answer_click,
            ot_only: ot_answer_click && !answer_click,
            both_click: answer_click && ot_answer_click,
            no_click,
            answer_sat_click: source_dwell.is_some_and(|d| d >= cfg.sat_threshold_ms),
            ot_sat_click: ot_dwell.is_some_and(|d| d >= cfg.sat_threshold_ms),
            reformulated,
            abandoned: no_click && !reformulated,
            serp_dwell_ms: end_ts - event.ts_ms,
            source_dwell_ms: source_dwell,
        });
    }
    out
}

/// Parses, groups and extracts in one pass.
pub fn impressions_from_events(
    events: Vec<SessionEvent>,
    cfg: &ExtractConfig,
) -> Result<Vec<ImpressionSignals>, SessionError> {
    let sessions = build_sessions(events)?;
    Ok(sessions
        .iter()
        .flat_map(|s| extract_impressions(s, cfg))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_schema_examples() {
        let events = parse_log([
            r#"{"session":"s1","ts":0,"kind":"query","text":"body temp"}"#,
            "",
            r#"{"session":"s1","ts":10,"kind":"click","target":"answer","extra":3}"#,
            r#"{"session":"s1","ts":12,"kind":"serp","qp":"a"}"#,
        ])
        .unwrap();
        assert_eq!(events[0], SessionEvent::query("s1", 0, "body temp"));
        assert_eq!(
            events[1],
            SessionEvent::click("s1", 10, ClickTarget::Answer)
        );
        assert_eq!(events[2], SessionEvent::serp("s1", 12, "a"));
    }

    #[test]
    fn rejects_bad_lines() {
        let bad_target = r#"{"session":"s1","ts":5,"kind":"click","target":"banner"}"#;
        assert_eq!(parse_log([bad_target]), Err(SessionError::InvalidTarget(1)));
        let cases = [
            r#"{"session":"s1","ts":5,"kind":"query"}"#,
            r#"{"session":"s1","ts":-5,"kind":"query","text":"x"}"#,
            r#"{"session":"s1","kind":"query","text":"x"}"#,
            r#"{"session":"s1","ts":5,"kind":"vote"}"#,
            r#"{"session":"s1","ts":5,"kind":"serp"}"#,
            "not json",
        ];
        for case in cases {
            let ok = r#"{"session":"s1","ts":0,"kind":"query","text":"x"}"#;
            assert_eq!(
                parse_log([ok, case]),
                Err(SessionError::MalformedLine(2)),
                "{case}"
            );
        }
    }

    #[test]
    fn json_line_round_trips() {
        let events = vec![
            SessionEvent::query("s\"1", 0, "what\tis"),
            SessionEvent::serp("s\"1", 3, "qp"),
            SessionEvent::click("s\"1", 9, ClickTarget::AnswerExpansion),
        ];
        let lines: Vec<String> = events.iter().map(SessionEvent::to_json_line).collect();
        assert_eq!(parse_log(&lines).unwrap(), events);
    }

    #[test]
    fn groups_by_first_appearance() {
        let sessions = build_sessions(vec![
            SessionEvent::query("s1", 0, "a"),
            SessionEvent::query("s2", 0, "b"),
            SessionEvent::serp("s1", 1, "x"),
        ])
        .unwrap();
        assert_eq!(sessions.len(), 2);
        assert_eq!(sessions[0].id(), "s1");
        assert_eq!(sessions[0].events().len(), 2);
        assert_eq!(sessions[1].id(), "s2");
    }

    #[test]
    fn sorts_stably_by_timestamp() {
        let sessions = build_sessions(vec![
            SessionEvent::serp("s", 5, "late"),
            SessionEvent::query("s", 0, "q"),
            SessionEvent::serp("s", 3, "mid"),
            SessionEvent::serp("s", 3, "mid2"),
        ])
        .unwrap();
        let ts: Vec<u64> = sessions[0].events().iter().map(|e| e.ts_ms).collect();
        assert_eq!(ts, [0, 3, 3, 5]);
        assert_eq!(sessions[0].events()[1], SessionEvent::serp("s", 3, "mid"));
    }

    #[test]
    fn rejects_orphans() {
        let err = build_sessions(vec![
            SessionEvent::click("s", 0, ClickTarget::Answer),
            SessionEvent::query("s", 1, "q"),
        ])
        .unwrap_err();
        assert_eq!(err, SessionError::OrphanEvent("s".into()));
        // a tie at the same timestamp keeps input order, so the click is still first
        assert!(build_sessions(vec![
            SessionEvent::serp("t", 0, "a"),
            SessionEvent::query("t", 0, "q"),
        ])
        .is_err());
    }

    fn one(events: Vec<SessionEvent>, sat: u64) -> ImpressionSignals {
        let s = Session::new("s", events).unwrap();
        let mut imps = extract_impressions(&s, &ExtractConfig::new(sat));
        assert_eq!(imps.len(), 1);
        imps.remove(0)
    }

    #[test]
    fn serp_as_last_event() {
        let imp = one(
            vec![
                SessionEvent::query("s", 0, "q"),
                SessionEvent::serp("s", 100, "a"),
            ],
            30_000,
        );
        assert!(imp.no_click && imp.abandoned && !imp.reformulated);
        assert_eq!(imp.serp_dwell_ms, 0);
        assert_eq!(imp.source_dwell_ms, None);
    }

    #[test]
    fn answer_click_then_requery() {
        let imp = one(
            vec![
                SessionEvent::query("s", 0, "q"),
                SessionEvent::serp("s", 100, "a"),
                SessionEvent::click("s", 2_000, ClickTarget::Answer),
                SessionEvent::query("s", 40_000, "q2"),
            ],
            30_000,
        );
        assert!(imp.answer_click && imp.answer_only && imp.answer_sat_click);
        assert!(imp.reformulated && !imp.abandoned && !imp.no_click);
        assert_eq!(imp.source_dwell_ms, Some(38_000));
        assert_eq!(imp.serp_dwell_ms, 39_900);
    }

    #[test]
    fn terminal_answer_click_policy() {
        let events = vec![
            SessionEvent::query("s", 0, "q"),
            SessionEvent::serp("s", 10, "a"),
            SessionEvent::click("s", 50, ClickTarget::OutsideAnswer),
            SessionEvent::click("s", 80, ClickTarget::Answer),
        ];
        let imp = one(events.clone(), 30_000);
        assert!(imp.both_click && !imp.answer_only && !imp.ot_only);
        assert_eq!(imp.source_dwell_ms, Some(30_000));
        assert!(imp.answer_sat_click);
        assert!(!imp.ot_sat_click);
        assert_eq!(imp.serp_dwell_ms, 70);

        let s = Session::new("s", events).unwrap();
        let cfg = ExtractConfig {
            sat_threshold_ms: 30_000,
            terminal_click_policy: TerminalClickPolicy::Unsatisfied,
        };
        let imp = &extract_impressions(&s, &cfg)[0];
        assert_eq!(imp.source_dwell_ms, Some(0));
        assert!(!imp.answer_sat_click);
    }

    #[test]
    fn clicks_after_next_query_belong_to_the_next_impression() {
        let s = Session::new(
            "s",
            vec![
                SessionEvent::query("s", 0, "q"),
                SessionEvent::serp("s", 1, "a"),
                SessionEvent::query("s", 5, "q2"),
                SessionEvent::serp("s", 6, "b"),
                SessionEvent::click("s", 9, ClickTarget::Related),
            ],
        )
        .unwrap();
        let imps = extract_impressions(&s, &ExtractConfig::default());
        assert!(imps[0].no_click && imps[0].reformulated && !imps[0].abandoned);
        assert_eq!(imps[0].serp_dwell_ms, 4);
        assert!(imps[1].related_click && !imps[1].no_click && !imps[1].reformulated);
        assert!(!imps[1].answer_only && !imps[1].ot_only && !imps[1].both_click);
        assert_eq!(imps[1].serp_dwell_ms, 3);
    }
}
