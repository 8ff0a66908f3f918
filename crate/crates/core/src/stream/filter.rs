use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::message::{is_valid_tag, SessionId, TagSet};

/// Exact uppercase label, or `PREFIX*` for a trailing wildcard.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TagPattern(String);

impl TagPattern {
    pub fn parse(raw: &str) -> Result<Self, String> {
        let body = raw.strip_suffix('*').unwrap_or(raw);
        if body.is_empty() && raw == "*" {
            return Ok(Self(raw.to_string()));
        }
        if !is_valid_tag(body) {
            return Err(format!("invalid tag pattern {raw:?}"));
        }
        Ok(Self(raw.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn matches(&self, tag: &str) -> bool {
        match self.0.strip_suffix('*') {
            Some(prefix) => tag.starts_with(prefix),
            None => self.0 == tag,
        }
    }
}

impl TryFrom<String> for TagPattern {
    type Error = String;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        TagPattern::parse(&value)
    }
}

impl From<TagPattern> for String {
    fn from(p: TagPattern) -> Self {
        p.0
    }
}

/// Inclusion/exclusion rule over the union of message and stream tags.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagFilter {
    #[serde(default)]
    pub include: BTreeSet<TagPattern>,
    #[serde(default)]
    pub exclude: BTreeSet<TagPattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_scope: Option<SessionId>,
}

impl TagFilter {
    /// Matches every message.
    pub fn all() -> Self {
        Self::default()
    }

    pub fn include<I, S>(patterns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            include: patterns
                .into_iter()
                .map(|p| TagPattern::parse(p.as_ref()).expect("valid pattern"))
                .collect(),
            ..Self::default()
        }
    }

    pub fn excluding<I, S>(mut self, patterns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.exclude.extend(
            patterns
                .into_iter()
                .map(|p| TagPattern::parse(p.as_ref()).expect("valid pattern")),
        );
        self
    }

    pub fn in_session(mut self, session: SessionId) -> Self {
        self.session_scope = Some(session);
        self
    }

    pub fn matches(&self, session: &SessionId, message_tags: &TagSet, stream_tags: &TagSet) -> bool {
        if let Some(scope) = &self.session_scope {
            if scope != session {
                return false;
            }
        }
        let hit = |patterns: &BTreeSet<TagPattern>| {
            message_tags
                .iter()
                .chain(stream_tags.iter())
                .any(|t| patterns.iter().any(|p| p.matches(t)))
        };
        (self.include.is_empty() || hit(&self.include)) && !hit(&self.exclude)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::message::tags;

    fn s1() -> SessionId {
        SessionId::new("S1")
    }

    #[test]
    fn include_matches_message_or_stream_tags() {
        let f = TagFilter::include(["SQL"]);
        assert!(f.matches(&s1(), &tags(["SQL"]), &TagSet::new()));
        assert!(f.matches(&s1(), &TagSet::new(), &tags(["SQL"])));
        assert!(!f.matches(&s1(), &tags(["NLQ"]), &TagSet::new()));
    }

    #[test]
    fn exclude_wins() {
        let f = TagFilter::include(["NLQ"]).excluding(["NLQ"]);
        assert!(!f.matches(&s1(), &tags(["NLQ"]), &TagSet::new()));
    }

    #[test]
    fn empty_include_matches_all() {
        assert!(TagFilter::all().matches(&s1(), &TagSet::new(), &TagSet::new()));
    }

    #[test]
    fn wildcard_prefix() {
        let f = TagFilter::include(["Q*"]);
        assert!(f.matches(&s1(), &tags(["QRESULT"]), &TagSet::new()));
        assert!(!f.matches(&s1(), &tags(["SQL"]), &TagSet::new()));
        assert!(TagPattern::parse("bad").is_err());
    }

    #[test]
    fn session_scope_restricts() {
        let f = TagFilter::all().in_session(s1());
        assert!(!f.matches(&SessionId::new("S2"), &TagSet::new(), &TagSet::new()));
    }
}
