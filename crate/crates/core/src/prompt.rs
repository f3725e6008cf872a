//! Prompt rendering and parsing of generated `Relation:` lines.

use std::collections::HashSet;

use serde::Serialize;
use thiserror::Error;

use crate::context_sets::ContextSet;
use crate::corpus::{Corpus, Document, KnowledgeTriplet, RelationType, SEPARATOR};

pub const CONTEXT_PREFIX: &str = "Context:";
pub const RELATION_PREFIX: &str = "Relation:";

const HEADER_HEAD: &str = "Your task is to identify all the unique knowledge triplets of '";
const HEADER_TAIL: &str = "' for a given context. Knowledge triplet will be ordered as relation, subject, and object, which are separated by  <==>. If there are multiple triplets, list each of them in a new line. Follow the example context-relation pairs for the formatting of your output.\n\n";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("context member `{doc_id}` has no triplet of relation `{relation}`")]
    MemberWithoutRelationTriplet { doc_id: String, relation: String },
    #[error("context member `{0}` not found in corpus")]
    UnknownMember(String),
}

/// Instruction that opens every prompt.
pub fn instruction_header(relation_name: &str) -> String {
    format!("{HEADER_HEAD}{relation_name}{HEADER_TAIL}")
}

/// One demonstration/output line for a triplet.
pub fn relation_line(relation_name: &str, subject: &str, object: &str) -> String {
    format!("{RELATION_PREFIX} ({relation_name} {SEPARATOR} {subject} {SEPARATOR} {object})")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptText {
    pub text: String,
    pub demo_count: usize,
    pub relation_name: String,
}

/// Renders demonstrations for `members` followed by the target block.
pub fn render_documents(
    members: &[&Document],
    target: &Document,
    relation: &RelationType,
) -> Result<PromptText, PromptError> {
    let mut text = instruction_header(&relation.name);
    for (i, doc) in members.iter().enumerate() {
        let triplets = doc.unique_triplets_of(&relation.id);
        if triplets.is_empty() {
            return Err(PromptError::MemberWithoutRelationTriplet {
                doc_id: doc.doc_id.clone(),
                relation: relation.id.clone(),
            });
        }
        if i > 0 {
            text.push('\n');
        }
        text.push_str(CONTEXT_PREFIX);
        text.push(' ');
        text.push_str(&doc.text);
        text.push('\n');
        for t in triplets {
            text.push_str(&relation_line(&relation.name, &t.subject, &t.object));
            text.push('\n');
        }
    }
    if !members.is_empty() {
        text.push('\n');
    }
    text.push_str(CONTEXT_PREFIX);
    text.push(' ');
    text.push_str(&target.text);
    text.push('\n');
    Ok(PromptText {
        text,
        demo_count: members.len(),
        relation_name: relation.name.clone(),
    })
}

/// Renders a context set against a target, looking members up in `corpus`.
pub fn render(
    set: &ContextSet,
    target: &Document,
    relation: &RelationType,
    corpus: &Corpus,
) -> Result<PromptText, PromptError> {
    let members = set
        .member_ids()
        .map(|id| {
            corpus
                .get(id)
                .ok_or_else(|| PromptError::UnknownMember(id.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    render_documents(&members, target, relation)
}

/// A parsed output line. Spans are byte ranges into the generated text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedLine {
    pub triplet: KnowledgeTriplet,
    pub subject_span: (usize, usize),
    pub object_span: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedGeneration {
    /// Every well-formed line before the stop point, duplicates included.
    pub lines: Vec<ParsedLine>,
    /// `Relation:` lines that could not be split into three fields.
    pub malformed: usize,
    /// Byte offset of the first line that ended the scan, if any.
    pub stopped_at: Option<usize>,
}

impl ParsedGeneration {
    /// Lines with duplicate (subject, object) pairs removed, first occurrence kept.
    pub fn unique(&self) -> Vec<ParsedLine> {
        let mut seen = HashSet::new();
        self.lines
            .iter()
            .filter(|l| seen.insert((l.triplet.subject.clone(), l.triplet.object.clone())))
            .cloned()
            .collect()
    }
}

/// Parses generated text into triplets, keeping the first occurrence of each pair.
pub fn parse_generation(generated: &str) -> Vec<ParsedLine> {
    parse_generation_detailed(generated).unique()
}

/// Scans line by line until the first non-blank line without the `Relation:` prefix.
pub fn parse_generation_detailed(generated: &str) -> ParsedGeneration {
    let mut out = ParsedGeneration::default();
    let mut offset = 0;
    for raw in generated.split_inclusive('\n') {
        let line_start = offset;
        offset += raw.len();
        let line = raw.trim_end_matches(['\n', '\r']);
        let lead = line.len() - line.trim_start().len();
        let body = &line[lead..];
        if body.is_empty() {
            continue;
        }
        if !body.starts_with(RELATION_PREFIX) {
            out.stopped_at = Some(line_start);
            break;
        }
        match parse_relation_line(body, line_start + lead) {
            Some(parsed) => out.lines.push(parsed),
            None => out.malformed += 1,
        }
    }
    out
}

/// `body` starts with the relation prefix; `base` is its offset in the generation.
fn parse_relation_line(body: &str, base: usize) -> Option<ParsedLine> {
    let after_prefix = RELATION_PREFIX.len();
    let rest = &body[after_prefix..];
    let open = after_prefix + (rest.len() - rest.trim_start().len());
    if !body[open..].starts_with('(') {
        return None;
    }
    let close = body.rfind(')')?;
    if close <= open {
        return None;
    }
    let inner_start = open + 1;
    let inner = &body[inner_start..close];
    let parts: Vec<(usize, &str)> = split_with_offsets(inner, SEPARATOR);
    if parts.len() != 3 {
        return None;
    }
    let field = |(off, raw): (usize, &str)| -> Option<(String, (usize, usize))> {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            return None;
        }
        let lead = raw.len() - raw.trim_start().len();
        let start = base + inner_start + off + lead;
        Some((trimmed.to_string(), (start, start + trimmed.len())))
    };
    let relation = parts[0].1.trim().to_string();
    let (subject, subject_span) = field(parts[1])?;
    let (object, object_span) = field(parts[2])?;
    Some(ParsedLine {
        triplet: KnowledgeTriplet {
            relation,
            subject,
            object,
        },
        subject_span,
        object_span,
    })
}

fn split_with_offsets<'a>(s: &'a str, sep: &str) -> Vec<(usize, &'a str)> {
    let mut parts = Vec::new();
    let mut start = 0;
    for (idx, _) in s.match_indices(sep) {
        parts.push((start, &s[start..idx]));
        start = idx + sep.len();
    }
    parts.push((start, &s[start..]));
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;

    fn doc(id: &str, text: &str, triplets: &[(&str, &str, &str)]) -> Document {
        Document {
            doc_id: id.into(),
            text: text.into(),
            split: Split::Distant,
            triplets: triplets
                .iter()
                .map(|(r, s, o)| KnowledgeTriplet::new(*r, *s, *o))
                .collect(),
        }
    }

    fn country() -> RelationType {
        RelationType {
            id: "P17".into(),
            name: "country".into(),
        }
    }

    #[test]
    fn renders_demonstration_line() {
        let m = doc("m", "Vienna , Austria .", &[("P17", "Vienna", "Austria")]);
        let t = doc("t", "Target text .", &[]);
        let p = render_documents(&[&m], &t, &country()).unwrap();
        assert!(p
            .text
            .contains("\nRelation: (country <==> Vienna <==> Austria)\n"));
        assert!(p.text.starts_with(&instruction_header("country")));
        assert!(p.text.ends_with("\n\nContext: Target text .\n"));
        assert_eq!(p.demo_count, 1);
    }

    #[test]
    fn duplicate_member_triplets_rendered_once() {
        let m = doc(
            "m",
            "x",
            &[
                ("P17", "Vienna", "Austria"),
                ("P17", "Vienna", "Austria"),
                ("P27", "a", "b"),
            ],
        );
        let t = doc("t", "y", &[]);
        let p = render_documents(&[&m], &t, &country()).unwrap();
        assert_eq!(p.text.matches("Relation: ").count(), 1);
    }

    #[test]
    fn context_block_count() {
        let a = doc("a", "A", &[("P17", "a", "b")]);
        let b = doc("b", "B", &[("P17", "c", "d")]);
        let t = doc("t", "T", &[]);
        let p = render_documents(&[&a, &b], &t, &country()).unwrap();
        assert_eq!(p.text.matches("Context: ").count(), 3);
        let err = render_documents(&[&t], &a, &country()).unwrap_err();
        assert!(matches!(
            err,
            PromptError::MemberWithoutRelationTriplet { .. }
        ));
    }

    #[test]
    fn parses_two_lines() {
        let g = "Relation: (country <==> São Paulo <==> Brazil)\nRelation: (country <==> Rio de Janeiro <==> Brazil)\n";
        let lines = parse_generation(g);
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0].triplet,
            KnowledgeTriplet::new("country", "São Paulo", "Brazil")
        );
        let (s, e) = lines[0].subject_span;
        assert_eq!(&g[s..e], "São Paulo");
        let (s, e) = lines[1].object_span;
        assert_eq!(&g[s..e], "Brazil");
    }

    #[test]
    fn empty_generation() {
        assert!(parse_generation("").is_empty());
    }

    #[test]
    fn stops_at_first_non_relation_line() {
        let g = "Relation: (a <==> b <==> c)\nContext: stray\nRelation: (d <==> e <==> f)";
        let parsed = parse_generation_detailed(g);
        assert_eq!(parsed.lines.len(), 1);
        assert_eq!(
            parsed.lines[0].triplet,
            KnowledgeTriplet::new("a", "b", "c")
        );
        assert_eq!(parsed.stopped_at, Some(28));
    }

    #[test]
    fn blank_lines_between_relations_are_skipped() {
        let g = "Relation: (a <==> b <==> c)\n\n  \nRelation: (a <==> d <==> c)\n\n";
        assert_eq!(parse_generation(g).len(), 2);
    }

    #[test]
    fn malformed_lines_counted_and_skipped() {
        let g = "Relation: (a <==> b)\nRelation: (a <==> b <==> c <==> d)\nRelation: (a <==> x <==> y\nRelation: (a <==>  <==> y)\nRelation: (a <==> b <==> c)\n";
        let parsed = parse_generation_detailed(g);
        assert_eq!(parsed.malformed, 4);
        assert_eq!(parsed.lines.len(), 1);
    }

    #[test]
    fn duplicates_keep_first() {
        let g = "Relation: (a <==> b <==> c)\nRelation: (a2 <==> b <==> c)\n";
        let parsed = parse_generation_detailed(g);
        assert_eq!(parsed.lines.len(), 2);
        let u = parse_generation(g);
        assert_eq!(u.len(), 1);
        assert_eq!(u[0].triplet.relation, "a");
    }

    #[test]
    fn object_with_parentheses() {
        let g = "Relation: (r <==> Vienna Definition Language ( VDL ) <==> IBM )\n";
        let l = &parse_generation(g)[0];
        assert_eq!(l.triplet.subject, "Vienna Definition Language ( VDL )");
        assert_eq!(l.triplet.object, "IBM");
    }
}
