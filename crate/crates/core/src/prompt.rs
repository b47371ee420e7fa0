//! The interleaved prompt template:
//!
//! `Question: {question} Background knowledge: <EOQ> <s> {knowledge} <EOK> Answer: {answer}`

use std::ops::Range;

use crate::backend::{Passage, EOK, EOQ};
use crate::registry::SourceRegistry;

const QUESTION: &str = "Question: ";
const BACKGROUND: &str = " Background knowledge: ";
const ANSWER_CUE: &str = "Answer:";

/// Removes the control tokens so inserted text cannot break the template.
pub fn sanitize(text: &str) -> String {
    text.replace(EOQ, "").replace(EOK, "")
}

/// Question text as it appears in the template: control tokens stripped,
/// whitespace collapsed to single spaces.
pub fn clean_question(question: &str) -> String {
    sanitize(question).split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Template rendered up to the furthest element supplied. Knowledge is
/// always closed by `<EOK>`.
pub fn assemble_prompt(
    question: &str,
    source_token: Option<&str>,
    knowledge: Option<&str>,
    with_answer_cue: bool,
) -> String {
    let mut out = format!("{QUESTION}{question}{BACKGROUND}{EOQ}");
    if let Some(token) = source_token {
        out.push(' ');
        out.push_str(token);
        if let Some(k) = knowledge {
            out.push(' ');
            out.push_str(k);
            out.push(' ');
            out.push_str(EOK);
        } else if with_answer_cue {
            out.push(' ');
            out.push_str(EOK);
        }
    }
    if with_answer_cue {
        out.push(' ');
        out.push_str(ANSWER_CUE);
    }
    out
}

/// The prefix the model sees when choosing a source.
pub fn routing_prefix(question: &str) -> String {
    assemble_prompt(&clean_question(question), None, None, false)
}

/// `[1] first\n[2] second ...`
pub fn render_passages(passages: &[Passage]) -> String {
    passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}", i + 1, sanitize(&p.text).trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Byte ranges of the variable parts of a full training text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSpans {
    pub source: Range<usize>,
    /// The knowledge text followed by ` <EOK>`.
    pub knowledge: Range<usize>,
    pub answer: Range<usize>,
}

/// Full template including the answer, with byte spans of its parts.
pub fn render_full(question: &str, source: &str, knowledge: &str, answer: &str) -> (String, TemplateSpans) {
    let head = format!("{QUESTION}{question}{BACKGROUND}{EOQ} ");
    let source_span = head.len()..head.len() + source.len();
    let k_start = source_span.end + 1;
    let mut text = assemble_prompt(question, Some(source), Some(knowledge), true);
    let k_end = k_start + knowledge.len() + 1 + EOK.len();
    text.push(' ');
    let a_start = text.len();
    text.push_str(answer);
    let spans = TemplateSpans {
        source: source_span,
        knowledge: k_start..k_end,
        answer: a_start..text.len(),
    };
    (text, spans)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptParts<'a> {
    pub question: &'a str,
    pub source: &'a str,
    pub knowledge: &'a str,
    pub answer: &'a str,
}

/// Parses a complete transcript; `None` unless it has exactly one `<EOQ>`,
/// one `<EOK>`, and a registered source token right after `<EOQ>`.
pub fn parse_transcript<'a>(text: &'a str, registry: &'a SourceRegistry) -> Option<TranscriptParts<'a>> {
    if text.matches(EOQ).count() != 1 || text.matches(EOK).count() != 1 {
        return None;
    }
    let rest = text.strip_prefix(QUESTION)?;
    let marker = format!("{BACKGROUND}{EOQ} ");
    let q_end = rest.find(&marker)?;
    let question = &rest[..q_end];
    if question.is_empty() {
        return None;
    }
    let rest = &rest[q_end + marker.len()..];
    let source = registry
        .tokens()
        .find(|t| rest.starts_with(t) && rest[t.len()..].starts_with(' '))?;
    let rest = &rest[source.len() + 1..];
    let closing = format!(" {EOK} {ANSWER_CUE}");
    let k_end = rest.find(&closing)?;
    let knowledge = &rest[..k_end];
    let tail = &rest[k_end + closing.len()..];
    let answer = match tail {
        "" => "",
        t => t.strip_prefix(' ')?,
    };
    Some(TranscriptParts {
        question,
        source,
        knowledge,
        answer,
    })
}
