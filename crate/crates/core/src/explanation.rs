//! The six-part structured explanation a vision-language model produces for
//! each meme: parsing from free-form model output, canonical rendering, and a
//! word-overlap similarity used to detect when refinement has settled.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExplanationError {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("field `{0}` appears more than once")]
    DuplicateField(&'static str),
}

/// One of the six schema fields, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    MemeSummary,
    ImpliedJoke,
    NarrativeStructure,
    EmotionalEffect,
    DarkAttributes,
    Target,
}

impl Field {
    pub const ALL: [Field; 6] = [
        Field::MemeSummary,
        Field::ImpliedJoke,
        Field::NarrativeStructure,
        Field::EmotionalEffect,
        Field::DarkAttributes,
        Field::Target,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Field::MemeSummary => "Meme Summary",
            Field::ImpliedJoke => "Implied Joke",
            Field::NarrativeStructure => "Narrative Structure",
            Field::EmotionalEffect => "Emotional Effect",
            Field::DarkAttributes => "Dark Attributes",
            Field::Target => "Target",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationDoc {
    pub meme_summary: String,
    pub implied_joke: String,
    pub narrative_structure: String,
    pub emotional_effect: String,
    pub dark_attributes: String,
    pub target: String,
}

impl ExplanationDoc {
    /// Builds a doc from values in canonical field order, trimming each.
    pub fn new(values: [&str; 6]) -> Result<Self, ExplanationError> {
        Self::from_pairs(Field::ALL.into_iter().zip(values))
    }

    /// Builds a doc from `(field, value)` pairs given in any order.
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self, ExplanationError>
    where
        I: IntoIterator<Item = (Field, S)>,
        S: AsRef<str>,
    {
        let mut slots: [Option<String>; 6] = Default::default();
        for (field, value) in pairs {
            let slot = &mut slots[field.index()];
            if slot.is_some() {
                return Err(ExplanationError::DuplicateField(field.label()));
            }
            *slot = Some(value.as_ref().trim().to_string());
        }
        let mut values = Vec::with_capacity(6);
        for (field, slot) in Field::ALL.into_iter().zip(slots) {
            let v = slot.ok_or(ExplanationError::MissingField(field.label()))?;
            if v.is_empty() {
                return Err(ExplanationError::EmptyField(field.label()));
            }
            values.push(v);
        }
        let mut it = values.into_iter();
        let mut next = || it.next().unwrap_or_default();
        Ok(ExplanationDoc {
            meme_summary: next(),
            implied_joke: next(),
            narrative_structure: next(),
            emotional_effect: next(),
            dark_attributes: next(),
            target: next(),
        })
    }

    pub fn get(&self, field: Field) -> &str {
        match field {
            Field::MemeSummary => &self.meme_summary,
            Field::ImpliedJoke => &self.implied_joke,
            Field::NarrativeStructure => &self.narrative_structure,
            Field::EmotionalEffect => &self.emotional_effect,
            Field::DarkAttributes => &self.dark_attributes,
            Field::Target => &self.target,
        }
    }

    pub fn fields(&self) -> impl Iterator<Item = (Field, &str)> {
        Field::ALL.into_iter().map(move |f| (f, self.get(f)))
    }
}

/// Recognizes a header line such as `Target: ...`, `**Implied Joke:** ...`,
/// `2. Narrative Structure: ...` or `## Meme summary:`. Returns the field and
/// the remainder of the line after the colon.
fn match_header(line: &str) -> Option<(Field, &str)> {
    let trimmed = line.trim_start();
    // leading list numbering like "1." or "3)"
    let digits = trimmed.chars().take_while(char::is_ascii_digit).count();
    let rest = &trimmed[digits..];
    let unnumbered = match (digits, rest.strip_prefix(['.', ')'])) {
        (1.., Some(r)) => r,
        _ => trimmed,
    };
    let body = unnumbered.trim_start_matches([' ', '\t', '#', '*', '-', '_']);

    Field::ALL.into_iter().find_map(|field| {
        let label = field.label();
        let head = body.get(..label.len())?;
        if !head.eq_ignore_ascii_case(label) {
            return None;
        }
        let after = body[label.len()..].trim_start_matches(['*', '_']);
        let value = after.strip_prefix(':')?;
        Some((field, value.trim_start_matches(['*', '_'])))
    })
}

/// Splits model output into the six schema fields. Headers are matched
/// case-insensitively at the start of a line and may appear in any order;
/// each field runs until the next header.
pub fn parse_explanation(raw: &str) -> Result<ExplanationDoc, ExplanationError> {
    let mut sections: Vec<(Field, String)> = Vec::new();
    for line in raw.lines() {
        if let Some((field, rest)) = match_header(line) {
            if sections.iter().any(|(f, _)| *f == field) {
                return Err(ExplanationError::DuplicateField(field.label()));
            }
            sections.push((field, rest.to_string()));
        } else if let Some((_, text)) = sections.last_mut() {
            text.push('\n');
            text.push_str(line);
        }
    }
    ExplanationDoc::from_pairs(sections)
}

/// Six labeled lines in schema order.
pub fn render_canonical(doc: &ExplanationDoc) -> String {
    let mut out = String::new();
    for (field, value) in doc.fields() {
        out.push_str(field.label());
        out.push_str(": ");
        out.push_str(value);
        out.push('\n');
    }
    out
}

impl fmt::Display for ExplanationDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_canonical(self))
    }
}

/// Similarity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

fn word_set(text: &str) -> HashSet<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Jaccard index of lowercased word sets; two empty sets count as identical.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (word_set(a), word_set(b));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Mean per-field Jaccard word overlap, uniformly weighted.
pub fn similarity(a: &ExplanationDoc, b: &ExplanationDoc) -> SimilarityScore {
    let total: f64 = Field::ALL
        .iter()
        .map(|&f| jaccard(a.get(f), b.get(f)))
        .sum();
    SimilarityScore((total / Field::ALL.len() as f64).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = "Meme Summary: A cat stares at a cake.\n\
        Implied Joke: The cat plans a heist.\n\
        Narrative Structure: Absurdism.\n\
        Emotional Effect: Amusement.\n\
        Dark Attributes: None really.\n\
        Target: Cat owners.\n";

    fn letters() -> ExplanationDoc {
        ExplanationDoc::new(["a", "b", "c", "d", "e", "f"]).unwrap()
    }

    #[test]
    fn parses_all_six() {
        let doc = parse_explanation(SAMPLE).unwrap();
        assert_eq!(doc.meme_summary, "A cat stares at a cake.");
        assert_eq!(doc.narrative_structure, "Absurdism.");
        assert_eq!(doc.target, "Cat owners.");
    }

    #[test]
    fn missing_target() {
        let raw: String = SAMPLE.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert_eq!(
            parse_explanation(&raw),
            Err(ExplanationError::MissingField("Target"))
        );
    }

    #[test]
    fn empty_and_duplicate_fields() {
        let empty = SAMPLE.replace("Absurdism.", "   ");
        assert_eq!(
            parse_explanation(&empty),
            Err(ExplanationError::EmptyField("Narrative Structure"))
        );
        let dup = format!("{SAMPLE}target: again\n");
        assert_eq!(
            parse_explanation(&dup),
            Err(ExplanationError::DuplicateField("Target"))
        );
    }

    #[test]
    fn reordered_headers_match_canonical_order() {
        let mut lines: Vec<&str> = SAMPLE.lines().collect();
        lines.rotate_right(1); // Target first
        let reordered = lines.join("\n");
        assert!(reordered.starts_with("Target:"));
        let a = parse_explanation(SAMPLE).unwrap();
        let b = parse_explanation(&reordered).unwrap();
        for f in Field::ALL {
            assert_eq!(a.get(f), b.get(f), "{f}");
        }
    }

    #[test]
    fn tolerates_markdown_and_case_and_multiline() {
        let raw = "Here is the analysis.\n\
            **meme summary:** A dog\n  in a hat.\n\
            2. IMPLIED JOKE: hats\n\
            ## Narrative structure: irony\n\
            - Emotional Effect: laughs\n\
            * Dark Attributes: none\n\
            Target: hat makers";
        let doc = parse_explanation(raw).unwrap();
        assert_eq!(doc.meme_summary, "A dog\n  in a hat.");
        assert_eq!(doc.implied_joke, "hats");
        assert_eq!(doc.narrative_structure, "irony");
        assert_eq!(doc.emotional_effect, "laughs");
        assert_eq!(doc.target, "hat makers");
    }

    #[test]
    fn header_word_inside_text_is_not_a_header() {
        let raw = SAMPLE.replace("Amusement.", "Amusement; the target: unclear.");
        let doc = parse_explanation(&raw).unwrap();
        assert_eq!(doc.emotional_effect, "Amusement; the target: unclear.");
    }

    #[test]
    fn canonical_rendering_of_letters() {
        assert_eq!(
            render_canonical(&letters()),
            "Meme Summary: a\nImplied Joke: b\nNarrative Structure: c\n\
             Emotional Effect: d\nDark Attributes: e\nTarget: f\n"
        );
    }

    #[test]
    fn construction_order_does_not_affect_rendering() {
        let reversed = ExplanationDoc::from_pairs(
            Field::ALL.iter().rev().zip(["f", "e", "d", "c", "b", "a"]).map(|(f, v)| (*f, v)),
        )
        .unwrap();
        assert_eq!(render_canonical(&reversed), render_canonical(&letters()));
    }

    #[test]
    fn similarity_identity_and_disjoint() {
        let a = letters();
        assert_eq!(similarity(&a, &a).value(), 1.0);
        let b = ExplanationDoc::new(["u", "v", "w", "x", "y", "z"]).unwrap();
        assert_eq!(similarity(&a, &b).value(), 0.0);
    }

    #[test]
    fn similarity_one_field_differs() {
        let a = ExplanationDoc::new(["s", "dark joke about cats", "n", "e", "d", "t"]).unwrap();
        let b = ExplanationDoc::new(["s", "dark joke about dogs", "n", "e", "d", "t"]).unwrap();
        // Jaccard {dark, joke, about} / {dark, joke, about, cats, dogs} = 3/5
        let expected = (5.0 + 3.0 / 5.0) / 6.0;
        assert!((similarity(&a, &b).value() - expected).abs() < 1e-15);
        assert!((expected - 0.933_333_333_333).abs() < 1e-9);
    }

    #[test]
    fn jaccard_ignores_case_and_punctuation() {
        assert_eq!(jaccard("Dark, joke!", "dark joke"), 1.0);
        assert_eq!(jaccard("", ""), 1.0);
        assert_eq!(jaccard("", "x"), 0.0);
    }

    fn field_text() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-zA-Z0-9,.'?]{1,10}", 1..8).prop_map(|w| w.join(" "))
    }

    fn arb_doc() -> impl Strategy<Value = ExplanationDoc> {
        proptest::array::uniform6(field_text()).prop_map(|v| {
            ExplanationDoc::new([&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]].map(String::as_str))
                .unwrap()
        })
    }

    proptest! {
        #[test]
        fn parse_render_round_trip(doc in arb_doc()) {
            prop_assert_eq!(parse_explanation(&render_canonical(&doc)).unwrap(), doc);
        }

        #[test]
        fn similarity_symmetric_and_bounded(a in arb_doc(), b in arb_doc()) {
            let ab = similarity(&a, &b).value();
            let ba = similarity(&b, &a).value();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(similarity(&a, &a).value(), 1.0);
        }
    }
}
