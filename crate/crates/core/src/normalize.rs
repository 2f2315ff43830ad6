//! Persian text cleaning and document-level filtering.
//!
//! The document pipeline runs in a fixed order: character mapping, line
//! normalization, front-matter removal, short-line filtering and finally a
//! Persian-script ratio gate.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Heading that marks the start of the main content.
pub const INTRODUCTION_MARKER: &str = "مقدمه";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub body: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// A document that passed every stage of [`normalize_document`].
pub type CleanDocument = RawDocument;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationRules {
    pub char_map: BTreeMap<char, String>,
    pub strip_ranges: Vec<RangeInclusive<char>>,
    pub min_line_tokens: usize,
    pub persian_threshold: f64,
    pub front_matter_markers: Vec<String>,
}

impl Default for NormalizationRules {
    fn default() -> Self {
        let mut char_map = BTreeMap::new();
        char_map.insert('\u{064A}', "\u{06CC}".to_string());
        char_map.insert('\u{0643}', "\u{06A9}".to_string());
        char_map.insert('\u{0629}', "\u{0647}".to_string());
        char_map.insert('\u{0649}', "\u{06CC}".to_string());
        for offset in 0..10u32 {
            let src = char::from_u32(0x0660 + offset).unwrap();
            let dst = char::from_u32(0x06F0 + offset).unwrap();
            char_map.insert(src, dst.to_string());
        }
        NormalizationRules {
            char_map,
            strip_ranges: vec!['\u{0640}'..='\u{0640}', '\u{064B}'..='\u{0652}'],
            min_line_tokens: 10,
            persian_threshold: 0.6,
            front_matter_markers: vec![INTRODUCTION_MARKER.to_string(), "درآمد".to_string()],
        }
    }
}

impl NormalizationRules {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.persian_threshold) {
            return Err(Error::invalid(
                "persian_threshold",
                format!("{} is outside [0, 1]", self.persian_threshold),
            ));
        }
        for (key, value) in &self.char_map {
            if value.chars().any(|c| self.char_map.contains_key(&c)) {
                return Err(Error::invalid(
                    "char_map",
                    format!("mapping for U+{:04X} produces another mapped codepoint", *key as u32),
                ));
            }
        }
        let mut ranges: Vec<_> = self.strip_ranges.clone();
        ranges.sort_by_key(|r| *r.start());
        for r in &ranges {
            if r.start() > r.end() {
                return Err(Error::invalid("strip_ranges", format!("empty range {r:?}")));
            }
        }
        for pair in ranges.windows(2) {
            if pair[0].end() >= pair[1].start() {
                return Err(Error::invalid(
                    "strip_ranges",
                    format!("{:?} overlaps {:?}", pair[0], pair[1]),
                ));
            }
        }
        Ok(())
    }

    fn strips(&self, c: char) -> bool {
        self.strip_ranges.iter().any(|r| r.contains(&c))
    }

    /// Parses a rule table.
    ///
    /// Each non-empty, non-`#` line is one of:
    ///
    /// ```text
    /// 064A -> 06CC          map one codepoint to a codepoint sequence
    /// 0660 -> 06F0 0020     (space-separated destination codepoints)
    /// 064B..0652 ->         strip a range (empty destination)
    /// 0640 ->               strip a single codepoint
    /// min_line_tokens = 10
    /// persian_threshold = 0.6
    /// marker = مقدمه        append a front-matter marker
    /// ```
    ///
    /// Table lines replace the defaults; scalar settings not mentioned keep
    /// their default values.
    pub fn parse(text: &str) -> Result<Self> {
        let defaults = NormalizationRules::default();
        let mut rules = NormalizationRules {
            char_map: BTreeMap::new(),
            strip_ranges: Vec::new(),
            ..defaults.clone()
        };
        let mut saw_table = false;
        let mut saw_marker = false;
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((src, dst)) = line.split_once("->") {
                saw_table = true;
                let src = src.trim();
                let dst = dst.trim();
                if let Some((lo, hi)) = src.split_once("..") {
                    if !dst.is_empty() {
                        return Err(Error::parse(lineno, "ranges can only be stripped"));
                    }
                    let lo = parse_codepoint(lo, lineno)?;
                    let hi = parse_codepoint(hi, lineno)?;
                    rules.strip_ranges.push(lo..=hi);
                } else {
                    let key = parse_codepoint(src, lineno)?;
                    if dst.is_empty() {
                        rules.strip_ranges.push(key..=key);
                    } else {
                        let value = dst
                            .split_whitespace()
                            .map(|h| parse_codepoint(h, lineno))
                            .collect::<Result<String>>()?;
                        rules.char_map.insert(key, value);
                    }
                }
            } else if let Some((key, value)) = line.split_once('=') {
                let value = value.trim();
                match key.trim() {
                    "min_line_tokens" => {
                        rules.min_line_tokens = value
                            .parse()
                            .map_err(|_| Error::parse(lineno, "min_line_tokens must be an integer"))?
                    }
                    "persian_threshold" => {
                        rules.persian_threshold = value
                            .parse()
                            .map_err(|_| Error::parse(lineno, "persian_threshold must be a number"))?
                    }
                    "marker" => {
                        if !saw_marker {
                            rules.front_matter_markers.clear();
                            saw_marker = true;
                        }
                        rules.front_matter_markers.push(value.to_string());
                    }
                    other => return Err(Error::parse(lineno, format!("unknown setting `{other}`"))),
                }
            } else {
                return Err(Error::parse(lineno, "expected `SRC -> DST` or `key = value`"));
            }
        }
        if !saw_table {
            rules.char_map = defaults.char_map;
            rules.strip_ranges = defaults.strip_ranges;
        }
        rules.validate()?;
        Ok(rules)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn parse_codepoint(hex: &str, lineno: usize) -> Result<char> {
    let hex = hex.trim().trim_start_matches("U+").trim_start_matches("0x");
    u32::from_str_radix(hex, 16)
        .ok()
        .and_then(char::from_u32)
        .ok_or_else(|| Error::parse(lineno, format!("`{hex}` is not a hex codepoint")))
}

pub fn normalize_characters(text: &str, rules: &NormalizationRules) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if let Some(mapped) = rules.char_map.get(&c) {
            out.extend(mapped.chars().filter(|m| !rules.strips(*m)));
        } else if !rules.strips(c) {
            out.push(c);
        }
    }
    out
}

fn is_horizontal_space(c: char) -> bool {
    c.is_whitespace() && c != '\n' && c != '\r'
}

/// Collapses horizontal whitespace runs, trims every line and drops lines
/// that end up empty.
pub fn normalize_lines(text: &str) -> String {
    let mut lines = Vec::new();
    for line in text.lines() {
        let mut out = String::with_capacity(line.len());
        let mut pending_space = false;
        for c in line.chars() {
            if is_horizontal_space(c) || c == '\r' {
                pending_space = !out.is_empty();
            } else {
                if pending_space {
                    out.push(' ');
                    pending_space = false;
                }
                out.push(c);
            }
        }
        if !out.is_empty() {
            lines.push(out);
        }
    }
    lines.join("\n")
}

pub fn filter_short_lines(text: &str, min_tokens: usize) -> String {
    text.lines()
        .filter(|line| line.split_whitespace().count() >= min_tokens)
        .collect::<Vec<_>>()
        .join("\n")
}

/// Letters in the Arabic script blocks over all letters; 0 when there are
/// no letters at all.
pub fn persian_ratio(text: &str) -> f64 {
    let mut letters = 0usize;
    let mut arabic_script = 0usize;
    for c in text.chars().filter(|c| c.is_alphabetic()) {
        letters += 1;
        if is_arabic_script(c) {
            arabic_script += 1;
        }
    }
    if letters == 0 {
        0.0
    } else {
        arabic_script as f64 / letters as f64
    }
}

fn is_arabic_script(c: char) -> bool {
    matches!(c,
        '\u{0600}'..='\u{06FF}'
        | '\u{0750}'..='\u{077F}'
        | '\u{08A0}'..='\u{08FF}'
        | '\u{FB50}'..='\u{FDFF}'
        | '\u{FE70}'..='\u{FEFF}')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrontMatterReport {
    pub marker_found: bool,
    pub removed_lines: usize,
}

/// True when the line is a heading made of `marker`, allowing section
/// numbering and punctuation around it ("۱. مقدمه", "مقدمه:").
fn is_marker_heading(line: &str, marker: &str) -> bool {
    let core: String = line
        .chars()
        .filter(|c| !(c.is_whitespace() || c.is_numeric() || c.is_ascii_punctuation() || is_arabic_punctuation(*c)))
        .collect();
    let marker: String = marker.chars().filter(|c| !c.is_whitespace()).collect();
    !marker.is_empty() && core == marker
}

fn is_arabic_punctuation(c: char) -> bool {
    matches!(c, '\u{060C}' | '\u{061B}' | '\u{061F}' | '\u{066A}'..='\u{066D}' | '\u{06D4}' | '«' | '»')
}

pub fn strip_front_matter(doc: &RawDocument, rules: &NormalizationRules) -> (RawDocument, FrontMatterReport) {
    let lines: Vec<&str> = doc.body.lines().collect();
    let first = lines.iter().position(|line| {
        rules
            .front_matter_markers
            .iter()
            .any(|m| is_marker_heading(line, m))
    });
    let mut out = doc.clone();
    match first {
        Some(idx) => {
            out.body = lines[idx..].join("\n");
            (out, FrontMatterReport { marker_found: true, removed_lines: idx })
        }
        None => (out, FrontMatterReport { marker_found: false, removed_lines: 0 }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    NonPersian,
    EmptyAfterFiltering,
}

impl fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectionReason::NonPersian => f.write_str("non_persian"),
            RejectionReason::EmptyAfterFiltering => f.write_str("empty_after_filtering"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub id: String,
    pub reason: RejectionReason,
    pub persian_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub document: CleanDocument,
    pub front_matter: FrontMatterReport,
}

/// Runs the full cleaning pipeline on one document.
///
/// The body goes through every stage; the summary only gets character and
/// line normalization since abstracts are short by nature.
pub fn normalize_document(
    doc: &RawDocument,
    rules: &NormalizationRules,
) -> std::result::Result<Normalized, Rejection> {
    let mut working = doc.clone();
    working.body = normalize_lines(&normalize_characters(&doc.body, rules));
    working.summary = normalize_lines(&normalize_characters(&doc.summary, rules));
    if let Some(title) = &doc.title {
        working.title = Some(normalize_lines(&normalize_characters(title, rules)));
    }
    let (mut working, mut front_matter) = strip_front_matter(&working, rules);
    working.body = filter_short_lines(&working.body, rules.min_line_tokens);
    // A later heading can survive the filter once the first one is dropped;
    // repeat until no front matter is left so a second pass is a no-op.
    loop {
        let (next, report) = strip_front_matter(&working, rules);
        if report.removed_lines == 0 {
            break;
        }
        front_matter.removed_lines += report.removed_lines;
        working = next;
        working.body = filter_short_lines(&working.body, rules.min_line_tokens);
    }

    let ratio = persian_ratio(&working.body);
    if working.body.is_empty() {
        return Err(Rejection {
            id: doc.id.clone(),
            reason: RejectionReason::EmptyAfterFiltering,
            persian_ratio: ratio,
        });
    }
    if ratio < rules.persian_threshold {
        return Err(Rejection {
            id: doc.id.clone(),
            reason: RejectionReason::NonPersian,
            persian_ratio: ratio,
        });
    }
    Ok(Normalized { document: working, front_matter })
}

/// Writes one JSON record per rejected document.
pub fn log_rejection<W: Write>(sink: &mut W, rejection: &Rejection) -> std::io::Result<()> {
    serde_json::to_writer(&mut *sink, rejection)?;
    sink.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rules() -> NormalizationRules {
        NormalizationRules::default()
    }

    #[test]
    fn arabic_yeh_becomes_persian_yeh() {
        assert_eq!(normalize_characters("علي", &rules()), "علی");
        assert_eq!(normalize_characters("", &rules()), "");
        assert_eq!(normalize_characters("كتاب", &rules()), "کتاب");
        assert_eq!(normalize_characters("کتاب", &rules()), "کتاب");
    }

    #[test]
    fn diacritics_and_tatweel_are_removed() {
        assert_eq!(normalize_characters("مَدرَسه", &rules()), "مدرسه");
        assert_eq!(normalize_characters("کـــتاب", &rules()), "کتاب");
    }

    #[test]
    fn zwnj_survives() {
        assert_eq!(normalize_characters("می\u{200C}روم", &rules()), "می\u{200C}روم");
    }

    #[test]
    fn digits_map_to_extended_forms() {
        assert_eq!(normalize_characters("\u{0661}\u{0662}", &rules()), "\u{06F1}\u{06F2}");
    }

    #[test]
    fn line_normalization() {
        assert_eq!(normalize_lines("a  b\n\nc"), "a b\nc");
        assert_eq!(normalize_lines("x"), "x");
        assert_eq!(normalize_lines("   \n\t\n"), "");
        assert_eq!(normalize_lines("  a\t\tb  \r\nc "), "a b\nc");
    }

    #[test]
    fn short_line_boundary() {
        let nine = ["w"; 9].join(" ");
        let ten = ["w"; 10].join(" ");
        assert_eq!(filter_short_lines(&nine, 10), "");
        assert_eq!(filter_short_lines(&ten, 10), ten);
        assert_eq!(filter_short_lines("", 10), "");
        let both = format!("{nine}\n{ten}\n{ten} x");
        assert_eq!(filter_short_lines(&both, 10), format!("{ten}\n{ten} x"));
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(persian_ratio("کتاب خوب"), 1.0);
        assert_eq!(persian_ratio("hello world"), 0.0);
        assert_eq!(persian_ratio("کتاب book"), 0.5);
        assert_eq!(persian_ratio("123 ..."), 0.0);
    }

    fn doc(body: &str) -> RawDocument {
        RawDocument {
            id: "d".into(),
            title: None,
            body: body.into(),
            summary: "خلاصه".into(),
            category: None,
        }
    }

    #[test]
    fn front_matter_marker_at_line_seven() {
        let lines: Vec<String> = (0..10)
            .map(|i| if i == 7 { "مقدمه".to_string() } else { format!("line {i}") })
            .collect();
        let (out, report) = strip_front_matter(&doc(&lines.join("\n")), &rules());
        assert_eq!(report, FrontMatterReport { marker_found: true, removed_lines: 7 });
        assert_eq!(out.body, lines[7..].join("\n"));
    }

    #[test]
    fn front_matter_without_marker_is_unchanged() {
        let body = "a\nb\nc";
        let (out, report) = strip_front_matter(&doc(body), &rules());
        assert_eq!(out.body, body);
        assert!(!report.marker_found);
    }

    #[test]
    fn front_matter_marker_on_first_line() {
        let body = "۱. مقدمه\nb\nc";
        let (out, report) = strip_front_matter(&doc(body), &rules());
        assert_eq!(out.body, body);
        assert_eq!(report, FrontMatterReport { marker_found: true, removed_lines: 0 });
    }

    #[test]
    fn marker_inside_prose_is_not_a_heading() {
        let body = "a\nدر این مقدمه گفته شد\nc";
        let (_, report) = strip_front_matter(&doc(body), &rules());
        assert!(!report.marker_found);
    }

    #[test]
    fn english_document_is_rejected() {
        let body = ["this line has exactly ten english words in it ok"; 3].join("\n");
        let err = normalize_document(&doc(&body), &rules()).unwrap_err();
        assert_eq!(err.reason, RejectionReason::NonPersian);
    }

    #[test]
    fn empty_body_is_rejected() {
        let err = normalize_document(&doc("کوتاه"), &rules()).unwrap_err();
        assert_eq!(err.reason, RejectionReason::EmptyAfterFiltering);
    }

    #[test]
    fn clean_document_is_a_fixed_point() {
        let line = "این یک جمله فارسی است که بیش از ده کلمه دارد و باید بماند";
        let d = doc(&format!("{line}\n{line}"));
        let once = normalize_document(&d, &rules()).unwrap().document;
        assert_eq!(once.body, d.body);
        let twice = normalize_document(&once, &rules()).unwrap().document;
        assert_eq!(once, twice);
    }

    #[test]
    fn second_heading_after_a_dropped_first_one() {
        let rules = NormalizationRules { min_line_tokens: 2, persian_threshold: 0.0, ..rules() };
        let n = normalize_document(&doc("مقدمه\nآب آب\n۱. مقدمه"), &rules).unwrap();
        assert_eq!(n.document.body, "۱. مقدمه");
        assert_eq!(n.front_matter.removed_lines, 1);
        assert_eq!(normalize_document(&n.document, &rules).unwrap().document, n.document);
    }

    #[test]
    fn parse_rule_table() {
        let text = "# test table\n064A -> 06CC\n0643 -> 06A9 200C\n064B..0652 ->\n0640 ->\nmin_line_tokens = 4\nmarker = آغاز\n";
        let r = NormalizationRules::parse(text).unwrap();
        assert_eq!(r.char_map.len(), 2);
        assert_eq!(r.char_map[&'\u{0643}'], "\u{06A9}\u{200C}");
        assert_eq!(r.strip_ranges.len(), 2);
        assert_eq!(r.min_line_tokens, 4);
        assert_eq!(r.persian_threshold, 0.6);
        assert_eq!(r.front_matter_markers, vec!["آغاز".to_string()]);
    }

    #[test]
    fn parse_rejects_garbage_with_line_number() {
        let err = NormalizationRules::parse("064A -> 06CC\nnonsense\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(NormalizationRules::parse("0600..0610 ->\n0605 ->\n").is_err());
        assert!(NormalizationRules::parse("persian_threshold = 1.5\n").is_err());
    }

    #[test]
    fn rejection_log_is_one_line_per_record() {
        let mut buf = Vec::new();
        let rej = Rejection { id: "x".into(), reason: RejectionReason::NonPersian, persian_ratio: 0.0 };
        log_rejection(&mut buf, &rej).unwrap();
        log_rejection(&mut buf, &rej).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"reason\":\"non_persian\""));
    }
}
