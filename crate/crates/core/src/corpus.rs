//! Dataset records, deterministic hash-based splits and length statistics.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::CleanDocument;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub article: String,
    pub summary: String,
    #[serde(default)]
    pub category: Option<String>,
}

/// Builds a dataset record from a cleaned document. The abstract only
/// survives as the reference summary.
pub fn make_record(doc: &CleanDocument) -> Result<CorpusRecord> {
    if doc.summary.trim().is_empty() {
        return Err(Error::Empty("summary"));
    }
    if doc.body.trim().is_empty() {
        return Err(Error::Empty("article"));
    }
    Ok(CorpusRecord {
        id: doc.id.clone(),
        article: doc.body.clone(),
        summary: doc.summary.clone(),
        category: doc.category.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.90, validation: 0.05, test: 0.05 }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let ratios = SplitRatios { train, validation, test };
        ratios.validate()?;
        Ok(ratios)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("ratios", "every ratio must be a non-negative number"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("ratios", format!("ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::invalid("ratios", format!("`{s}` is not three numbers")))?;
        match parts.as_slice() {
            [a, b, c] => SplitRatios::new(*a, *b, *c),
            _ => Err(Error::invalid("ratios", format!("`{s}` is not three numbers"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// FNV-1a over the seed and id bytes, finished with the SplitMix64 mixer so
/// that nearby seeds give unrelated hashes.
pub fn split_hash(seed: u64, id: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn assign_split(id: &str, seed: u64, ratios: &SplitRatios) -> Split {
    // 53 high bits give an exact f64 in [0, 1).
    let u = (split_hash(seed, id) >> 11) as f64 / (1u64 << 53) as f64;
    if u < ratios.train {
        Split::Train
    } else if u < ratios.train + ratios.validation {
        Split::Validation
    } else if ratios.test > 0.0 {
        Split::Test
    } else if ratios.validation > 0.0 {
        Split::Validation
    } else {
        Split::Train
    }
}

pub fn write_corpus(records: &[CorpusRecord], path: &Path) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_records(records, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(records.len())
}

pub fn write_records<W: Write, T: Serialize>(records: &[T], out: &mut W) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut *out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<CorpusRecord> = read_jsonl(BufReader::new(file), path)?;
    let mut seen = HashSet::with_capacity(records.len());
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::DuplicateId(r.id.clone()));
        }
    }
    Ok(records)
}

/// Reads line-delimited JSON; blank lines are skipped.
pub fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(reader: R, path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        out.push(value);
    }
    Ok(out)
}

/// Upper bucket edges in whitespace tokens; the last bucket is open.
pub const HISTOGRAM_EDGES: [usize; 5] = [512, 1024, 2048, 4096, 8192];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Histogram {
    pub counts: [usize; 6],
}

impl Histogram {
    pub fn bucket(tokens: usize) -> usize {
        HISTOGRAM_EDGES.iter().position(|edge| tokens < *edge).unwrap_or(HISTOGRAM_EDGES.len())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    fn merge(mut self, other: Histogram) -> Histogram {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthSummary {
    pub mean: f64,
    pub median: f64,
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub record_count: usize,
    pub article_token_histogram: Histogram,
    pub summary_token_histogram: Histogram,
    pub article_tokens: LengthSummary,
    pub summary_tokens: LengthSummary,
}

#[derive(Default)]
struct Partial {
    article: Histogram,
    summary: Histogram,
}

fn summarize(mut lengths: Vec<usize>) -> LengthSummary {
    lengths.sort_unstable();
    let n = lengths.len();
    let mean = lengths.iter().sum::<usize>() as f64 / n as f64;
    let median = if n % 2 == 1 {
        lengths[n / 2] as f64
    } else {
        (lengths[n / 2 - 1] + lengths[n / 2]) as f64 / 2.0
    };
    LengthSummary { mean, median, min: lengths[0], max: lengths[n - 1] }
}

pub fn compute_stats(records: &[CorpusRecord]) -> Result<CorpusStats> {
    if records.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let lengths: Vec<(usize, usize)> = records
        .par_iter()
        .map(|r| (r.article.split_whitespace().count(), r.summary.split_whitespace().count()))
        .collect();
    let partial = lengths
        .par_iter()
        .fold(Partial::default, |mut acc, (a, s)| {
            acc.article.counts[Histogram::bucket(*a)] += 1;
            acc.summary.counts[Histogram::bucket(*s)] += 1;
            acc
        })
        .reduce(Partial::default, |a, b| Partial {
            article: a.article.merge(b.article),
            summary: a.summary.merge(b.summary),
        });
    Ok(CorpusStats {
        record_count: records.len(),
        article_token_histogram: partial.article,
        summary_token_histogram: partial.summary,
        article_tokens: summarize(lengths.iter().map(|l| l.0).collect()),
        summary_tokens: summarize(lengths.iter().map(|l| l.1).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, article: &str) -> CorpusRecord {
        CorpusRecord { id: id.into(), article: article.into(), summary: "s".into(), category: None }
    }

    #[test]
    fn make_record_maps_fields() {
        let doc = CleanDocument {
            id: "a".into(),
            title: None,
            body: "B".into(),
            summary: "A".into(),
            category: Some("c".into()),
        };
        let r = make_record(&doc).unwrap();
        assert_eq!(r, CorpusRecord { id: "a".into(), article: "B".into(), summary: "A".into(), category: Some("c".into()) });
        let empty = CleanDocument { summary: "  ".into(), ..doc };
        assert!(make_record(&empty).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let r = SplitRatios::default();
        for i in 0..100 {
            let id = format!("doc-{i}");
            assert_eq!(assign_split(&id, 7, &r), assign_split(&id, 7, &r));
        }
    }

    #[test]
    fn degenerate_ratios() {
        let r = SplitRatios::new(1.0, 0.0, 0.0).unwrap();
        assert!((0..1000).all(|i| assign_split(&i.to_string(), 3, &r) == Split::Train));
        let r = SplitRatios::new(0.0, 0.0, 1.0).unwrap();
        assert!((0..1000).all(|i| assign_split(&i.to_string(), 3, &r) == Split::Test));
    }

    #[test]
    fn split_counts_near_ratios() {
        let r = SplitRatios::default();
        let mut counts = [0usize; 3];
        for i in 0..10_000 {
            counts[assign_split(&format!("id{i}"), 42, &r) as usize] += 1;
        }
        assert!((counts[0] as f64 / 10_000.0 - 0.90).abs() <= 0.01, "{counts:?}");
        assert!((counts[1] as f64 / 10_000.0 - 0.05).abs() <= 0.01, "{counts:?}");
        assert!((counts[2] as f64 / 10_000.0 - 0.05).abs() <= 0.01, "{counts:?}");
    }

    #[test]
    fn reseeding_moves_expected_fraction() {
        let r = SplitRatios::default();
        let n = 10_000;
        let changed = (0..n)
            .filter(|i| {
                let id = format!("id{i}");
                assign_split(&id, 1, &r) != assign_split(&id, 2, &r)
            })
            .count();
        let expected = 1.0 - (0.9f64.powi(2) + 2.0 * 0.05f64.powi(2));
        assert!((changed as f64 / n as f64 - expected).abs() < 0.05, "{changed}");
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("0.9,0.05,0.05".parse::<SplitRatios>().unwrap(), SplitRatios::default());
        assert!("0.9,0.05".parse::<SplitRatios>().is_err());
        assert!("0.9,0.2,0.05".parse::<SplitRatios>().is_err());
        assert!("a,b,c".parse::<SplitRatios>().is_err());
    }

    #[test]
    fn round_trip_with_newlines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let records = vec![
            record("1", "line one\nline two"),
            record("2", "می\u{200C}روم"),
            CorpusRecord { category: Some("x".into()), ..record("3", "\"quoted\"\t") },
        ];
        assert_eq!(write_corpus(&records, &path).unwrap(), 3);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(read_corpus(&path).unwrap(), records);
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&[record("1", "a"), record("2", "b")], &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"id\":\"3\",\"arti");
        std::fs::write(&path, text).unwrap();
        match read_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&[record("1", "a"), record("1", "b")], &path).unwrap();
        assert!(matches!(read_corpus(&path), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn stats_examples() {
        let stats = compute_stats(&[record("1", "a b c d e f g")]).unwrap();
        assert_eq!(stats.article_token_histogram.counts[0], 1);
        assert_eq!(stats.article_tokens.mean, 7.0);

        let six = vec!["w"; 600].join(" ");
        let seven = vec!["w"; 700].join(" ");
        let stats = compute_stats(&[record("1", &six), record("2", &seven)]).unwrap();
        assert_eq!(stats.article_token_histogram.counts[1], 2);
        assert_eq!(stats.article_token_histogram.total(), 2);
        assert_eq!(stats.article_tokens.median, 650.0);

        assert!(compute_stats(&[]).is_err());
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(Histogram::bucket(0), 0);
        assert_eq!(Histogram::bucket(511), 0);
        assert_eq!(Histogram::bucket(512), 1);
        assert_eq!(Histogram::bucket(8191), 4);
        assert_eq!(Histogram::bucket(8192), 5);
    }
}
