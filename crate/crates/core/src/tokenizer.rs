//! Byte-pair subword tokenizer over Unicode characters.
//!
//! Text is pre-split so that every whitespace character starts a new piece
//! ("a  b" -> ["a", " ", " b"]); merges never cross piece boundaries. Token
//! strings concatenate back to the original text, so decoding is exact for
//! any input whose characters were seen during training.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const SOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MERGES_FILE: &str = "merges.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub sos: u32,
    pub eos: u32,
    pub unk: u32,
}

pub const SPECIAL: SpecialIds = SpecialIds { pad: PAD_ID, sos: SOS_ID, eos: EOS_ID, unk: UNK_ID };

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    tokens: Vec<String>,
    vocab: HashMap<String, u32>,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub global_mask: Vec<u8>,
    pub length: usize,
}

impl Encoding {
    pub fn real_ids(&self) -> &[u32] {
        &self.ids[..self.length]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Builds an encoding directly from ids, all of them real.
    pub fn from_ids(ids: Vec<u32>, global: &[usize]) -> Self {
        let n = ids.len();
        let mut global_mask = vec![0u8; n];
        for &g in global {
            if g < n {
                global_mask[g] = 1;
            }
        }
        Encoding { ids, attention_mask: vec![1; n], global_mask, length: n }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodeOptions {
    pub max_len: usize,
    pub pad_to_max: bool,
    pub global_positions: Vec<usize>,
}

impl EncodeOptions {
    pub fn new(max_len: usize) -> Self {
        EncodeOptions { max_len, pad_to_max: false, global_positions: vec![0] }
    }

    pub fn padded(mut self) -> Self {
        self.pad_to_max = true;
        self
    }

    pub fn with_globals(mut self, positions: Vec<usize>) -> Self {
        self.global_positions = positions;
        self
    }
}

/// Splits text so that each whitespace character begins a new piece.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    for (idx, c) in text.char_indices() {
        if c.is_whitespace() && idx > start {
            pieces.push(&text[start..idx]);
            start = idx;
        }
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

impl TokenizerModel {
    fn from_tokens(tokens: Vec<String>, merges: Vec<(u32, u32)>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4] != SPECIAL_TOKENS {
            return Err(Error::invalid("vocab", "ids 0..3 must hold <pad> <s> </s> <unk>"));
        }
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if vocab.insert(t.clone(), id as u32).is_some() {
                return Err(Error::invalid("vocab", format!("duplicate token `{t}`")));
            }
        }
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let joined = format!("{}{}", tokens[a as usize], tokens[b as usize]);
            let id = *vocab
                .get(&joined)
                .ok_or_else(|| Error::invalid("merges", format!("merge result `{joined}` is not in the vocabulary")))?;
            merge_rank.insert((a, b), (rank, id));
        }
        Ok(TokenizerModel { tokens, vocab, merges, merge_rank })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn special(&self) -> SpecialIds {
        SPECIAL
    }

    pub fn merges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.merges
            .iter()
            .map(|&(a, b)| (self.tokens[a as usize].as_str(), self.tokens[b as usize].as_str()))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id <= UNK_ID
    }

    /// Subword ids of `text` without special tokens or truncation.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pre_tokenize(text) {
            self.encode_piece(piece, &mut out);
        }
        out
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = piece
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.vocab.get(c.encode_utf8(&mut buf) as &str).copied().unwrap_or(UNK_ID)
            })
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merge_rank.get(&(w[0], w[1])).map(|&(rank, id)| (rank, i, id)))
                .min();
            let Some((rank, _, id)) = best else { break };
            let pair = self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = merged;
        }
        out.extend(symbols);
    }

    pub fn encode(&self, text: &str, options: &EncodeOptions) -> Encoding {
        let max_len = options.max_len.max(2);
        let sub = self.tokenize(text);
        let keep = sub.len().min(max_len - 2);
        let mut ids = Vec::with_capacity(if options.pad_to_max { max_len } else { keep + 2 });
        ids.push(SOS_ID);
        ids.extend_from_slice(&sub[..keep]);
        ids.push(EOS_ID);
        let length = ids.len();
        let total = if options.pad_to_max { max_len } else { length };
        ids.resize(total, PAD_ID);
        let mut attention_mask = vec![0u8; total];
        attention_mask[..length].fill(1);
        let mut global_mask = vec![0u8; total];
        for &g in &options.global_positions {
            if g < length {
                global_mask[g] = 1;
            }
        }
        Encoding { ids, attention_mask, global_mask, length }
    }

    /// Concatenates token strings, dropping special tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let token = self
                .tokens
                .get(id as usize)
                .ok_or(Error::UnknownId { id, vocab_size: self.tokens.len() })?;
            if !self.is_special(id) {
                out.push_str(token);
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut vocab = String::new();
        for (id, t) in self.tokens.iter().enumerate() {
            vocab.push_str(&escape(t));
            vocab.push('\t');
            vocab.push_str(&id.to_string());
            vocab.push('\n');
        }
        let mut merges = String::new();
        for (a, b) in self.merges() {
            merges.push_str(&escape(a));
            merges.push('\t');
            merges.push_str(&escape(b));
            merges.push('\n');
        }
        let vp = dir.join(VOCAB_FILE);
        fs::write(&vp, vocab).map_err(|e| Error::io(&vp, e))?;
        let mp = dir.join(MERGES_FILE);
        fs::write(&mp, merges).map_err(|e| Error::io(&mp, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vp = dir.join(VOCAB_FILE);
        let vocab_text = fs::read_to_string(&vp).map_err(|e| Error::io(&vp, e))?;
        let mut tokens = Vec::new();
        for (idx, line) in vocab_text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse(idx + 1, "expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| Error::parse(idx + 1, "bad id"))?;
            if id != tokens.len() {
                return Err(Error::parse(idx + 1, format!("ids must be dense; expected {}", tokens.len())));
            }
            tokens.push(unescape(tok).map_err(|m| Error::parse(idx + 1, m))?);
        }
        let lookup: HashMap<&str, u32> = tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect();
        let mp = dir.join(MERGES_FILE);
        let merges_text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let mut merges = Vec::new();
        for (idx, line) in merges_text.lines().enumerate() {
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(idx + 1, "expected left<TAB>right"))?;
            let a = unescape(a).map_err(|m| Error::parse(idx + 1, m))?;
            let b = unescape(b).map_err(|m| Error::parse(idx + 1, m))?;
            let ia = *lookup.get(a.as_str()).ok_or_else(|| Error::parse(idx + 1, format!("unknown token `{a}`")))?;
            let ib = *lookup.get(b.as_str()).ok_or_else(|| Error::parse(idx + 1, format!("unknown token `{b}`")))?;
            merges.push((ia, ib));
        }
        Self::from_tokens(tokens, merges)
    }
}

fn escape(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            other => out.push(other),
        }
    }
    out
}

fn unescape(text: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

struct Word {
    symbols: Vec<u32>,
    count: i64,
}

fn pairs_of(symbols: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    symbols.windows(2).map(|w| (w[0], w[1]))
}

/// Learns merges until the vocabulary reaches `vocab_size` or no adjacent
/// pair occurs more than once. Ties in pair frequency go to the
/// lexicographically smallest (left, right) string pair.
pub fn train_bpe<'a, I>(texts: I, vocab_size: usize) -> Result<TokenizerModel>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut piece_counts: HashMap<&str, i64> = HashMap::new();
    let mut alphabet = BTreeSet::new();
    for text in texts {
        for piece in pre_tokenize(text) {
            *piece_counts.entry(piece).or_default() += 1;
            alphabet.extend(piece.chars());
        }
    }
    if piece_counts.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let base = SPECIAL_TOKENS.len() + alphabet.len();
    if vocab_size <= base {
        return Err(Error::invalid(
            "vocab_size",
            format!("{vocab_size} cannot hold {} specials plus {} base symbols", SPECIAL_TOKENS.len(), alphabet.len()),
        ));
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut vocab: HashMap<String, u32> = HashMap::new();
    for c in &alphabet {
        vocab.insert(c.to_string(), tokens.len() as u32);
        tokens.push(c.to_string());
    }

    // Sorted for a deterministic word order.
    let mut pieces: Vec<(&str, i64)> = piece_counts.into_iter().collect();
    pieces.sort_unstable();
    let mut words: Vec<Word> = pieces
        .iter()
        .map(|(piece, count)| Word {
            symbols: piece.chars().map(|c| vocab[&c.to_string()]).collect(),
            count: *count,
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in pairs_of(&w.symbols) {
            *pair_counts.entry(p).or_default() += w.count;
            pair_words.entry(p).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let best = pair_counts
            .iter()
            .filter(|(_, c)| **c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                    let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some(pair) = best else { break };

        let joined = format!("{}{}", tokens[pair.0 as usize], tokens[pair.1 as usize]);
        let new_id = tokens.len() as u32;
        tokens.push(joined.clone());
        vocab.insert(joined, new_id);
        merges.push(pair);

        let affected: Vec<usize> = pair_words.remove(&pair).map(|s| s.into_iter().collect()).unwrap_or_default();
        for wi in affected {
            let word = &mut words[wi];
            for p in pairs_of(&word.symbols) {
                if let Some(c) = pair_counts.get_mut(&p) {
                    *c -= word.count;
                    if *c <= 0 {
                        pair_counts.remove(&p);
                    }
                }
                if let Some(set) = pair_words.get_mut(&p) {
                    set.remove(&wi);
                }
            }
            let mut merged = Vec::with_capacity(word.symbols.len());
            let mut i = 0;
            while i < word.symbols.len() {
                if i + 1 < word.symbols.len() && (word.symbols[i], word.symbols[i + 1]) == pair {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(word.symbols[i]);
                    i += 1;
                }
            }
            word.symbols = merged;
            for p in pairs_of(&word.symbols) {
                *pair_counts.entry(p).or_default() += word.count;
                pair_words.entry(p).or_default().insert(wi);
            }
        }
        pair_counts.remove(&pair);
    }
    TokenizerModel::from_tokens(tokens, merges)
}
