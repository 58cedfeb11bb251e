//! Character-level byte-pair encoding for text, plus the audio token
//! convention (codec ids `0..V` and a reserved end-of-sequence id `V`).
//!
//! The base alphabet is the set of distinct characters of the lower-cased
//! training corpus. Training repeatedly merges the most frequent adjacent
//! pair (ties broken by the lexicographically smallest `(left, right)`
//! string pair) until the target size is reached or no adjacent pair is
//! left. Every character is treated alike; there is no pre-tokenization.
//!
//! Vocabulary file:
//!
//! ```text
//! bpe v1 <size>
//! <base symbol>          one per line, escaped
//! merge <left> <right>   in learned order
//! ```
//!
//! Escapes: `\\` backslash, `\s` space, `\t` tab, `\n` newline, `\r` CR.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const DEFAULT_VOCAB_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    base: Vec<char>,
    merges: Vec<(usize, usize)>,
    symbols: Vec<String>,
    char_ids: HashMap<char, usize>,
    target_size: usize,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('s') => out.push(' '),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::format(format!(
                    "bad escape sequence \\{} in {s:?}",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

fn apply_merge(seq: &[usize], left: usize, right: usize, merged: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Learns a vocabulary of at most `target_size` symbols from `corpus`.
pub fn bpe_train<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<BpeVocab> {
    ensure!(!corpus.is_empty(), "cannot train a tokenizer on an empty corpus");
    let lines: Vec<String> = corpus.iter().map(|l| l.as_ref().to_lowercase()).collect();
    let base: Vec<char> = lines
        .iter()
        .flat_map(|l| l.chars())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ensure!(!base.is_empty(), "corpus contains no characters");
    ensure!(
        target_size >= base.len(),
        "target vocabulary size {target_size} is below the {} distinct characters of the corpus",
        base.len()
    );
    let char_ids: HashMap<char, usize> = base.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut symbols: Vec<String> = base.iter().map(|c| c.to_string()).collect();
    let mut known: BTreeSet<String> = symbols.iter().cloned().collect();
    let mut seqs: Vec<Vec<usize>> = lines
        .iter()
        .map(|l| l.chars().map(|c| char_ids[&c]).collect())
        .collect();
    let mut merges = Vec::new();

    while symbols.len() < target_size {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        // Highest count first, then the smallest (left, right) strings. Pairs
        // whose concatenation already names a symbol are skipped so that
        // symbol strings stay unique.
        let best = counts
            .iter()
            .filter(|((l, r), _)| !known.contains(&format!("{}{}", symbols[*l], symbols[*r])))
            .max_by(|((l1, r1), c1), ((l2, r2), c2)| {
                c1.cmp(c2).then_with(|| {
                    (symbols[*l2].as_str(), symbols[*r2].as_str())
                        .cmp(&(symbols[*l1].as_str(), symbols[*r1].as_str()))
                })
            })
            .map(|(&pair, _)| pair);
        let Some((left, right)) = best else { break };
        let merged = symbols.len();
        let text = format!("{}{}", symbols[left], symbols[right]);
        known.insert(text.clone());
        symbols.push(text);
        merges.push((left, right));
        for s in &mut seqs {
            *s = apply_merge(s, left, right, merged);
        }
    }

    Ok(BpeVocab {
        base,
        merges,
        symbols,
        char_ids,
        target_size,
    })
}

impl BpeVocab {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn base_symbols(&self) -> &[char] {
        &self.base
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Lower-cases `text` and applies the merges in learned order.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let lower = text.to_lowercase();
        let mut unknown: BTreeSet<char> = BTreeSet::new();
        let mut seq: Vec<usize> = Vec::with_capacity(lower.len());
        for c in lower.chars() {
            match self.char_ids.get(&c) {
                Some(&id) => seq.push(id),
                None => {
                    unknown.insert(c);
                }
            }
        }
        if !unknown.is_empty() {
            let list: Vec<String> = unknown.iter().map(|c| format!("{c:?}")).collect();
            return Err(Error::contract(format!(
                "characters not in the tokenizer alphabet: {}",
                list.join(", ")
            )));
        }
        let base = self.base.len();
        for (i, &(l, r)) in self.merges.iter().enumerate() {
            if seq.len() < 2 {
                break;
            }
            seq = apply_merge(&seq, l, r, base + i);
        }
        TokenSequence::text(seq, self.len())
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let mut out = String::new();
        for &id in seq.ids() {
            let sym = self
                .symbols
                .get(id)
                .ok_or_else(|| Error::contract(format!("token id {id} outside vocabulary of {}", self.len())))?;
            out.push_str(sym);
        }
        Ok(out)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("bpe v1 {}\n", self.len());
        for c in &self.base {
            out.push_str(&escape(&c.to_string()));
            out.push('\n');
        }
        for &(l, r) in &self.merges {
            let _ = writeln!(out, "merge {} {}", escape(&self.symbols[l]), escape(&self.symbols[r]));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("empty vocabulary file"))?;
        let size: usize = header
            .strip_prefix("bpe v1 ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::format(format!("bad vocabulary header {header:?}")))?;
        let mut base = Vec::new();
        let mut symbols: Vec<String> = Vec::new();
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let mut merges = Vec::new();
        for (no, line) in lines.enumerate() {
            if let Some(rest) = line.strip_prefix("merge ") {
                let mut parts = rest.split(' ');
                let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::format(format!("line {}: malformed merge {line:?}", no + 2)));
                };
                let (l, r) = (unescape(l)?, unescape(r)?);
                let id = |s: &String| {
                    lookup.get(s).copied().ok_or_else(|| {
                        Error::format(format!("line {}: merge uses unknown symbol {s:?}", no + 2))
                    })
                };
                let (li, ri) = (id(&l)?, id(&r)?);
                let text = format!("{l}{r}");
                if lookup.contains_key(&text) {
                    return Err(Error::format(format!("line {}: duplicate symbol {text:?}", no + 2)));
                }
                lookup.insert(text.clone(), symbols.len());
                symbols.push(text);
                merges.push((li, ri));
            } else {
                if !merges.is_empty() {
                    return Err(Error::format(format!("line {}: base symbol after merges", no + 2)));
                }
                let sym = unescape(line)?;
                let mut chars = sym.chars();
                let (Some(c), None) = (chars.next(), chars.next()) else {
                    return Err(Error::format(format!("line {}: base symbol {line:?} is not one character", no + 2)));
                };
                if lookup.contains_key(&sym) {
                    return Err(Error::format(format!("line {}: duplicate base symbol {sym:?}", no + 2)));
                }
                lookup.insert(sym.clone(), symbols.len());
                symbols.push(sym);
                base.push(c);
            }
        }
        if symbols.len() != size {
            return Err(Error::format(format!(
                "header declares {size} symbols, file holds {}",
                symbols.len()
            )));
        }
        let char_ids = base.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self {
            base,
            merges,
            symbols,
            char_ids,
            target_size: size,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::model::checkpoint::write_atomic(path.as_ref(), self.to_file_string().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

// ── token sequences ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenDomain {
    Text { vocab_size: usize },
    /// Codec ids `0..vocab_size`; `vocab_size` itself is EOS.
    Audio { vocab_size: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    domain: TokenDomain,
}

impl TokenSequence {
    pub fn text(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::contract(format!(
                "text id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self {
            ids,
            domain: TokenDomain::Text { vocab_size },
        })
    }

    /// Audio ids; EOS may only appear once, as the final element.
    pub fn audio(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        for (pos, &id) in ids.iter().enumerate() {
            ensure!(
                id <= vocab_size,
                "audio id {id} outside codebook of {vocab_size} (+ EOS)"
            );
            ensure!(
                id != vocab_size || pos + 1 == ids.len(),
                "EOS at position {pos} is not terminal"
            );
        }
        Ok(Self {
            ids,
            domain: TokenDomain::Audio { vocab_size },
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn domain(&self) -> TokenDomain {
        self.domain
    }

    pub fn eos_id(&self) -> Option<usize> {
        match self.domain {
            TokenDomain::Audio { vocab_size } => Some(vocab_size),
            TokenDomain::Text { .. } => None,
        }
    }

    pub fn ends_with_eos(&self) -> bool {
        self.eos_id().is_some_and(|e| self.ids.last() == Some(&e))
    }

    /// Training targets: the audio ids followed by EOS.
    pub fn with_eos(&self) -> Result<Self> {
        let eos = self
            .eos_id()
            .ok_or_else(|| Error::contract("EOS only exists for audio sequences"))?;
        let mut ids = self.ids.clone();
        if !self.ends_with_eos() {
            ids.push(eos);
        }
        Ok(Self {
            ids,
            domain: self.domain,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_corpus() -> Vec<String> {
        let words = ["ka", "lo", "mi", "tu", "ren", "sha", "vo", "pi"];
        let mut state = 17u64;
        (0..1000)
            .map(|_| {
                let mut next = || {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 33) as usize
                };
                let n = 3 + next() % 8;
                (0..n).map(|_| words[next() % words.len()]).collect::<Vec<_>>().join(" ")
            })
            .collect()
    }

    #[test]
    fn forced_merge_order() {
        let v = bpe_train(&["aaaa"], 3).unwrap();
        assert_eq!(v.base_symbols(), &['a']);
        let names: Vec<(&str, &str)> = v
            .merges()
            .iter()
            .map(|&(l, r)| (v.symbol(l).unwrap(), v.symbol(r).unwrap()))
            .collect();
        assert_eq!(names, vec![("a", "a"), ("aa", "aa")]);
        assert_eq!(v.encode("aaaa").unwrap().ids(), &[2]);
    }

    #[test]
    fn distinct_characters_give_no_merges() {
        let v = bpe_train(&["abc", "dfe"], 6).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn target_below_alphabet_is_rejected() {
        assert!(matches!(bpe_train(&["abcd"], 3), Err(Error::Contract(_))));
        assert!(bpe_train::<&str>(&[], 10).is_err());
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // (c,d) and (a,b) both occur twice; (a,b) is smaller.
        let v = bpe_train(&["cd cd", "ab ab"], 6).unwrap();
        let (l, r) = v.merges()[0];
        assert_eq!((v.symbol(l).unwrap(), v.symbol(r).unwrap()), ("a", "b"));
    }

    #[test]
    fn empty_and_case_folding() {
        let v = bpe_train(&["abc abc"], 20).unwrap();
        let e = v.encode("").unwrap();
        assert!(e.is_empty());
        assert_eq!(v.decode(&e).unwrap(), "");
        assert_eq!(v.encode("AbC").unwrap(), v.encode("abc").unwrap());
    }

    #[test]
    fn unknown_characters_are_listed() {
        let v = bpe_train(&["abc"], 5).unwrap();
        let err = v.encode("abxzx").unwrap_err().to_string();
        assert!(err.contains("'x'") && err.contains("'z'"), "{err}");
    }

    #[test]
    fn corpus_round_trip_and_compression() {
        let corpus = toy_corpus();
        let v = bpe_train(&corpus, DEFAULT_VOCAB_SIZE).unwrap();
        assert_eq!(v.len(), DEFAULT_VOCAB_SIZE);
        for line in &corpus {
            let enc = v.encode(line).unwrap();
            assert_eq!(v.decode(&enc).unwrap(), line.to_lowercase());
            assert!(enc.len() < line.chars().count());
        }
    }

    #[test]
    fn vocab_file_is_deterministic_and_parses_back() {
        let corpus = toy_corpus();
        let a = bpe_train(&corpus, 120).unwrap();
        let b = bpe_train(&corpus, 120).unwrap();
        assert_eq!(a.to_file_string(), b.to_file_string());
        let text = a.to_file_string();
        assert!(text.starts_with("bpe v1 120\n"));
        let back = BpeVocab::parse(&text).unwrap();
        assert_eq!(back.to_file_string(), text);
        assert_eq!(back.encode(&corpus[3]).unwrap(), a.encode(&corpus[3]).unwrap());
    }

    #[test]
    fn escapes_survive_the_file_format() {
        let v = bpe_train(&["a\\b\tc d", "a\\b\tc d"], 30).unwrap();
        let back = BpeVocab::parse(&v.to_file_string()).unwrap();
        assert_eq!(back, BpeVocab { target_size: back.target_size, ..v.clone() });
        assert!(BpeVocab::parse("bpe v1 2\na\n").is_err());
        assert!(BpeVocab::parse("bpe v1 1\n\\q\n").is_err());
    }

    #[test]
    fn audio_sequences_reserve_eos() {
        let s = TokenSequence::audio(vec![1, 2, 3], 4).unwrap();
        assert_eq!(s.eos_id(), Some(4));
        let t = s.with_eos().unwrap();
        assert_eq!(t.ids(), &[1, 2, 3, 4]);
        assert!(t.ends_with_eos());
        assert_eq!(t.with_eos().unwrap(), t);
        assert!(TokenSequence::audio(vec![4, 1], 4).is_err());
        assert!(TokenSequence::audio(vec![5], 4).is_err());
        assert!(TokenSequence::text(vec![3], 3).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_on_alphabet_strings(s in "[a-e ]{0,40}") {
            let v = bpe_train(&["abcde abcde edcba", "aabbccdd ee"], 24).unwrap();
            let enc = v.encode(&s).unwrap();
            prop_assert_eq!(v.decode(&enc).unwrap(), s.clone());
            prop_assert!(enc.len() <= s.chars().count());
        }
    }
}
