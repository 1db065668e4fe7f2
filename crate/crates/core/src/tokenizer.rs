//! Byte-level BPE: training, encoding and decoding.
//!
//! Text is first split into pre-tokens GPT-2 style (a single leading space stays
//! attached to the following word), each pre-token is mapped to its UTF-8 bytes,
//! and merges are applied in rank order. Ids `0..256` are the raw bytes, merge
//! `i` produces id `256 + i`, and special tokens follow the merges.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::Deserializer;

use crate::error::{Error, Result};

/// The end-of-text marker, used as eos, bos and padding.
pub const END_OF_TEXT: &str = "<|endoftext|>";

pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";

const N_BYTES: usize = 256;

/// A trained byte-level BPE codec. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    /// Byte string of every non-special token, indexed by id.
    pieces: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    specials: Vec<String>,
}

impl TokenizerModel {
    fn from_merges(merges: Vec<(u32, u32)>, specials: Vec<String>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let next = pieces.len() as u32;
            if l >= next || r >= next {
                return Err(Error::TokenizerFormat(format!(
                    "merge {rank} references a token that does not exist yet"
                )));
            }
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(Error::TokenizerFormat(format!("merge {rank} is a duplicate")));
            }
            let mut piece = pieces[l as usize].clone();
            piece.extend_from_slice(&pieces[r as usize]);
            pieces.push(piece);
        }
        let mut seen = HashSet::new();
        for s in &specials {
            if !seen.insert(s.as_str()) {
                return Err(Error::TokenizerFormat(format!("duplicate special token {s:?}")));
            }
        }
        Ok(Self {
            pieces,
            merges,
            ranks,
            specials,
        })
    }

    /// A tokenizer with no merges: one id per byte.
    pub fn byte_level(specials: &[&str]) -> Self {
        Self::from_merges(Vec::new(), specials.iter().map(|s| s.to_string()).collect())
            .expect("no merges to validate")
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len() + self.specials.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn special_tokens(&self) -> &[String] {
        &self.specials
    }

    pub fn special_id(&self, name: &str) -> Option<u32> {
        self.specials
            .iter()
            .position(|s| s == name)
            .map(|i| (self.pieces.len() + i) as u32)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) >= self.pieces.len() && (id as usize) < self.vocab_size()
    }

    /// Id of the end-of-text token, falling back to the first special token.
    pub fn eos_id(&self) -> Option<u32> {
        self.special_id(END_OF_TEXT)
            .or_else(|| (!self.specials.is_empty()).then_some(self.pieces.len() as u32))
    }

    /// Display form of a token: byte-level printable string, or the special's name.
    pub fn token_string(&self, id: u32) -> Option<String> {
        let id = id as usize;
        if id < self.pieces.len() {
            Some(bytes_to_printable(&self.pieces[id]))
        } else {
            self.specials.get(id - self.pieces.len()).cloned()
        }
    }

    /// Encodes text. Special-token names occurring in `text` are treated as plain bytes.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 3 + 1);
        for word in pretokenize(text) {
            self.encode_word(word.as_bytes(), &mut out);
        }
        out
    }

    fn encode_word(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        if !self.merges.is_empty() {
            while symbols.len() > 1 {
                let best = symbols
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                    .min();
                let Some((rank, pair)) = best else { break };
                let merged = N_BYTES as u32 + rank;
                symbols = merge_symbols(&symbols, pair, merged);
            }
        }
        out.extend_from_slice(&symbols);
    }

    /// Raw bytes of an id sequence; specials contribute their names unless skipped.
    pub fn decode_bytes(&self, ids: &[u32], skip_special: bool) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let i = id as usize;
            if i < self.pieces.len() {
                out.extend_from_slice(&self.pieces[i]);
            } else if let Some(name) = self.specials.get(i - self.pieces.len()) {
                if !skip_special {
                    out.extend_from_slice(name.as_bytes());
                }
            } else {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.vocab_size(),
                });
            }
        }
        Ok(out)
    }

    /// Decodes ids to text. Byte sequences that are not valid UTF-8 (possible for
    /// generated ids that split a multi-byte character) are replaced with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        self.decode_with(ids, false)
    }

    pub fn decode_with(&self, ids: &[u32], skip_special: bool) -> Result<String> {
        let bytes = self.decode_bytes(ids, skip_special)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Writes `vocab.json` and `merges.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut vocab = serde_json::Map::new();
        for id in 0..self.vocab_size() as u32 {
            let token = self.token_string(id).expect("id in range");
            vocab.insert(token, serde_json::Value::from(id));
        }
        let vocab_path = dir.join(VOCAB_FILE);
        let json = serde_json::to_string_pretty(&serde_json::Value::Object(vocab))?;
        fs::write(&vocab_path, json).map_err(|e| Error::io(&vocab_path, e))?;

        let merges_path = dir.join(MERGES_FILE);
        let file = fs::File::create(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        let mut w = BufWriter::new(file);
        for &(l, r) in &self.merges {
            writeln!(
                w,
                "{} {}",
                bytes_to_printable(&self.pieces[l as usize]),
                bytes_to_printable(&self.pieces[r as usize])
            )
            .map_err(|e| Error::io(&merges_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&merges_path, e))?;
        Ok(())
    }

    /// Loads a tokenizer saved by [`TokenizerModel::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join(VOCAB_FILE);
        let merges_path = dir.join(MERGES_FILE);
        let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let merges_text =
            fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        Self::from_files(&vocab_text, &merges_text)
    }

    /// Parses the vocabulary JSON and merges text, validating their consistency.
    pub fn from_files(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let entries = parse_vocab_entries(vocab_json)?;
        let mut by_id: Vec<Option<String>> = vec![None; entries.len()];
        let mut by_token: HashMap<&str, u32> = HashMap::with_capacity(entries.len());
        for (token, id) in &entries {
            if by_token.insert(token.as_str(), *id).is_some() {
                return Err(Error::TokenizerFormat(format!("duplicate token {token:?}")));
            }
            let slot = by_id.get_mut(*id as usize).ok_or_else(|| {
                Error::TokenizerFormat(format!("id {id} of {token:?} is not contiguous"))
            })?;
            if slot.replace(token.clone()).is_some() {
                return Err(Error::TokenizerFormat(format!("duplicate id {id}")));
            }
        }
        let by_id: Vec<String> = by_id.into_iter().map(|t| t.expect("all ids filled")).collect();
        if by_id.len() < N_BYTES {
            return Err(Error::TokenizerFormat("vocabulary is missing byte tokens".into()));
        }
        for (b, token) in by_id.iter().take(N_BYTES).enumerate() {
            if *token != bytes_to_printable(&[b as u8]) {
                return Err(Error::TokenizerFormat(format!("id {b} is not byte {b}")));
            }
        }

        let mut merges = Vec::new();
        for (lineno, line) in merges_txt.lines().enumerate() {
            if line.is_empty() || line.starts_with("#version") {
                continue;
            }
            let (l, r) = line.split_once(' ').ok_or_else(|| {
                Error::TokenizerFormat(format!("merges line {}: expected `left right`", lineno + 1))
            })?;
            let lookup = |t: &str| {
                by_token.get(t).copied().ok_or_else(|| {
                    Error::TokenizerFormat(format!("merges line {}: unknown token {t:?}", lineno + 1))
                })
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            let produced = (N_BYTES + merges.len()) as u32;
            let expected = format!("{l}{r}");
            if by_token.get(expected.as_str()) != Some(&produced) {
                return Err(Error::TokenizerFormat(format!(
                    "merges line {}: {expected:?} should have id {produced}",
                    lineno + 1
                )));
            }
            merges.push((li, ri));
        }
        let specials = by_id[N_BYTES + merges.len()..].to_vec();
        Self::from_merges(merges, specials)
    }
}

fn merge_symbols(symbols: &[u32], pair: (u32, u32), merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Reads a JSON object as an ordered list of entries so duplicate keys can be detected.
fn parse_vocab_entries(json: &str) -> Result<Vec<(String, u32)>> {
    struct Entries;
    impl<'de> Visitor<'de> for Entries {
        type Value = Vec<(String, u32)>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a JSON object mapping token strings to ids")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
            let mut out = Vec::new();
            while let Some(entry) = map.next_entry::<String, u32>()? {
                out.push(entry);
            }
            Ok(out)
        }
    }
    let mut de = serde_json::Deserializer::from_str(json);
    let entries = de
        .deserialize_map(Entries)
        .map_err(|e| Error::TokenizerFormat(format!("vocab.json: {e}")))?;
    de.end()
        .map_err(|e| Error::TokenizerFormat(format!("vocab.json: {e}")))?;
    Ok(entries)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Number,
    Space,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Number
    } else {
        CharClass::Other
    }
}

/// Splits text into pre-tokens whose concatenation is exactly `text`.
///
/// Runs of letters, digits or other symbols form one piece each, and a single
/// preceding space is attached to the run. A whitespace run followed by a
/// non-space character gives up its last character to the next piece.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        let class = class_of(c);
        let mut j = i + 1;
        if class == CharClass::Space {
            let next_class = chars.get(i + 1).map(|&(_, n)| class_of(n));
            if c == ' ' && matches!(next_class, Some(k) if k != CharClass::Space) {
                let word_class = next_class.unwrap();
                j = i + 2;
                while j < chars.len() && class_of(chars[j].1) == word_class {
                    j += 1;
                }
            } else {
                while j < chars.len() && class_of(chars[j].1) == CharClass::Space {
                    j += 1;
                }
                if j < chars.len() && j - i > 1 {
                    j -= 1;
                }
            }
        } else {
            while j < chars.len() && class_of(chars[j].1) == class {
                j += 1;
            }
        }
        pieces.push(&text[start..end_of(j)]);
        i = j;
    }
    pieces
}

/// The GPT-2 byte-to-character table: printable bytes map to themselves, the rest
/// are shifted to code points from 256 upwards.
fn byte_table() -> &'static [char; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let mut shift = 0u32;
        for b in 0..256u32 {
            let printable =
                (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
            table[b as usize] = if printable {
                char::from_u32(b).unwrap()
            } else {
                shift += 1;
                char::from_u32(255 + shift).unwrap()
            };
        }
        table
    })
}

fn bytes_to_printable(bytes: &[u8]) -> String {
    let table = byte_table();
    bytes.iter().map(|&b| table[b as usize]).collect()
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    // Max-heap: higher count first, then the lexicographically smallest pair.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| (&other.left, &other.right).cmp(&(&self.left, &self.right)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Word {
    symbols: Vec<u32>,
    count: u64,
}

/// Learns a byte-level BPE vocabulary of `target_vocab_size` entries
/// (`256 + merges + specials`).
///
/// Pairs are merged by descending frequency; equal frequencies go to the
/// lexicographically smallest `(left, right)` byte pair. If the corpus runs out
/// of pairs first, the returned vocabulary is smaller and a warning is logged.
pub fn train_bpe<I, S>(corpus: I, target_vocab_size: usize, special_tokens: &[&str]) -> Result<TokenizerModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let floor = N_BYTES + special_tokens.len();
    if target_vocab_size < floor {
        return Err(Error::Config(format!(
            "target vocabulary size {target_vocab_size} is below 256 bytes + {} special tokens",
            special_tokens.len()
        )));
    }

    let mut word_counts: HashMap<String, u64> = HashMap::new();
    for chunk in corpus {
        for piece in pretokenize(chunk.as_ref()) {
            *word_counts.entry(piece.to_owned()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::InvalidInput("tokenizer corpus is empty".into()));
    }
    let mut sorted: Vec<(String, u64)> = word_counts.into_iter().collect();
    sorted.sort_unstable();
    let mut words: Vec<Word> = sorted
        .into_iter()
        .map(|(w, count)| Word {
            symbols: w.bytes().map(u32::from).collect(),
            count,
        })
        .collect();

    let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut locations: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, word) in words.iter().enumerate() {
        for w in word.symbols.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_default() += word.count as i64;
            locations.entry((w[0], w[1])).or_default().insert(wi);
        }
    }
    let candidate = |pair: (u32, u32), count: i64, pieces: &[Vec<u8>]| Candidate {
        count: count as u64,
        left: pieces[pair.0 as usize].clone(),
        right: pieces[pair.1 as usize].clone(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(&p, &c)| candidate(p, c, &pieces))
        .collect();

    let budget = target_vocab_size - floor;
    let mut merges: Vec<(u32, u32)> = Vec::with_capacity(budget);
    while merges.len() < budget {
        let Some(top) = heap.pop() else { break };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current <= 0 {
            continue;
        }
        if current as u64 != top.count {
            heap.push(Candidate {
                count: current as u64,
                ..top
            });
            continue;
        }

        let pair = top.pair;
        let new_id = pieces.len() as u32;
        let mut piece = top.left;
        piece.extend_from_slice(&top.right);
        pieces.push(piece);
        merges.push(pair);

        let mut touched: Vec<usize> = locations.remove(&pair).unwrap_or_default().into_iter().collect();
        touched.sort_unstable();
        let mut grown: HashSet<(u32, u32)> = HashSet::new();
        for wi in touched {
            let word = &mut words[wi];
            let merged = merge_symbols(&word.symbols, pair, new_id);
            if merged.len() == word.symbols.len() {
                continue;
            }
            let c = word.count as i64;
            for w in word.symbols.windows(2) {
                *pair_counts.get_mut(&(w[0], w[1])).expect("counted pair") -= c;
            }
            for w in merged.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_default() += c;
                locations.entry(p).or_default().insert(wi);
                if p.0 == new_id || p.1 == new_id {
                    grown.insert(p);
                }
            }
            word.symbols = merged;
        }
        pair_counts.remove(&pair);
        for p in grown {
            let count = pair_counts[&p];
            if count > 0 {
                heap.push(candidate(p, count, &pieces));
            }
        }
    }

    if merges.len() < budget {
        log::warn!(
            "corpus exhausted after {} merges; vocabulary has {} of the requested {} entries",
            merges.len(),
            floor + merges.len(),
            target_vocab_size
        );
    }
    TokenizerModel::from_merges(merges, special_tokens.iter().map(|s| s.to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aaab_learns_a_single_aa_merge() {
        // pairs in "aaab": (a,a) x2, (a,b) x1
        let tok = train_bpe(["aaab"], 257, &[]).unwrap();
        assert_eq!(tok.merges(), &[(b'a' as u32, b'a' as u32)]);
        assert_eq!(tok.vocab_size(), 257);
        let aa = 256;
        assert_eq!(tok.encode("aaab"), vec![aa, b'a' as u32, b'b' as u32]);
        assert_eq!(tok.decode(&[aa, b'b' as u32]).unwrap(), "aab");
    }

    #[test]
    fn ties_go_to_the_lexicographically_smallest_pair() {
        // (x,y) and (a,b) both appear once
        let tok = train_bpe(["xy", "ab"], 257, &[]).unwrap();
        assert_eq!(tok.merges(), &[(b'a' as u32, b'b' as u32)]);
    }

    #[test]
    fn minimal_target_means_pure_bytes() {
        let tok = train_bpe(["hello hello world"], 257, &[END_OF_TEXT]).unwrap();
        assert!(tok.merges().is_empty());
        assert_eq!(tok.encode("hé"), vec![b'h' as u32, 0xc3, 0xa9]);
        assert_eq!(tok.special_id(END_OF_TEXT), Some(256));
    }

    #[test]
    fn exhausted_corpus_stops_early() {
        let tok = train_bpe(["abc abc"], 32_001, &[END_OF_TEXT]).unwrap();
        assert!(tok.vocab_size() < 32_001);
        // "abc" (x1) and " abc" (x1): pairs ab, bc, " a" -> at most 4 merges
        assert!(tok.merges().len() <= 4);
        assert_eq!(tok.encode(" abc"), vec![tok.vocab_size() as u32 - 2]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(train_bpe(Vec::<String>::new(), 300, &[]), Err(Error::InvalidInput(_))));
        assert!(matches!(train_bpe([""], 300, &[]), Err(Error::InvalidInput(_))));
        assert!(matches!(train_bpe(["abc"], 256, &[END_OF_TEXT]), Err(Error::Config(_))));
    }

    #[test]
    fn empty_and_out_of_range() {
        let tok = TokenizerModel::byte_level(&[END_OF_TEXT]);
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
        assert!(matches!(tok.decode(&[257]), Err(Error::TokenOutOfRange { id: 257, .. })));
        assert_eq!(tok.decode(&[b'a' as u32, 256]).unwrap(), "a<|endoftext|>");
        assert_eq!(tok.decode_with(&[b'a' as u32, 256], true).unwrap(), "a");
    }

    #[test]
    fn pretokenizer_matches_gpt2_grouping() {
        assert_eq!(pretokenize("Hello, world!"), vec!["Hello", ",", " world", "!"]);
        assert_eq!(pretokenize("a  b"), vec!["a", " ", " b"]);
        assert_eq!(pretokenize("x\n\nfoo 42 "), vec!["x", "\n", "\n", "foo", " 42", " "]);
        assert_eq!(pretokenize("  "), vec!["  "]);
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let table = byte_table();
        let distinct: HashSet<char> = table.iter().copied().collect();
        assert_eq!(distinct.len(), 256);
        assert_eq!(table[b' ' as usize], 'Ġ');
        assert_eq!(table[b'\n' as usize], 'Ċ');
    }

    #[test]
    fn save_load_round_trip_and_duplicate_rejection() {
        let tok = train_bpe(["the cat sat on the mat with the hat"], 270, &[END_OF_TEXT]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tok.save(dir.path()).unwrap();
        let back = TokenizerModel::load(dir.path()).unwrap();
        assert_eq!(back, tok);

        let vocab = fs::read_to_string(dir.path().join(VOCAB_FILE)).unwrap();
        let dup = vocab.replacen('{', "{\n  \"a\": 0,", 1);
        let merges = fs::read_to_string(dir.path().join(MERGES_FILE)).unwrap();
        let err = TokenizerModel::from_files(&dup, &merges).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }
}
