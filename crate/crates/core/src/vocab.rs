//! Word vocabularies and byte-pair encoding.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Appended to every word as its own initial symbol before merging.
pub const END_OF_WORD: &str = "</w>";

pub const BPE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Token/id maps with frequencies.
///
/// Ids `0..4` are the specials `<pad> <unk> <s> </s>`. Remaining ids are in
/// descending frequency order with ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    frequency: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    frequency: Vec<u64>,
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.id_to_token,
            frequency: v.frequency,
        }
    }
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = VocabError;

    fn try_from(r: VocabularyRepr) -> Result<Self, Self::Error> {
        Vocabulary::from_entries(r.tokens.into_iter().zip(r.frequency).collect())
    }
}

impl Vocabulary {
    /// Keeps tokens with count ≥ `min_freq`, most frequent first, capped so the
    /// vocabulary (specials included) has at most `max_size` entries.
    pub fn from_counts<I>(counts: I, max_size: usize, min_freq: u64) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = (String, u64)>,
    {
        if max_size < NUM_SPECIALS {
            return Err(VocabError::Config(format!(
                "max_size {max_size} cannot hold the {NUM_SPECIALS} special tokens"
            )));
        }
        let mut entries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size - NUM_SPECIALS);
        let mut all: Vec<(String, u64)> =
            SPECIAL_TOKENS.iter().map(|s| (s.to_string(), 0)).collect();
        all.extend(entries);
        Self::from_entries(all)
    }

    fn from_entries(entries: Vec<(String, u64)>) -> Result<Self, VocabError> {
        let mut token_to_id = HashMap::with_capacity(entries.len());
        let mut id_to_token = Vec::with_capacity(entries.len());
        let mut frequency = Vec::with_capacity(entries.len());
        for (id, (token, freq)) in entries.into_iter().enumerate() {
            if id < NUM_SPECIALS && token != SPECIAL_TOKENS[id] {
                return Err(VocabError::Format {
                    line: id + 1,
                    message: format!("expected special token {}", SPECIAL_TOKENS[id]),
                });
            }
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(VocabError::Format {
                    line: id + 1,
                    message: format!("invalid token {token:?}"),
                });
            }
            if token_to_id.insert(token.clone(), id).is_some() {
                return Err(VocabError::Format {
                    line: id + 1,
                    message: format!("duplicate token {token:?}"),
                });
            }
            id_to_token.push(token);
            frequency.push(freq);
        }
        if id_to_token.len() < NUM_SPECIALS {
            return Err(VocabError::Format {
                line: id_to_token.len() + 1,
                message: "vocabulary is missing special tokens".into(),
            });
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            frequency,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Id of `token`, or `UNK`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn frequency(&self, id: usize) -> Option<u64> {
        self.frequency.get(id).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    /// Maps ids back to tokens, dropping `PAD`, `BOS` and `EOS`.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, VocabError> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or(VocabError::IdOutOfRange { id, size: self.len() })
            })
            .collect()
    }

    /// One `token<TAB>frequency` line per id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        let mut w = BufWriter::new(File::create(path)?);
        for (token, freq) in self.id_to_token.iter().zip(&self.frequency) {
            writeln!(w, "{token}\t{freq}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let (token, freq) = line.split_once('\t').ok_or_else(|| VocabError::Format {
                line: i + 1,
                message: "expected token<TAB>frequency".into(),
            })?;
            let freq = freq.parse().map_err(|e| VocabError::Format {
                line: i + 1,
                message: format!("bad frequency: {e}"),
            })?;
            entries.push((token.to_string(), freq));
        }
        Self::from_entries(entries)
    }
}

/// Word vocabulary over source and target tokens of the training split.
pub fn build_word_vocab(
    train: &[Document],
    max_size: usize,
    min_freq: u64,
) -> Result<Vocabulary, VocabError> {
    if train.is_empty() {
        return Err(VocabError::Config("training set is empty".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for doc in train {
        for t in doc.source_tokens.iter().chain(&doc.target_tokens) {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    Vocabulary::from_counts(counts, max_size, min_freq)
}

/// Sort key for merge tie-breaking: lexicographic by character, with the
/// end-of-word marker ordered after every ordinary character.
fn symbol_key(symbol: &str) -> impl Iterator<Item = u32> + '_ {
    let (body, marked) = match symbol.strip_suffix(END_OF_WORD) {
        Some(body) => (body, true),
        None => (symbol, false),
    };
    body.chars()
        .map(|c| c as u32)
        .chain(marked.then_some(u32::MAX))
}

fn symbol_cmp(a: &str, b: &str) -> Ordering {
    symbol_key(a).cmp(symbol_key(b))
}

/// Total order used to break ties between equally frequent pairs.
pub fn pair_cmp(a: &(String, String), b: &(String, String)) -> Ordering {
    symbol_cmp(&a.0, &b.0).then_with(|| symbol_cmp(&a.1, &b.1))
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .map(String::from)
        .chain(std::iter::once(END_OF_WORD.to_string()))
        .collect()
}

/// Replaces every non-overlapping occurrence of `pair`, scanning left to right.
fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// A learned merge table plus the vocabulary over the resulting subwords.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BpeRepr", into = "BpeRepr")]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct BpeRepr {
    merges: Vec<(String, String)>,
    vocab: Vocabulary,
}

impl From<BpeModel> for BpeRepr {
    fn from(m: BpeModel) -> Self {
        BpeRepr {
            merges: m.merges,
            vocab: m.vocab,
        }
    }
}

impl TryFrom<BpeRepr> for BpeModel {
    type Error = VocabError;

    fn try_from(r: BpeRepr) -> Result<Self, Self::Error> {
        BpeModel::from_parts(r.merges, r.vocab)
    }
}

/// Learns up to `num_merges` merges from a token stream.
///
/// Each step merges the most frequent adjacent symbol pair across all word
/// types (weighted by word count). Ties go to the smallest pair under
/// [`pair_cmp`]. Learning stops early once every word is a single symbol.
pub fn bpe_learn<I, S>(tokens: I, num_merges: usize) -> BpeModel
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in tokens {
        *word_counts.entry(t.as_ref().to_string()).or_insert(0) += 1;
    }
    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .iter()
        .map(|(w, &c)| (initial_symbols(w), c))
        .collect();

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let Some(best) = most_frequent_pair(&words) else {
            break;
        };
        for (symbols, _) in &mut words {
            merge_pair(symbols, &best.0, &best.1);
        }
        merges.push(best);
    }

    let mut model = BpeModel {
        ranks: rank_map(&merges),
        merges,
        vocab: Vocabulary::from_counts(std::iter::empty(), NUM_SPECIALS, 0)
            .expect("specials-only vocabulary"),
    };
    model.vocab = model.subword_vocab(&word_counts);
    model
}

fn most_frequent_pair(words: &[(Vec<String>, u64)]) -> Option<(String, String)> {
    let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
    for (symbols, c) in words {
        for w in symbols.windows(2) {
            *counts.entry((&w[0], &w[1])).or_insert(0) += c;
        }
    }
    counts
        .into_iter()
        .max_by(|(a, ca), (b, cb)| {
            ca.cmp(cb)
                .then_with(|| symbol_cmp(b.0, a.0).then_with(|| symbol_cmp(b.1, a.1)))
        })
        .map(|((l, r), _)| (l.to_string(), r.to_string()))
}

fn rank_map(merges: &[(String, String)]) -> HashMap<(String, String), usize> {
    merges
        .iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), i))
        .collect()
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, vocab: Vocabulary) -> Result<Self, VocabError> {
        let ranks = rank_map(&merges);
        if ranks.len() != merges.len() {
            return Err(VocabError::Config("merge table contains duplicate pairs".into()));
        }
        Ok(BpeModel {
            merges,
            ranks,
            vocab,
        })
    }

    /// Every character seen, the end-of-word marker, and every merge result,
    /// with frequencies taken from the final segmentation of the training words.
    fn subword_vocab(&self, word_counts: &BTreeMap<String, u64>) -> Vocabulary {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        counts.insert(END_OF_WORD.to_string(), 0);
        for w in word_counts.keys() {
            for c in w.chars() {
                counts.insert(c.to_string(), 0);
            }
        }
        for (l, r) in &self.merges {
            counts.insert(format!("{l}{r}"), 0);
        }
        for (w, c) in word_counts {
            for s in self.segment(w) {
                *counts.get_mut(&s).expect("segment yields known symbols") += c;
            }
        }
        let size = counts.len() + NUM_SPECIALS;
        Vocabulary::from_counts(counts, size, 0).expect("size covers all symbols")
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Applies merges whose rank lies in `ranks` to an existing symbol sequence.
    pub fn apply_merges(&self, mut symbols: Vec<String>, ranks: Range<usize>) -> Vec<String> {
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .copied()
                .filter(|r| ranks.contains(r))
                .min();
            let Some(rank) = best else {
                return symbols;
            };
            let (l, r) = &self.merges[rank];
            merge_pair(&mut symbols, l, r);
        }
    }

    /// Subword symbols of one word after all merges.
    pub fn segment(&self, word: &str) -> Vec<String> {
        self.apply_merges(initial_symbols(word), 0..self.merges.len())
    }

    /// Characters never seen in training map to `UNK`.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .flat_map(|t| self.segment(t))
            .map(|s| self.vocab.id_or_unk(&s))
            .collect()
    }

    /// Concatenates subwords and cuts words at end-of-word markers. `PAD`,
    /// `BOS` and `EOS` are dropped; a trailing unterminated word is kept.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, VocabError> {
        let mut words = Vec::new();
        let mut current = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let symbol = self.vocab.token(id).ok_or(VocabError::IdOutOfRange {
                id,
                size: self.vocab.len(),
            })?;
            match symbol.strip_suffix(END_OF_WORD) {
                Some(body) => {
                    current.push_str(body);
                    words.push(std::mem::take(&mut current));
                }
                None => current.push_str(symbol),
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        Ok(words)
    }

    /// Header line, then one space-separated merge pair per line in learned order.
    pub fn save_merges(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(
            w,
            "#bpe version={BPE_FORMAT_VERSION} num_merges={} marker={END_OF_WORD}",
            self.merges.len()
        )?;
        for (l, r) in &self.merges {
            writeln!(w, "{l} {r}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the merge table to `merges_path` and the subword vocabulary to `vocab_path`.
    pub fn save(
        &self,
        merges_path: impl AsRef<Path>,
        vocab_path: impl AsRef<Path>,
    ) -> Result<(), VocabError> {
        self.save_merges(merges_path)?;
        self.vocab.save(vocab_path)
    }

    pub fn load(
        merges_path: impl AsRef<Path>,
        vocab_path: impl AsRef<Path>,
    ) -> Result<Self, VocabError> {
        let merges = load_merges(merges_path)?;
        Self::from_parts(merges, Vocabulary::load(vocab_path)?)
    }
}

fn load_merges(path: impl AsRef<Path>) -> Result<Vec<(String, String)>, VocabError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let fields: HashMap<&str, &str> = header
        .strip_prefix("#bpe ")
        .ok_or_else(|| VocabError::Format {
            line: 1,
            message: "missing #bpe header".into(),
        })?
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let header_err = |message: String| VocabError::Format { line: 1, message };
    if fields.get("version") != Some(&BPE_FORMAT_VERSION.to_string().as_str()) {
        return Err(header_err(format!("unsupported version {:?}", fields.get("version"))));
    }
    if fields.get("marker") != Some(&END_OF_WORD) {
        return Err(header_err(format!("unsupported marker {:?}", fields.get("marker"))));
    }
    let expected: usize = fields
        .get("num_merges")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| header_err("missing num_merges".into()))?;
    let mut merges = Vec::with_capacity(expected);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let (l, r) = line.split_once(' ').ok_or_else(|| VocabError::Format {
            line: i + 2,
            message: "expected a space-separated pair".into(),
        })?;
        merges.push((l.to_string(), r.to_string()));
    }
    if merges.len() != expected {
        return Err(header_err(format!(
            "header announces {expected} merges, file has {}",
            merges.len()
        )));
    }
    Ok(merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(spec: &[(&str, usize)]) -> Vec<String> {
        spec.iter()
            .flat_map(|(w, n)| std::iter::repeat_n(w.to_string(), *n))
            .collect()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn word_vocab_orders_by_frequency() {
        let train = vec![Document::new("1", "a a b c", "")];
        let v = build_word_vocab(&train, 6, 1).unwrap();
        assert_eq!(v.tokens(), ["<pad>", "<unk>", "<s>", "</s>", "a", "b"]);
        let v = build_word_vocab(&train, 10, 1).unwrap();
        assert_eq!(&v.tokens()[4..], ["a", "b", "c"]);
        assert_eq!(v.frequency(4), Some(2));
    }

    #[test]
    fn word_vocab_truncates_and_is_deterministic() {
        let train = vec![Document::new("1", "a a b", "")];
        let v = build_word_vocab(&train, 5, 1).unwrap();
        assert_eq!(&v.tokens()[4..], ["a"]);
        assert_eq!(v, build_word_vocab(&train, 5, 1).unwrap());
    }

    #[test]
    fn word_vocab_min_freq_and_errors() {
        let train = vec![Document::new("1", "a a b", "c")];
        let v = build_word_vocab(&train, 100, 2).unwrap();
        assert_eq!(&v.tokens()[4..], ["a"]);
        assert!(matches!(build_word_vocab(&train, 3, 1), Err(VocabError::Config(_))));
        assert!(matches!(build_word_vocab(&[], 10, 1), Err(VocabError::Config(_))));
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let train = vec![Document::new("1", "x y y z", "z z")];
        let v = build_word_vocab(&train, 100, 1).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        std::fs::write(&path, "<unk>\t0\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    #[test]
    fn vocab_decode_rejects_out_of_range() {
        let v = Vocabulary::from_counts(vec![("a".to_string(), 1)], 10, 1).unwrap();
        assert_eq!(v.decode(&[BOS, 4, EOS]).unwrap(), ["a"]);
        assert!(matches!(v.decode(&[5]), Err(VocabError::IdOutOfRange { id: 5, size: 5 })));
    }

    #[test]
    fn first_merge_on_classic_fixture() {
        let corpus = words(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let m = bpe_learn(&corpus, 1);
        assert_eq!(m.merges(), [("e".to_string(), "s".to_string())]);
    }

    #[test]
    fn zero_merges_gives_characters() {
        let m = bpe_learn(["low"], 0);
        assert_eq!(m.segment("low"), ["l", "o", "w", "</w>"]);
        assert_eq!(m.decode(&m.encode(&toks("low"))).unwrap(), ["low"]);
    }

    #[test]
    fn single_word_hand_trace() {
        let m = bpe_learn(["aaaa"], 2);
        assert_eq!(
            m.merges(),
            [("a".into(), "a".into()), ("aa".into(), "aa".into())]
        );
        assert_eq!(m.segment("aaaa"), ["aaaa", "</w>"]);
    }

    #[test]
    fn empty_corpus_has_no_merges() {
        let m = bpe_learn(Vec::<String>::new(), 10);
        assert_eq!(m.num_merges(), 0);
        assert!(m.encode(&[]).is_empty());
        assert!(m.decode(&[]).unwrap().is_empty());
    }

    #[test]
    fn fully_merged_word_is_one_id() {
        let corpus = words(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let m = bpe_learn(&corpus, 50);
        assert_eq!(m.encode(&toks("newest")).len(), 1);
    }

    #[test]
    fn unknown_character_maps_to_unk() {
        let m = bpe_learn(["low"], 2);
        let ids = m.encode(&toks("lox"));
        assert!(ids.contains(&UNK));
    }

    #[test]
    fn decode_fixture_pieces() {
        let m = bpe_learn(words(&[("w", 5), ("lo", 3), ("low", 1)]), 2);
        assert_eq!(m.segment("low"), ["lo", "w</w>"]);
        let ids = [m.vocab().id("lo").unwrap(), m.vocab().id("w</w>").unwrap()];
        assert_eq!(m.decode(&ids).unwrap(), ["low"]);
        assert!(m.decode(&[m.vocab().len()]).is_err());
    }

    #[test]
    fn merges_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = words(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let m = bpe_learn(&corpus, 12);
        let (mp, vp) = (dir.path().join("bpe.merges"), dir.path().join("bpe.vocab"));
        m.save(&mp, &vp).unwrap();
        let text = std::fs::read_to_string(&mp).unwrap();
        assert!(text.starts_with("#bpe version=1 num_merges=12 marker=</w>\n"));
        assert!(text.lines().nth(1) == Some("e s"));
        assert_eq!(BpeModel::load(&mp, &vp).unwrap(), m);
    }

    #[test]
    fn merged_symbols_are_pair_concatenations() {
        let corpus = words(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let m = bpe_learn(&corpus, 20);
        for (l, r) in m.merges() {
            assert!(m.vocab().id(&format!("{l}{r}")).is_some());
        }
    }

    fn charset_words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-fx]{1,7}", 0..6)
    }

    proptest! {
        #[test]
        fn roundtrip_over_training_charset(corpus in prop::collection::vec("[a-fx]{1,6}", 1..20),
                                           merges in 0usize..40,
                                           text in charset_words()) {
            let mut corpus = corpus;
            corpus.push("abcdefx".into());
            let m = bpe_learn(&corpus, merges);
            prop_assert_eq!(m.decode(&m.encode(&text)).unwrap(), text);
        }

        #[test]
        fn merges_compose(corpus in prop::collection::vec("[a-d]{1,6}", 1..20),
                          k in 0usize..30, word in "[a-d]{1,8}") {
            let m = bpe_learn(&corpus, 30);
            let k = k.min(m.num_merges());
            let partial = m.apply_merges(initial_symbols(&word), 0..k);
            let rest = m.apply_merges(partial, k..m.num_merges());
            prop_assert_eq!(rest, m.segment(&word));
        }

        #[test]
        fn vocab_is_a_bijection(corpus in prop::collection::vec("[a-e]{1,5}", 1..30)) {
            let m = bpe_learn(&corpus, 15);
            let v = m.vocab();
            for i in 0..v.len() {
                prop_assert_eq!(v.id(v.token(i).unwrap()), Some(i));
            }
            let mut seen = std::collections::HashSet::new();
            prop_assert!(m.merges().iter().all(|p| seen.insert(p.clone())));
            prop_assert_eq!(bpe_learn(&corpus, 15), m);
        }
    }
}
