//! Corpus ingestion and annotation.
//!
//! Records are JSON lines holding an article sentence (`source`) and its
//! headline (`target`). Text is lowercased and split on whitespace. Each
//! source token is annotated with a coarse POS tag and with the bin indices
//! of its term frequency and inverse document frequency.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported stats file version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The coarse universal tag set. `Punc` covers punctuation; `X` is the catch-all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PosTag {
    Adj,
    Adp,
    Adv,
    Conj,
    Det,
    Noun,
    Num,
    Pron,
    Prt,
    Verb,
    Punc,
    X,
}

impl PosTag {
    pub const ALL: [PosTag; 12] = [
        PosTag::Adj,
        PosTag::Adp,
        PosTag::Adv,
        PosTag::Conj,
        PosTag::Det,
        PosTag::Noun,
        PosTag::Num,
        PosTag::Pron,
        PosTag::Prt,
        PosTag::Verb,
        PosTag::Punc,
        PosTag::X,
    ];

    pub const COUNT: usize = 12;

    /// Position of the tag in [`PosTag::ALL`]; this is its one-hot index.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<PosTag> {
        PosTag::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Adj => "ADJ",
            PosTag::Adp => "ADP",
            PosTag::Adv => "ADV",
            PosTag::Conj => "CONJ",
            PosTag::Det => "DET",
            PosTag::Noun => "NOUN",
            PosTag::Num => "NUM",
            PosTag::Pron => "PRON",
            PosTag::Prt => "PRT",
            PosTag::Verb => "VERB",
            PosTag::Punc => "PUNC",
            PosTag::X => "X",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PosTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown POS tag {s:?}"))
    }
}

/// An article/headline pair with per-source-token annotations.
///
/// The annotation vectors are empty until [`annotate_document`] runs, except
/// `pos_tags`, which may arrive pre-filled from the input record.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub pos_tags: Vec<PosTag>,
    pub tf_bins: Vec<usize>,
    pub idf_bins: Vec<usize>,
}

impl Document {
    pub fn new(id: impl Into<String>, source: &str, target: &str) -> Self {
        Document {
            id: id.into(),
            source_tokens: tokenize(source),
            target_tokens: tokenize(target),
            pos_tags: Vec::new(),
            tf_bins: Vec::new(),
            idf_bins: Vec::new(),
        }
    }

    pub fn is_annotated(&self) -> bool {
        let n = self.source_tokens.len();
        self.pos_tags.len() == n && self.tf_bins.len() == n && self.idf_bins.len() == n
    }

    pub fn source_text(&self) -> String {
        self.source_tokens.join(" ")
    }

    pub fn target_text(&self) -> String {
        self.target_tokens.join(" ")
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// One line of the corpus file, raw or annotated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tf_bin: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idf_bin: Option<Vec<usize>>,
}

impl CorpusRecord {
    pub fn from_document(doc: &Document) -> Self {
        CorpusRecord {
            id: Some(doc.id.clone()),
            source: doc.source_text(),
            target: doc.target_text(),
            pos: (!doc.pos_tags.is_empty())
                .then(|| doc.pos_tags.iter().map(|t| t.as_str().to_string()).collect()),
            tf_bin: (!doc.tf_bins.is_empty()).then(|| doc.tf_bins.clone()),
            idf_bin: (!doc.idf_bins.is_empty()).then(|| doc.idf_bins.clone()),
        }
    }
}

/// Streaming reader over a line-delimited corpus.
///
/// Malformed lines are yielded as errors carrying the line number; records
/// with an empty source or target are dropped and counted in [`Ingest::skipped`].
pub struct Ingest<R> {
    lines: Lines<R>,
    line_no: usize,
    skipped: usize,
}

pub fn ingest(path: impl AsRef<Path>) -> Result<Ingest<BufReader<File>>, CorpusError> {
    let file = File::open(path)?;
    Ok(ingest_reader(BufReader::new(file)))
}

pub fn ingest_reader<R: BufRead>(reader: R) -> Ingest<R> {
    Ingest {
        lines: reader.lines(),
        line_no: 0,
        skipped: 0,
    }
}

impl<R> Ingest<R> {
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl<R: BufRead> Iterator for Ingest<R> {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = self.line_no;
            let malformed = |message: String| CorpusError::Malformed {
                line: line_no,
                message,
            };
            let record: CorpusRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => return Some(Err(malformed(e.to_string()))),
            };
            let id = record.id.clone().unwrap_or_else(|| format!("line-{line_no}"));
            let mut doc = Document::new(id, &record.source, &record.target);
            if doc.source_tokens.is_empty() || doc.target_tokens.is_empty() {
                self.skipped += 1;
                log::warn!("line {line_no}: empty source or target, record skipped");
                continue;
            }
            let n = doc.source_tokens.len();
            if let Some(tags) = record.pos {
                if tags.len() != n {
                    return Some(Err(malformed(format!(
                        "pos has {} tags for {} source tokens",
                        tags.len(),
                        n
                    ))));
                }
                match tags.iter().map(|t| t.parse()).collect::<Result<Vec<_>, _>>() {
                    Ok(tags) => doc.pos_tags = tags,
                    Err(e) => return Some(Err(malformed(e))),
                }
            }
            for (field, bins, slot) in [
                ("tf_bin", record.tf_bin, &mut doc.tf_bins),
                ("idf_bin", record.idf_bin, &mut doc.idf_bins),
            ] {
                if let Some(bins) = bins {
                    if bins.len() != n {
                        return Some(Err(malformed(format!(
                            "{field} has {} entries for {n} source tokens",
                            bins.len()
                        ))));
                    }
                    *slot = bins;
                }
            }
            return Some(Ok(doc));
        }
    }
}

/// Keeps the first occurrence of every (source, target) pair, preserving order.
pub fn deduplicate(docs: impl IntoIterator<Item = Document>) -> impl Iterator<Item = Document> {
    let mut seen: HashSet<(Vec<String>, Vec<String>)> = HashSet::new();
    docs.into_iter().filter(move |d| {
        seen.insert((d.source_tokens.clone(), d.target_tokens.clone()))
    })
}

/// Seeded shuffle split. Both halves keep the input order of their members.
pub fn split(
    docs: Vec<Document>,
    n_valid: usize,
    seed: u64,
) -> Result<(Vec<Document>, Vec<Document>), CorpusError> {
    if n_valid > docs.len() {
        return Err(CorpusError::Config(format!(
            "n_valid ({n_valid}) exceeds the number of documents ({})",
            docs.len()
        )));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let valid_idx: HashSet<usize> = order[..n_valid].iter().copied().collect();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (i, d) in docs.into_iter().enumerate() {
        if valid_idx.contains(&i) {
            valid.push(d);
        } else {
            train.push(d);
        }
    }
    Ok((train, valid))
}

/// A part-of-speech tagger. `None` marks a token the tagger could not tag.
pub trait PosTagger {
    fn tag(&self, tokens: &[String]) -> Vec<Option<PosTag>>;
}

/// Tags tokens with `tagger`, falling back to `X` for any token it fails on.
/// The output always has the same length as `tokens`.
pub fn annotate_pos(tokens: &[String], tagger: &dyn PosTagger) -> Vec<PosTag> {
    let mut tags = tagger.tag(tokens);
    tags.resize(tokens.len(), None);
    tags.into_iter().map(|t| t.unwrap_or(PosTag::X)).collect()
}

/// Dictionary lookup followed by suffix and shape rules.
#[derive(Clone, Debug, Default)]
pub struct LexiconTagger {
    lexicon: HashMap<String, PosTag>,
    suffix_rules: Vec<(String, PosTag)>,
}

const CLOSED_CLASS: &[(PosTag, &[&str])] = &[
    (
        PosTag::Det,
        &[
            "the", "a", "an", "this", "that", "these", "those", "each", "every", "some", "any",
            "no", "all", "both", "another",
        ],
    ),
    (
        PosTag::Adp,
        &[
            "of", "in", "on", "at", "for", "with", "from", "by", "to", "into", "over", "after",
            "before", "under", "about", "against", "between", "during", "through", "near",
            "amid", "across", "along", "despite", "since", "toward", "towards", "without",
        ],
    ),
    (
        PosTag::Pron,
        &[
            "i", "you", "he", "she", "it", "we", "they", "him", "her", "them", "us", "me",
            "his", "its", "their", "our", "my", "your", "who", "which", "whom", "whose",
        ],
    ),
    (PosTag::Conj, &["and", "or", "but", "nor", "yet", "while", "although", "because", "if"]),
    (PosTag::Prt, &["not", "n't", "'s", "up", "out", "off", "down"]),
    (
        PosTag::Adv,
        &[
            "very", "also", "still", "now", "then", "again", "already", "never", "soon", "here",
            "there", "almost", "just", "more", "most", "less",
        ],
    ),
    (
        PosTag::Verb,
        &[
            "is", "are", "was", "were", "be", "been", "being", "has", "have", "had", "do",
            "does", "did", "will", "would", "can", "could", "may", "might", "must", "should",
            "said", "says", "say", "sees", "see", "wins", "win", "won", "takes", "take", "took",
            "makes", "make", "made", "gets", "get", "got", "plans", "calls", "urges", "warns",
            "meets", "rises", "falls", "fell", "rose", "hits", "opens", "signs", "seeks",
            "backs", "sets", "leads", "faces", "vows", "ends", "cuts", "runs", "orders",
        ],
    ),
    (
        PosTag::Adj,
        &[
            "new", "big", "small", "high", "low", "good", "bad", "first", "last", "major",
            "top", "former", "local", "national", "foreign", "old", "young", "long", "key",
            "early", "late", "strong", "weak", "large", "public", "global", "economic",
        ],
    ),
    (
        PosTag::Noun,
        &[
            "government", "minister", "president", "police", "people", "year", "years", "week",
            "country", "city", "market", "prices", "price", "talks", "team", "officials",
            "company", "bank", "oil", "troops", "state", "party", "world", "report", "court",
            "election", "trade", "news", "agency", "friday", "monday", "tuesday",
            "wednesday", "thursday", "saturday", "sunday", "today",
        ],
    ),
];

const SUFFIX_RULES: &[(&str, PosTag)] = &[
    ("tion", PosTag::Noun),
    ("sion", PosTag::Noun),
    ("ment", PosTag::Noun),
    ("ness", PosTag::Noun),
    ("ship", PosTag::Noun),
    ("ity", PosTag::Noun),
    ("ism", PosTag::Noun),
    ("ers", PosTag::Noun),
    ("ing", PosTag::Verb),
    ("ize", PosTag::Verb),
    ("ise", PosTag::Verb),
    ("ed", PosTag::Verb),
    ("ly", PosTag::Adv),
    ("ous", PosTag::Adj),
    ("ful", PosTag::Adj),
    ("able", PosTag::Adj),
    ("ible", PosTag::Adj),
    ("ive", PosTag::Adj),
    ("ical", PosTag::Adj),
    ("less", PosTag::Adj),
];

impl LexiconTagger {
    /// An empty lexicon with no suffix rules; only number and punctuation shapes are tagged.
    pub fn new() -> Self {
        Self::default()
    }

    /// The bundled English lexicon and suffix rules.
    pub fn english() -> Self {
        let mut tagger = LexiconTagger::new();
        for (tag, words) in CLOSED_CLASS {
            for w in *words {
                tagger.lexicon.insert((*w).to_string(), *tag);
            }
        }
        tagger.suffix_rules = SUFFIX_RULES
            .iter()
            .map(|(s, t)| ((*s).to_string(), *t))
            .collect();
        tagger
    }

    pub fn with_entries<I, S>(mut self, entries: I) -> Self
    where
        I: IntoIterator<Item = (S, PosTag)>,
        S: Into<String>,
    {
        for (word, tag) in entries {
            self.lexicon.insert(word.into(), tag);
        }
        self
    }

    fn tag_token(&self, token: &str) -> Option<PosTag> {
        if let Some(tag) = self.lexicon.get(token) {
            return Some(*tag);
        }
        if token.chars().all(|c| !c.is_alphanumeric()) {
            return Some(PosTag::Punc);
        }
        if token.chars().any(|c| c.is_ascii_digit())
            && token.chars().all(|c| c.is_ascii_digit() || ",.-#".contains(c))
        {
            return Some(PosTag::Num);
        }
        self.suffix_rules
            .iter()
            .find(|(suffix, _)| token.len() > suffix.len() + 1 && token.ends_with(suffix.as_str()))
            .map(|(_, tag)| *tag)
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, tokens: &[String]) -> Vec<Option<PosTag>> {
        tokens.iter().map(|t| self.tag_token(t)).collect()
    }
}

/// Document frequencies and TF/IDF bin boundaries computed on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub version: u32,
    pub num_documents: usize,
    pub document_frequency: BTreeMap<String, usize>,
    pub n_tf_bins: usize,
    pub n_idf_bins: usize,
    pub tf_bin_boundaries: Vec<f64>,
    pub idf_bin_boundaries: Vec<f64>,
}

/// `count(t, d) / len(d)`
pub fn term_frequency(count: usize, doc_len: usize) -> f64 {
    count as f64 / doc_len as f64
}

/// `1 + ln(N / (1 + df))`
pub fn inverse_document_frequency(num_documents: usize, df: usize) -> f64 {
    1.0 + (num_documents as f64 / (1.0 + df as f64)).ln()
}

/// Term counts of a token list, in term order.
fn term_counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    counts
}

/// Mergeable partial statistics over source texts.
///
/// Shards can be accumulated independently and combined with [`merge`];
/// quantiles are only taken in [`finish`], so the result does not depend on
/// how documents were sharded.
///
/// [`merge`]: StatsAccumulator::merge
/// [`finish`]: StatsAccumulator::finish
#[derive(Clone, Debug, Default)]
pub struct StatsAccumulator {
    num_documents: usize,
    document_frequency: BTreeMap<String, usize>,
    tf_values: Vec<f64>,
}

impl StatsAccumulator {
    pub fn add(&mut self, doc: &Document) {
        self.num_documents += 1;
        let len = doc.source_tokens.len();
        for (term, count) in term_counts(&doc.source_tokens) {
            *self.document_frequency.entry(term.to_string()).or_insert(0) += 1;
            self.tf_values.push(term_frequency(count, len));
        }
    }

    pub fn merge(mut self, other: StatsAccumulator) -> StatsAccumulator {
        self.num_documents += other.num_documents;
        for (term, df) in other.document_frequency {
            *self.document_frequency.entry(term).or_insert(0) += df;
        }
        self.tf_values.extend(other.tf_values);
        self
    }

    pub fn finish(self, n_tf_bins: usize, n_idf_bins: usize) -> Result<CorpusStats, CorpusError> {
        if self.num_documents == 0 {
            return Err(CorpusError::Config(
                "cannot compute corpus statistics on an empty training set".into(),
            ));
        }
        if n_tf_bins == 0 || n_idf_bins == 0 {
            return Err(CorpusError::Config("bin counts must be at least 1".into()));
        }
        let n = self.num_documents;
        // One IDF observation per (document, distinct term), same as TF.
        let mut idf_values = Vec::new();
        for &df in self.document_frequency.values() {
            let v = inverse_document_frequency(n, df);
            idf_values.extend(std::iter::repeat_n(v, df));
        }
        let mut tf_values = self.tf_values;
        Ok(CorpusStats {
            version: STATS_FORMAT_VERSION,
            num_documents: n,
            tf_bin_boundaries: quantile_boundaries(&mut tf_values, n_tf_bins),
            idf_bin_boundaries: quantile_boundaries(&mut idf_values, n_idf_bins),
            document_frequency: self.document_frequency,
            n_tf_bins,
            n_idf_bins,
        })
    }
}

/// Equal-frequency cut points: the values at ranks `k·len/n` for `k = 1..n`,
/// with repeats dropped so the result is strictly increasing.
fn quantile_boundaries(values: &mut [f64], n_bins: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut boundaries: Vec<f64> = Vec::with_capacity(n_bins.saturating_sub(1));
    if values.is_empty() {
        return boundaries;
    }
    for k in 1..n_bins {
        let v = values[k * values.len() / n_bins];
        if boundaries.last().is_none_or(|&last| v > last) && v > values[0] {
            boundaries.push(v);
        }
    }
    boundaries
}

/// Number of boundaries `<= value`; values outside the observed range clamp
/// into the first or last bin.
fn bin_of(boundaries: &[f64], value: f64) -> usize {
    boundaries.partition_point(|&b| b <= value)
}

pub fn compute_corpus_stats(
    train: &[Document],
    n_tf_bins: usize,
    n_idf_bins: usize,
) -> Result<CorpusStats, CorpusError> {
    let mut acc = StatsAccumulator::default();
    for doc in train {
        acc.add(doc);
    }
    acc.finish(n_tf_bins, n_idf_bins)
}

impl CorpusStats {
    pub fn df(&self, term: &str) -> usize {
        self.document_frequency.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        inverse_document_frequency(self.num_documents, self.df(term))
    }

    pub fn tf_bin(&self, tf: f64) -> usize {
        bin_of(&self.tf_bin_boundaries, tf)
    }

    pub fn idf_bin(&self, idf: f64) -> usize {
        bin_of(&self.idf_bin_boundaries, idf)
    }

    /// TF and IDF bin of every source token, in token order.
    pub fn bins_for(&self, tokens: &[String]) -> (Vec<usize>, Vec<usize>) {
        let counts = term_counts(tokens);
        tokens
            .iter()
            .map(|t| {
                let tf = term_frequency(counts[t.as_str()], tokens.len());
                (self.tf_bin(tf), self.idf_bin(self.idf(t)))
            })
            .unzip()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let stats: CorpusStats = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if stats.version != STATS_FORMAT_VERSION {
            return Err(CorpusError::Version(stats.version));
        }
        Ok(stats)
    }
}

/// Fills in POS tags (unless the record supplied them) and TF/IDF bins.
pub fn annotate_document(doc: &mut Document, stats: &CorpusStats, tagger: &dyn PosTagger) {
    if doc.pos_tags.len() != doc.source_tokens.len() {
        doc.pos_tags = annotate_pos(&doc.source_tokens, tagger);
    }
    let (tf, idf) = stats.bins_for(&doc.source_tokens);
    doc.tf_bins = tf;
    doc.idf_bins = idf;
}

pub fn write_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for doc in docs {
        serde_json::to_writer(&mut w, &CorpusRecord::from_document(doc))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a whole corpus file, failing on the first malformed record.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    ingest(path)?.collect()
}

/// Distinct source terms, sorted; handy for inspecting a shard.
pub fn source_terms(docs: &[Document]) -> BTreeSet<&str> {
    docs.iter()
        .flat_map(|d| d.source_tokens.iter().map(String::as_str))
        .collect()
}
