//! Corpus ingestion, tokenization and the shared vocabulary.
//!
//! Text is split into lowercase word tokens. Runs of alphanumeric characters
//! form words; everything else separates them. Inside a word, camelCase and
//! acronym boundaries (`getHTTPResponse` → `get http response`) start a new
//! token, and underscores separate snake_case parts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const MASK: TokenId = 2;
pub const SPAN_START: TokenId = 3;
pub const SPAN_END: TokenId = 4;
pub const NUM_RESERVED: usize = 5;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MASK_TOKEN: &str = "[MASK]";
pub const SPAN_START_TOKEN: &str = "<span>";
pub const SPAN_END_TOKEN: &str = "</span>";

const RESERVED_TOKENS: [&str; NUM_RESERVED] = [PAD_TOKEN, UNK_TOKEN, MASK_TOKEN, SPAN_START_TOKEN, SPAN_END_TOKEN];

pub const DEFAULT_MAX_VOCAB: usize = 20_000;
pub const DEFAULT_MIN_FREQ: usize = 2;

/// An ordered sequence of surface tokens.
///
/// The sequence may contain the [`MASK_TOKEN`] sentinel; raw text never
/// tokenizes to it because brackets are separators.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Self {
        Self(tokens)
    }

    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        Self(words.iter().map(|w| w.as_ref().to_owned()).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.0.iter().filter(|t| t.as_str() == MASK_TOKEN).count()
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.0.join(" ")
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Splits `text` into lowercase word tokens.
pub fn tokenize(text: &str) -> Result<TokenSequence> {
    let tokens = word_tokens(text);
    if tokens.is_empty() {
        return Err(Error::EmptyQuery);
    }
    Ok(TokenSequence(tokens))
}

/// Like [`tokenize`] but returns an empty vector instead of an error; used
/// for document text where empty fields are legal.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut run: Vec<char> = Vec::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            run.push(c);
        } else if !run.is_empty() {
            split_identifier(&run, &mut out);
            run.clear();
        }
    }
    if !run.is_empty() {
        split_identifier(&run, &mut out);
    }
    out
}

fn split_identifier(run: &[char], out: &mut Vec<String>) {
    let mut start = 0;
    for i in 1..run.len() {
        let prev = run[i - 1];
        let cur = run[i];
        let lower_to_upper = (prev.is_lowercase() || prev.is_numeric()) && cur.is_uppercase();
        let acronym_end =
            prev.is_uppercase() && cur.is_uppercase() && run.get(i + 1).is_some_and(|next| next.is_lowercase());
        if lower_to_upper || acronym_end {
            out.push(lowercase(&run[start..i]));
            start = i;
        }
    }
    out.push(lowercase(&run[start..]));
}

fn lowercase(chars: &[char]) -> String {
    chars.iter().flat_map(|c| c.to_lowercase()).collect()
}

/// Token ↔ id mapping with five reserved sentinel ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    token_of: Vec<String>,
    id_of: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;

    fn try_from(file: VocabularyFile) -> Result<Self> {
        if file.tokens.len() <= NUM_RESERVED || file.tokens[..NUM_RESERVED] != RESERVED_TOKENS.map(String::from) {
            return Err(Error::Config(
                "vocabulary must start with the five reserved tokens and hold at least one content token".into(),
            ));
        }
        let mut id_of = HashMap::with_capacity(file.tokens.len());
        for (id, tok) in file.tokens.iter().enumerate() {
            if id_of.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{tok}`")));
            }
        }
        Ok(Self {
            token_of: file.tokens,
            id_of,
        })
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self { tokens: v.token_of }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from content tokens, in id order after the
    /// reserved block.
    pub fn from_content_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::try_from(VocabularyFile { tokens: all })
    }

    pub fn size(&self) -> usize {
        self.token_of.len()
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token_of(&self, id: TokenId) -> Option<&str> {
        self.token_of.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < NUM_RESERVED
    }

    /// Content tokens in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.token_of[NUM_RESERVED..]
    }

    /// Maps each token to its id; unknown tokens become [`UNK`]. The
    /// [`MASK_TOKEN`] surface form maps to [`MASK`].
    pub fn encode(&self, seq: &TokenSequence) -> Vec<TokenId> {
        seq.tokens().iter().map(|t| self.id_of(t).unwrap_or(UNK)).collect()
    }

    /// Maps ids back to token strings, dropping [`PAD`]. Ids outside the
    /// vocabulary decode to [`UNK_TOKEN`].
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.token_of(id).unwrap_or(UNK_TOKEN).to_owned())
            .collect()
    }

    /// SHA-256 over the token list; checkpoints record it to detect a
    /// vocabulary swap.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.token_of {
            hasher.update((tok.len() as u64).to_le_bytes());
            hasher.update(tok.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Builds a vocabulary from the query corpus: reserved tokens first, then
/// content tokens with frequency ≥ `min_freq`, most frequent first, ties
/// broken lexicographically, truncated to `max_size` entries in total.
pub fn build_vocabulary(corpus: &QueryCorpus, max_size: usize, min_freq: usize) -> Result<Vocabulary> {
    if max_size <= NUM_RESERVED {
        return Err(Error::Config(format!(
            "max vocabulary size must exceed {NUM_RESERVED}, got {max_size}"
        )));
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for q in corpus.queries() {
        for t in q.tokens() {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|&(t, c)| c >= min_freq.max(1) && !RESERVED_TOKENS.contains(&t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - NUM_RESERVED);
    if ranked.is_empty() {
        return Err(Error::Config(format!(
            "no token reaches min_freq={min_freq}; vocabulary would have no content tokens"
        )));
    }
    Vocabulary::from_content_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// Non-empty collection of tokenized queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryCorpus {
    queries: Vec<TokenSequence>,
}

impl QueryCorpus {
    pub fn new(queries: Vec<TokenSequence>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Config("query corpus is empty".into()));
        }
        if queries.iter().any(TokenSequence::is_empty) {
            return Err(Error::EmptyQuery);
        }
        Ok(Self { queries })
    }

    /// Tokenizes each raw query string.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        let queries = texts.iter().map(|t| tokenize(t.as_ref())).collect::<Result<Vec<_>>>()?;
        Self::new(queries)
    }

    pub fn queries(&self) -> &[TokenSequence] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Reads a line-delimited JSON file of `{"query": ...}` records. Blank
    /// lines are skipped; a query that normalizes to nothing is an error.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Record {
            query: String,
        }
        let mut queries = Vec::new();
        for_each_record(path, |line, rec: Record| {
            let seq = tokenize(&rec.query).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line,
                message: e.to_string(),
            })?;
            queries.push(seq);
            Ok(())
        })?;
        Self::new(queries)
    }
}

/// One searchable record: natural-language description plus code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default)]
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchCorpus {
    documents: Vec<Document>,
}

impl SearchCorpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(documents.len());
        for d in &documents {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(Error::DuplicateDocument(d.doc_id.clone()));
            }
            if d.text.trim().is_empty() {
                return Err(Error::CorruptFixture(format!("document `{}` has empty text", d.doc_id)));
            }
        }
        Ok(Self { documents })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Reads `{"doc_id", "text", "code"}` records, one per line.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let mut docs = Vec::new();
        for_each_record(path, |_, d: Document| {
            docs.push(d);
            Ok(())
        })?;
        Self::new(docs)
    }
}

/// Calls `f` with every parsed JSON line of `path` (1-based line numbers).
pub(crate) fn for_each_record<T, F>(path: &Path, mut f: F) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(usize, T) -> Result<()>,
{
    let reader = BufReader::new(File::open(path)?);
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        f(idx + 1, rec)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(seq: &TokenSequence) -> Vec<&str> {
        seq.tokens().iter().map(String::as_str).collect()
    }

    #[test]
    fn tokenize_lowercases_and_splits_on_whitespace() {
        let t = tokenize("Convert string to list").unwrap();
        assert_eq!(words(&t), ["convert", "string", "to", "list"]);
    }

    #[test]
    fn tokenize_splits_identifiers() {
        assert_eq!(
            words(&tokenize("getHttpResponse").unwrap()),
            ["get", "http", "response"]
        );
        assert_eq!(
            words(&tokenize("getHTTPResponse").unwrap()),
            ["get", "http", "response"]
        );
        assert_eq!(words(&tokenize("parse_json_file").unwrap()), ["parse", "json", "file"]);
        assert_eq!(words(&tokenize("utf8String").unwrap()), ["utf8", "string"]);
    }

    #[test]
    fn tokenize_drops_punctuation() {
        let t = tokenize("how do I sort a list? (python, 3.x)").unwrap();
        assert_eq!(words(&t), ["how", "do", "i", "sort", "a", "list", "python", "3", "x"]);
        assert_eq!(words(&tokenize("[MASK]").unwrap()), ["mask"]);
    }

    #[test]
    fn tokenize_rejects_blank_text() {
        assert!(matches!(tokenize("   "), Err(Error::EmptyQuery)));
        assert!(matches!(tokenize("?!-"), Err(Error::EmptyQuery)));
    }

    #[test]
    fn vocabulary_from_tiny_corpus() {
        let corpus = QueryCorpus::new(vec![TokenSequence::from_words(&["a", "b", "a"])]).unwrap();
        let v = build_vocabulary(&corpus, 100, 1).unwrap();
        assert_eq!(v.size(), 7);
        assert_eq!(v.content_tokens(), ["a", "b"]);

        let v = build_vocabulary(&corpus, 100, 2).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.content_tokens(), ["a"]);
    }

    #[test]
    fn vocabulary_truncates_by_frequency_then_lexicographic() {
        let corpus = QueryCorpus::from_texts(&["c b a", "c b", "d c e"]).unwrap();
        let v = build_vocabulary(&corpus, 8, 1).unwrap();
        assert_eq!(v.content_tokens(), ["c", "b", "a"]);
    }

    #[test]
    fn vocabulary_rejects_tiny_max_size() {
        let corpus = QueryCorpus::from_texts(&["a"]).unwrap();
        assert!(build_vocabulary(&corpus, 5, 1).is_err());
    }

    #[test]
    fn reserved_ids_are_distinct_and_fixed() {
        let v = Vocabulary::from_content_tokens(["x"]).unwrap();
        let ids: HashSet<_> = RESERVED_TOKENS.iter().map(|t| v.id_of(t).unwrap()).collect();
        assert_eq!(ids.len(), NUM_RESERVED);
        assert_eq!(v.id_of(MASK_TOKEN), Some(MASK));
        assert_eq!(v.id_of(SPAN_END_TOKEN), Some(SPAN_END));
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let v = Vocabulary::from_content_tokens(["sort", "list"]).unwrap();
        let ids = v.encode(&TokenSequence::from_words(&["sort", "zzzq"]));
        assert_eq!(ids, vec![v.id_of("sort").unwrap(), UNK]);
    }

    #[test]
    fn vocabulary_serde_round_trip_and_hash() {
        let v = Vocabulary::from_content_tokens(["sort", "list"]).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        let other = Vocabulary::from_content_tokens(["list", "sort"]).unwrap();
        assert_ne!(other.hash(), v.hash());
        assert!(serde_json::from_str::<Vocabulary>(r#"{"tokens":["a","b"]}"#).is_err());
    }

    #[test]
    fn search_corpus_rejects_duplicate_ids() {
        let doc = |id: &str| Document {
            doc_id: id.into(),
            text: "t".into(),
            code: String::new(),
        };
        assert!(matches!(
            SearchCorpus::new(vec![doc("a"), doc("a")]),
            Err(Error::DuplicateDocument(id)) if id == "a"
        ));
    }

    #[test]
    fn jsonl_loaders() {
        let dir = tempfile::tempdir().unwrap();
        let qpath = dir.path().join("q.jsonl");
        std::fs::write(&qpath, "{\"query\":\"sortList fast\"}\n\n{\"query\":\"b\"}\n").unwrap();
        let qc = QueryCorpus::load_jsonl(&qpath).unwrap();
        assert_eq!(qc.len(), 2);
        assert_eq!(words(&qc.queries()[0]), ["sort", "list", "fast"]);

        std::fs::write(&qpath, "{\"query\":\"ok\"}\n{\"query\":\"  \"}\n").unwrap();
        let err = QueryCorpus::load_jsonl(&qpath).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let dpath = dir.path().join("d.jsonl");
        std::fs::write(&dpath, "{\"doc_id\":\"1\",\"text\":\"t\",\"code\":\"c\"}\n").unwrap();
        assert_eq!(SearchCorpus::load_jsonl(&dpath).unwrap().len(), 1);
    }

    fn arb_text() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[a-zA-Z0-9_ .,()\\[\\]-]{0,40}").unwrap()
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in arb_text()) {
            if let Ok(seq) = tokenize(&text) {
                prop_assert!(seq.tokens().iter().all(|t| !t.is_empty()));
                let again = tokenize(&seq.text()).unwrap();
                prop_assert_eq!(again, seq);
            }
        }

        #[test]
        fn decode_inverts_encode_in_vocabulary(idx in proptest::collection::vec(0usize..4, 1..10)) {
            let content = ["alpha", "beta", "gamma", "delta"];
            let v = Vocabulary::from_content_tokens(content).unwrap();
            let seq = TokenSequence::from_words(&idx.iter().map(|&i| content[i]).collect::<Vec<_>>());
            prop_assert_eq!(v.decode(&v.encode(&seq)), seq.into_tokens());
        }

        #[test]
        fn decode_never_emits_pad(ids in proptest::collection::vec(0u32..12, 0..20)) {
            let v = Vocabulary::from_content_tokens(["a", "b", "c"]).unwrap();
            let out = v.decode(&ids);
            prop_assert!(out.iter().all(|t| t != PAD_TOKEN));
            prop_assert_eq!(out.len(), ids.iter().filter(|&&i| i != PAD).count());
        }

        #[test]
        fn vocabulary_is_bounded_and_order_insensitive(
            raw in proptest::collection::vec(proptest::collection::vec(0u8..40, 1..8), 1..60),
            max_size in 6usize..30,
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let texts: Vec<String> = raw
                .iter()
                .map(|q| q.iter().map(|b| format!("w{b}")).collect::<Vec<_>>().join(" "))
                .collect();
            let corpus = QueryCorpus::from_texts(&texts).unwrap();
            let v = build_vocabulary(&corpus, max_size, 1).unwrap();
            prop_assert!(v.size() <= max_size);

            let mut shuffled = texts.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let v2 = build_vocabulary(&QueryCorpus::from_texts(&shuffled).unwrap(), max_size, 1).unwrap();
            prop_assert_eq!(v2, v);
        }
    }
}
