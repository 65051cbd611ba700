//! Sentence → word vectors: tokenizer, word2vec text loader, fallback
//! vectors for unknown words.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::derive_seed;
use crate::error::{Error, Result};

const STRIP: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')'];

/// Lowercased word with no whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(String);

impl Token {
    pub fn new(surface: &str) -> Result<Self> {
        if surface.is_empty() || surface.chars().any(char::is_whitespace) {
            return Err(Error::InvalidInput(format!("bad token {surface:?}")));
        }
        Ok(Token(surface.to_lowercase()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Whitespace split, strip surrounding punctuation, lowercase.
pub fn tokenize(text: &str) -> Result<Vec<Token>> {
    let tokens: Vec<Token> = text
        .split_whitespace()
        .map(|w| w.trim_matches(STRIP))
        .filter(|w| !w.is_empty())
        .map(|w| Token(w.to_lowercase()))
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyInput(format!("no words in {text:?}")));
    }
    Ok(tokens)
}

/// Pretrained word vectors plus the seed for out-of-vocabulary fallbacks.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f32>>,
    order: Vec<String>,
    fallback_seed: u64,
}

impl EmbeddingTable {
    pub fn empty(dim: usize, fallback_seed: u64) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
            order: Vec::new(),
            fallback_seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn fallback_seed(&self) -> u64 {
        self.fallback_seed
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn insert(&mut self, word: &str, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector for {word:?} has {} values, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if self.entries.insert(word.to_string(), vector).is_none() {
            self.order.push(word.to_string());
        }
        Ok(())
    }

    /// Words in file order.
    pub fn words(&self) -> &[String] {
        &self.order
    }

    /// Stored vector, or the deterministic unit-norm fallback.
    pub fn vector(&self, word: &str) -> Vec<f32> {
        match self.get(word) {
            Some(v) => v.to_vec(),
            None => fallback_vector(word, self.dim, self.fallback_seed),
        }
    }

    /// Word2vec text format; values printed with 9 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.order.len(), self.dim);
        for w in &self.order {
            out.push_str(w);
            for v in &self.entries[w] {
                let _ = write!(out, " {v:.8e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Unit vector drawn from a stream seeded by `(seed, word)`.
pub fn fallback_vector(word: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, word));
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return raw.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

/// Parse the word2vec text format: a `V D` header then `V` lines of
/// `word v1 … vD`.
pub fn parse_word2vec_text(text: &str, source: &str, fallback_seed: u64) -> Result<EmbeddingTable> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(source, 1, "missing `V D` header"))?;
    let mut fields = header.split_whitespace();
    let parse_count = |f: Option<&str>, what: &str| -> Result<usize> {
        f.and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(source, 1, format!("header needs integer {what}")))
    };
    let vocab = parse_count(fields.next(), "vocabulary size")?;
    let dim = parse_count(fields.next(), "dimension")?;
    if fields.next().is_some() {
        return Err(Error::format(source, 1, "header has extra fields"));
    }
    if dim == 0 {
        return Err(Error::format(source, 1, "dimension must be positive"));
    }
    let mut table = EmbeddingTable::empty(dim, fallback_seed);
    for (idx, line) in lines {
        let lineno = idx + 1;
        if table.len() == vocab {
            return Err(Error::format(
                source,
                lineno,
                format!("header declares {vocab} words but more rows follow"),
            ));
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("nonblank line has a field");
        let values = parts
            .map(|p| p.parse::<f32>())
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| Error::format(source, lineno, format!("bad number: {e}")))?;
        if values.len() != dim {
            return Err(Error::format(
                source,
                lineno,
                format!("{word:?} has {} values, expected {dim}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(source, lineno, "non-finite value"));
        }
        if table.get(word).is_some() {
            return Err(Error::format(source, lineno, format!("duplicate word {word:?}")));
        }
        table.insert(word, values)?;
    }
    if table.len() != vocab {
        return Err(Error::format(
            source,
            text.lines().count(),
            format!("header declares {vocab} words but file has {}", table.len()),
        ));
    }
    Ok(table)
}

pub fn load_word2vec_text(path: &Path, fallback_seed: u64) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word2vec_text(&text, &path.display().to_string(), fallback_seed)
}

/// Tokens with their vectors, aligned 1:1.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSentence {
    tokens: Vec<Token>,
    vectors: Vec<Vec<f32>>,
}

impl EmbeddedSentence {
    pub fn new(tokens: Vec<Token>, vectors: Vec<Vec<f32>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("sentence has no tokens".into()));
        }
        if tokens.len() != vectors.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} vectors",
                tokens.len(),
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| v.len() != vectors[0].len()) {
            return Err(Error::Shape("word vectors differ in length".into()));
        }
        Ok(Self { tokens, vectors })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }
}

pub fn embed(tokens: &[Token], table: &EmbeddingTable) -> Result<EmbeddedSentence> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("cannot embed an empty token list".into()));
    }
    let vectors = tokens.iter().map(|t| table.vector(t.as_str())).collect();
    EmbeddedSentence::new(tokens.to_vec(), vectors)
}

/// Tokenize and embed in one go.
pub fn embed_text(text: &str, table: &EmbeddingTable) -> Result<EmbeddedSentence> {
    embed(&tokenize(text)?, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(ts: &[Token]) -> Vec<&str> {
        ts.iter().map(Token::as_str).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(words(&tokenize("Hello, world!").unwrap()), ["hello", "world"]);
        assert_eq!(words(&tokenize("a").unwrap()), ["a"]);
        assert_eq!(words(&tokenize("He said: 'go now.'").unwrap()), ["he", "said", "go", "now"]);
        assert!(matches!(tokenize("  ... !! "), Err(Error::EmptyInput(_))));
    }

    fn rows(n: usize, dim: usize) -> String {
        let mut s = format!("{n} {dim}\n");
        for i in 0..n {
            s.push_str(&format!("w{i}"));
            for j in 0..dim {
                s.push_str(&format!(" {}", (i * dim + j) as f32 * 0.001));
            }
            s.push('\n');
        }
        s
    }

    #[test]
    fn loads_two_rows_of_200() {
        let t = parse_word2vec_text(&rows(2, 200), "mem", 0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim(), 200);
        assert_eq!(t.get("w1").unwrap()[0], 0.2);
    }

    #[test]
    fn loads_empty_vocabulary() {
        let t = parse_word2vec_text("0 200\n", "mem", 0).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.dim(), 200);
    }

    #[test]
    fn short_row_is_a_format_error_with_its_line() {
        let mut text = rows(2, 200);
        // Drop the last value of the second row (line 3).
        let cut = text.trim_end().rfind(' ').unwrap();
        text.truncate(cut);
        text.push('\n');
        match parse_word2vec_text(&text, "mem", 0) {
            Err(Error::Format { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("199"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn header_body_mismatch() {
        assert!(matches!(parse_word2vec_text(&rows(2, 3).replacen("2 3", "3 3", 1), "m", 0), Err(Error::Format { .. })));
        assert!(matches!(parse_word2vec_text(&rows(2, 3).replacen("2 3", "1 3", 1), "m", 0), Err(Error::Format { line: 3, .. })));
        assert!(matches!(parse_word2vec_text("x 3\n", "m", 0), Err(Error::Format { line: 1, .. })));
    }

    #[test]
    fn embed_lookup_and_fallback() {
        let mut t = EmbeddingTable::empty(4, 99);
        t.insert("known", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let toks = tokenize("known stranger stranger").unwrap();
        let e = embed(&toks, &t).unwrap();
        assert_eq!(e.vectors()[0], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.vectors()[1], e.vectors()[2]);
        let norm: f64 = e.vectors()[1].iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(matches!(embed(&[], &t), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn fallback_depends_on_seed_and_word() {
        assert_ne!(fallback_vector("a", 8, 1), fallback_vector("a", 8, 2));
        assert_ne!(fallback_vector("a", 8, 1), fallback_vector("b", 8, 1));
        assert_eq!(fallback_vector("a", 8, 1), fallback_vector("a", 8, 1));
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "[a-zA-Z.,!?;:'\"() ]{0,40}") {
            if let Ok(toks) = tokenize(&text) {
                let joined = toks.iter().map(Token::as_str).collect::<Vec<_>>().join(" ");
                prop_assert_eq!(tokenize(&joined).unwrap(), toks);
            }
        }

        #[test]
        fn save_load_roundtrip(vals in proptest::collection::vec(-1e3f32..1e3, 6)) {
            let mut t = EmbeddingTable::empty(3, 5);
            t.insert("alpha", vals[..3].to_vec()).unwrap();
            t.insert("beta", vals[3..].to_vec()).unwrap();
            let back = parse_word2vec_text(&t.to_text(), "mem", 5).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn oov_vectors_are_unit_norm(word in "[a-z]{1,12}", seed in 0u64..1000) {
            let v = fallback_vector(&word, 200, seed);
            let norm: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
