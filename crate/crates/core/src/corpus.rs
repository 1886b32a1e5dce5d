//! Text ingestion: tokenization, vocabulary, privacy masking, CSV corpora and
//! the synthetic intent corpus.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

/// Lowercased word pieces split on whitespace and punctuation.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Vocabulary over the words of `texts` in first-appearance order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::from_tokens(Vec::new());
        for text in texts {
            for w in split_words(text) {
                if !vocab.index.contains_key(&w) {
                    vocab.index.insert(w.clone(), vocab.tokens.len() as u32);
                    vocab.tokens.push(w);
                }
            }
        }
        vocab
    }

    /// Rebuilds a vocabulary from its non-special tokens, in id order.
    pub fn from_tokens(words: Vec<String>) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { index, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token ids, surface forms and the per-token privacy mask of one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub surface: Vec<String>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sensitive(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn non_sensitive(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.mask[i]).collect()
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let mut surface = split_words(text);
    if surface.is_empty() {
        return Err(Error::EmptySequence);
    }
    surface.truncate(max_len.max(1));
    let ids = surface.iter().map(|w| vocab.id(w)).collect();
    let mask = vec![false; surface.len()];
    Ok(TokenSequence { ids, surface, mask })
}

/// Decides which surface tokens are sensitive.
pub trait PrivacyMasker {
    fn is_sensitive(&self, token: &str) -> bool;
}

/// Flags any token containing a decimal digit (account numbers, phone numbers, amounts).
#[derive(Debug, Clone, Copy, Default)]
pub struct DigitMasker;

impl PrivacyMasker for DigitMasker {
    fn is_sensitive(&self, token: &str) -> bool {
        token.chars().any(|c| c.is_ascii_digit())
    }
}

pub fn mask_privacy(mut seq: TokenSequence, masker: &impl PrivacyMasker) -> TokenSequence {
    seq.mask = seq.surface.iter().map(|w| masker.is_sensitive(w)).collect();
    seq
}

/// Tokenize and mask with the digit rule.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    Ok(mask_privacy(tokenize(text, vocab, max_len)?, &DigitMasker))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledCsv {
    pub examples: Vec<Example>,
    pub labels: Vec<String>,
}

fn read_rows(path: &Path) -> Result<Vec<(u64, String, String)>> {
    let csv_err = |line: u64, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => csv_err(1, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    if header.len() != 2 || &header[0] != "text" || &header[1] != "label" {
        return Err(csv_err(1, format!("expected header `text,label`, found {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(csv_err(line, format!("expected 2 fields, found {}", record.len())));
        }
        let label = record[1].trim().to_string();
        if label.is_empty() {
            return Err(csv_err(line, "empty label".into()));
        }
        rows.push((line, record[0].to_string(), label));
    }
    Ok(rows)
}

/// Reads a training CSV and assigns contiguous class indices. Integer labels
/// are used as-is (they must cover `0..C`); named labels are indexed in sorted
/// order.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledCsv> {
    let path = path.as_ref();
    let rows = read_rows(path)?;
    let distinct: BTreeSet<&str> = rows.iter().map(|(_, _, l)| l.as_str()).collect();
    let numeric: Option<Vec<usize>> = distinct.iter().map(|l| l.parse().ok()).collect();
    let labels: Vec<String> = match numeric {
        Some(mut nums) => {
            nums.sort_unstable();
            if nums.iter().enumerate().any(|(i, &n)| i != n) {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: format!("integer labels must be contiguous from 0, found {nums:?}"),
                });
            }
            nums.iter().map(usize::to_string).collect()
        }
        None => distinct.iter().map(|s| s.to_string()).collect(),
    };
    let examples = attach_labels(path, rows, &labels)?;
    Ok(LabeledCsv { examples, labels })
}

/// Reads an evaluation CSV against the label set of a training split.
pub fn load_csv_with_labels(path: impl AsRef<Path>, labels: &[String]) -> Result<Vec<Example>> {
    let path = path.as_ref();
    attach_labels(path, read_rows(path)?, labels)
}

fn attach_labels(path: &Path, rows: Vec<(u64, String, String)>, labels: &[String]) -> Result<Vec<Example>> {
    let lookup: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    rows.into_iter()
        .map(|(_, text, label)| match lookup.get(label.as_str()) {
            Some(&idx) => Ok(Example { text, label: idx }),
            None => Err(Error::UnseenLabel {
                path: path.to_path_buf(),
                label,
            }),
        })
        .collect()
}

pub fn write_csv(path: impl AsRef<Path>, examples: &[Example], labels: &[String]) -> Result<()> {
    let path = path.as_ref();
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Csv {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{other:?}"),
        },
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["text", "label"]).map_err(to_err)?;
    for ex in examples {
        w.write_record([ex.text.as_str(), labels[ex.label].as_str()]).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n: usize,
    pub num_classes: usize,
    pub sensitive_rate: f64,
    pub keywords_per_class: usize,
    pub filler_words: usize,
    pub decoy_rate: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n: 2000,
            num_classes: 4,
            sensitive_rate: 0.5,
            keywords_per_class: 12,
            filler_words: 60,
            decoy_rate: 0.25,
        }
    }
}

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ren", "tu", "sa", "vel", "dor", "pin", "fa", "ru", "zen"];

fn synth_word(mut i: usize) -> String {
    let mut word = String::new();
    for _ in 0..3 {
        word.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
    }
    while i > 0 {
        word.push_str(SYLLABLES[i % SYLLABLES.len()]);
        i /= SYLLABLES.len();
    }
    word
}

fn synth_number(rng: &mut RngStream) -> String {
    let digits = 4 + rng.below(3);
    let mut s: String = (0..digits).map(|_| char::from(b'0' + rng.below(10) as u8)).collect();
    if rng.bernoulli(0.2) {
        s.push('x');
    }
    s
}

/// Balanced synthetic intent queries. Each query carries two or three keywords
/// of its own class, sometimes one decoy keyword from another class, shared
/// filler words, and (at `sensitive_rate`) one or two digit tokens. The class
/// is the majority keyword class, so a keyword-counting classifier is exact.
pub fn synth_generate(rng: &mut RngStream, params: &SynthParams) -> Result<Vec<Example>> {
    if params.num_classes < 2 {
        return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
    }
    if !(0.0..=1.0).contains(&params.sensitive_rate) {
        return Err(Error::Config(format!(
            "sensitive_rate must lie in [0, 1], got {}",
            params.sensitive_rate
        )));
    }
    let kw = params.keywords_per_class.max(1);
    let keyword = |class: usize, k: usize| synth_word(class * kw + k);
    let filler_base = params.num_classes * kw;
    let filler = |k: usize| synth_word(filler_base + k);

    let mut out = Vec::with_capacity(params.n);
    for i in 0..params.n {
        let label = i % params.num_classes;
        let mut words = Vec::new();
        let n_true = 2 + rng.below(2);
        for _ in 0..n_true {
            words.push(keyword(label, rng.below(kw)));
        }
        if rng.bernoulli(params.decoy_rate) {
            let other = (label + 1 + rng.below(params.num_classes - 1)) % params.num_classes;
            words.push(keyword(other, rng.below(kw)));
        }
        let n_fill = 4 + rng.below(7);
        for _ in 0..n_fill {
            words.push(filler(rng.below(params.filler_words.max(1))));
        }
        if params.sensitive_rate > 0.0 && rng.uniform_open() < params.sensitive_rate {
            for _ in 0..1 + rng.below(2) {
                words.push(synth_number(rng));
            }
        }
        words.shuffle(rng);
        out.push(Example {
            text: words.join(" "),
            label,
        });
    }
    out.shuffle(rng);
    Ok(out)
}

/// Keyword set of each synthetic class, for oracle checks.
pub fn synth_keywords(params: &SynthParams) -> Vec<Vec<String>> {
    let kw = params.keywords_per_class.max(1);
    (0..params.num_classes)
        .map(|c| (0..kw).map(|k| synth_word(c * kw + k)).collect())
        .collect()
}

/// Train/test split with a vocabulary over the training texts.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub labels: Vec<String>,
    pub vocab: Vocabulary,
    pub max_len: usize,
}

impl Corpus {
    pub fn new(train: Vec<Example>, test: Vec<Example>, labels: Vec<String>, max_len: usize) -> Self {
        let vocab = Vocabulary::build(train.iter().map(|e| e.text.as_str()));
        Self {
            train,
            test,
            labels,
            vocab,
            max_len,
        }
    }

    pub fn from_csv(train: impl AsRef<Path>, test: impl AsRef<Path>, max_len: usize) -> Result<Self> {
        let tr = load_csv(train)?;
        let te = load_csv_with_labels(test, &tr.labels)?;
        Ok(Self::new(tr.examples, te, tr.labels, max_len))
    }

    /// Synthetic corpus; the last `test_fraction` of the shuffled examples is held out.
    pub fn synthetic(rng: &mut RngStream, params: &SynthParams, test_fraction: f64, max_len: usize) -> Result<Self> {
        let mut all = synth_generate(rng, params)?;
        let n_test = ((all.len() as f64) * test_fraction).round() as usize;
        let test = all.split_off(all.len() - n_test.min(all.len()));
        let labels = (0..params.num_classes).map(|c| c.to_string()).collect();
        Ok(Self::new(all, test, labels, max_len))
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        encode(text, &self.vocab, self.max_len)
    }

    pub fn encode_all(&self, examples: &[Example]) -> Result<Vec<(TokenSequence, usize)>> {
        examples
            .iter()
            .map(|e| Ok((self.encode(&e.text)?, e.label)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["transfer to my card hello"])
    }

    #[test]
    fn tokenize_splits_and_normalizes() {
        let v = vocab();
        let s = tokenize("transfer to 12345", &v, 32).unwrap();
        assert_eq!(s.surface, ["transfer", "to", "12345"]);
        assert_eq!(s.ids[..2], [v.id("transfer"), v.id("to")]);
        assert_eq!(s.ids[2], UNK);
        let s = tokenize("Hello, hello!", &v, 32).unwrap();
        assert_eq!(s.ids.len(), 2);
        assert_eq!(s.ids[0], s.ids[1]);
        assert_ne!(s.ids[0], UNK);
    }

    #[test]
    fn tokenize_truncates_and_rejects_empty() {
        let v = vocab();
        let text = vec!["card"; 100].join(" ");
        assert_eq!(tokenize(&text, &v, 32).unwrap().len(), 32);
        assert!(matches!(tokenize("  ,, !", &v, 32), Err(Error::EmptySequence)));
    }

    #[test]
    fn digit_rule() {
        let v = vocab();
        assert_eq!(encode("transfer to 12345", &v, 32).unwrap().mask, [false, false, true]);
        assert_eq!(
            encode("my card ending 4417x", &v, 32).unwrap().mask,
            [false, false, false, true]
        );
        assert!(encode("hello my card", &v, 32).unwrap().mask.iter().all(|m| !m));
    }

    #[test]
    fn special_ids_fixed() {
        let v = Vocabulary::build(["a b"]);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.id("a"), 2);
        assert_eq!(Vocabulary::from_tokens(v.words().to_vec()), v);
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn toy_csv() {
        let f = write_tmp("text,label\n\"hi, there\",0\nbye,1\n");
        let d = load_csv(f.path()).unwrap();
        assert_eq!(d.examples.len(), 2);
        assert_eq!(d.examples[0].text, "hi, there");
        assert_eq!(d.labels, ["0", "1"]);
    }

    #[test]
    fn named_labels_sorted() {
        let f = write_tmp("text,label\na,top_up\nb,card_arrival\nc,top_up\n");
        let d = load_csv(f.path()).unwrap();
        assert_eq!(d.labels, ["card_arrival", "top_up"]);
        assert_eq!(d.examples[0].label, 1);
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write_tmp("text,label\nfine,0\nbroken\n");
        match load_csv(f.path()) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unseen_test_label() {
        let f = write_tmp("text,label\nx,7\n");
        let labels = vec!["0".to_string(), "1".to_string()];
        assert!(matches!(
            load_csv_with_labels(f.path(), &labels),
            Err(Error::UnseenLabel { .. })
        ));
    }

    #[test]
    fn synthetic_balanced_and_rate_bounds() {
        let p = SynthParams {
            n: 1000,
            num_classes: 4,
            sensitive_rate: 0.0,
            ..Default::default()
        };
        let ex = synth_generate(&mut RngStream::new(1, "corpus"), &p).unwrap();
        assert_eq!(ex.len(), 1000);
        for c in 0..4 {
            assert!(ex.iter().filter(|e| e.label == c).count() >= 200);
        }
        assert!(ex.iter().all(|e| !e.text.chars().any(|c| c.is_ascii_digit())));

        let p = SynthParams {
            sensitive_rate: 1.0,
            ..p
        };
        let ex = synth_generate(&mut RngStream::new(1, "corpus"), &p).unwrap();
        assert!(ex
            .iter()
            .all(|e| split_words(&e.text).iter().any(|w| DigitMasker.is_sensitive(w))));
    }

    #[test]
    fn synthetic_majority_keyword_oracle_is_exact() {
        let p = SynthParams::default();
        let kws = synth_keywords(&p);
        let ex = synth_generate(&mut RngStream::new(3, "corpus"), &p).unwrap();
        for e in &ex {
            let words = split_words(&e.text);
            let counts: Vec<usize> = kws
                .iter()
                .map(|k| words.iter().filter(|w| k.contains(w)).count())
                .collect();
            let best = (0..counts.len()).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
            assert_eq!(best, e.label);
        }
    }
}
