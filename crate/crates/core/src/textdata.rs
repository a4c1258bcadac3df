//! Text pipeline: vocabulary, corpora, and id encoding.
//!
//! Corpora are JSON Lines files with one `{"article": ..., "summary": ...}`
//! object per line, both fields pre-tokenized (whitespace-separated).
//! Four ids are reserved in every vocabulary: padding, start-of-sequence,
//! end-of-sequence, and unknown. Copy-capable models additionally give each
//! source-side out-of-vocabulary token a temporary id `|V| + k`, numbered
//! by first occurrence in the source; those ids are only meaningful within
//! their own example.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

const RESERVED: [&str; 4] = [PAD_TOKEN, SOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

/// One article/summary pair, tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub article: Vec<String>,
    pub summary: Vec<String>,
}

#[derive(Deserialize)]
struct RawRecord {
    article: String,
    #[serde(default)]
    summary: String,
}

fn split_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Read a JSON Lines corpus. Blank lines are skipped; anything else that
/// fails to parse is a format error naming the line. The `summary` field
/// may be absent or empty (decode-only inputs carry no reference).
pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path)
        .map_err(|e| Error::Io(format!("cannot open corpus {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        records.push(CorpusRecord {
            article: split_tokens(&raw.article),
            summary: split_tokens(&raw.summary),
        });
    }
    Ok(records)
}

/// Token table shared by source and target sides.
///
/// Ids 0..=3 are reserved; content tokens follow in descending corpus
/// count, ties broken lexicographically, so building is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Build from a corpus, counting article and summary tokens together.
    /// `cap` bounds the total size including the four reserved ids.
    pub fn build(records: &[CorpusRecord], cap: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
        }
        if cap < RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary cap {cap} cannot hold the {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for rec in records {
            for tok in rec.article.iter().chain(&rec.summary) {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap - RESERVED.len());

        let mut vocab = Self::reserved_only();
        for (tok, count) in ranked {
            vocab.push_token(tok.to_owned(), count);
        }
        Ok(vocab)
    }

    fn reserved_only() -> Self {
        let mut vocab = Vocabulary {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
            counts: Vec::new(),
        };
        for tok in RESERVED {
            vocab.push_token(tok.to_owned(), 0);
        }
        vocab
    }

    fn push_token(&mut self, token: String, count: u64) {
        self.token_to_id.insert(token.clone(), self.id_to_token.len());
        self.id_to_token.push(token);
        self.counts.push(count);
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Id for a token, falling back to the unknown id.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Index { what: "token id", index: id, bound: self.size() })
    }

    /// Write content tokens as `token<TAB>count`, highest count first.
    /// Reserved tokens are not written; loading injects them again.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for id in RESERVED.len()..self.size() {
            out.push_str(&self.id_to_token[id]);
            out.push('\t');
            out.push_str(&self.counts[id].to_string());
            out.push('\n');
        }
        let mut file = File::create(path)
            .map_err(|e| Error::Io(format!("cannot write vocabulary {}: {e}", path.display())))?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Io(format!("cannot open vocabulary {}: {e}", path.display())))?;
        let mut vocab = Self::reserved_only();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (token, count) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!(
                    "{} line {}: expected token<TAB>count",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let count: u64 = count.parse().map_err(|_| {
                Error::Format(format!(
                    "{} line {}: bad count {count:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            if vocab.token_to_id.contains_key(token) {
                return Err(Error::Format(format!(
                    "{} line {}: duplicate token {token:?}",
                    path.display(),
                    lineno + 1
                )));
            }
            vocab.push_token(token.to_owned(), count);
        }
        Ok(vocab)
    }
}

/// An article/summary pair encoded for training and decoding.
///
/// `source_ids`/`target_ids` map out-of-vocabulary tokens to [`UNK`];
/// the `_ext` variants keep per-example temporary ids for source OOVs so
/// a copy mechanism can address them. The target is wrapped in
/// [`SOS`]/[`EOS`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedExample {
    pub source_ids: Vec<usize>,
    pub source_ext_ids: Vec<usize>,
    pub oov_tokens: Vec<String>,
    pub target_ids: Vec<usize>,
    pub target_ext_ids: Vec<usize>,
}

impl ExtendedExample {
    pub fn oov_count(&self) -> usize {
        self.oov_tokens.len()
    }
}

/// Encode one pair, truncating the article to `src_max` tokens and the
/// summary to `tgt_max` tokens before wrapping the target. An empty
/// article is a contract error; an empty summary is legal (decode-only
/// inputs carry no reference).
pub fn encode_example(
    article: &[String],
    summary: &[String],
    vocab: &Vocabulary,
    src_max: usize,
    tgt_max: usize,
) -> Result<ExtendedExample> {
    if article.is_empty() {
        return Err(Error::Contract("cannot encode an empty article".into()));
    }
    let article = &article[..article.len().min(src_max)];
    let summary = &summary[..summary.len().min(tgt_max)];

    let mut source_ids = Vec::with_capacity(article.len());
    let mut source_ext_ids = Vec::with_capacity(article.len());
    let mut oov_tokens: Vec<String> = Vec::new();
    for tok in article {
        match vocab.id(tok) {
            Some(id) => {
                source_ids.push(id);
                source_ext_ids.push(id);
            }
            None => {
                let k = match oov_tokens.iter().position(|t| t == tok) {
                    Some(k) => k,
                    None => {
                        oov_tokens.push(tok.clone());
                        oov_tokens.len() - 1
                    }
                };
                source_ids.push(UNK);
                source_ext_ids.push(vocab.size() + k);
            }
        }
    }

    let mut target_ids = vec![SOS];
    let mut target_ext_ids = vec![SOS];
    for tok in summary {
        match vocab.id(tok) {
            Some(id) => {
                target_ids.push(id);
                target_ext_ids.push(id);
            }
            None => {
                target_ids.push(UNK);
                // A target OOV is addressable only if the source mentions it.
                match oov_tokens.iter().position(|t| t == tok) {
                    Some(k) => target_ext_ids.push(vocab.size() + k),
                    None => target_ext_ids.push(UNK),
                }
            }
        }
    }
    target_ids.push(EOS);
    target_ext_ids.push(EOS);

    Ok(ExtendedExample { source_ids, source_ext_ids, oov_tokens, target_ids, target_ext_ids })
}

/// Map extended ids back to tokens. Ids at or past the vocabulary size
/// index into `oov_tokens`. Decoding stops at [`EOS`]; [`PAD`] and [`SOS`]
/// are dropped.
pub fn decode_ids(ids: &[usize], vocab: &Vocabulary, oov_tokens: &[String]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for &id in ids {
        if id == EOS {
            break;
        }
        if id == PAD || id == SOS {
            continue;
        }
        if id < vocab.size() {
            out.push(vocab.token(id)?.to_owned());
        } else {
            let k = id - vocab.size();
            if k >= oov_tokens.len() {
                return Err(Error::Index {
                    what: "extended token id",
                    index: id,
                    bound: vocab.size() + oov_tokens.len(),
                });
            }
            out.push(oov_tokens[k].clone());
        }
    }
    Ok(out)
}

/// A group of examples padded to common source/target lengths.
///
/// Padding exists only in these matrices: model code always consults the
/// per-example lengths, so padded cells never influence attention or loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source_ids: Vec<Vec<usize>>,
    pub source_ext_ids: Vec<Vec<usize>>,
    pub source_lengths: Vec<usize>,
    pub target_ids: Vec<Vec<usize>>,
    pub target_ext_ids: Vec<Vec<usize>>,
    pub target_lengths: Vec<usize>,
    pub max_oov_count: usize,
    pub oov_tokens: Vec<Vec<String>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }
}

/// Pad a slice of examples into a batch. `capacity` is the configured
/// batch size; between 1 and `capacity` examples are accepted.
pub fn make_batch(examples: &[ExtendedExample], capacity: usize) -> Result<Batch> {
    if examples.is_empty() || examples.len() > capacity {
        return Err(Error::Contract(format!(
            "batch must hold between 1 and {capacity} examples, got {}",
            examples.len()
        )));
    }
    let src_len = examples.iter().map(|e| e.source_ids.len()).max().unwrap();
    let tgt_len = examples.iter().map(|e| e.target_ids.len()).max().unwrap();
    let pad_to = |ids: &[usize], len: usize| {
        let mut v = ids.to_vec();
        v.resize(len, PAD);
        v
    };
    Ok(Batch {
        source_ids: examples.iter().map(|e| pad_to(&e.source_ids, src_len)).collect(),
        source_ext_ids: examples.iter().map(|e| pad_to(&e.source_ext_ids, src_len)).collect(),
        source_lengths: examples.iter().map(|e| e.source_ids.len()).collect(),
        target_ids: examples.iter().map(|e| pad_to(&e.target_ids, tgt_len)).collect(),
        target_ext_ids: examples.iter().map(|e| pad_to(&e.target_ext_ids, tgt_len)).collect(),
        target_lengths: examples.iter().map(|e| e.target_ids.len()).collect(),
        max_oov_count: examples.iter().map(|e| e.oov_count()).max().unwrap(),
        oov_tokens: examples.iter().map(|e| e.oov_tokens.clone()).collect(),
    })
}

/// View one batch row as an unpadded example (shared plumbing for loss
/// and decoding code that walks batches).
pub fn batch_row(batch: &Batch, row: usize) -> ExtendedExample {
    let j = batch.source_lengths[row];
    let t = batch.target_lengths[row];
    ExtendedExample {
        source_ids: batch.source_ids[row][..j].to_vec(),
        source_ext_ids: batch.source_ext_ids[row][..j].to_vec(),
        oov_tokens: batch.oov_tokens[row].clone(),
        target_ids: batch.target_ids[row][..t].to_vec(),
        target_ext_ids: batch.target_ext_ids[row][..t].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        split_tokens(s)
    }

    fn tiny_vocab() -> Vocabulary {
        let records = vec![CorpusRecord {
            article: toks("the cat sat on the mat the cat"),
            summary: toks("cat on mat"),
        }];
        Vocabulary::build(&records, 50).unwrap()
    }

    #[test]
    fn reserved_ids_come_first() {
        let v = tiny_vocab();
        assert_eq!(v.id(PAD_TOKEN), Some(PAD));
        assert_eq!(v.id(SOS_TOKEN), Some(SOS));
        assert_eq!(v.id(EOS_TOKEN), Some(EOS));
        assert_eq!(v.id(UNK_TOKEN), Some(UNK));
    }

    #[test]
    fn tokens_rank_by_count_then_lexicographically() {
        let records = vec![CorpusRecord {
            article: toks("a a b"),
            summary: vec![],
        }];
        let v = Vocabulary::build(&records, 10).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        // "cat" ties are broken lexicographically:
        let tied = vec![CorpusRecord { article: toks("z y z y"), summary: vec![] }];
        let v = Vocabulary::build(&tied, 10).unwrap();
        assert_eq!(v.id("y"), Some(4));
        assert_eq!(v.id("z"), Some(5));
    }

    #[test]
    fn cap_includes_reserved_ids() {
        let records = vec![CorpusRecord {
            article: toks("a a a b b c"),
            summary: vec![],
        }];
        let v = Vocabulary::build(&records, 5).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), None);
        assert_eq!(v.id("c"), None);
    }

    #[test]
    fn empty_corpus_is_a_contract_error() {
        assert!(matches!(
            Vocabulary::build(&[], 100),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn build_is_deterministic() {
        let records = vec![
            CorpusRecord { article: toks("m n o p q r"), summary: toks("n o") },
            CorpusRecord { article: toks("p q r s"), summary: toks("s") },
        ];
        let a = Vocabulary::build(&records, 8).unwrap();
        let b = Vocabulary::build(&records, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = tiny_vocab();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        // Byte-stable on disk as well.
        let first = std::fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn oov_ids_number_by_first_occurrence() {
        let v = tiny_vocab();
        let ex = encode_example(
            &toks("cat zork blee zork"),
            &toks("zork sat"),
            &v,
            400,
            100,
        )
        .unwrap();
        let vs = v.size();
        assert_eq!(ex.oov_tokens, vec!["zork".to_string(), "blee".to_string()]);
        assert_eq!(ex.source_ext_ids, vec![v.id("cat").unwrap(), vs, vs + 1, vs]);
        assert_eq!(ex.source_ids[1], UNK);
        // Target copies the source OOV's temporary id.
        assert_eq!(ex.target_ext_ids[1], vs);
        assert_eq!(ex.target_ids[1], UNK);
        // Targets bracketed by SOS/EOS.
        assert_eq!(ex.target_ids.first(), Some(&SOS));
        assert_eq!(ex.target_ids.last(), Some(&EOS));
    }

    #[test]
    fn target_oov_absent_from_source_maps_to_unk() {
        let v = tiny_vocab();
        let ex = encode_example(&toks("cat sat"), &toks("flurb"), &v, 400, 100).unwrap();
        assert_eq!(ex.target_ext_ids[1], UNK);
    }

    #[test]
    fn truncation_applies_before_wrapping() {
        let v = tiny_vocab();
        let ex = encode_example(&toks("the cat sat on the mat"), &toks("cat on mat"), &v, 3, 2).unwrap();
        assert_eq!(ex.source_ids.len(), 3);
        assert_eq!(ex.target_ids.len(), 4); // SOS + 2 tokens + EOS
    }

    #[test]
    fn empty_article_is_rejected() {
        let v = tiny_vocab();
        assert!(matches!(
            encode_example(&[], &toks("x"), &v, 400, 100),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn decode_ids_maps_extended_range_and_stops_at_eos() {
        let v = tiny_vocab();
        let oov = vec!["zork".to_string()];
        let ids = vec![SOS, v.id("cat").unwrap(), v.size(), EOS, v.id("mat").unwrap()];
        let toks = decode_ids(&ids, &v, &oov).unwrap();
        assert_eq!(toks, vec!["cat".to_string(), "zork".to_string()]);
    }

    #[test]
    fn decode_ids_rejects_ids_past_the_extended_range() {
        let v = tiny_vocab();
        let err = decode_ids(&[v.size() + 5], &v, &["zork".to_string()]);
        assert!(matches!(err, Err(Error::Index { .. })));
    }

    #[test]
    fn encode_decode_round_trips_in_vocab_text() {
        let v = tiny_vocab();
        let text = toks("the cat sat on the mat");
        let ex = encode_example(&text, &text, &v, 400, 100).unwrap();
        let back = decode_ids(&ex.target_ext_ids, &v, &ex.oov_tokens).unwrap();
        assert_eq!(back, text);
    }

    #[test]
    fn batches_pad_and_track_lengths() {
        let v = tiny_vocab();
        let a = encode_example(&toks("cat sat zork"), &toks("cat"), &v, 400, 100).unwrap();
        let b = encode_example(&toks("mat"), &toks("mat on cat"), &v, 400, 100).unwrap();
        let batch = make_batch(&[a.clone(), b.clone()], 16).unwrap();
        assert_eq!(batch.source_ids[1], vec![v.id("mat").unwrap(), PAD, PAD]);
        assert_eq!(batch.source_lengths, vec![3, 1]);
        assert_eq!(batch.target_lengths, vec![3, 5]);
        assert_eq!(batch.max_oov_count, 1);
        // Rows reconstruct the original unpadded examples.
        assert_eq!(batch_row(&batch, 0), a);
        assert_eq!(batch_row(&batch, 1), b);
    }

    #[test]
    fn oversized_batches_are_rejected() {
        let v = tiny_vocab();
        let ex = encode_example(&toks("cat"), &toks("cat"), &v, 400, 100).unwrap();
        assert!(matches!(make_batch(&[], 4), Err(Error::Contract(_))));
        let five = vec![ex; 5];
        assert!(matches!(make_batch(&five, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn jsonl_reader_parses_and_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            "{\"article\": \"a b c\", \"summary\": \"a\"}\n\n{\"article\": \"d\", \"summary\": \"d\"}\n",
        )
        .unwrap();
        let records = read_jsonl(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].article, toks("a b c"));

        std::fs::write(&path, "not json\n").unwrap();
        match read_jsonl(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("line 1"), "got: {msg}"),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_reader_accepts_records_without_summaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("articles.jsonl");
        std::fs::write(&path, "{\"article\": \"a b c\"}\n").unwrap();
        let records = read_jsonl(&path).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].article, toks("a b c"));
        assert!(records[0].summary.is_empty());
    }
}
