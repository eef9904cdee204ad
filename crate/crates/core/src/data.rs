//! Vocabulary, TSV ingestion, synthetic classification tasks and batching.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    fn from_tokens(extra: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(extra)
            .collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { ids, tokens }
    }

    /// Vocabulary of `size` ids whose non-reserved tokens are spelled `t<id>`.
    pub fn synthetic(size: usize) -> Self {
        Self::from_tokens((RESERVED.len()..size).map(|i| format!("t{i}")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[cls] tokens… [pad]…`, exactly `max_len` ids.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = std::iter::once(CLS_ID)
            .chain(text.split_whitespace().map(|t| self.id(t)))
            .take(max_len)
            .collect();
        ids.resize(max_len, PAD_ID);
        ids
    }

    /// Inverse of [`encode`](Self::encode), dropping `cls` and padding.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD_ID && i != CLS_ID)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK_ID]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Whitespace vocabulary, most frequent first, ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(lines: &[S]) -> Result<Vocab> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in lines {
        for tok in line.as_ref().split_whitespace() {
            if !RESERVED.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(Vocab::from_tokens(entries.into_iter().map(|(t, _)| t.to_string())))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub ids: Vec<usize>,
    pub label: usize,
}

/// A TSV row before encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TsvRow {
    pub line: usize,
    pub text: String,
    pub label: usize,
}

/// Parses `text<TAB>label` rows; blank lines are skipped.
pub fn parse_tsv(content: &str, num_classes: usize) -> Result<Vec<TsvRow>> {
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((text, label)) = line.rsplit_once('\t') else {
            return Err(Error::Data(format!("line {line_no}: expected text<TAB>label")));
        };
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Data(format!("line {line_no}: label {:?} is not a class index", label.trim()))
        })?;
        if label >= num_classes {
            return Err(Error::Data(format!(
                "line {line_no}: unknown label {label} (task has {num_classes} classes)"
            )));
        }
        rows.push(TsvRow {
            line: line_no,
            text: text.to_string(),
            label,
        });
    }
    Ok(rows)
}

pub fn read_tsv(path: &Path, num_classes: usize) -> Result<Vec<TsvRow>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&content, num_classes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn encode_rows(rows: &[TsvRow], vocab: &Vocab, max_len: usize) -> Vec<LabeledExample> {
    rows.iter()
        .map(|r| LabeledExample {
            ids: vocab.encode(&r.text, max_len),
            label: r.label,
        })
        .collect()
}

pub fn load_tsv(
    path: &Path,
    vocab: &Vocab,
    max_len: usize,
    num_classes: usize,
) -> Result<Vec<LabeledExample>> {
    Ok(encode_rows(&read_tsv(path, num_classes)?, vocab, max_len))
}

pub fn to_tsv(examples: &[LabeledExample], vocab: &Vocab) -> String {
    let mut out = String::new();
    for ex in examples {
        let _ = writeln!(out, "{}\t{}", vocab.decode(&ex.ids), ex.label);
    }
    out
}

pub fn dataset_checksum(examples: &[LabeledExample]) -> String {
    let mut h = Sha256::new();
    for ex in examples {
        h.update((ex.ids.len() as u64).to_le_bytes());
        for &id in &ex.ids {
            h.update((id as u64).to_le_bytes());
        }
        h.update((ex.label as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Label is the token bucket (`(id − 3) mod C`) occurring most often.
    Majority,
    /// Label is the count of the marked token modulo `C`.
    Parity,
    /// Label is the bit pattern of which planted bigrams occur.
    Keyphrase,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "majority" => Some(Self::Majority),
            "parity" => Some(Self::Parity),
            "keyphrase" => Some(Self::Keyphrase),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

const FIRST_TOKEN: usize = RESERVED.len();
/// The token counted by the parity task.
pub const PARITY_MARK: usize = FIRST_TOKEN;

pub fn majority_bucket(token: usize, num_classes: usize) -> usize {
    (token - FIRST_TOKEN) % num_classes
}

/// Bigram `i` of the keyphrase task.
pub fn keyphrase(i: usize) -> (usize, usize) {
    (FIRST_TOKEN + 2 * i, FIRST_TOKEN + 2 * i + 1)
}

pub fn keyphrase_count(num_classes: usize) -> usize {
    (usize::BITS - (num_classes - 1).leading_zeros()).max(1) as usize
}

/// Generates a seeded, class-balanced task of `n` sequences of `seq_len`
/// ids (the leading `cls` included) and splits it 80/20.
///
/// Labels are assigned round-robin and each sequence is sampled to match,
/// so every class appears `n / C` or `n / C + 1` times.
pub fn synthetic_task(
    kind: TaskKind,
    n: usize,
    vocab_size: usize,
    seq_len: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Split> {
    if n < 2 || seq_len < 2 || num_classes < 2 {
        return Err(Error::Config(
            "synthetic task needs n >= 2, seq_len >= 2 and at least 2 classes".into(),
        ));
    }
    let content = seq_len - 1;
    let n_tokens = vocab_size.saturating_sub(FIRST_TOKEN);
    match kind {
        TaskKind::Majority if n_tokens < num_classes => {
            return Err(Error::Config("majority task needs vocab_size >= 3 + classes".into()))
        }
        TaskKind::Parity if n_tokens < 2 || content < num_classes - 1 => {
            return Err(Error::Config("parity task needs a longer sequence or vocabulary".into()))
        }
        TaskKind::Keyphrase
            if n_tokens < 2 * keyphrase_count(num_classes) + 1
                || content < 2 * keyphrase_count(num_classes) =>
        {
            return Err(Error::Config("keyphrase task needs a longer sequence or vocabulary".into()))
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples: Vec<LabeledExample> = (0..n)
        .map(|i| {
            let label = i % num_classes;
            let body = match kind {
                TaskKind::Majority => majority_seq(&mut rng, label, content, vocab_size, num_classes),
                TaskKind::Parity => parity_seq(&mut rng, label, content, vocab_size, num_classes),
                TaskKind::Keyphrase => keyphrase_seq(&mut rng, label, content, vocab_size, num_classes),
            };
            let mut ids = Vec::with_capacity(seq_len);
            ids.push(CLS_ID);
            ids.extend(body);
            LabeledExample { ids, label }
        })
        .collect();
    examples.shuffle(&mut rng);
    let n_train = n * 4 / 5;
    let test = examples.split_off(n_train);
    Ok(Split {
        train: examples,
        test,
    })
}

fn majority_seq(rng: &mut ChaCha8Rng, label: usize, len: usize, vocab: usize, c: usize) -> Vec<usize> {
    loop {
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(FIRST_TOKEN..vocab)).collect();
        let mut counts = vec![0usize; c];
        seq.iter().for_each(|&t| counts[majority_bucket(t, c)] += 1);
        let best = counts[label];
        if counts.iter().enumerate().all(|(b, &n)| b == label || n < best) {
            return seq;
        }
    }
}

fn parity_seq(rng: &mut ChaCha8Rng, label: usize, len: usize, vocab: usize, c: usize) -> Vec<usize> {
    let counts: Vec<usize> = (0..=len).filter(|k| k % c == label).collect();
    let k = counts[rng.random_range(0..counts.len())];
    let mut seq: Vec<usize> = (0..len)
        .map(|i| {
            if i < k {
                PARITY_MARK
            } else {
                rng.random_range(PARITY_MARK + 1..vocab)
            }
        })
        .collect();
    seq.shuffle(rng);
    seq
}

fn keyphrase_seq(rng: &mut ChaCha8Rng, label: usize, len: usize, vocab: usize, c: usize) -> Vec<usize> {
    let k = keyphrase_count(c);
    let background = FIRST_TOKEN + 2 * k;
    let mut seq: Vec<usize> = (0..len).map(|_| rng.random_range(background..vocab)).collect();
    let planted: Vec<usize> = (0..k).filter(|b| label >> b & 1 == 1).collect();
    // non-overlapping start positions, one per planted bigram
    let mut slots: Vec<usize> = (0..len / 2).collect();
    slots.shuffle(rng);
    for (&b, &slot) in planted.iter().zip(&slots) {
        let (first, second) = keyphrase(b);
        seq[2 * slot] = first;
        seq[2 * slot + 1] = second;
    }
    seq
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&LabeledExample]) -> Self {
        Batch {
            ids: examples.iter().map(|e| e.ids.clone()).collect(),
            labels: examples.iter().map(|e| e.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One epoch of shuffled batches; the last batch may be short.
pub fn batch_iter<R: Rng + ?Sized>(
    examples: &[LabeledExample],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|c| Batch::from_examples(&c.iter().map(|&i| &examples[i]).collect::<Vec<_>>()))
        .collect()
}

/// Unshuffled batches, for evaluation.
pub fn sequential_batches(examples: &[LabeledExample], batch_size: usize) -> Vec<Batch> {
    examples
        .chunks(batch_size.max(1))
        .map(|c| Batch::from_examples(&c.iter().collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_orders_by_frequency_then_text() {
        let v = build_vocab(&["a b", "b c"]).unwrap();
        assert_eq!(v.token(3), Some("b"));
        assert_eq!(v.token(4), Some("a"));
        assert_eq!(v.token(5), Some("c"));
        assert_eq!(v, build_vocab(&["a b", "b c"]).unwrap());
        assert_eq!(v.id("zebra"), UNK_ID);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(build_vocab(&["", "  "]), Err(Error::Data(_))));
    }

    #[test]
    fn encode_prefixes_and_pads() {
        let v = build_vocab(&["good movie"]).unwrap();
        let rows = parse_tsv("good movie\t1\n", 2).unwrap();
        let ex = encode_rows(&rows, &v, 5);
        assert_eq!(ex[0].ids, vec![CLS_ID, v.id("good"), v.id("movie"), PAD_ID, PAD_ID]);
        assert_eq!(ex[0].label, 1);
        let long = vec!["good"; 100].join(" ");
        assert_eq!(v.encode(&long, 16).len(), 16);
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let err = parse_tsv("ok\t0\nno tab here\n", 2).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_tsv("ok\t7\n", 2).unwrap_err();
        assert!(err.to_string().contains("unknown label"), "{err}");
    }

    #[test]
    fn tsv_export_round_trips() {
        let split = synthetic_task(TaskKind::Keyphrase, 50, 30, 10, 4, 1).unwrap();
        let v = Vocab::synthetic(30);
        let text = to_tsv(&split.train, &v);
        let back = encode_rows(&parse_tsv(&text, 4).unwrap(), &v, 10);
        assert_eq!(back, split.train);
    }

    #[test]
    fn generators_are_seeded() {
        for kind in [TaskKind::Majority, TaskKind::Parity, TaskKind::Keyphrase] {
            let a = synthetic_task(kind, 200, 40, 12, 2, 13).unwrap();
            let b = synthetic_task(kind, 200, 40, 12, 2, 13).unwrap();
            assert_eq!(dataset_checksum(&a.train), dataset_checksum(&b.train));
            assert_eq!(dataset_checksum(&a.test), dataset_checksum(&b.test));
            let c = synthetic_task(kind, 200, 40, 12, 2, 14).unwrap();
            assert_ne!(dataset_checksum(&a.train), dataset_checksum(&c.train));
            assert_eq!((a.train.len(), a.test.len()), (160, 40));
        }
    }

    #[test]
    fn majority_labels_match_recount() {
        let split = synthetic_task(TaskKind::Majority, 500, 20, 9, 3, 2).unwrap();
        for ex in split.train.iter().chain(&split.test) {
            let mut counts = [0usize; 3];
            for &t in &ex.ids[1..] {
                counts[(t - 3) % 3] += 1;
            }
            let max = *counts.iter().max().unwrap();
            assert_eq!(counts.iter().filter(|&&c| c == max).count(), 1);
            assert_eq!(counts[ex.label], max);
        }
    }

    #[test]
    fn parity_and_keyphrase_labels_match_recount() {
        let split = synthetic_task(TaskKind::Parity, 300, 20, 9, 2, 2).unwrap();
        for ex in &split.train {
            let n = ex.ids.iter().filter(|&&t| t == PARITY_MARK).count();
            assert_eq!(n % 2, ex.label);
        }
        let split = synthetic_task(TaskKind::Keyphrase, 300, 64, 16, 4, 2).unwrap();
        for ex in &split.train {
            let mut label = 0;
            for b in 0..2 {
                let (x, y) = keyphrase(b);
                if ex.ids.windows(2).any(|w| w == [x, y]) {
                    label |= 1 << b;
                }
            }
            assert_eq!(label, ex.label);
        }
    }

    #[test]
    fn classes_are_balanced() {
        for kind in [TaskKind::Majority, TaskKind::Parity, TaskKind::Keyphrase] {
            let split = synthetic_task(kind, 2000, 64, 16, 4, 5).unwrap();
            let mut counts = [0usize; 4];
            split.train.iter().chain(&split.test).for_each(|e| counts[e.label] += 1);
            for c in counts {
                assert!((c as f64 - 500.0).abs() <= 50.0, "{kind:?} {counts:?}");
            }
        }
    }

    #[test]
    fn batches_keep_partial_tail() {
        let split = synthetic_task(TaskKind::Majority, 13, 20, 5, 2, 0).unwrap();
        let data: Vec<_> = split.train.iter().take(10).cloned().collect();
        let sizes: Vec<usize> = batch_iter(&data, 4, &mut ChaCha8Rng::seed_from_u64(0))
            .iter()
            .map(Batch::len)
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    proptest! {
        #[test]
        fn batches_partition_the_dataset(n in 1usize..60, bs in 1usize..17, seed in any::<u64>()) {
            let examples: Vec<LabeledExample> =
                (0..n).map(|i| LabeledExample { ids: vec![CLS_ID, i + 3], label: i % 2 }).collect();
            let a = batch_iter(&examples, bs, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = batch_iter(&examples, bs, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&a, &b);
            let mut seen: Vec<usize> = a.iter().flat_map(|b| b.ids.iter().map(|x| x[1] - 3)).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn encoded_length_is_exact(text in "[a-c ]{0,40}", max_len in 1usize..20) {
            let v = Vocab::synthetic(10);
            let ids = v.encode(&text, max_len);
            prop_assert_eq!(ids.len(), max_len);
            prop_assert_eq!(ids[0], CLS_ID);
        }
    }
}
