//! Synthetic seq2seq tasks, vocabularies, token-budget batching and the
//! on-disk dataset layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED_IDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn content_ids(&self) -> std::ops::Range<usize> {
        RESERVED_IDS..self.size()
    }
}

/// Reserved `<pad> <bos> <eos> <unk>` followed by content tokens `t4 … t{size-1}`.
pub fn build_vocab(size: usize) -> Result<Vocab> {
    if size <= RESERVED_IDS {
        return Err(Error::Config(format!(
            "vocabulary size {size} must exceed {RESERVED_IDS}"
        )));
    }
    let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend((RESERVED_IDS..size).map(|i| format!("t{i}")));
    let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    Ok(Vocab { tokens, ids })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    MajorityTag,
    LexicalTranslate,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::MajorityTag => "majority_tag",
            TaskKind::LexicalTranslate => "lexical_translate",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "majority_tag" => Ok(TaskKind::MajorityTag),
            "lexical_translate" => Ok(TaskKind::LexicalTranslate),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Inclusive `[min, max]` source length.
    pub len_range: [usize; 2],
    pub n_samples: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.len_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid length range {lo}:{hi}")));
        }
        if self.vocab_size <= RESERVED_IDS {
            return Err(Error::Config(format!(
                "vocabulary size {} must exceed {RESERVED_IDS}",
                self.vocab_size
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        Ok(())
    }
}

/// One example; ids exclude BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Most frequent token of `src`, ties to the smallest id, repeated.
pub fn majority_tag(src: &[usize]) -> Vec<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in src {
        *counts.entry(t).or_default() += 1;
    }
    // BTreeMap iterates ids ascending; max_by_key keeps the last maximum, so
    // reverse to keep the smallest id among ties.
    let top = counts.iter().rev().max_by_key(|(_, &c)| c).map(|(&t, _)| t);
    top.map_or_else(Vec::new, |t| vec![t; src.len()])
}

/// Seeded permutation of the content ids; index by token id.
pub fn lexical_table(vocab_size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut content: Vec<usize> = (RESERVED_IDS..vocab_size).collect();
    content.shuffle(&mut rng);
    (0..RESERVED_IDS).chain(content).collect()
}

fn lexical_translate(src: &[usize], table: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = src.iter().map(|&t| table[t]).collect();
    if out.len() >= 2 {
        out.swap(0, 1);
    }
    out
}

/// Deterministic dataset for `spec`.
pub fn gen_task(spec: &TaskSpec) -> Result<Vec<Pair>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let table = lexical_table(spec.vocab_size, spec.seed);
    let [lo, hi] = spec.len_range;
    let pairs = (0..spec.n_samples)
        .map(|_| {
            let len = rng.gen_range(lo..=hi);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(RESERVED_IDS..spec.vocab_size)).collect();
            let tgt = match spec.kind {
                TaskKind::Copy => src.clone(),
                TaskKind::Reverse => src.iter().rev().copied().collect(),
                TaskKind::MajorityTag => majority_tag(&src),
                TaskKind::LexicalTranslate => lexical_translate(&src, &table),
            };
            Pair { src, tgt }
        })
        .collect();
    Ok(pairs)
}

/// Seeded 90/10 train/valid split.
pub fn split_train_valid(pairs: &[Pair], seed: u64) -> (Vec<Pair>, Vec<Pair>) {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    idx.shuffle(&mut rng);
    let n_valid = if pairs.len() >= 2 { (pairs.len() / 10).max(1) } else { 0 };
    let valid = idx[..n_valid].iter().map(|&i| pairs[i].clone()).collect();
    let train = idx[n_valid..].iter().map(|&i| pairs[i].clone()).collect();
    (train, valid)
}

/// `BOS ids EOS`.
pub fn wrap(ids: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(BOS);
    out.extend_from_slice(ids);
    out.push(EOS);
    out
}

/// Rows are `BOS ids EOS` right-padded with PAD to a common width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    /// `true` for real tokens.
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

fn pad_rows(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let masks = rows.iter().map(|r| (0..width).map(|j| j < r.len()).collect()).collect();
    let rows = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (rows, masks)
}

impl Batch {
    pub fn from_pairs(pairs: &[&Pair]) -> Self {
        let (src, src_mask) = pad_rows(pairs.iter().map(|p| wrap(&p.src)).collect());
        let (tgt, tgt_mask) = pad_rows(pairs.iter().map(|p| wrap(&p.tgt)).collect());
        Batch {
            src,
            tgt,
            src_mask,
            tgt_mask,
        }
    }

    pub fn rows(&self) -> usize {
        self.src.len()
    }

    /// `rows × max(src width, tgt width)`.
    pub fn padded_tokens(&self) -> usize {
        let w = self
            .src
            .first()
            .map_or(0, Vec::len)
            .max(self.tgt.first().map_or(0, Vec::len));
        self.rows() * w
    }

    /// Row `i` of the source without padding.
    pub fn src_row(&self, i: usize) -> &[usize] {
        strip(&self.src[i], &self.src_mask[i])
    }

    /// Row `i` of the target without padding.
    pub fn tgt_row(&self, i: usize) -> &[usize] {
        strip(&self.tgt[i], &self.tgt_mask[i])
    }

    /// Label positions: every real target token after BOS.
    pub fn label_tokens(&self) -> usize {
        (0..self.rows()).map(|i| self.tgt_row(i).len().saturating_sub(1)).sum()
    }
}

fn strip<'r>(row: &'r [usize], mask: &[bool]) -> &'r [usize] {
    &row[..mask.iter().filter(|&&m| m).count()]
}

fn row_cost(p: &Pair) -> usize {
    p.src.len().max(p.tgt.len()) + 2
}

/// Shuffles by `seed` and packs greedily so each batch's padded token count
/// stays within `max_tokens`.
pub fn batchify(pairs: &[Pair], max_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::Config("cannot batch an empty dataset".into()));
    }
    if let Some(p) = pairs.iter().find(|p| row_cost(p) > max_tokens) {
        return Err(Error::Oversize {
            tokens: row_cost(p),
            max: max_tokens,
        });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut batches = Vec::new();
    let mut current: Vec<&Pair> = Vec::new();
    let mut width = 0;
    for i in order {
        let p = &pairs[i];
        let w = width.max(row_cost(p));
        if !current.is_empty() && (current.len() + 1) * w > max_tokens {
            batches.push(Batch::from_pairs(&current));
            current.clear();
            width = 0;
        }
        width = width.max(row_cost(p));
        current.push(p);
    }
    batches.push(Batch::from_pairs(&current));
    Ok(batches)
}

pub fn write_jsonl(path: &Path, pairs: &[Pair]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let line = serde_json::to_string(p).map_err(|e| Error::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Pair>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    size: usize,
}

/// A generated dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub vocab_size: usize,
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
}

impl Dataset {
    pub fn generate(spec: &TaskSpec) -> Result<Self> {
        let pairs = gen_task(spec)?;
        let (train, valid) = split_train_valid(&pairs, spec.seed);
        Ok(Dataset {
            spec: spec.clone(),
            vocab_size: spec.vocab_size,
            train,
            valid,
        })
    }

    /// Writes `train.jsonl`, `valid.jsonl`, `vocab.json` and `spec.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("valid.jsonl"), &self.valid)?;
        write_json(&dir.join("vocab.json"), &VocabFile { size: self.vocab_size })?;
        write_json(&dir.join("spec.json"), &self.spec)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab: VocabFile = read_json(&dir.join("vocab.json"))?;
        let spec: TaskSpec = read_json(&dir.join("spec.json"))?;
        let ds = Dataset {
            spec,
            vocab_size: vocab.size,
            train: read_jsonl(&dir.join("train.jsonl"))?,
            valid: read_jsonl(&dir.join("valid.jsonl"))?,
        };
        for p in ds.train.iter().chain(&ds.valid) {
            if let Some(&id) = p.src.iter().chain(&p.tgt).find(|&&t| t >= ds.vocab_size) {
                return Err(Error::Vocab {
                    id,
                    size: ds.vocab_size,
                });
            }
        }
        Ok(ds)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}
