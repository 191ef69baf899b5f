//! Corpora, vocabularies, token batching, and checkpoint files.
//!
//! Corpus files are UTF-8, one sentence per line, tokens space-separated;
//! parallel files align by line number. A vocabulary file is one token per
//! line with the line index as the id and the reserved tokens first. Every
//! tokenized sentence is terminated by the end-of-sentence id before it
//! reaches batching or the model; the pad id never appears inside a sequence.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{HyperParams, ModelParams};
use crate::tensor::{OptimizerState, Tensor};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// How raw lines are split into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tokenizer {
    /// Whitespace-separated words.
    Word,
    /// Individual characters; whitespace separates but is not a token.
    Char,
}

impl Tokenizer {
    pub fn split(&self, line: &str) -> Vec<String> {
        match self {
            Tokenizer::Word => line.split_whitespace().map(str::to_string).collect(),
            Tokenizer::Char => line
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Tokenizer::Word => "word",
            Tokenizer::Char => "char",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Tokenizer::Word),
            "char" => Ok(Tokenizer::Char),
            other => Err(Error::invalid(format!("unknown tokenizer '{other}'"))),
        }
    }
}

/// Bijection between tokens and ids with the four reserved ids fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, reserved) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::format(format!(
                    "vocabulary must start with the reserved tokens, found {:?} at {i}",
                    tokens.get(i)
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Build from corpus lines: reserved ids first, then tokens by
    /// descending frequency with lexicographic tie-break, truncated to
    /// `max_size` entries total.
    pub fn build(lines: &[String], tokenizer: Tokenizer, max_size: usize) -> Result<Self> {
        if max_size <= RESERVED_TOKENS.len() {
            return Err(Error::invalid(format!(
                "vocabulary size {max_size} leaves no room beyond the reserved tokens"
            )));
        }
        if lines.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for tok in tokenizer.split(line) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            entries
                .into_iter()
                .take(max_size - RESERVED_TOKENS.len())
                .map(|(t, _)| t),
        );
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(RESERVED_TOKENS[UNK_ID as usize])
    }

    /// Token ids for a line, terminated by the end-of-sentence id.
    pub fn encode_line(&self, line: &str, tokenizer: Tokenizer) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenizer.split(line).iter().map(|t| self.id(t)).collect();
        ids.push(EOS_ID);
        ids
    }

    /// Space-joined tokens; reserved ids are dropped.
    pub fn decode_line(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id >= RESERVED_TOKENS.len() as u32)
            .map(|&id| self.token(id))
            .collect();
        words.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Aligned (source, target) sentence pairs as raw lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(String, String)>,
}

impl ParallelCorpus {
    /// Pair up two line-aligned files, dropping pairs where either side is
    /// empty or exceeds `max_len` tokens (applied to both sides).
    pub fn load(
        src_path: &Path,
        tgt_path: &Path,
        tokenizer: Tokenizer,
        max_len: usize,
    ) -> Result<Self> {
        let src = fs::read_to_string(src_path)?;
        let tgt = fs::read_to_string(tgt_path)?;
        ParallelCorpus::from_lines(
            src.lines().map(str::to_string).collect(),
            tgt.lines().map(str::to_string).collect(),
            tokenizer,
            max_len,
        )
    }

    pub fn from_lines(
        src: Vec<String>,
        tgt: Vec<String>,
        tokenizer: Tokenizer,
        max_len: usize,
    ) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::invalid(format!(
                "parallel corpus sides differ: {} vs {} lines",
                src.len(),
                tgt.len()
            )));
        }
        let pairs = src
            .into_iter()
            .zip(tgt)
            .filter(|(s, t)| {
                let sl = tokenizer.split(s).len();
                let tl = tokenizer.split(t).len();
                sl > 0 && tl > 0 && sl <= max_len && tl <= max_len
            })
            .collect();
        Ok(ParallelCorpus { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn source_lines(&self) -> impl Iterator<Item = &String> {
        self.pairs.iter().map(|(s, _)| s)
    }

    pub fn target_lines(&self) -> impl Iterator<Item = &String> {
        self.pairs.iter().map(|(_, t)| t)
    }

    pub fn save(&self, src_path: &Path, tgt_path: &Path) -> Result<()> {
        write_lines(src_path, self.source_lines())?;
        write_lines(tgt_path, self.target_lines())
    }
}

pub fn write_lines<'a>(path: &Path, lines: impl Iterator<Item = &'a String>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for line in lines {
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Id-space view of a corpus: eos-terminated token sequences per side.
#[derive(Debug, Clone)]
pub struct TokenizedCorpus {
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
}

impl TokenizedCorpus {
    pub fn new(
        corpus: &ParallelCorpus,
        src_vocab: &Vocab,
        tgt_vocab: &Vocab,
        tokenizer: Tokenizer,
    ) -> Self {
        TokenizedCorpus {
            src: corpus
                .source_lines()
                .map(|l| src_vocab.encode_line(l, tokenizer))
                .collect(),
            tgt: corpus
                .target_lines()
                .map(|l| tgt_vocab.encode_line(l, tokenizer))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Cost of one pair for the token budget: both sides padded to the
    /// longer one.
    pub fn padded_cost(&self, i: usize) -> usize {
        self.src[i].len().max(self.tgt[i].len())
    }
}

/// Group sentence indices into batches whose padded token count stays within
/// `budget` (a batch holding a single oversized sentence is allowed). Longer
/// sentences come first, so batches are length-homogeneous.
pub fn batch_by_tokens(corpus: &TokenizedCorpus, budget: usize) -> Result<Vec<Vec<usize>>> {
    if budget == 0 {
        return Err(Error::invalid("token budget must be >= 1"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((corpus.padded_cost(i), std::cmp::Reverse(i))));

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_max = 0usize;
    for i in order {
        let cost = corpus.padded_cost(i);
        let new_max = current_max.max(cost);
        if !current.is_empty() && new_max * (current.len() + 1) > budget {
            batches.push(std::mem::take(&mut current));
            current_max = 0;
        }
        current_max = current_max.max(cost);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

// ── checkpoint container ─────────────────────────────────────────────

const MAGIC: &[u8; 8] = b"SATCKPT1";
const VERSION: u32 = 1;

/// A serializable training state: hyperparameters, named weight tensors,
/// optional optimizer moments, and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hp: HyperParams,
    pub params: ModelParams,
    pub opt: Option<OptimizerState>,
    pub step: u64,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format("invalid UTF-8"))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    out.reserve(vs.len() * 4);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_string(out, name);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    put_f32s(out, t.data());
}

impl Checkpoint {
    /// Little-endian binary container: magic, version, step counter,
    /// hyperparameter text, length-prefixed name/shape/data records, and the
    /// optional optimizer moments in the same tensor order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.step);
        put_string(&mut out, &self.hp.to_kv());
        let named = self.params.named_tensors();
        put_u32(&mut out, named.len() as u32);
        for (name, t) in &named {
            put_tensor(&mut out, name, t);
        }
        match &self.opt {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                put_u64(&mut out, opt.step);
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    put_f32s(&mut out, m.data());
                    put_f32s(&mut out, v.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let step = r.u64()?;
        let hp = HyperParams::from_kv(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 2 {
                return Err(Error::format(format!("tensor '{name}' has rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f32s(numel)?;
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        let shapes: Vec<Vec<usize>> = tensors.iter().map(|(_, t)| t.shape().to_vec()).collect();
        let params = ModelParams::from_named(&hp, tensors)?;
        let opt = match r.take(1)?[0] {
            0 => None,
            1 => {
                let opt_step = r.u64()?;
                let mut m = Vec::with_capacity(shapes.len());
                let mut v = Vec::with_capacity(shapes.len());
                for shape in &shapes {
                    let numel: usize = shape.iter().product();
                    m.push(Tensor::from_vec(shape, r.f32s(numel)?)?);
                    v.push(Tensor::from_vec(shape, r.f32s(numel)?)?);
                }
                Some(OptimizerState {
                    step: opt_step,
                    beta1: hp.beta1,
                    beta2: hp.beta2,
                    eps: hp.adam_eps,
                    m,
                    v,
                })
            }
            other => return Err(Error::format(format!("bad optimizer flag {other}"))),
        };
        if !r.done() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            hp,
            params,
            opt,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Checkpoint::from_bytes(&buf)
    }
}
