//! Vocabularies, corpus splits, the lane batcher and the synthetic lag
//! corpus.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    Byte,
    Char,
}

impl std::str::FromStr for VocabMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byte" => Ok(VocabMode::Byte),
            "char" => Ok(VocabMode::Char),
            other => Err(Error::Config(format!("unknown vocab mode {other:?}"))),
        }
    }
}

/// Symbol ↔ id mapping. Byte mode is total over 256 ids. Char mode keeps the
/// sorted symbols seen when the vocabulary was built plus a trailing UNK id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    mode: VocabMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    symbols: Vec<char>,
}

/// Rendered in place of the UNK id when decoding char vocabularies.
pub const UNK_CHAR: char = '\u{FFFD}';

impl Vocab {
    pub fn byte() -> Self {
        Vocab {
            mode: VocabMode::Byte,
            symbols: Vec::new(),
        }
    }

    pub fn char_from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Vocab {
            mode: VocabMode::Char,
            symbols: set.into_iter().collect(),
        }
    }

    pub fn build(mode: VocabMode, text: &[u8]) -> Result<Self> {
        match mode {
            VocabMode::Byte => Ok(Vocab::byte()),
            VocabMode::Char => Ok(Vocab::char_from_text(as_utf8(text)?)),
        }
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn size(&self) -> usize {
        match self.mode {
            VocabMode::Byte => 256,
            VocabMode::Char => self.symbols.len() + 1,
        }
    }

    /// The UNK id in char mode.
    pub fn unk(&self) -> Option<usize> {
        (self.mode == VocabMode::Char).then_some(self.symbols.len())
    }

    /// Encodes raw input. Char mode requires UTF-8 and maps unseen symbols to
    /// UNK.
    pub fn encode(&self, raw: &[u8]) -> Result<Vec<usize>> {
        match self.mode {
            VocabMode::Byte => Ok(raw.iter().map(|&b| b as usize).collect()),
            VocabMode::Char => Ok(self.encode_str(as_utf8(raw)?)),
        }
    }

    pub fn encode_str(&self, text: &str) -> Vec<usize> {
        match self.mode {
            VocabMode::Byte => text.bytes().map(|b| b as usize).collect(),
            VocabMode::Char => {
                let unk = self.symbols.len();
                text.chars()
                    .map(|c| self.symbols.binary_search(&c).unwrap_or(unk))
                    .collect()
            }
        }
    }

    pub fn decode_bytes(&self, ids: &[usize]) -> Result<Vec<u8>> {
        match self.mode {
            VocabMode::Byte => ids
                .iter()
                .map(|&i| {
                    u8::try_from(i).map_err(|_| Error::Vocab { token: i, vocab: 256 })
                })
                .collect(),
            VocabMode::Char => Ok(self.decode(ids)?.into_bytes()),
        }
    }

    /// Decodes to text. Byte mode replaces invalid UTF-8 sequences.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        match self.mode {
            VocabMode::Byte => Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned()),
            VocabMode::Char => ids
                .iter()
                .map(|&i| match i.cmp(&self.symbols.len()) {
                    std::cmp::Ordering::Less => Ok(self.symbols[i]),
                    std::cmp::Ordering::Equal => Ok(UNK_CHAR),
                    std::cmp::Ordering::Greater => Err(Error::Vocab {
                        token: i,
                        vocab: self.size(),
                    }),
                })
                .collect(),
        }
    }
}

fn as_utf8(raw: &[u8]) -> Result<&str> {
    std::str::from_utf8(raw).map_err(|e| Error::Format(format!("char mode needs UTF-8 input: {e}")))
}

/// Contiguous train/valid/test token streams.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split sizes for `n` items: the first two by rounding, the third takes the
/// rest.
pub fn split_lengths(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let a = ((n as f64) * fractions[0]).round() as usize;
    let b = (((n as f64) * fractions[1]).round() as usize).min(n - a.min(n));
    let a = a.min(n);
    Ok([a, b, n - a - b])
}

impl Corpus {
    /// Splits `raw` contiguously, builds the vocabulary from the training
    /// part and encodes all three parts with it.
    pub fn from_bytes(raw: &[u8], mode: VocabMode, fractions: [f64; 3]) -> Result<Self> {
        let vocab = match mode {
            VocabMode::Byte => Vocab::byte(),
            VocabMode::Char => {
                let chars: Vec<char> = as_utf8(raw)?.chars().collect();
                let [a, _, _] = split_lengths(chars.len(), fractions)?;
                Vocab::char_from_text(&chars[..a].iter().collect::<String>())
            }
        };
        Corpus::with_vocab(raw, vocab, fractions)
    }

    /// Splits `raw` and encodes the parts with an existing vocabulary.
    /// Char vocabularies split on characters, byte vocabularies on bytes.
    pub fn with_vocab(raw: &[u8], vocab: Vocab, fractions: [f64; 3]) -> Result<Self> {
        match vocab.mode {
            VocabMode::Byte => {
                let [a, b, _] = split_lengths(raw.len(), fractions)?;
                Ok(Corpus {
                    train: vocab.encode(&raw[..a])?,
                    valid: vocab.encode(&raw[a..a + b])?,
                    test: vocab.encode(&raw[a + b..])?,
                    vocab,
                })
            }
            VocabMode::Char => {
                let ids = vocab.encode_str(as_utf8(raw)?);
                let [a, b, _] = split_lengths(ids.len(), fractions)?;
                Ok(Corpus {
                    train: ids[..a].to_vec(),
                    valid: ids[a..a + b].to_vec(),
                    test: ids[a + b..].to_vec(),
                    vocab,
                })
            }
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>, mode: VocabMode, fractions: [f64; 3]) -> Result<Corpus> {
    let raw = std::fs::read(path)?;
    Corpus::from_bytes(&raw, mode, fractions)
}

/// One step's worth of segments, one per lane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    /// False on a lane's first segment of an epoch; memory must be reset.
    pub continuation: Vec<bool>,
}

impl SegmentBatch {
    pub fn lanes(&self) -> usize {
        self.inputs.len()
    }

    pub fn seg_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

/// Resumable position of a [`SegmentBatcher`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatcherCursor {
    pub epoch: u64,
    pub pos: usize,
}

/// Splits a stream into `B` contiguous lanes of `len / B` tokens (the tail
/// remainder is dropped) and walks them in lockstep, `L` positions at a time.
/// The last segment of an epoch may be shorter.
#[derive(Clone, Debug)]
pub struct SegmentBatcher {
    lanes: Vec<Vec<usize>>,
    seg_len: usize,
    cursor: BatcherCursor,
}

impl SegmentBatcher {
    pub fn new(stream: &[usize], lanes: usize, seg_len: usize) -> Result<Self> {
        if lanes == 0 || seg_len == 0 {
            return Err(Error::Config("batcher needs at least one lane and L ≥ 1".into()));
        }
        let lane_len = stream.len() / lanes;
        if lane_len < 2 {
            return Err(Error::Config(format!(
                "stream of {} tokens is too short for {lanes} lanes",
                stream.len()
            )));
        }
        let lanes = stream.chunks_exact(lane_len).take(lanes).map(<[usize]>::to_vec).collect();
        Ok(SegmentBatcher {
            lanes,
            seg_len,
            cursor: BatcherCursor::default(),
        })
    }

    pub fn lane(&self, b: usize) -> &[usize] {
        &self.lanes[b]
    }

    pub fn n_lanes(&self) -> usize {
        self.lanes.len()
    }

    pub fn cursor(&self) -> BatcherCursor {
        self.cursor
    }

    pub fn set_cursor(&mut self, cursor: BatcherCursor) {
        self.cursor = cursor;
    }

    /// Segments per epoch.
    pub fn segments_per_epoch(&self) -> usize {
        (self.lanes[0].len() - 1).div_ceil(self.seg_len)
    }

    /// Next batch of this epoch, or `None` once it is exhausted. The
    /// following call starts the next epoch.
    pub fn next_batch(&mut self) -> Option<SegmentBatch> {
        let lane_len = self.lanes[0].len();
        let pos = self.cursor.pos;
        if pos + 1 >= lane_len {
            self.cursor = BatcherCursor {
                epoch: self.cursor.epoch + 1,
                pos: 0,
            };
            return None;
        }
        let len = self.seg_len.min(lane_len - 1 - pos);
        let batch = SegmentBatch {
            inputs: self.lanes.iter().map(|l| l[pos..pos + len].to_vec()).collect(),
            targets: self.lanes.iter().map(|l| l[pos + 1..pos + len + 1].to_vec()).collect(),
            continuation: vec![pos > 0; self.lanes.len()],
        };
        self.cursor.pos = pos + len;
        Some(batch)
    }

    /// Like [`SegmentBatcher::next_batch`] but rolls over into the next
    /// epoch instead of stopping.
    pub fn next_batch_cyclic(&mut self) -> SegmentBatch {
        match self.next_batch() {
            Some(b) => b,
            None => self.next_batch().expect("a fresh epoch always has a segment"),
        }
    }
}

/// Literal lag stream: the first `lag` tokens are uniform over
/// `0..vocab`, every later token copies the one `lag` positions back.
pub fn make_synthetic_lag_corpus(vocab: usize, length: usize, lag: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(make_lag_runs(vocab, length, lag, length, seed)?.tokens)
}

/// Lag stream together with the positions whose token is determined by the
/// token `lag` back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LagCorpus {
    pub tokens: Vec<usize>,
    pub predictable: Vec<bool>,
    pub lag: usize,
}

/// Concatenated runs of `run_len` tokens. Each run starts with `lag` fresh
/// uniform tokens and then repeats with period `lag`. A single run over the
/// whole stream is only `lag` random tokens repeated, which any model can
/// memorize from a short window; fresh runs force the copy to be done from
/// context.
pub fn make_lag_runs(vocab: usize, length: usize, lag: usize, run_len: usize, seed: u64) -> Result<LagCorpus> {
    if vocab == 0 || lag == 0 || lag >= length || run_len <= lag {
        return Err(Error::Config(format!(
            "lag corpus needs V ≥ 1, 1 ≤ K < T and run length > K (V={vocab}, T={length}, K={lag}, run={run_len})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(length);
    let mut predictable = Vec::with_capacity(length);
    for t in 0..length {
        let offset = t % run_len;
        if offset < lag {
            tokens.push(rng.random_range(0..vocab));
            predictable.push(false);
        } else {
            tokens.push(tokens[t - lag]);
            predictable.push(true);
        }
    }
    Ok(LagCorpus {
        tokens,
        predictable,
        lag,
    })
}
