//! Joint byte-pair-encoding vocabulary with a `▁` word-start marker.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];
pub const WORD_START: char = '▁';
pub const DEFAULT_VOCAB_SIZE: usize = 500;

const HEADER: &str = "#fatspeech-bpe 1";

#[derive(Debug, thiserror::Error)]
pub enum SubwordError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("vocab size {requested} is below the {minimum} reserved + alphabet symbols")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("malformed vocab file at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lang {
    Src,
    Tgt,
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lang::Src => "src",
            Lang::Tgt => "tgt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub lang: Lang,
    pub text: Option<String>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, lang: Lang) -> Self {
        TokenSequence { ids, lang, text: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn split_word(word: &str) -> Vec<String> {
    std::iter::once(WORD_START)
        .chain(word.chars())
        .map(String::from)
        .collect()
}

impl Vocabulary {
    fn from_parts(alphabet: Vec<char>, merges: Vec<(String, String)>) -> Self {
        let mut pieces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        pieces.extend(alphabet.iter().map(|c| c.to_string()));
        let mut index: HashMap<String, usize> = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        for (a, b) in &merges {
            let m = format!("{a}{b}");
            if !index.contains_key(&m) {
                index.insert(m.clone(), pieces.len());
                pieces.push(m);
            }
        }
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        Vocabulary {
            pieces,
            index,
            alphabet,
            merges,
            ranks,
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = split_word(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && &syms[i] == a && &syms[i + 1] == b {
                    out.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    pub fn encode(&self, text: &str, lang: Lang) -> TokenSequence {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            for piece in self.segment_word(word) {
                ids.push(self.id(&piece).unwrap_or(UNK));
            }
        }
        TokenSequence {
            ids,
            lang,
            text: Some(text.to_string()),
        }
    }

    /// Pieces joined back into text; pad/bos/eos are skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<String, SubwordError> {
        let mut out = String::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(SubwordError::IdOutOfRange { id, size: self.len() })?;
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            for c in piece.chars() {
                out.push(if c == WORD_START && id >= RESERVED.len() { ' ' } else { c });
            }
        }
        Ok(out.strip_prefix(' ').map(str::to_string).unwrap_or(out))
    }

    /// Serialized vocab: header, reserved tokens, alphabet, one merge per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\nreserved {}\nalphabet", RESERVED.join(" "));
        for c in &self.alphabet {
            s.push(' ');
            s.push(*c);
        }
        s.push('\n');
        for (a, b) in &self.merges {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SubwordError> {
        let err = |line: usize, msg: &str| SubwordError::Format { line, msg: msg.to_string() };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(err(1, "missing header")),
        }
        let (i, reserved) = lines.next().ok_or_else(|| err(2, "missing reserved line"))?;
        let expected = format!("reserved {}", RESERVED.join(" "));
        if reserved != expected {
            return Err(err(i + 1, "reserved tokens differ"));
        }
        let (i, alpha) = lines.next().ok_or_else(|| err(3, "missing alphabet line"))?;
        let rest = alpha.strip_prefix("alphabet").ok_or_else(|| err(i + 1, "expected alphabet"))?;
        let mut alphabet = Vec::new();
        for tok in rest.split_whitespace() {
            let mut cs = tok.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) => alphabet.push(c),
                _ => return Err(err(i + 1, "alphabet entries must be single characters")),
            }
        }
        let mut merges = Vec::new();
        for (i, line) in lines {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
                _ => return Err(err(i + 1, "expected `left right`")),
            }
        }
        Ok(Vocabulary::from_parts(alphabet, merges))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SubwordError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SubwordError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// FNV-1a over the serialized form; stored in checkpoints to catch
    /// vocab/model mismatches.
    pub fn hash(&self) -> u64 {
        self.to_text()
            .bytes()
            .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
    }
}

/// Greedy BPE: repeatedly merge the most frequent adjacent pair, breaking
/// ties by the lexicographically smallest merged piece.
pub fn train_bpe<S: AsRef<str>>(lines: &[S], vocab_size: usize) -> Result<Vocabulary, SubwordError> {
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }
    let mut alphabet: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    alphabet.insert(WORD_START);
    let alphabet: Vec<char> = alphabet.into_iter().collect();
    let minimum = RESERVED.len() + alphabet.len();
    if vocab_size < minimum {
        return Err(SubwordError::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }

    let mut words: Vec<(Vec<String>, usize)> = word_freq.into_iter().map(|(w, f)| (split_word(w), f)).collect();
    let mut known: BTreeSet<String> = alphabet.iter().map(|c| c.to_string()).collect();
    let mut size = minimum;
    let mut merges = Vec::new();
    while size < vocab_size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *counts.entry((&w[0], &w[1])).or_default() += f;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb)
                    .then_with(|| {
                        let ma = format!("{}{}", pa.0, pa.1);
                        let mb = format!("{}{}", pb.0, pb.1);
                        mb.cmp(&ma)
                    })
                    .then_with(|| pb.0.cmp(pa.0))
            })
            .map(|((a, b), _)| (a.to_string(), b.to_string()));
        let Some((a, b)) = best else { break };
        let merged = format!("{a}{b}");
        for (syms, _) in words.iter_mut() {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        if known.insert(merged) {
            size += 1;
        }
        merges.push((a, b));
    }
    Ok(Vocabulary::from_parts(alphabet, merges))
}
