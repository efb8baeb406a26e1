//! Manifests, length filtering, dynamic batching and objective scheduling.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::features::{self, FeatureError, FeatureStats, Spectrogram};
use crate::seed::mix;
use crate::subword::{Lang, TokenSequence, Vocabulary};

pub const DEFAULT_MAX_FRAMES: usize = 3000;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Record { path: PathBuf, line: usize, msg: String },
    #[error("no non-empty dataset to schedule")]
    NothingToSchedule,
}

/// Subset of {speech, source text, target text}.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Flavor(u8);

impl Flavor {
    pub const S: Flavor = Flavor(1);
    pub const X: Flavor = Flavor(2);
    pub const Y: Flavor = Flavor(4);
    pub const SX: Flavor = Flavor(3);
    pub const SY: Flavor = Flavor(5);
    pub const XY: Flavor = Flavor(6);
    pub const SXY: Flavor = Flavor(7);
    pub const ALL: [Flavor; 7] = [Self::S, Self::X, Self::Y, Self::SX, Self::SY, Self::XY, Self::SXY];

    pub fn new(s: bool, x: bool, y: bool) -> Option<Flavor> {
        let bits = s as u8 | (x as u8) << 1 | (y as u8) << 2;
        (bits != 0).then_some(Flavor(bits))
    }

    pub fn has_s(self) -> bool {
        self.0 & 1 != 0
    }
    pub fn has_x(self) -> bool {
        self.0 & 2 != 0
    }
    pub fn has_y(self) -> bool {
        self.0 & 4 != 0
    }

    pub fn contains(self, other: Flavor) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (has, c) in [(self.has_s(), 's'), (self.has_x(), 'x'), (self.has_y(), 'y')] {
            if has {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Flavor({self})")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalExample {
    pub id: String,
    pub speech: Option<Spectrogram>,
    pub transcription: Option<TokenSequence>,
    pub translation: Option<TokenSequence>,
}

impl MultimodalExample {
    pub fn flavor(&self) -> Flavor {
        Flavor::new(self.speech.is_some(), self.transcription.is_some(), self.translation.is_some())
            .expect("examples always carry at least one modality")
    }
}

/// A restriction of a shared example to a subset of its modalities.
#[derive(Debug, Clone)]
pub struct ExampleView {
    pub example: Arc<MultimodalExample>,
    pub flavor: Flavor,
}

impl ExampleView {
    pub fn full(example: Arc<MultimodalExample>) -> Self {
        let flavor = example.flavor();
        ExampleView { example, flavor }
    }

    /// `None` unless the example carries every modality in `flavor`.
    pub fn restrict(example: &Arc<MultimodalExample>, flavor: Flavor) -> Option<Self> {
        example.flavor().contains(flavor).then(|| ExampleView {
            example: Arc::clone(example),
            flavor,
        })
    }

    pub fn speech(&self) -> Option<&Spectrogram> {
        self.example.speech.as_ref().filter(|_| self.flavor.has_s())
    }
    pub fn transcription(&self) -> Option<&TokenSequence> {
        self.example.transcription.as_ref().filter(|_| self.flavor.has_x())
    }
    pub fn translation(&self) -> Option<&TokenSequence> {
        self.example.translation.as_ref().filter(|_| self.flavor.has_y())
    }

    /// Frames when speech is visible, otherwise total visible tokens.
    pub fn length(&self) -> usize {
        match self.speech() {
            Some(s) => s.num_frames(),
            None => self.transcription().map_or(0, |t| t.len()) + self.translation().map_or(0, |t| t.len()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub flavor: Flavor,
    pub examples: Vec<ExampleView>,
}

impl Batch {
    pub fn lengths(&self) -> Vec<usize> {
        self.examples.iter().map(ExampleView::length).collect()
    }

    pub fn padded_size(&self) -> usize {
        self.examples.len() * self.lengths().into_iter().max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: Option<String>,
    pub audio: Option<String>,
    pub feats: Option<String>,
    pub text_src: Option<String>,
    pub text_tgt: Option<String>,
}

/// Parsed manifest lines paired with their 1-based line numbers.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<(usize, ManifestRecord)>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref().to_path_buf();
        let text = fs::read_to_string(&path).map_err(|source| CorpusError::Io { path: path.clone(), source })?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| CorpusError::Record {
                path: path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            if rec.audio.is_some() && rec.feats.is_some() {
                return Err(CorpusError::Record {
                    path: path.clone(),
                    line: i + 1,
                    msg: "both `audio` and `feats` given".into(),
                });
            }
            if rec.audio.is_none() && rec.feats.is_none() && rec.text_src.is_none() && rec.text_tgt.is_none() {
                return Err(CorpusError::Record {
                    path: path.clone(),
                    line: i + 1,
                    msg: "record has no speech or text field".into(),
                });
            }
            records.push((i + 1, rec));
        }
        Ok(Manifest { path, records })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records
            .iter()
            .flat_map(|(_, r)| [r.text_src.as_deref(), r.text_tgt.as_deref()])
            .flatten()
    }

    /// Raw (unnormalized) spectrogram of one record, if it has speech.
    pub fn load_speech(&self, line: usize, rec: &ManifestRecord, d_s: usize) -> Result<Option<Spectrogram>, CorpusError> {
        let err = |e: FeatureError| CorpusError::Record {
            path: self.path.clone(),
            line,
            msg: e.to_string(),
        };
        if let Some(f) = &rec.feats {
            return features::load_features(self.resolve(f), Some(d_s)).map(Some).map_err(err);
        }
        if let Some(a) = &rec.audio {
            let w = features::load_wav(self.resolve(a)).map_err(err)?;
            return features::waveform_to_log_mel(&w, d_s).map(Some).map_err(err);
        }
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureOptions {
    pub d_s: usize,
    pub stats: Option<FeatureStats>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<Arc<MultimodalExample>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.examples.extend(other.examples);
    }

    pub fn by_flavor(&self) -> BTreeMap<Flavor, Vec<Arc<MultimodalExample>>> {
        let mut out: BTreeMap<Flavor, Vec<_>> = BTreeMap::new();
        for e in &self.examples {
            out.entry(e.flavor()).or_default().push(Arc::clone(e));
        }
        out
    }

    pub fn views(&self, flavor: Flavor) -> Vec<ExampleView> {
        self.examples.iter().filter_map(|e| ExampleView::restrict(e, flavor)).collect()
    }

    pub fn find(&self, id: &str) -> Option<&Arc<MultimodalExample>> {
        self.examples.iter().find(|e| e.id == id)
    }
}

/// Load every record of a manifest, encoding text with `vocab` and
/// normalizing speech with `opts.stats` when present.
pub fn load_manifest(path: impl AsRef<Path>, vocab: &Vocabulary, opts: &FeatureOptions) -> Result<Dataset, CorpusError> {
    let m = Manifest::read(path)?;
    let mut examples = Vec::with_capacity(m.records.len());
    for (line, rec) in &m.records {
        let mut speech = m.load_speech(*line, rec, opts.d_s)?;
        if let (Some(s), Some(st)) = (speech.as_ref(), opts.stats.as_ref()) {
            speech = Some(st.apply(s).map_err(|e| CorpusError::Record {
                path: m.path.clone(),
                line: *line,
                msg: e.to_string(),
            })?);
        }
        let transcription = rec.text_src.as_deref().map(|t| vocab.encode(t, Lang::Src));
        let translation = rec.text_tgt.as_deref().map(|t| vocab.encode(t, Lang::Tgt));
        examples.push(Arc::new(MultimodalExample {
            id: rec.id.clone().unwrap_or_else(|| format!("{}:{line}", m.path.display())),
            speech,
            transcription,
            translation,
        }));
    }
    Ok(Dataset { examples })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: usize,
}

/// Drop views whose visible speech exceeds `max_frames`.
pub fn filter_by_length(views: Vec<ExampleView>, max_frames: usize) -> (Vec<ExampleView>, FilterReport) {
    let before = views.len();
    let kept: Vec<ExampleView> = views
        .into_iter()
        .filter(|v| v.speech().is_none_or(|s| s.num_frames() <= max_frames))
        .collect();
    let report = FilterReport {
        kept: kept.len(),
        dropped: before - kept.len(),
    };
    (kept, report)
}

/// Filter, then sort by length and pack greedily so each batch's padded size
/// (count × longest) stays within `batch_frames`. Batch order is shuffled by
/// `seed`. Views of different flavors never share a batch.
pub fn filter_and_bucket(
    views: Vec<ExampleView>,
    max_frames: usize,
    batch_frames: usize,
    seed: u64,
) -> (Vec<Batch>, FilterReport) {
    let (kept, report) = filter_by_length(views, max_frames);
    let mut groups: BTreeMap<Flavor, Vec<ExampleView>> = BTreeMap::new();
    for v in kept {
        groups.entry(v.flavor).or_default().push(v);
    }
    let mut batches = Vec::new();
    for (flavor, mut vs) in groups {
        vs.sort_by_key(ExampleView::length);
        let mut cur: Vec<ExampleView> = Vec::new();
        for v in vs {
            let longest = v.length().max(1);
            if !cur.is_empty() && (cur.len() + 1) * longest > batch_frames {
                batches.push(Batch {
                    flavor,
                    examples: std::mem::take(&mut cur),
                });
            }
            cur.push(v);
        }
        if !cur.is_empty() {
            batches.push(Batch { flavor, examples: cur });
        }
    }
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (batches, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Objective {
    /// Speech → translation.
    St,
    /// Transcription → translation.
    Mt,
    /// Masked reconstruction over the stream's flavor.
    FatMlm,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::St => "st",
            Objective::Mt => "mt",
            Objective::FatMlm => "fat-mlm",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Stream {
    pub objective: Objective,
    pub flavor: Flavor,
    pub batches: Vec<Batch>,
}

impl Stream {
    pub fn examples(&self) -> usize {
        self.batches.iter().map(Batch::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mixing {
    #[default]
    RoundRobin,
    Proportional,
}

#[derive(Debug, Clone, Copy)]
pub struct BucketConfig {
    pub max_frames: usize,
    pub batch_frames: usize,
    pub batch_tokens: usize,
}

impl Default for BucketConfig {
    fn default() -> Self {
        BucketConfig {
            max_frames: DEFAULT_MAX_FRAMES,
            batch_frames: 4000,
            batch_tokens: 2000,
        }
    }
}

fn build_stream(objective: Objective, flavor: Flavor, views: Vec<ExampleView>, cfg: &BucketConfig, seed: u64) -> Option<(Stream, FilterReport)> {
    if views.is_empty() {
        return None;
    }
    let cap = if flavor.has_s() { cfg.batch_frames } else { cfg.batch_tokens };
    let (batches, report) = filter_and_bucket(views, cfg.max_frames, cap, seed);
    (!batches.is_empty()).then_some((Stream { objective, flavor, batches }, report))
}

/// One FAT-MLM stream per flavor present in the pool.
pub fn pretrain_streams(pool: &Dataset, cfg: &BucketConfig, seed: u64) -> (Vec<Stream>, FilterReport) {
    let mut streams = Vec::new();
    let mut report = FilterReport::default();
    for (flavor, exs) in pool.by_flavor() {
        let views = exs.into_iter().map(ExampleView::full).collect();
        if let Some((s, r)) = build_stream(Objective::FatMlm, flavor, views, cfg, mix(&[seed, flavor.bits() as u64])) {
            streams.push(s);
            report.kept += r.kept;
            report.dropped += r.dropped;
        }
    }
    (streams, report)
}

/// ST from every example carrying (s, y), MT from (x, y), FAT-MLM from (s, x).
/// A triplet therefore feeds all three streams.
pub fn finetune_streams(pool: &Dataset, cfg: &BucketConfig, seed: u64) -> (Vec<Stream>, FilterReport) {
    let mut streams = Vec::new();
    let mut report = FilterReport::default();
    for (objective, flavor) in [(Objective::St, Flavor::SY), (Objective::Mt, Flavor::XY), (Objective::FatMlm, Flavor::SX)] {
        if let Some((s, r)) = build_stream(objective, flavor, pool.views(flavor), cfg, mix(&[seed, objective as u64])) {
            streams.push(s);
            report.kept += r.kept;
            report.dropped += r.dropped;
        }
    }
    (streams, report)
}

/// Infinite, seed-determined stream of (stream index, batch). The sequence
/// depends only on the seed and the number of draws so far.
#[derive(Debug, Clone)]
pub struct Scheduler {
    streams: Vec<Stream>,
    mixing: Mixing,
    seed: u64,
    draws: u64,
    per_stream: Vec<u64>,
    orders: Vec<(u64, Vec<usize>)>,
}

impl Scheduler {
    pub fn new(streams: Vec<Stream>, mixing: Mixing, seed: u64) -> Result<Self, CorpusError> {
        let streams: Vec<Stream> = streams.into_iter().filter(|s| !s.batches.is_empty()).collect();
        if streams.is_empty() {
            return Err(CorpusError::NothingToSchedule);
        }
        let n = streams.len();
        Ok(Scheduler {
            streams,
            mixing,
            seed,
            draws: 0,
            per_stream: vec![0; n],
            orders: vec![(u64::MAX, Vec::new()); n],
        })
    }

    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    fn pick_stream(&self) -> usize {
        match self.mixing {
            Mixing::RoundRobin => (self.draws % self.streams.len() as u64) as usize,
            Mixing::Proportional => {
                let total: usize = self.streams.iter().map(Stream::examples).sum();
                let mut r = ChaCha8Rng::seed_from_u64(mix(&[self.seed, 0x9a11, self.draws])).gen_range(0..total);
                for (i, s) in self.streams.iter().enumerate() {
                    if r < s.examples() {
                        return i;
                    }
                    r -= s.examples();
                }
                self.streams.len() - 1
            }
        }
    }

    pub fn next_batch(&mut self) -> (usize, &Batch) {
        let si = self.pick_stream();
        let k = self.per_stream[si];
        let nb = self.streams[si].batches.len() as u64;
        let epoch = k / nb;
        if self.orders[si].0 != epoch {
            let mut order: Vec<usize> = (0..nb as usize).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[self.seed, si as u64, epoch])));
            self.orders[si] = (epoch, order);
        }
        let bi = self.orders[si].1[(k % nb) as usize];
        self.per_stream[si] += 1;
        self.draws += 1;
        (si, &self.streams[si].batches[bi])
    }

    /// Skip ahead to the state after `draws` draws from the start.
    pub fn fast_forward(&mut self, draws: u64) {
        self.draws = 0;
        self.per_stream.iter_mut().for_each(|c| *c = 0);
        for _ in 0..draws {
            let si = self.pick_stream();
            self.per_stream[si] += 1;
            self.draws += 1;
        }
    }
}
