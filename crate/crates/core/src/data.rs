//! Click-stream ingestion, the normalized corpus file, train/test splits,
//! session-parallel batching and synthetic corpora.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::numerics::{fnv1a, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub item: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub events: Vec<Event>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        self.events.iter().map(|e| e.item)
    }

    pub fn start(&self) -> i64 {
        self.events.first().map_or(i64::MIN, |e| e.timestamp)
    }

    pub fn end(&self) -> i64 {
        self.events.last().map_or(i64::MIN, |e| e.timestamp)
    }
}

/// Raw item id ↔ dense index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemVocab {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_raw(raw: Vec<String>) -> Result<Self> {
        let mut vocab = ItemVocab::new();
        for id in raw {
            let before = vocab.len();
            if vocab.intern(&id) != before {
                return Err(Error::Format(format!("duplicate vocabulary entry `{id}`")));
            }
        }
        Ok(vocab)
    }

    /// Index of `raw`, inserting it if unseen.
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len();
        self.raw.push(raw.to_owned());
        self.index.insert(raw.to_owned(), i);
        i
    }

    pub fn index(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, index: usize) -> Option<&str> {
        self.raw.get(index).map(String::as_str)
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Sessions together with the vocabulary their item indices refer to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: ItemVocab,
    pub sessions: Vec<Session>,
}

impl Corpus {
    pub fn num_events(&self) -> usize {
        self.sessions.iter().map(Session::len).sum()
    }
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub delimiter: u8,
    /// Abort on the first malformed row instead of skipping it.
    pub strict: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            delimiter: b',',
            strict: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows: usize,
    pub malformed_rows: usize,
    pub header_skipped: bool,
    pub dropped_sessions: usize,
}

/// Parses epoch seconds (integer or fractional) or an ISO-8601 timestamp.
pub fn parse_timestamp(field: &str) -> Option<i64> {
    let field = field.trim();
    if let Ok(secs) = field.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(secs) = field.parse::<f64>() {
        return secs.is_finite().then(|| secs.floor() as i64);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(field) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(field, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

pub fn ingest(path: &Path, options: &IngestOptions) -> Result<(Corpus, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(file), options)
}

/// Reads `(session_id, timestamp, item_id)` rows; extra columns are ignored.
/// A leading row whose timestamp does not parse is taken as a header.
pub fn ingest_reader<R: Read>(reader: R, options: &IngestOptions) -> Result<(Corpus, IngestReport)> {
    let mut csv = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);

    let mut report = IngestReport::default();
    let mut vocab = ItemVocab::new();
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<(i64, usize, usize)>> = HashMap::new();

    for (line, record) in csv.records().enumerate() {
        let record = match record {
            Ok(r) => r,
            Err(e) if options.strict => return Err(Error::Data(format!("row {}: {e}", line + 1))),
            Err(_) => {
                report.malformed_rows += 1;
                continue;
            }
        };
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let parsed = (|| {
            if record.len() < 3 {
                return None;
            }
            let sid = record.get(0)?.trim();
            let item = record.get(2)?.trim();
            if sid.is_empty() || item.is_empty() {
                return None;
            }
            Some((sid.to_owned(), parse_timestamp(record.get(1)?)?, item.to_owned()))
        })();
        let Some((sid, ts, item)) = parsed else {
            if line == 0 && report.rows == 0 && !report.header_skipped {
                report.header_skipped = true;
                continue;
            }
            if options.strict {
                return Err(Error::Data(format!("row {}: malformed record {:?}", line + 1, record)));
            }
            report.malformed_rows += 1;
            continue;
        };
        let idx = vocab.intern(&item);
        let seq = report.rows;
        report.rows += 1;
        grouped
            .entry(sid.clone())
            .or_insert_with(|| {
                order.push(sid);
                Vec::new()
            })
            .push((ts, seq, idx));
    }
    if report.malformed_rows > 0 {
        warn!("skipped {} malformed rows", report.malformed_rows);
    }

    let mut sessions = Vec::with_capacity(order.len());
    for sid in order {
        let mut rows = grouped.remove(&sid).unwrap_or_default();
        if rows.len() < 2 {
            report.dropped_sessions += 1;
            continue;
        }
        rows.sort_by_key(|&(ts, seq, _)| (ts, seq));
        sessions.push(Session {
            id: sid,
            events: rows
                .into_iter()
                .map(|(timestamp, _, item)| Event { timestamp, item })
                .collect(),
        });
    }
    if report.dropped_sessions > 0 {
        warn!("dropped {} single-event sessions", report.dropped_sessions);
    }
    if sessions.is_empty() {
        return Err(Error::Data("no sessions with at least two events".into()));
    }
    // stable: ties keep first-appearance order
    sessions.sort_by_key(Session::start);
    Ok((Corpus { vocab, sessions }, report))
}

pub const CORPUS_MAGIC: &[u8; 8] = b"VRCORPUS";
pub const CORPUS_VERSION: u32 = 1;

pub(crate) fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub(crate) fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

pub(crate) fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

/// Cursor over an in-memory byte buffer with truncation-checked reads.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub(crate) fn varint(&mut self) -> Result<u64> {
        let mut v: u64 = 0;
        for shift in (0..64).step_by(7) {
            let b = self.take(1)?[0];
            v |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(Error::Format("varint longer than 10 bytes".into()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.varint()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("invalid utf-8 string".into()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn write_string(out: &mut Vec<u8>, s: &str) {
    write_varint(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

/// Serializes the corpus. Layout (all integers little-endian):
///
/// ```text
/// magic "VRCORPUS" | version u32 | reserved u32 (0)
/// vocab count varint, then per item: byte length varint + utf-8 raw id
/// session count varint, then per session:
///   id (length varint + utf-8) | event count varint
///   first event: zigzag(timestamp) varint, item varint
///   later events: (timestamp − previous) varint, item varint
/// ```
pub fn encode_corpus(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    write_varint(&mut out, corpus.vocab.len() as u64);
    for raw in corpus.vocab.raw_ids() {
        write_string(&mut out, raw);
    }
    write_varint(&mut out, corpus.sessions.len() as u64);
    for s in &corpus.sessions {
        write_string(&mut out, &s.id);
        write_varint(&mut out, s.events.len() as u64);
        let mut prev = None;
        for e in &s.events {
            match prev {
                None => write_varint(&mut out, zigzag(e.timestamp)),
                Some(p) => write_varint(&mut out, (e.timestamp - p) as u64),
            }
            write_varint(&mut out, e.item as u64);
            prev = Some(e.timestamp);
        }
    }
    out
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut r = ByteReader::new(bytes);
    if r.take(8).ok() != Some(CORPUS_MAGIC.as_slice()) {
        return Err(Error::Format("not a corpus file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::Format(format!(
            "unsupported corpus version {version} (expected {CORPUS_VERSION})"
        )));
    }
    r.u32()?;
    let m = r.varint()? as usize;
    let raw = (0..m).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = ItemVocab::from_raw(raw)?;
    let n = r.varint()? as usize;
    let mut sessions = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let id = r.string()?;
        let len = r.varint()? as usize;
        let mut events = Vec::with_capacity(len.min(1 << 16));
        let mut prev: Option<i64> = None;
        for _ in 0..len {
            let t = r.varint()?;
            let timestamp = match prev {
                None => unzigzag(t),
                Some(p) => p + t as i64,
            };
            let item = r.varint()? as usize;
            if item >= m {
                return Err(Error::Format(format!("item index {item} outside vocabulary of {m}")));
            }
            events.push(Event { timestamp, item });
            prev = Some(timestamp);
        }
        sessions.push(Session { id, events });
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after last session".into()));
    }
    Ok(Corpus { vocab, sessions })
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    crate::write_atomic(path, &encode_corpus(corpus))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitRule {
    /// Sessions whose last event is at or after `cutoff` go to test.
    ByTime { cutoff: i64 },
    /// The `n_test` sessions ending latest go to test.
    ByCount { n_test: usize },
    /// A session goes to test when its keyed hash falls below `fraction`.
    ByHash { fraction: f64, seed: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub filtered_events: usize,
    pub dropped_test_sessions: usize,
}

/// Assigns each session to train (`false`) or test (`true`).
pub fn split_assignment(sessions: &[Session], rule: &SplitRule) -> Result<Vec<bool>> {
    Ok(match *rule {
        SplitRule::ByTime { cutoff } => sessions.iter().map(|s| s.end() >= cutoff).collect(),
        SplitRule::ByCount { n_test } => {
            let mut order: Vec<usize> = (0..sessions.len()).collect();
            // latest end first; among equal ends, later corpus position first
            order.sort_by_key(|&i| std::cmp::Reverse((sessions[i].end(), i)));
            let mut test = vec![false; sessions.len()];
            for &i in order.iter().take(n_test) {
                test[i] = true;
            }
            test
        }
        SplitRule::ByHash { fraction, seed } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::Config(format!("hash fraction {fraction} outside [0, 1]")));
            }
            sessions
                .iter()
                .map(|s| {
                    let mut key = seed.to_le_bytes().to_vec();
                    key.extend_from_slice(s.id.as_bytes());
                    ((fnv1a(&key) >> 11) as f64 / (1u64 << 53) as f64) < fraction
                })
                .collect()
        }
    })
}

/// Partitions sessions into train and test. Test events whose item never
/// occurs in train are removed; test sessions left with fewer than two
/// events are dropped.
pub fn split(sessions: &[Session], rule: &SplitRule) -> Result<(Vec<Session>, Vec<Session>, SplitReport)> {
    let assign = split_assignment(sessions, rule)?;
    let (mut train, mut raw_test) = (Vec::new(), Vec::new());
    for (s, &is_test) in sessions.iter().zip(&assign) {
        if is_test {
            raw_test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    if train.is_empty() {
        return Err(Error::Data("split produced an empty training set".into()));
    }
    let seen: HashSet<usize> = train.iter().flat_map(Session::items).collect();
    let mut report = SplitReport::default();
    let mut test = Vec::with_capacity(raw_test.len());
    for mut s in raw_test {
        let before = s.events.len();
        s.events.retain(|e| seen.contains(&e.item));
        report.filtered_events += before - s.events.len();
        if s.events.len() < 2 {
            report.dropped_test_sessions += 1;
        } else {
            test.push(s);
        }
    }
    if test.is_empty() {
        return Err(Error::Data("split produced an empty test set".into()));
    }
    report.train_sessions = train.len();
    report.test_sessions = test.len();
    Ok((train, test, report))
}

/// One session-parallel step. Inactive lanes carry no event and are
/// excluded from the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub reset: Vec<bool>,
    pub active: Vec<bool>,
    /// Position of the lane's session in the batched slice.
    pub session: Vec<usize>,
}

impl SessionBatch {
    pub fn width(&self) -> usize {
        self.inputs.len()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Session-parallel mini-batches: each lane walks one session an event pair
/// at a time and is refilled from the queue (with `reset`) when its session
/// runs out. Sessions shorter than two events are skipped.
pub struct Batcher<'a> {
    sessions: &'a [Session],
    order: Vec<usize>,
    next: usize,
    /// (session position, index of the current input event)
    lanes: Vec<Option<(usize, usize)>>,
    fresh: Vec<bool>,
}

impl<'a> Batcher<'a> {
    pub fn new(sessions: &'a [Session], beta: usize) -> Self {
        Self::with_order(sessions, (0..sessions.len()).collect(), beta)
    }

    /// Batches `sessions` in the given queue order.
    pub fn with_order(sessions: &'a [Session], order: Vec<usize>, beta: usize) -> Self {
        assert!(beta >= 1, "batch size must be at least 1");
        let order: Vec<usize> = order.into_iter().filter(|&i| sessions[i].len() >= 2).collect();
        let mut width = beta;
        if order.len() < beta {
            warn!(
                "batch size {beta} exceeds usable session count {}; lowering",
                order.len()
            );
            width = order.len().max(1);
        }
        let mut b = Batcher {
            sessions,
            order,
            next: 0,
            lanes: vec![None; width],
            fresh: vec![false; width],
        };
        for lane in 0..width {
            b.refill(lane);
        }
        b
    }

    pub fn width(&self) -> usize {
        self.lanes.len()
    }

    fn refill(&mut self, lane: usize) {
        self.lanes[lane] = self.order.get(self.next).map(|&s| (s, 0));
        if self.lanes[lane].is_some() {
            self.next += 1;
        }
        self.fresh[lane] = true;
    }
}

impl Iterator for Batcher<'_> {
    type Item = SessionBatch;

    fn next(&mut self) -> Option<SessionBatch> {
        let width = self.lanes.len();
        for lane in 0..width {
            if let Some((s, pos)) = self.lanes[lane] {
                if pos + 1 >= self.sessions[s].len() {
                    self.refill(lane);
                }
            }
        }
        if self.lanes.iter().all(Option::is_none) {
            return None;
        }
        let mut batch = SessionBatch {
            inputs: vec![0; width],
            targets: vec![0; width],
            reset: vec![false; width],
            active: vec![false; width],
            session: vec![0; width],
        };
        for lane in 0..width {
            if let Some((s, pos)) = self.lanes[lane] {
                let ev = &self.sessions[s].events;
                batch.inputs[lane] = ev[pos].item;
                batch.targets[lane] = ev[pos + 1].item;
                batch.reset[lane] = self.fresh[lane];
                batch.active[lane] = true;
                batch.session[lane] = s;
                self.lanes[lane] = Some((s, pos + 1));
            }
            self.fresh[lane] = false;
        }
        Some(batch)
    }
}

pub fn batcher(sessions: &[Session], beta: usize) -> Batcher<'_> {
    Batcher::new(sessions, beta)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Transition {
    Uniform,
    /// `i → (i + 1) mod m`
    Cyclic,
    /// Row-stochastic `m × m` matrix.
    Markov(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_items: usize,
    pub num_sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub transition: Transition,
    pub seed: u64,
}

fn draw_categorical(rng: &mut Rng, probs: &[f64]) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // rounding slack: last item with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Synthetic sessions; session `i` starts at hour `i`, one event per minute.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Vec<Session> {
    let m = spec.num_items;
    assert!(m >= 2, "need at least two items");
    assert!(
        spec.min_len >= 1 && spec.min_len <= spec.max_len,
        "invalid session length range"
    );
    if let Transition::Markov(t) = &spec.transition {
        assert_eq!(t.shape(), (m, m), "transition matrix must be m x m");
    }
    let mut rng = Rng::new(spec.seed);
    (0..spec.num_sessions)
        .map(|i| {
            let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
            let mut item = rng.below(m);
            let start = i as i64 * 3600;
            let mut events = Vec::with_capacity(len);
            for k in 0..len {
                if k > 0 {
                    item = match &spec.transition {
                        Transition::Uniform => rng.below(m),
                        Transition::Cyclic => (item + 1) % m,
                        Transition::Markov(t) => draw_categorical(&mut rng, t.row(item)),
                    };
                }
                events.push(Event {
                    timestamp: start + 60 * k as i64,
                    item,
                });
            }
            Session {
                id: format!("s{i}"),
                events,
            }
        })
        .collect()
}

/// Synthetic sessions wrapped with the identity vocabulary `"0".."m-1"`.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Corpus {
    let vocab = ItemVocab::from_raw((0..spec.num_items).map(|i| i.to_string()).collect())
        .expect("distinct ids");
    Corpus {
        vocab,
        sessions: gen_synthetic(spec),
    }
}

/// Row-stochastic matrix where each item has `fanout` distinct successors
/// with random weights.
pub fn sparse_markov(m: usize, fanout: usize, seed: u64) -> Matrix {
    assert!(fanout >= 1 && fanout <= m);
    let mut rng = Rng::new(seed);
    let mut t = Matrix::zeros(m, m);
    for i in 0..m {
        let mut succ: Vec<usize> = Vec::with_capacity(fanout);
        while succ.len() < fanout {
            let j = rng.below(m);
            if !succ.contains(&j) {
                succ.push(j);
            }
        }
        let w: Vec<f64> = succ.iter().map(|_| 0.1 + rng.uniform()).collect();
        let total: f64 = w.iter().sum();
        for (&j, wj) in succ.iter().zip(&w) {
            t[(i, j)] = wj / total;
        }
    }
    t
}
