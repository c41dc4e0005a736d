//! Windowing, labeling, stratified splitting and the binary dataset format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::metrics::snr_db;
use crate::sim::{inject_noise, random_layout, synthesize_clean_trace, EventType, LayoutConfig, SimConfig, Trace};

pub const DATASET_MAGIC: &[u8; 8] = b"OTDRDS1\0";
/// Stored in place of a position for event-free windows.
pub const NO_POSITION: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventClass {
    NoEvent = 0,
    Reflective = 1,
    NonReflective = 2,
    Merged = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cause {
    NoEvent = 0,
    FiberCut = 1,
    FiberBend = 2,
    DirtyConnector = 3,
}

impl EventClass {
    pub const ALL: [EventClass; 4] = [Self::NoEvent, Self::Reflective, Self::NonReflective, Self::Merged];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| invalid(format!("event class {i} out of range")))
    }

    pub fn cause(self) -> Cause {
        match self {
            Self::NoEvent => Cause::NoEvent,
            Self::Reflective => Cause::FiberCut,
            Self::NonReflective => Cause::FiberBend,
            Self::Merged => Cause::DirtyConnector,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NoEvent => "no_event",
            Self::Reflective => "reflective",
            Self::NonReflective => "non_reflective",
            Self::Merged => "merged",
        }
    }
}

impl From<EventType> for EventClass {
    fn from(t: EventType) -> Self {
        match t {
            EventType::Reflective => Self::Reflective,
            EventType::NonReflective => Self::NonReflective,
            EventType::Merged => Self::Merged,
        }
    }
}

impl Cause {
    pub const ALL: [Cause; 4] = [Self::NoEvent, Self::FiberCut, Self::FiberBend, Self::DirtyConnector];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| invalid(format!("cause {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NoEvent => "no_event",
            Self::FiberCut => "fiber_cut",
            Self::FiberBend => "fiber_bend",
            Self::DirtyConnector => "dirty_connector",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub noisy: Vec<f64>,
    pub clean: Vec<f64>,
    pub event_type: EventClass,
    /// Event index within the window; `None` for event-free windows.
    pub position: Option<u8>,
    pub cause: Cause,
    pub snr_in_db: f64,
}

/// Min-max scaling with clamping. A flat range maps to 0.5 everywhere and
/// sets the returned flag.
pub fn normalize_sequence(x: &[f64], lo: f64, hi: f64) -> (Vec<f64>, bool) {
    if hi <= lo {
        return (vec![0.5; x.len()], true);
    }
    let y = x.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect();
    (y, false)
}

/// Zeroes each element independently with probability `mask_prob`.
pub fn corrupt_mask(x: &[f64], mask_prob: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(invalid(format!("mask probability {mask_prob} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(x.iter()
        .map(|&v| if rng.random_bool(mask_prob) { 0.0 } else { v })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowOpts {
    pub len: usize,
    pub stride: usize,
}

impl Default for WindowOpts {
    fn default() -> Self {
        WindowOpts { len: 100, stride: 100 }
    }
}

/// Start offsets of every full window.
pub fn window_starts(n: usize, w: WindowOpts) -> Vec<usize> {
    if n < w.len || w.stride == 0 {
        return Vec::new();
    }
    (0..=(n - w.len) / w.stride).map(|k| k * w.stride).collect()
}

/// Half-width in samples of the region an event visibly disturbs: the pulse
/// width for steps, and for peaks the distance at which the Gaussian falls
/// to 1% of the backscatter level it sits on.
pub fn event_footprint(cfg: &SimConfig, reflect_height_db: f64) -> usize {
    let pulse = (cfg.pulse_width_m() / cfg.sample_spacing_m()).ceil() as usize;
    if reflect_height_db <= 0.0 {
        return pulse;
    }
    let gain = 10f64.powf(reflect_height_db / 10.0) - 1.0;
    let reach = cfg.peak_sigma_samples() * (2.0 * (100.0 * gain).max(1.0).ln()).sqrt();
    pulse.max(reach.ceil() as usize)
}

/// Cuts aligned clean/noisy traces into labeled windows, each scaled by the
/// maximum of its clean samples. Returns `(start, sequence)` pairs.
///
/// Windows are dropped when they hold two events, when an event outside
/// them spills in, or when they lie entirely beyond a fiber cut.
pub fn segment_and_label(
    cfg: &SimConfig,
    clean: &Trace,
    noisy: &Trace,
    w: WindowOpts,
) -> Result<Vec<(usize, LabeledSequence)>> {
    if clean.samples.len() != noisy.samples.len() || clean.events != noisy.events {
        return Err(invalid("clean and noisy traces are not aligned"));
    }
    if w.len == 0 || w.len > NO_POSITION as usize || w.stride == 0 {
        return Err(invalid(format!("window length {} / stride {} unsupported", w.len, w.stride)));
    }
    let dz = clean.sample_spacing_m;
    let events: Vec<(usize, usize, EventClass)> = clean
        .events
        .iter()
        .map(|e| (e.sample_index(dz), event_footprint(cfg, e.reflect_height_db), e.event_type.into()))
        .collect();
    let end = clean
        .events
        .iter()
        .find(|e| e.terminates_fiber)
        .map(|e| e.sample_index(dz));
    let mut out = Vec::new();
    for start in window_starts(clean.samples.len(), w) {
        let stop = start + w.len;
        if end.is_some_and(|p| start > p) {
            break;
        }
        let inside: Vec<_> = events.iter().filter(|e| (start..stop).contains(&e.0)).collect();
        let touching = events
            .iter()
            .filter(|(p, f, _)| p + f >= start && *p < stop + f)
            .count();
        if inside.len() > 1 || touching > inside.len() {
            continue;
        }
        let c = &clean.samples[start..stop];
        let hi = c.iter().copied().fold(f64::MIN, f64::max);
        if hi <= 0.0 {
            continue;
        }
        let clean_w: Vec<f64> = c.iter().map(|v| v / hi).collect();
        let noisy_w: Vec<f64> = noisy.samples[start..stop].iter().map(|v| v / hi).collect();
        let snr_in_db = snr_db(&clean_w, &noisy_w)?;
        let (event_type, position) = match inside.first() {
            Some((p, _, class)) => (*class, Some((p - start) as u8)),
            None => (EventClass::NoEvent, None),
        };
        out.push((
            start,
            LabeledSequence {
                noisy: noisy_w,
                clean: clean_w,
                event_type,
                position,
                cause: event_type.cause(),
                snr_in_db,
            },
        ));
    }
    Ok(out)
}

/// Index of the grid value nearest to `snr`, if within `tolerance`.
pub fn bucket_of(snr: f64, grid: &[f64], tolerance: f64) -> Option<usize> {
    let (i, d) = grid
        .iter()
        .enumerate()
        .map(|(i, g)| (i, (snr - g).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    (d <= tolerance).then_some(i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Upper bound on simulated traces while filling the quotas.
    pub n_traces: usize,
    pub snr_grid: Vec<f64>,
    /// Windows are assigned to the nearest grid value within this distance
    /// of their own input SNR; others are dropped.
    pub bucket_tolerance_db: f64,
    /// Whole-trace SNR drawn uniformly from this range per trace.
    pub trace_snr_db: (f64, f64),
    pub windows_per_bucket: usize,
    /// Share of each bucket per event class, in class order.
    pub class_fractions: [f64; 4],
    pub window_len: usize,
    pub stride: usize,
    pub mask_prob_range: (f64, f64),
    pub split: (f64, f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_traces: 60_000,
            snr_grid: vec![-5.0, -3.0, -1.0, 0.0, 1.0, 3.0, 5.0, 10.0, 15.0],
            bucket_tolerance_db: 0.5,
            trace_snr_db: (-10.0, 30.0),
            windows_per_bucket: 1200,
            class_fractions: [0.4, 0.2, 0.2, 0.2],
            window_len: 100,
            stride: 100,
            mask_prob_range: (0.02, 0.15),
            split: (0.6, 0.2, 0.2),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_grid.is_empty() || self.snr_grid.iter().any(|g| !g.is_finite()) {
            return Err(invalid("SNR grid must be non-empty and finite"));
        }
        let (a, b, c) = self.split;
        if a <= 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(invalid("split fractions must be non-negative and sum to 1"));
        }
        if self.class_fractions.iter().any(|f| *f < 0.0) || (self.class_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("class fractions must be non-negative and sum to 1"));
        }
        let (lo, hi) = self.mask_prob_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(invalid("mask probability range must lie within [0, 1]"));
        }
        if self.trace_snr_db.0 > self.trace_snr_db.1 {
            return Err(invalid("trace SNR range is empty"));
        }
        if self.window_len == 0 || self.window_len >= NO_POSITION as usize || self.stride == 0 {
            return Err(invalid("window length must be in 1..255 and stride positive"));
        }
        Ok(())
    }

    pub fn windows(&self) -> WindowOpts {
        WindowOpts {
            len: self.window_len,
            stride: self.stride,
        }
    }

    /// Windows wanted per (bucket, class) cell.
    pub fn quota(&self, class: usize) -> usize {
        (self.windows_per_bucket as f64 * self.class_fractions[class]).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config_hash: String,
    pub seed: u64,
    pub window_len: usize,
    pub snr_grid: Vec<f64>,
    pub bucket_tolerance_db: f64,
    pub traces_used: usize,
    pub counts: BTreeMap<String, usize>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<LabeledSequence>,
    pub val: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
}

impl Dataset {
    pub fn part(&self, split: Split) -> &[LabeledSequence] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn bucket(&self, s: &LabeledSequence) -> Option<usize> {
        bucket_of(s.snr_in_db, &self.meta.snr_grid, self.meta.bucket_tolerance_db + 1e-6)
    }
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

/// Stores values exactly as the float32 file will.
fn quantize(mut s: LabeledSequence) -> LabeledSequence {
    round_f32(&mut s.noisy);
    round_f32(&mut s.clean);
    s.snr_in_db = snr_db(&s.clean, &s.noisy).unwrap_or(s.snr_in_db) as f32 as f64;
    s
}

fn trace_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn simulate(sim: &SimConfig, layout: &LayoutConfig, dc: &DatasetConfig, seed: u64, index: u64) -> Result<Vec<LabeledSequence>> {
    let mut rng = trace_rng(seed, index);
    let events = random_layout(sim, layout, &mut rng);
    let clean = synthesize_clean_trace(sim, &events)?;
    let (lo, hi) = dc.trace_snr_db;
    let target = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let noisy = inject_noise(&clean, target, rng.random())?;
    Ok(segment_and_label(sim, &clean, &noisy, dc.windows())?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

/// Simulates traces until every (SNR bucket, event class) cell holds its
/// quota, then splits each cell 60/20/20 (by default).
///
/// Traces are generated in parallel, but windows are accepted strictly in
/// trace order, so the result depends only on the configuration and seed.
pub fn build_datasets(
    sim: &SimConfig,
    layout: &LayoutConfig,
    dc: &DatasetConfig,
    seed: u64,
    config_hash: &str,
) -> Result<Dataset> {
    sim.validate()?;
    layout.validate()?;
    dc.validate()?;
    let nb = dc.snr_grid.len();
    let quotas: Vec<usize> = (0..4).map(|c| dc.quota(c)).collect();
    let mut cells: Vec<Vec<LabeledSequence>> = vec![Vec::new(); nb * 4];
    let mut missing: usize = quotas.iter().sum::<usize>() * nb;
    const BATCH: usize = 256;
    let mut used = 0usize;
    while missing > 0 && used < dc.n_traces {
        let count = BATCH.min(dc.n_traces - used);
        let batch = (used..used + count)
            .into_par_iter()
            .map(|i| simulate(sim, layout, dc, seed, i as u64))
            .collect::<Result<Vec<_>>>()?;
        for windows in batch {
            used += 1;
            for s in windows {
                let Some(b) = bucket_of(s.snr_in_db, &dc.snr_grid, dc.bucket_tolerance_db) else {
                    continue;
                };
                let c = s.event_type.index();
                let cell = &mut cells[b * 4 + c];
                if cell.len() < quotas[c] {
                    cell.push(quantize(s));
                    missing -= 1;
                }
            }
            if missing == 0 {
                break;
            }
        }
    }
    if missing > 0 {
        let filled = quotas.iter().sum::<usize>() * nb - missing;
        let needed = match (used * (filled + missing)).checked_div(filled) {
            Some(n) => format!("about {}", n + 1),
            None => "unknown".to_string(),
        };
        return Err(invalid(format!(
            "{used} traces filled only {filled} of {} windows; raise n_traces ({needed} needed)",
            filled + missing
        )));
    }

    let mut rng = trace_rng(seed, u64::MAX);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut cell in cells {
        cell.shuffle(&mut rng);
        let n = cell.len();
        let n_train = (dc.split.0 * n as f64).round() as usize;
        let n_val = ((dc.split.1 * n as f64).round() as usize).min(n - n_train);
        let rest = cell.split_off(n_train);
        train.extend(cell);
        let mut rest = rest;
        let tail = rest.split_off(n_val);
        val.extend(rest);
        test.extend(tail);
    }
    let counts = BTreeMap::from([
        ("train".to_string(), train.len()),
        ("val".to_string(), val.len()),
        ("test".to_string(), test.len()),
    ]);
    let config = serde_json::json!({ "sim": sim, "layout": layout, "dataset": dc });
    Ok(Dataset {
        meta: DatasetMeta {
            config_hash: config_hash.to_string(),
            seed,
            window_len: dc.window_len,
            snr_grid: dc.snr_grid.clone(),
            bucket_tolerance_db: dc.bucket_tolerance_db,
            traces_used: used,
            counts,
            config,
        },
        train,
        val,
        test,
    })
}

/// Training inputs for the fault network: clean windows with random zeros,
/// the rate drawn per window from `mask_prob_range`.
pub fn corrupted_inputs(seqs: &[LabeledSequence], mask_prob_range: (f64, f64), seed: u64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.iter().map(|s| s.clean.len()).sum());
    for (i, s) in seqs.iter().enumerate() {
        let mut rng = trace_rng(seed, i as u64);
        let (lo, hi) = mask_prob_range;
        let p = if hi > lo { rng.random_range(lo..hi) } else { lo };
        out.extend(corrupt_mask(&s.clean, p, rng.random())?);
    }
    Ok(out)
}

fn put_f32s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let meta = serde_json::to_vec(&ds.meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        put_f32s(&mut buf, &s.noisy);
        put_f32s(&mut buf, &s.clean);
        buf.push(s.event_type as u8);
        buf.push(s.position.unwrap_or(NO_POSITION));
        buf.push(s.cause as u8);
        buf.extend_from_slice(&(s.snr_in_db as f32).to_le_bytes());
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, detail: impl Into<String>) -> CoreError {
        CoreError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub(crate) fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let file = File::open(path).map_err(io_err(path))?;
    BufReader::new(file).read_to_end(&mut bytes).map_err(io_err(path))?;
    Ok(bytes)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read_all(path)?;
    let mut cur = Cursor { path, bytes: &bytes, pos: 0 };
    if cur.take(8, "magic")? != DATASET_MAGIC {
        cur.pos = 0;
        return Err(cur.fail("not an OTDRDS1 dataset (bad magic)"));
    }
    let n = u64::from_le_bytes(cur.take(8, "metadata length")?.try_into().expect("8 bytes")) as usize;
    let meta: DatasetMeta = serde_json::from_slice(cur.take(n, "metadata")?)
        .map_err(|e| cur.fail(format!("metadata: {e}")))?;
    let len = meta.window_len;
    let mut parts: Vec<Vec<LabeledSequence>> = Vec::new();
    for name in ["train", "val", "test"] {
        let count = *meta.counts.get(name).ok_or_else(|| cur.fail(format!("metadata lacks {name} count")))?;
        let mut part = Vec::with_capacity(count);
        for _ in 0..count {
            let noisy = cur.f32s(len, "noisy window")?;
            let clean = cur.f32s(len, "clean window")?;
            let at = cur.pos;
            let labels = cur.take(3, "labels")?;
            let event_type = EventClass::from_index(labels[0] as usize).map_err(|_| {
                cur.pos = at;
                cur.fail(format!("event type {}", labels[0]))
            })?;
            let cause = Cause::from_index(labels[2] as usize).map_err(|_| {
                cur.pos = at + 2;
                cur.fail(format!("cause {}", labels[2]))
            })?;
            let position = (labels[1] != NO_POSITION).then_some(labels[1]);
            if (event_type == EventClass::NoEvent) != position.is_none() || event_type.cause() != cause {
                cur.pos = at;
                return Err(cur.fail("inconsistent labels"));
            }
            let snr_in_db = cur.f32s(1, "snr")?[0];
            part.push(LabeledSequence {
                noisy,
                clean,
                event_type,
                position,
                cause,
                snr_in_db,
            });
        }
        parts.push(part);
    }
    if cur.pos != bytes.len() {
        return Err(cur.fail("trailing bytes after the last record"));
    }
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(Dataset { meta, train, val, test })
}

/// Mirrors the records as CSV for inspection.
pub fn write_dataset_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let len = ds.meta.window_len;
    let mut header: Vec<String> = ["split", "index", "e_t", "e_p", "e_c", "snr_in_db"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..len).map(|i| format!("noisy_{i}")));
    header.extend((0..len).map(|i| format!("clean_{i}")));
    w.write_record(&header)?;
    for (name, part) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        for (i, s) in part.iter().enumerate() {
            let mut row = vec![
                name.to_string(),
                i.to_string(),
                (s.event_type as u8).to_string(),
                s.position.unwrap_or(NO_POSITION).to_string(),
                (s.cause as u8).to_string(),
                (s.snr_in_db as f32).to_string(),
            ];
            row.extend(s.noisy.iter().chain(&s.clean).map(|v| (*v as f32).to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::EventSpec;

    #[test]
    fn normalize_contract() {
        assert_eq!(normalize_sequence(&[2.0, 4.0], 2.0, 4.0).0, vec![0.0, 1.0]);
        assert_eq!(normalize_sequence(&[2.0; 3], 2.0, 4.0).0, vec![0.0; 3]);
        assert_eq!(normalize_sequence(&[1.0], 2.0, 4.0).0, vec![0.0]);
        let (y, flat) = normalize_sequence(&[3.0, 3.0], 3.0, 3.0);
        assert!(flat);
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn mask_extremes() {
        let x = vec![0.3; 100];
        assert_eq!(corrupt_mask(&x, 0.0, 1).unwrap(), x);
        assert_eq!(corrupt_mask(&x, 1.0, 1).unwrap(), vec![0.0; 100]);
        assert!(corrupt_mask(&x, 1.5, 1).is_err());
        assert_eq!(corrupt_mask(&x, 0.3, 7).unwrap(), corrupt_mask(&x, 0.3, 7).unwrap());
    }

    #[test]
    fn window_accounting() {
        assert_eq!(window_starts(6120, WindowOpts::default()).len(), 61);
        assert_eq!(window_starts(99, WindowOpts::default()).len(), 0);
        let w = WindowOpts { len: 100, stride: 50 };
        assert_eq!(window_starts(1000, w).len(), (1000 - 100) / 50 + 1);
    }

    #[test]
    fn buckets() {
        let grid = [-5.0, -3.0, 0.0];
        assert_eq!(bucket_of(-2.6, &grid, 0.5), Some(1));
        assert_eq!(bucket_of(-1.5, &grid, 0.5), None);
        assert_eq!(bucket_of(0.4, &grid, 0.5), Some(2));
    }

    #[test]
    fn labels_event_windows() {
        let sim = SimConfig::default();
        let dz = sim.sample_spacing_m();
        let events = vec![
            EventSpec {
                position_m: 1234.0 * dz,
                event_type: EventType::NonReflective,
                loss_db: 2.0,
                reflect_height_db: 0.0,
                terminates_fiber: false,
            },
            EventSpec {
                position_m: 2050.0 * dz,
                event_type: EventType::Reflective,
                loss_db: 0.0,
                reflect_height_db: 10.0,
                terminates_fiber: true,
            },
        ];
        let clean = synthesize_clean_trace(&sim, &events).unwrap();
        let noisy = inject_noise(&clean, 20.0, 1).unwrap();
        let seqs = segment_and_label(&sim, &clean, &noisy, WindowOpts::default()).unwrap();
        let at = |s: usize| seqs.iter().find(|(st, _)| *st == s).map(|(_, q)| q);
        let w = at(1200).unwrap();
        assert_eq!((w.event_type, w.position, w.cause), (EventClass::NonReflective, Some(34), Cause::FiberBend));
        let w = at(2000).unwrap();
        assert_eq!((w.event_type, w.position), (EventClass::Reflective, Some(50)));
        let w = at(500).unwrap();
        assert_eq!((w.event_type, w.position, w.cause), (EventClass::NoEvent, None, Cause::NoEvent));
        // nothing past the cut
        assert!(seqs.iter().all(|(s, _)| *s <= 2050));
        for (_, s) in &seqs {
            assert_eq!(s.clean.len(), 100);
            assert!(s.clean.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((snr_db(&s.clean, &s.noisy).unwrap() - s.snr_in_db).abs() < 1e-9);
        }
    }

    #[test]
    fn two_events_in_one_window_are_dropped() {
        let sim = SimConfig::default();
        let dz = sim.sample_spacing_m();
        let nr = |i: f64| EventSpec {
            position_m: i * dz,
            event_type: EventType::NonReflective,
            loss_db: 1.0,
            reflect_height_db: 0.0,
            terminates_fiber: false,
        };
        let clean = synthesize_clean_trace(&sim, &[nr(1220.0), nr(1270.0)]).unwrap();
        let noisy = inject_noise(&clean, 20.0, 1).unwrap();
        let seqs = segment_and_label(&sim, &clean, &noisy, WindowOpts::default()).unwrap();
        assert!(seqs.iter().all(|(s, _)| *s != 1200));
    }
}
