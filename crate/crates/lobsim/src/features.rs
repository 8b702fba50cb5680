//! Conditioning features: per-feature formulas, the concatenated
//! multi-frame conditioning vector, feature overrides for fixing
//! experiments, and empirical percentile estimation.

use crate::book::{OrderBook, Side};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureId {
    /// Sum of bid+ask volume over the top n levels.
    TotalVol(usize),
    /// Bid volume share of the top n levels, in [0,1].
    BookImbalance(usize),
    Spread,
    /// Midprice percentage return over the trailing window (seconds).
    PctReturn(u32),
    /// Midprice percentage return over the trailing n book events.
    EventPctReturn(usize),
    /// Seller-initiated volume share of the trailing window (seconds).
    TradeImbalance(u32),
    /// Total executed volume over the trailing window (seconds).
    TradeVolume(u32),
    /// Book imbalance at a per-frame random level in {1..5}.
    ChiImbalance,
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureId::TotalVol(n) => write!(f, "vol{n}"),
            FeatureId::BookImbalance(n) => write!(f, "imb{n}"),
            FeatureId::Spread => write!(f, "spread"),
            FeatureId::PctReturn(s) => write!(f, "pct_return_{s}s"),
            FeatureId::EventPctReturn(n) => write!(f, "event_return_{n}"),
            FeatureId::TradeImbalance(s) => write!(f, "trade_imb_{s}s"),
            FeatureId::TradeVolume(s) => write!(f, "trade_vol_{s}s"),
            FeatureId::ChiImbalance => write!(f, "chi_imb"),
        }
    }
}

impl FeatureId {
    pub fn parse(name: &str) -> Option<FeatureId> {
        if let Some(n) = name.strip_prefix("imb") {
            if n != "" {
                return n.parse().ok().map(FeatureId::BookImbalance);
            }
        }
        if let Some(n) = name.strip_prefix("vol") {
            return n.parse().ok().map(FeatureId::TotalVol);
        }
        if name == "spread" {
            return Some(FeatureId::Spread);
        }
        if name == "chi_imb" {
            return Some(FeatureId::ChiImbalance);
        }
        if let Some(s) = name.strip_prefix("pct_return_") {
            return s.strip_suffix('s')?.parse().ok().map(FeatureId::PctReturn);
        }
        if let Some(n) = name.strip_prefix("event_return_") {
            return n.parse().ok().map(FeatureId::EventPctReturn);
        }
        if let Some(s) = name.strip_prefix("trade_imb_") {
            return s.strip_suffix('s')?.parse().ok().map(FeatureId::TradeImbalance);
        }
        if let Some(s) = name.strip_prefix("trade_vol_") {
            return s.strip_suffix('s')?.parse().ok().map(FeatureId::TradeVolume);
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecVersion {
    V0,
    V1,
    V2,
    V3,
}

/// Ordered feature list plus the 30-second concatenation layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub version: SpecVersion,
    pub features: Vec<FeatureId>,
    pub frame_count: usize,
    pub frame_spacing: f64,
}

impl FeatureSpec {
    /// The original conditioning feature list.
    pub fn v0() -> Self {
        use FeatureId::*;
        FeatureSpec {
            version: SpecVersion::V0,
            features: vec![
                BookImbalance(1),
                BookImbalance(5),
                TotalVol(1),
                TotalVol(5),
                Spread,
                EventPctReturn(1),
                EventPctReturn(50),
                TradeImbalance(60),
                TradeImbalance(300),
            ],
            frame_count: 6,
            frame_spacing: 5.0,
        }
    }

    /// v0 plus deeper-book, time-return and execution-volume features,
    /// minus the event-indexed returns.
    pub fn v1() -> Self {
        use FeatureId::*;
        FeatureSpec {
            version: SpecVersion::V1,
            features: vec![
                BookImbalance(1),
                BookImbalance(5),
                BookImbalance(10),
                TotalVol(1),
                TotalVol(5),
                TotalVol(10),
                Spread,
                PctReturn(60),
                PctReturn(300),
                TradeImbalance(60),
                TradeImbalance(300),
                TradeImbalance(600),
                TradeVolume(60),
                TradeVolume(300),
                TradeVolume(600),
            ],
            frame_count: 6,
            frame_spacing: 5.0,
        }
    }

    /// v1 without the level-1 imbalance.
    pub fn v2() -> Self {
        let mut spec = Self::v1();
        spec.version = SpecVersion::V2;
        spec.features.retain(|f| *f != FeatureId::BookImbalance(1));
        spec
    }

    /// v1 with all book-imbalance features replaced by the randomized
    /// chi-level imbalance.
    pub fn v3() -> Self {
        let mut spec = Self::v1();
        spec.version = SpecVersion::V3;
        spec.features
            .retain(|f| !matches!(f, FeatureId::BookImbalance(_)));
        spec.features.insert(0, FeatureId::ChiImbalance);
        spec
    }

    pub fn for_version(v: SpecVersion) -> Self {
        match v {
            SpecVersion::V0 => Self::v0(),
            SpecVersion::V1 => Self::v1(),
            SpecVersion::V2 => Self::v2(),
            SpecVersion::V3 => Self::v3(),
        }
    }

    pub fn dim(&self) -> usize {
        self.frame_count * self.features.len()
    }

    pub fn index_of(&self, id: FeatureId) -> Option<usize> {
        self.features.iter().position(|f| *f == id)
    }
}

/// Flat concatenation of feature frames, oldest frame first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningVector {
    pub values: Vec<f64>,
    pub frame_times: Vec<f64>,
}

impl ConditioningVector {
    /// Value of `id` in the most recent frame.
    pub fn latest(&self, spec: &FeatureSpec, id: FeatureId) -> Option<f64> {
        let i = spec.index_of(id)?;
        let per_frame = spec.features.len();
        let last = self.values.len().checked_sub(per_frame)?;
        Some(self.values[last + i])
    }
}

/// Fixed-value overrides applied to every frame of a conditioning vector.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OverrideSet {
    pub fixed: Vec<(FeatureId, f64)>,
}

impl OverrideSet {
    pub fn single(id: FeatureId, value: f64) -> Self {
        OverrideSet {
            fixed: vec![(id, value)],
        }
    }
    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("override targets feature {0} absent from the active spec")]
    UnknownOverride(String),
    #[error("need at least {need} samples per feature, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

/// Rolling market history feeding the feature formulas: signed trades,
/// midprices indexed both by wall-clock time and by event count, and the
/// recorded conditioning frames covering the trailing 30 seconds.
#[derive(Debug, Clone, Default)]
pub struct MarketState {
    /// (time, signed volume); positive = seller-initiated.
    trades: VecDeque<(f64, i64)>,
    /// Event-indexed midprices (twice the mid, exact in integer ticks).
    event_mid2: Vec<i64>,
    /// (time, mid2) whenever the mid was defined.
    timed_mid2: VecDeque<(f64, i64)>,
    frames: VecDeque<(f64, Vec<f64>)>,
    last_spread: f64,
    last_mid2: Option<i64>,
}

const TRADE_RETENTION: f64 = 660.0;
const MID_RETENTION: f64 = 360.0;
const FRAME_RETENTION: usize = 16;

impl MarketState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_trade(&mut self, time: f64, signed_volume: i64) {
        self.trades.push_back((time, signed_volume));
        while let Some(&(t, _)) = self.trades.front() {
            if time - t > TRADE_RETENTION {
                self.trades.pop_front();
            } else {
                break;
            }
        }
    }

    /// Called after every applied book event.
    pub fn record_event(&mut self, time: f64, book: &OrderBook) {
        let mid2 = book.mid2().or(self.last_mid2);
        if let Some(m) = mid2 {
            self.event_mid2.push(m);
            self.timed_mid2.push_back((time, m));
            self.last_mid2 = Some(m);
            while let Some(&(t, _)) = self.timed_mid2.front() {
                if time - t > MID_RETENTION && self.timed_mid2.len() > 1 {
                    self.timed_mid2.pop_front();
                } else {
                    break;
                }
            }
        }
        if let Some(s) = book.spread() {
            self.last_spread = s as f64;
        }
    }

    /// Seeds a known mid directly (warm history ingested with a start
    /// snapshot); times must arrive nondecreasing.
    pub fn record_mid(&mut self, time: f64, mid2: i64) {
        self.event_mid2.push(mid2);
        self.timed_mid2.push_back((time, mid2));
        self.last_mid2 = Some(mid2);
    }

    pub fn push_frame(&mut self, time: f64, values: Vec<f64>) {
        self.frames.push_back((time, values));
        while self.frames.len() > FRAME_RETENTION {
            self.frames.pop_front();
        }
    }

    pub fn event_count(&self) -> usize {
        self.event_mid2.len()
    }

    fn mid2_before(&self, cutoff: f64) -> Option<i64> {
        self.timed_mid2
            .iter()
            .rev()
            .find(|(t, _)| *t <= cutoff)
            .map(|&(_, m)| m)
            .or_else(|| self.timed_mid2.front().map(|&(_, m)| m))
    }

    fn trades_in(&self, from: f64, to: f64) -> impl Iterator<Item = i64> + '_ {
        self.trades
            .iter()
            .filter(move |(t, _)| *t >= from && *t <= to)
            .map(|&(_, v)| v)
    }
}

/// One feature value at time `now`. Degenerate windows fall back to the
/// documented neutral defaults.
pub fn compute_feature(
    state: &MarketState,
    book: &OrderBook,
    id: FeatureId,
    now: f64,
    chi_level: usize,
) -> f64 {
    match id {
        FeatureId::TotalVol(n) => {
            (book.total_volume(Side::Buy, n) + book.total_volume(Side::Sell, n)) as f64
        }
        FeatureId::BookImbalance(n) => book_imbalance(book, n),
        FeatureId::ChiImbalance => book_imbalance(book, chi_level),
        FeatureId::Spread => book.spread().map_or(state.last_spread, |s| s as f64),
        FeatureId::PctReturn(window) => {
            let now_mid = book.mid2().or(state.last_mid2);
            let then_mid = state.mid2_before(now - window as f64);
            match (now_mid, then_mid) {
                (Some(a), Some(b)) if b != 0 => (a - b) as f64 / b as f64,
                _ => 0.0,
            }
        }
        FeatureId::EventPctReturn(n) => {
            let j = state.event_mid2.len();
            if j == 0 || j <= n {
                return 0.0; // cold start
            }
            let a = state.event_mid2[j - 1];
            let b = state.event_mid2[j - 1 - n];
            if b == 0 {
                0.0
            } else {
                (a - b) as f64 / b as f64
            }
        }
        FeatureId::TradeImbalance(window) => {
            let mut pos = 0i64;
            let mut abs = 0i64;
            for v in state.trades_in(now - window as f64, now) {
                if v >= 0 {
                    pos += v;
                }
                abs += v.abs();
            }
            if abs == 0 {
                0.5 // empty window: neutral
            } else {
                pos as f64 / abs as f64
            }
        }
        FeatureId::TradeVolume(window) => state
            .trades_in(now - window as f64, now)
            .map(|v| v.abs())
            .sum::<i64>() as f64,
    }
}

fn book_imbalance(book: &OrderBook, n: usize) -> f64 {
    let bid = book.total_volume(Side::Buy, n);
    let ask = book.total_volume(Side::Sell, n);
    if bid + ask == 0 {
        return 0.5;
    }
    if ask == 0 {
        return 1.0;
    }
    if bid == 0 {
        return 0.0;
    }
    bid as f64 / (bid + ask) as f64
}

/// All features of `spec` at one instant (one frame).
pub fn compute_frame(
    state: &MarketState,
    book: &OrderBook,
    spec: &FeatureSpec,
    now: f64,
    chi_level: usize,
) -> Vec<f64> {
    spec.features
        .iter()
        .map(|&id| compute_feature(state, book, id, now, chi_level))
        .collect()
}

/// Assembles the concatenated conditioning vector from the recorded
/// frames, earliest-available data standing in for missing early frames,
/// with overridden features pinned in every frame.
pub fn build_conditioning(
    state: &MarketState,
    spec: &FeatureSpec,
    overrides: &OverrideSet,
    clock: f64,
) -> Result<ConditioningVector, FeatureError> {
    let override_idx: Vec<(usize, f64)> = overrides
        .fixed
        .iter()
        .map(|&(id, v)| {
            spec.index_of(id)
                .map(|i| (i, v))
                .ok_or_else(|| FeatureError::UnknownOverride(id.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let per_frame = spec.features.len();
    let mut values = Vec::with_capacity(spec.dim());
    let mut frame_times = Vec::with_capacity(spec.frame_count);
    for k in (0..spec.frame_count).rev() {
        let target = clock - k as f64 * spec.frame_spacing;
        // Latest recorded frame at or before the target time, else the
        // earliest one available, else zeros.
        let frame = state
            .frames
            .iter()
            .rev()
            .find(|(t, _)| *t <= target + 1e-9)
            .or_else(|| state.frames.front());
        match frame {
            Some((t, vals)) => {
                frame_times.push(*t);
                values.extend_from_slice(vals);
            }
            None => {
                frame_times.push(target);
                values.extend(std::iter::repeat(0.0).take(per_frame));
            }
        }
        let base = values.len() - per_frame;
        for &(i, v) in &override_idx {
            values[base + i] = v;
        }
    }
    Ok(ConditioningVector { values, frame_times })
}

/// Per-frame-period chi levels, presampled so a revisited frame reuses
/// its draw.
#[derive(Debug, Clone)]
pub struct ChiSampler {
    rng: ChaCha20Rng,
    frame_spacing: f64,
    cache: HashMap<u64, usize>,
}

impl ChiSampler {
    pub fn new(rng: ChaCha20Rng, frame_spacing: f64) -> Self {
        ChiSampler {
            rng,
            frame_spacing,
            cache: HashMap::new(),
        }
    }

    /// Level in {1..5} for the frame period containing `time`.
    pub fn level_at(&mut self, time: f64) -> usize {
        let period = (time / self.frame_spacing).floor().max(0.0) as u64;
        let rng = &mut self.rng;
        *self
            .cache
            .entry(period)
            .or_insert_with(|| rng.gen_range(1..=5))
    }
}

/// Per-feature 5th/95th empirical percentiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PercentileTable {
    pub entries: Vec<PercentileRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PercentileRow {
    pub feature: String,
    pub p05: f64,
    pub p95: f64,
}

/// Nearest-rank percentile: smallest value with at least p% of the sample
/// at or below it.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Estimates each feature's 5th/95th percentiles from sampled frames
/// (each row one frame, columns in spec order).
pub fn estimate_percentiles(
    samples: &[Vec<f64>],
    spec: &FeatureSpec,
) -> Result<PercentileTable, FeatureError> {
    const MIN_SAMPLES: usize = 100;
    if samples.len() < MIN_SAMPLES {
        return Err(FeatureError::TooFewSamples {
            need: MIN_SAMPLES,
            got: samples.len(),
        });
    }
    let mut entries = Vec::with_capacity(spec.features.len());
    for (i, id) in spec.features.iter().enumerate() {
        let mut col: Vec<f64> = samples.iter().map(|row| row[i]).collect();
        col.sort_by(|a, b| a.total_cmp(b));
        entries.push(PercentileRow {
            feature: id.to_string(),
            p05: nearest_rank(&col, 5.0),
            p95: nearest_rank(&col, 95.0),
        });
    }
    Ok(PercentileTable { entries })
}

impl PercentileTable {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["feature", "p05", "p95"])?;
        for row in &self.entries {
            wtr.write_record([
                row.feature.clone(),
                format!("{}", row.p05),
                format!("{}", row.p95),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Reference distributional anchors from the empirical training data:
/// used to center the reference generator and as report fixtures.
pub mod anchors {
    pub const IMB1_P05: f64 = 0.051;
    pub const IMB1_P95: f64 = 0.909;
    pub const IMB5_P05: f64 = 0.210;
    pub const IMB5_P95: f64 = 0.758;
    pub const SPREAD_P05: f64 = 1.0;
    pub const SPREAD_P95: f64 = 7.0;
    pub const VOL1_P05: f64 = 200.0;
    pub const VOL1_P95: f64 = 1500.0;
    pub const VOL5_P05: f64 = 2250.0;
    pub const VOL5_P95: f64 = 8000.0;
    pub const EVENT_RETURN_50_P05: f64 = -0.0017;
    pub const EVENT_RETURN_50_P95: f64 = 0.0017;
}
