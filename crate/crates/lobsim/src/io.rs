//! Data ingestion, experiment configuration, and run persistence.
//!
//! Message files follow the widely used exchange-feed CSV layout:
//! `time,type,order_id,size,price,direction` with prices as integers in
//! units of 1e-4 currency and direction +1 for bids, -1 for asks.
//! Prices are converted to integer ticks on ingestion by dividing by the
//! declared tick size (also in 1e-4 units).

use crate::agents::StrategyConfig;
use crate::book::{Side, TickPrice, Volume};
use crate::features::SpecVersion;
use crate::generator::{LearnedGenerator, ReferenceParams};
use crate::harness::{GeneratorKind, Mode, SimConfig, StartSnapshot, Trajectory};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("row {line}: {msg}")]
    RowError { line: usize, msg: String },
    #[error("row {line}: timestamp decreases")]
    OrderingError { line: usize },
    #[error("start time {t0} outside file coverage")]
    RangeError { t0: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    /// Seconds after midnight.
    pub time: f64,
    /// 1 submit, 2 partial cancel, 3 delete, 4 visible execution,
    /// 5 hidden execution.
    pub kind: u32,
    pub order_id: u64,
    pub size: Volume,
    /// Integer ticks.
    pub price: TickPrice,
    pub side: Side,
}

#[derive(Debug, Clone, Default)]
pub struct ParseStats {
    pub rows: usize,
    pub skipped_unknown_kind: usize,
    pub skipped_malformed: usize,
}

/// Strict CSV parse. Unknown event codes and (when `skip_malformed`)
/// broken rows are skipped with counts; timestamps must be nondecreasing.
pub fn parse_messages(
    path: &Path,
    tick_e4: i64,
    skip_malformed: bool,
) -> Result<(Vec<MessageRecord>, ParseStats), IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut records = Vec::new();
    let mut stats = ParseStats::default();
    let mut last_time = f64::NEG_INFINITY;
    for (i, row) in reader.records().enumerate() {
        let line = i + 1;
        stats.rows += 1;
        let row = row?;
        match parse_row(&row, tick_e4) {
            Ok(Some(rec)) => {
                if rec.time < last_time {
                    return Err(IoError::OrderingError { line });
                }
                last_time = rec.time;
                records.push(rec);
            }
            Ok(None) => stats.skipped_unknown_kind += 1,
            Err(msg) => {
                if skip_malformed {
                    stats.skipped_malformed += 1;
                } else {
                    return Err(IoError::RowError { line, msg });
                }
            }
        }
    }
    Ok((records, stats))
}

fn parse_row(row: &csv::StringRecord, tick_e4: i64) -> Result<Option<MessageRecord>, String> {
    if row.len() != 6 {
        return Err(format!("expected 6 fields, got {}", row.len()));
    }
    let field = |i: usize| row.get(i).unwrap().trim();
    let time: f64 = field(0).parse().map_err(|e| format!("time: {e}"))?;
    let kind: u32 = field(1).parse().map_err(|e| format!("type: {e}"))?;
    if !(1..=5).contains(&kind) {
        return Ok(None);
    }
    let order_id: u64 = field(2).parse().map_err(|e| format!("order id: {e}"))?;
    let size: Volume = field(3).parse().map_err(|e| format!("size: {e}"))?;
    if size == 0 {
        return Err("size must be positive".to_string());
    }
    let raw_price: i64 = field(4).parse().map_err(|e| format!("price: {e}"))?;
    if raw_price % tick_e4 != 0 {
        return Err(format!("price {raw_price} not a multiple of tick {tick_e4}"));
    }
    let side = match field(5) {
        "1" => Side::Buy,
        "-1" => Side::Sell,
        other => return Err(format!("direction {other} not +-1")),
    };
    Ok(Some(MessageRecord {
        time,
        kind,
        order_id,
        size,
        price: raw_price / tick_e4,
        side,
    }))
}

/// Inverse of [`parse_messages`] on the parsed fields.
pub fn write_messages(path: &Path, messages: &[MessageRecord], tick_e4: i64) -> Result<(), IoError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for m in messages {
        let dir = match m.side {
            Side::Buy => 1,
            Side::Sell => -1,
        };
        w.write_record([
            format_time(m.time),
            m.kind.to_string(),
            m.order_id.to_string(),
            m.size.to_string(),
            (m.price * tick_e4).to_string(),
            dir.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn format_time(t: f64) -> String {
    // Enough digits to round-trip exactly through parse.
    format!("{t:.9}")
}

/// Top-k book levels aligned by row index to a message file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    /// Ascending prices.
    pub asks: Vec<(TickPrice, Volume)>,
    /// Descending prices.
    pub bids: Vec<(TickPrice, Volume)>,
}

/// Snapshot CSV layout: ask1,asksize1,bid1,bidsize1,... repeated k times.
/// Empty levels use price -9999999999 or 0 size and are dropped.
pub fn parse_snapshots(path: &Path, tick_e4: i64) -> Result<Vec<SnapshotRecord>, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 1;
        let row = row?;
        if row.len() % 4 != 0 {
            return Err(IoError::RowError {
                line,
                msg: format!("expected 4k fields, got {}", row.len()),
            });
        }
        let mut asks = Vec::new();
        let mut bids = Vec::new();
        for level in 0..row.len() / 4 {
            let get = |o: usize| -> Result<i64, IoError> {
                row.get(level * 4 + o)
                    .unwrap()
                    .trim()
                    .parse()
                    .map_err(|e| IoError::RowError {
                        line,
                        msg: format!("field {}: {e}", level * 4 + o),
                    })
            };
            let (ap, av, bp, bv) = (get(0)?, get(1)?, get(2)?, get(3)?);
            if av > 0 && ap > 0 && ap % tick_e4 == 0 {
                asks.push((ap / tick_e4, av as Volume));
            }
            if bv > 0 && bp > 0 && bp % tick_e4 == 0 {
                bids.push((bp / tick_e4, bv as Volume));
            }
        }
        let rec = SnapshotRecord { asks, bids };
        if !rec.well_ordered() {
            return Err(IoError::RowError {
                line,
                msg: "levels not price-ordered".to_string(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

impl SnapshotRecord {
    pub fn well_ordered(&self) -> bool {
        self.asks.windows(2).all(|w| w[0].0 < w[1].0)
            && self.bids.windows(2).all(|w| w[0].0 > w[1].0)
    }

    pub fn mid2(&self) -> Option<i64> {
        match (self.bids.first(), self.asks.first()) {
            (Some(&(b, _)), Some(&(a, _))) => Some(a + b),
            _ => None,
        }
    }
}

/// Warm-history window seeded ahead of a lattice start.
pub const WARM_WINDOW: f64 = 30.0;

/// Book at the last row at or before `t0`, plus trade and mid histories
/// backfilled from the preceding 30 s of messages (times shifted so t0
/// becomes 0).
pub fn build_start_snapshot(
    messages: &[MessageRecord],
    snapshots: &[SnapshotRecord],
    t0: f64,
) -> Result<StartSnapshot, IoError> {
    let first = messages.first().map(|m| m.time);
    let last = messages.last().map(|m| m.time);
    match (first, last) {
        (Some(f), Some(l)) if t0 >= f && t0 <= l => {}
        _ => return Err(IoError::RangeError { t0 }),
    }
    let idx = messages
        .iter()
        .rposition(|m| m.time <= t0)
        .ok_or(IoError::RangeError { t0 })?;
    let snap = snapshots.get(idx).ok_or(IoError::RangeError { t0 })?;

    let mut warm_trades = Vec::new();
    let mut warm_mid2 = Vec::new();
    for (i, m) in messages.iter().enumerate().take(idx + 1) {
        if t0 - m.time > WARM_WINDOW {
            continue;
        }
        if m.kind == 4 {
            // Visible execution of a bid = sell aggressor, positive sign.
            let signed = match m.side {
                Side::Buy => m.size as i64,
                Side::Sell => -(m.size as i64),
            };
            warm_trades.push((m.time - t0, signed));
        }
        if let Some(mid2) = snapshots.get(i).and_then(|s| s.mid2()) {
            warm_mid2.push((m.time - t0, mid2));
        }
    }
    Ok(StartSnapshot {
        bids: snap.bids.clone(),
        asks: snap.asks.clone(),
        warm_trades,
        warm_mid2,
    })
}

/// Messages after `t0` within `duration`, shifted so t0 becomes 0.
pub fn messages_from(messages: &[MessageRecord], t0: f64, duration: f64) -> Vec<MessageRecord> {
    messages
        .iter()
        .filter(|m| m.time > t0 && m.time <= t0 + duration)
        .map(|m| MessageRecord {
            time: m.time - t0,
            ..m.clone()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Run persistence
// ---------------------------------------------------------------------------

fn owner_label(owner: crate::book::Owner) -> String {
    match owner {
        crate::book::Owner::Generator => "generator".to_string(),
        crate::book::Owner::Replay => "replay".to_string(),
        crate::book::Owner::Agent(i) => format!("agent{i}"),
    }
}

fn side_label(side: Side) -> &'static str {
    match side {
        Side::Buy => "buy",
        Side::Sell => "sell",
    }
}

/// Writes events.csv, trades.csv, mid.csv, accounts.csv and meta.json
/// under `dir`. Output is deterministic: reruns with the same trajectory
/// produce byte-identical bodies.
pub fn write_run_dir(dir: &Path, traj: &Trajectory) -> Result<(), IoError> {
    std::fs::create_dir_all(dir)?;

    let mut events = csv::Writer::from_path(dir.join("events.csv"))?;
    events.write_record(["time", "owner", "kind", "side", "price", "depth", "volume", "executed"])?;
    for ev in &traj.events {
        use crate::book::BookEvent::*;
        let (kind, side, price, depth, volume) = match ev.event {
            SubmitLimit {
                side,
                price,
                volume,
                ..
            } => ("limit", side_label(side), price.to_string(), String::new(), volume),
            SubmitMarket { side, volume, .. } => {
                ("market", side_label(side), String::new(), String::new(), volume)
            }
            Cancel { id, volume } => (
                "cancel",
                "",
                id.to_string(),
                String::new(),
                volume.unwrap_or(0),
            ),
            CancelAtDepth {
                side,
                depth,
                volume,
            } => ("cancel_depth", side_label(side), String::new(), depth.to_string(), volume),
        };
        events.write_record([
            format_time(ev.time),
            owner_label(ev.owner),
            kind.to_string(),
            side.to_string(),
            price,
            depth,
            volume.to_string(),
            ev.executed.to_string(),
        ])?;
    }
    events.flush()?;

    let mut trades = csv::Writer::from_path(dir.join("trades.csv"))?;
    trades.write_record(["time", "price", "volume", "aggressor", "signed_volume", "maker", "taker"])?;
    for t in &traj.trades {
        trades.write_record([
            format_time(t.time),
            t.price.to_string(),
            t.volume.to_string(),
            side_label(t.aggressor).to_string(),
            t.signed_volume.to_string(),
            owner_label(t.maker_owner),
            owner_label(t.taker_owner),
        ])?;
    }
    trades.flush()?;

    let mut mids = csv::Writer::from_path(dir.join("mid.csv"))?;
    mids.write_record(["time", "mid2", "mid"])?;
    for &(t, m) in &traj.mids {
        mids.write_record([
            format_time(t),
            m.to_string(),
            format!("{:.1}", m as f64 / 2.0),
        ])?;
    }
    mids.flush()?;

    let mut accounts = csv::Writer::from_path(dir.join("accounts.csv"))?;
    accounts.write_record(["time", "agent", "cash", "inventory", "mid2", "pnl_ticks"])?;
    for r in &traj.accounts {
        accounts.write_record([
            format_time(r.time),
            r.agent_id.to_string(),
            r.cash.to_string(),
            r.inventory.to_string(),
            r.mid2.to_string(),
            format!("{:.1}", r.pnl as f64 / 2.0),
        ])?;
    }
    accounts.flush()?;

    let meta = serde_json::json!({
        "config_hash": traj.meta.config_hash,
        "seed": traj.meta.seed,
        "events": traj.events.len(),
        "trades": traj.trades.len(),
        "warnings": traj.warnings,
        "hidden_executions": traj.hidden_executions,
    });
    let mut f = std::fs::File::create(dir.join("meta.json"))?;
    f.write_all(serde_json::to_string_pretty(&meta).expect("serializable").as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub days: usize,
    pub per_day: usize,
    /// Seconds covered by one day of starts.
    pub day_length: f64,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig {
            days: 2,
            per_day: 30,
            day_length: 23400.0,
        }
    }
}

fn default_duration() -> f64 {
    1200.0
}

fn default_tick_e4() -> i64 {
    100
}

fn default_spec_version() -> SpecVersion {
    SpecVersion::V0
}

fn default_mode() -> Mode {
    Mode::Generative
}

/// One declarative experiment file (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_spec_version")]
    pub spec_version: SpecVersion,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Learned-generator model file; reference generator when absent.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Message/snapshot files for replay mode and lattice starts.
    #[serde(default)]
    pub messages: Option<PathBuf>,
    #[serde(default)]
    pub snapshots: Option<PathBuf>,
    #[serde(default = "default_tick_e4")]
    pub tick_e4: i64,
    #[serde(default)]
    pub agents: Vec<StrategyConfig>,
    /// Feature-fixing override: feature name plus pinned value.
    #[serde(default)]
    pub fix_feature: Option<String>,
    #[serde(default)]
    pub fix_value: Option<f64>,
    #[serde(default)]
    pub lattice: Option<LatticeConfig>,
    /// Inline start book; a synthetic default when absent.
    #[serde(default)]
    pub start: Option<StartSnapshot>,
}

pub fn load_experiment(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig = toml::from_str(&text)?;
    for agent in &cfg.agents {
        agent.validate()?;
    }
    Ok(cfg)
}

impl ExperimentConfig {
    /// Base SimConfig for a single run (lattice points derive from it).
    pub fn to_sim_config(&self) -> anyhow::Result<SimConfig> {
        let generator = match &self.model {
            Some(path) => GeneratorKind::Learned(LearnedGenerator::load(path)?),
            None => GeneratorKind::Reference(ReferenceParams::default()),
        };
        let start = self.start.clone().unwrap_or_else(default_start);
        let mut cfg = SimConfig {
            mode: self.mode,
            generator,
            spec_version: self.spec_version,
            seed: self.seed,
            duration: self.duration,
            start,
            agents: self.agents.clone(),
            overrides: Default::default(),
        };
        if let Some(name) = &self.fix_feature {
            let id = crate::features::FeatureId::parse(name)
                .ok_or_else(|| anyhow::anyhow!("unknown feature name {name}"))?;
            let value = self
                .fix_value
                .ok_or_else(|| anyhow::anyhow!("fix_feature requires fix_value"))?;
            cfg.overrides = crate::features::OverrideSet::single(id, value);
        }
        Ok(cfg)
    }
}

/// Synthetic five-level start book used when no data files are supplied.
pub fn default_start() -> StartSnapshot {
    StartSnapshot {
        bids: (0..5).map(|i| (995 - i, 600)).collect(),
        asks: (0..5).map(|i| (1005 + i, 600)).collect(),
        warm_trades: Vec::new(),
        warm_mid2: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_file(dir: &Path, name: &str, content: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn parses_declared_format() {
        let dir = tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "m.csv",
            "34200.189,1,11885113,21,2238200,1\n",
        );
        let (msgs, stats) = parse_messages(&path, 100, false).unwrap();
        assert_eq!(stats.rows, 1);
        assert_eq!(
            msgs,
            vec![MessageRecord {
                time: 34200.189,
                kind: 1,
                order_id: 11885113,
                size: 21,
                price: 22382,
                side: Side::Buy,
            }]
        );
    }

    #[test]
    fn empty_file_empty_stream() {
        let dir = tempdir().unwrap();
        let path = write_file(dir.path(), "m.csv", "");
        let (msgs, stats) = parse_messages(&path, 100, false).unwrap();
        assert!(msgs.is_empty());
        assert_eq!(stats.rows, 0);
        assert_eq!(stats.skipped_unknown_kind, 0);
    }

    #[test]
    fn decreasing_timestamps_rejected() {
        let dir = tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "m.csv",
            "100.0,1,1,10,10000,1\n99.0,1,2,10,10000,1\n",
        );
        match parse_messages(&path, 100, false) {
            Err(IoError::OrderingError { line }) => assert_eq!(line, 2),
            other => panic!("expected ordering error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "m.csv",
            "100.0,1,1,10,10000,1\n101.0,1,2,abc,10000,1\n",
        );
        match parse_messages(&path, 100, false) {
            Err(IoError::RowError { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected row error, got {other:?}"),
        }
        // Skippable per config.
        let (msgs, stats) = parse_messages(&path, 100, true).unwrap();
        assert_eq!(msgs.len(), 1);
        assert_eq!(stats.skipped_malformed, 1);
    }

    #[test]
    fn unknown_codes_counted_not_fatal() {
        let dir = tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "m.csv",
            "100.0,7,1,10,10000,1\n101.0,1,2,10,10000,1\n",
        );
        let (msgs, stats) = parse_messages(&path, 100, false).unwrap();
        assert_eq!(msgs.len(), 1);
        assert_eq!(stats.skipped_unknown_kind, 1);
    }

    #[test]
    fn message_round_trip() {
        let dir = tempdir().unwrap();
        let source = "34200.189000000,1,11885113,21,2238200,1\n34201.250000000,4,11885113,5,2238200,1\n";
        let path = write_file(dir.path(), "m.csv", source);
        let (msgs, _) = parse_messages(&path, 100, false).unwrap();
        let out = dir.path().join("out.csv");
        write_messages(&out, &msgs, 100).unwrap();
        let (again, _) = parse_messages(&out, 100, false).unwrap();
        assert_eq!(msgs, again);
    }

    #[test]
    fn snapshot_parse_and_ordering() {
        let dir = tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "s.csv",
            "10100,50,9900,60,10200,40,9800,70\n",
        );
        let snaps = parse_snapshots(&path, 100).unwrap();
        assert_eq!(snaps[0].asks, vec![(101, 50), (102, 40)]);
        assert_eq!(snaps[0].bids, vec![(99, 60), (98, 70)]);
        assert_eq!(snaps[0].mid2(), Some(200));

        let bad = write_file(dir.path(), "bad.csv", "10200,50,9900,60,10100,40,9800,70\n");
        assert!(parse_snapshots(&bad, 100).is_err());
    }

    fn fixture_data(dir: &Path) -> (Vec<MessageRecord>, Vec<SnapshotRecord>) {
        let mut msg_rows = String::new();
        let mut snap_rows = String::new();
        for i in 0..100 {
            let t = 1000.0 + i as f64;
            let kind = if i % 10 == 4 { 4 } else { 1 };
            msg_rows.push_str(&format!("{t},{kind},{},10,10000,1\n", 100 + i));
            snap_rows.push_str("10100,50,9900,60\n");
        }
        let mp = write_file(dir, "m.csv", &msg_rows);
        let sp = write_file(dir, "s.csv", &snap_rows);
        let (msgs, _) = parse_messages(&mp, 100, false).unwrap();
        let snaps = parse_snapshots(&sp, 100).unwrap();
        (msgs, snaps)
    }

    #[test]
    fn start_snapshot_mid_file() {
        let dir = tempdir().unwrap();
        let (msgs, snaps) = fixture_data(dir.path());
        let start = build_start_snapshot(&msgs, &snaps, 1050.0).unwrap();
        // Spread equals the snapshot row spread.
        let book = start.build_book();
        assert_eq!(book.spread(), Some(2));
        // Warm histories cover the trailing 30 s with shifted times.
        assert!(start.warm_trades.iter().all(|&(t, _)| t <= 0.0 && t >= -30.0));
        assert!(!start.warm_mid2.is_empty());
    }

    #[test]
    fn start_snapshot_at_file_start_is_cold() {
        let dir = tempdir().unwrap();
        let (msgs, snaps) = fixture_data(dir.path());
        let start = build_start_snapshot(&msgs, &snaps, 1000.0).unwrap();
        assert!(start.warm_trades.is_empty());
        assert_eq!(start.warm_mid2.len(), 1);
    }

    #[test]
    fn start_snapshot_out_of_range() {
        let dir = tempdir().unwrap();
        let (msgs, snaps) = fixture_data(dir.path());
        assert!(matches!(
            build_start_snapshot(&msgs, &snaps, 10.0),
            Err(IoError::RangeError { .. })
        ));
    }

    #[test]
    fn messages_from_shifts_times() {
        let dir = tempdir().unwrap();
        let (msgs, _) = fixture_data(dir.path());
        let sliced = messages_from(&msgs, 1050.0, 20.0);
        assert!(!sliced.is_empty());
        assert!(sliced.iter().all(|m| m.time > 0.0 && m.time <= 20.0));
    }

    #[test]
    fn run_dir_is_rerun_identical() {
        use crate::harness::{run_trajectory, StartSnapshot};
        let cfg = crate::harness::SimConfig::generative(StartSnapshot::fig1(), 5, 30.0);
        let dir = tempdir().unwrap();
        let a_dir = dir.path().join("a");
        let b_dir = dir.path().join("b");
        write_run_dir(&a_dir, &run_trajectory(&cfg)).unwrap();
        write_run_dir(&b_dir, &run_trajectory(&cfg)).unwrap();
        for name in ["events.csv", "trades.csv", "mid.csv", "accounts.csv", "meta.json"] {
            let a = std::fs::read(a_dir.join(name)).unwrap();
            let b = std::fs::read(b_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }
    }

    #[test]
    fn experiment_toml_round_trip() {
        let dir = tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "exp.toml",
            r#"
seed = 9
duration = 60.0
fix_feature = "imb1"
fix_value = 0.909

[[agents]]
kind = "twap"
side = "Buy"
total_volume = 1000
horizon = 300.0
slice_interval = 60.0
"#,
        );
        let cfg = load_experiment(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        let sim = cfg.to_sim_config().unwrap();
        assert_eq!(sim.agents.len(), 1);
        assert!(!sim.overrides.is_empty());
    }

    #[test]
    fn bad_experiment_config_rejected() {
        let dir = tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "exp.toml",
            "fix_feature = \"nosuchfeature\"\nfix_value = 1.0\n",
        );
        let cfg = load_experiment(&path).unwrap();
        assert!(cfg.to_sim_config().is_err());
    }
}
