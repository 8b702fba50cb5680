//! Post-processing over immutable trajectories: impact paths, stylized
//! fact reports, order-flow composition, PnL and POV.
//!
//! All mid arithmetic uses the exact two-sided mid (best bid + best ask,
//! half-tick units) converted to ticks only at the reporting edge.

use crate::book::{BookEvent, Owner, Side, Volume};
use crate::harness::{AccountRecord, Trajectory};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("trajectory pair horizons do not cover the lag grid")]
    AlignmentError,
    #[error("window contains no events")]
    EmptyWindow,
    #[error("no trajectories supplied")]
    NoData,
    #[error("no traded volume in the agent's window")]
    PovUndefined,
}

// ---------------------------------------------------------------------------
// Impact paths
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ImpactPath {
    /// Seconds from metaorder start.
    pub lags: Vec<f64>,
    /// Mean paired mid difference (with - without), in ticks.
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub peak: f64,
    /// Mean over the final quarter of the post-execution window.
    pub permanent: f64,
    pub permanent_peak_ratio: f64,
}

/// Per-lag mean of paired mid differences with a 5th-95th percentile
/// band; `exec_end` is the metaorder completion time on the lag axis.
pub fn impact_path(
    pairs: &[(Trajectory, Trajectory)],
    grid: &[f64],
    exec_end: f64,
) -> Result<ImpactPath, AnalysisError> {
    if pairs.is_empty() || grid.is_empty() {
        return Err(AnalysisError::NoData);
    }
    let mut mean = Vec::with_capacity(grid.len());
    let mut lo = Vec::with_capacity(grid.len());
    let mut hi = Vec::with_capacity(grid.len());
    for &lag in grid {
        let mut diffs = Vec::with_capacity(pairs.len());
        for (with, without) in pairs {
            let a = with.mid2_at(lag).ok_or(AnalysisError::AlignmentError)?;
            let b = without.mid2_at(lag).ok_or(AnalysisError::AlignmentError)?;
            diffs.push((a - b) as f64 / 2.0);
        }
        diffs.sort_by(f64::total_cmp);
        mean.push(diffs.iter().sum::<f64>() / diffs.len() as f64);
        lo.push(crate::features::nearest_rank(&diffs, 5.0));
        hi.push(crate::features::nearest_rank(&diffs, 95.0));
    }
    let peak = mean
        .iter()
        .cloned()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    let last = *grid.last().unwrap();
    let perm_start = exec_end + 0.75 * (last - exec_end).max(0.0);
    let tail: Vec<f64> = grid
        .iter()
        .zip(&mean)
        .filter(|(l, _)| **l >= perm_start - 1e-9)
        .map(|(_, m)| *m)
        .collect();
    let permanent = if tail.is_empty() {
        *mean.last().unwrap()
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let permanent_peak_ratio = if peak.abs() > 1e-12 {
        permanent / peak
    } else {
        0.0
    };
    Ok(ImpactPath {
        lags: grid.to_vec(),
        mean,
        lo,
        hi,
        peak,
        permanent,
        permanent_peak_ratio,
    })
}

// ---------------------------------------------------------------------------
// Stylized facts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize)]
pub struct DistSummary {
    pub mean: f64,
    pub p05: f64,
    pub p50: f64,
    pub p95: f64,
    pub count: usize,
}

impl DistSummary {
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return DistSummary::default();
        }
        samples.sort_by(f64::total_cmp);
        DistSummary {
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            p05: crate::features::nearest_rank(&samples, 5.0),
            p50: crate::features::nearest_rank(&samples, 50.0),
            p95: crate::features::nearest_rank(&samples, 95.0),
            count: samples.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StylizedReport {
    /// Minute-return autocorrelations, lags 1-10.
    pub return_autocorr: Vec<f64>,
    pub excess_kurtosis: f64,
    /// Absolute-minute-return autocorrelations, lags 1-30.
    pub abs_return_autocorr: Vec<f64>,
    /// Log-log slope of the positive absolute-return autocorrelations.
    pub abs_decay_slope: f64,
    pub spread: DistSummary,
    pub touch_volume: DistSummary,
    /// Survival quantiles of time from limit submission to first fill,
    /// censored at trajectory end.
    pub time_to_first_fill: DistSummary,
    /// Cross-trajectory standard deviation of terminal mid (ticks).
    pub terminal_mid_dispersion: f64,
    pub minute_return_count: usize,
    pub flags: Vec<String>,
}

fn autocorr(x: &[f64], lag: usize) -> Option<f64> {
    if x.len() <= lag + 1 {
        return None;
    }
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if var < 1e-18 {
        return None;
    }
    let cov: f64 = (0..n - lag)
        .map(|i| (x[i] - mean) * (x[i + lag] - mean))
        .sum();
    Some(cov / var)
}

fn excess_kurtosis(x: &[f64]) -> Option<f64> {
    if x.len() < 4 {
        return None;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2: f64 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if m2 < 1e-18 {
        return None;
    }
    let m4: f64 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    Some(m4 / (m2 * m2) - 3.0)
}

/// Minute returns on last-mid-before-boundary sampling, per trajectory.
pub fn minute_returns(traj: &Trajectory) -> Vec<f64> {
    let horizon = traj
        .mids
        .last()
        .map(|&(t, _)| t)
        .unwrap_or(0.0);
    let mut boundary_mids = Vec::new();
    let mut minute = 0.0;
    while minute <= horizon + 1e-9 {
        if let Some(m) = traj.mid2_at(minute) {
            boundary_mids.push(m as f64);
        }
        minute += 60.0;
    }
    boundary_mids
        .windows(2)
        .filter(|w| w[0] != 0.0)
        .map(|w| (w[1] - w[0]) / w[0])
        .collect()
}

pub fn stylized_report(trajectories: &[Trajectory]) -> Result<StylizedReport, AnalysisError> {
    if trajectories.is_empty() {
        return Err(AnalysisError::NoData);
    }
    let mut flags = Vec::new();
    let mut all_returns = Vec::new();
    for traj in trajectories {
        all_returns.extend(minute_returns(traj));
    }
    if all_returns.len() < 3 {
        flags.push("insufficient minute returns".to_string());
    }
    if all_returns.iter().all(|r| r.abs() < 1e-15) && !all_returns.is_empty() {
        flags.push("degenerate constant-mid series".to_string());
    }
    let return_autocorr: Vec<f64> = (1..=10)
        .map(|k| autocorr(&all_returns, k).unwrap_or(0.0))
        .collect();
    let abs: Vec<f64> = all_returns.iter().map(|r| r.abs()).collect();
    let abs_return_autocorr: Vec<f64> = (1..=30)
        .map(|k| autocorr(&abs, k).unwrap_or(0.0))
        .collect();
    // Slope of ln(acf) vs ln(lag) over the positive entries.
    let pts: Vec<(f64, f64)> = abs_return_autocorr
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, v)| ((i as f64 + 1.0).ln(), v.ln()))
        .collect();
    let abs_decay_slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        if den > 1e-18 {
            num / den
        } else {
            0.0
        }
    } else {
        0.0
    };

    // Spread and touch volume from the recorded frames where present;
    // the v0 layout carries spread at index 4 and vol1 at index 2.
    let mut spreads = Vec::new();
    let mut touch_vols = Vec::new();
    for traj in trajectories {
        for (_, frame) in &traj.frames {
            if frame.len() >= 5 {
                touch_vols.push(frame[2]);
                spreads.push(frame[4]);
            }
        }
    }

    let ttff = time_to_first_fill(trajectories);
    let terminal: Vec<f64> = trajectories
        .iter()
        .filter_map(|t| t.mids.last().map(|&(_, m)| m as f64 / 2.0))
        .collect();
    let terminal_mid_dispersion = if terminal.len() >= 2 {
        let n = terminal.len() as f64;
        let mean = terminal.iter().sum::<f64>() / n;
        (terminal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    } else {
        flags.push("single trajectory: no dispersion".to_string());
        0.0
    };

    Ok(StylizedReport {
        return_autocorr,
        excess_kurtosis: excess_kurtosis(&all_returns).unwrap_or(0.0),
        abs_return_autocorr,
        abs_decay_slope,
        spread: DistSummary::from_samples(spreads),
        touch_volume: DistSummary::from_samples(touch_vols),
        time_to_first_fill: ttff,
        terminal_mid_dispersion,
        minute_return_count: all_returns.len(),
        flags,
    })
}

/// Time from each generator limit submission to its first execution,
/// censored at the trajectory end.
fn time_to_first_fill(trajectories: &[Trajectory]) -> DistSummary {
    let mut waits = Vec::new();
    for traj in trajectories {
        let end = traj.mids.last().map(|&(t, _)| t).unwrap_or(0.0);
        for ev in &traj.events {
            if !matches!(
                ev.event,
                BookEvent::SubmitLimit {
                    owner: Owner::Generator,
                    ..
                }
            ) {
                continue;
            }
            let (side, price) = match ev.event {
                BookEvent::SubmitLimit { side, price, .. } => (side, price),
                _ => unreachable!(),
            };
            let first = traj
                .trades
                .iter()
                .find(|tr| tr.time >= ev.time && tr.price == price && tr.aggressor != side);
            waits.push(match first {
                Some(tr) => tr.time - ev.time,
                None => end - ev.time, // censored
            });
        }
    }
    DistSummary::from_samples(waits)
}

// ---------------------------------------------------------------------------
// Flow composition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct FlowComposition {
    pub limit_share: f64,
    pub cancel_share: f64,
    pub market_share: f64,
    pub market_buy_share: f64,
    /// Cancellation volume minus limit volume, per side. Only events
    /// carrying an explicit side contribute.
    pub bid_cancel_minus_limit: i64,
    pub ask_cancel_minus_limit: i64,
    pub event_count: usize,
}

pub fn flow_composition(
    traj: &Trajectory,
    window: (f64, f64),
) -> Result<FlowComposition, AnalysisError> {
    let mut counts = [0usize; 3]; // limit, cancel, market
    let mut market_buys = 0usize;
    let mut markets = 0usize;
    let mut diff = [0i64; 2]; // bid, ask: cancel vol - limit vol
    for ev in &traj.events {
        if ev.time < window.0 || ev.time > window.1 {
            continue;
        }
        match ev.event {
            BookEvent::SubmitLimit { side, volume, .. } => {
                counts[0] += 1;
                diff[side_idx(side)] -= volume as i64;
            }
            BookEvent::CancelAtDepth { side, volume, .. } => {
                counts[1] += 1;
                diff[side_idx(side)] += volume as i64;
            }
            BookEvent::Cancel { .. } => counts[1] += 1,
            BookEvent::SubmitMarket { side, .. } => {
                counts[2] += 1;
                markets += 1;
                if side == Side::Buy {
                    market_buys += 1;
                }
            }
        }
    }
    let total = counts.iter().sum::<usize>();
    if total == 0 {
        return Err(AnalysisError::EmptyWindow);
    }
    Ok(FlowComposition {
        limit_share: counts[0] as f64 / total as f64,
        cancel_share: counts[1] as f64 / total as f64,
        market_share: counts[2] as f64 / total as f64,
        market_buy_share: if markets > 0 {
            market_buys as f64 / markets as f64
        } else {
            0.0
        },
        bid_cancel_minus_limit: diff[0],
        ask_cancel_minus_limit: diff[1],
        event_count: total,
    })
}

fn side_idx(side: Side) -> usize {
    match side {
        Side::Buy => 0,
        Side::Sell => 1,
    }
}

// ---------------------------------------------------------------------------
// PnL and POV
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct PnLSeries {
    pub times: Vec<f64>,
    /// MtM PnL in ticks.
    pub pnl: Vec<f64>,
    pub inventory: Vec<i64>,
}

pub fn pnl_inventory(records: &[AccountRecord]) -> PnLSeries {
    PnLSeries {
        times: records.iter().map(|r| r.time).collect(),
        pnl: records.iter().map(|r| r.pnl as f64 / 2.0).collect(),
        inventory: records.iter().map(|r| r.inventory).collect(),
    }
}

/// Agent executed volume over total traded volume in the window.
pub fn pov(traj: &Trajectory, agent_id: u32, window: (f64, f64)) -> Result<f64, AnalysisError> {
    let mut agent: Volume = 0;
    let mut total: Volume = 0;
    for tr in &traj.trades {
        if tr.time < window.0 || tr.time > window.1 {
            continue;
        }
        total += tr.volume;
        let involved = tr.taker_owner == Owner::Agent(agent_id)
            || tr.maker_owner == Owner::Agent(agent_id);
        if involved {
            agent += tr.volume;
        }
    }
    if total == 0 {
        return Err(AnalysisError::PovUndefined);
    }
    Ok(agent as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::book::Trade;
    use crate::harness::{EventRecord, RunMeta};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn empty_traj() -> Trajectory {
        Trajectory {
            events: Vec::new(),
            trades: Vec::new(),
            mids: Vec::new(),
            frames: Vec::new(),
            accounts: Vec::new(),
            final_accounts: Vec::new(),
            meta: RunMeta {
                config_hash: String::new(),
                seed: 0,
            },
            warnings: Vec::new(),
            hidden_executions: 0,
        }
    }

    fn traj_with_mids(mids: &[(f64, i64)]) -> Trajectory {
        let mut t = empty_traj();
        t.mids = mids.to_vec();
        t
    }

    #[test]
    fn identical_arms_give_zero_path() {
        let arm = traj_with_mids(&[(0.0, 200), (10.0, 202), (20.0, 198)]);
        let pairs = vec![(arm.clone(), arm)];
        let path = impact_path(&pairs, &[0.0, 10.0, 20.0], 10.0).unwrap();
        assert!(path.mean.iter().all(|&m| m == 0.0));
        assert_eq!(path.permanent, 0.0);
    }

    #[test]
    fn constant_offset_pair_gives_flat_path() {
        // With-arm mid is +5 ticks (10 half-ticks) at every lag.
        let without = traj_with_mids(&[(0.0, 200), (10.0, 200), (20.0, 200)]);
        let with = traj_with_mids(&[(0.0, 210), (10.0, 210), (20.0, 210)]);
        let path = impact_path(&[(with, without)], &[0.0, 10.0, 20.0], 10.0).unwrap();
        assert_eq!(path.mean, vec![5.0, 5.0, 5.0]);
        assert_eq!(path.peak, 5.0);
        assert_eq!(path.permanent, 5.0);
        assert!((path.permanent_peak_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn impact_path_is_linear_in_mids() {
        let without = traj_with_mids(&[(0.0, 200), (10.0, 204), (20.0, 202)]);
        let with = traj_with_mids(&[(0.0, 200), (10.0, 212), (20.0, 206)]);
        let grid = [0.0, 10.0, 20.0];
        let base = impact_path(&[(with.clone(), without.clone())], &grid, 10.0).unwrap();
        let scale = |t: &Trajectory, c: i64| {
            let mut s = t.clone();
            s.mids = s.mids.iter().map(|&(tt, m)| (tt, m * c)).collect();
            s
        };
        let scaled = impact_path(&[(scale(&with, 3), scale(&without, 3))], &grid, 10.0).unwrap();
        for (a, b) in base.mean.iter().zip(&scaled.mean) {
            assert!((b - 3.0 * a).abs() < 1e-9);
        }
    }

    #[test]
    fn band_contains_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let grid = [0.0, 5.0, 10.0];
        let pairs: Vec<(Trajectory, Trajectory)> = (0..40)
            .map(|_| {
                let base = 200 + rng.gen_range(-10..10);
                let with = traj_with_mids(&[
                    (0.0, base),
                    (5.0, base + rng.gen_range(0..8)),
                    (10.0, base + rng.gen_range(0..8)),
                ]);
                let without = traj_with_mids(&[(0.0, base), (5.0, base), (10.0, base)]);
                (with, without)
            })
            .collect();
        let path = impact_path(&pairs, &grid, 5.0).unwrap();
        for i in 0..grid.len() {
            assert!(path.lo[i] <= path.mean[i] && path.mean[i] <= path.hi[i]);
        }
    }

    #[test]
    fn empty_pairs_rejected() {
        assert_eq!(
            impact_path(&[], &[0.0], 0.0).unwrap_err(),
            AnalysisError::NoData
        );
    }

    #[test]
    fn gaussian_minute_returns_pass_iid_checks() {
        // Synthetic mid random walk with i.i.d. Gaussian steps; the
        // sampled minute returns are i.i.d. up to tiny drift terms.
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut mids = Vec::new();
        let mut m = 20000.0f64;
        for k in 0..2400 {
            let step: f64 = rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0);
            m += step * 8.0;
            mids.push((k as f64 * 15.0, m.round() as i64 * 2));
        }
        let traj = traj_with_mids(&mids);
        let report = stylized_report(&[traj]).unwrap();
        let n = report.minute_return_count as f64;
        let band = 2.5 / n.sqrt();
        for (k, &ac) in report.return_autocorr.iter().enumerate() {
            assert!(ac.abs() < band, "lag {} autocorr {ac} vs band {band}", k + 1);
        }
        assert!(report.excess_kurtosis.abs() < 1.0);
    }

    #[test]
    fn ar1_autocorrelation_matches_closed_form() {
        // AR(1) on the return series itself: acf(k) ~ rho^k.
        let rho = 0.6f64;
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let mut r = 0.0f64;
        let n = 20000;
        let series: Vec<f64> = (0..n)
            .map(|_| {
                let eps: f64 = rng.gen_range(-1.0..1.0);
                r = rho * r + eps;
                r
            })
            .collect();
        for k in 1..=5usize {
            let est = autocorr(&series, k).unwrap();
            assert!(
                (est - rho.powi(k as i32)).abs() < 0.05,
                "lag {k}: {est} vs {}",
                rho.powi(k as i32)
            );
        }
    }

    #[test]
    fn constant_mid_is_flagged() {
        let mids: Vec<(f64, i64)> = (0..10).map(|k| (k as f64 * 60.0, 200)).collect();
        let report = stylized_report(&[traj_with_mids(&mids)]).unwrap();
        assert!(report
            .flags
            .iter()
            .any(|f| f.contains("degenerate")));
    }

    #[test]
    fn no_trajectories_rejected() {
        assert_eq!(stylized_report(&[]).unwrap_err(), AnalysisError::NoData);
    }

    fn limit_event(time: f64, side: Side, volume: Volume) -> EventRecord {
        EventRecord {
            time,
            owner: Owner::Generator,
            event: BookEvent::SubmitLimit {
                side,
                price: 100,
                volume,
                owner: Owner::Generator,
            },
            executed: 0,
        }
    }

    fn cancel_event(time: f64, side: Side, volume: Volume) -> EventRecord {
        EventRecord {
            time,
            owner: Owner::Generator,
            event: BookEvent::CancelAtDepth {
                side,
                depth: 1,
                volume,
            },
            executed: 0,
        }
    }

    #[test]
    fn all_limit_log_composition() {
        let mut traj = empty_traj();
        traj.events = (0..10)
            .map(|k| limit_event(k as f64, Side::Buy, 10))
            .collect();
        let c = flow_composition(&traj, (0.0, 100.0)).unwrap();
        assert_eq!(c.limit_share, 1.0);
        assert_eq!(c.cancel_share, 0.0);
        assert_eq!(c.market_share, 0.0);
        let total = c.limit_share + c.cancel_share + c.market_share;
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cancel_minus_limit_volume_arithmetic() {
        let mut traj = empty_traj();
        traj.events = vec![
            cancel_event(0.0, Side::Sell, 500),
            limit_event(1.0, Side::Sell, 300),
        ];
        let c = flow_composition(&traj, (0.0, 10.0)).unwrap();
        assert_eq!(c.ask_cancel_minus_limit, 200);
        assert_eq!(c.bid_cancel_minus_limit, 0);
    }

    #[test]
    fn empty_window_rejected() {
        let mut traj = empty_traj();
        traj.events = vec![limit_event(50.0, Side::Buy, 10)];
        assert_eq!(
            flow_composition(&traj, (0.0, 10.0)).unwrap_err(),
            AnalysisError::EmptyWindow
        );
    }

    fn trade(time: f64, volume: Volume, taker: Owner) -> Trade {
        Trade {
            time,
            price: 100,
            volume,
            aggressor: Side::Buy,
            maker_id: 0,
            maker_owner: Owner::Replay,
            taker_owner: taker,
            signed_volume: -(volume as i64),
        }
    }

    #[test]
    fn pov_seventy_of_hundred() {
        let mut traj = empty_traj();
        traj.trades = vec![
            trade(1.0, 70, Owner::Agent(0)),
            trade(2.0, 30, Owner::Generator),
        ];
        assert_eq!(pov(&traj, 0, (0.0, 10.0)).unwrap(), 0.70);
    }

    #[test]
    fn pov_inactive_agent_is_zero() {
        let mut traj = empty_traj();
        traj.trades = vec![trade(1.0, 100, Owner::Generator)];
        assert_eq!(pov(&traj, 0, (0.0, 10.0)).unwrap(), 0.0);
    }

    #[test]
    fn pov_undefined_without_volume() {
        let traj = empty_traj();
        assert_eq!(
            pov(&traj, 0, (0.0, 10.0)).unwrap_err(),
            AnalysisError::PovUndefined
        );
    }

    #[test]
    fn pnl_series_mirrors_records() {
        let records = vec![
            AccountRecord {
                time: 1.0,
                agent_id: 0,
                cash: -40,
                inventory: 1,
                mid2: 200,
                pnl: 160,
            },
            AccountRecord {
                time: 2.0,
                agent_id: 0,
                cash: -40,
                inventory: 1,
                mid2: 220,
                pnl: 180,
            },
        ];
        let series = pnl_inventory(&records);
        assert_eq!(series.pnl, vec![80.0, 90.0]);
        assert_eq!(series.inventory, vec![1, 1]);
        // Final value equals the MtM identity of the last record.
        assert_eq!(
            *series.pnl.last().unwrap() * 2.0,
            (records[1].cash + records[1].inventory * records[1].mid2) as f64
        );
    }
}
