//! Trading strategies and account keeping.
//!
//! Accounts keep cash in half-tick volume units so mark-to-market at the
//! two-sided mid (best bid + best ask) stays exact integer arithmetic.
//! Strategies are sequential state machines: the harness asks for the
//! next wakeup time, calls `decide` with the current book and account,
//! and applies the returned actions under the agent's owner tag.

use crate::book::{OrderBook, OrderId, Owner, Side, TickPrice, Trade, Volume};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AgentError {
    #[error("RL action index {0} out of range 0..15")]
    InvalidAction(usize),
}

/// What a strategy asks the harness to do. Prices are absolute ticks;
/// the harness stamps the owner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentAction {
    SubmitLimit {
        side: Side,
        price: TickPrice,
        volume: Volume,
    },
    SubmitMarket {
        side: Side,
        volume: Volume,
    },
    Cancel {
        id: OrderId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fill {
    pub time: f64,
    pub side: Side,
    pub price: TickPrice,
    pub volume: Volume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenOrder {
    pub id: OrderId,
    pub side: Side,
    pub price: TickPrice,
    pub remaining: Volume,
}

/// Cash and inventory ledger for one agent.
///
/// `cash` is in half-tick volume units (2 x price x volume per fill), so
/// `cash + inventory x mid2` is an exact integer whenever `mid2 = best
/// bid + best ask` is defined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentAccount {
    pub agent_id: u32,
    pub initial_cash: i64,
    pub cash: i64,
    pub inventory: i64,
    pub open_orders: Vec<OpenOrder>,
    pub fills: Vec<Fill>,
    /// Liquidation could not fully flatten (empty opposite side).
    pub residual_flagged: bool,
}

impl AgentAccount {
    pub fn new(agent_id: u32) -> Self {
        AgentAccount {
            agent_id,
            initial_cash: 0,
            cash: 0,
            inventory: 0,
            open_orders: Vec::new(),
            fills: Vec::new(),
            residual_flagged: false,
        }
    }

    pub fn apply_fill(&mut self, fill: Fill) {
        let notional = 2 * fill.price * fill.volume as i64;
        match fill.side {
            Side::Buy => {
                self.cash -= notional;
                self.inventory += fill.volume as i64;
            }
            Side::Sell => {
                self.cash += notional;
                self.inventory -= fill.volume as i64;
            }
        }
        self.fills.push(fill);
    }

    pub fn note_open(&mut self, id: OrderId, side: Side, price: TickPrice, remaining: Volume) {
        self.open_orders.push(OpenOrder {
            id,
            side,
            price,
            remaining,
        });
    }

    pub fn note_cancel(&mut self, id: OrderId) {
        self.open_orders.retain(|o| o.id != id);
    }

    /// Maker-side fill against a resting order of this agent.
    pub fn note_maker_fill(&mut self, id: OrderId, volume: Volume) {
        if let Some(o) = self.open_orders.iter_mut().find(|o| o.id == id) {
            o.remaining = o.remaining.saturating_sub(volume);
        }
        self.open_orders.retain(|o| o.remaining > 0);
    }

    pub fn open_volume(&self, side: Side) -> Volume {
        self.open_orders
            .iter()
            .filter(|o| o.side == side)
            .map(|o| o.remaining)
            .sum()
    }

    /// MtM PnL in half-tick units: cash delta plus inventory valued at
    /// `mid2 = best bid + best ask`.
    pub fn mark_to_market(&self, mid2: i64) -> i64 {
        self.cash - self.initial_cash + self.inventory * mid2
    }

    /// Same PnL in tick units.
    pub fn pnl_ticks(&self, mid2: i64) -> f64 {
        self.mark_to_market(mid2) as f64 / 2.0
    }
}

/// Routes book trades into agent accounts; the maker leg fills at the
/// opposite of the aggressor side.
pub fn route_fills(accounts: &mut [AgentAccount], trades: &[Trade]) {
    for trade in trades {
        if let Owner::Agent(id) = trade.taker_owner {
            if let Some(acc) = accounts.iter_mut().find(|a| a.agent_id == id) {
                acc.apply_fill(Fill {
                    time: trade.time,
                    side: trade.aggressor,
                    price: trade.price,
                    volume: trade.volume,
                });
            }
        }
        if let Owner::Agent(id) = trade.maker_owner {
            if let Some(acc) = accounts.iter_mut().find(|a| a.agent_id == id) {
                acc.apply_fill(Fill {
                    time: trade.time,
                    side: trade.aggressor.opposite(),
                    price: trade.price,
                    volume: trade.volume,
                });
                acc.note_maker_fill(trade.maker_id, trade.volume);
            }
        }
    }
}

/// Cancels every open order, then flattens inventory with one market
/// order on the closing side.
pub fn terminal_liquidate(account: &AgentAccount) -> Vec<AgentAction> {
    let mut actions: Vec<AgentAction> = account
        .open_orders
        .iter()
        .map(|o| AgentAction::Cancel { id: o.id })
        .collect();
    if account.inventory > 0 {
        actions.push(AgentAction::SubmitMarket {
            side: Side::Sell,
            volume: account.inventory as Volume,
        });
    } else if account.inventory < 0 {
        actions.push(AgentAction::SubmitMarket {
            side: Side::Buy,
            volume: (-account.inventory) as Volume,
        });
    }
    actions
}

// ---------------------------------------------------------------------------
// Strategy configurations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StrategyConfig {
    Twap {
        side: Side,
        total_volume: Volume,
        /// Seconds; slices = horizon / slice_interval.
        horizon: f64,
        slice_interval: f64,
    },
    LimitMeta {
        side: Side,
        volume: Volume,
        horizon: f64,
    },
    MarketMaker {
        depth: i64,
        quote_volume: Volume,
        refresh: f64,
        horizon: f64,
    },
    ImbAttack {
        main_volume: Volume,
        off_fraction: f64,
        depth: i64,
        horizon: f64,
    },
    MechAttack {
        push_side: Side,
        main_volume: Volume,
        main_depth: i64,
        horizon: f64,
    },
    RlMarketMaker {
        quote_volume: Volume,
        refresh: f64,
        horizon: f64,
        alpha: f64,
        gamma: f64,
        epsilon: f64,
        /// Learning off = pure evaluation of the supplied table.
        learn: bool,
        /// Per-refresh reward penalty of kappa * (inventory / quote_volume)^2
        /// in half-ticks; 0 disables it.
        #[serde(default)]
        inventory_penalty: f64,
    },
}

impl StrategyConfig {
    pub fn horizon(&self) -> f64 {
        match *self {
            StrategyConfig::Twap { horizon, .. }
            | StrategyConfig::LimitMeta { horizon, .. }
            | StrategyConfig::MarketMaker { horizon, .. }
            | StrategyConfig::ImbAttack { horizon, .. }
            | StrategyConfig::MechAttack { horizon, .. }
            | StrategyConfig::RlMarketMaker { horizon, .. } => horizon,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.horizon() > 0.0, "horizon must be positive");
        let vol_ok = match *self {
            StrategyConfig::Twap {
                total_volume,
                slice_interval,
                ..
            } => total_volume > 0 && slice_interval > 0.0,
            StrategyConfig::LimitMeta { volume, .. } => volume > 0,
            StrategyConfig::MarketMaker {
                quote_volume,
                refresh,
                ..
            } => quote_volume > 0 && refresh > 0.0,
            StrategyConfig::ImbAttack {
                main_volume,
                off_fraction,
                ..
            } => main_volume > 0 && off_fraction > 0.0,
            StrategyConfig::MechAttack { main_volume, .. } => main_volume > 0,
            StrategyConfig::RlMarketMaker {
                quote_volume,
                refresh,
                ..
            } => quote_volume > 0 && refresh > 0.0,
        };
        anyhow::ensure!(vol_ok, "volumes and intervals must be positive");
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

pub trait Strategy {
    /// Next time this strategy wants control; None when done.
    fn next_wakeup(&self) -> Option<f64>;
    fn decide(&mut self, time: f64, book: &OrderBook, account: &AgentAccount) -> Vec<AgentAction>;
}

pub fn build_strategy(cfg: &StrategyConfig, start: f64, seed: u64) -> Box<dyn Strategy> {
    match cfg.clone() {
        StrategyConfig::Twap {
            side,
            total_volume,
            horizon,
            slice_interval,
        } => Box::new(TwapAgent::new(side, total_volume, horizon, slice_interval, start)),
        StrategyConfig::LimitMeta {
            side,
            volume,
            horizon,
        } => Box::new(LimitMetaAgent::new(side, volume, start, start + horizon)),
        StrategyConfig::MarketMaker {
            depth,
            quote_volume,
            refresh,
            horizon,
        } => Box::new(MarketMakerAgent::new(depth, quote_volume, refresh, start, start + horizon)),
        StrategyConfig::ImbAttack {
            main_volume,
            off_fraction,
            depth,
            horizon,
        } => Box::new(ImbAttackAgent::new(
            main_volume,
            off_fraction,
            depth,
            start,
            start + horizon,
        )),
        StrategyConfig::MechAttack {
            push_side,
            main_volume,
            main_depth,
            horizon,
        } => Box::new(MechAttackAgent::new(
            push_side,
            main_volume,
            main_depth,
            start,
            start + horizon,
        )),
        StrategyConfig::RlMarketMaker {
            quote_volume,
            refresh,
            horizon,
            alpha,
            gamma,
            epsilon,
            learn,
            inventory_penalty,
        } => Box::new(
            RlMarketMakerAgent::new(
                QTable::new(alpha, gamma),
                quote_volume,
                refresh,
                epsilon,
                learn,
                start,
                start + horizon,
                seed,
            )
            .with_inventory_penalty(inventory_penalty),
        ),
    }
}

/// Splits the parent order equally over time as market orders.
pub struct TwapAgent {
    side: Side,
    slice_volume: Volume,
    slices: usize,
    issued: usize,
    start: f64,
    interval: f64,
}

impl TwapAgent {
    pub fn new(side: Side, total: Volume, horizon: f64, interval: f64, start: f64) -> Self {
        let slices = ((horizon / interval).round() as usize).max(1);
        TwapAgent {
            side,
            slice_volume: total / slices as Volume,
            slices,
            issued: 0,
            start,
            interval,
        }
    }
}

impl Strategy for TwapAgent {
    fn next_wakeup(&self) -> Option<f64> {
        (self.issued < self.slices).then(|| self.start + self.issued as f64 * self.interval)
    }

    fn decide(&mut self, _time: f64, _book: &OrderBook, _account: &AgentAccount) -> Vec<AgentAction> {
        if self.issued >= self.slices {
            return Vec::new();
        }
        self.issued += 1;
        vec![AgentAction::SubmitMarket {
            side: self.side,
            volume: self.slice_volume,
        }]
    }
}

/// Maintains one large limit order at the touch, replenishing after
/// fills and re-pricing only when the touch has moved (order is stale).
pub struct LimitMetaAgent {
    side: Side,
    target: Volume,
    start: f64,
    end: f64,
    poll: f64,
    next: f64,
    done: bool,
}

impl LimitMetaAgent {
    pub fn new(side: Side, target: Volume, start: f64, end: f64) -> Self {
        LimitMetaAgent {
            side,
            target,
            start,
            end,
            poll: 0.5,
            next: start,
            done: false,
        }
    }
}

impl Strategy for LimitMetaAgent {
    fn next_wakeup(&self) -> Option<f64> {
        (!self.done).then_some(self.next)
    }

    fn decide(&mut self, time: f64, book: &OrderBook, account: &AgentAccount) -> Vec<AgentAction> {
        if time >= self.end {
            self.done = true;
            // Cancel remaining, go passive.
            return account
                .open_orders
                .iter()
                .filter(|o| o.side == self.side)
                .map(|o| AgentAction::Cancel { id: o.id })
                .collect();
        }
        self.next = (time + self.poll).min(self.end);
        let touch = match book.best(self.side) {
            Some(p) => p,
            None => return Vec::new(),
        };
        let mut actions = Vec::new();
        let mut resting = 0;
        for o in account.open_orders.iter().filter(|o| o.side == self.side) {
            if o.price != touch {
                actions.push(AgentAction::Cancel { id: o.id });
            } else {
                resting += o.remaining;
            }
        }
        if resting < self.target {
            actions.push(AgentAction::SubmitLimit {
                side: self.side,
                price: touch,
                volume: self.target - resting,
            });
        }
        let _ = self.start;
        actions
    }
}

/// Symmetric quotes at a fixed depth, refreshed on a timer; quotes no
/// longer at the desired depth are cancelled and re-posted.
pub struct MarketMakerAgent {
    depth: i64,
    volume: Volume,
    refresh: f64,
    next: f64,
    end: f64,
    done: bool,
}

impl MarketMakerAgent {
    pub fn new(depth: i64, volume: Volume, refresh: f64, start: f64, end: f64) -> Self {
        MarketMakerAgent {
            depth,
            volume,
            refresh,
            next: start,
            end,
            done: false,
        }
    }
}

impl Strategy for MarketMakerAgent {
    fn next_wakeup(&self) -> Option<f64> {
        (!self.done).then_some(self.next)
    }

    fn decide(&mut self, time: f64, book: &OrderBook, account: &AgentAccount) -> Vec<AgentAction> {
        if time >= self.end {
            self.done = true;
            return account
                .open_orders
                .iter()
                .map(|o| AgentAction::Cancel { id: o.id })
                .collect();
        }
        self.next = time + self.refresh;
        let mut actions = Vec::new();
        for side in [Side::Buy, Side::Sell] {
            // One-sided book: quote only the resolvable side.
            let desired = match book.resolve_depth(side, self.depth) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let mut intact = 0;
            for o in account.open_orders.iter().filter(|o| o.side == side) {
                if o.price != desired {
                    actions.push(AgentAction::Cancel { id: o.id });
                } else {
                    intact += o.remaining;
                }
            }
            if intact < self.volume {
                actions.push(AgentAction::SubmitLimit {
                    side,
                    price: desired,
                    volume: self.volume - intact,
                });
            }
        }
        actions
    }
}

/// Large bid one tick behind the touch plus a small offsetting ask,
/// maintained as the touch moves; flattens at terminal time.
pub struct ImbAttackAgent {
    main_volume: Volume,
    off_volume: Volume,
    depth: i64,
    poll: f64,
    next: f64,
    end: f64,
    done: bool,
}

impl ImbAttackAgent {
    pub fn new(main: Volume, off_fraction: f64, depth: i64, start: f64, end: f64) -> Self {
        ImbAttackAgent {
            main_volume: main,
            off_volume: ((main as f64 * off_fraction).round() as Volume).max(1),
            depth,
            poll: 0.5,
            next: start,
            end,
            done: false,
        }
    }

    fn maintain_side(
        &self,
        side: Side,
        target: Volume,
        book: &OrderBook,
        account: &AgentAccount,
        actions: &mut Vec<AgentAction>,
    ) {
        let desired = match book.resolve_depth(side, self.depth) {
            Ok(p) => p,
            Err(_) => return,
        };
        let mut resting = 0;
        for o in account.open_orders.iter().filter(|o| o.side == side) {
            if o.price != desired {
                actions.push(AgentAction::Cancel { id: o.id });
            } else {
                resting += o.remaining;
            }
        }
        if resting < target {
            actions.push(AgentAction::SubmitLimit {
                side,
                price: desired,
                volume: target - resting,
            });
        }
    }
}

impl Strategy for ImbAttackAgent {
    fn next_wakeup(&self) -> Option<f64> {
        (!self.done).then_some(self.next)
    }

    fn decide(&mut self, time: f64, book: &OrderBook, account: &AgentAccount) -> Vec<AgentAction> {
        if time >= self.end {
            self.done = true;
            return terminal_liquidate(account);
        }
        self.next = (time + self.poll).min(self.end);
        let mut actions = Vec::new();
        self.maintain_side(Side::Buy, self.main_volume, book, account, &mut actions);
        self.maintain_side(Side::Sell, self.off_volume, book, account, &mut actions);
        actions
    }
}

/// Pushes one side of the book inward with a unit order, backed by a
/// large order resting a fixed depth behind the new touch.
pub struct MechAttackAgent {
    push_side: Side,
    main_volume: Volume,
    main_depth: i64,
    poll: f64,
    next: f64,
    end: f64,
    done: bool,
}

impl MechAttackAgent {
    pub fn new(push_side: Side, main: Volume, main_depth: i64, start: f64, end: f64) -> Self {
        MechAttackAgent {
            push_side,
            main_volume: main,
            main_depth,
            poll: 0.25,
            next: start,
            end,
            done: false,
        }
    }

    /// Unit-order price: up to two ticks inside the push-side touch,
    /// never crossing the opposite touch.
    fn unit_price(&self, book: &OrderBook) -> Option<TickPrice> {
        let own = book.best(self.push_side)?;
        let opp = book.best(self.push_side.opposite())?;
        Some(match self.push_side {
            Side::Sell => (own - 2).max(opp + 1).min(own),
            Side::Buy => (own + 2).min(opp - 1).max(own),
        })
    }
}

impl Strategy for MechAttackAgent {
    fn next_wakeup(&self) -> Option<f64> {
        (!self.done).then_some(self.next)
    }

    fn decide(&mut self, time: f64, book: &OrderBook, account: &AgentAccount) -> Vec<AgentAction> {
        if time >= self.end {
            self.done = true;
            return terminal_liquidate(account);
        }
        self.next = (time + self.poll).min(self.end);
        let unit = match self.unit_price(book) {
            Some(p) => p,
            None => return Vec::new(),
        };
        let main = match self.push_side {
            Side::Sell => unit + self.main_depth,
            Side::Buy => unit - self.main_depth,
        };
        let mut actions = Vec::new();
        let mut have_unit = false;
        let mut main_vol = 0;
        for o in account.open_orders.iter().filter(|o| o.side == self.push_side) {
            if o.price == unit && o.remaining == 1 && !have_unit {
                have_unit = true;
            } else if o.price == main {
                main_vol += o.remaining;
            } else {
                // Stale price level; re-placed below, never cancelled to dodge fills.
                actions.push(AgentAction::Cancel { id: o.id });
            }
        }
        if !have_unit {
            actions.push(AgentAction::SubmitLimit {
                side: self.push_side,
                price: unit,
                volume: 1,
            });
        }
        if main_vol < self.main_volume {
            actions.push(AgentAction::SubmitLimit {
                side: self.push_side,
                price: main,
                volume: self.main_volume - main_vol,
            });
        }
        actions
    }
}

// ---------------------------------------------------------------------------
// Tabular Q-learning market maker
// ---------------------------------------------------------------------------

pub const NUM_RL_ACTIONS: usize = 15;

/// Quoting instruction decoded from an action index; depths are ticks
/// from the touch, `None` means quote nothing on that side. All actions
/// use the strategy's single (large) quote size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub bid_depth: Option<i64>,
    pub ask_depth: Option<i64>,
}

pub fn decode_rl_action(index: usize) -> Result<ActionSpec, AgentError> {
    let spec = match index {
        // 0-4: symmetric at 1..5 ticks.
        0..=4 => ActionSpec {
            bid_depth: Some(index as i64 + 1),
            ask_depth: Some(index as i64 + 1),
        },
        5 => ActionSpec {
            bid_depth: Some(1),
            ask_depth: Some(2),
        },
        6 => ActionSpec {
            bid_depth: Some(2),
            ask_depth: Some(1),
        },
        7 => ActionSpec {
            bid_depth: Some(2),
            ask_depth: Some(5),
        },
        8 => ActionSpec {
            bid_depth: Some(5),
            ask_depth: Some(2),
        },
        // 9-11: bid only at 1..3.
        9..=11 => ActionSpec {
            bid_depth: Some(index as i64 - 8),
            ask_depth: None,
        },
        // 12-14: ask only at 1..3.
        12..=14 => ActionSpec {
            bid_depth: None,
            ask_depth: Some(index as i64 - 11),
        },
        _ => return Err(AgentError::InvalidAction(index)),
    };
    Ok(spec)
}

pub fn encode_rl_action(spec: ActionSpec) -> Option<usize> {
    (0..NUM_RL_ACTIONS).find(|&i| decode_rl_action(i).unwrap() == spec)
}

/// Discrete state: signed inventory bucket (in quote-size multiples,
/// clamped to +-2) and a binary spread bucket (tight <= 2 ticks, wide
/// otherwise). Kept deliberately coarse so the tabular policy's
/// state-action pairs each collect enough visits in a short budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RlState {
    pub inventory_bucket: i8,
    pub spread_bucket: u8,
}

pub fn bucketize(inventory: i64, quote_volume: Volume, spread: i64) -> RlState {
    let ratio = inventory as f64 / quote_volume as f64;
    let inventory_bucket = ratio.round().clamp(-2.0, 2.0) as i8;
    let spread_bucket = u8::from(spread > 2);
    RlState {
        inventory_bucket,
        spread_bucket,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QTable {
    pub q: HashMap<RlState, [f64; NUM_RL_ACTIONS]>,
    pub alpha: f64,
    pub gamma: f64,
    /// Initial value of unseen state-action pairs. Optimistic (positive)
    /// initialization forces every action to be tried before the greedy
    /// policy settles.
    #[serde(default)]
    pub optimism: f64,
}

impl QTable {
    pub fn new(alpha: f64, gamma: f64) -> Self {
        QTable {
            q: HashMap::new(),
            alpha,
            gamma,
            optimism: 0.0,
        }
    }

    pub fn optimistic(alpha: f64, gamma: f64, optimism: f64) -> Self {
        QTable {
            q: HashMap::new(),
            alpha,
            gamma,
            optimism,
        }
    }

    pub fn values(&self, s: RlState) -> [f64; NUM_RL_ACTIONS] {
        self.q
            .get(&s)
            .copied()
            .unwrap_or([self.optimism; NUM_RL_ACTIONS])
    }
}

pub fn q_update(table: &mut QTable, s: RlState, a: usize, r: f64, s_next: RlState) {
    let max_next = table
        .values(s_next)
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let init = [table.optimism; NUM_RL_ACTIONS];
    let row = table.q.entry(s).or_insert(init);
    row[a] = (1.0 - table.alpha) * row[a] + table.alpha * (r + table.gamma * max_next);
}

/// Epsilon-greedy with deterministic lowest-index tie-break.
pub fn select_action<R: Rng>(table: &QTable, s: RlState, epsilon: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < epsilon {
        return rng.gen_range(0..NUM_RL_ACTIONS);
    }
    let values = table.values(s);
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Market maker whose per-refresh quoting is chosen by a tabular
/// Q-policy over (inventory bucket, spread bucket). Reward is the MtM
/// PnL change (half-tick units) since the previous refresh.
pub struct RlMarketMakerAgent {
    pub table: QTable,
    quote_volume: Volume,
    refresh: f64,
    epsilon: f64,
    learn: bool,
    next: f64,
    end: f64,
    done: bool,
    rng: rand_chacha::ChaCha20Rng,
    last: Option<(RlState, usize, i64)>,
    inventory_penalty: f64,
    /// Sum of the quadratic inventory penalties charged so far; episode
    /// reward is terminal PnL minus this.
    pub penalty_accrued: f64,
}

impl RlMarketMakerAgent {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        table: QTable,
        quote_volume: Volume,
        refresh: f64,
        epsilon: f64,
        learn: bool,
        start: f64,
        end: f64,
        seed: u64,
    ) -> Self {
        use rand::SeedableRng;
        RlMarketMakerAgent {
            table,
            quote_volume,
            refresh,
            epsilon,
            learn,
            next: start,
            end,
            done: false,
            rng: rand_chacha::ChaCha20Rng::seed_from_u64(seed),
            last: None,
            inventory_penalty: 0.0,
            penalty_accrued: 0.0,
        }
    }

    pub fn with_inventory_penalty(mut self, kappa: f64) -> Self {
        self.inventory_penalty = kappa;
        self
    }

    pub fn quote_actions(
        &self,
        spec: ActionSpec,
        book: &OrderBook,
        account: &AgentAccount,
    ) -> Vec<AgentAction> {
        let mut actions = Vec::new();
        for (side, depth) in [(Side::Buy, spec.bid_depth), (Side::Sell, spec.ask_depth)] {
            let desired = depth.and_then(|d| book.resolve_depth(side, d).ok());
            let mut intact = 0;
            for o in account.open_orders.iter().filter(|o| o.side == side) {
                if Some(o.price) != desired {
                    actions.push(AgentAction::Cancel { id: o.id });
                } else {
                    intact += o.remaining;
                }
            }
            if let Some(price) = desired {
                if intact < self.quote_volume {
                    actions.push(AgentAction::SubmitLimit {
                        side,
                        price,
                        volume: self.quote_volume - intact,
                    });
                }
            }
        }
        actions
    }
}

impl Strategy for RlMarketMakerAgent {
    fn next_wakeup(&self) -> Option<f64> {
        (!self.done).then_some(self.next)
    }

    fn decide(&mut self, time: f64, book: &OrderBook, account: &AgentAccount) -> Vec<AgentAction> {
        if time >= self.end {
            self.done = true;
            return terminal_liquidate(account);
        }
        self.next = time + self.refresh;
        let (mid2, spread) = match (book.mid2(), book.spread()) {
            (Some(m), Some(s)) => (m, s),
            _ => return Vec::new(),
        };
        let state = bucketize(account.inventory, self.quote_volume, spread);
        let norm = account.inventory as f64 / self.quote_volume as f64;
        let penalty = self.inventory_penalty * norm * norm;
        if self.last.is_some() {
            self.penalty_accrued += penalty;
        }
        if self.learn {
            if let Some((prev_s, prev_a, prev_mtm)) = self.last {
                let reward = (account.mark_to_market(mid2) - prev_mtm) as f64 - penalty;
                q_update(&mut self.table, prev_s, prev_a, reward, state);
            }
        }
        let action = select_action(&self.table, state, self.epsilon, &mut self.rng);
        self.last = Some((state, action, account.mark_to_market(mid2)));
        let spec = decode_rl_action(action).expect("in range");
        self.quote_actions(spec, book, account)
    }
}
