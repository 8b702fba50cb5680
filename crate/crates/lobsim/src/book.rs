//! Limit order book with price-time-priority matching.
//!
//! Prices are integer ticks (1 tick = minimum increment). The book keeps
//! bid levels in descending and ask levels in ascending price order, each
//! level a FIFO queue. Matching walks the opposite side by price, then by
//! arrival sequence within a level. Each applied event reports the trades
//! it caused plus a volume-conservation breakdown
//! (submitted = executed + rested + cancelled + discarded).

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};
use thiserror::Error;

pub type OrderId = u64;
pub type Volume = u64;

/// Price in integer ticks. Always positive.
pub type TickPrice = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Buy => Side::Sell,
            Side::Sell => Side::Buy,
        }
    }
}

/// Who placed an order; used to route fills and to scope generator cancels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Owner {
    Generator,
    Replay,
    Agent(u32),
}

impl Owner {
    pub fn is_agent(self) -> bool {
        matches!(self, Owner::Agent(_))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestingOrder {
    pub id: OrderId,
    pub side: Side,
    pub price: TickPrice,
    pub remaining: Volume,
    pub owner: Owner,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub time: f64,
    pub price: TickPrice,
    pub volume: Volume,
    pub aggressor: Side,
    pub maker_id: OrderId,
    pub maker_owner: Owner,
    pub taker_owner: Owner,
    /// Positive if seller-initiated (sell aggressor), negative otherwise.
    pub signed_volume: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BookEvent {
    SubmitLimit {
        side: Side,
        price: TickPrice,
        volume: Volume,
        owner: Owner,
    },
    SubmitMarket {
        side: Side,
        volume: Volume,
        owner: Owner,
    },
    Cancel {
        id: OrderId,
        volume: Option<Volume>,
    },
    /// Generator-style cancel: removes volume at the level `depth` ticks from
    /// the same-side touch, youngest order first, clamped to what is there.
    CancelAtDepth {
        side: Side,
        depth: i64,
        volume: Volume,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BookError {
    #[error("cancel references unknown order id {0}")]
    CancelUnknown(OrderId),
    #[error("market order against empty {0:?} side")]
    EmptySide(Side),
    #[error("no touch on {0:?} side for depth resolution")]
    NoTouch(Side),
    #[error("event volume must be positive")]
    ZeroVolume,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct ApplyResult {
    pub trades: Vec<Trade>,
    /// Id of the resting remainder, when a limit order rested.
    pub resting_id: Option<OrderId>,
    pub submitted: Volume,
    pub executed: Volume,
    pub rested: Volume,
    pub cancelled: Volume,
    /// Market-order volume dropped because the opposite side ran dry.
    pub discarded: Volume,
    pub liquidity_exhausted: bool,
    /// CancelAtDepth hit an empty or missing level.
    pub noop_cancel: bool,
    /// CancelAtDepth was clamped below the requested volume.
    pub clamped_cancel: bool,
}

#[derive(Debug, Default, Clone)]
struct Level {
    queue: VecDeque<RestingOrder>,
    volume: Volume,
}

/// Two-sided book. Single writer; never mutated concurrently.
#[derive(Debug, Default, Clone)]
pub struct OrderBook {
    bids: BTreeMap<TickPrice, Level>,
    asks: BTreeMap<TickPrice, Level>,
    index: HashMap<OrderId, (Side, TickPrice)>,
    next_id: OrderId,
    next_seq: u64,
}

impl OrderBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn best(&self, side: Side) -> Option<TickPrice> {
        match side {
            Side::Buy => self.bids.keys().next_back().copied(),
            Side::Sell => self.asks.keys().next().copied(),
        }
    }

    /// Best bid + best ask, i.e. twice the midprice. Exact in integer ticks.
    pub fn mid2(&self) -> Option<i64> {
        Some(self.best(Side::Buy)? + self.best(Side::Sell)?)
    }

    pub fn midprice(&self) -> Option<f64> {
        self.mid2().map(|m| m as f64 / 2.0)
    }

    pub fn spread(&self) -> Option<i64> {
        Some(self.best(Side::Sell)? - self.best(Side::Buy)?)
    }

    pub fn level_volume(&self, side: Side, price: TickPrice) -> Volume {
        let levels = match side {
            Side::Buy => &self.bids,
            Side::Sell => &self.asks,
        };
        levels.get(&price).map_or(0, |l| l.volume)
    }

    /// Volume at the i-th best level (1-based), 0 when absent.
    pub fn depth_volume(&self, side: Side, i: usize) -> Volume {
        debug_assert!(i >= 1);
        match side {
            Side::Buy => self.bids.values().rev().nth(i - 1).map_or(0, |l| l.volume),
            Side::Sell => self.asks.values().nth(i - 1).map_or(0, |l| l.volume),
        }
    }

    pub fn total_volume(&self, side: Side, top_n: usize) -> Volume {
        match side {
            Side::Buy => self.bids.values().rev().take(top_n).map(|l| l.volume).sum(),
            Side::Sell => self.asks.values().take(top_n).map(|l| l.volume).sum(),
        }
    }

    pub fn order(&self, id: OrderId) -> Option<&RestingOrder> {
        let (side, price) = *self.index.get(&id)?;
        let level = match side {
            Side::Buy => self.bids.get(&price)?,
            Side::Sell => self.asks.get(&price)?,
        };
        level.queue.iter().find(|o| o.id == id)
    }

    /// Price `depth` ticks from the same-side touch. Depth 0 is at the touch;
    /// negative depths price inside the spread. Result clamped to 1 tick.
    pub fn resolve_depth(&self, side: Side, depth: i64) -> Result<TickPrice, BookError> {
        let touch = self.best(side).ok_or(BookError::NoTouch(side))?;
        let price = match side {
            Side::Buy => touch - depth,
            Side::Sell => touch + depth,
        };
        Ok(price.max(1))
    }

    /// Top-n snapshot, padded with `None` when fewer levels exist.
    /// Returns (bid prices, bid volumes, ask prices, ask volumes).
    #[allow(clippy::type_complexity)]
    pub fn snapshot(
        &self,
        n: usize,
    ) -> (
        Vec<Option<TickPrice>>,
        Vec<Option<Volume>>,
        Vec<Option<TickPrice>>,
        Vec<Option<Volume>>,
    ) {
        let mut bp = vec![None; n];
        let mut bv = vec![None; n];
        let mut ap = vec![None; n];
        let mut av = vec![None; n];
        for (i, (p, l)) in self.bids.iter().rev().take(n).enumerate() {
            bp[i] = Some(*p);
            bv[i] = Some(l.volume);
        }
        for (i, (p, l)) in self.asks.iter().take(n).enumerate() {
            ap[i] = Some(*p);
            av[i] = Some(l.volume);
        }
        (bp, bv, ap, av)
    }

    pub fn apply(&mut self, event: BookEvent, time: f64) -> Result<ApplyResult, BookError> {
        match event {
            BookEvent::SubmitLimit {
                side,
                price,
                volume,
                owner,
            } => self.submit_limit(side, price, volume, owner, time),
            BookEvent::SubmitMarket {
                side,
                volume,
                owner,
            } => self.submit_market(side, volume, owner, time),
            BookEvent::Cancel { id, volume } => self.cancel(id, volume),
            BookEvent::CancelAtDepth {
                side,
                depth,
                volume,
            } => self.cancel_at_depth(side, depth, volume),
        }
    }

    fn submit_limit(
        &mut self,
        side: Side,
        price: TickPrice,
        volume: Volume,
        owner: Owner,
        time: f64,
    ) -> Result<ApplyResult, BookError> {
        if volume == 0 {
            return Err(BookError::ZeroVolume);
        }
        let mut res = ApplyResult {
            submitted: volume,
            ..Default::default()
        };
        // Marketable portion executes first, limited by the limit price.
        let mut remaining = volume;
        self.match_against(side, Some(price), &mut remaining, owner, time, &mut res);
        if remaining > 0 {
            let id = self.next_id;
            self.next_id += 1;
            let seq = self.next_seq;
            self.next_seq += 1;
            let order = RestingOrder {
                id,
                side,
                price,
                remaining,
                owner,
                seq,
            };
            let levels = match side {
                Side::Buy => &mut self.bids,
                Side::Sell => &mut self.asks,
            };
            let level = levels.entry(price).or_default();
            level.volume += remaining;
            level.queue.push_back(order);
            self.index.insert(id, (side, price));
            res.resting_id = Some(id);
            res.rested = remaining;
        }
        debug_assert!(!self.crossed());
        Ok(res)
    }

    fn submit_market(
        &mut self,
        side: Side,
        volume: Volume,
        owner: Owner,
        time: f64,
    ) -> Result<ApplyResult, BookError> {
        if volume == 0 {
            return Err(BookError::ZeroVolume);
        }
        let opposite_empty = match side {
            Side::Buy => self.asks.is_empty(),
            Side::Sell => self.bids.is_empty(),
        };
        if opposite_empty {
            return Err(BookError::EmptySide(side.opposite()));
        }
        let mut res = ApplyResult {
            submitted: volume,
            ..Default::default()
        };
        let mut remaining = volume;
        self.match_against(side, None, &mut remaining, owner, time, &mut res);
        if remaining > 0 {
            // Opposite side ran dry: fill what exists, discard the rest.
            res.discarded = remaining;
            res.liquidity_exhausted = true;
        }
        Ok(res)
    }

    fn match_against(
        &mut self,
        side: Side,
        limit: Option<TickPrice>,
        remaining: &mut Volume,
        taker_owner: Owner,
        time: f64,
        res: &mut ApplyResult,
    ) {
        while *remaining > 0 {
            let best = match side {
                Side::Buy => self.asks.keys().next().copied(),
                Side::Sell => self.bids.keys().next_back().copied(),
            };
            let Some(level_price) = best else { break };
            if let Some(lp) = limit {
                let crosses = match side {
                    Side::Buy => level_price <= lp,
                    Side::Sell => level_price >= lp,
                };
                if !crosses {
                    break;
                }
            }
            let levels = match side {
                Side::Buy => &mut self.asks,
                Side::Sell => &mut self.bids,
            };
            let level = levels.get_mut(&level_price).expect("level exists");
            while *remaining > 0 {
                let Some(front) = level.queue.front_mut() else {
                    break;
                };
                let fill = (*remaining).min(front.remaining);
                front.remaining -= fill;
                level.volume -= fill;
                *remaining -= fill;
                res.executed += fill;
                let signed = match side {
                    Side::Sell => fill as i64,
                    Side::Buy => -(fill as i64),
                };
                res.trades.push(Trade {
                    time,
                    price: level_price,
                    volume: fill,
                    aggressor: side,
                    maker_id: front.id,
                    maker_owner: front.owner,
                    taker_owner,
                    signed_volume: signed,
                });
                if front.remaining == 0 {
                    let done = level.queue.pop_front().expect("front exists");
                    self.index.remove(&done.id);
                }
            }
            if level.queue.is_empty() {
                levels.remove(&level_price);
            }
        }
    }

    fn cancel(&mut self, id: OrderId, volume: Option<Volume>) -> Result<ApplyResult, BookError> {
        let (side, price) = *self.index.get(&id).ok_or(BookError::CancelUnknown(id))?;
        let levels = match side {
            Side::Buy => &mut self.bids,
            Side::Sell => &mut self.asks,
        };
        let level = levels.get_mut(&price).expect("indexed level exists");
        let pos = level
            .queue
            .iter()
            .position(|o| o.id == id)
            .expect("indexed order exists");
        let order = &mut level.queue[pos];
        let take = volume.unwrap_or(order.remaining).min(order.remaining);
        if take == 0 {
            return Err(BookError::ZeroVolume);
        }
        order.remaining -= take;
        level.volume -= take;
        if order.remaining == 0 {
            level.queue.remove(pos);
            self.index.remove(&id);
        }
        if level.queue.is_empty() {
            levels.remove(&price);
        }
        Ok(ApplyResult {
            submitted: take,
            cancelled: take,
            ..Default::default()
        })
    }

    fn cancel_at_depth(
        &mut self,
        side: Side,
        depth: i64,
        volume: Volume,
    ) -> Result<ApplyResult, BookError> {
        if volume == 0 {
            return Err(BookError::ZeroVolume);
        }
        let price = self.resolve_depth(side, depth)?;
        let mut res = ApplyResult {
            submitted: volume,
            ..Default::default()
        };
        let levels = match side {
            Side::Buy => &mut self.bids,
            Side::Sell => &mut self.asks,
        };
        let Some(level) = levels.get_mut(&price) else {
            res.noop_cancel = true;
            return Ok(res);
        };
        // Youngest-first, skipping agent-owned orders: queue priority of the
        // oldest resting volume is left intact.
        let mut to_remove = volume;
        let mut i = level.queue.len();
        while to_remove > 0 && i > 0 {
            i -= 1;
            let order = &mut level.queue[i];
            if order.owner.is_agent() {
                continue;
            }
            let take = to_remove.min(order.remaining);
            order.remaining -= take;
            level.volume -= take;
            res.cancelled += take;
            to_remove -= take;
            if order.remaining == 0 {
                let id = order.id;
                level.queue.remove(i);
                self.index.remove(&id);
            }
        }
        if level.queue.is_empty() {
            levels.remove(&price);
        }
        if res.cancelled == 0 {
            res.noop_cancel = true;
        } else if res.cancelled < volume {
            res.clamped_cancel = true;
        }
        Ok(res)
    }

    pub fn crossed(&self) -> bool {
        match (self.best(Side::Buy), self.best(Side::Sell)) {
            (Some(b), Some(a)) => b >= a,
            _ => false,
        }
    }

    /// Level-cache consistency: cached volume equals the sum over its queue.
    pub fn check_level_sums(&self) -> bool {
        self.bids
            .iter()
            .chain(self.asks.iter())
            .all(|(_, l)| l.volume == l.queue.iter().map(|o| o.remaining).sum::<Volume>())
    }

    pub fn num_orders(&self) -> usize {
        self.index.len()
    }

    pub fn iter_orders(&self) -> impl Iterator<Item = &RestingOrder> {
        self.bids
            .values()
            .chain(self.asks.values())
            .flat_map(|l| l.queue.iter())
    }

    /// Seeds a resting order directly (snapshot ingestion); no matching.
    pub fn seed_order(&mut self, side: Side, price: TickPrice, volume: Volume, owner: Owner) -> OrderId {
        let id = self.next_id;
        self.next_id += 1;
        let seq = self.next_seq;
        self.next_seq += 1;
        let levels = match side {
            Side::Buy => &mut self.bids,
            Side::Sell => &mut self.asks,
        };
        let level = levels.entry(price).or_default();
        level.volume += volume;
        level.queue.push_back(RestingOrder {
            id,
            side,
            price,
            remaining: volume,
            owner,
            seq,
        });
        self.index.insert(id, (side, price));
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The Fig.-1 book: best bid 98 (vol 60), asks 100:20 and 101:40.
    pub fn fig1_book() -> OrderBook {
        let mut book = OrderBook::new();
        book.seed_order(Side::Buy, 98, 60, Owner::Replay);
        book.seed_order(Side::Sell, 100, 20, Owner::Replay);
        book.seed_order(Side::Sell, 101, 40, Owner::Replay);
        book
    }

    #[test]
    fn fig1_market_buy_40() {
        let mut book = fig1_book();
        assert_eq!(book.spread(), Some(2));
        assert_eq!(book.midprice(), Some(99.0));
        let res = book
            .apply(
                BookEvent::SubmitMarket {
                    side: Side::Buy,
                    volume: 40,
                    owner: Owner::Agent(0),
                },
                0.0,
            )
            .unwrap();
        let fills: Vec<(TickPrice, Volume)> =
            res.trades.iter().map(|t| (t.price, t.volume)).collect();
        assert_eq!(fills, vec![(100, 20), (101, 20)]);
        assert_eq!(book.best(Side::Sell), Some(101));
        assert_eq!(book.level_volume(Side::Sell, 101), 20);
        assert_eq!(book.spread(), Some(3));
        // Buyer-initiated trades carry negative signed volume.
        assert!(res.trades.iter().all(|t| t.signed_volume < 0));
    }

    #[test]
    fn rest_only_limit() {
        let mut book = OrderBook::new();
        let res = book
            .apply(
                BookEvent::SubmitLimit {
                    side: Side::Buy,
                    price: 98,
                    volume: 60,
                    owner: Owner::Generator,
                },
                0.0,
            )
            .unwrap();
        assert!(res.trades.is_empty());
        assert_eq!(res.rested, 60);
        assert_eq!(book.best(Side::Buy), Some(98));
        assert_eq!(book.level_volume(Side::Buy, 98), 60);
    }

    #[test]
    fn full_cancel_removes_level() {
        let mut book = fig1_book();
        book.apply(
            BookEvent::SubmitMarket {
                side: Side::Buy,
                volume: 40,
                owner: Owner::Agent(0),
            },
            0.0,
        )
        .unwrap();
        // Only order left at 101 has id 2.
        let id = book.iter_orders().find(|o| o.price == 101).unwrap().id;
        book.apply(BookEvent::Cancel { id, volume: None }, 1.0).unwrap();
        assert_eq!(book.best(Side::Sell), None);
    }

    #[test]
    fn aggressive_limit_executes_then_rests() {
        let mut book = fig1_book();
        let res = book
            .apply(
                BookEvent::SubmitLimit {
                    side: Side::Buy,
                    price: 100,
                    volume: 30,
                    owner: Owner::Agent(1),
                },
                0.0,
            )
            .unwrap();
        assert_eq!(res.executed, 20);
        assert_eq!(res.rested, 10);
        assert_eq!(book.best(Side::Buy), Some(100));
        assert!(!book.crossed());
    }

    #[test]
    fn market_exhausts_liquidity() {
        let mut book = OrderBook::new();
        book.seed_order(Side::Sell, 100, 10, Owner::Replay);
        let res = book
            .apply(
                BookEvent::SubmitMarket {
                    side: Side::Buy,
                    volume: 25,
                    owner: Owner::Agent(0),
                },
                0.0,
            )
            .unwrap();
        assert_eq!(res.executed, 10);
        assert_eq!(res.discarded, 15);
        assert!(res.liquidity_exhausted);
    }

    #[test]
    fn market_against_empty_side_rejected() {
        let mut book = OrderBook::new();
        book.seed_order(Side::Buy, 98, 10, Owner::Replay);
        let err = book
            .apply(
                BookEvent::SubmitMarket {
                    side: Side::Buy,
                    volume: 5,
                    owner: Owner::Agent(0),
                },
                0.0,
            )
            .unwrap_err();
        assert_eq!(err, BookError::EmptySide(Side::Sell));
        assert_eq!(book.level_volume(Side::Buy, 98), 10);
    }

    #[test]
    fn cancel_unknown_id() {
        let mut book = OrderBook::new();
        let err = book
            .apply(BookEvent::Cancel { id: 42, volume: None }, 0.0)
            .unwrap_err();
        assert_eq!(err, BookError::CancelUnknown(42));
    }

    #[test]
    fn resolve_depth_examples() {
        let book = fig1_book();
        assert_eq!(book.resolve_depth(Side::Buy, 1).unwrap(), 97);
        assert_eq!(book.resolve_depth(Side::Sell, 0).unwrap(), 100);
        assert_eq!(book.resolve_depth(Side::Sell, -1).unwrap(), 99);
        let empty = OrderBook::new();
        assert_eq!(
            empty.resolve_depth(Side::Buy, 1).unwrap_err(),
            BookError::NoTouch(Side::Buy)
        );
    }

    #[test]
    fn resolve_depth_tracks_displaced_touch() {
        let mut book = fig1_book();
        // Agent posts an aggressive ask inside the spread at 99.
        book.apply(
            BookEvent::SubmitLimit {
                side: Side::Sell,
                price: 99,
                volume: 1,
                owner: Owner::Agent(0),
            },
            0.0,
        )
        .unwrap();
        assert_eq!(book.resolve_depth(Side::Sell, 0).unwrap(), 99);
    }

    #[test]
    fn snapshot_padding() {
        let book = fig1_book();
        let (bp, bv, ap, av) = book.snapshot(1);
        assert_eq!(bp, vec![Some(98)]);
        assert_eq!(bv, vec![Some(60)]);
        assert_eq!(ap, vec![Some(100)]);
        assert_eq!(av, vec![Some(20)]);
        let (bp, _, ap, _) = OrderBook::new().snapshot(5);
        assert!(bp.iter().all(Option::is_none));
        assert!(ap.iter().all(Option::is_none));
        let (_, _, ap, _) = book.snapshot(5);
        assert_eq!(ap[0], Some(100));
        assert_eq!(ap[1], Some(101));
        assert!(ap[2..].iter().all(Option::is_none));
    }

    #[test]
    fn one_sided_spread_undefined() {
        let mut book = OrderBook::new();
        book.seed_order(Side::Buy, 98, 10, Owner::Replay);
        assert_eq!(book.spread(), None);
        assert_eq!(book.midprice(), None);
    }

    #[test]
    fn cancel_at_depth_youngest_first_skips_agents() {
        let mut book = OrderBook::new();
        book.seed_order(Side::Buy, 98, 10, Owner::Generator); // oldest
        book.seed_order(Side::Buy, 98, 10, Owner::Agent(0));
        book.seed_order(Side::Buy, 98, 10, Owner::Generator); // youngest
        book.seed_order(Side::Sell, 100, 5, Owner::Replay);
        let res = book
            .apply(
                BookEvent::CancelAtDepth {
                    side: Side::Buy,
                    depth: 0,
                    volume: 15,
                },
                0.0,
            )
            .unwrap();
        assert_eq!(res.cancelled, 15);
        // Youngest generator order fully gone, oldest reduced to 5; the
        // agent order is untouched.
        let orders: Vec<(Owner, Volume)> = book
            .iter_orders()
            .filter(|o| o.price == 98)
            .map(|o| (o.owner, o.remaining))
            .collect();
        assert_eq!(orders, vec![(Owner::Generator, 5), (Owner::Agent(0), 10)]);
    }

    #[test]
    fn cancel_at_depth_clamps_and_flags() {
        let mut book = fig1_book();
        let res = book
            .apply(
                BookEvent::CancelAtDepth {
                    side: Side::Sell,
                    depth: 0,
                    volume: 500,
                },
                0.0,
            )
            .unwrap();
        assert_eq!(res.cancelled, 20);
        assert!(res.clamped_cancel);
        // Depth with no level is a flagged no-op.
        let res = book
            .apply(
                BookEvent::CancelAtDepth {
                    side: Side::Buy,
                    depth: 3,
                    volume: 10,
                },
                0.0,
            )
            .unwrap();
        assert!(res.noop_cancel);
        assert_eq!(res.cancelled, 0);
    }

    #[test]
    fn price_time_priority_within_level() {
        let mut book = OrderBook::new();
        let first = book.seed_order(Side::Sell, 100, 10, Owner::Generator);
        let second = book.seed_order(Side::Sell, 100, 10, Owner::Generator);
        let res = book
            .apply(
                BookEvent::SubmitMarket {
                    side: Side::Buy,
                    volume: 15,
                    owner: Owner::Agent(0),
                },
                0.0,
            )
            .unwrap();
        assert_eq!(res.trades[0].maker_id, first);
        assert_eq!(res.trades[0].volume, 10);
        assert_eq!(res.trades[1].maker_id, second);
        assert_eq!(res.trades[1].volume, 5);
    }
}
