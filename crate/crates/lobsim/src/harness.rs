//! Event-time simulation loop: couples a generator (or a historical
//! message stream), the book, feature frames, and trading agents into
//! deterministic trajectories, plus paired A/B impact runs,
//! feature-fixing rollouts, and lattice experiment plans.
//!
//! Determinism: every random stream is a ChaCha20 instance derived from
//! the config seed, and the generator stream is independent of the agent
//! roster, so paired A/B arms share their order flow until the first
//! agent action perturbs the book.

use crate::agents::{
    build_strategy, route_fills, AgentAccount, AgentAction, Strategy, StrategyConfig,
};
use crate::book::{BookEvent, OrderBook, OrderId, Owner, Side, TickPrice, Trade, Volume};
use crate::features::{
    build_conditioning, compute_frame, ChiSampler, FeatureId, FeatureSpec, MarketState,
    OverrideSet, SpecVersion,
};
use crate::generator::{
    sample_noise, sample_token_learned, sample_token_reference, token_to_event, LearnedGenerator,
    ReferenceParams,
};
use crate::io::MessageRecord;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Generative,
    Replay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorKind {
    Reference(ReferenceParams),
    Learned(LearnedGenerator),
}

/// Book levels plus warm feature histories covering the 30 s before t=0
/// (times negative or zero).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StartSnapshot {
    pub bids: Vec<(TickPrice, Volume)>,
    pub asks: Vec<(TickPrice, Volume)>,
    /// (time, signed volume), seller-initiated positive.
    pub warm_trades: Vec<(f64, i64)>,
    pub warm_mid2: Vec<(f64, i64)>,
}

impl StartSnapshot {
    pub fn fig1() -> Self {
        StartSnapshot {
            bids: vec![(98, 60)],
            asks: vec![(100, 20), (101, 40)],
            warm_trades: Vec::new(),
            warm_mid2: Vec::new(),
        }
    }

    pub fn build_book(&self) -> OrderBook {
        let mut book = OrderBook::new();
        for &(p, v) in &self.bids {
            book.seed_order(Side::Buy, p, v, Owner::Replay);
        }
        for &(p, v) in &self.asks {
            book.seed_order(Side::Sell, p, v, Owner::Replay);
        }
        book
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: Mode,
    pub generator: GeneratorKind,
    pub spec_version: SpecVersion,
    pub seed: u64,
    /// Seconds of simulated time.
    pub duration: f64,
    pub start: StartSnapshot,
    pub agents: Vec<StrategyConfig>,
    #[serde(default)]
    pub overrides: OverrideSet,
}

impl SimConfig {
    pub fn generative(start: StartSnapshot, seed: u64, duration: f64) -> Self {
        SimConfig {
            mode: Mode::Generative,
            generator: GeneratorKind::Reference(ReferenceParams::default()),
            spec_version: SpecVersion::V0,
            seed,
            duration,
            start,
            agents: Vec::new(),
            overrides: OverrideSet::default(),
        }
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable config");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        format!("{:x}", hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub owner: Owner,
    pub event: BookEvent,
    pub executed: Volume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountRecord {
    pub time: f64,
    pub agent_id: u32,
    pub cash: i64,
    pub inventory: i64,
    pub mid2: i64,
    /// MtM PnL in half-tick units.
    pub pnl: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub events: Vec<EventRecord>,
    pub trades: Vec<Trade>,
    /// mid2 after each applied event.
    pub mids: Vec<(f64, i64)>,
    pub frames: Vec<(f64, Vec<f64>)>,
    pub accounts: Vec<AccountRecord>,
    pub final_accounts: Vec<AgentAccount>,
    pub meta: RunMeta,
    pub warnings: Vec<String>,
    pub hidden_executions: usize,
}

impl Trajectory {
    /// Last mid2 at or before `time`; falls back to the earliest mid.
    pub fn mid2_at(&self, time: f64) -> Option<i64> {
        self.mids
            .iter()
            .rev()
            .find(|(t, _)| *t <= time)
            .or_else(|| self.mids.first())
            .map(|&(_, m)| m)
    }
}

struct AgentSlot {
    strategy: Box<dyn Strategy>,
    account: AgentAccount,
}

enum FlowSource {
    Generative(GeneratorKind),
    Replay(Vec<MessageRecord>),
}

/// One running simulation.
pub struct World {
    pub clock: f64,
    pub horizon: f64,
    pub book: OrderBook,
    pub state: MarketState,
    pub spec: FeatureSpec,
    pub overrides: OverrideSet,
    chi: ChiSampler,
    gen_rng: ChaCha20Rng,
    flow: FlowSource,
    next_gen_time: f64,
    replay_idx: usize,
    /// Historical order id -> live book order id.
    id_map: HashMap<u64, OrderId>,
    next_frame_time: f64,
    agents: Vec<AgentSlot>,
    /// Resting id left by the most recent apply_event, when one rested.
    last_resting_id: Option<OrderId>,
    pub traj: Trajectory,
    done: bool,
}

impl World {
    pub fn new(config: &SimConfig) -> Self {
        Self::with_flow(
            config,
            FlowSource::Generative(config.generator.clone()),
            config.duration,
        )
    }

    fn with_flow(config: &SimConfig, flow: FlowSource, horizon: f64) -> Self {
        let spec = FeatureSpec::for_version(config.spec_version);
        let book = config.start.build_book();
        let mut state = MarketState::new();
        for &(t, v) in &config.start.warm_trades {
            state.record_trade(t, v);
        }
        // Warm mids seed the return windows; the book snapshot supplies t=0.
        let mut warm = config.start.warm_mid2.clone();
        warm.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (t, m) in warm {
            state.record_mid(t, m);
        }
        let agents = config
            .agents
            .iter()
            .enumerate()
            .map(|(i, cfg)| AgentSlot {
                strategy: build_strategy(cfg, 0.0, config.seed.wrapping_add(1000 + i as u64)),
                account: AgentAccount::new(i as u32),
            })
            .collect();
        let chi = ChiSampler::new(
            ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(1)),
            spec.frame_spacing,
        );
        World {
            clock: 0.0,
            horizon,
            book,
            state,
            spec,
            overrides: config.overrides.clone(),
            chi,
            gen_rng: ChaCha20Rng::seed_from_u64(config.seed),
            flow,
            next_gen_time: 0.0,
            replay_idx: 0,
            id_map: HashMap::new(),
            next_frame_time: 0.0,
            agents,
            last_resting_id: None,
            traj: Trajectory {
                events: Vec::new(),
                trades: Vec::new(),
                mids: Vec::new(),
                frames: Vec::new(),
                accounts: Vec::new(),
                final_accounts: Vec::new(),
                meta: RunMeta {
                    config_hash: config.hash(),
                    seed: config.seed,
                },
                warnings: Vec::new(),
                hidden_executions: 0,
            },
            done: false,
        }
    }

    fn next_flow_time(&self) -> Option<f64> {
        match &self.flow {
            FlowSource::Generative(_) => {
                (self.next_gen_time < self.horizon).then_some(self.next_gen_time)
            }
            FlowSource::Replay(messages) => messages
                .get(self.replay_idx)
                .map(|m| m.time)
                .filter(|&t| t < self.horizon),
        }
    }

    fn next_agent(&self) -> Option<(usize, f64)> {
        self.agents
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.strategy.next_wakeup().map(|t| (i, t)))
            .filter(|&(_, t)| t < self.horizon)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }

    fn push_frames_until(&mut self, upto: f64) {
        while self.next_frame_time <= upto + 1e-12 && self.next_frame_time < self.horizon {
            let t = self.next_frame_time;
            let chi_level = self.chi.level_at(t);
            let frame = compute_frame(&self.state, &self.book, &self.spec, t, chi_level);
            self.state.push_frame(t, frame.clone());
            self.traj.frames.push((t, frame));
            self.next_frame_time += self.spec.frame_spacing;
        }
    }

    /// Advances by one event. Returns false when the horizon is reached.
    pub fn step(&mut self) -> bool {
        if self.done {
            return false;
        }
        let flow_t = self.next_flow_time();
        let agent = self.next_agent();
        // Generator-first tie-break: the agent reacts to, never
        // front-runs, simultaneous flow.
        let take_flow = match (flow_t, agent) {
            (Some(f), Some((_, a))) => f <= a,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => {
                self.finish();
                return false;
            }
        };
        if take_flow {
            let t = flow_t.unwrap();
            self.push_frames_until(t);
            self.clock = t;
            match &self.flow {
                FlowSource::Generative(_) => self.step_generator(t),
                FlowSource::Replay(_) => self.step_replay(),
            }
        } else {
            let (idx, t) = agent.unwrap();
            self.push_frames_until(t);
            self.clock = t;
            self.step_agent(idx, t);
        }
        true
    }

    fn finish(&mut self) {
        self.push_frames_until(self.horizon);
        self.done = true;
        self.traj.final_accounts = self.agents.iter().map(|a| a.account.clone()).collect();
    }

    /// Runs to the horizon.
    pub fn run(&mut self) {
        while self.step() {}
        if !self.done {
            self.finish();
        }
    }

    fn step_generator(&mut self, t: f64) {
        let kind = match &self.flow {
            FlowSource::Generative(k) => k.clone(),
            _ => unreachable!(),
        };
        let y = match build_conditioning(&self.state, &self.spec, &self.overrides, t) {
            Ok(y) => y,
            Err(e) => {
                self.traj.warnings.push(format!("conditioning: {e}"));
                self.next_gen_time = t + 0.1;
                return;
            }
        };
        let token = match &kind {
            GeneratorKind::Reference(params) => {
                sample_token_reference(params, &y, &self.spec, &mut self.gen_rng)
            }
            GeneratorKind::Learned(model) => {
                let z = sample_noise(model.noise_dim, &mut self.gen_rng);
                match sample_token_learned(model, &y, &z, &mut self.gen_rng) {
                    Ok(tok) => tok,
                    Err(e) => {
                        self.traj.warnings.push(format!("generator: {e}"));
                        self.next_gen_time = t + 0.1;
                        return;
                    }
                }
            }
        };
        self.next_gen_time = t + token.inter_arrival.max(1e-6);
        match token_to_event(&token, &self.book) {
            Ok(event) => self.apply_event(event, t, Owner::Generator),
            Err(e) => self.traj.warnings.push(format!("placement at {t:.3}: {e}")),
        }
    }

    fn step_replay(&mut self) {
        let msg = match &self.flow {
            FlowSource::Replay(messages) => messages[self.replay_idx].clone(),
            _ => unreachable!(),
        };
        self.replay_idx += 1;
        let t = msg.time;
        match msg.kind {
            1 => {
                self.apply_event(
                    BookEvent::SubmitLimit {
                        side: msg.side,
                        price: msg.price,
                        volume: msg.size,
                        owner: Owner::Replay,
                    },
                    t,
                    Owner::Replay,
                );
                if let Some(id) = self.last_resting_id {
                    self.id_map.insert(msg.order_id, id);
                }
            }
            2 | 3 => {
                let volume = (msg.kind == 2).then_some(msg.size);
                match self.id_map.get(&msg.order_id).copied() {
                    Some(id) if self.book.order(id).is_some() => {
                        let remaining = self.book.order(id).unwrap().remaining;
                        if let Some(v) = volume {
                            if v > remaining {
                                self.traj.warnings.push(format!(
                                    "clamped cancel of {} to {} at {t:.3}",
                                    v, remaining
                                ));
                            }
                        }
                        let vol = volume.map(|v| v.min(remaining));
                        self.apply_event(BookEvent::Cancel { id, volume: vol }, t, Owner::Replay);
                    }
                    _ => self.traj.warnings.push(format!(
                        "cancel of consumed or unknown order {} at {t:.3}",
                        msg.order_id
                    )),
                }
            }
            4 => self.replay_execution(&msg),
            5 => self.traj.hidden_executions += 1,
            other => self
                .traj
                .warnings
                .push(format!("unknown event code {other} at {t:.3}")),
        }
    }

    fn replay_execution(&mut self, msg: &MessageRecord) {
        let t = msg.time;
        match self.id_map.get(&msg.order_id).copied() {
            Some(id) if self.book.order(id).is_some() => {
                let order = self.book.order(id).unwrap().clone();
                let volume = msg.size.min(order.remaining);
                if volume < msg.size {
                    self.traj
                        .warnings
                        .push(format!("clamped execution at {t:.3} (agent-consumed)"));
                }
                // Historical execution: remove the maker volume and log the
                // trade with the aggressor on the opposite side.
                self.apply_event(
                    BookEvent::Cancel {
                        id,
                        volume: Some(volume),
                    },
                    t,
                    Owner::Replay,
                );
                let aggressor = order.side.opposite();
                let signed = match aggressor {
                    Side::Sell => volume as i64,
                    Side::Buy => -(volume as i64),
                };
                let trade = Trade {
                    time: t,
                    price: msg.price,
                    volume,
                    aggressor,
                    maker_id: id,
                    maker_owner: Owner::Replay,
                    taker_owner: Owner::Replay,
                    signed_volume: signed,
                };
                self.state.record_trade(t, signed);
                self.traj.trades.push(trade);
            }
            _ => self.traj.warnings.push(format!(
                "execution of consumed or unknown order {} at {t:.3}",
                msg.order_id
            )),
        }
    }

    fn step_agent(&mut self, idx: usize, t: f64) {
        let actions = {
            let slot = &mut self.agents[idx];
            slot.strategy.decide(t, &self.book, &slot.account)
        };
        let agent_id = self.agents[idx].account.agent_id;
        for action in actions {
            match action {
                AgentAction::SubmitLimit {
                    side,
                    price,
                    volume,
                } => {
                    self.apply_event(
                        BookEvent::SubmitLimit {
                            side,
                            price,
                            volume,
                            owner: Owner::Agent(agent_id),
                        },
                        t,
                        Owner::Agent(agent_id),
                    );
                    if let Some(id) = self.last_resting_id {
                        let rested = self.book.order(id).map(|o| o.remaining).unwrap_or(0);
                        self.agents[idx]
                            .account
                            .note_open(id, side, price, rested);
                    }
                }
                AgentAction::SubmitMarket { side, volume } => {
                    self.apply_event(
                        BookEvent::SubmitMarket {
                            side,
                            volume,
                            owner: Owner::Agent(agent_id),
                        },
                        t,
                        Owner::Agent(agent_id),
                    );
                }
                AgentAction::Cancel { id } => {
                    self.agents[idx].account.note_cancel(id);
                    self.apply_event(BookEvent::Cancel { id, volume: None }, t, Owner::Agent(agent_id));
                }
            }
        }
        if let Some(mid2) = self.book.mid2() {
            let acc = &self.agents[idx].account;
            self.traj.accounts.push(AccountRecord {
                time: t,
                agent_id,
                cash: acc.cash,
                inventory: acc.inventory,
                mid2,
                pnl: acc.mark_to_market(mid2),
            });
        }
    }

    fn apply_event(&mut self, event: BookEvent, t: f64, owner: Owner) {
        match self.book.apply(event.clone(), t) {
            Ok(res) => {
                for trade in &res.trades {
                    self.state.record_trade(t, trade.signed_volume);
                }
                for slot in self.agents.iter_mut() {
                    route_fills(std::slice::from_mut(&mut slot.account), &res.trades);
                }
                self.traj.trades.extend(res.trades.iter().cloned());
                self.last_resting_id = res.resting_id;
                self.traj.events.push(EventRecord {
                    time: t,
                    owner,
                    event,
                    executed: res.executed,
                });
                self.state.record_event(t, &self.book);
                if let Some(m) = self.book.mid2() {
                    self.traj.mids.push((t, m));
                }
            }
            Err(e) => {
                self.last_resting_id = None;
                self.traj.warnings.push(format!("book at {t:.3}: {e}"));
            }
        }
    }
}

/// Deterministic rollout of one config.
pub fn run_trajectory(config: &SimConfig) -> Trajectory {
    let mut world = World::new(config);
    world.run();
    world.traj
}

/// Paired arms sharing seed and start snapshot; only the roster differs
/// by the one extra agent.
pub fn run_ab_impact(config: &SimConfig, agent: &StrategyConfig) -> (Trajectory, Trajectory) {
    let without = run_trajectory(config);
    let mut with_cfg = config.clone();
    with_cfg.agents.push(agent.clone());
    let with = run_trajectory(&with_cfg);
    (with, without)
}

/// Rollout with one conditioning feature pinned in every frame.
pub fn run_feature_fix(config: &SimConfig, feature: FeatureId, value: f64) -> Trajectory {
    let mut cfg = config.clone();
    cfg.overrides = OverrideSet::single(feature, value);
    run_trajectory(&cfg)
}

/// Market replay: historical events applied unconditionally at their
/// timestamps; agent orders coexist and may consume liquidity.
pub fn run_replay(
    messages: &[MessageRecord],
    agents: &[StrategyConfig],
    start: StartSnapshot,
    duration: f64,
    seed: u64,
) -> Trajectory {
    let config = SimConfig {
        mode: Mode::Replay,
        generator: GeneratorKind::Reference(ReferenceParams::default()),
        spec_version: SpecVersion::V0,
        seed,
        duration,
        start,
        agents: agents.to_vec(),
        overrides: OverrideSet::default(),
    };
    let mut world = World::with_flow(&config, FlowSource::Replay(messages.to_vec()), duration);
    world.run();
    world.traj
}

/// Lattice of trajectory start points; per-point seeds derive from the
/// template seed plus the lattice index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub starts: Vec<f64>,
    pub template: SimConfig,
}

impl ExperimentPlan {
    /// `per_day` equally spaced starts over `days` days of `day_length`
    /// seconds each.
    pub fn lattice(template: SimConfig, days: usize, per_day: usize, day_length: f64) -> Self {
        let mut starts = Vec::with_capacity(days * per_day);
        for d in 0..days {
            for k in 0..per_day {
                starts.push(d as f64 * day_length + k as f64 * day_length / per_day as f64);
            }
        }
        ExperimentPlan { starts, template }
    }

    pub fn point_config(&self, idx: usize) -> SimConfig {
        let mut cfg = self.template.clone();
        cfg.seed = self.template.seed.wrapping_add(idx as u64);
        cfg
    }

    /// Runs every lattice point in deterministic order.
    pub fn run(&self) -> Vec<Trajectory> {
        (0..self.starts.len())
            .map(|i| run_trajectory(&self.point_config(i)))
            .collect()
    }
}
