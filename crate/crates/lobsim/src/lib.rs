//! Deterministic limit-order-book simulator with pluggable conditional
//! order-flow generators, plus the experiment harness built on top of it:
//! paired-seed price-impact A/B runs, feature-fixing conditioning studies,
//! stylized-fact realism reports, and adversarial trading strategies.

pub mod agents;
pub mod analysis;
pub mod book;
pub mod features;
pub mod generator;
pub mod harness;
pub mod io;
pub mod nn;
pub mod train;

pub use book::{BookEvent, BookError, OrderBook, Owner, Side, TickPrice, Trade, Volume};
