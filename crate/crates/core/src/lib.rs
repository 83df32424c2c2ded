//! Correlation-aware affine maximizer auctions (CA-AMA).
//!
//! The crate is organised bottom-up:
//!
//! * [`mech`] evaluates VCG, AMA and CA-AMA exactly and applies the
//!   ex-post IR opt-out transform.
//! * [`distributions`] samples the correlated valuation families and knows
//!   their conditional supports.
//! * [`cor_net`] holds the per-bidder ReLU payment networks.
//! * [`relaxation`] is the softmax-relaxed AMA with hand-written gradients.
//! * [`trainer`] runs the two-stage (mutual, then post) optimisation.
//! * [`verify`] measures DSIC/IR regret and hosts the analytic oracles.
//! * [`persist`] reads and writes datasets, checkpoints and metric logs.

pub mod cor_net;
pub mod distributions;
pub mod error;
pub mod mech;
pub mod optim;
pub mod persist;
pub mod relaxation;
pub mod trainer;
pub mod verify;

pub use cor_net::CorPaymentNet;
pub use distributions::{Dataset, DistributionKind, DistributionSpec, EqualRevenueMode};
pub use error::{Error, Result};
pub use mech::{Allocation, AmaParams, AuctionOutcome, CorPayment, ValuationProfile};
pub use relaxation::RawAmaParams;
pub use trainer::{Mode, Stage, TrainConfig, TrainState};
