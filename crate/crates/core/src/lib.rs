pub mod baselines;
pub mod causal_mdp;
pub mod causal_rate;
pub mod channel;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod noncausal_power;
pub mod noncausal_rate;
pub mod numerics;
pub mod outcome;
pub mod qlearn;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/channel.md")]
    pub struct Channel;
    #[doc = include_str!("../../../book/src/noncausal-power.md")]
    pub struct NoncausalPower;
    #[doc = include_str!("../../../book/src/noncausal-rate.md")]
    pub struct NoncausalRate;
    #[doc = include_str!("../../../book/src/causal.md")]
    pub struct Causal;
    #[doc = include_str!("../../../book/src/baselines.md")]
    pub struct Baselines;
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub struct Experiments;
}
