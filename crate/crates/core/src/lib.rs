//! Reinforcement-learning framework in which an agent learns multi-digit
//! base-5 addition and subtraction by operating a virtual abacus.
//!
//! * [`abacus`]: the board, the finger, the signpost and the sliding window.
//! * [`env`]: symbol stream, modular reward and step budget.
//! * [`oracle`]: scripted reference solver and error classifier.
//! * [`net`]: 3D-convolutional actor and critic with hand-written gradients.
//! * [`ppo`]: rollouts, GAE and clipped-surrogate updates.
//! * [`eval`]: accuracy, length-generalization sweep and error reports.

pub mod abacus;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod net;
pub mod oracle;
pub mod ppo;

pub use error::{Error, Result};
