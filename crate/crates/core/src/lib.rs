//! Self-rewarded Monte Carlo tree search over partial SQL programs.
//!
//! The crate is organised bottom-up: [`fragmenter`] cuts SQL at clause
//! boundaries, [`db`] grounds prompts and scores execution, [`policy`]
//! proposes fragments, [`pruning`] and [`search`] run the tree search, and
//! [`evaluate`] and [`data_prep`] drive batches over task files.

pub mod data_prep;
pub mod db;
pub mod evaluate;
pub mod fragmenter;
pub mod policy;
pub mod pruning;
pub mod search;
