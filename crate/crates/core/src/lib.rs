//! Grammar-aligned sampling: Metropolis-Hastings over grammar-constrained
//! decoding from a language model.

pub mod cli;
pub mod eval;
pub mod fixtures;
pub mod gcd;
pub mod grammar;
pub mod lm;
pub mod mcmc;
pub mod numeric;
