//! The two self-supervised auxiliary objectives: balanced soft clustering
//! over regions ([`spatial`]) and cross-time contrastive discrimination
//! ([`temporal`]).

pub mod spatial;
pub mod temporal;
