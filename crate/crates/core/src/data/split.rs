use super::Episode;
use crate::seed::{hash_str, mix64};

/// Share of episodes routed to the held-out split.
pub const HELD_OUT_PERCENT: u64 = 3;

/// Held-out membership is a pure function of (seed, id).
pub fn is_held_out(id: &str, seed: u64) -> bool {
    mix64(hash_str(id) ^ seed) % 100 < HELD_OUT_PERCENT
}

/// Returns `(train, held_out)`, each preserving input order.
pub fn split_episodes(episodes: Vec<Episode>, seed: u64) -> (Vec<Episode>, Vec<Episode>) {
    episodes.into_iter().partition(|e| !is_held_out(&e.id, seed))
}
