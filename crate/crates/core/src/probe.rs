//! Per-thread instrumentation of encoder passes and projection-head use.
//!
//! Counters are always maintained. Tracing additionally records which
//! parameter set (by fingerprint) each encoder pass read.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::numerics::{Leaves, ParamSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    /// Sentences pushed through any encoder forward pass.
    pub encoder_sentences: usize,
    /// Forward calls (one per batch).
    pub encoder_calls: usize,
    /// Batches whose views were computed by the fixed encoder.
    pub fixed_view_calls: usize,
    /// Projection-head applications.
    pub projection_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Encode { fingerprint: u64, sentences: usize },
    FixedViews { fingerprint: u64, sentences: usize },
    Project { rows: usize },
}

#[derive(Default)]
struct State {
    counters: Counters,
    trace: Option<Vec<Event>>,
}

thread_local! {
    static STATE: RefCell<State> = RefCell::new(State::default());
}

pub fn counters() -> Counters {
    STATE.with(|s| s.borrow().counters)
}

/// Clears counters and starts recording events on this thread.
pub fn start_trace() {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        s.counters = Counters::default();
        s.trace = Some(Vec::new());
    });
}

/// Stops recording and returns the events seen since [`start_trace`].
pub fn take_trace() -> Vec<Event> {
    STATE.with(|s| s.borrow_mut().trace.take().unwrap_or_default())
}

fn tracing() -> bool {
    STATE.with(|s| s.borrow().trace.is_some())
}

fn push(event: Event) {
    STATE.with(|s| {
        if let Some(t) = s.borrow_mut().trace.as_mut() {
            t.push(event);
        }
    });
}

/// Hash over every name and value bit of a parameter set.
pub fn fingerprint(params: &ParamSet) -> u64 {
    hash_entries(params.iter().map(|(n, a)| (n.as_str(), a.data())))
}

/// Same hash as [`fingerprint`], over graph leaves.
pub fn fingerprint_leaves(leaves: &Leaves) -> u64 {
    hash_entries(leaves.iter().map(|(n, t)| (n.as_str(), t.values())))
}

fn hash_entries<'a>(entries: impl Iterator<Item = (&'a str, &'a [f64])>) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, values) in entries {
        h.write(name.as_bytes());
        for v in values {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

pub(crate) fn record_encode(params: impl FnOnce() -> u64, sentences: usize) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        s.counters.encoder_calls += 1;
        s.counters.encoder_sentences += sentences;
    });
    if tracing() {
        push(Event::Encode {
            fingerprint: params(),
            sentences,
        });
    }
}

pub(crate) fn record_fixed_views(params: impl FnOnce() -> u64, sentences: usize) {
    STATE.with(|s| s.borrow_mut().counters.fixed_view_calls += 1);
    if tracing() {
        push(Event::FixedViews {
            fingerprint: params(),
            sentences,
        });
    }
}

pub(crate) fn record_projection(rows: usize) {
    STATE.with(|s| s.borrow_mut().counters.projection_calls += 1);
    if tracing() {
        push(Event::Project { rows });
    }
}
