//! Deterministic virtual-time executor, seeded randomness and interceptable
//! message channels.
//!
//! Events are delivered in `(fire_at, seq)` order where `seq` is the
//! insertion counter, so two runs that schedule the same events in the same
//! order process them identically. Wall-clock time is never consulted.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{Canonical, Encoder, Hash32};
use crate::types::Ms;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("event scheduled at {fire_at} ms but clock is already at {now} ms")]
    PastEvent { fire_at: Ms, now: Ms },
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
}

/// Monotone virtual clock. Only the event loop moves it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VirtualClock {
    now: Ms,
}

impl VirtualClock {
    pub fn now(&self) -> Ms {
        self.now
    }

    fn advance_to(&mut self, t: Ms) {
        debug_assert!(t >= self.now, "clock moved backward");
        self.now = self.now.max(t);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledEvent<P> {
    pub fire_at: Ms,
    pub target: String,
    pub payload: P,
    pub seq: u64,
}

struct Pending<P>(ScheduledEvent<P>);

impl<P> PartialEq for Pending<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl<P> Eq for Pending<P> {}
impl<P> PartialOrd for Pending<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Pending<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}
impl<P> Pending<P> {
    fn key(&self) -> (Ms, u64) {
        (self.0.fire_at, self.0.seq)
    }
}

/// One line of the processing trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub fire_at: Ms,
    pub target: String,
    pub payload_hash: Hash32,
}

/// Single-threaded discrete-event loop.
pub struct EventLoop<P> {
    clock: VirtualClock,
    queue: BinaryHeap<Reverse<Pending<P>>>,
    next_seq: u64,
    processed: u64,
    trace_hasher: Sha256,
    trace: Option<Vec<TraceEntry>>,
}

impl<P: Canonical> Default for EventLoop<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: Canonical> EventLoop<P> {
    pub fn new() -> Self {
        Self {
            clock: VirtualClock::default(),
            queue: BinaryHeap::new(),
            next_seq: 0,
            processed: 0,
            trace_hasher: Sha256::new(),
            trace: None,
        }
    }

    /// Keeps every processed event in memory in addition to the digest.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> Ms {
        self.clock.now()
    }

    pub fn clock(&self) -> VirtualClock {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    /// Queues `payload` for delivery to `target` at `fire_at`, returning the
    /// assigned tie-break sequence number.
    pub fn schedule(
        &mut self,
        fire_at: Ms,
        target: impl Into<String>,
        payload: P,
    ) -> Result<u64, RuntimeError> {
        let now = self.clock.now();
        if fire_at < now {
            return Err(RuntimeError::PastEvent { fire_at, now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Pending(ScheduledEvent {
            fire_at,
            target: target.into(),
            payload,
            seq,
        })));
        Ok(seq)
    }

    /// Removes the next event due at or before `t`, advancing the clock to
    /// its firing time.
    pub fn pop_due(&mut self, t: Ms) -> Option<ScheduledEvent<P>> {
        let due = matches!(self.queue.peek(), Some(Reverse(p)) if p.0.fire_at <= t);
        if !due {
            return None;
        }
        let Reverse(Pending(ev)) = self.queue.pop()?;
        self.clock.advance_to(ev.fire_at);
        self.record(&ev);
        self.processed += 1;
        Some(ev)
    }

    /// Processes every event with `fire_at <= t` (including ones the handler
    /// schedules along the way) and leaves the clock at `t`.
    pub fn advance_until<F>(&mut self, t: Ms, mut handler: F) -> usize
    where
        F: FnMut(&mut Self, ScheduledEvent<P>),
    {
        let mut n = 0;
        while let Some(ev) = self.pop_due(t) {
            handler(self, ev);
            n += 1;
        }
        self.clock.advance_to(t);
        n
    }

    fn record(&mut self, ev: &ScheduledEvent<P>) {
        let payload_hash = ev.payload.digest();
        let mut enc = Encoder::new();
        enc.u64(ev.fire_at).str(&ev.target).hash(&payload_hash);
        self.trace_hasher.update(enc.finish());
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry {
                fire_at: ev.fire_at,
                target: ev.target.clone(),
                payload_hash,
            });
        }
    }

    /// Digest over the ordered `(fire_at, target, payload hash)` trace so far.
    pub fn trace_digest(&self) -> Hash32 {
        Hash32(self.trace_hasher.clone().finalize().into())
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }
}

/// Splits one scenario seed into independent per-module random streams.
///
/// A stream depends only on the master seed and its stable name, so adding
/// a module never shifts another module's noise.
#[derive(Debug, Clone, Copy)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut enc = Encoder::new();
        enc.str("twinsec-stream").u64(self.seed).str(name);
        ChaCha8Rng::from_seed(Hash32::of(&enc.finish()).0)
    }
}

/// Time window during which a tap is active: `start <= now < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapWindow {
    pub start: Ms,
    pub end: Option<Ms>,
}

impl TapWindow {
    pub fn new(start: Ms, end: Ms) -> Self {
        Self {
            start,
            end: Some(end),
        }
    }

    pub fn from(start: Ms) -> Self {
        Self { start, end: None }
    }

    pub fn always() -> Self {
        Self::from(0)
    }

    pub fn contains(&self, t: Ms) -> bool {
        t >= self.start && self.end.is_none_or(|e| t < e)
    }
}

/// Message transformation installed on a channel.
pub trait TapTransform<M> {
    /// Sees every message on the channel, active or not.
    fn observe(&mut self, _now: Ms, _msg: &M) {}

    /// Maps one message to zero (drop), one (pass or modify) or several
    /// (inject) messages. Only called inside the tap's active window.
    fn transform(&mut self, now: Ms, msg: M) -> Vec<M>;
}

pub struct ChannelTap<M> {
    pub channel_id: String,
    pub window: TapWindow,
    pub transform: Box<dyn TapTransform<M>>,
}

impl<M> ChannelTap<M> {
    pub fn new(
        channel_id: impl Into<String>,
        window: TapWindow,
        transform: impl TapTransform<M> + 'static,
    ) -> Self {
        Self {
            channel_id: channel_id.into(),
            window,
            transform: Box::new(transform),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TapHandle(u64);

/// Named point-to-point channels with composable taps.
pub struct Network<M> {
    channels: BTreeMap<String, Vec<(TapHandle, ChannelTap<M>)>>,
    next_handle: u64,
}

impl<M> Default for Network<M> {
    fn default() -> Self {
        Self {
            channels: BTreeMap::new(),
            next_handle: 0,
        }
    }
}

impl<M> Network<M> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_channel(&mut self, name: impl Into<String>) {
        self.channels.entry(name.into()).or_default();
    }

    pub fn has_channel(&self, name: &str) -> bool {
        self.channels.contains_key(name)
    }

    pub fn channels(&self) -> impl Iterator<Item = &str> {
        self.channels.keys().map(String::as_str)
    }

    pub fn tap_install(&mut self, tap: ChannelTap<M>) -> Result<TapHandle, RuntimeError> {
        let taps = self
            .channels
            .get_mut(&tap.channel_id)
            .ok_or_else(|| RuntimeError::UnknownChannel(tap.channel_id.clone()))?;
        let handle = TapHandle(self.next_handle);
        self.next_handle += 1;
        taps.push((handle, tap));
        Ok(handle)
    }

    pub fn tap_remove(&mut self, handle: TapHandle) -> bool {
        for taps in self.channels.values_mut() {
            if let Some(i) = taps.iter().position(|(h, _)| *h == handle) {
                taps.remove(i);
                return true;
            }
        }
        false
    }

    /// Sends `msg` through every tap on `channel` in installation order and
    /// returns what the receiver sees.
    pub fn transmit(&mut self, channel: &str, now: Ms, msg: M) -> Result<Vec<M>, RuntimeError> {
        let taps = self
            .channels
            .get_mut(channel)
            .ok_or_else(|| RuntimeError::UnknownChannel(channel.to_string()))?;
        let mut msgs = vec![msg];
        for (_, tap) in taps.iter_mut() {
            for m in &msgs {
                tap.transform.observe(now, m);
            }
            if tap.window.contains(now) {
                msgs = msgs
                    .into_iter()
                    .flat_map(|m| tap.transform.transform(now, m))
                    .collect();
            }
        }
        Ok(msgs)
    }
}

/// Drops everything.
pub struct DropTap;

impl<M> TapTransform<M> for DropTap {
    fn transform(&mut self, _now: Ms, _msg: M) -> Vec<M> {
        Vec::new()
    }
}

/// Applies a closure to every message.
pub struct MapTap<F>(pub F);

impl<M, F: FnMut(M) -> M> TapTransform<M> for MapTap<F> {
    fn transform(&mut self, _now: Ms, msg: M) -> Vec<M> {
        vec![(self.0)(msg)]
    }
}

/// Records messages seen during `capture` and, while active, replaces each
/// live message with the next recorded one (cycling through the buffer).
pub struct ReplayTap<M> {
    capture: TapWindow,
    buffer: Vec<M>,
    cursor: usize,
}

impl<M> ReplayTap<M> {
    pub fn new(capture: TapWindow) -> Self {
        Self {
            capture,
            buffer: Vec::new(),
            cursor: 0,
        }
    }

    pub fn captured(&self) -> &[M] {
        &self.buffer
    }
}

impl<M: Clone> TapTransform<M> for ReplayTap<M> {
    fn observe(&mut self, now: Ms, msg: &M) {
        if self.capture.contains(now) {
            self.buffer.push(msg.clone());
        }
    }

    fn transform(&mut self, _now: Ms, msg: M) -> Vec<M> {
        if self.buffer.is_empty() {
            return vec![msg];
        }
        let out = self.buffer[self.cursor % self.buffer.len()].clone();
        self.cursor += 1;
        vec![out]
    }
}
