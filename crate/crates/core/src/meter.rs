//! Logical allocation metering for tensor buffers.
//!
//! Every numeric buffer in this crate (tensor storage, gradient storage,
//! activation-statistic accumulators, importance scores) is a [`Buffer`].
//! Creating one adds `len * 8` bytes to a thread-local live counter and
//! dropping it subtracts the same amount, so the meter tracks *logical* f64
//! bytes rather than allocator behaviour. A separate pair of counters tracks
//! bytes retained by the gradient tape, which lets callers assert that a code
//! path ran tape-free.
//!
//! All state is thread-local. A run (selection, training, comparison leg) is
//! single-threaded by construction; independent runs on different threads
//! meter independently.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<u64> = const { Cell::new(0) };
    static PEAK: Cell<u64> = const { Cell::new(0) };
    static TAPE_LIVE: Cell<u64> = const { Cell::new(0) };
    static TAPE_PEAK: Cell<u64> = const { Cell::new(0) };
}

/// Point-in-time meter state. `peak_bytes >= live_bytes` always holds, and
/// likewise for the tape pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeterReading {
    /// Bytes of currently live f64 buffers.
    pub live_bytes: u64,
    /// High-water mark of `live_bytes` since the last reset.
    pub peak_bytes: u64,
    /// Bytes currently retained by the gradient tape (saved operands).
    pub tape_live_bytes: u64,
    /// High-water mark of `tape_live_bytes` since the last reset.
    pub tape_peak_bytes: u64,
}

pub fn reading() -> MeterReading {
    MeterReading {
        live_bytes: LIVE.with(Cell::get),
        peak_bytes: PEAK.with(Cell::get),
        tape_live_bytes: TAPE_LIVE.with(Cell::get),
        tape_peak_bytes: TAPE_PEAK.with(Cell::get),
    }
}

/// Collapse both peaks to the current live values.
pub fn reset_peak() {
    PEAK.with(|p| p.set(LIVE.with(Cell::get)));
    TAPE_PEAK.with(|p| p.set(TAPE_LIVE.with(Cell::get)));
}

/// Measures the allocation cost of a span of work relative to the live bytes
/// at its start. `begin` resets the peaks, so the deltas reported by
/// [`MeterSpan::end`] belong to the span alone.
#[derive(Debug)]
pub struct MeterSpan {
    baseline_live: u64,
    baseline_tape: u64,
}

/// Allocation attributed to one [`MeterSpan`].
#[derive(Debug, Clone, Copy)]
pub struct SpanReading {
    /// Peak live bytes above the span's starting level.
    pub peak_delta_bytes: u64,
    /// Peak tape-retained bytes above the span's starting level.
    pub tape_peak_delta_bytes: u64,
}

impl MeterSpan {
    pub fn begin() -> Self {
        reset_peak();
        MeterSpan {
            baseline_live: LIVE.with(Cell::get),
            baseline_tape: TAPE_LIVE.with(Cell::get),
        }
    }

    pub fn end(self) -> SpanReading {
        let r = reading();
        SpanReading {
            peak_delta_bytes: r.peak_bytes.saturating_sub(self.baseline_live),
            tape_peak_delta_bytes: r.tape_peak_bytes.saturating_sub(self.baseline_tape),
        }
    }
}

fn add_live(bytes: u64) {
    LIVE.with(|l| l.set(l.get() + bytes));
    let live = LIVE.with(Cell::get);
    PEAK.with(|p| {
        if live > p.get() {
            p.set(live);
        }
    });
}

fn sub_live(bytes: u64) {
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

pub(crate) fn tape_retain(bytes: u64) {
    TAPE_LIVE.with(|l| l.set(l.get() + bytes));
    let live = TAPE_LIVE.with(Cell::get);
    TAPE_PEAK.with(|p| {
        if live > p.get() {
            p.set(live);
        }
    });
}

pub(crate) fn tape_release(bytes: u64) {
    TAPE_LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// Metered f64 storage. All tensor-shaped data in the crate lives in one of
/// these so the meter sees every allocation exactly once.
#[derive(Debug)]
pub(crate) struct Buffer {
    vals: Vec<f64>,
}

impl Buffer {
    pub fn zeros(len: usize) -> Buffer {
        add_live(len as u64 * 8);
        Buffer {
            vals: vec![0.0; len],
        }
    }

    pub fn from_vec(vals: Vec<f64>) -> Buffer {
        add_live(vals.len() as u64 * 8);
        Buffer { vals }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn byte_len(&self) -> u64 {
        self.vals.len() as u64 * 8
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vals
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.vals
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Buffer {
        Buffer::from_vec(self.vals.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        sub_live(self.vals.len() as u64 * 8);
    }
}
