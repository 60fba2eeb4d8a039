//! C ABI for the loop metrics, the online monitor and the keep-set builder.
//!
//! Every fallible call returns an [`LgStatus`]. On failure a message is
//! available from [`lg_last_error_message`] on the same thread.

#![deny(unsafe_op_in_unsafe_fn)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::ptr;

use loopguard::metrics::{classify_triple, loop_metrics, DecodeStep, LoopRuleConfig};
use loopguard::monitor::{Monitor, MonitorConfig, MonitorPreset};
use loopguard::pruner::{build_keep_set, Aggressiveness, BadSpan, PrunerConfig};
use loopguard::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    EmptySequence = 3,
    OutOfOrder = 4,
    DoubleNotify = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgPreset {
    NoGuard = 0,
    AlwaysOn = 1,
    SingleSignal = 2,
    Full = 3,
}

impl From<LgPreset> for MonitorPreset {
    fn from(p: LgPreset) -> Self {
        match p {
            LgPreset::NoGuard => MonitorPreset::NoGuard,
            LgPreset::AlwaysOn => MonitorPreset::AlwaysOn,
            LgPreset::SingleSignal => MonitorPreset::SingleSignal,
            LgPreset::Full => MonitorPreset::Full,
        }
    }
}

/// Sequence metrics under the default loop rule.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LgMetrics {
    pub ttr: f64,
    pub cr: f64,
    pub len: usize,
    /// Too short for a compression ratio; `cr` is 1.0.
    pub short_sequence: bool,
    pub is_loop: bool,
}

/// Monitor output for one step. Fields guarded by a `has_*` flag are
/// meaningless when the flag is false.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LgDecision {
    pub step: usize,
    pub m_ttr: f64,
    pub has_cr: bool,
    pub m_cr: f64,
    pub streak: usize,
    pub novelty: f64,
    pub warn: bool,
    pub stall: bool,
    pub has_tail: bool,
    pub tail_period: usize,
    pub bad_start: usize,
    pub bad_end: usize,
    pub trigger: bool,
}

/// Opaque monitor handle.
pub struct LgMonitor {
    inner: Monitor,
}

/// Opaque pruner handle: config plus aggressiveness state.
pub struct LgPruner {
    cfg: PrunerConfig,
    agg: Aggressiveness,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: LgStatus, msg: impl Into<String>) -> LgStatus {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
    status
}

fn status_of(e: &Error) -> LgStatus {
    match e {
        Error::EmptySequence => LgStatus::EmptySequence,
        Error::OutOfOrderStep { .. } => LgStatus::OutOfOrder,
        Error::DoubleNotify => LgStatus::DoubleNotify,
        e if e.is_validation() => LgStatus::InvalidArgument,
        _ => LgStatus::Internal,
    }
}

fn from_error(e: Error) -> LgStatus {
    fail(status_of(&e), e.to_string())
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn lg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// NUL-terminated library version.
#[no_mangle]
pub extern "C" fn lg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Distinct-token ratio, compression ratio and loop flag of `tokens[0..len]`.
///
/// # Safety
/// `tokens` must point to `len` readable `uint32_t`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lg_sequence_metrics(tokens: *const u32, len: usize, out: *mut LgMetrics) -> LgStatus {
    if tokens.is_null() || out.is_null() {
        return fail(LgStatus::NullPointer, "null argument");
    }
    // SAFETY: caller guarantees `len` readable elements.
    let slice = unsafe { std::slice::from_raw_parts(tokens, len) };
    match loop_metrics(slice) {
        Ok(m) => {
            let rule = LoopRuleConfig::default();
            // SAFETY: checked non-null; caller guarantees writability.
            unsafe {
                *out = LgMetrics {
                    ttr: m.ttr,
                    cr: m.cr,
                    len: m.len,
                    short_sequence: m.short,
                    is_loop: classify_triple(m.ttr, m.cr, m.len, &rule),
                };
            }
            LgStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Creates a monitor with default thresholds and the given preset.
///
/// # Safety
/// `out` must be writable. The handle must be released with [`lg_monitor_free`].
#[no_mangle]
pub unsafe extern "C" fn lg_monitor_new(preset: LgPreset, out: *mut *mut LgMonitor) -> LgStatus {
    if out.is_null() {
        return fail(LgStatus::NullPointer, "null output pointer");
    }
    match Monitor::new(MonitorConfig::with_preset(preset.into())) {
        Ok(inner) => {
            // SAFETY: checked non-null.
            unsafe { *out = Box::into_raw(Box::new(LgMonitor { inner })) };
            LgStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// # Safety
/// `m` must be NULL or a handle from [`lg_monitor_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lg_monitor_free(m: *mut LgMonitor) {
    if !m.is_null() {
        // SAFETY: handle came from Box::into_raw.
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Feeds one decode step. Steps must start at 0 and increase by one.
///
/// # Safety
/// `m` must be a live handle; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn lg_monitor_update(m: *mut LgMonitor, step: usize, token: u32, p_max: f64, out: *mut LgDecision) -> LgStatus {
    // SAFETY: caller guarantees a live handle or NULL.
    let Some(m) = (unsafe { m.as_mut() }) else {
        return fail(LgStatus::NullPointer, "null monitor");
    };
    if !(0.0..=1.0).contains(&p_max) {
        return fail(LgStatus::InvalidArgument, format!("p_max {p_max} not in [0, 1]"));
    }
    match m.inner.update(&DecodeStep { step, token, p_max }) {
        Ok(d) => {
            if !out.is_null() {
                let tail = d.tail;
                // SAFETY: checked non-null; caller guarantees writability.
                unsafe {
                    *out = LgDecision {
                        step: d.step,
                        m_ttr: d.m_ttr,
                        has_cr: d.m_cr.is_some(),
                        m_cr: d.m_cr.unwrap_or(f64::NAN),
                        streak: d.streak,
                        novelty: d.novelty,
                        warn: d.warn,
                        stall: d.stall,
                        has_tail: tail.is_some(),
                        tail_period: tail.map_or(0, |t| t.period),
                        bad_start: tail.map_or(0, |t| t.bad_start),
                        bad_end: tail.map_or(0, |t| t.end),
                        trigger: d.trigger,
                    };
                }
            }
            LgStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Acknowledges the trigger of the last update.
///
/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lg_monitor_notify(m: *mut LgMonitor) -> LgStatus {
    // SAFETY: caller guarantees a live handle or NULL.
    let Some(m) = (unsafe { m.as_mut() }) else {
        return fail(LgStatus::NullPointer, "null monitor");
    };
    match m.inner.notify_intervention() {
        Ok(()) => LgStatus::Ok,
        Err(e) => from_error(e),
    }
}

/// Interventions acknowledged so far, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lg_monitor_interventions(m: *const LgMonitor) -> usize {
    // SAFETY: caller guarantees a live handle or NULL.
    unsafe { m.as_ref() }.map_or(0, |m| m.inner.interventions())
}

/// Creates a pruner with the default budget layout.
///
/// # Safety
/// `out` must be writable. Release with [`lg_pruner_free`].
#[no_mangle]
pub unsafe extern "C" fn lg_pruner_new(out: *mut *mut LgPruner) -> LgStatus {
    if out.is_null() {
        return fail(LgStatus::NullPointer, "null output pointer");
    }
    let p = LgPruner {
        cfg: PrunerConfig::default(),
        agg: Aggressiveness::default(),
    };
    // SAFETY: checked non-null.
    unsafe { *out = Box::into_raw(Box::new(p)) };
    LgStatus::Ok
}

/// # Safety
/// `p` must be NULL or a handle from [`lg_pruner_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lg_pruner_free(p: *mut LgPruner) {
    if !p.is_null() {
        // SAFETY: handle came from Box::into_raw.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Advances the aggressiveness state; call once per step.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lg_pruner_observe(p: *mut LgPruner, step: usize, triggered: bool) -> LgStatus {
    // SAFETY: caller guarantees a live handle or NULL.
    let Some(p) = (unsafe { p.as_mut() }) else {
        return fail(LgStatus::NullPointer, "null pruner");
    };
    p.agg.escalate_or_decay(step, triggered, &p.cfg);
    LgStatus::Ok
}

/// Current aggressiveness level, or 0 for NULL.
///
/// # Safety
/// `p` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lg_pruner_level(p: *const LgPruner) -> usize {
    // SAFETY: caller guarantees a live handle or NULL.
    unsafe { p.as_ref() }.map_or(0, |p| p.agg.level)
}

/// Writes the sorted keep set for newest position `t` into `out[0..cap]`.
///
/// `*out_len` always receives the required length; if it exceeds `cap`
/// nothing is written and `BufferTooSmall` is returned.
///
/// # Safety
/// `p` must be a live handle; `out` must have room for `cap` elements;
/// `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lg_pruner_keep_set(
    p: *const LgPruner,
    t: usize,
    has_bad_span: bool,
    bad_start: usize,
    bad_end: usize,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> LgStatus {
    // SAFETY: caller guarantees a live handle or NULL.
    let Some(p) = (unsafe { p.as_ref() }) else {
        return fail(LgStatus::NullPointer, "null pruner");
    };
    if out_len.is_null() || (out.is_null() && cap > 0) {
        return fail(LgStatus::NullPointer, "null output buffer");
    }
    let bad = has_bad_span.then_some(BadSpan { start: bad_start, end: bad_end });
    let keep = match build_keep_set(t, bad, p.agg.level, &p.cfg) {
        Ok(k) => k,
        Err(e) => return from_error(e),
    };
    // SAFETY: checked non-null.
    unsafe { *out_len = keep.union.len() };
    if keep.union.len() > cap {
        return fail(LgStatus::BufferTooSmall, format!("keep set needs {} slots, got {cap}", keep.union.len()));
    }
    // SAFETY: caller guarantees `cap` writable slots and we write at most that many.
    unsafe { ptr::copy_nonoverlapping(keep.union.as_ptr(), out, keep.union.len()) };
    LgStatus::Ok
}
