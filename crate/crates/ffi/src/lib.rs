//! C ABI for embedding masked federated training, the verification battery,
//! and the adversarial probes in non-Rust hosts.
//!
//! Conventions, uniform across the surface:
//!
//! - Every function returns an [`FmStatus`]; `FM_STATUS_OK` is zero and the
//!   non-zero codes mirror the `fedmask` binary's exit codes.
//! - Out-parameters are nulled/zeroed on entry and written only on success.
//! - Returned strings are owned by the caller and must be released with
//!   [`fm_string_free`]; handles with [`fm_trainer_free`].
//! - On failure, [`fm_last_error`] returns a thread-local message that stays
//!   valid until the next failing call on the same thread.
//! - Every entry point catches panics and turns them into
//!   `FM_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedmask::attack::{
    ambiguity_batch, argmax_guess_experiment, gradient_ambiguity_demo, GuessConfig,
    GuessStrategy,
};
use fedmask::cli::run_battery;
use fedmask::config::{RunConfig, TransportConfig};
use fedmask::net::{run_server_rounds, InProcTransport};
use fedmask::perturb::NoiseConfig;
use fedmask::report::{manifest_json, metrics_csv_string, param_hash_exact, RunManifest};
use fedmask::server::RunOutcome;
use fedmask::Error;

/// Result of every C-ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmStatus {
    /// Success.
    Ok = 0,
    /// A protocol claim failed verification.
    Verification = 1,
    /// Input data could not be read or parsed.
    Ingestion = 2,
    /// Shapes, domains, or the wire protocol were violated.
    Protocol = 3,
    /// A peer did not respond in time.
    Timeout = 4,
    /// The call itself was malformed (bad config, null pointer, wrong order).
    Usage = 5,
    /// A panic was caught at the boundary; state may be stale but memory is
    /// safe.
    Internal = 6,
}

/// Guessing strategy selector for [`fm_attack_argmax`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmGuessStrategy {
    /// Point at the largest masked output.
    MaskedArgmax = 0,
    /// Hypothesize a group coefficient and invert it within one group.
    GroupHypothesis = 1,
}

impl From<FmGuessStrategy> for GuessStrategy {
    fn from(s: FmGuessStrategy) -> GuessStrategy {
        match s {
            FmGuessStrategy::MaskedArgmax => GuessStrategy::MaskedArgmax,
            FmGuessStrategy::GroupHypothesis => GuessStrategy::GroupHypothesis,
        }
    }
}

/// An owned training run: a validated configuration plus, after
/// [`fm_trainer_run`], its outcome.
pub struct FmTrainer {
    config: RunConfig,
    outcome: Option<RunOutcome>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(e: &Error) -> FmStatus {
    set_error(&e.to_string());
    match e.exit_code() {
        1 => FmStatus::Verification,
        2 => FmStatus::Ingestion,
        3 => FmStatus::Protocol,
        4 => FmStatus::Timeout,
        _ => FmStatus::Usage,
    }
}

fn usage(msg: &str) -> FmStatus {
    set_error(msg);
    FmStatus::Usage
}

/// Run `f` with panics converted to `FM_STATUS_INTERNAL`.
fn guarded(f: impl FnOnce() -> FmStatus) -> FmStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("internal panic caught at the C boundary");
        FmStatus::Internal
    })
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn read_cstr<'a>(p: *const c_char) -> Result<&'a str, FmStatus> {
    if p.is_null() {
        return Err(usage("null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| usage("string argument is not valid UTF-8"))
}

fn write_string(s: String, out: *mut *mut c_char) -> FmStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            FmStatus::Ok
        }
        Err(_) => usage("produced text contains an interior NUL byte"),
    }
}

fn write_json<T: serde::Serialize>(value: &T, out: *mut *mut c_char) -> FmStatus {
    match serde_json::to_string_pretty(value) {
        Ok(text) => write_string(text, out),
        Err(e) => usage(&format!("report serialization: {e}")),
    }
}

/// Latest error message for this thread, or an empty string. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fm_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string returned by any `fm_*` function. Null is a no-op.
///
/// # Safety
/// `s` must be null or a pointer previously returned by this library and
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Build a trainer from configuration JSON (same schema as the `fedmask`
/// binary's config files).
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_trainer_from_json(
    config_json: *const c_char,
    out: *mut *mut FmTrainer,
) -> FmStatus {
    guarded(|| {
        if out.is_null() {
            return usage("null out-pointer");
        }
        *out = ptr::null_mut();
        let text = match read_cstr(config_json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        match RunConfig::from_json_str(text) {
            Ok(config) => {
                *out = Box::into_raw(Box::new(FmTrainer { config, outcome: None }));
                FmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Build a trainer from a configuration file on disk.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_trainer_from_file(
    path: *const c_char,
    out: *mut *mut FmTrainer,
) -> FmStatus {
    guarded(|| {
        if out.is_null() {
            return usage("null out-pointer");
        }
        *out = ptr::null_mut();
        let path = match read_cstr(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match RunConfig::load(Path::new(path)) {
            Ok(config) => {
                *out = Box::into_raw(Box::new(FmTrainer { config, outcome: None }));
                FmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Execute the configured run in-process (every round still crosses the
/// wire codec). Rerunning replaces the previous outcome.
///
/// # Safety
/// `trainer` must be a live pointer from `fm_trainer_from_*`.
#[no_mangle]
pub unsafe extern "C" fn fm_trainer_run(trainer: *mut FmTrainer) -> FmStatus {
    guarded(|| {
        let Some(t) = trainer.as_mut() else {
            return usage("null trainer handle");
        };
        if !matches!(t.config.transport, TransportConfig::InProcess) {
            return usage(
                "embedded runs are in-process; drive tcp runs with the fedmask binary",
            );
        }
        let run = || -> Result<RunOutcome, Error> {
            let prepared = t.config.prepare()?;
            let opts = t.config.train_options()?;
            let mut transport = InProcTransport::new(prepared.clients)?;
            run_server_rounds(&prepared.initial, &opts, &mut transport)
        };
        match run() {
            Ok(outcome) => {
                t.outcome = Some(outcome);
                FmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

unsafe fn with_outcome<T>(
    trainer: *const FmTrainer,
    out: *mut T,
    zero: T,
    f: impl FnOnce(&FmTrainer, &RunOutcome, *mut T) -> FmStatus,
) -> FmStatus {
    guarded(|| {
        if out.is_null() {
            return usage("null out-pointer");
        }
        ptr::write(out, zero);
        let Some(t) = trainer.as_ref() else {
            return usage("null trainer handle");
        };
        match &t.outcome {
            Some(outcome) => f(t, outcome, out),
            None => usage("trainer has no outcome yet; call fm_trainer_run first"),
        }
    })
}

/// Number of completed rounds.
///
/// # Safety
/// `trainer` must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_trainer_rounds_completed(
    trainer: *const FmTrainer,
    out: *mut u64,
) -> FmStatus {
    with_outcome(trainer, out, 0, |_, outcome, out| {
        *out = outcome.records.len() as u64;
        FmStatus::Ok
    })
}

/// Training loss of the final round.
///
/// # Safety
/// `trainer` must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_trainer_final_loss(
    trainer: *const FmTrainer,
    out: *mut f64,
) -> FmStatus {
    with_outcome(trainer, out, f64::NAN, |_, outcome, out| {
        match outcome.records.last() {
            Some(rec) => {
                *out = rec.train_loss;
                FmStatus::Ok
            }
            None => usage("run completed zero rounds"),
        }
    })
}

/// Per-round metrics as CSV text.
///
/// # Safety
/// `trainer` must be live; `out` must be a valid pointer; free the string
/// with `fm_string_free`.
#[no_mangle]
pub unsafe extern "C" fn fm_trainer_metrics_csv(
    trainer: *const FmTrainer,
    out: *mut *mut c_char,
) -> FmStatus {
    with_outcome(trainer, out, ptr::null_mut(), |_, outcome, out| {
        write_string(metrics_csv_string(&outcome.records), out)
    })
}

/// The run manifest as JSON text.
///
/// # Safety
/// `trainer` must be live; `out` must be a valid pointer; free the string
/// with `fm_string_free`.
#[no_mangle]
pub unsafe extern "C" fn fm_trainer_manifest_json(
    trainer: *const FmTrainer,
    out: *mut *mut c_char,
) -> FmStatus {
    with_outcome(trainer, out, ptr::null_mut(), |t, outcome, out| {
        let manifest = RunManifest::new(&t.config, &outcome.records, &outcome.params);
        match manifest_json(&manifest) {
            Ok(text) => write_string(text, out),
            Err(e) => fail(&e),
        }
    })
}

/// Hex SHA-256 over the exact bit pattern of the final weights.
///
/// # Safety
/// `trainer` must be live; `out` must be a valid pointer; free the string
/// with `fm_string_free`.
#[no_mangle]
pub unsafe extern "C" fn fm_trainer_param_hash(
    trainer: *const FmTrainer,
    out: *mut *mut c_char,
) -> FmStatus {
    with_outcome(trainer, out, ptr::null_mut(), |_, outcome, out| {
        write_string(param_hash_exact(&outcome.params), out)
    })
}

/// Release a trainer handle. Null is a no-op.
///
/// # Safety
/// `trainer` must be null or a live pointer from `fm_trainer_from_*`, not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn fm_trainer_free(trainer: *mut FmTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Run the full verification battery. Writes a multi-line text report and
/// returns `FM_STATUS_OK` only if every check passed
/// (`FM_STATUS_VERIFICATION` otherwise). `inject_swapped_corrections`
/// deliberately corrupts client uploads to prove the battery notices.
///
/// # Safety
/// `report_out` must be a valid pointer; free the string with
/// `fm_string_free`.
#[no_mangle]
pub unsafe extern "C" fn fm_verify(
    seed: u64,
    trials: u64,
    inject_swapped_corrections: bool,
    report_out: *mut *mut c_char,
) -> FmStatus {
    guarded(|| {
        if report_out.is_null() {
            return usage("null out-pointer");
        }
        *report_out = ptr::null_mut();
        let lines = match run_battery(seed, trials, inject_swapped_corrections) {
            Ok(lines) => lines,
            Err(e) => return fail(&e),
        };
        let failed = lines.iter().filter(|l| !l.pass).count();
        let mut text: String =
            lines.iter().map(|l| l.render() + "\n").collect();
        text += &format!("verification: {}/{} checks passed\n", lines.len() - failed, lines.len());
        let status = write_string(text, report_out);
        if status != FmStatus::Ok {
            return status;
        }
        if failed > 0 {
            set_error(&format!("{failed} of {} checks failed", lines.len()));
            FmStatus::Verification
        } else {
            FmStatus::Ok
        }
    })
}

/// # Safety
/// `dims` must point to `dims_len` readable values.
unsafe fn read_dims(dims: *const usize, dims_len: usize) -> Result<Vec<usize>, FmStatus> {
    if dims.is_null() {
        return Err(usage("null dims pointer"));
    }
    if dims_len == 0 {
        return Err(usage("dims_len must be positive"));
    }
    Ok(std::slice::from_raw_parts(dims, dims_len).to_vec())
}

/// Broadcast-ambiguity probe; writes the JSON report.
///
/// # Safety
/// `dims` must point to `dims_len` layer widths; `json_out` must be a valid
/// pointer; free the string with `fm_string_free`.
#[no_mangle]
pub unsafe extern "C" fn fm_attack_ambiguity(
    dims: *const usize,
    dims_len: usize,
    groups: usize,
    instances: usize,
    seed: u64,
    json_out: *mut *mut c_char,
) -> FmStatus {
    guarded(|| {
        if json_out.is_null() {
            return usage("null out-pointer");
        }
        *json_out = ptr::null_mut();
        let dims = match read_dims(dims, dims_len) {
            Ok(d) => d,
            Err(status) => return status,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match ambiguity_batch(&dims, groups, instances, &NoiseConfig::default(), &mut rng) {
            Ok(report) => write_json(&report, json_out),
            Err(e) => fail(&e),
        }
    })
}

/// Upload-gradient-ambiguity probe; writes the JSON report.
///
/// # Safety
/// `dims` must point to `dims_len` layer widths; `json_out` must be a valid
/// pointer; free the string with `fm_string_free`.
#[no_mangle]
pub unsafe extern "C" fn fm_attack_grad_ambiguity(
    dims: *const usize,
    dims_len: usize,
    groups: usize,
    candidates: usize,
    shard_size: usize,
    seed: u64,
    json_out: *mut *mut c_char,
) -> FmStatus {
    guarded(|| {
        if json_out.is_null() {
            return usage("null out-pointer");
        }
        *json_out = ptr::null_mut();
        let dims = match read_dims(dims, dims_len) {
            Ok(d) => d,
            Err(status) => return status,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match gradient_ambiguity_demo(
            &dims,
            groups,
            candidates,
            shard_size,
            &NoiseConfig::default(),
            &mut rng,
        ) {
            Ok(report) => write_json(&report, json_out),
            Err(e) => fail(&e),
        }
    })
}

/// Monte-Carlo argmax-guessing probe; writes the JSON report.
///
/// # Safety
/// `json_out` must be a valid pointer; free the string with
/// `fm_string_free`.
#[no_mangle]
pub unsafe extern "C" fn fm_attack_argmax(
    outputs: usize,
    groups: usize,
    trials: u64,
    strategy: FmGuessStrategy,
    seed: u64,
    json_out: *mut *mut c_char,
) -> FmStatus {
    guarded(|| {
        if json_out.is_null() {
            return usage("null out-pointer");
        }
        *json_out = ptr::null_mut();
        let cfg = GuessConfig::new(outputs, groups, trials, strategy.into());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match argmax_guess_experiment(&cfg, &mut rng) {
            Ok(report) => write_json(&report, json_out),
            Err(e) => fail(&e),
        }
    })
}
