//! C ABI over the `hgkd` library.
//!
//! Objects are exposed as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Fallible calls
//! return an [`HgkdStatus`]; on failure a message describing the error is
//! available from [`hgkd_last_error_message`] on the same thread until
//! the next failing call.
//!
//! Handles are not thread-safe. Panics never cross the boundary; they are
//! reported as `HGKD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hgkd::config::DistillConfig;
use hgkd::data::{Dataset, SynthConfig};
use hgkd::queue::{student_similarity, teacher_similarity, SimilarityMode};
use hgkd::student::{DenseStudent, StudentModel};
use hgkd::trainer::{build_teacher, load_student, Trainer};
use hgkd::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HgkdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Format = 5,
    Io = 6,
    Shape = 7,
    OutOfRange = 8,
    NonFinite = 9,
    Protocol = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Loss terms of one distillation step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HgkdLoss {
    pub step: u64,
    pub lr: f64,
    pub l_sim: f64,
    pub l_feat: f64,
    pub total: f64,
    /// False while the memory queue is still filling.
    pub sim_active: bool,
}

pub struct HgkdDataset {
    inner: Dataset,
}

pub struct HgkdTrainer {
    inner: Trainer,
}

pub struct HgkdStudent {
    model: StudentModel,
    dense: DenseStudent,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HgkdStatus {
    match e {
        Error::Shape { .. } => HgkdStatus::Shape,
        Error::InvalidArgument(_) => HgkdStatus::InvalidArgument,
        Error::NonFinite(_) => HgkdStatus::NonFinite,
        Error::OutOfRange { .. } => HgkdStatus::OutOfRange,
        Error::Format { .. } => HgkdStatus::Format,
        Error::Config(_) => HgkdStatus::Config,
        Error::Data(_) => HgkdStatus::Data,
        Error::Protocol(_) | Error::GradCheck(_) => HgkdStatus::Protocol,
        Error::Io { .. } => HgkdStatus::Io,
    }
}

/// Failure raised at the boundary itself.
struct Fail(HgkdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> HgkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HgkdStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {}", msg));
            HgkdStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HgkdStatus::NullPointer, format!("{} is null", what))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn string(p: *const c_char, what: &str) -> FfiResult<String> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(HgkdStatus::InvalidArgument, format!("{} is not valid UTF-8", what)))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> FfiResult<&'a mut [f64]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn parse_mode(mode: u32) -> FfiResult<SimilarityMode> {
    match mode {
        0 => Ok(SimilarityMode::Consistent),
        1 => Ok(SimilarityMode::AsWritten),
        m => Err(Fail(HgkdStatus::InvalidArgument, format!("similarity mode {} (expected 0 or 1)", m))),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hgkd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes (without the terminator) of the last error message on
/// this thread, 0 if there is none.
#[no_mangle]
pub extern "C" fn hgkd_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copy the last error message, NUL-terminated, into `buf`. Fails with
/// `HGKD_STATUS_BUFFER_TOO_SMALL` when `len` cannot hold it.
///
/// # Safety
/// `buf` must be valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn hgkd_last_error_message(buf: *mut c_char, len: usize) -> HgkdStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone()).unwrap_or_default();
    let bytes = msg.as_bytes_with_nul();
    if buf.is_null() {
        return HgkdStatus::NullPointer;
    }
    if len < bytes.len() {
        return HgkdStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
    HgkdStatus::Ok
}

#[no_mangle]
pub extern "C" fn hgkd_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Generate the synthetic texture dataset in memory.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn hgkd_dataset_synthetic(
    n: usize,
    classes: usize,
    image_size: usize,
    val_fraction: f64,
    seed: u64,
    out: *mut *mut HgkdDataset,
) -> HgkdStatus {
    guard(|| {
        let inner = Dataset::synthetic(&SynthConfig { n, classes, image_size, val_fraction, seed })?;
        emit(out, HgkdDataset { inner })
    })
}

/// Load a dataset directory written by `hgkd gen-data`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hgkd_dataset_load(dir: *const c_char, out: *mut *mut HgkdDataset) -> HgkdStatus {
    guard(|| {
        let dir = PathBuf::from(string(dir, "dir")?);
        emit(out, HgkdDataset { inner: Dataset::load(&dir)? })
    })
}

/// # Safety
/// `ds` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hgkd_dataset_save(ds: *const HgkdDataset, dir: *const c_char, force: bool) -> HgkdStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        ds.inner.save(&PathBuf::from(string(dir, "dir")?), force)?;
        Ok(())
    })
}

/// Number of images, 0 for a null handle.
///
/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn hgkd_dataset_len(ds: *const HgkdDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn hgkd_dataset_image_size(ds: *const HgkdDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.image_size())
}

/// # Safety
/// `ds` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn hgkd_dataset_checksum(ds: *const HgkdDataset) -> u64 {
    ds.as_ref().map_or(0, |d| d.inner.checksum())
}

/// # Safety
/// `ds` must be null or come from this library, and not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hgkd_dataset_free(ds: *mut HgkdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

fn trainer_config(toml: &str) -> FfiResult<DistillConfig> {
    Ok(DistillConfig::from_toml(toml, "<config>")?)
}

/// Fresh trainer from TOML config text over `ds`.
///
/// # Safety
/// `config_toml` must be NUL-terminated; `ds` from this library; `out`
/// valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hgkd_trainer_new(
    config_toml: *const c_char,
    ds: *const HgkdDataset,
    out: *mut *mut HgkdTrainer,
) -> HgkdStatus {
    guard(|| {
        let cfg = trainer_config(&string(config_toml, "config_toml")?)?;
        let ds = borrow(ds, "dataset")?;
        let teacher = build_teacher(&cfg)?;
        emit(out, HgkdTrainer { inner: Trainer::new(cfg, teacher, &ds.inner)? })
    })
}

/// Trainer restored from a checkpoint directory; the config must match
/// the one stored there.
///
/// # Safety
/// As for [`hgkd_trainer_new`]; `checkpoint_dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hgkd_trainer_resume(
    config_toml: *const c_char,
    ds: *const HgkdDataset,
    checkpoint_dir: *const c_char,
    out: *mut *mut HgkdTrainer,
) -> HgkdStatus {
    guard(|| {
        let cfg = trainer_config(&string(config_toml, "config_toml")?)?;
        let ds = borrow(ds, "dataset")?;
        let dir = PathBuf::from(string(checkpoint_dir, "checkpoint_dir")?);
        let teacher = build_teacher(&cfg)?;
        emit(out, HgkdTrainer { inner: Trainer::resume(cfg, teacher, &ds.inner, &dir)? })
    })
}

/// Run one distillation step. `loss` may be null.
///
/// # Safety
/// Handles must come from this library; `loss` null or valid for a write.
#[no_mangle]
pub unsafe extern "C" fn hgkd_trainer_step(tr: *mut HgkdTrainer, ds: *const HgkdDataset, loss: *mut HgkdLoss) -> HgkdStatus {
    guard(|| {
        let tr = borrow_mut(tr, "trainer")?;
        let ds = borrow(ds, "dataset")?;
        if tr.inner.step >= tr.inner.total_steps() {
            return Err(Fail(HgkdStatus::OutOfRange, format!("schedule finished at step {}", tr.inner.step)));
        }
        let b = tr.inner.distill_step(&ds.inner)?;
        if let Some(out) = loss.as_mut() {
            let rec = tr.inner.metrics.last().expect("record");
            *out = HgkdLoss {
                step: rec.step as u64,
                lr: rec.lr,
                l_sim: b.l_sim,
                l_feat: b.l_feat,
                total: b.total,
                sim_active: b.sim_active,
            };
        }
        Ok(())
    })
}

/// # Safety
/// `tr` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn hgkd_trainer_current_step(tr: *const HgkdTrainer) -> u64 {
    tr.as_ref().map_or(0, |t| t.inner.step as u64)
}

/// # Safety
/// `tr` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn hgkd_trainer_total_steps(tr: *const HgkdTrainer) -> u64 {
    tr.as_ref().map_or(0, |t| t.inner.total_steps() as u64)
}

/// # Safety
/// `tr` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hgkd_trainer_save(tr: *const HgkdTrainer, dir: *const c_char) -> HgkdStatus {
    guard(|| {
        let tr = borrow(tr, "trainer")?;
        tr.inner.save_checkpoint(&PathBuf::from(string(dir, "dir")?))?;
        Ok(())
    })
}

/// Copy of the trainer's current student.
///
/// # Safety
/// `tr` must come from this library; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hgkd_trainer_student(tr: *const HgkdTrainer, out: *mut *mut HgkdStudent) -> HgkdStatus {
    guard(|| {
        let model = borrow(tr, "trainer")?.inner.student.clone();
        let dense = model.to_dense_model();
        emit(out, HgkdStudent { model, dense })
    })
}

/// # Safety
/// `tr` must be null or come from this library, and not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hgkd_trainer_free(tr: *mut HgkdTrainer) {
    if !tr.is_null() {
        drop(Box::from_raw(tr));
    }
}

/// Student stored in a checkpoint directory.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hgkd_student_load(dir: *const c_char, out: *mut *mut HgkdStudent) -> HgkdStatus {
    guard(|| {
        let (_, model) = load_student(&PathBuf::from(string(dir, "dir")?))?;
        let dense = model.to_dense_model();
        emit(out, HgkdStudent { model, dense })
    })
}

/// # Safety
/// `st` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn hgkd_student_embed_dim(st: *const HgkdStudent) -> usize {
    st.as_ref().map_or(0, |s| s.model.cfg.embed_dim)
}

/// # Safety
/// `st` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn hgkd_student_image_size(st: *const HgkdStudent) -> usize {
    st.as_ref().map_or(0, |s| s.model.cfg.image_size)
}

/// Mean-pooled backbone features of `n` unmasked images laid out as
/// `n x channels x size x size`, written to `out` as `n x embed_dim`.
///
/// # Safety
/// `images` must hold `images_len` values and `out` room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn hgkd_student_features(
    st: *const HgkdStudent,
    images: *const f64,
    images_len: usize,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> HgkdStatus {
    guard(|| {
        let st = borrow(st, "student")?;
        let c = &st.model.cfg;
        let want = n * c.in_channels * c.image_size * c.image_size;
        if n == 0 || images_len != want {
            return Err(Fail(
                HgkdStatus::Shape,
                format!("expected {} values for {} images of {}x{}x{}, got {}", want, n, c.in_channels, c.image_size, c.image_size, images_len),
            ));
        }
        if out_len < n * c.embed_dim {
            return Err(Fail(HgkdStatus::BufferTooSmall, format!("output needs {} values, got {}", n * c.embed_dim, out_len)));
        }
        let x = Tensor::new(&[n, c.in_channels, c.image_size, c.image_size], slice(images, images_len, "images")?.to_vec())?;
        let f = st.dense.pooled_features(&x)?;
        slice_mut(out, out_len, "out")?[..f.numel()].copy_from_slice(f.data());
        Ok(())
    })
}

/// # Safety
/// `st` must be null or come from this library, and not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hgkd_student_free(st: *mut HgkdStudent) {
    if !st.is_null() {
        drop(Box::from_raw(st));
    }
}

/// Similarity distributions of a unit teacher embedding `t` and student
/// embedding `s` (each `dim` values) over a `k x dim` queue. `mode` 0
/// normalizes the student by its own logits, 1 by the teacher's. Either
/// output pointer may be null.
///
/// # Safety
/// Inputs must hold the stated number of values; non-null outputs room
/// for `k` values.
#[no_mangle]
pub unsafe extern "C" fn hgkd_similarity(
    t: *const f64,
    s: *const f64,
    dim: usize,
    queue: *const f64,
    k: usize,
    tau: f64,
    mode: u32,
    p_teacher: *mut f64,
    p_student: *mut f64,
) -> HgkdStatus {
    guard(|| {
        let mode = parse_mode(mode)?;
        let q = Tensor::new(&[k, dim], slice(queue, k * dim, "queue")?.to_vec())?;
        let t = slice(t, dim, "t")?;
        let s = slice(s, dim, "s")?;
        let pt = teacher_similarity(t, &q, tau)?;
        let ps = student_similarity(s, t, &q, tau, mode)?;
        if !p_teacher.is_null() {
            slice_mut(p_teacher, k, "p_teacher")?.copy_from_slice(&pt.probs);
        }
        if !p_student.is_null() {
            slice_mut(p_student, k, "p_student")?.copy_from_slice(&ps.probs);
        }
        Ok(())
    })
}

/// Negative Pearson correlation of two length-`len` vectors.
///
/// # Safety
/// `a` and `b` must hold `len` values; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hgkd_pearson_loss(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> HgkdStatus {
    guard(|| {
        let v = hgkd::losses::pearson_loss(slice(a, len, "a")?, slice(b, len, "b")?)?;
        *borrow_mut(out, "out")? = v;
        Ok(())
    })
}
