//! C ABI over `wl-core`.
//!
//! Every function returns a [`WlStatus`]; on failure the message is kept in a
//! thread-local slot readable through [`wl_last_error_message`]. Handles are
//! opaque, created by `*_load` functions and released by the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use wl_core::harness::workflow::{load_features, VideoFeatures};
use wl_core::metrics::{self, MetricReport};
use wl_core::pipeline::{extract_features, partition_video, Stage1Bundle};
use wl_core::temporal::TemporalModel;
use wl_core::tensor::{ParamStore, Tensor};
use wl_core::timeline::load_many;
use wl_core::vlm::FrameGrid;
use wl_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidString = 2,
    BufferTooSmall = 3,
    Shape = 4,
    Index = 5,
    Numeric = 6,
    Config = 7,
    Input = 8,
    State = 9,
    Vocab = 10,
    Format = 11,
    Io = 12,
    Json = 13,
    Panic = 14,
}

impl From<&Error> for WlStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => WlStatus::Shape,
            Error::Index(_) => WlStatus::Index,
            Error::Numeric(_) => WlStatus::Numeric,
            Error::Config(_) => WlStatus::Config,
            Error::Input(_) => WlStatus::Input,
            Error::State(_) => WlStatus::State,
            Error::Vocab(_) => WlStatus::Vocab,
            Error::Format(_) => WlStatus::Format,
            Error::Io(_) => WlStatus::Io,
            Error::Json(_) => WlStatus::Json,
        }
    }
}

struct Fail(WlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(WlStatus::from(&e), e.to_string())
    }
}

type Res<T> = Result<T, Fail>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Res<()>) -> WlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            WlStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, name: &str) -> Res<()> {
    if p.is_null() {
        return Err(Fail(WlStatus::NullArgument, format!("{name} is null")));
    }
    Ok(())
}

unsafe fn labels<'a>(p: *const usize, len: usize, name: &str) -> Res<&'a [usize]> {
    nonnull(p, name)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn string(p: *const c_char, name: &str) -> Res<String> {
    nonnull(p, name)?;
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| Fail(WlStatus::InvalidString, format!("{name} is not UTF-8")))
}

unsafe fn write<T>(out: *mut T, value: T, name: &str) -> Res<()> {
    nonnull(out, name)?;
    out.write(value);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the next failure.
#[no_mangle]
pub extern "C" fn wl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Free a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn wl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Frame accuracy (percent) of two label sequences of length `len`.
///
/// # Safety
/// `pred` and `gt` must point to `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wl_frame_accuracy(pred: *const usize, gt: *const usize, len: usize, out: *mut f64) -> WlStatus {
    guard(|| write(out, metrics::frame_accuracy(labels(pred, len, "pred")?, labels(gt, len, "gt")?)?, "out"))
}

/// Segmental edit score (percent).
///
/// # Safety
/// As for [`wl_frame_accuracy`].
#[no_mangle]
pub unsafe extern "C" fn wl_edit_score(pred: *const usize, gt: *const usize, len: usize, out: *mut f64) -> WlStatus {
    guard(|| write(out, metrics::edit_score(labels(pred, len, "pred")?, labels(gt, len, "gt")?)?, "out"))
}

/// Segmental F1 (percent) at IoU threshold `tau`.
///
/// # Safety
/// As for [`wl_frame_accuracy`].
#[no_mangle]
pub unsafe extern "C" fn wl_overlap_f1(pred: *const usize, gt: *const usize, len: usize, tau: f64, out: *mut f64) -> WlStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Fail(WlStatus::Config, format!("tau {tau} outside [0, 1]")));
        }
        write(out, metrics::overlap_f1(labels(pred, len, "pred")?, labels(gt, len, "gt")?, tau)?, "out")
    })
}

/// Aggregated metrics over one or more videos.
pub struct WlReport(MetricReport);

/// Score one video's label sequences.
///
/// # Safety
/// `pred` and `gt` must point to `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wl_report_from_labels(pred: *const usize, gt: *const usize, len: usize, out: *mut *mut WlReport) -> WlStatus {
    guard(|| {
        let seq = vec![("video".to_string(), labels(pred, len, "pred")?.to_vec(), labels(gt, len, "gt")?.to_vec())];
        let report = MetricReport::from_sequences(&seq)?;
        write(out, Box::into_raw(Box::new(WlReport(report))), "out")
    })
}

/// Score predicted timeline JSON against ground-truth timeline JSON at `fps`.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wl_report_evaluate_files(pred_path: *const c_char, gt_path: *const c_char, fps: f64, out: *mut *mut WlReport) -> WlStatus {
    guard(|| {
        let pred = load_many(&PathBuf::from(string(pred_path, "pred_path")?))?;
        let gt = load_many(&PathBuf::from(string(gt_path, "gt_path")?))?;
        let report = metrics::evaluate(&pred, &gt, fps)?;
        write(out, Box::into_raw(Box::new(WlReport(report))), "out")
    })
}

/// Video-level mean of a named metric (`accuracy`, `edit`, `f1@50`, ...).
///
/// # Safety
/// `report` must be a live handle; `name` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wl_report_mean(report: *const WlReport, name: *const c_char, out: *mut f64) -> WlStatus {
    guard(|| {
        nonnull(report, "report")?;
        let name = string(name, "name")?;
        match (*report).0.aggregate.get(&name) {
            Some(s) => write(out, s.mean, "out"),
            None => Err(Fail(WlStatus::Config, format!("unknown metric {name:?}"))),
        }
    })
}

/// Frame accuracy pooled over all frames of all videos.
///
/// # Safety
/// `report` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wl_report_acc_micro(report: *const WlReport, out: *mut f64) -> WlStatus {
    guard(|| {
        nonnull(report, "report")?;
        write(out, (*report).0.acc_micro, "out")
    })
}

/// Full report as JSON; release with [`wl_string_free`].
///
/// # Safety
/// `report` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wl_report_to_json(report: *const WlReport, out: *mut *mut c_char) -> WlStatus {
    guard(|| {
        nonnull(report, "report")?;
        let json = (*report).0.to_json()?;
        write(out, CString::new(json).expect("json has no nul").into_raw(), "out")
    })
}

/// # Safety
/// `report` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn wl_report_free(report: *mut WlReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// A trained stage-2 temporal model.
pub struct WlTemporal {
    model: TemporalModel,
    store: ParamStore<f32>,
}

/// Load a stage-2 checkpoint written by `wl train-temporal`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wl_temporal_load(path: *const c_char, out: *mut *mut WlTemporal) -> WlStatus {
    guard(|| {
        let (model, store) = TemporalModel::load(&PathBuf::from(string(path, "path")?))?;
        write(out, Box::into_raw(Box::new(WlTemporal { model, store })), "out")
    })
}

/// Input width and number of classes of a temporal model.
///
/// # Safety
/// `model` must be a live handle; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn wl_temporal_dims(model: *const WlTemporal, feature_dim: *mut usize, num_classes: *mut usize) -> WlStatus {
    guard(|| {
        nonnull(model, "model")?;
        let cfg = &(*model).model.cfg;
        write(feature_dim, cfg.feature_dim, "feature_dim")?;
        write(num_classes, cfg.num_classes, "num_classes")
    })
}

/// Final-stage labels of a row-major `[rows, dim]` feature matrix, written to `labels_out[rows]`.
///
/// # Safety
/// `features` must hold `rows * dim` floats and `labels_out` room for `rows` values.
#[no_mangle]
pub unsafe extern "C" fn wl_temporal_predict(
    model: *const WlTemporal,
    features: *const f32,
    rows: usize,
    dim: usize,
    labels_out: *mut usize,
) -> WlStatus {
    guard(|| {
        nonnull(model, "model")?;
        nonnull(features, "features")?;
        nonnull(labels_out, "labels_out")?;
        let data = slice::from_raw_parts(features, rows * dim).to_vec();
        let m = &*model;
        let pred = m.model.predict(&m.store, &Tensor::new(&[rows, dim], data)?)?.pop().expect("at least one stage");
        slice::from_raw_parts_mut(labels_out, rows).copy_from_slice(&pred.labels);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn wl_temporal_free(model: *mut WlTemporal) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// A stage-1 model with its vocabulary.
pub struct WlStage1(Stage1Bundle);

/// Load a stage-1 bundle written by `wl pretrain` or `wl finetune-lora`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wl_stage1_load(path: *const c_char, out: *mut *mut WlStage1) -> WlStatus {
    guard(|| {
        let b = Stage1Bundle::load(&PathBuf::from(string(path, "path")?))?;
        write(out, Box::into_raw(Box::new(WlStage1(b))), "out")
    })
}

/// Clip features of a `.wlfg` video sampled at `fps`, split into `clip_s`-second clips.
///
/// Writes the clip count to `rows` and the width to `dim`. With a null `buf` only
/// the sizes are reported; otherwise `buf` needs `rows * dim` floats
/// (`capacity`), else [`WlStatus::BufferTooSmall`].
///
/// # Safety
/// `stage1` must be a live handle; `video_path` NUL-terminated; `rows` and `dim`
/// writable; `buf`, when not null, must have room for `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn wl_stage1_extract_features(
    stage1: *const WlStage1,
    video_path: *const c_char,
    fps: f64,
    clip_s: f64,
    buf: *mut f32,
    capacity: usize,
    rows: *mut usize,
    dim: *mut usize,
) -> WlStatus {
    guard(|| {
        nonnull(stage1, "stage1")?;
        let video = FrameGrid::load(&PathBuf::from(string(video_path, "video_path")?))?;
        let part = partition_video(&video, clip_s, fps)?;
        let feats = extract_features(&(*stage1).0, &video, &part)?;
        let (r, d) = (feats.shape()[0], feats.shape()[1]);
        write(rows, r, "rows")?;
        write(dim, d, "dim")?;
        if buf.is_null() {
            return Ok(());
        }
        if capacity < r * d {
            return Err(Fail(WlStatus::BufferTooSmall, format!("need {} floats, have {capacity}", r * d)));
        }
        slice::from_raw_parts_mut(buf, r * d).copy_from_slice(feats.data());
        Ok(())
    })
}

/// # Safety
/// `stage1` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn wl_stage1_free(stage1: *mut WlStage1) {
    if !stage1.is_null() {
        drop(Box::from_raw(stage1));
    }
}

/// Number of videos in a feature directory written by `wl extract-features`.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wl_feature_dir_count(dir: *const c_char, out: *mut usize) -> WlStatus {
    guard(|| {
        let (_, videos): (_, Vec<VideoFeatures>) = load_features(&PathBuf::from(string(dir, "dir")?))?;
        write(out, videos.len(), "out")
    })
}
