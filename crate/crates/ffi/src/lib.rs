//! C interface: load a checkpoint, score patients, read back classes and
//! per-segment attribution.
//!
//! Every call returns a [`VgStatus`]. On failure the message is kept per
//! thread and read with [`vg_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vesselgrade::autodiff::Tensor;
use vesselgrade::evaluation::PatientScore;
use vesselgrade::model::{explain, Checkpoint};
use vesselgrade::Error;

/// Number of coronary segments per patient.
pub const VG_SEGMENT_COUNT: usize = 11;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VgStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Format = 3,
    Dimension = 4,
    Numeric = 5,
    Config = 6,
    Panic = 7,
    Other = 8,
}

/// A loaded checkpoint. Opaque to C.
pub struct VgModel {
    checkpoint: Checkpoint,
}

/// Scores of one patient.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VgPrediction {
    pub segment_scores: [f64; VG_SEGMENT_COUNT],
    pub cadrads_score: f64,
    pub calc_score: f64,
    /// CAD-RADS class 0..5 from the checkpoint's thresholds.
    pub cadrads_class: i32,
    /// Calcium grade 0..4, or -1 when the model was not trained on calcium.
    pub calc_class: i32,
    /// Pooled features each segment supplied.
    pub attribution: [u32; VG_SEGMENT_COUNT],
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> VgStatus {
    match e {
        Error::Io(_) => VgStatus::Io,
        Error::Format { .. } => VgStatus::Format,
        Error::Dimension(_) | Error::Contract(_) => VgStatus::Dimension,
        Error::Numeric(_) | Error::DegenerateBatch(_) => VgStatus::Numeric,
        Error::Config(_) => VgStatus::Config,
        _ => VgStatus::Other,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (VgStatus, String)>) -> VgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VgStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VgStatus::Panic
        }
    }
}

fn fail(e: Error) -> (VgStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (VgStatus, String) {
    (VgStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn vg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file. On success `*out` owns the model; release it with
/// [`vg_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn vg_model_load(path: *const c_char, out: *mut *mut VgModel) -> VgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (VgStatus::Config, "path is not UTF-8".to_string()))?;
        let checkpoint = vesselgrade::model::read_checkpoint(Path::new(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(VgModel { checkpoint }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`vg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vg_model_free(model: *mut VgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Shape of one segment view: planes, height and width.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vg_model_view_shape(
    model: *const VgModel,
    planes: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> VgStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if planes.is_null() || height.is_null() || width.is_null() {
            return Err(null("shape output"));
        }
        let [p, h, w] = model.checkpoint.params.config.view_shape();
        *planes = p;
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Scores `patients` patients. `views` holds `patients × 11` segment views,
/// each planes × height × width values in row-major order; `out` receives one
/// prediction per patient.
///
/// # Safety
/// `views` must point to `values` readable doubles and `out` to `patients`
/// writable predictions.
#[no_mangle]
pub unsafe extern "C" fn vg_model_predict(
    model: *const VgModel,
    views: *const f64,
    values: usize,
    patients: usize,
    out: *mut VgPrediction,
) -> VgStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if patients == 0 {
            return Ok(());
        }
        if views.is_null() {
            return Err(null("views"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = &model.checkpoint;
        let [p, h, w] = ckpt.params.config.view_shape();
        let need = patients * VG_SEGMENT_COUNT * p * h * w;
        if values != need {
            return Err((
                VgStatus::Dimension,
                format!("{patients} patients need {need} values, got {values}"),
            ));
        }
        let data = std::slice::from_raw_parts(views, values).to_vec();
        let input = Tensor::new(vec![patients * VG_SEGMENT_COUNT, p, h, w], data).map_err(fail)?;
        let outputs = ckpt.params.predict(&input).map_err(fail)?;
        let out = std::slice::from_raw_parts_mut(out, patients);
        let t = &ckpt.thresholds;
        for (slot, o) in out.iter_mut().zip(&outputs) {
            let score = match t.patient_score {
                PatientScore::CadradsHead => o.cadrads_score,
                PatientScore::MaxSegment => o.max_segment_score(),
            };
            *slot = VgPrediction {
                segment_scores: o.segment_scores,
                cadrads_score: o.cadrads_score,
                calc_score: o.calc_score,
                cadrads_class: t.cadrads.bin(score) as i32,
                calc_class: t.calc.as_ref().map_or(-1, |c| c.bin(o.calc_score) as i32),
                attribution: explain(o).map(|c| c as u32),
            };
        }
        Ok(())
    })
}
