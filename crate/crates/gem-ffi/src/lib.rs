//! C ABI for the gem forecasting engine.
//!
//! Opaque handles wrap field series (GEMF files), model checkpoints
//! (GEMW files), and ensemble forecasts. Every fallible call returns a
//! status code (`GEM_OK` / usage / data / numeric, mirroring the CLI's
//! exit classes) and records a message retrievable with
//! [`gem_last_error`]. Handles must be released with their matching
//! `_free`/`_close` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::PathBuf;

use gem_core::error::GemError;
use gem_core::grid::Field;
use gem_core::model::{load_checkpoint, Checkpoint, ModelGeometry};
use gem_core::rollout::{rollout, EnsembleForecast, RolloutOptions};

pub const GEM_OK: i32 = 0;
pub const GEM_ERR_USAGE: i32 = 1;
pub const GEM_ERR_DATA: i32 = 2;
pub const GEM_ERR_NUMERIC: i32 = 3;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(err: GemError) -> i32 {
    let code = err.class().exit_code();
    set_error(format!("{}: {err}", err.token()));
    code
}

fn fail_usage(msg: &str) -> i32 {
    set_error(msg.to_string());
    GEM_ERR_USAGE
}

/// Opaque sequence of gridded fields (one GEMF file).
pub struct GemSeries {
    fields: Vec<Field>,
}

/// Opaque loaded model checkpoint plus its precomputed geometry.
pub struct GemModel {
    checkpoint: Checkpoint,
    geometry: ModelGeometry,
}

/// Opaque ensemble forecast.
pub struct GemForecast {
    ensemble: EnsembleForecast,
}

#[repr(C)]
#[derive(Default)]
pub struct GemSeriesInfo {
    pub nlat: u32,
    pub nlon: u32,
    pub nchan: u32,
    pub ntime: u32,
}

#[repr(C)]
#[derive(Default)]
pub struct GemModelInfo {
    pub nlat: u32,
    pub nlon: u32,
    pub prognostic_channels: u32,
    pub diagnostic_channels: u32,
    pub noise_dim: u32,
    pub param_count: u64,
}

#[repr(C)]
#[derive(Default)]
pub struct GemForecastInfo {
    pub members: u32,
    pub leads: u32,
    pub nlat: u32,
    pub nlon: u32,
    pub prognostic_channels: u32,
    pub diagnostic_channels: u32,
    pub init_time_hours: i64,
}

fn path_from(ptr: *const c_char) -> Result<PathBuf, i32> {
    if ptr.is_null() {
        return Err(fail_usage("null path"));
    }
    let s = unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail_usage("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// Copy a message into a caller buffer, always NUL-terminating; returns
/// the full message length (excluding the NUL).
fn copy_str(msg: &str, buf: *mut c_char, len: usize) -> usize {
    if !buf.is_null() && len > 0 {
        let bytes = msg.as_bytes();
        let n = bytes.len().min(len - 1);
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
    }
    msg.len()
}

/// Version string of the library, static storage.
#[no_mangle]
pub extern "C" fn gem_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), " (formats: gemf v1, gemw v1)\0").as_ptr()
        as *const c_char
}

/// Retrieve the last error message on this thread. Returns the message
/// length; writes a NUL-terminated (possibly truncated) copy into `buf`.
#[no_mangle]
pub extern "C" fn gem_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| copy_str(&e.borrow(), buf, len))
}

/// Open a GEMF field file. Returns NULL on failure.
#[no_mangle]
pub extern "C" fn gem_series_open(path: *const c_char) -> *mut GemSeries {
    let path = match path_from(path) {
        Ok(p) => p,
        Err(_) => return std::ptr::null_mut(),
    };
    match gem_core::gemf::read_field_file(&path) {
        Ok(fields) => Box::into_raw(Box::new(GemSeries { fields })),
        Err(e) => {
            fail(e);
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `handle` must come from [`gem_series_open`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn gem_series_close(handle: *mut GemSeries) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// # Safety
/// `handle` must be a live series handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gem_series_info(
    handle: *const GemSeries,
    info: *mut GemSeriesInfo,
) -> i32 {
    if handle.is_null() || info.is_null() {
        return fail_usage("null handle or out pointer");
    }
    let series = unsafe { &*handle };
    let first = &series.fields[0];
    unsafe {
        *info = GemSeriesInfo {
            nlat: first.grid().nlat() as u32,
            nlon: first.grid().nlon() as u32,
            nchan: first.nchan() as u32,
            ntime: series.fields.len() as u32,
        };
    }
    GEM_OK
}

/// # Safety
/// `handle` must be a live series handle; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gem_series_channel_name(
    handle: *const GemSeries,
    index: u32,
    buf: *mut c_char,
    len: usize,
) -> i32 {
    if handle.is_null() {
        return fail_usage("null handle");
    }
    let series = unsafe { &*handle };
    match series.fields[0].channels().get(index as usize) {
        Some(name) => {
            copy_str(name, buf, len);
            GEM_OK
        }
        None => fail(GemError::MissingChannel(format!("index {index}"))),
    }
}

/// # Safety
/// `handle` must be a live series handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gem_series_time_tag(
    handle: *const GemSeries,
    time_index: u32,
    out: *mut i64,
) -> i32 {
    if handle.is_null() || out.is_null() {
        return fail_usage("null handle or out pointer");
    }
    let series = unsafe { &*handle };
    match series.fields.get(time_index as usize) {
        Some(f) => {
            unsafe { *out = f.time_tag() };
            GEM_OK
        }
        None => fail_usage("time index out of range"),
    }
}

/// Copy one `[nlat x nlon]` frame into `buf` (row-major, north first).
///
/// # Safety
/// `handle` must be a live series handle; `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn gem_series_frame(
    handle: *const GemSeries,
    time_index: u32,
    channel: u32,
    buf: *mut f32,
    len: usize,
) -> i32 {
    if handle.is_null() || buf.is_null() {
        return fail_usage("null handle or buffer");
    }
    let series = unsafe { &*handle };
    let Some(field) = series.fields.get(time_index as usize) else {
        return fail_usage("time index out of range");
    };
    if channel as usize >= field.nchan() {
        return fail(GemError::MissingChannel(format!("index {channel}")));
    }
    let frame = field.channel(channel as usize);
    if len < frame.len() {
        return fail_usage("buffer too small for one frame");
    }
    unsafe { std::ptr::copy_nonoverlapping(frame.as_ptr(), buf, frame.len()) };
    GEM_OK
}

/// Load a GEMW checkpoint. Returns NULL on failure.
#[no_mangle]
pub extern "C" fn gem_model_load(path: *const c_char) -> *mut GemModel {
    let path = match path_from(path) {
        Ok(p) => p,
        Err(_) => return std::ptr::null_mut(),
    };
    let checkpoint = match load_checkpoint(&path) {
        Ok(c) => c,
        Err(e) => {
            fail(e);
            return std::ptr::null_mut();
        }
    };
    let geometry = match ModelGeometry::new(&checkpoint.cfg) {
        Ok(g) => g,
        Err(e) => {
            fail(e);
            return std::ptr::null_mut();
        }
    };
    Box::into_raw(Box::new(GemModel {
        checkpoint,
        geometry,
    }))
}

/// # Safety
/// `handle` must come from [`gem_model_load`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn gem_model_free(handle: *mut GemModel) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// # Safety
/// `handle` must be a live model handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gem_model_info(handle: *const GemModel, info: *mut GemModelInfo) -> i32 {
    if handle.is_null() || info.is_null() {
        return fail_usage("null handle or out pointer");
    }
    let model = unsafe { &*handle };
    let cfg = &model.checkpoint.cfg;
    unsafe {
        *info = GemModelInfo {
            nlat: cfg.nlat as u32,
            nlon: cfg.nlon as u32,
            prognostic_channels: cfg.c_x() as u32,
            diagnostic_channels: cfg.c_y() as u32,
            noise_dim: cfg.noise_dim as u32,
            param_count: model.checkpoint.params.param_count() as u64,
        };
    }
    GEM_OK
}

/// Run an ensemble forecast from the series snapshot tagged
/// `init_time_hours`. Returns NULL on failure.
///
/// # Safety
/// `model` and `series` must be live handles from this library.
#[no_mangle]
pub unsafe extern "C" fn gem_forecast_run(
    model: *const GemModel,
    series: *const GemSeries,
    init_time_hours: i64,
    leads: u32,
    members: u32,
    seed: u64,
    sst_smooth: i32,
) -> *mut GemForecast {
    if model.is_null() || series.is_null() {
        fail_usage("null model or series handle");
        return std::ptr::null_mut();
    }
    let model = unsafe { &*model };
    let series = unsafe { &*series };
    let Some(x0) = series
        .fields
        .iter()
        .find(|f| f.time_tag() == init_time_hours)
    else {
        fail(GemError::ShapeMismatch(format!(
            "no snapshot tagged {init_time_hours} h in series"
        )));
        return std::ptr::null_mut();
    };
    match rollout(
        &model.checkpoint,
        &model.geometry,
        x0,
        None,
        leads as usize,
        members as usize,
        seed,
        RolloutOptions {
            sst_smooth: sst_smooth != 0,
        },
    ) {
        Ok(ensemble) => Box::into_raw(Box::new(GemForecast { ensemble })),
        Err(e) => {
            fail(e);
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `handle` must come from [`gem_forecast_run`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn gem_forecast_free(handle: *mut GemForecast) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// # Safety
/// `handle` must be a live forecast handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gem_forecast_info(
    handle: *const GemForecast,
    info: *mut GemForecastInfo,
) -> i32 {
    if handle.is_null() || info.is_null() {
        return fail_usage("null handle or out pointer");
    }
    let fc = unsafe { &(*handle).ensemble };
    unsafe {
        *info = GemForecastInfo {
            members: fc.members as u32,
            leads: fc.leads as u32,
            nlat: fc.grid.nlat() as u32,
            nlon: fc.grid.nlon() as u32,
            prognostic_channels: fc.prognostic_channels.len() as u32,
            diagnostic_channels: fc.diagnostic_channels.len() as u32,
            init_time_hours: fc.init_time,
        };
    }
    GEM_OK
}

unsafe fn copy_block(
    handle: *const GemForecast,
    member: u32,
    lead: u32,
    channel: u32,
    buf: *mut f32,
    len: usize,
    diagnostic: bool,
) -> i32 {
    if handle.is_null() || buf.is_null() {
        return fail_usage("null handle or buffer");
    }
    let fc = unsafe { &(*handle).ensemble };
    let nchan = if diagnostic {
        fc.diagnostic_channels.len()
    } else {
        fc.prognostic_channels.len()
    };
    if member as usize >= fc.members
        || lead == 0
        || lead as usize > fc.leads
        || channel as usize >= nchan
    {
        return fail_usage("member/lead/channel out of range");
    }
    let values = if diagnostic {
        fc.diag_values(member as usize, lead as usize, channel as usize)
    } else {
        fc.prog_values(member as usize, lead as usize, channel as usize)
    };
    if len < values.len() {
        return fail_usage("buffer too small for one frame");
    }
    unsafe { std::ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len()) };
    GEM_OK
}

/// Copy one prognostic frame (1-based lead) into `buf`.
///
/// # Safety
/// `handle` must be a live forecast handle; `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn gem_forecast_prog(
    handle: *const GemForecast,
    member: u32,
    lead: u32,
    channel: u32,
    buf: *mut f32,
    len: usize,
) -> i32 {
    unsafe { copy_block(handle, member, lead, channel, buf, len, false) }
}

/// Copy one diagnostic frame (1-based lead) into `buf`.
///
/// # Safety
/// `handle` must be a live forecast handle; `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn gem_forecast_diag(
    handle: *const GemForecast,
    member: u32,
    lead: u32,
    channel: u32,
    buf: *mut f32,
    len: usize,
) -> i32 {
    unsafe { copy_block(handle, member, lead, channel, buf, len, true) }
}

/// Fair CRPS of an ensemble against one observation.
///
/// # Safety
/// `samples` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gem_fair_crps(
    samples: *const f64,
    n: usize,
    obs: f64,
    out: *mut f64,
) -> i32 {
    if samples.is_null() || out.is_null() {
        return fail_usage("null samples or out pointer");
    }
    let slice = unsafe { std::slice::from_raw_parts(samples, n) };
    match gem_core::scoring::fair_crps(slice, obs) {
        Ok(v) => {
            unsafe { *out = v };
            GEM_OK
        }
        Err(e) => fail(e),
    }
}

/// Pinball loss of a predicted tau-quantile.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gem_quantile_score(q: f64, obs: f64, tau: f64, out: *mut f64) -> i32 {
    if out.is_null() {
        return fail_usage("null out pointer");
    }
    match gem_core::scoring::quantile_score(q, obs, tau) {
        Ok(v) => {
            unsafe { *out = v };
            GEM_OK
        }
        Err(e) => fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    /// Every exported symbol, kept in sync with the generated header by
    /// the test below.
    const EXPORTED: &[&str] = &[
        "gem_version",
        "gem_last_error",
        "gem_series_open",
        "gem_series_close",
        "gem_series_info",
        "gem_series_channel_name",
        "gem_series_time_tag",
        "gem_series_frame",
        "gem_model_load",
        "gem_model_free",
        "gem_model_info",
        "gem_forecast_run",
        "gem_forecast_free",
        "gem_forecast_info",
        "gem_forecast_prog",
        "gem_forecast_diag",
        "gem_fair_crps",
        "gem_quantile_score",
    ];

    #[test]
    fn generated_header_matches_exports() {
        let header = include_str!("../include/gem.h");
        for name in EXPORTED {
            assert!(
                header.contains(&format!("{name}(")),
                "header misses {name}"
            );
        }
        // No stray gem_ declarations beyond the export list.
        for line in header.lines() {
            if let Some(pos) = line.find("gem_") {
                let tail = &line[pos..];
                let name: String = tail
                    .chars()
                    .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
                    .collect();
                if tail[name.len()..].starts_with('(') {
                    assert!(
                        EXPORTED.contains(&name.as_str()),
                        "header declares unknown {name}"
                    );
                }
            }
        }
    }

    #[test]
    fn version_and_errors_round_trip() {
        let v = unsafe { CStr::from_ptr(gem_version()) }.to_str().unwrap();
        assert!(v.contains("gemf v1"));

        let missing = CString::new("/nonexistent/file.gemf").unwrap();
        let handle = gem_series_open(missing.as_ptr());
        assert!(handle.is_null());
        let mut buf = vec![0i8; 256];
        let n = gem_last_error(buf.as_mut_ptr(), buf.len());
        assert!(n > 0);
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert!(msg.contains("io"), "unexpected message {msg:?}");
    }

    #[test]
    fn series_and_scoring_surface() {
        use gem_core::grid::make_grid;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.gemf");
        let grid = make_grid(4, 8).unwrap();
        let f = Field::new(
            grid.clone(),
            vec!["t".into()],
            (0..grid.ncell()).map(|k| k as f32).collect(),
            48,
        )
        .unwrap();
        gem_core::gemf::write_field_file(&[f], &path).unwrap();

        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        let handle = gem_series_open(cpath.as_ptr());
        assert!(!handle.is_null());
        let mut info = GemSeriesInfo::default();
        assert_eq!(unsafe { gem_series_info(handle, &mut info) }, GEM_OK);
        assert_eq!((info.nlat, info.nlon, info.nchan, info.ntime), (4, 8, 1, 1));
        let mut tag = 0i64;
        assert_eq!(unsafe { gem_series_time_tag(handle, 0, &mut tag) }, GEM_OK);
        assert_eq!(tag, 48);
        let mut frame = vec![0f32; 32];
        assert_eq!(
            unsafe { gem_series_frame(handle, 0, 0, frame.as_mut_ptr(), frame.len()) },
            GEM_OK
        );
        assert_eq!(frame[5], 5.0);
        let mut name = vec![0i8; 16];
        assert_eq!(
            unsafe { gem_series_channel_name(handle, 0, name.as_mut_ptr(), name.len()) },
            GEM_OK
        );
        assert_eq!(
            unsafe { CStr::from_ptr(name.as_ptr()) }.to_str().unwrap(),
            "t"
        );
        // Out-of-range requests are usage errors.
        assert_eq!(
            unsafe { gem_series_frame(handle, 3, 0, frame.as_mut_ptr(), frame.len()) },
            GEM_ERR_USAGE
        );
        unsafe { gem_series_close(handle) };

        let samples = [0.0f64, 2.0];
        let mut out = f64::NAN;
        assert_eq!(
            unsafe { gem_fair_crps(samples.as_ptr(), 2, 1.0, &mut out) },
            GEM_OK
        );
        assert_eq!(out, 0.0);
        assert_eq!(
            unsafe { gem_fair_crps(samples.as_ptr(), 1, 1.0, &mut out) },
            GEM_ERR_DATA
        );
        assert_eq!(unsafe { gem_quantile_score(10.0, 12.0, 0.95, &mut out) }, GEM_OK);
        assert!((out - 1.9).abs() < 1e-12);
        assert_eq!(
            unsafe { gem_quantile_score(10.0, 12.0, 1.5, &mut out) },
            GEM_ERR_USAGE
        );
    }

    #[test]
    fn model_forecast_round_trip() {
        use gem_core::model::{save_checkpoint, ModelConfig, ModelParams, StandardStats};
        use gem_core::scoring::ChannelStats;

        let cfg = ModelConfig {
            nlat: 8,
            nlon: 16,
            patch: (2, 2),
            embed_dim: 16,
            depth: 1,
            heads: 2,
            noise_dim: 4,
            window_h: 2,
            ..ModelConfig::default()
        };
        let ck = Checkpoint {
            cfg: cfg.clone(),
            stats: StandardStats {
                x: ChannelStats::identity(cfg.c_x()),
                y: ChannelStats::identity(cfg.c_y()),
                c: ChannelStats::identity(cfg.c_c()),
            },
            params: ModelParams::init(&cfg, 3).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let ck_path = dir.path().join("m.gemw");
        save_checkpoint(&ck, &ck_path).unwrap();

        let grid = cfg.grid().unwrap();
        let x0 = Field::new(
            grid.clone(),
            cfg.prognostic_channels.clone(),
            vec![1.5; cfg.c_x() * grid.ncell()],
            0,
        )
        .unwrap();
        let series_path = dir.path().join("x.gemf");
        gem_core::gemf::write_field_file(&[x0], &series_path).unwrap();

        let cm = CString::new(ck_path.to_str().unwrap()).unwrap();
        let model = gem_model_load(cm.as_ptr());
        assert!(!model.is_null());
        let mut minfo = GemModelInfo::default();
        assert_eq!(unsafe { gem_model_info(model, &mut minfo) }, GEM_OK);
        assert_eq!((minfo.nlat, minfo.nlon), (8, 16));
        assert!(minfo.param_count > 0);

        let cs = CString::new(series_path.to_str().unwrap()).unwrap();
        let series = gem_series_open(cs.as_ptr());
        assert!(!series.is_null());
        let fc = unsafe { gem_forecast_run(model, series, 0, 2, 2, 7, 1) };
        assert!(!fc.is_null());
        let mut finfo = GemForecastInfo::default();
        assert_eq!(unsafe { gem_forecast_info(fc, &mut finfo) }, GEM_OK);
        assert_eq!((finfo.members, finfo.leads), (2, 2));
        let mut frame = vec![0f32; 8 * 16];
        assert_eq!(
            unsafe { gem_forecast_prog(fc, 0, 1, 0, frame.as_mut_ptr(), frame.len()) },
            GEM_OK
        );
        // Identity at init: the prognostic frame equals the input.
        assert!(frame.iter().all(|&v| v == 1.5));
        assert_eq!(
            unsafe { gem_forecast_diag(fc, 1, 2, 2, frame.as_mut_ptr(), frame.len()) },
            GEM_OK
        );
        // Unknown member is a usage error, not a crash.
        assert_eq!(
            unsafe { gem_forecast_prog(fc, 9, 1, 0, frame.as_mut_ptr(), frame.len()) },
            GEM_ERR_USAGE
        );
        unsafe { gem_forecast_free(fc) };
        unsafe { gem_series_close(series) };
        unsafe { gem_model_free(model) };
    }
}
