//! C ABI for soupmix.
//!
//! Every fallible function returns an [`SmStatus`]; on failure the message is
//! kept in a thread-local slot readable through [`sm_last_error_message`].
//! Objects are handed out as opaque pointers and released with the matching
//! `*_free` function. Strings returned to the caller are released with
//! [`sm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use soupmix::dfo::Solver;
use soupmix::partition::{self, PartitionError};
use soupmix::soups::{self, EvalError, SoupError};
use soupmix::tensor_store::{self, CheckpointError, Metadata, TensorError};
use soupmix::{ManifoldConfig, MixingVector, ModelPool, ParameterSet, PartitionSpec, PoolMember};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    Schema = 5,
    Partition = 6,
    InvalidArgument = 7,
    Evaluation = 8,
    Optimizer = 9,
    Panic = 10,
}

/// Opaque named-tensor parameter set.
pub struct SmParams(ParameterSet);

/// Opaque partition of tensor names into mixing components.
pub struct SmPartition(PartitionSpec);

/// Accuracy callback for soup construction. Writes the accuracy in [0, 1]
/// to `out_accuracy` and returns 0, or returns nonzero to abort the run.
/// `params` is only valid for the duration of the call.
pub type SmEvaluateFn =
    Option<unsafe extern "C" fn(user_data: *mut c_void, params: *const SmParams, out_accuracy: *mut f64) -> c_int>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SmStatus, String);

type FfiResult<T> = Result<T, Failure>;

impl Failure {
    fn null(what: &str) -> Self {
        Failure(SmStatus::NullPointer, format!("{what} is null"))
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Failure(SmStatus::Schema, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io(_) => SmStatus::Io,
            _ => SmStatus::Checkpoint,
        };
        Failure(code, e.to_string())
    }
}

impl From<PartitionError> for Failure {
    fn from(e: PartitionError) -> Self {
        let code = match e {
            PartitionError::Io(_) => SmStatus::Io,
            PartitionError::Tensor(_) => SmStatus::Schema,
            PartitionError::MixingBounds { .. } | PartitionError::MixingLength { .. } => SmStatus::InvalidArgument,
            _ => SmStatus::Partition,
        };
        Failure(code, e.to_string())
    }
}

impl From<SoupError> for Failure {
    fn from(e: SoupError) -> Self {
        let code = match &e {
            SoupError::Tensor(_) => SmStatus::Schema,
            SoupError::Partition(_) => SmStatus::Partition,
            SoupError::Eval(_) => SmStatus::Evaluation,
            SoupError::Optimizer(_) => SmStatus::Optimizer,
            _ => SmStatus::InvalidArgument,
        };
        Failure(code, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard<F: FnOnce() -> FfiResult<()>>(f: F) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_last_error(&msg);
            code
        }
        Err(_) => {
            set_last_error("internal panic");
            SmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SmStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

fn boxed_params(ps: ParameterSet) -> *mut SmParams {
    Box::into_raw(Box::new(SmParams(ps)))
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Parameter sets

/// Builds a single-tensor parameter set; further tensors are appended with
/// [`sm_params_push`]. `shape` has `rank` entries and `data` holds their
/// product in row-major order.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn sm_params_new(
    name: *const c_char,
    shape: *const usize,
    rank: usize,
    data: *const f32,
    out: *mut *mut SmParams,
) -> SmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let tensor = make_tensor(name, shape, rank, data)?;
        *out = boxed_params(ParameterSet::new(vec![tensor])?);
        Ok(())
    })
}

/// Appends a tensor to an existing set.
///
/// # Safety
/// `params` must be a live handle; other pointers as in [`sm_params_new`].
#[no_mangle]
pub unsafe extern "C" fn sm_params_push(
    params: *mut SmParams,
    name: *const c_char,
    shape: *const usize,
    rank: usize,
    data: *const f32,
) -> SmStatus {
    guard(|| {
        let ps = out_arg(params, "params")?;
        let tensor = make_tensor(name, shape, rank, data)?;
        let mut tensors = ps.0.tensors().to_vec();
        tensors.push(tensor);
        ps.0 = ParameterSet::new(tensors)?;
        Ok(())
    })
}

unsafe fn make_tensor(
    name: *const c_char,
    shape: *const usize,
    rank: usize,
    data: *const f32,
) -> FfiResult<tensor_store::Tensor> {
    let name = str_arg(name, "name")?;
    if shape.is_null() && rank > 0 {
        return Err(Failure::null("shape"));
    }
    let shape = if rank == 0 { &[][..] } else { std::slice::from_raw_parts(shape, rank) };
    let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let len = len.ok_or_else(|| Failure(SmStatus::InvalidArgument, "shape overflows".into()))?;
    if data.is_null() && len > 0 {
        return Err(Failure::null("data"));
    }
    let data = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(data, len).to_vec() };
    Ok(tensor_store::Tensor::new(name, shape.to_vec(), data)?)
}

/// Reads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_params_load(path: *const c_char, out: *mut *mut SmParams) -> SmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (ps, _) = tensor_store::load(str_arg(path, "path")?)?;
        *out = boxed_params(ps);
        Ok(())
    })
}

/// Writes a checkpoint file with empty metadata.
///
/// # Safety
/// `params` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sm_params_save(params: *const SmParams, path: *const c_char) -> SmStatus {
    guard(|| {
        let ps = ref_arg(params, "params")?;
        tensor_store::save(&ps.0, &Metadata::new(), str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Releases a parameter set. Null is ignored.
///
/// # Safety
/// `params` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sm_params_free(params: *mut SmParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Number of tensors, or 0 for null.
///
/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_params_num_tensors(params: *const SmParams) -> usize {
    params.as_ref().map_or(0, |p| p.0.len())
}

/// Total scalar count, or 0 for null.
///
/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_params_num_params(params: *const SmParams) -> usize {
    params.as_ref().map_or(0, |p| p.0.num_params())
}

/// Name of tensor `index` as a new string.
///
/// # Safety
/// `params` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_params_tensor_name(
    params: *const SmParams,
    index: usize,
    out: *mut *mut c_char,
) -> SmStatus {
    guard(|| {
        let ps = ref_arg(params, "params")?;
        let out = out_arg(out, "out")?;
        let t = ps.0.tensors().get(index).ok_or_else(|| {
            Failure(SmStatus::InvalidArgument, format!("tensor index {index} out of range"))
        })?;
        *out = c_string(t.name().to_string());
        Ok(())
    })
}

/// Borrows the data of the named tensor. The pointer stays valid while the
/// handle lives and is not modified.
///
/// # Safety
/// `params` must be a live handle; `name` NUL-terminated; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn sm_params_tensor_data(
    params: *const SmParams,
    name: *const c_char,
    out_data: *mut *const f32,
    out_len: *mut usize,
) -> SmStatus {
    guard(|| {
        let ps = ref_arg(params, "params")?;
        let name = str_arg(name, "name")?;
        let out_data = out_arg(out_data, "out_data")?;
        let out_len = out_arg(out_len, "out_len")?;
        let t = ps
            .0
            .get(name)
            .ok_or_else(|| Failure(SmStatus::Schema, format!("no tensor named {name:?}")))?;
        *out_data = t.data().as_ptr();
        *out_len = t.len();
        Ok(())
    })
}

/// `a·x + b·y` elementwise.
///
/// # Safety
/// `x`, `y` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_params_lincomb(
    a: f64,
    x: *const SmParams,
    b: f64,
    y: *const SmParams,
    out: *mut *mut SmParams,
) -> SmStatus {
    guard(|| {
        let x = ref_arg(x, "x")?;
        let y = ref_arg(y, "y")?;
        let out = out_arg(out, "out")?;
        *out = boxed_params(tensor_store::lincomb(a, &x.0, b, &y.0)?);
        Ok(())
    })
}

/// Elementwise mean of `n` parameter sets.
///
/// # Safety
/// `pool` must point to `n` live handles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_params_mean(pool: *const *const SmParams, n: usize, out: *mut *mut SmParams) -> SmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let members = handles(pool, n, "pool")?;
        let refs: Vec<&ParameterSet> = members.iter().map(|p| &p.0).collect();
        *out = boxed_params(tensor_store::mean(&refs)?);
        Ok(())
    })
}

unsafe fn handles<'a>(pool: *const *const SmParams, n: usize, what: &str) -> FfiResult<Vec<&'a SmParams>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if pool.is_null() {
        return Err(Failure::null(what));
    }
    std::slice::from_raw_parts(pool, n)
        .iter()
        .enumerate()
        .map(|(i, p)| ref_arg(*p, &format!("{what}[{i}]")))
        .collect()
}

// ---------------------------------------------------------------------------
// Partitions

/// Parses a partition from its JSON text.
///
/// # Safety
/// `json` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_partition_from_json(json: *const c_char, out: *mut *mut SmPartition) -> SmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec: PartitionSpec = serde_json::from_str(str_arg(json, "json")?)
            .map_err(|e| Failure(SmStatus::Partition, format!("partition json: {e}")))?;
        *out = Box::into_raw(Box::new(SmPartition(spec)));
        Ok(())
    })
}

/// Reads a partition JSON file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_partition_load(path: *const c_char, out: *mut *mut SmPartition) -> SmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = PartitionSpec::from_json_file(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(SmPartition(spec)));
        Ok(())
    })
}

/// Derives an `m`-component partition from the schema of `params`.
/// `strategy` is `"contiguous-blocks"` or `"by-name-prefix"`.
///
/// # Safety
/// `params` must be a live handle, `strategy` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_partition_auto(
    params: *const SmParams,
    m: usize,
    strategy: *const c_char,
    out: *mut *mut SmPartition,
) -> SmStatus {
    guard(|| {
        let ps = ref_arg(params, "params")?;
        let out = out_arg(out, "out")?;
        let strategy = str_arg(strategy, "strategy")?.parse()?;
        let spec = partition::auto_partition(&ps.0.names(), m, strategy)?;
        *out = Box::into_raw(Box::new(SmPartition(spec)));
        Ok(())
    })
}

/// Number of components, or 0 for null.
///
/// # Safety
/// `spec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_partition_num_components(spec: *const SmPartition) -> usize {
    spec.as_ref().map_or(0, |s| s.0.m)
}

/// Serializes a partition to a new JSON string.
///
/// # Safety
/// `spec` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_partition_to_json(spec: *const SmPartition, out: *mut *mut c_char) -> SmStatus {
    guard(|| {
        let spec = ref_arg(spec, "spec")?;
        let out = out_arg(out, "out")?;
        *out = c_string(spec.0.to_json_string());
        Ok(())
    })
}

/// Releases a partition. Null is ignored.
///
/// # Safety
/// `spec` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sm_partition_free(spec: *mut SmPartition) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Component-wise convex combination `λ_j·psi + (1 − λ_j)·theta`.
/// `lambda` has one entry per component, each in [0, 1].
///
/// # Safety
/// Handles must be live, `lambda` must hold `m` values, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_mix_components(
    psi: *const SmParams,
    theta: *const SmParams,
    spec: *const SmPartition,
    lambda: *const f64,
    m: usize,
    out: *mut *mut SmParams,
) -> SmStatus {
    guard(|| {
        let psi = ref_arg(psi, "psi")?;
        let theta = ref_arg(theta, "theta")?;
        let spec = ref_arg(spec, "spec")?;
        let out = out_arg(out, "out")?;
        if lambda.is_null() && m > 0 {
            return Err(Failure::null("lambda"));
        }
        let values = if m == 0 { Vec::new() } else { std::slice::from_raw_parts(lambda, m).to_vec() };
        let mixed = partition::mix_components(&psi.0, &theta.0, &spec.0, &MixingVector::new(values)?)?;
        *out = boxed_params(mixed);
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Soups

/// Options for [`sm_manifold_soup`]. Fill with [`sm_manifold_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SmManifoldOptions {
    /// Gate tolerance in [0, 1].
    pub tau: f64,
    /// Objective evaluations per optimizer call.
    pub budget: usize,
    pub seed: u64,
    /// 0 for COBYLA, 1 for Nelder-Mead.
    pub solver: c_int,
}

#[no_mangle]
pub extern "C" fn sm_manifold_options_default() -> SmManifoldOptions {
    let d = ManifoldConfig::default();
    SmManifoldOptions {
        tau: d.tau,
        budget: d.budget,
        seed: d.seed,
        solver: 0,
    }
}

struct CallbackEvaluator {
    f: unsafe extern "C" fn(*mut c_void, *const SmParams, *mut f64) -> c_int,
    user_data: *mut c_void,
}

impl soups::Evaluator for CallbackEvaluator {
    fn accuracy(&self, params: &ParameterSet) -> Result<f64, EvalError> {
        // the callback gets a temporary handle over a copy
        let handle = SmParams(params.clone());
        let mut acc = f64::NAN;
        let rc = unsafe { (self.f)(self.user_data, &handle, &mut acc) };
        if rc != 0 {
            return Err(EvalError::Failed(format!("evaluator callback returned {rc}")));
        }
        Ok(acc)
    }

    fn dataset_id(&self) -> &str {
        "c-callback"
    }
}

fn pool_from(members: &[&SmParams], ids: Option<Vec<&str>>) -> FfiResult<ModelPool> {
    let members = members
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let id = ids.as_ref().map_or_else(|| format!("model-{i}"), |ids| ids[i].to_string());
            PoolMember::new(id, p.0.clone(), None)
        })
        .collect();
    Ok(ModelPool::new(members)?)
}

unsafe fn ids_arg<'a>(ids: *const *const c_char, n: usize) -> FfiResult<Option<Vec<&'a str>>> {
    if ids.is_null() {
        return Ok(None);
    }
    std::slice::from_raw_parts(ids, n)
        .iter()
        .enumerate()
        .map(|(i, p)| str_arg(*p, &format!("ids[{i}]")))
        .collect::<FfiResult<Vec<_>>>()
        .map(Some)
}

/// Manifold mixing soup over `n` models. Accuracies come from `evaluate`,
/// which is called with `user_data` on the calling thread. `ids` may be
/// null, in which case models are named `model-<i>`. On success `out_params`
/// receives the fused model and `out_report` (if non-null) the JSON trace.
/// On failure after the run started, `out_report` receives the partial trace
/// when one exists.
///
/// # Safety
/// `members` must hold `n` live handles, `ids` null or `n` strings, `spec`
/// a live handle; output pointers writable.
#[no_mangle]
pub unsafe extern "C" fn sm_manifold_soup(
    members: *const *const SmParams,
    ids: *const *const c_char,
    n: usize,
    spec: *const SmPartition,
    evaluate: SmEvaluateFn,
    user_data: *mut c_void,
    options: *const SmManifoldOptions,
    out_params: *mut *mut SmParams,
    out_report: *mut *mut c_char,
) -> SmStatus {
    guard(|| {
        let members = handles(members, n, "members")?;
        let ids = ids_arg(ids, n)?;
        let spec = ref_arg(spec, "spec")?;
        let f = evaluate.ok_or_else(|| Failure::null("evaluate"))?;
        let out_params = out_arg(out_params, "out_params")?;
        let opts = match options.as_ref() {
            Some(o) => *o,
            None => sm_manifold_options_default(),
        };
        let solver = match opts.solver {
            0 => Solver::Cobyla,
            1 => Solver::NelderMead,
            s => return Err(Failure(SmStatus::InvalidArgument, format!("unknown solver {s}"))),
        };
        let config = ManifoldConfig {
            tau: opts.tau,
            budget: opts.budget,
            seed: opts.seed,
            solver,
        };
        let pool = pool_from(&members, ids)?;
        let eval = CallbackEvaluator { f, user_data };
        match soups::manifold_mix_soup(pool, &spec.0, &eval, &config) {
            Ok((fused, report)) => {
                *out_params = boxed_params(fused);
                if let Some(r) = out_report.as_mut() {
                    *r = c_string(report.to_json());
                }
                Ok(())
            }
            Err(failure) => {
                if let (Some(r), Some(partial)) = (out_report.as_mut(), failure.partial) {
                    *r = c_string(partial.to_json());
                }
                Err(failure.error.into())
            }
        }
    })
}

/// Greedy soup over `n` models; same conventions as [`sm_manifold_soup`].
///
/// # Safety
/// As for [`sm_manifold_soup`].
#[no_mangle]
pub unsafe extern "C" fn sm_greedy_soup(
    members: *const *const SmParams,
    ids: *const *const c_char,
    n: usize,
    evaluate: SmEvaluateFn,
    user_data: *mut c_void,
    out_params: *mut *mut SmParams,
    out_report: *mut *mut c_char,
) -> SmStatus {
    guard(|| {
        let members = handles(members, n, "members")?;
        let ids = ids_arg(ids, n)?;
        let f = evaluate.ok_or_else(|| Failure::null("evaluate"))?;
        let out_params = out_arg(out_params, "out_params")?;
        let pool = pool_from(&members, ids)?;
        let eval = CallbackEvaluator { f, user_data };
        let (fused, report) = soups::greedy_soup(pool, &eval).map_err(|e| Failure::from(e.error))?;
        *out_params = boxed_params(fused);
        if let Some(r) = out_report.as_mut() {
            *r = c_string(report.to_json());
        }
        Ok(())
    })
}
