//! Optional system-BLAS backend for the GEMM entry point.
//!
//! The crate links against no BLAS at build time. On the first GEMM call it
//! attempts to `dlopen` the system OpenBLAS and resolve `cblas_dgemm`; when
//! that fails, callers keep the bundled pure-Rust kernel, so the library
//! works unchanged on machines without OpenBLAS installed.
//!
//! Loading at runtime rather than link time also sidesteps a real
//! performance trap: OpenBLAS picks its compute kernels from CPUID — or from
//! the `OPENBLAS_CORETYPE` environment variable — when the library
//! initializes. Virtual machines that mask the processor brand string defeat
//! that detection and OpenBLAS silently falls back to generic Pentium-4-era
//! kernels, several times slower than the hardware allows. The pre-main
//! constructor below pins `OPENBLAS_CORETYPE` to match the instruction sets
//! that are actually available, which can only work if the library
//! initializes *after* the constructor runs — hence dlopen instead of a
//! link-time dependency.
//!
//! Determinism: the loader forces single-threaded OpenBLAS, so reductions
//! run in one fixed order and repeated runs on one machine stay
//! bit-identical. The bundled kernel and the system one round differently,
//! so results may differ across machines at the level of f64 rounding; every
//! numeric test in the crate budgets for that.

use std::ffi::c_void;
use std::sync::OnceLock;

/// `cblas_dgemm(layout, transa, transb, m, n, k, alpha, a, lda, b, ldb,
/// beta, c, ldc)`.
type CblasDgemm = unsafe extern "C" fn(
    i32,
    i32,
    i32,
    i32,
    i32,
    i32,
    f64,
    *const f64,
    i32,
    *const f64,
    i32,
    f64,
    *mut f64,
    i32,
);

const CBLAS_ROW_MAJOR: i32 = 101;
const CBLAS_NO_TRANS: i32 = 111;
const CBLAS_TRANS: i32 = 112;

/// Pre-main constructor: pin the OpenBLAS kernel family and thread count
/// before any code can load the library. This runs while the process is
/// still single-threaded, so mutating the environment is safe; `overwrite`
/// is 0 throughout, so explicit user settings always win.
#[used]
#[link_section = ".init_array"]
static ENV_INIT: extern "C" fn() = {
    extern "C" fn init() {
        let family = if std::arch::is_x86_feature_detected!("avx512f")
            && std::arch::is_x86_feature_detected!("avx512dq")
            && std::arch::is_x86_feature_detected!("avx512bw")
            && std::arch::is_x86_feature_detected!("avx512vl")
        {
            Some(c"SKYLAKEX")
        } else if std::arch::is_x86_feature_detected!("avx2")
            && std::arch::is_x86_feature_detected!("fma")
        {
            Some(c"HASWELL")
        } else {
            // Older hardware: OpenBLAS's own detection has nothing to gain
            // from a hint, so leave it alone.
            None
        };
        unsafe {
            if let Some(family) = family {
                libc::setenv(c"OPENBLAS_CORETYPE".as_ptr(), family.as_ptr(), 0);
            }
            libc::setenv(c"OPENBLAS_NUM_THREADS".as_ptr(), c"1".as_ptr(), 0);
        }
        // Activation buffers run 4–17 MB and are allocated and freed once
        // per network pass. glibc serves blocks that large straight from
        // mmap by default, so every pass would fault its pages in from
        // scratch; raising the thresholds keeps the blocks on the heap
        // free lists instead.
        #[cfg(target_env = "gnu")]
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 128 << 20);
        }
    }
    init
};

/// Loads the system OpenBLAS and resolves `cblas_dgemm`, or `None` when the
/// library is absent or incomplete.
fn load() -> Option<CblasDgemm> {
    // Rlibs link archive-selectively: an object file nothing references gets
    // dropped, constructors included. Naming `ENV_INIT` from reachable code
    // keeps its object alive; the call itself already happened before main.
    let _: extern "C" fn() = ENV_INIT;
    unsafe {
        let mut handle = libc::dlopen(
            c"libopenblas.so.0".as_ptr(),
            libc::RTLD_NOW | libc::RTLD_LOCAL,
        );
        if handle.is_null() {
            handle = libc::dlopen(c"libopenblas.so".as_ptr(), libc::RTLD_NOW | libc::RTLD_LOCAL);
        }
        if handle.is_null() {
            return None;
        }
        // Belt and braces next to the environment pin: force one thread even
        // if the library initialized with a different default.
        let set_threads = libc::dlsym(handle, c"openblas_set_num_threads".as_ptr());
        if !set_threads.is_null() {
            std::mem::transmute::<*mut c_void, unsafe extern "C" fn(i32)>(set_threads)(1);
        }
        let sym = libc::dlsym(handle, c"cblas_dgemm".as_ptr());
        if sym.is_null() {
            // No dgemm, no use for the handle — but `dlclose` would tear the
            // thread-count call back down with it, so just report failure.
            return None;
        }
        // The handle is never closed: the resolved pointer must stay valid
        // for the life of the process.
        Some(std::mem::transmute::<*mut c_void, CblasDgemm>(sym))
    }
}

fn dgemm_ptr() -> Option<CblasDgemm> {
    static DGEMM: OnceLock<Option<CblasDgemm>> = OnceLock::new();
    *DGEMM.get_or_init(load)
}

/// Row-major `C[m×n] = A[m×k]·B[k×n]` through the system BLAS.
///
/// Returns `false` without touching `c` when the library is unavailable or
/// the strides do not describe a CBLAS-expressible operand, in which case
/// the caller falls back to the bundled kernel. The stride mapping: a unit
/// column stride means the buffer is the matrix itself (`NoTrans`, leading
/// dimension = row stride); a unit row stride means the buffer holds its
/// transpose (`Trans`, leading dimension = column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) -> bool {
    let Some(f) = dgemm_ptr() else {
        return false;
    };
    if m == 0 || n == 0 || k == 0 {
        return false;
    }
    // CBLAS validates leading dimensions against the *stored* shape and
    // aborts the process on a mismatch, so check the same bounds here and
    // decline instead.
    let (ta, lda, a_min_ld) = if csa == 1 {
        (CBLAS_NO_TRANS, rsa, k)
    } else if rsa == 1 {
        (CBLAS_TRANS, csa, m)
    } else {
        return false;
    };
    let (tb, ldb, b_min_ld) = if csb == 1 {
        (CBLAS_NO_TRANS, rsb, n)
    } else if rsb == 1 {
        (CBLAS_TRANS, csb, k)
    } else {
        return false;
    };
    if lda < a_min_ld as isize || ldb < b_min_ld as isize {
        return false;
    }
    let fits = |v: usize| i32::try_from(v).is_ok();
    if !fits(m) || !fits(n) || !fits(k) || !fits(lda as usize) || !fits(ldb as usize) {
        return false;
    }
    unsafe {
        f(
            CBLAS_ROW_MAJOR,
            ta,
            tb,
            m as i32,
            n as i32,
            k as i32,
            1.0,
            a.as_ptr(),
            lda as i32,
            b.as_ptr(),
            ldb as i32,
            0.0,
            c.as_mut_ptr(),
            n as i32,
        );
    }
    true
}
