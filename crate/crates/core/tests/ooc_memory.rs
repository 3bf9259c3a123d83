//! Peak heap use of the out-of-core routines stays near one chunk plus the
//! output, whatever the number of rows.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use rlslab::bigarray::{ooc_gram, ooc_matmul, ooc_xty, train_primal_ooc, BigArray, MemoryBudget};
use rlslab::Mat;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = f();
    (out, PEAK.load(Ordering::SeqCst) - base)
}

fn write_rows(path: &std::path::Path, rows: usize, cols: usize, chunk_rows: usize, salt: f64) -> BigArray {
    let ba = BigArray::create(path, rows, cols, chunk_rows).unwrap();
    for i in 0..ba.n_chunks() {
        let (start, len) = ba.chunk_span(i);
        let m = Mat::from_fn(len, cols, |r, c| (((start + r) * 31 + c * 7) as f64 * salt).sin());
        ba.write_chunk(i, &m).unwrap();
    }
    drop(ba);
    BigArray::open(path).unwrap()
}

// One test function so the global counters are not shared between threads.
#[test]
fn heap_use_is_bounded_by_the_chunk_not_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, cols, t, chunk) = (200_000, 16, 2, 1000);
    let full_bytes = rows * cols * 8;
    let x = write_rows(&dir.path().join("x.gba"), rows, cols, chunk, 0.37);
    let y = write_rows(&dir.path().join("y.gba"), rows, t, chunk, 1.13);
    let chunk_bytes = chunk * cols * 8;
    let limit = 4 * chunk_bytes + 64 * 1024;
    let budget = MemoryBudget::default();

    let (g, peak) = peak_during(|| ooc_gram(&x, budget).unwrap());
    assert_eq!(g.shape(), (cols, cols));
    assert!(peak < limit, "gram peak {peak} vs limit {limit}, file {full_bytes}");

    let (r, peak) = peak_during(|| ooc_xty(&x, &y, budget).unwrap());
    assert_eq!(r.shape(), (cols, t));
    assert!(peak < limit, "xty peak {peak} vs limit {limit}");

    let (_, peak) = peak_during(|| train_primal_ooc(&x, &y, 1e-3, budget).unwrap());
    assert!(peak < limit, "train peak {peak} vs limit {limit}");

    let b = Mat::from_fn(cols, t, |i, j| (i + j) as f64);
    let out = BigArray::create(dir.path().join("o.gba"), rows, t, chunk).unwrap();
    let (_, peak) = peak_during(|| ooc_matmul(&x, &b, &out, 1).unwrap());
    assert!(peak < limit, "matmul peak {peak} vs limit {limit}");
}
