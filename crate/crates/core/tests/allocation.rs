//! Peak heap use of the dynamic layer, measured with a counting allocator.
//! Kept in its own test binary so no other test allocates concurrently.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use dppnet::dynamic::{dyn_backward, dyn_forward};
use dppnet::hashing::HashSpec;
use dppnet::tensor::Tensor;

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let ptr = unsafe { System.alloc(layout) };
        if !ptr.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        ptr
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Extra bytes held at peak by one forward and one backward pass.
fn peak_bytes(m: usize, n: usize, k: usize) -> usize {
    let spec = HashSpec::with_default_seeds(m, n, k).unwrap();
    let f = Tensor::from_vec((0..n).map(|i| (i as f64).sin()).collect());
    let p = Tensor::from_vec((0..k).map(|i| (i as f64).cos()).collect());
    let d = Tensor::from_vec(vec![0.5; m]);
    let bias = vec![0.0; m];
    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let y = dyn_forward(&f, &p, &spec, &bias).unwrap();
    let g = dyn_backward(&f, &p, &d, &spec).unwrap();
    let peak = PEAK.load(Ordering::SeqCst) - base;
    assert_eq!(y.len(), m);
    assert_eq!(g.d_p.len(), k);
    peak
}

#[test]
fn dynamic_layer_memory_scales_with_k_m_n_not_m_times_n() {
    let word = std::mem::size_of::<f64>();
    for (m, n, k) in [(256, 256, 100), (512, 512, 100), (2048, 1024, 1000)] {
        let peak = peak_bytes(m, n, k);
        let linear = word * (k + m + n);
        assert!(peak <= 4 * linear + 4096, "M={m} N={n} K={k}: peak {peak} B, linear budget {linear} B");
        assert!(peak * 16 < word * m * n, "M={m} N={n}: peak {peak} B is not far below a dense matrix");
    }
}
