//! Matrix-multiply kernel behind every contraction, plus the multiply-add
//! counter and the intra-op thread setting.
//!
//! Accumulation runs in `f64`; the result is rounded to `f32` once per output
//! element. Each output tile is owned by exactly one worker and summed in a
//! fixed order, so results do not depend on the thread count.

use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

const TILE_N: usize = 256;
const TILE_K: usize = 256;
const ROWS: usize = 4;
/// Upper bound on the f64 accumulator tile (entries).
const ACC_BUDGET: usize = 1 << 22;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
    static PRODUCTS: Cell<u64> = const { Cell::new(0) };
}

/// Snapshot of the per-thread operation counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Multiply-adds performed by contractions over at least one paired axis.
    pub macs: u64,
    /// Plain products performed by outer products (no paired axes).
    pub products: u64,
}

pub fn reset_counters() {
    MACS.with(|c| c.set(0));
    PRODUCTS.with(|c| c.set(0));
}

pub fn counters() -> OpCounts {
    OpCounts {
        macs: MACS.with(Cell::get),
        products: PRODUCTS.with(Cell::get),
    }
}

/// Runs `f` and returns the operations it performed on this thread.
pub fn count_ops<T>(f: impl FnOnce() -> T) -> (T, OpCounts) {
    let before = counters();
    let out = f();
    let after = counters();
    (
        out,
        OpCounts {
            macs: after.macs - before.macs,
            products: after.products - before.products,
        },
    )
}

static THREADS: AtomicUsize = AtomicUsize::new(1);
static POOL: OnceLock<(usize, rayon::ThreadPool)> = OnceLock::new();

/// Sets the number of workers used inside a single contraction.
/// The first value above 1 fixes the pool size for the process.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    let n = threads();
    if n <= 1 {
        return None;
    }
    let (_, pool) = POOL.get_or_init(|| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool");
        (n, pool)
    });
    Some(pool)
}

/// Strided read-only matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// `rows x cols` view over a buffer stored row-major as `cols x rows`.
    pub fn transposed(data: &'a [f32], rows: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: rows,
        }
    }

    #[inline]
    fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.row_stride + c * self.col_stride]
    }
}

/// `out[m x n] = a[m x k] * b[k x n]`, overwriting `out` (row-major).
///
/// `paired` says whether `k` comes from real contracted axes; it only selects
/// which counter is charged.
pub fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, out: &mut [f32], paired: bool) {
    assert_eq!(out.len(), m * n, "gemm output length");
    let total = (m * k * n) as u64;
    if paired {
        MACS.with(|c| c.set(c.get() + total));
    } else {
        PRODUCTS.with(|c| c.set(c.get() + total));
    }

    // the inner loop wants unit column stride on b
    let packed;
    let b = if b.col_stride == 1 || n == 1 {
        b
    } else {
        packed = (0..k)
            .flat_map(|r| (0..n).map(move |c| (r, c)))
            .map(|(r, c)| b.get(r, c))
            .collect::<Vec<f32>>();
        MatRef::row_major(&packed, n)
    };

    let tile_n = TILE_N.min(n).min((ACC_BUDGET / m.max(1)).max(16)).max(1);
    let tiles: Vec<usize> = (0..n).step_by(tile_n).collect();
    // Each tile is returned as rounded f32 rows of width `nb`.
    let compute = |j0: usize| -> Vec<f32> {
        let nb = tile_n.min(n - j0);
        let mut tile = vec![0.0f32; m * nb];
        let accumulate = |acc_rows: &mut [f64], i0: usize, k0: usize, kb: usize| {
            for kk in k0..k0 + kb {
                let start = kk * b.row_stride + j0;
                let brow = &b.data[start..start + nb];
                for (r, acc_row) in acc_rows.chunks_exact_mut(nb).enumerate() {
                    let av = a.get(i0 + r, kk) as f64;
                    if av == 0.0 {
                        continue;
                    }
                    for (c, &bv) in acc_row.iter_mut().zip(brow) {
                        *c += av * bv as f64;
                    }
                }
            }
        };
        if k <= TILE_K {
            // short reductions: keep one row block of accumulators hot
            let mut acc = vec![0.0f64; ROWS * nb];
            for i0 in (0..m).step_by(ROWS) {
                let rows = ROWS.min(m - i0);
                let acc_rows = &mut acc[..rows * nb];
                acc_rows.fill(0.0);
                accumulate(acc_rows, i0, 0, k);
                for (d, &s) in tile[i0 * nb..(i0 + rows) * nb].iter_mut().zip(acc_rows.iter()) {
                    *d = s as f32;
                }
            }
        } else {
            // long reductions: keep a block of b hot across all rows
            let mut acc = vec![0.0f64; m * nb];
            for k0 in (0..k).step_by(TILE_K) {
                let kb = TILE_K.min(k - k0);
                for i0 in (0..m).step_by(ROWS) {
                    let rows = ROWS.min(m - i0);
                    accumulate(&mut acc[i0 * nb..(i0 + rows) * nb], i0, k0, kb);
                }
            }
            for (d, &s) in tile.iter_mut().zip(&acc) {
                *d = s as f32;
            }
        }
        tile
    };
    let write = |out: &mut [f32], j0: usize, tile: &[f32]| {
        let nb = tile_n.min(n - j0);
        for i in 0..m {
            out[i * n + j0..i * n + j0 + nb].copy_from_slice(&tile[i * nb..(i + 1) * nb]);
        }
    };

    match pool() {
        Some(pool) if tiles.len() > 1 => {
            use rayon::prelude::*;
            let done: Vec<Vec<f32>> = pool.install(|| tiles.par_iter().map(|&j0| compute(j0)).collect());
            for (&j0, tile) in tiles.iter().zip(&done) {
                write(out, j0, tile);
            }
        }
        _ => {
            for &j0 in &tiles {
                let tile = compute(j0);
                write(out, j0, &tile);
            }
        }
    }
}
