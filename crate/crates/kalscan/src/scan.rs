//! Generic associative scan (all prefix combinations) with pluggable
//! combine operator, direction, and execution strategy.
//!
//! The parallel strategy is a chunked two-pass scan: each chunk computes its
//! local inclusive scan, the per-chunk totals are scanned sequentially into
//! carries, and a second parallel pass pre-combines each chunk with the carry
//! covering everything before it. No identity element is required; chunks are
//! seeded with their own first element.
//!
//! For a fixed `(chunk_size, workers)` the reassociation pattern is fixed, so
//! repeated runs produce bit-identical output. Different chunk sizes may
//! reassociate differently and are only equal up to floating-point tolerance.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, Mutex, OnceLock};

use thiserror::Error;

/// Scan direction: prefix combinations or suffix combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Execution strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Sequential,
    ChunkedParallel,
}

/// Execution plan for [`scan`].
#[derive(Debug, Clone)]
pub struct ScanPlan {
    pub direction: Direction,
    pub strategy: Strategy,
    pub chunk_size: usize,
    pub workers: usize,
}

pub const DEFAULT_CHUNK_SIZE: usize = 1024;

impl ScanPlan {
    pub fn sequential() -> Self {
        Self {
            direction: Direction::Forward,
            strategy: Strategy::Sequential,
            chunk_size: DEFAULT_CHUNK_SIZE,
            workers: 1,
        }
    }

    pub fn parallel(workers: usize) -> Self {
        Self {
            direction: Direction::Forward,
            strategy: Strategy::ChunkedParallel,
            chunk_size: DEFAULT_CHUNK_SIZE,
            workers,
        }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size;
        self
    }

    fn check(&self) -> Result<(), ScanError> {
        if self.chunk_size == 0 {
            return Err(ScanError::InvalidPlan("chunk_size must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(ScanError::InvalidPlan("workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Number of workers to use when the caller does not say: available cores.
pub fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Failure reported by a combine operator, e.g. a non-finite intermediate.
#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct CombineError(pub String);

/// Errors from the scan engine. `Combine` names the half-open element ranges
/// being merged when the operator failed, in the original input orientation.
#[derive(Debug, Error)]
pub enum ScanError {
    #[error("scan over empty input")]
    EmptyInput,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("combine failed merging elements [{}, {}) with [{}, {}): {source}", left.start, left.end, right.start, right.end)]
    Combine {
        left: Range<usize>,
        right: Range<usize>,
        source: CombineError,
    },
    #[error("combine failed on associativity trial {trial}: {source}")]
    Associativity { trial: usize, source: CombineError },
}

/// Runs an inclusive scan of `combine` over `elements` under `plan`.
///
/// `output[t] = e_0 ⊗ e_1 ⊗ … ⊗ e_t` for `Direction::Forward`, and the suffix
/// combination `e_t ⊗ … ⊗ e_{n-1}` for `Direction::Reverse`. `combine` must be
/// associative; results across strategies and chunkings agree only up to
/// floating-point reassociation. The operator is invoked only on provided
/// elements and intermediate results, never on fabricated identities.
pub fn scan<E, F>(elements: &[E], combine: F, plan: &ScanPlan) -> Result<Vec<E>, ScanError>
where
    E: Clone + Send + Sync,
    F: Fn(&E, &E) -> Result<E, CombineError> + Send + Sync,
{
    plan.check()?;
    if elements.is_empty() {
        return Err(ScanError::EmptyInput);
    }
    match plan.direction {
        Direction::Forward => scan_forward(elements, &combine, plan),
        Direction::Reverse => {
            let n = elements.len();
            let reversed: Vec<E> = elements.iter().rev().cloned().collect();
            let flipped = |x: &E, y: &E| combine(y, x);
            let mut out = scan_forward(&reversed, &flipped, plan)
                .map_err(|e| reflect_error(e, n))?;
            out.reverse();
            Ok(out)
        }
    }
}

/// Maps element ranges reported against the reversed input back to the
/// original orientation.
fn reflect_error(err: ScanError, n: usize) -> ScanError {
    match err {
        ScanError::Combine {
            left,
            right,
            source,
        } => ScanError::Combine {
            left: n - right.end..n - right.start,
            right: n - left.end..n - left.start,
            source,
        },
        other => other,
    }
}

fn scan_forward<E, F>(elements: &[E], combine: &F, plan: &ScanPlan) -> Result<Vec<E>, ScanError>
where
    E: Clone + Send + Sync,
    F: Fn(&E, &E) -> Result<E, CombineError> + Send + Sync,
{
    match plan.strategy {
        Strategy::Sequential => sequential_scan(elements, combine, 0),
        Strategy::ChunkedParallel => chunked_scan(elements, combine, plan),
    }
}

/// Left fold collecting every prefix. `base` is the global index of
/// `elements[0]`, used only for error reporting.
fn sequential_scan<E, F>(elements: &[E], combine: &F, base: usize) -> Result<Vec<E>, ScanError>
where
    E: Clone,
    F: Fn(&E, &E) -> Result<E, CombineError>,
{
    let mut out = Vec::with_capacity(elements.len());
    let mut acc = elements[0].clone();
    out.push(acc.clone());
    for (i, e) in elements.iter().enumerate().skip(1) {
        acc = combine(&acc, e).map_err(|source| ScanError::Combine {
            left: base..base + i,
            right: base + i..base + i + 1,
            source,
        })?;
        out.push(acc.clone());
    }
    Ok(out)
}

fn chunked_scan<E, F>(elements: &[E], combine: &F, plan: &ScanPlan) -> Result<Vec<E>, ScanError>
where
    E: Clone + Send + Sync,
    F: Fn(&E, &E) -> Result<E, CombineError> + Send + Sync,
{
    let n = elements.len();
    let chunk = plan.chunk_size;
    if plan.workers == 1 || n <= chunk {
        // Same reassociation pattern as the threaded path, minus the pool.
        return chunked_scan_serial(elements, combine, chunk);
    }

    let pool = pool_for(plan.workers);

    // Pass 1: local inclusive scan per chunk.
    let locals: Vec<Vec<E>> = pool.install(|| {
        use rayon::prelude::*;
        elements
            .par_chunks(chunk)
            .enumerate()
            .map(|(c, slice)| sequential_scan(slice, combine, c * chunk))
            .collect::<Result<_, _>>()
    })?;

    // Scan of chunk totals: carries[c] combines everything before chunk c+1.
    let carries = scan_carries(&locals, combine, chunk)?;

    // Pass 2: broadcast fix-up.
    let fixed: Vec<Vec<E>> = pool.install(|| {
        use rayon::prelude::*;
        locals
            .into_par_iter()
            .enumerate()
            .map(|(c, local)| fix_chunk(c, local, &carries, combine, chunk))
            .collect::<Result<_, _>>()
    })?;

    Ok(fixed.into_iter().flatten().collect())
}

fn chunked_scan_serial<E, F>(elements: &[E], combine: &F, chunk: usize) -> Result<Vec<E>, ScanError>
where
    E: Clone,
    F: Fn(&E, &E) -> Result<E, CombineError>,
{
    let locals: Vec<Vec<E>> = elements
        .chunks(chunk)
        .enumerate()
        .map(|(c, slice)| sequential_scan(slice, combine, c * chunk))
        .collect::<Result<_, _>>()?;
    let carries = scan_carries(&locals, combine, chunk)?;
    let fixed: Vec<Vec<E>> = locals
        .into_iter()
        .enumerate()
        .map(|(c, local)| fix_chunk(c, local, &carries, combine, chunk))
        .collect::<Result<_, _>>()?;
    Ok(fixed.into_iter().flatten().collect())
}

/// `carries[c] = total_0 ⊗ … ⊗ total_c`; the final chunk's total is never a
/// carry, so `carries.len() == locals.len() - 1`.
fn scan_carries<E, F>(locals: &[Vec<E>], combine: &F, chunk: usize) -> Result<Vec<E>, ScanError>
where
    E: Clone,
    F: Fn(&E, &E) -> Result<E, CombineError>,
{
    let n_carries = locals.len().saturating_sub(1);
    let mut carries: Vec<E> = Vec::with_capacity(n_carries);
    for (c, local) in locals.iter().take(n_carries).enumerate() {
        let total = local.last().expect("chunks are non-empty");
        let next = match carries.last() {
            None => total.clone(),
            Some(prev) => combine(prev, total).map_err(|source| ScanError::Combine {
                left: 0..c * chunk,
                right: c * chunk..c * chunk + local.len(),
                source,
            })?,
        };
        carries.push(next);
    }
    Ok(carries)
}

fn fix_chunk<E, F>(
    c: usize,
    local: Vec<E>,
    carries: &[E],
    combine: &F,
    chunk: usize,
) -> Result<Vec<E>, ScanError>
where
    E: Clone,
    F: Fn(&E, &E) -> Result<E, CombineError>,
{
    if c == 0 {
        return Ok(local);
    }
    let carry = &carries[c - 1];
    let start = c * chunk;
    local
        .iter()
        .enumerate()
        .map(|(i, x)| {
            combine(carry, x).map_err(|source| ScanError::Combine {
                left: 0..start,
                right: start..start + i + 1,
                source,
            })
        })
        .collect()
}

/// Maps `f` over `items` in index order, splitting the work across `workers`
/// threads. Results keep their input order.
pub fn par_map<T, U, F>(items: &[T], workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Send + Sync,
{
    if workers <= 1 || items.len() < 2 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let pool = pool_for(workers);
    pool.install(|| {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    })
}

/// Thread pools are cached per worker count; building one per call would
/// dominate the runtime of small scans.
fn pool_for(workers: usize) -> Arc<rayon::ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let pools = POOLS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = pools.lock().expect("pool registry poisoned");
    guard
        .entry(workers)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("failed to build thread pool"),
            )
        })
        .clone()
}

/// Outcome of an associativity spot-check.
#[derive(Debug, Clone)]
pub struct AssociativityReport {
    pub trials: usize,
    pub tol: f64,
    pub max_violation: f64,
    /// Trial index of the worst violation, if any trial ran.
    pub worst_trial: Option<usize>,
}

impl AssociativityReport {
    pub fn passed(&self) -> bool {
        self.max_violation <= self.tol
    }
}

/// Samples `trials` random triples and compares `(a ⊗ b) ⊗ c` against
/// `a ⊗ (b ⊗ c)` under `diff` (a per-component max-abs distance supplied by
/// the caller).
pub fn check_associativity<E, F, S, D>(
    combine: F,
    mut sampler: S,
    diff: D,
    trials: usize,
    tol: f64,
) -> Result<AssociativityReport, ScanError>
where
    F: Fn(&E, &E) -> Result<E, CombineError>,
    S: FnMut() -> E,
    D: Fn(&E, &E) -> f64,
{
    let mut max_violation = 0.0_f64;
    let mut worst_trial = None;
    for trial in 0..trials {
        let a = sampler();
        let b = sampler();
        let c = sampler();
        let err = |source| ScanError::Associativity { trial, source };
        let left = combine(&combine(&a, &b).map_err(err)?, &c).map_err(err)?;
        let right = combine(&a, &combine(&b, &c).map_err(err)?).map_err(err)?;
        let violation = diff(&left, &right);
        if violation > max_violation || worst_trial.is_none() {
            max_violation = violation;
            worst_trial = Some(trial);
        }
    }
    Ok(AssociativityReport {
        trials,
        tol,
        max_violation,
        worst_trial,
    })
}
