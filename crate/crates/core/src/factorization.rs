use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::config::TrainConfig;
use crate::data::NormalizedAdjacency;
use crate::error::{Error, Result};
use crate::linalg::{frobenius_distance, truncated_svd, DenseMatrix, SvdResult};
use crate::optim::Adam;
use crate::rng::{seeded, Stream};

/// Gradient-descent factors Ā ≈ P̃Q̃ᵀ with the fit trace that produced them.
#[derive(Clone, Debug)]
pub struct MfFactors {
    /// M×k.
    pub p: DenseMatrix,
    /// N×k.
    pub q: DenseMatrix,
    /// ‖Ā − P̃Q̃ᵀ‖_F at the returned factors.
    pub final_loss: f64,
    pub iterations_run: usize,
    /// ‖Ā − P̃Q̃ᵀ‖_F per iteration; entry 0 is the initial loss.
    pub loss_trace: Vec<f64>,
}

impl MfFactors {
    pub fn rank(&self) -> usize {
        self.p.cols()
    }
}

/// The pair of global-information factorizations a variant may use.
#[derive(Clone, Debug, Default)]
pub struct LowRankFactors {
    pub mf: Option<MfFactors>,
    pub svd: Option<SvdResult>,
}

/// Seeded Gaussian starting factors scaled by 1/√k, so initial P̃Q̃ᵀ
/// entries are O(1). P is drawn first, then Q, both row-major.
pub fn init_mf_factors(m: usize, n: usize, k: usize, seed: u64) -> (DenseMatrix, DenseMatrix) {
    let scale = 1.0 / (k as f64).sqrt();
    let mut rng = seeded(seed, Stream::Mf);
    let mut draw = |rows: usize| {
        DenseMatrix::from_fn(rows, k, |_, _| {
            let g: f64 = rng.sample(StandardNormal);
            g * scale
        })
    };
    let p = draw(m);
    let q = draw(n);
    (p, q)
}

/// Full-gradient Adam descent on ‖Ā − P̃Q̃ᵀ‖²_F from a seeded start.
pub fn mf_factorize(
    adj: &NormalizedAdjacency,
    k: usize,
    max_iters: usize,
    lr: f64,
    tol: f64,
    seed: u64,
) -> Result<MfFactors> {
    if k == 0 {
        return Err(Error::Config("MF rank must be at least 1".into()));
    }
    let (p0, q0) = init_mf_factors(adj.matrix.rows(), adj.matrix.cols(), k, seed);
    mf_factorize_with_init(adj, p0, q0, max_iters, lr, tol)
}

/// Descent from caller-supplied starting factors. Extending a start with
/// zero columns reproduces the lower-rank run exactly (the gradient on an
/// all-zero column pair is identically zero), which is how rank nesting
/// is exercised.
pub fn mf_factorize_with_init(
    adj: &NormalizedAdjacency,
    p0: DenseMatrix,
    q0: DenseMatrix,
    max_iters: usize,
    lr: f64,
    tol: f64,
) -> Result<MfFactors> {
    if max_iters == 0 {
        return Err(Error::Config("MF iteration cap must be at least 1".into()));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("MF learning rate must be positive, got {lr}")));
    }
    if tol < 0.0 || !tol.is_finite() {
        return Err(Error::Config(format!("MF tolerance must be nonnegative, got {tol}")));
    }
    let a = &adj.matrix;
    let k = p0.cols();
    if k == 0 || p0.rows() != a.rows() || q0.rows() != a.cols() || q0.cols() != k {
        return Err(Error::Shape(format!(
            "MF init {}x{} / {}x{} vs adjacency {}x{}",
            p0.rows(),
            p0.cols(),
            q0.rows(),
            q0.cols(),
            a.rows(),
            a.cols()
        )));
    }
    let mut p = p0;
    let mut q = q0;
    let mut adam_p = Adam::new(p.rows(), k);
    let mut adam_q = Adam::new(q.rows(), k);
    let mut loss_trace = Vec::with_capacity(max_iters + 1);
    let mut prev = frobenius_distance(a, &p, &q)?;
    loss_trace.push(prev);
    let mut iterations_run = 0;
    for iter in 1..=max_iters {
        // ∇P = 2(P(QᵀQ) − ĀQ), ∇Q = 2(Q(PᵀP) − ĀᵀP); both evaluated at
        // the pre-update factors, so the update is simultaneous.
        let qtq = q.matmul_tn(&q)?;
        let ptp = p.matmul_tn(&p)?;
        let mut grad_p = p.matmul(&qtq)?;
        grad_p.axpy(-1.0, &a.spmm(&q)?)?;
        grad_p.scale(2.0);
        let mut grad_q = q.matmul(&ptp)?;
        grad_q.axpy(-1.0, &a.spmm_t(&p)?)?;
        grad_q.scale(2.0);
        adam_p.step(&mut p, &grad_p, lr)?;
        adam_q.step(&mut q, &grad_q, lr)?;
        iterations_run = iter;
        let cur = frobenius_distance(a, &p, &q)?;
        if !cur.is_finite() {
            return Err(Error::Numerical(format!(
                "MF loss diverged to {cur} at iteration {iter}; try a smaller learning rate than {lr}"
            )));
        }
        loss_trace.push(cur);
        let improvement = (prev - cur) / prev.max(f64::MIN_POSITIVE);
        prev = cur;
        if improvement >= 0.0 && improvement < tol {
            break;
        }
    }
    Ok(MfFactors {
        p,
        q,
        final_loss: prev,
        iterations_run,
        loss_trace,
    })
}

/// Truncated SVD of the normalized adjacency.
pub fn svd_factorize(
    adj: &NormalizedAdjacency,
    q: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<SvdResult> {
    truncated_svd(&adj.matrix, q, oversample, power_iters, seed)
}

/// Run whichever factorizations the configured variant consumes.
pub fn build_factors(adj: &NormalizedAdjacency, config: &TrainConfig) -> Result<LowRankFactors> {
    let mf = if config.variant.uses_mf() {
        Some(mf_factorize(
            adj,
            config.mf_rank,
            config.mf_iters,
            config.mf_lr,
            config.mf_tol,
            config.seed,
        )?)
    } else {
        None
    };
    let svd = if config.variant.uses_svd() {
        Some(svd_factorize(
            adj,
            config.svd_rank,
            config.svd_oversample,
            config.svd_power_iters,
            config.seed,
        )?)
    } else {
        None
    };
    Ok(LowRankFactors { mf, svd })
}

const FACTOR_MAGIC: &[u8; 8] = b"HMFG-FC1";

#[derive(Serialize, Deserialize)]
struct FactorCacheHeader {
    key: String,
    m: usize,
    n: usize,
    rank: usize,
    final_loss: f64,
    iterations_run: usize,
    trace_len: usize,
}

fn digest_name(prefix: &str, key: &str) -> String {
    use sha2::{Digest, Sha256};
    let digest = hex::encode(Sha256::digest(key.as_bytes()));
    format!("{prefix}-{}.bin", &digest[..16])
}

fn mf_key(dataset_hash: &str, config: &TrainConfig) -> String {
    format!(
        "mf|{dataset_hash}|k={}|T={}|lr={:e}|tol={:e}|seed={}",
        config.mf_rank, config.mf_iters, config.mf_lr, config.mf_tol, config.seed
    )
}

fn svd_key(dataset_hash: &str, config: &TrainConfig) -> String {
    format!(
        "svd|{dataset_hash}|q={}|oversample={}|power={}|seed={}",
        config.svd_rank, config.svd_oversample, config.svd_power_iters, config.seed
    )
}

fn load_mf(path: &Path, key: &str, m: usize, n: usize) -> Option<MfFactors> {
    let (header, mut payload) =
        binfmt::read_block::<FactorCacheHeader>(path, FACTOR_MAGIC).ok()?;
    if header.key != key || header.m != m || header.n != n {
        return None;
    }
    let p = payload.take_f64s(m * header.rank).ok()?;
    let q = payload.take_f64s(n * header.rank).ok()?;
    let trace = payload.take_f64s(header.trace_len).ok()?;
    payload.finish().ok()?;
    Some(MfFactors {
        p: DenseMatrix::from_vec(m, header.rank, p).ok()?,
        q: DenseMatrix::from_vec(n, header.rank, q).ok()?,
        final_loss: header.final_loss,
        iterations_run: header.iterations_run,
        loss_trace: trace,
    })
}

fn store_mf(path: &Path, key: &str, m: usize, n: usize, mf: &MfFactors) -> Result<()> {
    let header = FactorCacheHeader {
        key: key.to_string(),
        m,
        n,
        rank: mf.rank(),
        final_loss: mf.final_loss,
        iterations_run: mf.iterations_run,
        trace_len: mf.loss_trace.len(),
    };
    binfmt::write_block(
        path,
        FACTOR_MAGIC,
        &header,
        &[mf.p.values(), mf.q.values(), &mf.loss_trace],
    )
}

fn load_svd(path: &Path, key: &str, m: usize, n: usize) -> Option<SvdResult> {
    let (header, mut payload) =
        binfmt::read_block::<FactorCacheHeader>(path, FACTOR_MAGIC).ok()?;
    if header.key != key || header.m != m || header.n != n {
        return None;
    }
    let u = payload.take_f64s(m * header.rank).ok()?;
    let s = payload.take_f64s(header.rank).ok()?;
    let v = payload.take_f64s(n * header.rank).ok()?;
    payload.finish().ok()?;
    Some(SvdResult {
        u: DenseMatrix::from_vec(m, header.rank, u).ok()?,
        s,
        v: DenseMatrix::from_vec(n, header.rank, v).ok()?,
    })
}

fn store_svd(path: &Path, key: &str, m: usize, n: usize, svd: &SvdResult) -> Result<()> {
    let header = FactorCacheHeader {
        key: key.to_string(),
        m,
        n,
        rank: svd.s.len(),
        final_loss: 0.0,
        iterations_run: 0,
        trace_len: 0,
    };
    binfmt::write_block(
        path,
        FACTOR_MAGIC,
        &header,
        &[svd.u.values(), &svd.s, svd.v.values()],
    )
}

/// `build_factors` with a disk cache keyed by dataset hash, rank, seed and
/// solver parameters. Unreadable or mismatched cache entries are treated
/// as misses and recomputed; cache writes propagate errors.
pub fn build_factors_cached(
    adj: &NormalizedAdjacency,
    config: &TrainConfig,
    dataset_hash: &str,
    cache_dir: Option<&Path>,
) -> Result<LowRankFactors> {
    let Some(dir) = cache_dir else {
        return build_factors(adj, config);
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (m, n) = (adj.matrix.rows(), adj.matrix.cols());
    let mf = if config.variant.uses_mf() {
        let key = mf_key(dataset_hash, config);
        let path = dir.join(digest_name("mf", &key));
        match load_mf(&path, &key, m, n) {
            Some(hit) => Some(hit),
            None => {
                let computed = mf_factorize(
                    adj,
                    config.mf_rank,
                    config.mf_iters,
                    config.mf_lr,
                    config.mf_tol,
                    config.seed,
                )?;
                store_mf(&path, &key, m, n, &computed)?;
                Some(computed)
            }
        }
    } else {
        None
    };
    let svd = if config.variant.uses_svd() {
        let key = svd_key(dataset_hash, config);
        let path = dir.join(digest_name("svd", &key));
        match load_svd(&path, &key, m, n) {
            Some(hit) => Some(hit),
            None => {
                let computed = svd_factorize(
                    adj,
                    config.svd_rank,
                    config.svd_oversample,
                    config.svd_power_iters,
                    config.seed,
                )?;
                store_svd(&path, &key, m, n, &computed)?;
                Some(computed)
            }
        }
    } else {
        None
    };
    Ok(LowRankFactors { mf, svd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::{build_matrix, normalize, RawInteraction};

    fn pair_adjacency() -> NormalizedAdjacency {
        let raw = vec![RawInteraction {
            user_key: "u".into(),
            item_key: "i".into(),
            rating: 1.0,
            timestamp: None,
        }];
        let m = build_matrix(&raw, 0.0, (1.0 - 2e-10, 1e-10, 1e-10), 1).unwrap();
        normalize(&m).unwrap()
    }

    fn toy_adjacency(users: usize, items: usize, seed: u64) -> NormalizedAdjacency {
        let mut raw = Vec::new();
        for u in 0..users {
            for i in 0..items {
                if (u * 7 + i * 11 + seed as usize) % 3 != 0 {
                    raw.push(RawInteraction {
                        user_key: format!("u{u}"),
                        item_key: format!("i{i}"),
                        rating: 1.0,
                        timestamp: None,
                    });
                }
            }
        }
        let m = build_matrix(&raw, 0.0, (1.0 - 2e-10, 1e-10, 1e-10), seed).unwrap();
        normalize(&m).unwrap()
    }

    #[test]
    fn rank_one_single_pair_converges() {
        let adj = pair_adjacency();
        let mf = mf_factorize(&adj, 1, 2000, 0.01, 0.0, 3).unwrap();
        assert!(mf.final_loss <= 1e-3, "loss {}", mf.final_loss);
        assert_eq!(mf.iterations_run, 2000);
        assert_eq!(mf.loss_trace.len(), 2001);
    }

    #[test]
    fn full_rank_toy_converges() {
        let adj = toy_adjacency(4, 3, 2);
        let mf = mf_factorize(&adj, 3, 3000, 0.01, 0.0, 5).unwrap();
        assert!(mf.final_loss <= 1e-3, "loss {}", mf.final_loss);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let adj = toy_adjacency(4, 3, 2);
        let a = mf_factorize(&adj, 2, 50, 0.01, 0.0, 9).unwrap();
        let b = mf_factorize(&adj, 2, 50, 0.01, 0.0, 9).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(a.q, b.q);
        assert_eq!(a.loss_trace, b.loss_trace);
        let c = mf_factorize(&adj, 2, 50, 0.01, 0.0, 10).unwrap();
        assert_ne!(a.p, c.p);
    }

    #[test]
    fn loss_trace_descends_after_warmup() {
        // Across any 10-iteration window after iteration 20, the trace
        // endpoint does not exceed the start by more than 1e-9.
        for seed in [1u64, 2, 3] {
            let adj = toy_adjacency(5, 4, seed);
            let mf = mf_factorize(&adj, 2, 300, 0.01, 0.0, seed).unwrap();
            for i in 20..mf.loss_trace.len() - 10 {
                assert!(
                    mf.loss_trace[i + 10] <= mf.loss_trace[i] + 1e-9,
                    "seed {seed}: trace[{i}]={} < trace[{}]={}",
                    mf.loss_trace[i],
                    i + 10,
                    mf.loss_trace[i + 10]
                );
            }
        }
    }

    #[test]
    fn tolerance_stops_early() {
        let adj = toy_adjacency(4, 3, 2);
        let mf = mf_factorize(&adj, 2, 3000, 0.01, 1e-3, 5).unwrap();
        assert!(mf.iterations_run < 3000);
        assert_eq!(mf.loss_trace.len(), mf.iterations_run + 1);
    }

    #[test]
    fn svd_beats_mf_at_equal_rank() {
        // Eckart–Young: no rank-k factor pair beats the rank-k SVD residual.
        for (users, items, seed) in [(5usize, 4usize, 1u64), (6, 6, 2), (4, 7, 3)] {
            let adj = toy_adjacency(users, items, seed);
            for k in 1..=2usize {
                let mf = mf_factorize(&adj, k, 400, 0.01, 0.0, seed).unwrap();
                let svd = svd_factorize(&adj, k, 8, 4, seed).unwrap();
                let svd_residual = svd.residual(&adj.matrix);
                assert!(
                    mf.final_loss >= svd_residual - 1e-6,
                    "rank {k}: MF {} vs SVD residual {svd_residual}",
                    mf.final_loss
                );
            }
        }
    }

    #[test]
    fn zero_column_extension_never_hurts() {
        let adj = toy_adjacency(5, 4, 7);
        let (p1, q1) = init_mf_factors(5, 4, 2, 7);
        let narrow = mf_factorize_with_init(&adj, p1.clone(), q1.clone(), 200, 0.01, 0.0).unwrap();
        let widen = |x: &DenseMatrix| {
            DenseMatrix::from_fn(x.rows(), x.cols() + 1, |i, j| {
                if j < x.cols() {
                    x.get(i, j)
                } else {

                    0.0
                }
            })
        };
        let wide = mf_factorize_with_init(&adj, widen(&p1), widen(&q1), 200, 0.01, 0.0).unwrap();
        assert!(
            wide.final_loss <= narrow.final_loss + 1e-6,
            "wide {} vs narrow {}",
            wide.final_loss,
            narrow.final_loss
        );
    }

    #[test]
    fn divergence_reports_numerical_error() {
        let adj = toy_adjacency(4, 3, 2);
        let got = mf_factorize(&adj, 2, 50, 1e160, 0.0, 5);
        match got {
            Err(Error::Numerical(msg)) => assert!(msg.contains("smaller learning rate")),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_arguments_are_config_errors() {
        let adj = toy_adjacency(3, 3, 1);
        assert!(matches!(mf_factorize(&adj, 0, 10, 0.01, 0.0, 1), Err(Error::Config(_))));
        assert!(matches!(mf_factorize(&adj, 1, 0, 0.01, 0.0, 1), Err(Error::Config(_))));
        assert!(matches!(mf_factorize(&adj, 1, 10, 0.0, 0.0, 1), Err(Error::Config(_))));
        assert!(matches!(mf_factorize(&adj, 1, 10, 0.01, -1.0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn build_factors_respects_variant() {
        let adj = toy_adjacency(4, 4, 3);
        let mut config = TrainConfig::default();
        config.mf_rank = 2;
        config.svd_rank = 2;
        config.mf_iters = 30;
        config.d = 4;

        config.variant = Variant::Full;
        let both = build_factors(&adj, &config).unwrap();
        assert_eq!(both.mf.as_ref().unwrap().rank(), 2);
        assert_eq!(both.svd.as_ref().unwrap().s.len(), 2);

        config.variant = Variant::MfOnly;
        let mf_only = build_factors(&adj, &config).unwrap();
        assert!(mf_only.mf.is_some() && mf_only.svd.is_none());

        config.variant = Variant::SvdOnly;
        let svd_only = build_factors(&adj, &config).unwrap();
        assert!(svd_only.mf.is_none() && svd_only.svd.is_some());

        config.variant = Variant::None;
        let neither = build_factors(&adj, &config).unwrap();
        assert!(neither.mf.is_none() && neither.svd.is_none());
    }

    #[test]
    fn cache_roundtrip_is_bitwise() {
        let adj = toy_adjacency(4, 4, 3);
        let mut config = TrainConfig::default();
        config.mf_rank = 2;
        config.svd_rank = 2;
        config.mf_iters = 30;
        let dir = tempfile::tempdir().unwrap();
        let first = build_factors_cached(&adj, &config, "hash-a", Some(dir.path())).unwrap();
        let second = build_factors_cached(&adj, &config, "hash-a", Some(dir.path())).unwrap();
        let (f_mf, s_mf) = (first.mf.unwrap(), second.mf.unwrap());
        assert_eq!(f_mf.p, s_mf.p);
        assert_eq!(f_mf.q, s_mf.q);
        assert_eq!(f_mf.loss_trace, s_mf.loss_trace);
        let (f_svd, s_svd) = (first.svd.unwrap(), second.svd.unwrap());
        assert_eq!(f_svd.u, s_svd.u);
        assert_eq!(f_svd.s, s_svd.s);
        assert_eq!(f_svd.v, s_svd.v);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn cache_miss_on_different_dataset_hash() {
        let adj = toy_adjacency(4, 4, 3);
        let mut config = TrainConfig::default();
        config.variant = Variant::SvdOnly;
        config.svd_rank = 2;
        let dir = tempfile::tempdir().unwrap();
        build_factors_cached(&adj, &config, "hash-a", Some(dir.path())).unwrap();
        build_factors_cached(&adj, &config, "hash-b", Some(dir.path())).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn corrupt_cache_entry_is_recomputed() {
        let adj = toy_adjacency(4, 4, 3);
        let mut config = TrainConfig::default();
        config.variant = Variant::SvdOnly;
        config.svd_rank = 2;
        let dir = tempfile::tempdir().unwrap();
        build_factors_cached(&adj, &config, "hash-a", Some(dir.path())).unwrap();
        let entry = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap();
        std::fs::write(entry.path(), b"garbage").unwrap();
        let again = build_factors_cached(&adj, &config, "hash-a", Some(dir.path())).unwrap();
        let fresh = build_factors(&adj, &config).unwrap();
        assert_eq!(again.svd.unwrap().u, fresh.svd.unwrap().u);
    }
}
