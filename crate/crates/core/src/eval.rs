use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;

use crate::config::{TrainConfig, Variant};
use crate::data::{InteractionMatrix, Split};
use crate::error::{Error, Result};
use crate::linalg::dense::dot;
use crate::linalg::DenseMatrix;
use crate::model::Checkpoint;
use crate::training::{self, EpochRecord};

/// Full-ranking metric results for one (checkpoint, split) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Content hash of the evaluated dataset.
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub split: Split,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub per_user: Option<Vec<UserMetrics>>,
    /// Wall-clock seconds; informational only and deliberately excluded
    /// from the serialized report so reruns stay byte-identical.
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserMetrics {
    pub user: u32,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl MetricsReport {
    /// Canonical JSON form: keys sorted, metrics flattened as
    /// "recall@k" / "ndcg@k". Identical inputs yield identical bytes.
    pub fn to_json(&self) -> String {
        let mut metrics = BTreeMap::new();
        for (k, v) in &self.recall {
            metrics.insert(format!("recall@{k}"), *v);
        }
        for (k, v) in &self.ndcg {
            metrics.insert(format!("ndcg@{k}"), *v);
        }
        let mut value = json!({
            "dataset": self.dataset,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "split": self.split.name(),
            "metrics": metrics,
        });
        if let Some(per_user) = &self.per_user {
            let rows: Vec<serde_json::Value> = per_user
                .iter()
                .map(|u| {
                    let mut m = BTreeMap::new();
                    for (k, v) in &u.recall {
                        m.insert(format!("recall@{k}"), *v);
                    }
                    for (k, v) in &u.ndcg {
                        m.insert(format!("ndcg@{k}"), *v);
                    }
                    json!({"user": u.user, "metrics": m})
                })
                .collect();
            value["per_user"] = json!(rows);
        }
        let mut out = serde_json::to_string_pretty(&value).expect("report serializes");
        out.push('\n');
        out
    }
}

/// All unmasked items ordered by descending dot-product score, ties broken
/// by ascending item index. Masked (train) items are omitted entirely, so
/// an evaluated ranking can never surface one.
pub fn rank_items(user_row: &[f64], e_item: &DenseMatrix, mask: &[u32]) -> Vec<u32> {
    let n = e_item.rows();
    let mut masked = vec![false; n];
    for &m in mask {
        if (m as usize) < n {
            masked[m as usize] = true;
        }
    }
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(n - mask.len().min(n));
    for i in 0..n {
        if !masked[i] {
            // +0.0 collapses -0.0 so total_cmp agrees with the tie rule.
            scored.push((dot(user_row, e_item.row(i)) + 0.0, i as u32));
        }
    }
    scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

fn sorted_copy(relevant: &[u32]) -> Vec<u32> {
    let mut r = relevant.to_vec();
    r.sort_unstable();
    r
}

/// |top-k ∩ relevant| / |relevant|.
pub fn recall_at_k(ranking: &[u32], relevant: &[u32], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let rel = sorted_copy(relevant);
    let hits = ranking
        .iter()
        .take(k)
        .filter(|i| rel.binary_search(i).is_ok())
        .count();
    hits as f64 / rel.len() as f64
}

/// Binary-gain DCG@k normalized by the ideal DCG over min(k, |relevant|).
pub fn ndcg_at_k(ranking: &[u32], relevant: &[u32], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let rel = sorted_copy(relevant);
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| rel.binary_search(i).is_ok())
        .map(|(pos, _)| gain(pos + 1))
        .sum();
    let ideal: f64 = (1..=k.min(rel.len())).map(gain).sum();
    dcg / ideal
}

/// Mean recall/NDCG at each cutoff over users with at least one relevant
/// item in `split`; users with none are excluded from the average.
pub fn evaluate_tables(
    e_user: &DenseMatrix,
    e_item: &DenseMatrix,
    matrix: &InteractionMatrix,
    split: Split,
    ks: &[usize],
    collect_per_user: bool,
) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>, Option<Vec<UserMetrics>>)> {
    if e_user.rows() != matrix.num_users
        || e_item.rows() != matrix.num_items
        || e_user.cols() != e_item.cols()
    {
        return Err(Error::Config(format!(
            "embedding tables {}x{} / {}x{} do not match dataset {}x{}",
            e_user.rows(),
            e_user.cols(),
            e_item.rows(),
            e_item.cols(),
            matrix.num_users,
            matrix.num_items
        )));
    }
    if split == Split::Train {
        return Err(Error::Config(
            "evaluation split must be valid or test (train items are the mask)".into(),
        ));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("metric cutoffs must be ≥ 1, got {ks:?}")));
    }
    let train_items = matrix.items_per_user(Split::Train);
    let relevant_items = matrix.items_per_user(split);
    let mut recall_sum: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg_sum: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut per_user = collect_per_user.then(Vec::new);
    let mut counted = 0usize;
    for u in 0..matrix.num_users {
        let relevant = &relevant_items[u];
        if relevant.is_empty() {
            continue;
        }
        counted += 1;
        let ranking = rank_items(e_user.row(u), e_item, &train_items[u]);
        let mut user_row = collect_per_user.then(|| UserMetrics {
            user: u as u32,
            recall: BTreeMap::new(),
            ndcg: BTreeMap::new(),
        });
        for &k in ks {
            let r = recall_at_k(&ranking, relevant, k);
            let n = ndcg_at_k(&ranking, relevant, k);
            *recall_sum.get_mut(&k).expect("key") += r;
            *ndcg_sum.get_mut(&k).expect("key") += n;
            if let Some(row) = &mut user_row {
                row.recall.insert(k, r);
                row.ndcg.insert(k, n);
            }
        }
        if let (Some(rows), Some(row)) = (&mut per_user, user_row) {
            rows.push(row);
        }
    }
    if counted == 0 {
        return Err(Error::Data(format!(
            "no user has a relevant item in the {} split",
            split.name()
        )));
    }
    for v in recall_sum.values_mut() {
        *v /= counted as f64;
    }
    for v in ndcg_sum.values_mut() {
        *v /= counted as f64;
    }
    Ok((recall_sum, ndcg_sum, per_user))
}

/// Mean recall at a single cutoff — the training loop's validation probe.
pub fn recall_at_split(
    e_user: &DenseMatrix,
    e_item: &DenseMatrix,
    matrix: &InteractionMatrix,
    split: Split,
    k: usize,
) -> Result<f64> {
    let (recall, _, _) = evaluate_tables(e_user, e_item, matrix, split, &[k], false)?;
    Ok(recall[&k])
}

/// Evaluate a persisted checkpoint against a split of the dataset.
pub fn evaluate(
    checkpoint: &Checkpoint,
    matrix: &InteractionMatrix,
    split: Split,
    ks: &[usize],
) -> Result<MetricsReport> {
    evaluate_with_options(checkpoint, matrix, split, ks, false)
}

pub fn evaluate_with_options(
    checkpoint: &Checkpoint,
    matrix: &InteractionMatrix,
    split: Split,
    ks: &[usize],
    collect_per_user: bool,
) -> Result<MetricsReport> {
    let start = std::time::Instant::now();
    let (recall, ndcg, per_user) = evaluate_tables(
        &checkpoint.e_user,
        &checkpoint.e_item,
        matrix,
        split,
        ks,
        collect_per_user,
    )?;
    Ok(MetricsReport {
        dataset: matrix.content_hash()?,
        config_hash: checkpoint.config_hash.clone(),
        seed: checkpoint.seed,
        split,
        recall,
        ndcg,
        per_user,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// One completed training run inside an ablation or sweep table.
#[derive(Clone, Debug)]
pub struct RunRow {
    /// Row label: the variant name for ablations, "param=value" for sweeps.
    pub label: String,
    pub param: String,
    pub value: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub report: MetricsReport,
}

fn run_once(
    matrix: &InteractionMatrix,
    config: &TrainConfig,
    cache_dir: Option<&Path>,
    label: String,
    param: String,
    value: String,
) -> Result<RunRow> {
    let outcome = training::train_with_options(matrix, config, cache_dir, &mut |_| Ok(()))?;
    let final_loss = outcome.epochs.last().map(|e| e.total).unwrap_or(f64::NAN);
    Ok(RunRow {
        label,
        param,
        value,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs.len(),
        final_loss,
        report: outcome.report,
    })
}

/// Train and evaluate the four component variants under a shared seed and
/// split: full hybrid, MF-only, SVD-only, and the bare backbone.
pub fn ablate(
    matrix: &InteractionMatrix,
    base: &TrainConfig,
    cache_dir: Option<&Path>,
) -> Result<Vec<RunRow>> {
    let mut rows = Vec::with_capacity(4);
    for (variant, key) in [
        (Variant::Full, "full"),
        (Variant::MfOnly, "mf-only"),
        (Variant::SvdOnly, "svd-only"),
        (Variant::None, "none"),
    ] {
        let mut config = base.clone();
        config.variant = variant;
        rows.push(run_once(
            matrix,
            &config,
            cache_dir,
            variant.label().to_string(),
            "variant".to_string(),
            key.to_string(),
        )?);
    }
    Ok(rows)
}

/// One-at-a-time hyperparameter sweep: each grid axis varies alone while
/// every other parameter stays at the base value. An empty grid runs the
/// base configuration once.
pub fn sweep(
    matrix: &InteractionMatrix,
    base: &TrainConfig,
    grid: &[(String, Vec<String>)],
    cache_dir: Option<&Path>,
) -> Result<Vec<RunRow>> {
    if grid.is_empty() {
        return Ok(vec![run_once(
            matrix,
            base,
            cache_dir,
            "base".to_string(),
            "base".to_string(),
            String::new(),
        )?]);
    }
    let mut rows = Vec::new();
    for (param, values) in grid {
        if values.is_empty() {
            return Err(Error::Config(format!("sweep axis {param} lists no values")));
        }
        for value in values {
            let mut config = base.clone();
            config.set_key(param, value)?;
            rows.push(run_once(
                matrix,
                &config,
                cache_dir,
                format!("{param}={value}"),
                param.clone(),
                value.clone(),
            )?);
        }
    }
    Ok(rows)
}

/// CSV table for ablation/sweep rows: one row per run, metric columns in
/// cutoff order.
pub fn rows_to_csv(rows: &[RunRow]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let ks: Vec<usize> = rows
        .first()
        .map(|r| r.report.recall.keys().copied().collect())
        .unwrap_or_default();
    let mut header = vec![
        "label".to_string(),
        "param".to_string(),
        "value".to_string(),
        "best_epoch".to_string(),
        "epochs_run".to_string(),
        "final_loss".to_string(),
    ];
    for k in &ks {
        header.push(format!("recall@{k}"));
    }
    for k in &ks {
        header.push(format!("ndcg@{k}"));
    }
    header.push("dataset".to_string());
    header.push("config_hash".to_string());
    wtr.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![
            row.label.clone(),
            row.param.clone(),
            row.value.clone(),
            row.best_epoch.to_string(),
            row.epochs_run.to_string(),
            format_float(row.final_loss),
        ];
        for k in &ks {
            rec.push(format_float(*row.report.recall.get(k).unwrap_or(&f64::NAN)));
        }
        for k in &ks {
            rec.push(format_float(*row.report.ndcg.get(k).unwrap_or(&f64::NAN)));
        }
        rec.push(row.report.dataset.clone());
        rec.push(row.report.config_hash.clone());
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv write failed: {e}"))
}

fn format_float(v: f64) -> String {
    // Shortest round-trip form, so identical runs emit identical bytes.
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // serde_json's float formatting is shortest-roundtrip; reuse it.
    serde_json::to_string(&v).unwrap_or_else(|_| "NaN".to_string())
}

/// Loss-log CSV header shared by the training CLI and tests.
pub const LOSS_LOG_HEADER: &str = "epoch,rec,cl_user,cl_item,reg,total,valid_recall20";

pub fn loss_log_row(e: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        e.epoch,
        format_float(e.rec),
        format_float(e.cl_user),
        format_float(e.cl_item),
        format_float(e.reg),
        format_float(e.total),
        format_float(e.valid_recall20)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_matrix, RawInteraction};
    use crate::rng::{seeded, Stream};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn toy_matrix(users: usize, items: usize, seed: u64) -> InteractionMatrix {
        let mut raw = Vec::new();
        for u in 0..users {
            for i in 0..items {
                if (u * 13 + i * 7 + seed as usize) % 4 != 0 {
                    raw.push(RawInteraction {
                        user_key: format!("u{u}"),
                        item_key: format!("i{i}"),
                        rating: 1.0,
                        timestamp: None,
                    });
                }
            }
        }
        build_matrix(&raw, 0.0, (0.6, 0.2, 0.2), seed).unwrap()
    }

    #[test]
    fn ranking_orders_by_score_then_index() {
        let e_item = DenseMatrix::from_vec(3, 1, vec![0.9, 0.1, 0.5]).unwrap();
        assert_eq!(rank_items(&[1.0], &e_item, &[]), vec![0, 2, 1]);
        let flat = DenseMatrix::from_vec(4, 1, vec![0.5; 4]).unwrap();
        assert_eq!(rank_items(&[1.0], &flat, &[]), vec![0, 1, 2, 3]);
    }

    #[test]
    fn ranking_omits_masked_items() {
        let e_item = DenseMatrix::from_vec(4, 1, vec![0.9, 0.8, 0.7, 0.6]).unwrap();
        let ranking = rank_items(&[1.0], &e_item, &[0, 2]);
        assert_eq!(ranking, vec![1, 3]);
    }

    #[test]
    fn ranking_treats_negative_zero_as_zero() {
        let e_item = DenseMatrix::from_vec(2, 1, vec![-0.0, 0.0]).unwrap();
        assert_eq!(rank_items(&[1.0], &e_item, &[]), vec![0, 1]);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[7, 1, 2], &[7], 10), 1.0);
        let ranking: Vec<u32> = (0..30).collect();
        assert_eq!(recall_at_k(&ranking, &[10], 10), 0.0);
        assert_eq!(recall_at_k(&ranking, &[9], 10), 1.0);
        assert_eq!(recall_at_k(&ranking, &[3, 25], 10), 0.5);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[5, 1, 2], &[5], 10), 1.0);
        let v = ndcg_at_k(&[9, 5, 2], &[5], 10);
        assert_abs_diff_eq!(v, 1.0 / 3f64.log2(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.6309, epsilon = 1e-4);
        assert_eq!(ndcg_at_k(&[1, 2, 3], &[9], 3), 0.0);
    }

    #[test]
    fn ndcg_is_one_iff_relevant_on_top() {
        assert_eq!(ndcg_at_k(&[4, 2, 9, 1], &[2, 4], 3), 1.0);
        assert!(ndcg_at_k(&[4, 9, 2, 1], &[2, 4], 3) < 1.0);
    }

    #[test]
    fn recall_monotone_in_k() {
        let mut rng = seeded(11, Stream::Init);
        for _ in 0..50 {
            let ranking: Vec<u32> = {
                let mut v: Vec<u32> = (0..40).collect();
                for i in (1..v.len()).rev() {
                    let j = rng.random_range(0..=i);
                    v.swap(i, j);
                }
                v
            };
            let relevant: Vec<u32> = (0..40).filter(|_| rng.random::<f64>() < 0.2).collect();
            if relevant.is_empty() {
                continue;
            }
            assert!(
                recall_at_k(&ranking, &relevant, 20) >= recall_at_k(&ranking, &relevant, 10)
            );
        }
    }

    #[test]
    fn perfect_embeddings_score_one() {
        let matrix = toy_matrix(5, 8, 3);
        let test_items = matrix.items_per_user(Split::Test);
        // Score = 2 on the user's own test items, 0 elsewhere.
        let e_item = DenseMatrix::identity(8);
        let mut e_user = DenseMatrix::zeros(5, 8);
        for u in 0..5 {
            for &i in &test_items[u] {
                e_user.set(u, i as usize, 2.0);
            }
        }
        let (recall, ndcg, _) =
            evaluate_tables(&e_user, &e_item, &matrix, Split::Test, &[10], false).unwrap();
        assert_eq!(recall[&10], 1.0);
        assert_eq!(ndcg[&10], 1.0);
    }

    #[test]
    fn random_embeddings_hit_at_base_rate() {
        // 1 relevant item of 100; a random ranking puts it in the top 10
        // with probability 0.1. Fixed seeds make the sample deterministic.
        let mut rng = seeded(17, Stream::Init);
        let mut total = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let e_item = DenseMatrix::from_fn(100, 8, |_, _| rng.random::<f64>() - 0.5);
            let user: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
            let ranking = rank_items(&user, &e_item, &[]);
            total += recall_at_k(&ranking, &[42], 10);
        }
        let mean = total / trials as f64;
        assert!((mean - 0.1).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn users_without_relevant_items_are_excluded() {
        let raw = vec![
            ("a", "x", Split::Train),
            ("a", "y", Split::Test),
            ("b", "y", Split::Train),
            ("b", "x", Split::Train),
        ];
        let mut matrix = toy_matrix(2, 2, 1);
        matrix.entries = raw
            .iter()
            .map(|(u, i, s)| crate::data::Entry {
                user: if *u == "a" { 0 } else { 1 },
                item: if *i == "x" { 0 } else { 1 },
                split: *s,
            })
            .collect();
        matrix.num_users = 2;
        matrix.num_items = 2;
        // User b has no test items; user a ranks item y (index 1) first.
        let e_user = DenseMatrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let e_item = DenseMatrix::identity(2);
        let (recall, _, per) =
            evaluate_tables(&e_user, &e_item, &matrix, Split::Test, &[1], true).unwrap();
        assert_eq!(recall[&1], 1.0);
        assert_eq!(per.unwrap().len(), 1);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let matrix = toy_matrix(4, 6, 2);
        let e_user = DenseMatrix::zeros(3, 4);
        let e_item = DenseMatrix::zeros(6, 4);
        let got = evaluate_tables(&e_user, &e_item, &matrix, Split::Test, &[10], false);
        assert!(matches!(got, Err(Error::Config(_))));
    }

    #[test]
    fn train_split_evaluation_is_rejected() {
        let matrix = toy_matrix(4, 6, 2);
        let t = DenseMatrix::zeros(4, 2);
        let i = DenseMatrix::zeros(6, 2);
        let got = evaluate_tables(&t, &i, &matrix, Split::Train, &[10], false);
        assert!(matches!(got, Err(Error::Config(_))));
    }

    #[test]
    fn mask_soundness_on_random_tables() {
        let matrix = toy_matrix(6, 9, 4);
        let mut rng = seeded(9, Stream::Init);
        let e_user = DenseMatrix::from_fn(6, 4, |_, _| rng.random::<f64>() - 0.5);
        let e_item = DenseMatrix::from_fn(9, 4, |_, _| rng.random::<f64>() - 0.5);
        let train = matrix.items_per_user(Split::Train);
        for u in 0..6 {
            let ranking = rank_items(e_user.row(u), &e_item, &train[u]);
            for t in &train[u] {
                assert!(!ranking.contains(t), "train item {t} surfaced for user {u}");
            }
            assert_eq!(ranking.len(), 9 - train[u].len());
        }
    }

    #[test]
    fn report_json_is_deterministic_and_shaped() {
        let matrix = toy_matrix(5, 8, 3);
        let e_user = DenseMatrix::from_fn(5, 3, |i, j| ((i + j) as f64).sin());
        let e_item = DenseMatrix::from_fn(8, 3, |i, j| ((i * 2 + j) as f64).cos());
        let (recall, ndcg, _) =
            evaluate_tables(&e_user, &e_item, &matrix, Split::Test, &[10, 20], false).unwrap();
        let report = MetricsReport {
            dataset: matrix.content_hash().unwrap(),
            config_hash: "deadbeef".into(),
            seed: 7,
            split: Split::Test,
            recall,
            ndcg,
            per_user: None,
            runtime_s: 1.23,
        };
        let a = report.to_json();
        let mut other = report.clone();
        other.runtime_s = 9.87;
        let b = other.to_json();
        assert_eq!(a, b, "runtime must not leak into the serialized report");
        let parsed: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(parsed["split"], "test");
        assert_eq!(parsed["seed"], 7);
        assert!(parsed["metrics"]["recall@10"].is_f64() || parsed["metrics"]["recall@10"].is_u64());
        assert!(parsed["metrics"]["ndcg@20"].is_number());
        assert!(parsed.get("runtime_s").is_none());
    }

    #[test]
    fn metric_values_stay_in_unit_interval() {
        let matrix = toy_matrix(6, 9, 5);
        let mut rng = seeded(21, Stream::Init);
        let e_user = DenseMatrix::from_fn(6, 4, |_, _| rng.random::<f64>() - 0.5);
        let e_item = DenseMatrix::from_fn(9, 4, |_, _| rng.random::<f64>() - 0.5);
        let (recall, ndcg, _) =
            evaluate_tables(&e_user, &e_item, &matrix, Split::Test, &[1, 5, 10], false).unwrap();
        for v in recall.values().chain(ndcg.values()) {
            assert!((0.0..=1.0).contains(v), "{v}");
        }
    }
}
