use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Activation, Fusion, RecLoss, TrainConfig, Variant};
use crate::data::{normalize, InteractionMatrix, NormalizedAdjacency, Split};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::factorization::{build_factors_cached, LowRankFactors};
use crate::linalg::dense::dot;
use crate::linalg::DenseMatrix;
use crate::model::{
    forward_main, forward_views, init_embeddings, noise_free_readout, readout, EmbeddingState,
    ForwardTrace, ViewLayerTrace,
};
use crate::optim::Adam;
use crate::rng::{seeded, Stream};

/// Sampling view of the train split: the positive pairs and, per user, the
/// sorted train-item set used to reject negatives.
pub struct TrainIndex {
    pairs: Vec<(u32, u32)>,
    user_items: Vec<Vec<u32>>,
    user_keys: Vec<String>,
    num_items: usize,
}

impl TrainIndex {
    pub fn build(matrix: &InteractionMatrix) -> Result<TrainIndex> {
        let pairs = matrix.train_pairs();
        if pairs.is_empty() {
            return Err(Error::Data("train split is empty".into()));
        }
        let mut user_items = matrix.items_per_user(Split::Train);
        for items in &mut user_items {
            items.sort_unstable();
        }
        Ok(TrainIndex {
            pairs,
            user_items,
            user_keys: matrix.user_map.keys().to_vec(),
            num_items: matrix.num_items,
        })
    }

    /// Number of train pairs (the epoch size).
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// One training batch: positive (user, item) pairs and `s_per_pos`
/// rejected-sampled negatives per pair, stored row-major.
#[derive(Clone, Debug)]
pub struct Batch {
    pub users: Vec<u32>,
    pub positives: Vec<u32>,
    pub negatives: Vec<u32>,
    pub s_per_pos: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn negatives_of(&self, i: usize) -> &[u32] {
        &self.negatives[i * self.s_per_pos..(i + 1) * self.s_per_pos]
    }

    /// Distinct users in the batch, ascending.
    pub fn user_nodes(&self) -> Vec<u32> {
        let mut nodes = self.users.clone();
        nodes.sort_unstable();
        nodes.dedup();
        nodes
    }

    /// Distinct items (positives and negatives), ascending.
    pub fn item_nodes(&self) -> Vec<u32> {
        let mut nodes = self.positives.clone();
        nodes.extend_from_slice(&self.negatives);
        nodes.sort_unstable();
        nodes.dedup();
        nodes
    }
}

const NEGATIVE_RETRY_LIMIT: usize = 10_000;

/// Uniformly sample `batch_size` train pairs with replacement; per pair,
/// rejection-sample `s_per_pos` negatives outside the user's train set.
/// The draw order (pair index, then each negative) is a compatibility
/// contract: replays depend on it.
pub fn sample_batch(
    index: &TrainIndex,
    batch_size: usize,
    s_per_pos: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if batch_size == 0 || s_per_pos == 0 {
        return Err(Error::Config(
            "batch size and negatives per positive must be at least 1".into(),
        ));
    }
    let mut users = Vec::with_capacity(batch_size);
    let mut positives = Vec::with_capacity(batch_size);
    let mut negatives = Vec::with_capacity(batch_size * s_per_pos);
    for _ in 0..batch_size {
        let (user, pos) = index.pairs[rng.random_range(0..index.pairs.len())];
        users.push(user);
        positives.push(pos);
        let owned = &index.user_items[user as usize];
        for _ in 0..s_per_pos {
            let mut accepted = None;
            for _ in 0..NEGATIVE_RETRY_LIMIT {
                let candidate = rng.random_range(0..index.num_items as u32);
                if owned.binary_search(&candidate).is_err() {
                    accepted = Some(candidate);
                    break;
                }
            }
            match accepted {
                Some(c) => negatives.push(c),
                None => {
                    return Err(Error::Data(format!(
                        "cannot sample a negative for user {:?} (index {user}): all {} items are in their train set",
                        index.user_keys.get(user as usize).map(String::as_str).unwrap_or("?"),
                        index.num_items
                    )))
                }
            }
        }
    }
    Ok(Batch {
        users,
        positives,
        negatives,
        s_per_pos,
    })
}

/// Margin ranking loss Σ max(0, 1 − y_pos + y_neg) over aligned pairs.
/// The subgradient at the kink is taken as 0.
pub fn rec_loss_hinge(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    if scores_pos.len() != scores_neg.len() {
        return Err(Error::Shape(format!(
            "hinge loss needs aligned scores, got {} vs {}",
            scores_pos.len(),
            scores_neg.len()
        )));
    }
    Ok(scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(p, n)| (1.0 - p + n).max(0.0))
        .sum())
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise log-sigmoid ranking loss Σ −log σ(y_pos − y_neg), evaluated
/// through the softplus identity for stability at large gaps.
pub fn rec_loss_bpr(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    if scores_pos.len() != scores_neg.len() {
        return Err(Error::Shape(format!(
            "ranking loss needs aligned scores, got {} vs {}",
            scores_pos.len(),
            scores_neg.len()
        )));
    }
    Ok(scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(p, n)| softplus(n - p))
        .sum())
}

/// Per-layer contrastive cache: normalized anchor/candidate rows, their
/// norms, the cosine matrix and the row softmax.
struct NceLayer {
    zhat: DenseMatrix,
    ghat: DenseMatrix,
    znorm: Vec<f64>,
    gnorm: Vec<f64>,
    c: DenseMatrix,
    p: DenseMatrix,
}

fn gather_normalized(src: &DenseMatrix, nodes: &[u32]) -> Result<(DenseMatrix, Vec<f64>)> {
    if let Some(&bad) = nodes.iter().find(|&&i| i as usize >= src.rows()) {
        return Err(Error::Range(format!(
            "node {bad} outside embedding table of {} rows",
            src.rows()
        )));
    }
    let mut out = src.gather_rows(nodes);
    let mut norms = Vec::with_capacity(nodes.len());
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = dot(row, row).sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

fn infonce_layers(
    z_layers: &[DenseMatrix],
    g_layers: &[DenseMatrix],
    nodes: &[u32],
    tau: f64,
) -> Result<(f64, Vec<NceLayer>)> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if z_layers.len() != g_layers.len() {
        return Err(Error::Shape(format!(
            "contrastive views misaligned: {} propagation layers vs {} view layers",
            z_layers.len(),
            g_layers.len()
        )));
    }
    let b = nodes.len();
    let mut total = 0.0;
    let mut layers = Vec::with_capacity(z_layers.len());
    for (l, (z, g)) in z_layers.iter().zip(g_layers).enumerate() {
        let (zhat, znorm) = gather_normalized(z, nodes)?;
        let (ghat, gnorm) = gather_normalized(g, nodes)?;
        let c = zhat.matmul_nt(&ghat)?;
        let mut p = DenseMatrix::zeros(b, b);
        for i in 0..b {
            let crow = c.row(i);
            let mut max_logit = f64::NEG_INFINITY;
            for &v in crow {
                max_logit = max_logit.max(v / tau);
            }
            let mut denom = 0.0;
            {
                let prow = p.row_mut(i);
                for (j, &v) in crow.iter().enumerate() {
                    let e = (v / tau - max_logit).exp();
                    prow[j] = e;
                    denom += e;
                }
                for v in prow.iter_mut() {
                    *v /= denom;
                }
            }
            let term = max_logit + denom.ln() - crow[i] / tau;
            if !term.is_finite() {
                return Err(Error::Numerical(format!(
                    "contrastive loss is not finite at layer {l}, node {}",
                    nodes[i]
                )));
            }
            total += term;
        }
        layers.push(NceLayer {
            zhat,
            ghat,
            znorm,
            gnorm,
            c,
            p,
        });
    }
    Ok((total, layers))
}

/// Per-layer InfoNCE with cosine similarity: anchors come from the
/// propagated layers z, candidates from the fused views g; negatives are
/// the other nodes of `nodes`. Zero-norm rows take cosine 0 by convention.
pub fn infonce(
    z_layers: &[DenseMatrix],
    g_layers: &[DenseMatrix],
    nodes: &[u32],
    tau: f64,
) -> Result<f64> {
    Ok(infonce_layers(z_layers, g_layers, nodes, tau)?.0)
}

/// Accumulate d(total)/dz and d(total)/dg for one InfoNCE side, scaled by
/// `weight` (λ₁). For row-normalized x̂ = x/‖x‖ the chain rule gives
/// dx = (dx̂ − (dx̂·x̂)x̂)/‖x‖; rows with zero norm get zero gradient.
fn infonce_backward_side(
    layers: &[NceLayer],
    nodes: &[u32],
    weight: f64,
    tau: f64,
    dz_layers: &mut [DenseMatrix],
    dg_layers: &mut [DenseMatrix],
) -> Result<()> {
    let b = nodes.len();
    let scale = weight / tau;
    for (l, lay) in layers.iter().enumerate() {
        // W_ij = λ₁ (p_ij − δ_ij) / τ, row i being anchor i's softmax.
        let mut w = lay.p.clone();
        for i in 0..b {
            let v = w.get(i, i) - 1.0;
            w.set(i, i, v);
        }
        w.scale(scale);
        let dzhat = w.matmul(&lay.ghat)?;
        let dghat = w.matmul_tn(&lay.zhat)?;
        // (dẑ_i·ẑ_i) = Σ_j W_ij C_ij and (dĝ_j·ĝ_j) = Σ_i W_ij C_ij.
        let mut rowdot = vec![0.0; b];
        let mut coldot = vec![0.0; b];
        for i in 0..b {
            let wrow = w.row(i);
            let crow = lay.c.row(i);
            for j in 0..b {
                let prod = wrow[j] * crow[j];
                rowdot[i] += prod;
                coldot[j] += prod;
            }
        }
        for i in 0..b {
            if lay.znorm[i] == 0.0 {
                continue;
            }
            let dst = dz_layers[l].row_mut(nodes[i] as usize);
            let src = dzhat.row(i);
            let zrow = lay.zhat.row(i);
            let inv = 1.0 / lay.znorm[i];
            for k in 0..dst.len() {
                dst[k] += (src[k] - rowdot[i] * zrow[k]) * inv;
            }
        }
        for j in 0..b {
            if lay.gnorm[j] == 0.0 {
                continue;
            }
            let dst = dg_layers[l].row_mut(nodes[j] as usize);
            let src = dghat.row(j);
            let grow = lay.ghat.row(j);
            let inv = 1.0 / lay.gnorm[j];
            for k in 0..dst.len() {
                dst[k] += (src[k] - coldot[j] * grow[k]) * inv;
            }
        }
    }
    Ok(())
}

/// Squared L2 norm of the embedding rows the batch touches: its distinct
/// users plus its distinct positive/negative items.
pub fn l2_reg(e0_user: &DenseMatrix, e0_item: &DenseMatrix, batch: &Batch) -> f64 {
    let mut total = 0.0;
    for &u in &batch.user_nodes() {
        let row = e0_user.row(u as usize);
        total += dot(row, row);
    }
    for &i in &batch.item_nodes() {
        let row = e0_item.row(i as usize);
        total += dot(row, row);
    }
    total
}

/// The loss components of one step. `total` applies the configured
/// weights; the components are stored unweighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cl_user: f64,
    pub cl_item: f64,
    pub reg: f64,
    pub total: f64,
}

fn batch_scores(state: &EmbeddingState, batch: &Batch) -> Result<(Vec<f64>, Vec<f64>)> {
    if state.e_user.rows() == 0 {
        return Err(Error::Internal("scores requested before readout".into()));
    }
    let m = state.e_user.rows() as u32;
    let n = state.e_item.rows() as u32;
    let mut pos = Vec::with_capacity(batch.len());
    let mut neg = Vec::with_capacity(batch.negatives.len());
    for b in 0..batch.len() {
        let (u, p) = (batch.users[b], batch.positives[b]);
        if u >= m || p >= n {
            return Err(Error::Shape(format!(
                "batch references user {u} / item {p} outside tables {m}x{n}"
            )));
        }
        pos.push(dot(state.e_user.row(u as usize), state.e_item.row(p as usize)));
        for &i in batch.negatives_of(b) {
            if i >= n {
                return Err(Error::Shape(format!(
                    "batch references item {i} outside table of {n}"
                )));
            }
            neg.push(dot(state.e_user.row(u as usize), state.e_item.row(i as usize)));
        }
    }
    Ok((pos, neg))
}

fn rec_loss_and_grads(
    loss: RecLoss,
    pos: &[f64],
    neg: &[f64],
    s_per_pos: usize,
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut value = 0.0;
    let mut dpos = vec![0.0; pos.len()];
    let mut dneg = vec![0.0; neg.len()];
    for b in 0..pos.len() {
        for s in 0..s_per_pos {
            let f = b * s_per_pos + s;
            match loss {
                RecLoss::Hinge => {
                    let margin = 1.0 - pos[b] + neg[f];
                    if margin > 0.0 {
                        value += margin;
                        dpos[b] -= 1.0;
                        dneg[f] += 1.0;
                    }
                }
                RecLoss::Bpr => {
                    let x = pos[b] - neg[f];
                    value += softplus(-x);
                    let g = sigmoid(-x);
                    dpos[b] -= g;
                    dneg[f] += g;
                }
            }
        }
    }
    (value, dpos, dneg)
}

fn contrastive_nodes(config: &TrainConfig, batch: &Batch, m: usize, n: usize) -> (Vec<u32>, Vec<u32>) {
    if config.cl_full_set {
        ((0..m as u32).collect(), (0..n as u32).collect())
    } else {
        (batch.user_nodes(), batch.item_nodes())
    }
}

fn assemble_breakdown(
    config: &TrainConfig,
    rec: f64,
    cl_user: f64,
    cl_item: f64,
    reg: f64,
) -> Result<LossBreakdown> {
    let total = rec + config.cl_weight * (cl_user + cl_item) + config.l2 * reg;
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "total loss is not finite (rec={rec}, cl_user={cl_user}, cl_item={cl_item}, reg={reg})"
        )));
    }
    Ok(LossBreakdown {
        rec,
        cl_user,
        cl_item,
        reg,
        total,
    })
}

/// Losses of one step given a completed forward pass (propagation, views,
/// readout already in `state`).
pub fn step_losses(
    state: &EmbeddingState,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let (pos, neg) = batch_scores(state, batch)?;
    let (rec, _, _) = rec_loss_and_grads(config.rec_loss, &pos, &neg, batch.s_per_pos);
    let (cl_user, cl_item) = if state.g_user.is_empty() {
        (0.0, 0.0)
    } else {
        let (unodes, inodes) =
            contrastive_nodes(config, batch, state.e0_user.rows(), state.e0_item.rows());
        (
            infonce(&state.z_user, &state.g_user, &unodes, config.tau)?,
            infonce(&state.z_item, &state.g_item, &inodes, config.tau)?,
        )
    };
    let reg = l2_reg(&state.e0_user, &state.e0_item, batch);
    assemble_breakdown(config, rec, cl_user, cl_item, reg)
}

fn activation_backward(dout: &DenseMatrix, pre: &DenseMatrix, act: Activation) -> DenseMatrix {
    let values = dout
        .values()
        .iter()
        .zip(pre.values())
        .map(|(d, p)| d * act.derivative(*p))
        .collect();
    DenseMatrix::from_vec(dout.rows(), dout.cols(), values).expect("same shape")
}

fn fuse_backward(
    variant: Variant,
    fusion: Fusion,
    view: &ViewLayerTrace,
    dpre: DenseMatrix,
) -> Result<(Option<DenseMatrix>, Option<DenseMatrix>)> {
    match variant {
        Variant::MfOnly => Ok((Some(dpre), None)),
        Variant::SvdOnly => Ok((None, Some(dpre))),
        Variant::Full => {
            let m = view
                .m
                .as_ref()
                .ok_or_else(|| Error::Internal("hybrid view trace lacks its MF stream".into()))?;
            let s = view
                .s
                .as_ref()
                .ok_or_else(|| Error::Internal("hybrid view trace lacks its SVD stream".into()))?;
            match fusion {
                Fusion::Hadamard => Ok((Some(dpre.hadamard(s)?), Some(dpre.hadamard(m)?))),
                Fusion::Sum => Ok((Some(dpre.clone()), Some(dpre))),
                Fusion::Mean => {
                    let mut half = dpre;
                    half.scale(0.5);
                    Ok((Some(half.clone()), Some(half)))
                }
            }
        }
        Variant::None => Err(Error::Internal("view backward without views".into())),
    }
}

fn scale_rows_inplace(x: &mut DenseMatrix, factors: &[f64]) {
    for (r, &f) in factors.iter().enumerate() {
        for v in x.row_mut(r).iter_mut() {
            *v *= f;
        }
    }
}

fn axpy_row(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Reverse-mode gradients of the step's total loss with respect to the
/// E0 tables. Factorization outputs, the adjacency, and the step's noise
/// draws are constants. Returns the loss breakdown alongside so the
/// forward quantities are computed exactly once.
pub fn backward(
    adj: &NormalizedAdjacency,
    factors: &LowRankFactors,
    state: &EmbeddingState,
    trace: &ForwardTrace,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(DenseMatrix, DenseMatrix, LossBreakdown)> {
    let layers = config.layers;
    let (m, d) = state.e0_user.shape();
    let n = state.e0_item.rows();
    let has_views = config.variant != Variant::None;
    if state.z_user.len() != layers + 1
        || trace.pre_user.len() != layers
        || (has_views && (state.g_user.len() != layers + 1 || trace.view_user.len() != layers))
        || (!has_views && !state.g_user.is_empty())
    {
        return Err(Error::Internal(format!(
            "forward trace does not match the configuration: {} z layers, {} pre layers, {} view layers for L={layers}",
            state.z_user.len(),
            trace.pre_user.len(),
            trace.view_user.len()
        )));
    }

    // Ranking loss and its gradient with respect to the readout rows.
    let (pos, neg) = batch_scores(state, batch)?;
    let (rec, dpos, dneg) = rec_loss_and_grads(config.rec_loss, &pos, &neg, batch.s_per_pos);
    let mut d_eu = DenseMatrix::zeros(m, d);
    let mut d_ei = DenseMatrix::zeros(n, d);
    for b in 0..batch.len() {
        let u = batch.users[b] as usize;
        let p = batch.positives[b] as usize;
        if dpos[b] != 0.0 {
            axpy_row(d_eu.row_mut(u), dpos[b], state.e_item.row(p));
            axpy_row(d_ei.row_mut(p), dpos[b], state.e_user.row(u));
        }
        for (s, &item) in batch.negatives_of(b).iter().enumerate() {
            let f = b * batch.s_per_pos + s;
            if dneg[f] != 0.0 {
                axpy_row(d_eu.row_mut(u), dneg[f], state.e_item.row(item as usize));
                axpy_row(d_ei.row_mut(item as usize), dneg[f], state.e_user.row(u));
            }
        }
    }

    // Per-layer gradient buffers.
    let mut dz_u: Vec<DenseMatrix> = (0..=layers).map(|_| DenseMatrix::zeros(m, d)).collect();
    let mut dz_i: Vec<DenseMatrix> = (0..=layers).map(|_| DenseMatrix::zeros(n, d)).collect();
    let (mut dg_u, mut dg_i): (Vec<DenseMatrix>, Vec<DenseMatrix>) = if has_views {
        (
            (0..=layers).map(|_| DenseMatrix::zeros(m, d)).collect(),
            (0..=layers).map(|_| DenseMatrix::zeros(n, d)).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };

    // Readout backward: the readout is a fixed linear combination of the
    // propagation layers.
    let layer_weight = match config.readout {
        crate::config::Readout::Sum => 1.0,
        crate::config::Readout::Mean => 1.0 / (layers + 1) as f64,
        crate::config::Readout::Last => 1.0,
    };
    match config.readout {
        crate::config::Readout::Last => {
            dz_u[layers].axpy(layer_weight, &d_eu)?;
            dz_i[layers].axpy(layer_weight, &d_ei)?;
        }
        _ => {
            for l in 0..=layers {
                dz_u[l].axpy(layer_weight, &d_eu)?;
                dz_i[l].axpy(layer_weight, &d_ei)?;
            }
        }
    }

    // Contrastive terms and their gradients into z and g layers.
    let (cl_user, cl_item) = if has_views {
        let (unodes, inodes) = contrastive_nodes(config, batch, m, n);
        let (cu, ulayers) = infonce_layers(&state.z_user, &state.g_user, &unodes, config.tau)?;
        let (ci, ilayers) = infonce_layers(&state.z_item, &state.g_item, &inodes, config.tau)?;
        if config.cl_weight != 0.0 {
            infonce_backward_side(
                &ulayers,
                &unodes,
                config.cl_weight,
                config.tau,
                &mut dz_u,
                &mut dg_u,
            )?;
            infonce_backward_side(
                &ilayers,
                &inodes,
                config.cl_weight,
                config.tau,
                &mut dz_i,
                &mut dg_i,
            )?;
        }
        (cu, ci)
    } else {
        (0.0, 0.0)
    };

    let reg = l2_reg(&state.e0_user, &state.e0_item, batch);

    // Descend through the layers. Layer l writes only into layer l−1, and
    // all direct contributions (readout, InfoNCE) are already in place, so
    // each dz[l] is complete when its turn comes.
    for l in (1..=layers).rev() {
        if has_views {
            // User-side view g_u[l] consumed z_item[l−1].
            let view = &trace.view_user[l - 1];
            let dpre = activation_backward(&dg_u[l], &view.pre, config.activation);
            let (dm, ds) = fuse_backward(config.variant, config.fusion, view, dpre)?;
            if let Some(dm) = dm {
                let mf = factors.mf.as_ref().ok_or_else(|| {
                    Error::Internal("MF stream gradient without MF factors".into())
                })?;
                let inner = mf.p.matmul_tn(&dm)?;
                dz_i[l - 1].axpy(1.0, &mf.q.matmul(&inner)?)?;
            }
            if let Some(ds) = ds {
                let svd = factors.svd.as_ref().ok_or_else(|| {
                    Error::Internal("SVD stream gradient without SVD factors".into())
                })?;
                let mut inner = svd.u.matmul_tn(&ds)?;
                scale_rows_inplace(&mut inner, &svd.s);
                dz_i[l - 1].axpy(1.0, &svd.v.matmul(&inner)?)?;
            }
            // Item-side view g_i[l] consumed z_user[l−1].
            let view = &trace.view_item[l - 1];
            let dpre = activation_backward(&dg_i[l], &view.pre, config.activation);
            let (dm, ds) = fuse_backward(config.variant, config.fusion, view, dpre)?;
            if let Some(dm) = dm {
                let mf = factors.mf.as_ref().expect("checked above");
                let inner = mf.q.matmul_tn(&dm)?;
                dz_u[l - 1].axpy(1.0, &mf.p.matmul(&inner)?)?;
            }
            if let Some(ds) = ds {
                let svd = factors.svd.as_ref().expect("checked above");
                let mut inner = svd.v.matmul_tn(&ds)?;
                scale_rows_inplace(&mut inner, &svd.s);
                dz_u[l - 1].axpy(1.0, &svd.u.matmul(&inner)?)?;
            }
        }
        // Main propagation backward.
        let dpre_u = activation_backward(&dz_u[l], &trace.pre_user[l - 1], config.activation);
        let dpre_i = activation_backward(&dz_i[l], &trace.pre_item[l - 1], config.activation);
        dz_i[l - 1].axpy(1.0, &adj.matrix.spmm_t(&dpre_u)?)?;
        dz_u[l - 1].axpy(1.0, &adj.matrix.spmm(&dpre_i)?)?;
    }

    // z[0] = g[0] = E0, plus the regularizer on touched rows.
    let mut d_e0u = std::mem::replace(&mut dz_u[0], DenseMatrix::zeros(0, 0));
    let mut d_e0i = std::mem::replace(&mut dz_i[0], DenseMatrix::zeros(0, 0));
    if has_views {
        d_e0u.axpy(1.0, &dg_u[0])?;
        d_e0i.axpy(1.0, &dg_i[0])?;
    }
    let reg_scale = 2.0 * config.l2;
    for &u in &batch.user_nodes() {
        axpy_row(
            d_e0u.row_mut(u as usize),
            reg_scale,
            state.e0_user.row(u as usize),
        );
    }
    for &i in &batch.item_nodes() {
        axpy_row(
            d_e0i.row_mut(i as usize),
            reg_scale,
            state.e0_item.row(i as usize),
        );
    }

    let breakdown = assemble_breakdown(config, rec, cl_user, cl_item, reg)?;
    Ok((d_e0u, d_e0i, breakdown))
}

/// One row of the per-epoch loss log: batch-mean loss components plus the
/// post-epoch validation recall.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rec: f64,
    pub cl_user: f64,
    pub cl_item: f64,
    pub reg: f64,
    pub total: f64,
    pub valid_recall20: f64,
}

/// A finished training run: the best-validation state (readout computed
/// noise-free), the loss log, and test metrics of the returned state.
pub struct TrainOutcome {
    pub state: EmbeddingState,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub report: MetricsReport,
}

pub fn train(matrix: &InteractionMatrix, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_options(matrix, config, None, &mut |_| Ok(()))
}

/// The epoch loop: sample → propagate (fresh noise) → fuse views → read
/// out → losses → backward → Adam, then a validation probe. Early stopping
/// restores the best-validation tables. `on_epoch` fires after each epoch
/// so callers can persist the loss log incrementally; a divergent run
/// aborts with the last finite epoch named, and rows already emitted stand.
pub fn train_with_options(
    matrix: &InteractionMatrix,
    config: &TrainConfig,
    factor_cache_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if matrix.split_len(Split::Test) == 0 {
        return Err(Error::Data(
            "test split is empty; prepare the dataset with a positive test ratio".into(),
        ));
    }
    let adj = normalize(matrix)?;
    let dataset_hash = matrix.content_hash()?;
    let factors = build_factors_cached(&adj, config, &dataset_hash, factor_cache_dir)?;
    let index = TrainIndex::build(matrix)?;
    let (m, n) = (matrix.num_users, matrix.num_items);
    let mut state = init_embeddings(m, n, config.d, config.seed);
    let mut adam_user = Adam::new(m, config.d);
    let mut adam_item = Adam::new(n, config.d);
    let mut rng_noise = seeded(config.seed, Stream::Noise);
    let mut rng_sampling = seeded(config.seed, Stream::Sampling);
    let noise = config.noise_spec();
    let batches_per_epoch = index.len().div_ceil(config.batch_size);
    let has_valid = matrix.split_len(Split::Valid) > 0;

    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best_recall = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_tables: Option<(DenseMatrix, DenseMatrix)> = None;
    let mut stale = 0usize;

    'epochs: for epoch in 1..=config.max_epochs {
        let mut sums = [0.0f64; 5];
        for _ in 0..batches_per_epoch {
            let batch = sample_batch(&index, config.batch_size, config.negatives, &mut rng_sampling)?;
            let step = (|| -> Result<LossBreakdown> {
                let mut trace = forward_main(
                    &adj,
                    &mut state,
                    config.layers,
                    &noise,
                    config.activation,
                    &mut rng_noise,
                )?;
                forward_views(
                    &factors,
                    &mut state,
                    config.layers,
                    config.activation,
                    config.fusion,
                    config.variant,
                    &mut trace,
                )?;
                readout(&mut state, config.readout)?;
                let (d_e0u, d_e0i, losses) =
                    backward(&adj, &factors, &state, &trace, &batch, config)?;
                adam_user.step(&mut state.e0_user, &d_e0u, config.lr)?;
                adam_item.step(&mut state.e0_item, &d_e0i, config.lr)?;
                Ok(losses)
            })();
            let losses = step.map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "training diverged at epoch {epoch}: {msg}; last finite epoch {}",
                    epoch - 1
                )),
                other => other,
            })?;
            sums[0] += losses.rec;
            sums[1] += losses.cl_user;
            sums[2] += losses.cl_item;
            sums[3] += losses.reg;
            sums[4] += losses.total;
        }
        let denom = batches_per_epoch as f64;
        noise_free_readout(&adj, &mut state, config.layers, config.activation, config.readout)?;
        let valid_recall20 = if has_valid {
            eval::recall_at_split(&state.e_user, &state.e_item, matrix, Split::Valid, 20)?
        } else {
            0.0
        };
        let record = EpochRecord {
            epoch,
            rec: sums[0] / denom,
            cl_user: sums[1] / denom,
            cl_item: sums[2] / denom,
            reg: sums[3] / denom,
            total: sums[4] / denom,
            valid_recall20,
        };
        on_epoch(&record)?;
        epochs.push(record);
        if has_valid {
            if valid_recall20 > best_recall {
                best_recall = valid_recall20;
                best_epoch = epoch;
                best_tables = Some((state.e0_user.clone(), state.e0_item.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break 'epochs;
                }
            }
        } else {
            best_epoch = epoch;
        }
    }

    if let Some((bu, bi)) = best_tables {
        state.e0_user = bu;
        state.e0_item = bi;
    }
    noise_free_readout(&adj, &mut state, config.layers, config.activation, config.readout)?;
    let started = std::time::Instant::now();
    let (recall, ndcg, _) = eval::evaluate_tables(
        &state.e_user,
        &state.e_item,
        matrix,
        Split::Test,
        &config.eval_ks,
        false,
    )?;
    let report = MetricsReport {
        dataset: dataset_hash,
        config_hash: config.config_hash(),
        seed: config.seed,
        split: Split::Test,
        recall,
        ndcg,
        per_user: None,
        runtime_s: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        state,
        epochs,
        best_epoch,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Readout;
    use crate::data::{build_matrix, Entry, IdMap, RawInteraction};
    use crate::factorization::build_factors;
    use approx::assert_abs_diff_eq;

    fn manual_matrix(
        num_users: usize,
        num_items: usize,
        entries: &[(u32, u32, Split)],
    ) -> InteractionMatrix {
        let mut list: Vec<Entry> = entries
            .iter()
            .map(|&(user, item, split)| Entry { user, item, split })
            .collect();
        list.sort_by_key(|e| (e.user, e.item));
        InteractionMatrix {
            num_users,
            num_items,
            entries: list,
            user_map: IdMap::from_keys((0..num_users).map(|u| format!("u{u}")).collect())
                .unwrap(),
            item_map: IdMap::from_keys((0..num_items).map(|i| format!("i{i}")).collect())
                .unwrap(),
            seed: 0,
        }
    }

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
    fn sampled_negative_avoids_train_items() {
        let matrix = manual_matrix(1, 3, &[(0, 0, Split::Train)]);
        let index = TrainIndex::build(&matrix).unwrap();
        let mut rng = seeded(1, Stream::Sampling);
        for _ in 0..50 {
            let batch = sample_batch(&index, 4, 1, &mut rng).unwrap();
            assert!(batch.users.iter().all(|&u| u == 0));
            assert!(batch.positives.iter().all(|&p| p == 0));
            assert!(batch.negatives.iter().all(|&n| n == 1 || n == 2));
        }
    }

    #[test]
    fn batch_has_requested_shape_and_range() {
        let matrix = toy_matrix(6, 9, 3);
        let index = TrainIndex::build(&matrix).unwrap();
        let mut rng = seeded(2, Stream::Sampling);
        let batch = sample_batch(&index, 7, 2, &mut rng).unwrap();
        assert_eq!(batch.users.len(), 7);
        assert_eq!(batch.positives.len(), 7);
        assert_eq!(batch.negatives.len(), 14);
        let train = matrix.items_per_user(Split::Train);
        for b in 0..batch.len() {
            let u = batch.users[b] as usize;
            assert!(train[u].contains(&batch.positives[b]));
            for neg in batch.negatives_of(b) {
                assert!(!train[u].contains(neg));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_rng_state() {
        let matrix = toy_matrix(6, 9, 3);
        let index = TrainIndex::build(&matrix).unwrap();
        let mut a = seeded(5, Stream::Sampling);
        let mut b = seeded(5, Stream::Sampling);
        let ba = sample_batch(&index, 16, 2, &mut a).unwrap();
        let bb = sample_batch(&index, 16, 2, &mut b).unwrap();
        assert_eq!(ba.users, bb.users);
        assert_eq!(ba.positives, bb.positives);
        assert_eq!(ba.negatives, bb.negatives);
    }

    #[test]
    fn saturated_user_reports_error() {
        let matrix = manual_matrix(
            1,
            2,
            &[(0, 0, Split::Train), (0, 1, Split::Train)],
        );
        let index = TrainIndex::build(&matrix).unwrap();
        let mut rng = seeded(1, Stream::Sampling);
        match sample_batch(&index, 1, 1, &mut rng) {
            Err(Error::Data(msg)) => assert!(msg.contains("u0"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let matrix = manual_matrix(1, 2, &[(0, 0, Split::Test)]);
        assert!(matches!(TrainIndex::build(&matrix), Err(Error::Data(_))));
    }

    #[test]
    fn node_sets_are_sorted_and_deduplicated() {
        let batch = Batch {
            users: vec![3, 1, 3, 2],
            positives: vec![5, 0, 5, 2],
            negatives: vec![7, 0, 1, 5],
            s_per_pos: 1,
        };
        assert_eq!(batch.user_nodes(), vec![1, 2, 3]);
        assert_eq!(batch.item_nodes(), vec![0, 1, 2, 5, 7]);
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(rec_loss_hinge(&[2.0, 3.0], &[0.5, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            rec_loss_hinge(&[0.2], &[0.5]).unwrap(),
            1.3,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            rec_loss_hinge(&[0.4, -1.0], &[0.4, -1.0]).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert!(rec_loss_hinge(&[1.0], &[]).is_err());
    }

    #[test]
    fn bpr_examples() {
        assert_abs_diff_eq!(
            rec_loss_bpr(&[0.7], &[0.7]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            rec_loss_bpr(&[20.0], &[0.0]).unwrap(),
            2.061e-9,
            epsilon = 1e-11
        );
        let mut last = f64::INFINITY;
        for gap in [-2.0, -1.0, 0.0, 1.0, 2.0, 5.0] {
            let v = rec_loss_bpr(&[gap], &[0.0]).unwrap();
            assert!(v < last, "not strictly decreasing at gap {gap}");
            last = v;
        }
    }

    #[test]
    fn infonce_single_node_is_zero() {
        let z = vec![DenseMatrix::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.4]).unwrap()];
        let g = vec![DenseMatrix::from_vec(3, 2, vec![0.5, -2.0, 1.0, 1.5, 0.3, 0.4]).unwrap()];
        let v = infonce(&z, &g, &[1], 0.2).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn infonce_collapsed_cosines_hit_closed_form() {
        // Every row parallel to (1, 1): all pairwise cosines are 1, so each
        // of the B nodes contributes ln B per layer.
        let layer = |scales: &[f64]| {
            DenseMatrix::from_fn(scales.len(), 2, |i, _| scales[i])
        };
        let z = vec![layer(&[1.0, 2.0, 0.5, 3.0]), layer(&[0.2, 1.5, 2.5, 0.7])];
        let g = vec![layer(&[4.0, 0.1, 1.0, 2.0]), layer(&[1.0, 1.0, 3.0, 0.3])];
        let v = infonce(&z, &g, &[0, 1, 2, 3], 0.2).unwrap();
        assert_abs_diff_eq!(v, 2.0 * 4.0 * 4f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn infonce_is_nonnegative() {
        let mut rng = seeded(3, Stream::Init);
        for _ in 0..20 {
            let z = vec![DenseMatrix::from_fn(5, 3, |_, _| rng.random::<f64>() - 0.5)];
            let g = vec![DenseMatrix::from_fn(5, 3, |_, _| rng.random::<f64>() - 0.5)];
            let v = infonce(&z, &g, &[0, 1, 2, 3, 4], 0.3).unwrap();
            assert!(v >= 0.0, "{v}");
        }
    }

    #[test]
    fn infonce_zero_norm_rows_use_cosine_zero() {
        let z = vec![DenseMatrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap()];
        let g = vec![DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap()];
        // Anchor 0 has a zero row: both its cosines are 0, so its softmax is
        // uniform and its term is ln 2. Anchor 1 has cosines (1, 1): ln 2 too.
        let v = infonce(&z, &g, &[0, 1], 1.0).unwrap();
        assert_abs_diff_eq!(v, 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn infonce_rejects_bad_temperature() {
        let z = vec![DenseMatrix::zeros(2, 2)];
        assert!(matches!(
            infonce(&z.clone(), &z, &[0], 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn l2_reg_examples() {
        let batch = Batch {
            users: vec![0, 0],
            positives: vec![0, 0],
            negatives: vec![1, 1],
            s_per_pos: 1,
        };
        let zeros = DenseMatrix::zeros(2, 2);
        assert_eq!(l2_reg(&zeros, &zeros, &batch), 0.0);
        let e_user = DenseMatrix::from_vec(2, 2, vec![3.0, 4.0, 9.0, 9.0]).unwrap();
        let e_item = DenseMatrix::zeros(2, 2);
        // Only user 0 is touched; duplicates do not double count.
        assert_eq!(l2_reg(&e_user, &e_item, &batch), 25.0);
    }

    #[test]
    fn l2_reg_full_coverage_equals_table_norms() {
        let e_user = DenseMatrix::from_fn(3, 2, |i, j| (i + j) as f64 + 0.5);
        let e_item = DenseMatrix::from_fn(4, 2, |i, j| (i as f64 - j as f64) * 0.3);
        let batch = Batch {
            users: vec![0, 1, 2],
            positives: vec![0, 1, 2],
            negatives: vec![3, 0, 1],
            s_per_pos: 1,
        };
        let whole: f64 = e_user
            .values()
            .iter()
            .chain(e_item.values())
            .map(|v| v * v)
            .sum();
        assert_abs_diff_eq!(l2_reg(&e_user, &e_item, &batch), whole, epsilon = 1e-12);
    }

    struct FdFixture {
        adj: NormalizedAdjacency,
        factors: LowRankFactors,
        config: TrainConfig,
        batch: Batch,
    }

    fn fd_fixture(seed: u64) -> FdFixture {
        let matrix = manual_matrix(
            3,
            4,
            &[
                (0, 0, Split::Train),
                (0, 1, Split::Train),
                (1, 1, Split::Train),
                (1, 2, Split::Train),
                (2, 2, Split::Train),
                (2, 3, Split::Train),
                (0, 2, Split::Test),
                (1, 3, Split::Test),
                (2, 0, Split::Test),
            ],
        );
        let adj = normalize(&matrix).unwrap();
        let mut config = TrainConfig::default();
        config.d = 2;
        config.layers = 1 + (seed as usize % 2);
        config.epsilon = 0.0;
        config.l2 = 0.01;
        config.cl_weight = 0.5;
        config.tau = 0.3;
        config.mf_rank = 2;
        config.svd_rank = 2;
        config.mf_iters = 25;
        config.seed = seed;
        config.variant = [Variant::Full, Variant::None, Variant::MfOnly, Variant::SvdOnly]
            [seed as usize % 4];
        config.rec_loss = [RecLoss::Hinge, RecLoss::Bpr][seed as usize % 2];
        config.activation = [Activation::Identity, Activation::Leaky][(seed as usize / 2) % 2];
        config.readout = [Readout::Sum, Readout::Mean, Readout::Last][seed as usize % 3];
        config.fusion = [Fusion::Hadamard, Fusion::Sum, Fusion::Mean][(seed as usize / 3) % 3];
        config.cl_full_set = seed % 5 == 0;
        config.negatives = 1 + (seed as usize / 4) % 2;
        let factors = build_factors(&adj, &config).unwrap();
        let index = TrainIndex::build(&matrix).unwrap();
        let mut rng = seeded(seed, Stream::Sampling);
        let batch = sample_batch(&index, 5, config.negatives, &mut rng).unwrap();
        FdFixture {
            adj,
            factors,
            config,
            batch,
        }
    }

    fn forward_all(
        f: &FdFixture,
        e0u: &DenseMatrix,
        e0i: &DenseMatrix,
    ) -> (EmbeddingState, ForwardTrace) {
        let mut state = EmbeddingState {
            e0_user: e0u.clone(),
            e0_item: e0i.clone(),
            z_user: Vec::new(),
            z_item: Vec::new(),
            g_user: Vec::new(),
            g_item: Vec::new(),
            e_user: DenseMatrix::zeros(0, 0),
            e_item: DenseMatrix::zeros(0, 0),
        };
        let mut rng = seeded(0, Stream::Noise);
        let mut trace = forward_main(
            &f.adj,
            &mut state,
            f.config.layers,
            &f.config.noise_spec(),
            f.config.activation,
            &mut rng,
        )
        .unwrap();
        forward_views(
            &f.factors,
            &mut state,
            f.config.layers,
            f.config.activation,
            f.config.fusion,
            f.config.variant,
            &mut trace,
        )
        .unwrap();
        readout(&mut state, f.config.readout).unwrap();
        (state, trace)
    }

    /// True when the fixture sits too close to a kink (hinge margin or
    /// leaky-activation corner) or a zero norm for finite differences to
    /// be trustworthy.
    fn near_kink(f: &FdFixture, state: &EmbeddingState, trace: &ForwardTrace) -> bool {
        let guard = 1e-3;
        if f.config.rec_loss == RecLoss::Hinge {
            let (pos, neg) = batch_scores(state, &f.batch).unwrap();
            for b in 0..pos.len() {
                for s in 0..f.batch.s_per_pos {
                    if (1.0 - pos[b] + neg[b * f.batch.s_per_pos + s]).abs() < guard {
                        return true;
                    }
                }
            }
        }
        if f.config.activation == Activation::Leaky {
            for pre in trace
                .pre_user
                .iter()
                .chain(&trace.pre_item)
                .chain(trace.view_user.iter().map(|v| &v.pre))
                .chain(trace.view_item.iter().map(|v| &v.pre))
            {
                if pre.values().iter().any(|v| v.abs() < guard) {
                    return true;
                }
            }
        }
        for layer in state
            .z_user
            .iter()
            .chain(&state.z_item)
            .chain(&state.g_user)
            .chain(&state.g_item)
        {
            for r in 0..layer.rows() {
                let row = layer.row(r);
                if dot(row, row).sqrt() < guard {
                    return true;
                }
            }
        }
        false
    }

    fn fd_max_rel_err(seed: u64) -> Option<f64> {
        let f = fd_fixture(seed);
        let base = init_embeddings(3, 4, f.config.d, seed);
        let (state, trace) = forward_all(&f, &base.e0_user, &base.e0_item);
        if near_kink(&f, &state, &trace) {
            return None;
        }
        let (an_u, an_i, _) =
            backward(&f.adj, &f.factors, &state, &trace, &f.batch, &f.config).unwrap();
        let h = 1e-5;
        let total_at = |e0u: &DenseMatrix, e0i: &DenseMatrix| -> f64 {
            let (s, _) = forward_all(&f, e0u, e0i);
            step_losses(&s, &f.batch, &f.config).unwrap().total
        };
        let mut max_rel: f64 = 0.0;
        let mut check = |table: &DenseMatrix, analytic: &DenseMatrix, is_user: bool| {
            for r in 0..table.rows() {
                for c in 0..table.cols() {
                    let mut plus = table.clone();
                    plus.set(r, c, plus.get(r, c) + h);
                    let mut minus = table.clone();
                    minus.set(r, c, minus.get(r, c) - h);
                    let (fp, fm) = if is_user {
                        (total_at(&plus, &base.e0_item), total_at(&minus, &base.e0_item))
                    } else {
                        (total_at(&base.e0_user, &plus), total_at(&base.e0_user, &minus))
                    };
                    let fd = (fp - fm) / (2.0 * h);
                    let an = analytic.get(r, c);
                    // Mixed test: entries below 1e-5 compare absolutely.
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-5);
                    max_rel = max_rel.max(rel);
                }
            }
        };
        check(&base.e0_user, &an_u, true);
        check(&base.e0_item, &an_i, false);
        Some(max_rel)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for seed in 0..25u64 {
            if let Some(err) = fd_max_rel_err(seed) {
                checked += 1;
                worst = worst.max(err);
                assert!(err <= 1e-4, "seed {seed}: max relative error {err}");
            }
        }
        assert!(checked >= 15, "only {checked} seeds usable; worst {worst}");
    }

    #[test]
    fn doubling_cl_weight_doubles_its_gradient_share() {
        let f = fd_fixture(0);
        assert_eq!(f.config.variant, Variant::Full);
        let base = init_embeddings(3, 4, f.config.d, 0);
        let (state, trace) = forward_all(&f, &base.e0_user, &base.e0_item);
        let grad_with = |w: f64| {
            let mut config = f.config.clone();
            config.cl_weight = w;
            let (gu, gi, _) =
                backward(&f.adj, &f.factors, &state, &trace, &f.batch, &config).unwrap();
            (gu, gi)
        };
        let (u0, i0) = grad_with(0.0);
        let (u1, i1) = grad_with(0.25);
        let (u2, i2) = grad_with(0.5);
        for ((a0, a1), a2) in u0
            .values()
            .iter()
            .zip(u1.values())
            .zip(u2.values())
            .chain(i0.values().iter().zip(i1.values()).zip(i2.values()))
        {
            assert_abs_diff_eq!(a2 - a0, 2.0 * (a1 - a0), epsilon = 1e-10);
        }
    }

    #[test]
    fn rows_outside_the_loss_cone_get_zero_gradient() {
        // Three disconnected user–item pairs; the batch touches only the
        // first two components, so component 3's rows cannot influence the
        // loss and must receive exactly zero gradient.
        let matrix = manual_matrix(
            3,
            3,
            &[
                (0, 0, Split::Train),
                (1, 1, Split::Train),
                (2, 2, Split::Train),
            ],
        );
        let adj = normalize(&matrix).unwrap();
        let mut config = TrainConfig::default();
        config.d = 2;
        config.layers = 1;
        config.epsilon = 0.0;
        config.variant = Variant::None;
        config.l2 = 0.01;
        let factors = LowRankFactors::default();
        let batch = Batch {
            users: vec![0],
            positives: vec![0],
            negatives: vec![1],
            s_per_pos: 1,
        };
        let base = init_embeddings(3, 3, 2, 9);
        let mut state = EmbeddingState {
            e0_user: base.e0_user.clone(),
            e0_item: base.e0_item.clone(),
            z_user: Vec::new(),
            z_item: Vec::new(),
            g_user: Vec::new(),
            g_item: Vec::new(),
            e_user: DenseMatrix::zeros(0, 0),
            e_item: DenseMatrix::zeros(0, 0),
        };
        let mut rng = seeded(0, Stream::Noise);
        let mut trace = forward_main(
            &adj,
            &mut state,
            1,
            &config.noise_spec(),
            config.activation,
            &mut rng,
        )
        .unwrap();
        forward_views(
            &factors,
            &mut state,
            1,
            config.activation,
            config.fusion,
            config.variant,
            &mut trace,
        )
        .unwrap();
        readout(&mut state, config.readout).unwrap();
        let (gu, gi, _) = backward(&adj, &factors, &state, &trace, &batch, &config).unwrap();
        assert!(gu.row(2).iter().all(|&v| v == 0.0));
        assert!(gi.row(2).iter().all(|&v| v == 0.0));
        assert!(gu.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn loss_decomposition_identity_holds() {
        for seed in [1u64, 4, 7] {
            let f = fd_fixture(seed);
            let base = init_embeddings(3, 4, f.config.d, seed);
            let (state, _) = forward_all(&f, &base.e0_user, &base.e0_item);
            let b = step_losses(&state, &f.batch, &f.config).unwrap();
            let recomposed =
                b.rec + f.config.cl_weight * (b.cl_user + b.cl_item) + f.config.l2 * b.reg;
            assert_abs_diff_eq!(b.total, recomposed, epsilon = 1e-10);
            assert!(b.cl_user >= 0.0 && b.cl_item >= 0.0);
        }
    }

    #[test]
    fn contrastive_terms_are_scale_invariant() {
        let seed = 4u64; // identity activation, full variant
        let f = fd_fixture(seed);
        assert_eq!(f.config.activation, Activation::Identity);
        let base = init_embeddings(3, 4, f.config.d, seed);
        let (state, _) = forward_all(&f, &base.e0_user, &base.e0_item);
        let a = step_losses(&state, &f.batch, &f.config).unwrap();
        let mut scaled_u = base.e0_user.clone();
        scaled_u.scale(3.0);
        let mut scaled_i = base.e0_item.clone();
        scaled_i.scale(3.0);
        let (state2, _) = forward_all(&f, &scaled_u, &scaled_i);
        let b = step_losses(&state2, &f.batch, &f.config).unwrap();
        assert_abs_diff_eq!(a.cl_user, b.cl_user, epsilon = 1e-8);
        assert_abs_diff_eq!(a.cl_item, b.cl_item, epsilon = 1e-8);
        assert_ne!(a.rec, b.rec);
    }

    fn small_train_config() -> TrainConfig {
        let mut config = TrainConfig::default();
        config.d = 4;
        config.layers = 2;
        config.batch_size = 16;
        config.max_epochs = 3;
        config.mf_rank = 2;
        config.svd_rank = 2;
        config.mf_iters = 20;
        config.eval_ks = vec![5, 10];
        config
    }

    #[test]
    fn train_logs_one_record_per_epoch() {
        let matrix = toy_matrix(12, 10, 6);
        let mut config = small_train_config();
        config.max_epochs = 1;
        let outcome = train(&matrix, &config).unwrap();
        assert_eq!(outcome.epochs.len(), 1);
        assert_eq!(outcome.epochs[0].epoch, 1);
        let mut config3 = small_train_config();
        config3.max_epochs = 3;
        let outcome3 = train(&matrix, &config3).unwrap();
        assert_eq!(outcome3.epochs.len(), 3);
        for report in outcome3.report.recall.values() {
            assert!((0.0..=1.0).contains(report));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let matrix = toy_matrix(12, 10, 6);
        let config = small_train_config();
        let a = train(&matrix, &config).unwrap();
        let b = train(&matrix, &config).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.state.e0_user, b.state.e0_user);
        assert_eq!(a.report.recall, b.report.recall);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn backbone_variant_trains_without_contrastive_terms() {
        let matrix = toy_matrix(12, 10, 6);
        let mut config = small_train_config();
        config.variant = Variant::None;
        config.cl_weight = 0.0;
        let outcome = train(&matrix, &config).unwrap();
        for e in &outcome.epochs {
            assert_eq!(e.cl_user, 0.0);
            assert_eq!(e.cl_item, 0.0);
            assert_abs_diff_eq!(e.total, e.rec + config.l2 * e.reg, epsilon = 1e-10);
        }
    }

    #[test]
    fn divergent_run_names_the_epoch() {
        let matrix = toy_matrix(12, 10, 6);
        let mut config = small_train_config();
        config.variant = Variant::None;
        config.lr = 1e160;
        match train(&matrix, &config) {
            Err(Error::Numerical(msg)) => {
                assert!(msg.contains("epoch"), "{msg}");
            }
            Err(other) => panic!("expected the divergence error, got {other:?}"),
            Ok(_) => panic!("expected divergence, got success"),
        }
    }

    #[test]
    fn epoch_callback_sees_every_row() {
        let matrix = toy_matrix(12, 10, 6);
        let config = small_train_config();
        let mut seen = Vec::new();
        let outcome =
            train_with_options(&matrix, &config, None, &mut |e| {
                seen.push(e.epoch);
                Ok(())
            })
            .unwrap();
        assert_eq!(seen, (1..=outcome.epochs.len()).collect::<Vec<_>>());
    }
}
