use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::config::{Activation, Fusion, Readout, Variant};
use crate::data::NormalizedAdjacency;
use crate::error::{Error, Result};
use crate::factorization::LowRankFactors;
use crate::linalg::dense::dot;
use crate::linalg::DenseMatrix;
use crate::rng::{seeded, Stream};

/// Mixed-noise specification: per embedding row, ω ⊙ (l1·N_u + l2·N_g)
/// rescaled to L2 norm exactly ε.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec {
    pub epsilon: f64,
    /// Weight l1 on the Uniform(0,1) component.
    pub uniform_weight: f64,
    /// Weight l2 on the N(0,1) component.
    pub gaussian_weight: f64,
}

/// Trainable tables plus the per-layer propagated (z) and fused-view (g)
/// embeddings and the readout. Only e0_user / e0_item are parameters.
#[derive(Clone, Debug)]
pub struct EmbeddingState {
    pub e0_user: DenseMatrix,
    pub e0_item: DenseMatrix,
    /// Main view, index l ∈ 0..=L with z[0] = E0.
    pub z_user: Vec<DenseMatrix>,
    pub z_item: Vec<DenseMatrix>,
    /// Contrastive view, same indexing, g[0] = E0; empty for the
    /// view-free variant.
    pub g_user: Vec<DenseMatrix>,
    pub g_item: Vec<DenseMatrix>,
    /// Readout representations used for scoring.
    pub e_user: DenseMatrix,
    pub e_item: DenseMatrix,
}

/// Per-layer intermediates kept for the backward pass. Index l−1 holds
/// layer l (layer 0 needs nothing).
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// Main-view pre-activations Ā·(z_item+Δ) and Āᵀ·(z_user+Δ).
    pub pre_user: Vec<DenseMatrix>,
    pub pre_item: Vec<DenseMatrix>,
    /// Noise draws, recorded per layer (constants of the step).
    pub noise_user: Vec<DenseMatrix>,
    pub noise_item: Vec<DenseMatrix>,
    /// View-stream intermediates.
    pub view_user: Vec<ViewLayerTrace>,
    pub view_item: Vec<ViewLayerTrace>,
}

/// One fused-view layer: the MF stream m, the SVD stream s (whichever
/// the variant computes), and the fused pre-activation.
#[derive(Clone, Debug)]
pub struct ViewLayerTrace {
    pub m: Option<DenseMatrix>,
    pub s: Option<DenseMatrix>,
    pub pre: DenseMatrix,
}

/// Seeded Xavier-uniform `E0` tables: entries uniform in ±√(6/(d+d)).
/// The user table is drawn first, then the item table, both row-major.
pub fn init_embeddings(m: usize, n: usize, d: usize, seed: u64) -> EmbeddingState {
    let bound = (3.0 / d as f64).sqrt();
    let mut rng = seeded(seed, Stream::Init);
    let mut draw = |rows: usize| {
        DenseMatrix::from_fn(rows, d, |_, _| rng.random::<f64>() * 2.0 * bound - bound)
    };
    let e0_user = draw(m);
    let e0_item = draw(n);
    EmbeddingState {
        e0_user,
        e0_item,
        z_user: Vec::new(),
        z_item: Vec::new(),
        g_user: Vec::new(),
        g_item: Vec::new(),
        e_user: DenseMatrix::zeros(0, 0),
        e_item: DenseMatrix::zeros(0, 0),
    }
}

/// The mixed-noise rows before rescaling: per row, draw ω ∼ U(0,1)^d,
/// then N_u ∼ U(0,1)^d, then N_g ∼ N(0,1)^d, and form ω ⊙ (l1·N_u + l2·N_g).
/// The draw order is a compatibility contract (replays depend on it).
pub fn draw_noise_raw(
    rows: usize,
    cols: usize,
    spec: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows, cols);
    let mut omega = vec![0.0; cols];
    let mut nu = vec![0.0; cols];
    for r in 0..rows {
        for w in omega.iter_mut() {
            *w = rng.random::<f64>();
        }
        for u in nu.iter_mut() {
            *u = rng.random::<f64>();
        }
        let row = out.row_mut(r);
        for (c, slot) in row.iter_mut().enumerate() {
            let ng: f64 = rng.sample(StandardNormal);
            *slot = omega[c] * (spec.uniform_weight * nu[c] + spec.gaussian_weight * ng);
        }
    }
    out
}

/// Noise matrix with every row rescaled to L2 norm exactly ε. ε = 0
/// short-circuits to a zero matrix without consuming any randomness, so
/// noise-free forwards are bitwise pure functions of their inputs.
pub fn draw_noise(
    rows: usize,
    cols: usize,
    spec: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> DenseMatrix {
    if spec.epsilon == 0.0 {
        return DenseMatrix::zeros(rows, cols);
    }
    let mut out = draw_noise_raw(rows, cols, spec, rng);
    for r in 0..rows {
        let row = out.row_mut(r);
        let norm = dot(row, row).sqrt();
        if norm > 0.0 {
            let scale = spec.epsilon / norm;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
    }
    out
}

/// Noisy bipartite propagation: for l = 1..=L,
///   z_user[l] = σ(Ā · (z_item[l−1] + Δ_item)),
///   z_item[l] = σ(Āᵀ · (z_user[l−1] + Δ_user)),
/// with z[0] = E0 and fresh noise per layer (item noise drawn first).
pub fn forward_main(
    adj: &NormalizedAdjacency,
    state: &mut EmbeddingState,
    layers: usize,
    spec: &NoiseSpec,
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace> {
    let (m, n) = (adj.matrix.rows(), adj.matrix.cols());
    let d = state.e0_user.cols();
    if state.e0_user.rows() != m || state.e0_item.rows() != n || state.e0_item.cols() != d {
        return Err(Error::Shape(format!(
            "embeddings {}x{} / {}x{} vs adjacency {m}x{n}",
            state.e0_user.rows(),
            state.e0_user.cols(),
            state.e0_item.rows(),
            state.e0_item.cols()
        )));
    }
    let mut trace = ForwardTrace::default();
    let mut z_user = Vec::with_capacity(layers + 1);
    let mut z_item = Vec::with_capacity(layers + 1);
    z_user.push(state.e0_user.clone());
    z_item.push(state.e0_item.clone());
    for l in 1..=layers {
        let delta_item = draw_noise(n, d, spec, rng);
        let delta_user = draw_noise(m, d, spec, rng);
        let pre_u = adj.matrix.spmm(&z_item[l - 1].add(&delta_item)?)?;
        let pre_i = adj.matrix.spmm_t(&z_user[l - 1].add(&delta_user)?)?;
        let zu = pre_u.map(|x| activation.apply(x));
        let zi = pre_i.map(|x| activation.apply(x));
        if !zu.is_finite() || !zi.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite propagation output at layer {l}"
            )));
        }
        trace.pre_user.push(pre_u);
        trace.pre_item.push(pre_i);
        trace.noise_item.push(delta_item);
        trace.noise_user.push(delta_user);
        z_user.push(zu);
        z_item.push(zi);
    }
    state.z_user = z_user;
    state.z_item = z_item;
    Ok(trace)
}

fn scale_rows(x: &DenseMatrix, factors: &[f64]) -> DenseMatrix {
    let mut out = x.clone();
    for (r, &f) in factors.iter().enumerate() {
        for v in out.row_mut(r).iter_mut() {
            *v *= f;
        }
    }
    out
}

/// Fused contrastive views: per layer, the MF stream propagates through
/// P̃Q̃ᵀ and the SVD stream through P̂ŜQ̂ᵀ — both applied factor-by-factor
/// so the dense M×N reconstructions never materialize — then the streams
/// fuse (Hadamard by default) and pass through σ. Views consume the
/// main-view z[l−1] without adding noise; g[0] = E0.
pub fn forward_views(
    factors: &LowRankFactors,
    state: &mut EmbeddingState,
    layers: usize,
    activation: Activation,
    fusion: Fusion,
    variant: Variant,
    trace: &mut ForwardTrace,
) -> Result<()> {
    if variant == Variant::None {
        state.g_user.clear();
        state.g_item.clear();
        return Ok(());
    }
    if variant.uses_mf() && factors.mf.is_none() {
        return Err(Error::Config(format!(
            "variant {:?} needs MF factors but none were built",
            variant
        )));
    }
    if variant.uses_svd() && factors.svd.is_none() {
        return Err(Error::Config(format!(
            "variant {:?} needs SVD factors but none were built",
            variant
        )));
    }
    if state.z_user.len() != layers + 1 {
        return Err(Error::Internal(
            "forward_views called before forward_main".into(),
        ));
    }
    let mut g_user = Vec::with_capacity(layers + 1);
    let mut g_item = Vec::with_capacity(layers + 1);
    g_user.push(state.e0_user.clone());
    g_item.push(state.e0_item.clone());
    for l in 1..=layers {
        let z_item_prev = &state.z_item[l - 1];
        let z_user_prev = &state.z_user[l - 1];
        let m_u = match &factors.mf {
            Some(mf) if variant.uses_mf() => Some(mf.p.matmul(&mf.q.matmul_tn(z_item_prev)?)?),
            _ => None,
        };
        let m_v = match &factors.mf {
            Some(mf) if variant.uses_mf() => Some(mf.q.matmul(&mf.p.matmul_tn(z_user_prev)?)?),
            _ => None,
        };
        let s_u = match &factors.svd {
            Some(svd) if variant.uses_svd() => {
                Some(svd.u.matmul(&scale_rows(&svd.v.matmul_tn(z_item_prev)?, &svd.s))?)
            }
            _ => None,
        };
        let s_v = match &factors.svd {
            Some(svd) if variant.uses_svd() => {
                Some(svd.v.matmul(&scale_rows(&svd.u.matmul_tn(z_user_prev)?, &svd.s))?)
            }
            _ => None,
        };
        let fuse = |m: &Option<DenseMatrix>, s: &Option<DenseMatrix>| -> Result<DenseMatrix> {
            match variant {
                Variant::MfOnly => Ok(m.as_ref().expect("checked").clone()),
                Variant::SvdOnly => Ok(s.as_ref().expect("checked").clone()),
                Variant::Full => {
                    let m = m.as_ref().expect("checked");
                    let s = s.as_ref().expect("checked");
                    match fusion {
                        Fusion::Hadamard => m.hadamard(s),
                        Fusion::Sum => m.add(s),
                        Fusion::Mean => {
                            let mut out = m.add(s)?;
                            out.scale(0.5);
                            Ok(out)
                        }
                    }
                }
                Variant::None => unreachable!(),
            }
        };
        let pre_u = fuse(&m_u, &s_u)?;
        let pre_i = fuse(&m_v, &s_v)?;
        let gu = pre_u.map(|x| activation.apply(x));
        let gi = pre_i.map(|x| activation.apply(x));
        if !gu.is_finite() || !gi.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite view output at layer {l}"
            )));
        }
        trace.view_user.push(ViewLayerTrace {
            m: m_u,
            s: s_u,
            pre: pre_u,
        });
        trace.view_item.push(ViewLayerTrace {
            m: m_v,
            s: s_v,
            pre: pre_i,
        });
        g_user.push(gu);
        g_item.push(gi);
    }
    state.g_user = g_user;
    state.g_item = g_item;
    Ok(())
}

/// Combine main-view layers into the scoring representations.
pub fn readout(state: &mut EmbeddingState, mode: Readout) -> Result<()> {
    if state.z_user.is_empty() {
        return Err(Error::Internal("readout before forward_main".into()));
    }
    let combine = |layers: &[DenseMatrix]| -> Result<DenseMatrix> {
        match mode {
            Readout::Last => Ok(layers.last().expect("non-empty").clone()),
            Readout::Sum | Readout::Mean => {
                let mut acc = layers[0].clone();
                for z in &layers[1..] {
                    acc.axpy(1.0, z)?;
                }
                if mode == Readout::Mean {
                    acc.scale(1.0 / layers.len() as f64);
                }
                Ok(acc)
            }
        }
    };
    state.e_user = combine(&state.z_user)?;
    state.e_item = combine(&state.z_item)?;
    Ok(())
}

/// Preference score: dot product of the two readout rows.
#[inline]
pub fn predict(user_row: &[f64], item_row: &[f64]) -> f64 {
    dot(user_row, item_row)
}

/// Noise-free forward + readout (the evaluation path): a pure function
/// of (Ā, E0) that never touches the noise stream.
pub fn noise_free_readout(
    adj: &NormalizedAdjacency,
    state: &mut EmbeddingState,
    layers: usize,
    activation: Activation,
    mode: Readout,
) -> Result<()> {
    let silent = NoiseSpec {
        epsilon: 0.0,
        uniform_weight: 0.2,
        gaussian_weight: 0.8,
    };
    let mut rng = seeded(0, Stream::Noise);
    forward_main(adj, state, layers, &silent, activation, &mut rng)?;
    readout(state, mode)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HMFG-CK1";

#[derive(Serialize, Deserialize)]
struct TableDesc {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    m: usize,
    n: usize,
    d: usize,
    config_hash: String,
    seed: u64,
    tables: Vec<TableDesc>,
}

/// Persisted training result: the trainable tables plus the noise-free
/// readout used for scoring, keyed by the producing config.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub config_hash: String,
    pub seed: u64,
    pub e0_user: DenseMatrix,
    pub e0_item: DenseMatrix,
    pub e_user: DenseMatrix,
    pub e_item: DenseMatrix,
}

impl Checkpoint {
    pub fn from_state(state: &EmbeddingState, config_hash: &str, seed: u64) -> Checkpoint {
        Checkpoint {
            m: state.e0_user.rows(),
            n: state.e0_item.rows(),
            d: state.e0_user.cols(),
            config_hash: config_hash.to_string(),
            seed,
            e0_user: state.e0_user.clone(),
            e0_item: state.e0_item.clone(),
            e_user: state.e_user.clone(),
            e_item: state.e_item.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tables = [
            ("e0_user", &self.e0_user),
            ("e0_item", &self.e0_item),
            ("e_user", &self.e_user),
            ("e_item", &self.e_item),
        ];
        let header = CheckpointHeader {
            m: self.m,
            n: self.n,
            d: self.d,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            tables: tables
                .iter()
                .map(|(name, t)| TableDesc {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let payloads: Vec<&[f64]> = tables.iter().map(|(_, t)| t.values()).collect();
        binfmt::write_block(path, CHECKPOINT_MAGIC, &header, &payloads)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let (header, mut payload): (CheckpointHeader, _) =
            binfmt::read_block(path, CHECKPOINT_MAGIC)?;
        if header.tables.len() != 4 {
            return Err(Error::Format(format!(
                "checkpoint declares {} tables, expected 4",
                header.tables.len()
            )));
        }
        let mut tables = Vec::with_capacity(4);
        for desc in &header.tables {
            let values = payload.take_f64s(desc.rows * desc.cols)?;
            tables.push(DenseMatrix::from_vec(desc.rows, desc.cols, values)?);
        }
        payload.finish()?;
        let e_item = tables.pop().expect("4 tables");
        let e_user = tables.pop().expect("4 tables");
        let e0_item = tables.pop().expect("4 tables");
        let e0_user = tables.pop().expect("4 tables");
        let ck = Checkpoint {
            m: header.m,
            n: header.n,
            d: header.d,
            config_hash: header.config_hash,
            seed: header.seed,
            e0_user,
            e0_item,
            e_user,
            e_item,
        };
        if ck.e0_user.shape() != (ck.m, ck.d)
            || ck.e0_item.shape() != (ck.n, ck.d)
            || ck.e_user.shape() != (ck.m, ck.d)
            || ck.e_item.shape() != (ck.n, ck.d)
        {
            return Err(Error::Format("checkpoint table shapes disagree".into()));
        }
        Ok(ck)
    }
}
