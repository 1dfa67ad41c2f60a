//! The six Q-function architectures: single-view RGB, single-view RGBD,
//! multi-tower, siamese towers, sensor dropout, and per-view Q aggregation.
//!
//! Every architecture factorizes as Q(f(images), g(gripper bit), h(action))
//! with f a conv stack per view, g/h small dense stacks, and a shared trunk.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    split_concat_grad, Layer, ParamSet, SeqCache, Sequential, Tensor,
};
use crate::render::MultiViewObservation;
use crate::sim::{ActionCommand, Aperture};
use crate::{Error, Result};

pub const EMBED_DIM: usize = 64;
pub const BRANCH_DIM: usize = 32;
pub const ACTION_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchitectureId {
    SvShoulder,
    SvRgbd,
    MvTowers,
    MvSiamese,
    MvDropout,
    MvQAgg,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 6] = [
        ArchitectureId::SvShoulder,
        ArchitectureId::SvRgbd,
        ArchitectureId::MvTowers,
        ArchitectureId::MvSiamese,
        ArchitectureId::MvDropout,
        ArchitectureId::MvQAgg,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            ArchitectureId::SvShoulder => "SV_Shoulder",
            ArchitectureId::SvRgbd => "SV_RGBD",
            ArchitectureId::MvTowers => "MV_Towers",
            ArchitectureId::MvSiamese => "MV_Siamese",
            ArchitectureId::MvDropout => "MV_Dropout",
            ArchitectureId::MvQAgg => "MV_Q_Agg",
        }
    }

    pub fn from_tag(tag: &str) -> Result<ArchitectureId> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == tag)
            .ok_or_else(|| Error::Config(format!("unknown architecture tag '{tag}'")))
    }

    /// Single-view architectures consume exactly view 0.
    pub fn is_single_view(&self) -> bool {
        matches!(self, ArchitectureId::SvShoulder | ArchitectureId::SvRgbd)
    }

    pub fn requires_depth(&self) -> bool {
        matches!(self, ArchitectureId::SvRgbd)
    }
}

/// Which views are present; never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewMask {
    selected: Vec<bool>,
}

impl ViewMask {
    pub fn new(selected: Vec<bool>) -> Result<ViewMask> {
        if !selected.iter().any(|&s| s) {
            return Err(Error::Contract("view mask selects no views".into()));
        }
        Ok(ViewMask { selected })
    }

    pub fn all(n: usize) -> ViewMask {
        ViewMask {
            selected: vec![true; n],
        }
    }

    pub fn single(n: usize, view: usize) -> ViewMask {
        let mut selected = vec![false; n];
        selected[view] = true;
        ViewMask { selected }
    }

    pub fn selected(&self) -> &[bool] {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// Bit i set means view i selected; always nonzero.
    pub fn bits(&self) -> u32 {
        self.selected
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &s)| if s { acc | (1 << i) } else { acc })
    }

    pub fn from_bits(n: usize, bits: u32) -> Result<ViewMask> {
        ViewMask::new((0..n).map(|i| bits & (1 << i) != 0).collect())
    }
}

/// Uniform draw over the 2^n - 1 nonempty view subsets.
pub fn sample_view_mask(n: usize, seed: u64) -> ViewMask {
    debug_assert!(n >= 1 && n < 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = rng.random_range(1..(1u32 << n) + 0);
    ViewMask::from_bits(n, bits).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QEvaluation {
    pub q_value: f64,
    /// Per-view Q-values; populated by MV_Q_Agg only.
    pub per_view_q: Option<Vec<f64>>,
}

/// One tower/branch/trunk block. Every architecture is built from these:
/// the fused architectures use one (with one tower per view), MV_Q_Agg uses
/// one complete block per view.
#[derive(Debug, Clone, PartialEq)]
pub struct QBlock {
    pub towers: Vec<Sequential>,
    pub gripper: Sequential,
    pub action: Sequential,
    pub trunk: Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamsBody {
    Fused(QBlock),
    Agg(Vec<QBlock>),
}

/// All trainable weights for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetworkParams {
    pub arch: ArchitectureId,
    pub resolution: usize,
    pub n_views: usize,
    pub body: ParamsBody,
}

fn build_tower(in_channels: usize, resolution: usize, rng: &mut ChaCha8Rng) -> Sequential {
    let convs = vec![
        Layer::conv2d(in_channels, 8, 3, 2, rng),
        Layer::Relu,
        Layer::conv2d(8, 16, 3, 2, rng),
        Layer::Relu,
        Layer::conv2d(16, 16, 3, 2, rng),
        Layer::Relu,
        Layer::Flatten,
    ];
    let probe = Sequential::new(convs.clone());
    let flat = probe.output_shape(&[in_channels, resolution, resolution]).unwrap()[0];
    let mut layers = convs;
    layers.push(Layer::dense(flat, EMBED_DIM, rng));
    Sequential::new(layers)
}

fn build_block(tower_channels: &[usize], resolution: usize, rng: &mut ChaCha8Rng) -> QBlock {
    QBlock {
        towers: tower_channels
            .iter()
            .map(|&c| build_tower(c, resolution, rng))
            .collect(),
        gripper: Sequential::new(vec![Layer::dense(1, BRANCH_DIM, rng), Layer::Relu]),
        action: Sequential::new(vec![Layer::dense(ACTION_DIM, BRANCH_DIM, rng), Layer::Relu]),
        trunk: Sequential::new(vec![
            Layer::dense(EMBED_DIM + 2 * BRANCH_DIM, EMBED_DIM, rng),
            Layer::Relu,
            Layer::dense(EMBED_DIM, 1, rng),
        ]),
    }
}

impl QNetworkParams {
    pub fn init(arch: ArchitectureId, n_views: usize, resolution: usize, seed: u64) -> QNetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let body = match arch {
            ArchitectureId::SvShoulder => ParamsBody::Fused(build_block(&[3], resolution, &mut rng)),
            ArchitectureId::SvRgbd => ParamsBody::Fused(build_block(&[3, 1], resolution, &mut rng)),
            ArchitectureId::MvTowers | ArchitectureId::MvDropout => {
                ParamsBody::Fused(build_block(&vec![3; n_views], resolution, &mut rng))
            }
            ArchitectureId::MvSiamese => ParamsBody::Fused(build_block(&[3], resolution, &mut rng)),
            ArchitectureId::MvQAgg => ParamsBody::Agg(
                (0..n_views)
                    .map(|_| build_block(&[3], resolution, &mut rng))
                    .collect(),
            ),
        };
        QNetworkParams {
            arch,
            resolution,
            n_views,
            body,
        }
    }

    pub fn zeros_like(&self) -> QNetworkParams {
        let zero_block = |b: &QBlock| QBlock {
            towers: b.towers.iter().map(|t| t.zeros_like()).collect(),
            gripper: b.gripper.zeros_like(),
            action: b.action.zeros_like(),
            trunk: b.trunk.zeros_like(),
        };
        QNetworkParams {
            arch: self.arch,
            resolution: self.resolution,
            n_views: self.n_views,
            body: match &self.body {
                ParamsBody::Fused(b) => ParamsBody::Fused(zero_block(b)),
                ParamsBody::Agg(bs) => ParamsBody::Agg(bs.iter().map(zero_block).collect()),
            },
        }
    }

    pub fn blocks(&self) -> Vec<&QBlock> {
        match &self.body {
            ParamsBody::Fused(b) => vec![b],
            ParamsBody::Agg(bs) => bs.iter().collect(),
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut QBlock> {
        match &mut self.body {
            ParamsBody::Fused(b) => vec![b],
            ParamsBody::Agg(bs) => bs.iter_mut().collect(),
        }
    }
}

impl ParamSet for QNetworkParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in self.blocks() {
            for t in &b.towers {
                out.extend(t.tensors());
            }
            out.extend(b.gripper.tensors());
            out.extend(b.action.tensors());
            out.extend(b.trunk.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in self.blocks_mut() {
            for t in &mut b.towers {
                out.extend(t.tensors_mut());
            }
            out.extend(b.gripper.tensors_mut());
            out.extend(b.action.tensors_mut());
            out.extend(b.trunk.tensors_mut());
        }
        out
    }
}

fn aperture_input(a: Aperture) -> Tensor {
    Tensor::from_vec(&[1], vec![if a == Aperture::Closed { 1.0 } else { 0.0 }]).unwrap()
}

fn action_input(a: &ActionCommand) -> Tensor {
    Tensor::from_vec(&[ACTION_DIM], a.encode().to_vec()).unwrap()
}

/// (tower index, input tensor, fusion weight) triples for one fused forward.
fn fused_view_plan(
    params: &QNetworkParams,
    obs: &MultiViewObservation,
    mask: Option<&ViewMask>,
) -> Result<Vec<(usize, Tensor, f64)>> {
    match params.arch {
        ArchitectureId::SvShoulder => Ok(vec![(0, obs.views[0].rgb_tensor(), 1.0)]),
        ArchitectureId::SvRgbd => Ok(vec![
            (0, obs.views[0].rgb_tensor(), 0.5),
            (1, obs.views[0].depth_tensor()?, 0.5),
        ]),
        ArchitectureId::MvTowers | ArchitectureId::MvSiamese => {
            let n = params.n_views;
            if obs.views.len() != n {
                return Err(Error::Contract(format!(
                    "architecture expects {n} views, observation has {}",
                    obs.views.len()
                )));
            }
            let w = 1.0 / n as f64;
            Ok((0..n)
                .map(|i| {
                    let tower = if params.arch == ArchitectureId::MvSiamese {
                        0
                    } else {
                        i
                    };
                    (tower, obs.views[i].rgb_tensor(), w)
                })
                .collect())
        }
        ArchitectureId::MvDropout => {
            let n = params.n_views;
            let all = ViewMask::all(n);
            let mask = mask.unwrap_or(&all);
            if mask.len() != n {
                return Err(Error::Contract("mask length does not match view count".into()));
            }
            let w = 1.0 / mask.count() as f64;
            Ok((0..n)
                .filter(|&i| mask.selected()[i])
                .map(|i| (i, obs.views[i].rgb_tensor(), w))
                .collect())
        }
        ArchitectureId::MvQAgg => unreachable!("Agg handled at block level"),
    }
}

/// Action-independent part of a Q evaluation: fused vision embedding plus
/// gripper embedding, one pair per block. Lets CEM score many candidate
/// actions against one observation cheaply.
#[derive(Debug, Clone)]
pub struct ObsEmbedding {
    per_block: Vec<(Tensor, Tensor)>,
}

fn check_mask_legal(params: &QNetworkParams, mask: Option<&ViewMask>) -> Result<()> {
    if mask.is_some() && params.arch != ArchitectureId::MvDropout {
        return Err(Error::Contract(format!(
            "view mask supplied to non-dropout architecture {}",
            params.arch.tag()
        )));
    }
    Ok(())
}

/// Compute the action-independent embeddings for one observation.
pub fn embed_obs(
    params: &QNetworkParams,
    obs: &MultiViewObservation,
    mask: Option<&ViewMask>,
) -> Result<ObsEmbedding> {
    check_mask_legal(params, mask)?;
    let gripper_in = aperture_input(obs.gripper_aperture);
    let mut per_block = Vec::new();
    match &params.body {
        ParamsBody::Fused(block) => {
            let plan = fused_view_plan(params, obs, mask)?;
            let mut fused = Tensor::zeros(&[EMBED_DIM]);
            for (tower, input, weight) in &plan {
                let e = block.towers[*tower].infer(input)?;
                fused.axpy(*weight, &e);
            }
            let g = block.gripper.infer(&gripper_in)?;
            per_block.push((fused, g));
        }
        ParamsBody::Agg(blocks) => {
            for (i, block) in blocks.iter().enumerate() {
                let e = block.towers[0].infer(&obs.views[i].rgb_tensor())?;
                let g = block.gripper.infer(&gripper_in)?;
                per_block.push((e, g));
            }
        }
    }
    Ok(ObsEmbedding { per_block })
}

/// Finish a Q evaluation from cached embeddings for one candidate action.
pub fn q_from_embedding(
    params: &QNetworkParams,
    emb: &ObsEmbedding,
    action: &ActionCommand,
) -> Result<QEvaluation> {
    let a_in = action_input(action);
    match &params.body {
        ParamsBody::Fused(block) => {
            let (f, g) = &emb.per_block[0];
            let h = block.action.infer(&a_in)?;
            let q = block.trunk.infer(&Tensor::concat(&[f, g, &h]))?.item();
            Ok(QEvaluation {
                q_value: q,
                per_view_q: None,
            })
        }
        ParamsBody::Agg(blocks) => {
            let mut per_view = Vec::with_capacity(blocks.len());
            for (block, (f, g)) in blocks.iter().zip(&emb.per_block) {
                let h = block.action.infer(&a_in)?;
                per_view.push(block.trunk.infer(&Tensor::concat(&[f, g, &h]))?.item());
            }
            let q = per_view.iter().sum::<f64>() / per_view.len() as f64;
            Ok(QEvaluation {
                q_value: q,
                per_view_q: Some(per_view),
            })
        }
    }
}

/// Full Q evaluation of one (observation, action) pair.
pub fn q_value(
    params: &QNetworkParams,
    obs: &MultiViewObservation,
    action: &ActionCommand,
    mask: Option<&ViewMask>,
) -> Result<QEvaluation> {
    let emb = embed_obs(params, obs, mask)?;
    q_from_embedding(params, &emb, action)
}

/// How the per-batch dropout mask is chosen for batched evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskPolicy {
    None,
    /// One mask drawn from the seed, shared by the whole batch.
    PerBatchSample(u64),
    Fixed(ViewMask),
}

/// Elementwise batched Q evaluation.
pub fn q_value_batch(
    params: &QNetworkParams,
    obs_batch: &[&MultiViewObservation],
    action_batch: &[&ActionCommand],
    mask_policy: &MaskPolicy,
) -> Result<Vec<QEvaluation>> {
    if obs_batch.len() != action_batch.len() {
        return Err(Error::Contract("batch lengths differ".into()));
    }
    let sampled;
    let mask = match mask_policy {
        MaskPolicy::None => None,
        MaskPolicy::PerBatchSample(seed) => {
            sampled = sample_view_mask(params.n_views, *seed);
            Some(&sampled)
        }
        MaskPolicy::Fixed(m) => Some(m),
    };
    obs_batch
        .iter()
        .zip(action_batch)
        .map(|(o, a)| q_value(params, o, a, mask))
        .collect()
}

/// Forward-pass record sufficient for an exact backward pass.
pub struct ForwardRecord {
    blocks: Vec<BlockRecord>,
    q: f64,
}

struct BlockRecord {
    // (tower index, input, weight, cache) per contributing view input.
    views: Vec<(usize, Tensor, f64, SeqCache)>,
    gripper_cache: SeqCache,
    action_cache: SeqCache,
    trunk_cache: SeqCache,
}

impl ForwardRecord {
    pub fn q(&self) -> f64 {
        self.q
    }
}

/// Forward pass that records activations for training.
pub fn forward_train(
    params: &QNetworkParams,
    obs: &MultiViewObservation,
    action: &ActionCommand,
    mask: Option<&ViewMask>,
) -> Result<ForwardRecord> {
    check_mask_legal(params, mask)?;
    let gripper_in = aperture_input(obs.gripper_aperture);
    let a_in = action_input(action);
    let mut records = Vec::new();
    let mut qs = Vec::new();
    match &params.body {
        ParamsBody::Fused(block) => {
            let plan = fused_view_plan(params, obs, mask)?;
            let mut views = Vec::new();
            let mut fused = Tensor::zeros(&[EMBED_DIM]);
            for (tower, input, weight) in plan {
                let (e, cache) = block.towers[tower].forward(&input)?;
                fused.axpy(weight, &e);
                views.push((tower, input, weight, cache));
            }
            let (g, gripper_cache) = block.gripper.forward(&gripper_in)?;
            let (h, action_cache) = block.action.forward(&a_in)?;
            let (q, trunk_cache) = block.trunk.forward(&Tensor::concat(&[&fused, &g, &h]))?;
            qs.push(q.item());
            records.push(BlockRecord {
                views,
                gripper_cache,
                action_cache,
                trunk_cache,
            });
        }
        ParamsBody::Agg(blocks) => {
            for (i, block) in blocks.iter().enumerate() {
                let input = obs.views[i].rgb_tensor();
                let (e, cache) = block.towers[0].forward(&input)?;
                let (g, gripper_cache) = block.gripper.forward(&gripper_in)?;
                let (h, action_cache) = block.action.forward(&a_in)?;
                let (q, trunk_cache) = block.trunk.forward(&Tensor::concat(&[&e, &g, &h]))?;
                qs.push(q.item());
                records.push(BlockRecord {
                    views: vec![(0, input, 1.0, cache)],
                    gripper_cache,
                    action_cache,
                    trunk_cache,
                });
            }
        }
    }
    let q = qs.iter().sum::<f64>() / qs.len() as f64;
    Ok(ForwardRecord { blocks: records, q })
}

/// Exact reverse-mode gradients of dq * Q with respect to every parameter.
pub fn backward_train(
    params: &QNetworkParams,
    record: &ForwardRecord,
    dq: f64,
) -> Result<QNetworkParams> {
    let mut grads = params.zeros_like();
    let blocks: Vec<&QBlock> = params.blocks();
    let n_blocks = blocks.len();
    if record.blocks.len() != n_blocks {
        return Err(Error::Contract("forward record does not match params".into()));
    }
    // Mean aggregation over blocks (1 block for fused architectures).
    let block_dq = dq / n_blocks as f64;
    let mut gblocks = grads.blocks_mut();
    for (bi, (block, rec)) in blocks.iter().zip(&record.blocks).enumerate() {
        let (d_trunk_in, trunk_g) = block
            .trunk
            .backward(&rec.trunk_cache, &Tensor::scalar(block_dq))?;
        let parts = split_concat_grad(&d_trunk_in, &[EMBED_DIM, BRANCH_DIM, BRANCH_DIM]);
        let (df, dg, dh) = (&parts[0], &parts[1], &parts[2]);
        let (_, gripper_g) = block.gripper.backward(&rec.gripper_cache, dg)?;
        let (_, action_g) = block.action.backward(&rec.action_cache, dh)?;
        let gb = &mut gblocks[bi];
        gb.trunk.axpy(1.0, &trunk_g);
        gb.gripper.axpy(1.0, &gripper_g);
        gb.action.axpy(1.0, &action_g);
        for (tower, _input, weight, cache) in &rec.views {
            let mut de = df.clone();
            de.scale(*weight);
            let (_, tower_g) = block.towers[*tower].backward(cache, &de)?;
            gb.towers[*tower].axpy(1.0, &tower_g);
        }
    }
    Ok(grads)
}
