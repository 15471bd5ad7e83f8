//! The segmentation network: a small multi-level convolutional feature
//! extractor, one evidential expert head per phase, fusion of the expert
//! opinions, and the training loop.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::losses::{loss_gradients, GroundTruthGrid, LossWeights};
use crate::opinion::{EvidenceMap, OpinionGrid};
use crate::phantom::{rotate_sample, Phase, PhaseStack};
use crate::tensor_io::{read_tensor_block, read_u32, write_tensor_block, write_u32};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVDF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub n_phases: usize,
    pub n_categories: usize,
    /// Feature channels `C` produced by the extractor.
    pub channels: usize,
    /// One extractor shared by all phases, or one per phase.
    pub shared_extractor: bool,
    /// One expert head shared by all phases, or one per phase.
    pub shared_experts: bool,
    /// Resolution levels of the extractor (each level halves the size).
    pub levels: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_phases: 4,
            n_categories: 2,
            channels: 8,
            shared_extractor: true,
            shared_experts: false,
            levels: 3,
            seed: 42,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_phases == 0 || self.n_phases > Phase::ALL.len() {
            return Err(Error::Config(format!("n_phases {} not in 1..=4", self.n_phases)));
        }
        if self.n_categories < 2 {
            return Err(Error::Config("n_categories must be >= 2".into()));
        }
        if self.channels == 0 || self.levels == 0 {
            return Err(Error::Config("channels and levels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Cosine-annealing period in epochs.
    pub cosine_period: usize,
    pub seed: u64,
    /// Random rotation in `[-max_rotation_deg, max_rotation_deg]`.
    pub augment_rotation: bool,
    pub max_rotation_deg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 5e-4,
            min_learning_rate: 0.0,
            weight_decay: 1e-5,
            batch_size: 4,
            cosine_period: 20,
            seed: 42,
            augment_rotation: false,
            max_rotation_deg: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.cosine_period == 0 {
            return Err(Error::Config(
                "learning rate, batch size and cosine period must be positive".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) || !(self.min_learning_rate >= 0.0) {
            return Err(Error::Config("weight decay and minimum rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// `η_min + ½(η_0 − η_min)(1 + cos(π · (epoch mod T) / T))`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let t = (epoch % cfg.cosine_period) as f64 / cfg.cosine_period as f64;
    cfg.min_learning_rate
        + 0.5 * (cfg.learning_rate - cfg.min_learning_rate) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct ExtractorIds {
    /// Encoder convolutions per level; level 0 has two.
    enc: Vec<Vec<ConvIds>>,
    /// Decoder convolution per level `0..levels-1`.
    dec: Vec<ConvIds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ExpertIds {
    hidden: ConvIds,
    out: ConvIds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: NetworkConfig,
    params: ParamStore,
    extractors: Vec<ExtractorIds>,
    experts: Vec<ExpertIds>,
}

fn add_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    ci: usize,
    co: usize,
    k: usize,
    std: f64,
) -> ConvIds {
    let normal = Normal::new(0.0, std).expect("valid std");
    let w: Vec<f64> = (0..co * ci * k * k).map(|_| normal.sample(rng)).collect();
    let w = store.add(
        format!("{name}.weight"),
        Tensor::new(vec![co, ci, k, k], w).expect("consistent shape"),
    );
    let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![co]));
    ConvIds { w, b }
}

/// Intensities are shifted to be centred on zero before the first conv.
const INPUT_CENTER: f64 = 0.5;

/// Small so that initial evidence sits near 1, away from the tanh plateaus.
const OUT_INIT_STD: f64 = 0.01;

fn he_std(ci: usize, k: usize) -> f64 {
    (2.0 / (ci * k * k) as f64).sqrt()
}

impl Model {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let c = config.channels;
        let n_ext = if config.shared_extractor { 1 } else { config.n_phases };
        let n_exp = if config.shared_experts { 1 } else { config.n_phases };
        let mut extractors = Vec::with_capacity(n_ext);
        for e in 0..n_ext {
            let prefix = format!("extractor{e}");
            let mut enc = Vec::with_capacity(config.levels);
            enc.push(vec![
                add_conv(&mut params, &mut rng, &format!("{prefix}.enc0.0"), 1, c, 3, he_std(1, 3)),
                add_conv(&mut params, &mut rng, &format!("{prefix}.enc0.1"), c, c, 3, he_std(c, 3)),
            ]);
            for l in 1..config.levels {
                enc.push(vec![add_conv(
                    &mut params,
                    &mut rng,
                    &format!("{prefix}.enc{l}.0"),
                    c,
                    c,
                    3,
                    he_std(c, 3),
                )]);
            }
            let dec = (0..config.levels - 1)
                .map(|l| add_conv(&mut params, &mut rng, &format!("{prefix}.dec{l}"), c, c, 3, he_std(c, 3)))
                .collect();
            extractors.push(ExtractorIds { enc, dec });
        }
        let mut experts = Vec::with_capacity(n_exp);
        for e in 0..n_exp {
            let prefix = format!("expert{e}");
            let hidden = add_conv(&mut params, &mut rng, &format!("{prefix}.hidden"), c, c, 3, he_std(c, 3));
            let out = add_conv(
                &mut params,
                &mut rng,
                &format!("{prefix}.out"),
                c,
                config.n_categories,
                1,
                OUT_INIT_STD,
            );
            experts.push(ExpertIds { hidden, out });
        }
        Ok(Self {
            config,
            params,
            extractors,
            experts,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn extractor_index(&self, phase: usize) -> usize {
        if self.config.shared_extractor {
            0
        } else {
            phase
        }
    }

    fn expert_index(&self, phase: usize) -> usize {
        if self.config.shared_experts {
            0
        } else {
            phase
        }
    }

    /// Names of the parameters used to extract features for `phase`.
    pub fn extractor_param_names(&self, phase: usize) -> Vec<String> {
        let ext = &self.extractors[self.extractor_index(phase)];
        ext.enc
            .iter()
            .flatten()
            .chain(ext.dec.iter())
            .flat_map(|c| [c.w, c.b])
            .map(|id| self.params.get(id).name.clone())
            .collect()
    }

    fn conv(&self, g: &mut Graph, x: NodeId, ids: ConvIds, relu: bool) -> Result<NodeId> {
        let w = g.param(&self.params, ids.w);
        let b = g.param(&self.params, ids.b);
        let y = g.conv2d(x, w, b)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    fn check_phase(&self, phase: usize) -> Result<()> {
        if phase >= self.config.n_phases {
            return Err(Error::Config(format!(
                "phase index {phase} but the model has {} phases",
                self.config.n_phases
            )));
        }
        Ok(())
    }

    /// Records the extractor on `g`; `x` is `[B, 1, H, W]`.
    pub fn record_features(&self, g: &mut Graph, phase: usize, x: NodeId) -> Result<NodeId> {
        self.check_phase(phase)?;
        let shape = g.value(x).shape().to_vec();
        let scale = 1usize << (self.config.levels - 1);
        match shape[..] {
            [_, 1, h, w] if h % scale == 0 && w % scale == 0 => {}
            _ => {
                return Err(shape_err(format!(
                    "extractor input must be [B, 1, H, W] with H, W divisible by {scale}, got {shape:?}"
                )))
            }
        }
        let ext = &self.extractors[self.extractor_index(phase)];
        let n: usize = shape.iter().product();
        let offset = g.input(Tensor::new(shape, vec![-INPUT_CENTER; n])?);
        let x = g.add(x, offset)?;
        let mut h = self.conv(g, x, ext.enc[0][0], true)?;
        h = self.conv(g, h, ext.enc[0][1], true)?;
        let mut skips = vec![h];
        for level in ext.enc.iter().skip(1) {
            h = g.avg_pool2(h)?;
            for ids in level {
                h = self.conv(g, h, *ids, true)?;
            }
            skips.push(h);
        }
        for l in (0..self.config.levels - 1).rev() {
            let up = g.upsample2(h)?;
            let merged = g.add(up, skips[l])?;
            h = self.conv(g, merged, ext.dec[l], true)?;
        }
        Ok(h)
    }

    /// Records the expert head on `g`; output is evidence `[B, N, H, W]`.
    pub fn record_expert(&self, g: &mut Graph, phase: usize, features: NodeId) -> Result<NodeId> {
        self.check_phase(phase)?;
        let shape = g.value(features).shape();
        if shape.len() != 4 || shape[1] != self.config.channels {
            return Err(shape_err(format!(
                "expert input must have {} channels, got {shape:?}",
                self.config.channels
            )));
        }
        let ids = self.experts[self.expert_index(phase)];
        let h = self.conv(g, features, ids.hidden, true)?;
        let logits = self.conv(g, h, ids.out, false)?;
        Ok(g.exp_tanh(logits))
    }

    /// `f = F(x)` for a `[B, 1, H, W]` (or `[1, H, W]`) image tensor.
    pub fn extract_features(&self, phase: usize, x: &Tensor) -> Result<Tensor> {
        let x = batched(x)?;
        let mut g = Graph::new();
        let xi = g.input(x);
        let f = self.record_features(&mut g, phase, xi)?;
        Ok(g.value(f).clone())
    }

    /// Expert `E^s` applied to features `[B, C, H, W]`.
    pub fn expert_forward(&self, phase: usize, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let fi = g.input(features.clone());
        let e = self.record_expert(&mut g, phase, fi)?;
        Ok(g.value(e).clone())
    }

    /// Evidence for one `H × W` image.
    pub fn phase_evidence(&self, phase: usize, image: &[f64], height: usize, width: usize) -> Result<EvidenceMap> {
        let x = Tensor::new(vec![1, 1, height, width], image.to_vec())?;
        let mut g = Graph::new();
        let xi = g.input(x);
        let f = self.record_features(&mut g, phase, xi)?;
        let e = self.record_expert(&mut g, phase, f)?;
        EvidenceMap::new(self.config.n_categories, height, width, g.value(e).data().to_vec())
    }

    pub fn save(&self, path: &Path, run_id: &str) -> Result<()> {
        std::fs::write(path, self.to_bytes(run_id)?)?;
        Ok(())
    }

    /// `EVDF`, version, length-prefixed JSON header, parameter count, then
    /// `(name length, name, tensor block)` per parameter.
    pub fn to_bytes(&self, run_id: &str) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            network: self.config.clone(),
            run_id: run_id.to_string(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut out, CHECKPOINT_VERSION)?;
        write_u32(&mut out, json.len() as u32)?;
        out.write_all(&json)?;
        write_u32(&mut out, self.params.len() as u32)?;
        for p in self.params.iter() {
            write_u32(&mut out, p.name.len() as u32)?;
            out.write_all(p.name.as_bytes())?;
            write_tensor_block(&mut out, &p.value)?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CheckpointHeader)> {
        let truncated = |e: Error| match e {
            Error::Io(_) => Error::Parse("truncated checkpoint".into()),
            other => other,
        };
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Parse("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r).map_err(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(&mut r).map_err(truncated)? as usize;
        if r.len() < len {
            return Err(Error::Parse("truncated checkpoint".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..len])
            .map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        r = &r[len..];
        let mut model = Model::new(header.network.clone())?;
        let count = read_u32(&mut r).map_err(truncated)? as usize;
        if count != model.params.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {count} tensors, architecture needs {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let nlen = read_u32(&mut r).map_err(truncated)? as usize;
            if r.len() < nlen {
                return Err(Error::Parse("truncated checkpoint".into()));
            }
            let name = std::str::from_utf8(&r[..nlen])
                .map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?
                .to_string();
            r = &r[nlen..];
            let t = read_tensor_block(&mut r).map_err(truncated)?;
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Parse(format!("unknown parameter {name}")))?;
            let p = model.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Parse(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        if !r.is_empty() {
            return Err(Error::Parse("trailing bytes after checkpoint".into()));
        }
        Ok((model, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    pub run_id: String,
}

fn batched(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [1, h, w] => Tensor::new(vec![1, 1, *h, *w], x.data().to_vec()),
        [_, _, _, _] => Ok(x.clone()),
        s => Err(shape_err(format!("expected [1, H, W] or [B, 1, H, W], got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// inference pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Fold of the reduced Dempster rule over the phase opinions.
    Mems,
    /// Mean of phase beliefs and uncertainties, renormalized.
    Average,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Mems => "mems",
            Fusion::Average => "average",
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mems" => Ok(Fusion::Mems),
            "average" => Ok(Fusion::Average),
            _ => Err(Error::Config(format!("unknown fusion {s:?} (mems|average)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Phases that contributed, in fusion order.
    pub phases: Vec<Phase>,
    pub evidence: Vec<EvidenceMap>,
    pub phase_opinions: Vec<OpinionGrid>,
    /// Dirichlet parameters per phase, category-major.
    pub phase_alphas: Vec<Vec<f64>>,
    pub fused: OpinionGrid,
    pub fused_alphas: Vec<f64>,
}

impl PipelineOutput {
    /// Hard labels of the fused opinion.
    pub fn labels(&self) -> Vec<usize> {
        self.fused.argmax()
    }

    /// Fused prediction `p = b + u/N`, category-major.
    pub fn prediction(&self) -> Result<Vec<f64>> {
        self.fused.prediction()
    }
}

/// Runs every present phase through its expert and fuses the opinions.
/// Absent phases are skipped.
pub fn forward_pipeline(model: &Model, sample: &PhaseStack, fusion: Fusion) -> Result<PipelineOutput> {
    let mut phases = Vec::new();
    let mut evidence = Vec::new();
    for (phase, img) in &sample.images {
        if phase.index() >= model.config.n_phases {
            continue;
        }
        evidence.push(model.phase_evidence(phase.index(), img, sample.height, sample.width)?);
        phases.push(*phase);
    }
    fuse_evidence(phases, evidence, fusion)
}

pub fn fuse_evidence(phases: Vec<Phase>, evidence: Vec<EvidenceMap>, fusion: Fusion) -> Result<PipelineOutput> {
    if evidence.is_empty() {
        return Err(Error::EmptyFusion);
    }
    let phase_opinions: Vec<OpinionGrid> = evidence.iter().map(OpinionGrid::from_evidence).collect();
    let phase_alphas = evidence
        .iter()
        .map(|e| e.data.iter().map(|v| v + 1.0).collect())
        .collect();
    let refs: Vec<&OpinionGrid> = phase_opinions.iter().collect();
    let fused = match fusion {
        Fusion::Mems => OpinionGrid::combine_many(&refs)?,
        Fusion::Average => OpinionGrid::average(&refs)?,
    };
    let fused_alphas = fused.to_alphas()?;
    Ok(PipelineOutput {
        phases,
        evidence,
        phase_opinions,
        phase_alphas,
        fused,
        fused_alphas,
    })
}

// ---------------------------------------------------------------------------
// optimisation
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}

/// Back-propagates the seeded output gradients recorded on `graph`, applies
/// one optimizer step and clears the gradients.
pub fn backward_and_step(
    graph: &Graph,
    seeds: &[(NodeId, &[f64])],
    params: &mut ParamStore,
    optimizer: &mut Adam,
    lr: f64,
) -> Result<()> {
    params.zero_grad();
    graph.backward(seeds, params)?;
    optimizer.step(params, lr);
    params.zero_grad();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample objective over the epoch.
    pub total: f64,
    pub phase_term: f64,
    pub mixture_term: f64,
    pub lr: f64,
}

pub fn ground_truth(sample: &PhaseStack, n_categories: usize) -> Result<GroundTruthGrid> {
    GroundTruthGrid::new(
        n_categories,
        sample.height,
        sample.width,
        sample.mask.iter().map(|m| *m as usize).collect(),
    )
}

/// Objective value and evidence gradients for one batch, recorded on `g`.
struct BatchPass {
    evidence_nodes: Vec<NodeId>,
    seeds: Vec<Vec<f64>>,
    total: f64,
    phase_term: f64,
    mixture_term: f64,
}

fn batch_pass(model: &Model, g: &mut Graph, batch: &[PhaseStack], weights: &LossWeights) -> Result<BatchPass> {
    let cfg = &model.config;
    let (h, w) = (batch[0].height, batch[0].width);
    let px = h * w;
    let nc = cfg.n_categories;
    let bsz = batch.len();
    let mut evidence_nodes = Vec::with_capacity(cfg.n_phases);
    for s in 0..cfg.n_phases {
        let phase = Phase::ALL[s];
        let mut data = Vec::with_capacity(bsz * px);
        for sample in batch {
            let img = sample.images.get(&phase).ok_or_else(|| {
                Error::Config(format!("training sample {} lacks phase {phase}", sample.id))
            })?;
            if (sample.height, sample.width) != (h, w) {
                return Err(shape_err("training samples differ in size"));
            }
            data.extend_from_slice(img);
        }
        let x = g.input(Tensor::new(vec![bsz, 1, h, w], data)?);
        let f = model.record_features(g, s, x)?;
        evidence_nodes.push(model.record_expert(g, s, f)?);
    }
    let mut seeds = vec![vec![0.0; bsz * nc * px]; cfg.n_phases];
    let (mut total, mut phase_term, mut mixture_term) = (0.0, 0.0, 0.0);
    for (b, sample) in batch.iter().enumerate() {
        let y = ground_truth(sample, nc)?;
        let maps: Vec<EvidenceMap> = evidence_nodes
            .iter()
            .map(|id| {
                let v = g.value(*id).data();
                EvidenceMap::new(nc, h, w, v[b * nc * px..(b + 1) * nc * px].to_vec())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&EvidenceMap> = maps.iter().collect();
        let out = loss_gradients(&y, &refs, weights)?;
        total += out.parts.total;
        phase_term += out.parts.phase_term;
        mixture_term += out.parts.mixture_term;
        for (s, grad) in out.grads.iter().enumerate() {
            for (dst, gv) in seeds[s][b * nc * px..(b + 1) * nc * px].iter_mut().zip(grad) {
                *dst = gv / bsz as f64;
            }
        }
    }
    Ok(BatchPass {
        evidence_nodes,
        seeds,
        total,
        phase_term,
        mixture_term,
    })
}

/// Objective of the current model on `samples`, averaged per sample.
pub fn evaluate_loss(model: &Model, samples: &[PhaseStack], weights: &LossWeights) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples".into()));
    }
    let mut g = Graph::new();
    let pass = batch_pass(model, &mut g, samples, weights)?;
    let n = samples.len() as f64;
    Ok(EpochStats {
        epoch: 0,
        total: pass.total / n,
        phase_term: pass.phase_term / n,
        mixture_term: pass.mixture_term / n,
        lr: 0.0,
    })
}

/// Trains `model` in place; returns one [`EpochStats`] per epoch.
pub fn train_model(
    model: &mut Model,
    dataset: &[PhaseStack],
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    weights.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg.weight_decay);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg);
        order.shuffle(&mut rng);
        let (mut total, mut phase_term, mut mixture_term) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PhaseStack> = chunk
                .iter()
                .map(|i| {
                    if cfg.augment_rotation {
                        let deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
                        rotate_sample(&dataset[*i], deg)
                    } else {
                        dataset[*i].clone()
                    }
                })
                .collect();
            let mut g = Graph::new();
            let pass = batch_pass(model, &mut g, &batch, weights)?;
            if !pass.total.is_finite() {
                return Err(Error::Domain(format!("non-finite loss at epoch {epoch}")));
            }
            total += pass.total;
            phase_term += pass.phase_term;
            mixture_term += pass.mixture_term;
            let seeds: Vec<(NodeId, &[f64])> = pass
                .evidence_nodes
                .iter()
                .zip(&pass.seeds)
                .map(|(id, s)| (*id, s.as_slice()))
                .collect();
            backward_and_step(&g, &seeds, &mut model.params, &mut opt, lr)?;
        }
        let n = dataset.len() as f64;
        let stats = EpochStats {
            epoch,
            total: total / n,
            phase_term: phase_term / n,
            mixture_term: mixture_term / n,
            lr,
        };
        on_epoch(&stats);
        curve.push(stats);
    }
    Ok(curve)
}

/// Builds a fresh model from `net` and trains it.
pub fn train(
    dataset: &[PhaseStack],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<(Model, Vec<EpochStats>)> {
    let mut model = Model::new(net.clone())?;
    let curve = train_model(&mut model, dataset, cfg, weights, |_| {})?;
    Ok((model, curve))
}
