//! The frozen source model: a staged CNN whose blocks are
//! `conv3×3 → norm → relu`, each stage closed by a 2×2 average pool, followed
//! by global average pooling and a linear head.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::buffer::{BufferBank, Placement};
use crate::error::{Error, Result};
use crate::norm_stats::{NormKind, NormLayer, NormMode, NormTable};
use crate::params::{he_uniform, ParamSet};
use crate::tensor::Tensor;

pub const STAGE_NAMES: [char; 3] = ['a', 'b', 'c'];

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub base_channels: usize,
    pub norm: NormKind,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            blocks_per_stage: 2,
            base_channels: 16,
            norm: NormKind::Batch,
            num_classes: 10,
            input_shape: [3, 32, 32],
        }
    }
}

impl BackboneConfig {
    pub fn group_norm(groups: usize) -> Self {
        Self {
            norm: NormKind::Group { groups },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > STAGE_NAMES.len() {
            return Err(Error::config("model.stages", "must be 1..=3"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("model.blocks", "must be >= 1"));
        }
        if self.base_channels == 0 || self.num_classes < 2 {
            return Err(Error::config("model", "channels and classes must be positive"));
        }
        let [_, h, w] = self.input_shape;
        let div = 1 << self.stages;
        if h % div != 0 || w % div != 0 {
            return Err(Error::config(
                "model.input",
                format!("spatial size must be divisible by {div}"),
            ));
        }
        if let NormKind::Group { groups } = self.norm {
            if groups == 0 || self.base_channels % groups != 0 {
                return Err(Error::config(
                    "model.groups",
                    "must divide the base channel count",
                ));
            }
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Spatial size (h, w) of activations inside `stage`.
    pub fn stage_spatial(&self, stage: usize) -> (usize, usize) {
        (self.input_shape[1] >> stage, self.input_shape[2] >> stage)
    }

    pub fn num_blocks(&self) -> usize {
        self.stages * self.blocks_per_stage
    }
}

/// Location of a block: `(stage index, block index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockId {
    pub stage: usize,
    pub block: usize,
}

impl BlockId {
    pub fn prefix(&self) -> String {
        format!("{}.{}", STAGE_NAMES[self.stage], self.block)
    }
}

/// Insertion point name, e.g. `a.0.iii` for after-relu of the first block.
pub fn insertion_point_name(block: BlockId, placement: Placement) -> String {
    format!("{}.{}", block.prefix(), placement.roman())
}

/// Channel statistics used to standardize raw `[0, 1]` images.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Standardizer {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamSet,
    pub norms: NormTable,
    pub standardizer: Standardizer,
    bank: Option<BufferBank>,
}

/// Graph handles produced by one forward pass.
pub struct ForwardPass {
    pub logits: NodeId,
    /// Activations at insertion points and stage outputs, when recorded.
    pub taps: IndexMap<String, NodeId>,
    /// Batch statistics computed by each norm layer (target-batch mode).
    pub batch_stats: Vec<Option<crate::autodiff::ChannelStats>>,
}

impl Backbone {
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut in_ch = config.input_shape[0];
        for stage in 0..config.stages {
            let out_ch = config.stage_channels(stage);
            for block in 0..config.blocks_per_stage {
                let prefix = BlockId { stage, block }.prefix();
                params.insert(
                    format!("{prefix}.conv.weight"),
                    he_uniform(&[out_ch, in_ch, 3, 3], &mut rng),
                    true,
                );
                layers.push(NormLayer::new(format!("{prefix}.norm"), out_ch));
                in_ch = out_ch;
            }
        }
        params.insert(
            "head.weight",
            he_uniform(&[config.num_classes, in_ch], &mut rng),
            true,
        );
        params.insert("head.bias", Tensor::zeros(&[config.num_classes]), true);
        let norms = NormTable::new(config.norm, layers);
        Ok(Self {
            config,
            params,
            norms,
            standardizer: Standardizer::default(),
            bank: None,
        })
    }

    /// Layer names: convolutions, norms, head.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .params
            .names()
            .filter_map(|n| n.strip_suffix(".weight"))
            .map(str::to_string)
            .collect();
        names.extend(self.norms.layers.iter().map(|l| l.name.clone()));
        names
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        (0..self.config.stages).flat_map(move |stage| {
            (0..self.config.blocks_per_stage).map(move |block| BlockId { stage, block })
        })
    }

    pub fn insertion_points(&self) -> Vec<String> {
        self.blocks()
            .flat_map(|b| Placement::ALL.map(|p| insertion_point_name(b, p)))
            .collect()
    }

    /// Channel count of the activation at a named insertion point.
    pub fn point_channels(&self, point: &str) -> Option<usize> {
        self.blocks()
            .find(|b| Placement::ALL.iter().any(|&p| insertion_point_name(*b, p) == point))
            .map(|b| self.config.stage_channels(b.stage))
    }

    /// Valid names for feature statistics: insertion points and stage outputs.
    pub fn tap_names(&self) -> Vec<String> {
        let mut names = self.insertion_points();
        names.extend((0..self.config.stages).map(|s| format!("{}.out", STAGE_NAMES[s])));
        names
    }

    pub fn freeze_backbone(&mut self) {
        self.params.set_trainable(false);
        self.norms.affine_trainable = false;
    }

    pub fn unfreeze_backbone(&mut self) {
        self.params.set_trainable(true);
        self.norms.affine_trainable = true;
    }

    pub fn bank(&self) -> Option<&BufferBank> {
        self.bank.as_ref()
    }

    pub fn bank_mut(&mut self) -> Option<&mut BufferBank> {
        self.bank.as_mut()
    }

    pub(crate) fn set_bank(&mut self, bank: BufferBank) -> Result<()> {
        if self.bank.is_some() {
            return Err(Error::AlreadyAttached);
        }
        self.bank = Some(bank);
        Ok(())
    }

    pub fn take_bank(&mut self) -> Result<BufferBank> {
        self.bank.take().ok_or(Error::NotAttached)
    }

    /// Builds the forward graph for an already standardized batch.
    pub fn forward(&mut self, g: &mut Graph, x: &Tensor, record: bool) -> Result<ForwardPass> {
        let (_, c, h, w) = x.dims4("forward")?;
        if [c, h, w] != self.config.input_shape {
            return Err(Error::shape(
                "forward",
                format!("input {:?}, model expects {:?}", x.shape(), self.config.input_shape),
            ));
        }
        let mut taps = IndexMap::new();
        let mut batch_stats = Vec::with_capacity(self.norms.layers.len());
        let mut act = g.constant(x.clone());
        let blocks: Vec<BlockId> = self.blocks().collect();
        let affine_trainable = self.norms.affine_trainable;
        for (idx, block) in blocks.iter().enumerate() {
            let prefix = block.prefix();
            let wname = format!("{prefix}.conv.weight");
            let p = self.params.get(&wname).expect("conv weight present");
            let weight = g.named_leaf(wname.clone(), p.value.clone(), p.trainable);
            act = g.conv2d(act, weight, None, 1, 1)?;
            act = self.tap(g, act, *block, Placement::AfterConv, record, &mut taps)?;

            let layer = &self.norms.layers[idx];
            let gamma = g.named_leaf(layer.gamma_name(), layer.gamma.clone(), affine_trainable);
            let beta = g.named_leaf(layer.beta_name(), layer.beta.clone(), affine_trainable);
            let eps = self.norms.eps;
            match self.norms.kind {
                NormKind::Batch => {
                    let fixed = self.norms.statistics_for(idx, g.value(act))?;
                    let (out, stats) = g.batch_norm(act, gamma, beta, fixed.as_ref(), eps)?;
                    batch_stats.push(stats);
                    act = out;
                }
                NormKind::Group { groups } => {
                    act = g.group_norm(act, groups, gamma, beta, eps)?;
                    batch_stats.push(None);
                }
            }
            act = self.tap(g, act, *block, Placement::AfterNorm, record, &mut taps)?;

            act = g.relu(act);
            act = self.tap(g, act, *block, Placement::AfterRelu, record, &mut taps)?;

            if block.block + 1 == self.config.blocks_per_stage {
                act = g.avg_pool2d(act, 2)?;
                if record {
                    taps.insert(format!("{}.out", STAGE_NAMES[block.stage]), act);
                }
            }
        }
        let pooled = g.global_avg_pool(act)?;
        let hw = self.params.get("head.weight").expect("head weight");
        let hb = self.params.get("head.bias").expect("head bias");
        let hw_id = g.named_leaf("head.weight", hw.value.clone(), hw.trainable);
        let hb_id = g.named_leaf("head.bias", hb.value.clone(), hb.trainable);
        let logits = g.linear(pooled, hw_id, hb_id)?;
        Ok(ForwardPass {
            logits,
            taps,
            batch_stats,
        })
    }

    /// Applies the attached buffer at this point (if any) and records the
    /// resulting activation.
    fn tap(
        &self,
        g: &mut Graph,
        act: NodeId,
        block: BlockId,
        placement: Placement,
        record: bool,
        taps: &mut IndexMap<String, NodeId>,
    ) -> Result<NodeId> {
        let name = insertion_point_name(block, placement);
        let out = match self.bank.as_ref().and_then(|b| b.at(&name)) {
            Some(buffer) => buffer.forward(g, act, self.norms.eps)?,
            None => act,
        };
        if record {
            taps.insert(name, out);
        }
        Ok(out)
    }

    /// Logits for a standardized batch, without gradients.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, x, false)?;
        Ok(g.value(pass.logits).clone())
    }

    pub fn predict_with_mode(&mut self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let prev = self.norms.mode();
        self.norms.set_mode(mode);
        let out = self.predict(x);
        self.norms.set_mode(prev);
        out
    }

    /// SHA-256 over θ: convolution and head tensors plus normalization
    /// affine parameters. Buffer parameters and running statistics are
    /// excluded.
    pub fn hash_params(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter() {
            hash_tensor(&mut h, name, &p.value);
        }
        for l in &self.norms.layers {
            hash_tensor(&mut h, &l.gamma_name(), &l.gamma);
            hash_tensor(&mut h, &l.beta_name(), &l.beta);
        }
        h.finalize().into()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name.starts_with(crate::buffer::PARAM_PREFIX) {
            return self.bank.as_mut().and_then(|b| b.param_mut(name));
        }
        if let Some(t) = self.params.tensor_mut(name) {
            return Some(t);
        }
        self.norms.affine_mut(name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        if name.starts_with(crate::buffer::PARAM_PREFIX) {
            return self.bank.as_ref().and_then(|b| b.param(name));
        }
        self.params.tensor(name).or_else(|| {
            let (layer, field) = name.rsplit_once('.')?;
            let l = self.norms.layer(layer)?;
            match field {
                "gamma" => Some(&l.gamma),
                "beta" => Some(&l.beta),
                _ => None,
            }
        })
    }
}

fn hash_tensor(h: &mut Sha256, name: &str, t: &Tensor) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
}

pub fn hex_digest(d: &[u8; 32]) -> String {
    hex::encode(d)
}
