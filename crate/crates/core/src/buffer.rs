//! Buffer layers: residual adapters attached in parallel to frozen
//! activations.
//!
//! A buffer at an insertion point maps the activation `h` to `h + Δ(h)`:
//!
//! | design | Δ(h)                                  |
//! |--------|---------------------------------------|
//! | ①      | `α · conv1×1(h)`                      |
//! | ②      | `α · conv3×3(h)`                      |
//! | ③      | `α · norm(conv3×3(h))` (batch stats)  |
//! | ④      | `α · conv1×1(h) + β · conv3×3(h)`     |
//!
//! The backbone is never modified; removing the bank restores the frozen
//! forward pass exactly.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{insertion_point_name, Backbone, STAGE_NAMES};
use crate::params::{he_uniform, ParamSet};
use crate::tensor::Tensor;

pub const PARAM_PREFIX: &str = "buffer.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Design {
    /// ① single 1×1 convolution
    Pointwise,
    /// ② single 3×3 convolution
    Spatial,
    /// ③ 3×3 convolution followed by batch-statistics normalization
    SpatialNorm,
    /// ④ parallel 1×1 and 3×3 paths
    Parallel,
}

impl Design {
    pub const ALL: [Design; 4] = [
        Design::Pointwise,
        Design::Spatial,
        Design::SpatialNorm,
        Design::Parallel,
    ];

    pub fn number(self) -> u8 {
        match self {
            Design::Pointwise => 1,
            Design::Spatial => 2,
            Design::SpatialNorm => 3,
            Design::Parallel => 4,
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "conv1x1" => Ok(Design::Pointwise),
            "2" | "conv3x3" => Ok(Design::Spatial),
            "3" | "conv3x3+norm" => Ok(Design::SpatialNorm),
            "4" | "parallel" => Ok(Design::Parallel),
            other => Err(Error::InvalidArgument(format!("unknown buffer design `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    AfterConv,
    AfterNorm,
    AfterRelu,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::AfterConv, Placement::AfterNorm, Placement::AfterRelu];

    pub fn roman(self) -> &'static str {
        match self {
            Placement::AfterConv => "i",
            Placement::AfterNorm => "ii",
            Placement::AfterRelu => "iii",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i" | "conv" => Ok(Placement::AfterConv),
            "ii" | "norm" => Ok(Placement::AfterNorm),
            "iii" | "relu" => Ok(Placement::AfterRelu),
            other => Err(Error::InvalidArgument(format!("unknown placement `{other}`"))),
        }
    }
}

/// Which insertion points receive a buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Every block of the listed stages (indices into `a`, `b`, `c`).
    Stages(Vec<usize>),
    /// Explicit insertion point names such as `a.0.iii`.
    Points(Vec<String>),
}

impl Selection {
    /// Parses `a`, `a+b`, `abc`, or `@a.0.iii,b.1.ii`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(points) = s.strip_prefix('@') {
            return Ok(Selection::Points(
                points.split(',').map(|p| p.trim().to_string()).collect(),
            ));
        }
        let mut stages: Vec<usize> = Vec::new();
        for c in s.chars().filter(|c| !matches!(c, '+' | ',' | ' ')) {
            let idx = STAGE_NAMES
                .iter()
                .position(|&n| n == c)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{c}`")))?;
            if !stages.contains(&idx) {
                stages.push(idx);
            }
        }
        if stages.is_empty() {
            return Err(Error::InvalidArgument("empty stage selection".into()));
        }
        stages.sort_unstable();
        Ok(Selection::Stages(stages))
    }

    pub fn label(&self) -> String {
        match self {
            Selection::Stages(s) => s
                .iter()
                .map(|&i| STAGE_NAMES[i].to_string())
                .collect::<Vec<_>>()
                .join("+"),
            Selection::Points(p) => format!("@{}", p.join(",")),
        }
    }

    /// The seven nonempty subsets of three stages.
    pub fn all_stage_subsets() -> Vec<Selection> {
        (1u8..8)
            .map(|mask| Selection::Stages((0..3).filter(|i| mask & (1 << i) != 0).collect()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferSpec {
    pub design: Design,
    pub placement: Placement,
    pub selection: Selection,
    pub alpha_init: f64,
    pub beta_init: f64,
    pub trainable_scales: bool,
}

pub const DEFAULT_SCALE_INIT: f64 = 1e-3;

impl Default for BufferSpec {
    fn default() -> Self {
        Self {
            design: Design::Parallel,
            placement: Placement::AfterRelu,
            selection: Selection::Stages(vec![0]),
            alpha_init: DEFAULT_SCALE_INIT,
            beta_init: DEFAULT_SCALE_INIT,
            trainable_scales: true,
        }
    }
}

impl BufferSpec {
    /// Default for a batch size: early stage only below 16, early + middle
    /// from 16 upwards.
    pub fn default_for_batch_size(batch_size: usize) -> Self {
        let stages = if batch_size < 16 { vec![0] } else { vec![0, 1] };
        Self {
            selection: Selection::Stages(stages),
            ..Self::default()
        }
    }

    pub fn with_scales(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha_init = alpha;
        self.beta_init = beta;
        self
    }

    fn resolve(&self, model: &Backbone) -> Result<Vec<(String, usize)>> {
        let points: Vec<String> = match &self.selection {
            Selection::Stages(stages) => {
                for &s in stages {
                    if s >= model.config.stages {
                        return Err(Error::UnknownPoint(format!("stage {}", STAGE_NAMES[s])));
                    }
                }
                model
                    .blocks()
                    .filter(|b| stages.contains(&b.stage))
                    .map(|b| insertion_point_name(b, self.placement))
                    .collect()
            }
            Selection::Points(p) => p.clone(),
        };
        points
            .into_iter()
            .map(|p| {
                let ch = model
                    .point_channels(&p)
                    .ok_or_else(|| Error::UnknownPoint(p.clone()))?;
                Ok((p, ch))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub point: String,
    pub design: Design,
    pub channels: usize,
    pub params: ParamSet,
}

impl Buffer {
    fn new(
        point: &str,
        channels: usize,
        spec: &BufferSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut params = ParamSet::new();
        let prefix = format!("{PARAM_PREFIX}{point}");
        let c = channels;
        if matches!(spec.design, Design::Pointwise | Design::Parallel) {
            params.insert(format!("{prefix}.conv1.weight"), he_uniform(&[c, c, 1, 1], rng), true);
            params.insert(format!("{prefix}.conv1.bias"), Tensor::zeros(&[c]), true);
        }
        if matches!(
            spec.design,
            Design::Spatial | Design::SpatialNorm | Design::Parallel
        ) {
            params.insert(format!("{prefix}.conv3.weight"), he_uniform(&[c, c, 3, 3], rng), true);
            params.insert(format!("{prefix}.conv3.bias"), Tensor::zeros(&[c]), true);
        }
        if spec.design == Design::SpatialNorm {
            params.insert(format!("{prefix}.norm.gamma"), Tensor::ones(&[c]), true);
            params.insert(format!("{prefix}.norm.beta"), Tensor::zeros(&[c]), true);
        }
        params.insert(
            format!("{prefix}.alpha"),
            Tensor::scalar(spec.alpha_init),
            spec.trainable_scales,
        );
        if spec.design == Design::Parallel {
            params.insert(
                format!("{prefix}.beta"),
                Tensor::scalar(spec.beta_init),
                spec.trainable_scales,
            );
        }
        Self {
            point: point.to_string(),
            design: spec.design,
            channels,
            params,
        }
    }

    fn leaf(&self, g: &mut Graph, local: &str) -> NodeId {
        let name = format!("{PARAM_PREFIX}{}.{local}", self.point);
        let p = self.params.get(&name).expect("buffer parameter present");
        g.named_leaf(name, p.value.clone(), p.trainable)
    }

    /// `h' = h + Δ(h)`; see the module table for Δ per design.
    pub fn forward(&self, g: &mut Graph, h: NodeId, eps: f64) -> Result<NodeId> {
        let (_, c, _, _) = g.value(h).dims4("buffer")?;
        if c != self.channels {
            return Err(Error::ChannelMismatch {
                point: self.point.clone(),
                expected: self.channels,
                found: c,
            });
        }
        let alpha = self.leaf(g, "alpha");
        match self.design {
            Design::Pointwise => {
                let y = self.conv(g, h, "conv1", 0)?;
                let y = g.scale_by(y, alpha)?;
                g.add(h, y)
            }
            Design::Spatial => {
                let y = self.conv(g, h, "conv3", 1)?;
                let y = g.scale_by(y, alpha)?;
                g.add(h, y)
            }
            Design::SpatialNorm => {
                let y = self.conv(g, h, "conv3", 1)?;
                let gamma = self.leaf(g, "norm.gamma");
                let beta = self.leaf(g, "norm.beta");
                let (y, _) = g.batch_norm(y, gamma, beta, None, eps)?;
                let y = g.scale_by(y, alpha)?;
                g.add(h, y)
            }
            Design::Parallel => {
                let beta = self.leaf(g, "beta");
                let p1 = self.conv(g, h, "conv1", 0)?;
                let p1 = g.scale_by(p1, alpha)?;
                let p3 = self.conv(g, h, "conv3", 1)?;
                let p3 = g.scale_by(p3, beta)?;
                let out = g.add(h, p1)?;
                g.add(out, p3)
            }
        }
    }

    fn conv(&self, g: &mut Graph, h: NodeId, path: &str, padding: usize) -> Result<NodeId> {
        let w = self.leaf(g, &format!("{path}.weight"));
        let b = self.leaf(g, &format!("{path}.bias"));
        g.conv2d(h, w, Some(b), 1, padding)
    }

    /// Applies the buffer to a tensor without recording gradients.
    pub fn apply(&self, h: &Tensor, eps: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let y = self.forward(&mut g, x, eps)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferBank {
    pub spec: BufferSpec,
    pub buffers: Vec<Buffer>,
}

impl BufferBank {
    /// Creates one buffer per selected insertion point, initialized from
    /// `seed`.
    pub fn build(model: &Backbone, spec: &BufferSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let buffers = spec
            .resolve(model)?
            .into_iter()
            .map(|(point, ch)| Buffer::new(&point, ch, spec, &mut rng))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            buffers,
        })
    }

    pub fn at(&self, point: &str) -> Option<&Buffer> {
        self.buffers.iter().find(|b| b.point == point)
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.buffers
            .iter()
            .flat_map(|b| b.params.names().map(str::to_string).collect::<Vec<_>>())
            .collect()
    }

    fn owner(&self, name: &str) -> Option<usize> {
        self.buffers.iter().position(|b| b.params.get(name).is_some())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.owner(name).and_then(|i| self.buffers[i].params.tensor(name))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.owner(name)?;
        self.buffers[i].params.tensor_mut(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.buffers.iter().map(|b| b.params.num_scalars()).sum()
    }

    /// Marks φ as trainable or frozen. Scales stay frozen when the spec
    /// disables them.
    pub fn set_trainable(&mut self, trainable: bool) {
        let scales = self.spec.trainable_scales;
        for b in &mut self.buffers {
            let prefix = format!("{PARAM_PREFIX}{}", b.point);
            let names: Vec<String> = b.params.names().map(str::to_string).collect();
            for name in names {
                let is_scale = name == format!("{prefix}.alpha") || name == format!("{prefix}.beta");
                b.params.set_one_trainable(&name, trainable && (scales || !is_scale));
            }
        }
    }

    /// Names of the currently trainable φ entries.
    pub fn trainable_names(&self) -> Vec<String> {
        self.buffers
            .iter()
            .flat_map(|b| {
                b.params
                    .iter()
                    .filter(|(_, p)| p.trainable)
                    .map(|(n, _)| n.to_string())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Sets every α and β to the given values.
    pub fn set_scales(&mut self, alpha: f64, beta: f64) {
        for b in &mut self.buffers {
            let prefix = format!("{PARAM_PREFIX}{}", b.point);
            if let Some(t) = b.params.tensor_mut(&format!("{prefix}.alpha")) {
                t.data_mut()[0] = alpha;
            }
            if let Some(t) = b.params.tensor_mut(&format!("{prefix}.beta")) {
                t.data_mut()[0] = beta;
            }
        }
    }
}

/// Attaches a freshly initialized bank to `model`. Fails when buffers are
/// already attached or the selection does not resolve.
pub fn attach_buffers<'a>(
    model: &'a mut Backbone,
    spec: &BufferSpec,
    seed: u64,
) -> Result<&'a BufferBank> {
    if model.bank().is_some() {
        return Err(Error::AlreadyAttached);
    }
    let bank = BufferBank::build(model, spec, seed)?;
    model.set_bank(bank)?;
    Ok(model.bank().expect("just attached"))
}

pub fn detach_buffers(model: &mut Backbone) -> Result<BufferBank> {
    model.take_bank()
}
