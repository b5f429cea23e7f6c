//! Model configuration, named parameters and the full forward pass:
//! patch embedding, backbone, prediction head.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{backbone_forward, BackboneOutput, BlockContext, BlockKind, BlockVars, DsaVars, LayerPlan, TokenSet};
use crate::error::{Error, Result};
use crate::head::{branch_widths, head_forward, head_output, HeadMaps, HeadOutput, HeadVars};
use crate::numerics::{math, GradTape, Gradients, RngStream, Tensor, Var};
use crate::relevance::{MlpVars, RelevanceKind, SampleMode};
use crate::semantic::DegreeMode;

/// Architecture and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Blocks in the unpruned stack, numbered from 1.
    pub depth: usize,
    /// Original indices of semantic-aware blocks.
    pub dsa_layers: Vec<usize>,
    /// Template-token retention ratio after each entry of `dsa_layers`.
    pub retention: Vec<f64>,
    pub mlp_ratio: usize,
    pub patch: usize,
    /// Template / patch crop side in pixels.
    pub template_size: usize,
    /// Search crop side in pixels.
    pub search_size: usize,
    /// Fixed template plus patch slots.
    pub templates: usize,
    pub tau: f64,
    pub relevance: RelevanceKind,
    pub degree: DegreeMode,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 192,
            heads: 3,
            depth: 12,
            dsa_layers: vec![4, 7, 10],
            retention: vec![0.9, 0.8, 0.7],
            mlp_ratio: 4,
            patch: 16,
            template_size: 64,
            search_size: 128,
            templates: 3,
            tau: 1.0,
            relevance: RelevanceKind::Dynamic,
            degree: DegreeMode::SelfLoop,
            ln_eps: 1e-6,
        }
    }
}

const CONFIG_VERSION: i64 = 1;
const SCALE: f64 = 1e6;

impl ModelConfig {
    /// ViT-B sized backbone with 128 / 256 pixel crops.
    pub fn vit_base() -> Self {
        Self {
            d_model: 768,
            heads: 12,
            template_size: 128,
            search_size: 256,
            ..Self::default()
        }
    }

    /// Same layout with every block standard.
    pub fn standard(&self) -> Self {
        Self {
            dsa_layers: Vec::new(),
            retention: Vec::new(),
            ..self.clone()
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// `(h_z, w_z)` patch grid of one template.
    pub fn template_grid(&self) -> (usize, usize) {
        let s = self.template_size / self.patch;
        (s, s)
    }

    /// `(h_x, w_x)` patch grid of the search region.
    pub fn search_grid(&self) -> (usize, usize) {
        let s = self.search_size / self.patch;
        (s, s)
    }

    pub fn tokens_per_template(&self) -> usize {
        let (h, w) = self.template_grid();
        h * w
    }

    pub fn n_z(&self) -> usize {
        self.templates * self.tokens_per_template()
    }

    pub fn n_x(&self) -> usize {
        let (h, w) = self.search_grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible into {} heads", self.d_model, self.heads));
        }
        if self.d_model < 8 {
            return bad(format!("d_model {} too small for the head", self.d_model));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.templates == 0 {
            return bad("depth, mlp_ratio and templates must be positive".into());
        }
        if self.patch == 0 || !self.template_size.is_multiple_of(self.patch) || !self.search_size.is_multiple_of(self.patch) {
            return bad(format!(
                "crops {} / {} not multiples of patch {}",
                self.template_size, self.search_size, self.patch
            ));
        }
        if self.template_size < self.patch || self.search_size < self.patch {
            return bad("crops smaller than one patch".into());
        }
        if self.dsa_layers.len() != self.retention.len() {
            return bad(format!(
                "{} semantic layers but {} retention ratios",
                self.dsa_layers.len(),
                self.retention.len()
            ));
        }
        if self.dsa_layers.windows(2).any(|w| w[0] >= w[1]) || self.dsa_layers.iter().any(|&l| l == 0 || l > self.depth) {
            return bad(format!("semantic layers {:?} outside 1..={}", self.dsa_layers, self.depth));
        }
        if self.retention.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) || self.retention.windows(2).any(|w| w[1] > w[0]) {
            return bad(format!("retention {:?} must lie in (0, 1] and not increase", self.retention));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() || !(self.ln_eps > 0.0) {
            return bad("tau and ln_eps must be positive".into());
        }
        let n_z = self.n_z();
        for (&l, &r) in self.dsa_layers.iter().zip(&self.retention) {
            if math::floor(n_z as f64 * r) < 1.0 {
                return bad(format!("layer {l} would retain no template tokens"));
            }
        }
        Ok(())
    }

    pub fn kind_of(&self, layer: usize) -> BlockKind {
        if self.dsa_layers.contains(&layer) {
            BlockKind::Dsa
        } else {
            BlockKind::Standard
        }
    }

    /// Template tokens retained after `layer`: `floor(N_z * ratio)`.
    pub fn retained_after(&self, layer: usize) -> Option<usize> {
        let i = self.dsa_layers.iter().position(|&l| l == layer)?;
        Some(math::floor(self.n_z() as f64 * self.retention[i]) as usize)
    }

    /// Integer encoding stored alongside weights.
    pub fn to_ints(&self) -> Vec<i64> {
        let mut v = vec![
            CONFIG_VERSION,
            self.d_model as i64,
            self.heads as i64,
            self.depth as i64,
            self.mlp_ratio as i64,
            self.patch as i64,
            self.template_size as i64,
            self.search_size as i64,
            self.templates as i64,
            math::round(self.tau * SCALE) as i64,
            math::round(1.0 / self.ln_eps) as i64,
            match self.relevance {
                RelevanceKind::Dynamic => 0,
                RelevanceKind::StaticGrid => 1,
            },
            match self.degree {
                DegreeMode::SelfLoop => 0,
                DegreeMode::Literal => 1,
            },
            self.dsa_layers.len() as i64,
        ];
        v.extend(self.dsa_layers.iter().map(|&l| l as i64));
        v.extend(self.retention.iter().map(|&r| math::round(r * SCALE) as i64));
        v
    }

    pub fn from_ints(v: &[i64]) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed config record {v:?}"));
        if v.len() < 14 || v[0] != CONFIG_VERSION {
            return Err(bad());
        }
        let u = |x: i64| usize::try_from(x).map_err(|_| bad());
        let n = u(v[13])?;
        if v.len() != 14 + 2 * n {
            return Err(bad());
        }
        let cfg = Self {
            d_model: u(v[1])?,
            heads: u(v[2])?,
            depth: u(v[3])?,
            mlp_ratio: u(v[4])?,
            patch: u(v[5])?,
            template_size: u(v[6])?,
            search_size: u(v[7])?,
            templates: u(v[8])?,
            tau: v[9] as f64 / SCALE,
            ln_eps: 1.0 / v[10] as f64,
            relevance: match v[11] {
                0 => RelevanceKind::Dynamic,
                1 => RelevanceKind::StaticGrid,
                _ => return Err(bad()),
            },
            degree: match v[12] {
                0 => DegreeMode::SelfLoop,
                1 => DegreeMode::Literal,
                _ => return Err(bad()),
            },
            dsa_layers: v[14..14 + n].iter().map(|&x| u(x)).collect::<Result<_>>()?,
            retention: v[14 + n..].iter().map(|&x| x as f64 / SCALE).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A block of the (possibly pruned) stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    /// Original 1-based position.
    pub index: usize,
    pub kind: BlockKind,
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Embedding,
    Block(usize),
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        if name.starts_with("embed.") {
            return Some(Self::Embedding);
        }
        if name.starts_with("head.") {
            return Some(Self::Head);
        }
        let rest = name.strip_prefix("blocks.")?;
        let idx = rest.split('.').next()?.parse().ok()?;
        Some(Self::Block(idx))
    }
}

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return i;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (n, t) in self.iter() {
            eat(n.as_bytes());
            for &s in t.shape() {
                eat(&(s as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

fn gaussian(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| std * rng.normal()).collect()).expect("positive extents")
}

const INIT_STD: f64 = 0.02;
const BRANCHES: [(&str, usize); 3] = [("score", 1), ("offset", 2), ("size", 2)];

/// Initial output bias per branch: score prior 0.1, offset 0.5, size 0.25.
fn branch_bias(branch: &str) -> f64 {
    match branch {
        "score" => math::ln(0.1 / 0.9),
        "size" => math::ln(0.25 / 0.75),
        _ => 0.0,
    }
}

fn init_block(store: &mut ParamStore, cfg: &ModelConfig, layer: usize, rng: &mut RngStream) {
    let d = cfg.d_model;
    let hidden = cfg.mlp_ratio * d;
    let p = |s: &str| format!("blocks.{layer}.{s}");
    store.insert(p("norm1.weight"), Tensor::ones(&[d]));
    store.insert(p("norm1.bias"), Tensor::zeros(&[d]));
    store.insert(p("attn.qkv.weight"), gaussian(&[d, 3 * d], INIT_STD, rng));
    store.insert(p("attn.qkv.bias"), Tensor::zeros(&[3 * d]));
    store.insert(p("attn.proj.weight"), gaussian(&[d, d], INIT_STD, rng));
    store.insert(p("attn.proj.bias"), Tensor::zeros(&[d]));
    store.insert(p("norm2.weight"), Tensor::ones(&[d]));
    store.insert(p("norm2.bias"), Tensor::zeros(&[d]));
    store.insert(p("mlp.fc1.weight"), gaussian(&[d, hidden], INIT_STD, rng));
    store.insert(p("mlp.fc1.bias"), Tensor::zeros(&[hidden]));
    store.insert(p("mlp.fc2.weight"), gaussian(&[hidden, d], INIT_STD, rng));
    store.insert(p("mlp.fc2.bias"), Tensor::zeros(&[d]));
    if cfg.kind_of(layer) == BlockKind::Dsa {
        let l = cfg.heads;
        for mlp in ["edge_mlp", "token_mlp"] {
            store.insert(
                p(&format!("{mlp}.w1")),
                gaussian(&[l, 2 * l], 1.0 / math::sqrt(l as f64), rng),
            );
            store.insert(p(&format!("{mlp}.b1")), Tensor::zeros(&[2 * l]));
            store.insert(
                p(&format!("{mlp}.w2")),
                gaussian(&[2 * l, 2], 1.0 / math::sqrt(2.0 * l as f64), rng),
            );
            store.insert(p(&format!("{mlp}.b2")), Tensor::zeros(&[2]));
        }
        let mut w = Tensor::eye(l);
        for v in w.data_mut() {
            *v += INIT_STD * rng.normal();
        }
        store.insert(p("head_mixer"), w);
    }
}

/// Expected parameter names and shapes for a layout.
pub fn expected_params(cfg: &ModelConfig, layers: &[LayerSpec]) -> Vec<(String, Vec<usize>)> {
    let mut rng = RngStream::new(0);
    let mut store = ParamStore::new();
    Model::init_store(cfg, layers, &mut rng, &mut store)
}

/// Parameters plus layout.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<LayerSpec>,
    params: ParamStore,
}

impl Model {
    /// Randomly initialized full-depth model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = (1..=config.depth)
            .map(|index| LayerSpec {
                index,
                kind: config.kind_of(index),
            })
            .collect::<Vec<_>>();
        let mut rng = RngStream::new(seed);
        let mut params = ParamStore::new();
        Self::init_store(&config, &layers, &mut rng, &mut params);
        Ok(Self { config, layers, params })
    }

    fn init_store(
        cfg: &ModelConfig,
        layers: &[LayerSpec],
        rng: &mut RngStream,
        store: &mut ParamStore,
    ) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d_model;
        store.insert("embed.proj.weight", gaussian(&[cfg.patch_dim(), d], INIT_STD, rng));
        store.insert("embed.proj.bias", Tensor::zeros(&[d]));
        store.insert("embed.pos_z", gaussian(&[cfg.tokens_per_template(), d], INIT_STD, rng));
        store.insert("embed.pos_x", gaussian(&[cfg.n_x(), d], INIT_STD, rng));
        for l in layers {
            init_block(store, cfg, l.index, rng);
        }
        store.insert("head.norm.weight", Tensor::ones(&[d]));
        store.insert("head.norm.bias", Tensor::zeros(&[d]));
        for (branch, out) in BRANCHES {
            let mut c_in = d;
            let widths = branch_widths(d, out);
            for (i, &c_out) in widths.iter().enumerate() {
                let last = i + 1 == widths.len();
                let std = if last { 0.01 } else { math::sqrt(2.0 / (9 * c_in) as f64) };
                store.insert(format!("head.{branch}.{i}.weight"), gaussian(&[9 * c_in, c_out], std, rng));
                let bias = if last { branch_bias(branch) } else { 0.0 };
                store.insert(format!("head.{branch}.{i}.bias"), Tensor::full(&[c_out], bias));
                c_in = c_out;
            }
        }
        store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }

    /// Assembles a model from named tensors; names and shapes must match the
    /// layout exactly.
    pub fn from_params(config: ModelConfig, layers: Vec<LayerSpec>, params: ParamStore) -> Result<Self> {
        config.validate()?;
        if layers.is_empty() {
            return Err(Error::Model("empty layer list".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.index == 0 || l.index > config.depth || (i > 0 && layers[i - 1].index >= l.index) {
                return Err(Error::Model(format!(
                    "layer list {layers:?} not increasing within 1..={}",
                    config.depth
                )));
            }
            if l.kind != config.kind_of(l.index) {
                return Err(Error::Model(format!(
                    "layer {} kind {:?} disagrees with config",
                    l.index, l.kind
                )));
            }
        }
        let expected = expected_params(&config, &layers);
        if expected.len() != params.len() {
            return Err(Error::Model(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::Model(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Model(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => return Err(Error::NonFinite("model weights")),
                _ => {}
            }
        }
        Ok(Self { config, layers, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, Vec<LayerSpec>, ParamStore) {
        (self.config, self.layers, self.params)
    }

    pub fn weight_hash(&self) -> u64 {
        self.params.hash()
    }

    /// Layout record: config integers, then the retained layer indices.
    pub fn layout_ints(&self) -> Vec<i64> {
        let mut v = self.config.to_ints();
        v.push(self.layers.len() as i64);
        v.extend(self.layers.iter().map(|l| l.index as i64));
        v
    }

    pub fn layout_from_ints(v: &[i64]) -> Result<(ModelConfig, Vec<LayerSpec>)> {
        let bad = || Error::invalid("malformed layout record");
        let n_dsa = usize::try_from(*v.get(13).ok_or_else(bad)?).map_err(|_| bad())?;
        let split = 14 + 2 * n_dsa;
        let cfg = ModelConfig::from_ints(v.get(..split).ok_or_else(bad)?)?;
        let rest = &v[split..];
        let n = usize::try_from(*rest.first().ok_or_else(bad)?).map_err(|_| bad())?;
        if rest.len() != n + 1 {
            return Err(bad());
        }
        let layers = rest[1..]
            .iter()
            .map(|&i| {
                let index = usize::try_from(i).map_err(|_| bad())?;
                Ok(LayerSpec {
                    index,
                    kind: cfg.kind_of(index),
                })
            })
            .collect::<Result<_>>()?;
        Ok((cfg, layers))
    }

    /// Layers present with their token budgets.
    pub fn retained_schedule(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .filter_map(|l| self.config.retained_after(l.index).map(|k| (l.index, k)))
            .collect()
    }
}

/// Binds parameters to tape nodes on first use.
pub struct Binder<'m> {
    params: &'m ParamStore,
    vars: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<'m> Binder<'m> {
    /// Everything constant.
    pub fn frozen(params: &'m ParamStore) -> Self {
        Self::new(params, |_| false)
    }

    /// Parameters whose group satisfies `trainable` become tape variables.
    pub fn new(params: &'m ParamStore, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        let flags = params
            .iter()
            .map(|(n, _)| ParamGroup::of(n).map(&trainable).unwrap_or(false))
            .collect();
        Self {
            params,
            vars: vec![None; params.len()],
            trainable: flags,
        }
    }

    pub fn var(&mut self, tape: &mut GradTape, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Model(format!("missing tensor {name}")))?;
        if let Some(v) = self.vars[id] {
            return Ok(v);
        }
        let t = self.params.value(id).clone();
        let v = if self.trainable[id] {
            tape.variable(t)
        } else {
            tape.constant(t)
        };
        self.vars[id] = Some(v);
        Ok(v)
    }

    fn pair(&mut self, tape: &mut GradTape, w: &str, b: &str) -> Result<(Var, Var)> {
        Ok((self.var(tape, w)?, self.var(tape, b)?))
    }

    fn mlp(&mut self, tape: &mut GradTape, prefix: &str) -> Result<MlpVars> {
        Ok(MlpVars {
            w1: self.var(tape, &format!("{prefix}.w1"))?,
            b1: self.var(tape, &format!("{prefix}.b1"))?,
            w2: self.var(tape, &format!("{prefix}.w2"))?,
            b2: self.var(tape, &format!("{prefix}.b2"))?,
        })
    }

    pub fn block(&mut self, tape: &mut GradTape, layer: usize, kind: BlockKind) -> Result<BlockVars> {
        let p = |s: &str| format!("blocks.{layer}.{s}");
        let dsa = match kind {
            BlockKind::Dsa => Some(DsaVars {
                edge_mlp: self.mlp(tape, &p("edge_mlp"))?,
                token_mlp: self.mlp(tape, &p("token_mlp"))?,
                mixer: self.var(tape, &p("head_mixer"))?,
            }),
            BlockKind::Standard => None,
        };
        Ok(BlockVars {
            norm1: self.pair(tape, &p("norm1.weight"), &p("norm1.bias"))?,
            qkv: self.pair(tape, &p("attn.qkv.weight"), &p("attn.qkv.bias"))?,
            proj: self.pair(tape, &p("attn.proj.weight"), &p("attn.proj.bias"))?,
            norm2: self.pair(tape, &p("norm2.weight"), &p("norm2.bias"))?,
            fc1: self.pair(tape, &p("mlp.fc1.weight"), &p("mlp.fc1.bias"))?,
            fc2: self.pair(tape, &p("mlp.fc2.weight"), &p("mlp.fc2.bias"))?,
            dsa,
        })
    }

    pub fn head(&mut self, tape: &mut GradTape, d_model: usize) -> Result<HeadVars> {
        let norm = self.pair(tape, "head.norm.weight", "head.norm.bias")?;
        let mut branches: [Vec<(Var, Var)>; 3] = Default::default();
        for (slot, (branch, out)) in branches.iter_mut().zip(BRANCHES) {
            for i in 0..branch_widths(d_model, out).len() {
                slot.push(self.pair(tape, &format!("head.{branch}.{i}.weight"), &format!("head.{branch}.{i}.bias"))?);
            }
        }
        Ok(HeadVars { norm, branches })
    }

    /// Gradients of bound trainable parameters, by parameter id.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(usize, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter(|(id, _)| self.trainable[*id])
            .filter_map(|(id, v)| v.and_then(|v| grads.get(v)).map(|g| (id, g.clone())))
            .collect()
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable[id]
    }
}

/// Patch matrices for one forward pass: each `[tokens, 3 * patch^2]`.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub templates: Vec<Tensor>,
    pub search: Tensor,
}

/// Sampling behaviour of one forward pass.
pub struct ForwardOptions<'r> {
    pub mode: SampleMode,
    pub rng: Option<&'r mut RngStream>,
    pub record_hidden: bool,
}

impl ForwardOptions<'_> {
    pub fn inference() -> Self {
        Self {
            mode: SampleMode::Deterministic,
            rng: None,
            record_hidden: false,
        }
    }
}

pub struct ModelOutput {
    pub maps: HeadMaps,
    pub backbone: BackboneOutput,
}

impl Model {
    fn embed(&self, tape: &mut GradTape, binder: &mut Binder<'_>, input: &ModelInput) -> Result<TokenSet> {
        let cfg = &self.config;
        let (pd, nz1, nx) = (cfg.patch_dim(), cfg.tokens_per_template(), cfg.n_x());
        if input.templates.len() != cfg.templates {
            return Err(Error::invalid(format!(
                "{} template crops for {} slots",
                input.templates.len(),
                cfg.templates
            )));
        }
        for t in &input.templates {
            if t.shape() != [nz1, pd] {
                return Err(Error::shape(
                    "embed",
                    format!("template patches {:?}, expected [{nz1}, {pd}]", t.shape()),
                ));
            }
        }
        if input.search.shape() != [nx, pd] {
            return Err(Error::shape(
                "embed",
                format!("search patches {:?}, expected [{nx}, {pd}]", input.search.shape()),
            ));
        }
        let w = binder.var(tape, "embed.proj.weight")?;
        let b = binder.var(tape, "embed.proj.bias")?;
        let pos_z = binder.var(tape, "embed.pos_z")?;
        let pos_x = binder.var(tape, "embed.pos_x")?;
        let mut rows = Vec::with_capacity(cfg.templates + 1);
        for t in &input.templates {
            let p = tape.constant(t.clone());
            let e = tape.matmul(p, w)?;
            let e = tape.add_broadcast(e, b)?;
            rows.push(tape.add(e, pos_z)?);
        }
        let p = tape.constant(input.search.clone());
        let e = tape.matmul(p, w)?;
        let e = tape.add_broadcast(e, b)?;
        rows.push(tape.add(e, pos_x)?);
        let tokens = tape.concat(&rows, 0)?;
        Ok(TokenSet::new(tokens, cfg.n_z(), nx))
    }

    /// Embedding, backbone and head on the tape.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        binder: &mut Binder<'_>,
        input: &ModelInput,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<ModelOutput> {
        let cfg = &self.config;
        let tokens = self.embed(tape, binder, input)?;
        let vars = self
            .layers
            .iter()
            .map(|l| binder.block(tape, l.index, l.kind))
            .collect::<Result<Vec<_>>>()?;
        let plans: Vec<LayerPlan<'_>> = self
            .layers
            .iter()
            .zip(&vars)
            .map(|(l, v)| LayerPlan {
                index: l.index,
                kind: l.kind,
                keep: cfg.retained_after(l.index),
                vars: v,
            })
            .collect();
        let mut ctx = BlockContext {
            heads: cfg.heads,
            eps: cfg.ln_eps,
            tau: cfg.tau,
            mode: opts.mode,
            relevance: cfg.relevance,
            degree: cfg.degree,
            template_grid: cfg.template_grid(),
            rng: opts.rng.as_deref_mut(),
        };
        let backbone = backbone_forward(tape, tokens, &plans, &mut ctx, opts.record_hidden)?;
        let set = &backbone.tokens;
        let search = tape.slice(set.tokens, 0, set.n_z, set.n_x)?;
        let head = binder.head(tape, cfg.d_model)?;
        let maps = head_forward(tape, search, &head, cfg.search_grid(), cfg.ln_eps)?;
        Ok(ModelOutput { maps, backbone })
    }

    /// Deterministic forward with frozen weights.
    pub fn infer(&self, input: &ModelInput) -> Result<HeadOutput> {
        Ok(self.infer_full(input, false)?.0)
    }

    /// Inference returning the head output and, when asked, the hidden-state
    /// record.
    pub fn infer_full(&self, input: &ModelInput, record_hidden: bool) -> Result<(HeadOutput, Option<Vec<Tensor>>)> {
        let mut tape = GradTape::new();
        let mut binder = Binder::frozen(&self.params);
        let mut opts = ForwardOptions {
            record_hidden,
            ..ForwardOptions::inference()
        };
        let out = self.forward(&mut tape, &mut binder, input, &mut opts)?;
        let head = head_output(&tape, &out.maps, self.config.search_grid())?;
        Ok((head, out.backbone.hidden))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 24,
            heads: 3,
            depth: 4,
            dsa_layers: vec![2, 4],
            retention: vec![0.9, 0.7],
            mlp_ratio: 2,
            patch: 4,
            template_size: 8,
            search_size: 16,
            templates: 2,
            ..ModelConfig::default()
        }
    }

    fn random_input(cfg: &ModelConfig, rng: &mut RngStream) -> ModelInput {
        let pd = cfg.patch_dim();
        ModelInput {
            templates: (0..cfg.templates)
                .map(|_| gaussian(&[cfg.tokens_per_template(), pd], 1.0, rng))
                .collect(),
            search: gaussian(&[cfg.n_x(), pd], 1.0, rng),
        }
    }

    #[test]
    fn default_retention_counts() {
        let cfg = ModelConfig {
            template_size: 128,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.tokens_per_template(), 64);
        assert_eq!([4, 7, 10].map(|l| cfg.retained_after(l).unwrap()), [172, 153, 134]);
        assert_eq!(cfg.retained_after(5), None);
    }

    #[test]
    fn config_ints_round_trip() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig::vit_base(),
            tiny_config(),
            ModelConfig::default().standard(),
        ] {
            assert_eq!(ModelConfig::from_ints(&cfg.to_ints()).unwrap(), cfg);
        }
    }

    #[test]
    fn layout_round_trip() {
        let m = Model::new(tiny_config(), 1).unwrap();
        let (cfg, layers) = Model::layout_from_ints(&m.layout_ints()).unwrap();
        assert_eq!(&cfg, m.config());
        assert_eq!(layers, m.layers());
    }

    #[test]
    fn forward_shapes_and_drop_counts() {
        let cfg = tiny_config();
        let m = Model::new(cfg.clone(), 3).unwrap();
        let mut rng = RngStream::new(4);
        let input = random_input(&cfg, &mut rng);
        let (out, hidden) = m.infer_full(&input, true).unwrap();
        assert_eq!(out.grid(), (4, 4));
        let hidden = hidden.unwrap();
        assert_eq!(hidden.len(), cfg.depth + 1);
        for h in &hidden {
            assert_eq!(h.shape(), [cfg.n_z() + cfg.n_x(), cfg.d_model]);
        }
        let mut tape = GradTape::new();
        let mut binder = Binder::frozen(m.params());
        let fwd = m
            .forward(&mut tape, &mut binder, &input, &mut ForwardOptions::inference())
            .unwrap();
        assert_eq!(fwd.backbone.tokens.n_z, 5);
        let kept: Vec<usize> = fwd.backbone.traces.iter().map(|t| t.kept.len()).collect();
        assert_eq!(kept, vec![8, 7, 7, 5]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let m = Model::new(cfg.clone(), 3).unwrap();
        let input = random_input(&cfg, &mut RngStream::new(5));
        assert_eq!(m.infer(&input).unwrap(), m.infer(&input).unwrap());
        assert_eq!(Model::new(cfg, 3).unwrap().weight_hash(), m.weight_hash());
    }

    #[test]
    fn from_params_checks_names_and_shapes() {
        let m = Model::new(tiny_config(), 2).unwrap();
        let (cfg, layers, params) = m.clone().into_parts();
        let back = Model::from_params(cfg.clone(), layers.clone(), params.clone()).unwrap();
        assert_eq!(back.weight_hash(), m.weight_hash());
        let mut broken = params.clone();
        broken.insert("blocks.1.norm1.weight", Tensor::ones(&[5]));
        assert!(Model::from_params(cfg.clone(), layers.clone(), broken).is_err());
        let mut extra = params;
        extra.insert("blocks.9.norm1.weight", Tensor::ones(&[24]));
        assert!(Model::from_params(cfg, layers, extra).is_err());
    }

    #[test]
    fn param_groups() {
        assert_eq!(ParamGroup::of("embed.pos_x"), Some(ParamGroup::Embedding));
        assert_eq!(ParamGroup::of("blocks.10.head_mixer"), Some(ParamGroup::Block(10)));
        assert_eq!(ParamGroup::of("head.score.0.bias"), Some(ParamGroup::Head));
        assert_eq!(ParamGroup::of("other"), None);
    }
}
