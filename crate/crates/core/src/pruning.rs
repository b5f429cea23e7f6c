//! Layer pruning by hierarchical contribution: each block's contribution is
//! one minus the mean cosine similarity between its input and output hidden
//! states; the lowest-contributing blocks of the semantic-aware group and of
//! the standard group are removed under separate ratios. A fixed-order
//! sequential baseline is included for comparison.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelInput, ParamGroup, ParamStore};
use crate::numerics::{math, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerGroup {
    /// Semantic-aware blocks.
    D,
    /// Standard blocks.
    S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProfile {
    pub layer: usize,
    pub contribution: f64,
    pub samples: usize,
    pub group: LayerGroup,
}

/// Group membership of the unpruned stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGroups {
    pub d: Vec<usize>,
    pub s: Vec<usize>,
    /// Counted in their group's size but never removed.
    pub exempt: Vec<usize>,
}

impl LayerGroups {
    /// Twelve blocks, semantic-aware at 4, 7 and 10; layer 1 exempt.
    pub fn canonical() -> Self {
        Self::from_config(&ModelConfig::default())
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        let d = cfg.dsa_layers.clone();
        let s = (1..=cfg.depth).filter(|l| !d.contains(l)).collect();
        Self {
            d,
            s,
            exempt: alloc::vec![1],
        }
    }

    pub fn group_of(&self, layer: usize) -> Option<LayerGroup> {
        if self.d.contains(&layer) {
            Some(LayerGroup::D)
        } else if self.s.contains(&layer) {
            Some(LayerGroup::S)
        } else {
            None
        }
    }

    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.d.iter().chain(&self.s).copied().collect();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneMethod {
    ContributionRanking,
    Sequential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneSpec {
    pub method: PruneMethod,
    pub p_d: f64,
    pub p_s: f64,
    pub groups: LayerGroups,
    pub removed_d: Vec<usize>,
    pub removed_s: Vec<usize>,
    /// Surviving layers, ascending.
    pub retained: Vec<usize>,
    /// `(layer, contribution)` for ranked specs.
    pub contributions: Vec<(usize, f64)>,
}

impl PruneSpec {
    /// Both removed sets, ascending.
    pub fn removed(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.removed_d.iter().chain(&self.removed_s).copied().collect();
        v.sort_unstable();
        v
    }

    /// Nothing removed.
    pub fn identity(groups: LayerGroups) -> Self {
        Self {
            method: PruneMethod::Sequential,
            p_d: 0.0,
            p_s: 0.0,
            retained: groups.all(),
            groups,
            removed_d: Vec::new(),
            removed_s: Vec::new(),
            contributions: Vec::new(),
        }
    }
}

/// Measured contributions of layers 2 to 12 of a profiled twelve-layer
/// ViT-B tracker; a default ranking when no profile is supplied.
pub const REFERENCE_CONTRIBUTIONS: [(usize, f64); 11] = [
    (2, 0.1325),
    (3, 0.0739),
    (4, 0.0615),
    (5, 0.0581),
    (6, 0.0429),
    (7, 0.0457),
    (8, 0.0438),
    (9, 0.0358),
    (10, 0.0428),
    (11, 0.0657),
    (12, 0.1444),
];

/// Named variants keep `p_d = 2/3` and vary `p_s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    D8,
    D7,
    D6,
    D4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::D8, Variant::D7, Variant::D6, Variant::D4];

    /// `(p_d, p_s)`.
    pub fn ratios(self) -> (f64, f64) {
        let p_s = match self {
            Variant::D8 => 2.0,
            Variant::D7 => 3.0,
            Variant::D6 => 4.0,
            Variant::D4 => 6.0,
        } / 9.0;
        (2.0 / 3.0, p_s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::D8 => "d8",
            Variant::D7 => "d7",
            Variant::D6 => "d6",
            Variant::D4 => "d4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

/// `ceil(p * n)`, robust to ratios like `6/9` that round just above an integer.
pub fn prune_count(p: f64, n: usize) -> usize {
    math::ceil(p * n as f64 - 1e-9).max(0.0) as usize
}

fn check_ratio(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
    }
    Ok(())
}

fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm hidden state".into()));
    }
    Ok((dot / math::sqrt(na * nb)).clamp(-1.0, 1.0))
}

/// `1 - mean_m cos(T_m, T'_m)` over flattened state pairs.
pub fn layer_contribution(states_i: &[Tensor], states_next: &[Tensor]) -> Result<f64> {
    if states_i.is_empty() || states_i.len() != states_next.len() {
        return Err(Error::invalid(format!(
            "{} vs {} hidden-state samples",
            states_i.len(),
            states_next.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in states_i.iter().zip(states_next) {
        if a.len() != b.len() {
            return Err(Error::shape(
                "layer_contribution",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        total += cosine(a, b)?;
    }
    Ok(1.0 - total / states_i.len() as f64)
}

/// Removes the lowest `k` of `candidates` by contribution; ties remove the
/// higher layer first.
fn lowest(candidates: &[usize], scores: &[(usize, f64)], k: usize) -> Result<Vec<usize>> {
    let mut ranked = Vec::with_capacity(candidates.len());
    for &l in candidates {
        let s = scores
            .iter()
            .find(|(layer, _)| *layer == l)
            .map(|p| p.1)
            .ok_or_else(|| Error::invalid(format!("no contribution for layer {l}")))?;
        if !s.is_finite() {
            return Err(Error::NonFinite("layer contribution"));
        }
        ranked.push((l, s));
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
    let mut out: Vec<usize> = ranked.into_iter().take(k).map(|p| p.0).collect();
    out.sort_unstable();
    Ok(out)
}

fn budget(group: &[usize], exempt: &[usize], p: f64, label: &str) -> Result<(Vec<usize>, usize)> {
    let candidates: Vec<usize> = group.iter().copied().filter(|l| !exempt.contains(l)).collect();
    let k = prune_count(p, group.len());
    if k > candidates.len() {
        return Err(Error::invalid(format!(
            "{label}: removing {k} of {} layers leaves fewer than the exempt set",
            group.len()
        )));
    }
    Ok((candidates, k))
}

fn finish(
    method: PruneMethod,
    groups: &LayerGroups,
    p_d: f64,
    p_s: f64,
    removed_d: Vec<usize>,
    removed_s: Vec<usize>,
) -> PruneSpec {
    let retained = groups
        .all()
        .into_iter()
        .filter(|l| !removed_d.contains(l) && !removed_s.contains(l))
        .collect();
    PruneSpec {
        method,
        p_d,
        p_s,
        groups: groups.clone(),
        removed_d,
        removed_s,
        retained,
        contributions: Vec::new(),
    }
}

/// Ranks each group by contribution and removes `ceil(p * |group|)` lowest.
pub fn rank_and_prune(profiles: &[LayerProfile], groups: &LayerGroups, p_d: f64, p_s: f64) -> Result<PruneSpec> {
    check_ratio("p_d", p_d)?;
    check_ratio("p_s", p_s)?;
    let scores: Vec<(usize, f64)> = profiles.iter().map(|p| (p.layer, p.contribution)).collect();
    let (cd, kd) = budget(&groups.d, &groups.exempt, p_d, "D group")?;
    let (cs, ks) = budget(&groups.s, &groups.exempt, p_s, "S group")?;
    let removed_d = lowest(&cd, &scores, kd)?;
    let removed_s = lowest(&cs, &scores, ks)?;
    let mut spec = finish(PruneMethod::ContributionRanking, groups, p_d, p_s, removed_d, removed_s);
    spec.contributions = scores;
    Ok(spec)
}

/// Contribution-agnostic baseline: removes the earliest eligible layers of
/// each group.
pub fn sequential_prune(groups: &LayerGroups, p_d: f64, p_s: f64) -> Result<PruneSpec> {
    check_ratio("p_d", p_d)?;
    check_ratio("p_s", p_s)?;
    let (cd, kd) = budget(&groups.d, &groups.exempt, p_d, "D group")?;
    let (cs, ks) = budget(&groups.s, &groups.exempt, p_s, "S group")?;
    Ok(finish(
        PruneMethod::Sequential,
        groups,
        p_d,
        p_s,
        cd.into_iter().take(kd).collect(),
        cs.into_iter().take(ks).collect(),
    ))
}

/// Profiles from a contribution table keyed by layer.
pub fn profiles_from_table(groups: &LayerGroups, table: &[(usize, f64)], samples: usize) -> Result<Vec<LayerProfile>> {
    table
        .iter()
        .map(|&(layer, contribution)| {
            let group = groups
                .group_of(layer)
                .ok_or_else(|| Error::invalid(format!("layer {layer} belongs to no group")))?;
            Ok(LayerProfile {
                layer,
                contribution,
                samples,
                group,
            })
        })
        .collect()
}

/// Runs the model on each input, recording hidden states, and measures
/// every present layer's contribution.
pub fn profile_model(model: &Model, inputs: &[ModelInput]) -> Result<Vec<LayerProfile>> {
    if inputs.is_empty() {
        return Err(Error::invalid("profiling needs at least one input"));
    }
    let groups = LayerGroups::from_config(model.config());
    let n = model.layers().len();
    let mut before: Vec<Vec<Tensor>> = alloc::vec![Vec::with_capacity(inputs.len()); n];
    let mut after: Vec<Vec<Tensor>> = alloc::vec![Vec::with_capacity(inputs.len()); n];
    for input in inputs {
        let (_, hidden) = model.infer_full(input, true)?;
        let hidden = hidden.expect("requested");
        for i in 0..n {
            before[i].push(hidden[i].clone());
            after[i].push(hidden[i + 1].clone());
        }
    }
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            Ok(LayerProfile {
                layer: l.index,
                contribution: layer_contribution(&before[i], &after[i])?,
                samples: inputs.len(),
                group: groups.group_of(l.index).expect("layer within config depth"),
            })
        })
        .collect()
}

/// Drops the removed blocks' parameters; everything else is copied as is.
pub fn build_pruned_model(model: &Model, spec: &PruneSpec) -> Result<Model> {
    let present: Vec<usize> = model.layers().iter().map(|l| l.index).collect();
    for l in spec.removed() {
        if !present.contains(&l) {
            return Err(Error::Model(format!("layer {l} is not in the model")));
        }
    }
    for &l in &spec.retained {
        if !present.contains(&l) {
            return Err(Error::Model(format!("retained layer {l} is not in the model")));
        }
    }
    let removed = spec.removed();
    let layers = model
        .layers()
        .iter()
        .copied()
        .filter(|l| !removed.contains(&l.index))
        .collect();
    let mut params = ParamStore::new();
    for (name, t) in model.params().iter() {
        if let Some(ParamGroup::Block(i)) = ParamGroup::of(name) {
            if removed.contains(&i) {
                continue;
            }
        }
        params.insert(String::from(name), t.clone());
    }
    Model::from_params(model.config().clone(), layers, params)
}
