//! Per-level adaptors and top-down fusion of the adapted pyramid.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Graph, Var};

const POINTWISE: ConvGeometry = ConvGeometry { kernel: 1, stride: 1, pad: 0 };
const SAME3: ConvGeometry = ConvGeometry { kernel: 3, stride: 1, pad: 1 };

/// Non-empty subset of pyramid levels; level 1 is the finest (1/4 scale).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LevelSet(u8);

impl LevelSet {
    pub const ALL: LevelSet = LevelSet(0b1111);

    pub fn new(levels: &[usize]) -> Result<Self> {
        let mut bits = 0u8;
        for &l in levels {
            if !(1..=4).contains(&l) {
                return Err(Error::Config(format!("feature level {l} is outside 1..=4")));
            }
            bits |= 1 << (l - 1);
        }
        if bits == 0 {
            return Err(Error::Config("at least one feature level must be active".into()));
        }
        Ok(Self(bits))
    }

    pub fn contains(self, level: usize) -> bool {
        (1..=4).contains(&level) && self.0 & (1 << (level - 1)) != 0
    }

    /// Active levels, finest first.
    pub fn levels(self) -> Vec<usize> {
        (1..=4).filter(|&l| self.contains(l)).collect()
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn finest(self) -> usize {
        self.levels()[0]
    }

    /// The seven subsets of the layer-selection ablation, in table order.
    pub fn ablation_grid() -> Vec<LevelSet> {
        [&[1][..], &[2], &[3], &[4], &[1, 2, 3], &[2, 3, 4], &[1, 2, 3, 4]]
            .iter()
            .map(|l| LevelSet::new(l).expect("static subsets are valid"))
            .collect()
    }
}

impl Default for LevelSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for LevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.levels().iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LevelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let levels = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.trim_start_matches(['l', 'L'])
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad feature level `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        LevelSet::new(&levels)
    }
}

impl Serialize for LevelSet {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        self.levels().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LevelSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let levels = Vec::<usize>::deserialize(d)?;
        LevelSet::new(&levels).map_err(serde::de::Error::custom)
    }
}

/// `relu(bn(conv1x1(f)))`: re-projects one frozen level to the adaptor width.
#[derive(Debug, Clone)]
pub struct Adaptor {
    pub level: usize,
    pub block: ConvBnRelu,
}

impl Adaptor {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        level: usize,
        in_channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            level,
            block: ConvBnRelu::new(store, &format!("adaptor.{level}"), in_channels, width, POINTWISE, rng)?,
        })
    }
}

pub fn adapt_level<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    adaptor: &Adaptor,
    feature: Var,
) -> Result<Var> {
    adaptor.block.forward(g, store, feature)
}

/// Decoder states after top-down fusion plus their concatenation at the
/// finest active resolution.
#[derive(Debug, Clone)]
pub struct AdaptedFeatures {
    /// `(level, state)` from the coarsest active level to the finest.
    pub states: Vec<(usize, Var)>,
    pub concat: Var,
    pub width: usize,
}

impl AdaptedFeatures {
    pub fn finest(&self) -> Var {
        self.states.last().expect("non-empty").1
    }
}

/// One fusion step: `conv3x3[adapted_finer, upsample(state)]` with
/// normalization and ReLU.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub level: usize,
    pub block: ConvBnRelu,
}

impl FusionBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        level: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            level,
            block: ConvBnRelu::new(store, &format!("fuse.{level}"), 2 * width, width, SAME3, rng)?,
        })
    }
}

/// Fusion blocks needed for a level set: one per active level except the
/// coarsest.
pub fn build_fusion<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    active: LevelSet,
    width: usize,
    rng: &mut R,
) -> Result<Vec<FusionBlock>> {
    let levels = active.levels();
    levels[..levels.len() - 1]
        .iter()
        .rev()
        .map(|&l| FusionBlock::new(store, l, width, rng))
        .collect()
}

/// Top-down fusion from the coarsest active level to the finest. `adapted`
/// holds `(level, map)` pairs for exactly the active levels.
pub fn fuse_topdown<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    blocks: &[FusionBlock],
    adapted: &[(usize, Var)],
    active: LevelSet,
) -> Result<AdaptedFeatures> {
    if active.is_empty() {
        return Err(Error::Config("empty feature-level selector".into()));
    }
    let mut order: Vec<(usize, Var)> = active
        .levels()
        .into_iter()
        .map(|l| {
            adapted
                .iter()
                .find(|(al, _)| *al == l)
                .copied()
                .ok_or_else(|| Error::Config(format!("no adapted map supplied for level {l}")))
        })
        .collect::<Result<_>>()?;
    order.reverse();

    let width = g.shape4(order[0].1).1;
    let mut state = order[0].1;
    let mut states = vec![order[0]];
    for &(level, feature) in &order[1..] {
        let block = blocks
            .iter()
            .find(|b| b.level == level)
            .ok_or_else(|| Error::Config(format!("no fusion block for level {level}")))?;
        let (_, _, h, w) = g.shape4(feature);
        let up = g.resize(state, h, w);
        let joined = g.concat_channels(&[feature, up])?;
        state = block.block.forward(g, store, joined)?;
        states.push((level, state));
    }

    let (_, _, h, w) = g.shape4(state);
    let resized: Vec<Var> = states.iter().map(|&(_, s)| g.resize(s, h, w)).collect();
    let concat = if resized.len() == 1 { resized[0] } else { g.concat_channels(&resized)? };
    Ok(AdaptedFeatures { states, concat, width })
}
