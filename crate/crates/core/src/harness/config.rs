//! Experiment configuration, as read from JSON.

use std::path::{Path, PathBuf};

use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::basis::{dyadic_basis, martingale_basis, BallBasis, BasisError, BasisJson, MartingaleTree};
use crate::measure::CellSpace;
use crate::rational::{RatioStr, Rational};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Measure(#[from] crate::measure::MeasureError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where the basis comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSpec {
    /// Dyadic intervals of `[0,1)` down to the given generation.
    Dyadic { depth: u32 },
    /// Complete tree splitting every node by the same ratios.
    RegularTree { ratios: Vec<RatioStr>, depth: u32 },
    Martingale(MartingaleTree),
    /// Path to a JSON file holding a [`MartingaleTree`].
    MartingaleFile(PathBuf),
    /// Balls over an explicit space.
    Inline(BasisJson),
}

impl BasisSpec {
    /// Builds the basis. Relative file paths resolve against `base`.
    pub fn build(&self, base: Option<&Path>) -> Result<(BallBasis, CellSpace), ConfigError> {
        match self {
            BasisSpec::Dyadic { depth } => {
                if *depth > 16 {
                    return Err(ConfigError::Invalid(format!("dyadic depth {depth} exceeds 16")));
                }
                Ok(dyadic_basis(*depth))
            }
            BasisSpec::RegularTree { ratios, depth } => {
                let ratios: Vec<Rational> = ratios.iter().map(|q| q.0.clone()).collect();
                let tree = MartingaleTree::from_ratios(Rational::one(), &ratios, *depth);
                Ok(martingale_basis(&tree)?)
            }
            BasisSpec::Martingale(tree) => Ok(martingale_basis(tree)?),
            BasisSpec::MartingaleFile(path) => {
                let path = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                let tree: MartingaleTree = serde_json::from_str(&text)?;
                Ok(martingale_basis(&tree)?)
            }
            BasisSpec::Inline(json) => {
                let space_json = json
                    .space
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("inline basis needs a space".into()))?;
                let space = CellSpace::from_json(space_json)?;
                let basis = BallBasis::from_json(&space, json)?;
                Ok((basis, space))
            }
        }
    }
}

/// Random step functions: each cell is zero with probability
/// `zero_probability`, otherwise `min + (max - min) k / steps` for a uniform
/// `k` in `0..=steps`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueRange {
    pub min: RatioStr,
    pub max: RatioStr,
    #[serde(default = "default_steps")]
    pub steps: u32,
    #[serde(default = "zero")]
    pub zero_probability: RatioStr,
}

fn default_steps() -> u32 {
    8
}

fn zero() -> RatioStr {
    RatioStr(Rational::zero())
}

fn half() -> RatioStr {
    RatioStr(Rational::new(1.into(), 2.into()))
}

fn default_trials() -> usize {
    100
}

fn yes() -> bool {
    true
}

impl Default for ValueRange {
    fn default() -> Self {
        ValueRange {
            min: zero(),
            max: RatioStr(Rational::from_integer(4.into())),
            steps: default_steps(),
            zero_probability: half(),
        }
    }
}

/// Which thresholds each trial evaluates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LambdaGrid {
    /// Every distinct value of the operator output, approached from below.
    #[serde(default = "yes")]
    pub breakpoints: bool,
    /// Extra fixed thresholds.
    #[serde(default)]
    pub values: Vec<RatioStr>,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid {
            breakpoints: true,
            values: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outputs {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub basis: BasisSpec,
    pub r: u32,
    /// Exponent of the strong-type runs; must exceed `r`.
    #[serde(default)]
    pub p: Option<RatioStr>,
    #[serde(default = "half")]
    pub gamma: RatioStr,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lambda_grid: LambdaGrid,
    #[serde(default)]
    pub values: ValueRange,
    /// Chance that a ball is offered to the random collection builder.
    #[serde(default = "half")]
    pub collection_density: RatioStr,
    /// Flatten at every evaluated threshold and check the level-set chain.
    #[serde(default)]
    pub chain_check: bool,
    #[serde(default)]
    pub outputs: Outputs,
}

impl ExperimentConfig {
    pub fn new(basis: BasisSpec, r: u32) -> Self {
        ExperimentConfig {
            basis,
            r,
            p: None,
            gamma: half(),
            trials: default_trials(),
            seed: 0,
            lambda_grid: LambdaGrid::default(),
            values: ValueRange::default(),
            collection_density: half(),
            chain_check: false,
            outputs: Outputs::default(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.r == 0 {
            return bad("r must be at least 1");
        }
        if let Some(p) = &self.p {
            if p.0 <= Rational::from_integer(self.r.into()) {
                return bad("p must exceed r");
            }
        }
        if !self.gamma.0.is_positive() || self.gamma.0 >= Rational::one() {
            return bad("gamma must lie in (0, 1)");
        }
        let v = &self.values;
        if v.min.0.is_negative() || v.max.0 < v.min.0 {
            return bad("values need 0 <= min <= max");
        }
        if v.steps == 0 {
            return bad("values.steps must be positive");
        }
        let unit = |q: &RatioStr| !q.0.is_negative() && q.0 <= Rational::one();
        if !unit(&v.zero_probability) || !unit(&self.collection_density) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.lambda_grid.values.iter().any(|l| !l.0.is_positive()) {
            return bad("lambda values must be positive");
        }
        Ok(())
    }
}
