use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use hicox::baselines::BaselineMethod;
use hicox::selection::{grid_product, logspace, ridge_grid, default_grid, CvPlan, GridPoint, StudyWeights};
use hicox::similarity::SimilarityOptions;
use hicox::{FusionExponent, SolverOptions};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// `a = 2`, `lambda0 = 0`
    HrRidge,
    /// `a = 2`, `lambda1 = 0`
    HrLasso,
    /// `a = 1`, elastic net on the shared vector
    HrA1,
    Baseline(BaselineMethod),
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::HrRidge,
        Method::HrLasso,
        Method::HrA1,
        Method::Baseline(BaselineMethod::SL),
        Method::Baseline(BaselineMethod::SR),
        Method::Baseline(BaselineMethod::PL),
        Method::Baseline(BaselineMethod::PR),
        Method::Baseline(BaselineMethod::FE),
        Method::Baseline(BaselineMethod::RE),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::HrRidge => "HR-R",
            Method::HrLasso => "HR-L",
            Method::HrA1 => "HR-A1",
            Method::Baseline(b) => b.as_str(),
        }
    }

    pub fn is_hierarchical(self) -> bool {
        !matches!(self, Method::Baseline(_))
    }

    pub fn exponent(self) -> FusionExponent {
        match self {
            Method::HrA1 => FusionExponent::One,
            _ => FusionExponent::Two,
        }
    }

    /// Grid used when the configuration does not supply one.
    pub fn default_grid(self) -> Vec<GridPoint> {
        match self {
            Method::HrRidge => ridge_grid(),
            Method::HrLasso => {
                let mut l0 = logspace(1e1, 1e-3, 7);
                l0.push(0.0);
                grid_product(&l0, &[0.0])
            }
            _ => default_grid(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        match norm.as_str() {
            "HR-R" | "HRR" => Ok(Method::HrRidge),
            "HR-L" | "HRL" => Ok(Method::HrLasso),
            "HR-A1" | "HR(A=1)" | "HRA1" => Ok(Method::HrA1),
            other => Ok(Method::Baseline(other.parse().with_context(|| {
                format!("unknown method `{s}` (expected one of HR-R, HR-L, HR-A1, SL, SR, PL, PR, FE, RE)")
            })?)),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

pub fn parse_methods(list: &str) -> anyhow::Result<Vec<Method>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SigmaSource {
    Estimate,
    /// JSON file holding the matrix as nested rows.
    File { path: PathBuf },
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub method: Method,
    /// Fixed penalty weights; when both are set cross-validation is skipped
    /// for the hierarchical methods.
    pub lambda0: Option<f64>,
    pub lambda1: Option<f64>,
    /// Fixed baseline penalty weight (skips cross-validation).
    pub lambda: Option<f64>,
    pub solver: SolverOptions,
    pub sigma: SigmaSource,
    pub similarity: SimilarityOptions,
    pub cv_splits: usize,
    pub train_fraction: f64,
    pub grid: Option<Vec<GridPoint>>,
    pub weights: StudyWeights,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            method: Method::HrRidge,
            lambda0: None,
            lambda1: None,
            lambda: None,
            solver: SolverOptions::default(),
            sigma: SigmaSource::Estimate,
            similarity: SimilarityOptions::default(),
            cv_splits: 20,
            train_fraction: 0.8,
            grid: None,
            weights: StudyWeights::InverseSqrtEvents,
            standardize: true,
            seed: 1,
        }
    }
}

impl FitConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: FitConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.solver.validate()?;
        for (name, v) in [("lambda0", self.lambda0), ("lambda1", self.lambda1), ("lambda", self.lambda)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    bail!(hicox::Error::InvalidInput(format!("{name} must be non-negative, got {v}")));
                }
            }
        }
        match self.method {
            Method::HrRidge => {
                if self.lambda0.is_some_and(|v| v != 0.0) {
                    bail!(hicox::Error::InvalidInput("HR-R fixes lambda0 = 0".into()));
                }
                if let Some(g) = &self.grid {
                    if g.iter().any(|p| p.lambda0 != 0.0) {
                        bail!(hicox::Error::InvalidInput("HR-R grid points must have lambda0 = 0".into()));
                    }
                }
            }
            Method::HrLasso => {
                if self.lambda1.is_some_and(|v| v != 0.0) {
                    bail!(hicox::Error::InvalidInput("HR-L fixes lambda1 = 0".into()));
                }
                if let Some(g) = &self.grid {
                    if g.iter().any(|p| p.lambda1 != 0.0) {
                        bail!(hicox::Error::InvalidInput("HR-L grid points must have lambda1 = 0".into()));
                    }
                }
            }
            _ => {}
        }
        self.plan().validate()?;
        Ok(())
    }

    /// Fixed hierarchical penalty weights, with the method's forced values
    /// filled in.
    pub fn fixed_point(&self) -> Option<GridPoint> {
        let (l0, l1) = match self.method {
            Method::HrRidge => (Some(0.0), self.lambda1),
            Method::HrLasso => (self.lambda0, Some(0.0)),
            _ => (self.lambda0, self.lambda1),
        };
        Some(GridPoint::new(l0?, l1?))
    }

    pub fn plan(&self) -> CvPlan {
        CvPlan {
            m: self.cv_splits,
            train_fraction: self.train_fraction,
            grid: self.grid.clone().unwrap_or_else(|| self.method.default_grid()),
            weights: self.weights.clone(),
            seed: self.seed,
        }
    }
}
