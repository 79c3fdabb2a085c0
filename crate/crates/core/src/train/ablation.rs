use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{cross_validate, CvConfig, CvResult, PreparedDataset, TrainConfig, TrainError};
use crate::diffcore::Scalar;
use crate::losses::DistillMode;
use crate::model::EnsembleMode;
use crate::wpd::band_grouping_preset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    LossType,
    Ensemble,
    BlockPattern,
    Temperature,
    Branches,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::LossType, Suite::Ensemble, Suite::BlockPattern, Suite::Temperature, Suite::Branches];

    pub fn name(self) -> &'static str {
        match self {
            Suite::LossType => "loss_type",
            Suite::Ensemble => "ensemble",
            Suite::BlockPattern => "block_pattern",
            Suite::Temperature => "temperature",
            Suite::Branches => "branches",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| TrainError::Invalid(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub cfg: TrainConfig,
    /// Band preset to re-decompose the data with, when it differs.
    pub branches: Option<usize>,
}

fn variant(name: impl Into<String>, base: &TrainConfig, edit: impl FnOnce(&mut TrainConfig)) -> Variant {
    let mut cfg = base.clone();
    edit(&mut cfg);
    Variant { name: name.into(), cfg, branches: None }
}

pub fn suite_variants(suite: Suite, base: &TrainConfig) -> Vec<Variant> {
    match suite {
        Suite::LossType => vec![
            variant("ce", base, |c| c.distill.mode = DistillMode::None),
            variant("ce+kl_e", base, |c| c.distill.mode = DistillMode::SingleDirection),
            variant("ce+distill", base, |c| c.distill.mode = DistillMode::Mutual),
        ],
        Suite::Ensemble => vec![
            variant("average", base, |c| c.model.ensemble_mode = EnsembleMode::Average),
            variant("gate_network", base, |c| {
                c.model.ensemble_mode = EnsembleMode::GateNetwork;
                c.gate_importance_weight = 0.0;
            }),
            variant("gate_network+imp", base, |c| {
                c.model.ensemble_mode = EnsembleMode::GateNetwork;
                if c.gate_importance_weight == 0.0 {
                    c.gate_importance_weight = TrainConfig::default().gate_importance_weight;
                }
            }),
            variant("wavelet_attention", base, |c| {
                c.model.ensemble_mode = EnsembleMode::WaveletAttention;
                c.distill.lambda = 0.0;
            }),
            variant("wavelet_attention+norm", base, |c| {
                c.model.ensemble_mode = EnsembleMode::WaveletAttention;
                if c.distill.lambda == 0.0 {
                    c.distill.lambda = 0.01;
                }
            }),
        ],
        Suite::BlockPattern => ["TTTT", "TTTM", "TTMM", "TMTM"]
            .iter()
            .map(|p| {
                variant(*p, base, |c| {
                    c.model.block_pattern = p.to_string();
                    c.model.num_blocks = p.len();
                })
            })
            .collect(),
        Suite::Temperature => (3..=9).map(|t| variant(format!("T={t}"), base, |c| c.distill.temperature = t as f64)).collect(),
        Suite::Branches => [2usize, 3, 6]
            .iter()
            .map(|&b| Variant { branches: Some(b), ..variant(format!("B={b}"), base, |c| c.model.num_branches = b) })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub result: CvResult,
}

/// Runs every variant of a suite as a full cross-validation.
pub fn ablation_suite<F: Scalar>(
    suite: Suite,
    data: &PreparedDataset,
    base: &TrainConfig,
    cv: &CvConfig,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    for v in suite_variants(suite, base) {
        let result = match v.branches {
            Some(b) if b != data.num_branches() => {
                let regrouped = data.regroup(band_grouping_preset(b)?)?;
                cross_validate::<F>(&regrouped, &v.cfg, cv)?
            }
            _ => cross_validate::<F>(data, &v.cfg, cv)?,
        };
        rows.push(AblationRow { variant: v.name, result });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_shapes() {
        let base = TrainConfig::default();
        assert_eq!(suite_variants(Suite::LossType, &base).len(), 3);
        assert_eq!(suite_variants(Suite::Ensemble, &base).len(), 5);
        let blocks: Vec<String> = suite_variants(Suite::BlockPattern, &base).into_iter().map(|v| v.name).collect();
        assert!(blocks.contains(&"TTTT".to_string()));
        let temps = suite_variants(Suite::Temperature, &base);
        assert_eq!(temps.len(), 7);
        assert_eq!(temps[0].cfg.distill.temperature, 3.0);
        assert_eq!(temps[6].cfg.distill.temperature, 9.0);
        let br: Vec<Option<usize>> = suite_variants(Suite::Branches, &base).into_iter().map(|v| v.branches).collect();
        assert_eq!(br, vec![Some(2), Some(3), Some(6)]);
        for s in Suite::ALL {
            for v in suite_variants(s, &base) {
                v.cfg.validate().unwrap();
            }
        }
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }
}
