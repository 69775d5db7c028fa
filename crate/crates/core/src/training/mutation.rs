//! Fault injection for the SGD update step. Each operator alters the
//! gradient that reaches the parameter update and nothing else, so a
//! mutated trainer still runs the same loop, logs the same metrics, and
//! usually still converges.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "operator", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MutationOperator {
    None,
    /// A seeded random subset of `round(fraction * H)` hidden units never
    /// has its incoming weights or bias updated.
    FreezeHiddenFraction { fraction: f64, seed: u64 },
    /// The bias of layer 1 or 2 is never updated.
    SkipBiasUpdate { layer: u8 },
    /// The weight and bias gradients of one layer are multiplied by `factor`.
    ScaleGradient { layer: u8, factor: f64 },
    /// Every `k`-th step re-applies the previous step's gradient.
    StaleGradientEvery { k: usize },
}

impl MutationOperator {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match *self {
            MutationOperator::None => Ok(()),
            MutationOperator::FreezeHiddenFraction { fraction, .. } => {
                if fraction > 0.0 && fraction < 1.0 {
                    Ok(())
                } else {
                    bad(format!("freeze fraction {fraction} must lie in (0, 1)"))
                }
            }
            MutationOperator::SkipBiasUpdate { layer } => match layer {
                1 | 2 => Ok(()),
                _ => bad(format!("layer {layer} must be 1 or 2")),
            },
            MutationOperator::ScaleGradient { layer, factor } => {
                if !matches!(layer, 1 | 2) {
                    bad(format!("layer {layer} must be 1 or 2"))
                } else if !factor.is_finite() {
                    bad(format!("scale factor {factor} must be finite"))
                } else {
                    Ok(())
                }
            }
            MutationOperator::StaleGradientEvery { k } => {
                if k >= 2 {
                    Ok(())
                } else {
                    bad(format!("stale period {k} must be >= 2"))
                }
            }
        }
    }
}

impl fmt::Display for MutationOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MutationOperator::None => write!(f, "NONE"),
            MutationOperator::FreezeHiddenFraction { fraction, seed } => {
                write!(f, "FREEZE_HIDDEN_FRACTION({fraction},{seed})")
            }
            MutationOperator::SkipBiasUpdate { layer } => write!(f, "SKIP_BIAS_UPDATE({layer})"),
            MutationOperator::ScaleGradient { layer, factor } => {
                write!(f, "SCALE_GRADIENT({layer},{factor})")
            }
            MutationOperator::StaleGradientEvery { k } => write!(f, "STALE_GRADIENT_EVERY({k})"),
        }
    }
}

impl FromStr for MutationOperator {
    type Err = Error;

    /// Parses the `Display` form, e.g. `SCALE_GRADIENT(1,0.5)`. The seed of
    /// `FREEZE_HIDDEN_FRACTION` may be omitted and defaults to 0.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidConfig(format!("cannot parse mutation {s:?}"));
        let (name, args) = match s.find('(') {
            Some(open) if s.ends_with(')') => {
                let args: Vec<&str> = s[open + 1..s.len() - 1]
                    .split(',')
                    .map(str::trim)
                    .filter(|a| !a.is_empty())
                    .collect();
                (&s[..open], args)
            }
            Some(_) => return Err(bad()),
            None => (s, Vec::new()),
        };
        fn num<T: FromStr>(a: &str, bad: impl Fn() -> Error) -> Result<T> {
            a.parse().map_err(|_| bad())
        }
        let op = match (name.to_ascii_uppercase().as_str(), args.as_slice()) {
            ("NONE", []) => MutationOperator::None,
            ("FREEZE_HIDDEN_FRACTION", [f]) => MutationOperator::FreezeHiddenFraction {
                fraction: num(f, bad)?,
                seed: 0,
            },
            ("FREEZE_HIDDEN_FRACTION", [f, seed]) => MutationOperator::FreezeHiddenFraction {
                fraction: num(f, bad)?,
                seed: num(seed, bad)?,
            },
            ("SKIP_BIAS_UPDATE", [l]) => MutationOperator::SkipBiasUpdate { layer: num(l, bad)? },
            ("SCALE_GRADIENT", [l, factor]) => MutationOperator::ScaleGradient {
                layer: num(l, bad)?,
                factor: num(factor, bad)?,
            },
            ("STALE_GRADIENT_EVERY", [k]) => MutationOperator::StaleGradientEvery { k: num(k, bad)? },
            _ => return Err(bad()),
        };
        op.validate()?;
        Ok(op)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationSpec {
    #[serde(flatten)]
    pub operator: MutationOperator,
    #[serde(default)]
    pub description: String,
}

impl MutationSpec {
    pub fn none() -> Self {
        Self::new(MutationOperator::None, "reference trainer")
    }

    pub fn new(operator: MutationOperator, description: impl Into<String>) -> Self {
        Self {
            operator,
            description: description.into(),
        }
    }

    pub fn is_none(&self) -> bool {
        self.operator == MutationOperator::None
    }

    /// Short identifier, the operator's display form.
    pub fn trainer_id(&self) -> String {
        self.operator.to_string()
    }
}

impl Default for MutationSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl FromStr for MutationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let operator: MutationOperator = s.parse()?;
        Ok(Self::new(operator, String::new()))
    }
}

/// Per-run state of a mutation operator.
pub(crate) struct MutationHook {
    op: MutationOperator,
    frozen: Vec<usize>,
    previous: Option<Gradients>,
}

impl MutationHook {
    pub(crate) fn new(op: MutationOperator, cfg: ModelConfig) -> Self {
        let frozen = match op {
            MutationOperator::FreezeHiddenFraction { fraction, seed } => {
                let h = cfg.hidden_dim;
                let count = ((fraction * h as f64).round() as usize).min(h);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked = index::sample(&mut rng, h, count).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => Vec::new(),
        };
        Self {
            op,
            frozen,
            previous: None,
        }
    }

    #[cfg(test)]
    pub(crate) fn frozen_units(&self) -> &[usize] {
        &self.frozen
    }

    /// The gradient to reuse at global step `step`, if this step is stale.
    pub(crate) fn stale_gradient(&self, step: usize) -> Option<Gradients> {
        match self.op {
            MutationOperator::StaleGradientEvery { k } if step % k == k - 1 => {
                self.previous.clone()
            }
            _ => None,
        }
    }

    pub(crate) fn remember(&mut self, grad: &Gradients) {
        if matches!(self.op, MutationOperator::StaleGradientEvery { .. }) {
            self.previous = Some(grad.clone());
        }
    }

    /// Rewrites the gradient before the update.
    pub(crate) fn apply(&self, grad: &mut Gradients) {
        match self.op {
            MutationOperator::None | MutationOperator::StaleGradientEvery { .. } => {}
            MutationOperator::FreezeHiddenFraction { .. } => {
                let d = grad.config().input_dim;
                for &i in &self.frozen {
                    grad.w1[i * d..(i + 1) * d].fill(0.0);
                    grad.b1[i] = 0.0;
                }
            }
            MutationOperator::SkipBiasUpdate { layer: 1 } => grad.b1.fill(0.0),
            MutationOperator::SkipBiasUpdate { .. } => grad.b2.fill(0.0),
            MutationOperator::ScaleGradient { layer, factor } => {
                let (w, b) = if layer == 1 {
                    (&mut grad.w1, &mut grad.b1)
                } else {
                    (&mut grad.w2, &mut grad.b2)
                };
                w.iter_mut().chain(b.iter_mut()).for_each(|g| *g *= factor);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_parse_round_trip() {
        for op in [
            MutationOperator::None,
            MutationOperator::FreezeHiddenFraction {
                fraction: 0.5,
                seed: 7,
            },
            MutationOperator::SkipBiasUpdate { layer: 2 },
            MutationOperator::ScaleGradient {
                layer: 1,
                factor: 0.25,
            },
            MutationOperator::StaleGradientEvery { k: 3 },
        ] {
            assert_eq!(op.to_string().parse::<MutationOperator>().unwrap(), op);
        }
        assert_eq!(
            "freeze_hidden_fraction(0.3)".parse::<MutationOperator>().unwrap(),
            MutationOperator::FreezeHiddenFraction {
                fraction: 0.3,
                seed: 0
            }
        );
    }

    #[test]
    fn parameter_ranges_enforced() {
        for bad in [
            "FREEZE_HIDDEN_FRACTION(1.0)",
            "FREEZE_HIDDEN_FRACTION(0)",
            "SKIP_BIAS_UPDATE(3)",
            "SCALE_GRADIENT(0,1)",
            "STALE_GRADIENT_EVERY(1)",
            "SCALE_GRADIENT(1)",
            "BOGUS",
            "NONE(1",
        ] {
            assert!(bad.parse::<MutationOperator>().is_err(), "{bad}");
        }
    }

    #[test]
    fn json_shape() {
        let spec = MutationSpec::new(
            MutationOperator::ScaleGradient {
                layer: 1,
                factor: 0.0,
            },
            "layer 1 never learns",
        );
        let json = serde_json::to_value(&spec).unwrap();
        assert_eq!(json["operator"], "SCALE_GRADIENT");
        assert_eq!(json["layer"], 1);
        let back: MutationSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
        let none: MutationSpec = serde_json::from_str(r#"{"operator":"NONE"}"#).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn freeze_picks_expected_count() {
        let hook = MutationHook::new(
            MutationOperator::FreezeHiddenFraction {
                fraction: 0.5,
                seed: 1,
            },
            ModelConfig::new(4, 10, 2),
        );
        assert_eq!(hook.frozen_units().len(), 5);
    }
}
