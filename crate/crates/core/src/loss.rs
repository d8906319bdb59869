//! Segmentation losses on the tape. Inputs are probabilities unless the name
//! says logits; Dice terms are computed per sample and averaged over the batch.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autograd::Var;
use crate::error::{AutogradError, ShapeError};
use crate::tensor::{Scalar, Tensor};

pub const BCE_EPS: f64 = 1e-7;
pub const NUM_STAGE_WEIGHTS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("expected {NUM_STAGE_WEIGHTS} stage logits with deep supervision, got {0}")]
    StageCount(usize),
    #[error("invalid loss config: {0}")]
    Config(String),
}

impl From<ShapeError> for LossError {
    fn from(e: ShapeError) -> Self {
        LossError::Autograd(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseLoss {
    /// BCE + Dice.
    BceDice,
    /// BCE + squared Dice (default).
    BceSquaredDice,
}

impl BaseLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseLoss::BceDice => "bce_dice",
            BaseLoss::BceSquaredDice => "bce_squared_dice",
        }
    }
}

impl fmt::Display for BaseLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaseLoss {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bce_dice" => Ok(BaseLoss::BceDice),
            "bce_squared_dice" => Ok(BaseLoss::BceSquaredDice),
            _ => Err(LossError::Config(format!("unknown base loss `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub smooth: f64,
    /// λ for decoder stages 1..=5, deepest first.
    pub stage_weights: [f64; NUM_STAGE_WEIGHTS],
    pub base_loss: BaseLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            smooth: 1.0,
            stage_weights: [0.1, 0.2, 0.3, 0.4, 0.5],
            base_loss: BaseLoss::BceSquaredDice,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.smooth > 0.0 && self.smooth.is_finite()) {
            return Err(LossError::Config(format!("smooth must be > 0, got {}", self.smooth)));
        }
        if self.stage_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::Config("stage weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

type R<'t, T> = Result<Var<'t, T>, AutogradError>;

pub fn bce<'t, T: Scalar>(p: Var<'t, T>, y: &Tensor<T>) -> R<'t, T> {
    p.bce(y, T::from_f64(BCE_EPS))
}

pub fn dice_loss<'t, T: Scalar>(p: Var<'t, T>, y: &Tensor<T>, smooth: f64) -> R<'t, T> {
    p.dice(y, T::from_f64(smooth), false)
}

pub fn squared_dice_loss<'t, T: Scalar>(p: Var<'t, T>, y: &Tensor<T>, smooth: f64) -> R<'t, T> {
    p.dice(y, T::from_f64(smooth), true)
}

/// BCE plus the Dice variant selected by `cfg.base_loss`.
pub fn base_loss<'t, T: Scalar>(p: Var<'t, T>, y: &Tensor<T>, cfg: &LossConfig) -> R<'t, T> {
    let b = bce(p, y)?;
    let d = match cfg.base_loss {
        BaseLoss::BceDice => dice_loss(p, y, cfg.smooth)?,
        BaseLoss::BceSquaredDice => squared_dice_loss(p, y, cfg.smooth)?,
    };
    Var::weighted_sum(&[(b, T::one()), (d, T::one())])
}

/// `base(σ(out)) + Σ λᵢ·base(σ(up(stageᵢ)))`. Stage logits are bilinearly
/// upsampled to the target resolution; an empty `stage_logits` means no deep
/// supervision.
pub fn group_loss<'t, T: Scalar>(
    out_logits: Var<'t, T>,
    stage_logits: &[Var<'t, T>],
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var<'t, T>, LossError> {
    if !stage_logits.is_empty() && stage_logits.len() != NUM_STAGE_WEIGHTS {
        return Err(LossError::StageCount(stage_logits.len()));
    }
    let ts = target.shape();
    if ts.len() != 4 {
        return Err(ShapeError::Rank { expected: 4, shape: ts.to_vec() }.into());
    }
    let (h, w) = (ts[2], ts[3]);
    let out = base_loss(out_logits.sigmoid()?, target, cfg)?;
    let mut terms = vec![(out, T::one())];
    for (s, &lambda) in stage_logits.iter().zip(&cfg.stage_weights) {
        let up = if s.shape()[2..] == [h, w] { *s } else { s.upsample_bilinear(h, w)? };
        terms.push((base_loss(up.sigmoid()?, target, cfg)?, T::from_f64(lambda)));
    }
    Ok(Var::weighted_sum(&terms)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn eval(f: impl for<'a> Fn(Var<'a, f64>) -> R<'a, f64>, p: Tensor<f64>) -> f64 {
        let tape = Tape::new();
        let v = tape.constant(p).unwrap();
        f(v).unwrap().value().item()
    }

    #[test]
    fn bce_examples() {
        let y = t(&[2], &[1.0, 0.0]);
        let v = eval(|p| bce(p, &y), t(&[2], &[0.9, 0.2]));
        assert!((v - (-(0.9f64).ln() - (0.8f64).ln()) / 2.0).abs() < 1e-12);
        assert!((v - 0.16425).abs() < 1e-5);
        let half = eval(|p| bce(p, &y), t(&[2], &[0.5, 0.5]));
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(eval(|p| bce(p, &y), y.clone()) < 1e-6);
    }

    #[test]
    fn dice_examples() {
        let ones = Tensor::<f64>::ones(&[1, 4]);
        assert!(eval(|p| dice_loss(p, &ones, 1.0), ones.clone()).abs() < 1e-12);
        let y = t(&[1, 2], &[1.0, 1.0]);
        let p = t(&[1, 2], &[1.0, 0.0]);
        assert!((eval(|v| dice_loss(v, &y, 1.0), p.clone()) - 0.25).abs() < 1e-12);
        assert!((eval(|v| squared_dice_loss(v, &y, 1.0), p) - 0.5).abs() < 1e-12);
        let z = Tensor::<f64>::zeros(&[1, 3]);
        assert!(eval(|v| dice_loss(v, &z, 1.0), z.clone()).abs() < 1e-12);
        let s = t(&[1, 3], &[1.0, 0.0, 1.0]);
        assert!(eval(|v| squared_dice_loss(v, &s, 1.0), s.clone()).abs() < 1e-12);
    }

    #[test]
    fn group_loss_weights_sum_to_one_and_a_half() {
        // Every prediction identical, so each stage loss equals the output loss.
        let y = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let logits = Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f64 * 0.7).sin());
        let tape = Tape::new();
        let out = tape.constant(logits.clone()).unwrap();
        let stages: Vec<_> = (0..5).map(|_| tape.constant(logits.clone()).unwrap()).collect();
        let cfg = LossConfig::default();
        let total = group_loss(out, &stages, &y, &cfg).unwrap().value().item();
        let single = group_loss(out, &[], &y, &cfg).unwrap().value().item();
        assert!((total - 2.5 * single).abs() < 1e-12);
        assert_eq!(
            group_loss(out, &stages[..3], &y, &cfg).unwrap_err(),
            LossError::StageCount(3)
        );
    }

    #[test]
    fn group_loss_vanishes_at_perfect_prediction() {
        let y = Tensor::from_fn(&[1, 1, 8, 8], |i| (i % 5 < 2) as u8 as f64);
        let logits = y.map(|v| if v > 0.5 { 40.0 } else { -40.0 });
        let small = Tensor::from_fn(&[1, 1, 4, 4], |_| 40.0);
        let tape = Tape::new();
        let out = tape.constant(logits).unwrap();
        let v = group_loss(out, &[], &y, &LossConfig::default()).unwrap().value().item();
        assert!(v.abs() < 1e-6, "{v}");
        // an all-foreground target with saturated stage logits at every scale
        let ones = Tensor::<f64>::ones(&[1, 1, 8, 8]);
        let out = tape.constant(Tensor::full(&[1, 1, 8, 8], 40.0)).unwrap();
        let stages: Vec<_> = (0..5).map(|_| tape.constant(small.clone()).unwrap()).collect();
        let v = group_loss(out, &stages, &ones, &LossConfig::default()).unwrap().value().item();
        assert!(v.abs() < 1e-6, "{v}");
    }

    #[test]
    fn group_loss_gradients_on_toy_problem() {
        let y = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i * 7) % 11 < 5) as u8 as f64);
        let out = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.61).sin() * 2.0);
        let mut inputs = vec![out];
        for (k, s) in [1usize, 2, 2, 4, 8].iter().enumerate() {
            inputs.push(Tensor::from_fn(&[1, 1, *s, *s], |i| ((i + k) as f64 * 1.3).cos()));
        }
        for base in [BaseLoss::BceDice, BaseLoss::BceSquaredDice] {
            let cfg = LossConfig { base_loss: base, ..Default::default() };
            let r = check_gradients(
                &inputs,
                |_, v| group_loss(v[0], &v[1..], &y, &cfg).map_err(|e| match e {
                    LossError::Autograd(a) => a,
                    other => panic!("{other}"),
                }),
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "{base}: {r:?}");
        }
    }

    #[test]
    fn config_checks() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { smooth: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!("bce_dice".parse::<BaseLoss>().unwrap(), BaseLoss::BceDice);
        assert!("focal".parse::<BaseLoss>().is_err());
    }
}
