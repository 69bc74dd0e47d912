//! Reference rotation-alignment objective with optional anchoring, its
//! analytic gradient, and the L1 translation variants.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3::{acos_clamped, vee_skew, RotationSO3, So3Error, Translation3, UnitQuaternion, MIN_TRANSLATION_NORM};

/// Angles within this distance of 0 or π are treated as non-smooth.
pub const SMOOTH_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("translation fields missing")]
    MissingTranslation,
    #[error("degenerate predicted relative translation (norm {0})")]
    DegeneratePrediction(f64),
    #[error("degenerate ground-truth baseline (norm {0})")]
    DegenerateGroundTruth(f64),
    #[error("lambda_t must be non-negative, got {0}")]
    BadWeight(f64),
    #[error(transparent)]
    So3(#[from] So3Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationMode {
    #[default]
    AnchoredAbsolute,
    RelativeScaled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossInput {
    pub r1p: RotationSO3,
    pub r2p: RotationSO3,
    pub r1g: RotationSO3,
    pub r2g: RotationSO3,
    pub anchor: bool,
    pub translations: Option<Translations>,
    pub lambda_t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translations {
    pub t1p: Translation3,
    pub t2p: Translation3,
    pub t1g: Translation3,
    pub t2g: Translation3,
}

impl LossInput {
    pub fn rotations(r1p: RotationSO3, r2p: RotationSO3, r1g: RotationSO3, r2g: RotationSO3, anchor: bool) -> Self {
        Self {
            r1p,
            r2p,
            r1g,
            r2g,
            anchor,
            translations: None,
            lambda_t: 1.0,
        }
    }
}

fn geodesic_rad(a: &RotationSO3, b: &RotationSO3) -> f64 {
    acos_clamped(0.5 * ((a.matrix().transpose() * b.matrix()).trace() - 1.0))
}

/// `geo(R2p R1pᵀ, R2g R1gᵀ) + [anchor]·geo(R1p, I)` in radians.
pub fn rotation_loss(inp: &LossInput) -> f64 {
    let rel_p = RotationSO3::from_matrix_unchecked(inp.r2p.matrix() * inp.r1p.matrix().transpose());
    let rel_g = RotationSO3::from_matrix_unchecked(inp.r2g.matrix() * inp.r1g.matrix().transpose());
    let mut l = geodesic_rad(&rel_p, &rel_g);
    if inp.anchor {
        l += inp.r1p.angle();
    }
    l
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationGrad {
    /// ∂L/∂ω₁ for the perturbation `R1p ← R1p·exp(ω̂₁)`.
    pub d_r1p: [f64; 3],
    /// ∂L/∂ω₂ for `R2p ← R2p·exp(ω̂₂)`.
    pub d_r2p: [f64; 3],
    /// A term sat within [`SMOOTH_EPS`] of 0 or π and contributed a zero
    /// subgradient.
    pub non_smooth: bool,
}

fn smooth(theta: f64) -> bool {
    theta > SMOOTH_EPS && theta < std::f64::consts::PI - SMOOTH_EPS
}

/// Gradient in the right tangent space of each predicted rotation. With
/// `N = R2pᵀ R_rel_gt R1p` and `θ` the relative term, `∂θ/∂ω₁ =
/// vee(skew N)/sin θ = −∂θ/∂ω₂`; the anchor term adds `vee(skew R1p)/sin θₐ`
/// to `ω₁`.
pub fn rotation_loss_grad(inp: &LossInput) -> RotationGrad {
    let rel_g = inp.r2g.matrix() * inp.r1g.matrix().transpose();
    let n = inp.r2p.matrix().transpose() * rel_g * inp.r1p.matrix();
    let theta = acos_clamped(0.5 * (n.trace() - 1.0));
    let mut g1 = Vector3::zeros();
    let mut g2 = Vector3::zeros();
    let mut non_smooth = false;
    if smooth(theta) {
        let v = vee_skew(&n) / theta.sin();
        g1 += v;
        g2 -= v;
    } else {
        non_smooth = true;
    }
    if inp.anchor {
        let ta = inp.r1p.angle();
        if smooth(ta) {
            g1 += vee_skew(inp.r1p.matrix()) / ta.sin();
        } else {
            non_smooth = true;
        }
    }
    RotationGrad {
        d_r1p: g1.into(),
        d_r2p: g2.into(),
        non_smooth,
    }
}

fn l1(v: &Vector3<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Anchored: `‖t1p‖₁ + ‖t2p − t̂_rel_gt‖₁`, with the GT relative baseline
/// scaled to unit length. Relative: `‖s·t_rel_pred − t_rel_gt‖₁` with
/// `s = ‖t_rel_gt‖/‖t_rel_pred‖`.
pub fn translation_l1(inp: &LossInput, mode: TranslationMode) -> Result<f64, LossError> {
    let t = inp.translations.as_ref().ok_or(LossError::MissingTranslation)?;
    let rel_g = inp.r2g.matrix() * inp.r1g.matrix().transpose();
    let t_rel_g = t.t2g.0 - rel_g * t.t1g.0;
    match mode {
        TranslationMode::AnchoredAbsolute => {
            let ng = t_rel_g.norm();
            if !(ng >= MIN_TRANSLATION_NORM) {
                return Err(LossError::DegenerateGroundTruth(ng));
            }
            Ok(l1(&t.t1p.0) + l1(&(t.t2p.0 - t_rel_g / ng)))
        }
        TranslationMode::RelativeScaled => {
            let rel_p = inp.r2p.matrix() * inp.r1p.matrix().transpose();
            let t_rel_p = t.t2p.0 - rel_p * t.t1p.0;
            let np = t_rel_p.norm();
            if !(np >= MIN_TRANSLATION_NORM) {
                return Err(LossError::DegeneratePrediction(np));
            }
            let s = t_rel_g.norm() / np;
            Ok(l1(&(s * t_rel_p - t_rel_g)))
        }
    }
}

/// One JSON Lines row for batch evaluation; quaternions are `[w, x, y, z]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossRow {
    pub q1p: [f64; 4],
    pub q2p: [f64; 4],
    pub q1g: [f64; 4],
    pub q2g: [f64; 4],
    #[serde(default)]
    pub anchor: bool,
    #[serde(default)]
    pub t1p: Option<[f64; 3]>,
    #[serde(default)]
    pub t2p: Option<[f64; 3]>,
    #[serde(default)]
    pub t1g: Option<[f64; 3]>,
    #[serde(default)]
    pub t2g: Option<[f64; 3]>,
    #[serde(default)]
    pub lambda_t: Option<f64>,
    #[serde(default)]
    pub translation_mode: Option<TranslationMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossResult {
    pub rotation: f64,
    pub translation: Option<f64>,
    pub total: f64,
    pub grad: RotationGrad,
}

impl LossRow {
    pub fn to_input(&self, default_lambda: f64) -> Result<LossInput, LossError> {
        let rot = |q: [f64; 4]| UnitQuaternion::from_array(q).to_rotation();
        let translations = match (self.t1p, self.t2p, self.t1g, self.t2g) {
            (Some(a), Some(b), Some(c), Some(d)) => Some(Translations {
                t1p: a.into(),
                t2p: b.into(),
                t1g: c.into(),
                t2g: d.into(),
            }),
            (None, None, None, None) => None,
            _ => return Err(LossError::MissingTranslation),
        };
        let lambda_t = self.lambda_t.unwrap_or(default_lambda);
        if !(lambda_t >= 0.0 && lambda_t.is_finite()) {
            return Err(LossError::BadWeight(lambda_t));
        }
        Ok(LossInput {
            r1p: rot(self.q1p)?,
            r2p: rot(self.q2p)?,
            r1g: rot(self.q1g)?,
            r2g: rot(self.q2g)?,
            anchor: self.anchor,
            translations,
            lambda_t,
        })
    }

    pub fn evaluate(&self, default_lambda: f64, default_mode: TranslationMode) -> Result<LossResult, LossError> {
        let inp = self.to_input(default_lambda)?;
        let rotation = rotation_loss(&inp);
        let translation = match inp.translations {
            Some(_) => Some(translation_l1(&inp, self.translation_mode.unwrap_or(default_mode))?),
            None => None,
        };
        Ok(LossResult {
            rotation,
            translation,
            total: rotation + translation.map_or(0.0, |t| inp.lambda_t * t),
            grad: rotation_loss_grad(&inp),
        })
    }
}
