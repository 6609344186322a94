//! Binary cross-entropy plus the λ-weighted single-center loss.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Added under the square root of every distance so the gradient at the
/// center is defined.
pub const DIST_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub margin: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0 && self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss lambda and margin must be finite and non-negative, got {} and {}",
                self.lambda, self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SclDiagnostics {
    pub center: Vec<f64>,
    pub dist_r: f64,
    pub dist_f: f64,
    pub loss: f64,
}

/// Mean binary cross-entropy on logits, labels in `{0, 1}`.
pub fn bce(g: &mut Graph, logits: Var, labels: &[f64]) -> Result<Var> {
    g.bce_with_logits(logits, labels)
}

fn mean_distance(g: &mut Graph, rows: Var, center: Var) -> Result<Var> {
    let diff = g.sub(rows, center)?;
    let sq = g.square(diff)?;
    let norm2 = g.sum_axis(sq, 1, false)?;
    let guarded = g.add_scalar(norm2, DIST_GUARD)?;
    let dist = g.sqrt(guarded)?;
    g.mean(dist)
}

/// Single-center loss on `features: [B, d_feat]`:
/// `Dist_R + max(Dist_R − Dist_F + margin, 0)` around the mean real feature.
pub fn scl(g: &mut Graph, features: Var, labels: &[f64], margin: f64) -> Result<(Var, SclDiagnostics)> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("scl", format!("features {shape:?} with {} labels", labels.len())));
    }
    let real: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] < 0.5).collect();
    let fake: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0.5).collect();
    if real.is_empty() {
        return Err(Error::MissingClass("real"));
    }
    if fake.is_empty() {
        return Err(Error::MissingClass("fake"));
    }
    let fr = g.index_select(features, 0, &real)?;
    let ff = g.index_select(features, 0, &fake)?;
    let center = g.mean_axis(fr, 0, true)?;
    let dist_r = mean_distance(g, fr, center)?;
    let dist_f = mean_distance(g, ff, center)?;
    let gap = g.sub(dist_r, dist_f)?;
    let gap = g.add_scalar(gap, margin)?;
    let hinge = g.relu(gap)?;
    let loss = g.add(dist_r, hinge)?;
    let diag = SclDiagnostics {
        center: g.value(center).data().to_vec(),
        dist_r: g.value(dist_r).item()?,
        dist_f: g.value(dist_f).item()?,
        loss: g.value(loss).item()?,
    };
    Ok((loss, diag))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub scl: f64,
    pub diagnostics: SclDiagnostics,
}

/// `bce + λ · scl`.
pub fn total_loss(g: &mut Graph, logits: Var, features: Var, labels: &[f64], config: &LossConfig) -> Result<(Var, LossParts)> {
    let b = bce(g, logits, labels)?;
    let (s, diagnostics) = scl(g, features, labels, config.margin)?;
    let weighted = g.scale(s, config.lambda)?;
    let total = g.add(b, weighted)?;
    let parts = LossParts {
        total: g.value(total).item()?,
        bce: g.value(b).item()?,
        scl: diagnostics.loss,
        diagnostics,
    };
    Ok((total, parts))
}

/// Evaluates [`scl`] on plain tensors.
pub fn scl_value(features: &Tensor, labels: &[f64], margin: f64) -> Result<SclDiagnostics> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    scl(&mut g, f, labels, margin).map(|(_, d)| d)
}

/// Evaluates [`bce`] on plain values.
pub fn bce_value(logits: &[f64], labels: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(Tensor::new(vec![logits.len()], logits.to_vec())?);
    let l = bce(&mut g, z, labels)?;
    g.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn zero_logit_is_ln2() {
        let v = bce_value(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logit_vanishes() {
        assert!(bce_value(&[50.0], &[1.0]).unwrap() <= 1e-20);
    }

    #[test]
    fn one_dimensional_hand_example() {
        let d = scl_value(&feats(&[&[0.0], &[2.0], &[1.0]]), &[0.0, 0.0, 1.0], 1.0).unwrap();
        assert!((d.center[0] - 1.0).abs() < 1e-12);
        assert!((d.dist_r - 1.0).abs() < 1e-10);
        assert!(d.dist_f.abs() < 1e-5);
        assert!((d.loss - 3.0).abs() < 1e-5);
    }

    #[test]
    fn coincident_reals_with_far_fake_give_zero() {
        let d = scl_value(&feats(&[&[1.0, 1.0], &[1.0, 1.0], &[4.0, 5.0]]), &[0.0, 0.0, 1.0], 2.0).unwrap();
        assert!(d.loss < 1e-5, "{}", d.loss);
    }

    #[test]
    fn mirrored_classes_give_radius() {
        let d = scl_value(&feats(&[&[2.0, 0.0], &[-2.0, 0.0], &[0.0, 2.0], &[0.0, -2.0]]), &[0.0, 0.0, 1.0, 1.0], 0.0).unwrap();
        assert!((d.loss - 2.0).abs() < 1e-10);
    }

    #[test]
    fn missing_class_is_reported() {
        let f = feats(&[&[1.0], &[2.0]]);
        assert!(matches!(scl_value(&f, &[0.0, 0.0], 0.1), Err(Error::MissingClass("fake"))));
        assert!(matches!(scl_value(&f, &[1.0, 1.0], 0.1), Err(Error::MissingClass("real"))));
    }
}
