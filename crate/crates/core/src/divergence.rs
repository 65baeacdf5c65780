//! Distributional objectives between a teacher distribution `p` and a
//! student distribution `q`: forward/reverse KL, Jensen-Shannon, Jeffreys,
//! their per-class landscape functions of the confidence ratio `c = q / p`,
//! and the projected-feature MSE baseline.
//!
//! Every function here uses natural logarithms and floors probabilities at
//! [`PROB_FLOOR`] before taking a log.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivergenceError {
    #[error("distribution length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("confidence ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("unknown divergence kind `{0}` (expected fkl, rkl, jsd or jeffreys)")]
    UnknownKind(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DivergenceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    /// `KL(p ‖ q)`
    Fkl,
    /// `KL(q ‖ p)`
    Rkl,
    Jsd,
    Jeffreys,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 4] = [Self::Fkl, Self::Rkl, Self::Jsd, Self::Jeffreys];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fkl => "fkl",
            Self::Rkl => "rkl",
            Self::Jsd => "jsd",
            Self::Jeffreys => "jeffreys",
        }
    }

    /// Divergence of one teacher/student pair of probability vectors.
    pub fn eval(self, p: &[f64], q: &[f64]) -> Result<f64> {
        match self {
            Self::Fkl => forward_kl(p, q),
            Self::Rkl => reverse_kl(p, q),
            Self::Jsd => jsd(p, q),
            Self::Jeffreys => jeffreys(p, q),
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DivergenceKind {
    type Err = DivergenceError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fkl" | "kl" => Ok(Self::Fkl),
            "rkl" => Ok(Self::Rkl),
            "jsd" => Ok(Self::Jsd),
            "jeffreys" | "jd" => Ok(Self::Jeffreys),
            _ => Err(DivergenceError::UnknownKind(s.to_string())),
        }
    }
}

fn check_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(DivergenceError::LengthMismatch(p.len(), q.len()));
    }
    Ok(())
}

fn ln_floor(x: f64) -> f64 {
    x.max(PROB_FLOOR).ln()
}

/// `Σ pᵢ ln(pᵢ / qᵢ)`; zero-mass teacher entries contribute nothing.
pub fn forward_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (ln_floor(pi) - ln_floor(qi)))
        .sum())
}

/// `Σ qᵢ ln(qᵢ / pᵢ)`.
pub fn reverse_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    forward_kl(q, p)
}

pub fn mixture(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    check_len(p, q)?;
    Ok(p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// Jensen-Shannon divergence, bounded by `ln 2`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    let m = mixture(p, q)?;
    Ok(0.5 * (forward_kl(p, &m)? + forward_kl(q, &m)?))
}

/// `KL(p ‖ q) + KL(q ‖ p)`.
pub fn jeffreys(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(forward_kl(p, q)? + forward_kl(q, p)?)
}

/// Per-class JSD landscape `g(c) = c ln c − (1 + c) ln((1 + c) / 2)`.
///
/// Ranges from `ln 2` at `c → 0` through `0` at `c = 1`, growing like
/// `c ln 2` as `c → ∞`.
pub fn jsd_perclass_g(c: f64) -> Result<f64> {
    if c < 0.0 || c.is_nan() {
        return Err(DivergenceError::NonPositiveRatio(c));
    }
    if c == 0.0 {
        return Ok(std::f64::consts::LN_2);
    }
    if c == 1.0 {
        return Ok(0.0);
    }
    Ok(c * c.ln() - (1.0 + c) * ((1.0 + c) / 2.0).ln())
}

/// Per-class Jeffreys landscape `g(c) = (c − 1) ln c`, unbounded at both ends.
pub fn jd_perclass_g(c: f64) -> Result<f64> {
    if c <= 0.0 || c.is_nan() {
        return Err(DivergenceError::NonPositiveRatio(c));
    }
    Ok((c - 1.0) * c.ln())
}

/// Confidence ratios `cᵢ = qᵢ / max(pᵢ, floor)`.
pub fn confidence(p: &[f64], q: &[f64], floor: f64) -> Result<Vec<f64>> {
    check_len(p, q)?;
    Ok(p.iter().zip(q).map(|(&pi, &qi)| qi / pi.max(floor)).collect())
}

/// Row-wise divergences of two `[.., V]` distribution tensors.
pub fn rowwise(kind: DivergenceKind, p: &Tensor, q: &Tensor) -> Result<Vec<f64>> {
    if p.shape() != q.shape() {
        return Err(DivergenceError::LengthMismatch(p.numel(), q.numel()));
    }
    (0..p.rows()).map(|r| kind.eval(p.row(r), q.row(r))).collect()
}

/// Per-row divergence of graph distributions `p` and `q` (both `[.., V]`),
/// built from primitive ops so gradients flow to whichever side tracks them.
pub fn divergence_rows(g: &mut Graph, kind: DivergenceKind, p: Var, q: Var) -> Result<Var> {
    let log_floored = |g: &mut Graph, x: Var| -> Result<Var> {
        let c = g.clamp_min(x, PROB_FLOOR)?;
        Ok(g.log(c)?)
    };
    let kl_rows = |g: &mut Graph, a: Var, log_a: Var, log_b: Var| -> Result<Var> {
        let diff = g.sub(log_a, log_b)?;
        let prod = g.mul(a, diff)?;
        Ok(g.sum_last(prod)?)
    };
    let log_p = log_floored(g, p)?;
    let log_q = log_floored(g, q)?;
    let out = match kind {
        DivergenceKind::Fkl => kl_rows(g, p, log_p, log_q)?,
        DivergenceKind::Rkl => kl_rows(g, q, log_q, log_p)?,
        DivergenceKind::Jsd => {
            let sum = g.add(p, q)?;
            let m = g.scale(sum, 0.5)?;
            let log_m = log_floored(g, m)?;
            let a = kl_rows(g, p, log_p, log_m)?;
            let b = kl_rows(g, q, log_q, log_m)?;
            let s = g.add(a, b)?;
            g.scale(s, 0.5)?
        }
        DivergenceKind::Jeffreys => {
            let dp = g.sub(p, q)?;
            let dl = g.sub(log_p, log_q)?;
            let prod = g.mul(dp, dl)?;
            g.sum_last(prod)?
        }
    };
    Ok(out)
}

/// Weighted mean over rows of [`divergence_rows`]; `weights` is the token mask.
pub fn divergence_loss(g: &mut Graph, kind: DivergenceKind, p: Var, q: Var, weights: &[f64]) -> Result<Var> {
    let rows = divergence_rows(g, kind, p, q)?;
    Ok(g.weighted_mean(rows, weights)?)
}

/// `‖h_p W_sᵀ − h_q‖²` summed over features and averaged over rows, where
/// `w_s` is `[d_student, d_teacher]`.
pub fn mse_feature_loss_graph(g: &mut Graph, h_p: Var, h_q: Var, w_s: Var) -> Result<Var> {
    let proj = g.matmul_bt(h_p, w_s)?;
    let diff = g.sub(proj, h_q)?;
    let sq = g.mul(diff, diff)?;
    let rows = g.sum_last(sq)?;
    Ok(g.mean_all(rows)?)
}

pub fn mse_feature_loss(h_p: &Tensor, h_q: &Tensor, w_s: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b, w) = (
        g.constant(h_p.clone()),
        g.constant(h_q.clone()),
        g.constant(w_s.clone()),
    );
    let loss = mse_feature_loss_graph(&mut g, a, b, w)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn kl_hand_values() {
        let expect = 0.5 * LN_2 + 0.5 * (2.0f64 / 3.0).ln();
        let fkl = forward_kl(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((fkl - expect).abs() < 1e-15);
        assert!((fkl - 0.143841).abs() < 1e-6);
        let rkl = reverse_kl(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
        assert_eq!(rkl, fkl);
    }

    #[test]
    fn jeffreys_is_sum_of_both_kls() {
        let (p, q) = ([0.5, 0.5], [0.25, 0.75]);
        let fkl = 0.5 * LN_2 + 0.5 * (2.0f64 / 3.0).ln();
        let rkl = 0.25 * (0.5f64).ln() + 0.75 * 1.5f64.ln();
        let jd = jeffreys(&p, &q).unwrap();
        assert!((jd - (fkl + rkl)).abs() < 1e-15);
        assert_eq!(jeffreys(&p, &q).unwrap(), jeffreys(&q, &p).unwrap());
    }

    #[test]
    fn jsd_disjoint_supports_hit_ln2() {
        let v = jsd(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!((v - LN_2).abs() < 1e-12);
    }

    #[test]
    fn jsd_matches_direct_definition() {
        // Direct evaluation of ½[KL(p‖m) + KL(q‖m)] with m = [0.5, 0.5].
        let (p, q) = ([0.7, 0.3], [0.3, 0.7]);
        let expect = 0.5 * ((0.7 * (0.7f64 / 0.5).ln() + 0.3 * (0.3f64 / 0.5).ln()) * 2.0);
        assert!((jsd(&p, &q).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.082_282_878_505_051_6).abs() < 1e-12);
    }

    #[test]
    fn mixture_contracts() {
        assert_eq!(mixture(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), vec![0.2, 0.8]);
        assert_eq!(
            mixture(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(),
            vec![0.5, 0.5, 0.0]
        );
        assert!(mixture(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn landscape_values() {
        assert_eq!(jsd_perclass_g(1.0).unwrap(), 0.0);
        assert_eq!(jd_perclass_g(1.0).unwrap(), 0.0);
        assert!((jsd_perclass_g(1e-8).unwrap() - LN_2).abs() < 1e-6);
        assert!(((jsd_perclass_g(1e6).unwrap() / 1e6) - LN_2).abs() / LN_2 < 1e-3);
        assert!((jd_perclass_g(std::f64::consts::E).unwrap() - 1.718_281_828).abs() < 1e-9);
        let tail = jd_perclass_g(1e-8).unwrap();
        assert!((tail - 18.420_680_6).abs() < 1e-6, "{tail}");
        assert!(tail > jd_perclass_g(1e-4).unwrap());
        assert!(jd_perclass_g(0.0).is_err());
        assert!(jsd_perclass_g(-1.0).is_err());
        assert_eq!(jsd_perclass_g(0.0).unwrap(), LN_2);
    }

    #[test]
    fn landscapes_have_unique_minimum_at_one() {
        for c in [0.01, 0.1, 0.5, 2.0, 10.0, 100.0] {
            assert!(jsd_perclass_g(c).unwrap() > 0.0);
            assert!(jd_perclass_g(c).unwrap() > 0.0);
        }
    }

    #[test]
    fn jsd_landscape_is_midpoint_convex() {
        let grid: Vec<f64> = (0..200).map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 199.0)).collect();
        for w in grid.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let lhs = jsd_perclass_g(mid).unwrap();
            let rhs = 0.5 * (jsd_perclass_g(w[0]).unwrap() + jsd_perclass_g(w[1]).unwrap());
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn confidence_contracts() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(confidence(&p, &p, PROB_FLOOR).unwrap(), vec![1.0; 3]);
        let q = [0.4, 0.3 * 0.6 / 0.8, 0.5 * 0.6 / 0.8];
        assert!((confidence(&p, &q, PROB_FLOOR).unwrap()[0] - 2.0).abs() < 1e-15);
        let c = confidence(&[0.0, 1.0], &[0.5, 0.5], PROB_FLOOR).unwrap();
        assert!(c.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn mse_feature_loss_examples() {
        let eye = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let hp = Tensor::new(vec![1, 2], vec![1., 2.]).unwrap();
        let hq = Tensor::new(vec![1, 2], vec![0., 0.]).unwrap();
        assert_eq!(mse_feature_loss(&hp, &hq, &eye).unwrap(), 5.0);
        assert_eq!(mse_feature_loss(&hp, &hp, &eye).unwrap(), 0.0);
        assert!(mse_feature_loss(&hp, &hq, &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn graph_rows_agree_with_slice_functions() {
        let p = Tensor::from_rows(&[vec![0.1, 0.6, 0.3], vec![0.5, 0.25, 0.25]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.3, 0.3, 0.4], vec![0.2, 0.2, 0.6]]).unwrap();
        for kind in DivergenceKind::ALL {
            let mut g = Graph::new();
            let (pv, qv) = (g.constant(p.clone()), g.constant(q.clone()));
            let rows = divergence_rows(&mut g, kind, pv, qv).unwrap();
            let expect = rowwise(kind, &p, &q).unwrap();
            for (a, b) in g.value(rows).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-15, "{kind}");
            }
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("JSD".parse::<DivergenceKind>().unwrap(), DivergenceKind::Jsd);
        assert_eq!("jd".parse::<DivergenceKind>().unwrap(), DivergenceKind::Jeffreys);
        assert!("akl".parse::<DivergenceKind>().is_err());
    }
}
