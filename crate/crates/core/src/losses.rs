//! Training objectives.
//!
//! Every loss exists twice: as a plain `f64` function over slices, used for
//! reporting and as a reference in tests, and as a builder that appends the
//! same computation to a [`Graph`] over a batch of logits.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, Scalar, Tensor, Var, LOG_FLOOR};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("importance loss undefined: mean importance is zero")]
    ZeroImportance,
    #[error(transparent)]
    Graph(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Symmetric raw <-> branch KL.
    #[default]
    Mutual,
    /// Branch -> raw only.
    SingleDirection,
    /// Cross-entropy only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub mode: DistillMode,
    /// Supervise each wavelet branch's logits with the window label too.
    pub branch_ce: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { temperature: 6.0, lambda: 0.01, mode: DistillMode::Mutual, branch_ce: true }
    }
}

/// Per-step loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_distill: f64,
    pub l_norm: f64,
    pub l_imp: Option<f64>,
    pub total: f64,
}

/// Logits with their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        Self { logits, probs }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) }).0
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn tempered_softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>, LossError> {
    if !(temperature > 0.0) {
        return Err(LossError::Temperature(temperature));
    }
    let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    Ok(softmax(&scaled))
}

pub fn cross_entropy(z: &[f64], label: usize) -> Result<f64, LossError> {
    if label >= z.len() {
        return Err(LossError::LabelOutOfRange { label, classes: z.len() });
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - z[label])
}

fn check_distribution(p: &[f64]) -> Result<(), LossError> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(LossError::InvalidDistribution(format!("negative or non-finite entry in {p:?}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(LossError::InvalidDistribution(format!("sums to {s}")));
    }
    Ok(())
}

/// `KL(p_t || p_s)`, with `p_s` floored at [`LOG_FLOOR`] and `0 log 0 = 0`.
pub fn kl_div(p_t: &[f64], p_s: &[f64]) -> Result<f64, LossError> {
    if p_t.len() != p_s.len() {
        return Err(LossError::Shape(format!("{} vs {} classes", p_t.len(), p_s.len())));
    }
    check_distribution(p_t)?;
    check_distribution(p_s)?;
    Ok(p_t.iter().zip(p_s).filter(|(&t, _)| t > 0.0).map(|(&t, &s)| t * (t.ln() - s.max(LOG_FLOOR).ln())).sum::<f64>().max(0.0))
}

fn branch_pairs(z_data: &[f64], z_branch: &[Vec<f64>], temperature: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>), LossError> {
    if z_branch.is_empty() {
        return Err(LossError::Shape("at least one branch required".into()));
    }
    if let Some(bad) = z_branch.iter().find(|z| z.len() != z_data.len()) {
        return Err(LossError::Shape(format!("branch has {} logits, raw has {}", bad.len(), z_data.len())));
    }
    let pd = tempered_softmax(z_data, temperature)?;
    let pb = z_branch.iter().map(|z| tempered_softmax(z, temperature)).collect::<Result<_, _>>()?;
    Ok((pd, pb))
}

/// Half the sum over branches of the symmetric tempered KL between the raw
/// prediction and each branch prediction.
pub fn mutual_distill_loss(z_data: &[f64], z_branch: &[Vec<f64>], temperature: f64) -> Result<f64, LossError> {
    let (pd, pb) = branch_pairs(z_data, z_branch, temperature)?;
    let mut total = 0.0;
    for p in &pb {
        total += kl_div(&pd, p)? + kl_div(p, &pd)?;
    }
    Ok(0.5 * total)
}

/// Branch-to-raw transfer only: `sum_b KL(p_b || p_data)`.
pub fn single_direction_loss(z_data: &[f64], z_branch: &[Vec<f64>], temperature: f64) -> Result<f64, LossError> {
    let (pd, pb) = branch_pairs(z_data, z_branch, temperature)?;
    pb.iter().map(|p| kl_div(p, &pd)).sum()
}

pub fn l1_norm(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

/// Squared coefficient of variation of per-branch importance (column sums
/// of the gate matrix), using the population standard deviation.
pub fn importance_loss(gates: &[Vec<f64>]) -> Result<f64, LossError> {
    Ok(importance_loss_with_grad(gates)?.0)
}

/// Importance loss and its gradient with respect to every gate entry.
pub fn importance_loss_with_grad(gates: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    let b = gates.first().map(|r| r.len()).unwrap_or(0);
    if b == 0 || gates.iter().any(|r| r.len() != b) {
        return Err(LossError::Shape("gate rows must be non-empty and equal length".into()));
    }
    let mut imp = vec![0.0; b];
    for row in gates {
        for (i, &g) in imp.iter_mut().zip(row) {
            *i += g;
        }
    }
    let nb = b as f64;
    let mean = imp.iter().sum::<f64>() / nb;
    if mean.abs() < 1e-300 {
        return Err(LossError::ZeroImportance);
    }
    let var = imp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nb;
    let cv2 = var / (mean * mean);
    let d_imp: Vec<f64> = imp.iter().map(|&v| 2.0 * (v - mean) / (nb * mean * mean) - 2.0 * var / (nb * mean * mean * mean)).collect();
    Ok((cv2, vec![d_imp; gates.len()]))
}

/// Combines components into the overall objective. In [`DistillMode::None`]
/// the distillation term is dropped and reported as zero.
pub fn total_loss(l_ce: f64, l_distill: f64, l_norm: f64, l_imp: Option<(f64, f64)>, cfg: &DistillConfig) -> LossBreakdown {
    let l_distill = if cfg.mode == DistillMode::None { 0.0 } else { l_distill };
    let mut total = l_ce + l_distill + cfg.lambda * l_norm;
    if let Some((value, weight)) = l_imp {
        total += weight * value;
    }
    LossBreakdown { l_ce, l_distill, l_norm, l_imp: l_imp.map(|p| p.0), total }
}

// ---- graph builders over a batch of logits (`batch x K`) ----

/// Batch-mean cross-entropy.
pub fn cross_entropy_graph<F: Scalar>(g: &mut Graph<F>, logits: Var, labels: &[usize]) -> Result<Var, LossError> {
    let (n, k) = (g.value(logits).rows(), g.value(logits).cols());
    if labels.len() != n {
        return Err(LossError::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut onehot = vec![F::zero(); n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(LossError::LabelOutOfRange { label: y, classes: k });
        }
        onehot[i * k + y] = F::one();
    }
    let mask = g.input(Tensor::matrix(n, k, onehot)?)?;
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, mask)?;
    let s = g.sum(picked)?;
    Ok(g.scale(s, F::lit(-1.0 / n as f64))?)
}

pub fn tempered_log_softmax_graph<F: Scalar>(g: &mut Graph<F>, logits: Var, temperature: f64) -> Result<Var, LossError> {
    if !(temperature > 0.0) {
        return Err(LossError::Temperature(temperature));
    }
    let scaled = g.scale(logits, F::lit(1.0 / temperature))?;
    Ok(g.log_softmax(scaled)?)
}

/// Batch-mean `KL(p_t || p_s)` from log-probabilities.
pub fn kl_graph<F: Scalar>(g: &mut Graph<F>, logp_t: Var, logp_s: Var) -> Result<Var, LossError> {
    let n = g.value(logp_t).rows();
    let p_t = g.exp(logp_t)?;
    let diff = g.sub(logp_t, logp_s)?;
    let prod = g.mul(p_t, diff)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, F::lit(1.0 / n as f64))?)
}

/// Batch-mean distillation term for the given mode; `None` for
/// [`DistillMode::None`].
pub fn distill_graph<F: Scalar>(
    g: &mut Graph<F>,
    z_data: Var,
    z_branch: &[Var],
    temperature: f64,
    mode: DistillMode,
) -> Result<Option<Var>, LossError> {
    if mode == DistillMode::None || z_branch.is_empty() {
        return Ok(None);
    }
    let ld = tempered_log_softmax_graph(g, z_data, temperature)?;
    let mut terms = Vec::with_capacity(2 * z_branch.len());
    for &zb in z_branch {
        if g.value(zb).shape() != g.value(z_data).shape() {
            return Err(LossError::Shape(format!("branch logits {:?} vs raw {:?}", g.value(zb).shape(), g.value(z_data).shape())));
        }
        let lb = tempered_log_softmax_graph(g, zb, temperature)?;
        terms.push(kl_graph(g, lb, ld)?);
        if mode == DistillMode::Mutual {
            terms.push(kl_graph(g, ld, lb)?);
        }
    }
    let all = g.concat(&terms, 1)?;
    let s = g.sum(all)?;
    let factor = if mode == DistillMode::Mutual { 0.5 } else { 1.0 };
    Ok(Some(g.scale(s, F::lit(factor))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_examples() {
        assert_abs_diff_eq!(cross_entropy(&[0.0; 4], 2).unwrap(), 4f64.ln(), epsilon = 1e-12);
        assert!(cross_entropy(&[800.0, 0.0, 0.0], 0).unwrap() < 1e-12);
        // -ln(e^2 / (e^2 + 3))
        assert_abs_diff_eq!(cross_entropy(&[2.0, 0.0, 0.0, 0.0], 0).unwrap(), 0.340_752_953_913_131, epsilon = 1e-9);
        assert!(matches!(cross_entropy(&[0.0; 2], 2), Err(LossError::LabelOutOfRange { .. })));
    }

    #[test]
    fn tempered_softmax_examples() {
        let z = [0.3, -1.2, 2.0];
        let a = tempered_softmax(&z, 1.0).unwrap();
        let b = softmax(&z);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        for p in tempered_softmax(&[1.5; 5], 3.7).unwrap() {
            assert_abs_diff_eq!(p, 0.2, epsilon = 1e-15);
        }
        // exp(1/3) / (exp(1/3) + 1)
        let p = tempered_softmax(&[2.0, 0.0], 6.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.582_570_3, epsilon = 1e-6);
        assert_abs_diff_eq!(p[1], 0.417_429_7, epsilon = 1e-6);
        assert!(tempered_softmax(&z, 0.0).is_err());
        assert!(tempered_softmax(&z, -1.0).is_err());
    }

    #[test]
    fn tempered_softmax_limits() {
        let z = [1.0, 4.0, -2.0, 0.5];
        let hot = tempered_softmax(&z, 1e6).unwrap();
        assert!(hot.iter().all(|p| (p - 0.25).abs() < 1e-4));
        let cold = tempered_softmax(&z, 1e-3).unwrap();
        assert!((cold[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert!(kl_div(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_div(&[0.5, 0.5], &[0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn mutual_distill_examples() {
        let zd = vec![1.0, -0.5, 0.2];
        assert_eq!(mutual_distill_loss(&zd, &[zd.clone(), zd.clone()], 6.0).unwrap(), 0.0);
        let zb = vec![0.1, 0.9, -0.3];
        let a = mutual_distill_loss(&zd, std::slice::from_ref(&zb), 6.0).unwrap();
        let b = mutual_distill_loss(&zb, std::slice::from_ref(&zd), 6.0).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
    }

    #[test]
    fn mutual_distill_two_branch_straight_line() {
        // z_data = [1, 0], branches [[0, 1], [1, 0]], T = 6
        let t = 6.0f64;
        let e = (1.0 / t).exp();
        let pd = [e / (e + 1.0), 1.0 / (e + 1.0)];
        let p0 = [pd[1], pd[0]];
        let kl = |a: &[f64; 2], b: &[f64; 2]| a[0] * (a[0] / b[0]).ln() + a[1] * (a[1] / b[1]).ln();
        let expected = 0.5 * (kl(&pd, &p0) + kl(&p0, &pd));
        let got = mutual_distill_loss(&[1.0, 0.0], &[vec![0.0, 1.0], vec![1.0, 0.0]], t).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        assert!(expected > 0.0);
    }

    #[test]
    fn single_direction_examples() {
        let zd = vec![0.4, -0.1, 1.3];
        assert_eq!(single_direction_loss(&zd, std::slice::from_ref(&zd), 6.0).unwrap(), 0.0);
        let zb = vec![vec![1.0, 0.5, -2.0], vec![0.0, 2.0, 0.3]];
        let t = 4.0;
        let single = single_direction_loss(&zd, &zb, t).unwrap();
        let mutual = mutual_distill_loss(&zd, &zb, t).unwrap();
        let pd = tempered_softmax(&zd, t).unwrap();
        let reverse: f64 = zb.iter().map(|z| kl_div(&pd, &tempered_softmax(z, t).unwrap()).unwrap()).sum();
        assert_abs_diff_eq!(single, 2.0 * mutual - reverse, epsilon = 1e-9);
        // B = 1 against kl_div directly
        let one = single_direction_loss(&zd, &zb[..1], t).unwrap();
        let direct = kl_div(&tempered_softmax(&zb[0], t).unwrap(), &pd).unwrap();
        assert_abs_diff_eq!(one, direct, epsilon = 1e-15);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_norm(&[0.0; 6]), 0.0);
        assert_eq!(l1_norm(&[1.0, -1.0, 2.0]), 4.0);
    }

    #[test]
    fn importance_examples() {
        let uniform = vec![vec![0.25; 4]; 3];
        assert!(importance_loss(&uniform).unwrap().abs() < 1e-15);
        assert_abs_diff_eq!(importance_loss(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(importance_loss(&[vec![0.0, 0.0]]), Err(LossError::ZeroImportance)));
    }

    #[test]
    fn importance_gradient_matches_finite_differences() {
        let gates = vec![vec![0.7, 0.2, 0.1], vec![0.3, 0.3, 0.4], vec![0.5, 0.1, 0.4]];
        let (_, grad) = importance_loss_with_grad(&gates).unwrap();
        let eps = 1e-6;
        for i in 0..gates.len() {
            for j in 0..3 {
                let mut plus = gates.clone();
                plus[i][j] += eps;
                let mut minus = gates.clone();
                minus[i][j] -= eps;
                let fd = (importance_loss(&plus).unwrap() - importance_loss(&minus).unwrap()) / (2.0 * eps);
                assert_abs_diff_eq!(grad[i][j], fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        let cfg = DistillConfig::default();
        let b = total_loss(1.0, 0.5, 2.0, None, &cfg);
        assert_abs_diff_eq!(b.total, 1.52, epsilon = 1e-15);
        let none = DistillConfig { mode: DistillMode::None, ..cfg.clone() };
        let b = total_loss(1.0, 0.5, 2.0, None, &none);
        assert_eq!(b.total, 1.0 + 0.01 * 2.0);
        assert_eq!(b.l_distill, 0.0);
        let no_norm = DistillConfig { lambda: 0.0, ..cfg };
        assert_eq!(total_loss(1.0, 0.5, 2.0, None, &no_norm).total, 1.5);
    }

    fn graph_value(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).data()[0]
    }

    #[test]
    fn graph_losses_match_value_losses() {
        let zd = [0.3, -1.0, 2.2, 0.1];
        let zb = [vec![1.0, 0.0, -1.0, 0.5], vec![-0.2, 0.4, 0.9, 0.0]];
        let t = 6.0;
        let row = |v: &[f64]| Tensor::from_f64(&[1, v.len()], v).unwrap();
        let ce = graph_value(|g| {
            let z = g.input(row(&zd)).unwrap();
            cross_entropy_graph(g, z, &[2]).unwrap()
        });
        assert_abs_diff_eq!(ce, cross_entropy(&zd, 2).unwrap(), epsilon = 1e-12);
        for mode in [DistillMode::Mutual, DistillMode::SingleDirection] {
            let got = graph_value(|g| {
                let z = g.input(row(&zd)).unwrap();
                let bs: Vec<Var> = zb.iter().map(|b| g.input(row(b)).unwrap()).collect();
                distill_graph(g, z, &bs, t, mode).unwrap().unwrap()
            });
            let expected = match mode {
                DistillMode::Mutual => mutual_distill_loss(&zd, &zb, t).unwrap(),
                _ => single_direction_loss(&zd, &zb, t).unwrap(),
            };
            assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let zd = [0.5, -0.3, 1.1];
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::from_f64(&[1, 3], &zd).unwrap()).unwrap();
        let l = cross_entropy_graph(&mut g, z, &[1]).unwrap();
        let grads = g.backward(l).unwrap();
        let p = softmax(&zd);
        let expected = [p[0], p[1] - 1.0, p[2]];
        for (a, b) in grads.get(z).unwrap().data().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let check = crate::diffcore::check_fn(&[Tensor::from_f64(&[1, 3], &zd).unwrap()], 1e-5, None, |g, v| {
            cross_entropy_graph(g, v[0], &[1]).map_err(|e| match e {
                LossError::Graph(d) => d,
                other => DiffError::Contract(other.to_string()),
            })
        })
        .unwrap();
        assert!(check.max_rel_err < 1e-6);
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative((p, q) in (2usize..8).prop_flat_map(|n| (dist(n), dist(n)))) {
            prop_assert!(kl_div(&p, &q).unwrap() >= 0.0);
        }

        #[test]
        fn importance_is_scale_invariant(rows in prop::collection::vec(dist(3), 1..6), s in 0.1f64..10.0) {
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
            let a = importance_loss(&rows).unwrap();
            let b = importance_loss(&scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn mutual_distill_is_symmetric(zd in prop::collection::vec(-5.0f64..5.0, 4), zb in prop::collection::vec(-5.0f64..5.0, 4)) {
            let a = mutual_distill_loss(&zd, std::slice::from_ref(&zb), 6.0).unwrap();
            let b = mutual_distill_loss(&zb, std::slice::from_ref(&zd), 6.0).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
