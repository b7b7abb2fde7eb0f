use serde::{Deserialize, Serialize};

use super::SslError;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Guard added to the per-dimension variance before standardization.
pub const STD_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarlowTwinsConfig {
    /// Off-diagonal weight λ.
    pub lambda_bt: f64,
}

impl Default for BarlowTwinsConfig {
    fn default() -> Self {
        Self { lambda_bt: 0.005 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VicRegConfig {
    pub lambda_inv: f64,
    pub mu_var: f64,
    pub nu_cov: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for VicRegConfig {
    fn default() -> Self {
        Self {
            lambda_inv: 25.0,
            mu_var: 25.0,
            nu_cov: 1.0,
            gamma: 1.0,
            epsilon: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SslLoss {
    BarlowTwins(BarlowTwinsConfig),
    Vicreg(VicRegConfig),
}

impl SslLoss {
    pub fn validate(&self) -> Result<(), SslError> {
        let ok = match self {
            SslLoss::BarlowTwins(c) => c.lambda_bt > 0.0,
            SslLoss::Vicreg(c) => [c.lambda_inv, c.mu_var, c.nu_cov, c.gamma, c.epsilon].iter().all(|&v| v >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(SslError::Config(format!("invalid loss weights {self:?}")))
        }
    }

    /// Column names of the individual terms, in [`LossTerms::values`] order.
    pub fn term_names(&self) -> &'static [&'static str] {
        match self {
            SslLoss::BarlowTwins(_) => &["term_invariance", "term_redundancy"],
            SslLoss::Vicreg(_) => &["term_invariance", "term_variance", "term_covariance"],
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, za: Var, zb: Var) -> Result<(Var, LossTerms), SslError> {
        match self {
            SslLoss::BarlowTwins(c) => barlow_twins_loss(g, za, zb, c),
            SslLoss::Vicreg(c) => vicreg_loss(g, za, zb, c),
        }
    }
}

/// Unweighted loss terms (the weights are applied in the total only).
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub values: Vec<f64>,
}

fn check_batch<T: Real>(g: &Graph<T>, za: Var, zb: Var) -> Result<(usize, usize), SslError> {
    let (sa, sb) = (g.shape(za).to_vec(), g.shape(zb).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(SslError::Shape(sa, sb));
    }
    if sa[0] < 2 {
        return Err(SslError::BatchTooSmall(sa[0]));
    }
    Ok((sa[0], sa[1]))
}

fn standardize<T: Real>(g: &mut Graph<T>, z: Var) -> Result<Var, SslError> {
    let mean = g.mean_axis(z, 0)?;
    let centered = g.sub(z, mean)?;
    let var = g.var_axis(z, 0, 0)?;
    let var = g.add_scalar(var, T::from_f64_lossy(STD_EPS))?;
    let std = g.sqrt(var)?;
    Ok(g.div(centered, std)?)
}

fn off_diagonal_mask<T: Real>(n: usize) -> Tensor<T> {
    let mut t = Tensor::ones(&[n, n]);
    for i in 0..n {
        t.set(&[i, i], T::zero());
    }
    t
}

/// `C = ẐaᵀẐb / n` over batch-standardized embeddings.
pub fn cross_correlation<T: Real>(g: &mut Graph<T>, za: Var, zb: Var) -> Result<Var, SslError> {
    let (n, _) = check_batch(g, za, zb)?;
    let a = standardize(g, za)?;
    let b = standardize(g, zb)?;
    let at = g.transpose(a)?;
    let c = g.matmul(at, b)?;
    Ok(g.scale(c, T::one() / T::from_usize(n).unwrap())?)
}

/// `Σ_i (1 − C_ii)² + λ·Σ_{i≠j} C_ij²`. Terms: invariance, redundancy.
pub fn barlow_twins_loss<T: Real>(
    g: &mut Graph<T>,
    za: Var,
    zb: Var,
    cfg: &BarlowTwinsConfig,
) -> Result<(Var, LossTerms), SslError> {
    let (_, d) = check_batch(g, za, zb)?;
    let c = cross_correlation(g, za, zb)?;
    let eye = g.constant(Tensor::eye(d));
    let mask = g.constant(off_diagonal_mask(d));
    let diag = g.mul(c, eye)?;
    let miss = g.sub(eye, diag)?;
    let miss = g.square(miss)?;
    let inv = g.sum(miss)?;
    let off = g.mul(c, mask)?;
    let off = g.square(off)?;
    let red = g.sum(off)?;
    let red_w = g.scale(red, T::from_f64_lossy(cfg.lambda_bt))?;
    let loss = g.add(inv, red_w)?;
    let terms = LossTerms {
        values: vec![g.value(inv).item().as_f64(), g.value(red).item().as_f64()],
    };
    Ok((loss, terms))
}

/// Mean over dimensions of `relu(γ − sqrt(var + ε))`, population variance.
fn variance_term<T: Real>(g: &mut Graph<T>, z: Var, cfg: &VicRegConfig) -> Result<Var, SslError> {
    let var = g.var_axis(z, 0, 0)?;
    let var = g.add_scalar(var, T::from_f64_lossy(cfg.epsilon))?;
    let std = g.sqrt(var)?;
    let neg = g.neg(std)?;
    let gap = g.add_scalar(neg, T::from_f64_lossy(cfg.gamma))?;
    let hinge = g.relu(gap)?;
    Ok(g.mean(hinge)?)
}

/// `Σ_{i≠j} Cov_ij² / N` with `Cov = (Z − mean)ᵀ(Z − mean)/(n − 1)`.
fn covariance_term<T: Real>(g: &mut Graph<T>, z: Var) -> Result<Var, SslError> {
    let (n, d) = (g.shape(z)[0], g.shape(z)[1]);
    let mean = g.mean_axis(z, 0)?;
    let c = g.sub(z, mean)?;
    let ct = g.transpose(c)?;
    let cov = g.matmul(ct, c)?;
    let cov = g.scale(cov, T::one() / T::from_usize(n - 1).unwrap())?;
    let mask = g.constant(off_diagonal_mask(d));
    let off = g.mul(cov, mask)?;
    let off = g.square(off)?;
    let s = g.sum(off)?;
    Ok(g.scale(s, T::one() / T::from_usize(d).unwrap())?)
}

/// `λ·mse + μ·(v(Za) + v(Zb)) + ν·(c(Za) + c(Zb))`. Terms: invariance (mse),
/// variance (`v(Za) + v(Zb)`), covariance (`c(Za) + c(Zb)`).
pub fn vicreg_loss<T: Real>(g: &mut Graph<T>, za: Var, zb: Var, cfg: &VicRegConfig) -> Result<(Var, LossTerms), SslError> {
    check_batch(g, za, zb)?;
    let diff = g.sub(za, zb)?;
    let sq = g.square(diff)?;
    let mse = g.mean(sq)?;
    let va = variance_term(g, za, cfg)?;
    let vb = variance_term(g, zb, cfg)?;
    let v = g.add(va, vb)?;
    let ca = covariance_term(g, za)?;
    let cb = covariance_term(g, zb)?;
    let c = g.add(ca, cb)?;
    let t_inv = g.scale(mse, T::from_f64_lossy(cfg.lambda_inv))?;
    let t_var = g.scale(v, T::from_f64_lossy(cfg.mu_var))?;
    let t_cov = g.scale(c, T::from_f64_lossy(cfg.nu_cov))?;
    let loss = g.add(t_inv, t_var)?;
    let loss = g.add(loss, t_cov)?;
    let terms = LossTerms {
        values: vec![
            g.value(mse).item().as_f64(),
            g.value(v).item().as_f64(),
            g.value(c).item().as_f64(),
        ],
    };
    Ok((loss, terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(rows: &[Vec<f64>], rows_b: &[Vec<f64>], loss: SslLoss) -> f64 {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_rows(rows).unwrap());
        let b = g.constant(Tensor::from_rows(rows_b).unwrap());
        let (l, _) = loss.apply(&mut g, a, b).unwrap();
        g.value(l).item()
    }

    #[test]
    fn anti_correlated_pair() {
        let z = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        let l = eval(&z, &z, SslLoss::BarlowTwins(BarlowTwinsConfig::default()));
        assert!((l - 0.01).abs() < 1e-9, "{l}");
    }

    #[test]
    fn vicreg_identities() {
        let z = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]];
        let l = eval(&z, &z, SslLoss::Vicreg(VicRegConfig::default()));
        assert!(l.abs() < 1e-9, "{l}");
        let k = vec![vec![0.3; 5]; 6];
        let l = eval(&k, &k, SslLoss::Vicreg(VicRegConfig::default()));
        assert!((l - 49.5).abs() < 1e-6, "{l}");
    }

    #[test]
    fn offset_gives_lambda_delta_squared() {
        let z = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]];
        let zb: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|v| v + 0.2).collect()).collect();
        let l = eval(&z, &zb, SslLoss::Vicreg(VicRegConfig::default()));
        assert!((l - 25.0 * 0.04).abs() < 1e-9, "{l}");
    }

    #[test]
    fn batch_of_one_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert!(matches!(
            vicreg_loss(&mut g, a, a, &VicRegConfig::default()),
            Err(SslError::BatchTooSmall(1))
        ));
    }
}
