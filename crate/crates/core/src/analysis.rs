//! Gaussian propagation through an adapter and the KL divergence caused by
//! removing one hidden neuron.
//!
//! With independent Gaussian inputs `h_k ~ N(μ_k, Σ_kk)`, the pre-activation
//! of neuron `j` is Gaussian with
//!
//! ```text
//! μ_j^down = Σ_k W_down[j,k]·μ_k        Σ_j^down = Σ_k W_down[j,k]²·Σ_kk
//! ```
//!
//! When every `μ_j^down` is far above zero the GELU acts as the identity and
//! the pre-residual output `r = W_up·gelu(W_down·h)` is approximately
//! Gaussian with
//!
//! ```text
//! μ_l^up = Σ_j W_up[l,j]·μ_j^down       Σ_l^up = Σ_j W_up[l,j]²·Σ_j^down
//! ```
//!
//! The variance treats the hidden units as uncorrelated, which is exact
//! when the `W_down` rows read disjoint inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::autodiff::gelu_scalar;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Independent Gaussian inputs: means and diagonal variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianInputSpec {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianInputSpec {
    pub fn new(mu: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let s = Self { mu, var };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.var.len() {
            return Err(Error::Shape(format!(
                "{} means for {} variances",
                self.mu.len(),
                self.var.len()
            )));
        }
        if self.mu.iter().any(|m| !m.is_finite()) || self.var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(
                "input means must be finite and variances positive".into(),
            ));
        }
        Ok(())
    }

    fn check_for<T: Scalar>(&self, a: &Adapter<T>) -> Result<()> {
        self.validate()?;
        if self.mu.len() != a.input_dim() {
            return Err(Error::Shape(format!(
                "input spec has {} dims, adapter expects {}",
                self.mu.len(),
                a.input_dim()
            )));
        }
        Ok(())
    }
}

fn down<T: Scalar>(a: &Adapter<T>, j: usize, k: usize) -> f64 {
    a.down().data()[j * a.input_dim() + k].as_f64()
}

fn up<T: Scalar>(a: &Adapter<T>, l: usize, j: usize) -> f64 {
    a.up().data()[l * a.hidden() + j].as_f64()
}

/// Mean and variance of every hidden pre-activation.
pub fn preact_stats<T: Scalar>(a: &Adapter<T>, input: &GaussianInputSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    input.check_for(a)?;
    let m = a.input_dim();
    let mut mu = Vec::with_capacity(a.hidden());
    let mut var = Vec::with_capacity(a.hidden());
    for j in 0..a.hidden() {
        mu.push((0..m).map(|k| down(a, j, k) * input.mu[k]).sum());
        var.push((0..m).map(|k| down(a, j, k).powi(2) * input.var[k]).sum());
    }
    Ok((mu, var))
}

/// Output statistics summed over the neurons for which `include(j)` holds.
fn output_stats_over<T: Scalar>(
    a: &Adapter<T>,
    mu_down: &[f64],
    var_down: &[f64],
    include: impl Fn(usize) -> bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut mu = Vec::with_capacity(a.input_dim());
    let mut var = Vec::with_capacity(a.input_dim());
    for l in 0..a.input_dim() {
        let js = || (0..a.hidden()).filter(|&j| include(j));
        mu.push(js().map(|j| up(a, l, j) * mu_down[j]).sum());
        var.push(js().map(|j| up(a, l, j).powi(2) * var_down[j]).sum());
    }
    (mu, var)
}

/// Closed-form mean and variance of the pre-residual output `r`, taking
/// the GELU as the identity.
pub fn output_stats<T: Scalar>(a: &Adapter<T>, input: &GaussianInputSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mu_down, var_down) = preact_stats(a, input)?;
    Ok(output_stats_over(a, &mu_down, &var_down, |_| true))
}

/// True when every hidden pre-activation sits at least three standard
/// deviations above zero, where the identity approximation of GELU holds.
pub fn identity_regime(mu_down: &[f64], var_down: &[f64]) -> bool {
    mu_down.iter().zip(var_down).all(|(m, v)| m - 3.0 * v.sqrt() > 0.0)
}

/// `KL(N(μ₁, v₁) ‖ N(μ₂, v₂))`.
pub fn gaussian_kl(mu1: f64, var1: f64, mu2: f64, var2: f64) -> Result<f64> {
    if !(var1 > 0.0 && var2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Gaussian KL needs positive variances, got {var1} and {var2}"
        )));
    }
    let d = mu1 - mu2;
    Ok(0.5 * (var2 / var1).ln() + (var1 + d * d) / (2.0 * var2) - 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronKLResult {
    pub neuron: usize,
    /// `KL(r_l ‖ r_l without neuron a)` for every output coordinate.
    pub kl: Vec<f64>,
    pub mu_up: Vec<f64>,
    pub var_up: Vec<f64>,
    pub mu_removed: Vec<f64>,
    pub var_removed: Vec<f64>,
}

impl NeuronKLResult {
    pub fn total(&self) -> f64 {
        self.kl.iter().sum()
    }
}

/// Per-output KL between the analytic output distribution with and without
/// hidden neuron `neuron`.
pub fn kl_neuron_removal<T: Scalar>(a: &Adapter<T>, input: &GaussianInputSpec, neuron: usize) -> Result<NeuronKLResult> {
    if neuron >= a.hidden() {
        return Err(Error::NeuronOutOfRange {
            index: neuron,
            hidden: a.hidden(),
        });
    }
    let (mu_down, var_down) = preact_stats(a, input)?;
    let (mu_up, var_up) = output_stats_over(a, &mu_down, &var_down, |_| true);
    let (mu_removed, var_removed) = output_stats_over(a, &mu_down, &var_down, |j| j != neuron);
    let mut kl = Vec::with_capacity(mu_up.len());
    for l in 0..mu_up.len() {
        if !(var_up[l] > 0.0 && var_removed[l] > 0.0) {
            return Err(Error::DegenerateVariance { neuron, output: l });
        }
        let d = gaussian_kl(mu_up[l], var_up[l], mu_removed[l], var_removed[l])?;
        debug_assert!(d >= -1e-12, "negative KL {d}");
        kl.push(d.max(0.0));
    }
    Ok(NeuronKLResult {
        neuron,
        kl,
        mu_up,
        var_up,
        mu_removed,
        var_removed,
    })
}

/// Sample mean and variance of one coordinate with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub mean: f64,
    pub var: f64,
    pub mean_se: f64,
    pub var_se: f64,
}

impl Moment {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let (mut m2, mut m4) = (0.0, 0.0);
        for x in xs {
            let d = (x - mean).powi(2);
            m2 += d;
            m4 += d * d;
        }
        let var = m2 / (n - 1.0);
        let m4 = m4 / n;
        let pop = m2 / n;
        Self {
            mean,
            var,
            mean_se: (var / n).sqrt(),
            var_se: ((m4 - pop * pop).max(0.0) / n).sqrt(),
        }
    }

    /// Whether `mean` and `var` both lie within `k` standard errors of the
    /// given values.
    pub fn agrees(&self, mean: f64, var: f64, k: f64) -> bool {
        (self.mean - mean).abs() <= k * self.mean_se && (self.var - var).abs() <= k * self.var_se
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    pub samples: usize,
    /// Hidden pre-activations `W_down·h`.
    pub preact: Vec<Moment>,
    /// Pre-residual output `r = W_up·gelu(W_down·h)`.
    pub output: Vec<Moment>,
    /// Adapter output `r + h`.
    pub residual: Vec<Moment>,
}

struct Draws {
    preact: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    input: Vec<Vec<f64>>,
}

fn draw<T: Scalar>(a: &Adapter<T>, input: &GaussianInputSpec, samples: usize, seed: u64) -> Result<Draws> {
    input.check_for(a)?;
    if samples < 2 {
        return Err(Error::InvalidArgument("Monte-Carlo needs at least two samples".into()));
    }
    let (n, m) = (a.hidden(), a.input_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Draws {
        preact: vec![Vec::with_capacity(samples); n],
        hidden: vec![Vec::with_capacity(samples); n],
        input: vec![Vec::with_capacity(samples); m],
    };
    let mut h = vec![0.0; m];
    for _ in 0..samples {
        for k in 0..m {
            let z: f64 = StandardNormal.sample(&mut rng);
            h[k] = input.mu[k] + input.var[k].sqrt() * z;
            d.input[k].push(h[k]);
        }
        for j in 0..n {
            let p: f64 = (0..m).map(|k| down(a, j, k) * h[k]).sum();
            d.preact[j].push(p);
            d.hidden[j].push(gelu_scalar(p));
        }
    }
    Ok(d)
}

/// Pre-residual outputs computed from the drawn hidden values, optionally
/// leaving one neuron out.
fn outputs<T: Scalar>(a: &Adapter<T>, d: &Draws, skip: Option<usize>) -> Vec<Vec<f64>> {
    let samples = d.input.first().map_or(0, Vec::len);
    (0..a.input_dim())
        .map(|l| {
            (0..samples)
                .map(|s| {
                    (0..a.hidden())
                        .filter(|&j| Some(j) != skip)
                        .map(|j| up(a, l, j) * d.hidden[j][s])
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Seeded sampling through the exact adapter (true GELU).
pub fn mc_oracle<T: Scalar>(a: &Adapter<T>, input: &GaussianInputSpec, samples: usize, seed: u64) -> Result<McStats> {
    let d = draw(a, input, samples, seed)?;
    let r = outputs(a, &d, None);
    let residual: Vec<Vec<f64>> = r
        .iter()
        .zip(&d.input)
        .map(|(rl, hl)| rl.iter().zip(hl).map(|(x, y)| x + y).collect())
        .collect();
    Ok(McStats {
        samples,
        preact: d.preact.iter().map(|x| Moment::from_samples(x)).collect(),
        output: r.iter().map(|x| Moment::from_samples(x)).collect(),
        residual: residual.iter().map(|x| Moment::from_samples(x)).collect(),
    })
}

/// KL between Gaussians fitted to the sampled `r_l` with and without
/// neuron `neuron`. Both fits use the same input draws.
pub fn mc_kl<T: Scalar>(
    a: &Adapter<T>,
    input: &GaussianInputSpec,
    neuron: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if neuron >= a.hidden() {
        return Err(Error::NeuronOutOfRange {
            index: neuron,
            hidden: a.hidden(),
        });
    }
    let d = draw(a, input, samples, seed)?;
    let full = outputs(a, &d, None);
    let without = outputs(a, &d, Some(neuron));
    full.iter()
        .zip(&without)
        .enumerate()
        .map(|(l, (f, w))| {
            let (p, q) = (Moment::from_samples(f), Moment::from_samples(w));
            if !(q.var > 0.0) {
                return Err(Error::DegenerateVariance { neuron, output: l });
            }
            gaussian_kl(p.mean, p.var, q.mean, q.var)
        })
        .collect()
}

/// A seeded adapter and input spec inside the identity regime: positive
/// `W_down` rows over disjoint input groups, so the hidden units are
/// independent, and input means well above zero. Needs `1 ≤ n ≤ m`.
pub fn identity_regime_case(m: usize, n: usize, seed: u64) -> Result<(Adapter<f64>, GaussianInputSpec)> {
    if n == 0 || n > m {
        return Err(Error::InvalidArgument(format!(
            "identity-regime case needs 1 <= n <= m, got m = {m}, n = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group = |k: usize| k * n / m;
    let down = Tensor::from_fn(vec![n, m], |i| {
        let (j, k) = (i / m, i % m);
        if group(k) == j {
            rng.random_range(1.0..2.0)
        } else {
            0.0
        }
    });
    let up = Tensor::from_fn(vec![m, n], |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let mu = (0..m).map(|_| rng.random_range(4.0..6.0)).collect();
    let var = (0..m).map(|_| rng.random_range(0.01..0.05)).collect();
    Ok((Adapter::new(down, up)?, GaussianInputSpec::new(mu, var)?))
}

/// Analytic and sampled KL for removing each neuron, summed over outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlComparison {
    pub neuron: usize,
    pub analytic: f64,
    pub mc: f64,
}

impl KlComparison {
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.mc).abs() / self.mc.abs()
    }
}

pub fn compare_kl<T: Scalar>(a: &Adapter<T>, input: &GaussianInputSpec, samples: usize, seed: u64) -> Result<Vec<KlComparison>> {
    (0..a.hidden())
        .map(|j| {
            Ok(KlComparison {
                neuron: j,
                analytic: kl_neuron_removal(a, input, j)?.total(),
                mc: mc_kl(a, input, j, samples, seed)?.iter().sum(),
            })
        })
        .collect()
}

pub fn write_kl_csv<W: std::io::Write>(rows: &[KlComparison], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["neuron", "analytic_kl", "mc_kl", "relative_error"])?;
    for r in rows {
        w.write_record([
            r.neuron.to_string(),
            format!("{:e}", r.analytic),
            format!("{:e}", r.mc),
            format!("{:e}", r.relative_error()),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// One row of the analytic-vs-sampled comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub stage: &'static str,
    pub index: usize,
    pub analytic_mean: f64,
    pub mc_mean: f64,
    pub mc_mean_se: f64,
    pub analytic_var: f64,
    pub mc_var: f64,
    pub mc_var_se: f64,
}

/// Pre-activation and output statistics side by side.
pub fn compare<T: Scalar>(a: &Adapter<T>, input: &GaussianInputSpec, samples: usize, seed: u64) -> Result<Vec<ComparisonRow>> {
    let (mu_d, var_d) = preact_stats(a, input)?;
    let (mu_u, var_u) = output_stats(a, input)?;
    let mc = mc_oracle(a, input, samples, seed)?;
    let rows = |stage, mu: &[f64], var: &[f64], mc: &[Moment]| {
        (0..mu.len())
            .map(|i| ComparisonRow {
                stage,
                index: i,
                analytic_mean: mu[i],
                mc_mean: mc[i].mean,
                mc_mean_se: mc[i].mean_se,
                analytic_var: var[i],
                mc_var: mc[i].var,
                mc_var_se: mc[i].var_se,
            })
            .collect::<Vec<_>>()
    };
    let mut out = rows("preact", &mu_d, &var_d, &mc.preact);
    out.extend(rows("output", &mu_u, &var_u, &mc.output));
    Ok(out)
}

pub fn write_comparison_csv<W: std::io::Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "stage",
        "index",
        "analytic_mean",
        "mc_mean",
        "mc_mean_se",
        "analytic_var",
        "mc_var",
        "mc_var_se",
    ])?;
    for r in rows {
        w.write_record([
            r.stage.to_string(),
            r.index.to_string(),
            format!("{:e}", r.analytic_mean),
            format!("{:e}", r.mc_mean),
            format!("{:e}", r.mc_mean_se),
            format!("{:e}", r.analytic_var),
            format!("{:e}", r.mc_var),
            format!("{:e}", r.mc_var_se),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adapter(down: Vec<f64>, up: Vec<f64>, n: usize, m: usize) -> Adapter<f64> {
        Adapter::new(
            Tensor::new(vec![n, m], down).unwrap(),
            Tensor::new(vec![m, n], up).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn preact_hand_sums() {
        let a = adapter(vec![1.0, 1.0], vec![0.0, 0.0], 1, 2);
        let input = GaussianInputSpec::new(vec![1.0, 2.0], vec![1.0, 4.0]).unwrap();
        let (mu, var) = preact_stats(&a, &input).unwrap();
        assert_eq!((mu[0], var[0]), (3.0, 5.0));
    }

    #[test]
    fn zero_row_gives_zero_preact() {
        let a = adapter(vec![0.0, 0.0, 1.0, 2.0], vec![0.0; 4], 2, 2);
        let input = GaussianInputSpec::new(vec![1.0, 2.0], vec![1.0, 4.0]).unwrap();
        let (mu, var) = preact_stats(&a, &input).unwrap();
        assert_eq!((mu[0], var[0]), (0.0, 0.0));
    }

    #[test]
    fn scalar_chain() {
        let (w1, w2, m, v) = (0.7, -1.3, 2.5, 0.4);
        let a = adapter(vec![w1], vec![w2], 1, 1);
        let input = GaussianInputSpec::new(vec![m], vec![v]).unwrap();
        let (mu, var) = output_stats(&a, &input).unwrap();
        assert!((mu[0] - w1 * w2 * m).abs() < 1e-15);
        assert!((var[0] - w1 * w1 * w2 * w2 * v).abs() < 1e-15);
    }

    #[test]
    fn zero_up_gives_zero_output() {
        let a = adapter(vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4], 2, 2);
        let input = GaussianInputSpec::new(vec![1.0, 2.0], vec![1.0, 4.0]).unwrap();
        let (mu, var) = output_stats(&a, &input).unwrap();
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(var, vec![0.0, 0.0]);
    }

    #[test]
    fn kl_known_values() {
        assert_eq!(gaussian_kl(1.0, 2.0, 1.0, 2.0).unwrap(), 0.0);
        // KL(N(0,1) || N(1,1)) = 1/2
        assert!((gaussian_kl(0.0, 1.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        // KL(N(0,1) || N(0,e)) = 1/2 + 1/(2e) − 1/2
        let e = std::f64::consts::E;
        assert!((gaussian_kl(0.0, 1.0, 0.0, e).unwrap() - 1.0 / (2.0 * e)).abs() < 1e-15);
        assert!(gaussian_kl(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn zero_row_and_zero_emission_give_zero_kl() {
        let input = GaussianInputSpec::new(vec![1.0, 2.0], vec![1.0, 4.0]).unwrap();
        let a = adapter(vec![0.0, 0.0, 1.0, 2.0], vec![0.3, 0.5, -0.2, 0.9], 2, 2);
        assert!(kl_neuron_removal(&a, &input, 0).unwrap().kl.iter().all(|&k| k == 0.0));
        let b = adapter(vec![1.0, 3.0, 1.0, 2.0], vec![0.0, 0.5, 0.0, 0.9], 2, 2);
        assert!(kl_neuron_removal(&b, &input, 0).unwrap().kl.iter().all(|&k| k == 0.0));
        let c = adapter(vec![1.0, 3.0, 1.0, 2.0], vec![0.4, 0.5, 0.2, 0.9], 2, 2);
        assert!(kl_neuron_removal(&c, &input, 1).unwrap().total() > 0.0);
    }

    #[test]
    fn removing_only_contributor_is_degenerate() {
        let a = adapter(vec![1.0], vec![1.0], 1, 1);
        let input = GaussianInputSpec::new(vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(
            kl_neuron_removal(&a, &input, 0),
            Err(Error::DegenerateVariance { .. })
        ));
    }

    #[test]
    fn zero_weight_adapter_passes_input_through() {
        let a = adapter(vec![0.0; 4], vec![0.0; 4], 2, 2);
        let input = GaussianInputSpec::new(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        let mc = mc_oracle(&a, &input, 20_000, 5).unwrap();
        for k in 0..2 {
            assert!(mc.residual[k].agrees(input.mu[k], input.var[k], 4.0));
            assert_eq!(mc.output[k].mean, 0.0);
        }
    }

    #[test]
    fn standard_error_shrinks_with_samples() {
        let a = adapter(vec![1.0, 1.0], vec![0.0, 0.0], 1, 2);
        let input = GaussianInputSpec::new(vec![1.0, 2.0], vec![1.0, 4.0]).unwrap();
        let se1 = mc_oracle(&a, &input, 20_000, 1).unwrap().preact[0].mean_se;
        let se2 = mc_oracle(&a, &input, 40_000, 1).unwrap().preact[0].mean_se;
        let ratio = se2 / se1;
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.03, "{ratio}");
    }

    #[test]
    fn identity_regime_case_is_in_regime() {
        for seed in 0..5 {
            let (a, input) = identity_regime_case(6, 3, seed).unwrap();
            let (mu, var) = preact_stats(&a, &input).unwrap();
            assert!(identity_regime(&mu, &var));
            // every input feeds exactly one neuron
            for k in 0..6 {
                let feeding = (0..3).filter(|&j| a.down().data()[j * 6 + k] != 0.0).count();
                assert_eq!(feeding, 1);
            }
        }
        assert!(identity_regime_case(3, 4, 0).is_err());
        assert!(identity_regime_case(3, 0, 0).is_err());
    }
}
