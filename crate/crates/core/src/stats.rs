//! Regression, SNR, Fisher-z attack success probability and correlation
//! attenuation models.

use libm::erfc;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least-squares fit of `y = beta1 * x + beta0 + eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub beta1: f64,
    pub beta0: f64,
    /// Residual mean square with divisor `m` (not `m - 2`).
    pub sigma_eps_sq: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance (divisor `m`).
pub fn variance(v: &[f64]) -> f64 {
    let mu = mean(v);
    v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64
}

pub fn fit_linear(x: &[f64], y: &[f64]) -> Result<RegressionFit> {
    if x.len() != y.len() {
        return Err(Error::Domain(format!("x has {} points, y has {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Domain("regression needs at least two points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("regressor"));
    }
    let beta1 = sxy / sxx;
    let beta0 = my - beta1 * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (beta1 * a + beta0)).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(RegressionFit { beta1, beta0, sigma_eps_sq: ss_res / x.len() as f64, r_squared, n_points: x.len() })
}

/// Signal-to-noise ratio of a linear leakage model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrEstimate {
    pub snr: f64,
    /// Variance of the regressor (transaction or access counts).
    pub sigma_n_sq: f64,
    pub fit: RegressionFit,
}

/// `beta1^2 * sigma_n^2 / sigma_eps^2`.
pub fn snr(fit: &RegressionFit, sigma_n_sq: f64) -> Result<SnrEstimate> {
    if fit.sigma_eps_sq <= 0.0 {
        return Err(Error::InfiniteSnr);
    }
    Ok(SnrEstimate { snr: fit.beta1 * fit.beta1 * sigma_n_sq / fit.sigma_eps_sq, sigma_n_sq, fit: *fit })
}

/// Fits `y` on `x` and evaluates the SNR with the variance of `x`.
pub fn snr_of(x: &[f64], y: &[f64]) -> Result<SnrEstimate> {
    let fit = fit_linear(x, y)?;
    snr(&fit, variance(x))
}

/// Streaming means and co-moments of `K` jointly observed variables
/// (Welford updates, Chan et al. merges).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comoments<const K: usize> {
    n: u64,
    #[serde(with = "serde_arrays")]
    mean: [f64; K],
    #[serde(with = "serde_arrays::matrix")]
    m2: [[f64; K]; K],
}

impl<const K: usize> Default for Comoments<K> {
    fn default() -> Self {
        Comoments { n: 0, mean: [0.0; K], m2: [[0.0; K]; K] }
    }
}

#[allow(clippy::needless_range_loop)]
impl<const K: usize> Comoments<K> {
    pub fn update(&mut self, x: &[f64; K]) {
        self.n += 1;
        let n = self.n as f64;
        let mut delta = [0.0; K];
        for i in 0..K {
            delta[i] = x[i] - self.mean[i];
            self.mean[i] += delta[i] / n;
        }
        for i in 0..K {
            for j in 0..K {
                self.m2[i][j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    pub fn merge(&mut self, other: &Comoments<K>) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let mut delta = [0.0; K];
        for i in 0..K {
            delta[i] = other.mean[i] - self.mean[i];
            self.mean[i] += delta[i] * nb / n;
        }
        for i in 0..K {
            for j in 0..K {
                self.m2[i][j] += other.m2[i][j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.mean[i]
    }

    /// Population covariance.
    pub fn cov(&self, i: usize, j: usize) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2[i][j] / self.n as f64
        }
    }

    pub fn var(&self, i: usize) -> f64 {
        self.cov(i, i)
    }

    /// Pearson correlation; `None` when either variable is constant.
    pub fn corr(&self, i: usize, j: usize) -> Option<f64> {
        let d = self.m2[i][i] * self.m2[j][j];
        (d > 0.0).then(|| (self.m2[i][j] / d.sqrt()).clamp(-1.0, 1.0))
    }

    /// Least-squares fit of variable `y` on variable `x`, with the same
    /// conventions as [`fit_linear`].
    pub fn fit(&self, x: usize, y: usize) -> Result<RegressionFit> {
        if self.n < 2 {
            return Err(Error::Domain("regression needs at least two points".into()));
        }
        if self.m2[x][x] <= 0.0 {
            return Err(Error::ZeroVariance("regressor"));
        }
        let beta1 = self.m2[x][y] / self.m2[x][x];
        let beta0 = self.mean[y] - beta1 * self.mean[x];
        let ss_res = (self.m2[y][y] - beta1 * self.m2[x][y]).max(0.0);
        let r_squared = if self.m2[y][y] == 0.0 { 1.0 } else { 1.0 - ss_res / self.m2[y][y] };
        Ok(RegressionFit { beta1, beta0, sigma_eps_sq: ss_res / self.n as f64, r_squared, n_points: self.n as usize })
    }
}

mod serde_arrays {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const K: usize>(v: &[f64; K], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const K: usize>(d: D) -> Result<[f64; K], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into().map_err(|_| serde::de::Error::custom(format!("expected {K} values")))
    }

    pub mod matrix {
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer, const K: usize>(m: &[[f64; K]; K], s: S) -> Result<S::Ok, S::Error> {
            m.iter().map(|r| r.to_vec()).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>, const K: usize>(d: D) -> Result<[[f64; K]; K], D::Error> {
            let rows = Vec::<Vec<f64>>::deserialize(d)?;
            let rows: Vec<[f64; K]> = rows
                .into_iter()
                .map(|r| r.try_into().map_err(|_| serde::de::Error::custom(format!("expected {K} columns"))))
                .collect::<Result<_, _>>()?;
            rows.try_into().map_err(|_| serde::de::Error::custom(format!("expected {K} rows")))
        }
    }
}

/// Standard normal CDF, via the complementary error function
/// (absolute error well below 1e-7).
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn check_rho(rho: f64, name: &str) -> Result<()> {
    if rho.is_finite() && rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {rho} must satisfy |rho| < 1")))
    }
}

/// Probability that the correct key's correlation `rho_peak` stands out from
/// the background level `rho_ave` after `samples` traces (Fisher z).
pub fn success_probability(rho_peak: f64, rho_ave: f64, samples: f64) -> Result<f64> {
    check_rho(rho_peak, "rho_peak")?;
    check_rho(rho_ave, "rho_ave")?;
    if samples.is_nan() || samples <= 3.0 {
        return Err(Error::Domain(format!("sample count {samples} must exceed 3")));
    }
    let gap = rho_peak.atanh() - rho_ave.atanh();
    Ok(normal_cdf(gap / (2.0 / (samples - 3.0)).sqrt()))
}

/// Smallest integer sample count whose success probability reaches `alpha`.
pub fn samples_required(rho_peak: f64, rho_ave: f64, alpha: f64) -> Result<u64> {
    if !(alpha > 0.5 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha = {alpha} must lie in (0.5, 1)")));
    }
    check_rho(rho_peak, "rho_peak")?;
    check_rho(rho_ave, "rho_ave")?;
    if rho_peak <= rho_ave {
        return Err(Error::Unattainable);
    }
    let reaches = |s: u64| success_probability(rho_peak, rho_ave, s as f64).map(|a| a >= alpha);
    let mut hi = 4u64;
    while !reaches(hi)? {
        if hi > u64::MAX / 4 {
            return Err(Error::Unattainable);
        }
        hi *= 2;
    }
    let mut lo = 3u64; // exclusive
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if reaches(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Correlation left after measurement noise at the given SNR.
pub fn attenuate_hw(rho_ideal: f64, snr: f64) -> f64 {
    rho_ideal / (1.0 + 1.0 / snr).sqrt()
}

/// Inputs of the rotation attenuation model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttenuationInputs {
    /// Correlation of time with the transaction count the attacker predicts,
    /// before rotation.
    pub rho_tn: f64,
    /// Probability that the rotated count equals the predicted one.
    pub p_match: f64,
    pub sigma_n: f64,
    pub sigma_o: f64,
}

impl AttenuationInputs {
    pub fn new(rho_tn: f64, p_match: f64, sigma_n: f64, sigma_o: f64) -> Result<Self> {
        let finite = [rho_tn, p_match, sigma_n, sigma_o].iter().all(|v| v.is_finite());
        if !finite || !(0.0..=1.0).contains(&p_match) || sigma_n <= 0.0 || sigma_o <= 0.0 {
            return Err(Error::Domain(format!(
                "attenuation inputs out of range: rho={rho_tn}, p={p_match}, sigma_n={sigma_n}, sigma_o={sigma_o}"
            )));
        }
        Ok(AttenuationInputs { rho_tn, p_match, sigma_n, sigma_o })
    }
}

/// `rho(t, n) * p(o = n) * sigma_n / sigma_o`.
pub fn attenuate_sw(inputs: &AttenuationInputs) -> f64 {
    inputs.rho_tn * inputs.p_match * inputs.sigma_n / inputs.sigma_o
}

/// Lower bound on the effort multiplier of stacking two countermeasures.
pub fn combined_gain(g_hw: f64, g_sw: f64) -> Result<f64> {
    if !(g_hw >= 1.0 && g_sw >= 1.0) {
        return Err(Error::Domain(format!("gains must be >= 1 (got {g_hw}, {g_sw})")));
    }
    Ok(g_hw * g_sw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn comoments_match_batch_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, 3.0).unwrap();
        let pts: Vec<[f64; 2]> = (0..5000)
            .map(|_| {
                let x = (rng.gen::<u32>() % 17) as f64;
                [x, 1000.0 + 2.5 * x + noise.sample(&mut rng)]
            })
            .collect();
        let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().map(|p| (p[0], p[1])).unzip();
        let mut whole = Comoments::<2>::default();
        pts.iter().for_each(|p| whole.update(p));
        let mut parts = Comoments::<2>::default();
        for chunk in pts.chunks(333) {
            let mut c = Comoments::<2>::default();
            chunk.iter().for_each(|p| c.update(p));
            parts.merge(&c);
        }
        let batch = fit_linear(&x, &y).unwrap();
        for m in [&whole, &parts] {
            let f = m.fit(0, 1).unwrap();
            assert_relative_eq!(f.beta1, batch.beta1, max_relative = 1e-9);
            assert_relative_eq!(f.beta0, batch.beta0, max_relative = 1e-9);
            assert_relative_eq!(f.sigma_eps_sq, batch.sigma_eps_sq, max_relative = 1e-9);
            assert_relative_eq!(m.var(0), variance(&x), max_relative = 1e-9);
        }
        let r = whole.corr(0, 1).unwrap();
        assert_relative_eq!(r * r, batch.r_squared, max_relative = 1e-9);
        let back: Comoments<2> = serde_json::from_str(&serde_json::to_string(&whole).unwrap()).unwrap();
        assert_eq!(back, whole);
    }

    #[test]
    fn planted_line_recovered() {
        let x: Vec<f64> = (1..=32).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 19.463 * v + 346.2).collect();
        let f = fit_linear(&x, &y).unwrap();
        assert_relative_eq!(f.beta1, 19.463, max_relative = 1e-12);
        assert_relative_eq!(f.beta0, 346.2, max_relative = 1e-12);
        assert!(f.sigma_eps_sq < 1e-18);
        assert_relative_eq!(f.r_squared, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn constant_y_and_constant_x() {
        let x = [1.0, 2.0, 3.0];
        let f = fit_linear(&x, &[5.0; 3]).unwrap();
        assert_eq!((f.beta1, f.sigma_eps_sq), (0.0, 0.0));
        assert!(matches!(snr(&f, 1.0), Err(Error::InfiniteSnr)));
        assert!(matches!(fit_linear(&[2.0; 3], &x), Err(Error::ZeroVariance(_))));
        assert!(fit_linear(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn residual_variance_uses_divisor_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noise = Normal::new(0.0, 3.0).unwrap();
        let x: Vec<f64> = (0..100_000).map(|i| (i % 32 + 1) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 6.0 * v + 340.0 + noise.sample(&mut rng)).collect();
        let f = fit_linear(&x, &y).unwrap();
        assert!((f.sigma_eps_sq - 9.0).abs() / 9.0 < 0.05, "{}", f.sigma_eps_sq);
    }

    #[test]
    fn snr_scales_with_slope_squared() {
        let fit = RegressionFit { beta1: 2.0, beta0: 0.0, sigma_eps_sq: 4.0, r_squared: 0.5, n_points: 10 };
        let a = snr(&fit, 3.0).unwrap().snr;
        let b = snr(&RegressionFit { beta1: 4.0, ..fit }, 3.0).unwrap().snr;
        assert_relative_eq!(b, 4.0 * a);
        assert_relative_eq!(a, 3.0);
    }

    #[test]
    fn snr_closed_form_on_synthetic() {
        // x uniform over 1..=32 (variance 85.25), slope 3, noise sigma 20
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, 20.0).unwrap();
        let x: Vec<f64> = (0..200_000).map(|i| (i % 32 + 1) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + noise.sample(&mut rng)).collect();
        let est = snr_of(&x, &y).unwrap();
        let expected = 9.0 * 85.25 / 400.0;
        assert!((est.snr - expected).abs() / expected < 0.02, "{} vs {}", est.snr, expected);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert_relative_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert!((normal_cdf(1.2815515655446004) - 0.9).abs() < 1e-9);
        assert!((normal_cdf(-1.959963984540054) - 0.025).abs() < 1e-9);
    }

    #[test]
    fn success_probability_edges() {
        for s in [4.0, 50.0, 1e6] {
            assert_eq!(success_probability(0.2, 0.2, s).unwrap(), 0.5);
        }
        assert!(success_probability(0.05, 0.0, 1e9).unwrap() > 0.999_999);
        assert!(success_probability(0.1, 0.0, 3.0).is_err());
        assert!(success_probability(1.0, 0.0, 10.0).is_err());
    }

    #[test]
    fn samples_required_matches_closed_form() {
        // S = 2 (z_0.9 / atanh 0.1)^2 + 3, rounded up
        let z = 1.2815515655446004_f64;
        let oracle = (2.0 * (z / 0.1f64.atanh()).powi(2) + 3.0).ceil() as u64;
        assert_eq!(oracle, 330);
        let s = samples_required(0.1, 0.0, 0.9).unwrap();
        assert!(s.abs_diff(oracle) <= 1, "{s}");
        assert!(matches!(samples_required(0.1, 0.2, 0.9), Err(Error::Unattainable)));
        assert!(samples_required(0.1, 0.0, 0.4).is_err());
    }

    #[test]
    fn attenuation_examples() {
        assert_relative_eq!(attenuate_hw(0.8, f64::INFINITY), 0.8);
        assert_relative_eq!(attenuate_hw(0.8, 1.0 / 3.0), 0.4);
        let same = AttenuationInputs::new(0.3, 1.0, 2.0, 2.0).unwrap();
        assert_relative_eq!(attenuate_sw(&same), 0.3);
        assert_eq!(attenuate_sw(&AttenuationInputs::new(0.3, 0.0, 2.0, 2.0).unwrap()), 0.0);
        assert!(AttenuationInputs::new(0.3, 1.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn combined_gain_examples() {
        assert_eq!(combined_gain(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(combined_gain(80.0, 70.0).unwrap(), 5600.0);
        assert_eq!(combined_gain(1433.0, 178.0).unwrap(), 255_074.0);
        assert!(combined_gain(0.5, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn residuals_orthogonal_to_x(pts in proptest::collection::vec((0.0f64..100.0, -1e3f64..1e3), 3..200)) {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            prop_assume!(variance(&x) > 1e-6);
            let f = fit_linear(&x, &y).unwrap();
            let dot: f64 = x.iter().zip(&y).map(|(a, b)| (b - f.beta1 * a - f.beta0) * a).sum();
            let scale: f64 = x.iter().zip(&y).map(|(a, b)| (a * b).abs()).sum::<f64>().max(1.0);
            prop_assert!(dot.abs() / scale < 1e-9);
        }

        #[test]
        fn attenuate_hw_bounded(rho in 0.001f64..1.0, snr in 1e-6f64..1e6) {
            let r = attenuate_hw(rho, snr);
            prop_assert!(r > 0.0 && r <= rho);
        }

        #[test]
        fn round_trip(peak in 0.01f64..0.9, gap in 0.005f64..0.5, alpha in 0.55f64..0.999) {
            let ave = peak - gap;
            prop_assume!(ave > -0.99);
            let s = samples_required(peak, ave, alpha).unwrap();
            prop_assert!(success_probability(peak, ave, s as f64).unwrap() >= alpha);
            if s > 4 {
                prop_assert!(success_probability(peak, ave, (s - 1) as f64).unwrap() < alpha);
            }
        }
    }
}
