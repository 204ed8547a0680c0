//! Synthetic data generation: spiked covariance designs, two-group mixture
//! designs, exposures, regression coefficients, and outcomes.
//!
//! Every generator is a pure function of its specification and a 64-bit
//! seed: identical inputs produce bit-identical output, and draws are made
//! in a fixed order (per row: the mixture label first, then coordinates in
//! index order) so that the stream layout is part of the contract. Callers
//! parallelize across replications by deriving one seed per replication.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance for the orthonormality check on spike directions.
const ORTHO_TOL: f64 = 1e-10;

/// Default bound on the norm of fixed coefficient vectors.
pub const DEFAULT_NORM_BOUND: f64 = 1.0;

/// Eigenvalues of the covariance away from the spikes.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseSpectrum {
    /// All non-spike eigenvalues equal to one.
    UnitBulk,
    /// Explicit non-spike eigenvalues, tiled cyclically over the non-spike
    /// coordinates. Requires canonical (one-hot) spike directions so that
    /// the covariance stays diagonal.
    ExplicitEsd(Vec<f64>),
}

/// A spiked population covariance `Sigma = B + sum_j lambda_j v_j v_j^T`.
///
/// The `lambda_j` are additive spike strengths over a unit variance on the
/// spike directions, so with a unit bulk the spiked eigenvalues of `Sigma`
/// are `1 + lambda_j`. Strengths must be strictly decreasing and positive,
/// and the directions orthonormal.
#[derive(Debug, Clone)]
pub struct SpikeSpec {
    /// Spike strength and unit direction pairs, strongest first.
    pub eigenpairs: Vec<(f64, Array1<f64>)>,
    /// Eigenvalues on the orthogonal complement of the spike directions.
    pub base: BaseSpectrum,
}

impl SpikeSpec {
    /// A spec with no spikes and unit bulk: rows are standard Gaussian.
    pub fn isotropic() -> Self {
        SpikeSpec {
            eigenpairs: Vec::new(),
            base: BaseSpectrum::UnitBulk,
        }
    }

    /// Unit-bulk spec from explicit eigenpairs.
    pub fn unit_bulk(eigenpairs: Vec<(f64, Array1<f64>)>) -> Self {
        SpikeSpec {
            eigenpairs,
            base: BaseSpectrum::UnitBulk,
        }
    }

    /// Unit-bulk spec with spikes along the leading coordinate axes.
    pub fn canonical(strengths: &[f64], p: usize) -> Self {
        let eigenpairs = strengths
            .iter()
            .enumerate()
            .map(|(j, &lambda)| {
                let mut v = Array1::zeros(p);
                v[j] = 1.0;
                (lambda, v)
            })
            .collect();
        SpikeSpec {
            eigenpairs,
            base: BaseSpectrum::UnitBulk,
        }
    }

    /// Checks the type invariants against an ambient dimension `p`.
    pub fn validate(&self, p: usize) -> Result<()> {
        for (j, (lambda, v)) in self.eigenpairs.iter().enumerate() {
            if !lambda.is_finite() || *lambda <= 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "spike {j}: strength must be positive and finite, got {lambda}"
                )));
            }
            if j > 0 && self.eigenpairs[j - 1].0 <= *lambda {
                return Err(Error::InvalidSpec(format!(
                    "spike strengths must be strictly decreasing, violated at index {j}"
                )));
            }
            if v.len() != p {
                return Err(Error::InvalidSpec(format!(
                    "spike {j}: direction has length {} but p = {p}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "spike {j}: direction has non-finite entries"
                )));
            }
        }
        for i in 0..self.eigenpairs.len() {
            for j in i..self.eigenpairs.len() {
                let dot = self.eigenpairs[i].1.dot(&self.eigenpairs[j].1);
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > ORTHO_TOL {
                    return Err(Error::InvalidSpec(format!(
                        "spike directions {i} and {j} are not orthonormal: inner product {dot}"
                    )));
                }
            }
        }
        match &self.base {
            BaseSpectrum::UnitBulk => {}
            BaseSpectrum::ExplicitEsd(values) => {
                if values.is_empty() {
                    return Err(Error::InvalidSpec(
                        "explicit base spectrum must be non-empty".to_string(),
                    ));
                }
                if values.iter().any(|b| !b.is_finite() || *b <= 0.0) {
                    return Err(Error::InvalidSpec(
                        "explicit base eigenvalues must be positive and finite".to_string(),
                    ));
                }
                // A non-unit bulk is only supported with canonical spike
                // directions; otherwise the covariance square root is not
                // available in closed form.
                for (j, (_, v)) in self.eigenpairs.iter().enumerate() {
                    let is_canonical = v.iter().enumerate().all(|(i, &x)| {
                        (i == j && (x - 1.0).abs() <= ORTHO_TOL) || (i != j && x.abs() <= ORTHO_TOL)
                    });
                    if !is_canonical {
                        return Err(Error::InvalidSpec(format!(
                            "explicit base spectrum requires canonical spike directions, spike {j} is not"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Which two-group mixture family a design follows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixtureKind {
    /// Rows `+- shift` on the differentiated coordinates plus standard
    /// Gaussian noise in every coordinate: `1/2 N(mu, I) + 1/2 N(-mu, I)`.
    GaussianMeanShift {
        /// Magnitude of the per-coordinate mean shift.
        shift: f64,
    },
    /// Each row draws one population label; the `m` differentiated
    /// coordinates are Binomial(2, q1) or Binomial(2, q2) according to the
    /// label, the rest Binomial(2, q_null).
    BinomialTwoGroup { q1: f64, q2: f64, q_null: f64 },
}

/// Two-group mixture design with equal weights and `m` differentiated
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    pub kind: MixtureKind,
    /// Number of leading coordinates that separate the two groups.
    pub m: usize,
}

impl MixtureSpec {
    /// Gaussian mean-shift mixture with the given shift magnitude.
    pub fn gaussian(shift: f64, m: usize) -> Self {
        MixtureSpec {
            kind: MixtureKind::GaussianMeanShift { shift },
            m,
        }
    }

    /// Two-group binomial mixture.
    pub fn binomial(q1: f64, q2: f64, q_null: f64, m: usize) -> Self {
        MixtureSpec {
            kind: MixtureKind::BinomialTwoGroup { q1, q2, q_null },
            m,
        }
    }

    /// Checks the type invariants against an ambient dimension `p`.
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.m > p {
            return Err(Error::InvalidSpec(format!(
                "mixture has m = {} differentiated coordinates but p = {p}",
                self.m
            )));
        }
        match self.kind {
            MixtureKind::GaussianMeanShift { shift } => {
                if !shift.is_finite() {
                    return Err(Error::InvalidSpec(format!(
                        "mean shift must be finite, got {shift}"
                    )));
                }
            }
            MixtureKind::BinomialTwoGroup { q1, q2, q_null } => {
                for (name, q) in [("q1", q1), ("q2", q2), ("q_null", q_null)] {
                    if !(q > 0.0 && q < 1.0) {
                        return Err(Error::InvalidSpec(format!(
                            "{name} must lie strictly in (0, 1), got {q}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Exact second-order description of a mixture design, in both centered and
/// uncentered forms.
///
/// Centered: `Var(X) = D + spike_strength * v v^T` with `D` diagonal taking
/// the value `sigma2_s` on the `m` differentiated coordinates and
/// `sigma2_null` elsewhere, and `v` the unit indicator of the differentiated
/// set. Uncentered: `E[X X^T] = Var(X) + mean mean^T`; its eigenvalues that
/// separate from the diagonal bulk are listed in `uncentered_top`,
/// strongest first.
#[derive(Debug, Clone)]
pub struct MixtureCovariance {
    pub sigma2_s: f64,
    pub sigma2_null: f64,
    pub spike_strength: f64,
    /// Unit indicator of the differentiated set; zero vector when m = 0.
    pub v: Array1<f64>,
    /// Mean of one row.
    pub mean: Array1<f64>,
    /// Separated eigenpairs of the uncentered second moment, descending.
    pub uncentered_top: Vec<(f64, Array1<f64>)>,
}

/// Exact population covariance decomposition of a mixture design.
pub fn mixture_covariance(spec: &MixtureSpec, p: usize) -> Result<MixtureCovariance> {
    if p == 0 {
        return Err(Error::InvalidInput("mixture_covariance: p = 0".to_string()));
    }
    spec.validate(p)?;
    let m = spec.m;
    let mut v = Array1::zeros(p);
    if m > 0 {
        let scale = 1.0 / (m as f64).sqrt();
        for i in 0..m {
            v[i] = scale;
        }
    }
    let (sigma2_s, sigma2_null, strength, mean_s, mean_null) = match spec.kind {
        MixtureKind::GaussianMeanShift { shift } => {
            // Component covariance I; the label contributes shift^2 to every
            // pair of differentiated coordinates, and the mean is zero.
            (1.0, 1.0, shift * shift * m as f64, 0.0, 0.0)
        }
        MixtureKind::BinomialTwoGroup { q1, q2, q_null } => {
            let var_b = |q: f64| 2.0 * q * (1.0 - q);
            let d = q1 - q2;
            // Conditional independence: distinct differentiated coordinates
            // covary only through the label, giving (q1 - q2)^2 per pair.
            let sigma2_s = 0.5 * (var_b(q1) + var_b(q2));
            (
                sigma2_s,
                var_b(q_null),
                d * d * m as f64,
                q1 + q2,
                2.0 * q_null,
            )
        }
    };
    let mut mean = Array1::zeros(p);
    for i in 0..p {
        mean[i] = if i < m { mean_s } else { mean_null };
    }
    let uncentered_top =
        uncentered_top_eigenpairs(p, m, sigma2_s, sigma2_null, strength, mean_s, mean_null);
    Ok(MixtureCovariance {
        sigma2_s,
        sigma2_null,
        spike_strength: strength,
        v,
        mean,
        uncentered_top,
    })
}

/// Eigenpairs of `E[X X^T] = D + s v v^T + mean mean^T` that separate from
/// the diagonal bulk. The matrix acts invariantly on the two-dimensional
/// span of the block indicators, so the separated pairs come from an exact
/// reduced symmetric problem of size at most two.
fn uncentered_top_eigenpairs(
    p: usize,
    m: usize,
    sigma2_s: f64,
    sigma2_null: f64,
    strength: f64,
    mean_s: f64,
    mean_null: f64,
) -> Vec<(f64, Array1<f64>)> {
    let mut basis: Vec<Array1<f64>> = Vec::new();
    let mut reduced: Vec<f64> = Vec::new();
    let msq = (m as f64).sqrt();
    let nsq = ((p - m) as f64).sqrt();
    // Reduced matrix entries over the orthonormal indicators u_s, u_null.
    let g_s = mean_s * msq;
    let g_n = mean_null * nsq;
    match (m > 0, m < p) {
        (true, true) => {
            let a = sigma2_s + strength + g_s * g_s;
            let b = g_s * g_n;
            let c = sigma2_null + g_n * g_n;
            // Eigenvalues of [[a, b], [b, c]].
            let tr = a + c;
            let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
            let l1 = 0.5 * (tr + disc);
            let l2 = 0.5 * (tr - disc);
            for l in [l1, l2] {
                // Keep only pairs that actually separate from the bulk.
                if l > sigma2_s.max(sigma2_null) + 1e-12 {
                    let (x, y) = if b.abs() > 1e-300 {
                        (b, l - a)
                    } else if (l - a).abs() < (l - c).abs() {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    };
                    let norm = (x * x + y * y).sqrt();
                    let mut w = Array1::zeros(p);
                    for i in 0..p {
                        w[i] = if i < m {
                            x / norm / msq
                        } else {
                            y / norm / nsq
                        };
                    }
                    reduced.push(l);
                    basis.push(w);
                }
            }
        }
        (true, false) => {
            let l = sigma2_s + strength + g_s * g_s;
            if l > sigma2_s + 1e-12 {
                let mut w = Array1::zeros(p);
                for i in 0..p {
                    w[i] = 1.0 / msq;
                }
                reduced.push(l);
                basis.push(w);
            }
        }
        (false, true) => {
            let l = sigma2_null + g_n * g_n;
            if l > sigma2_null + 1e-12 {
                let mut w = Array1::zeros(p);
                for i in 0..p {
                    w[i] = 1.0 / nsq;
                }
                reduced.push(l);
                basis.push(w);
            }
        }
        (false, false) => {}
    }
    reduced.into_iter().zip(basis).collect()
}

/// Draws an `n x p` matrix with i.i.d. `N(0, Sigma)` rows for the spiked
/// covariance `Sigma` described by `spec`.
pub fn gen_spiked(n: usize, p: usize, spec: &SpikeSpec, seed: u64) -> Result<Array2<f64>> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidInput(format!(
            "gen_spiked: dimensions must be positive, got n={n}, p={p}"
        )));
    }
    spec.validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            z[[i, j]] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    match &spec.base {
        BaseSpectrum::UnitBulk => {
            // Sigma^{1/2} = I + sum_j (sqrt(1 + lambda_j) - 1) v_j v_j^T for
            // orthonormal v_j, so each rank-one term updates Z in place.
            for (lambda, v) in &spec.eigenpairs {
                let c = (1.0 + lambda).sqrt() - 1.0;
                let zv = linalg::matvec(&z.view(), false, &v.view());
                for i in 0..n {
                    let w = c * zv[i];
                    for j in 0..p {
                        z[[i, j]] += w * v[j];
                    }
                }
            }
        }
        BaseSpectrum::ExplicitEsd(values) => {
            // Canonical spikes keep Sigma diagonal: spiked axes carry
            // 1 + lambda_j, the rest tile the explicit bulk list.
            let s = spec.eigenpairs.len();
            let mut scale = vec![0.0f64; p];
            for (j, item) in scale.iter_mut().enumerate() {
                *item = if j < s {
                    (1.0 + spec.eigenpairs[j].0).sqrt()
                } else {
                    values[(j - s) % values.len()].sqrt()
                };
            }
            for i in 0..n {
                for j in 0..p {
                    z[[i, j]] *= scale[j];
                }
            }
        }
    }
    Ok(z)
}

/// Draws the Gaussian mean-shift mixture design: each row takes a fair
/// label and equals `label * shift` on the `m` differentiated coordinates
/// plus standard Gaussian noise everywhere.
pub fn gen_gaussian_mixture(
    n: usize,
    p: usize,
    spec: &MixtureSpec,
    seed: u64,
) -> Result<Array2<f64>> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidInput(format!(
            "gen_gaussian_mixture: dimensions must be positive, got n={n}, p={p}"
        )));
    }
    spec.validate(p)?;
    let shift = match spec.kind {
        MixtureKind::GaussianMeanShift { shift } => shift,
        _ => {
            return Err(Error::InvalidSpec(
                "gen_gaussian_mixture requires the Gaussian mean-shift kind".to_string(),
            ))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::zeros((n, p));
    for i in 0..n {
        let label: f64 = if rng.gen::<f64>() < 0.5 { 1.0 } else { -1.0 };
        for j in 0..p {
            let noise: f64 = rng.sample(StandardNormal);
            w[[i, j]] = noise + if j < spec.m { label * shift } else { 0.0 };
        }
    }
    Ok(w)
}

/// Draws the two-group binomial mixture design. Entries lie in `{0, 1, 2}`;
/// one population label per row selects the success probability of the `m`
/// differentiated coordinates.
pub fn gen_binomial_mixture(
    n: usize,
    p: usize,
    spec: &MixtureSpec,
    seed: u64,
) -> Result<Array2<f64>> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidInput(format!(
            "gen_binomial_mixture: dimensions must be positive, got n={n}, p={p}"
        )));
    }
    spec.validate(p)?;
    let (q1, q2, q_null) = match spec.kind {
        MixtureKind::BinomialTwoGroup { q1, q2, q_null } => (q1, q2, q_null),
        _ => {
            return Err(Error::InvalidSpec(
                "gen_binomial_mixture requires the binomial two-group kind".to_string(),
            ))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::zeros((n, p));
    for i in 0..n {
        let first_group = rng.gen::<f64>() < 0.5;
        for j in 0..p {
            let q = if j < spec.m {
                if first_group {
                    q1
                } else {
                    q2
                }
            } else {
                q_null
            };
            // Binomial(2, q) as two explicit Bernoulli draws keeps the
            // stream layout fixed regardless of q.
            let a = u8::from(rng.gen::<f64>() < q);
            let b = u8::from(rng.gen::<f64>() < q);
            w[[i, j]] = f64::from(a + b);
        }
    }
    Ok(w)
}

/// Draws the linear exposure `A = W theta + eta` with `eta ~ N(0, sigma_g^2 I)`.
pub fn gen_exposure_linear(
    w: &Array2<f64>,
    theta: &Array1<f64>,
    sigma_g: f64,
    seed: u64,
) -> Result<Array1<f64>> {
    if theta.len() != w.ncols() {
        return Err(Error::InvalidInput(format!(
            "gen_exposure_linear: theta has length {} but W has {} columns",
            theta.len(),
            w.ncols()
        )));
    }
    if !sigma_g.is_finite() || sigma_g < 0.0 {
        return Err(Error::InvalidInput(format!(
            "gen_exposure_linear: sigma_g must be finite and nonnegative, got {sigma_g}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = linalg::matvec(&w.view(), false, &theta.view());
    for x in a.iter_mut() {
        let eta: f64 = rng.sample(StandardNormal);
        *x += sigma_g * eta;
    }
    Ok(a)
}

/// Draws the binomial exposure `A_i ~ Binomial(2, logistic(theta^T W_i))`.
pub fn gen_exposure_binomial(
    w: &Array2<f64>,
    theta: &Array1<f64>,
    seed: u64,
) -> Result<Array1<f64>> {
    if theta.len() != w.ncols() {
        return Err(Error::InvalidInput(format!(
            "gen_exposure_binomial: theta has length {} but W has {} columns",
            theta.len(),
            w.ncols()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lin = linalg::matvec(&w.view(), false, &theta.view());
    let mut a = Array1::zeros(w.nrows());
    for (i, &t) in lin.iter().enumerate() {
        let prob = 1.0 / (1.0 + (-t).exp());
        let x = u8::from(rng.gen::<f64>() < prob);
        let y = u8::from(rng.gen::<f64>() < prob);
        a[i] = f64::from(x + y);
    }
    Ok(a)
}

/// How a fixed coefficient vector is constructed.
#[derive(Debug, Clone)]
pub enum FixedCoefficient {
    /// `beta = a v1 + sqrt(1 - a^2) v2` with `a = 1 - p^{-tau0}`, a unit
    /// vector whose angle to the leading spike is controlled by `tau0`.
    AngleToSpike { tau0: f64 },
    /// A caller-supplied vector, checked against the norm bound.
    Explicit { vector: Vec<f64>, norm_bound: f64 },
    /// The population regression of the first covariance coordinate on the
    /// rest, available in closed form for a single spike.
    PopulationLeastSquares,
}

impl FixedCoefficient {
    /// Explicit vector with the default norm bound.
    pub fn explicit(vector: Vec<f64>) -> Self {
        FixedCoefficient::Explicit {
            vector,
            norm_bound: DEFAULT_NORM_BOUND,
        }
    }
}

/// Distribution of random coefficient coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomKind {
    /// Coordinates i.i.d. `N(0, sigma^2 / p)`.
    Gaussian,
    /// Coordinates i.i.d. `+- sigma / sqrt(p)`, a sub-Gaussian alternative.
    Rademacher,
}

/// Specification of a regression coefficient vector.
#[derive(Debug, Clone)]
pub enum CoefficientSpec {
    Fixed(FixedCoefficient),
    Random { sigma2: f64, kind: RandomKind },
}

/// Directions and population parameters a coefficient construction may need.
#[derive(Debug, Clone, Default)]
pub struct CoefficientContext {
    /// Output dimension (number of covariate columns).
    pub p: usize,
    /// Two orthonormal directions for [`FixedCoefficient::AngleToSpike`]:
    /// the leading spike and a completion orthogonal to it.
    pub spike_pair: Option<(Array1<f64>, Array1<f64>)>,
    /// Single-spike population `(lambda, v)` over `p + 1` joint coordinates
    /// for [`FixedCoefficient::PopulationLeastSquares`].
    pub population: Option<(f64, Array1<f64>)>,
}

impl CoefficientContext {
    /// Context carrying only the output dimension.
    pub fn dimension(p: usize) -> Self {
        CoefficientContext {
            p,
            ..Default::default()
        }
    }

    /// Adds the orthonormal pair used by angle constructions.
    pub fn with_spike_pair(mut self, v1: Array1<f64>, v2: Array1<f64>) -> Self {
        self.spike_pair = Some((v1, v2));
        self
    }

    /// Adds the joint single-spike population for least-squares coefficients.
    pub fn with_population(mut self, lambda: f64, v: Array1<f64>) -> Self {
        self.population = Some((lambda, v));
        self
    }
}

/// Builds a coefficient vector of length `ctx.p` from its specification.
///
/// The seed only matters for [`CoefficientSpec::Random`]; fixed
/// constructions ignore it.
pub fn make_beta(
    spec: &CoefficientSpec,
    ctx: &CoefficientContext,
    seed: u64,
) -> Result<Array1<f64>> {
    if ctx.p == 0 {
        return Err(Error::InvalidSpec("make_beta: p = 0".to_string()));
    }
    match spec {
        CoefficientSpec::Fixed(FixedCoefficient::AngleToSpike { tau0 }) => {
            if tau0.is_nan() || *tau0 < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "AngleToSpike: tau0 must be nonnegative, got {tau0}"
                )));
            }
            let (v1, v2) = ctx.spike_pair.as_ref().ok_or_else(|| {
                Error::InvalidSpec(
                    "AngleToSpike requires two orthonormal directions in the context".to_string(),
                )
            })?;
            if v1.len() != ctx.p || v2.len() != ctx.p {
                return Err(Error::InvalidSpec(format!(
                    "AngleToSpike: directions have lengths {} and {} but p = {}",
                    v1.len(),
                    v2.len(),
                    ctx.p
                )));
            }
            let ortho = v1.dot(v2).abs() <= ORTHO_TOL
                && (v1.dot(v1) - 1.0).abs() <= ORTHO_TOL
                && (v2.dot(v2) - 1.0).abs() <= ORTHO_TOL;
            if !ortho {
                return Err(Error::InvalidSpec(
                    "AngleToSpike: directions must be orthonormal".to_string(),
                ));
            }
            let a = 1.0 - (ctx.p as f64).powf(-tau0);
            let b = (1.0 - a * a).max(0.0).sqrt();
            Ok(v1 * a + &(v2 * b))
        }
        CoefficientSpec::Fixed(FixedCoefficient::Explicit { vector, norm_bound }) => {
            if vector.len() != ctx.p {
                return Err(Error::InvalidSpec(format!(
                    "Explicit: vector has length {} but p = {}",
                    vector.len(),
                    ctx.p
                )));
            }
            if vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidSpec(
                    "Explicit: vector has non-finite entries".to_string(),
                ));
            }
            let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > norm_bound + 1e-12 {
                return Err(Error::InvalidSpec(format!(
                    "Explicit: norm {norm} exceeds the bound {norm_bound}"
                )));
            }
            Ok(Array1::from_vec(vector.clone()))
        }
        CoefficientSpec::Fixed(FixedCoefficient::PopulationLeastSquares) => {
            let (lambda, v) = ctx.population.as_ref().ok_or_else(|| {
                Error::InvalidSpec(
                    "PopulationLeastSquares requires a single-spike population in the context"
                        .to_string(),
                )
            })?;
            if v.len() != ctx.p + 1 {
                return Err(Error::InvalidSpec(format!(
                    "PopulationLeastSquares: joint direction has length {} but p + 1 = {}",
                    v.len(),
                    ctx.p + 1
                )));
            }
            if !lambda.is_finite() || *lambda <= 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "PopulationLeastSquares: lambda must be positive, got {lambda}"
                )));
            }
            // For Sigma = I + lambda v v^T partitioned into the first
            // coordinate against the rest, Sherman-Morrison gives
            // beta = lambda v(1) / (1 + lambda ||v_rest||^2) * v_rest.
            let v1 = v[0];
            let rest = v.slice(ndarray::s![1..]).to_owned();
            let denom = 1.0 + lambda * rest.dot(&rest);
            Ok(rest * (lambda * v1 / denom))
        }
        CoefficientSpec::Random { sigma2, kind } => {
            if !sigma2.is_finite() || *sigma2 < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "Random: sigma2 must be finite and nonnegative, got {sigma2}"
                )));
            }
            let scale = (sigma2 / ctx.p as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut beta = Array1::zeros(ctx.p);
            match kind {
                RandomKind::Gaussian => {
                    for x in beta.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *x = scale * z;
                    }
                }
                RandomKind::Rademacher => {
                    for x in beta.iter_mut() {
                        *x = if rng.gen::<f64>() < 0.5 {
                            scale
                        } else {
                            -scale
                        };
                    }
                }
            }
            Ok(beta)
        }
    }
}

/// Draws the outcome `Y = A delta + W beta + eps` with
/// `eps ~ N(0, sigma_y^2 I)`. Local alternatives enter through
/// `delta = h / sqrt(n)`.
pub fn gen_outcome(
    a: &Array1<f64>,
    w: &Array2<f64>,
    beta: &Array1<f64>,
    delta: f64,
    sigma_y: f64,
    seed: u64,
) -> Result<Array1<f64>> {
    if a.len() != w.nrows() || beta.len() != w.ncols() {
        return Err(Error::InvalidInput(format!(
            "gen_outcome: A has length {}, beta has length {}, W is {}x{}",
            a.len(),
            beta.len(),
            w.nrows(),
            w.ncols()
        )));
    }
    if !delta.is_finite() {
        return Err(Error::InvalidInput(format!(
            "gen_outcome: delta must be finite, got {delta}"
        )));
    }
    if !sigma_y.is_finite() || sigma_y < 0.0 {
        return Err(Error::InvalidInput(format!(
            "gen_outcome: sigma_y must be finite and nonnegative, got {sigma_y}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = linalg::matvec(&w.view(), false, &beta.view());
    for (yi, &ai) in y.iter_mut().zip(a.iter()) {
        let eps: f64 = rng.sample(StandardNormal);
        *yi += delta * ai + sigma_y * eps;
    }
    Ok(y)
}

/// Squared-norm distance from a vector to a subspace:
/// `d(beta, V) = 1 - ||P_V beta||^2 / ||beta||^2`, in `[0, 1]`.
pub fn subspace_distance(beta: &Array1<f64>, basis: &Array2<f64>) -> Result<f64> {
    let norm2 = beta.dot(beta);
    if norm2 <= 0.0 {
        return Err(Error::InvalidInput(
            "subspace_distance: beta must be nonzero".to_string(),
        ));
    }
    let resid = linalg::residualize(beta, basis)?;
    Ok((resid.dot(&resid) / norm2).clamp(0.0, 1.0))
}

/// One simulated draw of the full observational model.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Covariate matrix, `n x p`.
    pub w: Array2<f64>,
    /// Exposure vector of length `n`.
    pub a: Array1<f64>,
    /// Outcome vector of length `n`.
    pub y: Array1<f64>,
    /// The coefficient on the exposure used during generation.
    pub true_delta: f64,
    /// The coefficient vector on the covariates used during generation.
    pub beta: Array1<f64>,
    /// The exposure-model coefficient, when the exposure depends on `W`.
    pub theta: Option<Array1<f64>>,
    /// Seed the draws were derived from.
    pub rng_seed: u64,
}

impl Dataset {
    /// Bundles generated pieces, checking dimensional consistency.
    pub fn new(
        w: Array2<f64>,
        a: Array1<f64>,
        y: Array1<f64>,
        true_delta: f64,
        beta: Array1<f64>,
        theta: Option<Array1<f64>>,
        rng_seed: u64,
    ) -> Result<Self> {
        let n = w.nrows();
        let p = w.ncols();
        if a.len() != n || y.len() != n || beta.len() != p {
            return Err(Error::InvalidInput(format!(
                "Dataset: inconsistent dimensions (W {n}x{p}, A {}, Y {}, beta {})",
                a.len(),
                y.len(),
                beta.len()
            )));
        }
        if let Some(t) = &theta {
            if t.len() != p {
                return Err(Error::InvalidInput(format!(
                    "Dataset: theta has length {} but p = {p}",
                    t.len()
                )));
            }
        }
        Ok(Dataset {
            w,
            a,
            y,
            true_delta,
            beta,
            theta,
            rng_seed,
        })
    }
}

/// A uniformly random unit vector, drawn as a normalized standard Gaussian.
pub fn random_unit_vector(p: usize, seed: u64) -> Result<Array1<f64>> {
    if p == 0 {
        return Err(Error::InvalidInput("random_unit_vector: p = 0".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut v = Array1::zeros(p);
        for x in v.iter_mut() {
            *x = rng.sample::<f64, _>(StandardNormal);
        }
        let norm = v.dot(&v).sqrt();
        // A fresh Gaussian vector is numerically zero with probability zero;
        // redrawing keeps the function total without biasing the law.
        if norm > 1e-150 {
            return Ok(v / norm);
        }
    }
}

/// Deterministic unit vector orthogonal to `v1`: the coordinate axis where
/// `v1` is smallest in magnitude (ties toward the lowest index), with the
/// `v1` component projected out and the result normalized.
pub fn complete_orthonormal_pair(v1: &Array1<f64>) -> Result<Array1<f64>> {
    let p = v1.len();
    if p < 2 {
        return Err(Error::InvalidInput(
            "complete_orthonormal_pair: need p >= 2".to_string(),
        ));
    }
    if (v1.dot(v1) - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput(
            "complete_orthonormal_pair: v1 must be a unit vector".to_string(),
        ));
    }
    let mut arg = 0usize;
    let mut best = f64::INFINITY;
    for (i, &x) in v1.iter().enumerate() {
        if x.abs() < best {
            best = x.abs();
            arg = i;
        }
    }
    let mut v2 = Array1::zeros(p);
    v2[arg] = 1.0;
    let c = v1[arg];
    v2.zip_mut_with(v1, |x, &y| *x -= c * y);
    let norm = v2.dot(&v2).sqrt();
    if norm <= 1e-10 {
        return Err(Error::InvalidInput(
            "complete_orthonormal_pair: v1 spans the chosen axis".to_string(),
        ));
    }
    Ok(v2 / norm)
}
