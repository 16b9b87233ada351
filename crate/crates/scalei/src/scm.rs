//! Latent structural causal models: mechanisms, noise laws, interventional
//! environments, and the linear mixing that produces observations.
//!
//! A model assigns each node a mechanism over its parents and a noise law,
//! combined additively (`z_i = f_i(z_pa) + u_i`) or multiplicatively
//! (`z_i = g_i(z_pa) · u_i` with `g_i > 0`). An environment set holds the
//! observational model plus one single-node intervention per node; samples
//! from every environment pass through one shared mixing map `x = T z`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::Dag;
use crate::linalg;
use crate::seed::{self, Stream};
use crate::{Error, Result};

/// Positivity floor for multiplicative mechanisms.
const MULT_FLOOR: f64 = 0.1;

/// Noise distribution of a single node, parameterized by scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseLaw {
    Gaussian { sigma: f64 },
    Logistic { s: f64 },
}

impl NoiseLaw {
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> f64 {
        match self {
            NoiseLaw::Gaussian { sigma } => {
                Normal::new(0.0, *sigma).expect("positive sigma").sample(rng)
            }
            NoiseLaw::Logistic { s } => {
                // Inverse-CDF sampling keeps the draw to one uniform.
                let p: f64 = rng.gen_range(1e-12..(1.0 - 1e-12));
                s * (p / (1.0 - p)).ln()
            }
        }
    }

    /// Derivative of the log density, `r(u) = (log p)'(u)`.
    pub fn score(&self, u: f64) -> f64 {
        match self {
            NoiseLaw::Gaussian { sigma } => -u / (sigma * sigma),
            NoiseLaw::Logistic { s } => -(u / (2.0 * s)).tanh() / s,
        }
    }

    pub fn log_density(&self, u: f64) -> f64 {
        match self {
            NoiseLaw::Gaussian { sigma } => {
                let z = u / sigma;
                -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            NoiseLaw::Logistic { s } => {
                // log p(u) = -u/s - log s - 2 log(1 + e^{-u/s})
                let t = u / s;
                -t - s.ln() - 2.0 * softplus(-t)
            }
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            NoiseLaw::Gaussian { sigma } => *sigma,
            NoiseLaw::Logistic { s } => *s,
        }
    }

    pub fn scaled(&self, factor: f64) -> NoiseLaw {
        match self {
            NoiseLaw::Gaussian { sigma } => NoiseLaw::Gaussian { sigma: sigma * factor },
            NoiseLaw::Logistic { s } => NoiseLaw::Logistic { s: s * factor },
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A node's assignment as a function of its parent values.
///
/// `Quadratic` and `Nn` act on the augmented vector `φ = (pa_1, .., pa_k, 1)`
/// so a constant offset is built in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Mechanism {
    /// Used by root nodes and perfect interventions.
    Constant { value: f64 },
    Linear { weights: Vec<f64>, bias: f64 },
    /// `f(pa) = φᵀ A φ` with symmetric `A`.
    Quadratic { a: DMatrix<f64> },
    /// One hidden tanh layer: `f(pa) = νᵀ tanh(W φ) + ν₀`.
    Nn {
        w: DMatrix<f64>,
        nu: DVector<f64>,
        nu0: f64,
    },
}

impl Mechanism {
    pub fn arity(&self) -> usize {
        match self {
            Mechanism::Constant { .. } => 0,
            Mechanism::Linear { weights, .. } => weights.len(),
            Mechanism::Quadratic { a } => a.nrows() - 1,
            Mechanism::Nn { w, .. } => w.ncols() - 1,
        }
    }

    pub fn value(&self, pa: &[f64]) -> f64 {
        debug_assert_eq!(pa.len(), self.arity());
        match self {
            Mechanism::Constant { value } => *value,
            Mechanism::Linear { weights, bias } => {
                bias + weights.iter().zip(pa).map(|(w, p)| w * p).sum::<f64>()
            }
            Mechanism::Quadratic { a } => {
                let phi = augmented(pa);
                (phi.transpose() * a * &phi)[(0, 0)]
            }
            Mechanism::Nn { w, nu, nu0 } => {
                let h = (w * augmented(pa)).map(f64::tanh);
                nu.dot(&h) + nu0
            }
        }
    }

    /// Gradient with respect to the parent values.
    pub fn grad(&self, pa: &[f64]) -> Vec<f64> {
        debug_assert_eq!(pa.len(), self.arity());
        match self {
            Mechanism::Constant { .. } => Vec::new(),
            Mechanism::Linear { weights, .. } => weights.clone(),
            Mechanism::Quadratic { a } => {
                let g = 2.0 * a * augmented(pa);
                g.as_slice()[..pa.len()].to_vec()
            }
            Mechanism::Nn { w, nu, .. } => {
                let pre = w * augmented(pa);
                // d tanh = 1 - tanh², applied per hidden unit.
                let mut out = vec![0.0; pa.len()];
                for h in 0..w.nrows() {
                    let d = nu[h] * (1.0 - pre[h].tanh().powi(2));
                    for (k, o) in out.iter_mut().enumerate() {
                        *o += d * w[(h, k)];
                    }
                }
                out
            }
        }
    }
}

fn augmented(pa: &[f64]) -> DVector<f64> {
    let mut phi = DVector::zeros(pa.len() + 1);
    phi.as_mut_slice()[..pa.len()].copy_from_slice(pa);
    phi[pa.len()] = 1.0;
    phi
}

/// How a node combines its mechanism output with its noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationRule {
    Additive,
    Multiplicative,
}

/// Mechanism family used when drawing random models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Linear,
    Quadratic,
    Nn,
}

/// A complete latent model over a DAG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scm {
    dag: Dag,
    mechanisms: Vec<Mechanism>,
    noises: Vec<NoiseLaw>,
    combination: CombinationRule,
}

impl Scm {
    pub fn new(
        dag: Dag,
        mechanisms: Vec<Mechanism>,
        noises: Vec<NoiseLaw>,
        combination: CombinationRule,
    ) -> Result<Scm> {
        if mechanisms.len() != dag.n() || noises.len() != dag.n() {
            return Err(Error::Shape(format!(
                "expected {} mechanisms and noises, got {} and {}",
                dag.n(),
                mechanisms.len(),
                noises.len()
            )));
        }
        for (i, m) in mechanisms.iter().enumerate() {
            let want = dag.parents(i).len();
            // A constant mechanism ignores parents; anything else must match.
            if !matches!(m, Mechanism::Constant { .. }) && m.arity() != want {
                return Err(Error::Shape(format!(
                    "mechanism of node {} has arity {}, parents {}",
                    i + 1,
                    m.arity(),
                    want
                )));
            }
        }
        Ok(Scm {
            dag,
            mechanisms,
            noises,
            combination,
        })
    }

    #[inline]
    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.dag.n()
    }

    #[inline]
    pub fn mechanism(&self, i: usize) -> &Mechanism {
        &self.mechanisms[i]
    }

    #[inline]
    pub fn noise(&self, i: usize) -> &NoiseLaw {
        &self.noises[i]
    }

    #[inline]
    pub fn combination(&self) -> CombinationRule {
        self.combination
    }

    /// Copy with node `target`'s mechanism and noise replaced.
    pub fn with_intervention(
        &self,
        target: usize,
        mechanism: Mechanism,
        noise: NoiseLaw,
    ) -> Result<Scm> {
        if target >= self.n() {
            return Err(Error::Structural(format!(
                "intervention target {} out of range",
                target + 1
            )));
        }
        let mut mechanisms = self.mechanisms.clone();
        let mut noises = self.noises.clone();
        mechanisms[target] = mechanism;
        noises[target] = noise;
        Scm::new(self.dag.clone(), mechanisms, noises, self.combination)
    }

    fn parent_values(&self, i: usize, z: &DVector<f64>) -> Vec<f64> {
        self.dag.parents(i).iter().map(|&p| z[p]).collect()
    }

    /// Mechanism output for node `i` after the combination rule's range
    /// mapping (identity for additive; softplus-with-floor for
    /// multiplicative, so the factor stays positive).
    fn effective_value(&self, i: usize, pa: &[f64]) -> f64 {
        let raw = if matches!(self.mechanisms[i], Mechanism::Constant { .. }) {
            self.mechanisms[i].value(&[])
        } else {
            self.mechanisms[i].value(pa)
        };
        match self.combination {
            CombinationRule::Additive => raw,
            CombinationRule::Multiplicative => softplus(raw) + MULT_FLOOR,
        }
    }

    fn effective_grad(&self, i: usize, pa: &[f64]) -> Vec<f64> {
        if matches!(self.mechanisms[i], Mechanism::Constant { .. }) {
            return vec![0.0; pa.len()];
        }
        let raw_grad = self.mechanisms[i].grad(pa);
        match self.combination {
            CombinationRule::Additive => raw_grad,
            CombinationRule::Multiplicative => {
                let raw = self.mechanisms[i].value(pa);
                let d = sigmoid(raw);
                raw_grad.iter().map(|g| d * g).collect()
            }
        }
    }

    /// Noise value implied by `z` at node `i`.
    fn residual(&self, i: usize, z: &DVector<f64>, pa: &[f64]) -> f64 {
        let f = self.effective_value(i, pa);
        match self.combination {
            CombinationRule::Additive => z[i] - f,
            CombinationRule::Multiplicative => z[i] / f,
        }
    }

    /// Score of the latent joint density, `∇_z log p(z)`.
    pub fn latent_score(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.n() {
            return Err(Error::Shape(format!(
                "score point has {} coordinates, model has {}",
                z.len(),
                self.n()
            )));
        }
        let n = self.n();
        let mut s = DVector::zeros(n);
        for i in 0..n {
            let pa = self.parent_values(i, z);
            let u = self.residual(i, z, &pa);
            let r = self.noises[i].score(u);
            let grad = self.effective_grad(i, &pa);
            match self.combination {
                CombinationRule::Additive => {
                    // Own term: ∂u_i/∂z_i = 1.
                    s[i] += r;
                    for (k, &p) in self.dag.parents(i).iter().enumerate() {
                        s[p] -= grad[k] * r;
                    }
                }
                CombinationRule::Multiplicative => {
                    let f = self.effective_value(i, &pa);
                    s[i] += r / f;
                    // Parent term: -(∂f/∂z_k)/f · (1 + r(u)·u), the extra 1
                    // coming from the log-Jacobian of u = z_i / f.
                    for (k, &p) in self.dag.parents(i).iter().enumerate() {
                        s[p] -= grad[k] / f * (1.0 + r * u);
                    }
                }
            }
        }
        Ok(s)
    }

    /// Log density of the latent joint at `z`.
    pub fn latent_log_density(&self, z: &DVector<f64>) -> Result<f64> {
        if z.len() != self.n() {
            return Err(Error::Shape(format!(
                "density point has {} coordinates, model has {}",
                z.len(),
                self.n()
            )));
        }
        let mut total = 0.0;
        for i in 0..self.n() {
            let pa = self.parent_values(i, z);
            let u = self.residual(i, z, &pa);
            total += self.noises[i].log_density(u);
            if self.combination == CombinationRule::Multiplicative {
                // Change of variables u = z_i / f contributes -log f.
                total -= self.effective_value(i, &pa).ln();
            }
        }
        Ok(total)
    }

    /// Log density of node `i` given its parents, `log p(z_i | z_pa(i))`.
    pub fn conditional_log_density(&self, i: usize, z: &DVector<f64>) -> Result<f64> {
        if z.len() != self.n() {
            return Err(Error::Shape(format!(
                "density point has {} coordinates, model has {}",
                z.len(),
                self.n()
            )));
        }
        let pa = self.parent_values(i, z);
        let u = self.residual(i, z, &pa);
        let mut total = self.noises[i].log_density(u);
        if self.combination == CombinationRule::Multiplicative {
            total -= self.effective_value(i, &pa).ln();
        }
        Ok(total)
    }

    /// Draw `k` samples; row `t` of the result is one latent vector.
    pub fn sample_latent(&self, k: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
        let n = self.n();
        let order = self.dag.topological_order().expect("validated at construction");
        let mut out = DMatrix::zeros(k, n);
        let mut z = DVector::zeros(n);
        for t in 0..k {
            for &i in &order {
                let pa = self.parent_values(i, &z);
                let f = self.effective_value(i, &pa);
                let u = self.noises[i].sample(rng);
                z[i] = match self.combination {
                    CombinationRule::Additive => f + u,
                    CombinationRule::Multiplicative => f * u,
                };
            }
            out.row_mut(t).copy_from_slice(z.as_slice());
        }
        out
    }
}

/// The observational model plus one intervention per node, in environment
/// order: environment `0` is observational, environment `m ≥ 1` intervenes
/// on `targets[m-1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSet {
    envs: Vec<Scm>,
    targets: Vec<usize>,
    hard: bool,
}

impl EnvironmentSet {
    pub fn new(envs: Vec<Scm>, targets: Vec<usize>, hard: bool) -> Result<EnvironmentSet> {
        if envs.is_empty() {
            return Err(Error::Shape("need at least the observational model".into()));
        }
        let n = envs[0].n();
        if envs.len() != n + 1 || targets.len() != n {
            return Err(Error::Shape(format!(
                "expected {} environments and {} targets, got {} and {}",
                n + 1,
                n,
                envs.len(),
                targets.len()
            )));
        }
        let mut seen = vec![false; n];
        for &t in &targets {
            if t >= n || seen[t] {
                return Err(Error::Structural(format!(
                    "targets {:?} are not a permutation of the nodes",
                    targets.iter().map(|v| v + 1).collect::<Vec<_>>()
                )));
            }
            seen[t] = true;
        }
        Ok(EnvironmentSet { envs, targets, hard })
    }

    /// Number of environments, `n + 1`.
    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n(&self) -> usize {
        self.envs[0].n()
    }

    #[inline]
    pub fn env(&self, m: usize) -> &Scm {
        &self.envs[m]
    }

    pub fn observational(&self) -> &Scm {
        &self.envs[0]
    }

    /// Intervened node of environment `m ≥ 1`.
    pub fn target(&self, m: usize) -> usize {
        self.targets[m - 1]
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn is_hard(&self) -> bool {
        self.hard
    }

    pub fn dag(&self) -> &Dag {
        self.envs[0].dag()
    }
}

/// Observation map `x = T z` with `T` of full column rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingMap {
    t: DMatrix<f64>,
}

impl MixingMap {
    pub fn new(t: DMatrix<f64>) -> Result<MixingMap> {
        let (d, n) = t.shape();
        if d < n {
            return Err(Error::Shape(format!(
                "mixing map is {d}×{n}; need at least as many observed as latent"
            )));
        }
        if linalg::rank(&t, 1e-10) < n {
            return Err(Error::Domain("mixing map is column-rank deficient".into()));
        }
        Ok(MixingMap { t })
    }

    /// Standard-normal entries, redrawn until the condition number is at
    /// most `100` so pseudo-inverses stay well behaved.
    pub fn random(d: usize, n: usize, seed: u64) -> Result<MixingMap> {
        if d < n {
            return Err(Error::Shape(format!(
                "cannot mix {n} latents into {d} observed coordinates"
            )));
        }
        let mut rng = seed::rng(seed, Stream::Mixing, 0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for _ in 0..64 {
            let t = DMatrix::from_fn(d, n, |_, _| normal.sample(&mut rng));
            if linalg::rank(&t, 1e-10) == n && linalg::condition_number(&t) <= 100.0 {
                return Ok(MixingMap { t });
            }
        }
        Err(Error::Domain(
            "failed to draw a well-conditioned mixing map".into(),
        ))
    }

    #[inline]
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn observed_dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.t.ncols()
    }

    /// Map row-per-sample latents to row-per-sample observations.
    pub fn mix(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latent samples have {} columns, mixing expects {}",
                z.ncols(),
                self.latent_dim()
            )));
        }
        Ok(z * self.t.transpose())
    }

    pub fn pseudo_inverse(&self) -> Result<DMatrix<f64>> {
        linalg::pinv(&self.t, 1e-12)
    }
}

/// Draw a mechanism of the given family for a node with `arity` parents.
///
/// Parameters are kept away from zero so mechanism gradients, and hence
/// score differences across environments, do not degenerate: linear weights
/// have magnitude at least `0.5`, quadratic forms have eigenvalues of
/// magnitude at least `0.3`, and the network's input block has full rank.
pub fn random_mechanism(kind: MechanismKind, arity: usize, rng: &mut ChaCha12Rng) -> Mechanism {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    match kind {
        MechanismKind::Linear => {
            let weights = (0..arity)
                .map(|_| {
                    let v: f64 = normal.sample(rng);
                    v.signum() * (0.5 + v.abs().min(1.0))
                })
                .collect();
            Mechanism::Linear {
                weights,
                bias: 0.5 * normal.sample(rng),
            }
        }
        MechanismKind::Quadratic => {
            let k = arity + 1;
            let raw = DMatrix::from_fn(k, k, |_, _| 0.5 * normal.sample(rng));
            let sym = 0.5 * (&raw + raw.transpose());
            let eig = sym.symmetric_eigen();
            let mut vals = eig.eigenvalues.clone();
            for v in vals.iter_mut() {
                if v.abs() < 0.3 {
                    *v = if *v >= 0.0 { 0.3 } else { -0.3 };
                }
            }
            let a = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
            Mechanism::Quadratic { a: 0.5 * (&a + a.transpose()) }
        }
        MechanismKind::Nn => {
            let hidden = arity + 2;
            let w = loop {
                let cand = DMatrix::from_fn(hidden, arity + 1, |_, _| normal.sample(rng));
                if arity == 0 || linalg::rank(&cand.columns(0, arity).into_owned(), 1e-8) == arity {
                    break cand;
                }
            };
            let nu = DVector::from_fn(hidden, |_, _| {
                let v: f64 = normal.sample(rng);
                v.signum() * (0.3 + v.abs().min(1.0))
            });
            Mechanism::Nn {
                w,
                nu,
                nu0: 0.5 * normal.sample(rng),
            }
        }
    }
}

fn random_noise(rng: &mut ChaCha12Rng, gaussian: bool) -> NoiseLaw {
    if gaussian {
        NoiseLaw::Gaussian {
            sigma: rng.gen_range(0.8..1.2),
        }
    } else {
        NoiseLaw::Logistic {
            s: rng.gen_range(0.5..0.9),
        }
    }
}

/// Noise-law family used when drawing random models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    Logistic,
    /// Coin flip per node between the two laws.
    Mixed,
}

/// Draw a full model over `dag` with per-node noise from `family`, each law
/// scaled by `noise_scale`.
pub fn random_scm_with_noise(
    dag: &Dag,
    kind: MechanismKind,
    combination: CombinationRule,
    family: NoiseFamily,
    noise_scale: f64,
    seed: u64,
) -> Scm {
    let mut rng = seed::rng(seed, Stream::Mechanisms, 0);
    let mut mechanisms = Vec::with_capacity(dag.n());
    let mut noises = Vec::with_capacity(dag.n());
    for i in 0..dag.n() {
        let arity = dag.parents(i).len();
        if arity == 0 {
            mechanisms.push(Mechanism::Constant {
                value: 0.5 * rng.gen_range(-1.0..1.0),
            });
        } else {
            mechanisms.push(random_mechanism(kind, arity, &mut rng));
        }
        let gaussian = match family {
            NoiseFamily::Gaussian => true,
            NoiseFamily::Logistic => false,
            NoiseFamily::Mixed => rng.gen_bool(0.5),
        };
        noises.push(random_noise(&mut rng, gaussian).scaled(noise_scale));
    }
    Scm::new(dag.clone(), mechanisms, noises, combination).expect("arities match by construction")
}

/// Draw a full model over `dag`. Noise laws alternate by a coin flip per
/// node between Gaussian and logistic unless `all_gaussian` is set.
pub fn random_scm(
    dag: &Dag,
    kind: MechanismKind,
    combination: CombinationRule,
    all_gaussian: bool,
    seed: u64,
) -> Scm {
    let family = if all_gaussian {
        NoiseFamily::Gaussian
    } else {
        NoiseFamily::Mixed
    };
    random_scm_with_noise(dag, kind, combination, family, 1.0, seed)
}

/// Style of the per-node interventions in a generated environment set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionStyle {
    /// Redraw the target's mechanism (same family) and rescale its noise.
    Soft,
    /// Sever the target from its parents: constant mechanism, fresh noise.
    Hard,
}

/// Build the `n + 1` environments over `base`. Targets are a random
/// permutation of the nodes, so environment order carries no information
/// about node identity.
pub fn random_environments(
    base: &Scm,
    kind: MechanismKind,
    style: InterventionStyle,
    seed: u64,
) -> Result<EnvironmentSet> {
    let n = base.n();
    let mut rng = seed::rng(seed, Stream::Mechanisms, 1);
    // Fisher–Yates permutation of intervention targets.
    let mut targets: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        targets.swap(i, j);
    }
    let mut envs = vec![base.clone()];
    for &t in &targets {
        let arity = base.dag().parents(t).len();
        let (mech, noise) = match style {
            InterventionStyle::Hard => (
                Mechanism::Constant { value: 1.0 },
                base.noise(t).scaled(1.5),
            ),
            InterventionStyle::Soft => {
                let mech = if arity == 0 {
                    // Root nodes get a mean shift.
                    Mechanism::Constant {
                        value: base.mechanism(t).value(&[]) + 1.0,
                    }
                } else {
                    random_mechanism(kind, arity, &mut rng)
                };
                (mech, base.noise(t).scaled(rng.gen_range(1.2..1.6)))
            }
        };
        envs.push(base.with_intervention(t, mech, noise)?);
    }
    EnvironmentSet::new(envs, targets, style == InterventionStyle::Hard)
}

/// Draw a base model, its environment set, and a compatible mixing map from
/// one root seed, with independent sub-streams for each piece.
pub fn random_mixing_oracle_parts(
    dag: &Dag,
    kind: MechanismKind,
    combination: CombinationRule,
    style: InterventionStyle,
    d: usize,
    seed: u64,
) -> (EnvironmentSet, MixingMap) {
    let base = random_scm(dag, kind, combination, false, seed);
    let envs = random_environments(&base, kind, style, seed).expect("valid targets");
    let mixing = MixingMap::random(d, dag.n(), seed).expect("d >= n by caller contract");
    (envs, mixing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Central finite difference of the log density — the independent check
    /// that every analytic score matches its density.
    fn fd_score(scm: &Scm, z: &DVector<f64>) -> DVector<f64> {
        let h = 1e-5;
        let n = z.len();
        let mut g = DVector::zeros(n);
        for i in 0..n {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            g[i] = (scm.latent_log_density(&zp).unwrap() - scm.latent_log_density(&zm).unwrap())
                / (2.0 * h);
        }
        g
    }

    fn check_scores(scm: &Scm, seed: u64, points: usize, tol: f64) {
        let mut rng = seed::rng(seed, Stream::Samples, 7);
        let z = scm.sample_latent(points, &mut rng);
        for t in 0..points {
            let zt = DVector::from_row_slice(z.row(t).transpose().as_slice());
            let analytic = scm.latent_score(&zt).unwrap();
            let fd = fd_score(scm, &zt);
            for i in 0..scm.n() {
                assert_relative_eq!(analytic[i], fd[i], epsilon = tol, max_relative = tol);
            }
        }
    }

    #[test]
    fn additive_scores_match_density_gradient() {
        for kind in [MechanismKind::Linear, MechanismKind::Quadratic, MechanismKind::Nn] {
            let scm = random_scm(&Dag::diamond(), kind, CombinationRule::Additive, false, 11);
            check_scores(&scm, 3, 20, 1e-5);
        }
    }

    #[test]
    fn multiplicative_scores_match_density_gradient() {
        for kind in [MechanismKind::Linear, MechanismKind::Quadratic, MechanismKind::Nn] {
            let scm = random_scm(&Dag::triangle(), kind, CombinationRule::Multiplicative, false, 5);
            check_scores(&scm, 9, 20, 1e-5);
        }
    }

    #[test]
    fn intervened_scores_match_density_gradient() {
        let base = random_scm(
            &Dag::diamond(),
            MechanismKind::Quadratic,
            CombinationRule::Additive,
            true,
            2,
        );
        for style in [InterventionStyle::Soft, InterventionStyle::Hard] {
            let envs = random_environments(&base, MechanismKind::Quadratic, style, 13).unwrap();
            for m in 0..envs.len() {
                check_scores(envs.env(m), 21 + m as u64, 10, 1e-5);
            }
        }
    }

    #[test]
    fn mechanism_gradients_match_finite_difference() {
        let mut rng = seed::rng(77, Stream::Mechanisms, 9);
        for kind in [MechanismKind::Linear, MechanismKind::Quadratic, MechanismKind::Nn] {
            let m = random_mechanism(kind, 3, &mut rng);
            let pa = [0.3, -1.1, 0.7];
            let grad = m.grad(&pa);
            let h = 1e-6;
            for k in 0..3 {
                let mut pp = pa;
                let mut pm = pa;
                pp[k] += h;
                pm[k] -= h;
                let fd = (m.value(&pp) - m.value(&pm)) / (2.0 * h);
                assert_relative_eq!(grad[k], fd, epsilon = 1e-6, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn logistic_density_normalizes_and_scores() {
        let law = NoiseLaw::Logistic { s: 0.7 };
        // Trapezoid integral of the density over a wide window.
        let mut total = 0.0;
        let step = 0.01;
        let mut u = -40.0;
        while u < 40.0 {
            total += step * law.log_density(u).exp();
            u += step;
        }
        assert_relative_eq!(total, 1.0, epsilon = 1e-6);
        // Score matches the density derivative.
        let h = 1e-6;
        for &u in &[-2.0, -0.3, 0.0, 0.9, 3.5] {
            let fd = (law.log_density(u + h) - law.log_density(u - h)) / (2.0 * h);
            assert_relative_eq!(law.score(u), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let scm = random_scm(
            &Dag::chain(4),
            MechanismKind::Nn,
            CombinationRule::Additive,
            false,
            42,
        );
        let a = scm.sample_latent(50, &mut seed::rng(1, Stream::Samples, 0));
        let b = scm.sample_latent(50, &mut seed::rng(1, Stream::Samples, 0));
        assert_eq!(a, b);
        let c = scm.sample_latent(50, &mut seed::rng(1, Stream::Samples, 1));
        assert_ne!(a, c);
    }

    #[test]
    fn multiplicative_factors_stay_positive() {
        let scm = random_scm(
            &Dag::triangle(),
            MechanismKind::Quadratic,
            CombinationRule::Multiplicative,
            false,
            3,
        );
        let mut rng = seed::rng(4, Stream::Samples, 0);
        let z = scm.sample_latent(200, &mut rng);
        for t in 0..200 {
            for i in 0..3 {
                let pa: Vec<f64> = scm.dag().parents(i).iter().map(|&p| z[(t, p)]).collect();
                assert!(scm.effective_value(i, &pa) >= MULT_FLOOR);
            }
        }
    }

    #[test]
    fn hard_environment_severs_parents() {
        let base = random_scm(
            &Dag::triangle(),
            MechanismKind::Quadratic,
            CombinationRule::Additive,
            true,
            8,
        );
        let envs =
            random_environments(&base, MechanismKind::Quadratic, InterventionStyle::Hard, 5)
                .unwrap();
        for m in 1..envs.len() {
            let t = envs.target(m);
            let scm = envs.env(m);
            assert!(matches!(scm.mechanism(t), Mechanism::Constant { .. }));
            // Bigger noise scale than the observational law.
            assert!(scm.noise(t).scale() > base.noise(t).scale());
        }
        // Targets form a permutation.
        let mut ts = envs.targets().to_vec();
        ts.sort_unstable();
        assert_eq!(ts, vec![0, 1, 2]);
    }

    #[test]
    fn mixing_map_shapes_and_rank() {
        let t = MixingMap::random(6, 3, 17).unwrap();
        assert_eq!(t.observed_dim(), 6);
        assert_eq!(t.latent_dim(), 3);
        assert!(linalg::condition_number(t.matrix()) <= 100.0);
        let pinv = t.pseudo_inverse().unwrap();
        let prod = &pinv * t.matrix();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(prod[(i, j)], want, epsilon = 1e-10);
            }
        }
        // Rank-deficient map is rejected.
        let bad = DMatrix::from_fn(4, 2, |i, _| i as f64);
        assert!(MixingMap::new(bad).is_err());
        assert!(MixingMap::random(2, 3, 0).is_err());
    }

    #[test]
    fn mix_applies_linear_map_rowwise() {
        let t = MixingMap::new(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]))
            .unwrap();
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let x = t.mix(&z).unwrap();
        assert_eq!(x.nrows(), 2);
        assert_eq!(x.ncols(), 3);
        assert_relative_eq!(x[(0, 2)], 3.0);
        assert_relative_eq!(x[(1, 2)], -0.5);
    }
}
