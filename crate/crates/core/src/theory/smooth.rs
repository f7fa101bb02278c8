//! Differential checks on smooth synthetic games: gradient fields, Jacobians,
//! DSE conditions, contraction constants and timescale selection.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest eigenvalue of the symmetric part of `m`.
pub fn max_sym_eig(m: &Mat) -> f64 {
    sym_eigs(m).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Ascending eigenvalues of `(m + m^T) / 2`.
pub fn sym_eigs(m: &Mat) -> Vec<f64> {
    let s = (m + m.transpose()) * 0.5;
    let mut e: Vec<f64> = s.symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

pub fn is_negative_definite(m: &Mat, tol: f64) -> bool {
    m.nrows() > 0 && max_sym_eig(m) < -tol
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Anything that maps a parameter vector to an update direction.
pub trait Field {
    fn eval(&self, theta: &Vector) -> Vector;
}

impl<F: Fn(&Vector) -> Vector> Field for F {
    fn eval(&self, theta: &Vector) -> Vector {
        self(theta)
    }
}

/// `Omega(theta) = K (theta - center)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearField {
    pub k: Mat,
    pub center: Vector,
}

impl Field for LinearField {
    fn eval(&self, theta: &Vector) -> Vector {
        &self.k * (theta - &self.center)
    }
}

/// Quadratic leader/follower game around `theta_star`. With
/// `e = theta - theta_star` split into the leader block `e_b` and follower
/// blocks `e_i`:
///
/// `J_b = 1/2 e_b' A e_b + e_b' B e_u`
/// `J_i = 1/2 e_i' D_i e_i + e_i' C_i e_b`
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticGame {
    pub leader_dim: usize,
    pub follower_dim: usize,
    pub num_followers: usize,
    pub a: Mat,
    pub b: Mat,
    pub c: Vec<Mat>,
    pub d: Vec<Mat>,
    pub theta_star: Vector,
}

fn random_spd(n: usize, lo: f64, spread: f64, rng: &mut Rng) -> Mat {
    let g = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    (&g * g.transpose()) * (spread / n as f64) + Mat::identity(n, n) * lo
}

fn random_with_norm(r: usize, c: usize, norm: f64, rng: &mut Rng) -> Mat {
    let m = Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    let s = spectral_norm(&m);
    if s == 0.0 {
        m
    } else {
        m * (norm / s)
    }
}

impl QuadraticGame {
    pub fn from_blocks(a: Mat, b: Mat, c: Vec<Mat>, d: Vec<Mat>, theta_star: Vector) -> Result<Self> {
        let nb = a.nrows();
        let i_n = d.len();
        let nu = d.first().map_or(0, |m| m.nrows());
        let ok = a.is_square()
            && c.len() == i_n
            && d.iter().all(|m| m.nrows() == nu && m.ncols() == nu)
            && c.iter().all(|m| m.nrows() == nu && m.ncols() == nb)
            && b.nrows() == nb
            && b.ncols() == i_n * nu
            && theta_star.len() == nb + i_n * nu;
        if !ok {
            return Err(Error::Contract("quadratic game blocks have inconsistent shapes".into()));
        }
        Ok(Self {
            leader_dim: nb,
            follower_dim: nu,
            num_followers: i_n,
            a,
            b,
            c,
            d,
            theta_star,
        })
    }

    /// Random game with Hessians whose eigenvalues are at most `-1`
    /// and coupling blocks `B`, `C_i` of spectral norm `coupling`.
    pub fn random(leader_dim: usize, follower_dim: usize, num_followers: usize, coupling: f64, rng: &mut Rng) -> Self {
        let a = -random_spd(leader_dim, 1.0, 1.0, rng);
        let d = (0..num_followers).map(|_| -random_spd(follower_dim, 1.0, 1.0, rng)).collect();
        let b = random_with_norm(leader_dim, num_followers * follower_dim, coupling, rng);
        let c = (0..num_followers)
            .map(|_| random_with_norm(follower_dim, leader_dim, coupling, rng))
            .collect();
        let n = leader_dim + num_followers * follower_dim;
        let theta_star = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        Self::from_blocks(a, b, c, d, theta_star).expect("shapes are consistent by construction")
    }

    pub fn dim(&self) -> usize {
        self.leader_dim + self.num_followers * self.follower_dim
    }

    fn block(&self, i: usize) -> std::ops::Range<usize> {
        let s = self.leader_dim + i * self.follower_dim;
        s..s + self.follower_dim
    }

    fn dev(&self, theta: &Vector) -> Vector {
        theta - &self.theta_star
    }

    pub fn leader_utility(&self, theta: &Vector) -> f64 {
        let e = self.dev(theta);
        let eb = e.rows(0, self.leader_dim);
        let eu = e.rows(self.leader_dim, e.len() - self.leader_dim);
        0.5 * (eb.transpose() * &self.a * eb)[0] + (eb.transpose() * &self.b * eu)[0]
    }

    pub fn follower_utility(&self, i: usize, theta: &Vector) -> f64 {
        let e = self.dev(theta);
        let eb = e.rows(0, self.leader_dim);
        let r = self.block(i);
        let ei = e.rows(r.start, r.len());
        0.5 * (ei.transpose() * &self.d[i] * ei)[0] + (ei.transpose() * &self.c[i] * eb)[0]
    }

    /// Analytic Jacobian of the gradient field: `[[A, B], [iota C, iota D]]`.
    pub fn jacobian(&self, iota: f64) -> Mat {
        let n = self.dim();
        let nb = self.leader_dim;
        let mut j = Mat::zeros(n, n);
        j.view_mut((0, 0), (nb, nb)).copy_from(&self.a);
        j.view_mut((0, nb), (nb, n - nb)).copy_from(&self.b);
        for i in 0..self.num_followers {
            let r = self.block(i);
            j.view_mut((r.start, 0), (r.len(), nb)).copy_from(&(&self.c[i] * iota));
            j.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&(&self.d[i] * iota));
        }
        j
    }

    pub fn linear_field(&self, iota: f64) -> LinearField {
        LinearField {
            k: self.jacobian(iota),
            center: self.theta_star.clone(),
        }
    }
}

/// How a [`GradientField`] differentiates the utilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FieldMode {
    Analytic,
    CentralDifference { h: f64 },
}

/// `Omega = (grad_b J_b, iota grad_1 J_1, ..., iota grad_I J_I)`.
#[derive(Clone, Debug)]
pub struct GradientField<'a> {
    pub game: &'a QuadraticGame,
    pub iota: f64,
    pub mode: FieldMode,
}

pub fn build_gradient_field(game: &QuadraticGame, iota: f64, mode: FieldMode) -> GradientField<'_> {
    GradientField { game, iota, mode }
}

fn partial(f: impl Fn(&Vector) -> f64, x: &Vector, k: usize, h: f64) -> f64 {
    let mut p = x.clone();
    p[k] += h;
    let up = f(&p);
    p[k] = x[k] - h;
    (up - f(&p)) / (2.0 * h)
}

impl Field for GradientField<'_> {
    fn eval(&self, theta: &Vector) -> Vector {
        let g = self.game;
        match self.mode {
            FieldMode::Analytic => self.game.jacobian(self.iota) * (theta - &g.theta_star),
            FieldMode::CentralDifference { h } => {
                let mut out = Vector::zeros(g.dim());
                for k in 0..g.leader_dim {
                    out[k] = partial(|x| g.leader_utility(x), theta, k, h);
                }
                for i in 0..g.num_followers {
                    for k in g.block(i) {
                        out[k] = self.iota * partial(|x| g.follower_utility(i, x), theta, k, h);
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianEstimate {
    pub j: Mat,
    /// Symmetric part `(J + J^T) / 2`.
    pub m: Mat,
    /// Largest entrywise gap between the estimates at `h` and `2h`.
    pub richardson_gap: f64,
}

fn central_jacobian(field: &dyn Field, x: &Vector, h: f64) -> Mat {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for k in 0..n {
        let mut p = x.clone();
        p[k] += h;
        let up = field.eval(&p);
        p[k] = x[k] - h;
        cols.push((up - field.eval(&p)) / (2.0 * h));
    }
    let rows = cols.first().map_or(0, |c| c.len());
    Mat::from_fn(rows, n, |r, c| cols[c][r])
}

pub fn jacobian_fd(field: &dyn Field, point: &Vector, h: f64) -> Result<JacobianEstimate> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Precondition(format!("finite-difference step must be > 0, got {h}")));
    }
    let j = central_jacobian(field, point, h);
    let j2 = central_jacobian(field, point, 2.0 * h);
    let richardson_gap = (&j - j2).amax();
    let m = (&j + j.transpose()) * 0.5;
    Ok(JacobianEstimate { j, m, richardson_gap })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DseReport {
    pub follower_grad_norm: Vec<f64>,
    pub follower_max_eig: Vec<f64>,
    pub leader_total_grad_norm: f64,
    pub leader_total_max_eig: f64,
    pub first_order: bool,
    pub second_order: bool,
}

impl DseReport {
    pub fn passed(&self) -> bool {
        self.first_order && self.second_order
    }
}

fn hessian_fd(f: &dyn Fn(&Vector) -> f64, x: &Vector, idx: &[usize], h: f64) -> Mat {
    let n = idx.len();
    let mut hm = Mat::zeros(n, n);
    let eval = |di: (usize, f64), dj: (usize, f64)| {
        let mut p = x.clone();
        p[di.0] += di.1;
        p[dj.0] += dj.1;
        f(&p)
    };
    for a in 0..n {
        for b in a..n {
            let (i, j) = (idx[a], idx[b]);
            let v = (eval((i, h), (j, h)) - eval((i, h), (j, -h)) - eval((i, -h), (j, h)) + eval((i, -h), (j, -h))) / (4.0 * h * h);
            hm[(a, b)] = v;
            hm[(b, a)] = v;
        }
    }
    hm
}

/// Followers' joint best response to the leader block of `theta`, by Newton
/// iteration on the stacked follower gradients.
fn best_response(game: &QuadraticGame, theta: &Vector, h: f64) -> Vector {
    let nb = game.leader_dim;
    let nf = game.dim() - nb;
    let grads = |x: &Vector| -> Vector {
        let mut g = Vector::zeros(nf);
        for i in 0..game.num_followers {
            for k in game.block(i) {
                g[k - nb] = partial(|y| game.follower_utility(i, y), x, k, h);
            }
        }
        g
    };
    let mut x = theta.clone();
    for _ in 0..30 {
        let g = grads(&x);
        if g.amax() < 1e-13 {
            break;
        }
        let jf = central_jacobian(&grads, &x, h);
        let jf = jf.columns(nb, nf).into_owned();
        let Some(step) = jf.lu().solve(&g) else { break };
        for k in 0..nf {
            x[nb + k] -= step[k];
        }
    }
    x
}

/// First and second order DSE conditions at `point`. The leader conditions
/// are checked on `J_b(theta_b, BR(theta_b))` by finite differences.
pub fn check_dse(point: &Vector, game: &QuadraticGame, h: f64, grad_tol: f64, nd_tol: f64) -> DseReport {
    let nb = game.leader_dim;
    let mut follower_grad_norm = Vec::new();
    let mut follower_max_eig = Vec::new();
    for i in 0..game.num_followers {
        let r: Vec<usize> = game.block(i).collect();
        let f = |x: &Vector| game.follower_utility(i, x);
        let g = Vector::from_iterator(r.len(), r.iter().map(|&k| partial(f, point, k, h)));
        follower_grad_norm.push(g.norm());
        follower_max_eig.push(max_sym_eig(&hessian_fd(&f, point, &r, 1e-4)));
    }
    let phi = |x: &Vector| game.leader_utility(&best_response(game, x, h));
    let lidx: Vec<usize> = (0..nb).collect();
    let lg = Vector::from_iterator(nb, lidx.iter().map(|&k| partial(phi, point, k, h)));
    let leader_total_max_eig = max_sym_eig(&hessian_fd(&phi, point, &lidx, 1e-4));
    let first_order = lg.norm() < grad_tol && follower_grad_norm.iter().all(|&g| g < grad_tol);
    let second_order = leader_total_max_eig < -nd_tol && follower_max_eig.iter().all(|&e| e < -nd_tol);
    DseReport {
        follower_grad_norm,
        follower_max_eig,
        leader_total_grad_norm: lg.norm(),
        leader_total_max_eig,
        first_order,
        second_order,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub applicable: bool,
    pub max_eig_m: f64,
    pub kappa1: Option<f64>,
    pub kappa2: Option<f64>,
    pub alpha_b: Option<f64>,
    pub rate_bound: Option<f64>,
    /// `||I + alpha_b J||_2^2`.
    pub step_norm_sq: Option<f64>,
    pub spectral_check: Option<bool>,
}

pub fn contraction_analysis(j: &Mat, nd_tol: f64) -> ContractionReport {
    let eigs = sym_eigs(j);
    let max_eig_m = eigs.last().copied().unwrap_or(f64::NAN);
    if !(j.is_square() && max_eig_m < -nd_tol) {
        return ContractionReport {
            applicable: false,
            max_eig_m,
            kappa1: None,
            kappa2: None,
            alpha_b: None,
            rate_bound: None,
            step_norm_sq: None,
            spectral_check: None,
        };
    }
    let kappa1 = -max_eig_m;
    let kappa2 = spectral_norm(j).powi(2);
    let alpha = kappa1 / kappa2;
    let bound_sq = (1.0 - kappa1 * kappa1 / kappa2).max(0.0);
    let step = Mat::identity(j.nrows(), j.ncols()) + j * alpha;
    let step_norm_sq = spectral_norm(&step).powi(2);
    ContractionReport {
        applicable: true,
        max_eig_m,
        kappa1: Some(kappa1),
        kappa2: Some(kappa2),
        alpha_b: Some(alpha),
        rate_bound: Some(bound_sq.sqrt()),
        step_norm_sq: Some(step_norm_sq),
        spectral_check: Some(step_norm_sq <= bound_sq + 1e-10),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchurReport {
    /// `||B||^2 / (sigma_min(-A) sigma_min(-D))`; any larger `iota_u` works.
    pub threshold: f64,
    pub iota: f64,
    /// Largest eigenvalue of `[[A, B], [B', iota D]]`.
    pub max_eig: f64,
    pub certified: bool,
}

/// Smallest timescale ratio that the block inequality certifies, nudged above
/// the threshold by a relative `margin` and never below `floor`.
pub fn schur_timescale(a: &Mat, b: &Mat, d: &Mat, floor: f64, margin: f64, nd_tol: f64) -> Result<SchurReport> {
    if !is_negative_definite(a, nd_tol) {
        return Err(Error::Precondition(format!("A is not negative definite (max eigenvalue {})", max_sym_eig(a))));
    }
    if !is_negative_definite(d, nd_tol) {
        return Err(Error::Precondition(format!("D is not negative definite (max eigenvalue {})", max_sym_eig(d))));
    }
    if b.nrows() != a.nrows() || b.ncols() != d.nrows() {
        return Err(Error::Contract("B must be dim(A) x dim(D)".into()));
    }
    let smin_a = -max_sym_eig(a);
    let smin_d = -max_sym_eig(d);
    let threshold = spectral_norm(b).powi(2) / (smin_a * smin_d);
    let iota = (threshold * (1.0 + margin)).max(floor);
    let max_eig = max_sym_eig(&assemble_m(a, b, d, iota));
    Ok(SchurReport {
        threshold,
        iota,
        max_eig,
        certified: max_eig < -nd_tol,
    })
}

/// `[[A, B], [B', iota D]]`.
pub fn assemble_m(a: &Mat, b: &Mat, d: &Mat, iota: f64) -> Mat {
    let (na, nd) = (a.nrows(), d.nrows());
    let mut m = Mat::zeros(na + nd, na + nd);
    m.view_mut((0, 0), (na, na)).copy_from(a);
    m.view_mut((0, na), (na, nd)).copy_from(b);
    m.view_mut((na, 0), (nd, na)).copy_from(&b.transpose());
    m.view_mut((na, na), (nd, nd)).copy_from(&(d * iota));
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub epochs: usize,
    pub tol: f64,
    /// Consecutive growing steps that count as divergence.
    pub divergence_window: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            tol: 1e-6,
            divergence_window: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// `||theta_e - theta*||` for `e = 0..`; stops early at exact convergence
    /// or divergence.
    pub distances: Vec<f64>,
    pub iterations_to_tol: Option<usize>,
    /// Geometric rate from a least-squares fit of `log distance`.
    pub empirical_rate: Option<f64>,
    pub diverged: bool,
}

impl SimReport {
    pub fn converged(&self) -> bool {
        self.iterations_to_tol.is_some() && !self.diverged
    }

    pub fn final_distance(&self) -> f64 {
        self.distances.last().copied().unwrap_or(f64::NAN)
    }
}

/// Floor below which distances are treated as exact convergence.
const DIST_FLOOR: f64 = 1e-13;

fn fit_rate(d: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = d
        .iter()
        .enumerate()
        .take_while(|(_, &x)| x > DIST_FLOOR)
        .map(|(e, &x)| (e as f64, x.ln()))
        .collect();
    if pts.len() < 2 {
        return (d.len() >= 2 && d[0] > 0.0).then_some(0.0);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some((sxy / sxx).exp())
}

fn iterate(mut step: impl FnMut(&Vector, usize) -> Vector, theta0: &Vector, theta_star: &Vector, cfg: &SimConfig) -> SimReport {
    let mut theta = theta0.clone();
    let mut distances = vec![(&theta - theta_star).norm()];
    let mut iterations_to_tol = (distances[0] < cfg.tol).then_some(0);
    let mut growing = 0;
    let mut diverged = false;
    for e in 0..cfg.epochs {
        let prev = *distances.last().unwrap();
        if prev <= DIST_FLOOR {
            break;
        }
        theta += step(&theta, e);
        let d = (&theta - theta_star).norm();
        distances.push(d);
        if d < cfg.tol && iterations_to_tol.is_none() {
            iterations_to_tol = Some(e + 1);
        }
        growing = if d > prev { growing + 1 } else { 0 };
        if !d.is_finite() || growing >= cfg.divergence_window {
            diverged = true;
            break;
        }
    }
    SimReport {
        empirical_rate: fit_rate(&distances),
        distances,
        iterations_to_tol,
        diverged,
    }
}

/// Iterates `theta <- theta + alpha Omega(theta)`.
pub fn simulate_updates(field: &dyn Field, theta0: &Vector, theta_star: &Vector, alpha: f64, cfg: &SimConfig) -> SimReport {
    iterate(|t, _| field.eval(t) * alpha, theta0, theta_star, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedReport {
    pub support: Vec<usize>,
    pub probs: Vec<f64>,
    pub per_i_max_eig: Vec<f64>,
    pub per_i_certified: Vec<bool>,
    pub average_max_eig: f64,
    pub average_certified: bool,
    pub alpha: f64,
    pub final_distances: Vec<f64>,
    pub converged: Vec<bool>,
}

impl AveragedReport {
    pub fn passed(&self) -> bool {
        self.per_i_certified.iter().all(|&c| c) && self.average_certified && self.converged.iter().all(|&c| c)
    }
}

/// One follower-count realisation: `(I, P(I), field)`.
pub type Realisation = (usize, f64, LinearField);

/// Certifies each `M(theta*, I)` and their `P`-weighted average, then runs
/// the update with `I` redrawn every epoch, once per seed. `alpha` defaults
/// to the smallest per-realisation `kappa1 / kappa2`.
pub fn averaged_dynamics_check(family: &[Realisation], theta0: &Vector, alpha: Option<f64>, seeds: &[u64], cfg: &SimConfig, nd_tol: f64) -> Result<AveragedReport> {
    let Some((_, _, first)) = family.first() else {
        return Err(Error::Precondition("empty follower-count family".into()));
    };
    let n = first.center.len();
    for (i, _, f) in family {
        if f.k.nrows() != n || f.k.ncols() != n || f.center.len() != n {
            return Err(Error::Precondition(format!(
                "realisation I = {i} has parameter dimension {} but I = {} has {n}; shared policies need equal dimensions",
                f.center.len(),
                family[0].0
            )));
        }
        if (&f.center - &first.center).amax() > 1e-12 {
            return Err(Error::Precondition(format!("realisation I = {i} has a different equilibrium")));
        }
    }
    if theta0.len() != n {
        return Err(Error::Precondition(format!("theta0 has dimension {} != {n}", theta0.len())));
    }
    let probs: Vec<f64> = family.iter().map(|r| r.1).collect();
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("P(I) must be a distribution, sums to {total}")));
    }
    let per_i_max_eig: Vec<f64> = family.iter().map(|r| max_sym_eig(&r.2.k)).collect();
    let mut avg = Mat::zeros(n, n);
    for (_, p, f) in family {
        avg += &f.k * *p;
    }
    let average_max_eig = max_sym_eig(&avg);
    let alpha = match alpha {
        Some(a) => a,
        None => family
            .iter()
            .filter_map(|r| contraction_analysis(&r.2.k, nd_tol).alpha_b)
            .fold(f64::INFINITY, f64::min),
    };
    let alpha = if alpha.is_finite() {
        alpha
    } else {
        contraction_analysis(&avg, nd_tol).alpha_b.unwrap_or(0.0)
    };
    let pick = WeightedIndex::new(&probs).map_err(|e| Error::Precondition(format!("P(I): {e}")))?;
    let mut final_distances = Vec::new();
    let mut converged = Vec::new();
    for &seed in seeds {
        let mut rng = Rng::seed_from_u64(seed);
        let rep = iterate(
            |t, _| family[pick.sample(&mut rng)].2.eval(t) * alpha,
            theta0,
            &first.center,
            cfg,
        );
        final_distances.push(rep.final_distance());
        converged.push(rep.converged());
    }
    Ok(AveragedReport {
        support: family.iter().map(|r| r.0).collect(),
        probs,
        per_i_certified: per_i_max_eig.iter().map(|&e| e < -nd_tol).collect(),
        per_i_max_eig,
        average_max_eig,
        average_certified: average_max_eig < -nd_tol,
        alpha,
        final_distances,
        converged,
    })
}
