use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autodiff::{Graph, LossKind, Mode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::stream;
use crate::tensor::{Scalar, Tensor};

/// Share of failed realizations above which a run is rejected.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.1;

/// Points of the automatic grid, not counting the zero.
pub const AUTO_GRID_POINTS: usize = 8;

// the bracketing pre-pass draws from streams disjoint from the grid's
const PREPASS_KEY: u64 = 1 << 40;
/// Realizations per pre-pass point; the pre-pass only places the grid.
const PREPASS_REALIZATIONS: usize = 8;

/// Returns a copy of `model` with `N(0, sigma^2)` noise added to every conv
/// filter (xUnit branch convs included). Biases, batch-norm affine parameters
/// and the linear classifier keep their values.
pub fn perturb_parameters<T: Scalar, R: Rng>(
    model: &Model<T>,
    sigma: f64,
    rng: &mut R,
) -> Result<Model<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "perturbation sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if perturbed_count(model) == 0 {
        return Err(Error::invalid(
            "model has no convolution filters to perturb",
        ));
    }
    let mut out = model.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for (_, p) in out.param_values_mut() {
        if p.kind.is_conv_filter() {
            for v in p.value.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += T::lit(sigma * z);
            }
        }
    }
    Ok(out)
}

/// Number of scalars [`perturb_parameters`] touches.
pub fn perturbed_count<T: Scalar>(model: &Model<T>) -> usize {
    model
        .params()
        .values()
        .filter(|p| p.kind.is_conv_filter())
        .map(|p| p.value.numel())
        .sum()
}

/// A deterministic loss that can be evaluated at random perturbations of its
/// reference point.
pub trait LossSurface: Sync {
    /// Loss at the unperturbed point.
    fn base_loss(&self) -> Result<f64>;

    /// Loss after one perturbation of scale `sigma` drawn from `rng`.
    fn perturbed_loss(&self, sigma: f64, rng: &mut ChaCha8Rng) -> Result<f64>;

    /// Dimension of the perturbed subspace.
    fn perturbed_dim(&self) -> usize;
}

/// Loss of a network over fixed, pre-batched data, in eval mode.
#[derive(Clone, Debug)]
pub struct ModelLoss<T> {
    model: Model<T>,
    batches: Vec<(Tensor<T>, Tensor<T>)>,
    kind: LossKind,
}

impl<T: Scalar> ModelLoss<T> {
    pub fn new(
        model: &Model<T>,
        batches: Vec<(Tensor<T>, Tensor<T>)>,
        kind: LossKind,
    ) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::Data("probe needs at least one batch".into()));
        }
        let mut model = model.clone();
        model.set_mode(Mode::Eval);
        Ok(Self {
            model,
            batches,
            kind,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    /// Sample-weighted mean loss of `model` over the batches.
    pub fn loss_of(&self, model: &Model<T>) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for (x, t) in &self.batches {
            let out = model.predict(x)?;
            let mut g = Graph::new();
            let o = g.input(out);
            let l = g.loss(self.kind, o, t)?;
            let b = x.shape()[0];
            sum += g.value(l).data()[0].as_f64() * b as f64;
            n += b;
        }
        Ok(sum / n as f64)
    }
}

impl<T: Scalar> LossSurface for ModelLoss<T> {
    fn base_loss(&self) -> Result<f64> {
        self.loss_of(&self.model)
    }

    fn perturbed_loss(&self, sigma: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.loss_of(&perturb_parameters(&self.model, sigma, rng)?)
    }

    fn perturbed_dim(&self) -> usize {
        perturbed_count(&self.model)
    }
}

/// `L(theta) = l0 + 1/2 sum_i a_i (theta_i - theta0_i)^2`, whose Hessian trace is `sum a_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticLoss {
    pub l0: f64,
    pub diag: Vec<f64>,
}

impl QuadraticLoss {
    /// `diag(1, 2, 3)` around a loss of 1: trace 6.
    pub fn fixture() -> Self {
        Self {
            l0: 1.0,
            diag: vec![1.0, 2.0, 3.0],
        }
    }

    pub fn trace(&self) -> f64 {
        self.diag.iter().sum()
    }
}

impl LossSurface for QuadraticLoss {
    fn base_loss(&self) -> Result<f64> {
        Ok(self.l0)
    }

    fn perturbed_loss(&self, sigma: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
        let q: f64 = self
            .diag
            .iter()
            .map(|a| {
                let e = sigma * rng.sample::<f64, _>(StandardNormal);
                a * e * e
            })
            .sum();
        Ok(self.l0 + 0.5 * q)
    }

    fn perturbed_dim(&self) -> usize {
        self.diag.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SigmaGrid {
    Explicit(Vec<f64>),
    /// Zero plus log-spaced points between the scales where the mean loss
    /// rises by 1% and by 100% of the base loss.
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub sigma_grid: SigmaGrid,
    pub realizations: usize,
    pub seed: u64,
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.realizations < 2 {
            return Err(Error::config(
                "flatness probing needs at least 2 realizations",
            ));
        }
        if let SigmaGrid::Explicit(g) = &self.sigma_grid {
            validate_grid(g)?;
        }
        Ok(())
    }
}

fn validate_grid(g: &[f64]) -> Result<()> {
    if g.len() < 2 {
        return Err(Error::config(format!(
            "slope fit needs at least 2 sigma values, got {}",
            g.len()
        )));
    }
    if g[0] != 0.0 || !g.windows(2).all(|w| w[0] < w[1]) || !g.iter().all(|s| s.is_finite()) {
        return Err(Error::config(
            "sigma grid must start at 0 and increase strictly",
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaPoint {
    pub sigma: f64,
    pub mean_loss: f64,
    pub std_error: f64,
    /// Realizations that produced a finite loss.
    pub used: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatnessReport {
    pub points: Vec<SigmaPoint>,
    pub base_loss: f64,
    /// Least-squares slope of `mean_loss - base_loss` against `sigma^2`.
    pub slope: f64,
    pub trace_estimate: f64,
    pub perturbed_params: usize,
    pub mean_eigenvalue: f64,
    pub realizations: usize,
}

impl FlatnessReport {
    pub const CSV_HEADER: &'static str = "sigma,sigma_sq,mean_loss,std_error,used,excluded";

    pub fn sigma_grid(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.sigma).collect()
    }

    /// Per-sigma rows, then the fitted quantities as `# key=value` lines.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:e},{:e},{:e},{:e},{},{}",
                p.sigma,
                p.sigma * p.sigma,
                p.mean_loss,
                p.std_error,
                p.used,
                p.excluded
            );
        }
        let _ = writeln!(s, "# base_loss={:e}", self.base_loss);
        let _ = writeln!(s, "# slope={:e}", self.slope);
        let _ = writeln!(s, "# trace_estimate={:e}", self.trace_estimate);
        let _ = writeln!(s, "# perturbed_params={}", self.perturbed_params);
        let _ = writeln!(s, "# mean_eigenvalue={:e}", self.mean_eigenvalue);
        let _ = writeln!(s, "# realizations={}", self.realizations);
        s
    }
}

/// Mean and standard error of the finite losses among `n` realizations at
/// `sigma`. Realization `r` draws from `stream(seed, [key, r])`.
fn sample_point<S: LossSurface + ?Sized>(
    surface: &S,
    sigma: f64,
    n: usize,
    seed: u64,
    key: u64,
) -> Result<SigmaPoint> {
    let losses: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|r| surface.perturbed_loss(sigma, &mut stream(seed, &[key, r as u64])))
        .collect();
    let mut finite = Vec::with_capacity(n);
    for l in losses {
        match l {
            Ok(v) if v.is_finite() => finite.push(v),
            Ok(_) | Err(Error::NonFinite(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let used = finite.len();
    let mean = if used == 0 {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / used as f64
    };
    let std_error = if used < 2 {
        f64::NAN
    } else {
        let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (used - 1) as f64;
        (var / used as f64).sqrt()
    };
    Ok(SigmaPoint {
        sigma,
        mean_loss: mean,
        std_error,
        used,
        excluded: n - used,
    })
}

/// Least-squares slope through the fixed point `(0, base)`.
pub fn pinned_slope(xs: &[f64], ys: &[f64], base: f64) -> f64 {
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| x * (y - base)).sum();
    let den: f64 = xs.iter().map(|x| x * x).sum();
    num / den
}

/// Brackets the scales at which a short pre-pass sees the mean loss rise by
/// 1% and 100% of the base loss, and spaces [`AUTO_GRID_POINTS`] between them.
pub fn auto_sigma_grid<S: LossSurface + ?Sized>(
    surface: &S,
    realizations: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let base = surface.base_loss()?;
    let scale = if base.abs() > 0.0 { base.abs() } else { 1.0 };
    let n = realizations.clamp(2, PREPASS_REALIZATIONS);
    let mut calls = 0u64;
    let mut rise = |sigma: f64| -> Result<f64> {
        calls += 1;
        let p = sample_point(surface, sigma, n, seed, PREPASS_KEY + calls)?;
        // a blown-up loss counts as an unbounded rise
        Ok(if p.used * 2 < n {
            f64::INFINITY
        } else {
            (p.mean_loss - base) / scale
        })
    };
    let mut find = |target: f64, start: f64| -> Result<f64> {
        let mut s = start;
        let mut r = rise(s)?;
        let mut steps = 0;
        while r < target && steps < 60 {
            s *= 2.0;
            r = rise(s)?;
            steps += 1;
        }
        if r < target {
            return Err(Error::invalid(
                "loss does not respond to perturbations; cannot choose a sigma grid",
            ));
        }
        while r > target && steps < 120 {
            s /= 2.0;
            r = rise(s)?;
            steps += 1;
        }
        // now rise(s) <= target < rise(2s); bisect in log space
        let (mut lo, mut hi) = (s, 2.0 * s);
        for _ in 0..3 {
            let mid = (lo * hi).sqrt();
            if rise(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((lo * hi).sqrt())
    };
    let hi = find(1.0, 1e-3)?;
    let lo = find(0.01, hi / 10.0)?.min(hi / 2.0);
    if !(lo > 0.0 && hi.is_finite()) {
        return Err(Error::invalid("could not bracket a perturbation scale"));
    }
    let mut grid = vec![0.0];
    let k = AUTO_GRID_POINTS - 1;
    grid.extend((0..=k).map(|i| lo * (hi / lo).powf(i as f64 / k as f64)));
    Ok(grid)
}

/// Perturb-and-fit estimate of the Hessian trace: `E[L] = L0 + tr(H)/2 sigma^2`,
/// so twice the fitted slope against `sigma^2` estimates the trace.
pub fn estimate_flatness<S: LossSurface + ?Sized>(
    surface: &S,
    cfg: &PerturbationConfig,
) -> Result<FlatnessReport> {
    cfg.validate()?;
    let grid = match &cfg.sigma_grid {
        SigmaGrid::Explicit(g) => g.clone(),
        SigmaGrid::Auto => auto_sigma_grid(surface, cfg.realizations, cfg.seed)?,
    };
    validate_grid(&grid)?;
    let base = surface.base_loss()?;
    if !base.is_finite() {
        return Err(Error::NonFinite("unperturbed loss".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for (i, &sigma) in grid.iter().enumerate() {
        if sigma == 0.0 {
            // every realization at zero is the base point itself; one evaluation
            // through the perturbation path guards against hidden nondeterminism
            let again = surface.perturbed_loss(0.0, &mut stream(cfg.seed, &[i as u64, 0]))?;
            if again.to_bits() != base.to_bits() {
                return Err(Error::invalid(format!(
                    "loss evaluation is not deterministic ({base} vs {again})"
                )));
            }
            points.push(SigmaPoint {
                sigma,
                mean_loss: base,
                std_error: 0.0,
                used: cfg.realizations,
                excluded: 0,
            });
        } else {
            points.push(sample_point(
                surface,
                sigma,
                cfg.realizations,
                cfg.seed,
                i as u64,
            )?);
        }
    }
    let total = cfg.realizations * points.len();
    let excluded: usize = points.iter().map(|p| p.excluded).sum();
    if excluded as f64 > MAX_EXCLUDED_FRACTION * total as f64 {
        return Err(Error::NonFinite(format!(
            "{excluded} of {total} perturbed losses were not finite"
        )));
    }
    let fit: Vec<&SigmaPoint> = points.iter().filter(|p| p.used > 0).collect();
    let xs: Vec<f64> = fit.iter().map(|p| p.sigma * p.sigma).collect();
    let ys: Vec<f64> = fit.iter().map(|p| p.mean_loss).collect();
    let slope = pinned_slope(&xs, &ys, base);
    let trace = 2.0 * slope;
    if !trace.is_finite() {
        return Err(Error::NonFinite("trace estimate".into()));
    }
    let n_p = surface.perturbed_dim();
    Ok(FlatnessReport {
        points,
        base_loss: base,
        slope,
        trace_estimate: trace,
        perturbed_params: n_p,
        mean_eigenvalue: trace / n_p as f64,
        realizations: cfg.realizations,
    })
}

/// Samples `q(t) = L0 + mean_eigenvalue t^2 / 2` at `points` evenly spaced
/// values of `t` in `[-t_max, t_max]`.
pub fn quadratic_profile(report: &FlatnessReport, t_max: f64, points: usize) -> Vec<(f64, f64)> {
    let q = |t: f64| report.base_loss + 0.5 * report.mean_eigenvalue * t * t;
    match points {
        0 => vec![],
        1 => vec![(0.0, q(0.0))],
        _ => (0..points)
            .map(|i| {
                let t = -t_max + 2.0 * t_max * i as f64 / (points - 1) as f64;
                (t, q(t))
            })
            .collect(),
    }
}

pub fn profile_csv(profile: &[(f64, f64)]) -> String {
    let mut s = String::from("t,loss\n");
    for (t, q) in profile {
        let _ = writeln!(s, "{t:e},{q:e}");
    }
    s
}
