use hmc_colloc::collocation::{
    chain_solve, solve_first_order, solve_kth_order, KthOrderProblem, OdeProblem, SolverOptions,
};
use hmc_colloc::densities::{max_row_nnz_outer, tau};
use hmc_colloc::diagnostics::{
    contraction_experiment, derivative_bound_check, moment_check_runs, reference_solve, ContractionOptions,
    MomentStatus,
};
use hmc_colloc::hmc::{chain_rng, config_with_forced_step, config_with_step, sample_chains, step_size_cap};
use hmc_colloc::linalg::symmetric_eigenvalues;
use hmc_colloc::basis::CERTIFIED_GAMMA;
use hmc_colloc::{CollocationBasis, DenseMatrix, GammaPolicy, QuadraticDensity};
use rand::Rng;

use super::Flags;
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::report::{write_summary, Summary};

/// Outcome of one check in the bundle.
pub struct Check {
    pub name: &'static str,
    /// Counted toward the exit status.
    pub hard: bool,
    pub pass: bool,
    pub details: Summary,
}

impl Check {
    fn new(name: &'static str, pass: bool, details: Summary) -> Self {
        Self {
            name,
            hard: true,
            pass,
            details,
        }
    }

    fn informational(mut self) -> Self {
        self.hard = false;
        self
    }
}

/// Desk-scale verification bundle; `Err(ChecksFailed)` carries the exit status
/// when a hard check fails, after the report has been emitted.
pub fn run(cfg: &ExperimentConfig, flags: &Flags) -> Result<(Summary, Vec<Check>), CliError> {
    let mut checks = vec![
        collocation_exp()?,
        collocation_oscillator()?,
        fixed_point_contraction()?,
        collocation_vs_reference()?,
        basis_gamma(cfg.verify.basis_max_degree, cfg.verify.basis_max_pieces)?,
        hmc_contraction(cfg.verify.contraction_trials, cfg.run.seed)?,
        derivative_bounds()?,
        tau_sandwich(cfg.run.seed)?,
    ];
    if flags.negative_controls {
        checks.push(negative_first_order()?);
        checks.push(negative_kth_order()?);
        checks.push(negative_step_cap()?);
        checks.push(negative_forced_step_bias(cfg.verify.bias_chains, cfg.run.seed)?);
    }
    let hard: Vec<&Check> = checks.iter().filter(|c| c.hard).collect();
    let failed = hard.iter().filter(|c| !c.pass).count();
    let mut s = Summary::new();
    s.put("command", "verify")
        .put("seed", cfg.run.seed)
        .put("negative_controls", flags.negative_controls)
        .put("hard_checks", hard.len())
        .put("failed", failed)
        .put("status", if failed == 0 { "pass" } else { "fail" });
    for c in &checks {
        let mut d = c.details.clone();
        d.put("pass", c.pass).put("hard", c.hard);
        s.nest(c.name, d);
    }
    if let Some(dir) = flags.output_dir()? {
        write_summary(&dir, &s, flags.json)?;
    }
    Ok((s, checks))
}

fn endpoint_error_summary(err: f64, bound: f64, gamma: f64) -> Summary {
    let mut d = Summary::new();
    d.num("error", err).num("bound", bound).num("gamma_measured", gamma).num("ratio", err / bound);
    d
}

/// `x′ = x` on `[0, 1/4]`, one degree-8 piece: error ≤ 20 γ ε.
fn collocation_exp() -> Result<Check, CliError> {
    let eps = 1e-6;
    let p = OdeProblem::new(|x: &[f64], _t, o: &mut [f64]| o[0] = x[0], vec![1.0], 0.25, 1.0)?;
    let b = CollocationBasis::single(0.0, 0.25, 8)?;
    let sol = solve_first_order(&p, &b, eps, &SolverOptions::measured())?;
    let err = (sol.end_value()?[0] - 0.25f64.exp()).abs();
    let bound = 20.0 * sol.gamma * eps;
    Ok(Check::new("collocation_exp", err <= bound, endpoint_error_summary(err, bound, sol.gamma)))
}

/// `x″ = −x` chained to `T = 1`.
fn collocation_oscillator() -> Result<Check, CliError> {
    let eps = 1e-6;
    let p = KthOrderProblem::new(
        |y: &[f64], _t, o: &mut [f64]| o[0] = -y[1],
        vec![vec![1.0], vec![0.0]],
        1.0,
        vec![0.0, 1.0],
    )?;
    let template = CollocationBasis::single(0.0, 1.0, 8)?;
    let sol = chain_solve(&p, 1.0, &template, eps, &SolverOptions::measured())?;
    let end = sol.end_derivatives()?;
    let err = (end[0][0] - 1f64.cos()).abs().max((end[1][0] + 1f64.sin()).abs());
    let gamma = template.measured_gamma();
    let bound = 20.0 * gamma * eps;
    let mut d = endpoint_error_summary(err, bound, gamma);
    d.put("segments", sol.segments().len());
    Ok(Check::new("collocation_oscillator", err <= bound, d))
}

/// `x′ = −λx` with `γλT = 1/2`: displacement ratios ≤ γλT + 0.05.
fn fixed_point_contraction() -> Result<Check, CliError> {
    let t = 0.25;
    let b = CollocationBasis::single(0.0, t, 8)?;
    let gamma = b.measured_gamma();
    let rho = 0.5;
    let lambda = rho / (gamma * t);
    let p = OdeProblem::new(move |x: &[f64], _t, o: &mut [f64]| o[0] = -lambda * x[0], vec![1.0], t, lambda)?;
    let sol = solve_first_order(&p, &b, 1e-15, &SolverOptions::measured())?;
    let ratio = contraction_ratio(&sol.displacements);
    let mut d = Summary::new();
    d.num("rho", rho)
        .num("max_ratio", ratio)
        .num("bound", rho + 0.05)
        .put("sweeps", sol.iterations_used);
    Ok(Check::new("fixed_point_contraction", ratio <= rho + 0.05, d))
}

/// Largest ratio of successive displacements above the round-off floor.
pub fn contraction_ratio(displacements: &[f64]) -> f64 {
    let floor = 1e-13 * displacements.first().copied().unwrap_or(0.0);
    displacements
        .windows(2)
        .filter(|w| w[1] > floor)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max)
}

/// `x′ = −x³ + sin t` against the adaptive reference.
fn collocation_vs_reference() -> Result<Check, CliError> {
    let eps = 1e-8;
    let t = 0.1;
    // |∂F/∂x| = 3x² ≤ 3 while |x| ≤ 1
    let p = OdeProblem::new(|x: &[f64], t, o: &mut [f64]| o[0] = -x[0].powi(3) + t.sin(), vec![0.8], t, 3.0)?;
    let b = CollocationBasis::single(0.0, t, 8)?;
    let sol = solve_first_order(&p, &b, eps, &SolverOptions::measured())?;
    let reference = reference_solve(&p, &[t])?;
    let err = (sol.end_value()?[0] - reference.end_state()[0]).abs();
    let bound = 20.0 * sol.gamma * eps + 10.0 * reference.tolerance;
    Ok(Check::new(
        "collocation_vs_reference",
        err <= bound,
        endpoint_error_summary(err, bound, sol.gamma),
    ))
}

fn basis_gamma(max_degree: usize, max_pieces: usize) -> Result<Check, CliError> {
    let mut worst = 0.0f64;
    let mut count = 0;
    for degree in 0..=max_degree {
        let mut pieces = 1;
        while pieces <= max_pieces {
            let b = CollocationBasis::uniform(0.0, 1.0, pieces, degree)?;
            worst = worst.max(b.measured_gamma());
            count += 1;
            pieces *= 2;
        }
    }
    let mut d = Summary::new();
    d.put("bases", count).num("max_measured", worst).num("certified", CERTIFIED_GAMMA);
    Ok(Check::new("basis_gamma", worst <= CERTIFIED_GAMMA, d))
}

/// Coupled HMC steps on `diag(1, 4)` at the cap.
fn hmc_contraction(trials: usize, seed: u64) -> Result<Check, CliError> {
    let q = QuadraticDensity::new(vec![1.0, 4.0], vec![0.0, 0.0])?;
    let h = step_size_cap(1.0, 4.0);
    let r = contraction_experiment(&q, h, trials, &ContractionOptions::default(), &mut chain_rng(seed, 0))?;
    let frac = r.within_fraction();
    let mut d = Summary::new();
    d.put("trials", trials)
        .num("h", h)
        .num("ceiling", r.ceiling)
        .num("max_ratio", r.max_ratio())
        .put("violations", r.violations)
        .num("within_fraction", frac);
    Ok(Check::new("hmc_contraction", frac >= 0.99, d))
}

fn derivative_bounds() -> Result<Check, CliError> {
    let mut pass = true;
    let mut d = Summary::new();
    for (key, b) in [("b0", 0.0), ("b05", 0.5)] {
        let r = derivative_bound_check(1.0, b, 1.0, 8)?;
        pass &= r.all_hold();
        d.put(key, r.all_hold());
    }
    d.put("depth", 8);
    Ok(Check::new("derivative_bounds", pass, d))
}

/// `λ_max(AAᵀ) ≤ τ ≤ √s · λ_max(AAᵀ)` on random sparse matrices.
fn tau_sandwich(seed: u64) -> Result<Check, CliError> {
    let mut rng = chain_rng(seed, 1);
    let mut worst_low = f64::INFINITY;
    let mut worst_high = f64::INFINITY;
    let trials = 20;
    for _ in 0..trials {
        let (a, lmax, t, s) = random_sparse_case(&mut rng)?;
        worst_low = worst_low.min(t - lmax * (1.0 - 1e-12));
        worst_high = worst_high.min((s as f64).sqrt() * lmax * (1.0 + 1e-12) - t);
        let _ = a;
    }
    let mut d = Summary::new();
    d.put("matrices", trials).num("min_lower_margin", worst_low).num("min_upper_margin", worst_high);
    Ok(Check::new("tau_sandwich", worst_low >= 0.0 && worst_high >= 0.0, d))
}

/// Random sparse `A` with `λ_max(AAᵀ)`, `τ` and the largest row support of `AAᵀ`.
pub fn random_sparse_case<R: Rng>(rng: &mut R) -> Result<(DenseMatrix<f64>, f64, f64, usize), CliError> {
    let n = rng.random_range(2..=12);
    let d = rng.random_range(1..=8);
    let fill = rng.random_range(0.1..0.6);
    let data: Vec<f64> = (0..n * d)
        .map(|_| if rng.random::<f64>() < fill { rng.random_range(-2.0..2.0) } else { 0.0 })
        .collect();
    let a = DenseMatrix::from_row_major(n, d, data)?;
    let outer = a.outer_gram();
    let lmax = symmetric_eigenvalues(&outer).into_iter().fold(0.0, f64::max);
    Ok((a.clone(), lmax, tau(&a), max_row_nnz_outer(&a)))
}

fn expect_precondition(name: &'static str, result: Result<(), hmc_colloc::Error>) -> Check {
    let mut d = Summary::new();
    let pass = match &result {
        Err(e) if e.is_precondition() => {
            d.put("error", e.to_string());
            true
        }
        Err(e) => {
            d.put("error", e.to_string());
            false
        }
        Ok(()) => {
            d.put("error", "none");
            false
        }
    };
    d.put("expected", "precondition error");
    Check::new(name, pass, d)
}

/// `γLT` at twice the first-order bound under the certified γ.
fn negative_first_order() -> Result<Check, CliError> {
    let t = 2.0 * 0.5 / 2000.0;
    let p = OdeProblem::new(|x: &[f64], _t, o: &mut [f64]| o[0] = x[0], vec![1.0], t, 1.0)?;
    let b = CollocationBasis::single(0.0, t, 8)?;
    let r = solve_first_order(&p, &b, 1e-8, &SolverOptions::default()).map(|_| ());
    Ok(expect_precondition("negative_gamma_lt", r))
}

/// `L·T = 2/16000` for a second-order problem under the certified γ.
fn negative_kth_order() -> Result<Check, CliError> {
    let t = 2.0 / 16000.0;
    let p = KthOrderProblem::new(
        |y: &[f64], _t, o: &mut [f64]| o[0] = -y[1],
        vec![vec![1.0], vec![0.0]],
        t,
        vec![0.0, 1.0],
    )?;
    let b = CollocationBasis::single(0.0, t, 8)?;
    let r = solve_kth_order(&p, &b, 1e-8, &SolverOptions::default()).map(|_| ());
    Ok(expect_precondition("negative_order_two", r))
}

fn negative_step_cap() -> Result<Check, CliError> {
    let q = QuadraticDensity::new(vec![1.0, 4.0], vec![0.0, 0.0])?;
    let r = config_with_step(&q, &[0.0, 0.0], 0.1, 2.0 * step_size_cap(1.0, 4.0)).map(|_| ());
    Ok(expect_precondition("negative_step_cap", r))
}

/// Gaussian moments with the step forced to twice the cap. Reported only.
fn negative_forced_step_bias(chains: usize, seed: u64) -> Result<Check, CliError> {
    let q = QuadraticDensity::new(vec![1.0, 4.0], vec![0.0, 0.0])?;
    let x0 = [3.0, 3.0];
    let cfg = config_with_forced_step(&q, &x0, 0.1, 2.0 * step_size_cap(1.0, 4.0))?
        .with_gamma_policy(GammaPolicy::Measured)
        .with_diagnostics(false)
        .with_seed(seed);
    let runs = sample_chains(&q, &x0, &cfg, chains)?;
    let r = moment_check_runs(&runs, &[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 0.25]])?;
    let detected = r.status == MomentStatus::Fail;
    let mut d = Summary::new();
    d.put("chains", chains)
        .num("h", cfg.h)
        .put("iterations_n", cfg.n_iters)
        .num("max_abs_z", r.max_abs_z())
        .put("bias_detected", detected);
    Ok(Check::new("negative_forced_step_bias", detected, d).informational())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contraction_ratio_ignores_round_off_tail() {
        let d = [1.0, 0.5, 0.25, 1e-15, 2e-15];
        assert_eq!(contraction_ratio(&d), 0.5);
        assert_eq!(contraction_ratio(&[]), 0.0);
    }

    #[test]
    fn precondition_controls_flip() {
        assert!(negative_first_order().unwrap().pass);
        assert!(negative_kth_order().unwrap().pass);
        assert!(negative_step_cap().unwrap().pass);
        let ok = expect_precondition("x", Ok(()));
        assert!(!ok.pass);
    }

    #[test]
    fn cheap_checks_pass() {
        for c in [
            collocation_exp().unwrap(),
            collocation_oscillator().unwrap(),
            fixed_point_contraction().unwrap(),
            collocation_vs_reference().unwrap(),
            derivative_bounds().unwrap(),
            tau_sandwich(3).unwrap(),
        ] {
            assert!(c.pass, "{} {}", c.name, c.details.to_text());
        }
    }
}
