use hmc_colloc::densities::{degree_for_accuracy, glm_step_plan_with, GlmPlanConstants};
use hmc_colloc::diagnostics::{
    amortized_gradient_monitor, linf_drift_monitor, moment_check_runs, DriftParameters, MomentStatus,
    QuadratureOracle,
};
use hmc_colloc::hmc::{
    config_with_step, default_config, glm_config_from_plan, sample_chains, sample_glm_chains, step_size_cap,
    SamplerMode,
};
use hmc_colloc::linalg::norm2;
use hmc_colloc::{Density, HmcConfig, HmcRun};

use super::solve::vector_or_zeros;
use super::Flags;
use crate::config::{ExperimentConfig, StepSetting};
use crate::error::CliError;
use crate::report::{fmt_f64, write_summary, write_table, Summary};
use crate::target::{log_cosh, Target};

/// Independent chains from the configured start; final samples and per-chain
/// diagnostics.
pub fn run(cfg: &ExperimentConfig, flags: &Flags) -> Result<Summary, CliError> {
    let target = Target::build(&cfg.density)?;
    let density = target.density();
    let d = density.dim();
    let sc = &cfg.sampler;
    let x0 = vector_or_zeros(sc.x0.as_ref(), d, "sampler.x0")?;
    let (m2, big_m2) = (density.m2(), density.big_m2());
    let cap = step_size_cap(m2, big_m2);
    let h = sc.h.map(|s| match s {
        StepSetting::Value(h) => h,
        StepSetting::Named(_) => cap,
    });

    let mut config = match &target {
        Target::Glm(g) => {
            if sc.ode_accuracy.is_some() {
                return Err(CliError::Config(
                    "sampler.ode_accuracy applies to generic densities; use sampler.delta for GLMs".into(),
                ));
            }
            let defaults = GlmPlanConstants::default();
            let constants = GlmPlanConstants {
                c_h: sc.c_h.unwrap_or(defaults.c_h),
                c_delta: sc.c_delta.unwrap_or(defaults.c_delta),
                h_override: h,
            };
            let mut plan = glm_step_plan_with(g, &x0, sc.eps, sc.eta, &constants)?;
            if let Some(delta) = sc.delta {
                plan.delta = delta;
                plan.degree = degree_for_accuracy(delta);
            }
            glm_config_from_plan(g, &x0, plan)?
        }
        _ => {
            if sc.delta.is_some() || sc.c_h.is_some() || sc.c_delta.is_some() {
                return Err(CliError::Config(
                    "sampler.delta, c_h and c_delta apply to GLM densities only".into(),
                ));
            }
            let mut c = match h {
                Some(h) => config_with_step(density, &x0, sc.eps, h)?,
                None => default_config(density, &x0, sc.eps)?,
            };
            if let Some(e) = sc.ode_accuracy {
                c = c.with_ode_accuracy(e);
            }
            c
        }
    };
    if let Some(n) = sc.iterations {
        config = config.with_iterations(n);
    }
    config = config
        .with_seed(cfg.run.seed)
        .with_gamma_policy(sc.gamma_policy.into())
        .with_diagnostics(false);

    let mut s = Summary::new();
    s.put("command", "sample")
        .put("density", target.name())
        .put("dim", d)
        .put("chains", cfg.run.chains)
        .put("seed", cfg.run.seed)
        .nums("x0", &x0);
    echo_config(&mut s, &config, m2, big_m2, cap, sc.gamma_policy.as_str());

    let runs = match &target {
        Target::Glm(g) => sample_glm_chains(g, &x0, &config, cfg.run.chains)?,
        _ => sample_chains(density, &x0, &config, cfg.run.chains)?,
    };
    s.put(
        "solver_iterations",
        runs.iter().map(|r| r.summary.total_solver_iterations).sum::<usize>(),
    )
    .num(
        "max_residual",
        runs.iter().map(|r| r.summary.max_residual).fold(0.0, f64::max),
    )
    .put("max_pieces", runs.iter().map(|r| r.summary.max_pieces).max().unwrap_or(0));

    if let Some((mean, cov)) = target_moments(&target)? {
        let report = moment_check_runs(&runs, &mean, &cov)?;
        let status = match report.status {
            MomentStatus::Pass => "pass",
            MomentStatus::Fail => "fail",
            MomentStatus::InsufficientData => "insufficient_data",
        };
        let mut m = Summary::new();
        m.put("status", status)
            .put("samples", report.samples)
            .num("threshold", report.threshold)
            .num("max_abs_z", report.max_abs_z());
        s.nest("moment_check", m);
    }
    if let Target::Glm(g) = &target {
        let mut params = DriftParameters::for_density(g, config.n_iters, sc.eta);
        params.multiplier = sc.monitor_multiplier;
        let mut worst = (0.0f64, 0.0f64);
        for r in &runs {
            let rep = linf_drift_monitor(r, &params)?;
            if rep.ratio >= worst.1 {
                worst = (rep.observed, rep.ratio);
            }
        }
        let mut m = Summary::new();
        m.num("bound", params.bound())
            .num("max_observed", worst.0)
            .num("max_ratio", worst.1)
            .num("multiplier", params.multiplier);
        s.nest("drift_monitor", m);
    }
    if let Some(f_gap) = objective_gap(density, &x0) {
        let ratio = runs
            .iter()
            .map(|r| amortized_gradient_monitor(r, f_gap, big_m2, sc.monitor_multiplier).ratio)
            .fold(0.0, f64::max);
        let mut m = Summary::new();
        m.num("f_gap", f_gap)
            .num("max_ratio", ratio)
            .num("multiplier", sc.monitor_multiplier);
        s.nest("gradient_monitor", m);
    }

    if let Some(dir) = flags.output_dir()? {
        write_samples(&dir, &runs, d)?;
        write_summary(&dir, &s, flags.json)?;
    }
    Ok(s)
}

fn echo_config(s: &mut Summary, c: &HmcConfig<f64>, m2: f64, big_m2: f64, cap: f64, policy: &str) {
    s.put(
        "mode",
        match c.mode {
            SamplerMode::Generic => "generic",
            SamplerMode::Glm(_) => "glm",
        },
    )
    .num("m2", m2)
    .num("big_m2", big_m2)
    .num("kappa", big_m2 / m2)
    .num("h", c.h)
    .num("h_cap", cap)
    .put("iterations_n", c.n_iters)
    .num("theta", c.theta)
    .num("eps", c.eps)
    .num("eps_bar", c.ode_accuracy)
    .put("gamma_policy", policy);
    if let SamplerMode::Glm(p) = &c.mode {
        s.num("delta", p.delta)
            .put("degree", p.degree)
            .num("eta", p.eta)
            .num("log_term", p.log_term);
    }
}

/// Target mean and covariance where they are available in closed form or by
/// 1-d quadrature.
fn target_moments(target: &Target) -> Result<Option<(Vec<f64>, Vec<Vec<f64>>)>, CliError> {
    let diag = |var: Vec<f64>| -> Vec<Vec<f64>> {
        let d = var.len();
        (0..d)
            .map(|i| (0..d).map(|j| if i == j { var[i] } else { 0.0 }).collect())
            .collect()
    };
    Ok(match target {
        Target::Gaussian(q) => Some((q.mean().to_vec(), diag(q.variances()))),
        Target::Softabs(s) => {
            let d = s.dim();
            let oracle = QuadratureOracle::new(|x| 0.5 * x * x + log_cosh(x), -14.0, 14.0, 560)?;
            Some((vec![0.0; d], diag(vec![oracle.variance(); d])))
        }
        Target::Glm(g) if g.dim() == 1 => {
            let oracle = QuadratureOracle::for_glm_1d(g, 14.0, 560)?;
            Some((vec![oracle.mean()], vec![vec![oracle.variance()]]))
        }
        Target::Glm(_) => None,
    })
}

/// `f(x⁰) − min f` by gradient descent with step `1/M₂`, when values are available.
fn objective_gap(density: &dyn Density<f64>, x0: &[f64]) -> Option<f64> {
    let f0 = density.value(x0)?;
    let step = 1.0 / density.big_m2();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; x.len()];
    for _ in 0..100_000 {
        density.gradient(&x, &mut g);
        if norm2(&g) <= 1e-12 {
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= step * gi;
        }
    }
    Some((f0 - density.value(&x)?).max(0.0))
}

fn write_samples(dir: &std::path::Path, runs: &[HmcRun<f64>], d: usize) -> Result<(), CliError> {
    let mut header = vec!["chain".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    let rows: Vec<Vec<String>> = runs
        .iter()
        .enumerate()
        .map(|(c, r)| {
            std::iter::once(c.to_string())
                .chain(r.final_sample().iter().map(|v| fmt_f64(*v)))
                .collect()
        })
        .collect();
    write_table(&dir.join("samples.tsv"), &header, &rows)?;
    let header: Vec<String> = [
        "chain",
        "iterations",
        "solver_iterations",
        "max_residual",
        "max_pieces",
        "max_drift",
        "mean_gradient_sq",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = runs
        .iter()
        .enumerate()
        .map(|(c, r)| {
            vec![
                c.to_string(),
                r.config.n_iters.to_string(),
                r.summary.total_solver_iterations.to_string(),
                fmt_f64(r.summary.max_residual),
                r.summary.max_pieces.to_string(),
                r.summary.max_drift.map_or_else(|| "NA".to_string(), fmt_f64),
                fmt_f64(r.summary.mean_gradient_sq),
            ]
        })
        .collect();
    write_table(&dir.join("diagnostics.tsv"), &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::EXIT_PRECONDITION;

    fn config(text: &str) -> ExperimentConfig {
        let c = ExperimentConfig::from_toml(text, None).unwrap();
        c.validate().unwrap();
        c
    }

    #[test]
    fn short_gaussian_run_echoes_constants() {
        let c = config(
            "[run]\nchains = 3\nseed = 5\n[density]\ndim = 2\n[sampler]\nh = \"cap\"\niterations = 4\ngamma_policy = \"measured\"",
        );
        let s = run(&c, &Flags::default()).unwrap();
        for key in ["h", "h_cap", "iterations_n", "theta", "eps_bar", "moment_check"] {
            assert!(s.get(key).is_some(), "missing {key}");
        }
        assert_eq!(s.get("h"), s.get("h_cap"));
        assert_eq!(s.get("iterations_n").unwrap().as_u64(), Some(4));
    }

    #[test]
    fn step_above_cap_rejected() {
        let c = config("[sampler]\nh = 5.0");
        let e = run(&c, &Flags::default()).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_PRECONDITION);
        assert!(e.to_string().contains("step-size cap"), "{e}");
    }

    #[test]
    fn glm_only_fields_rejected_for_gaussian() {
        let c = config("[sampler]\ndelta = 0.1");
        assert!(matches!(run(&c, &Flags::default()), Err(CliError::Config(_))));
    }
}
