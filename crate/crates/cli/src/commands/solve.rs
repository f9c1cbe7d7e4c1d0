use hmc_colloc::collocation::{
    chain_solve_segments, check_step_size, segment_count, KthOrderProblem, NormKind, SolverOptions,
};
use hmc_colloc::diagnostics::reference_solve_kth;
use hmc_colloc::{CollocationBasis, GammaPolicy};

use super::Flags;
use crate::config::{ExperimentConfig, OdeName};
use crate::error::CliError;
use crate::report::{fmt_f64, write_summary, write_table, Summary};
use crate::target::Target;

/// Collocation solve of a builtin or GLM s-space problem.
pub fn run(cfg: &ExperimentConfig, flags: &Flags) -> Result<Summary, CliError> {
    let ode = &cfg.ode;
    match ode.problem {
        OdeName::Exp => {
            let p = KthOrderProblem::new(|x: &[f64], _t, o: &mut [f64]| o[0] = x[0], vec![vec![1.0]], ode.horizon, vec![1.0])?;
            solve(cfg, flags, &p, Some(&|t: f64| vec![t.exp()]))
        }
        OdeName::Oscillator => {
            let p = KthOrderProblem::new(
                |y: &[f64], _t, o: &mut [f64]| o[0] = -y[1],
                vec![vec![1.0], vec![0.0]],
                ode.horizon,
                vec![0.0, 1.0],
            )?;
            solve(cfg, flags, &p, Some(&|t: f64| vec![t.cos(), -t.sin()]))
        }
        OdeName::GlmS => {
            let target = Target::build(&cfg.density)?;
            let Target::Glm(g) = &target else {
                return Err(CliError::Config("ode.problem = \"glm-s\" needs density.kind = \"glm\"".into()));
            };
            let d = g.matrix().cols();
            let n = g.n();
            let x0 = vector_or_zeros(ode.x0.as_ref(), d, "ode.x0")?;
            let v0 = vector_or_zeros(ode.v0.as_ref(), d, "ode.v0")?;
            let s0 = g.matrix().matvec(&x0);
            let sv = g.matrix().matvec(&v0);
            let rhs = move |y: &[f64], _t: f64, o: &mut [f64]| g.s_force(&y[n..], o);
            let p = KthOrderProblem::new(rhs, vec![s0, sv], ode.horizon, vec![0.0, g.s_lipschitz()])?
                .with_norm(NormKind::LInf);
            solve(cfg, flags, &p, None)
        }
    }
}

pub(crate) fn vector_or_zeros(v: Option<&Vec<f64>>, d: usize, name: &str) -> Result<Vec<f64>, CliError> {
    match v {
        Some(v) if v.len() != d => Err(CliError::Config(format!(
            "{name} has length {}, expected {d}",
            v.len()
        ))),
        Some(v) => Ok(v.clone()),
        None => Ok(vec![0.0; d]),
    }
}

type Exact<'e> = &'e dyn Fn(f64) -> Vec<f64>;

fn solve(
    cfg: &ExperimentConfig,
    flags: &Flags,
    problem: &KthOrderProblem<'_, f64>,
    exact: Option<Exact<'_>>,
) -> Result<Summary, CliError> {
    let ode = &cfg.ode;
    let policy: GammaPolicy = ode.gamma_policy.into();
    let options = SolverOptions {
        gamma_policy: policy,
        ..SolverOptions::default()
    };
    let k = problem.order();
    let template = CollocationBasis::uniform(0.0, 1.0, ode.pieces, ode.degree)?;
    let gamma = template.gamma(policy);
    let l = problem.combined_lipschitz();
    let segments = ode
        .segments
        .unwrap_or_else(|| segment_count(l, ode.horizon, gamma, k));
    let seg_len = ode.horizon / segments as f64;
    let check = check_step_size(l, seg_len, gamma, k);

    let mut s = Summary::new();
    s.put("command", "solve-ode")
        .put("problem", ode.problem.as_str())
        .put("order", k)
        .put("dim", problem.dim())
        .num("horizon", ode.horizon)
        .num("eps", ode.eps)
        .put("degree", ode.degree)
        .put("pieces", ode.pieces)
        .put("segments", segments)
        .put("gamma_policy", ode.gamma_policy.as_str())
        .num("gamma", gamma)
        .num("lipschitz", l)
        .put("step_condition", check.condition.clone())
        .num("step_value", check.value)
        .num("step_bound", check.bound)
        .num("step_margin", check.margin);
    check.into_result()?;

    let sol = chain_solve_segments(problem, ode.horizon, segments, &template, ode.eps, &options)?;
    let times: Vec<f64> = (0..ode.grid)
        .map(|i| {
            if i + 1 == ode.grid {
                ode.horizon
            } else {
                ode.horizon * i as f64 / (ode.grid - 1) as f64
            }
        })
        .collect();
    let mut states = Vec::with_capacity(times.len());
    for &t in &times {
        let mut row = Vec::with_capacity(k * problem.dim());
        for i in 0..k {
            row.extend(sol.derivative(i, t)?);
        }
        states.push(row);
    }
    let end = states.last().expect("grid has two points").clone();
    s.put("iterations", sol.total_iterations())
        .num("max_residual", sol.max_residual())
        .nums("end_state", &end);
    if let Some(f) = exact {
        let err = times
            .iter()
            .zip(&states)
            .flat_map(|(&t, row)| f(t).into_iter().zip(row.clone()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        s.num("exact_max_error", err);
    }
    if flags.oracle {
        let reference = reference_solve_kth(problem, &times)?;
        let err = reference
            .states
            .iter()
            .zip(&states)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        let mut o = Summary::new();
        o.put("method", reference.method)
            .num("tolerance", reference.tolerance)
            .put("steps", reference.accepted_steps)
            .num("max_error", err);
        s.nest("oracle", o);
    }
    if let Some(dir) = flags.output_dir()? {
        let mut header = vec!["t".to_string()];
        for i in 0..k {
            for j in 0..problem.dim() {
                header.push(format!("d{i}_x{}", j + 1));
            }
        }
        let rows: Vec<Vec<String>> = times
            .iter()
            .zip(&states)
            .map(|(t, row)| std::iter::once(fmt_f64(*t)).chain(row.iter().map(|v| fmt_f64(*v))).collect())
            .collect();
        write_table(&dir.join("trajectory.tsv"), &header, &rows)?;
        write_summary(&dir, &s, flags.json)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> ExperimentConfig {
        let c = ExperimentConfig::from_toml(text, None).unwrap();
        c.validate().unwrap();
        c
    }

    #[test]
    fn exp_endpoint_near_e() {
        let c = config("[ode]\nhorizon = 1.0\neps = 1e-10");
        let s = run(&c, &Flags::default()).unwrap();
        let end = s.get("end_state").unwrap()[0].as_f64().unwrap();
        assert!((end - std::f64::consts::E).abs() < 1e-8, "{end}");
    }

    #[test]
    fn oscillator_with_oracle() {
        let c = config("[ode]\nproblem = \"oscillator\"\nhorizon = 1.0\neps = 1e-10");
        let flags = Flags {
            oracle: true,
            ..Flags::default()
        };
        let s = run(&c, &flags).unwrap();
        assert!(s.get("exact_max_error").unwrap().as_f64().unwrap() < 1e-8);
        let text = s.to_text();
        assert!(text.contains("oracle.max_error="), "{text}");
    }

    #[test]
    fn too_few_segments_is_a_precondition_error() {
        let c = config("[ode]\nproblem = \"exp\"\nhorizon = 1.0\nsegments = 1\ngamma_policy = \"certified\"");
        let e = run(&c, &Flags::default()).unwrap_err();
        assert_eq!(e.exit_code(), crate::error::EXIT_PRECONDITION);
    }
}
