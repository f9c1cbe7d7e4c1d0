//! Densities named in a configuration.

use hmc_colloc::densities::{logistic_family, parse_matrix, pseudo_huber_family};
use hmc_colloc::{Density, GlmDensity, QuadraticDensity, StronglyConvexDensity};

use crate::config::{DensityKind, DensitySection, LossName};
use crate::error::CliError;

pub enum Target {
    Gaussian(QuadraticDensity<f64>),
    Softabs(StronglyConvexDensity<'static, f64>),
    Glm(GlmDensity<f64>),
}

impl Target {
    pub fn build(section: &DensitySection) -> Result<Self, CliError> {
        match section.kind {
            DensityKind::Gaussian => {
                let d = section
                    .precision
                    .as_ref()
                    .or(section.mean.as_ref())
                    .map_or(section.dim, Vec::len);
                let precision = section.precision.clone().unwrap_or_else(|| vec![1.0; d]);
                let mean = section.mean.clone().unwrap_or_else(|| vec![0.0; d]);
                Ok(Target::Gaussian(QuadraticDensity::new(precision, mean)?))
            }
            DensityKind::Softabs => Ok(Target::Softabs(softabs(section.dim)?)),
            DensityKind::Glm => {
                let path = section
                    .matrix
                    .as_ref()
                    .ok_or_else(|| CliError::Config("density.matrix is required".into()))?;
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read matrix {}: {e}", path.display()))
                })?;
                let a = parse_matrix(&text)?;
                let loss = match section.loss {
                    LossName::Logistic => logistic_family(),
                    LossName::PseudoHuber => pseudo_huber_family(section.huber_delta)?,
                };
                Ok(Target::Glm(GlmDensity::new(a, loss, section.m2)?))
            }
        }
    }

    pub fn density(&self) -> &dyn Density<f64> {
        match self {
            Target::Gaussian(q) => q,
            Target::Softabs(s) => s,
            Target::Glm(g) => g,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Target::Gaussian(_) => "gaussian",
            Target::Softabs(_) => "softabs",
            Target::Glm(_) => "glm",
        }
    }
}

/// `f(x) = Σ x_i²/2 + log cosh x_i`; `∇²f = I + diag(sech² x)`, so `m₂ = 1`, `M₂ = 2`.
pub fn softabs(dim: usize) -> Result<StronglyConvexDensity<'static, f64>, CliError> {
    let d = StronglyConvexDensity::new(dim, 1.0, 2.0, |x: &[f64], out: &mut [f64]| {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi + xi.tanh();
        }
    })?
    .with_value(|x: &[f64]| x.iter().map(|&t| 0.5 * t * t + log_cosh(t)).sum());
    Ok(d)
}

pub fn log_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    #[test]
    fn softabs_gradient_matches_value() {
        let s = softabs(2).unwrap();
        let x = [0.3, -1.2];
        let g = s.gradient_vec(&x);
        let h = 1e-6;
        for i in 0..2 {
            let mut p = x;
            let mut m = x;
            p[i] += h;
            m[i] -= h;
            let fd = (s.value(&p).unwrap() - s.value(&m).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
        assert!((log_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn gaussian_dimension_follows_vectors() {
        let c = ExperimentConfig::from_toml("[density]\nprecision = [1.0, 2.0, 3.0]", None).unwrap();
        let t = Target::build(&c.density).unwrap();
        assert_eq!(t.density().dim(), 3);
        assert_eq!(t.name(), "gaussian");
    }

    #[test]
    fn glm_from_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "2 1\n1.0\n-0.5\n").unwrap();
        let text = "[density]\nkind = \"glm\"\nmatrix = \"a.txt\"\nm2 = 0.5";
        let c = ExperimentConfig::from_toml(text, Some(dir.path())).unwrap();
        let t = Target::build(&c.density).unwrap();
        assert_eq!(t.density().dim(), 1);
        assert_eq!(t.density().m2(), 0.5);
        let missing = ExperimentConfig::from_toml(
            "[density]\nkind = \"glm\"\nmatrix = \"nope.txt\"",
            Some(dir.path()),
        )
        .unwrap();
        assert!(matches!(Target::build(&missing.density), Err(CliError::Config(_))));
    }
}
