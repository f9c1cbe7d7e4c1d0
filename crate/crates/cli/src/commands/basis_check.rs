use hmc_colloc::basis::{measure_gamma, CERTIFIED_GAMMA};
use hmc_colloc::CollocationBasis;

use super::Flags;
use crate::error::CliError;
use crate::report::{fmt_f64, write_summary, write_table, Summary};

/// Measured γ of uniform bases, degrees `0..=max_degree` and piece counts
/// `1, 2, 4, …, ≤ max_pieces`, on `[0, 1]`.
pub fn run(max_degree: usize, max_pieces: usize, grid: usize, flags: &Flags) -> Result<Summary, CliError> {
    if max_pieces == 0 || grid < 2 {
        return Err(CliError::Config("need max_pieces ≥ 1 and grid ≥ 2".into()));
    }
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for degree in 0..=max_degree {
        let mut pieces = 1;
        while pieces <= max_pieces {
            let b = CollocationBasis::uniform(0.0, 1.0, pieces, degree)?;
            let g = measure_gamma(&b, grid)?;
            worst = worst.max(g);
            rows.push(vec![degree.to_string(), pieces.to_string(), fmt_f64(g)]);
            pieces *= 2;
        }
    }
    let mut s = Summary::new();
    s.put("command", "basis-check")
        .put("max_degree", max_degree)
        .put("max_pieces", max_pieces)
        .put("grid", grid)
        .put("bases", rows.len())
        .num("max_measured_gamma", worst)
        .num("certified_gamma", CERTIFIED_GAMMA)
        .put("status", if worst <= CERTIFIED_GAMMA { "pass" } else { "fail" });
    if let Some(dir) = flags.output_dir()? {
        let header: Vec<String> = ["degree", "pieces", "gamma_measured"].iter().map(|s| s.to_string()).collect();
        write_table(&dir.join("basis.tsv"), &header, &rows)?;
        write_summary(&dir, &s, flags.json)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweep_passes() {
        let s = run(3, 4, 256, &Flags::default()).unwrap();
        assert_eq!(s.get("bases").unwrap().as_u64(), Some(12));
        assert_eq!(s.get("status").unwrap(), "pass");
        let g = s.get("max_measured_gamma").unwrap().as_f64().unwrap();
        assert!(g >= 0.5 && g < 10.0, "{g}");
    }
}
