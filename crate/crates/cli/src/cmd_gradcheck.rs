//! `oslab gradcheck`: compare analytic gradients of every loss against
//! central finite differences on randomized instances. Exits nonzero when
//! any check exceeds tolerance.

use std::path::PathBuf;

use anyhow::bail;
use clap::Args;
use openset_core::gradcheck::run_standard_checks;

use crate::artifacts::ArtifactSet;

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seed for the randomized instances.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,

    /// Randomized instances per check.
    #[arg(long, default_value_t = 120)]
    pub trials: usize,

    /// Also write the table as gradcheck.csv into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &GradcheckArgs) -> anyhow::Result<()> {
    let rows = run_standard_checks(args.seed, args.trials)?;

    println!(
        "{:<22} {:>7} {:>14} {:>11}  verdict",
        "check", "trials", "max rel error", "tolerance"
    );
    for row in &rows {
        println!(
            "{:<22} {:>7} {:>14.3e} {:>11.1e}  {}",
            row.name,
            row.trials,
            row.max_rel_error,
            row.tolerance,
            if row.passed() { "ok" } else { "FAIL" }
        );
    }

    if let Some(out) = &args.out {
        let mut csv = String::from("check,trials,max_rel_error,tolerance,passed\n");
        for row in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                row.name,
                row.trials,
                row.max_rel_error,
                row.tolerance,
                u8::from(row.passed())
            ));
        }
        let mut set = ArtifactSet::create(out)?;
        set.write_text("gradcheck.csv", &csv)?;
        set.finish(Some(args.seed), None)?;
    }

    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!("{failed} gradient checks exceeded tolerance");
    }
    Ok(())
}
