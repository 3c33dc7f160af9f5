//! `oslab train`: run one experiment from a config file and write the run
//! artifacts into the output directory.

use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use openset_core::config;
use openset_core::trainer::run_experiment;

use crate::artifacts::ArtifactSet;
use crate::report;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment configuration file.
    #[arg(long)]
    pub config: PathBuf,

    /// Replace the seed from the config for this run.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Directory the run artifacts are written into.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

pub fn run(args: &TrainArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let mut cfg = config::parse(&text)?;
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    let resolved = config::emit(&cfg);

    let outcome = run_experiment(&cfg.world, &cfg.trainer)?;

    let mut set = ArtifactSet::create(&args.out)?;
    set.write_text("resolved.conf", &resolved)?;

    let mut telemetry = String::from("iteration,loss_ce,loss_up,loss_ic,gamma_t\n");
    for step in &outcome.telemetry {
        telemetry.push_str(&format!(
            "{},{},{},{},{}\n",
            step.iteration, step.ce, step.up, step.ic, step.gamma
        ));
    }
    set.write_text("telemetry.csv", &telemetry)?;

    let report_csv = report::report_csv(&outcome.report, Some(outcome.close_set_accuracy));
    let report_txt = report::report_txt(&outcome.report, Some(outcome.close_set_accuracy));
    set.write_text("report.csv", &report_csv)?;
    set.write_text("report.txt", &report_txt)?;

    let dim = cfg.trainer.model.trunk_dim;
    let mut latent = String::from("label,known");
    for i in 0..dim {
        latent.push_str(&format!(",e{i}"));
    }
    latent.push('\n');
    for (label, direction) in &outcome.latent_points {
        latent.push_str(&format!(
            "{label},{}",
            u8::from(*label < cfg.world.num_known)
        ));
        for v in direction.as_slice() {
            latent.push_str(&format!(",{v}"));
        }
        latent.push('\n');
    }
    set.write_text("latent.csv", &latent)?;

    let mut snapshot = Vec::new();
    outcome.bank.write_snapshot(&mut snapshot)?;
    set.write_bytes("bank.snapshot", &snapshot)?;

    outcome
        .model
        .save_checkpoint(&set.dir().join("checkpoint.bin"))?;
    set.track("checkpoint.bin")?;

    set.finish(Some(cfg.trainer.seed), Some("resolved.conf".to_string()))?;
    print!("{report_txt}");
    Ok(())
}
