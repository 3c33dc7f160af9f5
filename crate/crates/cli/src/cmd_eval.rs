//! `oslab eval`: score a detection file against a ground-truth manifest and
//! class registry, writing the report in both machine and human form.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use openset_core::eval::{
    cross_validate, evaluate, parse_detections_json, parse_gt_json, parse_registry_json,
    EvalOptions,
};

use crate::artifacts::ArtifactSet;
use crate::report;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground-truth manifest (JSON).
    pub gt: PathBuf,

    /// Detections to score (JSON).
    pub detections: PathBuf,

    /// Class registry naming known ids and the unknown id (JSON).
    pub registry: PathBuf,

    /// Recall level the wilderness-impact sweep must reach.
    #[arg(long, default_value_t = openset_core::eval::DEFAULT_RECALL_LEVEL)]
    pub recall_level: f64,

    /// Intersection-over-union threshold for matching.
    #[arg(long, default_value_t = openset_core::eval::DEFAULT_IOU_THRESHOLD)]
    pub iou: f64,

    /// Detections scoring below this are dropped before any metric.
    #[arg(long, default_value_t = openset_core::eval::DEFAULT_SCORE_FLOOR)]
    pub score_floor: f64,

    /// Directory the report artifacts are written into.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn run(args: &EvalArgs) -> anyhow::Result<()> {
    let gt = parse_gt_json(&read(&args.gt)?)?;
    let dets = parse_detections_json(&read(&args.detections)?)?;
    let registry = parse_registry_json(&read(&args.registry)?)?;
    cross_validate(&dets, &gt, &registry)?;

    let options = EvalOptions {
        iou_threshold: args.iou,
        recall_level: args.recall_level,
        score_floor: args.score_floor,
    };
    options.validate()?;
    let report = evaluate(
        &dets.detections()?,
        &gt.ground_truths()?,
        &registry,
        &options,
    )?;

    let report_csv = report::report_csv(&report, None);
    let report_txt = report::report_txt(&report, None);
    let mut set = ArtifactSet::create(&args.out)?;
    set.write_text("report.csv", &report_csv)?;
    set.write_text("report.txt", &report_txt)?;
    set.finish(None, None)?;
    print!("{report_txt}");
    Ok(())
}
