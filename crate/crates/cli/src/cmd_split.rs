//! `oslab split`: build a joint open-set test manifest out of annotation
//! sources according to a declarative spec.

use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use openset_core::eval::{parse_gt_json, RegistryFile};
use openset_core::split::{build_split, parse_split_spec_json};

use crate::artifacts::ArtifactSet;

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Split spec (JSON).
    pub spec: PathBuf,

    /// Annotation sources (JSON), at least one.
    #[arg(required = true)]
    pub sources: Vec<PathBuf>,

    /// Directory the split artifacts are written into.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

pub fn run(args: &SplitArgs) -> anyhow::Result<()> {
    let spec_text = fs::read_to_string(&args.spec)
        .with_context(|| format!("reading split spec {}", args.spec.display()))?;
    let spec = parse_split_spec_json(&spec_text)?;
    let mut sources = Vec::with_capacity(args.sources.len());
    for path in &args.sources {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading source {}", path.display()))?;
        sources.push(parse_gt_json(&text)?);
    }

    let outcome = build_split(&spec, &sources)?;

    let mut set = ArtifactSet::create(&args.out)?;
    let mut manifest_json = serde_json::to_string_pretty(&outcome.manifest)?;
    manifest_json.push('\n');
    set.write_text("split.json", &manifest_json)?;

    let registry = RegistryFile {
        known: outcome.registry.known().to_vec(),
        unknown: outcome.registry.unknown_id(),
    };
    let mut registry_json = serde_json::to_string_pretty(&registry)?;
    registry_json.push('\n');
    set.write_text("registry.json", &registry_json)?;

    let mut summary = String::from("metric,value\n");
    summary.push_str(&format!(
        "open_images_selected,{}\n",
        outcome.open_images.len()
    ));
    summary.push_str(&format!(
        "known_images_selected,{}\n",
        outcome.known_images.len()
    ));
    summary.push_str(&format!(
        "images_with_known_annotations,{}\n",
        outcome.known_image_count
    ));
    summary.push_str(&format!(
        "images_with_unknown_annotations,{}\n",
        outcome.unknown_image_count
    ));
    summary.push_str(&format!(
        "realized_wilderness_ratio,{}\n",
        outcome.realized_wilderness_ratio
    ));
    set.write_text("split_summary.csv", &summary)?;
    set.finish(Some(spec.seed), None)?;

    println!(
        "split: {} images ({} open, {} known), realized wilderness ratio {:.4}",
        outcome.manifest.images.len(),
        outcome.open_images.len(),
        outcome.known_images.len(),
        outcome.realized_wilderness_ratio
    );
    Ok(())
}
