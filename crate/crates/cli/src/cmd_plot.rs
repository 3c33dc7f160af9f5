//! `oslab plot`: static SVG plots with the plotted data emitted alongside
//! as CSV. Three kinds: the uncertainty-weighting curve family, a PCA
//! scatter of latent embeddings, and a precision-recall curve.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use openset_core::losses::{entropy_weight, polynomial_weight};

use crate::artifacts::ArtifactSet;
use crate::pca;
use crate::svg::{Svg, PALETTE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// The uncertainty-weighting functions w(p) over p in [0, 1].
    #[value(name = "weighting_curves")]
    WeightingCurves,
    /// Latent embeddings projected to the plane, one marker each.
    #[value(name = "latent_scatter")]
    LatentScatter,
    /// Precision over recall for a ranked detection list.
    #[value(name = "pr_curve")]
    PrCurve,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Input files; latent_scatter takes a latent.csv, pr_curve a ranked
    /// score,tp CSV, weighting_curves none.
    pub inputs: Vec<PathBuf>,

    /// Which plot to draw.
    #[arg(long, value_enum)]
    pub kind: PlotKind,

    /// Number of ground-truth objects behind a pr_curve input.
    #[arg(long)]
    pub gt_count: Option<usize>,

    /// Directory the plot and its data are written into.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Linear map from data coordinates into a margin-padded viewport, with the
/// y axis flipped the way screens expect.
struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;

impl Frame {
    fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        let (xmin, xmax) = widen_if_flat(xmin, xmax);
        let (ymin, ymax) = widen_if_flat(ymin, ymax);
        Frame {
            x0: 50.0,
            y0: 20.0,
            w: WIDTH - 70.0,
            h: HEIGHT - 60.0,
            xmin,
            xmax,
            ymin,
            ymax,
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = (x - self.xmin) / (self.xmax - self.xmin);
        let fy = (y - self.ymin) / (self.ymax - self.ymin);
        (self.x0 + fx * self.w, self.y0 + self.h - fy * self.h)
    }

    fn draw_axes(&self, svg: &mut Svg, x_label: &str, y_label: &str) {
        let (left, bottom) = (self.x0, self.y0 + self.h);
        svg.line(left, self.y0, left, bottom, "#333333");
        svg.line(left, bottom, self.x0 + self.w, bottom, "#333333");
        svg.text(self.x0 + self.w / 2.0 - 20.0, bottom + 28.0, 12.0, x_label);
        svg.text(8.0, self.y0 + self.h / 2.0, 12.0, y_label);
        svg.text(left - 4.0, bottom + 14.0, 10.0, &format!("{:.2}", self.xmin));
        svg.text(
            self.x0 + self.w - 18.0,
            bottom + 14.0,
            10.0,
            &format!("{:.2}", self.xmax),
        );
        svg.text(left - 36.0, bottom, 10.0, &format!("{:.2}", self.ymin));
        svg.text(left - 36.0, self.y0 + 8.0, 10.0, &format!("{:.2}", self.ymax));
    }
}

fn widen_if_flat(min: f64, max: f64) -> (f64, f64) {
    if max - min > 1e-12 {
        (min, max)
    } else {
        (min - 0.5, max + 0.5)
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn single_input<'a>(args: &'a PlotArgs, kind: &str) -> anyhow::Result<&'a Path> {
    match args.inputs.as_slice() {
        [one] => Ok(one),
        [] => bail!("{kind} needs an input file"),
        more => bail!("{kind} takes one input file, got {}", more.len()),
    }
}

pub fn run(args: &PlotArgs) -> anyhow::Result<()> {
    let mut set = ArtifactSet::create(&args.out)?;
    match args.kind {
        PlotKind::WeightingCurves => weighting_curves(&mut set)?,
        PlotKind::LatentScatter => {
            let input = single_input(args, "latent_scatter")?;
            latent_scatter(&read(input)?, &mut set)?;
        }
        PlotKind::PrCurve => {
            let input = single_input(args, "pr_curve")?;
            let Some(gt_count) = args.gt_count else {
                bail!("pr_curve needs --gt-count, the number of ground-truth objects");
            };
            pr_curve(&read(input)?, gt_count, &mut set)?;
        }
    }
    set.finish(None, None)?;
    Ok(())
}

const ALPHAS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];
const GRID: usize = 200;

/// Two-class normalized entropy as a function of the larger probability.
fn binary_normalized_entropy(p: f64) -> f64 {
    (entropy_weight(p) + entropy_weight(1.0 - p)) / std::f64::consts::LN_2
}

fn weighting_curves(set: &mut ArtifactSet) -> anyhow::Result<()> {
    let mut header = String::from("p,identity,entropy_of_gt,normalized_entropy");
    for a in ALPHAS {
        header.push_str(&format!(",polynomial_a{a}"));
    }
    header.push('\n');

    let mut csv = header;
    let mut columns: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 3 + ALPHAS.len()];
    for i in 0..=GRID {
        let p = i as f64 / GRID as f64;
        let mut values = vec![1.0, entropy_weight(p), binary_normalized_entropy(p)];
        values.extend(ALPHAS.iter().map(|&a| polynomial_weight(p, a)));
        csv.push_str(&format!("{p}"));
        for (curve, v) in columns.iter_mut().zip(&values) {
            csv.push_str(&format!(",{v}"));
            curve.push((p, *v));
        }
        csv.push('\n');
    }
    set.write_text("weighting_curves.csv", &csv)?;

    let top = columns
        .iter()
        .flat_map(|c| c.iter().map(|(_, v)| *v))
        .fold(0.0f64, f64::max);
    let frame = Frame::new(0.0, 1.0, 0.0, top * 1.05);
    let mut svg = Svg::new(WIDTH, HEIGHT);
    frame.draw_axes(&mut svg, "p", "w(p)");
    let names = [
        "identity".to_string(),
        "entropy_of_gt".to_string(),
        "normalized_entropy".to_string(),
        format!("polynomial a={}", ALPHAS[0]),
        format!("polynomial a={}", ALPHAS[1]),
        format!("polynomial a={}", ALPHAS[2]),
        format!("polynomial a={}", ALPHAS[3]),
    ];
    for (i, (curve, name)) in columns.iter().zip(&names).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mapped: Vec<(f64, f64)> = curve.iter().map(|&(x, y)| frame.map(x, y)).collect();
        svg.polyline(&mapped, color);
        svg.text(WIDTH - 160.0, 30.0 + 16.0 * i as f64, 11.0, name);
        svg.line(
            WIDTH - 180.0,
            26.0 + 16.0 * i as f64,
            WIDTH - 165.0,
            26.0 + 16.0 * i as f64,
            color,
        );
    }
    set.write_text("weighting_curves.svg", &svg.finish())?;
    Ok(())
}

fn latent_scatter(input: &str, set: &mut ArtifactSet) -> anyhow::Result<()> {
    let mut lines = input.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        bail!("latent input is empty");
    };
    let head: Vec<&str> = header.trim_end().split(',').collect();
    if head.len() < 3 || head[0] != "label" || head[1] != "known" {
        bail!("latent input must start with a label,known,e0,... header");
    }
    let dim = head.len() - 2;

    let mut labels: Vec<usize> = Vec::new();
    let mut knowns: Vec<bool> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            bail!(
                "latent input line {}: expected {} fields, got {}",
                n + 1,
                dim + 2,
                fields.len()
            );
        }
        let label: usize = fields[0]
            .parse()
            .with_context(|| format!("latent input line {}: bad label", n + 1))?;
        let known = match fields[1] {
            "0" => false,
            "1" => true,
            other => bail!("latent input line {}: known must be 0 or 1, got {other}", n + 1),
        };
        let mut row = Vec::with_capacity(dim);
        for f in &fields[2..] {
            row.push(
                f.parse::<f64>()
                    .with_context(|| format!("latent input line {}: bad coordinate", n + 1))?,
            );
        }
        labels.push(label);
        knowns.push(known);
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("latent input holds no embeddings");
    }

    let planar = pca::project_2d(&rows);
    let mut csv = String::from("label,known,x,y\n");
    for ((label, known), (x, y)) in labels.iter().zip(&knowns).zip(&planar) {
        csv.push_str(&format!("{label},{},{x},{y}\n", u8::from(*known)));
    }
    set.write_text("latent_scatter.csv", &csv)?;

    let xmin = planar.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = planar.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let ymin = planar.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = planar.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame::new(xmin, xmax, ymin, ymax);
    let mut svg = Svg::new(WIDTH, HEIGHT);
    frame.draw_axes(&mut svg, "pc1", "pc2");
    for ((label, known), (x, y)) in labels.iter().zip(&knowns).zip(&planar) {
        let (cx, cy) = frame.map(*x, *y);
        if *known {
            svg.point_filled(cx, cy, 3.0, PALETTE[label % PALETTE.len()]);
        } else {
            svg.point_open(cx, cy, 3.5, "#444444");
        }
    }
    set.write_text("latent_scatter.svg", &svg.finish())?;
    Ok(())
}

fn pr_curve(input: &str, gt_count: usize, set: &mut ArtifactSet) -> anyhow::Result<()> {
    if gt_count == 0 {
        bail!("pr_curve needs a positive --gt-count");
    }
    let mut lines = input.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        bail!("pr input is empty");
    };
    if header.trim_end() != "score,tp" {
        bail!("pr input must start with a score,tp header");
    }
    let mut entries: Vec<(f64, bool)> = Vec::new();
    for (n, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let Some((score, tp)) = line.split_once(',') else {
            bail!("pr input line {}: expected score,tp", n + 1);
        };
        let score: f64 = score
            .parse()
            .with_context(|| format!("pr input line {}: bad score", n + 1))?;
        let tp = match tp {
            "0" => false,
            "1" => true,
            other => bail!("pr input line {}: tp must be 0 or 1, got {other}", n + 1),
        };
        entries.push((score, tp));
    }
    if entries.is_empty() {
        bail!("pr input holds no detections");
    }

    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut csv = String::from("rank,score,recall,precision\n");
    let mut points = Vec::with_capacity(entries.len());
    let mut cum = 0usize;
    for (j, (score, tp)) in entries.iter().enumerate() {
        if *tp {
            cum += 1;
        }
        let precision = cum as f64 / (j + 1) as f64;
        let recall = cum as f64 / gt_count as f64;
        csv.push_str(&format!("{},{score},{recall},{precision}\n", j + 1));
        points.push((recall, precision));
    }
    set.write_text("pr_curve.csv", &csv)?;

    let frame = Frame::new(0.0, 1.0, 0.0, 1.05);
    let mut svg = Svg::new(WIDTH, HEIGHT);
    frame.draw_axes(&mut svg, "recall", "precision");
    let mut path = Vec::with_capacity(2 * points.len());
    let mut prev_recall = 0.0;
    for &(recall, precision) in &points {
        path.push(frame.map(prev_recall, precision));
        path.push(frame.map(recall, precision));
        prev_recall = recall;
    }
    svg.polyline(&path, PALETTE[0]);
    for &(recall, precision) in &points {
        let (cx, cy) = frame.map(recall, precision);
        svg.point_filled(cx, cy, 2.5, PALETTE[3]);
    }
    set.write_text("pr_curve.svg", &svg.finish())?;
    Ok(())
}
