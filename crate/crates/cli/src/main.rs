//! `dcfmix`: synthetic corpora, depth statistics, mixing, depth-guided
//! filtering, toy self-training and reporting from the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dcfmix_core::config::PipelineConfig;
use dcfmix_core::dcf::{dcf_filter, ClassFilterStats, FilterMode};
use dcfmix_core::depth_stats::{class_depth_histogram, ClassDepthHistogram};
use dcfmix_core::harness::{
    evaluate, pseudo_label, read_log, train, write_log, EvalResult, ToyModel,
};
use dcfmix_core::mixer::{build_mask, composite, select_classes};
use dcfmix_core::scene::{
    overlay_mask, read_image_png, read_mask_png, save_mask_png, save_sample, write_image_png,
    CorpusManifest, MixMask, Role, SceneSample,
};
use dcfmix_core::synth::{generate_range, SceneSpec};
use dcfmix_core::Error;

#[derive(Parser)]
#[command(
    name = "dcfmix",
    version,
    about = "Depth-aware cross-domain mixing toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Source,
    Target,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Source => Role::Source,
            RoleArg::Target => Role::Target,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a manifest.
    Synth {
        /// SceneSpec JSON file; the bundled two-domain spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum)]
        role: RoleArg,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Index of the first sample, for disjoint held-out sets.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-class depth densities of a corpus.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paste half the classes of each source frame onto a target frame.
    Mix {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mix, then filter the paste masks against the target depth layout.
    Filter {
        #[arg(long)]
        source: PathBuf,
        /// Target corpus; its label planes are used as pseudo labels unless
        /// `--model` is given.
        #[arg(long)]
        target: PathBuf,
        /// Model whose confident predictions replace the target labels.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-train the toy model on a labelled source and unlabelled target.
    Train {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model against a labelled corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise filter and training outputs as markdown with mask overlays.
    Report {
        /// Output directory of `filter`.
        #[arg(long)]
        filter: Option<PathBuf>,
        /// Output directory of `train`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// JSON written by `eval`.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Per-sample record written by `filter`.
#[derive(Serialize, Deserialize)]
struct FilterRecord {
    id: String,
    source_id: String,
    target_id: String,
    mode: FilterMode,
    pasted: usize,
    removed: usize,
    per_class: Vec<NamedClassStats>,
    mask_before: PathBuf,
    mask_after: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct NamedClassStats {
    name: String,
    #[serde(flatten)]
    stats: ClassFilterStats,
}

#[derive(Serialize, Deserialize)]
struct FilterIndex {
    manifest: PathBuf,
    records: Vec<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_corpus(path: &Path) -> Result<(CorpusManifest, Vec<SceneSample>)> {
    let manifest = CorpusManifest::load(path)
        .with_context(|| format!("loading manifest {}", path.display()))?;
    let samples = manifest.load_all()?;
    if samples.is_empty() {
        bail!("{} lists no samples", path.display());
    }
    Ok((manifest, samples))
}

fn check_classes(a: &CorpusManifest, b: &CorpusManifest) -> Result<()> {
    if a.class_names != b.class_names {
        bail!("source and target corpora disagree on class names");
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn synth(spec: Option<&Path>, role: Role, count: usize, start: usize, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => SceneSpec::from_json(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => SceneSpec::two_domain(),
    };
    fs::create_dir_all(out)?;
    let mut manifest = CorpusManifest::new(role, spec.class_names());
    for sample in generate_range(&spec, role, start, count)? {
        manifest.entries.push(save_sample(&sample, out)?);
    }
    manifest.save(out.join("manifest.json"))?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn stats(manifest: &Path, config: &PipelineConfig, out: &Path) -> Result<()> {
    let (manifest, samples) = load_corpus(manifest)?;
    let binning = config.binning()?;
    let mut total = ClassDepthHistogram::empty(manifest.classes, &binning);
    for s in &samples {
        total.merge(&class_depth_histogram(s.labels(), s.depth(), &binning)?)?;
    }
    write_json(out, &total.export(&manifest.class_names))?;
    for (i, name) in manifest.class_names.iter().enumerate() {
        match total.mean_depth(i) {
            Some(m) => println!(
                "{name:>16}: {:>9} px, mean depth {m:.2} m",
                total.support(i)
            ),
            None => println!("{name:>16}: no pixels"),
        }
    }
    Ok(())
}

/// Source frame `i` is paired with target frame `i mod |target|`.
fn mixes<'a>(
    sources: &'a [SceneSample],
    targets: &'a [SceneSample],
) -> impl Iterator<Item = (usize, &'a SceneSample, &'a SceneSample)> {
    sources
        .iter()
        .enumerate()
        .map(move |(i, s)| (i, s, &targets[i % targets.len()]))
}

/// Paste mask for one frame; a frame with no labelled pixels pastes nothing.
fn naive_mask(source: &SceneSample, seed: u64) -> Result<MixMask> {
    match select_classes(source.labels(), seed) {
        Ok(selection) => Ok(build_mask(source.labels(), &selection)),
        Err(Error::EmptySource) => Ok(MixMask::filled(source.width(), source.height(), false)),
        Err(e) => Err(e.into()),
    }
}

fn mix(source: &Path, target: &Path, seed: u64, out: &Path) -> Result<()> {
    let (sm, sources) = load_corpus(source)?;
    let (tm, targets) = load_corpus(target)?;
    check_classes(&sm, &tm)?;
    fs::create_dir_all(out)?;
    let mut manifest = CorpusManifest::new(tm.role, tm.class_names.clone());
    for (i, s, t) in mixes(&sources, &targets) {
        let mask = naive_mask(s, seed.wrapping_add(i as u64))?;
        let id = format!("mix_{i:05}");
        let mixed = composite(s, t, &mask)?.with_id(id.clone());
        save_mask_png(out.join(format!("{id}_mask.png")), &mask)?;
        manifest.entries.push(save_sample(&mixed, out)?);
    }
    manifest.save(out.join("manifest.json"))?;
    println!("wrote {} mixed samples to {}", sources.len(), out.display());
    Ok(())
}

fn filter(
    source: &Path,
    target: &Path,
    model: Option<&Path>,
    config: &PipelineConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (sm, sources) = load_corpus(source)?;
    let (tm, targets) = load_corpus(target)?;
    check_classes(&sm, &tm)?;
    let binning = config.binning()?;
    let thresholds = config.thresholds(&sm.class_names)?;
    let model = model.map(ToyModel::load_json).transpose()?;
    fs::create_dir_all(out)?;

    let mut manifest = CorpusManifest::new(tm.role, tm.class_names.clone());
    let mut index = FilterIndex {
        manifest: PathBuf::from("manifest.json"),
        records: Vec::new(),
    };
    let (mut pasted, mut removed) = (0, 0);
    for (i, s, t) in mixes(&sources, &targets) {
        let pseudo = match &model {
            Some(m) => t.with_labels(pseudo_label(m, t, config.train.pseudo_threshold)?.0)?,
            None => t.clone(),
        };
        let mask = naive_mask(s, seed.wrapping_add(i as u64))?;
        let (filtered, report) =
            dcf_filter(&pseudo, s, &mask, &binning, &thresholds, config.filter_mode)?;
        let id = format!("dcf_{i:05}");
        let before = format!("{id}_mask_naive.png");
        let after = format!("{id}_mask.png");
        save_mask_png(out.join(&before), &report.mask_before)?;
        save_mask_png(out.join(&after), &report.mask_after)?;
        let mixed = composite(s, &pseudo, &filtered)?.with_id(id.clone());
        manifest.entries.push(save_sample(&mixed, out)?);

        pasted += report.pasted_total();
        removed += report.removed_total();
        let record = FilterRecord {
            id: id.clone(),
            source_id: s.id().to_string(),
            target_id: t.id().to_string(),
            mode: config.filter_mode,
            pasted: report.pasted_total(),
            removed: report.removed_total(),
            per_class: report
                .per_class
                .into_iter()
                .map(|stats| NamedClassStats {
                    name: sm.class_names[stats.class as usize].clone(),
                    stats,
                })
                .collect(),
            mask_before: before.into(),
            mask_after: after.into(),
        };
        let name = PathBuf::from(format!("{id}_report.json"));
        write_json(&out.join(&name), &record)?;
        index.records.push(name);
    }
    manifest.save(out.join("manifest.json"))?;
    write_json(&out.join("filter_index.json"), &index)?;
    println!(
        "filtered {} mixes: {removed} of {pasted} pasted pixels removed",
        sources.len()
    );
    Ok(())
}

fn run_train(source: &Path, target: &Path, config: &PipelineConfig, out: &Path) -> Result<()> {
    let (sm, sources) = load_corpus(source)?;
    let (tm, targets) = load_corpus(target)?;
    check_classes(&sm, &tm)?;
    let train_config = config.train_config(&sm.class_names)?;
    let (model, log) = train(&train_config, &sources, &targets)?;
    fs::create_dir_all(out)?;
    model.save_json(out.join("model.json"))?;
    write_log(&log, out.join("log.jsonl"))?;
    write_json(&out.join("config.json"), config)?;
    if let Some(afo) = &model.afo {
        afo.params.save_checkpoint(out.join("afo.bin"))?;
    }
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "{} steps, loss {:.4} -> {:.4}, {} pasted pixels removed",
            log.len(),
            first.total,
            last.total,
            log.iter().map(|e| e.removed).sum::<usize>()
        );
    }
    Ok(())
}

fn print_eval(result: &EvalResult, names: &[String]) {
    for (name, iou) in names.iter().zip(&result.per_class_iou) {
        match iou {
            Some(v) => println!("{name:>16}: {v:.4}"),
            None => println!("{name:>16}: -"),
        }
    }
    println!("{:>16}: {:.4}", "mIoU", result.miou);
}

#[derive(Serialize, Deserialize)]
struct EvalOutput {
    class_names: Vec<String>,
    #[serde(flatten)]
    result: EvalResult,
}

fn run_eval(model: &Path, manifest: &Path, out: Option<&Path>) -> Result<()> {
    let model = ToyModel::load_json(model)?;
    let (m, samples) = load_corpus(manifest)?;
    if model.classes != m.classes {
        bail!(
            "model predicts {} classes, corpus has {}",
            model.classes,
            m.classes
        );
    }
    let result = evaluate(&model, &samples)?;
    print_eval(&result, &m.class_names);
    if let Some(out) = out {
        write_json(
            out,
            &EvalOutput {
                class_names: m.class_names,
                result,
            },
        )?;
    }
    Ok(())
}

const OVERLAY_COLOR: [u8; 3] = [255, 0, 0];
const REMOVED_COLOR: [u8; 3] = [0, 255, 255];

fn report_filter(dir: &Path, out: &Path, md: &mut String) -> Result<()> {
    let index: FilterIndex = read_json(&dir.join("filter_index.json"))?;
    let manifest = CorpusManifest::load(dir.join(&index.manifest))?;
    writeln!(md, "## Filtering\n")?;
    writeln!(
        md,
        "| mix | source | target | pasted | removed | removed classes |"
    )?;
    writeln!(md, "|---|---|---|---:|---:|---|")?;
    let (mut pasted, mut removed) = (0, 0);
    let mut overlays = Vec::new();
    for (name, entry) in index.records.iter().zip(&manifest.entries) {
        let r: FilterRecord = read_json(&dir.join(name))?;
        pasted += r.pasted;
        removed += r.removed;
        let classes: Vec<&str> = r
            .per_class
            .iter()
            .filter(|c| c.stats.removed > 0)
            .map(|c| c.name.as_str())
            .collect();
        writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.id,
            r.source_id,
            r.target_id,
            r.pasted,
            r.removed,
            if classes.is_empty() {
                "-".into()
            } else {
                classes.join(", ")
            }
        )?;

        // kept paste in red, removed paste in cyan
        let image = read_image_png(&entry.image)?;
        let before = read_mask_png(dir.join(&r.mask_before))?;
        let after = read_mask_png(dir.join(&r.mask_after))?;
        let mut dropped = before.clone();
        for p in 0..dropped.data().len() {
            dropped.set(p, before.get(p) && !after.get(p));
        }
        let shown = overlay_mask(
            &overlay_mask(&image, &after, OVERLAY_COLOR)?,
            &dropped,
            REMOVED_COLOR,
        )?;
        let file = format!("{}_overlay.png", r.id);
        write_image_png(out.join(&file), &shown)?;
        overlays.push(file);
    }
    let share = if pasted == 0 {
        0.0
    } else {
        100.0 * removed as f64 / pasted as f64
    };
    writeln!(
        md,
        "\n{removed} of {pasted} pasted pixels removed ({share:.1}%).\n\nOverlays: kept paste in red, removed paste in cyan.\n"
    )?;
    for file in overlays {
        writeln!(md, "![{file}]({file})")?;
    }
    writeln!(md)?;
    Ok(())
}

fn report_run(dir: &Path, md: &mut String) -> Result<()> {
    let log = read_log(dir.join("log.jsonl"))?;
    writeln!(md, "## Training\n")?;
    let (Some(first), Some(last)) = (log.first(), log.last()) else {
        writeln!(md, "Empty log.\n")?;
        return Ok(());
    };
    let warm = log.iter().find(|e| e.dcf_active).map(|e| e.step);
    let pasted: usize = log.iter().map(|e| e.pasted).sum();
    let removed: usize = log.iter().map(|e| e.removed).sum();
    writeln!(md, "- steps: {}", log.len())?;
    writeln!(
        md,
        "- loss: {:.4} at step {} to {:.4} at step {}",
        first.total, first.step, last.total, last.step
    )?;
    match warm {
        Some(s) => writeln!(md, "- filtering active from step {s}")?,
        None => writeln!(md, "- filtering never active")?,
    }
    writeln!(md, "- pasted pixels: {pasted}, removed: {removed}")?;
    writeln!(
        md,
        "- final confident pseudo-label share: {:.3}",
        last.confident_fraction
    )?;
    writeln!(
        md,
        "- every filtered mask within its naive mask: {}\n",
        log.iter().all(|e| e.mask_subset)
    )?;
    writeln!(
        md,
        "| step | total | hr src | vis src | depth src | hr mix | vis mix | removed |"
    )?;
    writeln!(md, "|---:|---:|---:|---:|---:|---:|---:|---:|")?;
    let stride = (log.len() / 10).max(1);
    let mut rows: Vec<_> = log.iter().step_by(stride).collect();
    if (log.len() - 1) % stride != 0 {
        rows.push(last);
    }
    for e in rows {
        let t = &e.terms;
        writeln!(
            md,
            "| {} | {:.4} | {:.4} | {:.4} | {:.3} | {:.4} | {:.4} | {} |",
            e.step,
            e.total,
            t.hr_source,
            t.vis_source,
            t.depth_source,
            t.hr_mixed,
            t.vis_mixed,
            e.removed
        )?;
    }
    writeln!(md)?;
    Ok(())
}

fn report_eval(path: &Path, md: &mut String) -> Result<()> {
    let e: EvalOutput = read_json(path)?;
    writeln!(md, "## Evaluation\n")?;
    writeln!(md, "| class | IoU |")?;
    writeln!(md, "|---|---:|")?;
    for (name, iou) in e.class_names.iter().zip(&e.result.per_class_iou) {
        match iou {
            Some(v) => writeln!(md, "| {name} | {v:.4} |")?,
            None => writeln!(md, "| {name} | - |")?,
        }
    }
    writeln!(md, "| **mIoU** | **{:.4}** |\n", e.result.miou)?;
    Ok(())
}

fn report(
    filter: Option<&Path>,
    run: Option<&Path>,
    eval: Option<&Path>,
    out: &Path,
) -> Result<()> {
    if filter.is_none() && run.is_none() && eval.is_none() {
        bail!("nothing to report: pass --filter, --run or --eval");
    }
    fs::create_dir_all(out)?;
    let mut md = String::from("# dcfmix report\n\n");
    if let Some(dir) = filter {
        report_filter(dir, out, &mut md)?;
    }
    if let Some(dir) = run {
        report_run(dir, &mut md)?;
    }
    if let Some(path) = eval {
        report_eval(path, &mut md)?;
    }
    let path = out.join("report.md");
    fs::write(&path, md).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth {
            spec,
            role,
            count,
            start,
            out,
        } => synth(spec.as_deref(), role.into(), count, start, &out),
        Command::Stats {
            manifest,
            config,
            out,
        } => stats(&manifest, &load_config(config.as_deref())?, &out),
        Command::Mix {
            source,
            target,
            seed,
            out,
        } => mix(&source, &target, seed, &out),
        Command::Filter {
            source,
            target,
            model,
            config,
            seed,
            out,
        } => filter(
            &source,
            &target,
            model.as_deref(),
            &load_config(config.as_deref())?,
            seed,
            &out,
        ),
        Command::Train {
            source,
            target,
            config,
            out,
        } => run_train(&source, &target, &load_config(config.as_deref())?, &out),
        Command::Eval {
            model,
            manifest,
            out,
        } => run_eval(&model, &manifest, out.as_deref()),
        Command::Report {
            filter,
            run,
            eval,
            out,
        } => report(filter.as_deref(), run.as_deref(), eval.as_deref(), &out),
    }
}
