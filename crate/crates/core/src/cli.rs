//! `oscxr` command line: synth, train, eval, gradcam, report.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
//! training failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::data::{hflip, load_image, save_gray_png, save_rgb_png, synth_generate, Dataset, DatasetManifest, SynthConfig};
use crate::error::{Error, Result};
use crate::gradcam::{flip_experiment, gradcam, heatmap_gray, overlay, CamConfig, Heatmap};
use crate::metrics::MetricsReport;
use crate::nn::{Checkpoint, ModelSpec};
use crate::train::{cross_validate, predict_indices, MeanStd, RunSummary, TrainConfig};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "oscxr", version, about = "COVID-19 chest X-ray classifier with an orthogonal-spheres regularizer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic three-class dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 256)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cross-validate (or train one fold) and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Enable flip/translate augmentation (config values, else defaults).
        #[arg(long)]
        augment: bool,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train only this fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Evaluate a checkpoint on every record of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a Grad-CAM heatmap and overlay for one image.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "class")]
        class_id: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also map the mirrored image and summarize the difference.
        #[arg(long)]
        flip_experiment: bool,
    },
    /// Tabulate one or more run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Ingestion { .. } | Error::Checkpoint(_) | Error::Io { .. } => EXIT_USAGE,
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::Dimension { .. } | Error::Contract { .. } => {
            EXIT_RUNTIME
        }
    }
}

/// Parses `args` (including the program name), runs the command and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            per_class,
            side,
            seed,
        } => cmd_synth(&out, per_class, side, seed),
        Command::Train {
            config,
            manifest,
            out,
            k,
            lambda,
            augment,
            folds,
            seed,
            fold,
        } => {
            let overrides = TrainOverrides {
                k,
                lambda,
                augment,
                folds,
                seed,
            };
            cmd_train(&config, &manifest, &out, &overrides, fold).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => cmd_eval(&checkpoint, &manifest, &out).map(|_| ()),
        Command::Gradcam {
            checkpoint,
            image,
            class_id,
            out,
            flip_experiment,
        } => cmd_gradcam(&checkpoint, &image, class_id, &out, flip_experiment),
        Command::Report { runs, out } => cmd_report(&runs, &out),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_synth(out: &Path, per_class: usize, side: usize, seed: u64) -> Result<()> {
    let m = synth_generate(
        &SynthConfig {
            n_per_class: per_class,
            classes: 3,
            image_side: side,
            seed,
        },
        out,
    )?;
    info!("wrote {} images to {}", m.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub augment: bool,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(k) = self.k {
            cfg.os.k = k;
            cfg.os_enabled = true;
        }
        if let Some(l) = self.lambda {
            cfg.os.lambda = l;
        }
        if self.augment && cfg.augment.is_none() {
            cfg.augment = Some(Default::default());
        }
        if let Some(f) = self.folds {
            cfg.folds = f;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn cmd_train(
    config: &Path,
    manifest: &Path,
    out: &Path,
    overrides: &TrainOverrides,
    fold: Option<usize>,
) -> Result<RunSummary> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let mut cfg = TrainConfig::from_toml(&text)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let m = DatasetManifest::load(manifest)?;
    let spec = ModelSpec::darkcovidnet(m.num_classes(), cfg.model_os_k(), cfg.profile)?;
    if cfg.os_enabled {
        cfg.os.validate(spec.flatten_len()?)?;
    }
    let (started, clock) = (unix_now(), Instant::now());
    let ds = Dataset::load(&m, cfg.profile.image_side)?;
    let n_params = spec.trainable_param_count()?;
    info!(
        "training {} on {} images ({:?}), {n_params} trainable parameters",
        cfg.label(),
        ds.len(),
        m.class_counts()
    );
    let summary = cross_validate(&ds, &cfg, Some(out), fold)?;
    let meta = format!(
        "started_unix\t{started:.3}\nfinished_unix\t{:.3}\nelapsed_seconds\t{:.3}\ntrainable_parameters\t{n_params}\n",
        unix_now(),
        clock.elapsed().as_secs_f64()
    );
    write_text(&out.join("metadata.txt"), &meta)?;
    println!(
        "{}: accuracy {:.4} ± {:.4} over {} fold(s)",
        summary.label,
        summary.aggregate.accuracy.mean,
        summary.aggregate.accuracy.std,
        summary.folds.len()
    );
    Ok(summary)
}

pub fn metrics_text(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "samples\t{}", r.samples);
    let _ = writeln!(s, "accuracy\t{:.6}", r.accuracy);
    let _ = writeln!(s, "precision\t{:.6}", r.precision);
    let _ = writeln!(s, "recall\t{:.6}", r.recall);
    let _ = writeln!(s, "f1\t{:.6}", r.f1);
    let _ = writeln!(s, "ece\t{:.6}", r.calibration.ece);
    let _ = writeln!(s, "oe\t{:.6}", r.calibration.oe);
    let _ = writeln!(s, "brier\t{:.6}", r.calibration.brier);
    let _ = writeln!(s, "\nconfusion (rows true, columns predicted)");
    let _ = writeln!(s, "\t{}", r.class_names.join("\t"));
    for (name, row) in r.class_names.iter().zip(&r.confusion.counts) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "{name}\t{}", cells.join("\t"));
    }
    let _ = writeln!(s, "\ncalibration bins\nlower\tupper\tcount\taccuracy\tconfidence");
    for b in &r.calibration.bins {
        let _ = writeln!(
            s,
            "{:.2}\t{:.2}\t{}\t{:.6}\t{:.6}",
            b.lower, b.upper, b.count, b.accuracy, b.confidence
        );
    }
    s
}

pub fn cmd_eval(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<MetricsReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let m = DatasetManifest::load(manifest)?;
    if m.classes != ck.meta.class_names {
        return Err(Error::Config(format!(
            "manifest classes {:?} do not match checkpoint classes {:?}",
            m.classes, ck.meta.class_names
        )));
    }
    let spec = ck.meta.model_spec()?;
    let ds = Dataset::load(&m, spec.image_side)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let probs: Vec<Vec<f64>> = predict_indices(&spec, &ck.params, &ds, &all)?
        .into_iter()
        .map(|r| r.into_iter().map(f64::exp).collect())
        .collect();
    let report = MetricsReport::from_probs(&probs, &ds.labels(), &m.classes)?;
    mkdir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_text(&out.join("metrics.txt"), &metrics_text(&report))?;
    println!("accuracy {:.4}, brier {:.4}", report.accuracy, report.calibration.brier);
    Ok(report)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn write_cam(out: &Path, stem: &str, image: &crate::autodiff::Tensor<f32>, h: &Heatmap) -> Result<()> {
    save_gray_png(&out.join(format!("{stem}_cam.png")), &heatmap_gray(h), h.width, h.height)?;
    save_rgb_png(&out.join(format!("{stem}_overlay.png")), &overlay(image, h, OVERLAY_ALPHA)?)
}

#[derive(Debug, Serialize)]
struct FlipReportFile {
    image: String,
    class_id: usize,
    class_name: String,
    centroid_displacement: f64,
    l1_gap: f64,
    central_mass_original: f64,
    central_mass_flipped: f64,
}

pub fn cmd_gradcam(checkpoint: &Path, image: &Path, class_id: usize, out: &Path, flip: bool) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let spec = ck.meta.model_spec()?;
    if class_id >= spec.num_classes {
        return Err(Error::Config(format!(
            "class {class_id} out of range for {} classes",
            spec.num_classes
        )));
    }
    let img = load_image(image, spec.image_side)?;
    let id = file_stem(image);
    let class_name = ck.meta.class_names[class_id].clone();
    mkdir(out)?;
    let cfg = CamConfig::default();
    if flip {
        let summary = flip_experiment(&spec, &ck.params, std::slice::from_ref(&img), Some(class_id), &cfg)?;
        let pair = &summary.pairs[0];
        write_cam(out, &format!("{id}_{class_name}"), &img, &pair.original)?;
        write_cam(out, &format!("{id}_flipped_{class_name}"), &hflip(&img), &pair.flipped)?;
        write_json(
            &out.join(format!("{id}_{class_name}_flip.json")),
            &FlipReportFile {
                image: id.clone(),
                class_id,
                class_name: class_name.clone(),
                centroid_displacement: pair.centroid_displacement,
                l1_gap: pair.l1_gap,
                central_mass_original: pair.central_mass_original,
                central_mass_flipped: pair.central_mass_flipped,
            },
        )?;
        println!(
            "centroid displacement {:.3} px, L1 gap {:.5}",
            pair.centroid_displacement, pair.l1_gap
        );
    } else {
        let h = gradcam(&spec, &ck.params, &img, class_id, &cfg)?;
        write_cam(out, &format!("{id}_{class_name}"), &img, &h)?;
    }
    Ok(())
}

struct ReportRow {
    name: String,
    summary: RunSummary,
}

fn fmt_ms(m: &MeanStd) -> String {
    format!("{:.4} ± {:.4}", m.mean, m.std)
}

pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = Vec::with_capacity(runs.len());
    let mut bad = Vec::new();
    for dir in runs {
        match RunSummary::load(&dir.join("metrics.json")) {
            Ok(summary) if !summary.folds.is_empty() => rows.push(ReportRow {
                name: dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| dir.display().to_string()),
                summary,
            }),
            _ => bad.push(dir.display().to_string()),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Config(format!("malformed run directories: {}", bad.join(", "))));
    }
    rows.sort_by(|a, b| {
        a.summary
            .k
            .cmp(&b.summary.k)
            .then(a.summary.lambda.total_cmp(&b.summary.lambda))
            .then_with(|| a.name.cmp(&b.name))
    });

    let cols = ["accuracy", "precision", "recall", "f1", "ece", "oe", "brier"];
    let pick = |s: &RunSummary| {
        let a = &s.aggregate;
        [a.accuracy, a.precision, a.recall, a.f1, a.ece, a.oe, a.brier]
    };
    let k_str = |k: Option<usize>| k.map_or("-".to_string(), |k| k.to_string());

    let mut text = String::new();
    let _ = writeln!(text, "run\tlabel\tk\tlambda\tfolds\t{}", cols.join("\t"));
    let mut tsv = String::new();
    let _ = write!(tsv, "run\tlabel\tk\tlambda\taugment\tfolds");
    for c in cols {
        let _ = write!(tsv, "\t{c}_mean\t{c}_std");
    }
    tsv.push('\n');
    for r in &rows {
        let s = &r.summary;
        let vals = pick(s);
        let cells: Vec<String> = vals.iter().map(fmt_ms).collect();
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.name,
            s.label,
            k_str(s.k),
            s.lambda,
            s.folds.len(),
            cells.join("\t")
        );
        let _ = write!(
            tsv,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.name,
            s.label,
            k_str(s.k),
            s.lambda,
            s.augment,
            s.folds.len()
        );
        for v in vals {
            let _ = write!(tsv, "\t{}\t{}", v.mean, v.std);
        }
        tsv.push('\n');
    }
    for r in &rows {
        let s = &r.summary;
        let _ = writeln!(text, "\n{} ({})", r.name, s.label);
        let _ = writeln!(text, "fold\taccuracy\tprecision\trecall\tf1\tece\toe\tbrier");
        for f in &s.folds {
            let m = &f.report;
            let _ = writeln!(
                text,
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                f.fold, m.accuracy, m.precision, m.recall, m.f1, m.calibration.ece, m.calibration.oe, m.calibration.brier
            );
        }
        let names = &s.folds[0].report.class_names;
        let k = names.len();
        let mut total = vec![vec![0u64; k]; k];
        for f in &s.folds {
            for (t, row) in f.report.confusion.counts.iter().enumerate() {
                for (p, c) in row.iter().enumerate() {
                    total[t][p] += c;
                }
            }
        }
        let _ = writeln!(text, "confusion summed over folds (rows true, columns predicted)");
        let _ = writeln!(text, "\t{}", names.join("\t"));
        for (name, row) in names.iter().zip(&total) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(text, "{name}\t{}", cells.join("\t"));
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    write_text(out, &text)?;
    write_text(&out.with_extension("tsv"), &tsv)?;
    println!("{} run(s) written to {}", rows.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let mut cfg = TrainConfig::default();
        TrainOverrides {
            k: Some(4),
            lambda: Some(1.0),
            augment: true,
            folds: Some(3),
            seed: Some(9),
        }
        .apply(&mut cfg);
        assert_eq!((cfg.os.k, cfg.os.lambda, cfg.folds, cfg.seed), (4, 1.0, 3, 9));
        assert!(cfg.augment.is_some());
        assert_eq!(cfg.label(), "baseline+Aug");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Diverged {
                step: 1,
                detail: "nan".into()
            }),
            3
        );
    }

    #[test]
    fn cli_surface_parses() {
        let c = Cli::try_parse_from(["oscxr", "synth", "--out", "d", "--per-class", "3"]).unwrap();
        assert!(matches!(c.command, Command::Synth { side: 256, seed: 0, .. }));
        assert!(Cli::try_parse_from(["oscxr", "report", "--out", "r.txt"]).is_err());
    }
}
