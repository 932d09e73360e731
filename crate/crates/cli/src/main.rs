mod overlay;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cascade_core::coarse::{build_coarse, train_coarse, CoarseModel};
use cascade_core::fine::{build_fine, train_fine, FineModel};
use cascade_core::losses::{g_grid, linspace};
use cascade_core::metrics::report::{read_model_table, summarize, write_case_csv, write_rank_csv, CohortSummary};
use cascade_core::metrics::{evaluate_case, match_lesions, rank_models, LesionCounts, MatchRule, Units};
use cascade_core::pipeline::{
    crossval, load_dataset, prepare_subject, run_pipeline_detailed, write_phantom_dataset, PipelineConfig,
    PreparedSubject, Stage, Subject,
};
use cascade_core::preprocessing::{split_subjects, ManifestEntry};
use cascade_core::volume::nifti::{load_labels, load_volume, save_labels, save_volume};
use cascade_core::volume::Connectivity;

#[derive(Parser)]
#[command(name = "cascade", version, about = "Coarse-to-fine cerebral aneurysm segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML pipeline configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vessel extraction, normalization, contours, dilated targets and VOI manifest.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the coarse detector on a dataset.
    TrainCoarse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Weights archive to write; the step log goes next to it.
        #[arg(long)]
        out: PathBuf,
        /// Restrict training to these subject ids.
        #[arg(long = "subject")]
        subjects: Vec<String>,
    },
    /// Train the fine segmentation network on ground-truth-centered VOIs.
    TrainFine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "subject")]
        subjects: Vec<String>,
        /// Validate on the training VOIs instead of a held-out split.
        #[arg(long)]
        overfit: bool,
    },
    /// Run the full coarse-to-fine flow on one image.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        fine: PathBuf,
        /// Output mask (NIfTI).
        #[arg(long)]
        out: PathBuf,
        /// Maximum-intensity projection with the mask overlaid (PNG).
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Candidate list (JSON).
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Per-case DSC/HD/VS and lesion detection counts.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        id: Vec<String>,
        #[arg(long, value_enum, default_value = "voxel")]
        units: UnitsArg,
        /// Case CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cohort summary and lesion counts (JSON).
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Rank models from a model-by-metric CSV.
    Rank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the weight factor G(x, y) = -(1 - x)^y.
    Figure4 {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 101)]
        points: usize,
        /// Exponents; defaults to 0.1, 0.2, ..., 1.0.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        ys: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Subject-level k-fold cross-validation of one stage.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage: Stage,
        /// Report directory; defaults to `<output_dir>/crossval-<stage>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum UnitsArg {
    Voxel,
    Mm,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { common, n, out } => {
            let cfg = common.load()?;
            let m = write_phantom_dataset(&out, &cfg.phantom, n)?;
            println!("wrote {} phantoms to {}", m.subjects.len(), out.display());
        }
        Command::Preprocess { common, data, out } => preprocess(&common.load()?, &data, &out)?,
        Command::TrainCoarse {
            common,
            data,
            out,
            subjects,
        } => {
            let cfg = common.load()?;
            let prepared = prepare_all(&select(load_dataset(&data)?, &subjects)?, &cfg)?;
            let mut model = build_coarse(&cfg.coarse)?;
            let cohort: Vec<_> = prepared.iter().map(|p| p.coarse_subject()).collect();
            train_coarse(&mut model, &cohort)?;
            model.save(&out)?;
            write_rows(&out.with_extension("log.csv"), &model.log)?;
            println!("saved coarse weights to {}", out.display());
        }
        Command::TrainFine {
            common,
            data,
            out,
            subjects,
            overfit,
        } => {
            let cfg = common.load()?;
            let prepared = prepare_all(&select(load_dataset(&data)?, &subjects)?, &cfg)?;
            let model = fit_fine(&prepared, &cfg, overfit)?;
            model.save(&out)?;
            write_rows(&out.with_extension("log.csv"), &model.log)?;
            let summary = out.with_extension("summary.txt");
            fs::write(&summary, model.summary(cfg.preprocess.voi_size))
                .with_context(|| format!("writing {}", summary.display()))?;
            println!("saved fine weights to {}", out.display());
        }
        Command::Predict {
            common,
            image,
            coarse,
            fine,
            out,
            overlay,
            candidates,
        } => {
            let cfg = common.load()?;
            let img = load_volume(&image)?;
            let coarse = CoarseModel::load(&coarse)?;
            let fine = FineModel::load(&fine)?;
            let res = run_pipeline_detailed(&img, &coarse, &fine, &cfg)?;
            save_labels(&res.mask, &out)?;
            if let Some(p) = candidates {
                write_json(&p, &res.candidates)?;
            }
            if let Some(p) = overlay {
                overlay::write_mip_overlay(&img, &res.mask, &p)?;
            }
            println!(
                "{} candidates, {} lesion voxels -> {}",
                res.candidates.len(),
                res.mask.count_set(),
                out.display()
            );
        }
        Command::Evaluate {
            common,
            gt,
            pred,
            id,
            units,
            out,
            json,
        } => {
            common.load()?;
            evaluate(&gt, &pred, &id, units, out.as_deref(), json.as_deref())?
        }
        Command::Rank { common, table, out } => {
            common.load()?;
            let f = fs::File::open(&table).with_context(|| format!("opening {}", table.display()))?;
            let (models, cols) = read_model_table(f)?;
            let t = rank_models(&models, &cols)?;
            let mut buf = Vec::new();
            write_rank_csv(&mut buf, &t)?;
            match out {
                Some(p) => fs::write(&p, &buf).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::stdout().write_all(&buf)?,
            }
            let scores: Vec<String> = t.scores.iter().map(|s| format!("{:.4}", s + 0.0)).collect();
            println!("rank: [{}]", scores.join(", "));
        }
        Command::Figure4 {
            common,
            points,
            ys,
            out,
        } => {
            common.load()?;
            let ys = if ys.is_empty() {
                (1..=10).map(|k| k as f64 / 10.0).collect()
            } else {
                ys
            };
            let grid = g_grid(&linspace(0.0, 1.0, points), &ys)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["x", "y", "g"])?;
            for (x, y, g) in grid {
                w.write_record([format!("{x:.6}"), format!("{y:.6}"), format!("{:.9}", g + 0.0)])?;
            }
            let buf = w.into_inner()?;
            match out {
                Some(p) => fs::write(&p, &buf).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::stdout().write_all(&buf)?,
            }
        }
        Command::Crossval {
            common,
            data,
            stage,
            out,
        } => {
            let cfg = common.load()?;
            let subjects = load_dataset(&data)?;
            let report = crossval(&subjects, &cfg, stage)?;
            let dir = out.unwrap_or_else(|| {
                cfg.output_dir.join(match stage {
                    Stage::Coarse => "crossval-coarse",
                    Stage::Fine => "crossval-fine",
                })
            });
            report.export(&dir)?;
            for (m, s) in report.rank.models.iter().zip(&report.rank.scores) {
                println!("{m}: {s:.4}");
            }
            println!("best fold: {} (reports in {})", report.best_fold + 1, dir.display());
        }
    }
    Ok(())
}

fn select(all: Vec<Subject>, ids: &[String]) -> Result<Vec<Subject>> {
    if ids.is_empty() {
        return Ok(all);
    }
    for id in ids {
        if !all.iter().any(|s| &s.id == id) {
            bail!("subject {id:?} is not in the dataset");
        }
    }
    Ok(all.into_iter().filter(|s| ids.contains(&s.id)).collect())
}

fn prepare_all(subjects: &[Subject], cfg: &PipelineConfig) -> Result<Vec<PreparedSubject>> {
    if subjects.is_empty() {
        bail!("dataset has no subjects");
    }
    subjects
        .iter()
        .map(|s| {
            let p = prepare_subject(s, &cfg.preprocess).with_context(|| format!("preparing {}", s.id))?;
            for w in &p.prep.warnings {
                log::warn!("{}: {w}", s.id);
            }
            Ok(p)
        })
        .collect()
}

fn fit_fine(prepared: &[PreparedSubject], cfg: &PipelineConfig, overfit: bool) -> Result<FineModel> {
    let (train_ids, val_ids) = if overfit {
        let ids: Vec<String> = prepared.iter().map(|p| p.id.clone()).collect();
        (ids.clone(), ids)
    } else {
        let ids: Vec<String> = prepared.iter().map(|p| p.id.clone()).collect();
        split_subjects(&ids, cfg.preprocess.split_ratio, cfg.preprocess.rng_seed)?
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for p in prepared {
        if train_ids.contains(&p.id) {
            train.extend(p.fine_samples(&cfg.preprocess, cfg.augment_fine && !overfit)?);
        }
        if val_ids.contains(&p.id) {
            val.extend(p.fine_samples(&cfg.preprocess, false)?);
        }
    }
    log::info!("fine training on {} VOIs, validating on {}", train.len(), val.len());
    let mut model = build_fine(&cfg.fine)?;
    train_fine(&mut model, &train, &val, &cfg.loss)?;
    Ok(model)
}

fn preprocess(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<()> {
    let subjects = load_dataset(data)?;
    let prepared = prepare_all(&subjects, cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = Vec::new();
    for p in &prepared {
        save_labels(&p.prep.vessels, out.join(format!("{}_vessels.nii.gz", p.id)))?;
        save_volume(&p.prep.vessel_image, out.join(format!("{}_vessel_image.nii.gz", p.id)))?;
        save_volume(&p.prep.contour, out.join(format!("{}_contour.nii.gz", p.id)))?;
        save_labels(&p.dilated, out.join(format!("{}_coarse_target.nii.gz", p.id)))?;
        manifest.extend(p.fine_samples(&cfg.preprocess, false)?.iter().map(ManifestEntry::from));
    }
    write_json(&out.join("vois.json"), &manifest)?;
    println!(
        "prepared {} subjects, {} VOIs -> {}",
        prepared.len(),
        manifest.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationSummary {
    summary: CohortSummary,
    lesions: LesionCounts,
    sensitivity: Option<f64>,
    fp_per_case: f64,
    ppv: Option<f64>,
}

fn evaluate(
    gt: &[PathBuf],
    pred: &[PathBuf],
    ids: &[String],
    units: UnitsArg,
    out: Option<&Path>,
    json: Option<&Path>,
) -> Result<()> {
    if gt.len() != pred.len() || (!ids.is_empty() && ids.len() != gt.len()) {
        bail!("--gt, --pred and --id must be given the same number of times");
    }
    let units = match units {
        UnitsArg::Voxel => Units::Voxel,
        UnitsArg::Mm => Units::Mm,
    };
    let mut rows = Vec::new();
    let mut counts = LesionCounts::default();
    for (k, (g, p)) in gt.iter().zip(pred).enumerate() {
        let gl = cascade_core::preprocessing::remap_ruptured(&load_labels(g)?)?;
        let pl = load_labels(p)?.binarized();
        let id = ids.get(k).cloned().unwrap_or_else(|| stem(p));
        rows.push((id, evaluate_case(&gl, &pl, units)?));
        counts += match_lesions(&gl, &pl, Connectivity::TwentySix, MatchRule::Overlap)?;
    }
    let mut buf = Vec::new();
    write_case_csv(&mut buf, &rows)?;
    match out {
        Some(p) => fs::write(p, &buf).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(&buf)?,
    }
    if let Some(p) = json {
        let s = EvaluationSummary {
            summary: summarize(&rows),
            sensitivity: cascade_core::metrics::sensitivity(&counts),
            fp_per_case: cascade_core::metrics::fp_per_case(&counts)?,
            ppv: cascade_core::metrics::ppv(&counts),
            lesions: counts,
        };
        write_json(p, &s)?;
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    let name = p
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

fn write_json<T: Serialize + ?Sized>(p: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v)?;
    fs::write(p, s).with_context(|| format!("writing {}", p.display()))
}

fn write_rows<T: Serialize>(p: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
