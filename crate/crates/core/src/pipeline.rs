//! End-to-end orchestration: subject preparation, the coarse-to-fine
//! inference flow, subject-level cross-validation and phantom datasets.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coarse::{
    build_coarse, extract_candidates, predict_coarse_probs, train_coarse, CandidateRegion, CoarseConfig, CoarseModel,
    CoarseSubject,
};
use crate::error::{Error, Result};
use crate::fine::{build_fine, predict_fine, train_fine, voi_input, FineConfig, FineModel};
use crate::losses::LossParams;
use crate::metrics::{
    evaluate_case, fp_per_case, match_lesions, ppv, rank_models, sensitivity, LesionCounts, MatchRule, MetricColumn,
    MetricsReport, Orientation, RankTable, Units,
};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::preprocessing::{
    adaptive_dilate_labels, augment, crop_at, crop_voi_samples, prepare_image, remap_ruptured, Prepared,
    PreprocessConfig, VoiCrop,
};
use crate::volume::nifti::{load_labels, load_volume, save_labels, save_volume};
use crate::volume::{connected_components, paste_with};
use crate::volume::{Connectivity, LabelVolume, Mask, Volume3D};

/// How overlapping VOI predictions are merged into the full volume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeRule {
    #[default]
    Or,
    /// Voxelwise maximum of the lesion probability, then thresholded.
    MaxProb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    pub loss: LossParams,
    pub folds: usize,
    pub output_dir: PathBuf,
    pub rng_seed: u64,
    pub merge: MergeRule,
    /// Expand fine-stage training VOIs with the augmentation recipes.
    pub augment_fine: bool,
    /// Synthetic cohort settings for the `phantom` command.
    pub phantom: PhantomSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            preprocess: PreprocessConfig::default(),
            coarse: CoarseConfig::default(),
            fine: FineConfig::default(),
            loss: LossParams::default(),
            folds: 5,
            output_dir: PathBuf::from("runs"),
            rng_seed: 0,
            merge: MergeRule::Or,
            augment_fine: true,
            phantom: PhantomSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        self.preprocess.validate()?;
        self.coarse.validate()?;
        self.fine.validate()?;
        self.phantom.validate()?;
        self.loss.validate()
    }

    /// Parses and validates a TOML document. Syntax and schema errors carry
    /// the line and column of the offending key.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span().map(|sp| line_col(s, sp.start)) {
                Some((l, c)) => Error::Config(format!("line {l}, column {c}: {msg}")),
                None => Error::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let s = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self.preprocess.rng_seed = seed;
        self.coarse.rng_seed = seed;
        self.fine.rng_seed = seed;
        self.phantom.rng_seed = seed;
        self
    }
}

fn line_col(s: &str, offset: usize) -> (usize, usize) {
    let before = &s[..offset.min(s.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// A raw subject: image and label map (0, 1 unruptured, 2 ruptured).
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub image: Volume3D,
    pub label: LabelVolume,
}

#[derive(Clone, Debug)]
pub struct PreparedSubject {
    pub id: String,
    pub prep: Prepared,
    /// Binary lesion map with ruptured lesions as background.
    pub label: LabelVolume,
    /// Coarse-stage target: `label` adaptively dilated.
    pub dilated: LabelVolume,
}

pub fn prepare_subject(s: &Subject, cfg: &PreprocessConfig) -> Result<PreparedSubject> {
    s.image.ensure_same_dims(&s.label, "image vs label")?;
    let prep = prepare_image(&s.image, None, cfg)?;
    let label = remap_ruptured(&s.label)?;
    let dilated = adaptive_dilate_labels(&label, cfg)?;
    Ok(PreparedSubject {
        id: s.id.clone(),
        prep,
        label,
        dilated,
    })
}

impl PreparedSubject {
    pub fn coarse_subject(&self) -> CoarseSubject {
        CoarseSubject {
            image: self.prep.vessel_image.clone(),
            target: self.dilated.clone(),
            roi: Some(self.prep.vessels.clone()),
        }
    }

    /// VOIs centered on the ground-truth lesions.
    pub fn fine_samples(&self, cfg: &PreprocessConfig, augmented: bool) -> Result<Vec<VoiCrop>> {
        let base = crop_voi_samples(
            &self.prep.vessel_image,
            &self.prep.contour,
            &self.label,
            Some(&self.prep.vessels),
            cfg,
            &self.id,
        )?;
        Ok(if augmented {
            base.iter()
                .flat_map(|s| augment(s, &cfg.augmentation_recipes))
                .collect()
        } else {
            base
        })
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub mask: LabelVolume,
    pub coarse_mask: Mask,
    pub candidates: Vec<CandidateRegion>,
    pub warnings: Vec<String>,
}

/// Coarse detection, then fine segmentation of a VOI around each candidate,
/// pasted back at the crop placement.
pub fn run_pipeline_detailed(
    image: &Volume3D,
    coarse: &CoarseModel,
    fine: &FineModel,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    if fine.cfg.in_channels != 2 {
        return Err(Error::Shape(format!(
            "fine model takes {} channels; the pipeline supplies 2",
            fine.cfg.in_channels
        )));
    }
    let prep = prepare_image(image, None, &cfg.preprocess)?;
    let (coarse_mask, probs) = predict_coarse_probs(coarse, &prep.vessel_image)?;
    let candidates = extract_candidates(&coarse_mask, Some(&probs), coarse.cfg.min_candidate_size)?;
    let empty = LabelVolume::filled(*image.geometry(), 0);
    let size = cfg.preprocess.voi_size;
    let mut mask = empty.clone();
    let mut fg_prob = Volume3D::filled(*image.geometry(), 0.0);
    for c in &candidates {
        let voi = crop_at(&prep.vessel_image, &prep.contour, &empty, c.center, size, "candidate")?;
        match cfg.merge {
            MergeRule::Or => {
                let pred = predict_fine(fine, &voi)?;
                paste_with(&mut mask, &pred, &voi.placement, |a, b| a | b)?;
            }
            MergeRule::MaxProb => {
                let p = fine.predict_probs(voi_input(&voi)?)?;
                let fg = voi.image.with_data(p.channel(1).to_vec())?;
                paste_with(&mut fg_prob, &fg, &voi.placement, f32::max)?;
            }
        }
    }
    if cfg.merge == MergeRule::MaxProb {
        // two-class argmax with ties to background
        mask = fg_prob.map(|p| (p > 0.5) as u8);
    }
    Ok(PipelineOutput {
        mask,
        coarse_mask,
        candidates,
        warnings: prep.warnings,
    })
}

pub fn run_pipeline(
    image: &Volume3D,
    coarse: &CoarseModel,
    fine: &FineModel,
    cfg: &PipelineConfig,
) -> Result<LabelVolume> {
    Ok(run_pipeline_detailed(image, coarse, fine, cfg)?.mask)
}

/// Seeded subject-level fold index for each entry of `ids`; every subject
/// lands in exactly one fold and fold sizes differ by at most one.
pub fn fold_assignment(ids: &[String], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let uniq: BTreeSet<&String> = ids.iter().collect();
    if uniq.len() != ids.len() {
        return Err(Error::Invalid("subject ids must be unique".into()));
    }
    if folds < 2 || ids.len() < folds {
        return Err(Error::Invalid(format!(
            "{} subjects cannot fill {folds} folds",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; ids.len()];
    for (k, &i) in order.iter().enumerate() {
        fold[i] = k % folds;
    }
    Ok(fold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "fine" => Ok(Stage::Fine),
            _ => Err(Error::Invalid(format!("unknown stage {s:?}; expected coarse or fine"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub val_subjects: Vec<String>,
    /// Metric name and value, in ranking order.
    pub metrics: Vec<(String, Option<f64>)>,
    pub lesions: Option<LesionCounts>,
    pub cases: Vec<(String, MetricsReport)>,
}

pub enum TrainedModel {
    Coarse(CoarseModel),
    Fine(FineModel),
}

impl TrainedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            TrainedModel::Coarse(m) => m.save(path),
            TrainedModel::Fine(m) => m.save(path),
        }
    }
}

pub struct CrossvalReport {
    pub stage: Stage,
    pub folds: Vec<FoldReport>,
    pub rank: RankTable,
    pub best_fold: usize,
    pub best_model: TrainedModel,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn coarse_fold(
    train: &[&PreparedSubject],
    val: &[&PreparedSubject],
    cfg: &PipelineConfig,
) -> Result<(CoarseModel, FoldReport)> {
    let mut model = build_coarse(&cfg.coarse)?;
    let cohort: Vec<CoarseSubject> = train.iter().map(|s| s.coarse_subject()).collect();
    train_coarse(&mut model, &cohort)?;
    let mut counts = LesionCounts::default();
    for s in val {
        let (mask, _) = predict_coarse_probs(&model, &s.prep.vessel_image)?;
        counts += match_lesions(&s.label, &mask, Connectivity::TwentySix, MatchRule::Overlap)?;
    }
    let metrics = vec![
        ("sensitivity".to_string(), sensitivity(&counts)),
        ("fp_per_case".to_string(), Some(fp_per_case(&counts)?)),
        ("ppv".to_string(), ppv(&counts)),
    ];
    let report = FoldReport {
        fold: 0,
        val_subjects: val.iter().map(|s| s.id.clone()).collect(),
        metrics,
        lesions: Some(counts),
        cases: Vec::new(),
    };
    Ok((model, report))
}

fn fine_fold(
    train: &[&PreparedSubject],
    val: &[&PreparedSubject],
    cfg: &PipelineConfig,
) -> Result<(FineModel, FoldReport)> {
    let mut model = build_fine(&cfg.fine)?;
    let mut train_vois = Vec::new();
    for s in train {
        train_vois.extend(s.fine_samples(&cfg.preprocess, cfg.augment_fine)?);
    }
    let mut val_vois = Vec::new();
    for s in val {
        val_vois.extend(s.fine_samples(&cfg.preprocess, false)?);
    }
    train_fine(&mut model, &train_vois, &val_vois, &cfg.loss)?;
    let mut cases = Vec::new();
    for v in &val_vois {
        let pred = predict_fine(&model, v)?;
        cases.push((v.subject_id.clone(), evaluate_case(&v.label, &pred, Units::Voxel)?));
    }
    let dsc: Vec<f64> = cases.iter().map(|c| c.1.dsc).collect();
    let hd: Vec<f64> = cases.iter().filter_map(|c| c.1.hd).collect();
    let vs: Vec<f64> = cases.iter().map(|c| c.1.vs).collect();
    let report = FoldReport {
        fold: 0,
        val_subjects: val.iter().map(|s| s.id.clone()).collect(),
        metrics: vec![
            ("dsc".to_string(), mean(&dsc)),
            ("hd".to_string(), mean(&hd)),
            ("vs".to_string(), mean(&vs)),
        ],
        lesions: None,
        cases,
    };
    Ok((model, report))
}

/// K-fold cross-validation by subject. Each fold trains a fresh model on
/// the other folds; the folds are then ranked against each other and the
/// best-ranked fold's model is returned.
pub fn crossval(subjects: &[Subject], cfg: &PipelineConfig, stage: Stage) -> Result<CrossvalReport> {
    cfg.validate()?;
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let assign = fold_assignment(&ids, cfg.folds, cfg.rng_seed)?;
    let prepared = subjects
        .iter()
        .map(|s| prepare_subject(s, &cfg.preprocess))
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    let mut models = Vec::new();
    for f in 0..cfg.folds {
        let train: Vec<&PreparedSubject> = prepared
            .iter()
            .zip(&assign)
            .filter(|p| *p.1 != f)
            .map(|p| p.0)
            .collect();
        let val: Vec<&PreparedSubject> = prepared
            .iter()
            .zip(&assign)
            .filter(|p| *p.1 == f)
            .map(|p| p.0)
            .collect();
        log::info!(
            "{stage:?} fold {}/{}: {} train, {} val subjects",
            f + 1,
            cfg.folds,
            train.len(),
            val.len()
        );
        let (model, mut report) = match stage {
            Stage::Coarse => {
                let (m, r) = coarse_fold(&train, &val, cfg)?;
                (TrainedModel::Coarse(m), r)
            }
            Stage::Fine => {
                let (m, r) = fine_fold(&train, &val, cfg)?;
                (TrainedModel::Fine(m), r)
            }
        };
        report.fold = f;
        reports.push(report);
        models.push(model);
    }
    let rank = rank_folds(&reports)?;
    let best_fold = rank.best();
    let best_model = models.swap_remove(best_fold);
    Ok(CrossvalReport {
        stage,
        folds: reports,
        rank,
        best_fold,
        best_model,
    })
}

pub fn rank_folds(reports: &[FoldReport]) -> Result<RankTable> {
    let models: Vec<String> = reports.iter().map(|r| format!("fold{}", r.fold + 1)).collect();
    let first = reports
        .first()
        .ok_or_else(|| Error::Invalid("no fold reports".into()))?;
    let columns = first
        .metrics
        .iter()
        .enumerate()
        .map(|(m, (name, _))| MetricColumn {
            name: name.clone(),
            orientation: Orientation::for_metric(name).unwrap_or(Orientation::HigherBetter),
            values: reports.iter().map(|r| r.metrics[m].1).collect(),
        })
        .collect::<Vec<_>>();
    rank_models(&models, &columns)
}

impl CrossvalReport {
    /// Writes `folds.json`, `rank.csv` and the best fold's weights under `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let folds = dir.join("folds.json");
        let json = serde_json::to_string_pretty(&self.folds)?;
        fs::write(&folds, json).map_err(|e| Error::io(&folds, e))?;
        let rank = dir.join("rank.csv");
        let f = fs::File::create(&rank).map_err(|e| Error::io(&rank, e))?;
        crate::metrics::report::write_rank_csv(f, &self.rank)?;
        let name = match self.stage {
            Stage::Coarse => "best_coarse.bin",
            Stage::Fine => "best_fine.bin",
        };
        self.best_model.save(dir.join(name))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomRecord {
    pub subject_id: String,
    pub image: String,
    pub label: String,
    pub rng_seed: u64,
    pub lesions: usize,
    pub dims: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub spec: PhantomSpec,
    pub subjects: Vec<PhantomRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn phantom_subject(spec: &PhantomSpec, i: usize) -> Result<Subject> {
    let (image, label) = generate_phantom(&spec.for_subject(i))?;
    Ok(Subject {
        id: format!("phantom_{i:03}"),
        image,
        label,
    })
}

/// `n` phantoms as `<id>_image.nii.gz` / `<id>_label.nii.gz` plus a manifest.
pub fn write_phantom_dataset(dir: impl AsRef<Path>, spec: &PhantomSpec, n: usize) -> Result<PhantomManifest> {
    spec.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::new();
    for i in 0..n {
        let s = phantom_subject(spec, i)?;
        let image = format!("{}_image.nii.gz", s.id);
        let label = format!("{}_label.nii.gz", s.id);
        save_volume(&s.image, dir.join(&image))?;
        save_labels(&s.label, dir.join(&label))?;
        subjects.push(PhantomRecord {
            lesions: connected_components(&s.label, Connectivity::TwentySix).len(),
            dims: s.image.dims(),
            rng_seed: spec.for_subject(i).rng_seed,
            subject_id: s.id,
            image,
            label,
        });
    }
    let manifest = PhantomManifest {
        spec: spec.clone(),
        subjects,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every subject listed in `dir/manifest.json`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Subject>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PhantomManifest = serde_json::from_str(&text)?;
    manifest
        .subjects
        .iter()
        .map(|r| {
            Ok(Subject {
                id: r.subject_id.clone(),
                image: load_volume(dir.join(&r.image))?,
                label: load_labels(dir.join(&r.label))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let partial = PipelineConfig::from_toml_str("folds = 3\n[fine]\nbase_filters = 8\n").unwrap();
        assert_eq!(partial.folds, 3);
        assert_eq!(partial.fine.base_filters, 8);
        assert_eq!(partial.coarse, CoarseConfig::default());
    }

    #[test]
    fn config_errors_name_the_line() {
        let e = PipelineConfig::from_toml_str("folds = 3\n\n[fine]\nbase_filterz = 8\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 4"), "{msg}");
        assert!(msg.contains("base_filterz"), "{msg}");
        let e = PipelineConfig::from_toml_str("folds = 1\n").unwrap_err();
        assert!(e.to_string().contains("folds"));
        let e = PipelineConfig::from_toml_str("[loss]\nbeta = 2.0\n").unwrap_err();
        assert!(e.to_string().contains("beta"), "{e}");
    }

    #[test]
    fn seed_propagates() {
        let c = PipelineConfig::default().with_seed(11);
        assert_eq!(
            [
                c.rng_seed,
                c.preprocess.rng_seed,
                c.coarse.rng_seed,
                c.fine.rng_seed,
                c.phantom.rng_seed
            ],
            [11; 5]
        );
    }

    #[test]
    fn folds_partition_subjects() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let a = fold_assignment(&ids, 5, 3).unwrap();
        for f in 0..5 {
            assert_eq!(a.iter().filter(|&&x| x == f).count(), 2);
        }
        assert_eq!(a, fold_assignment(&ids, 5, 3).unwrap());
        assert!(fold_assignment(&ids[..4], 5, 3).is_err());
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(fold_assignment(&dup, 2, 0).is_err());
    }

    #[test]
    fn identical_folds_rank_zero() {
        let r = |fold| FoldReport {
            fold,
            val_subjects: vec![],
            metrics: vec![
                ("dsc".into(), Some(0.5)),
                ("hd".into(), Some(3.0)),
                ("vs".into(), Some(0.9)),
            ],
            lesions: None,
            cases: vec![],
        };
        let t = rank_folds(&[r(0), r(1), r(2)]).unwrap();
        assert_eq!(t.scores, vec![0.0; 3]);
        assert_eq!(t.models, vec!["fold1", "fold2", "fold3"]);
    }

    fn tiny_models() -> (CoarseModel, FineModel) {
        let c = CoarseConfig {
            hi_patch: [13; 3],
            conv_layers: 2,
            channels_per_layer: vec![4, 4],
            inference_tile: 15,
            ..Default::default()
        };
        let f = FineConfig {
            base_filters: 4,
            se_reduction: 2,
            depth: 3,
            ..Default::default()
        };
        (build_coarse(&c).unwrap(), build_fine(&f).unwrap())
    }

    fn small_phantom() -> Subject {
        let spec = PhantomSpec {
            volume_dims: [48; 3],
            aneurysm_radius: [3.0, 4.0],
            n_vessels: 2,
            rng_seed: 5,
            ..Default::default()
        };
        phantom_subject(&spec, 0).unwrap()
    }

    #[test]
    fn pipeline_output_matches_input_geometry() {
        let (coarse, fine) = tiny_models();
        let s = small_phantom();
        let cfg = PipelineConfig {
            preprocess: PreprocessConfig {
                voi_size: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = run_pipeline_detailed(&s.image, &coarse, &fine, &cfg).unwrap();
        assert_eq!(out.mask.geometry(), s.image.geometry());
        assert!(out.mask.data().iter().all(|&v| v <= 1));
        let merged = PipelineConfig {
            merge: MergeRule::MaxProb,
            ..cfg
        };
        let m2 = run_pipeline(&s.image, &coarse, &fine, &merged).unwrap();
        assert_eq!(m2.geometry(), s.image.geometry());
    }

    #[test]
    fn no_candidates_gives_empty_mask() {
        let (mut coarse, fine) = tiny_models();
        // push the head bias hard toward background
        let ids: Vec<_> = coarse.params.ids().collect();
        for id in ids {
            if coarse.params.name(id) == "head.bias" {
                let b = coarse.params.get_mut(id);
                b.data_mut().copy_from_slice(&[50.0, -50.0]);
            }
        }
        let s = small_phantom();
        let out = run_pipeline_detailed(&s.image, &coarse, &fine, &PipelineConfig::default()).unwrap();
        assert!(out.candidates.is_empty());
        assert_eq!(out.mask.count_set(), 0);
        assert_eq!(out.mask.dims(), s.image.dims());
    }

    #[test]
    fn rejects_single_channel_fine_model() {
        let (coarse, _) = tiny_models();
        let f = build_fine(&FineConfig {
            in_channels: 1,
            base_filters: 4,
            se_reduction: 2,
            depth: 3,
            ..Default::default()
        })
        .unwrap();
        let s = small_phantom();
        assert!(run_pipeline(&s.image, &coarse, &f, &PipelineConfig::default()).is_err());
    }

    #[test]
    fn prepared_subject_targets() {
        let s = small_phantom();
        let p = prepare_subject(&s, &PreprocessConfig::default()).unwrap();
        assert!(p.dilated.count_set() > p.label.count_set());
        let vois = p
            .fine_samples(
                &PreprocessConfig {
                    voi_size: 16,
                    ..Default::default()
                },
                true,
            )
            .unwrap();
        assert_eq!(vois.len(), 8);
        assert!(vois.iter().all(|v| v.image.dims() == [16; 3]));
    }

    #[test]
    fn phantom_dataset_roundtrip() {
        let spec = PhantomSpec {
            volume_dims: [32; 3],
            aneurysm_radius: [2.0, 3.0],
            n_vessels: 1,
            rng_seed: 9,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = write_phantom_dataset(dir.path(), &spec, 2).unwrap();
        assert_eq!(m.subjects.len(), 2);
        let subjects = load_dataset(dir.path()).unwrap();
        let fresh = phantom_subject(&spec, 1).unwrap();
        assert_eq!(subjects[1].label, fresh.label);
        assert_eq!(subjects[1].image.data(), fresh.image.data());
    }
}
