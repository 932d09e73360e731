//! Dual-pathway patch classifier for coarse lesion detection.
//!
//! Both pathways stack unpadded 3x3x3 convolutions with leaky ReLU. The
//! low-resolution pathway sees the same center, block-averaged by
//! `lo_downsample` over a correspondingly larger window; its output is
//! nearest-upsampled onto the high-resolution output grid and added before a
//! 1x1x1 two-class head.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv3d, LEAKY_SLOPE};
use crate::nn::optim::RmsProp;
use crate::nn::{archive, ConvSpec, Gradients, Graph, ParamKind, ParamStore, Tensor, Var};
use crate::par;
use crate::preprocessing::Flagged;
use crate::volume::{connected_components, crop, Connectivity, LabelVolume, Mask, Region, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoarseConfig {
    pub hi_patch: [usize; 3],
    pub lo_downsample: usize,
    pub conv_layers: usize,
    pub channels_per_layer: Vec<usize>,
    pub classes: usize,
    /// Optimizer steps.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub l1: f64,
    pub l2: f64,
    /// Share of each batch centered on target voxels.
    pub fg_fraction: f64,
    /// Output tile edge used at inference; a multiple of `lo_downsample`.
    pub inference_tile: usize,
    /// Smallest component kept as a candidate.
    pub min_candidate_size: usize,
    pub rng_seed: u64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        CoarseConfig {
            hi_patch: [25; 3],
            lo_downsample: 3,
            conv_layers: 8,
            channels_per_layer: vec![30, 30, 40, 40, 40, 40, 50, 50],
            classes: 2,
            iterations: 700,
            batch_size: 10,
            lr_init: 1e-3,
            l1: 1e-6,
            l2: 1e-4,
            fg_fraction: 0.5,
            inference_tile: 36,
            min_candidate_size: 10,
            rng_seed: 0,
        }
    }
}

impl CoarseConfig {
    /// Output extent of one pathway for the given input extent.
    pub fn pathway_output(&self, input: usize) -> Option<usize> {
        input.checked_sub(2 * self.conv_layers).filter(|&n| n > 0)
    }

    pub fn hi_output(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = self.pathway_output(self.hi_patch[a]).ok_or_else(|| {
                Error::Config(format!(
                    "hi_patch {} is too small for {} unpadded 3x3x3 layers",
                    self.hi_patch[a], self.conv_layers
                ))
            })?;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("coarse: {m}")));
        if self.conv_layers == 0 || self.channels_per_layer.len() != self.conv_layers {
            return bad(format!(
                "channels_per_layer has {} entries for {} layers",
                self.channels_per_layer.len(),
                self.conv_layers
            ));
        }
        if self.channels_per_layer.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.lo_downsample == 0 {
            return bad("lo_downsample must be at least 1".into());
        }
        if self.classes != 2 {
            return bad(format!("only 2 classes are supported, got {}", self.classes));
        }
        let out = self.hi_output()?;
        if out.iter().any(|o| o % self.lo_downsample != 0) {
            return bad(format!(
                "pathway output {out:?} must be divisible by lo_downsample {}",
                self.lo_downsample
            ));
        }
        if self.inference_tile == 0 || !self.inference_tile.is_multiple_of(self.lo_downsample) {
            return bad(format!(
                "inference_tile {} must be a positive multiple of lo_downsample",
                self.inference_tile
            ));
        }
        if self.batch_size == 0 || !(self.lr_init > 0.0) || self.l1 < 0.0 || self.l2 < 0.0 {
            return bad("batch_size and lr_init must be positive, penalties non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return bad("fg_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Learning rate at `step`: halved at 50% and again at 75% of training.
    pub fn lr_at(&self, step: usize) -> f64 {
        let n = self.iterations as f64;
        let s = step as f64;
        let halvings = (s >= 0.5 * n) as i32 + (s >= 0.75 * n) as i32;
        self.lr_init * 0.5f64.powi(halvings)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct CoarseModel {
    pub cfg: CoarseConfig,
    pub params: ParamStore,
    hi: Vec<Conv3d>,
    lo: Vec<Conv3d>,
    head: Conv3d,
    pub log: Vec<StepLog>,
}

pub fn build_coarse(cfg: &CoarseConfig) -> Result<CoarseModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut params = ParamStore::new();
    let mut pathway = |name: &str, params: &mut ParamStore| {
        let mut ci = 1;
        cfg.channels_per_layer
            .iter()
            .enumerate()
            .map(|(i, &co)| {
                let c = Conv3d::new(
                    params,
                    &format!("{name}.{i}"),
                    ci,
                    co,
                    ConvSpec::valid3(),
                    true,
                    &mut rng,
                );
                ci = co;
                c
            })
            .collect::<Vec<_>>()
    };
    let hi = pathway("hi", &mut params);
    let lo = pathway("lo", &mut params);
    let last = *cfg.channels_per_layer.last().unwrap();
    let head = Conv3d::new(
        &mut params,
        "head",
        last,
        cfg.classes,
        ConvSpec::point(),
        true,
        &mut rng,
    );
    Ok(CoarseModel {
        cfg: cfg.clone(),
        params,
        hi,
        lo,
        head,
        log: Vec::new(),
    })
}

/// Volume `[x, y, z]` as a one-channel tensor `[1, z, y, x]`.
fn to_tensor(v: &Volume3D) -> Tensor {
    let [x, y, z] = v.dims();
    Tensor::new(vec![1, z, y, x], v.data().to_vec()).expect("shape")
}

fn block_average(v: &Volume3D, f: usize) -> Volume3D {
    if f == 1 {
        return v.clone();
    }
    let d = v.dims();
    let od = d.map(|n| n / f);
    let mut out = Volume3D::zeros(od);
    let norm = 1.0 / (f * f * f) as f32;
    for z in 0..od[2] {
        for y in 0..od[1] {
            for x in 0..od[0] {
                let mut s = 0.0;
                for dz in 0..f {
                    for dy in 0..f {
                        for dx in 0..f {
                            s += v.get(x * f + dx, y * f + dy, z * f + dz);
                        }
                    }
                }
                out.set(x, y, z, s * norm);
            }
        }
    }
    out
}

/// Network inputs producing predictions for the output box starting at
/// `out_start` with extent `out_size`. Outside voxels read as zero.
pub fn pathway_inputs(
    img: &Volume3D,
    cfg: &CoarseConfig,
    out_start: [i64; 3],
    out_size: [usize; 3],
) -> Result<(Tensor, Tensor)> {
    let l = cfg.conv_layers;
    let f = cfg.lo_downsample;
    let hi_r = Region::new(out_start.map(|s| s - l as i64), out_size.map(|n| n + 2 * l));
    let lo_r = Region::new(out_start.map(|s| s - (l * f) as i64), out_size.map(|n| n + 2 * l * f));
    let hi = crop(img, &hi_r, 0.0)?;
    let lo = block_average(&crop(img, &lo_r, 0.0)?, f);
    Ok((to_tensor(&hi), to_tensor(&lo)))
}

impl CoarseModel {
    /// Logits `[classes, z, y, x]` over the high pathway's output grid.
    pub fn forward(&self, g: &mut Graph, hi_in: Var, lo_in: Var) -> Result<Var> {
        let mut h = hi_in;
        for c in &self.hi {
            let y = c.forward(g, h);
            h = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let mut l = lo_in;
        for c in &self.lo {
            let y = c.forward(g, l);
            l = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let up = g.upsample_nearest(l, self.cfg.lo_downsample);
        if g.value(up).shape() != g.value(h).shape() {
            return Err(Error::Shape(format!(
                "low pathway {:?} does not match high pathway {:?}",
                g.value(up).shape(),
                g.value(h).shape()
            )));
        }
        let sum = g.add(h, up)?;
        Ok(self.head.forward(g, sum))
    }

    /// Class probabilities for one pair of pathway inputs.
    pub fn probabilities(&self, hi: Tensor, lo: Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, false, 0);
        let (h, l) = (g.input(hi), g.input(lo));
        let logits = self.forward(&mut g, h, l)?;
        let p = g.softmax(logits);
        Ok(g.take_value(p))
    }

    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.cfg).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        archive::save(path, &self.config_json(), &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let a = archive::load(path)?;
        let cfg: CoarseConfig = serde_json::from_str(&a.config_json)?;
        let mut m = build_coarse(&cfg)?;
        m.params.assign(a.tensors)?;
        Ok(m)
    }
}

/// One training subject: network input image, target map and an optional
/// region from which background centers are drawn.
#[derive(Clone, Debug)]
pub struct CoarseSubject {
    pub image: Volume3D,
    pub target: LabelVolume,
    pub roi: Option<Mask>,
}

#[derive(Clone, Debug)]
pub struct Patch {
    pub center: [i64; 3],
    pub hi: Tensor,
    pub lo: Tensor,
    /// Target classes over the output grid, x fastest.
    pub target: Vec<u8>,
}

struct Pools {
    fg: Vec<usize>,
    bg: Vec<usize>,
}

fn pools(s: &CoarseSubject) -> Pools {
    let fg = s.target.set_indices();
    let in_roi = |i: usize| s.roi.as_ref().is_none_or(|r| r.data()[i] != 0);
    let mut bg: Vec<usize> = (0..s.target.len())
        .filter(|&i| s.target.data()[i] == 0 && in_roi(i))
        .collect();
    if bg.is_empty() {
        bg = (0..s.target.len()).filter(|&i| s.target.data()[i] == 0).collect();
    }
    Pools { fg, bg }
}

fn make_patch(s: &CoarseSubject, cfg: &CoarseConfig, center: [i64; 3]) -> Result<Patch> {
    let out = cfg.hi_output()?;
    let start: [i64; 3] = std::array::from_fn(|a| center[a] - (out[a] / 2) as i64);
    let (hi, lo) = pathway_inputs(&s.image, cfg, start, out)?;
    let target = crop(&s.target, &Region::new(start, out), 0)?.into_data();
    Ok(Patch { center, hi, lo, target })
}

fn draw_batch(
    subjects: &[CoarseSubject],
    pools: &[Pools],
    cfg: &CoarseConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Flagged<Vec<Patch>>> {
    let want_fg = (n as f64 * cfg.fg_fraction).round() as usize;
    let with_fg: Vec<usize> = (0..subjects.len()).filter(|&i| !pools[i].fg.is_empty()).collect();
    let mut warning = None;
    let n_fg = if with_fg.is_empty() {
        if want_fg > 0 {
            let msg = "no target voxels; batch is all background".to_string();
            log::warn!("{msg}");
            warning = Some(msg);
        }
        0
    } else {
        want_fg
    };
    let mut centers = Vec::with_capacity(n);
    for k in 0..n {
        let (si, idx) = if k < n_fg {
            let si = with_fg[rng.random_range(0..with_fg.len())];
            (si, pools[si].fg[rng.random_range(0..pools[si].fg.len())])
        } else {
            let si = rng.random_range(0..subjects.len());
            (si, pools[si].bg[rng.random_range(0..pools[si].bg.len())])
        };
        centers.push((si, subjects[si].target.coords(idx).map(|c| c as i64)));
    }
    let patches = par::map_slice(&centers, |&(si, c)| make_patch(&subjects[si], cfg, c))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Flagged {
        value: patches,
        warning,
    })
}

/// `n` patches, `round(n * fg_fraction)` of them centered on target voxels.
pub fn sample_patches(
    img: &Volume3D,
    target: &LabelVolume,
    roi: Option<&Mask>,
    cfg: &CoarseConfig,
    n: usize,
    seed: u64,
) -> Result<Flagged<Vec<Patch>>> {
    img.ensure_same_dims(target, "image vs target")?;
    let s = [CoarseSubject {
        image: img.clone(),
        target: target.clone(),
        roi: roi.cloned(),
    }];
    let p = [pools(&s[0])];
    draw_batch(&s, &p, cfg, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mean cross-entropy over the patch and the logits gradient.
fn cross_entropy(logits: &Tensor, target: &[u8], scale: f32) -> (f64, Tensor) {
    let probs = crate::nn::graph::softmax_channels(logits);
    let n = target.len();
    let mut grad = probs.clone();
    let mut loss = 0f64;
    for (i, &t) in target.iter().enumerate() {
        let t = (t != 0) as usize;
        loss -= (probs.data()[t * n + i].max(1e-12) as f64).ln();
        grad.data_mut()[t * n + i] -= 1.0;
    }
    grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    (loss / n as f64, grad)
}

fn penalty(params: &ParamStore, l1: f64, l2: f64, grads: &mut Gradients) -> f64 {
    let mut value = 0f64;
    for id in params.ids().collect::<Vec<_>>() {
        if params.kind(id) != ParamKind::Weight {
            continue;
        }
        let w = params.get(id);
        value += w
            .data()
            .iter()
            .map(|&v| l1 * v.abs() as f64 + l2 * (v as f64).powi(2))
            .sum::<f64>();
        let g = grads.get_or_zero(id, w.shape());
        for (g, &v) in g.data_mut().iter_mut().zip(w.data()) {
            *g += (l1 * v.signum() as f64 + 2.0 * l2 * v as f64) as f32;
        }
    }
    value
}

/// Gradient of the mean batch cross-entropy, and the loss itself.
pub fn batch_gradients(model: &CoarseModel, batch: &[Patch]) -> Result<(f64, Gradients)> {
    let scale = 1.0 / (batch.len() * batch[0].target.len()) as f32;
    let results = par::map_slice(batch, |p| -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&model.params, true, 0);
        let (h, l) = (g.input(p.hi.clone()), g.input(p.lo.clone()));
        let logits = model.forward(&mut g, h, l)?;
        let (loss, seed) = cross_entropy(g.value(logits), &p.target, scale);
        Ok((loss, g.backward(vec![(logits, seed)])?))
    });
    let mut total = Gradients::new(model.params.len());
    let mut loss = 0f64;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.merge(g);
    }
    Ok((loss / batch.len() as f64, total))
}

/// RMSProp over `cfg.iterations` steps; the log records the mean batch
/// cross-entropy (without penalties).
pub fn train_coarse(model: &mut CoarseModel, cohort: &[CoarseSubject]) -> Result<()> {
    if cohort.is_empty() {
        return Err(Error::Invalid("coarse training needs at least one subject".into()));
    }
    for s in cohort {
        s.image.ensure_same_dims(&s.target, "coarse subject image vs target")?;
    }
    let cfg = model.cfg.clone();
    let pools: Vec<Pools> = cohort.iter().map(pools).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5eed);
    let mut opt = RmsProp::new(&model.params);
    for step in 0..cfg.iterations {
        let batch = draw_batch(cohort, &pools, &cfg, cfg.batch_size, &mut rng)?.value;
        let (loss, mut grads) = batch_gradients(model, &batch)?;
        penalty(&model.params, cfg.l1, cfg.l2, &mut grads);
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, value: loss });
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut model.params, &grads, lr as f32);
        if !model.params.all_finite() {
            return Err(Error::NonFinite { step, value: f64::NAN });
        }
        log::debug!("coarse step {step} loss {loss:.5} lr {lr:.2e}");
        model.log.push(StepLog { step, loss, lr });
    }
    Ok(())
}

/// Dense tiled inference. Returns the binary mask and the lesion probability.
pub fn predict_coarse_probs(model: &CoarseModel, img: &Volume3D) -> Result<(Mask, Volume3D)> {
    let cfg = &model.cfg;
    let dims = img.dims();
    let t = cfg.inference_tile;
    let mut starts = Vec::new();
    for z in (0..dims[2]).step_by(t) {
        for y in (0..dims[1]).step_by(t) {
            for x in (0..dims[0]).step_by(t) {
                starts.push([x as i64, y as i64, z as i64]);
            }
        }
    }
    let tiles = par::map_slice(&starts, |&s| -> Result<Tensor> {
        let (hi, lo) = pathway_inputs(img, cfg, s, [t; 3])?;
        model.probabilities(hi, lo)
    });
    let mut prob = Volume3D::filled(*img.geometry(), 0.0);
    for (s, tile) in starts.iter().zip(tiles) {
        let tile = tile?;
        let fg = tile.channel(1);
        for z in 0..t {
            for y in 0..t {
                for x in 0..t {
                    let p = [s[0] as usize + x, s[1] as usize + y, s[2] as usize + z];
                    if p[0] < dims[0] && p[1] < dims[1] && p[2] < dims[2] {
                        prob.set(p[0], p[1], p[2], fg[x + t * (y + t * z)]);
                    }
                }
            }
        }
    }
    // argmax over two classes; ties go to background
    let mask = prob.map(|p| (p > 0.5) as u8);
    Ok((mask, prob))
}

pub fn predict_coarse(model: &CoarseModel, img: &Volume3D) -> Result<Mask> {
    Ok(predict_coarse_probs(model, img)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRegion {
    pub center: [i64; 3],
    pub extent: [usize; 3],
    pub score: f64,
}

/// One candidate per component of at least `min_size` voxels, largest first.
/// The score is the mean lesion probability over the component (1 without
/// a probability map).
pub fn extract_candidates(mask: &Mask, probs: Option<&Volume3D>, min_size: usize) -> Result<Vec<CandidateRegion>> {
    if let Some(p) = probs {
        mask.ensure_same_dims(p, "mask vs probabilities")?;
    }
    let comps = connected_components(mask, Connectivity::TwentySix);
    let mut out: Vec<(usize, CandidateRegion)> = comps
        .components
        .iter()
        .filter(|c| c.voxel_count() >= min_size.max(1))
        .map(|c| {
            let score = probs.map_or(1.0, |p| {
                c.voxels.iter().map(|&i| p.data()[i] as f64).sum::<f64>() / c.voxel_count() as f64
            });
            (
                c.voxel_count(),
                CandidateRegion {
                    center: c.rounded_centroid(),
                    extent: c.bbox.size,
                    score: score.clamp(0.0, 1.0),
                },
            )
        })
        .collect();
    out.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.center.cmp(&b.1.center)));
    Ok(out.into_iter().map(|x| x.1).collect())
}
