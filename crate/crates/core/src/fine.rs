//! Dual-channel SE 3D U-Net for fine lesion segmentation inside a VOI.
//!
//! Encoder level `l` runs at `1/2^l` resolution with `base * 2^l` channels:
//! a 3x3x3 convolution (stride 1 at level 0, stride 2 below) followed by a
//! residual context block. An SE block follows the penultimate context block
//! and the first decoder upsampling block. Each decoder level upsamples
//! (trilinear + halving 3x3x3 conv), concatenates the skip, and applies a
//! localization block; segmentation heads at every decoder level are
//! upsampled and summed into the final head before the softmax.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossParams};
use crate::nn::layers::{Conv3d, ConvNormAct, GateMode, SeBlock};
use crate::nn::optim::Adam;
use crate::nn::{archive, ConvSpec, Graph, ParamStore, Tensor, Var};
use crate::preprocessing::VoiCrop;
use crate::volume::{Geometry, LabelVolume};

/// How the weight factor `(1 - dsc)^beta` enters the training gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightGradient {
    /// Exact derivative of the loss, factor included. Stationary at soft
    /// dice `1 / (1 + beta)`.
    Full,
    /// The factor is held constant within a step and only scales the dice
    /// gradient.
    #[default]
    Detached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub dropout_p: f64,
    pub se_reduction: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub deep_supervision: bool,
    pub weight_gradient: WeightGradient,
    pub rng_seed: u64,
}

impl Default for FineConfig {
    fn default() -> Self {
        FineConfig {
            in_channels: 2,
            classes: 2,
            depth: 4,
            base_filters: 16,
            dropout_p: 0.3,
            se_reduction: 8,
            epochs: 500,
            batch_size: 1,
            lr_init: 5e-4,
            plateau_factor: 0.5,
            plateau_patience: 10,
            early_stop_patience: 50,
            deep_supervision: true,
            weight_gradient: WeightGradient::Detached,
            rng_seed: 0,
        }
    }
}

impl FineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("fine: {m}")));
        if self.in_channels == 0 || self.classes != 2 {
            return bad(format!(
                "need at least one input channel and exactly 2 classes, got {} and {}",
                self.in_channels, self.classes
            ));
        }
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.se_reduction == 0 || self.base_filters < self.se_reduction {
            return bad(format!(
                "base_filters ({}) must be at least se_reduction ({})",
                self.base_filters, self.se_reduction
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.batch_size != 1 {
            return bad("only batch_size 1 is supported".into());
        }
        if !(self.lr_init > 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("lr_init must be positive and plateau_factor in (0, 1]".into());
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive".into());
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Level whose context block and first decoder upsample carry SE blocks.
    pub fn se_level(&self) -> usize {
        self.depth - 2
    }
}

#[derive(Clone, Debug)]
struct ContextBlock {
    a: ConvNormAct,
    b: ConvNormAct,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: ConvNormAct,
    /// 3x3x3 then 1x1x1 on inner levels; a single 3x3x3 on the top level.
    loc: Vec<ConvNormAct>,
    head: Conv3d,
}

#[derive(Clone, Debug)]
pub struct FineModel {
    pub cfg: FineConfig,
    pub params: ParamStore,
    down: Vec<ConvNormAct>,
    context: Vec<ContextBlock>,
    se_enc: SeBlock,
    se_dec: SeBlock,
    /// Indexed by resolution level, `0..depth-1`.
    decoder: Vec<DecoderLevel>,
    pub log: Vec<EpochLog>,
}

/// Forward-pass switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub gates: GateMode,
    pub deep_supervision: bool,
}

pub struct FineOutput {
    pub probs: Var,
    pub logits: Var,
    /// SE gates `[c, 1, 1, 1]`, encoder then decoder.
    pub gates: Vec<Var>,
    /// Spatial extent of each encoder level's output.
    pub encoder_extents: Vec<[usize; 3]>,
}

pub fn build_fine(cfg: &FineConfig) -> Result<FineModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut p = ParamStore::new();
    let mut down = Vec::new();
    let mut context = Vec::new();
    for l in 0..cfg.depth {
        let (ci, spec) = if l == 0 {
            (cfg.in_channels, ConvSpec::same3())
        } else {
            (cfg.width(l - 1), ConvSpec::down3())
        };
        let w = cfg.width(l);
        down.push(ConvNormAct::new(&mut p, &format!("enc{l}.conv"), ci, w, spec, &mut rng));
        context.push(ContextBlock {
            a: ConvNormAct::new(&mut p, &format!("enc{l}.ctx.a"), w, w, ConvSpec::same3(), &mut rng),
            b: ConvNormAct::new(&mut p, &format!("enc{l}.ctx.b"), w, w, ConvSpec::same3(), &mut rng),
        });
    }
    let sl = cfg.se_level();
    let se_enc = SeBlock::new(
        &mut p,
        &format!("enc{sl}.se"),
        cfg.width(sl),
        cfg.se_reduction,
        &mut rng,
    );
    let se_dec = SeBlock::new(
        &mut p,
        &format!("dec{sl}.se"),
        cfg.width(sl),
        cfg.se_reduction,
        &mut rng,
    );
    let mut decoder = Vec::new();
    for l in 0..cfg.depth - 1 {
        let w = cfg.width(l);
        let up = ConvNormAct::new(
            &mut p,
            &format!("dec{l}.up"),
            cfg.width(l + 1),
            w,
            ConvSpec::same3(),
            &mut rng,
        );
        let loc = if l > 0 {
            vec![
                ConvNormAct::new(&mut p, &format!("dec{l}.loc.a"), 2 * w, w, ConvSpec::same3(), &mut rng),
                ConvNormAct::new(&mut p, &format!("dec{l}.loc.b"), w, w, ConvSpec::point(), &mut rng),
            ]
        } else {
            vec![ConvNormAct::new(
                &mut p,
                "dec0.out",
                2 * w,
                w,
                ConvSpec::same3(),
                &mut rng,
            )]
        };
        let head = Conv3d::new(
            &mut p,
            &format!("dec{l}.seg"),
            w,
            cfg.classes,
            ConvSpec::point(),
            true,
            &mut rng,
        );
        decoder.push(DecoderLevel { up, loc, head });
    }
    Ok(FineModel {
        cfg: cfg.clone(),
        params: p,
        down,
        context,
        se_enc,
        se_dec,
        decoder,
        log: Vec::new(),
    })
}

/// Dual-channel input `[2, z, y, x]` from a VOI: image then contour.
pub fn voi_input(s: &VoiCrop) -> Result<Tensor> {
    s.image.ensure_same_dims(&s.contour, "image vs contour")?;
    let [x, y, z] = s.image.dims();
    Tensor::stack_channels(&[s.image.data(), s.contour.data()], [z, y, x])
}

impl FineModel {
    pub fn default_options(&self) -> ForwardOptions {
        ForwardOptions {
            gates: GateMode::Learned,
            deep_supervision: self.cfg.deep_supervision,
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[0] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "fine network expects [{}, d, h, w] input, got {s:?}",
                self.cfg.in_channels
            )));
        }
        let m = 1usize << (self.cfg.depth - 1);
        if s[1..].iter().any(|&n| n == 0 || n % m != 0) {
            return Err(Error::Shape(format!(
                "input extent {:?} must be divisible by {m}",
                &s[1..]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var, opt: ForwardOptions) -> Result<FineOutput> {
        self.check_input(g.value(x))?;
        let depth = self.cfg.depth;
        let sl = self.cfg.se_level();
        let p = self.cfg.dropout_p as f32;
        let mut h = x;
        let mut skips = Vec::new();
        let mut gates = Vec::new();
        let mut encoder_extents = Vec::new();
        for l in 0..depth {
            let c = self.down[l].forward(g, h);
            let a = self.context[l].a.forward(g, c);
            let a = g.dropout(a, p);
            let b = self.context[l].b.forward(g, a);
            h = g.add(c, b)?;
            if l == sl {
                let (out, gate) = self.se_enc.forward(g, h, opt.gates)?;
                h = out;
                gates.extend(gate);
            }
            encoder_extents.push(g.value(h).spatial());
            skips.push(h);
        }
        let mut heads: Vec<Var> = Vec::new();
        for l in (0..depth - 1).rev() {
            let dec = &self.decoder[l];
            let up = g.upsample2x(h);
            let mut up = dec.up.forward(g, up);
            if l == sl {
                let (out, gate) = self.se_dec.forward(g, up, opt.gates)?;
                up = out;
                gates.extend(gate);
            }
            h = g.concat(up, skips[l])?;
            for c in &dec.loc {
                h = c.forward(g, h);
            }
            heads.push(dec.head.forward(g, h));
        }
        let logits = if opt.deep_supervision {
            let mut s = heads[0];
            for &hd in &heads[1..] {
                let up = g.upsample2x(s);
                s = g.add(up, hd)?;
            }
            s
        } else {
            *heads.last().unwrap()
        };
        let probs = g.softmax(logits);
        Ok(FineOutput {
            probs,
            logits,
            gates,
            encoder_extents,
        })
    }

    /// Class probabilities `[classes, d, h, w]` in inference mode.
    pub fn infer(&self, x: Tensor, opt: ForwardOptions) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, false, 0);
        let xi = g.input(x);
        let out = self.forward(&mut g, xi, opt)?;
        Ok(g.take_value(out.probs))
    }

    pub fn predict_probs(&self, x: Tensor) -> Result<Tensor> {
        self.infer(x, self.default_options())
    }

    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.cfg).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        archive::save(path, &self.config_json(), &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let a = archive::load(path)?;
        let cfg: FineConfig = serde_json::from_str(&a.config_json)?;
        let mut m = build_fine(&cfg)?;
        m.params.assign(a.tensors)?;
        Ok(m)
    }

    /// Per-parameter shapes and counts plus feature extents for an input edge.
    pub fn summary(&self, input_edge: usize) -> String {
        let mut s = String::new();
        let c = &self.cfg;
        let _ = writeln!(
            s,
            "dual-channel SE 3D U-Net, depth {}, base {}",
            c.depth, c.base_filters
        );
        let _ = writeln!(s, "input: [{}, {e}, {e}, {e}]", c.in_channels, e = input_edge);
        for l in 0..c.depth {
            let e = input_edge >> l;
            let se = if l == c.se_level() { " + SE" } else { "" };
            let _ = writeln!(s, "encoder {l}: [{}, {e}, {e}, {e}]{se}", c.width(l));
        }
        for l in (0..c.depth - 1).rev() {
            let e = input_edge >> l;
            let se = if l == c.se_level() { " (SE after upsample)" } else { "" };
            let _ = writeln!(
                s,
                "decoder {l}: [{}, {e}, {e}, {e}] -> head [{}, {e}, {e}, {e}]{se}",
                c.width(l),
                c.classes
            );
        }
        let _ = writeln!(s, "output: [{}, {e}, {e}, {e}] softmax", c.classes, e = input_edge);
        let _ = writeln!(s, "\n{:<28} {:>24} {:>10}", "parameter", "shape", "count");
        for (name, t) in self.params.iter() {
            let _ = writeln!(s, "{:<28} {:>24} {:>10}", name, format!("{:?}", t.shape()), t.len());
        }
        let _ = writeln!(s, "total parameters: {}", self.params.num_elements());
        s
    }
}

/// Argmax over two classes with ties going to background, as a label map
/// with the geometry `geom`.
pub fn argmax_labels(probs: &Tensor, geom: Geometry) -> Result<LabelVolume> {
    if probs.channels() != 2 {
        return Err(Error::Shape(format!(
            "expected 2 class channels, got {}",
            probs.channels()
        )));
    }
    let (bg, fg) = (probs.channel(0), probs.channel(1));
    LabelVolume::from_data(geom, bg.iter().zip(fg).map(|(b, f)| (f > b) as u8).collect())
}

pub fn predict_fine(model: &FineModel, s: &VoiCrop) -> Result<LabelVolume> {
    let probs = model.predict_probs(voi_input(s)?)?;
    argmax_labels(&probs, *s.image.geometry())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_soft_dice: f64,
    pub lr: f64,
}

/// Validation quantities for one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValScore {
    pub loss: f64,
    pub soft_dice: f64,
}

impl ValScore {
    /// Quantity driving the plateau schedule, early stopping and model
    /// selection. With a detached weight the loss value is not minimized at
    /// a perfect overlap, so `1 - soft dice` is monitored instead.
    pub fn monitored(&self, mode: WeightGradient) -> f64 {
        match mode {
            WeightGradient::Full => self.loss,
            WeightGradient::Detached => 1.0 - self.soft_dice,
        }
    }
}

/// Loss and the seed gradient for the probability output.
fn loss_seed(probs: &Tensor, label: &LabelVolume, loss: &LossParams, mode: WeightGradient) -> Result<(f64, Tensor)> {
    let fg = probs.channel(1);
    let (value, grad) = match mode {
        WeightGradient::Full => losses::wdl_with_gradient(label.data(), fg, loss)?,
        WeightGradient::Detached => {
            let plain = LossParams { beta: 0.0, ..*loss };
            let (neg_dice, g) = losses::wdl_with_gradient(label.data(), fg, &plain)?;
            let w = if loss.beta == 0.0 {
                1.0
            } else {
                (1.0 + neg_dice).max(0.0).powf(loss.beta)
            };
            (w * neg_dice, g.into_iter().map(|v| v * w).collect())
        }
    };
    let mut seed = Tensor::zeros(probs.shape());
    let n = fg.len();
    for (s, g) in seed.data_mut()[n..].iter_mut().zip(grad) {
        *s = g as f32;
    }
    Ok((value, seed))
}

/// One optimizer-ready gradient for a single sample.
pub fn sample_gradients(
    model: &FineModel,
    s: &VoiCrop,
    loss: &LossParams,
    seed: u64,
) -> Result<(f64, crate::nn::Gradients)> {
    let x = voi_input(s)?;
    let mut g = Graph::new(&model.params, true, seed);
    let xi = g.input(x);
    let out = model.forward(&mut g, xi, model.default_options())?;
    let (value, grad) = loss_seed(g.value(out.probs), &s.label, loss, model.cfg.weight_gradient)?;
    Ok((value, g.backward(vec![(out.probs, grad)])?))
}

/// Mean loss and soft dice over `samples` in inference mode.
pub fn evaluate(model: &FineModel, samples: &[VoiCrop], loss: &LossParams) -> Result<ValScore> {
    let (mut l, mut d) = (0.0, 0.0);
    for s in samples {
        let p = model.predict_probs(voi_input(s)?)?;
        l += losses::wdl(s.label.data(), p.channel(1), loss)?;
        d += losses::soft_dice(s.label.data(), p.channel(1), loss.smooth)?;
    }
    let n = samples.len() as f64;
    Ok(ValScore {
        loss: l / n,
        soft_dice: d / n,
    })
}

/// Plateau schedule state: the rate is multiplied by `factor` after every
/// `patience` epochs without improvement.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    wait: usize,
    /// Epochs since the last improvement.
    pub stale: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Plateau {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            wait: 0,
            stale: 0,
        }
    }

    /// Records a validation loss; returns true on improvement.
    pub fn observe(&mut self, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.wait = 0;
            self.stale = 0;
            return true;
        }
        self.wait += 1;
        self.stale += 1;
        if self.wait >= self.patience {
            self.lr *= self.factor;
            self.wait = 0;
        }
        false
    }
}

/// Adam with plateau decay and early stopping; the parameters with the best
/// validation loss are kept.
pub fn train_fine(model: &mut FineModel, train: &[VoiCrop], val: &[VoiCrop], loss: &LossParams) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(
            "fine training needs nonempty training and validation sets".into(),
        ));
    }
    loss.validate()?;
    let cfg = model.cfg.clone();
    let mut opt = Adam::new(&model.params);
    let mut sched = Plateau::new(cfg.lr_init, cfg.plateau_factor, cfg.plateau_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0xf1e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.params.clone();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = sched.lr;
        let mut train_loss = 0.0;
        for &i in &order {
            let (value, grads) = sample_gradients(model, &train[i], loss, cfg.rng_seed.wrapping_add(step))?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: step as usize,
                    value,
                });
            }
            opt.step(&mut model.params, &grads, lr as f32);
            if !model.params.all_finite() {
                return Err(Error::NonFinite {
                    step: step as usize,
                    value: f64::NAN,
                });
            }
            train_loss += value;
            step += 1;
        }
        train_loss /= train.len() as f64;
        let v = evaluate(model, val, loss)?;
        if !v.loss.is_finite() {
            return Err(Error::NonFinite {
                step: step as usize,
                value: v.loss,
            });
        }
        log::debug!(
            "fine epoch {epoch} train {train_loss:.5} val {:.5} dice {:.4} lr {lr:.2e}",
            v.loss,
            v.soft_dice
        );
        model.log.push(EpochLog {
            epoch,
            train_loss,
            val_loss: v.loss,
            val_soft_dice: v.soft_dice,
            lr,
        });
        if sched.observe(v.monitored(cfg.weight_gradient)) {
            best = model.params.clone();
        }
        if sched.stale >= cfg.early_stop_patience {
            break;
        }
    }
    if cfg.epochs > 0 {
        model.params = best;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dsc;

    fn tiny_cfg() -> FineConfig {
        FineConfig {
            base_filters: 4,
            se_reduction: 2,
            depth: 3,
            ..Default::default()
        }
    }

    fn random_input(c: usize, e: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = c * e * e * e;
        Tensor::new(vec![c, e, e, e], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(FineConfig::default().validate().is_ok());
        let c = FineConfig {
            base_filters: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = FineConfig {
            depth: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = FineConfig {
            dropout_p: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes_and_normalization() {
        let m = build_fine(&tiny_cfg()).unwrap();
        let mut g = Graph::new(&m.params, false, 0);
        let x = g.input(random_input(2, 16, 1));
        let out = m.forward(&mut g, x, m.default_options()).unwrap();
        assert_eq!(out.encoder_extents, vec![[16; 3], [8; 3], [4; 3]]);
        let p = g.value(out.probs);
        assert_eq!(p.shape(), &[2, 16, 16, 16]);
        let n = p.voxels();
        for i in 0..n {
            assert!((p.data()[i] + p.data()[n + i] - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.gates.len(), 2);
        for &gv in &out.gates {
            assert!(g.value(gv).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = build_fine(&tiny_cfg()).unwrap();
        assert!(m.predict_probs(random_input(1, 16, 1)).is_err());
        assert!(m.predict_probs(random_input(2, 10, 1)).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_channels_matter() {
        let m = build_fine(&tiny_cfg()).unwrap();
        let x = random_input(2, 16, 2);
        let a = m.predict_probs(x.clone()).unwrap();
        assert_eq!(a, m.predict_probs(x.clone()).unwrap());
        let n = 16 * 16 * 16;
        let mut swapped = x.data()[n..].to_vec();
        swapped.extend_from_slice(&x.data()[..n]);
        let s = m
            .predict_probs(Tensor::new(x.shape().to_vec(), swapped).unwrap())
            .unwrap();
        assert_ne!(a, s);
        let z = m.predict_probs(Tensor::zeros(&[2, 16, 16, 16])).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn forced_open_gates_match_bypass() {
        let m = build_fine(&tiny_cfg()).unwrap();
        let x = random_input(2, 16, 3);
        let open = m
            .infer(
                x.clone(),
                ForwardOptions {
                    gates: GateMode::ForcedOpen,
                    deep_supervision: true,
                },
            )
            .unwrap();
        let bypass = m
            .infer(
                x.clone(),
                ForwardOptions {
                    gates: GateMode::Bypass,
                    deep_supervision: true,
                },
            )
            .unwrap();
        assert_eq!(open, bypass);
        let learned = m
            .infer(
                x,
                ForwardOptions {
                    gates: GateMode::Learned,
                    deep_supervision: true,
                },
            )
            .unwrap();
        assert_ne!(learned, open);
    }

    #[test]
    fn deep_supervision_changes_output() {
        let m = build_fine(&tiny_cfg()).unwrap();
        let x = random_input(2, 16, 4);
        let on = m
            .infer(
                x.clone(),
                ForwardOptions {
                    gates: GateMode::Learned,
                    deep_supervision: true,
                },
            )
            .unwrap();
        let off = m
            .infer(
                x,
                ForwardOptions {
                    gates: GateMode::Learned,
                    deep_supervision: false,
                },
            )
            .unwrap();
        assert_ne!(on, off);
        let heads = m.params.iter().filter(|(n, _)| n.contains(".seg.")).count();
        assert_eq!(heads, 2 * (tiny_cfg().depth - 1));
    }

    #[test]
    fn argmax_ties_to_background() {
        let geom = Geometry::new([2, 1, 1]);
        let p = Tensor::new(vec![2, 1, 1, 2], vec![0.5, 0.9, 0.5, 0.1]).unwrap();
        assert_eq!(argmax_labels(&p, geom).unwrap().data(), &[0, 0]);
        let p = Tensor::new(vec![2, 1, 1, 2], vec![0.4, 0.9, 0.6, 0.1]).unwrap();
        assert_eq!(argmax_labels(&p, geom).unwrap().data(), &[1, 0]);
    }

    #[test]
    fn plateau_schedule_arithmetic() {
        let mut s = Plateau::new(5e-4, 0.5, 10);
        s.observe(1.0);
        for _ in 0..20 {
            s.observe(1.0);
        }
        assert!((s.lr - 1.25e-4).abs() < 1e-12);
        assert_eq!(s.stale, 20);
        assert!(s.observe(0.5));
        assert_eq!(s.stale, 0);
    }

    #[test]
    fn zero_epochs_and_gradient_flow() {
        let c = FineConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let mut m = build_fine(&c).unwrap();
        let s = tests_support::blob();
        let before = m.params.clone();
        train_fine(
            &mut m,
            std::slice::from_ref(&s),
            std::slice::from_ref(&s),
            &LossParams::default(),
        )
        .unwrap();
        for ((_, a), (_, b)) in m.params.iter().zip(before.iter()) {
            assert_eq!(a, b);
        }
        let (_, g) = sample_gradients(&m, &s, &LossParams::default(), 0).unwrap();
        let mut opt = Adam::new(&m.params);
        opt.step(&mut m.params, &g, 1e-3);
        let first = m.params.ids().next().unwrap();
        assert_eq!(m.params.name(first), "enc0.conv.conv.weight");
        assert_ne!(m.params.get(first), before.get(first));
    }

    #[test]
    fn detached_training_fits_a_blob() {
        let c = FineConfig {
            epochs: 40,
            lr_init: 2e-3,
            dropout_p: 0.0,
            ..tiny_cfg()
        };
        let mut m = build_fine(&c).unwrap();
        let s = tests_support::blob();
        train_fine(
            &mut m,
            std::slice::from_ref(&s),
            std::slice::from_ref(&s),
            &LossParams::default(),
        )
        .unwrap();
        let pred = predict_fine(&m, &s).unwrap();
        let d = dsc(&s.label, &pred).unwrap();
        assert!(d > 0.8, "dsc {d}");
        assert!(m.log.len() <= 40 && m.log.iter().all(|e| e.val_soft_dice <= 1.0));
    }

    #[test]
    fn save_load_and_summary() {
        let m = build_fine(&tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        m.save(&p).unwrap();
        let n = FineModel::load(&p).unwrap();
        let x = random_input(2, 16, 5);
        assert_eq!(m.predict_probs(x.clone()).unwrap(), n.predict_probs(x).unwrap());
        let s = m.summary(16);
        assert!(s.contains("encoder 1: [8, 8, 8, 8] + SE"));
        assert!(s.contains(&format!("total parameters: {}", m.params.num_elements())));
    }
}


#[cfg(test)]
mod gradient_modes {
    use super::tests_support::blob;
    use super::*;
    use crate::metrics::dsc;

    fn run(mode: WeightGradient, steps: u64) -> (f64, f64) {
        let c = FineConfig {
            weight_gradient: mode,
            dropout_p: 0.0,
            base_filters: 4,
            se_reduction: 2,
            depth: 3,
            ..Default::default()
        };
        let mut m = build_fine(&c).unwrap();
        let s = blob();
        let mut opt = Adam::new(&m.params);
        for step in 0..steps {
            let (_, g) = sample_gradients(&m, &s, &LossParams::default(), step).unwrap();
            opt.step(&mut m.params, &g, 2e-3);
        }
        let p = m.predict_probs(voi_input(&s).unwrap()).unwrap();
        let sd = losses::soft_dice(s.label.data(), p.channel(1), 1e-4).unwrap();
        (sd, dsc(&s.label, &predict_fine(&m, &s).unwrap()).unwrap())
    }

    #[test]
    fn full_gradient_stalls_at_half_overlap() {
        let (sd, _) = run(WeightGradient::Full, 60);
        assert!((sd - 0.5).abs() < 0.03, "soft dice {sd}");
    }

    #[test]
    fn detached_gradient_reaches_full_overlap() {
        let (sd, d) = run(WeightGradient::Detached, 60);
        assert!(sd > 0.85 && d > 0.95, "soft dice {sd}, dsc {d}");
    }
}
