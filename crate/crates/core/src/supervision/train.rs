use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{coarse_loss, epipolar_loss, fine_loss, Focal};
use super::{apply_homography, fine_target, gt_from_warp, synth_pair, PairSample, WarpRange};
use crate::config::{self, Settings};
use crate::error::{Error, Result};
use crate::matcher::{
    crop_windows, fine_probabilities, forward_coarse, match_pair, subpixel_offsets, window_cells, window_centers,
    MatcherConfig, Model, COARSE_STRIDE, FINE_STRIDE,
};
use crate::params::{Bound, ParamStore};
use crate::pgm::Gray;
use crate::tensor::{Graph, Tensor, Var};

pub const METRICS_FILE: &str = "metrics.csv";
pub const WEIGHTS_DIR: &str = "weights";
pub const TRAIN_CONFIG_FILE: &str = "train.cfg";
/// Fewest corpus images `train` accepts.
pub const MIN_CORPUS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub pairs: usize,
    pub val_pairs: usize,
    pub image_size: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub weight_coarse: f64,
    pub weight_fine: f64,
    pub weight_epipolar: f64,
    pub max_rotation: f64,
    pub max_translation: f64,
    pub max_tilt: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let range = WarpRange::default();
        Self {
            seed: 0,
            steps: 200,
            pairs: 16,
            val_pairs: 8,
            image_size: 96,
            batch: 1,
            learning_rate: 0.02,
            momentum: 0.9,
            warmup_steps: 16,
            clip_norm: 1.0,
            weight_coarse: 1.0,
            weight_fine: 1.0,
            weight_epipolar: 1.0,
            max_rotation: range.max_rotation,
            max_translation: range.max_translation,
            max_tilt: range.max_tilt,
        }
    }
}

impl TrainConfig {
    pub fn warp_range(&self) -> WarpRange {
        WarpRange {
            max_rotation: self.max_rotation,
            max_translation: self.max_translation,
            max_tilt: self.max_tilt,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs.div_ceil(self.batch)
    }
}

impl Settings for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Option<Result<(), String>> {
        use config::value;
        Some(match key {
            "seed" => value(v).map(|x| self.seed = x),
            "steps" => value(v).map(|x| self.steps = x),
            "pairs" => value(v).map(|x| self.pairs = x),
            "val_pairs" => value(v).map(|x| self.val_pairs = x),
            "image_size" => value(v).map(|x| self.image_size = x),
            "batch" => value(v).map(|x| self.batch = x),
            "learning_rate" => value(v).map(|x| self.learning_rate = x),
            "momentum" => value(v).map(|x| self.momentum = x),
            "warmup_steps" => value(v).map(|x| self.warmup_steps = x),
            "clip_norm" => value(v).map(|x| self.clip_norm = x),
            "weight_coarse" => value(v).map(|x| self.weight_coarse = x),
            "weight_fine" => value(v).map(|x| self.weight_fine = x),
            "weight_epipolar" => value(v).map(|x| self.weight_epipolar = x),
            "max_rotation" => value(v).map(|x| self.max_rotation = x),
            "max_translation" => value(v).map(|x| self.max_translation = x),
            "max_tilt" => value(v).map(|x| self.max_tilt = x),
            _ => return None,
        })
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("pairs", self.pairs.to_string()),
            ("val_pairs", self.val_pairs.to_string()),
            ("image_size", self.image_size.to_string()),
            ("batch", self.batch.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("weight_coarse", self.weight_coarse.to_string()),
            ("weight_fine", self.weight_fine.to_string()),
            ("weight_epipolar", self.weight_epipolar.to_string()),
            ("max_rotation", self.max_rotation.to_string()),
            ("max_translation", self.max_translation.to_string()),
            ("max_tilt", self.max_tilt.to_string()),
        ]
    }

    fn validate(&self) -> Result<(), String> {
        if self.pairs == 0 || self.batch == 0 {
            return Err("pairs and batch must be positive".into());
        }
        if self.image_size == 0 || self.image_size % COARSE_STRIDE != 0 {
            return Err(format!("image_size must be a positive multiple of {COARSE_STRIDE}"));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err("learning_rate must be >= 0 and momentum in [0, 1)".into());
        }
        if !(self.clip_norm >= 0.0) {
            return Err("clip_norm must be >= 0".into());
        }
        let w = [self.weight_coarse, self.weight_fine, self.weight_epipolar];
        if w.iter().any(|&v| !(v >= 0.0)) {
            return Err("loss weights must be >= 0".into());
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `base` over `warmup` steps, then cosine decay to 0
/// at `total`.
pub fn learning_rate(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Gradient descent with heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Clone, Debug, Default)]
pub struct Momentum {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Momentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, clip_norm: f64) -> f64 {
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let scale = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((v, &g), p) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *v = self.momentum * *v + scale * g;
                *p -= lr * *v;
            }
        }
        norm
    }
}

/// The three losses of one pair and their weighted sum.
pub struct PairLoss<'g> {
    pub coarse: Var<'g>,
    pub fine: Var<'g>,
    pub epipolar: Var<'g>,
    pub total: Var<'g>,
}

/// Losses of one pair. Fine and sub-pixel terms are taken at the
/// ground-truth coarse matches.
pub fn pair_loss<'g>(
    g: &'g Graph,
    bound: &Bound<'g>,
    model_cfg: &MatcherConfig,
    cfg: &TrainConfig,
    sample: &PairSample,
) -> Result<PairLoss<'g>> {
    let focal = Focal::default();
    let (w, h) = (sample.image_a.width, sample.image_a.height);
    let ta = g.constant(sample.image_a.to_tensor());
    let tb = g.constant(sample.image_b.to_tensor());
    let co = forward_coarse(bound, model_cfg, &ta, &tb)?;
    let gt = gt_from_warp(&sample.homography, co.grid, (h, w));
    let l_c = coarse_loss(&co.p_ab, &co.p_ba, &gt.flat_positives(), focal)?;
    let zero = || g.constant(Tensor::scalar(0.0));
    let (mut l_f, mut l_s) = (zero(), zero());
    let pairs = gt.positives();
    if !pairs.is_empty() {
        let window = model_cfg.fine_window;
        let (kk, center) = (model_cfg.window_cells(), model_cfg.window_center());
        let (ca, cb) = window_centers(&pairs, co.grid);
        let wa = crop_windows(&co.fine_a, &ca, window)?;
        let wb = crop_windows(&co.fine_b, &cb, window)?;
        let fo = fine_probabilities(&wa, &wb, &bound.scope("fine.mixer"), model_cfg.temperature)?;
        let fine_grid = (h / FINE_STRIDE, w / FINE_STRIDE);
        let targets: Vec<Option<usize>> = pairs
            .iter()
            .map(|&p| fine_target(&sample.homography, p, co.grid, fine_grid, window))
            .collect();
        let flat: Vec<Option<usize>> = targets.iter().map(|t| t.map(|b| center * kk + b)).collect();
        l_f = fine_loss(&fo.prob, &flat, focal)?;
        let picks: Vec<(usize, usize, usize)> = targets
            .iter()
            .enumerate()
            .filter_map(|(m, t)| t.map(|b| (m, center, b)))
            .collect();
        if !picks.is_empty() {
            let delta = subpixel_offsets(&fo.win_a, &fo.win_b, &picks, &bound.scope("sub"))?;
            let s = FINE_STRIDE as f64;
            let mut base = Vec::with_capacity(picks.len() * 4);
            for &(m, a, b) in &picks {
                let (ra, qa) = window_cells(ca[m], window)[a];
                let (rb, qb) = window_cells(cb[m], window)[b];
                base.extend([qa as f64 * s, ra as f64 * s, qb as f64 * s, rb as f64 * s]);
            }
            let k = sample.intrinsics;
            let shift = g.constant(Tensor::new(&[4], vec![-k.cx, -k.cy, -k.cx, -k.cy])?);
            let pix = delta.scale(s).add(&g.constant(Tensor::new(&[picks.len(), 4], base)?))?;
            let norm = pix.add_broadcast(&shift)?.scale(1.0 / k.focal);
            let ones = g.constant(Tensor::full(&[picks.len(), 1], 1.0));
            let xa = Var::concat(&[norm.narrow(1, 0, 2)?, ones], 1)?;
            let xb = Var::concat(&[norm.narrow(1, 2, 2)?, ones], 1)?;
            l_s = epipolar_loss(&xb, &xa, &sample.essential)?.0;
        }
    }
    let total = l_c
        .scale(cfg.weight_coarse)
        .add(&l_f.scale(cfg.weight_fine))?
        .add(&l_s.scale(cfg.weight_epipolar))?;
    Ok(PairLoss {
        coarse: l_c,
        fine: l_f,
        epipolar: l_s,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss_c: f64,
    pub loss_f: f64,
    pub loss_s: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_f: f64,
    pub loss_s: f64,
    pub precision: f64,
    pub matches: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps_per_epoch: usize,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    fn mean_total(steps: &[StepLog]) -> f64 {
        steps.iter().map(|s| s.total).sum::<f64>() / steps.len().max(1) as f64
    }

    /// Mean total loss over the first epoch.
    pub fn initial_loss(&self) -> f64 {
        Self::mean_total(&self.steps[..self.steps_per_epoch.min(self.steps.len())])
    }

    /// Mean total loss over the last epoch-length run of steps.
    pub fn final_loss(&self) -> f64 {
        let n = self.steps_per_epoch.min(self.steps.len());
        Self::mean_total(&self.steps[self.steps.len() - n..])
    }

    pub fn final_precision(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.precision)
    }

    /// `epoch,loss_c,loss_f,loss_s,precision` with one row per epoch.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,loss_c,loss_f,loss_s,precision\n");
        for e in &self.epochs {
            writeln!(s, "{},{},{},{},{}", e.epoch, e.loss_c, e.loss_f, e.loss_s, e.precision).unwrap();
        }
        s
    }
}

/// Fraction of predicted coarse matches whose A cell, warped into B, lands
/// within one coarse cell of the matched B cell, and the number of matches.
pub fn evaluate_precision(model: &Model, pairs: &[PairSample]) -> Result<(f64, usize)> {
    let (mut good, mut total) = (0, 0);
    for pair in pairs {
        let set = match_pair(model, &pair.image_a, &pair.image_b)?;
        for m in &set.coarse {
            let (xa, ya) = set.coarse_pixel(m.i);
            let (xb, yb) = set.coarse_pixel(m.j);
            total += 1;
            if let Some((px, py)) = apply_homography(&pair.homography, xa, ya) {
                if (px - xb).hypot(py - yb) < COARSE_STRIDE as f64 {
                    good += 1;
                }
            }
        }
    }
    Ok((if total == 0 { 0.0 } else { good as f64 / total as f64 }, total))
}

fn make_pairs(bases: &[Gray], n: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PairSample>> {
    let size = (cfg.image_size, cfg.image_size);
    (0..n)
        .map(|k| synth_pair(&bases[k % bases.len()], size, rng, &cfg.warp_range()))
        .collect()
}

/// Trains `model` in place on pairs synthesized from `bases`. The last quarter
/// of the bases (at least one) only feeds the held-out pairs used for
/// precision. `on_epoch` sees every epoch summary as it completes.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    bases: &[Gray],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate().map_err(|d| Error::invalid("train config", d))?;
    if bases.len() < MIN_CORPUS {
        return Err(Error::invalid(
            "train",
            format!("need at least {MIN_CORPUS} corpus images, found {}", bases.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_val = (bases.len() / 4).max(1);
    let (train_bases, val_bases) = bases.split_at(bases.len() - n_val);
    let train_pairs = make_pairs(train_bases, cfg.pairs, cfg, &mut rng)?;
    let val_pairs = make_pairs(val_bases, cfg.val_pairs, cfg, &mut rng)?;

    let spe = cfg.steps_per_epoch();
    let mut report = TrainReport {
        steps_per_epoch: spe,
        ..TrainReport::default()
    };
    let mut order: Vec<usize> = (0..cfg.pairs).collect();
    let mut opt = Momentum::new(cfg.momentum);
    let mut epoch_start = 0;
    for step in 0..cfg.steps {
        if step % spe == 0 {
            order.shuffle(&mut rng);
        }
        let first = (step % spe) * cfg.batch;
        let batch = &order[first..(first + cfg.batch).min(cfg.pairs)];
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut log = StepLog {
            step,
            lr: learning_rate(step, cfg.learning_rate, cfg.warmup_steps, cfg.steps),
            loss_c: 0.0,
            loss_f: 0.0,
            loss_s: 0.0,
            total: 0.0,
            grad_norm: 0.0,
        };
        let share = 1.0 / batch.len() as f64;
        for &k in batch {
            let g = Graph::new();
            let bound = model.params.bind(&g, true);
            let loss = pair_loss(&g, &bound, &model.config, cfg, &train_pairs[k])?;
            if let Err(e) = g.check_finite() {
                log::error!("step {step}, pair {k}: {e}");
                return Err(Error::invalid("train", format!("non-finite loss at step {step} (pair {k}): {e}")));
            }
            let grads = g.backward(loss.total)?;
            for (name, t) in bound.gradients(&grads) {
                match acc.get_mut(&name) {
                    Some(a) => {
                        for (a, v) in a.data_mut().iter_mut().zip(t.data()) {
                            *a += share * v;
                        }
                    }
                    None => {
                        acc.insert(name, t.map(|v| v * share));
                    }
                }
            }
            let val = |v: &Var| v.value().data()[0] * share;
            log.loss_c += val(&loss.coarse);
            log.loss_f += val(&loss.fine);
            log.loss_s += val(&loss.epipolar);
            log.total += val(&loss.total);
        }
        log.grad_norm = opt.step(&mut model.params, &acc, log.lr, cfg.clip_norm);
        log::debug!(
            "step {step}: lr {:.5} total {:.5} (c {:.5} f {:.5} s {:.5}) |g| {:.3}",
            log.lr,
            log.total,
            log.loss_c,
            log.loss_f,
            log.loss_s,
            log.grad_norm
        );
        report.steps.push(log);
        if (step + 1) % spe == 0 || step + 1 == cfg.steps {
            let span = &report.steps[epoch_start..];
            let mean = |f: fn(&StepLog) -> f64| span.iter().map(f).sum::<f64>() / span.len() as f64;
            let (precision, matches) = evaluate_precision(model, &val_pairs)?;
            let e = EpochLog {
                epoch: report.epochs.len(),
                loss_c: mean(|s| s.loss_c),
                loss_f: mean(|s| s.loss_f),
                loss_s: mean(|s| s.loss_s),
                precision,
                matches,
            };
            log::info!(
                "epoch {}: loss_c {:.4} loss_f {:.4} loss_s {:.6} precision {:.3} ({} matches)",
                e.epoch,
                e.loss_c,
                e.loss_f,
                e.loss_s,
                e.precision,
                e.matches
            );
            on_epoch(&e);
            report.epochs.push(e);
            epoch_start = step + 1;
        }
    }
    Ok(report)
}

/// Every `.pgm` file of `dir`, in file-name order.
pub fn load_corpus(dir: &Path) -> Result<Vec<Gray>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")) {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| Gray::load(p)).collect()
}

/// Trains a fresh model on the corpus in `corpus` and writes the weights,
/// both configurations and the metrics CSV under `out`.
pub fn train_dir(cfg: &TrainConfig, model_cfg: &MatcherConfig, corpus: &Path, out: &Path) -> Result<TrainReport> {
    let bases = load_corpus(corpus)?;
    let mut model = Model::init(model_cfg.clone(), cfg.seed)?;
    let report = train(&mut model, cfg, &bases, |_| {})?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    model.save(&out.join(WEIGHTS_DIR))?;
    let write = |name: &str, text: String| {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    write(TRAIN_CONFIG_FILE, config::render(cfg))?;
    write(METRICS_FILE, report.metrics_csv())?;
    Ok(report)
}
