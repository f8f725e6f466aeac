//! Optimization: AdamW with decoupled weight decay, warmup + cosine/linear
//! learning-rate schedules, loss-spike and plateau monitoring, and the
//! deterministic pre-training loop for both model families.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use crate::ar::{self, ArConfig, MixedSequence};
use crate::checkpoint;
use crate::codec::{self, Vocab};
use crate::encdec::{self, EncDecConfig};
use crate::error::{Error, Result};
use crate::patch::{assemble_example, MaskConfig};
use crate::render::{render_line, GlyphAtlas, RenderConfig};
use crate::rng::mix;
use crate::tensor::{Array, ParamSet, Session};

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-parameter first/second moments plus the step count.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub step: u64,
    m: BTreeMap<String, Array<f32>>,
    v: BTreeMap<String, Array<f32>>,
}

impl OptimState {
    pub fn new(params: &ParamSet<f32>, cfg: OptimConfig) -> Self {
        let m = params.iter().map(|(n, a)| (n.clone(), Array::zeros(a.rows, a.cols))).collect();
        let v = params.iter().map(|(n, a)| (n.clone(), Array::zeros(a.rows, a.cols))).collect();
        OptimState { cfg, step: 0, m, v }
    }
}

/// One AdamW update. Weight decay is applied as `theta -= lr * wd * theta`,
/// separate from the adaptive step. Non-finite gradients abort with the
/// offending parameter's name.
pub fn adamw_step(
    params: &mut ParamSet<f32>,
    grads: &BTreeMap<String, Array<f32>>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.cfg.beta1, state.cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (name, theta) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::Train(format!("no gradient for parameter {name}")))?;
        if grad.data.iter().any(|g| !g.is_finite()) {
            return Err(Error::Train(format!("non-finite gradient in parameter {name}")));
        }
        let m = state.m.get_mut(name).expect("moment shape mirrors params");
        let v = state.v.get_mut(name).expect("moment shape mirrors params");
        for i in 0..theta.data.len() {
            let g = grad.data[i] as f64;
            let mi = b1 * m.data[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v.data[i] as f64 + (1.0 - b2) * g * g;
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let th = theta.data[i] as f64;
            theta.data[i] = (th - lr * mhat / (vhat.sqrt() + state.cfg.eps) - lr * state.cfg.weight_decay * th) as f32;
        }
    }
    Ok(())
}

/// Scale gradients in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Array<f32>>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &x in &g.data {
            sq += (x as f64) * (x as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for x in g.data.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleShape {
    Cosine,
    Linear,
}

/// Linear warmup followed by cosine decay to `min_lr` (or linear decay to 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub shape: ScheduleShape,
}

impl Default for Schedule {
    fn default() -> Self {
        // Desk-scale default; full-scale runs used peak 1.5e-4 / min 1e-5
        // with a 50k-step warmup over ~1M steps.
        Schedule { peak_lr: 1.5e-4, min_lr: 1e-5, warmup_steps: 100, total_steps: 2000, shape: ScheduleShape::Cosine }
    }
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Train(format!("step {step} beyond total_steps {}", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let decay_span = (self.total_steps - self.warmup_steps).max(1);
        let t = (step - self.warmup_steps) as f64 / decay_span as f64;
        Ok(match self.shape {
            ScheduleShape::Cosine => self.min_lr + (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0,
            ScheduleShape::Linear => self.peak_lr * (1.0 - t),
        })
    }
}

/// Rolling spike and plateau detection over recent losses.
#[derive(Debug, Clone)]
pub struct StabilityMonitor {
    /// Spike window size.
    pub spike_window: usize,
    /// Spike threshold in rolling standard deviations.
    pub spike_k: f64,
    /// Plateau slope window.
    pub plateau_window: usize,
    /// Plateau slope threshold (flag when slope >= -tau).
    pub plateau_tau: f64,
    recent: VecDeque<f64>,
    slope_buf: VecDeque<f64>,
}

impl StabilityMonitor {
    pub fn new(spike_window: usize, spike_k: f64, plateau_window: usize, plateau_tau: f64) -> Self {
        StabilityMonitor {
            spike_window,
            spike_k,
            plateau_window,
            plateau_tau,
            recent: VecDeque::new(),
            slope_buf: VecDeque::new(),
        }
    }

    /// Record one loss; returns (spike, plateau) flags. A spike is a loss
    /// above `mean + k * std` of the previous full window.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        let spike = if self.recent.len() == self.spike_window {
            let n = self.recent.len() as f64;
            let mean = self.recent.iter().sum::<f64>() / n;
            let var = self.recent.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / n;
            loss > mean + self.spike_k * var.sqrt()
        } else {
            false
        };
        self.recent.push_back(loss);
        if self.recent.len() > self.spike_window {
            self.recent.pop_front();
        }
        self.slope_buf.push_back(loss);
        if self.slope_buf.len() > self.plateau_window {
            self.slope_buf.pop_front();
        }
        (spike, self.plateau())
    }

    /// True when the least-squares slope of the last full plateau window is
    /// shallower than `-tau` (no longer meaningfully decreasing).
    pub fn plateau(&self) -> bool {
        if self.slope_buf.len() < self.plateau_window {
            return false;
        }
        slope(self.slope_buf.iter().copied()) >= -self.plateau_tau
    }
}

/// Least-squares slope of a series against its index.
fn slope(values: impl Iterator<Item = f64>) -> f64 {
    let ys: Vec<f64> = values.collect();
    let n = ys.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    num / den
}

/// Loop-level configuration shared by both model families.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: Schedule,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Global-norm gradient clipping; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Save a checkpoint every this many steps (0 = only the final one).
    pub ckpt_every: u64,
    pub out_dir: Option<PathBuf>,
    /// Abort after this many consecutive non-finite losses.
    pub max_nonfinite: usize,
    pub spike_window: usize,
    pub spike_k: f64,
    pub plateau_window: usize,
    pub plateau_tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            schedule: Schedule::default(),
            optim: OptimConfig::default(),
            seed: 42,
            grad_clip: Some(1.0),
            ckpt_every: 0,
            out_dir: None,
            max_nonfinite: 3,
            spike_window: 100,
            spike_k: 5.0,
            plateau_window: 200,
            plateau_tau: 1e-5,
        }
    }
}

/// Per-step batch statistics handed back by the model-specific closure.
pub struct StepStats {
    pub grads: BTreeMap<String, Array<f32>>,
    pub mse: f64,
    pub ce: f64,
    pub total: f64,
}

/// Result of a pre-training run.
#[derive(Debug)]
pub struct Outcome {
    pub params: ParamSet<f32>,
    pub steps: u64,
    /// One tab-separated line per step: step, lr, mse, ce, total, spike, plateau.
    pub metrics_log: String,
    pub final_checkpoint: Option<PathBuf>,
}

fn save_ckpt(
    dir: &Path,
    magic: [u8; 4],
    config: &BTreeMap<String, String>,
    params: &ParamSet<f32>,
    step: u64,
    label: &str,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("ckpt_{label}.ptpc"));
    checkpoint::save(&path, magic, config, params, step)?;
    Ok(path)
}

/// Generic deterministic training loop. `step_fn(params, step)` must compute
/// batch gradients and losses; everything else (schedule, clipping, optimizer,
/// monitoring, checkpoint cadence, metrics log) lives here.
pub fn run_loop<F>(
    mut params: ParamSet<f32>,
    magic: [u8; 4],
    model_config: &BTreeMap<String, String>,
    train: &TrainConfig,
    mut step_fn: F,
) -> Result<Outcome>
where
    F: FnMut(&ParamSet<f32>, u64) -> Result<StepStats>,
{
    let mut state = OptimState::new(&params, train.optim.clone());
    let mut monitor = StabilityMonitor::new(train.spike_window, train.spike_k, train.plateau_window, train.plateau_tau);
    let mut log = String::new();
    let mut nonfinite_streak = 0usize;
    let total = train.schedule.total_steps;

    for step in 0..total {
        let lr = train.schedule.lr_at(step)?;
        let stats = step_fn(&params, step)?;
        if !stats.total.is_finite() {
            nonfinite_streak += 1;
            if nonfinite_streak >= train.max_nonfinite {
                let diagnostic = match &train.out_dir {
                    Some(dir) => Some(save_ckpt(dir, magic, model_config, &params, step, "diagnostic")?),
                    None => None,
                };
                return Err(Error::Train(format!(
                    "non-finite loss for {nonfinite_streak} consecutive steps at step {step}{}",
                    diagnostic.map(|p| format!("; diagnostic checkpoint at {}", p.display())).unwrap_or_default()
                )));
            }
        } else {
            nonfinite_streak = 0;
        }
        let mut grads = stats.grads;
        if let Some(max_norm) = train.grad_clip {
            clip_global_norm(&mut grads, max_norm);
        }
        adamw_step(&mut params, &grads, &mut state, lr)?;
        let (spike, plateau) = monitor.observe(stats.total);
        log.push_str(&format!(
            "{step}\t{lr:.8e}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\t{}\n",
            stats.mse,
            stats.ce,
            stats.total,
            spike as u8,
            plateau as u8
        ));
        if train.ckpt_every > 0 && (step + 1) % train.ckpt_every == 0 && step + 1 < total {
            if let Some(dir) = &train.out_dir {
                save_ckpt(dir, magic, model_config, &params, step + 1, &format!("{:07}", step + 1))?;
            }
        }
    }

    let final_checkpoint = match &train.out_dir {
        Some(dir) => {
            let p = save_ckpt(dir, magic, model_config, &params, total, "final")?;
            std::fs::write(dir.join("metrics.tsv"), &log)?;
            Some(p)
        }
        None => None,
    };
    Ok(Outcome { params, steps: total, metrics_log: log, final_checkpoint })
}

/// Inputs for encoder-decoder pre-training.
pub struct EncDecPretrain<'a> {
    pub corpus: &'a [String],
    pub vocab: &'a Vocab,
    pub atlas: &'a GlyphAtlas,
    pub render: RenderConfig,
    pub mask: MaskConfig,
    pub model: EncDecConfig,
}

/// Pre-train the encoder-decoder model. Deterministic given `train.seed` and
/// the corpus order; batches walk the corpus round-robin and masking seeds
/// derive from the global example index.
pub fn run_encdec_pretraining(spec: &EncDecPretrain, train: &TrainConfig) -> Result<Outcome> {
    if spec.corpus.is_empty() {
        return Err(Error::Train("empty corpus".into()));
    }
    spec.model.validate()?;
    spec.render.validate()?;
    let params: ParamSet<f32> = encdec::init_params(&spec.model, train.seed);
    let model_config = spec.model.to_map();
    let bos = spec.vocab.bos_id();
    run_loop(params, checkpoint::MAGIC_ENCDEC, &model_config, train, |params, step| {
        let mut grads: BTreeMap<String, Array<f32>> = BTreeMap::new();
        let (mut mse, mut ce, mut total) = (0.0, 0.0, 0.0);
        for j in 0..train.batch_size {
            let gi = step * train.batch_size as u64 + j as u64;
            let text = &spec.corpus[(gi % spec.corpus.len() as u64) as usize];
            let ex = assemble_example(
                text,
                spec.atlas,
                &spec.render,
                &spec.mask,
                spec.vocab,
                spec.model.c,
                mix(train.seed, gi),
            )?;
            let sess = Session::new(params);
            let out = encdec::forward_loss(&sess, &spec.model, &ex, bos)?;
            accumulate_grads(&mut grads, sess.grads(out.total_var), train.batch_size);
            mse += out.mse_patch / train.batch_size as f64;
            ce += out.ce_text / train.batch_size as f64;
            total += out.total / train.batch_size as f64;
        }
        Ok(StepStats { grads, mse, ce, total })
    })
}

/// One autoregressive training document.
#[derive(Debug, Clone)]
pub enum ArExample {
    /// Screenshot segment rendered from `image_text`, then `text` tokens.
    Mixed { image_text: String, text: String },
    /// Token-only sequence (`BOS` prepended).
    TextOnly { text: String },
}

/// Inputs for autoregressive pre-training.
pub struct ArPretrain<'a> {
    pub corpus: &'a [ArExample],
    pub vocab: &'a Vocab,
    pub atlas: &'a GlyphAtlas,
    pub render: RenderConfig,
    pub model: ArConfig,
    pub loss_weight_text: f64,
    /// Continue from existing parameters instead of a fresh init (the
    /// text-only-to-mixed fine-tuning path re-initializes the patch
    /// projection and pixel head).
    pub init_from: Option<ParamSet<f32>>,
}

/// Build the mixed sequence for one AR example.
pub fn ar_sequence(
    example: &ArExample,
    vocab: &Vocab,
    atlas: &GlyphAtlas,
    render: &RenderConfig,
    cfg: &ArConfig,
) -> Result<MixedSequence> {
    match example {
        ArExample::Mixed { image_text, text } => {
            let shot = render_line(image_text, atlas, render);
            let tokens = codec::encode(text, vocab);
            ar::build_mixed_input(&shot, &tokens, vocab, shot.n_patches(), cfg.c)
        }
        ArExample::TextOnly { text } => {
            let mut tokens = vec![vocab.bos_id()];
            tokens.extend(codec::encode(text, vocab));
            Ok(MixedSequence::text_only(&tokens))
        }
    }
}

/// Pre-train (or continue training) the autoregressive model.
pub fn run_ar_pretraining(spec: &ArPretrain, train: &TrainConfig) -> Result<Outcome> {
    if spec.corpus.is_empty() {
        return Err(Error::Train("empty corpus".into()));
    }
    spec.model.validate()?;
    spec.render.validate()?;
    let params: ParamSet<f32> = match &spec.init_from {
        Some(p) => continue_from_text_only(p, &spec.model, train.seed)?,
        None => ar::init_params(&spec.model, train.seed),
    };
    let model_config = spec.model.to_map();
    run_loop(params, checkpoint::MAGIC_AR, &model_config, train, |params, step| {
        let mut grads: BTreeMap<String, Array<f32>> = BTreeMap::new();
        let (mut mse, mut ce, mut total) = (0.0, 0.0, 0.0);
        for j in 0..train.batch_size {
            let gi = step * train.batch_size as u64 + j as u64;
            let example = &spec.corpus[(gi % spec.corpus.len() as u64) as usize];
            let seq = ar_sequence(example, spec.vocab, spec.atlas, &spec.render, &spec.model)?;
            let sess = Session::new(params);
            let out = ar::losses(&sess, &spec.model, &seq, spec.loss_weight_text)?;
            accumulate_grads(&mut grads, sess.grads(out.total_var), train.batch_size);
            mse += out.mse_patch / train.batch_size as f64;
            ce += out.ce_text / train.batch_size as f64;
            total += out.total / train.batch_size as f64;
        }
        Ok(StepStats { grads, mse, ce, total })
    })
}

/// Adapt text-only AR parameters to the mixed-modal architecture: all
/// matching tensors are copied; the patch projection and pixel head are
/// freshly initialized.
pub fn continue_from_text_only(source: &ParamSet<f32>, cfg: &ArConfig, seed: u64) -> Result<ParamSet<f32>> {
    let mut fresh: ParamSet<f32> = ar::init_params(cfg, seed);
    let vision_names = ["patch_proj.w", "patch_proj.b", "pixel_head.w", "pixel_head.b"];
    for (name, tensor) in fresh.iter_mut() {
        if vision_names.contains(&name.as_str()) {
            continue;
        }
        let src = source
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("source checkpoint missing tensor {name}")))?;
        if (src.rows, src.cols) != (tensor.rows, tensor.cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: source {}x{} vs target {}x{}",
                src.rows, src.cols, tensor.rows, tensor.cols
            )));
        }
        *tensor = src.clone();
    }
    Ok(fresh)
}

fn accumulate_grads(
    into: &mut BTreeMap<String, Array<f32>>,
    from: BTreeMap<String, Array<f32>>,
    batch: usize,
) {
    let inv = 1.0 / batch as f32;
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, &b) in acc.data.iter_mut().zip(&g.data) {
                    *a += b * inv;
                }
            }
            None => {
                let mut scaled = g;
                for v in scaled.data.iter_mut() {
                    *v *= inv;
                }
                into.insert(name, scaled);
            }
        }
    }
}
