//! Downstream fine-tuning and evaluation: rendered task inputs, the
//! encoder-only pooled head, sequence-to-sequence label mapping,
//! classification/regression metrics, synthetic task generators, and a
//! grid-search harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{self, TokenId, Vocab};
use crate::encdec::{self, EncDecConfig};
use crate::error::{Error, Result};
use crate::patch::{attention_mask, split_patches, AttentionMask, PatchGrid};
use crate::render::{render_line, GlyphAtlas, RenderConfig, Screenshot};
use crate::rng::{mix, Rng};
use crate::tensor::params::Init;
use crate::tensor::{ParamSet, Session, Var};
use crate::train::{adamw_step, OptimConfig, OptimState, Schedule, ScheduleShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
    /// Label-text generation through the text decoder.
    Seq2Seq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Accuracy,
    F1,
    Matthews,
    Spearman,
}

impl MetricKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "accuracy" => MetricKind::Accuracy,
            "f1" => MetricKind::F1,
            "matthews" => MetricKind::Matthews,
            "spearman" => MetricKind::Spearman,
            other => return Err(Error::Config(format!("unknown metric {other:?}"))),
        })
    }
}

/// What a task is and how it is scored.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Ordered label texts; nonempty exactly for seq2seq tasks.
    pub label_texts: Vec<String>,
    pub n_classes: usize,
    pub metric: MetricKind,
    pub pair_task: bool,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let s2s = self.kind == TaskKind::Seq2Seq;
        if s2s != !self.label_texts.is_empty() {
            return Err(Error::Config("label_texts must be nonempty exactly for seq2seq tasks".into()));
        }
        if self.kind == TaskKind::Regression && self.metric != MetricKind::Spearman {
            return Err(Error::Config("regression tasks score with spearman".into()));
        }
        Ok(())
    }
}

/// One labelled item. Classification labels are class indices; regression
/// labels are raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskItem {
    pub sent1: String,
    pub sent2: Option<String>,
    pub label: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TaskData {
    pub train: Vec<TaskItem>,
    pub validation: Vec<TaskItem>,
}

/// Parse task TSV: `sentence1<TAB>[sentence2<TAB>]label`, one item per line.
pub fn parse_task_tsv(text: &str) -> Result<Vec<TaskItem>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let (sent1, sent2, label) = match cols.len() {
            2 => (cols[0], None, cols[1]),
            3 => (cols[0], Some(cols[1]), cols[2]),
            n => {
                return Err(Error::Config(format!("line {}: expected 2 or 3 tab-separated columns, found {n}", lineno + 1)));
            }
        };
        let label: f64 = label
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("line {}: bad label {label:?}", lineno + 1)))?;
        out.push(TaskItem { sent1: sent1.to_string(), sent2: sent2.map(String::from), label });
    }
    Ok(out)
}

pub fn load_task_tsv(path: &Path) -> Result<Vec<TaskItem>> {
    parse_task_tsv(&std::fs::read_to_string(path)?)
}

/// Render a task input exactly like pre-training inputs: prefix, newline
/// substitution, EOS black patch. Sentence pairs get the newline symbol
/// rendered between them.
pub fn render_task_input(
    sent1: &str,
    sent2: Option<&str>,
    atlas: &GlyphAtlas,
    config: &RenderConfig,
) -> Screenshot {
    match sent2 {
        Some(s2) => render_line(&format!("{sent1}{}{s2}", config.newline_symbol), atlas, config),
        None => render_line(sent1, atlas, config),
    }
}

/// Head parameters for encoder-only fine-tuning, added next to the encoder's.
pub fn init_head<R: crate::tensor::Real>(cfg: &EncDecConfig, n_out: usize, seed: u64) -> ParamSet<R> {
    let mut rng = Rng::seed(seed);
    let mut init = Init::new(&mut rng);
    let mut p = ParamSet::new();
    init.weight(&mut p, "head.w", cfg.enc_hidden, n_out);
    init.zeros(&mut p, "head.b", 1, n_out);
    p
}

/// Encoder-only forward: mean of the last-layer states over attended patches
/// (CLS excluded), then the linear head. No patch masking.
pub fn encoder_head_forward<R: crate::tensor::Real>(
    sess: &Session<R>,
    cfg: &EncDecConfig,
    grid: &PatchGrid,
    attention: &AttentionMask,
) -> Result<Var> {
    let enc = encdec::encode_grid(sess, cfg, grid, &attention.attend, |_| false)?;
    // Rows 1.. are exactly the attended patches.
    let k = enc.kept.len();
    let rows: Vec<usize> = (1..=k).collect();
    let patch_states = sess.tape.gather_rows(enc.states, &rows);
    let pooled = sess.tape.mean_rows(patch_states);
    Ok(sess.linear(pooled, "head.w", Some("head.b")))
}

/// Round a value to the nearest multiple of 0.2 (ties away from zero upward)
/// and format with one decimal, the label-text convention for regression
/// tasks scored over 0.2-step targets.
pub fn regression_label_text(value: f64) -> String {
    // The epsilon keeps decimal ties (e.g. 2.3) rounding up despite binary
    // representation error.
    let rounded = ((value * 5.0) + 0.5 + 1e-9).floor() / 5.0;
    format!("{rounded:.1}")
}

/// A parsed seq2seq prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelParse {
    Class(usize),
    Value(f64),
    /// Generated text matched nothing; scored as incorrect / 0.0.
    Invalid,
}

/// Map a gold label to its training text.
pub fn label_text_of(spec: &TaskSpec, label: f64) -> Result<String> {
    match spec.kind {
        TaskKind::Seq2Seq if spec.n_classes > 0 => {
            let idx = label as usize;
            spec.label_texts
                .get(idx)
                .cloned()
                .ok_or_else(|| Error::Config(format!("class {idx} out of {} label texts", spec.label_texts.len())))
        }
        TaskKind::Seq2Seq => Ok(regression_label_text(label)),
        _ => Err(Error::Config("label_text_of on a non-seq2seq task".into())),
    }
}

/// Interpret generated text as a prediction: exact label-text match after
/// whitespace trimming for classification, float parse for regression.
pub fn parse_generated_label(spec: &TaskSpec, text: &str) -> LabelParse {
    let trimmed = text.trim();
    if spec.n_classes > 0 {
        match spec.label_texts.iter().position(|l| l == trimmed) {
            Some(idx) => LabelParse::Class(idx),
            None => LabelParse::Invalid,
        }
    } else {
        match trimmed.parse::<f64>() {
            Ok(v) => LabelParse::Value(v),
            Err(_) => LabelParse::Invalid,
        }
    }
}

/// Compute a metric over parallel prediction/gold vectors.
pub fn metric(kind: MetricKind, predictions: &[f64], golds: &[f64]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Invalid(format!("length mismatch: {} predictions vs {} golds", predictions.len(), golds.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Invalid("empty metric input".into()));
    }
    Ok(match kind {
        MetricKind::Accuracy => {
            let correct = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
            correct as f64 / golds.len() as f64
        }
        MetricKind::F1 => {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for (&p, &g) in predictions.iter().zip(golds) {
                if p == 1.0 && g == 1.0 {
                    tp += 1.0;
                } else if p == 1.0 {
                    fp += 1.0;
                } else if g == 1.0 {
                    fn_ += 1.0;
                }
            }
            if tp == 0.0 {
                0.0
            } else {
                let precision = tp / (tp + fp);
                let recall = tp / (tp + fn_);
                2.0 * precision * recall / (precision + recall)
            }
        }
        MetricKind::Matthews => {
            let (mut tp, mut tn, mut fp, mut fn_) = (0.0f64, 0.0, 0.0, 0.0);
            for (&p, &g) in predictions.iter().zip(golds) {
                match (p == 1.0, g == 1.0) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    (false, false) => tn += 1.0,
                }
            }
            let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
            if denom == 0.0 {
                0.0
            } else {
                (tp * tn - fp * fn_) / denom.sqrt()
            }
        }
        MetricKind::Spearman => {
            let ra = average_ranks(predictions);
            let rb = average_ranks(golds);
            pearson(&ra, &rb)
        }
    })
}

/// Average ranks (1-based); ties share the mean of their rank span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("NaN in rank input"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        num / (va * vb).sqrt()
    }
}

/// Grid-search axes. Step counts (not epochs) control training length.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub step_counts: Vec<u64>,
    pub seeds: Vec<u64>,
    pub eval_every: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        // Desk-scale grid; the full-scale recipe swept lrs {1e-5, 3e-5, 5e-5},
        // batches {32, 64, 256}, and steps {8k, 15k, 30k} over seeds {42,43,44}.
        GridSpec {
            learning_rates: vec![1e-3, 3e-4],
            batch_sizes: vec![8],
            step_counts: vec![300],
            seeds: vec![42, 43, 44],
            eval_every: 50,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.batch_sizes.is_empty() || self.step_counts.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid axes must all be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneMode {
    EncoderOnly,
    Seq2Seq,
}

/// One grid row: a (cell, seed) fine-tuning run's best validation result.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub best_score: f64,
    pub best_step: u64,
}

#[derive(Debug, Clone)]
pub struct GridResults {
    pub rows: Vec<GridRow>,
    /// Mean best score per (lr, batch, steps) cell, in row order of cells.
    pub cell_means: Vec<((f64, usize, u64), f64)>,
    pub best_cell: ((f64, usize, u64), f64),
    /// The single best (cell, seed) run and its parameter snapshot.
    pub best_row: GridRow,
    pub best_params: ParamSet<f32>,
}

impl GridResults {
    /// TSV with columns lr, batch, steps, seed, best_score, best_step.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{:.6}\t{}", r.lr, r.batch, r.steps, r.seed, r.best_score, r.best_step);
        }
        out
    }
}

/// Everything a fine-tuning run needs besides the grid cell.
pub struct FineTune<'a> {
    pub data: &'a TaskData,
    pub spec: &'a TaskSpec,
    pub base_params: &'a ParamSet<f32>,
    pub model: &'a EncDecConfig,
    pub vocab: &'a Vocab,
    pub atlas: &'a GlyphAtlas,
    pub render: RenderConfig,
    pub mode: FineTuneMode,
}

struct Prepared {
    grid: PatchGrid,
    attention: AttentionMask,
    label: f64,
}

fn prepare(items: &[TaskItem], ft: &FineTune) -> Result<Vec<Prepared>> {
    items
        .iter()
        .map(|item| {
            let shot = render_task_input(&item.sent1, item.sent2.as_deref(), ft.atlas, &ft.render);
            let grid = split_patches(&shot, ft.model.p_h, ft.model.p_w, ft.model.c)?;
            let attention = attention_mask(&grid, shot.eos_patch_index)?;
            Ok(Prepared { grid, attention, label: item.label })
        })
        .collect()
}

/// Result of one fine-tuning run: the best validation score, the step it
/// occurred at, and the parameters from that point.
pub struct FineTuneRun {
    pub best_score: f64,
    pub best_step: u64,
    pub best_params: ParamSet<f32>,
}

/// Fine-tune once with fixed hyperparameters, evaluating every `eval_every`
/// steps and at the end, and keep the best validation snapshot.
pub fn fine_tune_once(
    ft: &FineTune,
    lr: f64,
    batch: usize,
    steps: u64,
    seed: u64,
    eval_every: u64,
) -> Result<FineTuneRun> {
    ft.spec.validate()?;
    let train_items = prepare(&ft.data.train, ft)?;
    let val_items = prepare(&ft.data.validation, ft)?;
    if train_items.is_empty() || val_items.is_empty() {
        return Err(Error::Config("need nonempty train and validation splits".into()));
    }

    let mut params = ft.base_params.clone();
    if ft.mode == FineTuneMode::EncoderOnly {
        let n_out = match ft.spec.kind {
            TaskKind::Classification => ft.spec.n_classes,
            TaskKind::Regression => 1,
            TaskKind::Seq2Seq => {
                return Err(Error::Config("seq2seq task spec with encoder-only mode".into()));
            }
        };
        params.absorb(init_head(ft.model, n_out, mix(seed, 0x11ea4)));
    }

    let schedule = Schedule {
        peak_lr: lr,
        min_lr: 0.0,
        warmup_steps: (steps / 10).min(100),
        total_steps: steps,
        shape: ScheduleShape::Linear,
    };
    let mut optim = OptimState::new(&params, OptimConfig::default());
    let mut rng = Rng::seed(mix(seed, 0x0bde4));
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0usize;

    if steps == 0 {
        let best_score = evaluate(ft, &params, &val_items)?;
        return Ok(FineTuneRun { best_score, best_step: 0, best_params: params });
    }
    let mut best = FineTuneRun { best_score: f64::NEG_INFINITY, best_step: 0, best_params: params.clone() };

    for step in 0..steps {
        let step_lr = schedule.lr_at(step)?;
        let mut grads: BTreeMap<String, crate::tensor::Array<f32>> = BTreeMap::new();
        for _ in 0..batch {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let item = &train_items[order[cursor]];
            cursor += 1;
            let sess = Session::new(&params);
            let loss_var = match ft.mode {
                FineTuneMode::EncoderOnly => {
                    let scores = encoder_head_forward(&sess, ft.model, &item.grid, &item.attention)?;
                    match ft.spec.kind {
                        TaskKind::Classification => sess.tape.cross_entropy_mean(scores, &[item.label as usize]),
                        _ => {
                            let target = crate::tensor::Array::from_vec(1, 1, vec![item.label as f32]);
                            sess.tape.mse_mean(scores, &target)
                        }
                    }
                }
                FineTuneMode::Seq2Seq => {
                    let enc = encdec::encode_grid(&sess, ft.model, &item.grid, &item.attention.attend, |_| false)?;
                    let mut targets: Vec<TokenId> = codec::encode(&label_text_of(ft.spec, item.label)?, ft.vocab);
                    targets.push(ft.vocab.eos_id());
                    let logits = encdec::decode_text(&sess, ft.model, &enc, &targets, ft.vocab.bos_id())?;
                    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
                    sess.tape.cross_entropy_mean(logits, &ids)
                }
            };
            let scaled = sess.tape.scale(loss_var, 1.0 / batch as f64);
            for (name, g) in sess.grads(scaled) {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, &b) in acc.data.iter_mut().zip(&g.data) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        crate::train::clip_global_norm(&mut grads, 1.0);
        adamw_step(&mut params, &grads, &mut optim, step_lr)?;

        if (eval_every > 0 && (step + 1) % eval_every == 0) || step + 1 == steps {
            let score = evaluate(ft, &params, &val_items)?;
            if score > best.best_score {
                best = FineTuneRun { best_score: score, best_step: step + 1, best_params: params.clone() };
            }
        }
    }
    Ok(best)
}

/// Score `params` (which must already carry any head tensors) on the
/// validation split without training.
pub fn evaluate_validation(ft: &FineTune, params: &ParamSet<f32>) -> Result<f64> {
    let items = prepare(&ft.data.validation, ft)?;
    if items.is_empty() {
        return Err(Error::Config("empty validation split".into()));
    }
    evaluate(ft, params, &items)
}

fn evaluate(ft: &FineTune, params: &ParamSet<f32>, items: &[Prepared]) -> Result<f64> {
    let mut predictions = Vec::with_capacity(items.len());
    let mut golds = Vec::with_capacity(items.len());
    for item in items {
        let sess = Session::new(params);
        let pred = match ft.mode {
            FineTuneMode::EncoderOnly => {
                let scores = encoder_head_forward(&sess, ft.model, &item.grid, &item.attention)?;
                let values = sess.tape.value(scores);
                match ft.spec.kind {
                    TaskKind::Classification => {
                        let mut best = 0usize;
                        for c in 1..values.cols {
                            if values.data[c] > values.data[best] {
                                best = c;
                            }
                        }
                        best as f64
                    }
                    _ => values.data[0] as f64,
                }
            }
            FineTuneMode::Seq2Seq => {
                let enc = encdec::encode_grid(&sess, ft.model, &item.grid, &item.attention.attend, |_| false)?;
                let generated = encdec::generate_text(&sess, ft.model, &enc, ft.vocab.bos_id(), ft.vocab.eos_id(), 12)?;
                let text = codec::decode(&generated, ft.vocab)?;
                match parse_generated_label(ft.spec, &text) {
                    LabelParse::Class(c) => c as f64,
                    LabelParse::Value(v) => v,
                    // Unknown label text scores as incorrect (classification)
                    // or 0.0 (regression).
                    LabelParse::Invalid if ft.spec.n_classes > 0 => -1.0,
                    LabelParse::Invalid => 0.0,
                }
            }
        };
        predictions.push(pred);
        golds.push(item.label);
    }
    metric(ft.spec.metric, &predictions, &golds)
}

/// Run the full grid: every (lr, batch, steps) cell under every seed,
/// tracking each run's best validation score. Reports per-cell means over
/// seeds and the best cell.
pub fn run_grid(ft: &FineTune, grid: &GridSpec) -> Result<GridResults> {
    grid.validate()?;
    let mut rows = Vec::new();
    let mut best_run: Option<(GridRow, ParamSet<f32>)> = None;
    for &lr in &grid.learning_rates {
        for &batch in &grid.batch_sizes {
            for &steps in &grid.step_counts {
                for &seed in &grid.seeds {
                    let run = fine_tune_once(ft, lr, batch, steps, seed, grid.eval_every)?;
                    let row = GridRow { lr, batch, steps, seed, best_score: run.best_score, best_step: run.best_step };
                    if best_run.as_ref().is_none_or(|(r, _)| row.best_score > r.best_score) {
                        best_run = Some((row.clone(), run.best_params));
                    }
                    rows.push(row);
                }
            }
        }
    }
    let mut cell_means = Vec::new();
    for &lr in &grid.learning_rates {
        for &batch in &grid.batch_sizes {
            for &steps in &grid.step_counts {
                let scores: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.lr == lr && r.batch == batch && r.steps == steps)
                    .map(|r| r.best_score)
                    .collect();
                let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                cell_means.push(((lr, batch, steps), mean));
            }
        }
    }
    let best_cell = cell_means
        .iter()
        .cloned()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .expect("nonempty grid");
    let (best_row, best_params) = best_run.expect("nonempty grid");
    Ok(GridResults { rows, cell_means, best_cell, best_row, best_params })
}

// --- synthetic task generators ---

const FILLERS: [&str; 12] = [
    "sun", "rain", "tree", "road", "bell", "song", "wind", "leaf", "door", "lamp", "sand", "wave",
];

/// Keyword-count parity task: the label is `count(keyword) % 2`. With
/// `max_count = 1` the task degenerates to keyword presence, which is
/// linearly separable from the rendered input.
pub fn gen_parity_task(keyword: &str, n_train: usize, n_val: usize, max_count: usize, words_per_sent: usize, seed: u64) -> TaskData {
    let mut rng = Rng::seed(seed);
    let mut gen = |n: usize| {
        (0..n)
            .map(|_| {
                let count = rng.below(max_count + 1);
                let mut words: Vec<&str> = (0..words_per_sent).map(|_| FILLERS[rng.below(FILLERS.len())]).collect();
                for _ in 0..count {
                    let pos = rng.below(words.len() + 1);
                    words.insert(pos.min(words.len()), keyword);
                }
                TaskItem { sent1: words.join(" "), sent2: None, label: (count % 2) as f64 }
            })
            .collect::<Vec<_>>()
    };
    TaskData { train: gen(n_train), validation: gen(n_val) }
}

/// Rendered-number regression: "value is <x>" with the number as the label.
pub fn gen_number_task(n_train: usize, n_val: usize, seed: u64) -> TaskData {
    let mut rng = Rng::seed(seed);
    let mut gen = |n: usize| {
        (0..n)
            .map(|_| {
                let v = (rng.below(26) as f64) * 0.2; // 0.0 to 5.0
                TaskItem { sent1: format!("value is {v:.1}"), sent2: None, label: v }
            })
            .collect::<Vec<_>>()
    };
    TaskData { train: gen(n_train), validation: gen(n_val) }
}

/// Pairwise entailment templates: the hypothesis either repeats words from
/// the premise (label 1) or uses disjoint words (label 0).
pub fn gen_entailment_task(n_train: usize, n_val: usize, seed: u64) -> TaskData {
    let mut rng = Rng::seed(seed);
    let mut gen = |n: usize| {
        (0..n)
            .map(|_| {
                let a = FILLERS[rng.below(6)];
                let b = FILLERS[6 + rng.below(6)];
                let entails = rng.below(2) == 1;
                let hypothesis = if entails { format!("{a} {b}") } else { format!("{b} {a} not") };
                TaskItem {
                    sent1: format!("{a} and {b}"),
                    sent2: Some(hypothesis),
                    label: entails as u8 as f64,
                }
            })
            .collect::<Vec<_>>()
    };
    TaskData { train: gen(n_train), validation: gen(n_val) }
}
