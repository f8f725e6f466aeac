//! Patch grids, masking plans, target standardization, and pre-training
//! example assembly.

use std::collections::BTreeMap;

use crate::codec::{self, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::render::{render_line, GlyphAtlas, RenderConfig, Screenshot};
use crate::rng::{mix, Rng};

/// A screenshot split into `n` flattened patches of `p_h * p_w * c` values.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Vec<Vec<f32>>,
    pub p_h: usize,
    pub p_w: usize,
    pub c: usize,
}

impl PatchGrid {
    pub fn n(&self) -> usize {
        self.patches.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.p_h * self.p_w * self.c
    }
}

/// Split a screenshot into non-overlapping `p_h x p_w` patches, left to
/// right. Channels are replicated when `c > 1`. Lossless: [`reassemble`]
/// reproduces the source exactly.
pub fn split_patches(s: &Screenshot, p_h: usize, p_w: usize, c: usize) -> Result<PatchGrid> {
    if s.height != p_h {
        return Err(Error::Shape(format!("screenshot height {} != patch height {p_h}", s.height)));
    }
    if !s.width.is_multiple_of(p_w) {
        return Err(Error::Shape(format!("screenshot width {} not divisible by patch width {p_w}", s.width)));
    }
    let n = s.width / p_w;
    let mut patches = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = Vec::with_capacity(p_h * p_w * c);
        for y in 0..p_h {
            for x in 0..p_w {
                let px = s.pixels[y * s.width + i * p_w + x];
                for _ in 0..c {
                    v.push(px);
                }
            }
        }
        patches.push(v);
    }
    Ok(PatchGrid { patches, p_h, p_w, c })
}

/// Rebuild the pixel grid from patches (first channel only).
pub fn reassemble(grid: &PatchGrid) -> Vec<f32> {
    let n = grid.n();
    let width = n * grid.p_w;
    let mut pixels = vec![0.0f32; width * grid.p_h];
    for (i, patch) in grid.patches.iter().enumerate() {
        for y in 0..grid.p_h {
            for x in 0..grid.p_w {
                pixels[y * width + i * grid.p_w + x] = patch[(y * grid.p_w + x) * grid.c];
            }
        }
    }
    pixels
}

/// Which patches a plan masks, and the spans it drew, in draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMaskPlan {
    pub masked: Vec<usize>,
    /// (start, length) spans in the order they were drawn; their union is
    /// exactly `masked`.
    pub spans: Vec<(usize, usize)>,
    pub target_rate: f64,
    pub seed: u64,
}

impl PatchMaskPlan {
    pub fn is_masked(&self, idx: usize) -> bool {
        self.masked.binary_search(&idx).is_ok()
    }

    /// Line-oriented debug dump: one `span <start> <len>` record per span.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for &(start, len) in &self.spans {
            out.push_str(&format!("span {start} {len}\n"));
        }
        out
    }
}

/// Draw a span-masking plan over `n_maskable` positions.
///
/// Exactly `round(rate * n_maskable)` positions end up masked. Span lengths
/// invert `cum_weights` against a uniform draw (`cum_weights[i]` is the
/// probability of a length `<= i+1`); starts are drawn uniformly over the
/// positions where the whole span fits without touching an existing mask. A
/// span that would overshoot the budget is truncated to fit; after 100
/// failed draws the leftmost unmasked positions are taken directly.
pub fn span_mask(n_maskable: usize, rate: f64, max_span: usize, cum_weights: &[f64], seed: u64) -> PatchMaskPlan {
    assert!((0.0..=1.0).contains(&rate), "rate out of range");
    assert_eq!(cum_weights.len(), max_span, "cum_weights length must equal max_span");
    assert!(
        cum_weights.windows(2).all(|w| w[0] < w[1]) && (cum_weights.last().copied().unwrap_or(1.0) - 1.0).abs() < 1e-12,
        "cum_weights must be strictly increasing and end at 1"
    );
    let mut rng = Rng::seed(seed);
    let target = (rate * n_maskable as f64).round() as usize;
    let mut masked = vec![false; n_maskable];
    let mut count = 0usize;
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut rejections = 0usize;
    while count < target {
        if rejections >= 100 {
            // Deterministic fallback: take the leftmost unmasked positions.
            let mut i = 0;
            while count < target {
                if !masked[i] {
                    masked[i] = true;
                    spans.push((i, 1));
                    count += 1;
                }
                i += 1;
            }
            break;
        }
        let u = rng.f64();
        let mut len = cum_weights.iter().position(|&w| u < w).unwrap_or(max_span - 1) + 1;
        if len > target - count {
            len = target - count;
        }
        let starts: Vec<usize> = (0..=n_maskable.saturating_sub(len))
            .filter(|&s| n_maskable >= len && (s..s + len).all(|i| !masked[i]))
            .collect();
        if starts.is_empty() {
            rejections += 1;
            continue;
        }
        rejections = 0;
        let start = starts[rng.below(starts.len())];
        for slot in masked.iter_mut().skip(start).take(len) {
            *slot = true;
        }
        spans.push((start, len));
        count += len;
    }
    let masked: Vec<usize> = (0..n_maskable).filter(|&i| masked[i]).collect();
    PatchMaskPlan { masked, spans, target_rate: rate, seed }
}

/// Uniform masking: `round(rate * n_maskable)` positions drawn without
/// replacement, recorded as length-1 spans.
pub fn uniform_mask(n_maskable: usize, rate: f64, seed: u64) -> PatchMaskPlan {
    assert!((0.0..=1.0).contains(&rate), "rate out of range");
    let mut rng = Rng::seed(seed);
    let target = (rate * n_maskable as f64).round() as usize;
    let masked = rng.sample_indices(n_maskable, target);
    let spans = masked.iter().map(|&i| (i, 1)).collect();
    PatchMaskPlan { masked, spans, target_rate: rate, seed }
}

/// A text corruption: masked positions, the corrupted sequence after mask
/// substitution and merging, and the original.
#[derive(Debug, Clone, PartialEq)]
pub struct TextMaskPlan {
    pub masked_positions: Vec<usize>,
    pub corrupted: Vec<TokenId>,
    pub original: Vec<TokenId>,
}

/// Mask `round(rate * len)` token positions uniformly without replacement,
/// replace each with `mask_id`, and collapse maximal runs of `mask_id` into a
/// single occurrence.
pub fn mask_text(tokens: &[TokenId], rate: f64, mask_id: TokenId, seed: u64) -> TextMaskPlan {
    assert!(!tokens.is_empty(), "mask_text on empty token sequence");
    assert!((0.0..=1.0).contains(&rate), "rate out of range");
    let mut rng = Rng::seed(seed);
    let target = (rate * tokens.len() as f64).round() as usize;
    let masked_positions = rng.sample_indices(tokens.len(), target);
    let mut corrupted = Vec::with_capacity(tokens.len());
    let mut mask_set = vec![false; tokens.len()];
    for &p in &masked_positions {
        mask_set[p] = true;
    }
    for (i, &tok) in tokens.iter().enumerate() {
        let out = if mask_set[i] { mask_id } else { tok };
        if out == mask_id && corrupted.last() == Some(&mask_id) {
            continue;
        }
        corrupted.push(out);
    }
    TextMaskPlan { masked_positions, corrupted, original: tokens.to_vec() }
}

/// Per-patch standardization of a target pixel vector:
/// `(x - mean) / sqrt(var + 1e-6)` with population variance. Constant patches
/// map to zeros through the epsilon.
pub fn standardize_patch(target: &[f32]) -> Vec<f32> {
    const EPS: f64 = 1e-6;
    let n = target.len() as f64;
    let mean = target.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = target.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + EPS).sqrt();
    target.iter().map(|&x| ((x as f64 - mean) / denom) as f32).collect()
}

/// Per-patch attention: true up to and including the EOS patch, false after;
/// all true when no EOS patch exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub attend: Vec<bool>,
}

impl AttentionMask {
    pub fn attended_indices(&self) -> Vec<usize> {
        (0..self.attend.len()).filter(|&i| self.attend[i]).collect()
    }
}

pub fn attention_mask(grid: &PatchGrid, eos_patch_index: Option<usize>) -> Result<AttentionMask> {
    let n = grid.n();
    if let Some(eos) = eos_patch_index {
        if eos >= n {
            return Err(Error::Shape(format!("eos index {eos} out of {n} patches")));
        }
    }
    let attend = match eos_patch_index {
        Some(eos) => (0..n).map(|i| i <= eos).collect(),
        None => vec![true; n],
    };
    Ok(AttentionMask { attend })
}

/// Masking hyperparameters for pre-training example assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    pub text_rate: f64,
    pub patch_rate: f64,
    /// Span masking when true; uniform single-patch masking otherwise.
    pub span: bool,
    pub max_span: usize,
    pub cum_weights: Vec<f64>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            text_rate: 0.25,
            patch_rate: 0.10,
            span: true,
            max_span: 6,
            cum_weights: vec![0.2, 0.4, 0.6, 0.8, 0.9, 1.0],
        }
    }
}

/// One complete pre-training instance.
#[derive(Debug, Clone)]
pub struct PretrainExample {
    pub original_tokens: Vec<TokenId>,
    pub text_plan: TextMaskPlan,
    /// Rendered from the corrupted text.
    pub screenshot: Screenshot,
    pub grid: PatchGrid,
    pub patch_plan: PatchMaskPlan,
    pub attention: AttentionMask,
    /// Standardized pixel targets, defined exactly for the masked patches.
    pub patch_targets: BTreeMap<usize, Vec<f32>>,
}

/// Count of maskable patches: content patches before the EOS patch, or up to
/// the last non-white patch when no EOS exists.
pub fn n_maskable(grid: &PatchGrid, eos_patch_index: Option<usize>) -> usize {
    match eos_patch_index {
        Some(eos) => eos,
        None => (0..grid.n())
            .rev()
            .find(|&i| grid.patches[i].iter().any(|&p| p != 1.0))
            .map_or(0, |i| i + 1),
    }
}

/// Rendering density of a corpus under a tokenizer: how many text tokens fit
/// in one patch on average. Measured on uncorrupted renderings with the
/// configured prefix disabled, so the ratio describes the corpus text alone.
pub fn token_patch_density(
    corpus: &[String],
    vocab: &Vocab,
    atlas: &GlyphAtlas,
    config: &RenderConfig,
) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.prefix.clear();
    let mut tokens = 0usize;
    let mut patches = 0usize;
    for text in corpus {
        tokens += codec::encode(text, vocab).len();
        patches += crate::render::measure_fit(text, atlas, &cfg);
    }
    if patches == 0 {
        return Err(Error::Invalid("corpus renders no ink; density undefined".into()));
    }
    Ok(tokens as f64 / patches as f64)
}

/// Assemble a pre-training example: tokenize, mask text, render the corrupted
/// text, split into patches, build the attention mask, draw the patch mask
/// over the maskable region, and standardize the masked patch targets.
/// Deterministic given `seed`.
pub fn assemble_example(
    text: &str,
    atlas: &GlyphAtlas,
    render_config: &RenderConfig,
    mask_config: &MaskConfig,
    vocab: &Vocab,
    channels: usize,
    seed: u64,
) -> Result<PretrainExample> {
    let original_tokens = codec::encode(text, vocab);
    if original_tokens.is_empty() {
        return Err(Error::Invalid("text tokenizes to zero tokens".into()));
    }
    let text_plan = mask_text(&original_tokens, mask_config.text_rate, vocab.mask_id(), mix(seed, 1));
    let corrupted_text = codec::decode(&text_plan.corrupted, vocab)?;
    let screenshot = render_line(&corrupted_text, atlas, render_config);
    let grid = split_patches(&screenshot, render_config.line_height as usize, render_config.patch_width as usize, channels)?;
    let attention = attention_mask(&grid, screenshot.eos_patch_index)?;
    let maskable = n_maskable(&grid, screenshot.eos_patch_index);
    let patch_plan = if mask_config.span {
        span_mask(maskable, mask_config.patch_rate, mask_config.max_span, &mask_config.cum_weights, mix(seed, 2))
    } else {
        uniform_mask(maskable, mask_config.patch_rate, mix(seed, 2))
    };
    let patch_targets = patch_plan
        .masked
        .iter()
        .map(|&i| (i, standardize_patch(&grid.patches[i])))
        .collect();
    Ok(PretrainExample {
        original_tokens,
        text_plan,
        screenshot,
        grid,
        patch_plan,
        attention,
        patch_targets,
    })
}

/// Copy of `shot` with each masked patch overwritten at intensity 0.5, for
/// PNG inspection of mask plans.
pub fn overlay_mask(shot: &Screenshot, plan: &PatchMaskPlan) -> Screenshot {
    let mut out = shot.clone();
    for &idx in &plan.masked {
        let x0 = idx * out.patch_width;
        for y in 0..out.height {
            for dx in 0..out.patch_width {
                out.pixels[y * out.width + x0 + dx] = 0.5;
            }
        }
    }
    out
}
