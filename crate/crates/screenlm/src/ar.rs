//! Decoder-only autoregressive screenshot model.
//!
//! One causal transformer consumes an interleaved sequence of patch elements
//! and token elements. Patches enter through a linear projection, tokens
//! through the embedding table; blocks are RMS-normed with rotary positions
//! and a gated feed-forward. At every position the model predicts its
//! successor: a pixel head fires when the next element is a patch (MSE
//! against the standardized patch), the LM head when it is a token
//! (cross-entropy). Perplexity is evaluated over a designated token suffix.

use std::collections::BTreeMap;

use crate::codec::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::patch::{split_patches, standardize_patch};
use crate::render::Screenshot;
use crate::rng::Rng;
use crate::tensor::params::Init;
use crate::tensor::{causal_mask, Array, AttnOpts, ParamSet, Real, Session, Var};

/// One element of a mixed-modal sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum MixedElement {
    /// Flattened patch pixels, `p_h * p_w * c` values in [0, 1].
    Patch(Vec<f32>),
    Token(TokenId),
}

/// Interleaved patch/token input. The screenshot segment (`<img>`, patch
/// rows each closed by `<img_nl>`, `</img>`) strictly precedes the text
/// segment.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSequence {
    pub elements: Vec<MixedElement>,
    /// Patches per row in the screenshot segment.
    pub row_width: usize,
    /// Elements in the screenshot segment, including its special tokens;
    /// everything after is the text segment.
    pub screenshot_len: usize,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// A text-only sequence (no screenshot segment).
    pub fn text_only(tokens: &[TokenId]) -> MixedSequence {
        MixedSequence {
            elements: tokens.iter().map(|&t| MixedElement::Token(t)).collect(),
            row_width: 0,
            screenshot_len: 0,
        }
    }

    pub fn push_tokens(&mut self, tokens: &[TokenId]) {
        self.elements.extend(tokens.iter().map(|&t| MixedElement::Token(t)));
    }

    /// Line-oriented trace: `P` for a patch, `S <literal>` for a special
    /// token, `T <id>` for an ordinary token.
    pub fn dump(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for e in &self.elements {
            match e {
                MixedElement::Patch(_) => out.push_str("P\n"),
                MixedElement::Token(id) if vocab.is_special(*id) => {
                    out.push_str(&format!("S {}\n", vocab.token_string(*id).unwrap()));
                }
                MixedElement::Token(id) => out.push_str(&format!("T {id}\n")),
            }
        }
        out
    }
}

/// Lay out a screenshot plus following tokens as one mixed sequence:
/// `<img>` + each patch row followed by `<img_nl>` + `</img>` + tokens.
pub fn build_mixed_input(
    screenshot: &Screenshot,
    following_tokens: &[TokenId],
    vocab: &Vocab,
    row_width: usize,
    channels: usize,
) -> Result<MixedSequence> {
    let grid = split_patches(screenshot, screenshot.height, screenshot.patch_width, channels)?;
    let n = grid.n();
    if row_width == 0 || n % row_width != 0 {
        return Err(Error::Shape(format!("{n} patches not divisible by row width {row_width}")));
    }
    let mut elements = Vec::with_capacity(n + n / row_width + 2 + following_tokens.len());
    elements.push(MixedElement::Token(vocab.img_begin_id()));
    for (i, patch) in grid.patches.into_iter().enumerate() {
        elements.push(MixedElement::Patch(patch));
        if (i + 1) % row_width == 0 {
            elements.push(MixedElement::Token(vocab.img_nl_id()));
        }
    }
    elements.push(MixedElement::Token(vocab.img_end_id()));
    let screenshot_len = elements.len();
    elements.extend(following_tokens.iter().map(|&t| MixedElement::Token(t)));
    Ok(MixedSequence { elements, row_width, screenshot_len })
}

/// Architecture hyperparameters of the autoregressive model.
#[derive(Debug, Clone, PartialEq)]
pub struct ArConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub layers: usize,
    pub p_h: usize,
    pub p_w: usize,
    pub c: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    /// Ablation: drop the next-patch MSE from the training objective.
    pub no_patch_pred: bool,
}

impl ArConfig {
    /// Smallest trainable configuration; intermediate/hidden ratio 2.5.
    pub fn tiny(vocab_size: usize) -> Self {
        ArConfig {
            hidden: 64,
            intermediate: 160,
            heads: 4,
            layers: 4,
            p_h: 16,
            p_w: 16,
            c: 1,
            vocab_size,
            max_seq: 256,
            rope_base: 10_000.0,
            no_patch_pred: false,
        }
    }

    /// Mid-size desk configuration, ratio 2.75.
    pub fn small(vocab_size: usize) -> Self {
        ArConfig { hidden: 256, intermediate: 704, heads: 8, layers: 8, max_seq: 1024, ..ArConfig::tiny(vocab_size) }
    }

    /// Full-scale 380M-parameter shape (1024/2816/16/24), RGB patches.
    pub fn scale_380m(vocab_size: usize) -> Self {
        ArConfig {
            hidden: 1024,
            intermediate: 2816,
            heads: 16,
            layers: 24,
            c: 3,
            max_seq: 1024,
            ..ArConfig::tiny(vocab_size)
        }
    }

    /// Full-scale 1.3B-parameter shape (2048/5504/16/24), RGB patches.
    pub fn scale_1_3b(vocab_size: usize) -> Self {
        ArConfig {
            hidden: 2048,
            intermediate: 5504,
            heads: 16,
            layers: 24,
            c: 3,
            max_seq: 1024,
            ..ArConfig::tiny(vocab_size)
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.p_h * self.p_w * self.c
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if !(self.hidden / self.heads).is_multiple_of(2) {
            return Err(Error::Config("head dim must be even for rotary embeddings".into()));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        for (k, v) in [
            ("hidden", self.hidden.to_string()),
            ("intermediate", self.intermediate.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("p_h", self.p_h.to_string()),
            ("p_w", self.p_w.to_string()),
            ("c", self.c.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_seq", self.max_seq.to_string()),
            ("rope_base", self.rope_base.to_string()),
            ("no_patch_pred", self.no_patch_pred.to_string()),
        ] {
            m.insert(k.to_string(), v);
        }
        m
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("missing or invalid config key {k}")))
        }
        Ok(ArConfig {
            hidden: get(m, "hidden")?,
            intermediate: get(m, "intermediate")?,
            heads: get(m, "heads")?,
            layers: get(m, "layers")?,
            p_h: get(m, "p_h")?,
            p_w: get(m, "p_w")?,
            c: get(m, "c")?,
            vocab_size: get(m, "vocab_size")?,
            max_seq: get(m, "max_seq")?,
            rope_base: get(m, "rope_base")?,
            no_patch_pred: get(m, "no_patch_pred")?,
        })
    }
}

/// Initialize parameters: truncated normal weights, zero biases, unit gains.
pub fn init_params<R: Real>(cfg: &ArConfig, seed: u64) -> ParamSet<R> {
    let mut rng = Rng::seed(seed);
    let mut init = Init::new(&mut rng);
    let mut p = ParamSet::new();
    init.weight(&mut p, "tok_embed", cfg.vocab_size, cfg.hidden);
    init.weight(&mut p, "patch_proj.w", cfg.patch_dim(), cfg.hidden);
    init.zeros(&mut p, "patch_proj.b", 1, cfg.hidden);
    for i in 0..cfg.layers {
        init.ones(&mut p, &format!("blk.{i}.attn_norm.g"), cfg.hidden);
        for w in ["wq", "wk", "wv", "wo"] {
            init.weight(&mut p, &format!("blk.{i}.attn.{w}"), cfg.hidden, cfg.hidden);
        }
        init.ones(&mut p, &format!("blk.{i}.ffn_norm.g"), cfg.hidden);
        init.weight(&mut p, &format!("blk.{i}.ffn.wg"), cfg.hidden, cfg.intermediate);
        init.weight(&mut p, &format!("blk.{i}.ffn.wu"), cfg.hidden, cfg.intermediate);
        init.weight(&mut p, &format!("blk.{i}.ffn.wd"), cfg.intermediate, cfg.hidden);
    }
    init.ones(&mut p, "norm_f.g", cfg.hidden);
    init.weight(&mut p, "lm_head", cfg.hidden, cfg.vocab_size);
    init.weight(&mut p, "pixel_head.w", cfg.hidden, cfg.patch_dim());
    init.zeros(&mut p, "pixel_head.b", 1, cfg.patch_dim());
    p
}

/// A parameter set with zeroed weights; softmax outputs are exactly uniform,
/// which pins perplexity identities in tests.
pub fn zeroed_params<R: Real>(cfg: &ArConfig) -> ParamSet<R> {
    let mut p: ParamSet<R> = init_params(cfg, 0);
    for (_, a) in p.iter_mut() {
        for v in a.data.iter_mut() {
            *v = R::ZERO;
        }
    }
    p
}

/// Expected tensor shapes for checkpoint validation.
pub fn expected_shapes(cfg: &ArConfig) -> BTreeMap<String, (usize, usize)> {
    let p: ParamSet<f32> = init_params(cfg, 0);
    p.iter().map(|(n, a)| (n.clone(), (a.rows, a.cols))).collect()
}

/// Trunk states `[len, hidden]` after the final RMS norm.
pub fn trunk<R: Real>(sess: &Session<R>, cfg: &ArConfig, seq: &MixedSequence) -> Result<Var> {
    let len = seq.len();
    if len == 0 {
        return Err(Error::Invalid("empty mixed sequence".into()));
    }
    if len > cfg.max_seq {
        return Err(Error::Invalid(format!("sequence length {len} exceeds max_seq {}", cfg.max_seq)));
    }

    // Embed patches and tokens separately, then restore sequence order.
    let mut patch_rows: Vec<usize> = Vec::new();
    let mut token_ids: Vec<usize> = Vec::new();
    for e in &seq.elements {
        match e {
            MixedElement::Patch(_) => patch_rows.push(0),
            MixedElement::Token(id) => {
                if *id as usize >= cfg.vocab_size {
                    return Err(Error::Invalid(format!("token id {id} out of vocab {}", cfg.vocab_size)));
                }
                token_ids.push(*id as usize);
            }
        }
    }
    let dim = cfg.patch_dim();
    let mut sources = Vec::new();
    let n_patches = patch_rows.len();
    if n_patches > 0 {
        let mut data = Vec::with_capacity(n_patches * dim);
        for e in &seq.elements {
            if let MixedElement::Patch(p) = e {
                if p.len() != dim {
                    return Err(Error::Shape(format!("patch dim {} != {dim}", p.len())));
                }
                data.extend(p.iter().map(|&v| R::from_f64(v as f64)));
            }
        }
        let patches = sess.tape.constant(&Array::from_vec(n_patches, dim, data));
        sources.push(sess.linear(patches, "patch_proj.w", Some("patch_proj.b")));
    }
    if !token_ids.is_empty() {
        sources.push(sess.tape.embed(sess.p("tok_embed"), &token_ids));
    }
    let stacked = sess.tape.concat_rows(&sources);
    // Map element order to rows of `stacked` (patches first, then tokens).
    let mut order = Vec::with_capacity(len);
    let (mut pi, mut ti) = (0usize, 0usize);
    for e in &seq.elements {
        match e {
            MixedElement::Patch(_) => {
                order.push(pi);
                pi += 1;
            }
            MixedElement::Token(_) => {
                order.push(n_patches + ti);
                ti += 1;
            }
        }
    }
    let mut x = sess.tape.gather_rows(stacked, &order);

    let positions: Vec<usize> = (0..len).collect();
    let mask = sess.tape.constant(&causal_mask(len));
    for i in 0..cfg.layers {
        let prefix = format!("blk.{i}");
        let a = sess.rms_norm(x, &format!("{prefix}.attn_norm"));
        let a = sess.attention(
            &format!("{prefix}.attn"),
            a,
            a,
            &AttnOpts {
                heads: cfg.heads,
                bias: false,
                mask: Some(mask),
                rope: Some((&positions, &positions, cfg.rope_base)),
            },
        );
        x = sess.tape.add(x, a);
        let f = sess.rms_norm(x, &format!("{prefix}.ffn_norm"));
        let gate = sess.tape.silu(sess.linear(f, &format!("{prefix}.ffn.wg"), None));
        let up = sess.linear(f, &format!("{prefix}.ffn.wu"), None);
        let ffn = sess.tape.matmul(sess.tape.mul(gate, up), sess.p(&format!("{prefix}.ffn.wd")));
        x = sess.tape.add(x, ffn);
    }
    Ok(sess.rms_norm(x, "norm_f"))
}

/// Per-position predictions from both heads over the whole sequence.
pub struct ArForward {
    pub states: Var,
    /// `[len, patch_dim]` pixel predictions (position `i` predicts element `i+1`).
    pub pixel_preds: Var,
    /// `[len, vocab]` token logits (position `i` predicts element `i+1`).
    pub token_logits: Var,
}

pub fn forward<R: Real>(sess: &Session<R>, cfg: &ArConfig, seq: &MixedSequence) -> Result<ArForward> {
    let states = trunk(sess, cfg, seq)?;
    Ok(ArForward {
        states,
        pixel_preds: sess.linear(states, "pixel_head.w", Some("pixel_head.b")),
        token_logits: sess.tape.matmul(states, sess.p("lm_head")),
    })
}

/// Loss breakdown for one mixed sequence.
pub struct ArOutput {
    pub mse_patch: f64,
    pub ce_text: f64,
    pub total: f64,
    pub total_var: Var,
    /// Positions whose successor is a patch / a token.
    pub n_patch_targets: usize,
    pub n_token_targets: usize,
}

/// Standardized pixel targets for every position whose successor is a patch.
/// Exposed separately so tests can perturb targets without touching inputs.
pub fn patch_targets_of(seq: &MixedSequence) -> Vec<(usize, Vec<f32>)> {
    let mut out = Vec::new();
    for i in 0..seq.len().saturating_sub(1) {
        if let MixedElement::Patch(p) = &seq.elements[i + 1] {
            out.push((i, standardize_patch(p)));
        }
    }
    out
}

/// Next-element objective: position `i` contributes MSE when element `i+1`
/// is a patch (target standardized per patch) and CE when it is a token.
/// `total = mse + loss_weight_text * ce`; the `no_patch_pred` ablation keeps
/// shapes and reporting but drops the MSE term from `total`.
pub fn losses<R: Real>(
    sess: &Session<R>,
    cfg: &ArConfig,
    seq: &MixedSequence,
    loss_weight_text: f64,
) -> Result<ArOutput> {
    losses_with_targets(sess, cfg, seq, loss_weight_text, &patch_targets_of(seq))
}

/// [`losses`] with externally supplied patch targets (position, target).
pub fn losses_with_targets<R: Real>(
    sess: &Session<R>,
    cfg: &ArConfig,
    seq: &MixedSequence,
    loss_weight_text: f64,
    patch_targets: &[(usize, Vec<f32>)],
) -> Result<ArOutput> {
    if seq.len() < 2 {
        return Err(Error::Invalid("need at least two elements for a next-element loss".into()));
    }
    let states = trunk(sess, cfg, seq)?;

    let mut ce_rows: Vec<usize> = Vec::new();
    let mut ce_targets: Vec<usize> = Vec::new();
    for i in 0..seq.len() - 1 {
        if let MixedElement::Token(id) = seq.elements[i + 1] {
            ce_rows.push(i);
            ce_targets.push(id as usize);
        }
    }

    let dim = cfg.patch_dim();
    let mse_term = if patch_targets.is_empty() {
        None
    } else {
        let rows: Vec<usize> = patch_targets.iter().map(|&(i, _)| i).collect();
        let gathered = sess.tape.gather_rows(states, &rows);
        let preds = sess.linear(gathered, "pixel_head.w", Some("pixel_head.b"));
        let mut tdata = Vec::with_capacity(rows.len() * dim);
        for (_, t) in patch_targets {
            assert_eq!(t.len(), dim, "patch target dim");
            tdata.extend(t.iter().map(|&v| R::from_f64(v as f64)));
        }
        Some(sess.tape.mse_mean(preds, &Array::from_vec(rows.len(), dim, tdata)))
    };

    let ce_term = if ce_rows.is_empty() {
        None
    } else {
        let gathered = sess.tape.gather_rows(states, &ce_rows);
        let logits = sess.tape.matmul(gathered, sess.p("lm_head"));
        Some(sess.tape.cross_entropy_mean(logits, &ce_targets))
    };

    let mse_patch = mse_term.map_or(0.0, |m| sess.tape.scalar(m).to_f64());
    let ce_text = ce_term.map_or(0.0, |c| sess.tape.scalar(c).to_f64());

    let mut total_parts: Vec<Var> = Vec::new();
    if !cfg.no_patch_pred {
        if let Some(m) = mse_term {
            total_parts.push(m);
        }
    }
    if let Some(c) = ce_term {
        total_parts.push(sess.tape.scale(c, loss_weight_text));
    }
    let total_var = match total_parts.len() {
        0 => return Err(Error::Invalid("loss has no terms".into())),
        1 => total_parts[0],
        _ => sess.tape.add(total_parts[0], total_parts[1]),
    };
    let total = if cfg.no_patch_pred { loss_weight_text * ce_text } else { mse_patch + loss_weight_text * ce_text };
    Ok(ArOutput {
        mse_patch,
        ce_text,
        total,
        total_var,
        n_patch_targets: patch_targets.len(),
        n_token_targets: ce_rows.len(),
    })
}

/// Mean cross-entropy over `eval_tokens` appended after `context`. The
/// context conditions the predictions but contributes no loss.
pub fn eval_token_ce<R: Real>(
    params: &ParamSet<R>,
    cfg: &ArConfig,
    context: &MixedSequence,
    eval_tokens: &[TokenId],
) -> Result<f64> {
    if eval_tokens.is_empty() {
        return Err(Error::Invalid("no eval tokens".into()));
    }
    if context.is_empty() {
        return Err(Error::Invalid("perplexity needs a nonempty context (use a BOS token)".into()));
    }
    let mut seq = context.clone();
    seq.push_tokens(eval_tokens);
    let sess = Session::new(params);
    let states = trunk(&sess, cfg, &seq)?;
    let ctx_len = context.len();
    // Position i predicts element i+1; eval tokens sit at [ctx_len, len).
    let rows: Vec<usize> = (ctx_len - 1..seq.len() - 1).collect();
    let targets: Vec<usize> = eval_tokens.iter().map(|&t| t as usize).collect();
    let gathered = sess.tape.gather_rows(states, &rows);
    let logits = sess.tape.matmul(gathered, sess.p("lm_head"));
    let ce = sess.tape.cross_entropy_mean(logits, &targets);
    Ok(sess.tape.scalar(ce).to_f64())
}

/// Perplexity of `eval_tokens` after `context`: `exp(mean CE)`, accumulated
/// in f64.
pub fn perplexity<R: Real>(
    params: &ParamSet<R>,
    cfg: &ArConfig,
    context: &MixedSequence,
    eval_tokens: &[TokenId],
) -> Result<f64> {
    Ok(eval_token_ce(params, cfg, context, eval_tokens)?.exp())
}

/// Sample `max_new` tokens after `context` from the LM head.
/// Temperature 0 is greedy argmax (ties to the smallest id).
pub fn generate<R: Real>(
    params: &ParamSet<R>,
    cfg: &ArConfig,
    context: &MixedSequence,
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<TokenId>> {
    assert!(temperature >= 0.0, "temperature must be non-negative");
    let mut rng = Rng::seed(seed);
    let mut seq = context.clone();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if seq.len() >= cfg.max_seq {
            break;
        }
        let sess = Session::new(params);
        let states = trunk(&sess, cfg, &seq)?;
        let last = sess.tape.shape(states).0 - 1;
        let row = sess.tape.gather_rows(states, &[last]);
        let logits = sess.tape.value(sess.tape.matmul(row, sess.p("lm_head")));
        let next = if temperature == 0.0 {
            let mut best = 0usize;
            for c in 1..logits.cols {
                if logits.data[c] > logits.data[best] {
                    best = c;
                }
            }
            best
        } else {
            let scaled: Vec<f64> = logits.data.iter().map(|&v| v.to_f64() / temperature).collect();
            let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|&v| (v - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut draw = rng.f64() * total;
            let mut pick = exps.len() - 1;
            for (c, &e) in exps.iter().enumerate() {
                if draw < e {
                    pick = c;
                    break;
                }
                draw -= e;
            }
            pick
        };
        out.push(next as TokenId);
        seq.push_tokens(&[next as TokenId]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::train_bpe;
    use crate::render::{builtin_test_atlas, render_line, RenderConfig};
    use crate::tensor::gradcheck;

    fn tiny_vocab() -> Vocab {
        train_bpe(&["red fox jumps".into(), "blue bird sings".into()], 280).unwrap()
    }

    fn ar_render() -> RenderConfig {
        RenderConfig {
            max_patches: 8,
            prefix: String::new(),
            eos_black_patch: false,
            ..RenderConfig::default()
        }
    }

    fn demo_sequence(text: &str, vocab: &Vocab) -> MixedSequence {
        let atlas = builtin_test_atlas();
        let shot = render_line(text, &atlas, &ar_render());
        let tokens = crate::codec::encode(text, vocab);
        build_mixed_input(&shot, &tokens, vocab, 8, 1).unwrap()
    }

    #[test]
    fn mixed_layout_lengths() {
        let vocab = tiny_vocab();
        let atlas = builtin_test_atlas();
        let cfg = RenderConfig { max_patches: 512, prefix: String::new(), eos_black_patch: false, ..RenderConfig::default() };
        let shot = render_line("hello", &atlas, &cfg);
        let tokens: Vec<TokenId> = (0..256).map(|i| (i % 200) as TokenId).collect();
        let seq = build_mixed_input(&shot, &tokens, &vocab, 512, 1).unwrap();
        // <img> + 512 patches + <img_nl> + </img> + 256 tokens.
        assert_eq!(seq.len(), 1 + 512 + 1 + 1 + 256);
        assert_eq!(seq.screenshot_len, 515);
        assert_eq!(seq.elements[0], MixedElement::Token(vocab.img_begin_id()));
        assert_eq!(seq.elements[513], MixedElement::Token(vocab.img_nl_id()));
        assert_eq!(seq.elements[514], MixedElement::Token(vocab.img_end_id()));
    }

    #[test]
    fn mixed_layout_two_rows() {
        let vocab = tiny_vocab();
        let atlas = builtin_test_atlas();
        let cfg = RenderConfig { max_patches: 4, prefix: String::new(), eos_black_patch: false, ..RenderConfig::default() };
        let shot = render_line("ab", &atlas, &cfg);
        let seq = build_mixed_input(&shot, &[], &vocab, 2, 1).unwrap();
        let kinds: Vec<char> = seq
            .elements
            .iter()
            .map(|e| match e {
                MixedElement::Patch(_) => 'P',
                MixedElement::Token(id) if *id == vocab.img_begin_id() => '<',
                MixedElement::Token(id) if *id == vocab.img_nl_id() => 'n',
                MixedElement::Token(id) if *id == vocab.img_end_id() => '>',
                MixedElement::Token(_) => 'T',
            })
            .collect();
        assert_eq!(kinds.iter().collect::<String>(), "<PPnPPn>");
        // Indivisible row width is rejected.
        assert!(build_mixed_input(&shot, &[], &vocab, 3, 1).is_err());
    }

    #[test]
    fn dump_trace_format() {
        let vocab = tiny_vocab();
        let seq = demo_sequence("red fox", &vocab);
        let dump = seq.dump(&vocab);
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), seq.len());
        assert_eq!(lines[0], "S <img>");
        assert!(lines[1..9].iter().all(|&l| l == "P"));
        assert!(lines.iter().any(|l| l.starts_with("T ")));
    }

    #[test]
    fn causality_of_predictions() {
        let vocab = tiny_vocab();
        let cfg = ArConfig::tiny(vocab.size());
        let params: ParamSet<f64> = init_params(&cfg, 1);
        let seq = demo_sequence("red fox jumps", &vocab);
        let run = |s: &MixedSequence| {
            let sess = Session::new(&params);
            let f = forward(&sess, &cfg, s).unwrap();
            (sess.tape.value(f.pixel_preds), sess.tape.value(f.token_logits))
        };
        let (pix_a, tok_a) = run(&seq);

        // Perturb a patch element in the middle of the screenshot segment.
        let mut seq_b = seq.clone();
        let t = 3;
        if let MixedElement::Patch(p) = &mut seq_b.elements[t] {
            p[17] = 1.0 - p[17];
        } else {
            panic!("element 3 should be a patch");
        }
        let (pix_b, tok_b) = run(&seq_b);
        for i in 0..t {
            assert_eq!(
                pix_a.data[i * pix_a.cols..(i + 1) * pix_a.cols],
                pix_b.data[i * pix_b.cols..(i + 1) * pix_b.cols],
                "pixel predictions before the edit must not move (pos {i})"
            );
            assert_eq!(
                tok_a.data[i * tok_a.cols..(i + 1) * tok_a.cols],
                tok_b.data[i * tok_b.cols..(i + 1) * tok_b.cols]
            );
        }
        let moved = (t..seq.len())
            .any(|i| tok_a.data[i * tok_a.cols..(i + 1) * tok_a.cols] != tok_b.data[i * tok_b.cols..(i + 1) * tok_b.cols]);
        assert!(moved);
    }

    #[test]
    fn logits_softmax_rows_sum_to_one() {
        let vocab = tiny_vocab();
        let cfg = ArConfig::tiny(vocab.size());
        let params: ParamSet<f64> = init_params(&cfg, 2);
        let seq = demo_sequence("red fox", &vocab);
        let sess = Session::new(&params);
        let f = forward(&sess, &cfg, &seq).unwrap();
        let sm = sess.tape.value(sess.tape.softmax_rows(f.token_logits));
        for r in 0..sm.rows {
            let s: f64 = (0..sm.cols).map(|c| sm.get(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exactly_one_head_fires_per_position() {
        let vocab = tiny_vocab();
        let seq = demo_sequence("red fox jumps", &vocab);
        let cfg = ArConfig::tiny(vocab.size());
        let params: ParamSet<f32> = init_params(&cfg, 3);
        let sess = Session::new(&params);
        let out = losses(&sess, &cfg, &seq, 1.0).unwrap();
        assert_eq!(out.n_patch_targets + out.n_token_targets, seq.len() - 1);
    }

    #[test]
    fn text_only_sequence_has_no_mse() {
        let vocab = tiny_vocab();
        let cfg = ArConfig::tiny(vocab.size());
        let params: ParamSet<f32> = init_params(&cfg, 4);
        let seq = MixedSequence::text_only(&[vocab.bos_id(), 5, 9, 13]);
        let sess = Session::new(&params);
        let out = losses(&sess, &cfg, &seq, 1.0).unwrap();
        assert_eq!(out.mse_patch, 0.0);
        assert_eq!(out.n_patch_targets, 0);
        assert_eq!(out.n_token_targets, 3);
    }

    #[test]
    fn uniform_logits_ce_is_ln_vocab() {
        let vocab = tiny_vocab();
        let cfg = ArConfig::tiny(vocab.size());
        let params: ParamSet<f64> = zeroed_params(&cfg);
        let seq = MixedSequence::text_only(&[1, 2, 3, 4, 5]);
        let sess = Session::new(&params);
        let out = losses(&sess, &cfg, &seq, 1.0).unwrap();
        assert!((out.ce_text - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn patch_target_perturbation_leaves_ce_alone() {
        let vocab = tiny_vocab();
        let cfg = ArConfig::tiny(vocab.size());
        let params: ParamSet<f64> = init_params(&cfg, 5);
        let seq = demo_sequence("red fox", &vocab);
        let sess = Session::new(&params);
        let base = losses(&sess, &cfg, &seq, 1.0).unwrap();
        let mut targets = patch_targets_of(&seq);
        for (_, t) in targets.iter_mut() {
            for v in t.iter_mut() {
                *v += 3.25;
            }
        }
        let sess2 = Session::new(&params);
        let moved = losses_with_targets(&sess2, &cfg, &seq, 1.0, &targets).unwrap();
        assert_eq!(base.ce_text, moved.ce_text);
        assert_ne!(base.mse_patch, moved.mse_patch);
    }

    #[test]
    fn patch_targets_share_the_standardization_path() {
        let vocab = tiny_vocab();
        let seq = demo_sequence("red fox", &vocab);
        for (pos, target) in patch_targets_of(&seq) {
            let MixedElement::Patch(raw) = &seq.elements[pos + 1] else {
                panic!("target position must precede a patch");
            };
            assert_eq!(target, standardize_patch(raw));
        }
    }

    #[test]
    fn no_patch_pred_flag_drops_mse_from_total() {
        let vocab = tiny_vocab();
        let mut cfg = ArConfig::tiny(vocab.size());
        let params: ParamSet<f64> = init_params(&cfg, 6);
        let seq = demo_sequence("red fox", &vocab);
        let sess = Session::new(&params);
        let with = losses(&sess, &cfg, &seq, 1.0).unwrap();
        cfg.no_patch_pred = true;
        let sess2 = Session::new(&params);
        let without = losses(&sess2, &cfg, &seq, 1.0).unwrap();
        assert_eq!(with.ce_text, without.ce_text);
        assert_eq!(with.mse_patch, without.mse_patch, "reporting keeps the MSE value");
        assert!((without.total - without.ce_text).abs() < 1e-12);
        // The ablated loss carries no pixel-head gradient.
        let grads = sess2.grads(without.total_var);
        assert!(grads["pixel_head.w"].data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let vocab = tiny_vocab();
        let cfg = ArConfig::tiny(vocab.size());
        let params: ParamSet<f64> = init_params(&cfg, 7);
        let seq = demo_sequence("red fox", &vocab);
        let sess = Session::new(&params);
        let out = losses(&sess, &cfg, &seq, 1.0).unwrap();
        let grads = sess.grads(out.total_var);
        let loss_fn = |p: &ParamSet<f64>| {
            let s = Session::new(p);
            losses(&s, &cfg, &seq, 1.0).unwrap().total
        };
        let checks = gradcheck::check_params(&params, loss_fn, &grads, 2, 1e-4, 42);
        let spot = ["patch_proj.w", "blk.0.attn.wq", "blk.3.ffn.wd", "pixel_head.w", "lm_head"];
        let mut seen = 0;
        for c in checks.iter().filter(|c| spot.contains(&c.name.as_str())) {
            assert!(c.max_rel_error < 1e-3, "{}: rel err {:.2e}", c.name, c.max_rel_error);
            seen += 1;
        }
        assert_eq!(seen, spot.len());
    }

    #[test]
    fn perplexity_uniform_case_is_exact() {
        let mut cfg = ArConfig::tiny(300);
        cfg.vocab_size = 2;
        let params: ParamSet<f64> = zeroed_params(&cfg);
        let context = MixedSequence::text_only(&[0]);
        let ppl = perplexity(&params, &cfg, &context, &[1, 0, 1, 1]).unwrap();
        assert!((ppl - 2.0).abs() < 1e-9, "ppl {ppl}");
    }

    #[test]
    fn perplexity_ignores_context_loss() {
        // Same eval tokens, different context length: with zeroed params the
        // model is context-blind, so PPL must be identical (= vocab size).
        let cfg = ArConfig::tiny(50);
        let params: ParamSet<f64> = zeroed_params(&cfg);
        let short = MixedSequence::text_only(&[0]);
        let long = MixedSequence::text_only(&[0, 1, 2, 3, 4, 5]);
        let a = perplexity(&params, &cfg, &short, &[7, 9]).unwrap();
        let b = perplexity(&params, &cfg, &long, &[7, 9]).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!((a - 50.0).abs() < 1e-6);
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let vocab = tiny_vocab();
        let cfg = ArConfig::tiny(vocab.size());
        let params: ParamSet<f32> = init_params(&cfg, 8);
        let ctx = MixedSequence::text_only(&[vocab.bos_id(), 10, 20]);
        let a = generate(&params, &cfg, &ctx, 5, 0.0, 1).unwrap();
        let b = generate(&params, &cfg, &ctx, 5, 0.0, 2).unwrap();
        assert_eq!(a, b, "greedy decode must ignore the seed");
        assert_eq!(a.len(), 5);
        assert!(generate(&params, &cfg, &ctx, 0, 0.0, 1).unwrap().is_empty());
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = ArConfig::scale_380m(32000);
        assert_eq!(ArConfig::from_map(&cfg.to_map()).unwrap(), cfg);
        assert!(ArConfig::tiny(300).validate().is_ok());
        let mut bad = ArConfig::tiny(300);
        bad.heads = 3;
        assert!(bad.validate().is_err());
    }
}
