//! The encoder-decoder screenshot model: a ViT image encoder over unmasked
//! attended patches, a bidirectional image decoder that reconstructs masked
//! patches, and a causal text decoder that cross-attends to the encoder and
//! recovers the original text. The joint loss is masked-patch MSE plus
//! weighted text cross-entropy.

use std::collections::BTreeMap;

use crate::codec::TokenId;
use crate::error::{Error, Result};
use crate::patch::PretrainExample;
use crate::rng::Rng;
use crate::tensor::params::Init;
use crate::tensor::{causal_mask, key_mask, Array, AttnOpts, ParamSet, Real, Session, Var};

/// Architecture hyperparameters for the three components.
#[derive(Debug, Clone, PartialEq)]
pub struct EncDecConfig {
    pub enc_hidden: usize,
    pub enc_intermediate: usize,
    pub enc_heads: usize,
    pub enc_layers: usize,
    pub idec_hidden: usize,
    pub idec_intermediate: usize,
    pub idec_heads: usize,
    pub idec_layers: usize,
    pub tdec_hidden: usize,
    pub tdec_intermediate: usize,
    pub tdec_heads: usize,
    pub tdec_layers: usize,
    pub p_h: usize,
    pub p_w: usize,
    pub c: usize,
    pub vocab_size: usize,
    pub max_patches: usize,
    pub max_text_len: usize,
    /// Layer normalization immediately after the patch embedding.
    pub use_embedding_layernorm: bool,
    /// Weight of the text cross-entropy in the total loss.
    pub loss_weight_text: f64,
}

impl EncDecConfig {
    /// Desk-scale configuration used throughout the test suite.
    pub fn tiny(vocab_size: usize) -> Self {
        EncDecConfig {
            enc_hidden: 32,
            enc_intermediate: 64,
            enc_heads: 2,
            enc_layers: 2,
            idec_hidden: 32,
            idec_intermediate: 64,
            idec_heads: 2,
            idec_layers: 2,
            tdec_hidden: 32,
            tdec_intermediate: 64,
            tdec_heads: 2,
            tdec_layers: 2,
            p_h: 16,
            p_w: 16,
            c: 1,
            vocab_size,
            max_patches: 16,
            max_text_len: 48,
            use_embedding_layernorm: false,
            loss_weight_text: 1.0,
        }
    }

    /// A mid-size configuration that still trains on one core.
    pub fn small(vocab_size: usize) -> Self {
        EncDecConfig {
            enc_hidden: 128,
            enc_intermediate: 512,
            enc_heads: 4,
            enc_layers: 4,
            idec_hidden: 64,
            idec_intermediate: 256,
            idec_heads: 4,
            idec_layers: 2,
            tdec_hidden: 128,
            tdec_intermediate: 512,
            tdec_heads: 4,
            tdec_layers: 4,
            p_h: 16,
            p_w: 16,
            c: 1,
            vocab_size,
            max_patches: 64,
            max_text_len: 128,
            use_embedding_layernorm: false,
            loss_weight_text: 1.0,
        }
    }

    /// The full-scale configuration: encoder 768/3072/12/12, image decoder
    /// 512/2048/16/8, text decoder 768/3072/12/12 over 512 RGB patches.
    pub fn base(vocab_size: usize) -> Self {
        EncDecConfig {
            enc_hidden: 768,
            enc_intermediate: 3072,
            enc_heads: 12,
            enc_layers: 12,
            idec_hidden: 512,
            idec_intermediate: 2048,
            idec_heads: 16,
            idec_layers: 8,
            tdec_hidden: 768,
            tdec_intermediate: 3072,
            tdec_heads: 12,
            tdec_layers: 12,
            p_h: 16,
            p_w: 16,
            c: 3,
            vocab_size,
            max_patches: 512,
            max_text_len: 256,
            use_embedding_layernorm: false,
            loss_weight_text: 1.0,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.p_h * self.p_w * self.c
    }

    pub fn validate(&self) -> Result<()> {
        for (what, hidden, heads) in [
            ("encoder", self.enc_hidden, self.enc_heads),
            ("image decoder", self.idec_hidden, self.idec_heads),
            ("text decoder", self.tdec_hidden, self.tdec_heads),
        ] {
            if heads == 0 || hidden % heads != 0 {
                return Err(Error::Config(format!("{what}: hidden {hidden} not divisible by heads {heads}")));
            }
        }
        if self.vocab_size == 0 || self.max_patches < 2 {
            return Err(Error::Config("vocab_size must be positive and max_patches >= 2".into()));
        }
        Ok(())
    }

    /// Config snapshot for checkpoints.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let fields: [(&str, String); 20] = [
            ("enc_hidden", self.enc_hidden.to_string()),
            ("enc_intermediate", self.enc_intermediate.to_string()),
            ("enc_heads", self.enc_heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("idec_hidden", self.idec_hidden.to_string()),
            ("idec_intermediate", self.idec_intermediate.to_string()),
            ("idec_heads", self.idec_heads.to_string()),
            ("idec_layers", self.idec_layers.to_string()),
            ("tdec_hidden", self.tdec_hidden.to_string()),
            ("tdec_intermediate", self.tdec_intermediate.to_string()),
            ("tdec_heads", self.tdec_heads.to_string()),
            ("tdec_layers", self.tdec_layers.to_string()),
            ("p_h", self.p_h.to_string()),
            ("p_w", self.p_w.to_string()),
            ("c", self.c.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_patches", self.max_patches.to_string()),
            ("max_text_len", self.max_text_len.to_string()),
            ("use_embedding_layernorm", self.use_embedding_layernorm.to_string()),
            ("loss_weight_text", self.loss_weight_text.to_string()),
        ];
        for (k, v) in fields {
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
        Ok(EncDecConfig {
            enc_hidden: get(m, "enc_hidden")?,
            enc_intermediate: get(m, "enc_intermediate")?,
            enc_heads: get(m, "enc_heads")?,
            enc_layers: get(m, "enc_layers")?,
            idec_hidden: get(m, "idec_hidden")?,
            idec_intermediate: get(m, "idec_intermediate")?,
            idec_heads: get(m, "idec_heads")?,
            idec_layers: get(m, "idec_layers")?,
            tdec_hidden: get(m, "tdec_hidden")?,
            tdec_intermediate: get(m, "tdec_intermediate")?,
            tdec_heads: get(m, "tdec_heads")?,
            tdec_layers: get(m, "tdec_layers")?,
            p_h: get(m, "p_h")?,
            p_w: get(m, "p_w")?,
            c: get(m, "c")?,
            vocab_size: get(m, "vocab_size")?,
            max_patches: get(m, "max_patches")?,
            max_text_len: get(m, "max_text_len")?,
            use_embedding_layernorm: get(m, "use_embedding_layernorm")?,
            loss_weight_text: get(m, "loss_weight_text")?,
        })
    }
}

/// Fixed 2-D sine/cosine positional embeddings for an `n_rows x n_cols` grid,
/// row-major. Half the dimensions encode the row, half the column; each half
/// is a standard sincos embedding. `dim` must be divisible by 4.
pub fn positions_2d<R: Real>(n_rows: usize, n_cols: usize, dim: usize) -> Result<Array<R>> {
    if !dim.is_multiple_of(4) {
        return Err(Error::Config(format!("positional dim {dim} not divisible by 4")));
    }
    let half = dim / 2;
    let one_d = |pos: usize| -> Vec<f64> {
        let quarter = half / 2;
        let mut v = vec![0.0; half];
        for i in 0..quarter {
            let omega = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
            v[i] = (pos as f64 * omega).sin();
            v[quarter + i] = (pos as f64 * omega).cos();
        }
        v
    };
    let mut out = Array::zeros(n_rows * n_cols, dim);
    for r in 0..n_rows {
        let row_emb = one_d(r);
        for c in 0..n_cols {
            let col_emb = one_d(c);
            let idx = r * n_cols + c;
            for (j, &v) in row_emb.iter().chain(col_emb.iter()).enumerate() {
                out.set(idx, j, R::from_f64(v));
            }
        }
    }
    Ok(out)
}

/// Initialize all parameters: truncated normal (std 0.02) weights, zero
/// biases, unit norm gains. The mask embedding initializes like a weight.
pub fn init_params<R: Real>(cfg: &EncDecConfig, seed: u64) -> ParamSet<R> {
    let mut rng = Rng::seed(seed);
    let mut init = Init::new(&mut rng);
    let mut p = ParamSet::new();
    let (he, hd, ht) = (cfg.enc_hidden, cfg.idec_hidden, cfg.tdec_hidden);

    init.weight(&mut p, "cls", 1, he);
    init.weight(&mut p, "patch_embed.w", cfg.patch_dim(), he);
    init.zeros(&mut p, "patch_embed.b", 1, he);
    if cfg.use_embedding_layernorm {
        init.ones(&mut p, "embed_ln.g", he);
        init.zeros(&mut p, "embed_ln.b", 1, he);
    }
    for i in 0..cfg.enc_layers {
        attn_params(&mut init, &mut p, &format!("enc.{i}.attn"), he);
        norm_params(&mut init, &mut p, &format!("enc.{i}.ln1"), he);
        norm_params(&mut init, &mut p, &format!("enc.{i}.ln2"), he);
        mlp_params(&mut init, &mut p, &format!("enc.{i}.mlp"), he, cfg.enc_intermediate);
    }
    norm_params(&mut init, &mut p, "enc.ln_f", he);

    init.weight(&mut p, "idec.proj.w", he, hd);
    init.zeros(&mut p, "idec.proj.b", 1, hd);
    init.weight(&mut p, "idec.mask_embed", 1, hd);
    for i in 0..cfg.idec_layers {
        attn_params(&mut init, &mut p, &format!("idec.{i}.attn"), hd);
        norm_params(&mut init, &mut p, &format!("idec.{i}.ln1"), hd);
        norm_params(&mut init, &mut p, &format!("idec.{i}.ln2"), hd);
        mlp_params(&mut init, &mut p, &format!("idec.{i}.mlp"), hd, cfg.idec_intermediate);
    }
    norm_params(&mut init, &mut p, "idec.ln_f", hd);
    init.weight(&mut p, "idec.head.w", hd, cfg.patch_dim());
    init.zeros(&mut p, "idec.head.b", 1, cfg.patch_dim());

    init.weight(&mut p, "tdec.tok_embed", cfg.vocab_size, ht);
    init.weight(&mut p, "tdec.pos_embed", cfg.max_text_len, ht);
    for i in 0..cfg.tdec_layers {
        norm_params(&mut init, &mut p, &format!("tdec.{i}.ln1"), ht);
        attn_params(&mut init, &mut p, &format!("tdec.{i}.self"), ht);
        norm_params(&mut init, &mut p, &format!("tdec.{i}.lnc"), ht);
        cross_attn_params(&mut init, &mut p, &format!("tdec.{i}.cross"), ht, he);
        norm_params(&mut init, &mut p, &format!("tdec.{i}.ln2"), ht);
        init.weight(&mut p, &format!("tdec.{i}.glu.wg"), ht, cfg.tdec_intermediate);
        init.weight(&mut p, &format!("tdec.{i}.glu.wu"), ht, cfg.tdec_intermediate);
        init.weight(&mut p, &format!("tdec.{i}.glu.wd"), cfg.tdec_intermediate, ht);
    }
    norm_params(&mut init, &mut p, "tdec.ln_f", ht);
    init.weight(&mut p, "tdec.lm_head", ht, cfg.vocab_size);
    p
}

fn attn_params<R: Real>(init: &mut Init, p: &mut ParamSet<R>, prefix: &str, hidden: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        init.weight(p, &format!("{prefix}.{w}"), hidden, hidden);
    }
    for b in ["bq", "bk", "bv", "bo"] {
        init.zeros(p, &format!("{prefix}.{b}"), 1, hidden);
    }
}

fn cross_attn_params<R: Real>(init: &mut Init, p: &mut ParamSet<R>, prefix: &str, hidden: usize, kv_hidden: usize) {
    init.weight(p, &format!("{prefix}.wq"), hidden, hidden);
    init.weight(p, &format!("{prefix}.wk"), kv_hidden, hidden);
    init.weight(p, &format!("{prefix}.wv"), kv_hidden, hidden);
    init.weight(p, &format!("{prefix}.wo"), hidden, hidden);
    for b in ["bq", "bk", "bv", "bo"] {
        init.zeros(p, &format!("{prefix}.{b}"), 1, hidden);
    }
}

fn norm_params<R: Real>(init: &mut Init, p: &mut ParamSet<R>, prefix: &str, hidden: usize) {
    init.ones(p, &format!("{prefix}.g"), hidden);
    init.zeros(p, &format!("{prefix}.b"), 1, hidden);
}

fn mlp_params<R: Real>(init: &mut Init, p: &mut ParamSet<R>, prefix: &str, hidden: usize, inter: usize) {
    init.weight(p, &format!("{prefix}.w1"), hidden, inter);
    init.zeros(p, &format!("{prefix}.b1"), 1, inter);
    init.weight(p, &format!("{prefix}.w2"), inter, hidden);
    init.zeros(p, &format!("{prefix}.b2"), 1, hidden);
}

/// Expected tensor shapes for checkpoint validation.
pub fn expected_shapes(cfg: &EncDecConfig) -> BTreeMap<String, (usize, usize)> {
    let p: ParamSet<f32> = init_params(cfg, 0);
    p.iter().map(|(n, a)| (n.clone(), (a.rows, a.cols))).collect()
}

/// Pre-LN ViT block: `x += attn(ln1(x)); x += mlp(ln2(x))`.
fn vit_block<R: Real>(sess: &Session<R>, prefix: &str, x: Var, heads: usize, mask: Option<Var>) -> Var {
    let a = sess.layer_norm(x, &format!("{prefix}.ln1"));
    let a = sess.attention(
        &format!("{prefix}.attn"),
        a,
        a,
        &AttnOpts { heads, bias: true, mask, rope: None },
    );
    let x = sess.tape.add(x, a);
    let m = sess.layer_norm(x, &format!("{prefix}.ln2"));
    let m = sess.linear(m, &format!("{prefix}.mlp.w1"), Some(&format!("{prefix}.mlp.b1")));
    let m = sess.tape.gelu(m);
    let m = sess.linear(m, &format!("{prefix}.mlp.w2"), Some(&format!("{prefix}.mlp.b2")));
    sess.tape.add(x, m)
}

/// Encoder output: last-layer states over `[CLS] + kept patches`, and which
/// grid indices the kept rows correspond to.
pub struct EncoderOut {
    pub states: Var,
    /// Grid indices of the kept (attended, unmasked) patches, in order;
    /// `states` row `1 + j` corresponds to `kept[j]`.
    pub kept: Vec<usize>,
}

/// Embed raw patch vectors: linear projection plus the optional embedding
/// layer normalization.
pub fn patch_embed<R: Real>(sess: &Session<R>, cfg: &EncDecConfig, patches: &Array<R>) -> Result<Var> {
    if patches.cols != cfg.patch_dim() {
        return Err(Error::Shape(format!(
            "patch dim {} != p_h*p_w*c = {}",
            patches.cols,
            cfg.patch_dim()
        )));
    }
    let x = sess.tape.constant(patches);
    let e = sess.linear(x, "patch_embed.w", Some("patch_embed.b"));
    Ok(if cfg.use_embedding_layernorm { sess.layer_norm(e, "embed_ln") } else { e })
}

/// Run the image encoder over the kept patches of `example`.
///
/// Kept = attended per the attention mask, minus the patch-masked set.
/// Positional embeddings are added before selection (equivalently, selected
/// rows of the full table). Errors when nothing is left to encode.
pub fn encode<R: Real>(sess: &Session<R>, cfg: &EncDecConfig, example: &PretrainExample) -> Result<EncoderOut> {
    encode_grid(sess, cfg, &example.grid, &example.attention.attend, |i| {
        example.patch_plan.is_masked(i)
    })
}

/// [`encode`] over bare parts; fine-tuning passes no masked set.
pub fn encode_grid<R: Real>(
    sess: &Session<R>,
    cfg: &EncDecConfig,
    grid: &crate::patch::PatchGrid,
    attend: &[bool],
    is_masked: impl Fn(usize) -> bool,
) -> Result<EncoderOut> {
    let n = grid.n();
    let kept: Vec<usize> = (0..n).filter(|&i| attend[i] && !is_masked(i)).collect();
    if kept.is_empty() {
        return Err(Error::Invalid("all patches are masked or unattended; nothing to encode".into()));
    }
    let dim = cfg.patch_dim();
    let mut data = Vec::with_capacity(kept.len() * dim);
    for &i in &kept {
        data.extend(grid.patches[i].iter().map(|&v| R::from_f64(v as f64)));
    }
    let patches = Array::from_vec(kept.len(), dim, data);
    let embedded = patch_embed(sess, cfg, &patches)?;

    let pos_full = positions_2d::<R>(1, n, cfg.enc_hidden)?;
    let mut pos_data = Vec::with_capacity(kept.len() * cfg.enc_hidden);
    for &i in &kept {
        pos_data.extend_from_slice(&pos_full.data[i * cfg.enc_hidden..(i + 1) * cfg.enc_hidden]);
    }
    let pos = sess.tape.constant(&Array::from_vec(kept.len(), cfg.enc_hidden, pos_data));
    let embedded = sess.tape.add(embedded, pos);

    // CLS gets a zero positional vector.
    let mut x = sess.tape.concat_rows(&[sess.p("cls"), embedded]);
    for i in 0..cfg.enc_layers {
        x = vit_block(sess, &format!("enc.{i}"), x, cfg.enc_heads, None);
    }
    let states = sess.layer_norm(x, "enc.ln_f");
    Ok(EncoderOut { states, kept })
}

/// Image decoder over the full-length slot sequence: pixel predictions for
/// every slot (`[1 + n, patch_dim]`, row 0 is the CLS slot).
pub fn decode_image_full<R: Real>(
    sess: &Session<R>,
    cfg: &EncDecConfig,
    enc: &EncoderOut,
    example: &PretrainExample,
) -> Result<Var> {
    let n = example.grid.n();
    let proj = sess.linear(enc.states, "idec.proj.w", Some("idec.proj.b"));
    // Row sources: projected encoder rows followed by the mask embedding.
    let source = sess.tape.concat_rows(&[proj, sess.p("idec.mask_embed")]);
    let mask_row = enc.kept.len() + 1;
    let mut slot_to_row = vec![mask_row; n + 1];
    slot_to_row[0] = 0; // CLS
    for (j, &grid_idx) in enc.kept.iter().enumerate() {
        slot_to_row[1 + grid_idx] = 1 + j;
    }
    let mut x = sess.tape.gather_rows(source, &slot_to_row);

    let pos_patches = positions_2d::<R>(1, n, cfg.idec_hidden)?;
    let mut pos = Array::zeros(n + 1, cfg.idec_hidden);
    pos.data[cfg.idec_hidden..].copy_from_slice(&pos_patches.data);
    let pos = sess.tape.constant(&pos);
    x = sess.tape.add(x, pos);

    // Keys blocked at non-attended (post-EOS) slots; CLS always attended.
    let mut allowed = vec![true; n + 1];
    allowed[1..=n].copy_from_slice(&example.attention.attend[..n]);
    let mask = if allowed.iter().all(|&a| a) {
        None
    } else {
        Some(sess.tape.constant(&key_mask(n + 1, &allowed)))
    };
    for i in 0..cfg.idec_layers {
        x = vit_block(sess, &format!("idec.{i}"), x, cfg.idec_heads, mask);
    }
    let x = sess.layer_norm(x, "idec.ln_f");
    Ok(sess.linear(x, "idec.head.w", Some("idec.head.b")))
}

/// Pixel predictions gathered at the masked patches only, in masked order.
pub fn decode_image<R: Real>(
    sess: &Session<R>,
    cfg: &EncDecConfig,
    enc: &EncoderOut,
    example: &PretrainExample,
) -> Result<Var> {
    if example.patch_plan.masked.is_empty() {
        return Err(Error::Invalid("decode_image with an empty mask plan".into()));
    }
    let full = decode_image_full(sess, cfg, enc, example)?;
    let rows: Vec<usize> = example.patch_plan.masked.iter().map(|&i| 1 + i).collect();
    Ok(sess.tape.gather_rows(full, &rows))
}

/// Causal text decoder: teacher-forced logits over the vocabulary for every
/// target position. Input is `[BOS] + target[..len-1]`.
pub fn decode_text<R: Real>(
    sess: &Session<R>,
    cfg: &EncDecConfig,
    enc: &EncoderOut,
    targets: &[TokenId],
    bos_id: TokenId,
) -> Result<Var> {
    let t = targets.len();
    if t == 0 {
        return Err(Error::Invalid("decode_text with empty targets".into()));
    }
    if t > cfg.max_text_len {
        return Err(Error::Invalid(format!("target length {t} exceeds max_text_len {}", cfg.max_text_len)));
    }
    let mut ids = Vec::with_capacity(t);
    ids.push(bos_id as usize);
    ids.extend(targets[..t - 1].iter().map(|&x| x as usize));
    let tok = sess.tape.embed(sess.p("tdec.tok_embed"), &ids);
    let pos_rows: Vec<usize> = (0..t).collect();
    let pos = sess.tape.embed(sess.p("tdec.pos_embed"), &pos_rows);
    let mut x = sess.tape.add(tok, pos);

    let causal = sess.tape.constant(&causal_mask(t));
    for i in 0..cfg.tdec_layers {
        let prefix = format!("tdec.{i}");
        let a = sess.layer_norm(x, &format!("{prefix}.ln1"));
        let a = sess.attention(
            &format!("{prefix}.self"),
            a,
            a,
            &AttnOpts { heads: cfg.tdec_heads, bias: true, mask: Some(causal), rope: None },
        );
        x = sess.tape.add(x, a);
        let cq = sess.layer_norm(x, &format!("{prefix}.lnc"));
        let ca = sess.attention(
            &format!("{prefix}.cross"),
            cq,
            enc.states,
            &AttnOpts { heads: cfg.tdec_heads, bias: true, mask: None, rope: None },
        );
        x = sess.tape.add(x, ca);
        let m = sess.layer_norm(x, &format!("{prefix}.ln2"));
        let gate = sess.tape.gelu(sess.linear(m, &format!("{prefix}.glu.wg"), None));
        let up = sess.linear(m, &format!("{prefix}.glu.wu"), None);
        let glu = sess.tape.matmul(sess.tape.mul(gate, up), sess.p(&format!("{prefix}.glu.wd")));
        x = sess.tape.add(x, glu);
    }
    let x = sess.layer_norm(x, "tdec.ln_f");
    Ok(sess.tape.matmul(x, sess.p("tdec.lm_head")))
}

/// Loss breakdown and raw predictions from one forward pass.
pub struct Output<R: Real> {
    pub mse_patch: f64,
    pub ce_text: f64,
    pub total: f64,
    /// Scalar loss node for backward.
    pub total_var: Var,
    /// Standardized-space predictions at the masked patches, in masked order.
    pub patch_predictions: Option<Array<R>>,
    pub text_logits: Array<R>,
}

/// Full forward pass with the joint objective:
/// `total = mse(masked patches) + loss_weight_text * ce(original tokens)`.
pub fn forward_loss<R: Real>(
    sess: &Session<R>,
    cfg: &EncDecConfig,
    example: &PretrainExample,
    bos_id: TokenId,
) -> Result<Output<R>> {
    if example.patch_plan.masked.is_empty() && cfg.loss_weight_text <= 0.0 {
        return Err(Error::Invalid("no masked patches and text loss disabled; loss undefined".into()));
    }
    let enc = encode(sess, cfg, example)?;

    let mse_term = if example.patch_plan.masked.is_empty() {
        None
    } else {
        let preds = decode_image(sess, cfg, &enc, example)?;
        let dim = cfg.patch_dim();
        let mut tdata = Vec::with_capacity(example.patch_plan.masked.len() * dim);
        for &i in &example.patch_plan.masked {
            let t = &example.patch_targets[&i];
            tdata.extend(t.iter().map(|&v| R::from_f64(v as f64)));
        }
        let targets = Array::from_vec(example.patch_plan.masked.len(), dim, tdata);
        Some((sess.tape.mse_mean(preds, &targets), preds))
    };

    let logits = decode_text(sess, cfg, &enc, &example.original_tokens, bos_id)?;
    let target_ids: Vec<usize> = example.original_tokens.iter().map(|&t| t as usize).collect();
    let ce = sess.tape.cross_entropy_mean(logits, &target_ids);

    let weighted_ce = sess.tape.scale(ce, cfg.loss_weight_text);
    let total_var = match &mse_term {
        Some((mse, _)) => sess.tape.add(*mse, weighted_ce),
        None => weighted_ce,
    };

    let mse_patch = mse_term.as_ref().map_or(0.0, |(m, _)| sess.tape.scalar(*m).to_f64());
    let ce_text = sess.tape.scalar(ce).to_f64();
    Ok(Output {
        mse_patch,
        ce_text,
        total: mse_patch + cfg.loss_weight_text * ce_text,
        total_var,
        patch_predictions: mse_term.map(|(_, p)| sess.tape.value(p)),
        text_logits: sess.tape.value(logits),
    })
}

/// Recompute the masked-patch MSE from a full-slot prediction matrix.
/// Predictions at unmasked slots cannot contribute by construction.
pub fn mse_from_full_predictions(
    full: &Array<f64>,
    masked: &[usize],
    targets: &BTreeMap<usize, Vec<f32>>,
) -> f64 {
    if masked.is_empty() {
        return 0.0;
    }
    let dim = full.cols;
    let mut total = 0.0;
    for &i in masked {
        let row = &full.data[(1 + i) * dim..(2 + i) * dim];
        let t = &targets[&i];
        for (p, &tv) in row.iter().zip(t) {
            total += (p - tv as f64).powi(2);
        }
    }
    total / (masked.len() * dim) as f64
}

/// Greedy generation from the text decoder until `eos_id` or `max_new`.
pub fn generate_text<R: Real>(
    sess: &Session<R>,
    cfg: &EncDecConfig,
    enc: &EncoderOut,
    bos_id: TokenId,
    eos_id: TokenId,
    max_new: usize,
) -> Result<Vec<TokenId>> {
    let mut out: Vec<TokenId> = Vec::new();
    for _ in 0..max_new {
        // Teacher-force the tokens generated so far plus one probe slot; only
        // the last row of logits is consumed.
        let mut probe = out.clone();
        probe.push(eos_id);
        let logits = decode_text(sess, cfg, enc, &probe, bos_id)?;
        let values = sess.tape.value(logits);
        let last = values.rows - 1;
        let mut best = 0usize;
        let mut best_v = values.get(last, 0);
        for c in 1..values.cols {
            let v = values.get(last, c);
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        if best as TokenId == eos_id {
            break;
        }
        out.push(best as TokenId);
        if out.len() + 1 >= cfg.max_text_len {
            break;
        }
    }
    Ok(out)
}
