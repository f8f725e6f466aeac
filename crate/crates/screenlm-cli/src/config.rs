//! File-backed configuration: UTF-8 `key = value` lines with `#` comments.
//! Flags always win over file values; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use screenlm::error::{Error, Result};
use screenlm::patch::MaskConfig;
use screenlm::render::RenderConfig;

/// Every known key with its default, in dump order.
pub fn defaults() -> Vec<(&'static str, String)> {
    let r = RenderConfig::default();
    let m = MaskConfig::default();
    vec![
        ("render.font_size", r.font_size.to_string()),
        ("render.line_height", r.line_height.to_string()),
        ("render.patch_width", r.patch_width.to_string()),
        ("render.max_patches", "64".to_string()),
        ("render.newline_symbol", r.newline_symbol.clone()),
        ("render.prefix", r.prefix.clone()),
        ("render.word_spacing", r.word_spacing.to_string()),
        ("render.margin_left", r.margin_left.to_string()),
        ("render.eos_black_patch", r.eos_black_patch.to_string()),
        ("render.line_space", r.line_space.to_string()),
        ("mask.text_rate", m.text_rate.to_string()),
        ("mask.patch_rate", m.patch_rate.to_string()),
        ("mask.span", m.span.to_string()),
        ("mask.max_span", m.max_span.to_string()),
        (
            "mask.cum_weights",
            m.cum_weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("model.preset", "tiny".to_string()),
        ("model.embedding_layernorm", "false".to_string()),
        ("model.loss_weight_text", "1".to_string()),
        ("vocab.size", "512".to_string()),
        ("train.batch", "16".to_string()),
        ("train.peak_lr", "0.001".to_string()),
        ("train.min_lr", "0.00001".to_string()),
        ("train.warmup_frac", "0.05".to_string()),
        ("train.shape", "cosine".to_string()),
        ("train.grad_clip", "1".to_string()),
        ("train.weight_decay", "0.01".to_string()),
        ("ar.row_width", "0".to_string()),
        ("ar.ms_tokens", "24".to_string()),
        ("ar.mt_tokens", "24".to_string()),
    ]
}

/// Parsed config: defaults overridden by an optional file.
#[derive(Debug, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn base() -> Self {
        FileConfig { values: defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::base();
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            if !cfg.values.contains_key(key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
            }
            cfg.values.insert(key.to_string(), value.to_string());
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or_else(|| panic!("unknown config key {key}"))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("bad value for {key}: {:?}", self.get(key))))
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, _) in defaults() {
            out.push_str(&format!("{k} = {}\n", self.values[k]));
        }
        out
    }

    pub fn render_config(&self) -> Result<RenderConfig> {
        let cfg = RenderConfig {
            font_size: self.parse("render.font_size")?,
            line_height: self.parse("render.line_height")?,
            patch_width: self.parse("render.patch_width")?,
            max_patches: self.parse("render.max_patches")?,
            newline_symbol: self.get("render.newline_symbol").to_string(),
            prefix: self.get("render.prefix").to_string(),
            word_spacing: self.parse("render.word_spacing")?,
            margin_left: self.parse("render.margin_left")?,
            eos_black_patch: self.parse("render.eos_black_patch")?,
            line_space: self.parse("render.line_space")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mask_config(&self) -> Result<MaskConfig> {
        let weights: Vec<f64> = self
            .get("mask.cum_weights")
            .split(',')
            .map(|w| w.trim().parse().map_err(|_| Error::Config(format!("bad cum_weights entry {w:?}"))))
            .collect::<Result<_>>()?;
        Ok(MaskConfig {
            text_rate: self.parse("mask.text_rate")?,
            patch_rate: self.parse("mask.patch_rate")?,
            span: self.parse("mask.span")?,
            max_span: self.parse("mask.max_span")?,
            cum_weights: weights,
        })
    }
}
