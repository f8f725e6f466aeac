//! Deterministic single-line text rasterization.
//!
//! Text is rendered black-on-white into a fixed-height strip whose width is
//! an exact multiple of the patch width. Newlines are replaced by a visible
//! symbol, a configurable prefix is rendered first, and an all-black
//! end-of-sequence patch is appended after the last ink.

mod atlas;
mod png_io;

pub use atlas::{builtin_test_atlas, load_atlas, GlyphAtlas, GlyphBitmap};
pub use png_io::{load_png, save_png};

use std::time::Instant;

/// Rendering parameters. `line_height` doubles as the patch height of any
/// downstream patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    /// Nominal font size in px. Informational for bitmap atlases, which are
    /// rasterized at a fixed size.
    pub font_size: u32,
    /// Strip height in px; must equal the downstream patch height.
    pub line_height: u32,
    pub patch_width: u32,
    /// Total patch budget; the output is always exactly this many patches wide.
    pub max_patches: usize,
    /// Replacement rendered in place of '\n'.
    pub newline_symbol: String,
    /// Anchor text rendered before the input.
    pub prefix: String,
    /// Extra px added to the advance of U+0020.
    pub word_spacing: u32,
    pub margin_left: u32,
    /// Append an all-black patch after the last ink.
    pub eos_black_patch: bool,
    /// Vertical gap between lines. Single-line rendering never uses it; the
    /// field exists so configs round-trip.
    pub line_space: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            font_size: 10,
            line_height: 16,
            patch_width: 16,
            max_patches: 512,
            newline_symbol: "////".into(),
            prefix: "Beginning of the sequence:".into(),
            word_spacing: 0,
            margin_left: 2,
            eos_black_patch: true,
            line_space: 6,
        }
    }
}

impl RenderConfig {
    pub fn width_px(&self) -> usize {
        self.max_patches * self.patch_width as usize
    }

    /// At least one content patch plus room for the EOS patch.
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.max_patches < 2 {
            return Err(crate::error::Error::Config(format!(
                "max_patches must be at least 2, got {}",
                self.max_patches
            )));
        }
        if self.line_height == 0 || self.patch_width == 0 {
            return Err(crate::error::Error::Config("line_height and patch_width must be positive".into()));
        }
        Ok(())
    }

    /// Number of patches the content region may occupy. When the EOS patch is
    /// on, one patch is always held back for it.
    fn content_patches(&self) -> usize {
        if self.eos_black_patch {
            self.max_patches.saturating_sub(1)
        } else {
            self.max_patches
        }
    }
}

/// A rendered single-line image. Intensities are in [0, 1]; 1.0 is the white
/// background and 0.0 is black ink.
#[derive(Debug, Clone, PartialEq)]
pub struct Screenshot {
    /// Row-major, `height * width` values.
    pub pixels: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub patch_width: usize,
    /// Index of the all-black end-of-sequence patch, when one was rendered.
    pub eos_patch_index: Option<usize>,
    /// The full processed string (prefix + newline-substituted text), whether
    /// or not it all fit.
    pub source_text: String,
    pub truncated: bool,
}

impl Screenshot {
    pub fn n_patches(&self) -> usize {
        self.width / self.patch_width
    }

    pub fn pixel(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// True when every pixel of patch `idx` equals `value`.
    pub fn patch_is_uniform(&self, idx: usize, value: f32) -> bool {
        let x0 = idx * self.patch_width;
        (0..self.height).all(|y| (0..self.patch_width).all(|dx| self.pixel(x0 + dx, y) == value))
    }

    /// An all-white screenshot of the configured geometry.
    pub fn blank(config: &RenderConfig) -> Screenshot {
        Screenshot {
            pixels: vec![1.0; config.width_px() * config.line_height as usize],
            width: config.width_px(),
            height: config.line_height as usize,
            patch_width: config.patch_width as usize,
            eos_patch_index: None,
            source_text: String::new(),
            truncated: false,
        }
    }
}

/// One glyph placement decided by the layout pass.
struct Placement {
    ch: char,
    pen_x: i64,
}

/// Walk the pen over `prefix + text` (newlines substituted), deciding which
/// glyphs fit inside the content region. Shared by rendering and measuring.
fn layout(
    text: &str,
    atlas: &GlyphAtlas,
    config: &RenderConfig,
) -> (Vec<Placement>, String, bool, Option<i64>) {
    let processed: String = format!("{}{}", config.prefix, text.replace('\n', &config.newline_symbol));
    let content_limit = (config.content_patches() * config.patch_width as usize) as i64;
    let mut pen_x = config.margin_left as i64;
    let mut placements = Vec::new();
    let mut truncated = false;
    let mut last_ink: Option<i64> = None;
    for ch in processed.chars() {
        let g = atlas.glyph(ch);
        if let Some(ink_right) = g.ink_right() {
            let right_edge = pen_x + g.bearing_x as i64 + ink_right as i64;
            if right_edge >= content_limit {
                truncated = true;
                break;
            }
            last_ink = Some(last_ink.map_or(right_edge, |v| v.max(right_edge)));
        }
        placements.push(Placement { ch, pen_x });
        pen_x += g.advance as i64;
        if ch == ' ' {
            pen_x += config.word_spacing as i64;
        }
    }
    (placements, processed, truncated, last_ink)
}

/// Rasterize `config.prefix` followed by `text` onto one line.
///
/// Every '\n' in `text` is replaced by `config.newline_symbol`. Glyphs whose
/// ink would cross into the reserved end-of-sequence region are dropped along
/// with the rest of the string, and `truncated` is set. Ink composes by
/// `pixel = min(existing, 1 - alpha/255)`, so overlapping glyphs darken
/// idempotently. A pure function of its arguments.
pub fn render_line(text: &str, atlas: &GlyphAtlas, config: &RenderConfig) -> Screenshot {
    let width = config.width_px();
    let height = config.line_height as usize;
    let mut pixels = vec![1.0f32; width * height];
    let (placements, processed, truncated, last_ink) = layout(text, atlas, config);

    let baseline = atlas.ascent as i64;
    for p in &placements {
        let g = atlas.glyph(p.ch);
        let gx = p.pen_x + g.bearing_x as i64;
        let gy = baseline - g.bearing_y as i64;
        for row in 0..g.height as i64 {
            let y = gy + row;
            if y < 0 || y >= height as i64 {
                continue;
            }
            for col in 0..g.width as i64 {
                let x = gx + col;
                if x < 0 || x >= width as i64 {
                    continue;
                }
                let alpha = g.coverage[(row * g.width as i64 + col) as usize];
                if alpha > 0 {
                    let px = &mut pixels[y as usize * width + x as usize];
                    *px = px.min(1.0 - alpha as f32 / 255.0);
                }
            }
        }
    }

    let eos_patch_index = if config.eos_black_patch {
        let idx = match last_ink {
            Some(col) => col as usize / config.patch_width as usize + 1,
            None => 0,
        };
        debug_assert!(idx < config.max_patches);
        let x0 = idx * config.patch_width as usize;
        for y in 0..height {
            for dx in 0..config.patch_width as usize {
                pixels[y * width + x0 + dx] = 0.0;
            }
        }
        Some(idx)
    } else {
        None
    };

    Screenshot {
        pixels,
        width,
        height,
        patch_width: config.patch_width as usize,
        eos_patch_index,
        source_text: processed,
        truncated,
    }
}

/// Patches the would-be rendering touches with ink: `last_ink_patch + 1`, or 0
/// when nothing inks. Dry layout pass; does not rasterize.
pub fn measure_fit(text: &str, atlas: &GlyphAtlas, config: &RenderConfig) -> usize {
    let (_, _, _, last_ink) = layout(text, atlas, config);
    match last_ink {
        Some(col) => (col as usize / config.patch_width as usize + 1).min(config.max_patches),
        None => 0,
    }
}

/// Throughput report from [`bench_render`].
#[derive(Debug, Clone)]
pub struct RenderBenchReport {
    pub total_chars: usize,
    pub total_patches: usize,
    pub elapsed_secs: f64,
    pub chars_per_sec: f64,
    pub patches_per_sec: f64,
    /// Folded over rendered pixels to keep the work observable.
    pub checksum: u64,
}

/// Render every string in `corpus`, discarding output except a checksum, and
/// report wall-clock throughput.
pub fn bench_render(corpus: &[String], atlas: &GlyphAtlas, config: &RenderConfig) -> RenderBenchReport {
    assert!(!corpus.is_empty(), "bench_render needs a non-empty corpus");
    let start = Instant::now();
    let mut checksum = 0u64;
    let mut total_chars = 0usize;
    let mut total_patches = 0usize;
    for text in corpus {
        let shot = render_line(text, atlas, config);
        total_chars += text.chars().count();
        total_patches += shot.n_patches();
        for &p in &shot.pixels {
            checksum = checksum.wrapping_mul(31).wrapping_add((p * 255.0) as u64);
        }
    }
    let elapsed_secs = start.elapsed().as_secs_f64().max(1e-9);
    RenderBenchReport {
        total_chars,
        total_patches,
        elapsed_secs,
        chars_per_sec: total_chars as f64 / elapsed_secs,
        patches_per_sec: total_patches as f64 / elapsed_secs,
        checksum,
    }
}
