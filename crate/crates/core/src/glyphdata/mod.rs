//! Synthetic glyph corpus: stroke skeletons, styles, rasterization, dataset
//! persistence, episode sampling and fine-tuning pair construction.

mod dataset;
mod episode;
mod image;
mod render;

pub use dataset::{
    build_dataset, ingest_corpus, render_corpus, Corpus, DatasetManifest, DatasetParams, Setting, Splits,
    SplitRatios, MANIFEST_FILE,
};
pub use episode::{
    enumerate_finetune_pairs, finetune_pair_count, sample_episode, sample_episode_from, Episode,
    FinetunePair,
};
pub use image::GlyphImage;
pub use render::{derive_seed, render_glyph, SUPPORTED_SIZES};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub type CharId = u32;
pub type StyleId = u32;

/// A 2-D control point in the unit square, `[x, y]` with `y` pointing down.
pub type Point = [f64; 2];

/// Content identity of a glyph: an ordered list of polyline strokes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub char_id: CharId,
    pub strokes: Vec<Vec<Point>>,
}

impl GlyphSpec {
    pub fn new(char_id: CharId, strokes: Vec<Vec<Point>>) -> Result<Self> {
        let spec = Self { char_id, strokes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.strokes.is_empty(),
            Validation,
            "glyph {} has no strokes",
            self.char_id
        );
        for (i, stroke) in self.strokes.iter().enumerate() {
            ensure!(
                !stroke.is_empty(),
                Validation,
                "glyph {} stroke {i} has no control points",
                self.char_id
            );
            for p in stroke {
                ensure!(
                    p.iter().all(|v| (0.0..=1.0).contains(v)),
                    Validation,
                    "glyph {} stroke {i} point {p:?} outside the unit square",
                    self.char_id
                );
            }
        }
        Ok(())
    }

    /// Random stroke skeleton with 3 to 8 strokes, fixed by `(corpus_seed, char_id)`.
    pub fn generate(char_id: CharId, corpus_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(
            corpus_seed ^ (u64::from(char_id) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let n = rng.random_range(3..=8);
        let lo: f64 = 0.14;
        let hi: f64 = 0.86;
        let mut strokes = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = rng.random_range(0..5u8);
            let stroke = match kind {
                // horizontal bar
                0 => {
                    let y = rng.random_range(lo..hi);
                    let x0 = rng.random_range(lo..0.45);
                    let x1 = rng.random_range(0.55..hi);
                    vec![[x0, y], [x1, y]]
                }
                // vertical bar
                1 => {
                    let x = rng.random_range(lo..hi);
                    let y0 = rng.random_range(lo..0.45);
                    let y1 = rng.random_range(0.55..hi);
                    vec![[x, y0], [x, y1]]
                }
                // falling diagonal
                2 => {
                    let x0 = rng.random_range(lo..0.5);
                    let y0 = rng.random_range(lo..0.5);
                    let len = rng.random_range(0.2..0.4);
                    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let x1 = (x0 + dir * len).clamp(lo, hi);
                    vec![[x0, y0], [x1, (y0 + len).min(hi)]]
                }
                // hook: down then a short turn
                3 => {
                    let x = rng.random_range(0.25..0.75);
                    let y0 = rng.random_range(lo..0.4);
                    let y1 = rng.random_range(0.6..hi);
                    let dx = rng.random_range(-0.15..0.15);
                    vec![[x, y0], [x, y1], [(x + dx).clamp(lo, hi), (y1 - 0.1).max(lo)]]
                }
                // dot
                _ => {
                    let x = rng.random_range(lo..hi);
                    let y = rng.random_range(lo..hi);
                    vec![[x, y], [(x + 0.04).min(hi), (y + 0.04).min(hi)]]
                }
            };
            strokes.push(stroke);
        }
        Self { char_id, strokes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapStyle {
    Butt,
    Round,
}

/// Rendering attributes of one synthetic typeface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_id: StyleId,
    /// Stroke width as a fraction of image width, in `(0, 0.25]`.
    pub stroke_width: f64,
    /// Horizontal shear factor in `[-0.5, 0.5]`.
    pub slant: f64,
    pub cap: CapStyle,
    /// Probability of bridging the end of one stroke to the start of the next.
    pub connectivity: f64,
    /// Thick/thin modulation; horizontal strokes thin out as this grows.
    pub contrast: f64,
    /// Density of isolated background specks, in `[0, 0.05]`.
    pub speckle: f64,
}

impl StyleSpec {
    /// The content-template style every source glyph is rendered in.
    pub fn canonical(style_id: StyleId) -> Self {
        Self {
            style_id,
            stroke_width: 0.06,
            slant: 0.0,
            cap: CapStyle::Round,
            connectivity: 0.0,
            contrast: 0.0,
            speckle: 0.0,
        }
    }

    pub fn random(style_id: StyleId, rng: &mut impl Rng) -> Self {
        Self {
            style_id,
            stroke_width: rng.random_range(0.035..0.13),
            slant: rng.random_range(-0.3..0.3),
            cap: if rng.random_bool(0.5) {
                CapStyle::Butt
            } else {
                CapStyle::Round
            },
            connectivity: rng.random_range(0.0..0.8),
            contrast: rng.random_range(0.0..0.8),
            speckle: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.style_id;
        ensure!(
            self.stroke_width > 0.0 && self.stroke_width <= 0.25,
            Validation,
            "style {id}: stroke_width {} outside (0, 0.25]",
            self.stroke_width
        );
        ensure!(
            (-0.5..=0.5).contains(&self.slant),
            Validation,
            "style {id}: slant {} outside [-0.5, 0.5]",
            self.slant
        );
        ensure!(
            (0.0..=1.0).contains(&self.connectivity),
            Validation,
            "style {id}: connectivity {} outside [0, 1]",
            self.connectivity
        );
        ensure!(
            (0.0..=1.0).contains(&self.contrast),
            Validation,
            "style {id}: contrast {} outside [0, 1]",
            self.contrast
        );
        ensure!(
            (0.0..=0.05).contains(&self.speckle),
            Validation,
            "style {id}: speckle {} outside [0, 0.05]",
            self.speckle
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_skeletons_are_valid_and_stable() {
        for id in 0..50 {
            let a = GlyphSpec::generate(id, 11);
            a.validate().unwrap();
            assert!((3..=8).contains(&a.strokes.len()));
            assert_eq!(a, GlyphSpec::generate(id, 11));
        }
        assert_ne!(GlyphSpec::generate(1, 11), GlyphSpec::generate(2, 11));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(GlyphSpec::new(0, vec![]).is_err());
        assert!(GlyphSpec::new(0, vec![vec![[1.2, 0.5]]]).is_err());
        let mut s = StyleSpec::canonical(0);
        s.stroke_width = 0.3;
        assert!(s.validate().is_err());
        let mut s = StyleSpec::canonical(0);
        s.speckle = 0.06;
        assert!(s.validate().is_err());
    }

    #[test]
    fn random_styles_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for id in 0..100 {
            StyleSpec::random(id, &mut rng).validate().unwrap();
        }
    }
}
