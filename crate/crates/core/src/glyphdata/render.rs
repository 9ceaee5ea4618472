use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CapStyle, CharId, GlyphImage, GlyphSpec, Point, StyleId, StyleSpec};
use crate::error::{ensure, Result};

pub const SUPPORTED_SIZES: [usize; 3] = [32, 64, 128];

/// Per-(char, style) RNG seed; rendering depends on nothing else.
pub fn derive_seed(char_id: CharId, style_id: StyleId) -> u64 {
    // splitmix64 finalizer over the packed ids
    let mut z = ((u64::from(char_id) << 32) | u64::from(style_id)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Segment {
    a: Point,
    b: Point,
    half_width: f64,
    butt_start: bool,
    butt_end: bool,
}

impl Segment {
    /// Pixel coverage in `[0, 1]` for a pixel centred at `p`, anti-aliased
    /// over one pixel (`px` in unit coordinates).
    fn coverage(&self, p: Point, px: f64) -> f64 {
        let cov = |signed_dist: f64| (0.5 - signed_dist / px).clamp(0.0, 1.0);
        let d = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let ap = [p[0] - self.a[0], p[1] - self.a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        if len2 < 1e-18 {
            return cov(norm(ap) - self.half_width);
        }
        let len = len2.sqrt();
        let t = (ap[0] * d[0] + ap[1] * d[1]) / len2;
        if t < 0.0 && !self.butt_start {
            return cov(norm(ap) - self.half_width);
        }
        if t > 1.0 && !self.butt_end {
            return cov(norm([p[0] - self.b[0], p[1] - self.b[1]]) - self.half_width);
        }
        let perp = (ap[0] * d[1] - ap[1] * d[0]).abs() / len;
        let mut c = cov(perp - self.half_width);
        if self.butt_start {
            c *= cov(-t * len);
        }
        if self.butt_end {
            c *= cov((t - 1.0) * len);
        }
        c
    }
}

fn norm(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn shear(p: Point, slant: f64) -> Point {
    [p[0] + slant * (0.5 - p[1]), p[1]]
}

fn segments(spec: &GlyphSpec, style: &StyleSpec, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let base = style.stroke_width / 2.0;
    let butt = style.cap == CapStyle::Butt;
    let width_for = |a: Point, b: Point| {
        let d = [b[0] - a[0], b[1] - a[1]];
        let n = norm(d);
        let horizontal = if n > 0.0 { (d[0] / n).abs() } else { 0.0 };
        base * (1.0 - 0.6 * style.contrast * horizontal)
    };
    let mut out = Vec::new();
    for stroke in &spec.strokes {
        let pts: Vec<Point> = stroke.iter().map(|&p| shear(p, style.slant)).collect();
        if pts.len() == 1 {
            out.push(Segment {
                a: pts[0],
                b: pts[0],
                half_width: base,
                butt_start: false,
                butt_end: false,
            });
            continue;
        }
        let last = pts.len() - 2;
        for (i, w) in pts.windows(2).enumerate() {
            out.push(Segment {
                a: w[0],
                b: w[1],
                half_width: width_for(w[0], w[1]),
                butt_start: butt && i == 0,
                butt_end: butt && i == last,
            });
        }
    }
    // One draw per adjacent stroke pair regardless of the probability, so the
    // random stream stays aligned across styles.
    for pair in spec.strokes.windows(2) {
        let u: f64 = rng.random();
        if u < style.connectivity {
            let a = shear(*pair[0].last().expect("validated stroke"), style.slant);
            let b = shear(pair[1][0], style.slant);
            out.push(Segment {
                a,
                b,
                half_width: base * 0.5,
                butt_start: false,
                butt_end: false,
            });
        }
    }
    out
}

/// Rasterizes `spec` in `style` at `size`×`size`.
pub fn render_glyph(spec: &GlyphSpec, style: &StyleSpec, size: usize) -> Result<GlyphImage> {
    ensure!(
        SUPPORTED_SIZES.contains(&size),
        Config,
        "unsupported image size {size}; expected one of {SUPPORTED_SIZES:?}"
    );
    spec.validate()?;
    style.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.char_id, style.style_id));
    let segs = segments(spec, style, &mut rng);
    let px = 1.0 / size as f64;
    let mut pixels = Vec::with_capacity(size * size);
    for r in 0..size {
        let y = (r as f64 + 0.5) * px;
        for c in 0..size {
            let x = (c as f64 + 0.5) * px;
            let ink = segs
                .iter()
                .map(|s| s.coverage([x, y], px))
                .fold(0.0f64, f64::max);
            pixels.push((1.0 - ink) as f32);
        }
    }
    for v in pixels.iter_mut() {
        let u: f64 = rng.random();
        let shade: f64 = rng.random_range(0.35..0.85);
        if *v == 1.0 && u < style.speckle {
            *v = shade as f32;
        }
    }
    GlyphImage::new(size, pixels, spec.char_id, style.style_id)
}
