//! Stroke-rendered '2' and '8' glyphs, an offline stand-in for MNIST digits.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::IMAGE_SIDE;

type Point = (f64, f64);

fn arc(cx: f64, cy: f64, r: f64, from: f64, to: f64, steps: usize) -> Vec<Point> {
    (0..=steps)
        .map(|i| {
            let t = from + (to - from) * i as f64 / steps as f64;
            (cx + r * t.cos(), cy + r * t.sin())
        })
        .collect()
}

/// Template polylines in pixel coordinates (x right, y down).
fn template(digit: u8) -> Vec<Vec<Point>> {
    match digit {
        8 => vec![
            arc(14.0, 9.0, 4.5, 0.0, 2.0 * PI, 48),
            arc(14.0, 19.0, 5.5, 0.0, 2.0 * PI, 56),
        ],
        2 => {
            let mut top = arc(14.0, 10.0, 5.0, PI, 2.25 * PI, 40);
            top.push((9.0, 21.0));
            vec![top, vec![(9.0, 21.0), (20.0, 21.0)]]
        }
        _ => panic!("no template for digit {digit}"),
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders a digit template shifted by `(dx, dy)` with the given stroke
/// thickness; edges are anti-aliased over one pixel.
pub fn render_glyph(digit: u8, dx: f64, dy: f64, thickness: f64) -> Vec<f64> {
    let strokes = template(digit);
    let mut img = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let p = (x as f64 - dx, y as f64 - dy);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            img[y * IMAGE_SIDE + x] = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    img
}

/// `n_per_class` jittered glyphs of each class, alternating '2' and '8'.
pub fn synthesize_glyphs(n_per_class: usize, seed: u64) -> Vec<(Vec<f64>, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for digit in [2u8, 8] {
            let dx = rng.random_range(-2.0..=2.0);
            let dy = rng.random_range(-2.0..=2.0);
            let thickness = rng.random_range(1.0..=2.0);
            out.push((render_glyph(digit, dx, dy, thickness), digit));
        }
    }
    out
}

/// Number of 4-connected background components (pixels `<= level`) that do
/// not touch the image border.
pub fn enclosed_regions(img: &[f64], level: f64) -> usize {
    let side = IMAGE_SIDE;
    let mut seen = vec![false; img.len()];
    let mut count = 0;
    for start in 0..img.len() {
        if seen[start] || img[start] > level {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut touches_border = false;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / side, i % side);
            if y == 0 || x == 0 || y == side - 1 || x == side - 1 {
                touches_border = true;
            }
            let mut visit = |j: usize| {
                if !seen[j] && img[j] <= level {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - side);
            }
            if y + 1 < side {
                visit(i + side);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < side {
                visit(i + 1);
            }
        }
        if !touches_border {
            count += 1;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_glyphs() {
        assert_eq!(synthesize_glyphs(5, 7), synthesize_glyphs(5, 7));
        assert_ne!(synthesize_glyphs(5, 7), synthesize_glyphs(5, 8));
    }

    #[test]
    fn templates_have_the_right_holes() {
        for (img, digit) in synthesize_glyphs(200, 11) {
            let holes = enclosed_regions(&img, 0.1);
            let want = if digit == 8 { 2 } else { 0 };
            assert_eq!(holes, want, "digit {digit}");
        }
    }

    #[test]
    fn coverage_and_range() {
        let glyphs = synthesize_glyphs(300, 2);
        let mut total = 0.0;
        for (img, _) in &glyphs {
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let cover = img.iter().filter(|&&v| v > 0.1).count() as f64 / img.len() as f64;
            assert!(cover > 0.05 && cover < 0.35, "{cover}");
            total += cover;
        }
        let mean = total / glyphs.len() as f64;
        assert!((0.08..=0.30).contains(&mean), "{mean}");
    }
}
