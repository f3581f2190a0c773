//! Seeded synthetic sketch generator: class-parameterized stroke figures
//! (circles, polygons, line arrangements) with positional jitter, rendered
//! as binary rasters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Raster, SketchSample, BACKGROUND};
use crate::error::{Error, Result};
use crate::rng::{derive, rng_from};

const KINDS: [&str; 10] = [
    "circle",
    "square",
    "triangle",
    "plus",
    "cross",
    "hbars",
    "vbars",
    "zigzag",
    "star",
    "rings",
];

/// The number of distinct figure kinds available.
pub fn max_synthetic_classes() -> usize {
    KINDS.len()
}

#[derive(Clone, Copy)]
struct Segment {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

#[derive(Clone, Copy)]
struct Ring {
    cx: f64,
    cy: f64,
    r: f64,
}

fn segment_distance(s: &Segment, px: f64, py: f64) -> f64 {
    let (dx, dy) = (s.x1 - s.x0, s.y1 - s.y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - s.x0) * dx + (py - s.y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (s.x0 + t * dx, s.y0 + t * dy);
    ((px - qx) * (px - qx) + (py - qy) * (py - qy)).sqrt()
}

fn polygon(cx: f64, cy: f64, r: f64, n: usize, phase: f64) -> Vec<Segment> {
    let mut segs = Vec::with_capacity(n);
    for i in 0..n {
        let a0 = phase + std::f64::consts::TAU * i as f64 / n as f64;
        let a1 = phase + std::f64::consts::TAU * (i + 1) as f64 / n as f64;
        segs.push(Segment {
            x0: cx + r * a0.cos(),
            y0: cy + r * a0.sin(),
            x1: cx + r * a1.cos(),
            y1: cy + r * a1.sin(),
        });
    }
    segs
}

fn star(cx: f64, cy: f64, r: f64, phase: f64) -> Vec<Segment> {
    // Five-point star: connect every second vertex of a pentagon.
    let verts: Vec<(f64, f64)> = (0..5)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / 5.0;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    (0..5)
        .map(|i| {
            let (x0, y0) = verts[i];
            let (x1, y1) = verts[(i + 2) % 5];
            Segment { x0, y0, x1, y1 }
        })
        .collect()
}

fn figure(kind: usize, side: f64, rng: &mut ChaCha8Rng) -> (Vec<Segment>, Vec<Ring>) {
    let jitter = |rng: &mut ChaCha8Rng, scale: f64| rng.gen_range(-scale..scale);
    let cx = side / 2.0 + jitter(rng, side * 0.12);
    let cy = side / 2.0 + jitter(rng, side * 0.12);
    let r = side * rng.gen_range(0.22..0.34);
    let phase = rng.gen_range(-0.3..0.3);
    match kind {
        0 => (vec![], vec![Ring { cx, cy, r }]),
        1 => (polygon(cx, cy, r, 4, std::f64::consts::FRAC_PI_4 + phase), vec![]),
        2 => (polygon(cx, cy, r, 3, -std::f64::consts::FRAC_PI_2 + phase), vec![]),
        3 => (
            vec![
                Segment { x0: cx - r, y0: cy, x1: cx + r, y1: cy },
                Segment { x0: cx, y0: cy - r, x1: cx, y1: cy + r },
            ],
            vec![],
        ),
        4 => {
            let d = r * std::f64::consts::FRAC_1_SQRT_2;
            (
                vec![
                    Segment { x0: cx - d, y0: cy - d, x1: cx + d, y1: cy + d },
                    Segment { x0: cx - d, y0: cy + d, x1: cx + d, y1: cy - d },
                ],
                vec![],
            )
        }
        5 => {
            let segs = (0..3)
                .map(|i| {
                    let y = cy + (i as f64 - 1.0) * r * 0.8 + jitter(rng, side * 0.02);
                    Segment { x0: cx - r, y0: y, x1: cx + r, y1: y }
                })
                .collect();
            (segs, vec![])
        }
        6 => {
            let segs = (0..3)
                .map(|i| {
                    let x = cx + (i as f64 - 1.0) * r * 0.8 + jitter(rng, side * 0.02);
                    Segment { x0: x, y0: cy - r, x1: x, y1: cy + r }
                })
                .collect();
            (segs, vec![])
        }
        7 => {
            let mut segs = Vec::new();
            let n = 4;
            let step = 2.0 * r / n as f64;
            for i in 0..n {
                let x0 = cx - r + i as f64 * step;
                let y0 = if i % 2 == 0 { cy - r * 0.6 } else { cy + r * 0.6 };
                let y1 = if i % 2 == 0 { cy + r * 0.6 } else { cy - r * 0.6 };
                segs.push(Segment { x0, y0, x1: x0 + step, y1 });
            }
            (segs, vec![])
        }
        8 => (star(cx, cy, r, -std::f64::consts::FRAC_PI_2 + phase), vec![]),
        _ => (
            vec![],
            vec![Ring { cx, cy, r }, Ring { cx, cy, r: r * 0.55 }],
        ),
    }
}

fn render(side: usize, segments: &[Segment], rings: &[Ring], thickness: f64) -> Raster {
    let mut raster = Raster::filled(side, BACKGROUND);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut dist = f64::INFINITY;
            for s in segments {
                dist = dist.min(segment_distance(s, px, py));
            }
            for ring in rings {
                let dr = ((px - ring.cx) * (px - ring.cx) + (py - ring.cy) * (py - ring.cy)).sqrt();
                dist = dist.min((dr - ring.r).abs());
            }
            if dist <= thickness {
                raster.set(x, y, 0.0);
            }
        }
    }
    raster
}

/// Generate a labeled dataset of `n_classes` figure kinds, `per_class`
/// jittered instances each, rendered at `side` pixels. Binary rasters
/// (exact 0.0 strokes on 1.0 background) survive PNG round trips exactly.
pub fn generate_synthetic_sketches(
    n_classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<Dataset> {
    if side < 32 {
        return Err(Error::Contract(format!("side {side} below the 32-pixel minimum")));
    }
    if n_classes == 0 || n_classes > KINDS.len() {
        return Err(Error::Contract(format!(
            "n_classes must lie in 1..={}, got {n_classes}",
            KINDS.len()
        )));
    }
    if per_class == 0 {
        return Err(Error::Contract("per_class must be positive".into()));
    }
    let thickness = (side as f64 / 48.0).max(1.0);
    let mut samples = Vec::with_capacity(n_classes * per_class);
    for kind in 0..n_classes {
        for i in 0..per_class {
            let mut rng = rng_from(derive(seed, (kind * per_class + i) as u64));
            let (segments, rings) = figure(kind, side as f64, &mut rng);
            samples.push(SketchSample {
                raster: render(side, &segments, &rings, thickness),
                label: kind,
                id: format!("{}/{i:04}", KINDS[kind]),
            });
        }
    }
    Ok(Dataset {
        samples,
        classes: KINDS[..n_classes].iter().map(|s| s.to_string()).collect(),
        skipped: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let ds = generate_synthetic_sketches(8, 250, 64, 7).unwrap();
        assert_eq!(ds.len(), 2000);
        assert_eq!(ds.n_classes(), 8);
        let counts = ds.class_counts();
        assert!(counts.iter().all(|&c| c == 250));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic_sketches(4, 5, 48, 3).unwrap();
        let b = generate_synthetic_sketches(4, 5, 48, 3).unwrap();
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x.raster, y.raster);
        }
    }

    #[test]
    fn rasters_are_binary() {
        let ds = generate_synthetic_sketches(10, 3, 40, 9).unwrap();
        for s in &ds.samples {
            assert!(s.raster.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
            // Every figure leaves some ink.
            assert!(s.raster.pixels.iter().any(|&v| v == 0.0));
        }
    }

    #[test]
    fn small_side_is_rejected() {
        assert!(matches!(
            generate_synthetic_sketches(4, 5, 31, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn export_round_trips_identically() {
        let dir = std::env::temp_dir().join("hiernet-synth-roundtrip");
        let _ = std::fs::remove_dir_all(&dir);
        let ds = generate_synthetic_sketches(8, 250, 64, 7).unwrap();
        super::super::save_dataset(&ds, &dir).unwrap();
        let loaded = super::super::load_dataset(&dir, 64).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.classes.len(), ds.classes.len());
        // Class registries sort by name; realign labels through names.
        let mut by_name_orig: std::collections::HashMap<&str, Vec<&Raster>> = Default::default();
        for s in &ds.samples {
            by_name_orig.entry(ds.classes[s.label].as_str()).or_default().push(&s.raster);
        }
        let mut by_name_loaded: std::collections::HashMap<&str, Vec<&Raster>> = Default::default();
        for s in &loaded.samples {
            by_name_loaded
                .entry(loaded.classes[s.label].as_str())
                .or_default()
                .push(&s.raster);
        }
        for (name, originals) in by_name_orig {
            let loaded = &by_name_loaded[name];
            assert_eq!(originals.len(), loaded.len());
            for (a, b) in originals.iter().zip(loaded.iter()) {
                assert_eq!(a, b);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
