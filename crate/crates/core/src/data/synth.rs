//! Procedural 32×32 shape images in ten classes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::rng;

pub const SIDE: usize = 32;
pub const NUM_CLASSES: usize = 10;
pub const NOISE_STD: f64 = 0.05;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "bar_0",
    "bar_36",
    "bar_72",
    "bar_108",
    "bar_144",
    "square",
    "hollow_square",
    "disc",
    "cross",
    "checker",
];

/// Returns whether the offset `(dx, dy)` from the shape center is inside.
fn inside(class: usize, dx: f64, dy: f64, scale: f64) -> bool {
    match class {
        0..=4 => {
            let theta = (class as f64) * std::f64::consts::PI / 5.0;
            let (s, c) = theta.sin_cos();
            let along = dx * c + dy * s;
            let across = -dx * s + dy * c;
            along.abs() <= 10.0 * scale && across.abs() <= 1.6 * scale
        }
        5 => dx.abs() <= 7.0 * scale && dy.abs() <= 7.0 * scale,
        6 => {
            let r = 8.0 * scale;
            let m = dx.abs().max(dy.abs());
            m <= r && m >= r - 2.2 * scale
        }
        7 => dx * dx + dy * dy <= (8.0 * scale).powi(2),
        8 => {
            let (r, t) = (9.0 * scale, 1.6 * scale);
            (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
        }
        _ => {
            let r = 8.0 * scale;
            let cell = 4.0 * scale;
            if dx.abs() > r || dy.abs() > r {
                return false;
            }
            let (i, j) = (((dx + r) / cell).floor() as i64, ((dy + r) / cell).floor() as i64);
            (i + j) % 2 == 0
        }
    }
}

fn draw<R: Rng + ?Sized>(class: usize, rng: &mut R, noise: &Normal<f64>, out: &mut [f32]) {
    let scale = rng.random_range(0.75..1.2);
    let cx = SIDE as f64 / 2.0 + rng.random_range(-5.0..5.0);
    let cy = SIDE as f64 / 2.0 + rng.random_range(-5.0..5.0);
    let fg = rng.random_range(0.6..1.0);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let on = inside(class, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, scale);
            let v = if on { fg } else { 0.0 } + noise.sample(rng);
            out[y * SIDE + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
}

/// `n` single-channel images, labels balanced to within one per class and
/// shuffled. Fully determined by `seed`.
pub fn synth_shapes(n: usize, seed: u64) -> Dataset {
    let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    labels.shuffle(&mut rng::substream(seed, 0));
    let mut draw_rng = rng::substream(seed, 1);
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let mut images = vec![0f32; n * SIDE * SIDE];
    for (i, &label) in labels.iter().enumerate() {
        draw(
            label,
            &mut draw_rng,
            &noise,
            &mut images[i * SIDE * SIDE..(i + 1) * SIDE * SIDE],
        );
    }
    Dataset {
        images,
        labels,
        channels: 1,
        height: SIDE,
        width: SIDE,
        num_classes: NUM_CLASSES,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_shapes(103, 9);
        assert_eq!(a, synth_shapes(103, 9));
        assert_ne!(a.images, synth_shapes(103, 10).images);
        a.validate().unwrap();
        for c in 0..NUM_CLASSES {
            let k = a.labels.iter().filter(|&&l| l == c).count();
            assert!(k == 10 || k == 11);
        }
    }

    #[test]
    fn every_class_draws_pixels() {
        for c in 0..NUM_CLASSES {
            let on = (0..SIDE * SIDE)
                .filter(|i| inside(c, (i % SIDE) as f64 - 16.0, (i / SIDE) as f64 - 16.0, 1.0))
                .count();
            assert!(on > 20, "class {c} draws {on} pixels");
        }
    }
}
