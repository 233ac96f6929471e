//! Procedural source task: each class is a (shape, hue band) pair rendered
//! at a random position and scale over a noisy gray background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledImage, IMAGE_PIXELS, IMAGE_SIDE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk,
    Square,
    Cross,
    Stripes,
    Checker,
}

const SHAPES: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Cross, Shape::Stripes, Shape::Checker];

impl Shape {
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        let inside_box = dx.abs() <= r && dy.abs() <= r;
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            Shape::Stripes => inside_box && (((dy + r) / 3.0).floor() as i64) % 2 == 0,
            Shape::Checker => {
                inside_box && ((((dx + r) / 3.0).floor() + ((dy + r) / 3.0).floor()) as i64) % 2 == 0
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(class: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = SHAPES[class % SHAPES.len()];
    let bands = num_classes.div_ceil(SHAPES.len());
    let band = class / SHAPES.len();
    let hue = (band as f64 + 0.5 + rng.random_range(-0.42..0.42)) / bands as f64;
    let color = hsv_to_rgb(hue, rng.random_range(0.4..1.0), rng.random_range(0.55..1.0));
    let background = rng.random_range(0.1..0.6);
    let r = rng.random_range(4.0..9.0);
    let cx = rng.random_range(9.0..23.0);
    let cy = rng.random_range(9.0..23.0);
    let noise = Normal::new(0.0, 0.08).expect("valid sigma");
    let mut data = vec![0.0; 3 * IMAGE_PIXELS];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let on = shape.covers(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            for (c, &fg) in color.iter().enumerate() {
                let base = if on { fg } else { background };
                let v: f64 = base + noise.sample(rng);
                data[c * IMAGE_PIXELS + y * IMAGE_SIDE + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, IMAGE_SIDE, IMAGE_SIDE], data).expect("image shape")
}

/// `n` class-balanced images (`label = i mod K`). Image `i` depends only on
/// `(seed, i)`.
pub fn generate_source(n: usize, num_classes: usize, seed: u64) -> Vec<LabeledImage> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let label = i % num_classes;
            LabeledImage {
                pixels: render(label, num_classes, &mut rng),
                label,
            }
        })
        .collect()
}
