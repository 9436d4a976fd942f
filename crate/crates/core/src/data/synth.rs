use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mask, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rasterized width of every synthetic lane line.
pub const LANE_WIDTH_PX: usize = 2;

fn noisy(rng: &mut ChaCha8Rng, base: [f32; 3], light: f32, amp: f32) -> [u8; 3] {
    let n = rng.random_range(-amp..=amp);
    base.map(|c| ((c * light + n).round()).clamp(0.0, 255.0) as u8)
}

/// Scene `index` of the stream for `seed`; independent of how many scenes are drawn.
pub fn synth_sample(seed: u64, index: u64, width: usize, height: usize) -> Result<Sample> {
    if width == 0 || height == 0 || !width.is_multiple_of(8) || !height.is_multiple_of(8) {
        return Err(Error::invalid(format!("synthetic size {width}x{height} must be positive and divisible by 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (wf, hf) = (width as f64, height as f64);

    let horizon = rng.random_range(0.35..0.55) * hf;
    let bottom_w = rng.random_range(0.6..1.0) * wf;
    let top_w = rng.random_range(0.1..0.3) * wf;
    let bottom_c = wf / 2.0 + rng.random_range(-0.1..0.1) * wf;
    let top_c = wf / 2.0 + rng.random_range(-0.15..0.15) * wf;
    let light = rng.random_range(0.7f32..1.2);
    let sky = [rng.random_range(90.0..140.0), rng.random_range(140.0..190.0), rng.random_range(200.0..250.0)];
    let ground = [rng.random_range(50.0..110.0), rng.random_range(100.0..150.0), rng.random_range(30.0..80.0)];
    let road_gray: f32 = rng.random_range(60.0..110.0);

    // Road edges at row y (pixel centre), for y at or below the horizon.
    let edges = |y: f64| {
        let t = ((y - horizon) / (hf - 1.0 - horizon)).clamp(0.0, 1.0);
        let c = top_c + t * (bottom_c - top_c);
        let half = (top_w + t * (bottom_w - top_w)) / 2.0;
        (c - half, c + half)
    };

    let mut rgb = vec![0u8; 3 * width * height];
    let mut da = Mask::zeros(width, height);
    for y in 0..height {
        let yc = y as f64 + 0.5;
        let (l, r) = edges(yc);
        for x in 0..width {
            let xc = x as f64 + 0.5;
            let px = if yc < horizon {
                noisy(&mut rng, sky, light, 6.0)
            } else if xc >= l && xc <= r {
                da.set(x, y);
                noisy(&mut rng, [road_gray; 3], light, 10.0)
            } else {
                noisy(&mut rng, ground, light, 14.0)
            };
            for (ch, v) in px.into_iter().enumerate() {
                rgb[ch * width * height + y * width + x] = v;
            }
        }
    }

    let lanes = rng.random_range(1..=3usize);
    let mut lane = Mask::zeros(width, height);
    let paint = [rng.random_range(225.0..255.0f32), rng.random_range(215.0..255.0), rng.random_range(170.0..255.0)];
    for k in 0..lanes {
        // Fraction across the road, kept away from the edges.
        let frac = (k as f64 + 1.0) / (lanes as f64 + 1.0) + rng.random_range(-0.05..0.05);
        let bend = rng.random_range(-0.06..0.06);
        let mid = horizon + rng.random_range(0.3..0.7) * (hf - horizon);
        let x_at = |y: f64| {
            let (l, r) = edges(y);
            // Bend peaks at `mid` and vanishes at both ends.
            let w = if y < mid {
                (y - horizon) / (mid - horizon)
            } else {
                (hf - y) / (hf - mid)
            };
            l + (frac + bend * w.clamp(0.0, 1.0)) * (r - l)
        };
        let top = horizon.ceil() + 1.0;
        let mut y = top;
        while y < hf {
            let x = x_at(y);
            let (yi, xi) = (y as usize, x.floor() as isize);
            for dx in 0..LANE_WIDTH_PX as isize {
                let xx = xi + dx;
                if xx >= 0 && (xx as usize) < width && da.get(xx as usize, yi) == 1 {
                    lane.set(xx as usize, yi);
                }
            }
            y += 0.25;
        }
    }
    for y in 0..height {
        for x in 0..width {
            if lane.get(x, y) == 1 {
                let px = noisy(&mut rng, paint, light.max(0.9), 5.0);
                for (ch, v) in px.into_iter().enumerate() {
                    rgb[ch * width * height + y * width + x] = v;
                }
            }
        }
    }

    let image = Tensor::new(vec![3, height, width], rgb.into_iter().map(|v| v as f32 / 255.0).collect())?;
    Ok(Sample {
        id: format!("{index:06}"),
        image,
        da,
        lane,
    })
}

/// `count` scenes, bitwise deterministic in `(count, seed, size)`.
pub fn synth_generate(count: usize, seed: u64, width: usize, height: usize) -> Result<Vec<Sample>> {
    (0..count as u64).map(|i| synth_sample(seed, i, width, height)).collect()
}
