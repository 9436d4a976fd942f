use super::{Mask, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAW_BACKGROUND: u8 = 0;
pub const RAW_DIRECT: u8 = 1;
pub const RAW_ALTERNATIVE: u8 = 2;

/// Union of the direct and alternative drivable classes.
pub fn merge_drivable(width: usize, height: usize, raw: &[u8]) -> Result<Mask> {
    let data = raw
        .iter()
        .map(|&v| match v {
            RAW_BACKGROUND => Ok(0),
            RAW_DIRECT | RAW_ALTERNATIVE => Ok(1),
            other => Err(Error::invalid(format!("unknown drivable label value {other}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(width, height, data)
}

/// Lane dilation extent for a target width: 8 px at 640, scaled, rounded down to even.
pub fn default_lane_dilation(width: usize) -> usize {
    (8 * width / 640) / 2 * 2
}

/// Binary dilation with an `(extent + 1)`-sided square element, clipped at borders.
pub fn dilate_lane(mask: &Mask, extent: usize) -> Mask {
    if extent == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let before = extent / 2;
    let after = extent - before;
    // Separable: rows then columns.
    let mut rows = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) == 1 {
                let lo = x.saturating_sub(after);
                let hi = (x + before).min(w - 1);
                rows[y * w + lo..=y * w + hi].fill(1);
            }
        }
    }
    let mut out = Mask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            if rows[y * w + x] == 1 {
                for yy in y.saturating_sub(after)..=(y + before).min(h - 1) {
                    out.set(x, yy);
                }
            }
        }
    }
    out
}

fn check_target(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("resize target {width}x{height} must be positive")));
    }
    Ok(())
}

/// Bilinear resampling of a `[C, H, W]` image with half-pixel centers.
pub fn resize_image(image: &Tensor<f32>, width: usize, height: usize) -> Result<Tensor<f32>> {
    check_target(width, height)?;
    let [c, sh, sw] = image.shape()[..] else {
        return Err(Error::shape("resize_image", format!("expected [C, H, W], got {:?}", image.shape())));
    };
    if (sw, sh) == (width, height) {
        return Ok(image.clone());
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(width, sw);
    let ys = axis(height, sh);
    let src = image.data();
    let mut out = Vec::with_capacity(c * width * height);
    for ch in 0..c {
        let plane = &src[ch * sh * sw..][..sh * sw];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * sw + x0] * (1.0 - fx) + plane[y0 * sw + x1] * fx;
                let bottom = plane[y1 * sw + x0] * (1.0 - fx) + plane[y1 * sw + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, height, width], out)
}

/// Nearest-neighbour resampling; the result stays binary.
pub fn resize_mask(mask: &Mask, width: usize, height: usize) -> Result<Mask> {
    check_target(width, height)?;
    let (sw, sh) = (mask.width(), mask.height());
    if (sw, sh) == (width, height) {
        return Ok(mask.clone());
    }
    let nearest = |d: usize, dst: usize, src: usize| (((d as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = nearest(y, height, sh);
        for x in 0..width {
            data.push(mask.get(nearest(x, width, sw), sy));
        }
    }
    Mask::new(width, height, data)
}

pub fn resize_pair(sample: &Sample, width: usize, height: usize) -> Result<Sample> {
    Ok(Sample {
        id: sample.id.clone(),
        image: resize_image(&sample.image, width, height)?,
        da: resize_mask(&sample.da, width, height)?,
        lane: resize_mask(&sample.lane, width, height)?,
    })
}
