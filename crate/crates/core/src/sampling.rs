//! Sub-pixel lookups into dense per-pixel feature maps.

use std::collections::BTreeMap;
use std::sync::OnceLock;

/// Up to four `(pixel index, weight)` taps. Weights sum to one.
pub type Taps = Vec<(usize, f64)>;

/// Bilinear taps for a fractional `(x, y)` pixel, clamped to the image.
/// Integer coordinates produce a single tap of weight one.
pub fn bilinear_taps(pixel: [f64; 2], width: usize, height: usize) -> Taps {
    let x = pixel[0].clamp(0.0, (width - 1) as f64);
    let y = pixel[1].clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut taps: Taps = Vec::with_capacity(4);
    for (xi, yi, w) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        if w == 0.0 {
            continue;
        }
        let idx = yi * width + xi;
        match taps.iter_mut().find(|(i, _)| *i == idx) {
            Some(t) => t.1 += w,
            None => taps.push((idx, w)),
        }
    }
    taps
}

/// Single tap at the nearest pixel (rounding half away from zero).
pub fn nearest_taps(pixel: [f64; 2], width: usize, height: usize) -> Taps {
    let x = pixel[0].round().clamp(0.0, (width - 1) as f64) as usize;
    let y = pixel[1].round().clamp(0.0, (height - 1) as f64) as usize;
    vec![(y * width + x, 1.0)]
}

/// Blend `dim`-wide rows of `data` with the given taps.
pub fn gather(data: &[f64], dim: usize, taps: &Taps) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for &(idx, w) in taps {
        for (o, v) in out.iter_mut().zip(&data[idx * dim..(idx + 1) * dim]) {
            *o += w * v;
        }
    }
    out
}

/// Adjoint of [`gather`]: spread a row gradient back over the taps.
pub fn scatter(grad: &mut [f64], dim: usize, taps: &Taps, value: &[f64]) {
    for &(idx, w) in taps {
        for (g, v) in grad[idx * dim..(idx + 1) * dim].iter_mut().zip(value) {
            *g += w * v;
        }
    }
}

/// Strategy for reading a feature at a fractional pixel.
pub trait FeatureSampler: Send + Sync {
    fn name(&self) -> &'static str;
    fn taps(&self, pixel: [f64; 2], width: usize, height: usize) -> Taps;
}

pub struct Bilinear;

impl FeatureSampler for Bilinear {
    fn name(&self) -> &'static str {
        "bilinear"
    }

    fn taps(&self, pixel: [f64; 2], width: usize, height: usize) -> Taps {
        bilinear_taps(pixel, width, height)
    }
}

pub struct Nearest;

impl FeatureSampler for Nearest {
    fn name(&self) -> &'static str {
        "nearest"
    }

    fn taps(&self, pixel: [f64; 2], width: usize, height: usize) -> Taps {
        nearest_taps(pixel, width, height)
    }
}

fn registry() -> &'static BTreeMap<&'static str, Box<dyn FeatureSampler>> {
    static REG: OnceLock<BTreeMap<&'static str, Box<dyn FeatureSampler>>> = OnceLock::new();
    REG.get_or_init(|| {
        let all: Vec<Box<dyn FeatureSampler>> = vec![Box::new(Bilinear), Box::new(Nearest)];
        all.into_iter().map(|s| (s.name(), s)).collect()
    })
}

/// Look up a sampler by name (`bilinear` or `nearest`).
pub fn sampler(name: &str) -> Option<&'static dyn FeatureSampler> {
    registry().get(name).map(|b| b.as_ref())
}

pub fn sampler_names() -> Vec<&'static str> {
    registry().keys().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_pixel_is_single_tap() {
        assert_eq!(bilinear_taps([3.0, 2.0], 8, 8), vec![(19, 1.0)]);
    }

    #[test]
    fn weights_sum_to_one() {
        let taps = bilinear_taps([2.3, 4.9], 8, 6);
        assert_eq!(taps.len(), 4);
        assert!((taps.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-12);
        // bottom-right corner clamps onto one pixel
        let taps = bilinear_taps([7.0, 5.0], 8, 6);
        assert_eq!(taps, vec![(47, 1.0)]);
    }

    #[test]
    fn registry_lookup() {
        assert_eq!(sampler("bilinear").unwrap().name(), "bilinear");
        assert_eq!(sampler("nearest").unwrap().taps([1.6, 0.4], 4, 4), vec![(2, 1.0)]);
        assert!(sampler("cubic").is_none());
        assert_eq!(sampler_names(), vec!["bilinear", "nearest"]);
    }

    #[test]
    fn scatter_is_adjoint_of_gather() {
        let data: Vec<f64> = (0..48).map(|i| (i as f64).sin()).collect();
        let taps = bilinear_taps([1.25, 2.5], 4, 4);
        let v = [0.3, -1.0, 2.0];
        let lhs: f64 = gather(&data, 3, &taps).iter().zip(&v).map(|(a, b)| a * b).sum();
        let mut g = vec![0.0; 48];
        scatter(&mut g, 3, &taps, &v);
        let rhs: f64 = g.iter().zip(&data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
