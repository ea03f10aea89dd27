use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pgm::Gray;

/// Bilinearly interpolated random lattice with spacing `cell`.
fn value_noise<R: Rng + ?Sized>(w: usize, h: usize, cell: f64, rng: &mut R) -> Vec<f64> {
    let (gw, gh) = ((w as f64 / cell) as usize + 2, (h as f64 / cell) as usize + 2);
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / cell, y as f64 / cell);
            let (x0, y0) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let l = |c: usize, r: usize| lattice[r * gw + c];
            let top = l(x0, y0) * (1.0 - tx) + l(x0 + 1, y0) * tx;
            let bottom = l(x0, y0 + 1) * (1.0 - tx) + l(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// A non-repeating grayscale texture: three octaves of value noise with
/// random discs and rectangles painted over.
pub fn texture<R: Rng + ?Sized>(w: usize, h: usize, rng: &mut R) -> Gray {
    let mut v = vec![0.0; w * h];
    for (cell, amp) in [(24.0, 1.0), (10.0, 0.6), (4.0, 0.35)] {
        for (o, n) in v.iter_mut().zip(value_noise(w, h, cell, rng)) {
            *o += amp * n;
        }
    }
    let shapes = (w * h) / 400;
    for _ in 0..shapes {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let size = rng.random_range(2.0..9.0);
        let level = rng.random_range(-1.5..1.5);
        let disc = rng.random_bool(0.5);
        let (x0, x1) = ((cx - size).max(0.0) as usize, ((cx + size) as usize + 1).min(w));
        let (y0, y1) = ((cy - size).max(0.0) as usize, ((cy + size) as usize + 1).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if !disc || dx * dx + dy * dy <= size * size {
                    v[y * w + x] = level;
                }
            }
        }
    }
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = (hi - lo).max(1e-12);
    let data = v.iter().map(|&x| ((x - lo) / span * 255.0).round() as u8).collect();
    Gray::new(w, h, data).expect("sizes agree")
}

/// `n` textures of `w x h`, texture `k` drawn from seed `seed + k`.
pub fn texture_corpus(n: usize, w: usize, h: usize, seed: u64) -> Vec<Gray> {
    (0..n as u64)
        .map(|k| texture(w, h, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(k))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_and_use_the_full_range() {
        let a = texture_corpus(2, 64, 48, 3);
        let b = texture_corpus(2, 64, 48, 3);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert_eq!((a[0].width, a[0].height), (64, 48));
        assert_eq!(a[0].data.iter().min(), Some(&0));
        assert_eq!(a[0].data.iter().max(), Some(&255));
    }

    #[test]
    fn cells_are_distinguishable() {
        // 8x8 blocks should rarely coincide
        let t = texture(96, 96, &mut ChaCha8Rng::seed_from_u64(1));
        let block = |r: usize, c: usize| -> Vec<u8> {
            (0..8).flat_map(|y| (0..8).map(move |x| (y, x))).map(|(y, x)| t.get(8 * c + x, 8 * r + y)).collect()
        };
        let blocks: Vec<_> = (0..12).flat_map(|r| (0..12).map(move |c| (r, c))).map(|(r, c)| block(r, c)).collect();
        let distinct: std::collections::BTreeSet<_> = blocks.iter().collect();
        assert!(distinct.len() > 140);
    }
}
