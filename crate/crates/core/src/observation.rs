// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic RGB observations laid out on a patch grid.

use sha2::{Digest, Sha256};

pub const CHANNELS: usize = 3;

/// Default side length of one patch in pixels.
pub const DEFAULT_PATCH_PX: usize = 2;

pub type Rgb = [f64; CHANNELS];

pub const FLOOR: Rgb = [0.5, 0.5, 0.5];
pub const AGENT: Rgb = [1.0, 1.0, 1.0];
pub const BLACK: Rgb = [0.0, 0.0, 0.0];

/// Object colors, indexed by color id. The vocabulary's color words use the
/// same order.
pub const OBJECT_COLORS: [Rgb; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.1, 0.2, 0.9],
    [0.95, 0.9, 0.1],
    [0.85, 0.1, 0.85],
    [0.1, 0.85, 0.85],
    [0.95, 0.55, 0.05],
    [0.45, 0.1, 0.6],
];

/// Image of `rows x cols` patches, each `patch_px x patch_px` pixels, stored
/// row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    rows: usize,
    cols: usize,
    patch_px: usize,
    pixels: Vec<f64>,
}

impl Observation {
    pub fn filled(rows: usize, cols: usize, patch_px: usize, color: Rgb) -> Self {
        let n = rows * cols * patch_px * patch_px;
        let mut pixels = Vec::with_capacity(n * CHANNELS);
        for _ in 0..n {
            pixels.extend_from_slice(&color);
        }
        Self {
            rows,
            cols,
            patch_px,
            pixels,
        }
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn patch_px(&self) -> usize {
        self.patch_px
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_px
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_px
    }

    fn offset(&self, y: usize, x: usize) -> usize {
        (y * self.width() + x) * CHANNELS
    }

    pub fn pixel(&self, y: usize, x: usize) -> Rgb {
        let o = self.offset(y, x);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: Rgb) {
        let o = self.offset(y, x);
        self.pixels[o..o + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn patch_of_pixel(&self, y: usize, x: usize) -> usize {
        (y / self.patch_px) * self.cols + x / self.patch_px
    }

    /// Pixel coordinates `(y, x)` covered by `patch`.
    pub fn patch_pixels(&self, patch: usize) -> impl Iterator<Item = (usize, usize)> {
        let (pr, pc) = (patch / self.cols, patch % self.cols);
        let s = self.patch_px;
        (0..s).flat_map(move |dy| (0..s).map(move |dx| (pr * s + dy, pc * s + dx)))
    }

    pub fn fill_patch(&mut self, patch: usize, rgb: Rgb) {
        let coords: Vec<_> = self.patch_pixels(patch).collect();
        for (y, x) in coords {
            self.set_pixel(y, x, rgb);
        }
    }

    pub fn patch_mean(&self, patch: usize) -> Rgb {
        let mut acc = [0.0; CHANNELS];
        let mut n = 0.0;
        for (y, x) in self.patch_pixels(patch) {
            let p = self.pixel(y, x);
            for c in 0..CHANNELS {
                acc[c] += p[c];
            }
            n += 1.0;
        }
        acc.map(|v| v / n)
    }

    pub fn raw(&self) -> &[f64] {
        &self.pixels
    }

    /// Stable 64-bit digest of the pixel bytes.
    pub fn digest(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        h.update((self.patch_px as u64).to_le_bytes());
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("sha256 is 32 bytes"))
    }
}

/// Stable 64-bit digest of a string, used for ids in container headers.
pub fn stable_hash(s: &str) -> u64 {
    let out = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(out[..8].try_into().expect("sha256 is 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_geometry() {
        let obs = Observation::filled(8, 8, 2, FLOOR);
        assert_eq!((obs.height(), obs.width()), (16, 16));
        assert_eq!(obs.patch_of_pixel(7, 9), 3 * 8 + 4);
        let px: Vec<_> = obs.patch_pixels(28).collect();
        assert_eq!(px, vec![(6, 8), (6, 9), (7, 8), (7, 9)]);
    }

    #[test]
    fn digest_tracks_content() {
        let a = Observation::filled(2, 2, 2, FLOOR);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.fill_patch(3, AGENT);
        assert_ne!(a.digest(), b.digest());
    }
}
