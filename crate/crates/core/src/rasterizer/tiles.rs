//! Assignment of projected Gaussians to 16×16-pixel tiles.

use rayon::prelude::*;

use crate::math::Real;

use super::project::ProjectedGaussian;
use super::RasterOptions;

/// Edge length of a tile in pixels.
pub const TILE_SIZE: usize = 16;

/// Per-tile depth-sorted lists of projected-Gaussian indices.
///
/// `entries` is a flat array grouped by tile; `ranges[t]` bounds tile `t`'s
/// slice. Within a tile, entries are sorted by ascending view depth with
/// ties broken by source index.
#[derive(Clone, Debug)]
pub struct TileBins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub entries: Vec<u32>,
    pub ranges: Vec<(u32, u32)>,
    /// Per projected Gaussian: whether it landed in at least one tile.
    pub touched: Vec<bool>,
}

impl TileBins {
    pub fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    pub fn tile_entries(&self, tile: usize) -> &[u32] {
        let (s, e) = self.ranges[tile];
        &self.entries[s as usize..e as usize]
    }
}

/// Tiles overlapped by the closed interval `[center−radius, center+radius]`
/// along one axis, clamped to the grid; `None` when fully outside.
fn tile_span(center: f64, radius: f64, tiles: usize, size: usize) -> Option<(usize, usize)> {
    let lo = center - radius;
    let hi = center + radius;
    if hi < 0.0 || lo >= size as f64 || !(lo <= hi) {
        return None;
    }
    let t0 = (lo / TILE_SIZE as f64).floor().max(0.0) as usize;
    let t1 = ((hi / TILE_SIZE as f64).floor().max(0.0) as usize).min(tiles - 1);
    if t0 > t1 {
        return None;
    }
    Some((t0, t1))
}

/// Bins projected Gaussians into tiles.
///
/// The binning radius is `sqrt(gaussian_cutoff · λ_max(cov2d))` — exactly
/// the screen-space extent outside which the compositor's cutoff test would
/// reject the contribution anyway, so binning never changes rendered values.
/// With the production cutoff of 9 this is the 3σ extent.
pub fn bin_tiles<T: Real>(
    projected: &[ProjectedGaussian<T>],
    width: usize,
    height: usize,
    options: &RasterOptions<T>,
) -> TileBins {
    let tiles_x = width.div_ceil(TILE_SIZE).max(1);
    let tiles_y = height.div_ceil(TILE_SIZE).max(1);
    let cutoff = options.gaussian_cutoff.to_f64_lossy();
    let radius_factor = if cutoff.is_finite() { cutoff.max(0.0).sqrt() } else { f64::INFINITY };

    let mut touched = vec![false; projected.len()];
    // Sort key: (tile, depth bits, source index). Depths are positive, so
    // the IEEE bit pattern orders them monotonically; the source index makes
    // the key unique, which keeps an unstable parallel sort deterministic.
    let mut keys: Vec<(u32, u64, u32)> = Vec::new();
    for (idx, g) in projected.iter().enumerate() {
        let r = radius_factor * g.sigma_max.to_f64_lossy();
        let (Some((x0, x1)), Some((y0, y1))) = (
            tile_span(g.mean2d[0].to_f64_lossy(), r, tiles_x, width),
            tile_span(g.mean2d[1].to_f64_lossy(), r, tiles_y, height),
        ) else {
            continue;
        };
        touched[idx] = true;
        let depth_bits = g.view_depth.to_f64_lossy().to_bits();
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                keys.push(((ty * tiles_x + tx) as u32, depth_bits, idx as u32));
            }
        }
    }
    keys.par_sort_unstable();

    let tile_count = tiles_x * tiles_y;
    let mut ranges = vec![(0u32, 0u32); tile_count];
    let mut entries = Vec::with_capacity(keys.len());
    let mut pos = 0usize;
    for tile in 0..tile_count {
        let start = pos;
        while pos < keys.len() && keys[pos].0 as usize == tile {
            entries.push(keys[pos].2);
            pos += 1;
        }
        ranges[tile] = (start as u32, pos as u32);
    }
    TileBins {
        tiles_x,
        tiles_y,
        entries,
        ranges,
        touched,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2, Vector3};

    fn splat(mean: (f64, f64), sigma: f64, depth: f64, source: u32) -> ProjectedGaussian<f64> {
        let cov = Matrix2::from_diagonal(&Vector2::new(sigma * sigma, sigma * sigma));
        ProjectedGaussian {
            mean2d: Vector2::new(mean.0, mean.1),
            conic: cov.try_inverse().unwrap(),
            cov2d: cov,
            view_pos: Vector3::new(0.0, 0.0, -depth),
            view_depth: depth,
            color: Vector3::new(0.5, 0.5, 0.5),
            opacity: 0.5,
            sigma_max: sigma,
            source_index: source,
        }
    }

    #[test]
    fn full_screen_gaussian_lands_in_every_tile() {
        let g = splat((32.0, 32.0), 1e4, 1.0, 0);
        let bins = bin_tiles(&[g], 64, 64, &RasterOptions::production());
        assert_eq!(bins.tile_count(), 16);
        for t in 0..16 {
            assert_eq!(bins.tile_entries(t), &[0]);
        }
        assert!(bins.touched[0]);
    }

    #[test]
    fn within_tile_order_is_by_depth() {
        let a = splat((8.0, 8.0), 2.0, 2.0, 0);
        let b = splat((9.0, 8.0), 2.0, 1.0, 1);
        let bins = bin_tiles(&[a, b], 16, 16, &RasterOptions::production());
        assert_eq!(bins.tile_entries(0), &[1, 0]);
    }

    #[test]
    fn equal_depths_fall_back_to_source_order() {
        let a = splat((8.0, 8.0), 2.0, 1.5, 0);
        let b = splat((9.0, 8.0), 2.0, 1.5, 1);
        let bins = bin_tiles(&[b.clone(), a.clone()], 16, 16, &RasterOptions::production());
        // Storage order [b, a]: indices 0 and 1 share a depth, so the tile
        // lists them in index order.
        assert_eq!(bins.tile_entries(0), &[0, 1]);
    }

    #[test]
    fn three_sigma_extent_sets_tile_membership() {
        // σ=2 ⇒ radius 6 around x=30: box [24, 36] overlaps tiles 1 and 2.
        let g = splat((30.0, 8.0), 2.0, 1.0, 0);
        let bins = bin_tiles(&[g], 64, 16, &RasterOptions::production());
        assert_eq!(bins.tile_entries(0), &[] as &[u32]);
        assert_eq!(bins.tile_entries(1), &[0]);
        assert_eq!(bins.tile_entries(2), &[0]);
        assert_eq!(bins.tile_entries(3), &[] as &[u32]);
    }

    #[test]
    fn fully_offscreen_gaussian_touches_nothing() {
        let g = splat((-100.0, 8.0), 2.0, 1.0, 0);
        let bins = bin_tiles(&[g], 64, 16, &RasterOptions::production());
        assert!(!bins.touched[0]);
        assert!(bins.entries.is_empty());
    }

    #[test]
    fn infinite_cutoff_bins_everywhere() {
        let g = splat((8.0, 8.0), 0.6, 1.0, 0);
        let bins = bin_tiles(&[g], 64, 64, &RasterOptions::exact());
        for t in 0..bins.tile_count() {
            assert_eq!(bins.tile_entries(t), &[0]);
        }
    }
}
