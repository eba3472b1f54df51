//! Feature-grid geometry and augmentation-derived correspondences.
//!
//! Grid cell `(i,j)` of an `H x W` view with stride `p` has pixel center
//! `((j+0.5)p - 0.5, (i+0.5)p - 0.5)`. A correspondence is built by
//! mapping that center through the inverse of the color-only view's
//! transform into source coordinates and then forward through the
//! spatial view's transform, finally converting to continuous
//! feature-grid coordinates `u = (x+0.5)/p - 0.5`.

use crate::augment::{map_source_to_view, map_view_to_source, TransformSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureGeometry {
    /// View size in pixels.
    pub height: usize,
    pub width: usize,
    /// Pixels per feature cell.
    pub stride: usize,
}

impl FeatureGeometry {
    pub fn new(height: usize, width: usize, stride: usize) -> Result<Self> {
        if stride == 0 || height % stride != 0 || width % stride != 0 {
            return Err(Error::Geometry(format!(
                "stride {stride} must evenly divide {height}x{width}"
            )));
        }
        Ok(FeatureGeometry {
            height,
            width,
            stride,
        })
    }

    /// Feature-grid rows.
    pub fn grid_h(&self) -> usize {
        self.height / self.stride
    }

    /// Feature-grid columns.
    pub fn grid_w(&self) -> usize {
        self.width / self.stride
    }

    pub fn cells(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Pixel center of grid cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let p = self.stride as f64;
        ((j as f64 + 0.5) * p - 0.5, (i as f64 + 0.5) * p - 0.5)
    }

    /// Pixel coordinate -> continuous feature-grid coordinate.
    pub fn pixel_to_feature(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let p = self.stride as f64;
        ((x + 0.5) / p - 0.5, (y + 0.5) / p - 0.5)
    }
}

/// Row-major list of `(grid index (i,j), pixel-center coordinate)`.
pub fn grid_points(geom: &FeatureGeometry) -> Vec<((usize, usize), (f64, f64))> {
    let mut out = Vec::with_capacity(geom.cells());
    for i in 0..geom.grid_h() {
        for j in 0..geom.grid_w() {
            out.push(((i, j), geom.cell_center(i, j)));
        }
    }
    out
}

/// One validated pair: integer grid index in view c and continuous
/// feature-grid coordinate `(u, v)` in view sc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrPair {
    pub grid_c: (usize, usize),
    /// Continuous feature coordinate in view sc, `0 <= u <= w-1`, `0 <= v <= h-1`.
    pub uv_sc: (f64, f64),
}

/// The set P of valid correspondences between the two views' grids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<CorrPair>,
}

impl CorrespondenceSet {
    pub fn valid_count(&self) -> usize {
        self.pairs.len()
    }
}

/// Build the correspondence set between the grids of the two views.
///
/// Pairs whose target coordinate falls outside the closed grid support
/// `[0, w-1] x [0, h-1]` are dropped.
pub fn build_correspondences(
    spec_c: &TransformSpec,
    spec_sc: &TransformSpec,
    geom: &FeatureGeometry,
) -> Result<CorrespondenceSet> {
    if spec_c.out_size != spec_sc.out_size {
        return Err(Error::Geometry(format!(
            "view sizes differ: {:?} vs {:?}",
            spec_c.out_size, spec_sc.out_size
        )));
    }
    if spec_c.out_size != (geom.height, geom.width) {
        return Err(Error::Geometry(format!(
            "geometry {}x{} does not match view size {:?}",
            geom.height, geom.width, spec_c.out_size
        )));
    }
    let (gh, gw) = (geom.grid_h() as f64, geom.grid_w() as f64);
    let mut pairs = Vec::with_capacity(geom.cells());
    for ((i, j), center) in grid_points(geom) {
        let src = map_view_to_source(spec_c, center);
        let view_sc = map_source_to_view(spec_sc, src);
        let (u, v) = geom.pixel_to_feature(view_sc);
        if u >= 0.0 && u <= gw - 1.0 && v >= 0.0 && v <= gh - 1.0 {
            pairs.push(CorrPair {
                grid_c: (i, j),
                uv_sc: (u, v),
            });
        }
    }
    Ok(CorrespondenceSet { pairs })
}

/// Ground truth for the flip-only evaluation: `(i, j) -> (i, w-1-j)`.
pub fn flip_ground_truth(geom: &FeatureGeometry) -> Vec<(usize, usize)> {
    let w = geom.grid_w();
    let mut out = Vec::with_capacity(geom.cells());
    for i in 0..geom.grid_h() {
        for j in 0..w {
            out.push((i, w - 1 - j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{TransformKind, TransformSpec};

    fn identity_spec(h: usize, w: usize) -> TransformSpec {
        TransformSpec {
            kind: TransformKind::ColorOnly,
            crop: (0.0, 0.0, w as f64, h as f64),
            flip: false,
            out_size: (h, w),
            color_ops: vec![],
            seed: 0,
        }
    }

    #[test]
    fn grid_points_centers() {
        let g = FeatureGeometry::new(8, 8, 4).unwrap();
        let pts = grid_points(&g);
        let centers: Vec<_> = pts.iter().map(|p| p.1).collect();
        assert_eq!(
            centers,
            vec![(1.5, 1.5), (5.5, 1.5), (1.5, 5.5), (5.5, 5.5)]
        );
    }

    #[test]
    fn grid_counts() {
        assert_eq!(FeatureGeometry::new(224, 224, 32).unwrap().cells(), 49);
        let g = FeatureGeometry::new(64, 64, 8).unwrap();
        assert_eq!(g.cells(), 64);
        assert_eq!(grid_points(&g)[0].1, (3.5, 3.5));
    }

    #[test]
    fn bad_stride_rejected() {
        assert!(FeatureGeometry::new(64, 64, 7).is_err());
        assert!(FeatureGeometry::new(64, 64, 0).is_err());
    }

    #[test]
    fn identity_views_give_identity_pairs() {
        let g = FeatureGeometry::new(64, 64, 8).unwrap();
        let s = identity_spec(64, 64);
        let set = build_correspondences(&s, &s, &g).unwrap();
        assert_eq!(set.valid_count(), 64);
        for p in &set.pairs {
            let (i, j) = p.grid_c;
            assert!((p.uv_sc.0 - j as f64).abs() < 1e-12);
            assert!((p.uv_sc.1 - i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_view_mirrors_columns() {
        let g = FeatureGeometry::new(64, 64, 8).unwrap();
        let c = identity_spec(64, 64);
        let mut sc = identity_spec(64, 64);
        sc.flip = true;
        let set = build_correspondences(&c, &sc, &g).unwrap();
        assert_eq!(set.valid_count(), 64);
        for p in &set.pairs {
            let (i, j) = p.grid_c;
            assert!((p.uv_sc.0 - (7 - j) as f64).abs() < 1e-9, "{:?}", p);
            assert!((p.uv_sc.1 - i as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn right_half_crop_drops_left_columns() {
        // spec_sc shows the right half of the source, zoomed to full width.
        let g = FeatureGeometry::new(64, 64, 8).unwrap();
        let c = identity_spec(64, 64);
        let mut sc = identity_spec(64, 64);
        sc.crop = (32.0, 0.0, 32.0, 64.0);
        let set = build_correspondences(&c, &sc, &g).unwrap();
        // grid column j of view c sits at source x=(j+0.5)*8-0.5; valid once
        // u=((x-32)*2+0.5)/8-0.5 >= 0, i.e. roughly the right half.
        assert!(set.valid_count() >= 24 && set.valid_count() <= 40);
        for p in &set.pairs {
            assert!(p.grid_c.1 >= 4, "left column kept: {:?}", p);
        }
    }

    #[test]
    fn monotone_in_j_without_flip() {
        let g = FeatureGeometry::new(64, 64, 8).unwrap();
        let c = identity_spec(64, 64);
        let mut sc = identity_spec(64, 64);
        sc.crop = (5.0, 3.0, 50.0, 55.0);
        let set = build_correspondences(&c, &sc, &g).unwrap();
        for i in 0..8 {
            let row: Vec<f64> = set
                .pairs
                .iter()
                .filter(|p| p.grid_c.0 == i)
                .map(|p| p.uv_sc.0)
                .collect();
            for w in row.windows(2) {
                assert!(w[1] > w[0]);
            }
        }
    }

    #[test]
    fn flip_ground_truth_involutive() {
        let g = FeatureGeometry::new(56, 56, 8).unwrap();
        let gt = flip_ground_truth(&g);
        let w = g.grid_w();
        assert_eq!(gt[0], (0, 6));
        assert_eq!(gt[3 * w + 3], (3, 3));
        for i in 0..g.grid_h() {
            for j in 0..w {
                let (i2, j2) = gt[i * w + j];
                assert_eq!(gt[i2 * w + j2], (i, j));
            }
        }
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let g = FeatureGeometry::new(64, 64, 8).unwrap();
        let a = identity_spec(64, 64);
        let b = identity_spec(32, 32);
        assert!(build_correspondences(&a, &b, &g).is_err());
    }
}
