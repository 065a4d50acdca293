//! Flat-top hexagonal tiling of the plane.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Flat-top hexagons of corner-to-corner `width`, with a hexagon centred on
/// `anchor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HexTiling {
    pub width: f64,
    pub anchor: [f64; 2],
}

impl HexTiling {
    pub fn new(width: f64, anchor: [f64; 2]) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::Config(format!("hexagon width must be positive, got {width}")));
        }
        Ok(HexTiling { width, anchor })
    }

    /// Axial coordinates of the hexagon containing `p`.
    pub fn cell(&self, p: [f64; 2]) -> (i64, i64) {
        let size = self.width / 2.0;
        let x = p[0] - self.anchor[0];
        let y = p[1] - self.anchor[1];
        let q = (2.0 / 3.0 * x) / size;
        let r = (-x / 3.0 + 3f64.sqrt() / 3.0 * y) / size;
        cube_round(q, r)
    }

    pub fn center(&self, cell: (i64, i64)) -> [f64; 2] {
        let size = self.width / 2.0;
        let (q, r) = (cell.0 as f64, cell.1 as f64);
        [
            self.anchor[0] + size * 1.5 * q,
            self.anchor[1] + size * 3f64.sqrt() * (r + q / 2.0),
        ]
    }
}

fn cube_round(q: f64, r: f64) -> (i64, i64) {
    let s = -q - r;
    let (mut rq, mut rr, rs) = (q.round(), r.round(), s.round());
    let (dq, dr, ds) = ((rq - q).abs(), (rr - r).abs(), (rs - s).abs());
    if dq > dr && dq > ds {
        rq = -rr - rs;
    } else if dr > ds {
        rr = -rq - rs;
    }
    (rq as i64, rr as i64)
}

/// Groups points by hexagon, anchored at the lower-left corner of their
/// bounding box. Blocks are ordered by cell and list point indices ascending.
pub fn hex_blocks(points: &[[f64; 2]], width: f64) -> Result<(HexTiling, Vec<Vec<usize>>)> {
    if points.is_empty() {
        return Err(Error::InvalidSize("no points to tile".into()));
    }
    if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::Config(format!("coordinate {i} is not finite")));
    }
    let anchor = points.iter().fold([f64::INFINITY; 2], |acc, p| [acc[0].min(p[0]), acc[1].min(p[1])]);
    let tiling = HexTiling::new(width, anchor)?;
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, &p) in points.iter().enumerate() {
        cells.entry(tiling.cell(p)).or_default().push(i);
    }
    Ok((tiling, cells.into_values().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_map_to_their_own_cell() {
        let t = HexTiling::new(75.0, [3.0, -2.0]).unwrap();
        for q in -4..5 {
            for r in -4..5 {
                assert_eq!(t.cell(t.center((q, r))), (q, r));
            }
        }
    }

    #[test]
    fn points_within_inradius_share_a_cell() {
        let t = HexTiling::new(2.0, [0.0, 0.0]).unwrap();
        let inradius = 3f64.sqrt() / 2.0;
        for k in 0..36 {
            let ang = f64::from(k) * std::f64::consts::TAU / 36.0;
            let p = [0.99 * inradius * ang.cos(), 0.99 * inradius * ang.sin()];
            assert_eq!(t.cell(p), (0, 0));
        }
        // just past a flat edge
        assert_ne!(t.cell([0.0, 1.01 * inradius]), (0, 0));
    }

    #[test]
    fn distant_clusters_form_two_blocks() {
        let mut pts = vec![];
        for k in 0..10 {
            pts.push([100.0 + f64::from(k), 200.0]);
            pts.push([1100.0 + f64::from(k), 200.0]);
        }
        let (_, blocks) = hex_blocks(&pts, 75.0).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].len(), 10);
    }

    #[test]
    fn single_point_cloud_is_one_block() {
        let (t, blocks) = hex_blocks(&[[5.0, 5.0]; 7], 75.0).unwrap();
        assert_eq!(blocks, vec![(0..7).collect::<Vec<_>>()]);
        assert_eq!(t.anchor, [5.0, 5.0]);
        assert!(HexTiling::new(0.0, [0.0, 0.0]).is_err());
    }
}
