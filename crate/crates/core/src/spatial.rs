//! Uniform hash grid for fixed-radius neighbor queries.

use std::collections::HashMap;

use crate::geometry::Point3;

type Cell = (i64, i64, i64);

/// Buckets points into cubic cells of side `radius`, so a radius query only
/// needs the 27 cells around the query point.
pub struct RadiusGrid<'a> {
    points: &'a [Point3],
    radius: f64,
    inv_cell: f64,
    cells: HashMap<Cell, Vec<u32>>,
}

impl<'a> RadiusGrid<'a> {
    pub fn new(points: &'a [Point3], radius: f64) -> Self {
        assert!(radius > 0.0, "radius must be positive");
        let inv_cell = 1.0 / radius;
        let mut cells: HashMap<Cell, Vec<u32>> = HashMap::with_capacity(points.len() / 4 + 1);
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(*p, inv_cell)).or_default().push(i as u32);
        }
        Self { points, radius, inv_cell, cells }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Calls `f(index)` for every point within `radius` of `q` (inclusive).
    pub fn for_each_within(&self, q: Point3, mut f: impl FnMut(usize)) {
        let r2 = self.radius * self.radius;
        let (cx, cy, cz) = cell_of(q, self.inv_cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in bucket {
                            if self.points[j as usize].distance_squared(q) <= r2 {
                                f(j as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn within(&self, q: Point3) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(q, |j| out.push(j));
        out.sort_unstable();
        out
    }
}

#[inline]
fn cell_of(p: Point3, inv_cell: f64) -> Cell {
    ((p.x * inv_cell).floor() as i64, (p.y * inv_cell).floor() as i64, (p.z * inv_cell).floor() as i64)
}
