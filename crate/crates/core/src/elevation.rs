//! Body-centric 2.5D elevation map.
//!
//! Map points are projected along gravity into an `M × M` grid centered on
//! the body. Each observed cell keeps the highest point that falls into it;
//! empty cells copy the nearest observed cell (Euclidean distance between
//! cell centers, ties broken by the lower row-major index).

use std::io::Write;
use std::sync::Arc;

use nalgebra::{Unit, Vector2, Vector3};
use thiserror::Error;

use crate::map::GlobalMap;

/// Side length of the default grid, in meters.
pub const DEFAULT_EXTENT: f64 = 2.0;
/// Cells per side of the default grid.
pub const DEFAULT_CELLS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum ElevationError {
    #[error("elevation grid needs at least 2 cells per side, got {0}")]
    TooFewCells(usize),
    #[error("elevation extent must be positive, got {0}")]
    NonPositiveExtent(f64),
}

/// Orthonormal frame `(e1, e2, up)` with `up = −gravity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GravityFrame {
    pub e1: Vector3<f64>,
    pub e2: Vector3<f64>,
    pub up: Vector3<f64>,
}

impl GravityFrame {
    pub fn new(gravity_dir: &Unit<Vector3<f64>>) -> Self {
        let up = -gravity_dir.into_inner();
        let seed = if up.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = (seed - up * up.dot(&seed)).normalize();
        let e2 = up.cross(&e1);
        Self { e1, e2, up }
    }

    pub fn horizontal(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.e1.dot(p), self.e2.dot(p))
    }

    pub fn height(&self, p: &Vector3<f64>) -> f64 {
        self.up.dot(p)
    }

    pub fn point(&self, xy: &Vector2<f64>, height: f64) -> Vector3<f64> {
        self.e1 * xy.x + self.e2 * xy.y + self.up * height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElevationMap {
    pub center_xy: Vector2<f64>,
    pub cell_size: f64,
    pub cells: usize,
    /// Row-major heights; row index runs along `e2`, column along `e1`.
    pub heights: Vec<f64>,
    pub valid: Vec<bool>,
    pub gravity_dir: Unit<Vector3<f64>>,
    pub frame: GravityFrame,
}

impl ElevationMap {
    pub fn extent(&self) -> f64 {
        self.cell_size * self.cells as f64
    }

    fn origin(&self) -> Vector2<f64> {
        self.center_xy - Vector2::repeat(0.5 * self.extent())
    }

    pub fn cell_center(&self, col: usize, row: usize) -> Vector2<f64> {
        self.origin() + Vector2::new((col as f64 + 0.5) * self.cell_size, (row as f64 + 0.5) * self.cell_size)
    }

    pub fn height_at(&self, col: usize, row: usize) -> f64 {
        self.heights[row * self.cells + col]
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.valid[row * self.cells + col]
    }

    /// Cell containing a horizontal position, if inside the grid.
    pub fn cell_of(&self, xy: &Vector2<f64>) -> Option<(usize, usize)> {
        let rel = (xy - self.origin()) / self.cell_size;
        let (c, r) = (rel.x.floor(), rel.y.floor());
        let m = self.cells as f64;
        if c >= 0.0 && r >= 0.0 && c < m && r < m {
            Some((c as usize, r as usize))
        } else {
            None
        }
    }

    /// Bilinear interpolation between cell centers; positions outside the
    /// grid are clamped to the border cells.
    pub fn query_height(&self, xy: &Vector2<f64>) -> f64 {
        let rel = (xy - self.origin()) / self.cell_size - Vector2::repeat(0.5);
        let max = (self.cells - 1) as f64;
        let fx = rel.x.clamp(0.0, max);
        let fy = rel.y.clamp(0.0, max);
        let c0 = (fx.floor() as usize).min(self.cells - 2);
        let r0 = (fy.floor() as usize).min(self.cells - 2);
        let tx = fx - c0 as f64;
        let ty = fy - r0 as f64;
        let h00 = self.height_at(c0, r0);
        let h10 = self.height_at(c0 + 1, r0);
        let h01 = self.height_at(c0, r0 + 1);
        let h11 = self.height_at(c0 + 1, r0 + 1);
        let lo = h00 + tx * (h10 - h00);
        let hi = h01 + tx * (h11 - h01);
        lo + ty * (hi - lo)
    }

    /// Terrain height under a world point.
    pub fn query_world(&self, p: &Vector3<f64>) -> f64 {
        self.query_height(&self.frame.horizontal(p))
    }

    /// Plain-text grid: one row per line, heights in meters with 6 decimals.
    pub fn write_grid<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in 0..self.cells {
            let line: Vec<String> =
                (0..self.cells).map(|col| format!("{:.6}", self.height_at(col, row))).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Builds the body-centric map from the points of `map` around
/// `body_center`. When no point lands in the crop every cell is set to
/// `fallback_height` and marked invalid.
pub fn build_elevation_map(
    map: &GlobalMap,
    body_center: &Vector3<f64>,
    gravity_dir: &Unit<Vector3<f64>>,
    extent: f64,
    cells: usize,
    fallback_height: f64,
) -> Result<ElevationMap, ElevationError> {
    if cells < 2 {
        return Err(ElevationError::TooFewCells(cells));
    }
    if !(extent > 0.0) {
        return Err(ElevationError::NonPositiveExtent(extent));
    }
    let frame = GravityFrame::new(gravity_dir);
    let n = cells * cells;
    let mut elev = ElevationMap {
        center_xy: frame.horizontal(body_center),
        cell_size: extent / cells as f64,
        cells,
        heights: vec![f64::NEG_INFINITY; n],
        valid: vec![false; n],
        gravity_dir: *gravity_dir,
        frame,
    };
    for p in &map.points {
        if let Some((c, r)) = elev.cell_of(&frame.horizontal(p)) {
            let i = r * cells + c;
            let h = frame.height(p);
            if h > elev.heights[i] {
                elev.heights[i] = h;
            }
            elev.valid[i] = true;
        }
    }
    if !elev.valid.iter().any(|v| *v) {
        elev.heights.iter_mut().for_each(|h| *h = fallback_height);
        return Ok(elev);
    }
    fill_holes(&mut elev);
    Ok(elev)
}

fn fill_holes(elev: &mut ElevationMap) {
    let m = elev.cells as i64;
    let filled: Vec<f64> = (0..elev.heights.len())
        .map(|i| {
            if elev.valid[i] {
                return elev.heights[i];
            }
            let (c, r) = ((i as i64) % m, (i as i64) / m);
            let mut best: Option<(i64, usize)> = None;
            let mut radius = 1i64;
            loop {
                for (dc, dr) in ring(radius) {
                    let (cc, rr) = (c + dc, r + dr);
                    if cc < 0 || rr < 0 || cc >= m || rr >= m {
                        continue;
                    }
                    let j = (rr * m + cc) as usize;
                    if !elev.valid[j] {
                        continue;
                    }
                    let d2 = dc * dc + dr * dr;
                    best = match best {
                        Some((bd, bj)) if bd < d2 || (bd == d2 && bj < j) => Some((bd, bj)),
                        _ => Some((d2, j)),
                    };
                }
                // every cell on ring k is at least k away
                let next = radius + 1;
                match best {
                    Some((bd, _)) if next * next > bd => break,
                    _ if radius > 2 * m => break,
                    _ => radius = next,
                }
            }
            elev.heights[best.expect("at least one valid cell").1]
        })
        .collect();
    elev.heights = filled;
}

/// Offsets on the square ring of Chebyshev radius `r`.
fn ring(r: i64) -> impl Iterator<Item = (i64, i64)> {
    (-r..=r).flat_map(move |dr| {
        let edge = dr == -r || dr == r;
        let cols: Vec<i64> = if edge { (-r..=r).collect() } else { vec![-r, r] };
        cols.into_iter().map(move |dc| (dc, dr))
    })
}

/// Cached elevation map that is rebuilt only at keyframes.
#[derive(Clone, Debug)]
pub struct ElevationState {
    pub extent: f64,
    pub cells: usize,
    pub gravity_dir: Unit<Vector3<f64>>,
    /// Height used when the crop is empty (last known contact height).
    pub ground_estimate: f64,
    current: Option<Arc<ElevationMap>>,
}

impl ElevationState {
    pub fn new(extent: f64, cells: usize, gravity_dir: Unit<Vector3<f64>>, ground_estimate: f64) -> Self {
        Self { extent, cells, gravity_dir, ground_estimate, current: None }
    }

    pub fn current(&self) -> Option<Arc<ElevationMap>> {
        self.current.clone()
    }

    /// Rebuilds from `map` at a keyframe (or when nothing is cached yet);
    /// otherwise returns the cached map unchanged.
    pub fn on_frame(
        &mut self,
        is_keyframe: bool,
        map: &GlobalMap,
        body_center: &Vector3<f64>,
    ) -> Result<Arc<ElevationMap>, ElevationError> {
        match &self.current {
            Some(cur) if !is_keyframe => Ok(cur.clone()),
            _ => self.refresh_on_keyframe(map, body_center),
        }
    }

    pub fn refresh_on_keyframe(
        &mut self,
        map: &GlobalMap,
        body_center: &Vector3<f64>,
    ) -> Result<Arc<ElevationMap>, ElevationError> {
        let built = Arc::new(build_elevation_map(
            map,
            body_center,
            &self.gravity_dir,
            self.extent,
            self.cells,
            self.ground_estimate,
        )?);
        self.current = Some(built.clone());
        Ok(built)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn down() -> Unit<Vector3<f64>> {
        Unit::new_normalize(Vector3::new(0.0, 0.0, -1.0))
    }

    fn flat_map(h: f64, spacing: f64, half: f64) -> GlobalMap {
        let n = (2.0 * half / spacing).round() as i64;
        let mut pts = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                pts.push(Vector3::new(-half + i as f64 * spacing, -half + j as f64 * spacing, h));
            }
        }
        GlobalMap::from_points(pts)
    }

    #[test]
    fn default_grid_resolution() {
        let e = build_elevation_map(&GlobalMap::new(), &Vector3::zeros(), &down(), DEFAULT_EXTENT, DEFAULT_CELLS, 0.0)
            .unwrap();
        assert!((e.cell_size - 0.02).abs() < 1e-15);
    }

    #[test]
    fn flat_ground_is_fully_valid() {
        let map = flat_map(0.0, 0.005, 1.2);
        let e = build_elevation_map(&map, &Vector3::new(0.0, 0.0, 0.9), &down(), 2.0, 100, 5.0).unwrap();
        assert!(e.valid.iter().all(|v| *v));
        assert!(e.heights.iter().all(|h| *h == 0.0));
    }

    #[test]
    fn max_rule_keeps_highest_point() {
        let map = GlobalMap::from_points(vec![Vector3::new(0.005, 0.005, 0.1), Vector3::new(0.006, 0.004, 0.3)]);
        let e = build_elevation_map(&map, &Vector3::zeros(), &down(), 2.0, 100, 0.0).unwrap();
        let (c, r) = e.cell_of(&Vector2::new(0.005, 0.005)).unwrap();
        assert_eq!(e.height_at(c, r), 0.3);
        assert!(e.is_valid(c, r));
        // only one observed cell, so every hole copies it
        assert!(e.heights.iter().all(|h| *h == 0.3));
        assert_eq!(e.valid.iter().filter(|v| **v).count(), 1);
    }

    #[test]
    fn hole_fill_tie_break_prefers_lower_index() {
        // two observed cells equidistant from the hole between them
        let mut map = GlobalMap::new();
        map.push(Vector3::new(-0.75, -0.75, 1.0), 1.0); // cell (0,0) of a 2x... grid
        let e_cells = 4;
        let e = build_elevation_map(&map, &Vector3::zeros(), &down(), 2.0, e_cells, 0.0).unwrap();
        assert!(e.is_valid(0, 0));
        let mut map2 = map.clone();
        map2.push(Vector3::new(0.25, -0.75, 2.0), 1.0); // cell (2,0)
        let e2 = build_elevation_map(&map2, &Vector3::zeros(), &down(), 2.0, e_cells, 0.0).unwrap();
        // cell (1,0) is one cell from both; lower index (0,0) wins
        assert_eq!(e2.height_at(1, 0), 1.0);
        assert_eq!(e2.height_at(3, 0), 2.0);
    }

    #[test]
    fn empty_crop_uses_fallback() {
        let map = GlobalMap::from_points(vec![Vector3::new(10.0, 10.0, 1.0)]);
        let e = build_elevation_map(&map, &Vector3::zeros(), &down(), 2.0, 10, -0.25).unwrap();
        assert!(e.heights.iter().all(|h| *h == -0.25));
        assert!(e.valid.iter().all(|v| !*v));
    }

    #[test]
    fn bilinear_query() {
        let mut map = GlobalMap::new();
        map.push(Vector3::new(-0.5, 0.0, 0.0), 1.0);
        map.push(Vector3::new(0.5, 0.0, 0.2), 1.0);
        let e = build_elevation_map(&map, &Vector3::zeros(), &down(), 2.0, 2, 0.0).unwrap();
        // cells: col 0 center -0.5, col 1 center 0.5
        assert_eq!(e.query_height(&e.cell_center(0, 0)), e.height_at(0, 0));
        assert!((e.query_height(&Vector2::new(0.0, -0.5)) - 0.1).abs() < 1e-12);
        assert_eq!(e.query_height(&Vector2::new(5.0, -5.0)), e.height_at(1, 0));
    }

    #[test]
    fn rejects_bad_grid() {
        assert_eq!(
            build_elevation_map(&GlobalMap::new(), &Vector3::zeros(), &down(), 2.0, 1, 0.0).unwrap_err(),
            ElevationError::TooFewCells(1)
        );
    }

    #[test]
    fn cache_only_refreshes_at_keyframes() {
        let map = flat_map(0.0, 0.02, 1.5);
        let mut st = ElevationState::new(2.0, 50, down(), 0.0);
        let a = st.on_frame(true, &map, &Vector3::zeros()).unwrap();
        let b = st.on_frame(false, &map, &Vector3::new(0.3, 0.0, 0.0)).unwrap();
        let c = st.on_frame(false, &GlobalMap::new(), &Vector3::zeros()).unwrap();
        assert!(Arc::ptr_eq(&a, &b) && Arc::ptr_eq(&b, &c));
        let d = st.on_frame(true, &map, &Vector3::zeros()).unwrap();
        assert_eq!(d.heights, a.heights);
    }

    #[test]
    fn grid_text_export() {
        let map = flat_map(0.125, 0.05, 1.0);
        let e = build_elevation_map(&map, &Vector3::zeros(), &down(), 1.0, 3, 0.0).unwrap();
        let mut buf = Vec::new();
        e.write_grid(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap(), "0.125000 0.125000 0.125000");
    }
}
