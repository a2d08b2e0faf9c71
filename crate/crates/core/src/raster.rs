//! Rectangular rasterization of crash points and queen-contiguity weights.
//!
//! Coordinates are projected onto a local equirectangular plane whose
//! reference latitude is the centre of the grid extent. Cells are half-open
//! `[lower, upper)` in both axes, except that points lying exactly on the
//! upper edge of the extent fall into the last row/column.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::ingest::CrashRecord;

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Default cell edge, chosen so that each cell covers about 1.86 km².
pub const DEFAULT_CELL_SIZE_KM: f64 = 1.364;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("invalid grid spec: {0}")]
    Spec(String),
    #[error("duplicate cell at row {row}, col {col}")]
    DuplicateCell { row: usize, col: usize },
}

/// Grid anchored at its south-west corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_size_km: f64,
    pub n_rows: usize,
    pub n_cols: usize,
}

fn km_per_degree() -> f64 {
    EARTH_RADIUS_KM * std::f64::consts::PI / 180.0
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), RasterError> {
        if !(self.cell_size_km > 0.0) || !self.cell_size_km.is_finite() {
            return Err(RasterError::Spec(format!(
                "cell_size_km must be positive, got {}",
                self.cell_size_km
            )));
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(RasterError::Spec(format!(
                "grid has zero area ({} x {})",
                self.n_rows, self.n_cols
            )));
        }
        if !(-90.0..=90.0).contains(&self.origin_lat) || !(-180.0..=180.0).contains(&self.origin_lon) {
            return Err(RasterError::Spec("origin outside WGS84 bounds".into()));
        }
        let half_height = self.n_rows as f64 * self.cell_size_km / km_per_degree() / 2.0;
        if (self.origin_lat + half_height).abs() >= 90.0 {
            return Err(RasterError::Spec("grid centre reaches a pole".into()));
        }
        Ok(())
    }

    /// Reference latitude of the projection (centre of the extent).
    pub fn reference_lat(&self) -> f64 {
        self.origin_lat + self.n_rows as f64 * self.cell_size_km / km_per_degree() / 2.0
    }

    fn km_per_degree_lon(&self) -> f64 {
        km_per_degree() * self.reference_lat().to_radians().cos()
    }

    /// Planar offset (east, north) in km from the origin.
    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        let x = (lon - self.origin_lon) * self.km_per_degree_lon();
        let y = (lat - self.origin_lat) * km_per_degree();
        (x, y)
    }

    /// Inverse of [`GridSpec::project`], returning (lat, lon).
    pub fn unproject(&self, x_km: f64, y_km: f64) -> (f64, f64) {
        let lat = self.origin_lat + y_km / km_per_degree();
        let lon = self.origin_lon + x_km / self.km_per_degree_lon();
        (lat, lon)
    }

    fn bin(coord: f64, cell: f64, n: usize) -> Option<usize> {
        let extent = cell * n as f64;
        if !(coord >= 0.0 && coord <= extent) {
            return None;
        }
        Some(((coord / cell).floor() as usize).min(n - 1))
    }

    /// Cell `(row, col)` containing the point, or `None` outside the extent.
    pub fn locate(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let (x, y) = self.project(lat, lon);
        let row = Self::bin(y, self.cell_size_km, self.n_rows)?;
        let col = Self::bin(x, self.cell_size_km, self.n_cols)?;
        Some((row, col))
    }

    /// Cell corners as (lon, lat), counter-clockwise from south-west, closed.
    pub fn cell_ring(&self, row: usize, col: usize) -> [(f64, f64); 5] {
        let s = self.cell_size_km;
        let (x0, y0) = (col as f64 * s, row as f64 * s);
        let corner = |x: f64, y: f64| {
            let (lat, lon) = self.unproject(x, y);
            (lon, lat)
        };
        let sw = corner(x0, y0);
        [sw, corner(x0 + s, y0), corner(x0 + s, y0 + s), corner(x0, y0 + s), sw]
    }

    /// Smallest grid with the given cell size covering every record.
    pub fn covering(records: &[CrashRecord], cell_size_km: f64) -> Result<GridSpec, RasterError> {
        if records.is_empty() {
            return Err(RasterError::Spec("cannot derive an extent from zero records".into()));
        }
        let (mut lat0, mut lat1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lon0, mut lon1) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in records {
            lat0 = lat0.min(r.lat);
            lat1 = lat1.max(r.lat);
            lon0 = lon0.min(r.lon);
            lon1 = lon1.max(r.lon);
        }
        let n_rows = (((lat1 - lat0) * km_per_degree() / cell_size_km).floor() as usize) + 1;
        let mut spec = GridSpec {
            origin_lat: lat0,
            origin_lon: lon0,
            cell_size_km,
            n_rows,
            n_cols: 1,
        };
        spec.validate()?;
        let (width, _) = spec.project(lat0, lon1);
        spec.n_cols = ((width / cell_size_km).floor() as usize) + 1;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterCell {
    pub row: usize,
    pub col: usize,
    pub crash_count: usize,
    /// Sum of equivalent-fatality weights of the contained crashes.
    pub attribute: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Rasterized {
    /// Non-empty cells in (row, col) order.
    pub cells: Vec<RasterCell>,
    /// Per-record cell, aligned with the input; `None` when out of extent.
    pub assignment: Vec<Option<(usize, usize)>>,
    /// Indices of records outside the grid extent.
    pub out_of_extent: Vec<usize>,
}

impl Rasterized {
    pub fn total_crashes(&self) -> usize {
        self.cells.iter().map(|c| c.crash_count).sum()
    }

    pub fn total_attribute(&self) -> f64 {
        self.cells.iter().map(|c| c.attribute).sum()
    }

    pub fn attributes(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.attribute).collect()
    }
}

/// Bin records into grid cells, dropping cells without crashes.
pub fn rasterize(records: &[CrashRecord], spec: &GridSpec) -> Result<Rasterized, RasterError> {
    spec.validate()?;
    let mut acc: BTreeMap<(usize, usize), (usize, f64)> = BTreeMap::new();
    let mut assignment = Vec::with_capacity(records.len());
    let mut out_of_extent = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let cell = spec.locate(rec.lat, rec.lon);
        match cell {
            Some(key) => {
                let e = acc.entry(key).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += rec.max_injury.equivalent_fatality();
            }
            None => out_of_extent.push(i),
        }
        assignment.push(cell);
    }
    let cells = acc
        .into_iter()
        .map(|((row, col), (crash_count, attribute))| RasterCell {
            row,
            col,
            crash_count,
            attribute,
        })
        .collect();
    Ok(Rasterized {
        cells,
        assignment,
        out_of_extent,
    })
}

/// Sparse symmetric binary adjacency with an empty diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialWeights {
    neighbors: Vec<Vec<usize>>,
}

impl SpatialWeights {
    /// Build from adjacency lists; lists are sorted and deduplicated, self
    /// loops dropped, and the relation symmetrized.
    pub fn from_neighbors(mut neighbors: Vec<Vec<usize>>) -> Self {
        let n = neighbors.len();
        let mut extra: Vec<(usize, usize)> = Vec::new();
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                assert!(j < n, "neighbor index {j} out of range for {n} units");
                extra.push((j, i));
            }
        }
        for (j, i) in extra {
            neighbors[j].push(i);
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.retain(|&j| j != i);
            list.sort_unstable();
            list.dedup();
        }
        SpatialWeights { neighbors }
    }

    /// Every unit adjacent to every other.
    pub fn complete(n: usize) -> Self {
        SpatialWeights {
            neighbors: (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Sum of all weights (each undirected link counted twice).
    pub fn s0(&self) -> f64 {
        self.neighbors.iter().map(Vec::len).sum::<usize>() as f64
    }
}

/// Queen contiguity between the given cells: two cells are neighbours when
/// their row and column indices each differ by at most one.
pub fn queen_weights(cells: &[RasterCell]) -> Result<SpatialWeights, RasterError> {
    let mut index: HashMap<(usize, usize), usize> = HashMap::with_capacity(cells.len());
    for (i, c) in cells.iter().enumerate() {
        if index.insert((c.row, c.col), i).is_some() {
            return Err(RasterError::DuplicateCell { row: c.row, col: c.col });
        }
    }
    let neighbors = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut list = Vec::with_capacity(8);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (r, k) = (c.row as i64 + dr, c.col as i64 + dc);
                    if r < 0 || k < 0 {
                        continue;
                    }
                    if let Some(&j) = index.get(&(r as usize, k as usize)) {
                        debug_assert_ne!(i, j);
                        list.push(j);
                    }
                }
            }
            list.sort_unstable();
            list
        })
        .collect();
    Ok(SpatialWeights { neighbors })
}

fn polygon_feature(spec: &GridSpec, row: usize, col: usize, properties: Value) -> Value {
    let ring: Vec<[f64; 2]> = spec
        .cell_ring(row, col)
        .iter()
        .map(|&(lon, lat)| [lon, lat])
        .collect();
    json!({
        "type": "Feature",
        "geometry": { "type": "Polygon", "coordinates": [ring] },
        "properties": properties,
    })
}

/// GeoJSON FeatureCollection of cells; `properties` supplies each cell's
/// property object.
pub fn cells_geojson_with<F>(spec: &GridSpec, cells: &[RasterCell], mut properties: F) -> Value
where
    F: FnMut(usize, &RasterCell) -> Value,
{
    let features: Vec<Value> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| polygon_feature(spec, c.row, c.col, properties(i, c)))
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

/// GeoJSON of retained cells with `{row, col, crash_count, attribute}`.
pub fn cells_geojson(spec: &GridSpec, cells: &[RasterCell]) -> Value {
    cells_geojson_with(spec, cells, |_, c| {
        json!({
            "row": c.row,
            "col": c.col,
            "crash_count": c.crash_count,
            "attribute": c.attribute,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::KabcoLevel;

    fn spec(n_rows: usize, n_cols: usize) -> GridSpec {
        GridSpec {
            origin_lat: 40.0,
            origin_lon: -78.0,
            cell_size_km: 1.0,
            n_rows,
            n_cols,
        }
    }

    fn rec_at(spec: &GridSpec, x: f64, y: f64, k: KabcoLevel) -> CrashRecord {
        let (lat, lon) = spec.unproject(x, y);
        CrashRecord {
            id: format!("{x}:{y}"),
            lat,
            lon,
            max_injury: k,
            covariates: Default::default(),
        }
    }

    fn full_grid(n_rows: usize, n_cols: usize) -> Vec<RasterCell> {
        let mut v = Vec::new();
        for row in 0..n_rows {
            for col in 0..n_cols {
                v.push(RasterCell { row, col, crash_count: 1, attribute: 1.0 });
            }
        }
        v
    }

    #[test]
    fn single_point_at_centre() {
        let s = spec(2, 2);
        let r = rasterize(&[rec_at(&s, 0.9, 0.9, KabcoLevel::O)], &s).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.cells[0].crash_count, 1);
    }

    #[test]
    fn same_cell_attribute_sums_weights() {
        let s = spec(2, 2);
        let recs = [rec_at(&s, 0.2, 0.3, KabcoLevel::K), rec_at(&s, 0.7, 0.6, KabcoLevel::O)];
        let r = rasterize(&recs, &s).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.cells[0].crash_count, 2);
        assert!((r.cells[0].attribute - 1.0049).abs() < 1e-12);
    }

    #[test]
    fn half_open_boundaries() {
        let s = spec(2, 2);
        assert_eq!(GridSpec::bin(1.0, 1.0, 2), Some(1));
        assert_eq!(GridSpec::bin(0.0, 1.0, 2), Some(0));
        // upper extent edge goes to the last bin
        assert_eq!(GridSpec::bin(2.0, 1.0, 2), Some(1));
        assert_eq!(GridSpec::bin(2.0000001, 1.0, 2), None);
        assert_eq!(GridSpec::bin(-1e-9, 1.0, 2), None);
        let (lat, lon) = s.unproject(0.5, 1.5);
        assert_eq!(s.locate(lat, lon), Some((1, 0)));
    }

    #[test]
    fn out_of_extent_reported() {
        let s = spec(2, 2);
        let recs = [rec_at(&s, 0.5, 0.5, KabcoLevel::B), rec_at(&s, 5.0, 0.5, KabcoLevel::B)];
        let r = rasterize(&recs, &s).unwrap();
        assert_eq!(r.out_of_extent, vec![1]);
        assert_eq!(r.total_crashes(), 1);
        assert_eq!(r.assignment, vec![Some((0, 0)), None]);
    }

    #[test]
    fn empty_input_and_zero_area() {
        let s = spec(2, 2);
        assert!(rasterize(&[], &s).unwrap().cells.is_empty());
        assert!(matches!(rasterize(&[], &spec(0, 3)), Err(RasterError::Spec(_))));
        let mut bad = spec(2, 2);
        bad.cell_size_km = 0.0;
        assert!(rasterize(&[], &bad).is_err());
    }

    #[test]
    fn projection_round_trip() {
        let s = spec(100, 200);
        let (lat, lon) = s.unproject(123.4, 56.7);
        let (x, y) = s.project(lat, lon);
        assert!((x - 123.4).abs() < 1e-9 && (y - 56.7).abs() < 1e-9);
    }

    #[test]
    fn queen_degrees_on_full_grid() {
        let cells = full_grid(3, 3);
        let w = queen_weights(&cells).unwrap();
        assert_eq!(w.degree(4), 8);
        assert_eq!(w.degree(0), 3);
        assert_eq!(w.degree(1), 5);
        assert_eq!(w.s0(), 40.0);
    }

    #[test]
    fn distant_cells_have_no_neighbors() {
        let cells = vec![
            RasterCell { row: 0, col: 0, crash_count: 1, attribute: 0.1 },
            RasterCell { row: 5, col: 5, crash_count: 1, attribute: 0.1 },
        ];
        let w = queen_weights(&cells).unwrap();
        assert_eq!(w.degree(0), 0);
        assert_eq!(w.degree(1), 0);
    }

    #[test]
    fn duplicate_cells_rejected() {
        let mut cells = full_grid(1, 2);
        cells[1].col = 0;
        assert_eq!(
            queen_weights(&cells).unwrap_err(),
            RasterError::DuplicateCell { row: 0, col: 0 }
        );
    }

    #[test]
    fn covering_grid_contains_all_records() {
        let s = spec(10, 10);
        let recs: Vec<_> = [(0.1, 0.1), (7.3, 2.2), (3.0, 9.9)]
            .iter()
            .map(|&(x, y)| rec_at(&s, x, y, KabcoLevel::C))
            .collect();
        let g = GridSpec::covering(&recs, 1.0).unwrap();
        let r = rasterize(&recs, &g).unwrap();
        assert!(r.out_of_extent.is_empty());
        assert_eq!(r.total_crashes(), 3);
    }

    #[test]
    fn geojson_shape() {
        let s = spec(2, 2);
        let cells = full_grid(1, 1);
        let gj = cells_geojson(&s, &cells);
        assert_eq!(gj["type"], "FeatureCollection");
        let ring = gj["features"][0]["geometry"]["coordinates"][0].as_array().unwrap();
        assert_eq!(ring.len(), 5);
        assert_eq!(ring[0], ring[4]);
        assert_eq!(gj["features"][0]["properties"]["crash_count"], 1);
    }
}
