//! Equirectangular grid geometry, latitude weighting, and gridded field
//! containers.
//!
//! Latitudes are cell centers (no rows at the exact poles), stored
//! north-to-south; longitudes run west-to-east from 0 degrees. Field
//! payloads are f32 (matching the on-disk format); score arithmetic is
//! done in f64 throughout the crate.

use crate::error::{GemError, Result};

/// Geometry of an equirectangular latitude-longitude grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    nlat: usize,
    nlon: usize,
    lat_centers: Vec<f64>,
    lon_centers: Vec<f64>,
}

/// Build a cell-center grid: `lat_i = 90 - (i+0.5) * (180/nlat)`,
/// `lon_j = j * (360/nlon)`.
pub fn make_grid(nlat: usize, nlon: usize) -> Result<GridSpec> {
    if nlat < 4 || nlon < 8 || nlon % 2 != 0 {
        return Err(GemError::DimensionTooSmall { nlat, nlon });
    }
    let dlat = 180.0 / nlat as f64;
    let dlon = 360.0 / nlon as f64;
    let lat_centers = (0..nlat).map(|i| 90.0 - (i as f64 + 0.5) * dlat).collect();
    let lon_centers = (0..nlon).map(|j| j as f64 * dlon).collect();
    Ok(GridSpec {
        nlat,
        nlon,
        lat_centers,
        lon_centers,
    })
}

impl GridSpec {
    pub fn nlat(&self) -> usize {
        self.nlat
    }

    pub fn nlon(&self) -> usize {
        self.nlon
    }

    /// Cells per channel.
    pub fn ncell(&self) -> usize {
        self.nlat * self.nlon
    }

    /// Latitudes in degrees, decreasing from north.
    pub fn lat_centers(&self) -> &[f64] {
        &self.lat_centers
    }

    /// Longitudes in degrees in [0, 360).
    pub fn lon_centers(&self) -> &[f64] {
        &self.lon_centers
    }

    pub fn cell_index(&self, lat: usize, lon: usize) -> usize {
        debug_assert!(lat < self.nlat && lon < self.nlon);
        lat * self.nlon + lon
    }
}

/// A multi-channel snapshot on a grid. Data is indexed
/// `[channel][lat][lon]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    channels: Vec<String>,
    data: Vec<f32>,
    time_tag: i64,
}

impl Field {
    /// Construct a field, validating finiteness and channel-name uniqueness.
    pub fn new(grid: GridSpec, channels: Vec<String>, data: Vec<f32>, time_tag: i64) -> Result<Self> {
        if data.len() != channels.len() * grid.ncell() {
            return Err(GemError::ShapeMismatch(format!(
                "field data has {} values, expected {} channels x {} cells",
                data.len(),
                channels.len(),
                grid.ncell()
            )));
        }
        for (c, name) in channels.iter().enumerate() {
            if channels[..c].iter().any(|n| n == name) {
                return Err(GemError::ChannelMismatch(format!(
                    "duplicate channel name {name:?}"
                )));
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(GemError::NonFinite {
                context: format!("field value at flat index {pos}"),
            });
        }
        Ok(Field {
            grid,
            channels,
            data,
            time_tag,
        })
    }

    pub fn zeros(grid: GridSpec, channels: Vec<String>, time_tag: i64) -> Self {
        let n = channels.len() * grid.ncell();
        Field {
            grid,
            channels,
            data: vec![0.0; n],
            time_tag,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn nchan(&self) -> usize {
        self.channels.len()
    }

    /// Hours since epoch.
    pub fn time_tag(&self) -> i64 {
        self.time_tag
    }

    pub fn set_time_tag(&mut self, t: i64) {
        self.time_tag = t;
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| GemError::MissingChannel(name.to_string()))
    }

    /// Flat `[lat][lon]` slice for one channel.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.grid.ncell();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.grid.ncell();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel_by_name(&self, name: &str) -> Result<&[f32]> {
        Ok(self.channel(self.channel_index(name)?))
    }

    pub fn get(&self, c: usize, lat: usize, lon: usize) -> f32 {
        self.data[c * self.grid.ncell() + self.grid.cell_index(lat, lon)]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Nonnegative per-cell weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    grid: GridSpec,
    w: Vec<f64>,
}

impl WeightField {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }
}

/// Area weights proportional to cos(latitude), identical along each row,
/// normalized to sum 1.
pub fn latitude_weights(grid: &GridSpec) -> WeightField {
    let nlat = grid.nlat();
    let nlon = grid.nlon();
    let row: Vec<f64> = grid
        .lat_centers()
        .iter()
        .map(|lat| lat.to_radians().cos())
        .collect();
    let total: f64 = row.iter().sum::<f64>() * nlon as f64;
    let mut w = Vec::with_capacity(nlat * nlon);
    for i in 0..nlat {
        let v = row[i] / total;
        w.extend(std::iter::repeat(v).take(nlon));
    }
    WeightField {
        grid: grid.clone(),
        w,
    }
}

/// Weighted mean of one channel, optionally restricted to a boolean mask
/// over cells.
pub fn area_weighted_mean(
    field: &Field,
    weights: &WeightField,
    channel: &str,
    mask: Option<&[bool]>,
) -> Result<f64> {
    if field.grid() != weights.grid() {
        return Err(GemError::GridMismatch(
            "field and weight grids differ".to_string(),
        ));
    }
    let c = field.channel_index(channel)?;
    let vals = field.channel(c);
    weighted_mean_f64(
        vals.iter().map(|&v| v as f64),
        weights.values().iter().copied(),
        mask,
    )
}

/// Core weighted-mean kernel shared by scoring paths.
pub(crate) fn weighted_mean_f64(
    values: impl Iterator<Item = f64>,
    weights: impl Iterator<Item = f64>,
    mask: Option<&[bool]>,
) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    match mask {
        None => {
            for (v, w) in values.zip(weights) {
                num += w * v;
                den += w;
            }
        }
        Some(m) => {
            for (k, (v, w)) in values.zip(weights).enumerate() {
                if m[k] {
                    num += w * v;
                    den += w;
                }
            }
        }
    }
    if den <= 0.0 {
        return Err(GemError::EmptyMask);
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cell_center_grid_4x8() {
        let g = make_grid(4, 8).unwrap();
        assert_eq!(g.lat_centers(), &[67.5, 22.5, -22.5, -67.5]);
        let expected: Vec<f64> = (0..8).map(|j| 45.0 * j as f64).collect();
        assert_eq!(g.lon_centers(), expected.as_slice());
    }

    #[test]
    fn grid_rejects_small_dims() {
        assert!(matches!(
            make_grid(2, 8),
            Err(GemError::DimensionTooSmall { .. })
        ));
        assert!(matches!(
            make_grid(4, 6),
            Err(GemError::DimensionTooSmall { .. })
        ));
        assert!(matches!(
            make_grid(4, 9),
            Err(GemError::DimensionTooSmall { .. })
        ));
    }

    #[test]
    fn grid_32x64_first_latitude() {
        let g = make_grid(32, 64).unwrap();
        assert_abs_diff_eq!(g.lat_centers()[0], 87.1875, epsilon = 1e-12);
    }

    #[test]
    fn latitude_weights_formula_4x8() {
        let g = make_grid(4, 8).unwrap();
        let w = latitude_weights(&g);
        let c225 = 22.5f64.to_radians().cos();
        let c675 = 67.5f64.to_radians().cos();
        let expected = c225 / (8.0 * (2.0 * c675 + 2.0 * c225));
        // Row at 22.5 degrees is row index 1.
        assert_abs_diff_eq!(w.values()[8], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.0441942, epsilon = 5e-7);
        // Cosine ratio between rows.
        let ratio = w.values()[8] / w.values()[0];
        assert_abs_diff_eq!(ratio, c225 / c675, epsilon = 1e-12);
        assert_abs_diff_eq!(ratio, 2.4142, epsilon = 5e-5);
    }

    #[test]
    fn weights_normalized_and_longitudinally_constant() {
        for (nlat, nlon) in [(4, 8), (32, 64), (256, 512)] {
            let g = make_grid(nlat, nlon).unwrap();
            let w = latitude_weights(&g);
            let sum: f64 = w.values().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum} for {nlat}x{nlon}");
            for i in 0..nlat {
                let row = &w.values()[i * nlon..(i + 1) * nlon];
                assert!(row.iter().all(|&v| v == row[0]));
            }
        }
    }

    #[test]
    fn constant_field_mean_is_constant() {
        let g = make_grid(4, 8).unwrap();
        let w = latitude_weights(&g);
        let f = Field::new(
            g.clone(),
            vec!["t".into()],
            vec![3.0; g.ncell()],
            0,
        )
        .unwrap();
        let mask: Vec<bool> = (0..g.ncell()).map(|k| k % 3 == 0).collect();
        assert_abs_diff_eq!(
            area_weighted_mean(&f, &w, "t", Some(&mask)).unwrap(),
            3.0,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(area_weighted_mean(&f, &w, "t", None).unwrap(), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn hemispheric_antisymmetry_averages_to_zero() {
        let g = make_grid(4, 8).unwrap();
        let w = latitude_weights(&g);
        let mut data = vec![0.0f32; g.ncell()];
        for i in 0..4 {
            for j in 0..8 {
                data[g.cell_index(i, j)] = if i < 2 { 1.0 } else { -1.0 };
            }
        }
        let f = Field::new(g, vec!["t".into()], data, 0).unwrap();
        assert_abs_diff_eq!(area_weighted_mean(&f, &w, "t", None).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn masked_mean_matches_brute_force() {
        let g = make_grid(4, 8).unwrap();
        let w = latitude_weights(&g);
        let mut data = vec![0.0f32; g.ncell()];
        for i in 0..4 {
            for j in 0..8 {
                data[g.cell_index(i, j)] = if (i + j) % 2 == 0 { 1.0 } else { -2.0 };
            }
        }
        let f = Field::new(g.clone(), vec!["t".into()], data.clone(), 0).unwrap();
        // North rows only.
        let mask: Vec<bool> = (0..g.ncell()).map(|k| k / 8 < 2).collect();
        let got = area_weighted_mean(&f, &w, "t", Some(&mask)).unwrap();

        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..2 {
            for j in 0..8 {
                let wv = w.values()[g.cell_index(i, j)];
                num += wv * data[g.cell_index(i, j)] as f64;
                den += wv;
            }
        }
        assert_abs_diff_eq!(got, num / den, epsilon = 1e-14);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let g = make_grid(4, 8).unwrap();
        let w = latitude_weights(&g);
        let f = Field::zeros(g.clone(), vec!["t".into()], 0);
        let mask = vec![false; g.ncell()];
        assert!(matches!(
            area_weighted_mean(&f, &w, "t", Some(&mask)),
            Err(GemError::EmptyMask)
        ));
    }

    #[test]
    fn field_rejects_non_finite_and_duplicate_names() {
        let g = make_grid(4, 8).unwrap();
        let mut data = vec![0.0f32; g.ncell()];
        data[5] = f32::NAN;
        assert!(matches!(
            Field::new(g.clone(), vec!["t".into()], data, 0),
            Err(GemError::NonFinite { .. })
        ));
        assert!(matches!(
            Field::new(
                g.clone(),
                vec!["t".into(), "t".into()],
                vec![0.0; 2 * g.ncell()],
                0
            ),
            Err(GemError::ChannelMismatch(_))
        ));
    }
}
