//! Multi-scale spatiotemporal context grids.
//!
//! For a reference time `t` and look-back `τ`, every event with
//! `t - τ <= t_i < t` is binned into a lat/lon lattice and summarised by six
//! channels per cell:
//!
//! | channel | value |
//! |---|---|
//! | 0 | event count |
//! | 1 | maximum magnitude / 10 |
//! | 2 | `log10(1 + Σ E)`, E in Joules |
//! | 3 | mean depth / 700 km |
//! | 4 | count in the most recent `τ/2` / max(count, 1) |
//! | 5 | population variance of magnitudes |
//!
//! Empty cells are all zero. Three scales (7, 30, 90 days) are stacked into
//! an `(18, H, W)` tensor.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::diff::Tensor;
use crate::{Error, Result, SECONDS_PER_DAY};

pub const CHANNELS_PER_SCALE: usize = 6;
pub const SCALES_DAYS: [f64; 3] = [7.0, 30.0, 90.0];
pub const GRID_CHANNELS: usize = CHANNELS_PER_SCALE * SCALES_DAYS.len();
const DEPTH_SCALE_KM: f64 = 700.0;
const MAGNITUDE_SCALE: f64 = 10.0;

/// Lattice covering `[lat_min, lat_max] x [lon_min, lon_max]` with square
/// cells. Row 0 is the southern edge. Events outside the box are ignored;
/// those on the northern or eastern edge fall in the last row or column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Degrees.
    pub cell_size: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Default for GridSpec {
    /// Global 2° lattice, 90 x 180.
    fn default() -> Self {
        GridSpec::global(2.0)
    }
}

impl GridSpec {
    pub fn global(cell_size: f64) -> Self {
        GridSpec {
            cell_size,
            lat_min: -90.0,
            lat_max: 90.0,
            lon_min: -180.0,
            lon_max: 180.0,
        }
    }

    /// Square box of side `extent` degrees centred on `(lat, lon)`.
    pub fn regional(lat: f64, lon: f64, extent: f64, cell_size: f64) -> Self {
        GridSpec {
            cell_size,
            lat_min: (lat - extent / 2.0).max(-90.0),
            lat_max: (lat + extent / 2.0).min(90.0),
            lon_min: lon - extent / 2.0,
            lon_max: lon + extent / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.cell_size > 0.0
            && self.cell_size.is_finite()
            && self.lat_min < self.lat_max
            && self.lon_min < self.lon_max
            && self.lat_min >= -90.0
            && self.lat_max <= 90.0
            && self.lon_max - self.lon_min <= 360.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid grid spec {self:?}")))
        }
    }

    pub fn height(&self) -> usize {
        ((self.lat_max - self.lat_min) / self.cell_size)
            .ceil()
            .max(1.0) as usize
    }

    pub fn width(&self) -> usize {
        ((self.lon_max - self.lon_min) / self.cell_size)
            .ceil()
            .max(1.0) as usize
    }

    /// `(row, col)` of a coordinate, or `None` outside the box. Longitudes
    /// are compared modulo 360 so boxes may straddle the antimeridian.
    pub fn cell(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        if lat < self.lat_min || lat > self.lat_max {
            return None;
        }
        let span = self.lon_max - self.lon_min;
        let raw = lon - self.lon_min;
        let dl = if (0.0..=span).contains(&raw) {
            raw
        } else {
            let wrapped = raw.rem_euclid(360.0);
            if wrapped > span {
                return None;
            }
            wrapped
        };
        let row = (((lat - self.lat_min) / self.cell_size).floor() as usize).min(self.height() - 1);
        let col = ((dl / self.cell_size).floor() as usize).min(self.width() - 1);
        Some((row, col))
    }
}

#[derive(Default, Clone, Copy)]
struct CellAcc {
    count: usize,
    recent: usize,
    max_mag: f64,
    energy: f64,
    depth_sum: f64,
    mean_mag: f64,
    m2: f64,
}

/// `(6, H, W)` statistics of events in `[t - tau, t)`; `tau` in days.
pub fn build_scale_grid(catalog: &Catalog, t: f64, tau: f64, spec: &GridSpec) -> Result<Tensor> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidInput(format!("tau = {tau} must be positive")));
    }
    spec.validate()?;
    let (h, w) = (spec.height(), spec.width());
    let start = t - tau * SECONDS_PER_DAY;
    let recent_start = t - tau / 2.0 * SECONDS_PER_DAY;
    let mut cells = vec![CellAcc::default(); h * w];
    for e in catalog.window(start, t) {
        let Some((r, c)) = spec.cell(e.latitude, e.longitude) else {
            continue;
        };
        let acc = &mut cells[r * w + c];
        acc.count += 1;
        if e.time >= recent_start {
            acc.recent += 1;
        }
        acc.max_mag = if acc.count == 1 {
            e.magnitude
        } else {
            acc.max_mag.max(e.magnitude)
        };
        acc.energy += e.energy;
        acc.depth_sum += e.depth;
        // Welford update
        let delta = e.magnitude - acc.mean_mag;
        acc.mean_mag += delta / acc.count as f64;
        acc.m2 += delta * (e.magnitude - acc.mean_mag);
    }
    let plane = h * w;
    let mut data = vec![0.0; CHANNELS_PER_SCALE * plane];
    for (i, acc) in cells.iter().enumerate().filter(|(_, a)| a.count > 0) {
        let n = acc.count as f64;
        data[i] = n;
        data[plane + i] = acc.max_mag / MAGNITUDE_SCALE;
        data[2 * plane + i] = acc.energy.ln_1p() / std::f64::consts::LN_10;
        data[3 * plane + i] = acc.depth_sum / n / DEPTH_SCALE_KM;
        data[4 * plane + i] = acc.recent as f64 / n;
        data[5 * plane + i] = (acc.m2 / n).max(0.0);
    }
    Tensor::new(vec![CHANNELS_PER_SCALE, h, w], data)
}

/// Stacked context for one reference time.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextGrid {
    /// `(18, H, W)`, scales in order 7, 30, 90 days.
    pub data: Tensor,
    pub cell_size: f64,
    /// Epoch seconds.
    pub reference_time: f64,
}

impl ContextGrid {
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

pub fn build_multiscale(catalog: &Catalog, t: f64, spec: &GridSpec) -> Result<ContextGrid> {
    let mut data = Vec::new();
    for tau in SCALES_DAYS {
        data.extend(build_scale_grid(catalog, t, tau, spec)?.into_data());
    }
    Ok(ContextGrid {
        data: Tensor::new(vec![GRID_CHANNELS, spec.height(), spec.width()], data)?,
        cell_size: spec.cell_size,
        reference_time: t,
    })
}

/// [`build_multiscale`] for many reference times, in parallel; output order
/// follows `times`.
pub fn build_batch(catalog: &Catalog, times: &[f64], spec: &GridSpec) -> Result<Vec<ContextGrid>> {
    times
        .par_iter()
        .map(|&t| build_multiscale(catalog, t, spec))
        .collect()
}

const PGRD_MAGIC: &[u8; 4] = b"PGRD";
const PGRD_VERSION: u32 = 1;

/// Binary dump: `PGRD`, u32 version, u32 H, u32 W (little-endian), then
/// `18 * H * W` little-endian f32 in (scale, channel, row, col) order.
pub fn write_pgrd<W: Write>(grid: &ContextGrid, mut writer: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * grid.data.len());
    buf.extend_from_slice(PGRD_MAGIC);
    for v in [PGRD_VERSION, grid.height() as u32, grid.width() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.data.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    writer.write_all(&buf)
}

/// Reads one record written by [`write_pgrd`] as an `(18, H, W)` tensor.
pub fn read_pgrd<R: Read>(mut reader: R) -> Result<Tensor> {
    let mut header = [0u8; 16];
    let io = |e: std::io::Error| Error::Parse(format!("grid dump: {e}"));
    reader.read_exact(&mut header).map_err(io)?;
    if &header[..4] != PGRD_MAGIC {
        return Err(Error::Parse("grid dump: bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != PGRD_VERSION {
        return Err(Error::Parse(format!(
            "grid dump: unsupported version {}",
            word(4)
        )));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let mut raw = vec![0u8; 4 * GRID_CHANNELS * h * w];
    reader.read_exact(&mut raw).map_err(io)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(vec![GRID_CHANNELS, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{grid_index, Event};
    use proptest::prelude::*;

    const T: f64 = 1_500_000_000.0;
    const DAY: f64 = SECONDS_PER_DAY;

    fn ev(days_before: f64, lat: f64, lon: f64, m: f64) -> Event {
        Event::new("e", T - days_before * DAY, lat, lon, 35.0, m).unwrap()
    }

    fn at(g: &Tensor, ch: usize, r: usize, c: usize) -> f64 {
        let s = g.shape();
        g.data()[(ch * s[1] + r) * s[2] + c]
    }

    #[test]
    fn single_event_statistics() {
        let cat = Catalog::new(vec![ev(1.0, 10.5, 20.5, 5.0)]);
        let spec = GridSpec::default();
        let g = build_scale_grid(&cat, T, 7.0, &spec).unwrap();
        assert_eq!(g.shape(), &[6, 90, 180]);
        let (r, c) = grid_index(10.5, 20.5, 2.0).unwrap();
        assert_eq!(spec.cell(10.5, 20.5), Some((r, c)));
        assert_eq!(at(&g, 0, r, c), 1.0);
        assert_eq!(at(&g, 1, r, c), 0.5);
        assert!((at(&g, 2, r, c) - 12.3).abs() < 1e-9);
        assert!((at(&g, 3, r, c) - 35.0 / 700.0).abs() < 1e-15);
        assert_eq!(at(&g, 4, r, c), 1.0);
        assert_eq!(at(&g, 5, r, c), 0.0);
        assert_eq!(g.data().iter().filter(|v| **v != 0.0).count(), 5);
    }

    #[test]
    fn two_event_variance_and_trend() {
        let cat = Catalog::new(vec![ev(5.0, 1.0, 1.0, 4.0), ev(1.0, 1.0, 1.0, 6.0)]);
        let g = build_scale_grid(&cat, T, 7.0, &GridSpec::default()).unwrap();
        let (r, c) = grid_index(1.0, 1.0, 2.0).unwrap();
        assert_eq!(at(&g, 1, r, c), 0.6);
        assert_eq!(at(&g, 5, r, c), 1.0);
        assert_eq!(at(&g, 4, r, c), 0.5);
    }

    #[test]
    fn empty_window_is_zero() {
        let g = build_scale_grid(&Catalog::default(), T, 30.0, &GridSpec::global(4.0)).unwrap();
        assert_eq!(g.shape(), &[6, 45, 90]);
        assert!(g.data().iter().all(|v| *v == 0.0));
        assert!(build_scale_grid(&Catalog::default(), T, 0.0, &GridSpec::default()).is_err());
    }

    #[test]
    fn window_is_half_open() {
        let cat = Catalog::new(vec![ev(7.0, 0.0, 0.0, 5.0), ev(0.0, 0.0, 0.0, 5.0)]);
        let g = build_multiscale(&cat, T, &GridSpec::default()).unwrap();
        assert_eq!(g.data.shape(), &[18, 90, 180]);
        let total: f64 = g.data.data()[..90 * 180].iter().sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn regional_spec_geometry() {
        let spec = GridSpec::regional(0.0, 0.0, 20.0, 2.0);
        assert_eq!((spec.height(), spec.width()), (10, 10));
        assert_eq!(spec.cell(-10.0, -10.0), Some((0, 0)));
        assert_eq!(spec.cell(10.0, 10.0), Some((9, 9)));
        assert_eq!(spec.cell(10.5, 0.0), None);
        let wrap = GridSpec::regional(0.0, 180.0, 20.0, 2.0);
        assert_eq!(wrap.cell(0.0, -179.0), Some((5, 5)));
        assert_eq!(wrap.cell(0.0, 179.0), Some((5, 4)));
    }

    #[test]
    fn pgrd_round_trip() {
        let cat = Catalog::new(vec![ev(3.0, 2.0, 3.0, 5.5), ev(20.0, -4.0, 1.0, 4.25)]);
        let grid = build_multiscale(&cat, T, &GridSpec::regional(0.0, 0.0, 12.0, 2.0)).unwrap();
        let mut buf = Vec::new();
        write_pgrd(&grid, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"PGRD");
        assert_eq!(buf.len(), 16 + 4 * 18 * 6 * 6);
        let back = read_pgrd(buf.as_slice()).unwrap();
        assert_eq!(back.shape(), grid.data.shape());
        for (a, b) in back.data().iter().zip(grid.data.data()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
        buf[0] = b'X';
        assert!(read_pgrd(buf.as_slice()).is_err());
    }

    fn arb_catalog() -> impl Strategy<Value = Vec<Event>> {
        proptest::collection::vec(
            (0.0..120.0f64, -89.0..89.0f64, -179.0..179.0f64, 2.0..8.0f64),
            0..60,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(d, la, lo, m)| ev(d, la, lo, m))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn mass_and_nesting(events in arb_catalog()) {
            let cat = Catalog::new(events.clone());
            let spec = GridSpec::global(4.0);
            let g = build_multiscale(&cat, T, &spec).unwrap();
            let plane = spec.height() * spec.width();
            let d = g.data.data();
            for (k, tau) in SCALES_DAYS.iter().enumerate() {
                let counted: f64 = d[k * 6 * plane..][..plane].iter().sum();
                let expected = events.iter().filter(|e| e.time >= T - tau * DAY && e.time < T).count();
                prop_assert_eq!(counted as usize, expected);
            }
            for i in 0..plane {
                prop_assert!(d[i] <= d[6 * plane + i] && d[6 * plane + i] <= d[12 * plane + i]);
                prop_assert!(d[5 * plane + i] >= 0.0);
            }
        }

        #[test]
        fn translation_in_time(events in arb_catalog(), shift in -1e8..1e8f64) {
            let spec = GridSpec::global(4.0);
            let a = build_multiscale(&Catalog::new(events.clone()), T, &spec).unwrap();
            let moved: Vec<Event> = events
                .iter()
                .map(|e| Event::new("e", e.time + shift.round(), e.latitude, e.longitude, e.depth, e.magnitude).unwrap())
                .collect();
            let b = build_multiscale(&Catalog::new(moved), T + shift.round(), &spec).unwrap();
            prop_assert_eq!(a.data, b.data);
        }
    }
}
