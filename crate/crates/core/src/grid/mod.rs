//! Occupancy-grid data model and geometry.
//!
//! Ego-frame convention: `x` points forward and `y` to the left of the ego
//! vehicle, which sits at the grid center. Forward is up (decreasing row),
//! left is left (decreasing column): the cell holding point `(x, y)` is
//! `row = H/2 - round(x / res)`, `col = W/2 - round(y / res)`.

mod import;
mod ogs;

pub use import::import_sequence;
pub use ogs::{decode_ogs, decode_ogs_with, encode_ogs, OGS_HEADER_LEN, OGS_MAGIC, OGS_VERSION};

use crate::error::{Error, Result};

/// Index of the static-environment channel in a two-channel grid.
pub const STATIC: usize = 0;
/// Index of the vehicle channel in a two-channel grid.
pub const SEMANTIC: usize = 1;

/// Occupancy threshold: a cell is occupied when its value is strictly above.
pub const OCCUPIED_THRESHOLD: f32 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub resolution: f64,
    /// Meters from the ego vehicle to the grid border along each axis.
    pub extent: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, resolution: f64) -> Result<Self> {
        let spec = Self {
            height,
            width,
            resolution,
            extent: height as f64 * resolution / 2.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 600 x 600 cells at 0.1 m: 30 m in every cardinal direction.
    pub fn full_scale() -> Self {
        Self::new(600, 600, 0.1).expect("valid")
    }

    /// 64 x 64 cells at 0.5 m, small enough for CPU training.
    pub fn desk() -> Self {
        Self::new(64, 64, 0.5).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Domain("grid dimensions must be positive".into()));
        }
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::Domain(format!(
                "invalid resolution {}",
                self.resolution
            )));
        }
        let span = self.height as f64 * self.resolution;
        if (span - 2.0 * self.extent).abs() > 1e-6 * span.max(1.0) {
            return Err(Error::Domain(format!(
                "height {} x resolution {} != 2 x extent {}",
                self.height, self.resolution, self.extent
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Ego-frame coordinates `(x, y)` of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (self.height as f64 / 2.0 - row as f64) * self.resolution,
            (self.width as f64 / 2.0 - col as f64) * self.resolution,
        )
    }

    /// Cell containing ego-frame point `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let r = (self.height / 2) as f64 - (x / self.resolution).round();
        let c = (self.width / 2) as f64 - (y / self.resolution).round();
        (r >= 0.0 && c >= 0.0 && (r as usize) < self.height && (c as usize) < self.width)
            .then_some((r as usize, c as usize))
    }
}

/// One timestamped grid with one (merged) or two (static, semantic) channels
/// of occupancy probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    channels: Vec<Vec<f32>>,
    pub timestamp: f64,
}

impl OccupancyGrid {
    pub fn new(spec: GridSpec, channels: Vec<Vec<f32>>, timestamp: f64) -> Result<Self> {
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::Input(format!(
                "a grid has 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        for (i, ch) in channels.iter().enumerate() {
            if ch.len() != spec.cells() {
                return Err(Error::shape(
                    "occupancy grid",
                    format!(
                        "channel {i} has {} cells, spec needs {}",
                        ch.len(),
                        spec.cells()
                    ),
                ));
            }
            if let Some(v) = ch.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!(
                    "channel {i} value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            spec,
            channels,
            timestamp,
        })
    }

    pub fn two_channel(
        spec: GridSpec,
        static_env: Vec<f32>,
        semantic: Vec<f32>,
        timestamp: f64,
    ) -> Result<Self> {
        Self::new(spec, vec![static_env, semantic], timestamp)
    }

    pub fn empty(spec: GridSpec, num_channels: usize, timestamp: f64) -> Result<Self> {
        Self::new(spec, vec![vec![0.0; spec.cells()]; num_channels], timestamp)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f32>> {
        self.channels
    }

    pub fn static_env(&self) -> Option<&[f32]> {
        (self.channels.len() == 2).then(|| self.channels[STATIC].as_slice())
    }

    pub fn semantic(&self) -> Option<&[f32]> {
        (self.channels.len() == 2).then(|| self.channels[SEMANTIC].as_slice())
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.channels[channel][row * self.spec.width + col]
    }
}

/// Frames at a fixed time step sharing one spec and channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSequence {
    frames: Vec<OccupancyGrid>,
    dt: f64,
}

impl GridSequence {
    pub fn new(frames: Vec<OccupancyGrid>, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Input(format!("time step {dt} must be positive")));
        }
        if let Some(first) = frames.first() {
            for (k, w) in frames.windows(2).enumerate() {
                let step = w[1].timestamp - w[0].timestamp;
                if (step - dt).abs() > 1e-6 {
                    return Err(Error::Input(format!(
                        "frames {k}->{}: timestamp step {step} != dt {dt}",
                        k + 1
                    )));
                }
            }
            if let Some(f) = frames
                .iter()
                .find(|f| f.spec != first.spec || f.num_channels() != first.num_channels())
            {
                return Err(Error::Input(format!(
                    "frame at t={} does not share the sequence grid layout",
                    f.timestamp
                )));
            }
        }
        Ok(Self { frames, dt })
    }

    pub fn frames(&self) -> &[OccupancyGrid] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<OccupancyGrid> {
        self.frames
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn spec(&self) -> Option<GridSpec> {
        self.frames.first().map(|f| f.spec)
    }

    pub fn num_channels(&self) -> usize {
        self.frames.first().map_or(0, |f| f.num_channels())
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.frames.len() {
            return Err(Error::Input(format!(
                "frame range {start}..{end} out of 0..{}",
                self.frames.len()
            )));
        }
        Self::new(self.frames[start..end].to_vec(), self.dt)
    }

    pub fn map_frames(&self, f: impl Fn(&OccupancyGrid) -> Result<OccupancyGrid>) -> Result<Self> {
        Self::new(self.frames.iter().map(f).collect::<Result<_>>()?, self.dt)
    }
}

/// Rectangular vehicle footprint in the ego frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxFootprint {
    /// Forward offset of the center, meters.
    pub x: f64,
    /// Leftward offset of the center, meters.
    pub y: f64,
    pub length: f64,
    pub width: f64,
    /// Radians, 0 = facing forward, counter-clockwise positive.
    pub heading: f64,
}

impl BoxFootprint {
    pub fn new(x: f64, y: f64, length: f64, width: f64, heading: f64) -> Result<Self> {
        if !(length > 0.0 && width > 0.0) {
            return Err(Error::Domain(format!(
                "box dimensions must be positive, got {length} x {width}"
            )));
        }
        Ok(Self {
            x,
            y,
            length,
            width,
            heading,
        })
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

// Shifts membership tests by a hair so a cell center lying exactly on an edge
// is inside at the rear/right edges and outside at the front/left edges.
const EDGE_NUDGE: f64 = 1e-6;

/// Marks every cell whose center falls inside a footprint.
///
/// The rectangle is half-open along both box axes, so an axis-aligned
/// `L x W` box covers exactly `round(L/res) x round(W/res)` cells when its
/// edges fall on cell centers. Boxes outside the grid are clipped.
pub fn project_boxes(boxes: &[BoxFootprint], spec: &GridSpec) -> Vec<f32> {
    let mut mask = vec![0.0f32; spec.cells()];
    let res = spec.resolution;
    for b in boxes {
        let (sin, cos) = b.heading.sin_cos();
        let (hl, hw) = (b.length / (2.0 * res), b.width / (2.0 * res));
        // bounding radius in cells
        let reach = hl.hypot(hw) + 1.0;
        let (cr, cc) = (
            spec.height as f64 / 2.0 - b.x / res,
            spec.width as f64 / 2.0 - b.y / res,
        );
        let r0 = (cr - reach).floor().max(0.0) as usize;
        let r1 = ((cr + reach).ceil().max(0.0) as usize).min(spec.height);
        let c0 = (cc - reach).floor().max(0.0) as usize;
        let c1 = ((cc + reach).ceil().max(0.0) as usize).min(spec.width);
        for r in r0..r1 {
            for c in c0..c1 {
                // offsets in cells, ego axes
                let dx = spec.height as f64 / 2.0 - r as f64 - b.x / res;
                let dy = spec.width as f64 / 2.0 - c as f64 - b.y / res;
                let u = dx * cos + dy * sin + EDGE_NUDGE;
                let v = -dx * sin + dy * cos + EDGE_NUDGE;
                if u >= -hl && u < hl && v >= -hw && v < hw {
                    mask[r * spec.width + c] = 1.0;
                }
            }
        }
    }
    mask
}

/// Cells strictly above `threshold` become 1, all others 0.
pub fn binarize(grid: &OccupancyGrid, threshold: f32) -> OccupancyGrid {
    OccupancyGrid {
        spec: grid.spec,
        channels: grid
            .channels
            .iter()
            .map(|ch| binarize_values(ch, threshold))
            .collect(),
        timestamp: grid.timestamp,
    }
}

pub fn binarize_values(values: &[f32], threshold: f32) -> Vec<f32> {
    values
        .iter()
        .map(|&v| if v > threshold { 1.0 } else { 0.0 })
        .collect()
}

/// Cellwise maximum over channels. A single-channel grid is returned as is.
pub fn merge_channels(grid: &OccupancyGrid) -> OccupancyGrid {
    OccupancyGrid {
        spec: grid.spec,
        channels: vec![merge_values(&grid.channels)],
        timestamp: grid.timestamp,
    }
}

pub(crate) fn merge_values(channels: &[Vec<f32>]) -> Vec<f32> {
    let mut out = channels[0].clone();
    for ch in &channels[1..] {
        for (o, &v) in out.iter_mut().zip(ch) {
            *o = o.max(v);
        }
    }
    out
}

/// Fractional-overlap weights mapping `n_in` cells onto `n_out` cells.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|j| {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Downsamples by area averaging; each output cell is the overlap-weighted
/// mean of the input cells it covers.
pub fn resize_grid(grid: &OccupancyGrid, new_h: usize, new_w: usize) -> Result<OccupancyGrid> {
    let (h, w) = (grid.spec.height, grid.spec.width);
    if new_h == 0 || new_w == 0 {
        return Err(Error::Domain("target size must be positive".into()));
    }
    if new_h > h || new_w > w {
        return Err(Error::Unsupported(format!(
            "upsampling {h}x{w} -> {new_h}x{new_w}"
        )));
    }
    let rows = area_weights(h, new_h);
    let cols = area_weights(w, new_w);
    let spec = GridSpec::new(new_h, new_w, grid.spec.resolution * h as f64 / new_h as f64)?;
    let channels = grid
        .channels
        .iter()
        .map(|ch| {
            // columns first: h x new_w, then rows
            let mut tmp = vec![0.0f64; h * new_w];
            for r in 0..h {
                for (oc, ws) in cols.iter().enumerate() {
                    tmp[r * new_w + oc] = ws.iter().map(|&(c, wt)| wt * ch[r * w + c] as f64).sum();
                }
            }
            let mut out = vec![0.0f32; new_h * new_w];
            for (or, ws) in rows.iter().enumerate() {
                for oc in 0..new_w {
                    let v: f64 = ws.iter().map(|&(r, wt)| wt * tmp[r * new_w + oc]).sum();
                    out[or * new_w + oc] = v.clamp(0.0, 1.0) as f32;
                }
            }
            out
        })
        .collect();
    OccupancyGrid::new(spec, channels, grid.timestamp)
}
