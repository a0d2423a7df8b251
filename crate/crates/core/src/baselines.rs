//! Constant-velocity linear projection of vehicle footprints.
//!
//! Vehicles are recovered from the semantic channel as 8-connected
//! components of occupied cells. Each component in the latest frame is
//! paired with the nearest component of the frame before (greedily, closest
//! pair first, within [`GATE_CELLS`]); the centroid shift between the two is
//! its velocity in cells per frame. Forecasts translate each component by
//! `round(k * velocity)` at horizon `k`.

use crate::error::{Error, Result};
use crate::grid::{
    binarize_values, GridSequence, OccupancyGrid, OCCUPIED_THRESHOLD, SEMANTIC, STATIC,
};
use crate::metrics::Forecaster;

/// Largest centroid distance, in cells, at which two components match.
pub const GATE_CELLS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    /// `(row, col)` cells of the component in the latest frame.
    pub cells: Vec<(usize, usize)>,
    pub centroid: (f64, f64),
    /// Matched centroid in the previous frame, if any.
    pub previous: Option<(f64, f64)>,
    /// Rows and columns per frame.
    pub velocity: (f64, f64),
}

/// 8-connected components of cells above the occupancy threshold, in
/// row-major order of their first cell.
pub fn connected_components(mask: &[f32], height: usize, width: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if seen[start] || mask[start] <= OCCUPIED_THRESHOLD {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (r, c) = (i / width, i % width);
            comp.push((r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= height as i64 || nc >= width as i64 {
                        continue;
                    }
                    let j = nr as usize * width + nc as usize;
                    if !seen[j] && mask[j] > OCCUPIED_THRESHOLD {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn centroid(cells: &[(usize, usize)]) -> (f64, f64) {
    let n = cells.len() as f64;
    let (r, c) = cells
        .iter()
        .fold((0.0, 0.0), |(r, c), &(a, b)| (r + a as f64, c + b as f64));
    (r / n, c / n)
}

/// Tracks every component of `curr`, with velocities from `prev`.
pub fn extract_agents(
    prev: &[f32],
    curr: &[f32],
    height: usize,
    width: usize,
) -> Result<Vec<AgentTrack>> {
    if prev.len() != height * width || curr.len() != height * width {
        return Err(Error::shape(
            "extract_agents",
            format!(
                "{} and {} cells for {height}x{width}",
                prev.len(),
                curr.len()
            ),
        ));
    }
    let before: Vec<(f64, f64)> = connected_components(prev, height, width)
        .iter()
        .map(|c| centroid(c))
        .collect();
    let now = connected_components(curr, height, width);
    let centers: Vec<(f64, f64)> = now.iter().map(|c| centroid(c)).collect();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in centers.iter().enumerate() {
        for (j, b) in before.iter().enumerate() {
            let d = (a.0 - b.0).hypot(a.1 - b.1);
            if d <= GATE_CELLS {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut matched: Vec<Option<usize>> = vec![None; now.len()];
    let mut taken = vec![false; before.len()];
    for (_, i, j) in pairs {
        if matched[i].is_none() && !taken[j] {
            matched[i] = Some(j);
            taken[j] = true;
        }
    }

    Ok(now
        .into_iter()
        .zip(centers)
        .zip(matched)
        .map(|((cells, c), m)| {
            let previous = m.map(|j| before[j]);
            let velocity = previous.map_or((0.0, 0.0), |p| (c.0 - p.0, c.1 - p.1));
            AgentTrack {
                cells,
                centroid: c,
                previous,
                velocity,
            }
        })
        .collect())
}

/// Semantic channels for horizons `1..=n`; cells pushed off the grid are
/// dropped and overlapping footprints merge.
pub fn linear_project(
    tracks: &[AgentTrack],
    height: usize,
    width: usize,
    n: usize,
) -> Vec<Vec<f32>> {
    (1..=n)
        .map(|k| {
            let mut ch = vec![0.0f32; height * width];
            for t in tracks {
                let dr = (k as f64 * t.velocity.0).round() as i64;
                let dc = (k as f64 * t.velocity.1).round() as i64;
                for &(r, c) in &t.cells {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && nr < height as i64 && nc < width as i64 {
                        ch[nr as usize * width + nc as usize] = 1.0;
                    }
                }
            }
            ch
        })
        .collect()
}

/// Forecaster wrapping [`extract_agents`] and [`linear_project`]. The static
/// channel of the last observed frame is repeated unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearProjection {
    pub t_in: usize,
    pub t_out: usize,
}

impl Default for LinearProjection {
    fn default() -> Self {
        Self { t_in: 9, t_out: 6 }
    }
}

impl Forecaster for LinearProjection {
    fn t_in(&self) -> usize {
        self.t_in
    }

    fn t_out(&self) -> usize {
        self.t_out
    }

    fn forecast(&self, past: &GridSequence) -> Result<GridSequence> {
        if past.len() < 2 {
            return Err(Error::Input(format!(
                "need at least 2 past frames, got {}",
                past.len()
            )));
        }
        if past.num_channels() != 2 {
            return Err(Error::Input(
                "linear projection needs two-channel grids".into(),
            ));
        }
        let frames = past.frames();
        let (prev, last) = (&frames[frames.len() - 2], &frames[frames.len() - 1]);
        let spec = last.spec;
        let tracks = extract_agents(
            &binarize_values(prev.channel(SEMANTIC), OCCUPIED_THRESHOLD),
            &binarize_values(last.channel(SEMANTIC), OCCUPIED_THRESHOLD),
            spec.height,
            spec.width,
        )?;
        let out = linear_project(&tracks, spec.height, spec.width, self.t_out)
            .into_iter()
            .enumerate()
            .map(|(k, sem)| {
                OccupancyGrid::two_channel(
                    spec,
                    last.channel(STATIC).to_vec(),
                    sem,
                    last.timestamp + (k + 1) as f64 * past.dt(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        GridSequence::new(out, past.dt())
    }
}
