//! Seeded synthetic driving scenes.
//!
//! A scene is a straight road bounded by two walls, optional rectangular
//! obstacles beside it, and up to four vehicles driving along their own lanes
//! (forward, reverse, or standing still). Vehicles land in the semantic
//! channel, everything else in the static channel. Ego motion shifts the
//! static layout backwards frame by frame; vehicle velocities are already
//! relative to the grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::grid::{project_boxes, BoxFootprint, GridSequence, GridSpec, OccupancyGrid};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Agent {
    pub footprint: BoxFootprint,
    /// Grid-relative velocity `(vx, vy)` in m/s.
    pub velocity: (f64, f64),
    /// rad/s.
    pub yaw_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StaticLayout {
    /// Boxes in the ego frame at `t = 0`: walls and obstacles alike.
    pub boxes: Vec<BoxFootprint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub grid: GridSpec,
    pub n_frames: usize,
    pub dt: f64,
    pub agents: Vec<Agent>,
    pub static_layout: StaticLayout,
    /// Ego velocity `(vx, vy)` in m/s.
    pub ego_motion: (f64, f64),
    /// Probability of flipping each cell after rasterization.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            grid: GridSpec::desk(),
            n_frames: 15,
            dt: 0.5,
            agents: Vec::new(),
            static_layout: StaticLayout::default(),
            ego_motion: (0.0, 0.0),
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_frames < 3 {
            return Err(Error::Config(format!(
                "n_frames {} must be >= 3",
                self.n_frames
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt {} must be positive", self.dt)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!(
                "noise {} outside [0, 1]",
                self.noise
            )));
        }
        let span = 2.0 * self.grid.extent;
        for a in &self.agents {
            let step = a.velocity.0.hypot(a.velocity.1) * self.dt;
            if !(step < span) {
                return Err(Error::Config(format!(
                    "agent moves {step} m per frame, more than the {span} m grid"
                )));
            }
        }
        Ok(())
    }
}

fn flip_cells(values: &mut [f32], p: f64, rng: &mut ChaCha8Rng) {
    if p <= 0.0 {
        return;
    }
    for v in values {
        if rng.gen_bool(p) {
            *v = 1.0 - *v;
        }
    }
}

/// Rasterizes every frame of a scene. Agents that leave the grid are clipped.
pub fn generate_scene(spec: &SceneSpec) -> Result<GridSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = Vec::with_capacity(spec.n_frames);
    for k in 0..spec.n_frames {
        let t = k as f64 * spec.dt;
        let agents: Vec<BoxFootprint> = spec
            .agents
            .iter()
            .map(|a| {
                let mut b = a.footprint.translated(t * a.velocity.0, t * a.velocity.1);
                b.heading += t * a.yaw_rate;
                b
            })
            .collect();
        let layout: Vec<BoxFootprint> = spec
            .static_layout
            .boxes
            .iter()
            .map(|b| b.translated(-t * spec.ego_motion.0, -t * spec.ego_motion.1))
            .collect();
        let mut stat = project_boxes(&layout, &spec.grid);
        let mut sem = project_boxes(&agents, &spec.grid);
        flip_cells(&mut stat, spec.noise, &mut rng);
        flip_cells(&mut sem, spec.noise, &mut rng);
        frames.push(OccupancyGrid::two_channel(spec.grid, stat, sem, t)?);
    }
    GridSequence::new(frames, spec.dt)
}

/// Ranges from which [`generate_dataset`] draws each scene.
///
/// Speeds are drawn uniformly from `[-max_speed, max_speed]` (negative is
/// reverse driving), then snapped to multiples of `speed_quantum` and
/// shrunk until the vehicle stays fully inside the grid for the whole
/// sequence. A quantum of `resolution / dt` moves vehicles by whole cells per
/// frame; 0 keeps speeds continuous.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTemplate {
    pub grid: GridSpec,
    pub n_frames: usize,
    pub dt: f64,
    pub min_agents: usize,
    pub max_agents: usize,
    pub max_speed: f64,
    pub speed_quantum: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub lane_width: f64,
    /// Fraction of vehicles given a nonzero yaw rate.
    pub turn_fraction: f64,
    pub max_yaw_rate: f64,
    /// Forward ego speed range, m/s.
    pub ego_speed: (f64, f64),
    /// Expected obstacles per 100 m² beside the road.
    pub obstacle_density: f64,
    pub noise: f64,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        let grid = GridSpec::desk();
        let dt = 0.5;
        Self {
            grid,
            n_frames: 15,
            dt,
            min_agents: 1,
            max_agents: 4,
            max_speed: 4.0,
            speed_quantum: grid.resolution / dt,
            vehicle_length: 4.5,
            vehicle_width: 2.0,
            lane_width: 3.5,
            turn_fraction: 0.0,
            // keeps a rotated 4.5 x 2 m footprint inside a 3.5 m lane over 7 s
            max_yaw_rate: 0.05,
            ego_speed: (0.0, 0.0),
            obstacle_density: 1.0,
            noise: 0.0,
        }
    }
}

const TEMPLATE_KEYS: &[&str] = &[
    "grid",
    "resolution",
    "n_frames",
    "dt",
    "min_agents",
    "max_agents",
    "max_speed",
    "speed_quantum",
    "vehicle_length",
    "vehicle_width",
    "lane_width",
    "turn_fraction",
    "max_yaw_rate",
    "ego_speed_min",
    "ego_speed_max",
    "obstacle_density",
    "noise",
];

impl SceneTemplate {
    /// Reads overrides from `key = value` text; `grid` is the side length in
    /// cells. Changing `grid`/`resolution`/`dt` re-derives the default
    /// speed quantum unless it is given explicitly.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let unknown = cfg.unknown_keys(TEMPLATE_KEYS);
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown scene keys: {}",
                unknown.join(", ")
            )));
        }
        let mut t = Self::default();
        let side: usize = cfg.parsed("grid")?.unwrap_or(t.grid.height);
        let res: f64 = cfg.parsed("resolution")?.unwrap_or(t.grid.resolution);
        t.grid = GridSpec::new(side, side, res)?;
        cfg.apply("n_frames", &mut t.n_frames)?;
        cfg.apply("dt", &mut t.dt)?;
        t.speed_quantum = t.grid.resolution / t.dt;
        cfg.apply("min_agents", &mut t.min_agents)?;
        cfg.apply("max_agents", &mut t.max_agents)?;
        cfg.apply("max_speed", &mut t.max_speed)?;
        cfg.apply("speed_quantum", &mut t.speed_quantum)?;
        cfg.apply("vehicle_length", &mut t.vehicle_length)?;
        cfg.apply("vehicle_width", &mut t.vehicle_width)?;
        cfg.apply("lane_width", &mut t.lane_width)?;
        cfg.apply("turn_fraction", &mut t.turn_fraction)?;
        cfg.apply("max_yaw_rate", &mut t.max_yaw_rate)?;
        cfg.apply("ego_speed_min", &mut t.ego_speed.0)?;
        cfg.apply("ego_speed_max", &mut t.ego_speed.1)?;
        cfg.apply("obstacle_density", &mut t.obstacle_density)?;
        cfg.apply("noise", &mut t.noise)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("grid", self.grid.height);
        kv.set("resolution", self.grid.resolution);
        kv.set("n_frames", self.n_frames);
        kv.set("dt", self.dt);
        kv.set("min_agents", self.min_agents);
        kv.set("max_agents", self.max_agents);
        kv.set("max_speed", self.max_speed);
        kv.set("speed_quantum", self.speed_quantum);
        kv.set("vehicle_length", self.vehicle_length);
        kv.set("vehicle_width", self.vehicle_width);
        kv.set("lane_width", self.lane_width);
        kv.set("turn_fraction", self.turn_fraction);
        kv.set("max_yaw_rate", self.max_yaw_rate);
        kv.set("ego_speed_min", self.ego_speed.0);
        kv.set("ego_speed_max", self.ego_speed.1);
        kv.set("obstacle_density", self.obstacle_density);
        kv.set("noise", self.noise);
        kv
    }

    fn lanes(&self) -> usize {
        let half = self.grid.width as f64 * self.grid.resolution / 2.0;
        // keep one meter of shoulder and the wall inside the grid
        (((2.0 * (half - 1.5)) / self.lane_width).floor() as usize).min(4)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.n_frames < 3 || !(self.dt > 0.0) {
            return bad(format!(
                "need n_frames >= 3 and dt > 0, got {} / {}",
                self.n_frames, self.dt
            ));
        }
        if self.min_agents > self.max_agents {
            return bad(format!(
                "min_agents {} > max_agents {}",
                self.min_agents, self.max_agents
            ));
        }
        if self.max_agents > self.lanes() {
            return bad(format!(
                "max_agents {} exceeds the {} lanes that fit the grid",
                self.max_agents,
                self.lanes()
            ));
        }
        if self.max_speed < 0.0 || self.speed_quantum < 0.0 {
            return bad("speeds must be non-negative".into());
        }
        if !(self.vehicle_length > 0.0
            && self.vehicle_width > 0.0
            && self.lane_width >= self.vehicle_width)
        {
            return bad("vehicle must be non-empty and fit its lane".into());
        }
        if !(self.vehicle_length < 2.0 * self.grid.extent) {
            return bad("vehicle longer than the grid".into());
        }
        if !(0.0..=1.0).contains(&self.turn_fraction) || !(0.0..=1.0).contains(&self.noise) {
            return bad("turn_fraction and noise must lie in [0, 1]".into());
        }
        if self.ego_speed.0 > self.ego_speed.1 || self.obstacle_density < 0.0 {
            return bad("invalid ego speed range or obstacle density".into());
        }
        Ok(())
    }

    fn draw_speed(&self, rng: &mut ChaCha8Rng) -> f64 {
        let span = 2.0 * self.grid.extent - self.vehicle_length;
        let duration = (self.n_frames - 1) as f64 * self.dt;
        let fit = (span / duration).min(self.max_speed);
        let mut v = rng.gen_range(-self.max_speed..=self.max_speed);
        if self.speed_quantum > 0.0 {
            let q = self.speed_quantum;
            let cap = (fit / q).floor() * q;
            v = ((v / q).round() * q).clamp(-cap, cap);
        } else {
            v = v.clamp(-fit, fit);
        }
        v
    }

    fn draw_scene(&self, rng: &mut ChaCha8Rng) -> Result<SceneSpec> {
        let lanes = self.lanes();
        let n_agents = rng.gen_range(self.min_agents..=self.max_agents);
        let mut lane_ids: Vec<usize> = (0..lanes).collect();
        for i in 0..n_agents {
            let j = rng.gen_range(i..lanes);
            lane_ids.swap(i, j);
        }
        let road_half = lanes as f64 * self.lane_width / 2.0;
        let e = self.grid.extent;
        let duration = (self.n_frames - 1) as f64 * self.dt;
        let half_len = self.vehicle_length / 2.0;

        let mut agents = Vec::with_capacity(n_agents);
        for &lane in &lane_ids[..n_agents] {
            let y = -road_half + (lane as f64 + 0.5) * self.lane_width;
            let v = self.draw_speed(rng);
            let travel = v * duration;
            // start so that both ends of the trajectory stay in view
            let lo = -e + half_len - travel.min(0.0);
            let hi = e - half_len - travel.max(0.0) - self.grid.resolution;
            let x0 = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let yaw_rate = if rng.gen_bool(self.turn_fraction) {
                rng.gen_range(-self.max_yaw_rate..=self.max_yaw_rate)
            } else {
                0.0
            };
            agents.push(Agent {
                footprint: BoxFootprint::new(x0, y, self.vehicle_length, self.vehicle_width, 0.0)?,
                velocity: (v, 0.0),
                yaw_rate,
            });
        }

        let ego = if self.ego_speed.1 > self.ego_speed.0 {
            let v = rng.gen_range(self.ego_speed.0..=self.ego_speed.1);
            if self.speed_quantum > 0.0 {
                (v / self.speed_quantum).round() * self.speed_quantum
            } else {
                v
            }
        } else {
            self.ego_speed.0
        };
        let ego_travel = ego.abs() * duration;

        // walls long enough never to end inside the grid
        let wall_len = 2.0 * (e + ego_travel) + 2.0;
        let mut boxes = Vec::new();
        for side in [-1.0, 1.0] {
            boxes.push(BoxFootprint::new(
                ego_travel / 2.0 * ego.signum(),
                side * (road_half + 0.5),
                wall_len,
                1.0,
                0.0,
            )?);
        }
        // obstacles on a 4 m lattice beside the road, covering the stretch
        // that scrolls into view
        let p = (self.obstacle_density * 16.0 / 100.0).min(1.0);
        let x_lo = -e - if ego < 0.0 { ego_travel } else { 0.0 };
        let x_hi = e + if ego > 0.0 { ego_travel } else { 0.0 };
        let mut x = x_lo + 2.0;
        while x < x_hi {
            let mut y = road_half + 3.0;
            while y < e {
                for side in [-1.0, 1.0] {
                    if p > 0.0 && rng.gen_bool(p) {
                        let l = rng.gen_range(1.0..3.5);
                        let w = rng.gen_range(1.0..3.5);
                        boxes.push(BoxFootprint::new(x, side * y, l, w, 0.0)?);
                    }
                }
                y += 4.0;
            }
            x += 4.0;
        }

        Ok(SceneSpec {
            grid: self.grid,
            n_frames: self.n_frames,
            dt: self.dt,
            agents,
            static_layout: StaticLayout { boxes },
            ego_motion: (ego, 0.0),
            noise: self.noise,
            seed: rng.gen(),
        })
    }
}

/// Per-scene seed derived from the dataset seed and the scene index.
fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws the scene specs of a dataset without rasterizing them.
pub fn dataset_specs(
    n_scenes: usize,
    template: &SceneTemplate,
    seed: u64,
) -> Result<Vec<SceneSpec>> {
    if n_scenes == 0 {
        return Err(Error::Config("n_scenes must be positive".into()));
    }
    template.validate()?;
    (0..n_scenes)
        .map(|i| template.draw_scene(&mut ChaCha8Rng::seed_from_u64(scene_seed(seed, i))))
        .collect()
}

pub fn generate_dataset(
    n_scenes: usize,
    template: &SceneTemplate,
    seed: u64,
) -> Result<Vec<GridSequence>> {
    dataset_specs(n_scenes, template, seed)?
        .par_iter()
        .map(generate_scene)
        .collect()
}
