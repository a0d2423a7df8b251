//! Conversion of per-frame image files into a [`GridSequence`].
//!
//! The manifest is a `key = value` file:
//!
//! ```text
//! dt = 0.5
//! resolution = 0.1
//! channels = static,semantic    # or semantic,static | merged | rgb
//! resize = 64x64                # optional area-averaged downsample
//! frame = f000_static.png f000_semantic.png
//! frame = f001_static.png f001_semantic.png
//! ```
//!
//! Grayscale images map 0..255 onto occupancy 0..1, one file per channel in
//! the listed order. With `channels = rgb` each frame is one color image whose
//! green plane is the vehicle channel and whose blue plane is the static
//! channel.

use std::path::Path;

use super::{resize_grid, GridSequence, GridSpec, OccupancyGrid, SEMANTIC, STATIC};
use crate::config::KvConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Layout {
    Gray { semantic_first: bool, count: usize },
    Rgb,
}

fn parse_layout(v: &str) -> Result<Layout> {
    let names: Vec<String> = v
        .split(',')
        .map(|s| s.trim().to_ascii_lowercase())
        .collect();
    match names
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .as_slice()
    {
        ["rgb"] => Ok(Layout::Rgb),
        ["merged"] | ["combined"] => Ok(Layout::Gray {
            semantic_first: false,
            count: 1,
        }),
        ["static", "semantic"] => Ok(Layout::Gray {
            semantic_first: false,
            count: 2,
        }),
        ["semantic", "static"] => Ok(Layout::Gray {
            semantic_first: true,
            count: 2,
        }),
        _ => Err(Error::Config(format!("unknown channel order `{v}`"))),
    }
}

fn to_unit(v: u8) -> f32 {
    v as f32 / 255.0
}

fn load_frame(dir: &Path, files: &[&str], layout: Layout) -> Result<(usize, usize, Vec<Vec<f32>>)> {
    match layout {
        Layout::Rgb => {
            let [file] = files else {
                return Err(Error::Config(format!(
                    "rgb frames take one image, got {files:?}"
                )));
            };
            let img = image::open(dir.join(file))?.to_rgb8();
            let (w, h) = img.dimensions();
            let mut chans = vec![Vec::with_capacity((w * h) as usize); 2];
            for px in img.pixels() {
                chans[STATIC].push(to_unit(px[2]));
                chans[SEMANTIC].push(to_unit(px[1]));
            }
            Ok((h as usize, w as usize, chans))
        }
        Layout::Gray {
            semantic_first,
            count,
        } => {
            if files.len() != count {
                return Err(Error::Config(format!(
                    "expected {count} image(s) per frame, got {files:?}"
                )));
            }
            let mut dims = None;
            let mut chans = Vec::with_capacity(count);
            for file in files {
                let img = image::open(dir.join(file))?.to_luma8();
                let d = img.dimensions();
                if *dims.get_or_insert(d) != d {
                    return Err(Error::Input(format!(
                        "{file}: size {d:?} differs from {dims:?}"
                    )));
                }
                chans.push(img.pixels().map(|p| to_unit(p[0])).collect());
            }
            if semantic_first {
                chans.swap(0, 1);
            }
            let (w, h) = dims.unwrap();
            Ok((h as usize, w as usize, chans))
        }
    }
}

/// Reads every frame listed in `manifest`, resolving image paths against `images`.
pub fn import_sequence(images: &Path, manifest: &Path) -> Result<GridSequence> {
    let cfg = KvConfig::load(manifest)?;
    let dt: f64 = cfg.require("dt")?;
    let resolution: f64 = cfg.parsed("resolution")?.unwrap_or(0.1);
    let layout = parse_layout(cfg.get("channels").unwrap_or("static,semantic"))?;
    let resize = cfg
        .get("resize")
        .map(|v| {
            let (h, w) = v
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("resize `{v}` is not HxW")))?;
            let p = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("resize `{v}`: {e}")))
            };
            Ok::<_, Error>((p(h)?, p(w)?))
        })
        .transpose()?;

    let mut frames = Vec::new();
    let mut spec: Option<GridSpec> = None;
    for (k, line) in cfg.get_all("frame").enumerate() {
        let files: Vec<&str> = line.split_whitespace().collect();
        let (h, w, chans) = load_frame(images, &files, layout)?;
        let s = *spec.get_or_insert(GridSpec::new(h, w, resolution)?);
        if (s.height, s.width) != (h, w) {
            return Err(Error::Input(format!(
                "frame {k}: size {h}x{w} differs from {}x{}",
                s.height, s.width
            )));
        }
        let mut grid = OccupancyGrid::new(s, chans, k as f64 * dt)?;
        if let Some((nh, nw)) = resize {
            grid = resize_grid(&grid, nh, nw)?;
        }
        frames.push(grid);
    }
    if frames.is_empty() {
        return Err(Error::Config("manifest lists no `frame` entries".into()));
    }
    GridSequence::new(frames, dt)
}
