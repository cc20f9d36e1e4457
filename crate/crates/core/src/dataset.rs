//! Labeled panorama sets: the training protocol (exemplar + nearby + far
//! samples), map tours with queries, and the on-disk dataset layout.
//!
//! A dataset directory holds `meta.json`, `manifest.jsonl` (one
//! [`SampleRecord`] per line) and `px/<id>.bin` pixel files. A pixel file
//! is a 16-byte header (`OPIX`, then `H`, `W`, `C` as little-endian `u32`)
//! followed by `H·W·C` little-endian `f32` values.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::short_hash;
use crate::loss::SampleLabel;
use crate::tensor::Tensor;
use crate::world::{distance, rotation_bin, PanoImage, Point, Pose, World};

pub const DATASET_VERSION: u32 = 1;
const PIXEL_MAGIC: &[u8; 4] = b"OPIX";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Exemplar,
    Near,
    Far,
    Map,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u32,
    pub kind: SampleKind,
    pub room: usize,
    pub place: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub rotation_bin: usize,
    pub file: String,
    /// Hash of the pixel file contents.
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_closest: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record: SampleRecord,
    pub image: PanoImage,
}

impl Sample {
    pub fn label(&self) -> SampleLabel {
        SampleLabel {
            room: self.record.room,
            place: self.record.place,
            position: [self.record.x, self.record.y],
            rotation: self.record.rotation_bin,
        }
    }

    pub fn position(&self) -> Point {
        [self.record.x, self.record.y]
    }
}

/// Image geometry shared by every sample of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Rotation bins (the model's feature width).
    pub bins: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            height: 32,
            width: 64,
            bins: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub render: RenderConfig,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<SampleLabel> {
        self.samples.iter().map(Sample::label).collect()
    }

    pub fn of_kind(&self, kinds: &[SampleKind]) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| kinds.contains(&s.record.kind))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingProtocol {
    /// Nearby samples per exemplar.
    pub near: usize,
    /// Far, same-room samples per exemplar.
    pub far: usize,
    /// Radius of the nearby disc; far samples lie beyond twice this.
    pub near_radius: f64,
}

impl Default for TrainingProtocol {
    fn default() -> Self {
        TrainingProtocol {
            near: 9,
            far: 4,
            near_radius: 0.5,
        }
    }
}

fn pixel_bytes(px: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + px.numel() * 4);
    out.extend_from_slice(PIXEL_MAGIC);
    for d in px.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in px.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn make_sample(
    world: &World,
    id: u32,
    kind: SampleKind,
    place: usize,
    pose: Pose,
    render: &RenderConfig,
) -> Result<Sample> {
    let image = world.render_pano(&pose, render.height, render.width)?;
    let checksum = short_hash(&pixel_bytes(&image.pixels));
    Ok(Sample {
        record: SampleRecord {
            id,
            kind,
            room: pose.room,
            place,
            x: pose.position[0],
            y: pose.position[1],
            theta: pose.heading,
            rotation_bin: rotation_bin(pose.heading, render.bins),
            file: format!("px/{id:06}.bin"),
            checksum,
            gt_closest: None,
            gt_distance: None,
        },
        image,
    })
}

fn random_bin_heading<R: Rng>(bins: usize, rng: &mut R) -> f64 {
    rng.gen_range(0..bins) as f64 * TAU / bins as f64
}

/// Training samples: for each exemplar location, the exemplar itself,
/// `near` samples uniform in a disc around it and `far` samples in the same
/// room beyond twice the disc radius, each at a random rotation bin.
/// Exemplars cycle through the rooms.
pub fn generate_dataset(
    world: &World,
    n_exemplars: usize,
    protocol: &TrainingProtocol,
    render: &RenderConfig,
    seed: u64,
) -> Result<Vec<Sample>> {
    if n_exemplars == 0 {
        return Err(Error::invalid("n_exemplars must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_exemplars * (1 + protocol.near + protocol.far));
    let mut next_id = 0u32;
    let mut push = |samples: &mut Vec<Sample>, kind, place, pose| -> Result<()> {
        samples.push(make_sample(world, next_id, kind, place, pose, render)?);
        next_id += 1;
        Ok(())
    };
    let rho = protocol.near_radius;
    for e in 0..n_exemplars {
        let room = e % world.rooms.len();
        let center = world.sample_in_room(room, &mut rng)?;
        let heading = random_bin_heading(render.bins, &mut rng);
        push(
            &mut samples,
            SampleKind::Exemplar,
            e,
            world.pose(center, heading)?,
        )?;

        for _ in 0..protocol.near {
            // invalid draws (in a wall, through a wall) are discarded
            let p = (0..10_000)
                .map(|_| {
                    let r = rho * rng.gen::<f64>().sqrt();
                    let a = rng.gen_range(0.0..TAU);
                    [center[0] + r * a.cos(), center[1] + r * a.sin()]
                })
                .find(|&p| {
                    world.is_free(p)
                        && world.room_of(p) == Some(room)
                        && world.line_of_sight(center, p)
                })
                .ok_or(Error::RoomTooSmall {
                    room,
                    x: center[0],
                    y: center[1],
                    min_dist: 0.0,
                })?;
            let heading = random_bin_heading(render.bins, &mut rng);
            push(&mut samples, SampleKind::Near, e, world.pose(p, heading)?)?;
        }
        for f in 0..protocol.far {
            let p = (0..2_000)
                .map(|_| world.sample_in_room(room, &mut rng))
                .find(|p| {
                    p.as_ref()
                        .map_or(true, |p| distance(*p, center) > 2.0 * rho)
                })
                .transpose()?
                .ok_or(Error::RoomTooSmall {
                    room,
                    x: center[0],
                    y: center[1],
                    min_dist: 2.0 * rho,
                })?;
            let heading = random_bin_heading(render.bins, &mut rng);
            // far samples form singleton places
            let place = n_exemplars + e * protocol.far + f;
            push(
                &mut samples,
                SampleKind::Far,
                place,
                world.pose(p, heading)?,
            )?;
        }
    }
    Ok(samples)
}

/// Points along a room-covering tour at arc-length spacing `spacing`.
///
/// Each room is swept in lanes `spacing` apart; consecutive rooms are
/// joined through the doorway between them.
pub fn tour_points(world: &World, spacing: f64) -> Result<Vec<Point>> {
    if !(spacing > 0.0) {
        return Err(Error::invalid("map spacing must be positive"));
    }
    let half = world.config.wall_thickness / 2.0;
    let margin = world.config.clearance + 0.05;
    let mut polyline: Vec<Point> = Vec::new();
    for (i, room) in world.rooms.iter().enumerate() {
        let (lo, hi) = room.interior(half, margin);
        let lanes = ((hi[1] - lo[1]) / spacing).floor() as usize + 1;
        let offset = (hi[1] - lo[1] - (lanes - 1) as f64 * spacing) / 2.0;
        for lane in 0..lanes {
            let y = lo[1] + offset + lane as f64 * spacing;
            if lane % 2 == 0 {
                polyline.extend([[lo[0], y], [hi[0], y]]);
            } else {
                polyline.extend([[hi[0], y], [lo[0], y]]);
            }
        }
        if let Some(door) = world.doors.iter().find(|d| d.rooms.0 == i) {
            let reach = half + margin;
            polyline.push([door.center[0] - reach, door.center[1]]);
            polyline.push([door.center[0] + reach, door.center[1]]);
        }
    }
    let mut points = vec![polyline[0]];
    let mut carried = 0.0;
    for seg in polyline.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = distance(a, b);
        let mut s = spacing - carried;
        while s <= len + 1e-12 {
            let t = s / len;
            points.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
            s += spacing;
        }
        carried = len - (s - spacing);
    }
    Ok(points)
}

/// Map exemplars along a tour plus uniformly placed queries. Each query
/// carries the id of its physically closest exemplar (lowest id on ties)
/// and the distance to it.
pub fn sample_map_and_queries(
    world: &World,
    map_spacing: f64,
    n_queries: usize,
    render: &RenderConfig,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = Vec::new();
    for (k, p) in tour_points(world, map_spacing)?.into_iter().enumerate() {
        let heading = random_bin_heading(render.bins, &mut rng);
        map.push(make_sample(
            world,
            k as u32,
            SampleKind::Map,
            k,
            world.pose(p, heading)?,
            render,
        )?);
    }
    let areas: Vec<f64> = world
        .rooms
        .iter()
        .map(|r| (r.max[0] - r.min[0]) * (r.max[1] - r.min[1]))
        .collect();
    let total: f64 = areas.iter().sum();
    let mut queries = Vec::with_capacity(n_queries);
    for q in 0..n_queries {
        let mut u = rng.gen_range(0.0..total);
        let room = areas
            .iter()
            .position(|&a| {
                u -= a;
                u < 0.0
            })
            .unwrap_or(areas.len() - 1);
        let p = world.sample_in_room(room, &mut rng)?;
        let heading = rng.gen_range(0..render.width) as f64 * TAU / render.width as f64;
        let id = (map.len() + q) as u32;
        let mut s = make_sample(
            world,
            id,
            SampleKind::Query,
            usize::MAX,
            world.pose(p, heading)?,
            render,
        )?;
        let (best, d) = closest_exemplar(&map, p);
        s.record.place = map[best].record.place;
        s.record.gt_closest = Some(map[best].record.id);
        s.record.gt_distance = Some(d);
        queries.push(s);
    }
    Ok((map, queries))
}

/// Index and distance of the physically closest sample; lowest index wins ties.
pub fn closest_exemplar(map: &[Sample], p: Point) -> (usize, f64) {
    map.iter()
        .enumerate()
        .map(|(i, s)| (i, distance(s.position(), p)))
        .fold(
            (0, f64::INFINITY),
            |best, c| if c.1 < best.1 { c } else { best },
        )
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let px_dir = dir.join("px");
        fs::create_dir_all(&px_dir).map_err(|e| Error::io(&px_dir, e))?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
        let manifest_path = dir.join("manifest.jsonl");
        let mut manifest = Vec::new();
        for s in &self.samples {
            let line = serde_json::to_string(&s.record).expect("record serializes");
            writeln!(manifest, "{line}").expect("write to vec");
            let path = dir.join(&s.record.file);
            fs::write(&path, pixel_bytes(&s.image.pixels)).map_err(|e| Error::io(&path, e))?;
        }
        fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if meta.version != DATASET_VERSION {
            return Err(Error::Version {
                path: meta_path,
                found: meta.version,
                expected: DATASET_VERSION,
            });
        }
        let manifest_path = dir.join("manifest.jsonl");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut samples = Vec::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let record: SampleRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", n + 1)))?;
            let pixels = read_pixels(&dir.join(&record.file), &record.checksum, &meta.render)?;
            let image = PanoImage {
                pixels,
                pose: Pose {
                    position: [record.x, record.y],
                    heading: record.theta,
                    room: record.room,
                },
            };
            samples.push(Sample { record, image });
        }
        Ok(Dataset { meta, samples })
    }
}

fn read_pixels(path: &PathBuf, checksum: &str, render: &RenderConfig) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if short_hash(&bytes) != checksum {
        return Err(Error::Checksum { path: path.clone() });
    }
    if bytes.len() < 16 || &bytes[..4] != PIXEL_MAGIC {
        return Err(Error::format(path, "not a pixel file"));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    if shape != [render.height, render.width, 3] {
        return Err(Error::format(
            path,
            format!("pixel shape {shape:?} does not match dataset"),
        ));
    }
    let body = &bytes[16..];
    if body.len() != shape.iter().product::<usize>() * 4 {
        return Err(Error::format(path, "pixel data length mismatch"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}
