//! Procedural multi-room floor plan and a ray-cast equirectangular renderer.
//!
//! Rooms are axis-aligned rectangles laid out in a row and joined by
//! doorways through 0.1 m thick walls. Each wall face has its own color and
//! stripe frequency. The camera sits at a fixed height between floor and
//! ceiling; a panorama column is one ray, and rows map pitch from straight
//! up (row 0) to straight down.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 2];
pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub rooms: usize,
    /// Room extent along x, wall center to wall center.
    pub room_width: f64,
    /// Room extent along y.
    pub room_depth: f64,
    pub door_width: f64,
    pub wall_thickness: f64,
    pub ceiling_height: f64,
    pub camera_height: f64,
    /// Minimum distance between a camera and any wall.
    pub clearance: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            rooms: 3,
            room_width: 5.0,
            room_depth: 4.0,
            door_width: 1.0,
            wall_thickness: 0.1,
            ceiling_height: 3.0,
            camera_height: 1.5,
            clearance: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub id: usize,
    /// Bounds measured at wall centers.
    pub min: Point,
    pub max: Point,
    pub floor: Rgb,
}

impl Room {
    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.min[0] && p[0] < self.max[0] && p[1] >= self.min[1] && p[1] < self.max[1]
    }

    /// Interior bounds shrunk by half the wall thickness plus `margin`.
    pub fn interior(&self, half_wall: f64, margin: f64) -> (Point, Point) {
        let m = half_wall + margin;
        (
            [self.min[0] + m, self.min[1] + m],
            [self.max[0] - m, self.max[1] - m],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub a: Point,
    pub b: Point,
    pub color: Rgb,
    /// Stripe frequency in cycles per meter along the wall.
    pub texture: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Door {
    /// Rooms joined by this doorway.
    pub rooms: (usize, usize),
    /// Center of the opening on the shared wall's center line.
    pub center: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub rooms: Vec<Room>,
    pub walls: Vec<Wall>,
    pub doors: Vec<Door>,
    pub ceiling: Rgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Point,
    /// Heading of panorama column 0, radians in `[0, 2π)`.
    pub heading: f64,
    pub room: usize,
}

/// Rendered equirectangular panorama, `H × W × 3` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoImage {
    pub pixels: Tensor<f32>,
    pub pose: Pose,
}

impl PanoImage {
    pub fn rotation_bin(&self, w: usize) -> usize {
        rotation_bin(self.pose.heading, w)
    }
}

/// `round(θ / 2π · w) mod w`
pub fn rotation_bin(heading: f64, w: usize) -> usize {
    ((heading / TAU * w as f64).round() as i64).rem_euclid(w as i64) as usize
}

pub fn normalize_heading(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Distance from `p` to segment `ab`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    distance(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Whether segments `pq` and `ab` intersect (touching counts).
fn segments_intersect(p: Point, q: Point, a: Point, b: Point) -> bool {
    let d1 = cross(sub(b, a), sub(p, a));
    let d2 = cross(sub(b, a), sub(q, a));
    let d3 = cross(sub(q, p), sub(a, p));
    let d4 = cross(sub(q, p), sub(b, p));
    ((d1 > 0.0) != (d2 > 0.0) || d1 == 0.0 || d2 == 0.0)
        && ((d3 > 0.0) != (d4 > 0.0) || d3 == 0.0 || d4 == 0.0)
}

/// Shading and texture shared by the renderer and its tests.
pub mod shading {
    use super::Rgb;
    use std::f64::consts::TAU;

    pub fn attenuation(range: f64) -> f64 {
        1.0 / (1.0 + 0.15 * range)
    }

    pub fn stripes(texture: u32, along: f64) -> f64 {
        0.7 + 0.3 * (TAU * texture as f64 * along).cos()
    }

    pub fn scale(c: Rgb, k: f64) -> Rgb {
        [c[0] * k, c[1] * k, c[2] * k]
    }
}

impl World {
    pub fn generate(config: &WorldConfig) -> Result<World> {
        if config.rooms == 0 {
            return Err(Error::InvalidConfig {
                field: "world.rooms".into(),
                reason: "need at least one room".into(),
            });
        }
        let min_side = config.room_width.min(config.room_depth);
        if config.door_width + 2.0 * config.wall_thickness >= config.room_depth
            || 2.0 * (config.clearance + config.wall_thickness) >= min_side
        {
            return Err(Error::InvalidConfig {
                field: "world.room_depth".into(),
                reason: "rooms too small for doors and clearance".into(),
            });
        }
        if !(0.0 < config.camera_height && config.camera_height < config.ceiling_height) {
            return Err(Error::InvalidConfig {
                field: "world.camera_height".into(),
                reason: "camera must be between floor and ceiling".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (rw, rd) = (config.room_width, config.room_depth);
        let half = config.wall_thickness / 2.0;
        let hue0: f64 = rng.gen();
        let mut face = 0usize;
        let mut next_face = |rng: &mut ChaCha8Rng| -> (Rgb, u32) {
            // golden-ratio hue spacing keeps every face distinct
            let hue = hue0 + face as f64 * 0.618_033_988_75;
            face += 1;
            let color = hsv(hue, rng.gen_range(0.45..0.85), rng.gen_range(0.55..0.95));
            (color, rng.gen_range(1..=4))
        };

        let mut rooms = Vec::new();
        let mut walls = Vec::new();
        let mut doors = Vec::new();
        let jamb: Rgb = [0.25, 0.25, 0.25];
        for i in 0..config.rooms {
            let x0 = i as f64 * rw;
            let x1 = x0 + rw;
            let floor = hsv(
                hue0 + 0.5 + i as f64 * 0.37,
                0.3,
                0.35 + 0.1 * (i % 3) as f64,
            );
            rooms.push(Room {
                id: i,
                min: [x0, 0.0],
                max: [x1, rd],
                floor,
            });
            let (ix0, ix1) = (x0 + half, x1 - half);
            let (iy0, iy1) = (half, rd - half);
            let door_lo = rd / 2.0 - config.door_width / 2.0;
            let door_hi = rd / 2.0 + config.door_width / 2.0;

            let (c, t) = next_face(&mut rng);
            walls.push(Wall {
                a: [ix0, iy0],
                b: [ix1, iy0],
                color: c,
                texture: t,
            });
            let (c, t) = next_face(&mut rng);
            walls.push(Wall {
                a: [ix1, iy1],
                b: [ix0, iy1],
                color: c,
                texture: t,
            });
            for (x, has_door) in [(ix0, i > 0), (ix1, i + 1 < config.rooms)] {
                let (c, t) = next_face(&mut rng);
                if has_door {
                    walls.push(Wall {
                        a: [x, iy0],
                        b: [x, door_lo],
                        color: c,
                        texture: t,
                    });
                    walls.push(Wall {
                        a: [x, door_hi],
                        b: [x, iy1],
                        color: c,
                        texture: t,
                    });
                } else {
                    walls.push(Wall {
                        a: [x, iy0],
                        b: [x, iy1],
                        color: c,
                        texture: t,
                    });
                }
            }
            if i + 1 < config.rooms {
                for y in [door_lo, door_hi] {
                    walls.push(Wall {
                        a: [x1 - half, y],
                        b: [x1 + half, y],
                        color: jamb,
                        texture: 1,
                    });
                }
                doors.push(Door {
                    rooms: (i, i + 1),
                    center: [x1, rd / 2.0],
                });
            }
        }
        Ok(World {
            config: config.clone(),
            rooms,
            walls,
            doors,
            ceiling: [0.9, 0.9, 0.88],
        })
    }

    /// Room label of a point, or `None` outside every room.
    pub fn room_of(&self, p: Point) -> Option<usize> {
        self.rooms.iter().find(|r| r.contains(p)).map(|r| r.id)
    }

    /// Inside a room and at least `clearance` away from every wall.
    pub fn is_free(&self, p: Point) -> bool {
        self.room_of(p).is_some()
            && self
                .walls
                .iter()
                .all(|w| point_segment_distance(p, w.a, w.b) >= self.config.clearance)
    }

    /// Straight-line path between two points crosses no wall.
    pub fn line_of_sight(&self, p: Point, q: Point) -> bool {
        !self
            .walls
            .iter()
            .any(|w| segments_intersect(p, q, w.a, w.b))
    }

    pub fn pose(&self, position: Point, heading: f64) -> Result<Pose> {
        if !self.is_free(position) {
            return Err(Error::InvalidPose {
                x: position[0],
                y: position[1],
            });
        }
        Ok(Pose {
            position,
            heading: normalize_heading(heading),
            room: self.room_of(position).expect("free points lie in a room"),
        })
    }

    /// Uniform free point inside `room` (rejection sampled).
    pub fn sample_in_room<R: Rng>(&self, room: usize, rng: &mut R) -> Result<Point> {
        let r = self
            .rooms
            .get(room)
            .ok_or_else(|| Error::invalid(format!("no room {room}")))?;
        let (lo, hi) = r.interior(self.config.wall_thickness / 2.0, self.config.clearance);
        for _ in 0..10_000 {
            let p = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
            if self.is_free(p) && self.room_of(p) == Some(room) {
                return Ok(p);
            }
        }
        Err(Error::RoomTooSmall {
            room,
            x: r.min[0],
            y: r.min[1],
            min_dist: 0.0,
        })
    }

    /// Nearest wall hit along a ray: `(range, wall index, distance along wall)`.
    pub fn cast(&self, origin: Point, angle: f64) -> Option<(f64, usize, f64)> {
        let dir = [angle.cos(), angle.sin()];
        let mut best: Option<(f64, usize, f64)> = None;
        for (i, w) in self.walls.iter().enumerate() {
            let e = sub(w.b, w.a);
            let denom = cross(dir, e);
            if denom.abs() < 1e-15 {
                continue;
            }
            let ao = sub(w.a, origin);
            let t = cross(ao, e) / denom;
            let s = cross(ao, dir) / denom;
            if t > 1e-12 && (0.0..=1.0).contains(&s) && best.map_or(true, |b| t < b.0) {
                best = Some((t, i, s * distance(w.a, w.b)));
            }
        }
        best
    }

    /// Panorama at `pose`, `h × w` pixels.
    pub fn render_pano(&self, pose: &Pose, h: usize, w: usize) -> Result<PanoImage> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("render size must be positive"));
        }
        if !self.is_free(pose.position) {
            return Err(Error::InvalidPose {
                x: pose.position[0],
                y: pose.position[1],
            });
        }
        let mut data = vec![0.0f32; h * w * 3];
        let angles = column_angles(pose.heading, w);
        for (j, &angle) in angles.iter().enumerate() {
            let column = self.render_column(pose.position, angle, h);
            for (i, rgb) in column.iter().enumerate() {
                for c in 0..3 {
                    data[(i * w + j) * 3 + c] = rgb[c] as f32;
                }
            }
        }
        Ok(PanoImage {
            pixels: Tensor::new(vec![h, w, 3], data)?,
            pose: *pose,
        })
    }

    fn render_column(&self, origin: Point, angle: f64, h: usize) -> Vec<Rgb> {
        let hit = self.cast(origin, angle);
        let dir = [angle.cos(), angle.sin()];
        let cam = self.config.camera_height;
        let ceil = self.config.ceiling_height;
        (0..h)
            .map(|i| {
                let pitch = PI / 2.0 - (i as f64 + 0.5) * PI / h as f64;
                let rise = pitch.tan();
                match hit {
                    Some((t, wi, along)) if (-cam..=ceil - cam).contains(&(t * rise)) => {
                        let wall = &self.walls[wi];
                        let slant = t.hypot(t * rise);
                        let k = shading::stripes(wall.texture, along) * shading::attenuation(slant);
                        shading::scale(wall.color, k)
                    }
                    _ if pitch > 0.0 => {
                        let run = (ceil - cam) / rise;
                        let slant = run.hypot(ceil - cam);
                        shading::scale(self.ceiling, shading::attenuation(slant))
                    }
                    _ => {
                        let run = cam / -rise;
                        let p = [origin[0] + run * dir[0], origin[1] + run * dir[1]];
                        let floor = self
                            .room_of(p)
                            .map_or([0.0, 0.0, 0.0], |r| self.rooms[r].floor);
                        shading::scale(floor, shading::attenuation(run.hypot(cam)))
                    }
                }
            })
            .collect()
    }
}

/// Ray angle per column. Column angles come from integer column indices
/// whenever the heading is a whole number of columns, so headings that
/// differ by `k` columns render exact `k`-column rotations.
pub fn column_angles(heading: f64, w: usize) -> Vec<f64> {
    let step = TAU / w as f64;
    let s = normalize_heading(heading) / step;
    let nearest = s.round();
    let (base, frac) = if (s - nearest).abs() < 1e-9 {
        (nearest as i64, 0.0)
    } else {
        (s.floor() as i64, (s - s.floor()) * step)
    };
    (0..w as i64)
        .map(|j| ((base + j).rem_euclid(w as i64)) as f64 * step + frac)
        .collect()
}
