//! Local search navigation: align the heading with the target once, then
//! repeatedly evaluate a potential on a grid around the agent and move to
//! the lowest cell.

use std::f64::consts::TAU;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::RenderConfig;
use crate::error::{Error, Result};
use crate::map::MapIndex;
use crate::model::{FeatureMap, Model};
use crate::world::{distance, normalize_heading, Point, Pose, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Cells per side of the search grid (odd).
    pub grid: usize,
    /// Cell spacing in meters.
    pub spacing: f64,
    /// Success radius in meters.
    pub tolerance: f64,
    /// Maximum number of moves.
    pub budget: usize,
    /// Turn to the target's capture heading before searching.
    pub orient: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            grid: 9,
            spacing: 0.25,
            tolerance: 0.3,
            budget: 100,
            orient: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::InvalidConfig {
                field: format!("policy.{field}"),
                reason: reason.into(),
            })
        };
        if self.grid % 2 == 0 {
            return bad("grid", "must be odd");
        }
        if !(self.spacing > 0.0) {
            return bad("spacing", "must be positive");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance", "must be non-negative");
        }
        Ok(())
    }
}

/// What the agent minimizes. Lower is assumed closer to the target.
pub trait Potential {
    /// Potential at `pose` and the estimated rotation (in bins) that would
    /// align the view with the target.
    fn evaluate(&mut self, world: &World, pose: &Pose) -> Result<(f64, usize)>;

    /// Number of rotation bins `r_hat` is expressed in.
    fn bins(&self) -> usize;

    /// Called with the agent's pose before each grid search.
    fn observe_agent(&mut self, _agent: &Pose) {}
}

/// Feature distance between the rendered view and a target feature.
pub struct FeaturePotential<'a> {
    pub model: &'a Model,
    pub target: FeatureMap,
    pub render: RenderConfig,
}

impl Potential for FeaturePotential<'_> {
    fn evaluate(&mut self, world: &World, pose: &Pose) -> Result<(f64, usize)> {
        let view = world.render_pano(pose, self.render.height, self.render.width)?;
        let f = self.model.forward(&view.pixels)?;
        let d = self.model.distance(&f, &self.target)?;
        Ok((d.d_min, d.r_hat))
    }

    fn bins(&self) -> usize {
        self.model.config().w
    }
}

/// True physical distance to the target, with the exact rotation.
pub struct OraclePotential {
    pub target: Point,
    pub target_heading: f64,
    pub bins: usize,
}

impl Potential for OraclePotential {
    fn evaluate(&mut self, _world: &World, pose: &Pose) -> Result<(f64, usize)> {
        let turn = normalize_heading(self.target_heading - pose.heading);
        let r = (turn / TAU * self.bins as f64).round() as usize % self.bins;
        Ok((distance(pose.position, self.target), r))
    }

    fn bins(&self) -> usize {
        self.bins
    }
}

/// Random moves: independent uniform values on the cells within `reach`
/// grid steps of the agent (Chebyshev distance, own cell excluded) and
/// infinity elsewhere, so the selected cell is a uniformly random one of
/// them. `reach = 1` is a random walk over the eight neighbors; `reach`
/// equal to half the grid allows any reachable grid cell.
pub struct RandomPotential {
    rng: ChaCha8Rng,
    bins: usize,
    reach: usize,
    spacing: f64,
    agent: Point,
}

impl RandomPotential {
    pub fn new(seed: u64, bins: usize, reach: usize, spacing: f64) -> Self {
        RandomPotential {
            rng: ChaCha8Rng::seed_from_u64(seed),
            bins,
            reach,
            spacing,
            agent: [f64::NAN; 2],
        }
    }
}

impl Potential for RandomPotential {
    fn evaluate(&mut self, _world: &World, pose: &Pose) -> Result<(f64, usize)> {
        let u: f64 = self.rng.gen();
        let cells = |k: usize| {
            ((pose.position[k] - self.agent[k]) / self.spacing)
                .round()
                .abs() as usize
        };
        let (dx, dy) = (cells(0), cells(1));
        let within = dx.max(dy) <= self.reach && dx + dy > 0;
        Ok((if within { u } else { f64::INFINITY }, 0))
    }

    fn bins(&self) -> usize {
        self.bins
    }

    fn observe_agent(&mut self, agent: &Pose) {
        self.agent = agent.position;
    }
}

/// Heading after turning by `r_hat` bins.
pub fn orient(heading: f64, r_hat: usize, bins: usize) -> f64 {
    normalize_heading(heading + r_hat as f64 * TAU / bins as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    /// Reachable cells in row-major grid order with their potential.
    pub cells: Vec<(Point, f64)>,
}

impl PotentialField {
    /// Lowest cell; the first one in grid order wins ties.
    pub fn argmin(&self) -> (Point, f64) {
        self.cells
            .iter()
            .copied()
            .reduce(|best, c| if c.1 < best.1 { c } else { best })
            .expect("a field has at least one cell")
    }
}

/// Evaluates every grid cell around `pose` that is free space and in a
/// straight line from the agent; in-wall cells are skipped.
pub fn local_search<P: Potential + ?Sized>(
    world: &World,
    potential: &mut P,
    pose: &Pose,
    config: &PolicyConfig,
) -> Result<PotentialField> {
    potential.observe_agent(pose);
    let half = (config.grid / 2) as i64;
    let mut cells = Vec::new();
    for a in -half..=half {
        for b in -half..=half {
            let p = [
                pose.position[0] + b as f64 * config.spacing,
                pose.position[1] + a as f64 * config.spacing,
            ];
            let reachable =
                (a == 0 && b == 0) || (world.is_free(p) && world.line_of_sight(pose.position, p));
            if !reachable {
                continue;
            }
            let Ok(cell) = world.pose(p, pose.heading) else {
                continue;
            };
            let (d, _) = potential.evaluate(world, &cell)?;
            cells.push((p, d));
        }
    }
    if cells.is_empty() {
        return Err(Error::NoReachableCell);
    }
    Ok(PotentialField { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Potential of the selected cell.
    pub potential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub start: Pose,
    pub target_id: u32,
    pub target: Point,
    /// Every pose the agent occupied, starting with `start`.
    pub trajectory: Vec<Pose>,
    pub log: Vec<StepRecord>,
    pub feature_evaluations: usize,
    /// Cell selections made, including ones that stayed put.
    pub steps: usize,
    pub success: bool,
    pub stuck: bool,
    pub final_distance: f64,
}

impl Episode {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.log {
            writeln!(
                out,
                "{}",
                serde_json::to_string(r).expect("record serializes")
            )
            .expect("write to vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Runs one episode towards `target`.
///
/// Success is checked before every selection; the episode ends when the
/// agent is within tolerance, the budget is spent, or the grid minimum is
/// the agent's own cell twice in a row.
pub fn navigate<P: Potential + ?Sized>(
    world: &World,
    potential: &mut P,
    start: Pose,
    target_id: u32,
    target: Point,
    config: &PolicyConfig,
) -> Result<Episode> {
    config.validate()?;
    let mut pose = world.pose(start.position, start.heading)?;
    let mut trajectory = vec![pose];
    let mut log = Vec::new();
    let mut evaluations = 0;
    if config.orient {
        let (_, r_hat) = potential.evaluate(world, &pose)?;
        evaluations += 1;
        pose.heading = orient(pose.heading, r_hat, potential.bins());
    }
    let mut steps = 0;
    let mut idle = 0;
    let mut stuck = false;
    while distance(pose.position, target) > config.tolerance && steps < config.budget {
        let field = local_search(world, potential, &pose, config)?;
        evaluations += field.cells.len();
        let (cell, d) = field.argmin();
        steps += 1;
        log.push(StepRecord {
            step: steps,
            x: cell[0],
            y: cell[1],
            heading: pose.heading,
            potential: d,
        });
        if cell == pose.position {
            idle += 1;
            if idle >= 2 {
                stuck = true;
                break;
            }
            continue;
        }
        idle = 0;
        pose = world.pose(cell, pose.heading)?;
        trajectory.push(pose);
    }
    let final_distance = distance(pose.position, target);
    Ok(Episode {
        start,
        target_id,
        target,
        trajectory,
        log,
        feature_evaluations: evaluations,
        steps,
        success: final_distance <= config.tolerance,
        stuck,
        final_distance,
    })
}

/// Navigates to a map exemplar using the model's features.
pub fn navigate_to_exemplar(
    world: &World,
    model: &Model,
    map: &MapIndex,
    render: &RenderConfig,
    start: Pose,
    target_id: u32,
    config: &PolicyConfig,
) -> Result<Episode> {
    map.check_model(model.hash())?;
    let record = map.get(target_id)?;
    let mut potential = FeaturePotential {
        model,
        target: FeatureMap {
            values: record.feature.clone(),
            model_hash: map.model_hash.clone(),
        },
        render: *render,
    };
    navigate(
        world,
        &mut potential,
        start,
        target_id,
        record.position,
        config,
    )
}

/// A start pose and target exemplar for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub start: Pose,
    pub target_id: u32,
}

/// Episodes whose start lies in the target's room at a distance in
/// `[min_dist, max_dist]`, with a random heading.
pub fn sample_episodes(
    world: &World,
    map: &MapIndex,
    n: usize,
    min_dist: f64,
    max_dist: f64,
    seed: u64,
) -> Result<Vec<EpisodeSpec>> {
    if map.is_empty() {
        return Err(Error::Empty("map"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(n);
    let mut attempts = 0;
    while specs.len() < n {
        attempts += 1;
        if attempts > 1000 * n.max(1) {
            return Err(Error::invalid(format!(
                "could not place starts {min_dist}-{max_dist} m from any exemplar"
            )));
        }
        let target = &map.records[rng.gen_range(0..map.len())];
        let p = world.sample_in_room(target.room, &mut rng)?;
        let d = distance(p, target.position);
        if d < min_dist || d > max_dist {
            continue;
        }
        specs.push(EpisodeSpec {
            start: world.pose(p, rng.gen_range(0.0..TAU))?,
            target_id: target.id,
        });
    }
    Ok(specs)
}

/// Which potential drives an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NavPolicy {
    /// Feature distance to the target exemplar.
    Feature,
    /// True distance to the target.
    Oracle,
    /// Uniformly random neighbouring cell.
    RandomWalk,
    /// Uniformly random cell anywhere on the grid.
    RandomJump,
}

impl NavPolicy {
    pub const ALL: [NavPolicy; 4] = [
        NavPolicy::Feature,
        NavPolicy::Oracle,
        NavPolicy::RandomWalk,
        NavPolicy::RandomJump,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NavPolicy::Feature => "feature",
            NavPolicy::Oracle => "oracle",
            NavPolicy::RandomWalk => "random-walk",
            NavPolicy::RandomJump => "random-jump",
        }
    }
}

impl std::str::FromStr for NavPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<NavPolicy> {
        NavPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown navigation policy {s:?}")))
    }
}

/// Runs every episode under `policy`. Episode `i` of a random policy is
/// seeded with `seed + i`.
#[allow(clippy::too_many_arguments)]
pub fn run_episodes(
    world: &World,
    model: &Model,
    map: &MapIndex,
    render: &RenderConfig,
    specs: &[EpisodeSpec],
    policy: NavPolicy,
    config: &PolicyConfig,
    seed: u64,
) -> Result<Vec<Episode>> {
    let bins = model.config().w;
    let mut out = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let record = map.get(spec.target_id)?;
        let random =
            |reach| RandomPotential::new(seed.wrapping_add(i as u64), bins, reach, config.spacing);
        let episode = match policy {
            NavPolicy::Feature => navigate_to_exemplar(
                world,
                model,
                map,
                render,
                spec.start,
                spec.target_id,
                config,
            )?,
            NavPolicy::Oracle => {
                let mut p = OraclePotential {
                    target: record.position,
                    target_heading: record.theta,
                    bins,
                };
                navigate(
                    world,
                    &mut p,
                    spec.start,
                    record.id,
                    record.position,
                    config,
                )?
            }
            NavPolicy::RandomWalk | NavPolicy::RandomJump => {
                let reach = if policy == NavPolicy::RandomWalk {
                    1
                } else {
                    config.grid / 2
                };
                let mut p = random(reach);
                navigate(
                    world,
                    &mut p,
                    spec.start,
                    record.id,
                    record.position,
                    config,
                )?
            }
        };
        log::debug!(
            "{} episode {i}: success {} after {} steps",
            policy.name(),
            episode.success,
            episode.steps
        );
        out.push(episode);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    fn square_room() -> World {
        World::generate(&WorldConfig {
            rooms: 1,
            room_width: 5.0,
            room_depth: 5.0,
            ..Default::default()
        })
        .unwrap()
    }

    fn oracle(target: Point) -> OraclePotential {
        OraclePotential {
            target,
            target_heading: 0.0,
            bins: 16,
        }
    }

    #[test]
    fn start_at_target_succeeds_without_moving() {
        let w = square_room();
        let start = w.pose([2.0, 2.0], 0.0).unwrap();
        let ep = navigate(
            &w,
            &mut oracle([2.0, 2.0]),
            start,
            0,
            [2.0, 2.0],
            &PolicyConfig::default(),
        )
        .unwrap();
        assert!(ep.success);
        assert_eq!(ep.steps, 0);
        assert_eq!(ep.trajectory, vec![start]);
    }

    #[test]
    fn oracle_reaches_targets_within_the_step_bound() {
        let w = square_room();
        let cfg = PolicyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..30 {
            let a = w.sample_in_room(0, &mut rng).unwrap();
            let b = w.sample_in_room(0, &mut rng).unwrap();
            let start = w.pose(a, 1.0).unwrap();
            let ep = navigate(&w, &mut oracle(b), start, 0, b, &cfg).unwrap();
            let bound = (distance(a, b) / (4.0 * cfg.spacing)).ceil() as usize + 1;
            assert!(ep.success && ep.steps <= bound, "{} > {bound}", ep.steps);
            assert!(ep.trajectory.iter().all(|p| w.is_free(p.position)));
            assert_eq!(ep.trajectory[0], start);
        }
    }

    #[test]
    fn field_minimum_is_the_brute_force_minimum() {
        let w = square_room();
        let pose = w.pose([1.0, 1.0], 0.0).unwrap();
        let field =
            local_search(&w, &mut oracle([3.0, 2.7]), &pose, &PolicyConfig::default()).unwrap();
        let brute = field
            .cells
            .iter()
            .map(|c| c.1)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(field.argmin().1, brute);
        // the grid is clipped near walls
        assert!(field.cells.len() < 81);
        assert!(field.cells.iter().all(|(p, _)| w.is_free(*p)));
    }

    #[test]
    fn orientation() {
        assert_eq!(orient(1.0, 0, 16), 1.0);
        let w = square_room();
        let mut o = OraclePotential {
            target: [2.0, 2.0],
            target_heading: 3.0 * TAU / 16.0,
            bins: 16,
        };
        let pose = w.pose([2.0, 2.0], 0.0).unwrap();
        let (_, r) = o.evaluate(&w, &pose).unwrap();
        assert_eq!(r, 3);
        assert!((orient(0.0, r, 16) - 3.0 * TAU / 16.0).abs() < 1e-12);
    }

    #[test]
    fn constant_potential_gets_stuck() {
        struct Flat;
        impl Potential for Flat {
            fn evaluate(&mut self, _: &World, p: &Pose) -> Result<(f64, usize)> {
                // the agent's own cell is always lowest
                Ok((if p.position == [2.0, 2.0] { 0.0 } else { 1.0 }, 0))
            }
            fn bins(&self) -> usize {
                16
            }
        }
        let w = square_room();
        let start = w.pose([2.0, 2.0], 0.0).unwrap();
        let ep = navigate(
            &w,
            &mut Flat,
            start,
            0,
            [4.0, 4.0],
            &PolicyConfig::default(),
        )
        .unwrap();
        assert!(ep.stuck && !ep.success);
        assert_eq!(ep.steps, 2);
    }

    #[test]
    fn random_baseline_respects_budget() {
        let w = square_room();
        let cfg = PolicyConfig {
            budget: 5,
            ..Default::default()
        };
        let start = w.pose([0.5, 0.5], 0.0).unwrap();
        let ep = navigate(
            &w,
            &mut RandomPotential::new(1, 16, 1, cfg.spacing),
            start,
            0,
            [4.4, 4.4],
            &cfg,
        )
        .unwrap();
        assert!(ep.steps <= 5);
        assert_eq!(ep.success, ep.final_distance <= cfg.tolerance);
        for pair in ep.trajectory.windows(2) {
            let d = distance(pair[0].position, pair[1].position);
            assert!(d > 0.0 && d <= cfg.spacing * 2f64.sqrt() + 1e-9);
        }
    }

    #[test]
    fn bad_grid_is_rejected() {
        let cfg = PolicyConfig {
            grid: 8,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { .. })));
    }
}
