//! A 3 m × 50 m corridor walked by a unicycle robot.
//!
//! Floor markers split the corridor into equal sections. The route keeps to
//! one lane per section and obstacles are only placed off the route, so
//! knowing which section is active tells the robot where it may drive. The
//! markers all look alike and nothing in the observation says how far along
//! the corridor the robot is.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::Difficulty;
use crate::types::{Action, CognitivePrior, Observation};

pub const WIDTH: f64 = 3.0;
pub const LENGTH: f64 = 50.0;
pub const DT: f64 = 0.1;
pub const SECTIONS: usize = 12;
pub const ROBOT_RADIUS: f64 = 0.25;
pub const MOVER_RADIUS: f64 = 0.3;
pub const MAX_SPEED: f64 = 1.5;
pub const MAX_TURN: f64 = 2.0;
pub const RAYS: usize = 7;
pub const RAY_RANGE: f64 = 2.5;
pub const MOVER_RANGE: f64 = 3.0;
pub const MAX_STEPS: usize = 700;
pub const OBS_DIM: usize = RAYS + 3 + 2 + 1 + 1 + 1;
pub const ACTION_DIM: usize = 2;

/// Lane centres, left to right.
pub const LANES: [f64; 3] = [0.6, 1.5, 2.4];
const LANE_NAMES: [&str; 3] = ["left", "middle", "right"];
/// Lane of the route in each section; neighbouring sections never share one.
pub const ROUTE: [usize; SECTIONS] = [0, 1, 2, 1, 0, 2, 1, 0, 1, 2, 1, 0];
/// Obstacle-free run at the start of every section for changing lanes.
const CLEAR_RUN: f64 = 2.0;
/// Stationary std and per-step decay of the demonstration turn noise.
const DEMO_NOISE: f64 = 0.2;
const DEMO_NOISE_DECAY: f64 = 0.7;

pub fn section_length() -> f64 {
    LENGTH / SECTIONS as f64
}

/// Section containing `x`.
pub fn section_of(x: f64) -> usize {
    ((x / section_length()).floor().max(0.0) as usize).min(SECTIONS - 1)
}

/// One description per section, in order.
pub fn prior() -> CognitivePrior {
    let mut texts = Vec::with_capacity(SECTIONS);
    for (j, &lane) in ROUTE.iter().enumerate() {
        let side = LANE_NAMES[lane];
        let until = if j + 1 == SECTIONS { "the goal line" } else { "the floor marker" };
        let text = format!("Walk in the {side} lane to {until}.");
        texts.push(text);
    }
    CognitivePrior::new(texts).expect("non-empty prior")
}

pub const GOAL: &str = "Walk to the far end of the corridor without touching anything.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

/// A person walking a smoothed random path that keeps clear of the robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mover {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorridorStatus {
    Running,
    Success,
    Collision,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorridorWorld {
    pub difficulty: Difficulty,
    pub obstacles: Vec<Obstacle>,
    pub mover: Option<Mover>,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub steps: usize,
    pub status: CorridorStatus,
    /// Furthest distance reached along the corridor.
    pub progress: f64,
    /// Whether the last step crossed a marker line.
    pub crossed: bool,
    /// Markers the robot has seen and acted on, which is the active section
    /// from the robot's own point of view.
    pub phase: usize,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    noise: f64,
}

fn mean_obstacles(d: Difficulty) -> f64 {
    match d {
        Difficulty::Easy => 5.0,
        Difficulty::Medium | Difficulty::Hard => 15.0,
    }
}

fn radius_range(d: Difficulty) -> (f64, f64) {
    match d {
        Difficulty::Easy | Difficulty::Medium => (0.15, 0.3),
        Difficulty::Hard => (0.2, 0.35),
    }
}

fn mover_speed(d: Difficulty) -> f64 {
    match d {
        Difficulty::Easy | Difficulty::Medium => 0.5,
        Difficulty::Hard => 0.8,
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Distance along a ray from `(px, py)` in direction `(dx, dy)` to a circle,
/// if it is hit ahead.
fn ray_circle(px: f64, py: f64, dx: f64, dy: f64, cx: f64, cy: f64, r: f64) -> Option<f64> {
    let (ox, oy) = (px - cx, py - cy);
    let b = ox * dx + oy * dy;
    let c = ox * ox + oy * oy - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

impl CorridorWorld {
    pub fn new(difficulty: Difficulty, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Poisson::new(mean_obstacles(difficulty))
            .expect("positive mean")
            .sample(&mut rng) as usize;
        let (rmin, rmax) = radius_range(difficulty);
        let len = section_length();
        let mut obstacles: Vec<Obstacle> = Vec::with_capacity(n);
        let mut tries = 0;
        while obstacles.len() < n && tries < 1000 {
            tries += 1;
            let j = rng.gen_range(0..SECTIONS);
            let x = j as f64 * len + rng.gen_range(CLEAR_RUN..len);
            let mut lane = rng.gen_range(0..2);
            if lane >= ROUTE[j] {
                lane += 1;
            }
            let o = Obstacle {
                x,
                y: LANES[lane] + rng.gen_range(-0.1..0.1),
                radius: rng.gen_range(rmin..rmax),
            };
            let apart = obstacles
                .iter()
                .all(|p| ((p.x - o.x).powi(2) + (p.y - o.y).powi(2)).sqrt() > p.radius + o.radius + 0.1);
            if apart {
                obstacles.push(o);
            }
        }
        obstacles.sort_by(|a, b| a.x.total_cmp(&b.x));
        let mover = rng.gen_bool(0.5).then(|| {
            let speed = mover_speed(difficulty);
            let a: f64 = rng.gen_range(-PI..PI);
            Mover {
                x: rng.gen_range(8.0..LENGTH - 2.0),
                y: rng.gen_range(0.5..WIDTH - 0.5),
                vx: speed * a.cos(),
                vy: speed * a.sin(),
                speed,
            }
        });
        let y = LANES[ROUTE[0]];
        Self {
            difficulty,
            obstacles,
            mover,
            x: 0.5,
            y,
            heading: 0.0,
            speed: 0.0,
            steps: 0,
            status: CorridorStatus::Running,
            progress: 0.5,
            crossed: false,
            phase: 0,
            noise_rng: {
                let mut r = rng.clone();
                r.set_stream(1);
                r
            },
            rng,
            noise: 0.0,
        }
    }

    pub fn done(&self) -> bool {
        self.status != CorridorStatus::Running
    }

    pub fn section(&self) -> usize {
        section_of(self.x)
    }

    /// Whether a marker line passed under the robot on the last step.
    pub fn on_marker(&self) -> bool {
        self.crossed
    }

    fn ray(&self, angle: f64) -> f64 {
        let (dx, dy) = (angle.cos(), angle.sin());
        let mut best = RAY_RANGE;
        if dy > 1e-9 {
            best = best.min((WIDTH - self.y) / dy);
        } else if dy < -1e-9 {
            best = best.min(-self.y / dy);
        }
        for o in &self.obstacles {
            if (o.x - self.x).abs() > RAY_RANGE + o.radius {
                continue;
            }
            if let Some(t) = ray_circle(self.x, self.y, dx, dy, o.x, o.y, o.radius) {
                best = best.min(t);
            }
        }
        best
    }

    /// Ray readings (1 near, 0 at range), the mover in the robot frame,
    /// heading, lateral offset, speed and the marker flag.
    pub fn observe(&self) -> Observation {
        let mut f = Vec::with_capacity(OBS_DIM);
        for i in 0..RAYS {
            let rel = -FRAC_PI_2 + PI * i as f64 / (RAYS - 1) as f64;
            f.push(1.0 - self.ray(self.heading + rel) / RAY_RANGE);
        }
        match &self.mover {
            Some(m) if ((m.x - self.x).powi(2) + (m.y - self.y).powi(2)).sqrt() <= MOVER_RANGE => {
                let (dx, dy) = (m.x - self.x, m.y - self.y);
                let (c, s) = (self.heading.cos(), self.heading.sin());
                f.push((c * dx + s * dy) / MOVER_RANGE);
                f.push((-s * dx + c * dy) / MOVER_RANGE);
                f.push(1.0);
            }
            _ => f.extend([0.0, 0.0, 0.0]),
        }
        f.push(self.heading.sin());
        f.push(self.heading.cos());
        f.push((self.y - WIDTH / 2.0) / (WIDTH / 2.0));
        f.push(self.speed / MAX_SPEED);
        f.push(if self.on_marker() { 1.0 } else { 0.0 });
        Observation::new(f)
    }

    fn collides(&self) -> bool {
        if self.y - ROBOT_RADIUS < 0.0 || self.y + ROBOT_RADIUS > WIDTH {
            return true;
        }
        let hit = |x: f64, y: f64, r: f64| ((x - self.x).powi(2) + (y - self.y).powi(2)).sqrt() < r + ROBOT_RADIUS;
        self.obstacles.iter().any(|o| hit(o.x, o.y, o.radius))
            || self.mover.as_ref().is_some_and(|m| hit(m.x, m.y, MOVER_RADIUS))
    }

    fn move_mover(&mut self) {
        let (rx, ry) = (self.x, self.y);
        let Some(m) = self.mover.as_mut() else { return };
        let turn: f64 = self.rng.gen_range(-0.6..0.6);
        let a = m.vy.atan2(m.vx) + turn;
        m.vx = m.speed * a.cos();
        m.vy = m.speed * a.sin();
        let (mut nx, mut ny) = (m.x + m.vx * DT, m.y + m.vy * DT);
        if !(MOVER_RADIUS..=WIDTH - MOVER_RADIUS).contains(&ny) {
            m.vy = -m.vy;
            ny = m.y + m.vy * DT;
        }
        if !(0.0..=LENGTH).contains(&nx) {
            m.vx = -m.vx;
            nx = m.x + m.vx * DT;
        }
        // people step aside rather than walk into the robot
        let keep = MOVER_RADIUS + ROBOT_RADIUS + 0.4;
        let before = ((m.x - rx).powi(2) + (m.y - ry).powi(2)).sqrt();
        let after = ((nx - rx).powi(2) + (ny - ry).powi(2)).sqrt();
        if after < keep && after < before {
            m.vx = -m.vx;
            m.vy = -m.vy;
            return;
        }
        m.x = nx;
        m.y = ny;
    }

    /// Applies `(forward, turn)` scaled to `[-1, 1]`; forward speed is
    /// clipped at zero.
    pub fn step(&mut self, action: &Action) -> CorridorStatus {
        if self.done() {
            return self.status;
        }
        let v = (action.values[0].clamp(-1.0, 1.0) * MAX_SPEED).max(0.0);
        let w = action.values[1].clamp(-1.0, 1.0) * MAX_TURN;
        if self.crossed {
            self.phase = (self.phase + 1).min(SECTIONS - 1);
        }
        let before = self.section();
        self.heading = wrap_angle(self.heading + w * DT);
        self.speed = v;
        self.x += v * self.heading.cos() * DT;
        self.y += v * self.heading.sin() * DT;
        self.crossed = self.x < LENGTH && self.section() > before;
        self.move_mover();
        self.steps += 1;
        self.progress = self.progress.max(self.x.clamp(0.0, LENGTH));
        if self.collides() {
            self.status = CorridorStatus::Collision;
        } else if self.x >= LENGTH {
            self.status = CorridorStatus::Success;
        } else if self.steps >= MAX_STEPS {
            self.status = CorridorStatus::Timeout;
        }
        self.status
    }

    /// Whether the mover stands in the robot's way within `reach` metres.
    fn mover_ahead(&self, reach: f64) -> bool {
        self.mover.as_ref().is_some_and(|m| {
            let dx = m.x - self.x;
            dx > -0.2 && dx < reach && (m.y - self.y).abs() < MOVER_RADIUS + ROBOT_RADIUS + 0.5
        })
    }

    /// Route-following expert: pure pursuit towards the section's lane, and
    /// a stop while a person is in the way.
    pub fn expert_action(&self) -> Action {
        let lane = LANES[ROUTE[self.phase]];
        let desired = (lane - self.y).atan2(1.0);
        let err = wrap_angle(desired - self.heading);
        let w = (2.5 * err / MAX_TURN).clamp(-1.0, 1.0);
        let v = if self.mover_ahead(1.6) {
            0.0
        } else {
            (1.0 - 0.6 * err.abs()).clamp(0.3, 1.0)
        };
        Action::new(vec![v, w])
    }

    /// The command actually executed while recording a demonstration: the
    /// expert's turn rate plus smoothed noise, so the recorded data shows
    /// the expert recovering from small drifts.
    pub fn demo_perturbation(&mut self, action: &Action) -> Action {
        let xi: f64 = rand_distr::StandardNormal.sample(&mut self.noise_rng);
        self.noise = DEMO_NOISE_DECAY * self.noise + DEMO_NOISE * (1.0 - DEMO_NOISE_DECAY * DEMO_NOISE_DECAY).sqrt() * xi;
        Action::new(vec![action.values[0], action.values[1] + self.noise])
    }

    /// Short description of what the robot currently sees.
    pub fn caption(&self, rng: &mut ChaCha8Rng) -> String {
        let lane = (0..3)
            .min_by(|&a, &b| (LANES[a] - self.y).abs().total_cmp(&(LANES[b] - self.y).abs()))
            .unwrap();
        let side = LANE_NAMES[lane];
        if self.on_marker() {
            const AT: [&str; 3] = ["at the floor marker", "passing the floor marker", "over the floor marker"];
            return format!("{} in the {side} lane", AT[rng.gen_range(0..AT.len())]);
        }
        if self.mover_ahead(1.6) {
            const WAIT: [&str; 3] = ["a person is in the way", "waiting for a person", "someone blocks the path"];
            return WAIT[rng.gen_range(0..WAIT.len())].to_string();
        }
        if (LANES[lane] - self.y).abs() > 0.25 {
            const SHIFT: [&str; 3] = ["moving across the corridor", "changing lanes", "drifting sideways"];
            return SHIFT[rng.gen_range(0..SHIFT.len())].to_string();
        }
        const GO: [&str; 3] = ["walking in the", "moving along the", "driving in the"];
        format!("{} {side} lane", GO[rng.gen_range(0..GO.len())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rays_see_walls() {
        let w = CorridorWorld::new(Difficulty::Easy, 3);
        let mut w = w;
        w.obstacles.clear();
        w.mover = None;
        w.y = 1.0;
        w.heading = 0.0;
        let o = w.observe();
        // leftmost ray points at y = 0 from 1 m away
        assert!((o.features[0] - (1.0 - 1.0 / RAY_RANGE)).abs() < 1e-12);
        // straight ahead sees nothing
        assert_eq!(o.features[RAYS / 2], 0.0);
    }

    #[test]
    fn route_is_obstacle_free() {
        for seed in 0..50 {
            let w = CorridorWorld::new(Difficulty::Hard, seed);
            for o in &w.obstacles {
                let lane = LANES[ROUTE[section_of(o.x)]];
                assert!((o.y - lane).abs() > 0.6, "seed {seed}");
            }
        }
    }

    #[test]
    fn prior_has_one_text_per_section() {
        assert_eq!(prior().len(), SECTIONS);
    }
}
