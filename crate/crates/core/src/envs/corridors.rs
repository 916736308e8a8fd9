//! Continuous gridworld with a risky and a safe corridor.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvStep, Environment};
use crate::error::{domain, Error, Result};
use crate::rng::Rng;

const DEFAULT_LAYOUT: &str = include_str!("../../data/corridors_layout.json");

pub const ACTIONS: [(&str, f64, f64); 4] = [
    ("up", 0.0, 1.0),
    ("down", 0.0, -1.0),
    ("left", -1.0, 0.0),
    ("right", 1.0, 0.0),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Wall,
    Open,
    Risky,
    Safe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorsLayout {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    /// Cell rows from y = 0 upwards.
    pub rows: Vec<String>,
    pub start: [f64; 2],
    pub risky_reward_per_depth: f64,
    pub safe_reward_per_depth: f64,
    /// Cost paid on every step that ends on a risky cell.
    pub risky_cost: f64,
    /// Reaching the outermost cell of a corridor ends the episode.
    #[serde(default = "default_true")]
    pub terminal_outermost: bool,
}

fn default_true() -> bool {
    true
}

impl Default for CorridorsLayout {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_LAYOUT).expect("bundled layout parses")
    }
}

/// Field names follow the parameter table of the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorridorsConfig {
    pub size: [usize; 2],
    pub noise_std: [f64; 2],
    pub episode_duration: usize,
    pub gamma: f64,
    pub layout: CorridorsLayout,
}

impl Default for CorridorsConfig {
    fn default() -> Self {
        Self {
            size: [7, 6],
            noise_std: [0.25, 0.25],
            episode_duration: 9,
            gamma: 1.0,
            layout: CorridorsLayout::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corridors {
    cfg: CorridorsConfig,
    cells: Vec<Vec<CellKind>>,
    depth: Vec<Vec<usize>>,
    outermost: Vec<Vec<bool>>,
    noise: [Option<Normal<f64>>; 2],
    pos: [f64; 2],
    t: usize,
    done: bool,
}

impl Corridors {
    pub fn new(cfg: CorridorsConfig) -> Result<Self> {
        let [w, h] = cfg.size;
        let rows = &cfg.layout.rows;
        if rows.len() != h || rows.iter().any(|r| r.chars().count() != w) {
            return Err(Error::InvalidModel(format!(
                "layout must be {w} x {h} cells"
            )));
        }
        let mut cells = vec![vec![CellKind::Wall; h]; w];
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                cells[x][y] = match ch {
                    '#' => CellKind::Wall,
                    '.' => CellKind::Open,
                    'R' => CellKind::Risky,
                    'S' => CellKind::Safe,
                    other => {
                        return Err(Error::InvalidModel(format!(
                            "unknown layout cell {other:?}"
                        )))
                    }
                };
            }
        }
        // Depth of a corridor cell: length of the run of same-kind cells
        // below it, itself included.
        let mut depth = vec![vec![0; h]; w];
        for x in 0..w {
            for y in 0..h {
                let k = cells[x][y];
                if matches!(k, CellKind::Risky | CellKind::Safe) {
                    depth[x][y] = 1 + if y > 0 && cells[x][y - 1] == k {
                        depth[x][y - 1]
                    } else {
                        0
                    };
                }
            }
        }
        let outermost = (0..w)
            .map(|x| {
                (0..h)
                    .map(|y| depth[x][y] > 0 && (y + 1 == h || cells[x][y + 1] != cells[x][y]))
                    .collect()
            })
            .collect();
        let noise = [0, 1].map(|i| {
            let sd = cfg.noise_std[i];
            (sd > 0.0).then(|| Normal::new(0.0, sd).unwrap())
        });
        if cfg.noise_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return domain("noise standard deviations must be non-negative");
        }
        let mut env = Self {
            cfg,
            cells,
            depth,
            outermost,
            noise,
            pos: [0.0; 2],
            t: 0,
            done: false,
        };
        let start = env.cfg.layout.start;
        if !env.free(start[0], start[1]) {
            return Err(Error::InvalidModel("start position is not free".into()));
        }
        env.pos = start;
        Ok(env)
    }

    pub fn config(&self) -> &CorridorsConfig {
        &self.cfg
    }

    fn cell_at(&self, x: f64, y: f64) -> Option<CellKind> {
        let [w, h] = self.cfg.size;
        if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
            return None;
        }
        Some(self.cells[x as usize][y as usize])
    }

    /// Kind of the cell containing `state = (x, y)`.
    pub fn cell_kind(&self, state: &[f64]) -> CellKind {
        self.cell_at(state[0], state[1]).unwrap_or(CellKind::Wall)
    }

    fn free(&self, x: f64, y: f64) -> bool {
        matches!(self.cell_at(x, y), Some(k) if k != CellKind::Wall)
    }

    fn clip(&self, p: [f64; 2]) -> [f64; 2] {
        let [w, h] = self.cfg.size;
        let top = |m: usize| m as f64 - 1e-9;
        [p[0].clamp(0.0, top(w)), p[1].clamp(0.0, top(h))]
    }

    /// Position after attempting to move by `(dx, dy)`: the full move if it
    /// lands on a free cell, otherwise the free single-axis component, and
    /// otherwise no move.
    pub fn slide(&self, from: [f64; 2], dx: f64, dy: f64) -> [f64; 2] {
        for cand in [
            [from[0] + dx, from[1] + dy],
            [from[0] + dx, from[1]],
            [from[0], from[1] + dy],
        ] {
            let c = self.clip(cand);
            if self.free(c[0], c[1]) {
                return c;
            }
        }
        from
    }

    /// Reward and cost of ending a step in the cell containing `p`.
    pub fn signal_at(&self, p: [f64; 2]) -> (f64, f64) {
        let (x, y) = (p[0] as usize, p[1] as usize);
        let l = &self.cfg.layout;
        match self.cells[x][y] {
            CellKind::Risky => (
                l.risky_reward_per_depth * self.depth[x][y] as f64,
                l.risky_cost,
            ),
            CellKind::Safe => (l.safe_reward_per_depth * self.depth[x][y] as f64, 0.0),
            _ => (0.0, 0.0),
        }
    }

    /// Whether `p` is the far end of a corridor.
    pub fn is_outermost(&self, p: [f64; 2]) -> bool {
        self.outermost[p[0] as usize][p[1] as usize]
    }

    pub fn set_position(&mut self, p: [f64; 2]) {
        self.pos = p;
    }
}

impl Environment for Corridors {
    fn clone_box(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn n_actions(&self) -> usize {
        ACTIONS.len()
    }

    fn gamma(&self) -> f64 {
        self.cfg.gamma
    }

    fn horizon(&self) -> usize {
        self.cfg.episode_duration
    }

    fn reset(&mut self, _rng: &mut Rng) -> Vec<f64> {
        self.pos = self.cfg.layout.start;
        self.t = 0;
        self.done = false;
        self.pos.to_vec()
    }

    fn step(&mut self, action: usize, rng: &mut Rng) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Environment("step after the episode ended".into()));
        }
        let Some(&(_, dx, dy)) = ACTIONS.get(action) else {
            return domain(format!("corridors action {action} out of range"));
        };
        let nx = self.noise[0].map_or(0.0, |n| n.sample(rng));
        let ny = self.noise[1].map_or(0.0, |n| n.sample(rng));
        self.pos = self.slide(self.pos, dx + nx, dy + ny);
        self.t += 1;
        let (reward, cost) = self.signal_at(self.pos);
        self.done = self.t >= self.cfg.episode_duration
            || (self.cfg.layout.terminal_outermost && self.is_outermost(self.pos));
        Ok(EnvStep {
            next_state: self.pos.to_vec(),
            reward,
            cost,
            done: self.done,
        })
    }

    fn action_name(&self, action: usize) -> String {
        ACTIONS
            .get(action)
            .map_or_else(|| format!("action_{action}"), |a| a.0.to_string())
    }
}
