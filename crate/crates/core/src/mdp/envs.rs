use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TabularMdp;
use crate::error::Result;

/// One state, one action, self-loop.
pub fn loop1(gamma: f64) -> Result<TabularMdp> {
    TabularMdp::new(1, 1, vec![1.0], vec![1.0], gamma)
}

/// Two states, one action: 0 -> 1, 1 -> 1. Starts in state 0.
pub fn chain2(gamma: f64) -> Result<TabularMdp> {
    TabularMdp::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![1.0, 0.0], gamma)
}

/// `chain2` with two actions; both actions at state 0 lead to state 1 and
/// both actions at state 1 self-loop.
pub fn chain2_two_actions(gamma: f64) -> Result<TabularMdp> {
    TabularMdp::new(
        2,
        2,
        vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        vec![1.0, 0.0],
        gamma,
    )
}

/// One state, two self-loop actions.
pub fn bandit2(gamma: f64) -> Result<TabularMdp> {
    TabularMdp::new(1, 2, vec![1.0, 1.0], vec![1.0], gamma)
}

/// Dense random MDP: each transition row and the initial distribution are
/// normalized uniform draws, so every state is reachable.
pub fn random_mdp<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    let mut transition = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        transition.extend(normalized_draw(num_states, rng));
    }
    let initial = normalized_draw(num_states, rng);
    TabularMdp::new(num_states, num_actions, transition, initial, gamma)
}

fn normalized_draw<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    // cube the draws so rows are uneven rather than near-uniform
    let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // push the rounding residue into the largest entry
    let residue = 1.0 - row.iter().sum::<f64>();
    let largest = super::argmax_first(&row);
    row[largest] += residue;
    row
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl GridAction {
    pub const ALL: [GridAction; 5] = [
        GridAction::Up,
        GridAction::Down,
        GridAction::Left,
        GridAction::Right,
        GridAction::Stay,
    ];

    fn delta(self) -> (i64, i64) {
        match self {
            GridAction::Up => (-1, 0),
            GridAction::Down => (1, 0),
            GridAction::Left => (0, -1),
            GridAction::Right => (0, 1),
            GridAction::Stay => (0, 0),
        }
    }
}

/// Rectangular gridworld with walls at the border. With probability `slip`
/// the executed action is replaced by a uniformly random one. The initial
/// state is uniform over cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    pub slip: f64,
}

impl GridWorld {
    pub fn new(width: usize, height: usize, slip: f64) -> Self {
        Self { width, height, slip }
    }

    /// 5x5 deterministic grid.
    pub fn grid5() -> Self {
        Self::new(5, 5, 0.0)
    }

    /// 5x5 grid with 10% action slip.
    pub fn grid5_slip() -> Self {
        Self::new(5, 5, 0.1)
    }

    pub fn num_states(&self) -> usize {
        self.width * self.height
    }

    pub fn num_actions(&self) -> usize {
        GridAction::ALL.len()
    }

    pub fn coords(&self, s: usize) -> (usize, usize) {
        (s / self.width, s % self.width)
    }

    pub fn state(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn manhattan(&self, s1: usize, s2: usize) -> usize {
        let (r1, c1) = self.coords(s1);
        let (r2, c2) = self.coords(s2);
        r1.abs_diff(r2) + c1.abs_diff(c2)
    }

    pub fn step(&self, s: usize, action: GridAction) -> usize {
        let (row, col) = self.coords(s);
        let (dr, dc) = action.delta();
        let nr = (row as i64 + dr).clamp(0, self.height as i64 - 1) as usize;
        let nc = (col as i64 + dc).clamp(0, self.width as i64 - 1) as usize;
        self.state(nr, nc)
    }

    /// Deterministic policy that cycles through the grid: a Hamiltonian cycle
    /// on the cells (leaving out one corner-colored cell when the cell count
    /// is odd, which steps onto the cycle). Used as a behavior base policy
    /// with full state coverage.
    pub fn tour_actions(&self) -> Vec<usize> {
        let ns = self.num_states();
        let skip = if ns % 2 == 1 && ns > 1 {
            Some(self.state(self.height / 2, self.width / 2))
        } else {
            None
        };
        let cells = ns - usize::from(skip.is_some());
        let mut path = vec![0usize];
        let mut used = vec![false; ns];
        used[0] = true;
        if let Some(c) = skip {
            used[c] = true;
        }
        let found = cells == 1 || self.extend_cycle(&mut path, &mut used, cells);
        assert!(found, "no cycle through a {}x{} grid", self.height, self.width);
        let mut actions = vec![GridAction::ALL.len() - 1; ns];
        for (i, &s) in path.iter().enumerate() {
            let next = path[(i + 1) % path.len()];
            actions[s] = self.action_towards(s, next).unwrap_or(actions[s]);
        }
        if let Some(c) = skip {
            let onto = self.neighbors(c).into_iter().next().expect("a neighbor");
            actions[c] = self.action_towards(c, onto).expect("adjacent");
        }
        actions
    }

    fn neighbors(&self, s: usize) -> Vec<usize> {
        GridAction::ALL[..4]
            .iter()
            .map(|&a| self.step(s, a))
            .filter(|&n| n != s)
            .collect()
    }

    fn action_towards(&self, from: usize, to: usize) -> Option<usize> {
        (0..4).find(|&a| from != to && self.step(from, GridAction::ALL[a]) == to)
    }

    fn extend_cycle(&self, path: &mut Vec<usize>, used: &mut [bool], cells: usize) -> bool {
        let last = *path.last().unwrap();
        if path.len() == cells {
            return self.neighbors(last).contains(&path[0]);
        }
        // fewest onward moves first
        let mut next: Vec<usize> = self.neighbors(last).into_iter().filter(|&n| !used[n]).collect();
        next.sort_by_key(|&n| self.neighbors(n).iter().filter(|&&k| !used[k]).count());
        for n in next {
            used[n] = true;
            path.push(n);
            if self.extend_cycle(path, used, cells) {
                return true;
            }
            path.pop();
            used[n] = false;
        }
        false
    }

    pub fn build(&self, gamma: f64) -> Result<TabularMdp> {
        let ns = self.num_states();
        let na = self.num_actions();
        let mut transition = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for (a, &action) in GridAction::ALL.iter().enumerate() {
                let row = &mut transition[(s * na + a) * ns..(s * na + a + 1) * ns];
                row[self.step(s, action)] += 1.0 - self.slip;
                if self.slip > 0.0 {
                    for &other in GridAction::ALL.iter() {
                        row[self.step(s, other)] += self.slip / na as f64;
                    }
                }
            }
        }
        TabularMdp::new(ns, na, transition, vec![1.0 / ns as f64; ns], gamma)
    }
}
