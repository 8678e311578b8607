//! Browser bindings for the gridworld oracles: value heatmaps, greedy
//! arrows and discounted visitation for a movable reward bump.

use opq_core::mdp::{
    exact_q_pi, exact_q_star, greedy_policy, visitation_distribution, GridWorld, PolicyTable, StateAction, TabularMdp,
};
use opq_core::reward::{tabularize, RewardFn};
use wasm_bindgen::prelude::*;

fn js_err(e: opq_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    grid: GridWorld,
    mdp: TabularMdp,
    policy: PolicyTable,
}

#[wasm_bindgen]
impl Demo {
    /// `epsilon` mixes the tour with the uniform policy.
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, slip: f64, gamma: f64, epsilon: f64) -> Result<Demo, JsValue> {
        let grid = GridWorld::new(size, size, slip);
        let mdp = grid.build(gamma).map_err(js_err)?;
        let tour = PolicyTable::deterministic(grid.num_actions(), &grid.tour_actions()).map_err(js_err)?;
        Ok(Demo {
            grid,
            mdp,
            policy: tour.epsilon_mixture(epsilon),
        })
    }

    pub fn size(&self) -> usize {
        self.grid.width
    }

    fn q(&self, row: f64, col: f64, sigma: f64, optimal: bool) -> Result<Vec<f64>, JsValue> {
        let r = RewardFn::rbf_bump(&self.grid, (row, col), sigma);
        let r = tabularize(&r, &self.mdp);
        let q = if optimal {
            exact_q_star(&self.mdp, &r, 1e-10)
        } else {
            exact_q_pi(&self.mdp, &self.policy, &r)
        };
        q.map(|q| q.into_vec()).map_err(js_err)
    }

    /// Per-cell value: max over actions for q*, policy average otherwise.
    pub fn values(&self, row: f64, col: f64, sigma: f64, optimal: bool) -> Result<Vec<f64>, JsValue> {
        let q = self.q(row, col, sigma, optimal)?;
        let na = self.grid.num_actions();
        Ok(q.chunks(na)
            .enumerate()
            .map(|(s, qs)| {
                if optimal {
                    qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    qs.iter().zip(self.policy.row(s)).map(|(q, p)| q * p).sum()
                }
            })
            .collect())
    }

    /// Greedy action per cell under q*: 0 up, 1 down, 2 left, 3 right, 4 stay.
    pub fn greedy(&self, row: f64, col: f64, sigma: f64) -> Result<Vec<u32>, JsValue> {
        let q = self.q(row, col, sigma, true)?;
        let pi = greedy_policy(&q, self.grid.num_actions());
        Ok((0..self.grid.num_states())
            .map(|s| pi.deterministic_action(s).unwrap_or(4) as u32)
            .collect())
    }

    /// Discounted occupancy of each cell starting from (cell, action).
    pub fn visitation(&self, cell: usize, action: usize) -> Result<Vec<f64>, JsValue> {
        let d = visitation_distribution(&self.mdp, &self.policy, StateAction::new(cell, action)).map_err(js_err)?;
        Ok(d.chunks(self.grid.num_actions()).map(|c| c.iter().sum()).collect())
    }
}
