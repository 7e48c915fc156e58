//! Benchmark workloads: communication-free-learning graph coloring and a
//! fixed-cost compute burner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::topology::{NodeId, TorusTopology};

/// Placeholder for a neighbor whose color has not arrived yet. Never
/// conflicts.
pub const NO_COLOR: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload parameter: {0}")]
    InvalidParams(&'static str),
    #[error("topology has nodes adjacent to themselves ({width}x{height})")]
    InvalidTopology { width: usize, height: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadParams {
    pub num_colors: usize,
    /// Multiplicative learning factor.
    pub b: f64,
    /// Compute units burned per worker update.
    pub compute_work_units: u64,
    /// On a conflict-free update, collapse the distribution onto the current
    /// color.
    pub success_reset: bool,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        WorkloadParams {
            num_colors: 3,
            b: 0.1,
            compute_work_units: 0,
            success_reset: false,
        }
    }
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.num_colors < 2 {
            return Err(WorkloadError::InvalidParams("num_colors must be at least 2"));
        }
        if !(self.b > 0.0 && self.b < 1.0) {
            return Err(WorkloadError::InvalidParams("b must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

pub fn validate_topology(topology: &TorusTopology) -> Result<(), WorkloadError> {
    if topology.has_self_edges() {
        return Err(WorkloadError::InvalidTopology {
            width: topology.width(),
            height: topology.height(),
        });
    }
    Ok(())
}

/// Independent deterministic stream for one node of one run.
pub fn node_rng(run_seed: u64, node: NodeId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(node as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct ColoringNodeState {
    pub current_color: u32,
    pub probabilities: Vec<f64>,
    rng: ChaCha8Rng,
}

/// Uniform initial color and uniform selection probabilities.
pub fn init_node(num_colors: usize, mut rng: ChaCha8Rng) -> ColoringNodeState {
    let current_color = rng.random_range(0..num_colors as u32);
    ColoringNodeState {
        current_color,
        probabilities: vec![1.0 / num_colors as f64; num_colors],
        rng,
    }
}

/// Multiplies the current color's probability by `1 - b` and shares the
/// removed mass equally among the other colors.
pub fn penalize(probabilities: &mut [f64], current: usize, b: f64) {
    let share = b / (probabilities.len() - 1) as f64;
    for (j, p) in probabilities.iter_mut().enumerate() {
        *p *= 1.0 - b;
        if j != current {
            *p += share;
        }
    }
}

impl ColoringNodeState {
    /// One update against the latest known neighbor colors. Returns the
    /// color to transmit, which is always the current color.
    pub fn update(&mut self, neighbor_colors: &[u32], params: &WorkloadParams) -> u32 {
        let conflict = neighbor_colors.contains(&self.current_color);
        if conflict {
            penalize(&mut self.probabilities, self.current_color as usize, params.b);
            self.current_color = self.sample();
        } else if params.success_reset {
            for (j, p) in self.probabilities.iter_mut().enumerate() {
                *p = if j == self.current_color as usize { 1.0 } else { 0.0 };
            }
        }
        self.current_color
    }

    fn sample(&mut self) -> u32 {
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (j, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return j as u32;
            }
        }
        // Rounding left a sliver above the cumulative sum; take the last
        // color with nonzero mass.
        self.probabilities
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(0) as u32
    }
}

/// Number of undirected edges whose endpoints share a color.
pub fn count_conflicts(topology: &TorusTopology, colors: &[u32]) -> u64 {
    assert_eq!(colors.len(), topology.node_count(), "one color per node");
    topology
        .undirected_edges()
        .filter(|&(a, b)| colors[a] == colors[b])
        .count() as u64
}

/// Mersenne Twister draws as a fixed unit of compute.
pub struct ComputeBurner {
    mt: rand_mt::Mt,
}

impl ComputeBurner {
    pub fn new(seed: u32) -> Self {
        ComputeBurner {
            mt: rand_mt::Mt::new(seed),
        }
    }

    /// Advances the generator `units` times and folds the outputs into a
    /// checksum so the work is observable.
    pub fn burn(&mut self, units: u64) -> u64 {
        let mut acc = 0u64;
        for _ in 0..units {
            acc = acc.rotate_left(5) ^ u64::from(self.mt.next_u32());
        }
        std::hint::black_box(acc)
    }
}

/// Burns `units` draws from a freshly seeded generator.
pub fn burn_compute(units: u64, seed: u32) -> u64 {
    if units == 0 {
        return 0;
    }
    ComputeBurner::new(seed).burn(units)
}
