use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::state::{AllocationState, STATE_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Linear, ParamStore, Tensor, Var};

pub const HIDDEN: usize = 64;

#[derive(Clone, Debug)]
struct Mlp {
    store: ParamStore,
    layers: [Linear; 3],
}

impl Mlp {
    fn new(prefix: &str, outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = [
            Linear::new(&mut store, &format!("{prefix}.fc1"), STATE_DIM, HIDDEN, &mut rng),
            Linear::new(&mut store, &format!("{prefix}.fc2"), HIDDEN, HIDDEN, &mut rng),
            Linear::new(&mut store, &format!("{prefix}.out"), HIDDEN, outputs, &mut rng),
        ];
        store.get_mut(layers[2].weight).data_mut().fill(0.0);
        Self { store, layers }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, &self.store, x)?;
        let h = g.silu(h)?;
        let h = self.layers[1].forward(g, &self.store, h)?;
        let h = g.silu(h)?;
        self.layers[2].forward(g, &self.store, h)
    }
}

pub fn states_tensor(states: &[AllocationState]) -> Tensor {
    let data = states.iter().flat_map(|s| s.features).collect();
    Tensor::new(&[states.len(), STATE_DIM], data).expect("state batch shape")
}

/// `π_θ(·|s)`: 23 → 64 → 64 → K logits; the output layer starts at zero (uniform policy).
#[derive(Clone, Debug)]
pub struct PolicyNet {
    mlp: Mlp,
    num_actions: usize,
}

impl PolicyNet {
    pub fn new(num_actions: usize, seed: u64) -> Self {
        Self {
            mlp: Mlp::new("policy", num_actions, seed),
            num_actions,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn store(&self) -> &ParamStore {
        &self.mlp.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.mlp.store
    }

    /// `[T, 23] -> [T, K]`.
    pub fn forward(&self, g: &mut Graph, states: Var) -> Result<Var> {
        self.mlp.forward(g, states)
    }

    pub fn logits(&self, state: &AllocationState) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let x = g.constant(states_tensor(std::slice::from_ref(state)));
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Masked softmax; infeasible actions get probability exactly 0.
    pub fn probabilities(&self, state: &AllocationState, mask: &[bool]) -> Result<Vec<f64>> {
        check_mask(mask, self.num_actions)?;
        let mut g = Graph::inference();
        let x = g.constant(states_tensor(std::slice::from_ref(state)));
        let logits = self.forward(&mut g, x)?;
        let p = g.masked_softmax(logits, mask)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Argmax over feasible logits, lowest index on ties.
    pub fn greedy(&self, state: &AllocationState, mask: &[bool]) -> Result<usize> {
        check_mask(mask, self.num_actions)?;
        let logits = self.logits(state)?;
        let mut best: Option<usize> = None;
        for (a, &l) in logits.iter().enumerate() {
            if mask[a] && best.is_none_or(|b| l > logits[b]) {
                best = Some(a);
            }
        }
        Ok(best.expect("mask has a feasible action"))
    }
}

fn check_mask(mask: &[bool], k: usize) -> Result<()> {
    if mask.len() != k || !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument(format!("mask {mask:?} for {k} actions")));
    }
    Ok(())
}

/// Draw from a probability vector; zero-probability entries are never chosen.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// `H = -Σ p ln p` over the nonzero entries.
pub fn masked_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `V_ψ(s)`: 23 → 64 → 64 → 1.
#[derive(Clone, Debug)]
pub struct ValueNet {
    mlp: Mlp,
}

impl ValueNet {
    pub fn new(seed: u64) -> Self {
        Self {
            mlp: Mlp::new("value", 1, seed),
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.mlp.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.mlp.store
    }

    /// `[T, 23] -> [T, 1]`.
    pub fn forward(&self, g: &mut Graph, states: Var) -> Result<Var> {
        self.mlp.forward(g, states)
    }

    pub fn values(&self, states: &[AllocationState]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference();
        let x = g.constant(states_tensor(states));
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out).data().to_vec())
    }
}
