//! Active task selection: a relational task encoder with a value head, a
//! K-nearest-neighbour diversity term, epsilon-greedy softmax selection and
//! the replay buffer.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learnsub::{dense, relu, sigmoid, AdamState, LearnError, Mlp, ParamVector, Tape, Var};
use crate::rng::SimRng;
use crate::taskspace::{ObjectSpec, RelationKind, Skill, TaskParam};

pub const EMBED_DIM: usize = 64;
const HEAD_DIM: usize = 16;
const VERTEX_IN: usize = 9;
const ENV_IN: usize = 4;
pub const LEARNING_RATE: f64 = 3e-4;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("buffer holds {have} entries, need at least {need}")]
    InsufficientBuffer { have: usize, need: usize },
    #[error("cannot sample {want} entries from a buffer of {have}")]
    EmptyBuffer { want: usize, have: usize },
    #[error("no candidates to select from")]
    NoCandidates,
    #[error(transparent)]
    Learn(#[from] LearnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    Atr,
    Uniform,
    FeasibilityOnly,
    DiversityOnly,
}

impl SamplerMode {
    pub const ALL: [SamplerMode; 4] =
        [SamplerMode::Atr, SamplerMode::Uniform, SamplerMode::FeasibilityOnly, SamplerMode::DiversityOnly];

    pub fn name(self) -> &'static str {
        match self {
            SamplerMode::Atr => "atr",
            SamplerMode::Uniform => "uniform",
            SamplerMode::FeasibilityOnly => "feasibility-only",
            SamplerMode::DiversityOnly => "diversity-only",
        }
    }
}

impl std::str::FromStr for SamplerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown sampler mode `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub beta: f64,
    pub k: usize,
    pub m: usize,
    pub candidates: usize,
    pub epsilon: f64,
    pub buffer_capacity: usize,
    /// Episodes of pure prior sampling before scoring starts; at least `k`.
    pub warmup: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { beta: 0.1, k: 5, m: 512, candidates: 64, epsilon: 0.1, buffer_capacity: 10_000, warmup: 50 }
    }
}

impl SamplerConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(self.beta >= 0.0) {
            return Err("beta must be nonnegative".into());
        }
        if self.k < 1 || self.m <= self.k {
            return Err("need k >= 1 and m > k".into());
        }
        if self.candidates < 1 {
            return Err("need at least one candidate".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err("epsilon must lie in [0, 1]".into());
        }
        if self.buffer_capacity < 1 {
            return Err("buffer capacity must be positive".into());
        }
        Ok(())
    }

    pub fn warmup_len(&self) -> usize {
        self.warmup.max(self.k)
    }
}

// ---------------------------------------------------------------------------
// Encoder and value head

/// Parameters of the task encoder and value head, trained jointly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerModel {
    pub params: ParamVector,
    pub vertex: Mlp,
    pub edge: Mlp,
    pub merge: Mlp,
    pub skill: Mlp,
    pub env: Mlp,
    pub fusion: Mlp,
    pub value: Mlp,
    pub adam: AdamState,
}

fn vertex_input(o: &ObjectSpec) -> [f64; VERTEX_IN] {
    let mut x = [0.0; VERTEX_IN];
    x[o.kind.index()] = 1.0;
    x[6..9].copy_from_slice(&o.size);
    x
}

fn one_hot<const N: usize>(k: usize) -> [f64; N] {
    let mut x = [0.0; N];
    x[k] = 1.0;
    x
}

fn env_input(w: &TaskParam) -> [f64; ENV_IN] {
    let e = &w.env;
    [e.camera_yaw.sin(), e.camera_yaw.cos(), e.camera_pitch, e.noise_scale * 100.0]
}

/// One dense layer followed by ReLU, evaluated directly.
fn layer(p: &[f64], net: &Mlp, x: &[f64]) -> Vec<f64> {
    let (w, b) = net.layers[0];
    let (n_in, n_out) = (net.sizes[0], net.sizes[1]);
    let mut out = vec![0.0; n_out];
    dense(&p[w..w + n_in * n_out], &p[b..b + n_out], x, &mut out);
    out.iter_mut().for_each(|v| *v = relu(*v));
    out
}

fn layer_tape(tape: &mut Tape, net: &Mlp, x: Var) -> Var {
    let (w, b) = net.layers[0];
    let y = tape.dense(x, w, b, net.sizes[1]);
    tape.relu(y)
}

impl SamplerModel {
    pub fn new(rng: &mut SimRng) -> Self {
        let mut params = ParamVector::default();
        let vertex = Mlp::allocate(&mut params, "encoder/vertex", &[VERTEX_IN, HEAD_DIM]);
        let edge = Mlp::allocate(&mut params, "encoder/edge", &[RelationKind::ALL.len(), HEAD_DIM]);
        let merge = Mlp::allocate(&mut params, "encoder/merge", &[3 * HEAD_DIM, HEAD_DIM]);
        let skill = Mlp::allocate(&mut params, "encoder/skill", &[Skill::ALL.len(), HEAD_DIM]);
        let env = Mlp::allocate(&mut params, "encoder/env", &[ENV_IN, HEAD_DIM]);
        let fusion = Mlp::allocate(&mut params, "encoder/fusion", &[5 * HEAD_DIM, EMBED_DIM]);
        let value = Mlp::allocate(&mut params, "value", &[EMBED_DIM, EMBED_DIM, 1]);
        for net in [&vertex, &edge, &merge, &skill, &env, &fusion, &value] {
            net.init(&mut params, rng);
        }
        let adam = AdamState::new(params.len(), LEARNING_RATE);
        Self { params, vertex, edge, merge, skill, env, fusion, value, adam }
    }

    pub fn arch(&self) -> Vec<u32> {
        [&self.vertex, &self.edge, &self.merge, &self.skill, &self.env, &self.fusion, &self.value]
            .iter()
            .flat_map(|n| n.sizes.iter().map(|&s| s as u32))
            .collect()
    }

    /// Task embedding `phi(w)`.
    pub fn encode(&self, w: &TaskParam) -> Vec<f64> {
        let p = &self.params.values;
        let verts: Vec<Vec<f64>> = w.objects.iter().map(|o| layer(p, &self.vertex, &vertex_input(o))).collect();
        let terms: Vec<Vec<f64>> = w
            .init_relations
            .iter()
            .map(|r| {
                let e = layer(p, &self.edge, &one_hot::<4>(r.kind.index()));
                let x: Vec<f64> = [&verts[r.src.index()][..], &verts[r.dst.index()][..], &e[..]].concat();
                layer(p, &self.merge, &x)
            })
            .collect();
        let ctx: Vec<Vec<f64>> = w
            .contexts
            .iter()
            .map(|c| {
                let k = layer(p, &self.skill, &one_hot::<4>(c.skill.index()));
                [&k[..], &verts[c.i.index()], &verts[c.j.index()]].concat()
            })
            .collect();
        let env = layer(p, &self.env, &env_input(w));
        let x = [sorted_sum(&terms, HEAD_DIM), sorted_sum(&ctx, 3 * HEAD_DIM), env].concat();
        layer(p, &self.fusion, &x)
    }

    pub fn encode_tape(&self, tape: &mut Tape, w: &TaskParam) -> Var {
        let verts: Vec<Var> = w
            .objects
            .iter()
            .map(|o| {
                let x = tape.input(&vertex_input(o));
                layer_tape(tape, &self.vertex, x)
            })
            .collect();
        let terms: Vec<Var> = w
            .init_relations
            .iter()
            .map(|r| {
                let ex = tape.input(&one_hot::<4>(r.kind.index()));
                let e = layer_tape(tape, &self.edge, ex);
                let x = tape.concat(&[verts[r.src.index()], verts[r.dst.index()], e]);
                layer_tape(tape, &self.merge, x)
            })
            .collect();
        let ctx: Vec<Var> = w
            .contexts
            .iter()
            .map(|c| {
                let kx = tape.input(&one_hot::<4>(c.skill.index()));
                let k = layer_tape(tape, &self.skill, kx);
                tape.concat(&[k, verts[c.i.index()], verts[c.j.index()]])
            })
            .collect();
        let ex = tape.input(&env_input(w));
        let env = layer_tape(tape, &self.env, ex);
        let rel = tape.sum_all(&terms, HEAD_DIM);
        let ctx = tape.sum_all(&ctx, 3 * HEAD_DIM);
        let x = tape.concat(&[rel, ctx, env]);
        layer_tape(tape, &self.fusion, x)
    }

    /// `V(phi)` in (0, 1).
    pub fn value(&self, emb: &[f64]) -> f64 {
        let out = self.value.forward(&self.params.values, emb).expect("embedding width");
        sigmoid(out[0])
    }

    pub fn value_tape(&self, tape: &mut Tape, emb: Var) -> Var {
        let logit = self.value.forward_tape(tape, emb);
        tape.sigmoid(logit)
    }

    fn value_loss_tape(&self, tape: &mut Tape, batch: &[(&TaskParam, f64)]) -> Var {
        let terms: Vec<Var> = batch
            .iter()
            .map(|(w, r)| {
                let e = self.encode_tape(tape, w);
                let v = self.value_tape(tape, e);
                tape.sq_err(v, &[*r])
            })
            .collect();
        tape.mean(&terms)
    }

    pub fn value_loss(&self, batch: &[(&TaskParam, f64)]) -> f64 {
        let mut tape = Tape::new(&self.params.values);
        let l = self.value_loss_tape(&mut tape, batch);
        tape.scalar(l)
    }

    /// One Adam step on the mean squared error of `V(phi(w))` against `r`,
    /// through both the value head and the encoder. Returns the loss before
    /// the step.
    pub fn value_update(&mut self, batch: &[(&TaskParam, f64)]) -> Result<f64, SamplerError> {
        if batch.is_empty() {
            return Err(SamplerError::EmptyBuffer { want: 1, have: 0 });
        }
        let (loss, grad) = {
            let mut tape = Tape::new(&self.params.values);
            let l = self.value_loss_tape(&mut tape, batch);
            (tape.scalar(l), tape.backward(l)?)
        };
        self.adam.update(&mut self.params.values, &grad);
        if let Some(k) = self.params.values.iter().position(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite { op: "adam", node: k }.into());
        }
        Ok(loss)
    }

    /// Loss closure for gradient checks.
    pub fn loss_fn<'a>(&'a self, batch: &'a [(&'a TaskParam, f64)]) -> impl Fn(&mut Tape) -> Var + 'a {
        move |t| self.value_loss_tape(t, batch)
    }
}

fn sorted_sum(parts: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut scratch = Vec::with_capacity(parts.len());
    for (k, o) in out.iter_mut().enumerate() {
        scratch.clear();
        scratch.extend(parts.iter().map(|p| p[k]));
        scratch.sort_by(f64::total_cmp);
        *o = scratch.iter().sum();
    }
    out
}

// ---------------------------------------------------------------------------
// Diversity

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance from `emb` to its `k`-th nearest neighbour in `subset` (1-based).
pub fn knn_distance(emb: &[f64], subset: &[Vec<f64>], k: usize) -> Result<f64, SamplerError> {
    if k == 0 || subset.len() < k {
        return Err(SamplerError::InsufficientBuffer { have: subset.len(), need: k.max(1) });
    }
    let mut d: Vec<f64> = subset.iter().map(|s| euclidean(emb, s)).collect();
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// Volume of the unit ball in `dim` dimensions, in log space.
pub fn log_unit_ball_volume(dim: usize) -> f64 {
    // V_0 = 1, V_1 = 2, V_n = V_{n-2} * 2 pi / n
    let mut v = [0.0_f64, std::f64::consts::LN_2];
    if dim < 2 {
        return v[dim];
    }
    for n in 2..=dim {
        v[n % 2] += (2.0 * std::f64::consts::PI / n as f64).ln();
    }
    v[dim % 2]
}

/// Particle density `K / (m * c_dim * d^dim)`, in log space; `+inf` at `d = 0`.
pub fn log_density_estimate(d: f64, k: usize, m: usize, dim: usize) -> f64 {
    if d <= 0.0 {
        return f64::INFINITY;
    }
    (k as f64).ln() - (m as f64).ln() - log_unit_ball_volume(dim) - dim as f64 * d.ln()
}

pub fn density_estimate(d: f64, k: usize, m: usize, dim: usize) -> f64 {
    log_density_estimate(d, k, m, dim).exp()
}

/// Selection score for one candidate.
pub fn score(mode: SamplerMode, value: f64, knn: f64, beta: f64) -> f64 {
    match mode {
        SamplerMode::Atr => value + beta * knn,
        SamplerMode::FeasibilityOnly => value,
        SamplerMode::DiversityOnly => beta * knn,
        SamplerMode::Uniform => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    /// Drawn uniformly, either by the epsilon branch or during warm-up.
    pub prior_branch: bool,
    pub warmup: bool,
    pub scores: Vec<f64>,
    pub values: Vec<f64>,
    pub knn: Vec<f64>,
}

/// Index drawn from `softmax(logits)`.
pub fn sample_softmax(logits: &[f64], rng: &mut SimRng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Epsilon-greedy choice over candidate scores. The epsilon coin is drawn on
/// every call so the random stream does not depend on the scores.
pub fn select_from_scores(scores: &[f64], epsilon: f64, rng: &mut SimRng) -> (usize, bool) {
    let explore = rng.random::<f64>() < epsilon;
    let uniform = rng.random_range(0..scores.len());
    let soft = sample_softmax(scores, rng);
    if explore {
        (uniform, true)
    } else {
        (soft, false)
    }
}

/// Scores the candidates against a subset of buffer embeddings and selects one.
pub fn select_task(
    candidates: &[TaskParam],
    model: &SamplerModel,
    buffer_embeddings: &[Vec<f64>],
    buffer_len: usize,
    mode: SamplerMode,
    cfg: &SamplerConfig,
    rng: &mut SimRng,
) -> Result<Selection, SamplerError> {
    if candidates.is_empty() {
        return Err(SamplerError::NoCandidates);
    }
    let epsilon = if mode == SamplerMode::Uniform { 1.0 } else { cfg.epsilon };
    let warmup = buffer_len < cfg.warmup_len() || buffer_embeddings.len() < cfg.k;
    if warmup || mode == SamplerMode::Uniform {
        let zeros = vec![0.0; candidates.len()];
        let (index, _) = select_from_scores(&zeros, 1.0, rng);
        return Ok(Selection { index, prior_branch: true, warmup, scores: zeros.clone(), values: zeros.clone(), knn: zeros });
    }
    let mut values = Vec::with_capacity(candidates.len());
    let mut knn = Vec::with_capacity(candidates.len());
    for w in candidates {
        let e = model.encode(w);
        values.push(model.value(&e));
        knn.push(knn_distance(&e, buffer_embeddings, cfg.k)?);
    }
    let scores: Vec<f64> = values.iter().zip(&knn).map(|(v, d)| score(mode, *v, *d, cfg.beta)).collect();
    let (index, prior_branch) = select_from_scores(&scores, epsilon, rng);
    Ok(Selection { index, prior_branch, warmup: false, scores, values, knn })
}

// ---------------------------------------------------------------------------
// Replay buffer

/// FIFO ring buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    /// Slot of the oldest item once the buffer is full.
    head: usize,
    /// Total number of pushes so far.
    pub inserted: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self { items: Vec::new(), capacity, head: 0, inserted: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.head] = item;
            self.head = (self.head + 1) % self.capacity;
        }
        self.inserted += 1;
    }

    /// Item by age, 0 being the oldest.
    pub fn get(&self, k: usize) -> Option<&T> {
        if k >= self.items.len() {
            return None;
        }
        Some(&self.items[(self.head + k) % self.items.len()])
    }

    /// Item by global insertion number, if not yet evicted.
    pub fn by_insertion(&self, n: u64) -> Option<&T> {
        let oldest = self.inserted - self.items.len() as u64;
        if n < oldest || n >= self.inserted {
            return None;
        }
        self.get((n - oldest) as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        (0..self.items.len()).map(move |k| self.get(k).expect("in range"))
    }

    /// `n` distinct items chosen uniformly.
    pub fn sample(&self, n: usize, rng: &mut SimRng) -> Result<Vec<&T>, SamplerError> {
        if n > self.items.len() || self.items.is_empty() {
            return Err(SamplerError::EmptyBuffer { want: n, have: self.items.len() });
        }
        Ok(index::sample(rng, self.items.len(), n).into_iter().map(|k| &self.items[k]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::taskspace::{sample_prior, PriorConfig};

    #[test]
    fn coincident_points_have_zero_distance() {
        let e = vec![0.3; 4];
        assert_eq!(knn_distance(&e, &vec![e.clone(); 5], 5).unwrap(), 0.0);
    }

    #[test]
    fn unit_offset_neighbour() {
        let e = vec![0.0; 3];
        let mut o = e.clone();
        o[0] = 1.0;
        assert_eq!(knn_distance(&e, &[o], 1).unwrap(), 1.0);
        assert_eq!(knn_distance(&e, &[], 1), Err(SamplerError::InsufficientBuffer { have: 0, need: 1 }));
    }

    #[test]
    fn density_scaling_law() {
        assert_eq!(density_estimate(0.0, 5, 512, 64), f64::INFINITY);
        let a = log_density_estimate(0.7, 5, 512, 64);
        let b = log_density_estimate(1.4, 5, 512, 64);
        assert!((a - b - 64.0 * std::f64::consts::LN_2).abs() < 1e-9);
        // Unit disc area and unit ball volume.
        assert!((log_unit_ball_volume(2) - std::f64::consts::PI.ln()).abs() < 1e-12);
        assert!((log_unit_ball_volume(3) - (4.0 / 3.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_model_values_one_half() {
        let mut m = SamplerModel::new(&mut seeded(0));
        m.params.values.fill(0.0);
        assert_eq!(m.value(&[0.0; EMBED_DIM]), 0.5);
    }

    #[test]
    fn empty_edge_set_is_encoded() {
        let m = SamplerModel::new(&mut seeded(0));
        let mut w = sample_prior(&mut seeded(1), &PriorConfig::default()).unwrap();
        w.init_relations.clear();
        let e = m.encode(&w);
        assert_eq!(e.len(), EMBED_DIM);
        assert!(e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tape_encoding_matches_direct() {
        let m = SamplerModel::new(&mut seeded(3));
        let w = sample_prior(&mut seeded(4), &PriorConfig::default()).unwrap();
        let mut t = Tape::new(&m.params.values);
        let e = m.encode_tape(&mut t, &w);
        assert_eq!(t.value(e), m.encode(&w).as_slice());
    }

    #[test]
    fn softmax_saturates() {
        let mut logits = vec![-10.0; 64];
        logits[7] = 10.0;
        let mut rng = seeded(0);
        let hits = (0..2000).filter(|_| select_from_scores(&logits, 0.1, &mut rng).0 == 7).count();
        assert!(hits as f64 / 2000.0 >= 0.999 * 0.9 - 0.03);
    }

    #[test]
    fn buffer_keeps_latest_when_full() {
        let mut b = ReplayBuffer::new(1);
        b.push(1);
        b.push(2);
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![2]);
        assert_eq!(b.by_insertion(0), None);
        assert_eq!(b.by_insertion(1), Some(&2));
    }

    #[test]
    fn full_sample_is_a_permutation() {
        let mut b = ReplayBuffer::new(10);
        for k in 0..7 {
            b.push(k);
        }
        let mut s: Vec<i32> = b.sample(7, &mut seeded(1)).unwrap().into_iter().copied().collect();
        s.sort();
        assert_eq!(s, (0..7).collect::<Vec<_>>());
        assert!(b.sample(8, &mut seeded(1)).is_err());
    }

    #[test]
    fn fifo_order_after_wrap() {
        let mut b = ReplayBuffer::new(3);
        for k in 0..5 {
            b.push(k);
        }
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in SamplerMode::ALL {
            assert_eq!(m.name().parse::<SamplerMode>().unwrap(), m);
        }
    }
}
