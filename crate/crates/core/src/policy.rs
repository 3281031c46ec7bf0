//! Per-skill Gaussian policies over hand-built object features, trained by
//! behaviour cloning on successful episodes, plus analytic oracle actors.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learnsub::{AdamState, LearnError, Mlp, ParamVector, Tape, LOG_STD_MAX, LOG_STD_MIN};
use crate::rng::SimRng;
use crate::taskspace::{ObjectId, ObjectKind, Skill, SkillContext};
use crate::world::{execute_primitive, success, Action, Observation, Rect, WorldState, ACTION_LIMIT, HOOK_BAR};

pub const FEATURE_DIM: usize = 36;
pub const ACTION_DIM: usize = 6;
pub const POLICY_ARCH: [usize; 4] = [FEATURE_DIM, 64, 64, 2 * ACTION_DIM];
pub const INIT_LOG_STD: f64 = -3.0;
/// Scale applied to the Glorot-initialised output weights so the initial
/// mean action sits near the object centres.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;
pub const LEARNING_RATE: f64 = 3e-4;

const OBJECT_FEATURES: usize = 16;

pub type FeatureVector = [f64; FEATURE_DIM];

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("object {0} has no visible points")]
    EmptyMask(ObjectId),
    #[error("object {0} is not in the observation")]
    MissingObject(ObjectId),
    #[error("behaviour cloning needs a non-empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Learn(#[from] LearnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub reach_radius: f64,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self { reach_radius: 0.8 }
    }
}

struct Descriptor {
    centroid: [f64; 3],
    lo: [f64; 3],
    hi: [f64; 3],
    kind: ObjectKind,
}

fn describe(obs: &Observation, id: ObjectId) -> Result<Descriptor, PolicyError> {
    let mask = obs.mask(id).ok_or(PolicyError::MissingObject(id))?;
    if mask.indices.is_empty() {
        return Err(PolicyError::EmptyMask(id));
    }
    let mut sum = [0.0; 3];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &k in &mask.indices {
        let p = obs.points[k];
        for d in 0..3 {
            sum[d] += p[d];
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let n = mask.indices.len() as f64;
    Ok(Descriptor { centroid: sum.map(|s| s / n), lo, hi, kind: mask.kind })
}

/// Features of the two target objects, computed from their masked points only.
///
/// Per object: centroid, extents, kind one-hot, in-reach flag, radial
/// distance and radial unit direction in the table plane. Then the centroid
/// displacement from `i` to `j` and the footprint gap between them.
pub fn featurize(obs: &Observation, c: &SkillContext, cfg: &FeaturizerConfig) -> Result<FeatureVector, PolicyError> {
    let di = describe(obs, c.i)?;
    let dj = describe(obs, c.j)?;
    let mut f = [0.0; FEATURE_DIM];
    for (slot, d) in [&di, &dj].into_iter().enumerate() {
        let o = &mut f[slot * OBJECT_FEATURES..(slot + 1) * OBJECT_FEATURES];
        o[..3].copy_from_slice(&d.centroid);
        for k in 0..3 {
            o[3 + k] = d.hi[k] - d.lo[k];
        }
        o[6 + d.kind.index()] = 1.0;
        let r = d.centroid[0].hypot(d.centroid[1]);
        o[12] = if r <= cfg.reach_radius { 1.0 } else { 0.0 };
        o[13] = r;
        if r > 1e-12 {
            o[14] = d.centroid[0] / r;
            o[15] = d.centroid[1] / r;
        }
    }
    let base = 2 * OBJECT_FEATURES;
    for k in 0..3 {
        f[base + k] = dj.centroid[k] - di.centroid[k];
    }
    let rect = |d: &Descriptor| Rect { x0: d.lo[0], x1: d.hi[0], y0: d.lo[1], y1: d.hi[1] };
    f[base + 3] = rect(&di).gap(&rect(&dj));
    Ok(f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActMode {
    Sample,
    Mean,
}

/// Draw from the diagonal Gaussian before clamping.
pub fn sample_raw(mean: &[f64], log_std: &[f64], rng: &mut SimRng) -> [f64; ACTION_DIM] {
    let mut a = [0.0; ACTION_DIM];
    for k in 0..ACTION_DIM {
        let z: f64 = rng.sample(StandardNormal);
        a[k] = mean[k] + log_std[k].clamp(LOG_STD_MIN, LOG_STD_MAX).exp() * z;
    }
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub skill: Skill,
    pub featurizer: FeaturizerConfig,
    pub params: ParamVector,
    pub mlp: Mlp,
    pub adam: AdamState,
}

impl PolicyModel {
    pub fn new(skill: Skill, featurizer: FeaturizerConfig, rng: &mut SimRng) -> Self {
        let mut params = ParamVector::default();
        let mlp = Mlp::allocate(&mut params, &format!("policy/{}", skill.name()), &POLICY_ARCH);
        mlp.init(&mut params, rng);
        let (w, b) = *mlp.layers.last().expect("output layer");
        let n_out = 2 * ACTION_DIM;
        let n_in = POLICY_ARCH[POLICY_ARCH.len() - 2];
        params.values[w..w + n_in * n_out].iter_mut().for_each(|v| *v *= OUTPUT_INIT_SCALE);
        params.values[b + ACTION_DIM..b + n_out].fill(INIT_LOG_STD);
        let adam = AdamState::new(params.len(), LEARNING_RATE);
        Self { skill, featurizer, params, mlp, adam }
    }

    pub fn arch(&self) -> Vec<u32> {
        let mut a: Vec<u32> = self.mlp.sizes.iter().map(|&s| s as u32).collect();
        a.push(self.skill.index() as u32);
        a
    }

    /// Mean and log standard deviation of the action distribution.
    pub fn distribution(&self, f: &FeatureVector) -> ([f64; ACTION_DIM], [f64; ACTION_DIM]) {
        let out = self.mlp.forward(&self.params.values, f).expect("feature width matches");
        let mut mean = [0.0; ACTION_DIM];
        let mut log_std = [0.0; ACTION_DIM];
        mean.copy_from_slice(&out[..ACTION_DIM]);
        log_std.copy_from_slice(&out[ACTION_DIM..]);
        (mean, log_std)
    }

    pub fn act(&self, f: &FeatureVector, mode: ActMode, rng: &mut SimRng) -> Action {
        let (mean, log_std) = self.distribution(f);
        let raw = match mode {
            ActMode::Mean => mean,
            ActMode::Sample => sample_raw(&mean, &log_std, rng),
        };
        Action::from_slice(&raw).clamped()
    }

    /// Negative mean log-likelihood of the batch under the current parameters.
    fn loss_on_tape(&self, tape: &mut Tape, batch: &[(FeatureVector, Action)]) -> crate::learnsub::Var {
        let terms: Vec<_> = batch
            .iter()
            .map(|(f, a)| {
                let x = tape.input(f);
                let out = self.mlp.forward_tape(tape, x);
                let mean = tape.slice(out, 0, ACTION_DIM);
                let log_std = tape.slice(out, ACTION_DIM, ACTION_DIM);
                tape.gaussian_loglik(mean, log_std, &a.to_array())
            })
            .collect();
        let m = tape.mean(&terms);
        tape.scale(m, -1.0)
    }

    pub fn bc_loss(&self, batch: &[(FeatureVector, Action)]) -> f64 {
        let mut tape = Tape::new(&self.params.values);
        let l = self.loss_on_tape(&mut tape, batch);
        tape.scalar(l)
    }

    /// One Adam step on the negative mean log-likelihood; returns the loss
    /// before the step.
    pub fn bc_update(&mut self, batch: &[(FeatureVector, Action)]) -> Result<f64, PolicyError> {
        if batch.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let (loss, grad) = {
            let mut tape = Tape::new(&self.params.values);
            let l = self.loss_on_tape(&mut tape, batch);
            (tape.scalar(l), tape.backward(l)?)
        };
        self.adam.update(&mut self.params.values, &grad);
        if let Some(k) = self.params.values.iter().position(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite { op: "adam", node: k }.into());
        }
        Ok(loss)
    }

    /// Gradient-check closure over this policy's parameters.
    pub fn loss_fn<'a>(&'a self, batch: &'a [(FeatureVector, Action)]) -> impl Fn(&mut Tape) -> crate::learnsub::Var + 'a {
        move |t| self.loss_on_tape(t, batch)
    }
}

// ---------------------------------------------------------------------------
// Oracle actors

/// Analytic action for skill `k` computed from the ground-truth world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleActor {
    pub skill: Skill,
}

pub fn make_oracle_policy(skill: Skill) -> OracleActor {
    OracleActor { skill }
}

fn center_grasp(kind: ObjectKind, size: [f64; 3]) -> [f64; 3] {
    match kind {
        ObjectKind::Hook => [-HOOK_BAR / 2.0, -size[1] / 2.0 + HOOK_BAR / 2.0, 0.0],
        _ => [0.0; 3],
    }
}

fn lim(v: [f64; 3]) -> bool {
    v.iter().all(|x| x.abs() <= ACTION_LIMIT)
}

impl OracleActor {
    /// Candidate actions in preference order.
    pub fn candidates(&self, world: &WorldState, c: &SkillContext) -> Vec<Action> {
        let (Some(bi), Some(bj)) = (world.body(c.i), world.body(c.j)) else { return Vec::new() };
        let rho = world.constants.reach_radius;
        let mut out = Vec::new();
        match self.skill {
            Skill::PlaceOnto => {
                let p_i = center_grasp(bi.kind, bi.size);
                let cj = bj.center();
                if bj.id.is_table() {
                    // Free spots on the reachable part of the table, nearest
                    // to the object's current position first.
                    let mut spots = Vec::new();
                    let half = [bi.size[0] / 2.0, bi.size[1] / 2.0];
                    let t = bj.rect();
                    let mut x = t.x0 + half[0];
                    while x <= t.x1 - half[0] {
                        let mut y = t.y0 + half[1];
                        while y <= t.y1 - half[1] {
                            if x.hypot(y) <= rho - 0.02 {
                                let d = (x - bi.pose.x).hypot(y - bi.pose.y);
                                spots.push((d, x, y));
                            }
                            y += 0.02;
                        }
                        x += 0.02;
                    }
                    spots.sort_by(|a, b| a.0.total_cmp(&b.0));
                    for (_, x, y) in spots {
                        out.push(Action { p_i, p_j: [x - cj[0], y - cj[1], 0.0] });
                    }
                } else {
                    let span = [(bj.size[0] - bi.size[0]).max(0.0) / 2.0, (bj.size[1] - bi.size[1]).max(0.0) / 2.0];
                    for fx in [0.0, -0.5, 0.5, -1.0, 1.0] {
                        for fy in [0.0, -0.5, 0.5, -1.0, 1.0] {
                            out.push(Action { p_i, p_j: [fx * span[0], fy * span[1], 0.0] });
                        }
                    }
                    // Reach-limited supports: aim at the nearest part of the top.
                    let r = bj.radial_distance();
                    if r > 1e-9 {
                        for back in [0.25, 0.5, 0.75, 1.0] {
                            let s = back * span[0].min(span[1]).max(0.0);
                            out.push(Action { p_i, p_j: [-s * bj.pose.x / r, -s * bj.pose.y / r, 0.0] });
                        }
                    }
                }
            }
            Skill::PlaceNextTo => {
                let p_i = center_grasp(bi.kind, bi.size);
                for gap in [0.05, 0.03, 0.08, 0.015, 0.095] {
                    for axis in 0..2 {
                        for sign in [-1.0, 1.0] {
                            let along = (bj.size[axis] + bi.size[axis]) / 2.0 + gap;
                            let lateral_span = (bj.size[1 - axis] + bi.size[1 - axis]) / 2.0 - 0.01;
                            for fl in [0.0, -0.5, 0.5, -0.9, 0.9] {
                                let mut p_j = [0.0; 3];
                                p_j[axis] = sign * along;
                                p_j[1 - axis] = fl * lateral_span.max(0.0);
                                if lim(p_j) {
                                    out.push(Action { p_i, p_j });
                                }
                            }
                        }
                    }
                }
            }
            Skill::PushUnder => {
                let d = [bj.pose.x - bi.pose.x, bj.pose.y - bi.pose.y];
                let n = d[0].hypot(d[1]);
                if n > 1e-12 {
                    let d = [d[0] / n, d[1] / n];
                    let along = d[0].abs() * bi.size[0] / 2.0 + d[1].abs() * bi.size[1] / 2.0;
                    let p_i = [-0.75 * along * d[0], -0.75 * along * d[1], 0.0];
                    for t in [0.0, -0.02, 0.02, -0.04, 0.04, -0.06, 0.06, -0.08, 0.08, -0.1, 0.1] {
                        out.push(Action { p_i, p_j: [t * d[0], t * d[1], 0.0] });
                    }
                }
            }
            Skill::PullWith => {
                let r = bi.radial_distance();
                if r > 1e-12 {
                    let u = [bi.pose.x / r, bi.pose.y / r];
                    let along = u[0].abs() * bi.size[0] / 2.0 + u[1].abs() * bi.size[1] / 2.0;
                    let [l, w, _] = bj.size;
                    let handle_y = -w / 2.0 + HOOK_BAR / 2.0;
                    for depth in [0.04, 0.01, 0.07] {
                        let p_i = [(along + depth) * u[0], (along + depth) * u[1], 0.0];
                        for fx in [0.01, 0.25, 0.5] {
                            let x = -l / 2.0 + fx * (l - HOOK_BAR);
                            let p_j = [x, handle_y, 0.0];
                            if lim(p_i) && lim(p_j) {
                                out.push(Action { p_i, p_j });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// First candidate that succeeds in simulation, or the first candidate
    /// when none does.
    pub fn act(&self, world: &WorldState, c: &SkillContext) -> Action {
        let candidates = self.candidates(world, c);
        for a in &candidates {
            if let Ok(next) = execute_primitive(world, c, a) {
                if success(self.skill, world, &next, c) {
                    return *a;
                }
            }
        }
        candidates.first().copied().unwrap_or(Action { p_i: [0.0; 3], p_j: [0.0; 3] })
    }

    /// Whether some candidate succeeds.
    pub fn solves(&self, world: &WorldState, c: &SkillContext) -> bool {
        let a = self.act(world, c);
        execute_primitive(world, c, &a).is_ok_and(|next| success(self.skill, world, &next, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::taskspace::EnvContext;
    use crate::world::{observe, Body, Pose, WorldConstants};

    fn body(id: u8, kind: ObjectKind, size: [f64; 3], x: f64, y: f64) -> Body {
        Body { id: ObjectId(id), kind, size, pose: Pose::at(x, y, 0.05), support: Some(ObjectId::TABLE) }
    }

    fn ctx(skill: Skill, i: u8, j: u8) -> SkillContext {
        SkillContext { skill, i: ObjectId(i), j: ObjectId(j) }
    }

    fn scene() -> WorldState {
        WorldState::new(
            vec![
                Body::table(),
                body(1, ObjectKind::Box, [0.08, 0.08, 0.08], 0.45, 0.25),
                body(2, ObjectKind::Container, [0.2, 0.2, 0.06], 0.45, -0.2),
                body(3, ObjectKind::Rack, [0.25, 0.3, 0.2], 0.3, 0.6),
            ],
            WorldConstants::default(),
        )
    }

    #[test]
    fn unit_cube_features() {
        let world = WorldState::new(
            vec![body(1, ObjectKind::Box, [1.0, 1.0, 1.0], 0.0, 0.0), body(2, ObjectKind::Box, [1.0, 1.0, 1.0], 3.0, 0.0)],
            WorldConstants::default(),
        );
        // Hand-built observation: all eight corners of each cube.
        let mut points = Vec::new();
        let mut masks = Vec::new();
        for b in &world.bodies {
            let mut idx = Vec::new();
            for cx in [-0.5, 0.5] {
                for cy in [-0.5, 0.5] {
                    for cz in [0.0, 1.0] {
                        idx.push(points.len());
                        points.push([b.pose.x + cx, b.pose.y + cy, b.pose.z - 0.05 + cz]);
                    }
                }
            }
            masks.push(crate::world::ObjectMask { id: b.id, kind: b.kind, indices: idx });
        }
        let obs = Observation { points, masks, relations: vec![] };
        let f = featurize(&obs, &ctx(Skill::PlaceNextTo, 1, 2), &FeaturizerConfig::default()).unwrap();
        assert_eq!(&f[..6], &[0.0, 0.0, 0.5, 1.0, 1.0, 1.0]);
        assert_eq!(f[6 + ObjectKind::Box.index()], 1.0);
        assert_eq!(&f[32..36], &[3.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let obs = Observation {
            points: vec![],
            masks: vec![crate::world::ObjectMask { id: ObjectId(1), kind: ObjectKind::Box, indices: vec![] }],
            relations: vec![],
        };
        assert_eq!(
            featurize(&obs, &ctx(Skill::PlaceOnto, 1, 0), &FeaturizerConfig::default()),
            Err(PolicyError::EmptyMask(ObjectId(1)))
        );
    }

    #[test]
    fn mean_action_ignores_rng() {
        let p = PolicyModel::new(Skill::PlaceOnto, FeaturizerConfig::default(), &mut seeded(1));
        let f = [0.1; FEATURE_DIM];
        assert_eq!(p.act(&f, ActMode::Mean, &mut seeded(2)), p.act(&f, ActMode::Mean, &mut seeded(3)));
    }

    #[test]
    fn mean_outside_box_is_clamped() {
        let mut p = PolicyModel::new(Skill::PlaceOnto, FeaturizerConfig::default(), &mut seeded(1));
        let (_, b) = *p.mlp.layers.last().unwrap();
        p.params.values[b] = 3.0;
        p.params.values[b + 4] = -3.0;
        let a = p.act(&[0.0; FEATURE_DIM], ActMode::Mean, &mut seeded(0));
        assert_eq!(a.p_i[0], ACTION_LIMIT);
        assert_eq!(a.p_j[1], -ACTION_LIMIT);
    }

    #[test]
    fn initial_distribution_is_centred_with_configured_spread() {
        let p = PolicyModel::new(Skill::PushUnder, FeaturizerConfig::default(), &mut seeded(4));
        let (mean, log_std) = p.distribution(&[0.3; FEATURE_DIM]);
        assert!(mean.iter().all(|m| m.abs() < 0.1), "{mean:?}");
        assert!(log_std.iter().all(|l| (l - INIT_LOG_STD).abs() < 0.1), "{log_std:?}");
    }

    #[test]
    fn memorising_one_pair_lowers_loss() {
        let mut p = PolicyModel::new(Skill::PlaceOnto, FeaturizerConfig::default(), &mut seeded(5));
        let f = [0.2; FEATURE_DIM];
        let a = Action { p_i: [0.01, -0.02, 0.0], p_j: [0.05, 0.0, 0.03] };
        let batch = vec![(f, a); 8];
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let l = p.bc_update(&batch).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn oracle_places_onto_container() {
        let world = scene();
        let c = ctx(Skill::PlaceOnto, 1, 2);
        assert!(make_oracle_policy(Skill::PlaceOnto).solves(&world, &c));
    }

    #[test]
    fn oracle_cannot_push_tall_object_under_rack() {
        let mut world = scene();
        world.bodies[1].size[2] = 0.15;
        let c = ctx(Skill::PushUnder, 1, 3);
        assert!(!make_oracle_policy(Skill::PushUnder).solves(&world, &c));
        world.bodies[1].size[2] = 0.08;
        assert!(make_oracle_policy(Skill::PushUnder).solves(&world, &c));
    }

    #[test]
    fn featurization_ignores_distractors() {
        let world = scene();
        let env = EnvContext { noise_scale: 0.0, ..EnvContext::default() };
        let obs = observe(&world, &env, &mut seeded(0));
        let mut fewer = world.clone();
        fewer.bodies.retain(|b| b.id != ObjectId(3));
        let obs2 = observe(&fewer, &env, &mut seeded(0));
        let c = ctx(Skill::PlaceOnto, 1, 2);
        let cfg = FeaturizerConfig::default();
        let a = featurize(&obs, &c, &cfg).unwrap();
        let b = featurize(&obs2, &c, &cfg).unwrap();
        // Only occlusion by the removed rack could differ; it is behind the
        // targets from this viewpoint.
        assert_eq!(a, b);
    }
}
