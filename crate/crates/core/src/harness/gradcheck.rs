//! Finite-difference checks of the sampler and policy gradients on random
//! instances.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::learnsub::{finite_diff_check_coords, GradCheck, LearnError, ParamVector};
use crate::policy::{FeaturizerConfig, PolicyModel, ACTION_DIM, FEATURE_DIM};
use crate::rng::{derive_seed, derived, SimRng};
use crate::sampler::SamplerModel;
use crate::taskspace::{sample_prior, PriorConfig, Skill, TaskParam};
use crate::world::Action;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates checked per parameter block and instance.
const COORDS_PER_BLOCK: usize = 48;
const BATCH: usize = 3;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_err: f64,
    /// Instance and block name of the worst coordinate.
    pub worst: Option<(String, usize, String)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < TOLERANCE
    }

    fn absorb(&mut self, label: &str, instance: usize, params: &ParamVector, g: &GradCheck) {
        self.checked += g.checked;
        self.excluded += g.excluded.len();
        if g.checked > 0 && (self.worst.is_none() || g.max_rel_err > self.max_rel_err) {
            self.max_rel_err = g.max_rel_err;
            let block = g
                .worst
                .and_then(|k| params.layout.iter().find(|b| k >= b.offset && k < b.offset + b.len))
                .map_or_else(String::new, |b| b.name.clone());
            self.worst = Some((label.to_string(), instance, block));
        }
    }
}

/// Up to `COORDS_PER_BLOCK` coordinates from every block.
fn coords(params: &ParamVector, rng: &mut SimRng) -> Vec<usize> {
    let mut out = Vec::new();
    for b in &params.layout {
        let n = COORDS_PER_BLOCK.min(b.len);
        out.extend(index::sample(rng, b.len, n).into_iter().map(|k| b.offset + k));
    }
    out.sort_unstable();
    out
}

fn jitter(values: &mut [f64], rng: &mut SimRng, scale: f64) {
    for v in values {
        *v += rng.random_range(-scale..scale);
    }
}

pub fn check_sampler_instance(seed: u64) -> Result<(ParamVector, GradCheck), LearnError> {
    let mut rng = derived(seed, 0);
    let mut model = SamplerModel::new(&mut rng);
    jitter(&mut model.params.values, &mut rng, 0.05);
    let prior = PriorConfig { contexts_per_task: rng.random_range(1..=2), ..PriorConfig::default() };
    let tasks: Vec<TaskParam> = (0..BATCH).map(|_| sample_prior(&mut rng, &prior).expect("default prior")).collect();
    let batch: Vec<(&TaskParam, f64)> = tasks.iter().map(|w| (w, rng.random_range(0.0..1.0))).collect();
    let cs = coords(&model.params, &mut rng);
    let g = finite_diff_check_coords(&model.params.values, STEP, cs, model.loss_fn(&batch))?;
    Ok((model.params, g))
}

pub fn check_policy_instance(seed: u64) -> Result<(ParamVector, GradCheck), LearnError> {
    let mut rng = derived(seed, 1);
    let skill = Skill::ALL[rng.random_range(0..4)];
    let mut policy = PolicyModel::new(skill, FeaturizerConfig::default(), &mut rng);
    // Undo the small output initialisation so every layer carries signal.
    jitter(&mut policy.params.values, &mut rng, 0.2);
    let batch: Vec<_> = (0..BATCH)
        .map(|_| {
            let mut f = [0.0; FEATURE_DIM];
            jitter(&mut f, &mut rng, 1.0);
            let a: Vec<f64> = (0..ACTION_DIM).map(|_| rng.random_range(-0.5..0.5)).collect();
            (f, Action::from_slice(&a))
        })
        .collect();
    let cs = coords(&policy.params, &mut rng);
    let g = finite_diff_check_coords(&policy.params.values, STEP, cs, policy.loss_fn(&batch))?;
    Ok((policy.params, g))
}

/// Checks `instances` random sampler models and as many random policies.
pub fn run_gradcheck(instances: usize, seed: u64) -> Result<GradCheckReport, LearnError> {
    let mut report = GradCheckReport { instances, ..Default::default() };
    for k in 0..instances {
        let s = derive_seed(seed, k as u64);
        let (p, g) = check_sampler_instance(s)?;
        report.absorb("encoder+value", k, &p, &g);
        let (p, g) = check_policy_instance(s)?;
        report.absorb("policy", k, &p, &g);
    }
    Ok(report)
}
