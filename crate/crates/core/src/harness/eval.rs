//! Per-skill evaluation on the shipped single-step suite.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::policy::{featurize, make_oracle_policy, ActMode, PolicyModel};
use crate::rng::{derive_seed, derived, seeded, SimRng};
use crate::taskspace::{validate, EnvContext, Skill, SkillContext, TaskParam};
use crate::world::{execute_primitive, instantiate, observe, success, Action, WorldConstants, WorldState};

use super::HarnessError;

const SUITE_JSON: &str = include_str!("../../data/eval_suite.json");

/// Root of the candidate instantiation seeds scanned when the suite's
/// instance list is built.
pub const EVAL_INSTANCE_SEED: u64 = 0x00A7_2E7A_1000;
/// Instances listed per skill.
pub const SUITE_INSTANCES: usize = 50;

/// Chooses an action for a skill context.
pub trait SkillActor {
    /// `None` when the actor cannot act, e.g. a target is not visible.
    fn act(&self, world: &WorldState, env: &EnvContext, c: &SkillContext, rng: &mut SimRng) -> Option<Action>;
}

/// Learned policies acting from simulated observations.
pub struct LearnedActor<'a> {
    pub policies: &'a [PolicyModel],
    pub mode: ActMode,
}

impl SkillActor for LearnedActor<'_> {
    fn act(&self, world: &WorldState, env: &EnvContext, c: &SkillContext, rng: &mut SimRng) -> Option<Action> {
        let obs = observe(world, env, rng);
        let p = &self.policies[c.skill.index()];
        let f = featurize(&obs, c, &p.featurizer).ok()?;
        Some(p.act(&f, self.mode, rng))
    }
}

/// Geometric oracle with access to the true world state.
pub struct OracleActors;

impl SkillActor for OracleActors {
    fn act(&self, world: &WorldState, _env: &EnvContext, c: &SkillContext, _rng: &mut SimRng) -> Option<Action> {
        Some(make_oracle_policy(c.skill).act(world, c))
    }
}

/// Zero-mean isotropic Gaussian actions, the behaviour of an untrained policy.
pub struct RandomActor {
    pub std: f64,
}

impl SkillActor for RandomActor {
    fn act(&self, _world: &WorldState, _env: &EnvContext, _c: &SkillContext, rng: &mut SimRng) -> Option<Action> {
        let n = Normal::new(0.0, self.std).expect("finite std");
        let v: Vec<f64> = (0..6).map(|_| n.sample(rng)).collect();
        Some(Action::from_slice(&v).clamped())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SuiteFile {
    tasks: BTreeMap<String, Vec<TaskParam>>,
    /// Instantiation seed of every evaluation episode; episode `e` uses task
    /// `e % tasks.len()` and seed `instances[e]`.
    instances: BTreeMap<String, Vec<u64>>,
}

/// Hand-designed single-step tasks with fixed, oracle-verified instances,
/// so every method is scored on identical worlds.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSuite {
    /// Tasks per skill, indexed like [`Skill::ALL`].
    pub tasks: Vec<Vec<TaskParam>>,
    pub instances: Vec<Vec<u64>>,
}

impl EvalSuite {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let file: SuiteFile = serde_json::from_str(text)?;
        let mut tasks = vec![Vec::new(); Skill::ALL.len()];
        let mut instances = vec![Vec::new(); Skill::ALL.len()];
        for (name, seeds) in file.instances {
            let skill: Skill = name.parse().map_err(|e| HarnessError::Config(format!("eval suite: {e}")))?;
            instances[skill.index()] = seeds;
        }
        for (name, list) in file.tasks {
            let skill: Skill = name.parse().map_err(|e| HarnessError::Config(format!("eval suite: {e}")))?;
            for (k, w) in list.iter().enumerate() {
                let report = validate(w);
                if !report.is_valid() {
                    return Err(HarnessError::Config(format!("eval task {name}[{k}]: {:?}", report.messages())));
                }
                if w.contexts.len() != 1 || w.contexts[0].skill != skill {
                    return Err(HarnessError::Config(format!("eval task {name}[{k}] must have one {name} context")));
                }
            }
            tasks[skill.index()] = list;
        }
        if tasks.iter().any(Vec::is_empty) || instances.iter().any(Vec::is_empty) {
            return Err(HarnessError::Config("eval suite must cover every skill".into()));
        }
        Ok(Self { tasks, instances })
    }

    pub fn to_json(&self) -> String {
        fn named<T: Clone>(v: &[Vec<T>]) -> BTreeMap<String, Vec<T>> {
            Skill::ALL.iter().map(|s| (s.name().to_string(), v[s.index()].clone())).collect()
        }
        let file = SuiteFile { tasks: named(&self.tasks), instances: named(&self.instances) };
        serde_json::to_string_pretty(&file).expect("suite serializes")
    }

    /// Lists, for each episode, the first candidate seed whose world
    /// instantiates and is solved by the oracle.
    pub fn resolve_instances(tasks: Vec<Vec<TaskParam>>, n: usize, constants: &WorldConstants) -> Self {
        let instances = Skill::ALL
            .iter()
            .map(|&skill| {
                let list = &tasks[skill.index()];
                (0..n)
                    .map(|e| {
                        let w = &list[e % list.len()];
                        (0u64..)
                            .map(|k| derive_seed(EVAL_INSTANCE_SEED, ((skill.index() as u64) << 48) | ((e as u64) << 16) | k))
                            .find(|&seed| {
                                instantiate(w, &mut seeded(seed), constants)
                                    .is_ok_and(|world| make_oracle_policy(skill).solves(&world, &w.contexts[0]))
                            })
                            .expect("task solvable on some instance")
                    })
                    .collect()
            })
            .collect();
        Self { tasks, instances }
    }

    /// The suite shipped with the crate.
    pub fn shipped() -> Result<Self, HarnessError> {
        Self::from_json(SUITE_JSON)
    }

    /// Task and instantiation seed of evaluation episode `e` for `skill`.
    pub fn episode(&self, skill: Skill, e: usize) -> (&TaskParam, u64) {
        let list = &self.tasks[skill.index()];
        let seeds = &self.instances[skill.index()];
        (&list[e % list.len()], seeds[e % seeds.len()])
    }

    pub fn world(&self, skill: Skill, e: usize, constants: &WorldConstants) -> Option<WorldState> {
        let (w, seed) = self.episode(skill, e);
        instantiate(w, &mut seeded(seed), constants).ok()
    }
}

/// Success rate of `actor` on each skill over `episodes` episodes cycling
/// through the suite's tasks.
pub fn evaluate_actor(
    actor: &dyn SkillActor,
    suite: &EvalSuite,
    episodes: usize,
    seed: u64,
    constants: &WorldConstants,
) -> [f64; 4] {
    let mut out = [0.0; 4];
    for skill in Skill::ALL {
        let mut wins = 0usize;
        for e in 0..episodes {
            let (w, _) = suite.episode(skill, e);
            let Some(world) = suite.world(skill, e, constants) else { continue };
            let c = w.contexts[0];
            let mut rng = derived(seed, ((skill.index() as u64) << 32) | e as u64);
            let Some(a) = actor.act(&world, &w.env, &c, &mut rng) else { continue };
            if execute_primitive(&world, &c, &a).is_ok_and(|next| success(skill, &world, &next, &c)) {
                wins += 1;
            }
        }
        out[skill.index()] = wins as f64 / episodes as f64;
    }
    out
}

/// Success rate of the learned policies, sampling actions.
pub fn evaluate_skills(
    policies: &[PolicyModel],
    suite: &EvalSuite,
    episodes: usize,
    seed: u64,
    constants: &WorldConstants,
) -> [f64; 4] {
    evaluate_actor(&LearnedActor { policies, mode: ActMode::Sample }, suite, episodes, seed, constants)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_json_round_trips() {
        let s = EvalSuite::shipped().unwrap();
        assert!(s.tasks.iter().all(|t| t.len() == 5));
        assert!(s.instances.iter().all(|i| i.len() == SUITE_INSTANCES));
        assert_eq!(EvalSuite::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn suite_rejects_mislabelled_tasks() {
        let mut s = EvalSuite::shipped().unwrap();
        s.tasks.swap(0, 1);
        assert!(EvalSuite::from_json(&s.to_json()).is_err());
    }

    #[test]
    fn resolved_seeds_are_reproduced() {
        let s = EvalSuite::shipped().unwrap();
        let tasks: Vec<Vec<TaskParam>> = s.tasks.iter().map(|t| t[..2].to_vec()).collect();
        let r = EvalSuite::resolve_instances(tasks, 2, &WorldConstants::default());
        for k in 0..4 {
            assert_eq!(r.instances[k], s.instances[k][..2]);
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let s = EvalSuite::shipped().unwrap();
        let c = WorldConstants::default();
        let a = RandomActor { std: 0.05 };
        assert_eq!(evaluate_actor(&a, &s, 40, 3, &c), evaluate_actor(&a, &s, 40, 3, &c));
    }
}
