//! Closed-loop sequential evaluation: plan, execute the first skill, observe
//! the new scene graph, replan.

use std::collections::BTreeSet;

use serde::Serialize;

use rand::Rng;

use crate::rng::{derive_seed, derived, SimRng};
use crate::symbolic::{extract_scene_graph, goal_satisfied, plan};
use crate::taskspace::{EnvContext, ObjectId, ObjectKind, ObjectSpec, Relation, TaskParam};
use crate::world::{execute_primitive, relations, Body, Pose, WorldConstants, WorldState};

use super::eval::SkillActor;

/// Executed-skill cap per trial.
pub const MAX_STEPS: usize = 10;
const TRIAL_SEED: u64 = 0x5E0_7A15;
const LAYOUT_ATTEMPTS: usize = 1000;

/// Polar placement range of one table-resting object, relative to the
/// family's base angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Slot {
    pub id: ObjectId,
    pub radius: (f64, f64),
    pub angle: (f64, f64),
}

/// A benchmark family: a fixed object set and goal. Initial poses are drawn
/// per trial from the family's slots around a random, randomly mirrored base
/// angle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Family {
    pub name: &'static str,
    /// Objects and initial relations.
    pub task: TaskParam,
    pub goal: BTreeSet<Relation>,
    pub slots: Vec<Slot>,
    pub base_angle: (f64, f64),
}

fn slot(id: u8, radius: (f64, f64), angle: (f64, f64)) -> Slot {
    Slot { id: ObjectId(id), radius, angle }
}

fn family(
    name: &'static str,
    objects: Vec<(ObjectKind, [f64; 3])>,
    stacked: &[(u8, u8)],
    slots: Vec<Slot>,
    goal: Vec<Relation>,
) -> Family {
    let mut all = vec![ObjectSpec::table()];
    all.extend(objects.into_iter().enumerate().map(|(k, (kind, size))| ObjectSpec { id: ObjectId(k as u8 + 1), kind, size }));
    let init_relations = all[1..]
        .iter()
        .map(|o| {
            let support = stacked.iter().find(|(a, _)| *a == o.id.0).map_or(0, |(_, b)| *b);
            Relation::on(o.id, ObjectId(support))
        })
        .collect();
    let task = TaskParam { objects: all, init_relations, contexts: Vec::new(), env: EnvContext::default() };
    Family { name, task, goal: goal.into_iter().collect(), slots, base_angle: (-0.25, 0.25) }
}

/// Three families mixing all four skills:
///
/// - `store`: the can is out of reach and the container stands in front of
///   the rack. Pull the can in with the hook, put it in the container, push
///   the container under the rack.
/// - `gather`: pull a box into reach and set it next to the container.
/// - `tidy`: a can sits on a box in front of the rack. Put the can in the
///   container and push the box under the rack.
pub fn families() -> Vec<Family> {
    use ObjectKind::*;
    let (a, b, c, d) = (ObjectId(1), ObjectId(2), ObjectId(3), ObjectId(4));
    vec![
        family(
            "store",
            vec![(Hook, [0.36, 0.12, 0.03]), (Can, [0.06, 0.06, 0.08]), (Container, [0.14, 0.14, 0.05]), (Rack, [0.26, 0.42, 0.24])],
            &[],
            vec![
                slot(1, (0.42, 0.5), (-0.8, -0.6)),
                slot(2, (0.85, 0.9), (0.6, 0.75)),
                slot(3, (0.22, 0.28), (-0.08, 0.08)),
                slot(4, (0.58, 0.64), (-0.05, 0.05)),
            ],
            vec![Relation::on(b, c), Relation::under(c, d)],
        ),
        family(
            "gather",
            vec![(Hook, [0.4, 0.14, 0.03]), (Box, [0.08, 0.08, 0.08]), (Container, [0.2, 0.2, 0.06]), (Can, [0.07, 0.07, 0.12])],
            &[],
            vec![
                slot(1, (0.6, 0.66), (-0.6, -0.45)),
                slot(2, (0.88, 0.94), (-0.05, 0.05)),
                slot(3, (0.45, 0.55), (0.45, 0.6)),
                slot(4, (0.28, 0.34), (0.1, 0.25)),
            ],
            vec![Relation::nextto(b, c)],
        ),
        family(
            "tidy",
            vec![(Box, [0.1, 0.1, 0.06]), (Can, [0.06, 0.06, 0.06]), (Rack, [0.26, 0.42, 0.22]), (Container, [0.16, 0.16, 0.05])],
            &[(2, 1)],
            vec![
                slot(1, (0.22, 0.28), (-0.06, 0.06)),
                slot(3, (0.58, 0.64), (-0.05, 0.05)),
                slot(4, (0.42, 0.5), (0.55, 0.7)),
            ],
            vec![Relation::on(b, d), Relation::under(a, c)],
        ),
    ]
}

fn uniform(rng: &mut SimRng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws one initial world; `None` when the draw overlaps or shows
/// relations the family does not declare.
pub fn layout(f: &Family, rng: &mut SimRng, constants: &WorldConstants) -> Option<WorldState> {
    let base = uniform(rng, f.base_angle);
    let mirror = if rng.random::<bool>() { -1.0 } else { 1.0 };
    let top = constants.table_top();
    let mut world = WorldState::new(vec![Body::table()], *constants);
    for s in &f.slots {
        let o = f.task.object(s.id)?;
        let r = uniform(rng, s.radius);
        let th = mirror * (base + uniform(rng, s.angle));
        let support = Some(ObjectId::TABLE);
        world.bodies.push(Body { id: o.id, kind: o.kind, size: o.size, pose: Pose::at(r * th.cos(), r * th.sin(), top), support });
    }
    for o in &f.task.objects[1..] {
        let Some(s) = f.task.declared_support(o.id).filter(|s| !s.is_table()) else { continue };
        let base = world.body(s)?.clone();
        let x = base.pose.x + uniform(rng, (-(base.size[0] - o.size[0]) / 2.0, (base.size[0] - o.size[0]) / 2.0));
        let y = base.pose.y + uniform(rng, (-(base.size[1] - o.size[1]) / 2.0, (base.size[1] - o.size[1]) / 2.0));
        world.bodies.push(Body { id: o.id, kind: o.kind, size: o.size, pose: Pose::at(x, y, base.top()), support: Some(s) });
    }
    world.bodies.sort_by_key(|b| b.id);
    if world.bodies.len() != f.task.objects.len() || world.check_invariants().is_err() {
        return None;
    }
    let table = world.table().rect();
    if world.bodies[1..].iter().any(|b| !table.contains(&b.rect())) {
        return None;
    }
    let declared: BTreeSet<Relation> = f.task.init_relations.iter().copied().collect();
    let binary: BTreeSet<Relation> = relations(&world).into_iter().filter(|r| r.kind.is_binary()).collect();
    (binary == declared).then_some(world)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialResult {
    pub success: bool,
    /// Skills executed.
    pub steps: usize,
    /// Length of every plan computed, in order.
    pub plan_lengths: Vec<usize>,
    /// Executed skills after which the remaining plan did not shrink.
    pub skill_failures: usize,
    pub no_plan: bool,
}

/// Drives `world` towards `goal`, replanning after every executed skill.
pub fn run_closed_loop(
    actor: &dyn SkillActor,
    mut world: WorldState,
    env: &EnvContext,
    goal: &BTreeSet<Relation>,
    max_steps: usize,
    seed: u64,
) -> TrialResult {
    let mut r = TrialResult { success: false, steps: 0, plan_lengths: Vec::new(), skill_failures: 0, no_plan: false };
    let mut rng = derived(seed, 0);
    loop {
        let g = extract_scene_graph(&world);
        if goal_satisfied(&g, goal) {
            r.success = true;
            return r;
        }
        if r.steps >= max_steps {
            return r;
        }
        let Ok(p) = plan(&g, goal) else {
            r.no_plan = true;
            return r;
        };
        if let Some(&prev) = r.plan_lengths.last() {
            if p.len() >= prev {
                r.skill_failures += 1;
            }
        }
        r.plan_lengths.push(p.len());
        let c = p[0];
        if let Some(a) = actor.act(&world, env, &c, &mut rng) {
            if let Ok(next) = execute_primitive(&world, &c, &a) {
                world = next;
            }
        }
        r.steps += 1;
    }
}

/// Initial world of trial `t` of family `f`. Deterministic in its arguments.
pub fn trial_world(f: &Family, family_index: usize, t: usize, constants: &WorldConstants) -> Option<WorldState> {
    let mut rng = derived(TRIAL_SEED, ((family_index as u64) << 32) | t as u64);
    (0..LAYOUT_ATTEMPTS).find_map(|_| layout(f, &mut rng, constants))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyResult {
    pub name: &'static str,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
}

/// Success rate per family over `trials` randomized trials.
pub fn run_sequential_eval(
    actor: &dyn SkillActor,
    families: &[Family],
    trials: usize,
    seed: u64,
    constants: &WorldConstants,
    max_steps: usize,
) -> Vec<FamilyResult> {
    families
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let mut successes = 0;
            let mut steps = 0;
            for t in 0..trials {
                let Some(world) = trial_world(f, fi, t, constants) else { continue };
                let r = run_closed_loop(actor, world, &f.task.env, &f.goal, max_steps, derive_seed(seed, ((fi as u64) << 32) | t as u64));
                successes += usize::from(r.success);
                steps += r.steps;
            }
            FamilyResult {
                name: f.name,
                trials,
                successes,
                success_rate: successes as f64 / trials.max(1) as f64,
                mean_steps: steps as f64 / trials.max(1) as f64,
            }
        })
        .collect()
}
