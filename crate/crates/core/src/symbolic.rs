//! Scene graphs, skill schemas with add/delete effects, and a breadth-first
//! task planner.
//!
//! The planner works on kinds and relations only. Geometric feasibility (for
//! instance whether an object is short enough to fit under a rack) is left to
//! the world; closed-loop execution replans after every step.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskspace::{BadRelation, ObjectId, ObjectKind, Relation, RelationKind, Skill, SkillContext};
use crate::world::{relations, WorldState};

/// Default plan length cap.
pub const MAX_PLAN_DEPTH: usize = 10;
/// Upper bound on distinct symbolic states visited by one search.
pub const MAX_EXPANSIONS: usize = 500_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SymbolicError {
    #[error("{context}: precondition {condition} does not hold")]
    PreconditionViolated { context: SkillContext, condition: String },
    #[error("no plan within {0} steps")]
    NoPlanFound(usize),
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("invalid scene graph: {0}")]
    InvalidGraph(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneGraph {
    pub objects: BTreeMap<ObjectId, ObjectKind>,
    pub edges: BTreeSet<Relation>,
}

impl SceneGraph {
    pub fn new(
        objects: impl IntoIterator<Item = (ObjectId, ObjectKind)>,
        edges: impl IntoIterator<Item = Relation>,
    ) -> Result<Self, SymbolicError> {
        let g = Self { objects: objects.into_iter().collect(), edges: edges.into_iter().collect() };
        g.check()?;
        Ok(g)
    }

    /// Edges reference existing ids and `on` edges form a forest.
    pub fn check(&self) -> Result<(), SymbolicError> {
        for e in &self.edges {
            for id in [e.src, e.dst] {
                if !self.objects.contains_key(&id) {
                    return Err(SymbolicError::UnknownObject(id));
                }
            }
            if !e.kind.is_binary() && e.src != e.dst {
                return Err(SymbolicError::InvalidGraph(format!("unary edge {e} with two arguments")));
            }
        }
        for &start in self.objects.keys() {
            let mut cur = start;
            for _ in 0..=self.objects.len() {
                match self.support_of(cur) {
                    Some(next) if next == start => {
                        return Err(SymbolicError::InvalidGraph(format!("on-cycle through {start}")))
                    }
                    Some(next) => cur = next,
                    None => break,
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self, id: ObjectId) -> Option<ObjectKind> {
        self.objects.get(&id).copied()
    }

    pub fn holds(&self, r: &Relation) -> bool {
        self.edges.contains(r)
    }

    pub fn support_of(&self, id: ObjectId) -> Option<ObjectId> {
        self.edges.iter().find(|e| e.kind == RelationKind::On && e.src == id).map(|e| e.dst)
    }

    /// No `on(·, id)` edge.
    pub fn is_clear(&self, id: ObjectId) -> bool {
        !self.edges.iter().any(|e| e.kind == RelationKind::On && e.dst == id)
    }
}

impl fmt::Display for SceneGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let edges: Vec<String> = self.edges.iter().map(|e| e.to_string()).collect();
        write!(f, "{{{}}}", edges.join(", "))
    }
}

pub fn extract_scene_graph(world: &WorldState) -> SceneGraph {
    SceneGraph {
        objects: world.bodies.iter().map(|b| (b.id, b.kind)).collect(),
        edges: relations(world).into_iter().collect(),
    }
}

pub fn goal_satisfied(g: &SceneGraph, goal: &BTreeSet<Relation>) -> bool {
    goal.is_subset(&g.edges)
}

// ---------------------------------------------------------------------------
// Schemas

/// Argument of a predicate template.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    I,
    J,
    Table,
    /// Matches any object; only allowed in negative conditions and deletes.
    Any,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Template {
    pub kind: RelationKind,
    pub src: Term,
    pub dst: Term,
}

impl Template {
    const fn new(kind: RelationKind, src: Term, dst: Term) -> Self {
        Self { kind, src, dst }
    }

    fn matches(&self, r: &Relation, i: ObjectId, j: ObjectId) -> bool {
        let bind = |t: Term, id: ObjectId| match t {
            Term::I => id == i,
            Term::J => id == j,
            Term::Table => id.is_table(),
            Term::Any => true,
        };
        r.kind == self.kind && bind(self.src, r.src) && (!self.kind.is_binary() || bind(self.dst, r.dst))
    }

    /// Ground relation; `None` if the template contains a wildcard.
    fn ground(&self, i: ObjectId, j: ObjectId) -> Option<Relation> {
        let resolve = |t: Term| match t {
            Term::I => Some(i),
            Term::J => Some(j),
            Term::Table => Some(ObjectId::TABLE),
            Term::Any => None,
        };
        let src = resolve(self.src)?;
        let dst = if self.kind.is_binary() { resolve(self.dst)? } else { src };
        Some(Relation { kind: self.kind, src, dst })
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = |t: Term| match t {
            Term::I => "i",
            Term::J => "j",
            Term::Table => "table",
            Term::Any => "*",
        };
        if self.kind.is_binary() {
            write!(f, "{}({}, {})", self.kind.name(), t(self.src), t(self.dst))
        } else {
            write!(f, "{}({})", self.kind.name(), t(self.src))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Holds(Template),
    NotHolds(Template),
    Clear(Term),
    KindIs(Term, ObjectKind),
    Supporting(Term),
    NotTable(Term),
    /// `i != j`
    Distinct,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = |t: &Term| match t {
            Term::I => "i",
            Term::J => "j",
            Term::Table => "table",
            Term::Any => "*",
        };
        match self {
            Condition::Holds(tpl) => write!(f, "{tpl}"),
            Condition::NotHolds(tpl) => write!(f, "not {tpl}"),
            Condition::Clear(x) => write!(f, "clear({})", t(x)),
            Condition::KindIs(x, k) => write!(f, "kind({}) = {}", t(x), k.name()),
            Condition::Supporting(x) => write!(f, "supporting({})", t(x)),
            Condition::NotTable(x) => write!(f, "{} != table", t(x)),
            Condition::Distinct => write!(f, "i != j"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkillSchema {
    pub skill: Skill,
    pub preconditions: Vec<Condition>,
    pub add: Vec<Template>,
    pub delete: Vec<Template>,
}

use Condition::*;
use RelationKind::{InWorkspace as Ws, NextTo, On, Under};
use Term::{Any, Table, I, J};

const fn tpl(kind: RelationKind, src: Term, dst: Term) -> Template {
    Template::new(kind, src, dst)
}

/// Relations that stop holding once `i` is lifted.
const LIFT_DELETES: [Template; 5] =
    [tpl(On, I, Any), tpl(Under, I, Any), tpl(Under, Any, I), tpl(NextTo, I, Any), tpl(NextTo, Any, I)];

pub fn schema(skill: Skill) -> SkillSchema {
    match skill {
        Skill::PlaceOnto => SkillSchema {
            skill,
            preconditions: vec![
                Distinct,
                NotTable(I),
                Holds(tpl(Ws, I, I)),
                Clear(I),
                Supporting(J),
                Holds(tpl(Ws, J, J)),
                Clear(J),
                NotHolds(tpl(Under, J, Any)),
            ],
            add: vec![tpl(On, I, J)],
            delete: LIFT_DELETES.to_vec(),
        },
        Skill::PlaceNextTo => SkillSchema {
            skill,
            preconditions: vec![
                Distinct,
                NotTable(I),
                NotTable(J),
                Holds(tpl(Ws, I, I)),
                Holds(tpl(Ws, J, J)),
                Clear(I),
                Holds(tpl(On, J, Table)),
            ],
            add: vec![tpl(NextTo, I, J), tpl(NextTo, J, I), tpl(On, I, Table)],
            delete: LIFT_DELETES.to_vec(),
        },
        Skill::PushUnder => SkillSchema {
            skill,
            preconditions: vec![
                Distinct,
                NotTable(I),
                KindIs(J, ObjectKind::Rack),
                Holds(tpl(Ws, I, I)),
                Holds(tpl(Ws, J, J)),
                Holds(tpl(On, I, Table)),
                Holds(tpl(On, J, Table)),
            ],
            add: vec![tpl(Under, I, J)],
            delete: vec![tpl(NextTo, I, Any), tpl(NextTo, Any, I)],
        },
        Skill::PullWith => SkillSchema {
            skill,
            preconditions: vec![
                Distinct,
                NotTable(I),
                KindIs(J, ObjectKind::Hook),
                Holds(tpl(Ws, J, J)),
                Clear(J),
                NotHolds(tpl(Ws, I, I)),
                Holds(tpl(On, I, Table)),
            ],
            add: vec![tpl(Ws, I, I)],
            delete: vec![tpl(NextTo, I, Any), tpl(NextTo, Any, I)],
        },
    }
}

/// Schemas for all skills in enum order.
pub fn schemas() -> [SkillSchema; 4] {
    Skill::ALL.map(schema)
}

fn condition_holds(g: &SceneGraph, c: &Condition, i: ObjectId, j: ObjectId) -> bool {
    let bind = |t: &Term| match t {
        Term::I => i,
        Term::J => j,
        Term::Table | Term::Any => ObjectId::TABLE,
    };
    match c {
        Holds(t) => t.ground(i, j).is_some_and(|r| g.holds(&r)),
        NotHolds(t) => !g.edges.iter().any(|r| t.matches(r, i, j)),
        Clear(x) => {
            let id = bind(x);
            id.is_table() || g.is_clear(id)
        }
        KindIs(x, k) => g.kind(bind(x)) == Some(*k),
        Supporting(x) => g.kind(bind(x)).is_some_and(|k| k.supports_objects()),
        NotTable(x) => !bind(x).is_table(),
        Distinct => i != j,
    }
}

/// First unmet precondition, if any.
pub fn unmet_precondition(g: &SceneGraph, s: &SkillSchema, i: ObjectId, j: ObjectId) -> Option<Condition> {
    s.preconditions.iter().find(|c| !condition_holds(g, c, i, j)).copied()
}

pub fn apply_schema(g: &SceneGraph, s: &SkillSchema, i: ObjectId, j: ObjectId) -> Result<SceneGraph, SymbolicError> {
    for id in [i, j] {
        if !g.objects.contains_key(&id) {
            return Err(SymbolicError::UnknownObject(id));
        }
    }
    if let Some(c) = unmet_precondition(g, s, i, j) {
        return Err(SymbolicError::PreconditionViolated {
            context: SkillContext { skill: s.skill, i, j },
            condition: c.to_string(),
        });
    }
    Ok(apply_unchecked(g, s, i, j))
}

fn apply_unchecked(g: &SceneGraph, s: &SkillSchema, i: ObjectId, j: ObjectId) -> SceneGraph {
    let mut edges: BTreeSet<Relation> =
        g.edges.iter().filter(|r| !s.delete.iter().any(|t| t.matches(r, i, j))).copied().collect();
    edges.extend(s.add.iter().filter_map(|t| t.ground(i, j)));
    SceneGraph { objects: g.objects.clone(), edges }
}

/// Every applicable ground action with its successor, in
/// `(skill, i, j)` lexicographic order.
pub fn successors(g: &SceneGraph, schemas: &[SkillSchema]) -> Vec<(SkillContext, SceneGraph)> {
    let mut out = Vec::new();
    for s in schemas {
        for &i in g.objects.keys() {
            for &j in g.objects.keys() {
                if unmet_precondition(g, s, i, j).is_none() {
                    out.push((SkillContext { skill: s.skill, i, j }, apply_unchecked(g, s, i, j)));
                }
            }
        }
    }
    out
}

/// Shortest skill sequence reaching `goal`, by breadth-first search.
pub fn plan(current: &SceneGraph, goal: &BTreeSet<Relation>) -> Result<Vec<SkillContext>, SymbolicError> {
    plan_with_depth(current, goal, MAX_PLAN_DEPTH)
}

pub fn plan_with_depth(
    current: &SceneGraph,
    goal: &BTreeSet<Relation>,
    max_depth: usize,
) -> Result<Vec<SkillContext>, SymbolicError> {
    for r in goal {
        for id in [r.src, r.dst] {
            if !current.objects.contains_key(&id) {
                return Err(SymbolicError::UnknownObject(id));
            }
        }
    }
    if goal_satisfied(current, goal) {
        return Ok(Vec::new());
    }
    let schemas = schemas();
    // Nodes store their parent index and the action that produced them.
    let mut nodes: Vec<(Option<usize>, Option<SkillContext>, usize)> = vec![(None, None, 0)];
    let mut states = vec![current.clone()];
    let mut seen: HashSet<BTreeSet<Relation>> = HashSet::from([current.edges.clone()]);
    let mut queue = VecDeque::from([0usize]);
    while let Some(n) = queue.pop_front() {
        let depth = nodes[n].2;
        if depth >= max_depth {
            continue;
        }
        for (ctx, next) in successors(&states[n], &schemas) {
            if !seen.insert(next.edges.clone()) {
                continue;
            }
            let id = nodes.len();
            nodes.push((Some(n), Some(ctx), depth + 1));
            if goal_satisfied(&next, goal) {
                let mut plan = Vec::with_capacity(depth + 1);
                let mut k = id;
                while let (Some(parent), Some(c), _) = nodes[k] {
                    plan.push(c);
                    k = parent;
                }
                plan.reverse();
                return Ok(plan);
            }
            if seen.len() > MAX_EXPANSIONS {
                return Err(SymbolicError::NoPlanFound(max_depth));
            }
            states.push(next);
            queue.push_back(id);
        }
    }
    Err(SymbolicError::NoPlanFound(max_depth))
}

/// A planning problem as read from a TOML file:
///
/// ```toml
/// relations = ["on(1, 0)", "on(2, 0)", "inworkspace(1)", "inworkspace(2)"]
/// goal = ["on(1, 2)"]
///
/// [objects]
/// 1 = "box"
/// 2 = "container"
/// ```
///
/// The table (id 0) is implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanProblem {
    pub graph: SceneGraph,
    pub goal: BTreeSet<Relation>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    objects: BTreeMap<String, ObjectKind>,
    #[serde(default)]
    relations: Vec<String>,
    goal: Vec<String>,
}

impl PlanProblem {
    pub fn from_toml(text: &str) -> Result<Self, SymbolicError> {
        let file: PlanFile = toml::from_str(text).map_err(|e| SymbolicError::InvalidGraph(e.to_string()))?;
        let mut objects = vec![(ObjectId::TABLE, ObjectKind::Table)];
        for (key, kind) in file.objects {
            let id = key.parse::<u8>().map_err(|_| SymbolicError::InvalidGraph(format!("bad object id `{key}`")))?;
            if id == 0 && kind != ObjectKind::Table {
                return Err(SymbolicError::InvalidGraph("object 0 is the table".into()));
            }
            objects.push((ObjectId(id), kind));
        }
        let parse = |list: &[String]| -> Result<Vec<Relation>, SymbolicError> {
            list.iter().map(|r| r.parse().map_err(|e: BadRelation| SymbolicError::InvalidGraph(e.to_string()))).collect()
        };
        let graph = SceneGraph::new(objects, parse(&file.relations)?)?;
        Ok(Self { graph, goal: parse(&file.goal)?.into_iter().collect() })
    }
}

/// Applies a plan symbolically, checking every precondition.
pub fn simulate_plan(g: &SceneGraph, plan: &[SkillContext]) -> Result<SceneGraph, SymbolicError> {
    let mut cur = g.clone();
    for c in plan {
        cur = apply_schema(&cur, &schema(c.skill), c.i, c.j)?;
    }
    Ok(cur)
}
