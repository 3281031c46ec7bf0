//! Task parameter space: objects, initial relations, skill contexts and
//! environment context, together with the prior over them.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SimRng;

/// Maximum number of objects in a task, the table included.
pub const MAX_OBJECTS: usize = 6;
/// Relation slots in the canonical vector.
pub const MAX_RELATIONS: usize = 8;
/// Skill-context slots in the canonical vector.
pub const MAX_CONTEXTS: usize = 4;
/// Fixed size of the table (length, width, height) in meters.
pub const TABLE_SIZE: [f64; 3] = [1.2, 1.6, 0.05];

pub const PITCH_RANGE: (f64, f64) = (0.2, 1.2);
pub const NOISE_RANGE: (f64, f64) = (0.0, 0.01);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u8);

impl ObjectId {
    pub const TABLE: ObjectId = ObjectId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_table(self) -> bool {
        self == Self::TABLE
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectKind {
    Table,
    Rack,
    Container,
    Hook,
    Box,
    Can,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 6] = [
        ObjectKind::Table,
        ObjectKind::Rack,
        ObjectKind::Container,
        ObjectKind::Hook,
        ObjectKind::Box,
        ObjectKind::Can,
    ];
    /// Kinds that may appear in non-table slots.
    pub const MOVABLE: [ObjectKind; 5] = [
        ObjectKind::Rack,
        ObjectKind::Container,
        ObjectKind::Hook,
        ObjectKind::Box,
        ObjectKind::Can,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Whether other objects can rest on top of this kind.
    pub fn supports_objects(self) -> bool {
        matches!(self, ObjectKind::Table | ObjectKind::Rack | ObjectKind::Container | ObjectKind::Box)
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Table => "table",
            ObjectKind::Rack => "rack",
            ObjectKind::Container => "container",
            ObjectKind::Hook => "hook",
            ObjectKind::Box => "box",
            ObjectKind::Can => "can",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationKind {
    On,
    Under,
    #[serde(rename = "nextto")]
    NextTo,
    #[serde(rename = "inworkspace")]
    InWorkspace,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [
        RelationKind::On,
        RelationKind::Under,
        RelationKind::NextTo,
        RelationKind::InWorkspace,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_binary(self) -> bool {
        self != RelationKind::InWorkspace
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::On => "on",
            RelationKind::Under => "under",
            RelationKind::NextTo => "nextto",
            RelationKind::InWorkspace => "inworkspace",
        }
    }
}

/// A directed scene-graph edge. Unary relations store `dst == src`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    pub src: ObjectId,
    pub dst: ObjectId,
}

impl Relation {
    pub fn on(src: ObjectId, dst: ObjectId) -> Self {
        Self { kind: RelationKind::On, src, dst }
    }

    pub fn under(src: ObjectId, dst: ObjectId) -> Self {
        Self { kind: RelationKind::Under, src, dst }
    }

    pub fn nextto(src: ObjectId, dst: ObjectId) -> Self {
        Self { kind: RelationKind::NextTo, src, dst }
    }

    pub fn in_workspace(obj: ObjectId) -> Self {
        Self { kind: RelationKind::InWorkspace, src: obj, dst: obj }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.is_binary() {
            write!(f, "{}({}, {})", self.kind.name(), self.src, self.dst)
        } else {
            write!(f, "{}({})", self.kind.name(), self.src)
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cannot parse relation `{0}`")]
pub struct BadRelation(pub String);

/// Parses the display form, `on(1, 0)` or `inworkspace(3)`.
impl FromStr for Relation {
    type Err = BadRelation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BadRelation(s.to_string());
        let (name, rest) = s.trim().split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let kind = RelationKind::ALL.into_iter().find(|k| k.name() == name.trim()).ok_or_else(bad)?;
        let ids = args
            .split(',')
            .map(|a| a.trim().parse::<u8>().map(ObjectId))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        match (kind.is_binary(), ids.as_slice()) {
            (true, &[src, dst]) => Ok(Self { kind, src, dst }),
            (false, &[obj]) => Ok(Self::in_workspace(obj)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Skill {
    PlaceOnto,
    #[serde(rename = "place-nextto")]
    PlaceNextTo,
    PushUnder,
    PullWith,
}

impl Skill {
    pub const ALL: [Skill; 4] = [Skill::PlaceOnto, Skill::PlaceNextTo, Skill::PushUnder, Skill::PullWith];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Skill::PlaceOnto => "place-onto",
            Skill::PlaceNextTo => "place-nextto",
            Skill::PushUnder => "push-under",
            Skill::PullWith => "pull-with",
        }
    }
}

impl Skill {
    /// Whether the skill's second object may have this kind: something to
    /// stand on, anything but the table, a rack, a hook.
    pub fn accepts_target(self, kind: ObjectKind) -> bool {
        match self {
            Skill::PlaceOnto => kind.supports_objects(),
            Skill::PlaceNextTo => kind != ObjectKind::Table,
            Skill::PushUnder => kind == ObjectKind::Rack,
            Skill::PullWith => kind == ObjectKind::Hook,
        }
    }
}

impl fmt::Display for Skill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown skill `{0}`")]
pub struct UnknownSkill(pub String);

impl FromStr for Skill {
    type Err = UnknownSkill;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Skill::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| UnknownSkill(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: ObjectId,
    pub kind: ObjectKind,
    /// Length, width, height in meters.
    pub size: [f64; 3],
}

impl ObjectSpec {
    pub fn table() -> Self {
        Self { id: ObjectId::TABLE, kind: ObjectKind::Table, size: TABLE_SIZE }
    }
}

/// Skill context `(k, i, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SkillContext {
    pub skill: Skill,
    pub i: ObjectId,
    pub j: ObjectId,
}

impl fmt::Display for SkillContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}, {})", self.skill, self.i, self.j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvContext {
    pub camera_yaw: f64,
    pub camera_pitch: f64,
    /// Standard deviation of point noise, meters.
    pub noise_scale: f64,
}

impl Default for EnvContext {
    fn default() -> Self {
        Self { camera_yaw: std::f64::consts::PI, camera_pitch: 0.8, noise_scale: 0.0 }
    }
}

/// Task parameter `w = (O, E, C, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParam {
    pub objects: Vec<ObjectSpec>,
    pub init_relations: Vec<Relation>,
    pub contexts: Vec<SkillContext>,
    pub env: EnvContext,
}

impl TaskParam {
    pub fn object(&self, id: ObjectId) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Support declared by an `on` relation, if any.
    pub fn declared_support(&self, id: ObjectId) -> Option<ObjectId> {
        self.init_relations
            .iter()
            .find(|r| r.kind == RelationKind::On && r.src == id)
            .map(|r| r.dst)
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    ObjectCount(usize),
    /// Object at position `pos` does not carry id `pos`.
    IdOrder { pos: usize, id: ObjectId },
    TableSlot,
    TableSize,
    NonPositiveSize(ObjectId),
    DanglingId(ObjectId),
    SelfRelation(Relation),
    MultipleSupports(ObjectId),
    SupportCycle,
    NoContexts,
    ContextSameObject(SkillContext),
    ContextTargetsTable(SkillContext),
    EnvOutOfRange,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ObjectCount(n) => write!(f, "object count {n} outside [2, {MAX_OBJECTS}]"),
            Violation::IdOrder { pos, id } => write!(f, "object at position {pos} has id {id}"),
            Violation::TableSlot => f.write_str("table must be object 0"),
            Violation::TableSize => f.write_str("table size differs from the fixed table"),
            Violation::NonPositiveSize(id) => write!(f, "object {id} has a non-positive size"),
            Violation::DanglingId(id) => write!(f, "dangling id {id}"),
            Violation::SelfRelation(r) => write!(f, "binary relation {r} has src equal to dst"),
            Violation::MultipleSupports(id) => write!(f, "object {id} has more than one support"),
            Violation::SupportCycle => f.write_str("support cycle"),
            Violation::NoContexts => f.write_str("no skill contexts"),
            Violation::ContextSameObject(_) => f.write_str("i equals j"),
            Violation::ContextTargetsTable(c) => write!(f, "context {c} manipulates the table"),
            Violation::EnvOutOfRange => f.write_str("environment context out of range"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }
}

/// Structural checks only; geometric realisability is decided at
/// instantiation and physical feasibility is learned.
pub fn validate(w: &TaskParam) -> ValidationReport {
    let mut v = Vec::new();
    let n = w.objects.len();
    if !(2..=MAX_OBJECTS).contains(&n) {
        v.push(Violation::ObjectCount(n));
    }
    for (pos, o) in w.objects.iter().enumerate() {
        if o.id.index() != pos {
            v.push(Violation::IdOrder { pos, id: o.id });
        }
        if (o.kind == ObjectKind::Table) != (pos == 0) {
            v.push(Violation::TableSlot);
        }
        if o.kind == ObjectKind::Table && o.size != TABLE_SIZE {
            v.push(Violation::TableSize);
        }
        if !o.size.iter().all(|s| s.is_finite() && *s > 0.0) {
            v.push(Violation::NonPositiveSize(o.id));
        }
    }
    let exists = |id: ObjectId| id.index() < n && w.objects[id.index()].id == id;

    let mut supports: Vec<Option<ObjectId>> = vec![None; n.max(MAX_OBJECTS)];
    for r in &w.init_relations {
        let mut ok = true;
        for id in [r.src, r.dst] {
            if !exists(id) {
                v.push(Violation::DanglingId(id));
                ok = false;
            }
        }
        if r.kind.is_binary() && r.src == r.dst {
            v.push(Violation::SelfRelation(*r));
            ok = false;
        }
        if ok && r.kind == RelationKind::On {
            let slot = &mut supports[r.src.index()];
            if slot.is_some() {
                v.push(Violation::MultipleSupports(r.src));
            } else {
                *slot = Some(r.dst);
            }
        }
    }
    if has_support_cycle(&supports) {
        v.push(Violation::SupportCycle);
    }

    if w.contexts.is_empty() {
        v.push(Violation::NoContexts);
    }
    for c in &w.contexts {
        for id in [c.i, c.j] {
            if !exists(id) {
                v.push(Violation::DanglingId(id));
            }
        }
        if c.i == c.j {
            v.push(Violation::ContextSameObject(*c));
        }
        if c.i.is_table() {
            v.push(Violation::ContextTargetsTable(*c));
        }
    }

    let e = &w.env;
    let pitch_ok = (PITCH_RANGE.0..=PITCH_RANGE.1).contains(&e.camera_pitch);
    let noise_ok = (NOISE_RANGE.0..=NOISE_RANGE.1).contains(&e.noise_scale);
    if !(pitch_ok && noise_ok && e.camera_yaw.is_finite()) {
        v.push(Violation::EnvOutOfRange);
    }
    ValidationReport { violations: v }
}

fn has_support_cycle(supports: &[Option<ObjectId>]) -> bool {
    for start in 0..supports.len() {
        let mut seen = BTreeSet::new();
        let mut cur = start;
        while let Some(next) = supports[cur] {
            if !seen.insert(cur) {
                return true;
            }
            cur = next.index();
            if cur >= supports.len() {
                break;
            }
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Prior

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SizeRanges {
    pub rack: SizeRange,
    pub container: SizeRange,
    pub hook: SizeRange,
    #[serde(rename = "box")]
    pub box_: SizeRange,
    pub can: SizeRange,
}

impl Default for SizeRanges {
    fn default() -> Self {
        Self {
            rack: SizeRange { min: [0.16, 0.26, 0.12], max: [0.30, 0.44, 0.24] },
            container: SizeRange { min: [0.10, 0.10, 0.04], max: [0.24, 0.24, 0.10] },
            // Length of the handle, span of the head, thickness.
            hook: SizeRange { min: [0.12, 0.08, 0.02], max: [0.44, 0.16, 0.04] },
            box_: SizeRange { min: [0.05, 0.05, 0.04], max: [0.18, 0.18, 0.16] },
            can: SizeRange { min: [0.05, 0.05, 0.06], max: [0.10, 0.10, 0.16] },
        }
    }
}

impl SizeRanges {
    pub fn for_kind(&self, kind: ObjectKind) -> Option<&SizeRange> {
        match kind {
            ObjectKind::Table => None,
            ObjectKind::Rack => Some(&self.rack),
            ObjectKind::Container => Some(&self.container),
            ObjectKind::Hook => Some(&self.hook),
            ObjectKind::Box => Some(&self.box_),
            ObjectKind::Can => Some(&self.can),
        }
    }
}

/// Configuration of the task prior `p(w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Weights over object counts `min_objects..=max_objects`; empty means uniform.
    pub object_count_weights: Vec<f64>,
    /// Weights over [`ObjectKind::MOVABLE`].
    pub kind_weights: [f64; 5],
    pub sizes: SizeRanges,
    /// Probability that an object rests on another object instead of the table.
    pub stack_prob: f64,
    /// Probability that a table-resting object is declared next to another one.
    pub nextto_prob: f64,
    /// Weights over [`Skill::ALL`].
    pub skill_weights: [f64; 4],
    /// Probability that a context's second object is drawn among the kinds
    /// the skill can act on (see [`Skill::accepts_target`]) rather than
    /// among all other objects.
    pub typed_context_prob: f64,
    pub contexts_per_task: usize,
    pub yaw_range: (f64, f64),
    pub pitch_range: (f64, f64),
    pub noise_range: (f64, f64),
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            min_objects: 2,
            max_objects: MAX_OBJECTS,
            object_count_weights: Vec::new(),
            kind_weights: [1.0; 5],
            sizes: SizeRanges::default(),
            stack_prob: 0.25,
            nextto_prob: 0.2,
            skill_weights: [1.0; 4],
            typed_context_prob: 0.9,
            contexts_per_task: 1,
            yaw_range: (-std::f64::consts::PI, std::f64::consts::PI),
            pitch_range: PITCH_RANGE,
            noise_range: NOISE_RANGE,
        }
    }
}

impl PriorConfig {
    /// Probability of each object count, normalised.
    pub fn object_count_probs(&self) -> Vec<(usize, f64)> {
        let counts: Vec<usize> = (self.min_objects..=self.max_objects).collect();
        let weights: Vec<f64> = if self.object_count_weights.is_empty() {
            vec![1.0; counts.len()]
        } else {
            self.object_count_weights.clone()
        };
        let total: f64 = weights.iter().sum();
        counts.into_iter().zip(weights).map(|(c, w)| (c, w / total)).collect()
    }

    fn check(&self) -> Result<(), TaskSpaceError> {
        let bad = |msg: &str| Err(TaskSpaceError::Config(msg.to_string()));
        if self.min_objects < 2 || self.max_objects > MAX_OBJECTS || self.min_objects > self.max_objects {
            return bad("object count range must lie within [2, 6]");
        }
        if !self.object_count_weights.is_empty()
            && self.object_count_weights.len() != self.max_objects - self.min_objects + 1
        {
            return bad("object_count_weights must have one entry per count");
        }
        if self.contexts_per_task == 0 || self.contexts_per_task > MAX_CONTEXTS {
            return bad("contexts_per_task must lie within [1, 4]");
        }
        let positive = |ws: &[f64]| ws.iter().all(|w| *w >= 0.0) && ws.iter().sum::<f64>() > 0.0;
        if !positive(&self.kind_weights) || !positive(&self.skill_weights) {
            return bad("kind and skill weights must be nonnegative with a positive sum");
        }
        if !(0.0..=1.0).contains(&self.typed_context_prob) {
            return bad("typed_context_prob must lie within [0, 1]");
        }
        if !self.object_count_weights.is_empty() && !positive(&self.object_count_weights) {
            return bad("object count weights must be nonnegative with a positive sum");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TaskSpaceError {
    #[error("prior exhausted: no valid task after {0} attempts")]
    PriorExhausted(usize),
    #[error("invalid prior config: {0}")]
    Config(String),
    #[error("canonical layout overflow: {what} ({count} > {capacity})")]
    LayoutOverflow { what: &'static str, count: usize, capacity: usize },
    #[error("object id {0} outside canonical layout")]
    IdOutOfLayout(ObjectId),
    #[error("malformed canonical vector: {0}")]
    Malformed(String),
}

const PRIOR_ATTEMPTS: usize = 1000;

fn weighted_index(rng: &mut SimRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding fell off the end; return the last positive entry.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn uniform(rng: &mut SimRng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_task(rng: &mut SimRng, cfg: &PriorConfig) -> TaskParam {
    let probs = cfg.object_count_probs();
    let count_weights: Vec<f64> = probs.iter().map(|(_, p)| *p).collect();
    let n = probs[weighted_index(rng, &count_weights)].0;

    let mut objects = vec![ObjectSpec::table()];
    for id in 1..n {
        let kind = ObjectKind::MOVABLE[weighted_index(rng, &cfg.kind_weights)];
        let range = cfg.sizes.for_kind(kind).expect("movable kinds have size ranges");
        let mut size = [0.0; 3];
        for (d, s) in size.iter_mut().enumerate() {
            *s = uniform(rng, range.min[d], range.max[d]);
        }
        objects.push(ObjectSpec { id: ObjectId(id as u8), kind, size });
    }

    // Supports form a forest: each object may only rest on one placed earlier
    // in a random order.
    let mut order: Vec<ObjectId> = (1..n).map(|i| ObjectId(i as u8)).collect();
    for k in (1..order.len()).rev() {
        let s = rng.random_range(0..=k);
        order.swap(k, s);
    }
    let mut relations = Vec::new();
    let mut on_table = Vec::new();
    for (pos, &id) in order.iter().enumerate() {
        let support = if pos > 0 && rng.random::<f64>() < cfg.stack_prob {
            order[rng.random_range(0..pos)]
        } else {
            on_table.push(id);
            ObjectId::TABLE
        };
        relations.push(Relation::on(id, support));
    }
    for pos in 1..on_table.len() {
        if relations.len() >= MAX_RELATIONS {
            break;
        }
        if rng.random::<f64>() < cfg.nextto_prob {
            let anchor = on_table[rng.random_range(0..pos)];
            relations.push(Relation::nextto(on_table[pos], anchor));
        }
    }

    let movable: Vec<ObjectId> = (1..n).map(|i| ObjectId(i as u8)).collect();
    let contexts = (0..cfg.contexts_per_task)
        .map(|_| {
            let skill = Skill::ALL[weighted_index(rng, &cfg.skill_weights)];
            let i = *movable.choose(rng).expect("at least one movable object");
            let others: Vec<ObjectId> = (0..n).map(|k| ObjectId(k as u8)).filter(|&k| k != i).collect();
            let typed: Vec<ObjectId> =
                others.iter().copied().filter(|&k| skill.accepts_target(objects[k.index()].kind)).collect();
            let pool = if !typed.is_empty() && rng.random::<f64>() < cfg.typed_context_prob { &typed } else { &others };
            let j = *pool.choose(rng).expect("at least two objects");
            SkillContext { skill, i, j }
        })
        .collect();

    let env = EnvContext {
        camera_yaw: uniform(rng, cfg.yaw_range.0, cfg.yaw_range.1),
        camera_pitch: uniform(rng, cfg.pitch_range.0, cfg.pitch_range.1),
        noise_scale: uniform(rng, cfg.noise_range.0, cfg.noise_range.1),
    };
    TaskParam { objects, init_relations: relations, contexts, env }
}

/// Draws a structurally valid task from the prior. Pure in `(rng state, cfg)`.
pub fn sample_prior(rng: &mut SimRng, cfg: &PriorConfig) -> Result<TaskParam, TaskSpaceError> {
    cfg.check()?;
    for _ in 0..PRIOR_ATTEMPTS {
        let w = draw_task(rng, cfg);
        if validate(&w).is_valid() && w.init_relations.len() <= MAX_RELATIONS {
            return Ok(w);
        }
    }
    Err(TaskSpaceError::PriorExhausted(PRIOR_ATTEMPTS))
}

// ---------------------------------------------------------------------------
// Canonical vector
//
// Layout (width 45):
//   [0, 6)    presence bit per object slot
//   [6, 30)   per slot: kind index, length, width, height
//   [30, 38)  relation codes 1 + kind*36 + src*6 + dst, 0 for an empty slot
//   [38, 42)  context codes 1 + skill*36 + i*6 + j, 0 for an empty slot
//   [42, 45)  camera yaw, camera pitch, noise scale

pub const PRESENCE_OFFSET: usize = 0;
pub const SLOT_OFFSET: usize = MAX_OBJECTS;
pub const SLOT_WIDTH: usize = 4;
pub const RELATION_OFFSET: usize = SLOT_OFFSET + MAX_OBJECTS * SLOT_WIDTH;
pub const CONTEXT_OFFSET: usize = RELATION_OFFSET + MAX_RELATIONS;
pub const ENV_OFFSET: usize = CONTEXT_OFFSET + MAX_CONTEXTS;
pub const CANONICAL_WIDTH: usize = ENV_OFFSET + 3;

const PAIR_CODES: usize = MAX_OBJECTS * MAX_OBJECTS;

fn pair_code(tag: usize, a: ObjectId, b: ObjectId) -> f64 {
    (1 + tag * PAIR_CODES + a.index() * MAX_OBJECTS + b.index()) as f64
}

fn decode_pair(code: f64) -> Result<(usize, ObjectId, ObjectId), TaskSpaceError> {
    if code.fract() != 0.0 || code < 1.0 {
        return Err(TaskSpaceError::Malformed(format!("bad pair code {code}")));
    }
    let c = code as usize - 1;
    let tag = c / PAIR_CODES;
    let rest = c % PAIR_CODES;
    Ok((tag, ObjectId((rest / MAX_OBJECTS) as u8), ObjectId((rest % MAX_OBJECTS) as u8)))
}

pub fn canonical_serialize(w: &TaskParam) -> Result<[f64; CANONICAL_WIDTH], TaskSpaceError> {
    let overflow = |what, count, capacity| TaskSpaceError::LayoutOverflow { what, count, capacity };
    if w.objects.len() > MAX_OBJECTS {
        return Err(overflow("objects", w.objects.len(), MAX_OBJECTS));
    }
    if w.init_relations.len() > MAX_RELATIONS {
        return Err(overflow("relations", w.init_relations.len(), MAX_RELATIONS));
    }
    if w.contexts.len() > MAX_CONTEXTS {
        return Err(overflow("contexts", w.contexts.len(), MAX_CONTEXTS));
    }
    let mut out = [0.0; CANONICAL_WIDTH];
    for (pos, o) in w.objects.iter().enumerate() {
        if o.id.index() != pos {
            return Err(TaskSpaceError::IdOutOfLayout(o.id));
        }
        out[PRESENCE_OFFSET + pos] = 1.0;
        let base = SLOT_OFFSET + pos * SLOT_WIDTH;
        out[base] = o.kind.index() as f64;
        out[base + 1..base + 4].copy_from_slice(&o.size);
    }
    for (k, r) in w.init_relations.iter().enumerate() {
        for id in [r.src, r.dst] {
            if id.index() >= MAX_OBJECTS {
                return Err(TaskSpaceError::IdOutOfLayout(id));
            }
        }
        out[RELATION_OFFSET + k] = pair_code(r.kind.index(), r.src, r.dst);
    }
    for (k, c) in w.contexts.iter().enumerate() {
        for id in [c.i, c.j] {
            if id.index() >= MAX_OBJECTS {
                return Err(TaskSpaceError::IdOutOfLayout(id));
            }
        }
        out[CONTEXT_OFFSET + k] = pair_code(c.skill.index(), c.i, c.j);
    }
    out[ENV_OFFSET] = w.env.camera_yaw;
    out[ENV_OFFSET + 1] = w.env.camera_pitch;
    out[ENV_OFFSET + 2] = w.env.noise_scale;
    Ok(out)
}

pub fn canonical_deserialize(v: &[f64]) -> Result<TaskParam, TaskSpaceError> {
    if v.len() != CANONICAL_WIDTH {
        return Err(TaskSpaceError::Malformed(format!("width {} != {CANONICAL_WIDTH}", v.len())));
    }
    let mut objects = Vec::new();
    for pos in 0..MAX_OBJECTS {
        let base = SLOT_OFFSET + pos * SLOT_WIDTH;
        match v[PRESENCE_OFFSET + pos] {
            p if p == 1.0 => {
                let kind = ObjectKind::from_index(v[base] as usize)
                    .filter(|_| v[base].fract() == 0.0)
                    .ok_or_else(|| TaskSpaceError::Malformed(format!("bad kind {}", v[base])))?;
                let size = [v[base + 1], v[base + 2], v[base + 3]];
                objects.push(ObjectSpec { id: ObjectId(pos as u8), kind, size });
            }
            p if p == 0.0 => {
                if v[base..base + SLOT_WIDTH].iter().any(|x| *x != 0.0) {
                    return Err(TaskSpaceError::Malformed(format!("slot {pos} absent but not zero")));
                }
            }
            p => return Err(TaskSpaceError::Malformed(format!("presence bit {p}"))),
        }
    }
    let mut init_relations = Vec::new();
    for &code in &v[RELATION_OFFSET..CONTEXT_OFFSET] {
        if code == 0.0 {
            continue;
        }
        let (tag, src, dst) = decode_pair(code)?;
        let kind = *RelationKind::ALL
            .get(tag)
            .ok_or_else(|| TaskSpaceError::Malformed(format!("relation tag {tag}")))?;
        init_relations.push(Relation { kind, src, dst });
    }
    let mut contexts = Vec::new();
    for &code in &v[CONTEXT_OFFSET..ENV_OFFSET] {
        if code == 0.0 {
            continue;
        }
        let (tag, i, j) = decode_pair(code)?;
        let skill = *Skill::ALL
            .get(tag)
            .ok_or_else(|| TaskSpaceError::Malformed(format!("skill tag {tag}")))?;
        contexts.push(SkillContext { skill, i, j });
    }
    let env = EnvContext {
        camera_yaw: v[ENV_OFFSET],
        camera_pitch: v[ENV_OFFSET + 1],
        noise_scale: v[ENV_OFFSET + 2],
    };
    Ok(TaskParam { objects, init_relations, contexts, env })
}
