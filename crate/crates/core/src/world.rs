//! Deterministic 2.5D tabletop used as the task generation module.
//!
//! Objects are axis-aligned boxes resting on the table or on each other.
//! Poses are bottom-face centres; `yaw` is carried for completeness and kept at
//! zero by every operation here. The robot base sits at the origin, at the
//! near edge of the table, and can reach any centroid within the reach radius.
//!
//! Racks only occupy their top slab: the volume under the slab, up to the
//! clearance fraction of the rack height, is free space. Hooks are L-shaped:
//! a thin handle along the y-min edge of the bounding box and a head along the
//! x-max edge, so the centre of a hook's bounding box is empty space.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derived, SimRng};
use crate::taskspace::{
    validate, EnvContext, ObjectId, ObjectKind, Relation, RelationKind, Skill, SkillContext, TaskParam,
};

/// Centre of the table footprint; the table base is at `z = 0`.
pub const TABLE_CENTER: [f64; 2] = [0.6, 0.0];
/// Thickness of a hook's handle and head.
pub const HOOK_BAR: f64 = 0.03;
/// Largest magnitude of any action component, meters.
pub const ACTION_LIMIT: f64 = 0.5;

const EPS: f64 = 1e-9;
const PLACEMENT_ROUNDS: usize = 200;
const REGION_TRIES: usize = 100;
const MOTION_STEP: f64 = 0.005;
/// How far behind a pushed object the pusher may start.
const PUSH_MARGIN: f64 = 0.05;
/// Positional slack of hook contacts.
const CONTACT_SLACK: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConstants {
    /// Reach radius around the robot base, meters.
    pub reach_radius: f64,
    /// Free height under a rack, as a fraction of the rack height.
    pub rack_clearance: f64,
    /// Graspable height band, as fractions of the object height.
    pub grasp_band: (f64, f64),
    /// Accepted bounding-box gap for `nextto`, meters.
    pub nextto_gap: (f64, f64),
    /// How close the hook head must get to the contact point, meters.
    pub hook_tolerance: f64,
    /// Depth behind a pulled object in which the hook head makes contact.
    pub pull_contact_depth: f64,
    pub points_per_object: usize,
}

impl Default for WorldConstants {
    fn default() -> Self {
        Self {
            reach_radius: 0.8,
            rack_clearance: 0.6,
            grasp_band: (0.2, 0.8),
            nextto_gap: (0.01, 0.10),
            hook_tolerance: 0.05,
            pull_contact_depth: 0.1,
            points_per_object: 48,
        }
    }
}

impl WorldConstants {
    pub fn table_top(&self) -> f64 {
        crate::taskspace::TABLE_SIZE[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn at(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z, yaw: 0.0 }
    }
}

/// Axis-aligned rectangle in the table plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn centered(cx: f64, cy: f64, l: f64, w: f64) -> Self {
        Self { x0: cx - l / 2.0, x1: cx + l / 2.0, y0: cy - w / 2.0, y1: cy + w / 2.0 }
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.x1.min(o.x1) - self.x0.max(o.x0) > EPS && self.y1.min(o.y1) - self.y0.max(o.y0) > EPS
    }

    pub fn contains(&self, o: &Rect) -> bool {
        o.x0 >= self.x0 - EPS && o.x1 <= self.x1 + EPS && o.y0 >= self.y0 - EPS && o.y1 <= self.y1 + EPS
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 - EPS && x <= self.x1 + EPS && y >= self.y0 - EPS && y <= self.y1 + EPS
    }

    /// Euclidean separation between the rectangles; zero when they touch or overlap.
    pub fn gap(&self, o: &Rect) -> f64 {
        let dx = (o.x0 - self.x1).max(self.x0 - o.x1).max(0.0);
        let dy = (o.y0 - self.y1).max(self.y0 - o.y1).max(0.0);
        dx.hypot(dy)
    }
}

/// Axis-aligned box in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    fn area(&self, axis: usize) -> f64 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        (self.max[a] - self.min[a]) * (self.max[b] - self.min[b])
    }

    /// Parameter `t > 0` at which the ray `origin + t * dir` enters the box.
    fn ray_hit(&self, origin: [f64; 3], dir: [f64; 3]) -> bool {
        let mut t0 = 1e-7_f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-12 {
                if origin[k] <= self.min[k] || origin[k] >= self.max[k] {
                    return false;
                }
            } else {
                let a = (self.min[k] - origin[k]) / dir[k];
                let b = (self.max[k] - origin[k]) / dir[k];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        t1 - t0 > 1e-9
    }

    /// Distance from `p` to the box surface.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        let mut outside = 0.0;
        let mut inside = f64::INFINITY;
        for k in 0..3 {
            let d = (self.min[k] - p[k]).max(p[k] - self.max[k]);
            if d > 0.0 {
                outside += d * d;
            }
            inside = inside.min((p[k] - self.min[k]).min(self.max[k] - p[k]));
        }
        if outside > 0.0 {
            outside.sqrt()
        } else {
            inside
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub id: ObjectId,
    pub kind: ObjectKind,
    pub size: [f64; 3],
    pub pose: Pose,
    /// Object this one rests on; `None` only for the table.
    pub support: Option<ObjectId>,
}

impl Body {
    pub fn table() -> Self {
        Self {
            id: ObjectId::TABLE,
            kind: ObjectKind::Table,
            size: crate::taskspace::TABLE_SIZE,
            pose: Pose::at(TABLE_CENTER[0], TABLE_CENTER[1], 0.0),
            support: None,
        }
    }

    pub fn center(&self) -> [f64; 3] {
        [self.pose.x, self.pose.y, self.pose.z + self.size[2] / 2.0]
    }

    pub fn top(&self) -> f64 {
        self.pose.z + self.size[2]
    }

    pub fn rect(&self) -> Rect {
        Rect::centered(self.pose.x, self.pose.y, self.size[0], self.size[1])
    }

    pub fn radial_distance(&self) -> f64 {
        self.pose.x.hypot(self.pose.y)
    }

    /// Vertical extent this body occupies for collision purposes.
    fn occupied_z(&self, c: &WorldConstants) -> (f64, f64) {
        match self.kind {
            ObjectKind::Rack => (self.pose.z + c.rack_clearance * self.size[2], self.top()),
            _ => (self.pose.z, self.top()),
        }
    }

    fn collides(&self, other: &Body, c: &WorldConstants) -> bool {
        if !self.rect().overlaps(&other.rect()) {
            return false;
        }
        let (a0, a1) = self.occupied_z(c);
        let (b0, b1) = other.occupied_z(c);
        a1.min(b1) - a0.max(b0) > EPS
    }

    /// Boxes making up the visible geometry.
    pub fn visual_boxes(&self, c: &WorldConstants) -> Vec<Aabb> {
        let [l, w, h] = self.size;
        let (x, y, z) = (self.pose.x, self.pose.y, self.pose.z);
        let slab = |x0: f64, x1: f64, y0: f64, y1: f64, z0: f64, z1: f64| Aabb {
            min: [x + x0, y + y0, z0],
            max: [x + x1, y + y1, z1],
        };
        match self.kind {
            ObjectKind::Hook => vec![
                slab(-l / 2.0, l / 2.0 - HOOK_BAR, -w / 2.0, -w / 2.0 + HOOK_BAR, z, z + h),
                slab(l / 2.0 - HOOK_BAR, l / 2.0, -w / 2.0, w / 2.0, z, z + h),
            ],
            ObjectKind::Rack => {
                vec![slab(-l / 2.0, l / 2.0, -w / 2.0, w / 2.0, z + c.rack_clearance * h, z + h)]
            }
            _ => vec![slab(-l / 2.0, l / 2.0, -w / 2.0, w / 2.0, z, z + h)],
        }
    }

    /// Top-down grasp of a hook's handle: only the table-plane position
    /// matters, with a little slack around the bar.
    pub fn on_handle(&self, p: [f64; 3]) -> bool {
        let [l, w, _] = self.size;
        self.kind == ObjectKind::Hook
            && p[0] >= -l / 2.0 - EPS
            && p[0] <= l / 2.0 - HOOK_BAR + EPS
            && p[1] >= -w / 2.0 - CONTACT_SLACK / 2.0
            && p[1] <= -w / 2.0 + HOOK_BAR + CONTACT_SLACK / 2.0
    }

    /// Whether a point given relative to the bounding-box centre lies on a
    /// graspable part of the object.
    pub fn graspable(&self, p: [f64; 3], c: &WorldConstants) -> bool {
        let [l, w, h] = self.size;
        let from_base = p[2] + h / 2.0;
        if from_base < c.grasp_band.0 * h - EPS || from_base > c.grasp_band.1 * h + EPS {
            return false;
        }
        let in_x = p[0].abs() <= l / 2.0 + EPS;
        let in_y = p[1].abs() <= w / 2.0 + EPS;
        match self.kind {
            ObjectKind::Hook => {
                in_x && p[0] <= l / 2.0 - HOOK_BAR + EPS && p[1] >= -w / 2.0 - EPS && p[1] <= -w / 2.0 + HOOK_BAR + EPS
            }
            _ => in_x && in_y,
        }
    }
}

/// Action of every primitive: two positions relative to the bounding-box
/// centres of the target objects `i` and `j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub p_i: [f64; 3],
    pub p_j: [f64; 3],
}

impl Action {
    pub fn from_slice(v: &[f64]) -> Self {
        Self { p_i: [v[0], v[1], v[2]], p_j: [v[3], v[4], v[5]] }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.p_i[0], self.p_i[1], self.p_i[2], self.p_j[0], self.p_j[1], self.p_j[2]]
    }

    pub fn clamped(&self) -> Self {
        let c = |v: [f64; 3]| v.map(|x| x.clamp(-ACTION_LIMIT, ACTION_LIMIT));
        Self { p_i: c(self.p_i), p_j: c(self.p_j) }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("task is structurally invalid: {0:?}")]
    InvalidTask(Vec<String>),
    #[error("no non-overlapping placement found in {0} rounds")]
    InstantiationInfeasible(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub bodies: Vec<Body>,
    pub constants: WorldConstants,
    pub step_count: u64,
}

impl WorldState {
    pub fn new(bodies: Vec<Body>, constants: WorldConstants) -> Self {
        Self { bodies, constants, step_count: 0 }
    }

    pub fn body(&self, id: ObjectId) -> Option<&Body> {
        self.bodies.iter().find(|b| b.id == id)
    }

    fn get(&self, id: ObjectId) -> Result<&Body, WorldError> {
        self.body(id).ok_or(WorldError::UnknownObject(id))
    }

    fn get_mut(&mut self, id: ObjectId) -> &mut Body {
        self.bodies.iter_mut().find(|b| b.id == id).expect("body exists")
    }

    pub fn table(&self) -> &Body {
        self.body(ObjectId::TABLE).expect("world has a table")
    }

    pub fn is_clear(&self, id: ObjectId) -> bool {
        !self.bodies.iter().any(|b| b.support == Some(id))
    }

    /// `id` followed by everything resting on it, transitively.
    pub fn stack_of(&self, id: ObjectId) -> Vec<ObjectId> {
        let mut stack = vec![id];
        let mut k = 0;
        while k < stack.len() {
            let cur = stack[k];
            stack.extend(self.bodies.iter().filter(|b| b.support == Some(cur)).map(|b| b.id));
            k += 1;
        }
        stack
    }

    fn collides_with_others(&self, body: &Body, ignore: &[ObjectId]) -> bool {
        self.bodies
            .iter()
            .filter(|o| o.id != body.id && !ignore.contains(&o.id))
            .any(|o| body.collides(o, &self.constants))
    }

    /// Checks the overlap and support invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (k, a) in self.bodies.iter().enumerate() {
            for b in &self.bodies[k + 1..] {
                if a.collides(b, &self.constants) {
                    return Err(format!("objects {} and {} overlap", a.id, b.id));
                }
            }
            match a.support {
                None if a.kind != ObjectKind::Table => return Err(format!("object {} unsupported", a.id)),
                None => {}
                Some(s) => {
                    let s = self.body(s).ok_or_else(|| format!("object {} rests on missing {s}", a.id))?;
                    if (a.pose.z - s.top()).abs() > 1e-9 {
                        return Err(format!("object {} floats above its support {}", a.id, s.id));
                    }
                    if !s.rect().overlaps(&a.rect()) {
                        return Err(format!("object {} is not above its support {}", a.id, s.id));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn in_workspace(world: &WorldState, id: ObjectId) -> Result<bool, WorldError> {
    let b = world.get(id)?;
    Ok(b.radial_distance() <= world.constants.reach_radius)
}

// ---------------------------------------------------------------------------
// Instantiation

fn uniform(rng: &mut SimRng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

struct PlacementPlan {
    order: Vec<ObjectId>,
    support: Vec<ObjectId>,
    anchor: Vec<Option<ObjectId>>,
    /// Rack an object starts under.
    under: Vec<Option<ObjectId>>,
    outer: Vec<bool>,
    pull_targets: Vec<ObjectId>,
    extra_nextto: Vec<(ObjectId, ObjectId)>,
}

fn plan_placement(w: &TaskParam) -> Result<PlacementPlan, WorldError> {
    let n = w.objects.len();
    let infeasible = || WorldError::InstantiationInfeasible(0);
    let mut support = vec![ObjectId::TABLE; n];
    for o in &w.objects[1..] {
        support[o.id.index()] = w.declared_support(o.id).unwrap_or(ObjectId::TABLE);
    }
    for o in &w.objects[1..] {
        let s = support[o.id.index()];
        if s.is_table() {
            continue;
        }
        let base = &w.objects[s.index()];
        if !base.kind.supports_objects() || o.size[0] > base.size[0] || o.size[1] > base.size[1] {
            return Err(infeasible());
        }
    }

    let mut under = vec![None; n];
    for r in w.init_relations.iter().filter(|r| r.kind == RelationKind::Under) {
        let (o, rack) = (&w.objects[r.src.index()], &w.objects[r.dst.index()]);
        if rack.kind != ObjectKind::Rack
            || !support[r.src.index()].is_table()
            || !support[r.dst.index()].is_table()
            || under[r.src.index()].is_some()
            || o.size[0] > rack.size[0]
            || o.size[1] > rack.size[1]
        {
            return Err(infeasible());
        }
        under[r.src.index()] = Some(r.dst);
    }

    let mut anchor = vec![None; n];
    let mut extra_nextto = Vec::new();
    for r in w.init_relations.iter().filter(|r| r.kind == RelationKind::NextTo) {
        if !support[r.src.index()].is_table() || !support[r.dst.index()].is_table() || r.src.is_table() || r.dst.is_table()
        {
            return Err(infeasible());
        }
        if anchor[r.src.index()].is_none() {
            anchor[r.src.index()] = Some(r.dst);
        } else {
            extra_nextto.push((r.src, r.dst));
        }
    }

    // Clusters connected by stacking or adjacency move together between the
    // reachable region and the outer band.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    let union = |a: usize, b: usize, p: &mut Vec<usize>| {
        let (ra, rb) = (find(p, a), find(p, b));
        p[ra] = rb;
    };
    for k in 1..n {
        if !support[k].is_table() {
            union(k, support[k].index(), &mut parent);
        }
        if let Some(a) = anchor[k] {
            union(k, a.index(), &mut parent);
        }
        if let Some(r) = under[k] {
            union(k, r.index(), &mut parent);
        }
    }
    let pull_targets: Vec<ObjectId> =
        w.contexts.iter().filter(|c| c.skill == Skill::PullWith).map(|c| c.i).collect();
    let mut outer = vec![false; n];
    for t in &pull_targets {
        let root = find(&mut parent, t.index());
        for k in 1..n {
            if find(&mut parent, k) == root {
                outer[k] = true;
            }
        }
    }

    let mut order = Vec::with_capacity(n - 1);
    let mut placed = vec![false; n];
    placed[0] = true;
    while order.len() < n - 1 {
        let next = (1..n).find(|&k| {
            !placed[k]
                && placed[support[k].index()]
                && anchor[k].is_none_or(|a| placed[a.index()])
                && under[k].is_none_or(|r| placed[r.index()])
        });
        match next {
            Some(k) => {
                placed[k] = true;
                order.push(ObjectId(k as u8));
            }
            None => return Err(infeasible()),
        }
    }
    Ok(PlacementPlan { order, support, anchor, under, outer, pull_targets, extra_nextto })
}

/// Instantiates a task into a world. Deterministic given the generator state.
pub fn instantiate(w: &TaskParam, rng: &mut SimRng, constants: &WorldConstants) -> Result<WorldState, WorldError> {
    let report = validate(w);
    if !report.is_valid() {
        return Err(WorldError::InvalidTask(report.messages()));
    }
    let plan = plan_placement(w).map_err(|_| WorldError::InstantiationInfeasible(0))?;
    for _ in 0..PLACEMENT_ROUNDS {
        if let Some(world) = try_place(w, &plan, rng, constants) {
            return Ok(world);
        }
    }
    Err(WorldError::InstantiationInfeasible(PLACEMENT_ROUNDS))
}

fn try_place(w: &TaskParam, plan: &PlacementPlan, rng: &mut SimRng, c: &WorldConstants) -> Option<WorldState> {
    let mut world = WorldState::new(vec![Body::table()], *c);
    let table_rect = world.table().rect();
    let top = c.table_top();
    for &id in &plan.order {
        let spec = &w.objects[id.index()];
        let [l, wd, _] = spec.size;
        let support = plan.support[id.index()];
        let (x, y, z) = if !support.is_table() {
            let base = world.body(support)?;
            let x = base.pose.x + uniform(rng, -(base.size[0] - l) / 2.0, (base.size[0] - l) / 2.0);
            let y = base.pose.y + uniform(rng, -(base.size[1] - wd) / 2.0, (base.size[1] - wd) / 2.0);
            (x, y, base.top())
        } else if let Some(r) = plan.under[id.index()] {
            let rack = world.body(r)?;
            let x = rack.pose.x + uniform(rng, -(rack.size[0] - l) / 2.0, (rack.size[0] - l) / 2.0);
            let y = rack.pose.y + uniform(rng, -(rack.size[1] - wd) / 2.0, (rack.size[1] - wd) / 2.0);
            (x, y, top)
        } else if let Some(a) = plan.anchor[id.index()] {
            let anchor = world.body(a)?;
            let gap = uniform(rng, 0.02, 0.09);
            let side = rng.random_range(0..4usize);
            let along_x = side < 2;
            let sign = if side % 2 == 0 { 1.0 } else { -1.0 };
            let (ext_a, ext_o, lat_a, lat_o) = if along_x {
                (anchor.size[0], l, anchor.size[1], wd)
            } else {
                (anchor.size[1], wd, anchor.size[0], l)
            };
            let lateral_span = ((lat_a + lat_o) / 2.0 - 0.01).max(0.0);
            let offset = sign * ((ext_a + ext_o) / 2.0 + gap);
            let lateral = uniform(rng, -lateral_span, lateral_span);
            if along_x {
                (anchor.pose.x + offset, anchor.pose.y + lateral, top)
            } else {
                (anchor.pose.x + lateral, anchor.pose.y + offset, top)
            }
        } else {
            let (r_lo, r_hi) = if plan.outer[id.index()] {
                (c.reach_radius + 0.05, c.reach_radius + 0.2)
            } else {
                (0.2, c.reach_radius - 0.05)
            };
            let mut found = None;
            for _ in 0..REGION_TRIES {
                let x = uniform(rng, table_rect.x0 + l / 2.0, table_rect.x1 - l / 2.0);
                let y = uniform(rng, table_rect.y0 + wd / 2.0, table_rect.y1 - wd / 2.0);
                let r = x.hypot(y);
                if r >= r_lo && r <= r_hi {
                    found = Some((x, y));
                    break;
                }
            }
            let (x, y) = found?;
            (x, y, top)
        };
        let body = Body { id, kind: spec.kind, size: spec.size, pose: Pose::at(x, y, z), support: Some(support) };
        if !table_rect.contains(&body.rect()) || world.collides_with_others(&body, &[]) {
            return None;
        }
        world.bodies.push(body);
    }
    for t in &plan.pull_targets {
        if world.body(*t)?.radial_distance() <= c.reach_radius {
            return None;
        }
    }
    for (a, b) in &plan.extra_nextto {
        let gap = world.body(*a)?.rect().gap(&world.body(*b)?.rect());
        if gap < c.nextto_gap.0 || gap > c.nextto_gap.1 {
            return None;
        }
    }
    world.bodies.sort_by_key(|b| b.id);
    // The scene must not show adjacency or rack cover the task does not declare.
    let declared = |r: &Relation| w.init_relations.contains(r);
    for r in relations(&world) {
        let undeclared = match r.kind {
            RelationKind::Under => !declared(&r),
            RelationKind::NextTo => !declared(&r) && !declared(&Relation::nextto(r.dst, r.src)),
            _ => false,
        };
        if undeclared {
            return None;
        }
    }
    Some(world)
}

// ---------------------------------------------------------------------------
// Observation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMask {
    pub id: ObjectId,
    pub kind: ObjectKind,
    pub indices: Vec<usize>,
}

/// Segmented point observation together with perceived relations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub points: Vec<[f64; 3]>,
    pub masks: Vec<ObjectMask>,
    pub relations: Vec<Relation>,
}

impl Observation {
    pub fn mask(&self, id: ObjectId) -> Option<&ObjectMask> {
        self.masks.iter().find(|m| m.id == id)
    }
}

/// Unit vector from the scene towards the camera.
pub fn camera_direction(env: &EnvContext) -> [f64; 3] {
    let (sp, cp) = env.camera_pitch.sin_cos();
    let (sy, cy) = env.camera_yaw.sin_cos();
    [cp * cy, cp * sy, sp]
}

const FACE_NORMALS: [([f64; 3], usize, bool); 6] = [
    ([1.0, 0.0, 0.0], 0, true),
    ([-1.0, 0.0, 0.0], 0, false),
    ([0.0, 1.0, 0.0], 1, true),
    ([0.0, -1.0, 0.0], 1, false),
    ([0.0, 0.0, 1.0], 2, true),
    ([0.0, 0.0, -1.0], 2, false),
];

/// Samples points on camera-facing surfaces, drops occluded ones and adds
/// isotropic Gaussian noise. Segmentation masks are exact.
pub fn observe(world: &WorldState, env: &EnvContext, rng: &mut SimRng) -> Observation {
    // Per-object streams keep each object's samples independent of which
    // other objects are present.
    let surface_seed: u64 = rng.random();
    let noise_seed: u64 = rng.random();
    let view = camera_direction(env);
    let c = &world.constants;
    let boxes: Vec<Vec<Aabb>> = world.bodies.iter().map(|b| b.visual_boxes(c)).collect();
    let noise = Normal::new(0.0, env.noise_scale.max(0.0)).expect("finite noise scale");

    let mut points = Vec::new();
    let mut masks = Vec::new();
    for (k, body) in world.bodies.iter().enumerate() {
        let mut surface_rng = derived(surface_seed, body.id.0 as u64);
        let mut noise_rng = derived(noise_seed, body.id.0 as u64);
        let mut faces = Vec::new();
        for bx in &boxes[k] {
            for (normal, axis, positive) in FACE_NORMALS {
                let facing: f64 = normal.iter().zip(&view).map(|(a, b)| a * b).sum();
                if facing > 1e-9 {
                    faces.push((*bx, axis, positive, bx.area(axis)));
                }
            }
        }
        let total: f64 = faces.iter().map(|f| f.3).sum();
        let mut indices = Vec::new();
        if total > 0.0 {
            for _ in 0..c.points_per_object {
                let mut u = surface_rng.random::<f64>() * total;
                let mut face = faces[faces.len() - 1];
                for f in &faces {
                    if u < f.3 {
                        face = *f;
                        break;
                    }
                    u -= f.3;
                }
                let (bx, axis, positive, _) = face;
                let mut p = [0.0; 3];
                for (d, pd) in p.iter_mut().enumerate() {
                    *pd = if d == axis {
                        if positive { bx.max[d] } else { bx.min[d] }
                    } else {
                        bx.min[d] + surface_rng.random::<f64>() * (bx.max[d] - bx.min[d])
                    };
                }
                let occluded = boxes
                    .iter()
                    .enumerate()
                    .filter(|(o, _)| *o != k)
                    .any(|(_, bs)| bs.iter().any(|b| b.ray_hit(p, view)));
                let jitter = [noise.sample(&mut noise_rng), noise.sample(&mut noise_rng), noise.sample(&mut noise_rng)];
                if occluded {
                    continue;
                }
                indices.push(points.len());
                points.push([p[0] + jitter[0], p[1] + jitter[1], p[2] + jitter[2]]);
            }
        }
        masks.push(ObjectMask { id: body.id, kind: body.kind, indices });
    }
    Observation { points, masks, relations: relations(world) }
}

// ---------------------------------------------------------------------------
// Primitives

fn unit_xy(v: [f64; 2]) -> Option<[f64; 2]> {
    let n = v[0].hypot(v[1]);
    (n > 1e-12).then(|| [v[0] / n, v[1] / n])
}

/// Half extents of a footprint along a unit direction and across it.
fn half_extents(size: [f64; 3], d: [f64; 2]) -> (f64, f64) {
    let along = d[0].abs() * size[0] / 2.0 + d[1].abs() * size[1] / 2.0;
    let across = d[1].abs() * size[0] / 2.0 + d[0].abs() * size[1] / 2.0;
    (along, across)
}

/// Translates a stack along `dir` by up to `dist`, stopping before the first
/// collision or before leaving the table. Returns the distance moved.
/// Translates the stacks rooted at `roots` together in small steps until
/// they would collide or leave the table.
fn slide_stacks(world: &mut WorldState, roots: &[ObjectId], dir: [f64; 2], dist: f64) -> f64 {
    let stack: Vec<ObjectId> = roots.iter().flat_map(|r| world.stack_of(*r)).collect();
    let originals: Vec<Body> = stack.iter().map(|id| world.body(*id).expect("stack member").clone()).collect();
    let table_rect = world.table().rect();
    let steps = (dist / MOTION_STEP).ceil() as usize;
    let mut moved = 0.0;
    for k in 1..=steps {
        let s = (k as f64 * MOTION_STEP).min(dist);
        let blocked = originals.iter().any(|b| {
            let mut probe = b.clone();
            probe.pose.x += dir[0] * s;
            probe.pose.y += dir[1] * s;
            (roots.contains(&probe.id) && !table_rect.contains(&probe.rect())) || world.collides_with_others(&probe, &stack)
        });
        if blocked {
            break;
        }
        moved = s;
    }
    for b in &originals {
        let body = world.get_mut(b.id);
        body.pose.x = b.pose.x + dir[0] * moved;
        body.pose.y = b.pose.y + dir[1] * moved;
    }
    moved
}

fn place_onto(world: &mut WorldState, i: ObjectId, j: ObjectId, a: &Action) -> Result<(), WorldError> {
    let c = world.constants;
    let bi = world.get(i)?.clone();
    let bj = world.get(j)?.clone();
    if i.is_table() || !world.is_clear(i) || !in_workspace(world, i)? || !bi.graspable(a.p_i, &c) {
        return Ok(());
    }
    let center_j = bj.center();
    let (tx, ty) = (center_j[0] + a.p_j[0], center_j[1] + a.p_j[1]);
    if tx.hypot(ty) > c.reach_radius {
        return Ok(());
    }
    let target = Rect::centered(tx, ty, bi.size[0], bi.size[1]);
    let landing = world
        .bodies
        .iter()
        .filter(|b| b.id != i && b.rect().overlaps(&target))
        .max_by(|a, b| a.top().total_cmp(&b.top()).then(b.id.cmp(&a.id)));
    let Some(support) = landing else { return Ok(()) };
    if !support.kind.supports_objects() || !support.rect().contains_point(tx, ty) {
        return Ok(());
    }
    let mut moved = bi.clone();
    moved.pose = Pose::at(tx, ty, support.top());
    moved.support = Some(support.id);
    if support.kind == ObjectKind::Table && !support.rect().contains(&target) {
        return Ok(());
    }
    if world.collides_with_others(&moved, &[]) {
        return Ok(());
    }
    *world.get_mut(i) = moved;
    Ok(())
}

fn place_nextto(world: &mut WorldState, i: ObjectId, j: ObjectId, a: &Action) -> Result<(), WorldError> {
    let c = world.constants;
    let bi = world.get(i)?.clone();
    let bj = world.get(j)?.clone();
    if i.is_table() || !world.is_clear(i) || !in_workspace(world, i)? || !bi.graspable(a.p_i, &c) {
        return Ok(());
    }
    let center_j = bj.center();
    let (tx, ty) = (center_j[0] + a.p_j[0], center_j[1] + a.p_j[1]);
    if tx.hypot(ty) > c.reach_radius {
        return Ok(());
    }
    let mut moved = bi.clone();
    moved.pose = Pose::at(tx, ty, c.table_top());
    moved.support = Some(ObjectId::TABLE);
    if !world.table().rect().contains(&moved.rect()) || world.collides_with_others(&moved, &[]) {
        return Ok(());
    }
    *world.get_mut(i) = moved;
    Ok(())
}

fn push_under(world: &mut WorldState, i: ObjectId, j: ObjectId, a: &Action) -> Result<(), WorldError> {
    let bi = world.get(i)?.clone();
    let bj = world.get(j)?.clone();
    if i.is_table() || bi.support != Some(ObjectId::TABLE) || !in_workspace(world, i)? {
        return Ok(());
    }
    let Some(d) = unit_xy([bj.pose.x - bi.pose.x, bj.pose.y - bi.pose.y]) else { return Ok(()) };
    let (along, across) = half_extents(bi.size, d);
    let s = a.p_i[0] * d[0] + a.p_i[1] * d[1];
    let lateral = -a.p_i[0] * d[1] + a.p_i[1] * d[0];
    let contact = s >= -along - PUSH_MARGIN
        && s < 0.0
        && lateral.abs() <= across
        && a.p_i[2].abs() <= bi.size[2] / 2.0;
    if !contact {
        return Ok(());
    }
    let center_j = bj.center();
    let target = [center_j[0] + a.p_j[0], center_j[1] + a.p_j[1]];
    let dist = (target[0] - bi.pose.x) * d[0] + (target[1] - bi.pose.y) * d[1];
    if dist > 0.0 {
        slide_stacks(world, &[i], d, dist);
    }
    Ok(())
}

fn pull_with(world: &mut WorldState, i: ObjectId, j: ObjectId, a: &Action) -> Result<(), WorldError> {
    let c = world.constants;
    let bi = world.get(i)?.clone();
    let hook = world.get(j)?.clone();
    if i.is_table() || hook.kind != ObjectKind::Hook || bi.support != Some(ObjectId::TABLE) {
        return Ok(());
    }
    if !in_workspace(world, j)? || !world.is_clear(j) || !hook.on_handle(a.p_j) {
        return Ok(());
    }
    let Some(u) = unit_xy([bi.pose.x, bi.pose.y]) else { return Ok(()) };
    let (along, across) = half_extents(bi.size, u);
    let s = a.p_i[0] * u[0] + a.p_i[1] * u[1];
    let lateral = -a.p_i[0] * u[1] + a.p_i[1] * u[0];
    let contact =
        s >= along - CONTACT_SLACK && s <= along + c.pull_contact_depth && lateral.abs() <= across + CONTACT_SLACK;
    if !contact {
        return Ok(());
    }
    let center_i = bi.center();
    let contact_point = [center_i[0] + a.p_i[0], center_i[1] + a.p_i[1]];
    let head_reach = c.reach_radius + (hook.size[0] / 2.0 - a.p_j[0]);
    if contact_point[0].hypot(contact_point[1]) > head_reach + c.hook_tolerance {
        return Ok(());
    }
    let dist = bi.radial_distance() - (c.reach_radius - 0.05);
    if dist > 0.0 {
        // The hook is dragged back together with the object.
        slide_stacks(world, &[i, j], [-u[0], -u[1]], dist);
    }
    Ok(())
}

/// Executes one primitive and returns the resulting world. Invalid grasps or
/// contacts leave the objects where they were.
pub fn execute_primitive(world: &WorldState, c: &SkillContext, a: &Action) -> Result<WorldState, WorldError> {
    world.get(c.i)?;
    world.get(c.j)?;
    let a = a.clamped();
    let mut next = world.clone();
    match c.skill {
        Skill::PlaceOnto => place_onto(&mut next, c.i, c.j, &a)?,
        Skill::PlaceNextTo => place_nextto(&mut next, c.i, c.j, &a)?,
        Skill::PushUnder => push_under(&mut next, c.i, c.j, &a)?,
        Skill::PullWith => pull_with(&mut next, c.i, c.j, &a)?,
    }
    next.step_count += 1;
    Ok(next)
}

// ---------------------------------------------------------------------------
// Success conditions and relations

fn rests_within(world: &WorldState, i: &Body, j: &Body) -> bool {
    i.support == Some(j.id) && j.rect().contains(&i.rect()) && (i.pose.z - j.top()).abs() < 1e-9 && {
        let _ = world;
        true
    }
}

fn is_under(world: &WorldState, i: &Body, rack: &Body) -> bool {
    rack.kind == ObjectKind::Rack
        && i.id != rack.id
        && i.support == rack.support
        && rack.rect().contains(&i.rect())
        && i.top() <= rack.pose.z + world.constants.rack_clearance * rack.size[2] + EPS
}

fn is_nextto(world: &WorldState, i: &Body, j: &Body) -> bool {
    let (lo, hi) = world.constants.nextto_gap;
    let gap = i.rect().gap(&j.rect());
    i.support == Some(ObjectId::TABLE) && j.support == Some(ObjectId::TABLE) && gap >= lo - EPS && gap <= hi + EPS
}

/// Whether the effect of `skill` on `(c.i, c.j)` holds in `world`.
pub fn effect_holds(skill: Skill, world: &WorldState, c: &SkillContext) -> bool {
    let (Some(i), Some(j)) = (world.body(c.i), world.body(c.j)) else { return false };
    match skill {
        Skill::PlaceOnto => j.kind.supports_objects() && rests_within(world, i, j),
        Skill::PlaceNextTo => !c.j.is_table() && is_nextto(world, i, j),
        Skill::PushUnder => is_under(world, i, j) && i.size[2] < world.constants.rack_clearance * j.size[2],
        Skill::PullWith => i.radial_distance() <= world.constants.reach_radius,
    }
}

/// Binary reward `R_k(s', c)`: the skill's effect holds after the step and
/// did not hold before it.
pub fn success(skill: Skill, before: &WorldState, after: &WorldState, c: &SkillContext) -> bool {
    effect_holds(skill, after, c) && !effect_holds(skill, before, c)
}

/// Ground-truth scene-graph edges, sorted.
pub fn relations(world: &WorldState) -> Vec<Relation> {
    let mut out = Vec::new();
    for i in world.bodies.iter().filter(|b| !b.id.is_table()) {
        if let Some(s) = i.support.and_then(|s| world.body(s)) {
            if rests_within(world, i, s) {
                out.push(Relation::on(i.id, s.id));
            }
        }
        for j in world.bodies.iter().filter(|b| !b.id.is_table() && b.id != i.id) {
            if is_under(world, i, j) {
                out.push(Relation::under(i.id, j.id));
            }
            if is_nextto(world, i, j) {
                out.push(Relation::nextto(i.id, j.id));
            }
        }
        if i.radial_distance() <= world.constants.reach_radius {
            out.push(Relation::in_workspace(i.id));
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::taskspace::{ObjectSpec, TaskParam};

    fn task(objects: Vec<(ObjectKind, [f64; 3])>, relations: Vec<Relation>, ctx: SkillContext) -> TaskParam {
        let mut objs = vec![ObjectSpec::table()];
        for (k, (kind, size)) in objects.into_iter().enumerate() {
            objs.push(ObjectSpec { id: ObjectId(k as u8 + 1), kind, size });
        }
        TaskParam { objects: objs, init_relations: relations, contexts: vec![ctx], env: EnvContext::default() }
    }

    fn body(id: u8, kind: ObjectKind, size: [f64; 3], x: f64, y: f64, z: f64, support: u8) -> Body {
        Body { id: ObjectId(id), kind, size, pose: Pose::at(x, y, z), support: Some(ObjectId(support)) }
    }

    fn ctx(skill: Skill, i: u8, j: u8) -> SkillContext {
        SkillContext { skill, i: ObjectId(i), j: ObjectId(j) }
    }

    #[test]
    fn single_support_sits_on_table() {
        let w = task(
            vec![(ObjectKind::Box, [0.1, 0.1, 0.1])],
            vec![Relation::on(ObjectId(1), ObjectId::TABLE)],
            ctx(Skill::PlaceOnto, 1, 0),
        );
        let world = instantiate(&w, &mut seeded(0), &WorldConstants::default()).unwrap();
        let b = world.body(ObjectId(1)).unwrap();
        assert_eq!(b.pose.z, WorldConstants::default().table_top());
        assert_eq!(b.support, Some(ObjectId::TABLE));
        world.check_invariants().unwrap();
    }

    #[test]
    fn oversized_stack_is_infeasible() {
        let w = task(
            vec![(ObjectKind::Rack, [0.16, 0.26, 0.12]), (ObjectKind::Can, [0.2, 0.2, 0.1])],
            vec![Relation::on(ObjectId(2), ObjectId(1))],
            ctx(Skill::PlaceOnto, 2, 1),
        );
        assert!(matches!(
            instantiate(&w, &mut seeded(0), &WorldConstants::default()),
            Err(WorldError::InstantiationInfeasible(_))
        ));
    }

    #[test]
    fn workspace_boundary_is_closed() {
        let c = WorldConstants::default();
        let at = |r: f64| {
            WorldState::new(vec![Body::table(), body(1, ObjectKind::Box, [0.05; 3], r, 0.0, 0.05, 0)], c)
        };
        assert!(in_workspace(&at(c.reach_radius - 0.01), ObjectId(1)).unwrap());
        assert!(!in_workspace(&at(c.reach_radius + 0.01), ObjectId(1)).unwrap());
        assert!(in_workspace(&at(c.reach_radius), ObjectId(1)).unwrap());
        assert_eq!(in_workspace(&at(0.5), ObjectId(7)), Err(WorldError::UnknownObject(ObjectId(7))));
    }

    fn stacking_world() -> WorldState {
        WorldState::new(
            vec![
                Body::table(),
                body(1, ObjectKind::Box, [0.08, 0.08, 0.1], 0.4, 0.2, 0.05, 0),
                body(2, ObjectKind::Rack, [0.3, 0.4, 0.2], 0.45, -0.2, 0.05, 0),
            ],
            WorldConstants::default(),
        )
    }

    #[test]
    fn nominal_place_onto_stacks() {
        let world = stacking_world();
        let c = ctx(Skill::PlaceOnto, 1, 2);
        let a = Action { p_i: [0.0, 0.0, 0.0], p_j: [0.0, 0.0, 0.1] };
        let after = execute_primitive(&world, &c, &a).unwrap();
        let b = after.body(ObjectId(1)).unwrap();
        assert_eq!(b.support, Some(ObjectId(2)));
        assert!((b.pose.z - 0.25).abs() < 1e-12);
        assert!(success(Skill::PlaceOnto, &world, &after, &c));
        assert_eq!(after.step_count, 1);
        after.check_invariants().unwrap();
    }

    #[test]
    fn grasping_empty_space_is_a_no_op() {
        let world = stacking_world();
        let c = ctx(Skill::PlaceOnto, 1, 2);
        let a = Action { p_i: [0.2, 0.0, 0.0], p_j: [0.0, 0.0, 0.1] };
        let after = execute_primitive(&world, &c, &a).unwrap();
        assert_eq!(after.bodies, world.bodies);
        assert!(!success(Skill::PlaceOnto, &world, &after, &c));
    }

    #[test]
    fn hook_bounding_box_centre_is_not_graspable() {
        let c = WorldConstants::default();
        let hook = body(1, ObjectKind::Hook, [0.3, 0.12, 0.03], 0.4, 0.0, 0.05, 0);
        assert!(!hook.graspable([0.0, 0.0, 0.0], &c));
        assert!(hook.graspable([0.0, -0.06 + HOOK_BAR / 2.0, 0.0], &c));
    }

    #[test]
    fn too_tall_object_cannot_go_under_rack() {
        let world = WorldState::new(
            vec![
                Body::table(),
                body(1, ObjectKind::Box, [0.08, 0.08, 0.15], 0.5, 0.25, 0.05, 0),
                body(2, ObjectKind::Rack, [0.3, 0.4, 0.2], 0.5, -0.15, 0.05, 0),
            ],
            WorldConstants::default(),
        );
        let c = ctx(Skill::PushUnder, 1, 2);
        let a = Action { p_i: [0.0, 0.04, 0.0], p_j: [0.0; 3] };
        let after = execute_primitive(&world, &c, &a).unwrap();
        assert!(!success(Skill::PushUnder, &world, &after, &c));
        after.check_invariants().unwrap();
    }

    #[test]
    fn short_box_goes_under_rack() {
        let world = WorldState::new(
            vec![
                Body::table(),
                body(1, ObjectKind::Box, [0.08, 0.08, 0.08], 0.5, 0.25, 0.05, 0),
                body(2, ObjectKind::Rack, [0.3, 0.4, 0.2], 0.5, -0.15, 0.05, 0),
            ],
            WorldConstants::default(),
        );
        let c = ctx(Skill::PushUnder, 1, 2);
        let a = Action { p_i: [0.0, 0.04, 0.0], p_j: [0.0; 3] };
        let after = execute_primitive(&world, &c, &a).unwrap();
        assert!(success(Skill::PushUnder, &world, &after, &c));
        assert!(relations(&after).contains(&Relation::under(ObjectId(1), ObjectId(2))));
        after.check_invariants().unwrap();
    }

    #[test]
    fn nextto_gap_threshold() {
        let c = WorldConstants::default();
        let make = |gap: f64| {
            WorldState::new(
                vec![
                    Body::table(),
                    body(1, ObjectKind::Box, [0.1, 0.1, 0.1], 0.4, 0.0, 0.05, 0),
                    body(2, ObjectKind::Box, [0.1, 0.1, 0.1], 0.5 + gap, 0.0, 0.05, 0),
                ],
                c,
            )
        };
        let cx = ctx(Skill::PlaceNextTo, 1, 2);
        let ok = make(0.05);
        let far = make(0.15);
        assert!(effect_holds(Skill::PlaceNextTo, &ok, &cx));
        assert!(!effect_holds(Skill::PlaceNextTo, &far, &cx));
        // An effect that already held earns no reward.
        assert!(!success(Skill::PlaceNextTo, &ok, &ok, &cx));
        assert!(success(Skill::PlaceNextTo, &far, &ok, &cx));
    }

    #[test]
    fn pull_brings_object_into_reach() {
        let c = WorldConstants::default();
        let world = WorldState::new(
            vec![
                Body::table(),
                body(1, ObjectKind::Can, [0.06, 0.06, 0.1], 0.9, 0.0, 0.05, 0),
                body(2, ObjectKind::Hook, [0.4, 0.12, 0.03], 0.4, 0.4, 0.05, 0),
            ],
            c,
        );
        let cx = ctx(Skill::PullWith, 1, 2);
        let a = Action { p_i: [0.05, 0.0, 0.0], p_j: [-0.19, -0.06 + HOOK_BAR / 2.0, 0.0] };
        let after = execute_primitive(&world, &cx, &a).unwrap();
        assert!(success(Skill::PullWith, &world, &after, &cx));
        let r = after.body(ObjectId(1)).unwrap().radial_distance();
        assert!((r - (c.reach_radius - 0.05)).abs() < 1e-9, "r = {r}");
        after.check_invariants().unwrap();
    }

    #[test]
    fn zero_noise_points_lie_on_surfaces() {
        let world = stacking_world();
        let obs = observe(&world, &EnvContext { noise_scale: 0.0, ..EnvContext::default() }, &mut seeded(3));
        for m in &obs.masks {
            let b = world.body(m.id).unwrap();
            let boxes = b.visual_boxes(&world.constants);
            for &k in &m.indices {
                let d = boxes.iter().map(|bx| bx.surface_distance(obs.points[k])).fold(f64::INFINITY, f64::min);
                assert!(d < 1e-12, "point {k} off surface by {d}");
            }
        }
    }

    #[test]
    fn observation_is_deterministic() {
        let world = stacking_world();
        let env = EnvContext { noise_scale: 0.004, ..EnvContext::default() };
        assert_eq!(observe(&world, &env, &mut seeded(9)), observe(&world, &env, &mut seeded(9)));
    }

    #[test]
    fn table_only_scene_relations() {
        let world = WorldState::new(
            vec![Body::table(), body(1, ObjectKind::Box, [0.1; 3], 0.4, 0.0, 0.05, 0)],
            WorldConstants::default(),
        );
        assert_eq!(
            relations(&world),
            vec![Relation::on(ObjectId(1), ObjectId::TABLE), Relation::in_workspace(ObjectId(1))]
        );
    }
}
