use super::{PlanningContext, PlanningError};
use crate::collision::clearance_from_frames;
use crate::kinematics::{JointConfig, JointKind, DOF, JOINT_KINDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub seed: u64,
    /// Largest per-step change of a revolute joint (rad).
    pub revolute_resolution: f64,
    /// Largest per-step change of a prismatic joint (m).
    pub prismatic_resolution: f64,
    /// Tree extension length, in resolution steps.
    pub extend_steps: f64,
    pub max_samples: usize,
    pub shortcut_attempts: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            revolute_resolution: 0.005,
            prismatic_resolution: 0.0005,
            extend_steps: 40.0,
            max_samples: 1_000_000,
            shortcut_attempts: 100,
        }
    }
}

impl PlannerConfig {
    fn resolution(&self, j: usize) -> f64 {
        match JOINT_KINDS[j] {
            JointKind::Revolute => self.revolute_resolution,
            JointKind::Prismatic => self.prismatic_resolution,
        }
    }

    /// Number of resolution steps between two configurations.
    pub fn steps_between(&self, a: &JointConfig, b: &JointConfig) -> f64 {
        (0..DOF)
            .map(|j| (b[j] - a[j]).abs() / self.resolution(j))
            .fold(0.0, f64::max)
    }
}

/// Collision-free piecewise-linear joint path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPath {
    pub waypoints: Vec<JointConfig>,
}

impl JointPath {
    pub fn start(&self) -> &JointConfig {
        &self.waypoints[0]
    }

    pub fn end(&self) -> &JointConfig {
        self.waypoints.last().expect("non-empty path")
    }

    pub fn joint_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }
}

/// Upper bound on how far any point of the robot (link centerlines and the
/// needle) moves when the joints change by `dq`. Each revolute joint
/// contributes its angle times the longest distal lever arm; prismatic
/// joints translate everything distal by their own displacement.
struct MotionBound {
    lever: [f64; DOF],
}

impl MotionBound {
    fn new(ctx: &PlanningContext, max_depth: f64) -> Self {
        let c = &ctx.model.chain;
        let needle = (c.d0 + max_depth).max(ctx.shape.stage_length);
        let mut lever = [1.0; DOF];
        lever[3] = c.l0 + c.l1 + c.l2 + c.l3 + needle;
        lever[4] = c.l1 + c.l2 + c.l3 + needle;
        lever[5] = c.l2 + c.l3 + needle;
        lever[6] = c.l3 + needle;
        Self { lever }
    }

    fn displacement(&self, a: &JointConfig, b: &JointConfig) -> f64 {
        (0..DOF).map(|j| (b[j] - a[j]).abs() * self.lever[j]).sum()
    }
}

struct EdgeChecker<'a> {
    ctx: &'a PlanningContext,
    cfg: &'a PlannerConfig,
    bound: MotionBound,
}

impl<'a> EdgeChecker<'a> {
    fn clearance(&self, q: &JointConfig) -> Option<f64> {
        let f = self.ctx.model.frames(q).ok()?;
        let c = clearance_from_frames(&f, &self.ctx.world, &self.ctx.shape, &self.ctx.collision).value;
        (c >= 0.0).then_some(c)
    }

    fn config_ok(&self, q: &JointConfig) -> bool {
        self.clearance(q).is_some()
    }

    /// Certifies the straight segment `a -> b`: sampled at the planner
    /// resolution, and every sub-interval whose endpoint clearances do not
    /// cover half its motion bound is bisected.
    fn segment_ok(&self, a: &JointConfig, b: &JointConfig) -> bool {
        let n = self.cfg.steps_between(a, b).ceil().max(1.0) as usize;
        let mut prev = *a;
        let Some(mut prev_c) = self.clearance(&prev) else {
            return false;
        };
        for i in 1..=n {
            let next = if i == n { *b } else { a.lerp(b, i as f64 / n as f64) };
            let Some(next_c) = self.clearance(&next) else {
                return false;
            };
            if !self.interval_ok(&prev, prev_c, &next, next_c, 0) {
                return false;
            }
            prev = next;
            prev_c = next_c;
        }
        true
    }

    fn interval_ok(&self, a: &JointConfig, ca: f64, b: &JointConfig, cb: f64, depth: u32) -> bool {
        let d = self.bound.displacement(a, b);
        if ca.min(cb) >= 0.5 * d {
            return true;
        }
        if depth >= 24 {
            return false;
        }
        let mid = a.lerp(b, 0.5);
        let Some(cm) = self.clearance(&mid) else {
            return false;
        };
        self.interval_ok(a, ca, &mid, cm, depth + 1) && self.interval_ok(&mid, cm, b, cb, depth + 1)
    }
}

struct Tree {
    nodes: Vec<JointConfig>,
    parent: Vec<usize>,
}

impl Tree {
    fn new(root: JointConfig) -> Self {
        Self {
            nodes: vec![root],
            parent: vec![usize::MAX],
        }
    }

    fn nearest(&self, q: &JointConfig, cfg: &PlannerConfig) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, n) in self.nodes.iter().enumerate() {
            let d = normalized_dist2(n, q, cfg);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    fn push(&mut self, q: JointConfig, parent: usize) -> usize {
        self.nodes.push(q);
        self.parent.push(parent);
        self.nodes.len() - 1
    }

    fn path_to_root(&self, mut i: usize) -> Vec<JointConfig> {
        let mut out = vec![];
        while i != usize::MAX {
            out.push(self.nodes[i]);
            i = self.parent[i];
        }
        out
    }
}

fn normalized_dist2(a: &JointConfig, b: &JointConfig, cfg: &PlannerConfig) -> f64 {
    (0..DOF)
        .map(|j| {
            let d = (a[j] - b[j]) / cfg.resolution(j);
            d * d
        })
        .sum()
}

enum Extend {
    Reached(usize),
    Advanced(usize),
    Trapped,
}

fn steer(from: &JointConfig, to: &JointConfig, cfg: &PlannerConfig) -> (JointConfig, bool) {
    let steps = normalized_dist2(from, to, cfg).sqrt();
    if steps <= cfg.extend_steps {
        (*to, true)
    } else {
        (from.lerp(to, cfg.extend_steps / steps), false)
    }
}

fn extend(tree: &mut Tree, q: &JointConfig, checker: &EdgeChecker) -> Extend {
    let near = tree.nearest(q, checker.cfg);
    let (new, reached) = steer(&tree.nodes[near], q, checker.cfg);
    if !checker.segment_ok(&tree.nodes[near], &new) {
        return Extend::Trapped;
    }
    let id = tree.push(new, near);
    if reached {
        Extend::Reached(id)
    } else {
        Extend::Advanced(id)
    }
}

fn connect(tree: &mut Tree, q: &JointConfig, checker: &EdgeChecker) -> Extend {
    loop {
        match extend(tree, q, checker) {
            Extend::Advanced(_) => continue,
            other => return other,
        }
    }
}

/// Bidirectional sampling-tree search from `from` to `to` followed by
/// random shortcutting. Deterministic for a given `cfg.seed`. Sampling of
/// the insertion depth is restricted to the span of the two endpoints.
pub fn plan_path(
    ctx: &PlanningContext,
    from: &JointConfig,
    to: &JointConfig,
    cfg: &PlannerConfig,
    cancel: Option<&AtomicBool>,
) -> Result<JointPath, PlanningError> {
    let depth_max = from[DOF - 1].max(to[DOF - 1]);
    let checker = EdgeChecker {
        ctx,
        cfg,
        bound: MotionBound::new(ctx, depth_max),
    };
    if !checker.config_ok(from) {
        return Err(PlanningError::InvalidEndpoint { which: "start" });
    }
    if !checker.config_ok(to) {
        return Err(PlanningError::InvalidEndpoint { which: "goal" });
    }
    if from == to {
        return Ok(JointPath {
            waypoints: vec![*from],
        });
    }
    if checker.segment_ok(from, to) {
        return Ok(JointPath {
            waypoints: vec![*from, *to],
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let limits = &ctx.model.limits;
    let depth_lo = from[DOF - 1].min(to[DOF - 1]);
    let mut a = Tree::new(*from);
    let mut b = Tree::new(*to);
    let mut a_is_start = true;

    for sample in 0..cfg.max_samples {
        if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            return Err(PlanningError::Cancelled);
        }
        let mut q = [0.0; DOF];
        for (j, v) in q.iter_mut().enumerate().take(DOF - 1) {
            let r = limits.0[j];
            *v = rng.random_range(r.lo..=r.hi);
        }
        q[DOF - 1] = if depth_max > depth_lo {
            rng.random_range(depth_lo..=depth_max)
        } else {
            depth_lo
        };
        let q = JointConfig(q);

        let new_id = match extend(&mut a, &q, &checker) {
            Extend::Trapped => None,
            Extend::Reached(id) | Extend::Advanced(id) => Some(id),
        };
        if let Some(id) = new_id {
            let target = a.nodes[id];
            if let Extend::Reached(bid) = connect(&mut b, &target, &checker) {
                let mut first = a.path_to_root(id);
                first.reverse();
                let second = b.path_to_root(bid);
                // both trees contain the meeting configuration
                first.extend(second.into_iter().skip(1));
                if !a_is_start {
                    first.reverse();
                }
                log::debug!("planner connected after {} samples", sample + 1);
                let path = shortcut(first, &checker, &mut rng);
                return Ok(JointPath { waypoints: path });
            }
        }
        std::mem::swap(&mut a, &mut b);
        a_is_start = !a_is_start;
    }
    Err(PlanningError::Timeout {
        samples: cfg.max_samples,
    })
}

fn shortcut(mut path: Vec<JointConfig>, checker: &EdgeChecker, rng: &mut ChaCha8Rng) -> Vec<JointConfig> {
    for _ in 0..checker.cfg.shortcut_attempts {
        if path.len() <= 2 {
            break;
        }
        let i = rng.random_range(0..path.len() - 2);
        let j = rng.random_range(i + 2..path.len());
        if checker.segment_ok(&path[i], &path[j]) {
            path.drain(i + 1..j);
        }
    }
    path
}
