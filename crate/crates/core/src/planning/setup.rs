use super::{solve_pose_ik, IkOptions, Objective, PlanningContext, PlanningError, SetupObjectiveWeights};
use crate::kinematics::{
    geometric_jacobian_from_frames, JointConfig, JointVector, NeedlePose, TaskJacobian, DOF,
};
use nalgebra::SMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetupOptions {
    /// Total starts, including the current configuration.
    pub starts: usize,
    pub seed: u64,
    pub refine_iterations: usize,
    pub initial_step: f64,
    pub min_step: f64,
    /// Normalized-objective differences below this count as ties.
    pub tie_tolerance: f64,
    pub ik: IkOptions,
}

impl Default for SetupOptions {
    fn default() -> Self {
        Self {
            starts: 16,
            seed: 0,
            refine_iterations: 60,
            initial_step: 0.1,
            min_step: 1e-4,
            tie_tolerance: 1e-9,
            ik: IkOptions::default().with_locked_insertion(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetupResult {
    pub config: JointConfig,
    /// `U(q)` with the caller's weights.
    pub objective: f64,
    pub manipulability: f64,
    pub clearance: f64,
    pub joint_limit_margin: f64,
    pub feasible_starts: usize,
}

/// The start configurations: `current` followed by seeded uniform samples
/// that keep the current insertion depth.
pub fn setup_seeds(ctx: &PlanningContext, current: &JointConfig, opts: &SetupOptions) -> Vec<JointConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut seeds = vec![*current];
    for _ in 1..opts.starts {
        let mut q = *current;
        for j in 0..DOF - 1 {
            let r = ctx.model.limits.0[j];
            q[j] = rng.random_range(r.lo..=r.hi);
        }
        seeds.push(q);
    }
    seeds
}

/// Nullspace projector `I - J⁺J` of the task Jacobian with the locked
/// columns removed.
fn nullspace(ctx: &PlanningContext, q: &JointConfig, locked: &[bool; DOF]) -> SMatrix<f64, DOF, DOF> {
    let f = ctx.model.frames_unchecked(q);
    let jg = geometric_jacobian_from_frames(&f);
    let mut j = TaskJacobian::from_geometric(&jg, &f.axis).matrix;
    for (k, l) in locked.iter().enumerate() {
        if *l {
            j.column_mut(k).fill(0.0);
        }
    }
    let pinv = j
        .pseudo_inverse(1e-10)
        .unwrap_or_else(|_| SMatrix::<f64, DOF, 5>::zeros());
    let mut n = SMatrix::<f64, DOF, DOF>::identity() - pinv * j;
    for (k, l) in locked.iter().enumerate() {
        if *l {
            n.row_mut(k).fill(0.0);
            n.column_mut(k).fill(0.0);
        }
    }
    n
}

struct Candidate {
    config: JointConfig,
    score: f64,
}

/// Pose-preserving ascent of the normalized objective from a feasible start.
fn refine(
    ctx: &PlanningContext,
    obj: &Objective,
    target: &NeedlePose,
    start: Candidate,
    opts: &SetupOptions,
) -> Candidate {
    let mut cur = start;
    let mut step = opts.initial_step;
    for _ in 0..opts.refine_iterations {
        let Ok(g) = obj.normalized_gradient(&cur.config) else {
            break;
        };
        let d: JointVector = nullspace(ctx, &cur.config, &opts.ik.locked) * g;
        let scale = d.amax();
        if !(scale > 1e-12) {
            break;
        }
        let dir = d / scale;
        let mut improved = false;
        while step >= opts.min_step {
            let trial = ctx
                .model
                .limits
                .clamp(&JointConfig::from_vector(&(cur.config.to_vector() + dir * step)));
            let projected = solve_pose_ik(&ctx.model, target, &trial, &opts.ik)
                .ok()
                .map(|s| s.config)
                .filter(|q| ctx.is_free(q));
            if let Some(q) = projected {
                if let Ok(score) = obj.normalized_value(&q) {
                    if score > cur.score + 1e-12 {
                        cur = Candidate { config: q, score };
                        step = (step * 1.5).min(0.3);
                        improved = true;
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    cur
}

/// Finds the collision-free configuration achieving `target` that
/// maximizes the setup objective.
///
/// Every start is solved with [`solve_pose_ik`] and then climbed along the
/// task nullspace. Candidates within `tie_tolerance` of the best are
/// resolved by joint-space distance to `current`.
pub fn optimize_setup_config(
    ctx: &PlanningContext,
    target: &NeedlePose,
    current: &JointConfig,
    weights: &SetupObjectiveWeights,
    opts: &SetupOptions,
) -> Result<SetupResult, PlanningError> {
    ctx.model.limits.check(current)?;
    let obj = Objective::new(ctx, *weights);
    let mut best: Option<Candidate> = None;
    let mut feasible = 0;
    let mut converged = false;
    let mut last_err = PlanningError::InfeasibleSetup;

    for seed in setup_seeds(ctx, current, opts) {
        let sol = match solve_pose_ik(&ctx.model, target, &seed, &opts.ik) {
            Ok(s) => s,
            Err(e @ PlanningError::Unreachable { .. }) => {
                last_err = e;
                continue;
            }
            Err(e) => return Err(e),
        };
        converged = true;
        if !ctx.is_free(&sol.config) {
            continue;
        }
        feasible += 1;
        let score = obj.normalized_value(&sol.config)?;
        let cand = refine(
            ctx,
            &obj,
            target,
            Candidate {
                config: sol.config,
                score,
            },
            opts,
        );
        best = Some(match best {
            None => cand,
            Some(b) => {
                if (cand.score - b.score).abs() < opts.tie_tolerance {
                    if cand.config.distance(current) < b.config.distance(current) {
                        cand
                    } else {
                        b
                    }
                } else if cand.score > b.score {
                    cand
                } else {
                    b
                }
            }
        });
    }

    let Some(best) = best else {
        return Err(if converged { PlanningError::InfeasibleSetup } else { last_err });
    };
    let q = best.config;
    Ok(SetupResult {
        config: q,
        objective: obj.value(&q)?,
        manipulability: ctx.model.manipulability(&q)?,
        clearance: ctx.clearance(&q)?,
        joint_limit_margin: ctx.model.joint_limit_margin(&q)?,
        feasible_starts: feasible,
    })
}
