//! Tree-structured and sequential rollouts.
//!
//! A [`BranchSchedule`] entry `(b, B)` branches the transition that produces
//! the state at step `b`: the velocity is evaluated once at the parent (step
//! `b + 1`), the transition mean is shared, and `B` children are drawn with
//! independent noise. The root factor `B_0` acts as an implicit entry at step
//! `T - 1`, so a tree always starts from a single `x_T`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample_sde, NoiseSchedule, StepKernel, TimeGrid, Transition, VelocityField};
use crate::rng::{standard_normal_vec, stream};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchEntry {
    /// Step index of the states created by the branch.
    pub target: usize,
    pub factor: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSchedule {
    pub root_factor: usize,
    pub entries: Vec<BranchEntry>,
}

impl BranchSchedule {
    /// Builds a schedule from `(target step, factor)` pairs. Not validated.
    pub fn new(root_factor: usize, entries: &[(usize, usize)]) -> Self {
        Self {
            root_factor,
            entries: entries
                .iter()
                .map(|&(target, factor)| BranchEntry { target, factor })
                .collect(),
        }
    }

    /// Plain batch of `root_factor` chains sharing `x_T`.
    pub fn batch(root_factor: usize) -> Self {
        Self::new(root_factor, &[])
    }

    /// Converts a rule written in denoising steps counted from the start of
    /// sampling (`{2: 3, 4: 2}` means "branch on the 2nd and 4th update") into
    /// target steps (`{T-2: 3, T-4: 2}`), then validates it.
    pub fn from_denoising_rule(root_factor: usize, rule: &[(usize, usize)], steps: usize) -> Result<Self> {
        let mut entries = Vec::with_capacity(rule.len());
        for &(i, factor) in rule {
            if i == 0 || i > steps {
                return Err(Error::Schedule(format!(
                    "denoising step {i} outside 1..={steps}"
                )));
            }
            entries.push((steps - i, factor));
        }
        let schedule = Self::new(root_factor, &entries);
        schedule.validate(steps)?;
        Ok(schedule)
    }

    /// The same schedule written as denoising steps `(T - b, B)`.
    pub fn to_denoising_rule(&self, steps: usize) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .map(|e| (steps - e.target, e.factor))
            .collect()
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.root_factor < 1 {
            return Err(Error::Schedule("root factor must be at least 1".into()));
        }
        for (k, e) in self.entries.iter().enumerate() {
            if e.factor < 2 {
                return Err(Error::Schedule(format!(
                    "branch factor at step {} is {} (must be at least 2)",
                    e.target, e.factor
                )));
            }
            if e.target + 1 >= steps {
                return Err(Error::Schedule(format!(
                    "branch target {} must be below T-1 = {}",
                    e.target,
                    steps as isize - 1
                )));
            }
            if let Some(prev) = k.checked_sub(1).map(|p| self.entries[p]) {
                if prev.target == e.target {
                    return Err(Error::Schedule(format!("duplicate branch target {}", e.target)));
                }
                if prev.target < e.target {
                    return Err(Error::Schedule(format!(
                        "branch targets must be strictly decreasing ({} then {})",
                        prev.target, e.target
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_plain_batch(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of children produced per parent when creating states at `step`.
    pub fn factor_for_target(&self, step: usize, steps: usize) -> usize {
        if step + 1 == steps {
            return self.root_factor;
        }
        self.entries
            .iter()
            .find(|e| e.target == step)
            .map_or(1, |e| e.factor)
    }

    /// `N_j` for `j = 0..=T`.
    pub fn level_sizes(&self, steps: usize) -> Vec<usize> {
        let mut sizes = vec![0; steps + 1];
        sizes[steps] = 1;
        for j in (0..steps).rev() {
            sizes[j] = sizes[j + 1] * self.factor_for_target(j, steps);
        }
        sizes
    }

    pub fn leaf_count(&self) -> usize {
        self.root_factor * self.entries.iter().map(|e| e.factor).product::<usize>()
    }

    /// Steps at which new sibling groups appear: `T - 1` followed by the
    /// schedule's targets, in decreasing order.
    pub fn segment_heads(&self, steps: usize) -> Vec<usize> {
        let mut heads = Vec::with_capacity(self.entries.len() + 1);
        heads.push(steps - 1);
        heads.extend(self.entries.iter().map(|e| e.target));
        heads
    }
}

pub fn validate_schedule(schedule: &BranchSchedule, steps: usize) -> Result<()> {
    schedule.validate(steps)
}

pub fn leaf_count(schedule: &BranchSchedule) -> usize {
    schedule.leaf_count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub step: usize,
    pub state: Vec<f64>,
    pub parent: Option<NodeId>,
    pub transition: Option<Transition>,
    pub children: Vec<NodeId>,
}

/// A fully materialised rollout tree. Node ids are assigned level by level
/// from the root down, so id order is also (step descending, id) order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTree {
    pub condition: usize,
    pub schedule: BranchSchedule,
    pub steps: usize,
    pub nodes: Vec<TreeNode>,
    /// `levels[j]` lists the ids of the nodes at step `j`.
    pub levels: Vec<Vec<NodeId>>,
    /// Velocity evaluations actually performed while building the tree.
    pub velocity_evals: usize,
}

impl TrajectoryTree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::Domain(format!("unknown node id {id}")))
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.levels[0]
    }

    pub fn leaf_states(&self) -> Vec<&[f64]> {
        self.leaves()
            .iter()
            .map(|&id| self.nodes[id].state.as_slice())
            .collect()
    }

    /// Non-root nodes, i.e. edge ids, in (step descending, id) order.
    pub fn edges(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().skip(1)
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Position of a leaf within [`TrajectoryTree::leaves`].
    pub fn leaf_index(&self, id: NodeId) -> Option<usize> {
        self.leaves().binary_search(&id).ok()
    }

    /// Ids on the path from the root to `id`, root first.
    pub fn ancestry(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let mut path = vec![id];
        let mut cur = self.node(id)?;
        while let Some(p) = cur.parent {
            path.push(p);
            cur = &self.nodes[p];
        }
        path.reverse();
        Ok(path)
    }
}

/// Builds one tree. Every random draw comes from a `(tree_seed, node id,
/// step)` substream, so the result does not depend on evaluation order.
pub fn rollout_tree<M: VelocityField + ?Sized>(
    model: &M,
    condition: usize,
    schedule: &BranchSchedule,
    grid: &TimeGrid,
    noise: &NoiseSchedule,
    tree_seed: u64,
) -> Result<TrajectoryTree> {
    let steps = grid.steps();
    schedule.validate(steps)?;
    let dim = model.dim();

    let mut root_rng = stream(tree_seed, &[0, steps as u64]);
    let root = TreeNode {
        id: 0,
        step: steps,
        state: standard_normal_vec(&mut root_rng, dim),
        parent: None,
        transition: None,
        children: Vec::new(),
    };
    let mut nodes = vec![root];
    let mut levels = vec![Vec::new(); steps + 1];
    levels[steps].push(0);
    let mut velocity_evals = 0;

    for p in (1..=steps).rev() {
        let factor = schedule.factor_for_target(p - 1, steps);
        let parents = std::mem::take(&mut levels[p]);
        let mut created = Vec::with_capacity(parents.len() * factor);
        for &pid in &parents {
            let kernel = StepKernel::new(model, &nodes[pid].state, condition, p, grid, noise)?;
            velocity_evals += 1;
            for _ in 0..factor {
                let id = nodes.len();
                let mut rng = stream(tree_seed, &[id as u64, (p - 1) as u64]);
                let z = standard_normal_vec(&mut rng, dim);
                let tr = kernel.sample(&nodes[pid].state, &z)?;
                nodes.push(TreeNode {
                    id,
                    step: p - 1,
                    state: tr.x_to.clone(),
                    parent: Some(pid),
                    transition: Some(tr),
                    children: Vec::new(),
                });
                nodes[pid].children.push(id);
                created.push(id);
            }
        }
        levels[p] = parents;
        levels[p - 1] = created;
    }

    Ok(TrajectoryTree {
        condition,
        schedule: schedule.clone(),
        steps,
        nodes,
        levels,
        velocity_evals,
    })
}

/// One independent trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub leaf: Vec<f64>,
    pub transitions: Vec<Transition>,
}

/// `G` independent chains; chain `i` draws `x_T` and all of its noise from the
/// `(seed, i)` stream.
pub fn rollout_sequential<M: VelocityField + ?Sized>(
    model: &M,
    condition: usize,
    group_size: usize,
    grid: &TimeGrid,
    noise: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Chain>> {
    if group_size == 0 {
        return Err(Error::Domain("group size must be at least 1".into()));
    }
    (0..group_size)
        .map(|i| {
            let mut rng = stream(seed, &[i as u64]);
            let x_start = standard_normal_vec(&mut rng, model.dim());
            let (leaf, transitions) = sample_sde(model, condition, &x_start, grid, noise, &mut rng)?;
            Ok(Chain { leaf, transitions })
        })
        .collect()
}

/// Leaves reachable from `id`, in increasing id order.
pub fn descendants(tree: &TrajectoryTree, id: NodeId) -> Result<Vec<NodeId>> {
    tree.node(id)?;
    let mut out = Vec::new();
    let mut stack = vec![id];
    while let Some(n) = stack.pop() {
        let node = &tree.nodes[n];
        if node.step == 0 {
            out.push(n);
        } else {
            stack.extend(node.children.iter().rev());
        }
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub velocity_evals: usize,
    pub transitions: usize,
    pub leaves: usize,
}

impl CostReport {
    /// Counts read off a built tree: one velocity evaluation per non-leaf
    /// node, one transition per non-root node.
    pub fn enumerate(tree: &TrajectoryTree) -> Self {
        Self {
            velocity_evals: tree.nodes.iter().filter(|n| n.step >= 1).count(),
            transitions: tree.edge_count(),
            leaves: tree.leaves().len(),
        }
    }

    /// Cost of `group_size` independent chains of `steps` steps.
    pub fn sequential(group_size: usize, steps: usize) -> Self {
        Self {
            velocity_evals: group_size * steps,
            transitions: group_size * steps,
            leaves: group_size,
        }
    }
}

/// Cost model of a schedule: one velocity evaluation per live node at each
/// step `T..=1`.
pub fn velocity_eval_count(schedule: &BranchSchedule, steps: usize) -> Result<CostReport> {
    schedule.validate(steps)?;
    let sizes = schedule.level_sizes(steps);
    Ok(CostReport {
        velocity_evals: sizes[1..].iter().sum(),
        transitions: sizes[..steps].iter().sum(),
        leaves: sizes[0],
    })
}

pub fn mean_pairwise_distance(points: &[&[f64]]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Domain(format!(
            "diversity needs at least 2 points, got {}",
            points.len()
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            total += points[i]
                .iter()
                .zip(points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean pairwise Euclidean distance between a tree's leaf states.
pub fn leaf_diversity(tree: &TrajectoryTree) -> Result<f64> {
    mean_pairwise_distance(&tree.leaf_states())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub step: usize,
    pub parent: Option<NodeId>,
    pub state: Vec<f64>,
    pub logp_old: Option<f64>,
    pub noise_scale: Option<f64>,
}

/// Writes one JSON record per node, in id order.
pub fn write_tree_jsonl<W: Write>(tree: &TrajectoryTree, mut w: W) -> std::io::Result<()> {
    for node in &tree.nodes {
        let record = NodeRecord {
            id: node.id,
            step: node.step,
            parent: node.parent,
            state: node.state.clone(),
            logp_old: node.transition.as_ref().map(|t| t.logp_old),
            noise_scale: node.transition.as_ref().map(|t| t.noise_scale),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
