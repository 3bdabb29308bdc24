//! Advantage estimators.
//!
//! Group normalisation turns rewards into z-scores within a group. Over a
//! tree, groups are *temporal segments*: the edges between two consecutive
//! branch points form disjoint chains, each chain is scored by the mean reward
//! of the leaves below it, and chain scores are normalised across the segment.
//! With several rewards, each reward column is normalised on its own and the
//! per-reward advantages are then combined with weights (reward grouping),
//! instead of normalising a weighted sum of raw rewards (naive mixing).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rollout::{NodeId, TrajectoryTree};

pub const DEFAULT_EPS_STD: f64 = 1e-6;

/// One reward per configured reward function, for a single sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector(pub Vec<f64>);

impl RewardVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingStrategy {
    NaiveMix,
    RewardGrouped,
}

impl GroupingStrategy {
    pub fn name(self) -> &'static str {
        match self {
            GroupingStrategy::NaiveMix => "naive_mix",
            GroupingStrategy::RewardGrouped => "reward_grouped",
        }
    }
}

impl std::str::FromStr for GroupingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "naive_mix" => Ok(GroupingStrategy::NaiveMix),
            "reward_grouped" => Ok(GroupingStrategy::RewardGrouped),
            other => Err(Error::config(
                "strategy",
                format!("unknown strategy `{other}` (expected naive_mix or reward_grouped)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub strategy: GroupingStrategy,
    /// Normalise per temporal segment; otherwise once over all leaves.
    pub temporal: bool,
    pub weights: Vec<f64>,
    /// Divide the aggregated per-reward advantage by `M`.
    pub scaled: bool,
    pub eps_std: f64,
}

impl GroupingConfig {
    pub fn new(strategy: GroupingStrategy, num_rewards: usize) -> Self {
        Self {
            strategy,
            temporal: true,
            weights: vec![1.0; num_rewards],
            scaled: true,
            eps_std: DEFAULT_EPS_STD,
        }
    }

    pub fn validate(&self, num_rewards: usize) -> Result<()> {
        if self.weights.len() != num_rewards {
            return Err(Error::config(
                "weights",
                format!("expected {num_rewards} weights, got {}", self.weights.len()),
            ));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("weights", "weights must be finite"));
        }
        if !(self.eps_std > 0.0 && self.eps_std.is_finite()) {
            return Err(Error::config("eps_std", "must be positive"));
        }
        Ok(())
    }
}

/// Advantage per edge, keyed by the id of the node the edge produces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    values: BTreeMap<NodeId, f64>,
}

impl AdvantageTable {
    pub fn get(&self, edge: NodeId) -> Option<f64> {
        self.values.get(&edge).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }

    fn insert(&mut self, edge: NodeId, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("advantage of edge {edge}")));
        }
        if self.values.insert(edge, value).is_some() {
            return Err(Error::Domain(format!("edge {edge} assigned twice")));
        }
        Ok(())
    }

    /// Checks that every edge of `tree` has exactly one advantage.
    pub fn covers(&self, tree: &TrajectoryTree) -> bool {
        self.values.len() == tree.edge_count() && tree.edges().all(|n| self.values.contains_key(&n.id))
    }
}

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let rough = values.iter().sum::<f64>() / n;
    let mean = rough + values.iter().map(|v| v - rough).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(v_i - mean) / (std + eps_std)` with the population standard deviation.
pub fn group_normalize(values: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Domain(format!(
            "group normalisation needs at least 2 values, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("group value[{i}]")));
    }
    let (mean, std) = mean_std(values);
    Ok(values.iter().map(|v| (v - mean) / (std + eps_std)).collect())
}

fn check_rows(rows: &[RewardVector], num_rewards: usize) -> Result<()> {
    for row in rows {
        check_len("reward vector", num_rewards, row.len())?;
    }
    Ok(())
}

/// Weighted sum of each row: `R w`.
pub fn naive_mixed_rewards(rows: &[RewardVector], weights: &[f64]) -> Result<Vec<f64>> {
    check_rows(rows, weights.len())?;
    Ok(rows
        .iter()
        .map(|r| r.0.iter().zip(weights).map(|(v, w)| v * w).sum())
        .collect())
}

fn column(rows: &[RewardVector], m: usize) -> Vec<f64> {
    rows.iter().map(|r| r.0[m]).collect()
}

fn aggregate(sum: f64, num_rewards: usize, scaled: bool) -> f64 {
    if scaled {
        sum / num_rewards as f64
    } else {
        sum
    }
}

/// Normalises each reward column independently, then returns
/// `(1/M if scaled) * sum_m w_m A_m` per row.
pub fn reward_grouped_advantages(
    rows: &[RewardVector],
    weights: &[f64],
    scaled: bool,
    eps_std: f64,
) -> Result<Vec<f64>> {
    if rows.len() < 2 {
        return Err(Error::Domain(format!(
            "reward grouping needs at least 2 samples, got {}",
            rows.len()
        )));
    }
    check_rows(rows, weights.len())?;
    let mut out = vec![0.0; rows.len()];
    for (m, w) in weights.iter().enumerate() {
        let adv = group_normalize(&column(rows, m), eps_std)?;
        for (o, a) in out.iter_mut().zip(adv) {
            *o += w * a;
        }
    }
    out.iter_mut().for_each(|o| *o = aggregate(*o, weights.len(), scaled));
    Ok(out)
}

/// Mean leaf reward below every node, indexed by node id. `leaf_rewards`
/// follows the order of [`TrajectoryTree::leaves`].
pub fn descendant_rewards(tree: &TrajectoryTree, leaf_rewards: &[f64]) -> Result<Vec<f64>> {
    check_len("leaf rewards", tree.leaves().len(), leaf_rewards.len())?;
    let mut sums = vec![0.0; tree.nodes.len()];
    let mut counts = vec![0usize; tree.nodes.len()];
    for (&leaf, &r) in tree.leaves().iter().zip(leaf_rewards) {
        sums[leaf] = r;
        counts[leaf] = 1;
    }
    // Children always carry larger ids than their parent.
    for id in (1..tree.nodes.len()).rev() {
        let parent = tree.nodes[id].parent.expect("non-root node has a parent");
        sums[parent] += sums[id];
        counts[parent] += counts[id];
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect())
}

/// The edges between two consecutive branch points.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Step of the states that open the segment (a branch target).
    pub head_step: usize,
    /// One chain per node at `head_step`; each chain lists its edge ids from
    /// the head downwards.
    pub chains: Vec<Vec<NodeId>>,
}

pub fn segments(tree: &TrajectoryTree) -> Vec<Segment> {
    let heads = tree.schedule.segment_heads(tree.steps);
    heads
        .iter()
        .enumerate()
        .map(|(k, &head)| {
            // The segment ends just above the next head, or at step 0.
            let floor = heads.get(k + 1).map_or(0, |&next| next + 1);
            let chains = tree.levels[head]
                .iter()
                .map(|&start| {
                    let mut chain = vec![start];
                    let mut cur = start;
                    while tree.nodes[cur].step > floor {
                        cur = tree.nodes[cur].children[0];
                        chain.push(cur);
                    }
                    chain
                })
                .collect();
            Segment {
                head_step: head,
                chains,
            }
        })
        .collect()
}

/// Per-segment advantages from scalar leaf rewards: each chain gets the
/// normalised descendant reward of its head, and every edge on the chain
/// shares it.
pub fn temporal_advantages(tree: &TrajectoryTree, leaf_rewards: &[f64], eps_std: f64) -> Result<AdvantageTable> {
    let desc = descendant_rewards(tree, leaf_rewards)?;
    let mut table = AdvantageTable::default();
    for seg in segments(tree) {
        if seg.chains.len() < 2 {
            return Err(Error::Domain(format!(
                "segment starting at step {} has a single chain",
                seg.head_step
            )));
        }
        let scores: Vec<f64> = seg.chains.iter().map(|c| desc[c[0]]).collect();
        let adv = group_normalize(&scores, eps_std)?;
        for (chain, a) in seg.chains.iter().zip(adv) {
            for &edge in chain {
                table.insert(edge, a)?;
            }
        }
    }
    Ok(table)
}

/// Trajectory-level advantages: rewards are normalised once over all leaves
/// and each edge receives the mean advantage of the leaves below it. For a
/// plain batch this is the usual per-trajectory advantage broadcast along
/// every step.
pub fn trajectory_advantages(tree: &TrajectoryTree, leaf_rewards: &[f64], eps_std: f64) -> Result<AdvantageTable> {
    if leaf_rewards.len() < 2 {
        return Err(Error::Domain("trajectory grouping needs at least 2 leaves".into()));
    }
    let desc = descendant_rewards(tree, leaf_rewards)?;
    let (mean, std) = mean_std(leaf_rewards);
    let mut table = AdvantageTable::default();
    for node in tree.edges() {
        table.insert(node.id, (desc[node.id] - mean) / (std + eps_std))?;
    }
    Ok(table)
}

fn scalar_advantages(tree: &TrajectoryTree, rewards: &[f64], config: &GroupingConfig) -> Result<AdvantageTable> {
    if config.temporal {
        temporal_advantages(tree, rewards, config.eps_std)
    } else {
        trajectory_advantages(tree, rewards, config.eps_std)
    }
}

/// Full estimator over one tree. `leaf_rewards` holds one reward vector per
/// leaf, in leaf order.
///
/// Reward grouping normalises every reward column within each segment and
/// then aggregates per edge: `(1/M if scaled) * sum_m w_m A_m`.
pub fn tree_advantages(
    tree: &TrajectoryTree,
    leaf_rewards: &[RewardVector],
    config: &GroupingConfig,
) -> Result<AdvantageTable> {
    let m = config.weights.len();
    config.validate(m)?;
    check_rows(leaf_rewards, m)?;
    match config.strategy {
        GroupingStrategy::NaiveMix => {
            let mixed = naive_mixed_rewards(leaf_rewards, &config.weights)?;
            scalar_advantages(tree, &mixed, config)
        }
        GroupingStrategy::RewardGrouped => {
            let mut combined: BTreeMap<NodeId, f64> = BTreeMap::new();
            for (k, w) in config.weights.iter().enumerate() {
                let table = scalar_advantages(tree, &column(leaf_rewards, k), config)?;
                for (edge, a) in table.iter() {
                    *combined.entry(edge).or_insert(0.0) += w * a;
                }
            }
            let mut table = AdvantageTable::default();
            for (edge, a) in combined {
                table.insert(edge, aggregate(a, m, config.scaled))?;
            }
            Ok(table)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{NoiseSchedule, TimeGrid, VelocityField};
    use crate::rollout::{rollout_tree, BranchSchedule};

    struct Still;

    impl VelocityField for Still {
        fn dim(&self) -> usize {
            1
        }
        fn velocity(&self, _x: &[f64], _t: f64, _c: usize) -> crate::Result<Vec<f64>> {
            Ok(vec![0.0])
        }
    }

    fn tree(steps: usize, schedule: &BranchSchedule) -> TrajectoryTree {
        let grid = TimeGrid::new(steps).unwrap();
        rollout_tree(&Still, 0, schedule, &grid, &NoiseSchedule::with_level(0.7).unwrap(), 3).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn normalize_examples() {
        let eps = 0.0;
        let a = group_normalize(&[1.0, 2.0, 3.0], eps).unwrap();
        assert!(close(&a, &[-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589], 1e-12));
        assert_eq!(group_normalize(&[5.0, 5.0, 5.0], 1e-6).unwrap(), vec![0.0; 3]);
        assert!(close(&group_normalize(&[0.0, 1.0], 1e-6).unwrap(), &[-1.0, 1.0], 1e-5));
        assert!(group_normalize(&[1.0], 1e-6).is_err());
    }

    #[test]
    fn naive_mix_examples() {
        let rows = vec![RewardVector(vec![0.0, 100.0]), RewardVector(vec![1.0, 0.0])];
        assert_eq!(naive_mixed_rewards(&rows, &[1.0, 1.0]).unwrap(), vec![100.0, 1.0]);
        assert_eq!(naive_mixed_rewards(&rows, &[1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        let zeros = vec![RewardVector(vec![0.0, 0.0]); 3];
        assert_eq!(naive_mixed_rewards(&zeros, &[2.0, 3.0]).unwrap(), vec![0.0; 3]);
        assert!(naive_mixed_rewards(&rows, &[1.0]).is_err());
    }

    #[test]
    fn reward_mixing_phenomenon() {
        let rows = vec![RewardVector(vec![0.0, 100.0]), RewardVector(vec![1.0, 0.0])];
        let grouped = reward_grouped_advantages(&rows, &[1.0, 1.0], true, 1e-6).unwrap();
        assert!(close(&grouped, &[0.0, 0.0], 1e-5));
        let mixed = group_normalize(&naive_mixed_rewards(&rows, &[1.0, 1.0]).unwrap(), 1e-6).unwrap();
        assert!(close(&mixed, &[1.0, -1.0], 1e-6));
    }

    #[test]
    fn single_reward_and_unscaled() {
        let rows: Vec<RewardVector> = [0.3, 1.5, -0.2, 0.9].iter().map(|&v| RewardVector(vec![v])).collect();
        let grouped = reward_grouped_advantages(&rows, &[1.0], true, 1e-6).unwrap();
        assert_eq!(grouped, group_normalize(&[0.3, 1.5, -0.2, 0.9], 1e-6).unwrap());

        let rows: Vec<RewardVector> = (0..5)
            .map(|i| RewardVector(vec![i as f64, (i * i) as f64, 3.0 - i as f64]))
            .collect();
        let w = [0.5, 2.0, 1.0];
        let s = reward_grouped_advantages(&rows, &w, true, 1e-6).unwrap();
        let u = reward_grouped_advantages(&rows, &w, false, 1e-6).unwrap();
        for (a, b) in s.iter().zip(&u) {
            assert!((a * 3.0 - b).abs() < 1e-14);
            assert_eq!(*a, b / 3.0);
        }
    }

    #[test]
    fn descendant_means() {
        let t = tree(3, &BranchSchedule::new(2, &[(1, 2)]));
        let rewards = [1.0, 3.0, 5.0, 9.0];
        let desc = descendant_rewards(&t, &rewards).unwrap();
        assert_eq!(desc[0], 4.5);
        for (i, &leaf) in t.leaves().iter().enumerate() {
            assert_eq!(desc[leaf], rewards[i]);
        }
        let step2: Vec<f64> = t.levels[2].iter().map(|&n| desc[n]).collect();
        assert_eq!(step2, vec![2.0, 7.0]);
        assert!(descendant_rewards(&t, &rewards[..3]).is_err());
    }

    #[test]
    fn worked_temporal_example() {
        let t = tree(3, &BranchSchedule::new(2, &[(1, 2)]));
        let table = temporal_advantages(&t, &[1.0, 3.0, 5.0, 9.0], 0.0).unwrap();
        assert!(table.covers(&t));
        let top: Vec<f64> = t.levels[2].iter().map(|&n| table.get(n).unwrap()).collect();
        assert!(close(&top, &[-1.0, 1.0], 1e-12));
        let expected = [-1.183_215_956_619_923, -0.507_092_552_837_110, 0.169_030_850_945_703, 1.521_277_658_511_330];
        for (k, &n) in t.levels[1].iter().enumerate() {
            let child = t.nodes[n].children[0];
            assert!((table.get(n).unwrap() - expected[k]).abs() < 1e-12);
            assert_eq!(table.get(n), table.get(child));
        }
    }

    #[test]
    fn degenerate_cases() {
        let batch = tree(4, &BranchSchedule::batch(3));
        let rewards = [0.5, -1.0, 2.0];
        let table = temporal_advantages(&batch, &rewards, 1e-6).unwrap();
        let expected = group_normalize(&rewards, 1e-6).unwrap();
        for (i, &leaf) in batch.leaves().iter().enumerate() {
            for id in batch.ancestry(leaf).unwrap().into_iter().skip(1) {
                assert_eq!(table.get(id).unwrap(), expected[i]);
            }
        }
        assert_eq!(trajectory_advantages(&batch, &rewards, 1e-6).unwrap(), table);

        let equal = temporal_advantages(&tree(5, &BranchSchedule::new(2, &[(2, 3)])), &[4.0; 6], 1e-6).unwrap();
        assert!(equal.iter().all(|(_, a)| a == 0.0));

        let single_root = tree(5, &BranchSchedule::new(1, &[(2, 3)]));
        assert!(temporal_advantages(&single_root, &[1.0, 2.0, 3.0], 1e-6).is_err());
    }

    #[test]
    fn grouped_tree_degeneracies() {
        let t = tree(6, &BranchSchedule::new(2, &[(4, 2), (2, 3)]));
        let n = t.leaves().len();
        let scalar: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64 * 0.3).collect();
        let single: Vec<RewardVector> = scalar.iter().map(|&v| RewardVector(vec![v])).collect();
        let naive = tree_advantages(&t, &single, &GroupingConfig::new(GroupingStrategy::NaiveMix, 1)).unwrap();
        let grouped = tree_advantages(&t, &single, &GroupingConfig::new(GroupingStrategy::RewardGrouped, 1)).unwrap();
        for (e, a) in naive.iter() {
            assert!((a - grouped.get(e).unwrap()).abs() < 1e-15);
        }

        let two: Vec<RewardVector> = scalar.iter().map(|&v| RewardVector(vec![v, 7.0])).collect();
        let mut cfg = GroupingConfig::new(GroupingStrategy::RewardGrouped, 2);
        cfg.weights = vec![1.5, 1.0];
        let both = tree_advantages(&t, &two, &cfg).unwrap();
        for (e, a) in naive.iter() {
            assert!((both.get(e).unwrap() - a * 1.5 / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = GroupingConfig::new(GroupingStrategy::NaiveMix, 2);
        assert!(cfg.validate(2).is_ok());
        assert!(cfg.validate(3).is_err());
        cfg.eps_std = 0.0;
        assert!(matches!(cfg.validate(2), Err(Error::Config { key, .. }) if key == "eps_std"));
        assert!("nope".parse::<GroupingStrategy>().is_err());
        assert_eq!("reward_grouped".parse::<GroupingStrategy>().unwrap(), GroupingStrategy::RewardGrouped);
    }
}
