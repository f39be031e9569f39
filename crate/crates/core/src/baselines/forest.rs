//! CART regression trees and a bootstrap forest of them.

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestHp {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for ForestHp {
    fn default() -> Self {
        ForestHp {
            trees: 100,
            max_depth: 10,
            min_leaf: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Variance-reduction regression tree; `x ≤ threshold` goes left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

struct Builder<'a, 'b> {
    x: ArrayView2<'a, f64>,
    y: ArrayView1<'b, f64>,
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl Builder<'_, '_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / n;
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf(mean));
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return at;
        }
        let Some((feature, threshold)) = self.best_split(idx) else {
            return at;
        };
        // Partition in place: rows going left first.
        let mut split = 0;
        for k in 0..idx.len() {
            if self.x[[idx[k], feature]] <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }

    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64)> {
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for f in 0..self.x.ncols() {
            order.sort_unstable_by(|&a, &b| self.x[[a, f]].total_cmp(&self.x[[b, f]]));
            let mut left_sum = 0.0;
            for k in 1..n {
                left_sum += self.y[order[k - 1]];
                let (lo, hi) = (self.x[[order[k - 1], f]], self.x[[order[k], f]]);
                if lo == hi || k < self.min_leaf || n - k < self.min_leaf {
                    continue;
                }
                // Maximizing Σ_left²/n_l + Σ_right²/n_r minimizes the SSE.
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / k as f64 + right_sum * right_sum / (n - k) as f64;
                if best.is_none_or(|b| score > b.0) {
                    best = Some((score, f, 0.5 * (lo + hi)));
                }
            }
        }
        let parent = total * total / n as f64;
        best.filter(|b| b.0 > parent * (1.0 + 1e-12) + 1e-300)
            .map(|b| (b.1, b.2))
    }
}

impl RegressionTree {
    pub fn fit(
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        rows: &[usize],
        max_depth: usize,
        min_leaf: usize,
    ) -> Result<Self> {
        if rows.is_empty() || x.nrows() != y.len() {
            return Err(Error::Input("tree needs matching, non-empty training rows".into()));
        }
        let mut b = Builder {
            x,
            y,
            max_depth,
            min_leaf: min_leaf.max(1),
            nodes: Vec::new(),
        };
        let mut idx = rows.to_vec();
        b.grow(&mut idx, 0);
        Ok(RegressionTree { nodes: b.nodes })
    }

    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    /// `(feature, threshold)` of the root split, if any.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes.first()? {
            Node::Split { feature, threshold, .. } => Some((*feature, *threshold)),
            Node::Leaf(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionForest {
    pub trees: Vec<RegressionTree>,
}

impl RegressionForest {
    /// Each tree sees a bootstrap resample drawn from its own
    /// `(seed, "forest.bootstrap", t)` stream.
    pub fn fit(x: ArrayView2<f64>, y: ArrayView1<f64>, hp: &ForestHp, seed: u64) -> Result<Self> {
        if hp.trees == 0 {
            return Err(Error::Config("a forest needs at least one tree".into()));
        }
        let n = x.nrows();
        let trees = (0..hp.trees)
            .into_par_iter()
            .map(|t| {
                let mut r = rng::stream(seed, "forest.bootstrap", t as u64);
                let rows: Vec<usize> = (0..n).map(|_| r.gen_range(0..n)).collect();
                RegressionTree::fit(x, y, &rows, hp.max_depth, hp.min_leaf)
            })
            .collect::<Result<_>>()?;
        Ok(RegressionForest { trees })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64)
            .collect()
    }
}
