//! Grouping of searchable layers into a tree of sub-spaces.
//!
//! Layers with equal complexity coefficients collapse into one variable, so
//! the grouped cost is `c·Σ r̂_i` whatever the split between members. Runs
//! of such layers are chunked into bottom groups of at most `G` layers,
//! which are merged upward until every run is a single top-level variable.
//! If more top-level variables remain than allowed, adjacent variables are
//! merged into composite nodes whose variable is their joint differential
//! cost.

use std::ops::RangeInclusive;

use crate::error::{EncError, Result};

pub const DEFAULT_GROUP_SIZE: usize = 3;
pub const DEFAULT_TOP_DIMENSION: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupingOptions {
    /// Maximum members of a bottom group, `G`.
    pub group_size: usize,
    /// Maximum number of top-level variables.
    pub top_dimension: usize,
    /// Explicit group boundaries as 1-based inclusive layer ranges; runs
    /// of equal coefficients are found automatically when absent.
    pub groups: Option<Vec<RangeInclusive<usize>>>,
}

impl Default for GroupingOptions {
    fn default() -> Self {
        GroupingOptions {
            group_size: DEFAULT_GROUP_SIZE,
            top_dimension: DEFAULT_TOP_DIMENSION,
            groups: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    /// 0-based layer positions covered, ascending.
    pub layers: Vec<usize>,
    /// Child node ids; empty for a single layer.
    pub children: Vec<usize>,
    /// Shared coefficient when every member has the same one.
    pub coefficient: Option<u64>,
    /// 1 for a single layer.
    pub height: usize,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hierarchy {
    pub nodes: Vec<Node>,
    /// Ids of the top-level variables, in layer order.
    pub top: Vec<usize>,
}

impl Hierarchy {
    pub fn top_dimension(&self) -> usize {
        self.top.len()
    }

    /// Tree depth, counting single layers as level 1.
    pub fn levels(&self) -> usize {
        self.top.iter().map(|&t| self.nodes[t].height).max().unwrap_or(0)
    }

    /// The top-level space plus one sub-space per group node.
    pub fn subspace_count(&self) -> usize {
        1 + self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    pub fn is_flat(&self) -> bool {
        self.top.iter().all(|&t| self.nodes[t].is_leaf())
    }

    /// Nominal `[0 : min t : Σ max r̂]` range of an equal-coefficient node
    /// as `(step, end)`; `None` for composite nodes.
    pub fn nominal_range(&self, id: usize, ranges: &[usize], steps: &[usize]) -> Option<(usize, usize)> {
        let node = &self.nodes[id];
        node.coefficient?;
        let step = node.layers.iter().map(|&l| steps[l]).min().unwrap_or(1);
        let end = node.layers.iter().map(|&l| ranges[l]).sum();
        Some((step, end))
    }

    fn push(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn group(&mut self, children: Vec<usize>, coefficients: &[u64]) -> usize {
        if children.len() == 1 {
            return children[0];
        }
        let mut layers: Vec<usize> = children.iter().flat_map(|&c| self.nodes[c].layers.clone()).collect();
        layers.sort_unstable();
        let first = coefficients[layers[0]];
        let shared = layers.iter().all(|&l| coefficients[l] == first);
        let height = 1 + children.iter().map(|&c| self.nodes[c].height).max().unwrap_or(0);
        self.push(Node {
            layers,
            children,
            coefficient: shared.then_some(first),
            height,
        })
    }
}

/// Splits `ids` into `⌈n/G⌉` consecutive chunks of near-equal size.
fn chunks(ids: &[usize], size: usize) -> Vec<Vec<usize>> {
    let n = ids.len();
    let count = n.div_ceil(size);
    let base = n / count;
    let extra = n % count;
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for k in 0..count {
        let len = base + usize::from(k < extra);
        out.push(ids[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Maximal runs of consecutive searchable layers with equal coefficients,
/// within the configured group boundaries.
fn runs(coefficients: &[u64], searchable: &[usize], groups: Option<&[RangeInclusive<usize>]>) -> Result<Vec<Vec<usize>>> {
    let segments: Vec<Vec<usize>> = match groups {
        None => vec![searchable.to_vec()],
        Some(groups) => {
            let mut seen = vec![false; coefficients.len()];
            let mut segments = Vec::new();
            for g in groups {
                if *g.start() == 0 || *g.end() > coefficients.len() || g.start() > g.end() {
                    return Err(EncError::Argument(format!(
                        "group {}-{} outside layers 1-{}",
                        g.start(),
                        g.end(),
                        coefficients.len()
                    )));
                }
                let members: Vec<usize> = searchable.iter().copied().filter(|&l| g.contains(&(l + 1))).collect();
                for &l in &members {
                    if std::mem::replace(&mut seen[l], true) {
                        return Err(EncError::Argument(format!("layer {} appears in two groups", l + 1)));
                    }
                }
                if !members.is_empty() {
                    segments.push(members);
                }
            }
            segments.extend(searchable.iter().filter(|&&l| !seen[l]).map(|&l| vec![l]));
            segments.sort_by_key(|s| s[0]);
            segments
        }
    };
    let mut out = Vec::new();
    for seg in segments {
        let mut current: Vec<usize> = Vec::new();
        for l in seg {
            if let Some(&last) = current.last() {
                if coefficients[last] != coefficients[l] {
                    out.push(std::mem::take(&mut current));
                }
            }
            current.push(l);
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    Ok(out)
}

/// Builds the group tree over the searchable layers (0-based positions).
///
/// `option_counts` estimates how many values each layer's variable takes;
/// it steers which adjacent top-level variables are merged. When there are
/// no more searchable layers than the top-level bound and no explicit
/// groups, the space stays flat.
pub fn build_hierarchy(
    coefficients: &[u64],
    searchable: &[usize],
    option_counts: &[usize],
    options: &GroupingOptions,
) -> Result<Hierarchy> {
    if options.group_size < 2 {
        return Err(EncError::Argument(format!("group size {} below 2", options.group_size)));
    }
    if options.top_dimension < 1 {
        return Err(EncError::Argument("top-level dimension bound must be at least 1".into()));
    }
    let mut tree = Hierarchy {
        nodes: Vec::new(),
        top: Vec::new(),
    };
    let leaf_of: Vec<usize> = searchable
        .iter()
        .map(|&l| {
            tree.push(Node {
                layers: vec![l],
                children: Vec::new(),
                coefficient: Some(coefficients[l]),
                height: 1,
            })
        })
        .collect();
    let leaf = |l: usize| leaf_of[searchable.iter().position(|&s| s == l).expect("searchable layer")];

    if searchable.len() <= options.top_dimension && options.groups.is_none() {
        tree.top = leaf_of.clone();
        return Ok(tree);
    }

    for run in runs(coefficients, searchable, options.groups.as_deref())? {
        let mut level: Vec<usize> = run.iter().map(|&l| leaf(l)).collect();
        while level.len() > 1 {
            level = chunks(&level, options.group_size)
                .into_iter()
                .map(|c| tree.group(c, coefficients))
                .collect();
        }
        tree.top.push(level[0]);
    }

    let mut counts: Vec<usize> = tree.top.iter().map(|&t| estimate(&tree, t, option_counts)).collect();
    while tree.top.len() > options.top_dimension {
        let k = (0..tree.top.len() - 1)
            .min_by_key(|&k| (counts[k].saturating_mul(counts[k + 1]), k))
            .expect("at least two top-level variables");
        let merged = tree.group(vec![tree.top[k], tree.top[k + 1]], coefficients);
        tree.top.splice(k..k + 2, [merged]);
        counts.splice(k..k + 2, [estimate(&tree, merged, option_counts)]);
    }
    Ok(tree)
}

fn estimate(tree: &Hierarchy, id: usize, option_counts: &[usize]) -> usize {
    let node = &tree.nodes[id];
    if node.is_leaf() {
        option_counts[node.layers[0]].max(1)
    } else if node.coefficient.is_some() {
        // distinct sums of the member values
        node.layers.iter().map(|&l| option_counts[l].saturating_sub(1)).sum::<usize>() + 1
    } else {
        node.children
            .iter()
            .map(|&c| estimate(tree, c, option_counts))
            .fold(1usize, usize::saturating_mul)
    }
}
