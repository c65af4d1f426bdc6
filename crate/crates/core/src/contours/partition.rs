use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary tree over the blocks of a partition; leaves hold block positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tree {
    Leaf(usize),
    Node(Box<Tree>, Box<Tree>),
}

impl Tree {
    pub fn node(left: Tree, right: Tree) -> Self {
        Tree::Node(Box::new(left), Box::new(right))
    }

    /// `((0, 1), 2), ...`
    pub fn left_leaning(n: usize) -> Self {
        (1..n).fold(Tree::Leaf(0), |acc, i| Tree::node(acc, Tree::Leaf(i)))
    }

    /// `0, (1, (2, ...))`
    pub fn right_leaning(n: usize) -> Self {
        let last = n.saturating_sub(1);
        (0..last).rev().fold(Tree::Leaf(last), |acc, i| Tree::node(Tree::Leaf(i), acc))
    }

    /// Block positions under this node, left to right.
    pub fn leaves(&self) -> Vec<usize> {
        match self {
            Tree::Leaf(i) => vec![*i],
            Tree::Node(l, r) => {
                let mut v = l.leaves();
                v.extend(r.leaves());
                v
            }
        }
    }

    /// Visits internal nodes bottom-up.
    pub(crate) fn internal_nodes<'a>(&'a self, out: &mut Vec<(&'a Tree, &'a Tree)>) {
        if let Tree::Node(l, r) = self {
            l.internal_nodes(out);
            r.internal_nodes(out);
            out.push((l, r));
        }
    }
}

/// Disjoint blocks covering the latent indices `0..dim`, with an optional
/// binary tree over the blocks. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tree: Option<Tree>,
}

impl Partition {
    pub fn new(blocks: Vec<Vec<usize>>, dim: usize) -> Result<Self> {
        let mut seen = vec![false; dim];
        for b in &blocks {
            if b.is_empty() {
                return Err(Error::Partition("empty block".into()));
            }
            for &i in b {
                if i >= dim {
                    return Err(Error::Partition(format!("index {i} outside 0..{dim}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} appears twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("index {i} is not covered")));
        }
        Ok(Self { blocks, tree: None })
    }

    pub fn singletons(dim: usize) -> Self {
        Self { blocks: (0..dim).map(|i| vec![i]).collect(), tree: None }
    }

    pub fn whole(dim: usize) -> Self {
        Self { blocks: vec![(0..dim).collect()], tree: None }
    }

    pub fn with_tree(mut self, tree: Tree) -> Result<Self> {
        let mut leaves = tree.leaves();
        leaves.sort_unstable();
        if leaves != (0..self.blocks.len()).collect::<Vec<_>>() {
            return Err(Error::Partition("tree leaves must be the blocks, each exactly once".into()));
        }
        self.tree = Some(tree);
        Ok(self)
    }

    /// Checks the partition against a latent dimension (e.g. after loading).
    pub fn validate(&self, dim: usize) -> Result<()> {
        let p = Self::new(self.blocks.clone(), dim)?;
        match &self.tree {
            Some(t) => p.with_tree(t.clone()).map(|_| ()),
            None => Ok(()),
        }
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn tree(&self) -> Option<&Tree> {
        self.tree.as_ref()
    }

    /// The stored tree, or a left-leaning one.
    pub fn tree_or_default(&self) -> Tree {
        self.tree.clone().unwrap_or_else(|| Tree::left_leaning(self.blocks.len()))
    }

    pub fn equal_sized(&self) -> bool {
        self.blocks.windows(2).all(|w| w[0].len() == w[1].len())
    }

    /// Union of the blocks at the given positions, in order.
    pub fn union(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().flat_map(|&p| self.blocks[p].iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(Partition::new(vec![vec![0], vec![1, 2]], 3).is_ok());
        assert!(Partition::new(vec![vec![0], vec![0, 1]], 2).is_err());
        assert!(Partition::new(vec![vec![0]], 2).is_err());
        assert!(Partition::new(vec![vec![0], vec![]], 1).is_err());
        assert!(Partition::new(vec![vec![3]], 1).is_err());
        let p = Partition::singletons(3);
        assert!(p.clone().with_tree(Tree::left_leaning(3)).is_ok());
        assert!(p.with_tree(Tree::node(Tree::Leaf(0), Tree::Leaf(1))).is_err());
    }

    #[test]
    fn trees() {
        assert_eq!(Tree::left_leaning(3), Tree::node(Tree::node(Tree::Leaf(0), Tree::Leaf(1)), Tree::Leaf(2)));
        assert_eq!(Tree::right_leaning(3), Tree::node(Tree::Leaf(0), Tree::node(Tree::Leaf(1), Tree::Leaf(2))));
        let json = serde_json::to_string(&Tree::left_leaning(3)).unwrap();
        assert_eq!(json, "[[0,1],2]");
        assert_eq!(serde_json::from_str::<Tree>(&json).unwrap(), Tree::left_leaning(3));
    }
}
