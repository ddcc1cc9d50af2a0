//! Arena-backed search tree with PUCT statistics.

use std::cmp::Ordering;
use std::fmt;

use super::DecodeError;
use crate::lm::TokenId;
use crate::scalar::Scalar;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchNode<S: Scalar = f64> {
    /// Token this node appends; `None` only for the initial root.
    pub token: Option<TokenId>,
    /// LM prior `P(token | x, y_<node)` among its siblings.
    pub prior: S,
    pub visits: u32,
    /// Sum of values backed up through this node.
    pub value_sum: S,
    /// Times this node was the evaluated leaf of a simulation.
    pub evaluations: u32,
    /// Scorer value of the prefix ending at this node, once evaluated.
    pub own_value: Option<S>,
    pub children: Vec<NodeId>,
    pub parent: Option<NodeId>,
    pub terminal: bool,
    /// Number of generated tokens up to and including this node.
    pub position: usize,
}

impl<S: Scalar> SearchNode<S> {
    fn new(token: Option<TokenId>, prior: S, parent: Option<NodeId>, terminal: bool, position: usize) -> Self {
        Self {
            token,
            prior,
            visits: 0,
            value_sum: S::zero(),
            evaluations: 0,
            own_value: None,
            children: Vec::new(),
            parent,
            terminal,
            position,
        }
    }

    /// `W / n`, or 0 for an unvisited node.
    pub fn mean_value(&self) -> S {
        if self.visits == 0 {
            S::zero()
        } else {
            self.value_sum / S::lit(f64::from(self.visits))
        }
    }

    pub fn is_expanded(&self) -> bool {
        !self.children.is_empty()
    }
}

/// `W/n + c * prior * sqrt(N) / (1 + n)`, with `W/n = 0` when `n = 0`.
pub fn puct_score<S: Scalar>(child: &SearchNode<S>, parent_visits: u32, c_puct: S) -> S {
    let n = S::lit(f64::from(child.visits));
    let explore = c_puct * child.prior * S::lit(f64::from(parent_visits)).sqrt() / (S::one() + n);
    child.mean_value() + explore
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantViolation {
    pub node: NodeId,
    pub message: String,
}

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {}: {}", self.node, self.message)
    }
}

impl std::error::Error for InvariantViolation {}

#[derive(Clone, Debug)]
pub struct SearchTree<S: Scalar = f64> {
    nodes: Vec<SearchNode<S>>,
    root: NodeId,
}

impl<S: Scalar> SearchTree<S> {
    /// Tree holding a single unexpanded root at `position` generated tokens.
    pub fn new(position: usize, terminal: bool) -> Self {
        Self { nodes: vec![SearchNode::new(None, S::one(), None, terminal, position)], root: 0 }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &SearchNode<S> {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &SearchNode<S>> {
        self.nodes[id].children.iter().map(move |&c| &self.nodes[c])
    }

    /// Tokens on the path below the root down to `id`.
    pub fn path_tokens(&self, id: NodeId) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut cur = id;
        while cur != self.root {
            let node = &self.nodes[cur];
            out.push(node.token.expect("non-root node has a token"));
            cur = node.parent.expect("non-root node has a parent");
        }
        out.reverse();
        out
    }

    fn child_order(&self, a: NodeId, b: NodeId, key: impl Fn(&SearchNode<S>) -> S) -> Ordering {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        key(na)
            .partial_cmp(&key(nb))
            .unwrap_or(Ordering::Equal)
            .then_with(|| na.mean_value().partial_cmp(&nb.mean_value()).unwrap_or(Ordering::Equal))
            .then_with(|| nb.token.cmp(&na.token))
    }

    /// Child maximizing PUCT; ties go to the higher mean value, then the
    /// lower token index.
    pub fn select_child(&self, id: NodeId, c_puct: S) -> Option<NodeId> {
        let parent_visits = self.nodes[id].visits;
        self.nodes[id]
            .children
            .iter()
            .copied()
            .max_by(|&a, &b| self.child_order(a, b, |n| puct_score(n, parent_visits, c_puct)))
    }

    /// Descends from the root by PUCT until reaching a node without children.
    pub fn select(&self, c_puct: S) -> NodeId {
        let mut cur = self.root;
        while let Some(next) = self.select_child(cur, c_puct) {
            cur = next;
        }
        cur
    }

    /// Attaches children `(token, prior)`; a child is terminal when its
    /// token is `eos` or it reaches `max_position`.
    pub fn expand(
        &mut self,
        leaf: NodeId,
        children: &[(TokenId, S)],
        eos: TokenId,
        max_position: usize,
    ) -> Result<(), DecodeError> {
        let node = &self.nodes[leaf];
        if node.terminal {
            return Err(DecodeError::TerminalExpansion);
        }
        assert!(node.children.is_empty(), "node {leaf} already expanded");
        let position = node.position + 1;
        for &(token, prior) in children {
            let id = self.nodes.len();
            let terminal = token == eos || position >= max_position;
            self.nodes.push(SearchNode::new(Some(token), prior, Some(leaf), terminal, position));
            self.nodes[leaf].children.push(id);
        }
        Ok(())
    }

    /// Records `value` as the evaluation of `leaf` and adds it to every
    /// node on the path back to the root.
    pub fn backpropagate(&mut self, leaf: NodeId, value: S) {
        let node = &mut self.nodes[leaf];
        node.evaluations += 1;
        node.own_value.get_or_insert(value);
        let mut cur = Some(leaf);
        while let Some(id) = cur {
            let n = &mut self.nodes[id];
            n.visits += 1;
            n.value_sum += value;
            if id == self.root {
                break;
            }
            cur = n.parent;
        }
    }

    /// Root child with the most visits; ties go to the higher mean value,
    /// then the lower token index.
    pub fn best_child(&self) -> Option<NodeId> {
        self.nodes[self.root]
            .children
            .iter()
            .copied()
            .max_by(|&a, &b| self.child_order(a, b, |n| S::lit(f64::from(n.visits))))
    }

    /// Makes `child` the new root, keeping its subtree and statistics.
    pub fn commit(&mut self, child: NodeId) {
        assert_eq!(self.nodes[child].parent, Some(self.root), "commit target must be a root child");
        let mut nodes = Vec::new();
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut stack = vec![child];
        while let Some(id) = stack.pop() {
            remap[id] = nodes.len();
            nodes.push(self.nodes[id].clone());
            stack.extend(self.nodes[id].children.iter().rev());
        }
        for n in &mut nodes {
            n.parent = n.parent.map(|p| remap[p]).filter(|&p| p != usize::MAX);
            for c in &mut n.children {
                *c = remap[*c];
            }
        }
        nodes[0].parent = None;
        self.nodes = nodes;
        self.root = 0;
    }

    /// Visit conservation (`n = sum of child n + own evaluations`), mean
    /// values within `[0, 1]`, sibling priors summing to at most 1, and
    /// terminal nodes without children.
    pub fn check_invariants(&self) -> Result<(), InvariantViolation> {
        let tol = S::lit(1e-6);
        let fail = |node, message: String| Err(InvariantViolation { node, message });
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id];
            let child_visits: u32 = n.children.iter().map(|&c| self.nodes[c].visits).sum();
            if n.visits != child_visits + n.evaluations {
                return fail(
                    id,
                    format!("visits {} != child visits {child_visits} + evaluations {}", n.visits, n.evaluations),
                );
            }
            if n.value_sum < -tol || n.value_sum > S::lit(f64::from(n.visits)) + tol {
                return fail(id, format!("value sum {} outside [0, {}]", n.value_sum, n.visits));
            }
            let mean = n.mean_value();
            if mean < -tol || mean > S::one() + tol {
                return fail(id, format!("mean value {mean} outside [0, 1]"));
            }
            if n.terminal && !n.children.is_empty() {
                return fail(id, "terminal node has children".into());
            }
            let priors: S = n.children.iter().map(|&c| self.nodes[c].prior).sum();
            if priors > S::one() + tol {
                return fail(id, format!("child priors sum to {priors}"));
            }
            for &c in &n.children {
                if self.nodes[c].parent != Some(id) {
                    return fail(c, format!("parent link does not point to {id}"));
                }
            }
            stack.extend(n.children.iter().copied());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(prior: f64, visits: u32, value_sum: f64) -> SearchNode {
        SearchNode { prior, visits, value_sum, ..SearchNode::new(Some(0), prior, None, false, 1) }
    }

    #[test]
    fn puct_examples() {
        let s = puct_score(&node(0.5, 2, 0.8), 10, 3.0);
        assert!((s - (0.4 + 0.5 * 10f64.sqrt())).abs() < 1e-12);
        assert!((s - 1.9811).abs() < 1e-4);
        assert_eq!(puct_score(&node(0.9, 4, 2.0), 25, 0.0), 0.5);
        assert_eq!(puct_score(&node(0.7, 0, 0.0), 0, 3.0), 0.0);
        let s32 = puct_score(&SearchNode::<f32> { visits: 2, value_sum: 0.8, ..SearchNode::new(Some(0), 0.5, None, false, 1) }, 10, 3.0);
        assert!((s32 - 1.9811).abs() < 1e-4);
    }

    #[test]
    fn backprop_examples() {
        let mut t = SearchTree::<f64>::new(0, false);
        t.expand(0, &[(1, 1.0)], 9, 10).unwrap();
        t.backpropagate(1, 0.6);
        assert_eq!(t.node(1).visits, 1);
        assert!((t.node(1).mean_value() - 0.6).abs() < 1e-12);
        t.backpropagate(1, 0.2);
        assert!((t.node(1).mean_value() - 0.4).abs() < 1e-12);
        assert_eq!(t.node(0).visits, 2);
        assert!(t.check_invariants().is_ok());
    }

    #[test]
    fn select_single_child_and_value_ordering() {
        let mut t = SearchTree::<f64>::new(0, false);
        t.expand(0, &[(4, 1.0)], 9, 10).unwrap();
        assert_eq!(t.select(3.0), 1);

        let mut t = SearchTree::<f64>::new(0, false);
        t.expand(0, &[(2, 0.5), (3, 0.5)], 9, 10).unwrap();
        t.backpropagate(1, 0.2);
        t.backpropagate(2, 0.9);
        assert_eq!(t.select(3.0), 2);
    }

    #[test]
    fn unvisited_ties_break_to_lower_token() {
        let mut t = SearchTree::<f64>::new(0, false);
        t.expand(0, &[(7, 0.5), (3, 0.5)], 9, 10).unwrap();
        assert_eq!(t.node(t.select(1.0)).token, Some(3));
    }

    /// Three levels with statistics set by hand; PUCT values at each level
    /// traced on paper (c = 1):
    ///   root N=10: a (p .6, n 6, W 3) -> .5 + .6*sqrt10/7 = .7711
    ///              b (p .4, n 4, W 3) -> .75 + .4*sqrt10/5 = 1.0030  => b
    ///   b N=4:     c (p .5, n 2, W .4) -> .2 + .5*2/3 = .5333
    ///              d (p .5, n 1, W .9) -> .9 + .5*2/2 = 1.4      => d
    ///   d N=1:     e (p .3, n 0) -> .3*1/1 = .3
    ///              f (p .7, n 0) -> .7                           => f
    #[test]
    fn three_level_hand_trace() {
        let mut t = SearchTree::<f64>::new(0, false);
        t.expand(0, &[(0, 0.6), (1, 0.4)], 99, 10).unwrap(); // a=1, b=2
        t.expand(2, &[(2, 0.5), (3, 0.5)], 99, 10).unwrap(); // c=3, d=4
        t.expand(4, &[(4, 0.3), (5, 0.7)], 99, 10).unwrap(); // e=5, f=6
        let set = |t: &mut SearchTree<f64>, id: NodeId, n: u32, w: f64| {
            t.nodes[id].visits = n;
            t.nodes[id].value_sum = w;
        };
        set(&mut t, 0, 10, 6.0);
        set(&mut t, 1, 6, 3.0);
        set(&mut t, 2, 4, 3.0);
        set(&mut t, 3, 2, 0.4);
        set(&mut t, 4, 1, 0.9);
        assert_eq!(t.select_child(0, 1.0), Some(2));
        assert_eq!(t.select_child(2, 1.0), Some(4));
        assert_eq!(t.select_child(4, 1.0), Some(6));
        assert_eq!(t.select(1.0), 6);
        assert_eq!(t.path_tokens(6), vec![1, 3, 5]);
    }

    #[test]
    fn terminal_nodes_are_not_expanded() {
        let mut t = SearchTree::<f64>::new(0, false);
        t.expand(0, &[(9, 0.3), (1, 0.7)], 9, 10).unwrap();
        assert!(t.node(1).terminal);
        assert_eq!(t.expand(1, &[(1, 1.0)], 9, 10), Err(DecodeError::TerminalExpansion));
        let mut capped = SearchTree::<f64>::new(1, false);
        capped.expand(0, &[(1, 1.0)], 9, 2).unwrap();
        assert!(capped.node(1).terminal);
    }

    #[test]
    fn commit_keeps_subtree_statistics() {
        let mut t = SearchTree::<f64>::new(0, false);
        t.expand(0, &[(1, 0.5), (2, 0.5)], 9, 10).unwrap();
        t.expand(2, &[(3, 1.0)], 9, 10).unwrap();
        t.backpropagate(1, 0.1);
        t.backpropagate(3, 0.8);
        t.backpropagate(3, 0.6);
        assert_eq!(t.node(t.best_child().unwrap()).token, Some(2));
        t.commit(2);
        assert_eq!(t.root(), 0);
        assert_eq!(t.len(), 2);
        assert_eq!(t.node(0).visits, 2);
        assert_eq!(t.node(0).parent, None);
        assert_eq!(t.node(1).parent, Some(0));
        assert!(t.check_invariants().is_ok());
    }

    #[test]
    fn invariant_check_detects_corruption() {
        let mut t = SearchTree::<f64>::new(0, false);
        t.expand(0, &[(1, 0.5), (2, 0.6)], 9, 10).unwrap();
        assert!(t.check_invariants().is_err());
        let mut t = SearchTree::<f64>::new(0, false);
        t.expand(0, &[(1, 1.0)], 9, 10).unwrap();
        t.backpropagate(1, 0.5);
        t.nodes[0].visits += 1;
        assert!(t.check_invariants().is_err());
    }
}
