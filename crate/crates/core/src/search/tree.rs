use serde::Serialize;

pub type NodeId = usize;

/// A partial-SQL decoding state. The full policy input is the tree's
/// context followed by `sql`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchNode {
    pub sql: String,
    /// The fragment appended by the edge into this node; empty at the root.
    pub fragment: String,
    pub fragment_logprob: f64,
    pub q_value: f64,
    pub visits: u32,
    pub depth: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub is_terminal: bool,
    /// Expansion produced nothing and the SQL is incomplete.
    pub dead_end: bool,
    pub(crate) backed_up: bool,
}

/// Arena-allocated search tree. Node 0 is the root.
#[derive(Debug, Clone, Serialize)]
pub struct SearchTree {
    context: String,
    nodes: Vec<SearchNode>,
}

impl SearchTree {
    pub fn new(context: impl Into<String>) -> Self {
        Self {
            context: context.into(),
            nodes: vec![SearchNode {
                sql: String::new(),
                fragment: String::new(),
                fragment_logprob: 0.0,
                q_value: 0.0,
                visits: 0,
                depth: 0,
                parent: None,
                children: Vec::new(),
                is_terminal: false,
                dead_end: false,
                backed_up: false,
            }],
        }
    }

    pub const ROOT: NodeId = 0;

    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn node(&self, id: NodeId) -> &SearchNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut SearchNode {
        &mut self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[SearchNode] {
        &self.nodes
    }

    /// Context plus generated SQL.
    pub fn state_text(&self, id: NodeId) -> String {
        format!("{}{}", self.context, self.nodes[id].sql)
    }

    /// Appends a child with zero visits and `q_value` as its initial Q.
    pub fn add_child(&mut self, parent: NodeId, fragment: &str, logprob: f64, q_value: f64, terminal: bool) -> NodeId {
        let id = self.nodes.len();
        let p = &self.nodes[parent];
        debug_assert!(!p.is_terminal, "terminal nodes have no children");
        let node = SearchNode {
            sql: format!("{}{fragment}", p.sql),
            fragment: fragment.to_string(),
            fragment_logprob: logprob,
            q_value,
            visits: 0,
            depth: p.depth + 1,
            parent: Some(parent),
            children: Vec::new(),
            is_terminal: terminal,
            dead_end: false,
            backed_up: false,
        };
        self.nodes.push(node);
        self.nodes[parent].children.push(id);
        id
    }

    /// Root-to-`id` node list.
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Sum of edge log-probabilities from the root to `id`.
    pub fn path_logprob(&self, id: NodeId) -> f64 {
        self.path_to(id).iter().map(|&n| self.nodes[n].fragment_logprob).sum()
    }

    /// Walks from the root to a leaf or terminal node.
    ///
    /// Unvisited children are taken first, best log-probability first.
    /// Otherwise the child maximising `Q + w * sqrt(ln N(parent)) / N(child)`
    /// wins; ties go to the higher log-probability, then the earlier child.
    pub fn select(&self, exploration_weight: f64) -> Vec<NodeId> {
        let mut path = vec![Self::ROOT];
        let mut cur = Self::ROOT;
        loop {
            let node = &self.nodes[cur];
            if node.is_terminal || node.children.is_empty() {
                return path;
            }
            cur = self.pick_child(cur, exploration_weight);
            path.push(cur);
        }
    }

    fn pick_child(&self, parent: NodeId, w: f64) -> NodeId {
        let p = &self.nodes[parent];
        let children = &p.children;
        let better_lp = |a: NodeId, b: NodeId| self.nodes[a].fragment_logprob > self.nodes[b].fragment_logprob;

        let mut unvisited: Option<NodeId> = None;
        for &c in children {
            if self.nodes[c].visits == 0 && unvisited.is_none_or(|u| better_lp(c, u)) {
                unvisited = Some(c);
            }
        }
        if let Some(c) = unvisited {
            return c;
        }

        let ln_parent = f64::from(p.visits.max(1)).ln();
        let score = |c: NodeId| {
            let n = &self.nodes[c];
            n.q_value + w * ln_parent.sqrt() / f64::from(n.visits)
        };
        let mut best = children[0];
        let mut best_score = score(best);
        for &c in &children[1..] {
            let s = score(c);
            if s > best_score || (s == best_score && better_lp(c, best)) {
                best = c;
                best_score = s;
            }
        }
        best
    }

    /// Propagates a simulation value up `path` (root first).
    ///
    /// The leaf takes `leaf_q` on its first backup and the max with its
    /// previous Q afterwards. Each ancestor at depth `t` takes the max of
    /// its previous Q and the mean Q of the path nodes from `t` down to the
    /// leaf. Every node on the path gains one visit.
    pub fn backpropagate(&mut self, path: &[NodeId], leaf_q: f64) {
        let Some((&leaf, ancestors)) = path.split_last() else {
            return;
        };
        debug_assert!(path.windows(2).all(|w| self.nodes[w[1]].parent == Some(w[0])));
        let l = &mut self.nodes[leaf];
        l.q_value = if l.backed_up { l.q_value.max(leaf_q) } else { leaf_q };
        l.backed_up = true;
        l.visits += 1;

        // sum over already-updated deeper nodes
        let mut sum = self.nodes[leaf].q_value;
        let mut count = 1.0;
        for &a in ancestors.iter().rev() {
            let node = &mut self.nodes[a];
            count += 1.0;
            node.q_value = node.q_value.max((sum + node.q_value) / count);
            sum += node.q_value;
            node.visits += 1;
        }
    }
}
