//! Primal network simplex for uncapacitated min-cost flow with real
//! supplies and costs.
//!
//! The spanning tree is stored with parent/predecessor arrays and a thread
//! (preorder) list, as in LEMON's implementation. Entering arcs are chosen by
//! block search. Artificial root arcs occupy indices `0..n`, so arcs can be
//! appended between solves and the previous basis is kept (warm start).

const DIR_UP: i8 = 1;
const DIR_DOWN: i8 = -1;
const STATE_TREE: i8 = 0;
const STATE_LOWER: i8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SimplexError {
    /// Supplies do not sum to zero within tolerance.
    Unbalanced(f64),
    /// Pivot limit reached; carries the most negative reduced cost seen.
    IterationLimit { pivots: u64, residual: f64 },
    Unbounded,
}

impl std::fmt::Display for SimplexError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Unbalanced(s) => write!(f, "supplies sum to {s}, expected 0"),
            Self::IterationLimit { pivots, residual } => {
                write!(f, "no convergence after {pivots} pivots (reduced cost residual {residual:e})")
            }
            Self::Unbounded => write!(f, "negative cycle of unbounded capacity"),
        }
    }
}

impl std::error::Error for SimplexError {}

#[derive(Clone, Debug)]
pub struct NetworkSimplex {
    n: usize,
    root: usize,
    source: Vec<usize>,
    target: Vec<usize>,
    cost: Vec<f64>,
    flow: Vec<f64>,
    state: Vec<i8>,
    supply: Vec<f64>,
    art_cost: f64,
    parent: Vec<usize>,
    pred: Vec<usize>,
    pred_dir: Vec<i8>,
    thread: Vec<usize>,
    rev_thread: Vec<usize>,
    succ_num: Vec<usize>,
    last_succ: Vec<usize>,
    pi: Vec<f64>,
    next_arc: usize,
    dirty_revs: Vec<usize>,
    pivots: u64,
    pub eps: f64,
    pub max_pivots: u64,
}

const NONE: usize = usize::MAX;
const BLOCK_FACTOR: f64 = 0.3;

impl NetworkSimplex {
    /// `supply[u] > 0` is a source, `< 0` a sink. `art_cost` is the cost of
    /// each artificial root arc; it must exceed half the cost of any simple
    /// path for artificial flow to vanish at the optimum.
    pub fn new(supply: Vec<f64>, art_cost: f64) -> Result<Self, SimplexError> {
        let total: f64 = supply.iter().sum();
        let scale: f64 = supply.iter().map(|s| s.abs()).sum::<f64>().max(1.0);
        if total.abs() > 1e-9 * scale {
            return Err(SimplexError::Unbalanced(total));
        }
        Ok(Self::with_root(supply, art_cost))
    }

    /// The root is a genuine node absorbing the imbalance `-Σ supply`, and
    /// the root arcs (`u -> root` for `supply[u] ≥ 0`, `root -> u` otherwise)
    /// are genuine arcs of cost `root_cost`. The initial basis routes all
    /// supply through the root and is therefore feasible.
    pub fn with_root(supply: Vec<f64>, root_cost: f64) -> Self {
        let art_cost = root_cost;
        let n = supply.len();
        let root = n;
        let mut s = Self {
            n,
            root,
            source: Vec::with_capacity(4 * n),
            target: Vec::with_capacity(4 * n),
            cost: Vec::with_capacity(4 * n),
            flow: Vec::with_capacity(4 * n),
            state: Vec::with_capacity(4 * n),
            supply,
            art_cost,
            parent: vec![NONE; n + 1],
            pred: vec![NONE; n + 1],
            pred_dir: vec![0; n + 1],
            thread: vec![0; n + 1],
            rev_thread: vec![0; n + 1],
            succ_num: vec![0; n + 1],
            last_succ: vec![0; n + 1],
            pi: vec![0.0; n + 1],
            next_arc: 0,
            dirty_revs: Vec::new(),
            pivots: 0,
            eps: 1e-13,
            max_pivots: u64::MAX,
        };
        s.init_tree();
        s
    }

    fn init_tree(&mut self) {
        let (n, root) = (self.n, self.root);
        self.parent[root] = NONE;
        self.pred[root] = NONE;
        self.thread[root] = if n > 0 { 0 } else { root };
        self.rev_thread[if n > 0 { 0 } else { root }] = root;
        self.succ_num[root] = n + 1;
        self.last_succ[root] = if n > 0 { n - 1 } else { root };
        self.pi[root] = 0.0;
        for u in 0..n {
            self.parent[u] = root;
            self.pred[u] = u;
            self.thread[u] = u + 1;
            self.rev_thread[u + 1] = u;
            self.succ_num[u] = 1;
            self.last_succ[u] = u;
            self.state.push(STATE_TREE);
            self.cost.push(self.art_cost);
            if self.supply[u] >= 0.0 {
                self.pred_dir[u] = DIR_UP;
                self.pi[u] = -self.art_cost;
                self.source.push(u);
                self.target.push(root);
                self.flow.push(self.supply[u]);
            } else {
                self.pred_dir[u] = DIR_DOWN;
                self.pi[u] = self.art_cost;
                self.source.push(root);
                self.target.push(u);
                self.flow.push(-self.supply[u]);
            }
        }
        if n > 0 {
            self.thread[n - 1] = root;
            self.rev_thread[root] = n - 1;
        }
        self.next_arc = n;
    }

    /// Adds an arc `s -> t` with the given cost; returns its index.
    pub fn add_arc(&mut self, s: usize, t: usize, cost: f64) -> usize {
        self.source.push(s);
        self.target.push(t);
        self.cost.push(cost);
        self.flow.push(0.0);
        self.state.push(STATE_LOWER);
        self.source.len() - 1
    }

    pub fn arc_count(&self) -> usize {
        self.source.len() - self.n
    }

    /// Index of the first user arc.
    pub fn first_arc(&self) -> usize {
        self.n
    }

    pub fn pivots(&self) -> u64 {
        self.pivots
    }

    #[inline]
    pub fn reduced_cost(&self, e: usize) -> f64 {
        self.cost[e] + self.pi[self.source[e]] - self.pi[self.target[e]]
    }

    /// Reduced cost of a hypothetical arc.
    #[inline]
    pub fn reduced_cost_of(&self, s: usize, t: usize, cost: f64) -> f64 {
        cost + self.pi[s] - self.pi[t]
    }

    pub fn potential(&self, u: usize) -> f64 {
        self.pi[u]
    }

    pub fn potentials(&self) -> &[f64] {
        &self.pi[..self.n]
    }

    /// Potentials including the artificial root, which has index `n`.
    pub fn potentials_with_root(&self) -> &[f64] {
        &self.pi
    }

    pub fn flow(&self, e: usize) -> f64 {
        self.flow[e]
    }

    pub fn arc(&self, e: usize) -> (usize, usize, f64) {
        (self.source[e], self.target[e], self.cost[e])
    }

    /// Flow on the root arc of node `u`, with `true` when it points into
    /// the root.
    pub fn root_arc_flow(&self, u: usize) -> (f64, bool) {
        (self.flow[u], self.target[u] == self.root)
    }

    /// Total flow on artificial arcs.
    pub fn artificial_flow(&self) -> f64 {
        self.flow[..self.n].iter().sum()
    }

    pub fn total_cost(&self) -> f64 {
        (self.n..self.source.len()).map(|e| self.flow[e] * self.cost[e]).sum()
    }

    fn find_entering(&mut self) -> Option<usize> {
        let m = self.source.len();
        let block = ((m as f64).sqrt() * BLOCK_FACTOR) as usize;
        let block = block.max(10);
        let mut min = -self.eps;
        let mut best = NONE;
        let mut cnt = block;
        let start = self.next_arc.min(m);
        for e in (start..m).chain(0..start) {
            let c = self.state[e] as f64 * self.reduced_cost(e);
            if c < min {
                min = c;
                best = e;
            }
            cnt -= 1;
            if cnt == 0 {
                if best != NONE {
                    self.next_arc = e + 1;
                    return Some(best);
                }
                cnt = block;
            }
        }
        if best != NONE {
            self.next_arc = best + 1;
            Some(best)
        } else {
            None
        }
    }

    fn find_join(&self, mut u: usize, mut v: usize) -> usize {
        while u != v {
            if self.succ_num[u] < self.succ_num[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        u
    }

    /// Runs pivots until no arc has negative reduced cost.
    pub fn solve(&mut self) -> Result<(), SimplexError> {
        while let Some(in_arc) = self.find_entering() {
            if self.pivots >= self.max_pivots {
                let residual = self.reduced_cost(in_arc);
                return Err(SimplexError::IterationLimit { pivots: self.pivots, residual });
            }
            self.pivot(in_arc)?;
            self.pivots += 1;
        }
        Ok(())
    }

    fn pivot(&mut self, in_arc: usize) -> Result<(), SimplexError> {
        let (first, second) = (self.source[in_arc], self.target[in_arc]);
        let join = self.find_join(first, second);
        // Leaving arc: the cycle pushes flow up from `second` to `join` and
        // down from `join` to `first`.
        let mut delta = f64::INFINITY;
        let mut u_out = NONE;
        let mut result = 0;
        let mut u = first;
        while u != join {
            if self.pred_dir[u] == DIR_UP {
                let d = self.flow[self.pred[u]];
                if d < delta {
                    delta = d;
                    u_out = u;
                    result = 1;
                }
            }
            u = self.parent[u];
        }
        u = second;
        while u != join {
            if self.pred_dir[u] == DIR_DOWN {
                let d = self.flow[self.pred[u]];
                if d <= delta {
                    delta = d;
                    u_out = u;
                    result = 2;
                }
            }
            u = self.parent[u];
        }
        if result == 0 {
            return Err(SimplexError::Unbounded);
        }
        let (u_in, v_in) = if result == 1 { (first, second) } else { (second, first) };

        if delta > 0.0 {
            self.flow[in_arc] += delta;
            let mut u = self.source[in_arc];
            while u != join {
                let e = self.pred[u];
                self.flow[e] -= self.pred_dir[u] as f64 * delta;
                u = self.parent[u];
            }
            u = self.target[in_arc];
            while u != join {
                let e = self.pred[u];
                self.flow[e] += self.pred_dir[u] as f64 * delta;
                u = self.parent[u];
            }
        }
        let out_arc = self.pred[u_out];
        self.flow[out_arc] = 0.0;
        self.state[in_arc] = STATE_TREE;
        self.state[out_arc] = STATE_LOWER;

        self.update_tree(in_arc, join, u_in, v_in, u_out);
        self.update_potential(in_arc, u_in, v_in);
        Ok(())
    }

    fn update_tree(&mut self, in_arc: usize, join: usize, u_in: usize, v_in: usize, u_out: usize) {
        let old_rev_thread = self.rev_thread[u_out];
        let old_succ_num = self.succ_num[u_out];
        let old_last_succ = self.last_succ[u_out];
        let v_out = self.parent[u_out];

        if u_in == u_out {
            self.parent[u_in] = v_in;
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source[in_arc] { DIR_UP } else { DIR_DOWN };
            if self.thread[v_in] != u_out {
                let mut after = self.thread[old_last_succ];
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
                after = self.thread[v_in];
                self.thread[v_in] = u_out;
                self.rev_thread[u_out] = v_in;
                self.thread[old_last_succ] = after;
                self.rev_thread[after] = old_last_succ;
            }
        } else {
            let thread_continue =
                if old_rev_thread == v_in { self.thread[old_last_succ] } else { self.thread[v_in] };
            let mut stem = u_in;
            let mut par_stem = v_in;
            let mut last = self.last_succ[u_in];
            let mut after = self.thread[last];
            self.thread[v_in] = u_in;
            self.dirty_revs.clear();
            self.dirty_revs.push(v_in);
            while stem != u_out {
                let next_stem = self.parent[stem];
                self.thread[last] = next_stem;
                self.dirty_revs.push(last);
                let before = self.rev_thread[stem];
                self.thread[before] = after;
                self.rev_thread[after] = before;
                self.parent[stem] = par_stem;
                par_stem = stem;
                stem = next_stem;
                last = if self.last_succ[stem] == self.last_succ[par_stem] {
                    self.rev_thread[par_stem]
                } else {
                    self.last_succ[stem]
                };
                after = self.thread[last];
            }
            self.parent[u_out] = par_stem;
            self.thread[last] = thread_continue;
            self.rev_thread[thread_continue] = last;
            self.last_succ[u_out] = last;
            if old_rev_thread != v_in {
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
            }
            for k in 0..self.dirty_revs.len() {
                let u = self.dirty_revs[k];
                let t = self.thread[u];
                self.rev_thread[t] = u;
            }
            let mut tmp_sc = 0usize;
            let tmp_ls = self.last_succ[u_out];
            let mut u = u_out;
            while u != u_in {
                let p = self.parent[u];
                self.pred[u] = self.pred[p];
                self.pred_dir[u] = -self.pred_dir[p];
                tmp_sc = tmp_sc + self.succ_num[u] - self.succ_num[p];
                self.succ_num[u] = tmp_sc;
                self.last_succ[p] = tmp_ls;
                u = p;
            }
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = if u_in == self.source[in_arc] { DIR_UP } else { DIR_DOWN };
            self.succ_num[u_in] = old_succ_num;
        }

        let up_limit_out = if self.last_succ[join] == v_in { join } else { NONE };
        let last_succ_out = self.last_succ[u_out];
        let mut u = v_in;
        while u != NONE && self.last_succ[u] == v_in {
            self.last_succ[u] = last_succ_out;
            u = self.parent[u];
        }
        if join != old_rev_thread && v_in != old_rev_thread {
            let mut u = v_out;
            while u != up_limit_out && u != NONE && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = old_rev_thread;
                u = self.parent[u];
            }
        } else if last_succ_out != old_last_succ {
            let mut u = v_out;
            while u != up_limit_out && u != NONE && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = last_succ_out;
                u = self.parent[u];
            }
        }
        let mut u = v_in;
        while u != join {
            self.succ_num[u] += old_succ_num;
            u = self.parent[u];
        }
        let mut u = v_out;
        while u != join {
            self.succ_num[u] -= old_succ_num;
            u = self.parent[u];
        }
    }

    /// Only potential differences matter, so the cheaper side of the cut is
    /// shifted: the subtree of `u_in`, or everything else by `-sigma`.
    fn update_potential(&mut self, in_arc: usize, u_in: usize, v_in: usize) {
        let sigma = self.pi[v_in] - self.pi[u_in] - self.pred_dir[u_in] as f64 * self.cost[in_arc];
        let end = self.thread[self.last_succ[u_in]];
        if 2 * self.succ_num[u_in] <= self.n + 1 {
            let mut u = u_in;
            while u != end {
                self.pi[u] += sigma;
                u = self.thread[u];
            }
        } else {
            let mut u = end;
            while u != u_in {
                self.pi[u] -= sigma;
                u = self.thread[u];
            }
        }
    }

    /// Replaces the basis by the spanning tree formed by `tree` (arc
    /// indices; exactly one arc per non-root node, connecting all nodes to
    /// the root). Tree flows follow from the supplies; returns `false` and
    /// leaves the solver unchanged if they are not all nonnegative.
    pub fn set_basis(&mut self, tree: &[usize]) -> bool {
        let nodes = self.n + 1;
        if tree.len() != self.n {
            return false;
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
        for &e in tree {
            adj[self.source[e]].push(e);
            adj[self.target[e]].push(e);
        }
        let mut parent = vec![NONE; nodes];
        let mut pred = vec![NONE; nodes];
        let mut pred_dir = vec![0i8; nodes];
        let mut order = Vec::with_capacity(nodes);
        let mut seen = vec![false; nodes];
        let mut stack = vec![self.root];
        seen[self.root] = true;
        while let Some(u) = stack.pop() {
            order.push(u);
            for &e in adj[u].iter().rev() {
                let w = if self.source[e] == u { self.target[e] } else { self.source[e] };
                if seen[w] {
                    continue;
                }
                seen[w] = true;
                parent[w] = u;
                pred[w] = e;
                pred_dir[w] = if self.source[e] == w { DIR_UP } else { DIR_DOWN };
                stack.push(w);
            }
        }
        if order.len() != nodes {
            return false;
        }
        // Subtree supplies give the tree flows.
        let mut sub = vec![0.0; nodes];
        sub[..self.n].copy_from_slice(&self.supply);
        let mut succ = vec![1usize; nodes];
        let mut flows = Vec::with_capacity(self.n);
        for &u in order.iter().rev() {
            if u == self.root {
                continue;
            }
            let f = sub[u] * pred_dir[u] as f64;
            let scale = sub[u].abs().max(1e-300);
            if f < -1e-12 * scale.max(1.0) {
                return false;
            }
            flows.push((pred[u], f.max(0.0)));
            let p = parent[u];
            sub[p] += sub[u];
            succ[p] += succ[u];
        }
        let mut pos = vec![0usize; nodes];
        for (k, &u) in order.iter().enumerate() {
            pos[u] = k;
        }
        for e in 0..self.source.len() {
            self.state[e] = STATE_LOWER;
            self.flow[e] = 0.0;
        }
        for (e, f) in flows {
            self.state[e] = STATE_TREE;
            self.flow[e] = f;
        }
        for (k, &u) in order.iter().enumerate() {
            let next = order[(k + 1) % nodes];
            self.thread[u] = next;
            self.rev_thread[next] = u;
            self.last_succ[u] = order[pos[u] + succ[u] - 1];
        }
        self.parent = parent;
        self.pred = pred;
        self.pred_dir = pred_dir;
        self.succ_num = succ;
        self.refresh();
        true
    }

    /// Recomputes potentials from the tree (root at 0) and tree flows from
    /// the supplies, removing accumulated rounding. Tree arc flows are the
    /// net supply of the subtree below them.
    pub fn refresh(&mut self) {
        let root = self.root;
        // Potentials in thread (preorder) order.
        self.pi[root] = 0.0;
        let mut u = self.thread[root];
        while u != root {
            let p = self.parent[u];
            let e = self.pred[u];
            self.pi[u] = if self.pred_dir[u] == DIR_UP { self.pi[p] - self.cost[e] } else { self.pi[p] + self.cost[e] };
            u = self.thread[u];
        }
        // Subtree supplies in reverse preorder.
        let mut sub = vec![0.0; self.n + 1];
        sub[..self.n].copy_from_slice(&self.supply);
        let mut order = Vec::with_capacity(self.n);
        let mut u = self.thread[root];
        while u != root {
            order.push(u);
            u = self.thread[u];
        }
        for &u in order.iter().rev() {
            let e = self.pred[u];
            let f = sub[u] * self.pred_dir[u] as f64;
            self.flow[e] = f.max(0.0);
            let p = self.parent[u];
            sub[p] += sub[u];
        }
    }
}
