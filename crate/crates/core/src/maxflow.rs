//! Dinic's max-flow on real-valued capacities.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
struct Arc {
    to: usize,
    cap: f64,
    /// Index of the reverse arc in `adj[to]`.
    rev: usize,
}

#[derive(Debug, Clone)]
pub struct FlowNetwork {
    adj: Vec<Vec<Arc>>,
    eps: f64,
}

impl FlowNetwork {
    pub fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            eps: 0.0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Adds a directed arc. Zero or negative capacities are dropped.
    pub fn add_arc(&mut self, from: usize, to: usize, cap: f64) {
        if cap <= 0.0 {
            return;
        }
        let rev_from = self.adj[to].len() + usize::from(from == to);
        let rev_to = self.adj[from].len();
        self.adj[from].push(Arc { to, cap, rev: rev_from });
        self.adj[to].push(Arc { to: from, cap: 0.0, rev: rev_to });
        self.eps = self.eps.max(cap * 1e-12);
    }

    fn levels(&self, source: usize) -> Vec<Option<u32>> {
        let mut level = vec![None; self.adj.len()];
        level[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            let next = level[v].map(|l| l + 1);
            for a in &self.adj[v] {
                if a.cap > self.eps && level[a.to].is_none() {
                    level[a.to] = next;
                    queue.push_back(a.to);
                }
            }
        }
        level
    }

    fn augment(&mut self, v: usize, sink: usize, pushed: f64, level: &[Option<u32>], iter: &mut [usize]) -> f64 {
        if v == sink {
            return pushed;
        }
        while iter[v] < self.adj[v].len() {
            let k = iter[v];
            let Arc { to, cap, rev } = self.adj[v][k];
            if cap > self.eps && level[to].is_some() && level[to] == level[v].map(|l| l + 1) {
                let got = self.augment(to, sink, pushed.min(cap), level, iter);
                if got > 0.0 {
                    self.adj[v][k].cap -= got;
                    self.adj[to][rev].cap += got;
                    return got;
                }
            }
            iter[v] += 1;
        }
        0.0
    }

    /// Saturates the network and returns the flow value.
    pub fn max_flow(&mut self, source: usize, sink: usize) -> f64 {
        let mut flow = 0.0;
        loop {
            let level = self.levels(source);
            if level[sink].is_none() {
                return flow;
            }
            let mut iter = vec![0; self.adj.len()];
            loop {
                let got = self.augment(source, sink, f64::INFINITY, &level, &mut iter);
                if got <= 0.0 {
                    break;
                }
                flow += got;
            }
        }
    }

    /// Nodes reachable from `source` in the residual network. After
    /// `max_flow` this is the inclusion-minimal source side of a min cut.
    pub fn source_side(&self, source: usize) -> Vec<bool> {
        self.levels(source).into_iter().map(|l| l.is_some()).collect()
    }
}
