//! Hierarchical navigable small-world graph over the vectors held by
//! [`super::VectorIndex`]. The graph stores only adjacency; similarities are
//! computed through closures so the same code serves inserts and queries.
//!
//! Levels are drawn from a hash of `(seed, node)`, so building the same data in
//! the same order always yields the same graph.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::HnswParams;

pub(crate) const MAX_LEVEL: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Scored {
    pub score: f64,
    pub node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    /// Higher score is greater; on ties the lower node id is greater.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct HnswGraph {
    pub params: HnswParams,
    /// `links[node][layer]`; a node's top layer is `links[node].len() - 1`.
    pub links: Vec<Vec<Vec<u32>>>,
    pub entry: Option<u32>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl HnswGraph {
    pub fn new(params: HnswParams) -> Self {
        Self {
            params,
            links: Vec::new(),
            entry: None,
        }
    }

    pub fn top_layer(&self, node: u32) -> usize {
        self.links[node as usize].len() - 1
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    pub fn level_for(&self, node: u32) -> usize {
        let h = splitmix64(self.params.seed ^ splitmix64(node as u64));
        // uniform in (0, 1]
        let u = ((h >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        let ml = 1.0 / (self.params.m as f64).ln();
        ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL)
    }

    /// Beam search on one layer. Returns up to `ef` nodes, best first.
    pub fn search_layer(
        &self,
        entry: &[Scored],
        ef: usize,
        layer: usize,
        sim: &impl Fn(u32) -> f64,
        visited: &mut Visited,
    ) -> Vec<Scored> {
        visited.clear();
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in entry {
            if visited.insert(e.node) {
                candidates.push(e);
                results.push(Reverse(e));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().map(|r| r.0);
            if let Some(w) = worst {
                if results.len() >= ef && c < w {
                    break;
                }
            }
            for &n in &self.links[c.node as usize][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored { score: sim(n), node: n };
                let accept = results.len() < ef || results.peek().is_some_and(|w| s > w.0);
                if accept {
                    candidates.push(s);
                    results.push(Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    /// Greedy descent through the upper layers down to `target_layer + 1`.
    fn descend(&self, sim: &impl Fn(u32) -> f64, target_layer: usize, visited: &mut Visited) -> Vec<Scored> {
        let entry = self.entry.expect("non-empty graph");
        let mut ep = vec![Scored {
            score: sim(entry),
            node: entry,
        }];
        let top = self.top_layer(entry);
        let mut layer = top;
        while layer > target_layer {
            ep = self.search_layer(&ep, 1, layer, sim, visited);
            layer -= 1;
        }
        ep
    }

    /// Neighbor selection heuristic: keep a candidate only if it is closer to
    /// the base than to every already kept neighbor, then top up with the
    /// pruned candidates until `m` are kept.
    fn select_neighbors(&self, candidates: &[Scored], m: usize, pair: &impl Fn(u32, u32) -> f64) -> Vec<u32> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut pruned: Vec<Scored> = Vec::new();
        for &c in candidates {
            if kept.len() >= m {
                break;
            }
            if kept.iter().all(|k| pair(c.node, k.node) < c.score) {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for p in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(p);
        }
        kept.into_iter().map(|s| s.node).collect()
    }

    /// Links node `q` (already present in the vector store as id `q == len()`).
    pub fn insert(
        &mut self,
        q: u32,
        sim_q: &impl Fn(u32) -> f64,
        pair: &impl Fn(u32, u32) -> f64,
        visited: &mut Visited,
    ) {
        debug_assert_eq!(q as usize, self.links.len());
        let level = self.level_for(q);
        self.links.push(vec![Vec::new(); level + 1]);
        visited.grow(self.links.len());
        let Some(entry) = self.entry else {
            self.entry = Some(q);
            return;
        };
        let top = self.top_layer(entry);
        let mut ep = self.descend(sim_q, level.min(top), visited);
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&ep, self.params.ef_construction, layer, sim_q, visited);
            let neighbors = self.select_neighbors(&found, self.params.m, pair);
            for &n in &neighbors {
                let max = self.max_degree(layer);
                let list = &mut self.links[n as usize][layer];
                list.push(q);
                if list.len() > max {
                    let mut cands: Vec<Scored> = list
                        .iter()
                        .map(|&x| Scored {
                            score: pair(n, x),
                            node: x,
                        })
                        .collect();
                    cands.sort_unstable_by(|a, b| b.cmp(a));
                    let pruned = self.select_neighbors(&cands, max, pair);
                    self.links[n as usize][layer] = pruned;
                }
            }
            self.links[q as usize][layer] = neighbors;
            ep = found;
        }
        if level > top {
            self.entry = Some(q);
        }
    }

    /// Approximate best `ef` nodes for a query, best first.
    pub fn search(&self, sim: &impl Fn(u32) -> f64, ef: usize, visited: &mut Visited) -> Vec<Scored> {
        if self.entry.is_none() {
            return Vec::new();
        }
        visited.grow(self.links.len());
        let ep = self.descend(sim, 0, visited);
        self.search_layer(&ep, ef, 0, sim, visited)
    }

    /// Structural validation used when loading from disk.
    pub fn validate(&self, n: usize) -> Result<(), String> {
        if self.links.len() != n {
            return Err(format!("graph has {} nodes, index has {n}", self.links.len()));
        }
        match self.entry {
            None if n > 0 => return Err("missing entry point".into()),
            Some(e) if e as usize >= n => return Err("entry point out of range".into()),
            Some(e) => {
                let top = self.top_layer(e);
                if self.links.iter().any(|l| l.len() - 1 > top) {
                    return Err("entry point is not on the top layer".into());
                }
            }
            None => {}
        }
        for (node, layers) in self.links.iter().enumerate() {
            if layers.is_empty() || layers.len() > MAX_LEVEL + 1 {
                return Err(format!("node {node} has {} layers", layers.len()));
            }
            for (layer, list) in layers.iter().enumerate() {
                for &nb in list {
                    let nb = nb as usize;
                    if nb >= n || nb == node || self.links[nb].len() <= layer {
                        return Err(format!("bad link {node}->{nb} on layer {layer}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Visited set reused across searches; generation-stamped so clearing is O(1).
#[derive(Debug, Default)]
pub(crate) struct Visited {
    marks: Vec<u32>,
    generation: u32,
}

impl Visited {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            marks: vec![0; n],
            generation: 1,
        }
    }

    pub fn grow(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n.next_power_of_two(), 0);
        }
    }

    pub fn clear(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.generation = 1;
        }
    }

    /// Marks `node`; false if it was already marked.
    pub fn insert(&mut self, node: u32) -> bool {
        let slot = &mut self.marks[node as usize];
        if *slot == self.generation {
            false
        } else {
            *slot = self.generation;
            true
        }
    }
}
