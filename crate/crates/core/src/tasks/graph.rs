//! Synthetic multi-hop reachability questions over layered DAGs.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "w"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["mpus", "rpus", "mpus", "lpus", "ppus", "zzle"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphQAInstance {
    pub entities: Vec<String>,
    /// Directed edges `(from, to)` between entity indices.
    pub edges: Vec<(usize, usize)>,
    pub source: usize,
    /// Two candidate targets, exactly one reachable from `source`.
    pub candidates: [usize; 2],
    pub question: String,
    pub steps: Vec<String>,
    pub answer: String,
    /// Index into `candidates` of the reachable target.
    pub label: usize,
}

impl GraphQAInstance {
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.entities.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
        }
        adj
    }

    pub fn reachable(&self, from: usize, to: usize) -> bool {
        let adj = self.adjacency();
        let mut seen = vec![false; adj.len()];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(u) = queue.pop_front() {
            if u == to {
                return true;
            }
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        false
    }
}

fn names<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let name = format!(
            "{}{}{}",
            ONSETS[rng.random_range(0..ONSETS.len())],
            VOWELS[rng.random_range(0..VOWELS.len())],
            CODAS[rng.random_range(0..CODAS.len())]
        );
        if !out.contains(&name) {
            out.push(name);
        }
    }
    out
}

/// Layered DAG with `depth + 1` layers of `width` entities; the question
/// asks which of two last-layer entities the source reaches.
pub fn gen_graph_qa<R: Rng + ?Sized>(depth: usize, width: usize, rng: &mut R) -> Result<GraphQAInstance> {
    if depth < 1 || width < 2 {
        return Err(Error::contract(format!(
            "graph QA needs depth >= 1 and width >= 2, got {} and {}",
            depth, width
        )));
    }
    if width * (depth + 1) > ONSETS.len() * VOWELS.len() * 5 {
        return Err(Error::contract("graph QA: not enough distinct entity names"));
    }
    for _ in 0..1000 {
        let n = width * (depth + 1);
        let entities = names(n, rng);
        let id = |layer: usize, k: usize| layer * width + k;
        let mut edges = Vec::new();
        for layer in 0..depth {
            for k in 0..width {
                let fanout = rng.random_range(1..=2.min(width));
                let mut next: Vec<usize> = (0..width).collect();
                next.shuffle(rng);
                for &j in &next[..fanout] {
                    edges.push((id(layer, k), id(layer + 1, j)));
                }
            }
        }
        let source = id(0, rng.random_range(0..width));
        let mut inst = GraphQAInstance {
            entities,
            edges,
            source,
            candidates: [0, 0],
            question: String::new(),
            steps: Vec::new(),
            answer: String::new(),
            label: 0,
        };
        let last: Vec<usize> = (0..width).map(|k| id(depth, k)).collect();
        let (hit, miss): (Vec<usize>, Vec<usize>) = last.iter().partition(|&&v| inst.reachable(source, v));
        if hit.is_empty() || miss.is_empty() {
            continue;
        }
        let yes = hit[rng.random_range(0..hit.len())];
        let no = miss[rng.random_range(0..miss.len())];
        let label = rng.random_range(0..2);
        inst.candidates = if label == 0 { [yes, no] } else { [no, yes] };
        inst.label = label;
        let path = path_between(&inst, source, yes).expect("reachable target has a path");
        let e = &inst.entities;
        let mut facts: Vec<String> = inst
            .edges
            .iter()
            .map(|&(a, b)| format!("Every {} is a {}.", e[a], e[b]))
            .collect();
        facts.shuffle(rng);
        inst.question = format!(
            "{} Tom is a {}. Is Tom a {} or {}?",
            facts.join(" "),
            e[source],
            e[inst.candidates[0]],
            e[inst.candidates[1]]
        );
        inst.steps = path.windows(2).map(|w| format!("Tom is a {}.", e[w[1]])).collect();
        inst.answer = format!("Tom is a {}.", e[yes]);
        return Ok(inst);
    }
    Err(Error::Generation(
        "graph QA: no graph with a reachable and an unreachable target".into(),
    ))
}

/// Shortest path by BFS with parent links.
fn path_between(inst: &GraphQAInstance, from: usize, to: usize) -> Option<Vec<usize>> {
    let adj = inst.adjacency();
    let mut parent = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::from([from]);
    parent[from] = from;
    while let Some(u) = queue.pop_front() {
        if u == to {
            let mut path = vec![to];
            let mut cur = to;
            while cur != from {
                cur = parent[cur];
                path.push(cur);
            }
            path.reverse();
            return Some(path);
        }
        for &v in &adj[u] {
            if parent[v] == usize::MAX {
                parent[v] = u;
                queue.push_back(v);
            }
        }
    }
    None
}
