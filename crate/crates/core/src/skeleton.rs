//! Skeleton graphs, shortest-path hop distances and input modalities.
//!
//! Graphs are loaded from a JSON document:
//!
//! ```json
//! {
//!   "num_joints": 3,
//!   "edges": [[0, 1], [1, 2]],
//!   "parent": [0, 0, 1],
//!   "names": ["a", "b", "c"],
//!   "partitions": { "halves": { "left": [0, 1], "right": [2] } }
//! }
//! ```
//!
//! `parent`, `names` and `partitions` are optional; unknown fields are
//! rejected.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::numerics::NdArray;
use crate::{Error, Result};

/// Named joint groups of one partition strategy, in hyperedge order.
pub type PartitionTable = IndexMap<String, Vec<usize>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    num_joints: usize,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    partitions: IndexMap<String, PartitionTable>,
}

/// Joints plus undirected bones, with an optional tree orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonFile", into = "SkeletonFile")]
pub struct SkeletonGraph {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    parent: Option<Vec<usize>>,
    names: Option<Vec<String>>,
    partitions: IndexMap<String, PartitionTable>,
}

impl TryFrom<SkeletonFile> for SkeletonGraph {
    type Error = Error;

    fn try_from(f: SkeletonFile) -> Result<Self> {
        let mut g = SkeletonGraph::new(f.num_joints, f.edges.iter().map(|e| (e[0], e[1])).collect())?;
        if let Some(p) = f.parent {
            g = g.with_parent(p)?;
        }
        if let Some(n) = f.names {
            if n.len() != g.num_joints {
                return Err(Error::Config(format!(
                    "names has {} entries for {} joints",
                    n.len(),
                    g.num_joints
                )));
            }
            g.names = Some(n);
        }
        for (strategy, table) in f.partitions {
            g = g.with_partition(strategy, table)?;
        }
        Ok(g)
    }
}

impl From<SkeletonGraph> for SkeletonFile {
    fn from(g: SkeletonGraph) -> Self {
        SkeletonFile {
            num_joints: g.num_joints,
            edges: g.edges.iter().map(|&(a, b)| [a, b]).collect(),
            parent: g.parent,
            names: g.names,
            partitions: g.partitions,
        }
    }
}

impl SkeletonGraph {
    /// Validates endpoints, self-loops and duplicates. Connectivity is only
    /// required once hop distances are asked for.
    pub fn new(num_joints: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::Config("skeleton needs at least one joint".into()));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &edges {
            if a >= num_joints || b >= num_joints {
                return Err(Error::Config(format!(
                    "edge ({a},{b}) out of range for {num_joints} joints"
                )));
            }
            if a == b {
                return Err(Error::Config(format!("self-loop at joint {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Config(format!("duplicate edge ({a},{b})")));
            }
        }
        Ok(Self {
            num_joints,
            edges,
            parent: None,
            names: None,
            partitions: IndexMap::new(),
        })
    }

    /// Attaches a parent map. Exactly one joint may be its own parent and
    /// every other joint must reach it by following parents.
    pub fn with_parent(mut self, parent: Vec<usize>) -> Result<Self> {
        let v = self.num_joints;
        if parent.len() != v {
            return Err(Error::Config(format!(
                "parent has {} entries for {v} joints",
                parent.len()
            )));
        }
        if let Some(&p) = parent.iter().find(|&&p| p >= v) {
            return Err(Error::Config(format!("parent index {p} out of range")));
        }
        let roots: Vec<usize> = (0..v).filter(|&j| parent[j] == j).collect();
        if roots.len() != 1 {
            return Err(Error::Config(format!(
                "parent map must have exactly one root, found {roots:?}"
            )));
        }
        for start in 0..v {
            let mut j = start;
            for _ in 0..v {
                j = parent[j];
            }
            if j != roots[0] {
                return Err(Error::Config(format!(
                    "parent chain from joint {start} does not reach the root"
                )));
            }
        }
        self.parent = Some(parent);
        Ok(self)
    }

    /// Registers a named strategy. Every joint must appear in exactly one
    /// group and no group may be empty.
    pub fn with_partition(mut self, strategy: impl Into<String>, table: PartitionTable) -> Result<Self> {
        let strategy = strategy.into();
        let mut owner = vec![None; self.num_joints];
        for (group, joints) in &table {
            if joints.is_empty() {
                return Err(Error::Config(format!("{strategy}: group {group} is empty")));
            }
            for &j in joints {
                let slot = owner.get_mut(j).ok_or_else(|| {
                    Error::Config(format!("{strategy}: joint {j} out of range in group {group}"))
                })?;
                if slot.replace(group.as_str()).is_some() {
                    return Err(Error::Config(format!("{strategy}: joint {j} listed twice")));
                }
            }
        }
        let missing: Vec<usize> = (0..self.num_joints).filter(|&j| owner[j].is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "{strategy}: joints {missing:?} are not assigned to any group"
            )));
        }
        self.partitions.insert(strategy, table);
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton serializes")
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn parent(&self) -> Option<&[usize]> {
        self.parent.as_deref()
    }

    pub fn root(&self) -> Option<usize> {
        let p = self.parent.as_ref()?;
        (0..self.num_joints).find(|&j| p[j] == j)
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn partition_table(&self, strategy: &str) -> Option<&PartitionTable> {
        self.partitions.get(strategy)
    }

    pub fn strategies(&self) -> impl Iterator<Item = &str> {
        self.partitions.keys().map(String::as_str)
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_joints];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Relabels joint `j` as `perm[j]`. Partitions and names follow the
    /// joints.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let v = self.num_joints;
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..v).collect::<Vec<_>>() {
            return Err(Error::Config("relabeling is not a permutation".into()));
        }
        let mut g = Self::new(v, self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect())?;
        if let Some(p) = &self.parent {
            let mut q = vec![0; v];
            for j in 0..v {
                q[perm[j]] = perm[p[j]];
            }
            g = g.with_parent(q)?;
        }
        if let Some(n) = &self.names {
            let mut m = vec![String::new(); v];
            for j in 0..v {
                m[perm[j]] = n[j].clone();
            }
            g.names = Some(m);
        }
        for (s, table) in &self.partitions {
            let t = table
                .iter()
                .map(|(k, js)| (k.clone(), js.iter().map(|&j| perm[j]).collect()))
                .collect();
            g = g.with_partition(s.clone(), t)?;
        }
        Ok(g)
    }
}

/// All-pairs hop counts of a connected skeleton.
#[derive(Clone, PartialEq, Eq)]
pub struct HopMatrix {
    v: usize,
    hops: Vec<usize>,
}

impl HopMatrix {
    pub fn num_joints(&self) -> usize {
        self.v
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.hops[i * self.v + j]
    }

    /// Row-major `V * V` entries.
    pub fn as_slice(&self) -> &[usize] {
        &self.hops
    }

    pub fn max_hop(&self) -> usize {
        self.hops.iter().copied().max().unwrap_or(0)
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.hops.chunks(self.v).map(<[usize]>::to_vec).collect()
    }

    /// Applies a joint permutation: entry `(perm[i], perm[j])` of the result
    /// is entry `(i, j)` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let v = self.v;
        let mut hops = vec![0; v * v];
        for i in 0..v {
            for j in 0..v {
                hops[perm[i] * v + perm[j]] = self.get(i, j);
            }
        }
        Self { v, hops }
    }
}

impl fmt::Display for HopMatrix {
    /// One whitespace-separated row per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.hops.chunks(self.v) {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

impl fmt::Debug for HopMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HopMatrix({}x{})\n{self}", self.v, self.v)
    }
}

/// Hop distances by one breadth-first search per joint.
pub fn shortest_path_hops(g: &SkeletonGraph) -> Result<HopMatrix> {
    let v = g.num_joints;
    let adj = g.adjacency();
    let mut hops = vec![usize::MAX; v * v];
    let mut queue = VecDeque::new();
    for src in 0..v {
        let row = &mut hops[src * v..(src + 1) * v];
        row[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let next = row[u] + 1;
            for &w in &adj[u] {
                if row[w] == usize::MAX {
                    row[w] = next;
                    queue.push_back(w);
                }
            }
        }
    }
    let unreachable: Vec<(usize, usize)> = (0..v)
        .flat_map(|i| (i + 1..v).map(move |j| (i, j)))
        .filter(|&(i, j)| hops[i * v + j] == usize::MAX)
        .collect();
    if !unreachable.is_empty() {
        return Err(Error::Topology { unreachable });
    }
    Ok(HopMatrix { v, hops })
}

fn check_sample(sample: &NdArray, v: usize) -> Result<(usize, usize)> {
    let shape = sample.shape();
    if shape.len() < 3 || shape[shape.len() - 1] != v {
        return Err(Error::Shape {
            op: "modality",
            lhs: shape.to_vec(),
            rhs: vec![0, 0, v],
        });
    }
    Ok((shape[shape.len() - 2], v))
}

/// Bone modality: each joint minus its parent, on `[.., C, T, V]` arrays.
/// The root maps to zeros.
pub fn derive_bone(sample: &NdArray, g: &SkeletonGraph) -> Result<NdArray> {
    let parent = g
        .parent()
        .ok_or_else(|| Error::Config("bone modality needs a parent map".into()))?;
    let (_, v) = check_sample(sample, g.num_joints)?;
    let mut out = sample.clone();
    for (dst, src) in out.data_mut().chunks_mut(v).zip(sample.data().chunks(v)) {
        for j in 0..v {
            dst[j] = src[j] - src[parent[j]];
        }
    }
    Ok(out)
}

/// Motion modality: next frame minus current frame along `T`, on
/// `[.., C, T, V]` arrays. The last frame is zero so `T` is unchanged.
pub fn derive_motion(sample: &NdArray) -> Result<NdArray> {
    let shape = sample.shape();
    if shape.len() < 3 || shape[shape.len() - 2] == 0 {
        return Err(Error::Shape {
            op: "derive_motion",
            lhs: shape.to_vec(),
            rhs: vec![0, 1, 0],
        });
    }
    let (t, v) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = NdArray::zeros(shape);
    for (dst, src) in out.data_mut().chunks_mut(t * v).zip(sample.data().chunks(t * v)) {
        for ti in 0..t - 1 {
            for j in 0..v {
                dst[ti * v + j] = src[(ti + 1) * v + j] - src[ti * v + j];
            }
        }
    }
    Ok(out)
}

/// The 25-joint body graph shipped with the crate.
pub fn ntu25() -> SkeletonGraph {
    SkeletonGraph::from_json(include_str!("../../../configs/skeletons/ntu25.json"))
        .expect("bundled skeleton is valid")
}

/// A 16-joint, left/right symmetric body for fast synthetic runs.
pub fn mini16() -> SkeletonGraph {
    SkeletonGraph::from_json(include_str!("../../../configs/skeletons/mini16.json"))
        .expect("bundled skeleton is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path3() -> SkeletonGraph {
        SkeletonGraph::new(3, vec![(0, 1), (1, 2)]).unwrap()
    }

    /// Random spanning tree plus a few extra chords.
    pub(crate) fn random_connected(v: usize, rng: &mut impl Rng) -> SkeletonGraph {
        let mut edges = Vec::new();
        let mut seen = BTreeSet::new();
        for j in 1..v {
            let p = rng.random_range(0..j);
            edges.push((p, j));
            seen.insert((p, j));
        }
        for _ in 0..rng.random_range(0..=v) {
            let (a, b) = (rng.random_range(0..v), rng.random_range(0..v));
            if a != b && seen.insert((a.min(b), a.max(b))) {
                edges.push((a, b));
            }
        }
        SkeletonGraph::new(v, edges).unwrap()
    }

    #[test]
    fn path_graph_hops() {
        let h = shortest_path_hops(&path3()).unwrap();
        assert_eq!(h.rows(), vec![vec![0, 1, 2], vec![1, 0, 1], vec![2, 1, 0]]);
    }

    #[test]
    fn star_graph_hops() {
        let g = SkeletonGraph::new(4, vec![(0, 1), (0, 2), (0, 3)]).unwrap();
        let h = shortest_path_hops(&g).unwrap();
        for leaf in 1..4 {
            assert_eq!(h.get(0, leaf), 1);
            for other in 1..4 {
                if other != leaf {
                    assert_eq!(h.get(leaf, other), 2);
                }
            }
        }
    }

    #[test]
    fn matches_floyd_warshall_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let v = rng.random_range(2..=25);
            let g = random_connected(v, &mut rng);
            let h = shortest_path_hops(&g).unwrap();
            let fw = oracle::floyd_warshall(v, g.edges());
            for i in 0..v {
                for j in 0..v {
                    assert_eq!(Some(h.get(i, j)), fw[i][j]);
                }
                let bfs = oracle::bfs_levels(v, g.edges(), i);
                assert_eq!(bfs, fw[i]);
            }
        }
    }

    #[test]
    fn disconnected_graph_lists_pairs() {
        let g = SkeletonGraph::new(4, vec![(0, 1), (2, 3)]).unwrap();
        match shortest_path_hops(&g) {
            Err(Error::Topology { unreachable }) => {
                assert_eq!(unreachable, vec![(0, 2), (0, 3), (1, 2), (1, 3)]);
            }
            other => panic!("expected topology error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(SkeletonGraph::new(2, vec![(0, 2)]).is_err());
        assert!(SkeletonGraph::new(2, vec![(1, 1)]).is_err());
        assert!(SkeletonGraph::new(2, vec![(0, 1), (1, 0)]).is_err());
    }

    #[test]
    fn rejects_bad_parent_maps() {
        assert!(path3().with_parent(vec![0, 1, 1]).is_err()); // two roots
        assert!(path3().with_parent(vec![1, 0, 0]).is_err()); // cycle, no root
        assert!(path3().with_parent(vec![0, 0]).is_err());
        assert!(path3().with_parent(vec![0, 0, 1]).is_ok());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let text = r#"{"num_joints": 2, "edges": [[0, 1]], "bones": []}"#;
        let msg = SkeletonGraph::from_json(text).unwrap_err().to_string();
        assert!(msg.contains("bones"), "{msg}");
    }

    #[test]
    fn config_checks_partition_tables() {
        let text = r#"{"num_joints": 3, "edges": [[0, 1], [1, 2]],
            "partitions": {"p": {"a": [0, 1]}}}"#;
        assert!(SkeletonGraph::from_json(text).is_err());
        let text = r#"{"num_joints": 3, "edges": [[0, 1], [1, 2]],
            "partitions": {"p": {"a": [0, 1], "b": [1, 2]}}}"#;
        assert!(SkeletonGraph::from_json(text).is_err());
    }

    #[test]
    fn mini_skeleton_is_mirror_symmetric() {
        let g = mini16();
        let mirror = [0, 1, 2, 3, 7, 8, 9, 4, 5, 6, 13, 14, 15, 10, 11, 12];
        let h = shortest_path_hops(&g).unwrap();
        assert_eq!(h.permuted(&mirror), h);
        assert_eq!(g.partition_table("body_parts").unwrap().len(), 5);
    }

    #[test]
    fn bundled_skeleton_round_trips() {
        let g = ntu25();
        assert_eq!(g.num_joints(), 25);
        assert_eq!(g.edges().len(), 24);
        assert_eq!(g.root(), Some(20));
        assert_eq!(g.partition_table("body_parts").unwrap().len(), 5);
        assert_eq!(g.partition_table("upper_lower").unwrap().len(), 2);
        let back = SkeletonGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        let h = shortest_path_hops(&g).unwrap();
        for i in 0..25 {
            assert_eq!(h.get(i, i), 0);
            for j in 0..25 {
                assert_eq!(h.get(i, j), h.get(j, i));
            }
        }
    }

    #[test]
    fn hop_matrix_text_form() {
        let h = shortest_path_hops(&path3()).unwrap();
        assert_eq!(h.to_string(), "0 1 2\n1 0 1\n2 1 0\n");
    }

    #[test]
    fn bone_examples() {
        let g = path3().with_parent(vec![0, 0, 1]).unwrap();
        let flat = NdArray::full(&[3, 2, 3], 4.0);
        assert_eq!(derive_bone(&flat, &g).unwrap().max_abs(), 0.0);

        let chain = SkeletonGraph::new(2, vec![(0, 1)]).unwrap().with_parent(vec![0, 0]).unwrap();
        // channels x, y, z; one frame; child at parent + (1, 0, 0)
        let x = NdArray::new(&[3, 1, 2], vec![2.0, 3.0, 5.0, 5.0, -1.0, -1.0]).unwrap();
        let b = derive_bone(&x, &chain).unwrap();
        assert_eq!(b.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);

        assert!(derive_bone(&x, &SkeletonGraph::new(2, vec![(0, 1)]).unwrap()).is_err());
    }

    #[test]
    fn bone_matches_loop_oracle() {
        let g = ntu25();
        let parent = g.parent().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = NdArray::from_fn(&[2, 3, 4, 25], |_| rng.random_range(-1.0..1.0));
        let b = derive_bone(&x, &g).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for t in 0..4 {
                    for v in 0..25 {
                        let want = x.get(&[n, c, t, v]) - x.get(&[n, c, t, parent[v]]);
                        assert_eq!(b.get(&[n, c, t, v]), want);
                    }
                }
            }
        }
    }

    #[test]
    fn motion_examples() {
        let x = NdArray::full(&[3, 5, 2], 1.5);
        assert_eq!(derive_motion(&x).unwrap().max_abs(), 0.0);

        let drift = NdArray::from_fn(&[3, 4, 2], |i| if i[0] == 0 { i[1] as f64 } else { 0.0 });
        let m = derive_motion(&drift).unwrap();
        for t in 0..4 {
            for v in 0..2 {
                assert_eq!(m.get(&[0, t, v]), if t < 3 { 1.0 } else { 0.0 });
                assert_eq!(m.get(&[1, t, v]), 0.0);
            }
        }
    }

    #[test]
    fn motion_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = NdArray::from_fn(&[3, 6, 5], |_| rng.random_range(-1.0..1.0));
        let m = derive_motion(&x).unwrap();
        for c in 0..3 {
            for t in 0..6 {
                for v in 0..5 {
                    let want = if t + 1 < 6 { x.get(&[c, t + 1, v]) - x.get(&[c, t, v]) } else { 0.0 };
                    assert_eq!(m.get(&[c, t, v]), want);
                }
            }
        }
    }

    #[test]
    fn bones_telescope_to_root_offset() {
        let g = ntu25();
        let parent = g.parent().unwrap();
        let root = g.root().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // integer-valued coordinates keep the telescoping sum exact
        let x = NdArray::from_fn(&[3, 2, 25], |_| rng.random_range(-50..50) as f64);
        let b = derive_bone(&x, &g).unwrap();
        for c in 0..3 {
            for t in 0..2 {
                for v in 0..25 {
                    let (mut j, mut acc) = (v, 0.0);
                    while j != root {
                        acc += b.get(&[c, t, j]);
                        j = parent[j];
                    }
                    assert_eq!(acc, x.get(&[c, t, v]) - x.get(&[c, t, root]));
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn hops_invariant_under_relabeling(seed in any::<u64>(), v in 2usize..=25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_connected(v, &mut rng);
            let mut perm: Vec<usize> = (0..v).collect();
            perm.shuffle(&mut rng);
            let h = shortest_path_hops(&g).unwrap();
            let hp = shortest_path_hops(&g.relabel(&perm).unwrap()).unwrap();
            for i in 0..v {
                for j in 0..v {
                    prop_assert_eq!(hp.get(perm[i], perm[j]), h.get(i, j));
                }
            }
            prop_assert_eq!(hp, h.permuted(&perm));
        }

        #[test]
        fn hop_matrix_is_a_metric(seed in any::<u64>(), v in 2usize..=16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_connected(v, &mut rng);
            let h = shortest_path_hops(&g).unwrap();
            let edges: BTreeSet<(usize, usize)> =
                g.edges().iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
            for i in 0..v {
                for j in 0..v {
                    prop_assert_eq!(h.get(i, j) == 1, edges.contains(&(i.min(j), i.max(j))));
                    for k in 0..v {
                        prop_assert!(h.get(i, j) <= h.get(i, k) + h.get(k, j));
                    }
                }
            }
        }
    }
}
