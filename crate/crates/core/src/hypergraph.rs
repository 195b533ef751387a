//! Joint partitions as hypergraphs: incidence matrices, hyperedge features
//! and the relax/discretize cycle used to learn a partition.
//!
//! Every joint belongs to exactly one hyperedge, so a binary incidence
//! matrix is stored as its assignment vector.

use std::path::Path;

use rand::Rng;

use crate::numerics::{softmax_lastaxis, uniform, NdArray, Tape};
use crate::skeleton::SkeletonGraph;
use crate::{Error, Result};

/// Initial logit range for learned partitions.
pub const LEARNED_INIT_BOUND: f64 = 0.1;

/// Default number of hyperedges for a learned partition.
pub const DEFAULT_LEARNED_EDGES: usize = 5;

/// Binary one-hot-row `V x |E|` incidence matrix with no empty column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IncidenceMatrix {
    assignment: Vec<usize>,
    num_edges: usize,
}

impl IncidenceMatrix {
    pub fn from_assignment(assignment: Vec<usize>, num_edges: usize) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::Config("partition over zero joints".into()));
        }
        if let Some(&e) = assignment.iter().find(|&&e| e >= num_edges) {
            return Err(Error::Index(format!(
                "hyperedge {e} out of range for {num_edges} hyperedges"
            )));
        }
        let mut count = vec![0usize; num_edges];
        assignment.iter().for_each(|&e| count[e] += 1);
        if let Some(column) = count.iter().position(|&c| c == 0) {
            return Err(Error::DegeneratePartition { column });
        }
        Ok(Self { assignment, num_edges })
    }

    /// Validates a dense `V x |E|` 0/1 matrix.
    pub fn from_matrix(h: &NdArray) -> Result<Self> {
        let &[v, e] = h.shape() else {
            return Err(Error::Shape {
                op: "incidence",
                lhs: h.shape().to_vec(),
                rhs: vec![],
            });
        };
        let mut assignment = Vec::with_capacity(v);
        for (row, vals) in h.data().chunks(e).enumerate() {
            let ones: Vec<usize> = (0..e).filter(|&k| vals[k] == 1.0).collect();
            if ones.len() != 1 || vals.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::Config(format!("incidence row {row} is not one-hot")));
            }
            assignment.push(ones[0]);
        }
        Self::from_assignment(assignment, e)
    }

    /// Everything in one hyperedge.
    pub fn single(num_joints: usize) -> Self {
        Self {
            assignment: vec![0; num_joints],
            num_edges: 1,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn to_array(&self) -> NdArray {
        NdArray::from_fn(&[self.num_joints(), self.num_edges], |ix| {
            f64::from(self.assignment[ix[0]] == ix[1])
        })
    }

    /// Joint members of hyperedge `e`, ascending.
    pub fn members(&self, e: usize) -> Vec<usize> {
        (0..self.num_joints()).filter(|&v| self.assignment[v] == e).collect()
    }

    /// Rows follow relabeled joints: joint `perm[j]` takes joint `j`'s edge.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut assignment = vec![0; self.num_joints()];
        for (j, &e) in self.assignment.iter().enumerate() {
            assignment[perm[j]] = e;
        }
        Self {
            assignment,
            num_edges: self.num_edges,
        }
    }

    /// Whitespace-separated hyperedge index per joint, one line.
    pub fn to_text(&self) -> String {
        let parts: Vec<String> = self.assignment.iter().map(usize::to_string).collect();
        parts.join(" ") + "\n"
    }

    /// Parses [`Self::to_text`]. The hyperedge count is `max + 1` unless
    /// given, so a file can never silently drop a trailing empty group.
    pub fn from_text(text: &str, num_edges: Option<usize>) -> Result<Self> {
        let assignment = text
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad hyperedge index {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let e = num_edges.unwrap_or_else(|| assignment.iter().max().map_or(0, |m| m + 1));
        Self::from_assignment(assignment, e)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>, num_edges: Option<usize>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, num_edges)
    }
}

/// Learnable logits whose row-softmax is the relaxed incidence matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedPartition {
    logits: NdArray,
}

impl RelaxedPartition {
    pub fn from_logits(logits: NdArray) -> Result<Self> {
        if logits.ndim() != 2 || logits.shape()[0] == 0 {
            return Err(Error::Shape {
                op: "relax",
                lhs: logits.shape().to_vec(),
                rhs: vec![],
            });
        }
        if logits.shape()[1] < 2 {
            return Err(Error::Config("a relaxed partition needs at least two hyperedges".into()));
        }
        Ok(Self { logits })
    }

    /// Logits drawn uniformly from `[-0.1, 0.1]`.
    pub fn random(num_joints: usize, num_edges: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::from_logits(uniform(&[num_joints, num_edges], LEARNED_INIT_BOUND, rng))
    }

    pub fn logits(&self) -> &NdArray {
        &self.logits
    }

    pub fn probabilities(&self) -> NdArray {
        softmax_lastaxis(&self.logits).expect("two-dimensional logits")
    }

    pub fn discretize(&self) -> Result<IncidenceMatrix> {
        discretize(&self.probabilities())
    }
}

/// Starts a learnable partition at the given logits.
pub fn relax(h_init: &NdArray) -> Result<RelaxedPartition> {
    RelaxedPartition::from_logits(h_init.clone())
}

/// Row-wise argmax of a `V x |E|` matrix, ties to the lowest column.
pub fn discretize(h: &NdArray) -> Result<IncidenceMatrix> {
    let &[_, e] = h.shape() else {
        return Err(Error::Shape {
            op: "discretize",
            lhs: h.shape().to_vec(),
            rhs: vec![],
        });
    };
    let assignment = h
        .data()
        .chunks(e)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &x)| if x > best.1 { (k, x) } else { best })
                .0
        })
        .collect();
    IncidenceMatrix::from_assignment(assignment, e)
}

/// Column sums `d(e)` of a binary or relaxed `V x |E|` matrix.
pub fn edge_degrees(h: &NdArray) -> Result<Vec<f64>> {
    let &[_, e] = h.shape() else {
        return Err(Error::Shape {
            op: "edge_degrees",
            lhs: h.shape().to_vec(),
            rhs: vec![],
        });
    };
    let mut deg = vec![0.0; e];
    for row in h.data().chunks(e) {
        deg.iter_mut().zip(row).for_each(|(d, x)| *d += x);
    }
    if let Some(column) = deg.iter().position(|&d| d == 0.0) {
        return Err(Error::DegeneratePartition { column });
    }
    Ok(deg)
}

/// Hyperedge features: member mean, then projection. `x` is `[.., V, C]`,
/// `h` is `[V, |E|]`, `w_e` is `[C, C']`; the result is `[.., |E|, C']`.
pub fn aggregate_hyperedges(x: &NdArray, h: &NdArray, w_e: &NdArray) -> Result<NdArray> {
    let mut tape = Tape::new();
    let (x, h, w) = (
        tape.constant(x.clone()),
        tape.constant(h.clone()),
        tape.constant(w_e.clone()),
    );
    let mean = tape.edge_mean_operator(h)?;
    let pooled = tape.matmul(mean, x)?;
    let e = tape.matmul(pooled, w)?;
    Ok(tape.value(e).clone())
}

/// Per-joint broadcast `H E` of hyperedge features `[.., |E|, C]`.
pub fn augment(e: &NdArray, h: &NdArray) -> Result<NdArray> {
    crate::numerics::matmul(h, e)
}

/// The incidence matrix of a named strategy from the skeleton config.
pub fn empirical_partition(strategy: &str, g: &SkeletonGraph) -> Result<IncidenceMatrix> {
    let table = g.partition_table(strategy).ok_or_else(|| {
        let known: Vec<&str> = g.strategies().collect();
        Error::Config(format!("unknown partition strategy {strategy:?} (known: {known:?})"))
    })?;
    let mut assignment = vec![usize::MAX; g.num_joints()];
    for (e, joints) in table.values().enumerate() {
        for &j in joints {
            assignment[j] = e;
        }
    }
    if let Some(j) = assignment.iter().position(|&e| e == usize::MAX) {
        return Err(Error::Config(format!("{strategy}: joint {j} has no group")));
    }
    IncidenceMatrix::from_assignment(assignment, table.len())
}
