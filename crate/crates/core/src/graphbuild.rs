//! Textual and visual graph construction.
//!
//! Textual edge weights are the row-softmax similarity of word features,
//! masked by the adjacency matrix and L2-normalised per row. Visual graphs
//! are fully connected; each ordered pair of regions carries the polar
//! coordinates of the vector between their box centres.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{GsmnError, Result};
use crate::graphio::{ImageRecord, TextRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum GraphVariant {
    /// Dependency edges plus self-loops.
    #[default]
    Sparse,
    /// Fully connected.
    Dense,
}

impl fmt::Display for GraphVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphVariant::Sparse => "sparse",
            GraphVariant::Dense => "dense",
        })
    }
}

impl FromStr for GraphVariant {
    type Err = GsmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(GraphVariant::Sparse),
            "dense" => Ok(GraphVariant::Dense),
            other => Err(GsmnError::Config(format!("unknown graph variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextGraph {
    pub adjacency: Tensor,
    pub edge_weights: Tensor,
    pub variant: GraphVariant,
}

impl TextGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }
}

/// Polar pseudo-coordinates of a fully connected region graph.
/// `rho[i][j]` and `theta[i][j]` describe the vector from centre `i` to
/// centre `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualGraph {
    pub rho: Tensor,
    pub theta: Tensor,
}

impl VisualGraph {
    pub fn node_count(&self) -> usize {
        self.rho.rows()
    }

    pub fn polar(&self, i: usize, j: usize) -> (f64, f64) {
        (self.rho.at(i, j), self.theta.at(i, j))
    }
}

/// Row-softmax of `λ · U Uᵀ`.
pub fn text_similarity(tape: &Tape, u: Var, lambda: f64) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(GsmnError::Contract(format!("lambda must be positive, got {lambda}")));
    }
    let ut = tape.transpose(u)?;
    let dots = tape.matmul(u, ut)?;
    tape.softmax_rows(dots, lambda)
}

/// Row-normalised Hadamard product of similarity and adjacency.
pub fn text_edge_weights(tape: &Tape, similarity: Var, adjacency: &Tensor) -> Result<Var> {
    let mask = tape.constant(adjacency.clone());
    let masked = tape.mul(similarity, mask)?;
    Ok(tape.l2_normalize_rows(masked))
}

/// Binary adjacency with self-loops. Dependency edges are symmetric.
pub fn adjacency(record: &TextRecord, variant: GraphVariant) -> Result<Tensor> {
    let m = record.tokens.len();
    if m == 0 {
        return Err(GsmnError::Contract(format!("text {} has no tokens", record.id)));
    }
    let mut a = match variant {
        GraphVariant::Dense => Tensor::ones(&[m, m]),
        GraphVariant::Sparse => Tensor::identity(m),
    };
    for &(i, j) in &record.dep_edges {
        if i >= m || j >= m {
            return Err(GsmnError::Graph(format!(
                "text {}: edge ({i},{j}) out of range for {m} tokens",
                record.id
            )));
        }
        a.data_mut()[i * m + j] = 1.0;
        a.data_mut()[j * m + i] = 1.0;
    }
    Ok(a)
}

/// Records the edge weights for `record` on `tape` as a function of the
/// word features `u`.
pub fn text_graph_weights(
    tape: &Tape,
    record: &TextRecord,
    u: Var,
    variant: GraphVariant,
    lambda: f64,
) -> Result<(Tensor, Var)> {
    let m = record.tokens.len();
    let shape = tape.shape(u);
    if shape.len() != 2 || shape[0] != m {
        return Err(GsmnError::dim("build_text_graph", &shape, &[m]));
    }
    let a = adjacency(record, variant)?;
    let s = text_similarity(tape, u, lambda)?;
    let w = text_edge_weights(tape, s, &a)?;
    Ok((a, w))
}

/// Builds the textual graph from fixed word features.
pub fn build_text_graph(
    record: &TextRecord,
    u: &Tensor,
    variant: GraphVariant,
    lambda: f64,
) -> Result<TextGraph> {
    if !u.is_finite() {
        return Err(GsmnError::Numeric("non-finite word features".into()));
    }
    let tape = Tape::new();
    let uv = tape.constant(u.clone());
    let (adjacency, w) = text_graph_weights(&tape, record, uv, variant, lambda)?;
    Ok(TextGraph {
        adjacency,
        edge_weights: tape.value(w),
        variant,
    })
}

/// Polar coordinates between region centres; distances are divided by the
/// image diagonal. Coincident centres get `(0, 0)`.
pub fn build_visual_graph(record: &ImageRecord) -> Result<VisualGraph> {
    let n = record.regions.len();
    if n == 0 {
        return Err(GsmnError::Contract(format!("image {} has no regions", record.id)));
    }
    let diag = record.diagonal();
    if !(diag > 0.0) {
        return Err(GsmnError::Contract(format!("image {} has zero diagonal", record.id)));
    }
    let centers: Vec<(f64, f64)> = record.regions.iter().map(|r| r.center()).collect();
    let mut rho = vec![0.0; n * n];
    let mut theta = vec![0.0; n * n];
    for (i, ci) in centers.iter().enumerate() {
        for (j, cj) in centers.iter().enumerate() {
            let (dx, dy) = (cj.0 - ci.0, cj.1 - ci.1);
            if dx == 0.0 && dy == 0.0 {
                continue;
            }
            rho[i * n + j] = dx.hypot(dy) / diag;
            theta[i * n + j] = dy.atan2(dx);
        }
    }
    Ok(VisualGraph {
        rho: Tensor::matrix(n, n, rho)?,
        theta: Tensor::matrix(n, n, theta)?,
    })
}
