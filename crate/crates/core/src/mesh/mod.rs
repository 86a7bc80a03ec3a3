//! Triangle-mesh topology, geometry and nearest-neighbour queries.
//!
//! Geometry comes in two flavours: plain functions over `[f64; 3]` slices
//! (used for metrics, body processing and oracles) and `*_var` methods that
//! record the same computation on a [`Tape`] for the training losses.

mod nn;
mod obj;

pub use nn::NnIndex;
pub use obj::{obj_to_string, parse_obj, read_obj, write_obj};

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{SparseMatrix, Tape, TensorError, Var};

/// Floor for the cross-product magnitude when normalizing face normals.
pub const AREA_EPS: f64 = 1e-10;
/// Faces with a smaller rest area are rejected at load time.
pub const MIN_REST_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("face {face} repeats a vertex: {indices:?}")]
    RepeatedVertex { face: usize, indices: [usize; 3] },
    #[error("degenerate faces (area <= {min_area:e} m²): {faces:?}")]
    Degenerate { faces: Vec<usize>, min_area: f64 },
    #[error("OBJ line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("nearest-neighbour index needs at least one target point")]
    EmptyTargets,
    #[error("grid cell size must be positive and finite, got {0}")]
    InvalidCellSize(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Triangle mesh: rest positions plus derived connectivity.
///
/// Open and non-manifold meshes are allowed. Edges are unique with the lower
/// vertex index first; `face_adjacency` lists each pair of distinct faces that
/// share an edge once.
#[derive(Clone, Debug)]
pub struct TriMesh {
    positions: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    face_adjacency: Vec<[usize; 2]>,
    gathers: Arc<Gathers>,
}

#[derive(Debug)]
struct Gathers {
    edge_a: Arc<[usize]>,
    edge_b: Arc<[usize]>,
    face_v: [Arc<[usize]>; 3],
    laplacian: Arc<SparseMatrix>,
    neighbors: Vec<Vec<usize>>,
}

impl TriMesh {
    pub fn new(positions: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let n = positions.len();
        for (fi, f) in faces.iter().enumerate() {
            for &i in f {
                if i >= n {
                    return Err(MeshError::IndexOutOfRange {
                        face: fi,
                        index: i,
                        count: n,
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::RepeatedVertex {
                    face: fi,
                    indices: *f,
                });
            }
        }
        let mut edge_faces: HashMap<[usize; 2], Vec<usize>> = HashMap::new();
        for (fi, f) in faces.iter().enumerate() {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edge_faces.entry([a.min(b), a.max(b)]).or_default().push(fi);
            }
        }
        let mut edges: Vec<[usize; 2]> = edge_faces.keys().copied().collect();
        edges.sort_unstable();
        let mut face_adjacency = Vec::new();
        for e in &edges {
            let fs = &edge_faces[e];
            for i in 0..fs.len() {
                for j in i + 1..fs.len() {
                    let (a, b) = (fs[i].min(fs[j]), fs[i].max(fs[j]));
                    if a != b {
                        face_adjacency.push([a, b]);
                    }
                }
            }
        }
        face_adjacency.sort_unstable();
        face_adjacency.dedup();

        let mut neighbors = vec![Vec::new(); n];
        for &[a, b] in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        let laplacian = Arc::new(face_laplacian(faces.len(), &face_adjacency));
        let gathers = Gathers {
            edge_a: edges.iter().map(|e| e[0]).collect(),
            edge_b: edges.iter().map(|e| e[1]).collect(),
            face_v: [0, 1, 2].map(|c| faces.iter().map(|f| f[c]).collect::<Arc<[usize]>>()),
            laplacian,
            neighbors,
        };
        Ok(Self {
            positions,
            faces,
            edges,
            face_adjacency,
            gathers: Arc::new(gathers),
        })
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn face_adjacency(&self) -> &[[usize; 2]] {
        &self.face_adjacency
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Sorted one-ring neighbours of each vertex.
    pub fn vertex_neighbors(&self) -> &[Vec<usize>] {
        &self.gathers.neighbors
    }

    /// Uniform face-adjacency Laplacian, `N_F × N_F`.
    pub fn face_laplacian(&self) -> &Arc<SparseMatrix> {
        &self.gathers.laplacian
    }

    /// Same topology, new rest positions.
    pub fn with_positions(&self, positions: Vec<[f64; 3]>) -> Self {
        assert_eq!(positions.len(), self.positions.len());
        Self {
            positions,
            faces: self.faces.clone(),
            edges: self.edges.clone(),
            face_adjacency: self.face_adjacency.clone(),
            gathers: self.gathers.clone(),
        }
    }

    pub fn degenerate_faces(&self, min_area: f64) -> Vec<usize> {
        face_areas(&self.faces, &self.positions)
            .iter()
            .enumerate()
            .filter(|(_, &a)| a <= min_area)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn check_nondegenerate(&self) -> Result<(), MeshError> {
        let faces = self.degenerate_faces(MIN_REST_AREA);
        if faces.is_empty() {
            Ok(())
        } else {
            Err(MeshError::Degenerate {
                faces,
                min_area: MIN_REST_AREA,
            })
        }
    }

    pub fn mean_edge_length(&self) -> f64 {
        let e = edge_lengths(self, &self.positions);
        if e.is_empty() {
            0.0
        } else {
            e.iter().sum::<f64>() / e.len() as f64
        }
    }

    /// Edge lengths on the tape: `[N, 3] -> [N_E]`.
    pub fn edge_lengths_var(&self, tape: &mut Tape, positions: Var) -> Result<Var, TensorError> {
        let a = tape.gather_rows(positions, self.gathers.edge_a.clone())?;
        let b = tape.gather_rows(positions, self.gathers.edge_b.clone())?;
        let d = tape.sub(a, b)?;
        tape.norm_rows(d)
    }

    /// Unit face normals on the tape: `[N, 3] -> [N_F, 3]`.
    pub fn face_normals_var(&self, tape: &mut Tape, positions: Var) -> Result<Var, TensorError> {
        let [i0, i1, i2] = &self.gathers.face_v;
        let p0 = tape.gather_rows(positions, i0.clone())?;
        let p1 = tape.gather_rows(positions, i1.clone())?;
        let p2 = tape.gather_rows(positions, i2.clone())?;
        let e1 = tape.sub(p1, p0)?;
        let e2 = tape.sub(p2, p0)?;
        let c = tape.cross_rows(e1, e2)?;
        tape.normalize_rows(c, AREA_EPS)
    }

    /// `Δ(N)` over face adjacency on the tape: `[N_F, 3] -> [N_F, 3]`.
    pub fn normal_laplacian_var(&self, tape: &mut Tape, normals: Var) -> Result<Var, TensorError> {
        tape.sparse_matmul(self.gathers.laplacian.clone(), normals)
    }
}

fn face_laplacian(face_count: usize, adjacency: &[[usize; 2]]) -> SparseMatrix {
    let mut degree = vec![0usize; face_count];
    for &[a, b] in adjacency {
        degree[a] += 1;
        degree[b] += 1;
    }
    let mut trip = Vec::with_capacity(2 * adjacency.len() + face_count);
    for &[a, b] in adjacency {
        trip.push((a, b, 1.0 / degree[a] as f64));
        trip.push((b, a, 1.0 / degree[b] as f64));
    }
    for (f, &d) in degree.iter().enumerate() {
        if d > 0 {
            trip.push((f, f, -1.0));
        }
    }
    SparseMatrix::from_triplets(face_count, face_count, &trip)
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub fn edge_lengths(mesh: &TriMesh, positions: &[[f64; 3]]) -> Vec<f64> {
    mesh.edges
        .iter()
        .map(|&[a, b]| norm3(sub3(positions[a], positions[b])))
        .collect()
}

pub fn face_areas(faces: &[[usize; 3]], positions: &[[f64; 3]]) -> Vec<f64> {
    faces
        .iter()
        .map(|f| {
            let c = cross3(
                sub3(positions[f[1]], positions[f[0]]),
                sub3(positions[f[2]], positions[f[0]]),
            );
            0.5 * norm3(c)
        })
        .collect()
}

/// Unit normals, oriented by face winding (counter-clockwise = front).
pub fn face_normals(mesh: &TriMesh, positions: &[[f64; 3]]) -> Vec<[f64; 3]> {
    mesh.faces
        .iter()
        .map(|f| {
            let c = cross3(
                sub3(positions[f[1]], positions[f[0]]),
                sub3(positions[f[2]], positions[f[0]]),
            );
            let len = norm3(c).max(AREA_EPS);
            [c[0] / len, c[1] / len, c[2] / len]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct VertexNormals {
    pub normals: Vec<[f64; 3]>,
    /// Vertices without any incident face; their normal is zero.
    pub isolated: Vec<usize>,
}

/// Area-weighted average of incident face normals, normalized.
pub fn vertex_normals(mesh: &TriMesh, positions: &[[f64; 3]]) -> VertexNormals {
    let mut acc = vec![[0.0; 3]; positions.len()];
    for f in &mesh.faces {
        // |cross| is twice the area, so the raw cross product is already
        // area-weighted.
        let c = cross3(
            sub3(positions[f[1]], positions[f[0]]),
            sub3(positions[f[2]], positions[f[0]]),
        );
        for &i in f {
            for k in 0..3 {
                acc[i][k] += c[k];
            }
        }
    }
    let mut isolated = Vec::new();
    let normals = acc
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let len = norm3(c);
            if len > 0.0 {
                [c[0] / len, c[1] / len, c[2] / len]
            } else {
                isolated.push(i);
                [0.0; 3]
            }
        })
        .collect();
    VertexNormals { normals, isolated }
}

/// `Δ(N)_f = (1/|adj f|) Σ_{g ∈ adj f} (N_g − N_f)`; zero for faces without
/// neighbours.
pub fn normal_laplacian(mesh: &TriMesh, normals: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let flat: Vec<f64> = normals.iter().flatten().copied().collect();
    mesh.gathers
        .laplacian
        .apply(&flat, 3)
        .chunks_exact(3)
        .map(|r| [r[0], r[1], r[2]])
        .collect()
}

/// Per-vertex share of incident triangle areas (one third of each).
pub fn vertex_areas(mesh: &TriMesh, positions: &[[f64; 3]]) -> Vec<f64> {
    let mut out = vec![0.0; positions.len()];
    for (f, a) in mesh.faces.iter().zip(face_areas(&mesh.faces, positions)) {
        for &i in f {
            out[i] += a / 3.0;
        }
    }
    out
}
