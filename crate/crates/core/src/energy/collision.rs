use std::sync::Arc;

use super::EnergyError;
use crate::mesh::{dot3, norm3, sub3, vertex_normals, NnIndex, TriMesh};
use crate::model::GarmentTemplate;
use crate::tensor::{Tape, Tensor, Var};

/// Matches for one layer against the body followed by all lower layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMatch {
    /// Garment vertices of this layer.
    pub vertices: Arc<[usize]>,
    /// Garment vertices of the lower layers, appended after the body
    /// vertices in the target list.
    pub lower: Arc<[usize]>,
    /// Per layer vertex, an index into `body ++ lower`.
    pub target: Arc<[usize]>,
    /// Target vertex normal per layer vertex; held constant.
    pub normals: Vec<[f64; 3]>,
}

/// Nearest-neighbour correspondences for every layer, inner to outer.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondences {
    pub layers: Vec<LayerMatch>,
    pub body_len: usize,
}

fn nearest(index: &NnIndex, q: [f64; 3]) -> (usize, f64) {
    let j = index.nearest(q);
    (j, norm3(sub3(q, index.points()[j])))
}

impl Correspondences {
    pub fn compute(
        garment: &GarmentTemplate,
        posed: &[[f64; 3]],
        body_mesh: &TriMesh,
        body: &[[f64; 3]],
        body_cell: f64,
    ) -> Result<Self, EnergyError> {
        if body.is_empty() {
            return Err(EnergyError::EmptyTargets(0));
        }
        if body.len() != body_mesh.vertex_count() {
            return Err(EnergyError::Size {
                what: "body positions",
                expected: body_mesh.vertex_count(),
                got: body.len(),
            });
        }
        let body_normals = vertex_normals(body_mesh, body).normals;
        let garment_normals = vertex_normals(garment.mesh(), posed).normals;
        let body_index = NnIndex::build(body, body_cell)?;
        let garment_cell = (2.0 * garment.mesh().mean_edge_length()).max(1e-6);
        let mut layers = Vec::with_capacity(garment.layer_count());
        let mut lower: Vec<usize> = Vec::new();
        for l in 0..garment.layer_count() {
            let vertices = garment.layer_vertices(l).clone();
            let lower_index = if lower.is_empty() {
                None
            } else {
                let pts: Vec<[f64; 3]> = lower.iter().map(|&i| posed[i]).collect();
                Some(NnIndex::build(&pts, garment_cell)?)
            };
            let mut target = Vec::with_capacity(vertices.len());
            let mut normals = Vec::with_capacity(vertices.len());
            for &v in vertices.iter() {
                let q = posed[v];
                let (jb, db) = nearest(&body_index, q);
                let lower_hit = lower_index
                    .as_ref()
                    .map(|ix| nearest(ix, q))
                    .filter(|&(_, dl)| dl < db);
                match lower_hit {
                    Some((jl, _)) => {
                        target.push(body.len() + jl);
                        normals.push(garment_normals[lower[jl]]);
                    }
                    None => {
                        target.push(jb);
                        normals.push(body_normals[jb]);
                    }
                }
            }
            layers.push(LayerMatch {
                vertices: vertices.clone(),
                lower: lower.clone().into(),
                target: target.into(),
                normals,
            });
            lower.extend(vertices.iter());
        }
        Ok(Self {
            layers,
            body_len: body.len(),
        })
    }

    fn target_point(&self, m: &LayerMatch, t: usize, posed: &[[f64; 3]], body: &[[f64; 3]]) -> [f64; 3] {
        if t < self.body_len {
            body[t]
        } else {
            posed[m.lower[t - self.body_len]]
        }
    }

    /// `d·n` per vertex, grouped by layer.
    pub fn signed_offsets(&self, posed: &[[f64; 3]], body: &[[f64; 3]]) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|m| {
                m.vertices
                    .iter()
                    .zip(m.target.iter())
                    .zip(&m.normals)
                    .map(|((&v, &t), n)| dot3(sub3(posed[v], self.target_point(m, t, posed, body)), *n))
                    .collect()
            })
            .collect()
    }

    /// `λ_c · Σ min(d·n − ε, 0)²` on the tape. Gradients reach both the
    /// layer vertex and, for cloth targets, the matched lower-layer vertex.
    pub fn energy_var(
        &self,
        tape: &mut Tape,
        posed: Var,
        body: &[[f64; 3]],
        epsilon: f64,
        lambda: f64,
    ) -> Result<Var, EnergyError> {
        let body_var = tape.constant(Tensor::from_vec3s(body))?;
        let mut total: Option<Var> = None;
        for m in &self.layers {
            let p = tape.gather_rows(posed, m.vertices.clone())?;
            let targets = if m.lower.is_empty() {
                body_var
            } else {
                let lower = tape.gather_rows(posed, m.lower.clone())?;
                tape.concat(&[body_var, lower])?
            };
            let q = tape.gather_rows(targets, m.target.clone())?;
            let d = tape.sub(p, q)?;
            let n = tape.constant(Tensor::from_vec3s(&m.normals))?;
            let dn = tape.dot_rows(d, n)?;
            let s = tape.add_scalar(dn, -epsilon)?;
            let c = tape.clamp_max_zero(s)?;
            let c2 = tape.square(c)?;
            let e = tape.sum(c2)?;
            total = Some(match total {
                Some(t) => tape.add(t, e)?,
                None => e,
            });
        }
        let total = match total {
            Some(t) => t,
            None => tape.constant(Tensor::scalar(0.0))?,
        };
        Ok(tape.scalar_mul(total, lambda)?)
    }
}
