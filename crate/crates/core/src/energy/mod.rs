//! The physics loss over a posed outfit and the matching metrics.
//!
//! `L = λ_e Σ f_e (E − E_T)² + λ_b Σ f_f ‖Δ(N)_f‖² + λ_c Σ min(d·n − ε, 0)²
//!    + Σ k_i z_i + λ_pin Σ b_i ‖dt_i‖²`

mod collision;

pub use collision::{Correspondences, LayerMatch};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::BodyModel;
use crate::mesh::{
    dot3, edge_lengths, face_normals, normal_laplacian, vertex_areas, MeshError, TriMesh,
};
use crate::model::GarmentTemplate;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("energy weight {name} = {value} must be finite and non-negative")]
    Weight { name: &'static str, value: f64 },
    #[error("collision targets are empty for layer {0}")]
    EmptyTargets(usize),
    #[error("{what} has {got} rows, expected {expected}")]
    Size {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyWeights {
    pub edge: f64,
    pub bend: f64,
    pub collision: f64,
    pub epsilon: f64,
    pub pin: f64,
    pub gravity: bool,
    /// Areal density in kg/m².
    pub density: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            edge: 15.0,
            bend: 2e-4,
            collision: 25.0,
            epsilon: 0.004,
            pin: 10.0,
            gravity: true,
            density: 0.15,
        }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<(), EnergyError> {
        for (name, value) in [
            ("edge", self.edge),
            ("bend", self.bend),
            ("collision", self.collision),
            ("epsilon", self.epsilon),
            ("pin", self.pin),
            ("density", self.density),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(EnergyError::Weight { name, value });
            }
        }
        Ok(())
    }
}

/// Per-term values of the loss plus evaluation metrics. Aggregates are
/// means over samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub total: f64,
    pub edge: f64,
    pub bend: f64,
    pub collision: f64,
    pub gravity: f64,
    pub pin: f64,
    /// Mean |E − E_T| in millimetres.
    pub edge_mm: f64,
    /// Fraction of garment vertices with `d·n < 0`.
    pub collision_ratio: f64,
    pub per_layer_collision: Vec<f64>,
    pub mean_height: f64,
    pub samples: usize,
}

impl EnergyReport {
    pub fn terms_sum(&self) -> f64 {
        self.edge + self.bend + self.collision + self.gravity + self.pin
    }

    /// Sample-weighted mean of reports.
    pub fn mean(reports: &[EnergyReport]) -> EnergyReport {
        let n: usize = reports.iter().map(|r| r.samples).sum();
        if n == 0 {
            return EnergyReport::default();
        }
        let layers = reports
            .iter()
            .map(|r| r.per_layer_collision.len())
            .max()
            .unwrap_or(0);
        let mut out = EnergyReport {
            per_layer_collision: vec![0.0; layers],
            samples: n,
            ..Default::default()
        };
        for r in reports {
            let w = r.samples as f64 / n as f64;
            out.total += w * r.total;
            out.edge += w * r.edge;
            out.bend += w * r.bend;
            out.collision += w * r.collision;
            out.gravity += w * r.gravity;
            out.pin += w * r.pin;
            out.edge_mm += w * r.edge_mm;
            out.collision_ratio += w * r.collision_ratio;
            out.mean_height += w * r.mean_height;
            for (o, v) in out.per_layer_collision.iter_mut().zip(&r.per_layer_collision) {
                *o += w * v;
            }
        }
        out
    }
}

/// `λ_e · Σ_e f_e (E_e − E_T,e)²`.
pub fn edge_energy(e: &[f64], e_t: &[f64], fabric: &[f64], lambda: f64) -> f64 {
    lambda
        * e.iter()
            .zip(e_t)
            .zip(fabric)
            .map(|((a, b), f)| f * (a - b) * (a - b))
            .sum::<f64>()
}

/// `λ_b · Σ_f f_f ‖Δ(N)_f‖²` for unit face normals.
pub fn bend_energy(mesh: &TriMesh, normals: &[[f64; 3]], fabric: &[f64], lambda: f64) -> f64 {
    lambda
        * normal_laplacian(mesh, normals)
            .iter()
            .zip(fabric)
            .map(|(l, f)| f * dot3(*l, *l))
            .sum::<f64>()
}

/// `λ_c · Σ min(d·n − ε, 0)²` over signed offsets `d·n`.
pub fn collision_energy(signed: &[f64], epsilon: f64, lambda: f64) -> f64 {
    lambda
        * signed
            .iter()
            .map(|&s| {
                let m = (s - epsilon).min(0.0);
                m * m
            })
            .sum::<f64>()
}

/// `Σ_i k_i z_i`.
pub fn gravity_energy(positions: &[[f64; 3]], k: &[f64]) -> f64 {
    positions.iter().zip(k).map(|(p, k)| k * p[2]).sum()
}

/// `λ_pin · Σ_i b_i ‖dt_i‖²`.
pub fn pin_energy(offsets: &[[f64; 3]], pinned: &[bool], lambda: f64) -> f64 {
    lambda
        * offsets
            .iter()
            .zip(pinned)
            .filter(|(_, &b)| b)
            .map(|(d, _)| dot3(*d, *d))
            .sum::<f64>()
}

/// `k_i = ρ · A_i · g` with `A_i` the rest vertex area.
pub fn gravity_coefficients(mesh: &TriMesh, density: f64) -> Vec<f64> {
    vertex_areas(mesh, mesh.positions())
        .into_iter()
        .map(|a| density * a * GRAVITY)
        .collect()
}

/// Tape variables of each loss term for one sample.
#[derive(Clone, Copy, Debug)]
pub struct TermVars {
    pub total: Var,
    pub edge: Var,
    pub bend: Var,
    pub collision: Var,
    pub gravity: Var,
    pub pin: Var,
}

/// What one sample is evaluated against: the body surface (posed, or
/// reshaped at rest) and optionally a substitute for `E_T`.
#[derive(Clone, Copy, Debug)]
pub struct Target<'a> {
    pub body: &'a [[f64; 3]],
    pub rest_edges: Option<&'a [f64]>,
}

/// Constants shared by every sample of one garment on one body.
#[derive(Clone, Debug)]
pub struct Scene {
    garment: Arc<GarmentTemplate>,
    body_mesh: TriMesh,
    body_cell: f64,
    weights: EnergyWeights,
    edge_fabric: Vec<f64>,
    face_fabric: Vec<f64>,
    gravity_k: Vec<f64>,
    rest_edges_t: Arc<Tensor>,
    edge_fabric_t: Arc<Tensor>,
    face_fabric_t: Arc<Tensor>,
    gravity_t: Arc<Tensor>,
}

impl Scene {
    pub fn new(
        garment: Arc<GarmentTemplate>,
        body: &BodyModel,
        weights: EnergyWeights,
    ) -> Result<Self, EnergyError> {
        weights.validate()?;
        let edge_fabric = garment.edge_fabric();
        let face_fabric = garment.face_fabric();
        let gravity_k = if weights.gravity {
            gravity_coefficients(garment.mesh(), weights.density)
        } else {
            vec![0.0; garment.vertex_count()]
        };
        let face3: Vec<f64> = face_fabric.iter().flat_map(|&f| [f, f, f]).collect();
        let grav3: Vec<f64> = gravity_k.iter().flat_map(|&k| [0.0, 0.0, k]).collect();
        Ok(Self {
            rest_edges_t: Arc::new(Tensor::vector(garment.rest_edges().to_vec())),
            edge_fabric_t: Arc::new(Tensor::vector(edge_fabric.clone())),
            face_fabric_t: Arc::new(Tensor::matrix(face_fabric.len(), 3, face3)?),
            gravity_t: Arc::new(Tensor::matrix(gravity_k.len(), 3, grav3)?),
            body_mesh: body.mesh.clone(),
            body_cell: body.nn_cell_size(),
            garment,
            weights,
            edge_fabric,
            face_fabric,
            gravity_k,
        })
    }

    pub fn garment(&self) -> &Arc<GarmentTemplate> {
        &self.garment
    }

    pub fn weights(&self) -> &EnergyWeights {
        &self.weights
    }

    pub fn gravity_k(&self) -> &[f64] {
        &self.gravity_k
    }

    pub fn body_mesh(&self) -> &TriMesh {
        &self.body_mesh
    }

    /// Nearest-neighbour correspondences for the current prediction.
    pub fn correspondences(
        &self,
        posed: &[[f64; 3]],
        target: Target<'_>,
    ) -> Result<Correspondences, EnergyError> {
        Correspondences::compute(
            &self.garment,
            posed,
            &self.body_mesh,
            target.body,
            self.body_cell,
        )
    }

    /// Every loss term on the tape. Correspondences are recomputed from the
    /// posed values unless supplied.
    pub fn loss_var(
        &self,
        tape: &mut Tape,
        posed: Var,
        offsets: Var,
        target: Target<'_>,
        frozen: Option<&Correspondences>,
    ) -> Result<TermVars, EnergyError> {
        let w = &self.weights;
        let mesh = self.garment.mesh();
        let n = self.garment.vertex_count();
        if tape.value(posed).shape() != [n, 3] {
            return Err(EnergyError::Size {
                what: "posed outfit",
                expected: n,
                got: tape.value(posed).shape()[0],
            });
        }

        let e = mesh.edge_lengths_var(tape, posed)?;
        let e_t = match target.rest_edges {
            Some(r) => tape.constant(Tensor::vector(r.to_vec()))?,
            None => tape.shared_leaf(self.rest_edges_t.clone(), false)?,
        };
        let de = tape.sub(e, e_t)?;
        let de2 = tape.square(de)?;
        let fe = tape.shared_leaf(self.edge_fabric_t.clone(), false)?;
        let de2 = tape.mul(de2, fe)?;
        let edge = tape.sum(de2)?;
        let edge = tape.scalar_mul(edge, w.edge)?;

        let normals = mesh.face_normals_var(tape, posed)?;
        let lap = mesh.normal_laplacian_var(tape, normals)?;
        let lap2 = tape.square(lap)?;
        let ff = tape.shared_leaf(self.face_fabric_t.clone(), false)?;
        let lap2 = tape.mul(lap2, ff)?;
        let bend = tape.sum(lap2)?;
        let bend = tape.scalar_mul(bend, w.bend)?;

        let owned;
        let corr = match frozen {
            Some(c) => c,
            None => {
                owned = self.correspondences(&tape.value(posed).to_vec3s(), target)?;
                &owned
            }
        };
        let collision = corr.energy_var(tape, posed, target.body, w.epsilon, w.collision)?;

        let g = tape.shared_leaf(self.gravity_t.clone(), false)?;
        let gz = tape.dot_rows(posed, g)?;
        let gravity = tape.sum(gz)?;

        let pinned = self.garment.pinned_indices();
        let pin = if pinned.is_empty() {
            tape.constant(Tensor::scalar(0.0))?
        } else {
            let d = tape.gather_rows(offsets, pinned.clone())?;
            let d2 = tape.square(d)?;
            let s = tape.sum(d2)?;
            tape.scalar_mul(s, w.pin)?
        };

        let a = tape.add(edge, bend)?;
        let b = tape.add(a, collision)?;
        let c = tape.add(b, gravity)?;
        let total = tape.add(c, pin)?;
        Ok(TermVars {
            total,
            edge,
            bend,
            collision,
            gravity,
            pin,
        })
    }

    /// All terms and metrics without a tape.
    pub fn report(
        &self,
        posed: &[[f64; 3]],
        offsets: &[[f64; 3]],
        target: Target<'_>,
    ) -> Result<EnergyReport, EnergyError> {
        let corr = self.correspondences(posed, target)?;
        self.report_with(posed, offsets, target, &corr)
    }

    pub fn report_with(
        &self,
        posed: &[[f64; 3]],
        offsets: &[[f64; 3]],
        target: Target<'_>,
        corr: &Correspondences,
    ) -> Result<EnergyReport, EnergyError> {
        let w = &self.weights;
        let mesh = self.garment.mesh();
        let n = self.garment.vertex_count();
        for (what, len) in [("posed outfit", posed.len()), ("offsets", offsets.len())] {
            if len != n {
                return Err(EnergyError::Size {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
        let e = edge_lengths(mesh, posed);
        let e_t = target.rest_edges.unwrap_or(self.garment.rest_edges());
        let edge = edge_energy(&e, e_t, &self.edge_fabric, w.edge);
        let bend = bend_energy(mesh, &face_normals(mesh, posed), &self.face_fabric, w.bend);
        let signed = corr.signed_offsets(posed, target.body);
        let collision = signed
            .iter()
            .map(|s| collision_energy(s, w.epsilon, w.collision))
            .sum::<f64>();
        let gravity = gravity_energy(posed, &self.gravity_k);
        let pin = pin_energy(offsets, self.garment.pinned(), w.pin);
        let edge_mm = if e.is_empty() {
            0.0
        } else {
            1e3 * e.iter().zip(e_t).map(|(a, b)| (a - b).abs()).sum::<f64>() / e.len() as f64
        };
        let per_layer: Vec<f64> = signed
            .iter()
            .map(|s| s.iter().filter(|&&v| v < 0.0).count() as f64 / s.len() as f64)
            .collect();
        let hits: usize = signed
            .iter()
            .map(|s| s.iter().filter(|&&v| v < 0.0).count())
            .sum();
        Ok(EnergyReport {
            total: edge + bend + collision + gravity + pin,
            edge,
            bend,
            collision,
            gravity,
            pin,
            edge_mm,
            collision_ratio: hits as f64 / n as f64,
            per_layer_collision: per_layer,
            mean_height: posed.iter().map(|p| p[2]).sum::<f64>() / n as f64,
            samples: 1,
        })
    }
}
