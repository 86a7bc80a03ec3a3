use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::format::write_atomic;
use crate::mesh::{edge_lengths, obj_to_string, read_obj, TriMesh};

/// A garment or multi-layer outfit in rest pose, aligned with the rest body.
#[derive(Clone, Debug)]
pub struct GarmentTemplate {
    pub name: String,
    mesh: TriMesh,
    rest_edges: Vec<f64>,
    layers: Vec<usize>,
    layer_vertices: Vec<Arc<[usize]>>,
    fabric: Vec<f64>,
    pinned: Vec<bool>,
    pinned_indices: Arc<[usize]>,
    trainable_weights: bool,
}

impl GarmentTemplate {
    pub fn new(
        name: String,
        mesh: TriMesh,
        layers: Vec<usize>,
        fabric: Vec<f64>,
        pinned: Vec<bool>,
        trainable_weights: bool,
    ) -> Result<Self, ModelError> {
        let n = mesh.vertex_count();
        let mut problems = Vec::new();
        for (what, len) in [
            ("layer", layers.len()),
            ("fabric", fabric.len()),
            ("pinned", pinned.len()),
        ] {
            if len != n {
                problems.push(format!("{what} array has {len} entries, expected {n}"));
            }
        }
        let layer_count = layers.iter().max().map_or(0, |&m| m + 1);
        let mut layer_vertices = vec![Vec::new(); layer_count];
        for (i, &l) in layers.iter().enumerate() {
            layer_vertices[l].push(i);
        }
        if let Some(l) = layer_vertices.iter().position(|v| v.is_empty()) {
            problems.push(format!(
                "layer indices must be contiguous from 0; layer {l} has no vertices"
            ));
        }
        if let Some((i, f)) = fabric
            .iter()
            .enumerate()
            .find(|(_, f)| !(f.is_finite() && **f > 0.0))
        {
            problems.push(format!("fabric multiplier at vertex {i} is {f}, must be > 0"));
        }
        let degenerate = mesh.degenerate_faces(crate::mesh::MIN_REST_AREA);
        if !degenerate.is_empty() {
            problems.push(format!("degenerate faces: {degenerate:?}"));
        }
        if n == 0 {
            problems.push("garment has no vertices".into());
        }
        if !problems.is_empty() {
            return Err(ModelError::InvalidGarment(problems));
        }
        let rest_edges = edge_lengths(&mesh, mesh.positions());
        let pinned_indices = (0..n).filter(|&i| pinned[i]).collect();
        Ok(Self {
            name,
            mesh,
            rest_edges,
            layers,
            layer_vertices: layer_vertices.into_iter().map(Into::into).collect(),
            fabric,
            pinned,
            pinned_indices,
            trainable_weights,
        })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        self.mesh.positions()
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    /// `E_T`, in the order of [`TriMesh::edges`].
    pub fn rest_edges(&self) -> &[f64] {
        &self.rest_edges
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layer_vertices.len()
    }

    pub fn layer_vertices(&self, layer: usize) -> &Arc<[usize]> {
        &self.layer_vertices[layer]
    }

    pub fn fabric(&self) -> &[f64] {
        &self.fabric
    }

    /// Per-edge multiplier: mean of the two endpoint multipliers.
    pub fn edge_fabric(&self) -> Vec<f64> {
        self.mesh
            .edges()
            .iter()
            .map(|&[a, b]| 0.5 * (self.fabric[a] + self.fabric[b]))
            .collect()
    }

    /// Per-face multiplier: mean of the three corner multipliers.
    pub fn face_fabric(&self) -> Vec<f64> {
        self.mesh
            .faces()
            .iter()
            .map(|f| f.iter().map(|&v| self.fabric[v]).sum::<f64>() / 3.0)
            .collect()
    }

    pub fn pinned(&self) -> &[bool] {
        &self.pinned
    }

    pub fn pinned_indices(&self) -> &Arc<[usize]> {
        &self.pinned_indices
    }

    pub fn trainable_weights(&self) -> bool {
        self.trainable_weights
    }

    pub fn with_trainable_weights(mut self, on: bool) -> Self {
        self.trainable_weights = on;
        self
    }

    pub fn with_pinned(&self, pinned: Vec<bool>) -> Result<Self, ModelError> {
        Self::new(
            self.name.clone(),
            self.mesh.clone(),
            self.layers.clone(),
            self.fabric.clone(),
            pinned,
            self.trainable_weights,
        )
    }

    /// Hex SHA-256 over every field that affects training or inference.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"drape-garment-1");
        h.update((self.vertex_count() as u64).to_le_bytes());
        h.update((self.mesh.face_count() as u64).to_le_bytes());
        for p in self.positions() {
            for c in p {
                h.update(c.to_le_bytes());
            }
        }
        for f in self.mesh.faces() {
            for &v in f {
                h.update((v as u64).to_le_bytes());
            }
        }
        for &l in &self.layers {
            h.update((l as u64).to_le_bytes());
        }
        for f in &self.fabric {
            h.update(f.to_le_bytes());
        }
        for &p in &self.pinned {
            h.update([p as u8]);
        }
        h.update([self.trainable_weights as u8]);
        hex::encode(h.finalize())
    }
}

/// JSON sidecar describing a garment. The mesh lives in an OBJ file whose
/// path is resolved relative to the sidecar.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GarmentSidecar {
    pub name: String,
    pub mesh: PathBuf,
    /// Layer index per vertex; omitted means a single layer.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub fabric: Option<Fabric>,
    /// Indices of pinned vertices.
    #[serde(default)]
    pub pinned: Vec<usize>,
    #[serde(default)]
    pub trainable_weights: bool,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(untagged)]
pub enum Fabric {
    Uniform(f64),
    PerVertex(Vec<f64>),
}

pub fn load_garment(path: &Path) -> Result<GarmentTemplate, ModelError> {
    let text = std::fs::read_to_string(path)?;
    let side: GarmentSidecar = serde_json::from_str(&text)
        .map_err(|e| ModelError::Sidecar(format!("{}: {e}", path.display())))?;
    let obj = path.parent().unwrap_or(Path::new(".")).join(&side.mesh);
    let (positions, faces) = read_obj(&obj)?;
    let n = positions.len();
    let mesh = TriMesh::new(positions, faces)?;
    let fabric = match side.fabric {
        None => vec![1.0; n],
        Some(Fabric::Uniform(f)) => vec![f; n],
        Some(Fabric::PerVertex(v)) => v,
    };
    let mut pinned = vec![false; n];
    for &i in &side.pinned {
        if i >= n {
            return Err(ModelError::InvalidGarment(vec![format!(
                "pinned index {i} out of range for {n} vertices"
            )]));
        }
        pinned[i] = true;
    }
    GarmentTemplate::new(
        side.name,
        mesh,
        side.layers.unwrap_or_else(|| vec![0; n]),
        fabric,
        pinned,
        side.trainable_weights,
    )
}

/// Writes `<stem>.obj` next to the sidecar at `path`.
pub fn save_garment(path: &Path, garment: &GarmentTemplate) -> Result<(), ModelError> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "garment".into());
    let obj_name = PathBuf::from(format!("{stem}.obj"));
    let dir = path.parent().unwrap_or(Path::new("."));
    write_atomic(
        &dir.join(&obj_name),
        obj_to_string(garment.positions(), garment.mesh.faces()).as_bytes(),
    )?;
    let fabric = if garment.fabric.iter().all(|&f| f == garment.fabric[0]) {
        Fabric::Uniform(garment.fabric[0])
    } else {
        Fabric::PerVertex(garment.fabric.clone())
    };
    let side = GarmentSidecar {
        name: garment.name.clone(),
        mesh: obj_name,
        layers: Some(garment.layers.clone()),
        fabric: Some(fabric),
        pinned: garment.pinned_indices.to_vec(),
        trainable_weights: garment.trainable_weights,
    };
    let json = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    write_atomic(path, json.as_bytes())?;
    Ok(())
}
