use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BodyError, BodyModel};
use crate::format::{write_atomic, ContainerReader, ContainerWriter};
use crate::mesh::TriMesh;
use crate::rig::{BlendWeights, Skeleton};

pub const BODY_MAGIC: &[u8; 8] = b"DRAPEBDY";
const BODY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    name: String,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "N_F")]
    n_f: usize,
    #[serde(rename = "S")]
    s: usize,
    joint_names: Vec<String>,
    /// Parent index per joint, `-1` for the root.
    parents: Vec<i64>,
    #[serde(default)]
    has_regressor: bool,
}

/// Serializes with every array stored as little-endian f32 (faces as u32).
pub fn body_to_bytes(body: &BodyModel) -> Vec<u8> {
    let sk = &body.skeleton;
    let header = Header {
        version: BODY_VERSION,
        name: body.name.clone(),
        k: sk.len(),
        n: body.mesh.vertex_count(),
        n_f: body.mesh.face_count(),
        s: body.blendshapes.len(),
        joint_names: sk.names().to_vec(),
        parents: sk
            .parents()
            .iter()
            .map(|p| p.map_or(-1, |p| p as i64))
            .collect(),
        has_regressor: body.regressor.is_some(),
    };
    let mut w = ContainerWriter::new(BODY_MAGIC, &header);
    w.f32s(body.mesh.positions().iter().flatten().copied())
        .u32s(body.mesh.faces().iter().flatten().map(|&i| i as u32))
        .f32s(sk.joints().iter().flatten().copied())
        .f32s(body.weights.data().iter().copied());
    for b in &body.blendshapes {
        w.f32s(b.iter().flatten().copied());
    }
    if let Some(r) = &body.regressor {
        w.f32s(r.iter().copied());
    }
    w.finish()
}

fn vec3s(flat: Vec<f64>) -> Vec<[f64; 3]> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub fn body_from_bytes(bytes: &[u8]) -> Result<BodyModel, BodyError> {
    let (h, mut r): (Header, _) = ContainerReader::open(bytes, BODY_MAGIC)?;
    let mut problems = Vec::new();
    if h.version != BODY_VERSION {
        problems.push(format!(
            "unsupported version {} (expected {BODY_VERSION})",
            h.version
        ));
    }
    if h.joint_names.len() != h.k || h.parents.len() != h.k {
        problems.push(format!(
            "header declares K = {} but lists {} joint names and {} parents",
            h.k,
            h.joint_names.len(),
            h.parents.len()
        ));
    }
    if !problems.is_empty() {
        return Err(BodyError::Invalid(problems));
    }
    let verts = vec3s(r.f32s(3 * h.n, "vertex block")?);
    let faces_raw = r.u32s(3 * h.n_f, "face block")?;
    let joints = vec3s(r.f32s(3 * h.k, "rest joint block")?);
    let weights = r.f32s(h.n * h.k, "blend weight block")?;
    let mut blendshapes = Vec::with_capacity(h.s);
    for s in 0..h.s {
        blendshapes.push(vec3s(r.f32s(3 * h.n, &format!("blend shape {s} block"))?));
    }
    let regressor = if h.has_regressor {
        Some(r.f32s(h.k * h.n, "joint regressor block")?)
    } else {
        None
    };
    r.finish()?;

    let mut parents = Vec::with_capacity(h.k);
    for (j, &p) in h.parents.iter().enumerate() {
        match p {
            -1 => parents.push(None),
            p if p >= 0 && (p as usize) < h.k => parents.push(Some(p as usize)),
            p => problems.push(format!("joint {j} has invalid parent {p}")),
        }
    }
    let skeleton = match Skeleton::new(h.joint_names, parents, joints) {
        Ok(s) if problems.is_empty() => Some(s),
        Ok(_) => None,
        Err(e) => {
            problems.push(format!("skeleton: {e}"));
            None
        }
    };
    let faces: Vec<[usize; 3]> = faces_raw
        .chunks_exact(3)
        .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
        .collect();
    let mesh = match TriMesh::new(verts, faces) {
        Ok(m) => Some(m),
        Err(e) => {
            problems.push(format!("mesh: {e}"));
            None
        }
    };
    problems.extend(BlendWeights::violations(h.n, h.k, &weights));
    let (Some(mesh), Some(skeleton), true) = (mesh, skeleton, problems.is_empty()) else {
        return Err(BodyError::Invalid(problems));
    };
    let weights = BlendWeights::new(h.n, h.k, weights)?;
    BodyModel::new(h.name, mesh, skeleton, weights, blendshapes, regressor)
}

pub fn save_body(path: &Path, body: &BodyModel) -> Result<(), BodyError> {
    write_atomic(path, &body_to_bytes(body))?;
    Ok(())
}

pub fn load_body(path: &Path) -> Result<BodyModel, BodyError> {
    body_from_bytes(&std::fs::read(path)?)
}
