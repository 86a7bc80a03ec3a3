//! Procedural outfits for the procedural humanoid: open tubes stacked into
//! layers (a flared skirt under a vest by default).

use crate::mesh::TriMesh;
use crate::model::{GarmentTemplate, ModelError};

/// One open tube, rings ordered bottom to top. Radius varies linearly.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeSpec {
    pub z_bottom: f64,
    pub z_top: f64,
    pub r_bottom: f64,
    pub r_top: f64,
    pub rings: usize,
    /// Pin the top ring (a waistband).
    pub pin_top: bool,
    pub fabric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutfitSpec {
    pub name: String,
    /// Vertices per ring.
    pub around: usize,
    /// Layers from inner to outer.
    pub layers: Vec<TubeSpec>,
    pub trainable_weights: bool,
}

impl TubeSpec {
    pub fn skirt(rings: usize) -> Self {
        Self {
            z_bottom: 0.62,
            z_top: 1.06,
            r_bottom: 0.21,
            r_top: 0.152,
            rings,
            pin_top: true,
            fabric: 1.0,
        }
    }

    pub fn vest(rings: usize) -> Self {
        Self {
            z_bottom: 0.98,
            z_top: 1.34,
            r_bottom: 0.175,
            r_top: 0.175,
            rings,
            pin_top: false,
            fabric: 1.0,
        }
    }
}

impl Default for OutfitSpec {
    /// Skirt and vest, 2016 vertices at roughly 2 cm spacing.
    fn default() -> Self {
        Self {
            name: "skirt_vest".into(),
            around: 48,
            layers: vec![TubeSpec::skirt(23), TubeSpec::vest(19)],
            trainable_weights: false,
        }
    }
}

impl OutfitSpec {
    /// The skirt layer alone.
    pub fn skirt() -> Self {
        Self {
            name: "skirt".into(),
            around: 48,
            layers: vec![TubeSpec::skirt(23)],
            trainable_weights: false,
        }
    }

    /// Same outfit at about 12k vertices and 24k triangles.
    pub fn bench() -> Self {
        Self {
            name: "skirt_vest_dense".into(),
            around: 144,
            layers: vec![TubeSpec::skirt(46), TubeSpec::vest(38)],
            trainable_weights: false,
        }
    }

    /// Two coarse layers, 48 vertices in total.
    pub fn tiny() -> Self {
        let mut skirt = TubeSpec::skirt(3);
        skirt.z_bottom = 0.86;
        skirt.r_bottom = 0.17;
        let mut vest = TubeSpec::vest(3);
        vest.z_top = 1.16;
        Self {
            name: "tiny".into(),
            around: 8,
            layers: vec![skirt, vest],
            trainable_weights: false,
        }
    }

    /// The default outfit with the vest's lower half pushed inside the
    /// skirt, so the layers start out interpenetrating.
    pub fn interpenetrating() -> Self {
        let mut s = Self::default();
        s.name = "skirt_vest_crossed".into();
        s.layers[1].r_bottom = 0.146;
        s.layers[1].r_top = 0.19;
        s
    }
}

/// Vertices and outward-facing triangles of an open tube.
pub fn tube(spec: &TubeSpec, around: usize, offset: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let rings = spec.rings.max(2);
    let mut verts = Vec::with_capacity(rings * around);
    for j in 0..rings {
        let s = j as f64 / (rings - 1) as f64;
        let z = spec.z_bottom + s * (spec.z_top - spec.z_bottom);
        let r = spec.r_bottom + s * (spec.r_top - spec.r_bottom);
        // Alternate rings are rotated half a step for near-equilateral faces.
        let shift = if j % 2 == 1 { 0.5 } else { 0.0 };
        for i in 0..around {
            let a = std::f64::consts::TAU * (i as f64 + shift) / around as f64;
            verts.push([r * a.cos(), r * a.sin(), z]);
        }
    }
    let id = |j: usize, i: usize| offset + j * around + i % around;
    let mut faces = Vec::with_capacity(2 * (rings - 1) * around);
    for j in 0..rings - 1 {
        for i in 0..around {
            if j % 2 == 0 {
                faces.push([id(j, i), id(j, i + 1), id(j + 1, i)]);
                faces.push([id(j, i + 1), id(j + 1, i + 1), id(j + 1, i)]);
            } else {
                faces.push([id(j, i), id(j, i + 1), id(j + 1, i + 1)]);
                faces.push([id(j, i), id(j + 1, i + 1), id(j + 1, i)]);
            }
        }
    }
    (verts, faces)
}

pub fn outfit(spec: &OutfitSpec) -> Result<GarmentTemplate, ModelError> {
    let mut positions = Vec::new();
    let mut faces = Vec::new();
    let mut layers = Vec::new();
    let mut fabric = Vec::new();
    let mut pinned = Vec::new();
    for (l, t) in spec.layers.iter().enumerate() {
        let (v, f) = tube(t, spec.around, positions.len());
        let top = v.len() - spec.around;
        for i in 0..v.len() {
            layers.push(l);
            fabric.push(t.fabric);
            pinned.push(t.pin_top && i >= top);
        }
        positions.extend(v);
        faces.extend(f);
    }
    GarmentTemplate::new(
        spec.name.clone(),
        TriMesh::new(positions, faces)?,
        layers,
        fabric,
        pinned,
        spec.trainable_weights,
    )
}
