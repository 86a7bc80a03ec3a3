use std::f64::consts::{FRAC_PI_2, PI};

use super::{BodyError, BodyModel};
use crate::mesh::{cross3, dot3, norm3, sub3, TriMesh};
use crate::rig::{BlendWeights, Skeleton};

/// Joint names of the procedural humanoid, in index order.
pub const HUMANOID_JOINTS: [&str; 12] = [
    "root",
    "spine",
    "chest",
    "head",
    "l_hip",
    "l_knee",
    "r_hip",
    "r_knee",
    "l_shoulder",
    "l_elbow",
    "r_shoulder",
    "r_elbow",
];
const PARENTS: [Option<usize>; 12] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(0),
    Some(6),
    Some(2),
    Some(8),
    Some(2),
    Some(10),
];

/// Dimensions of the capsule humanoid, in metres, z up, arms along ±x.
///
/// Capsule extents are given as the centres of their end hemispheres.
#[derive(Clone, Debug, PartialEq)]
pub struct HumanoidSpec {
    /// Vertices around the torso; limbs scale this by their radius.
    pub segments: usize,
    pub torso_radius: f64,
    pub torso_bottom: f64,
    pub torso_top: f64,
    pub spine_height: f64,
    pub chest_height: f64,
    pub head_radius: f64,
    pub head_bottom: f64,
    pub head_top: f64,
    pub neck_height: f64,
    pub hip_offset: f64,
    pub leg_radius: f64,
    pub leg_top: f64,
    pub knee_height: f64,
    pub leg_bottom: f64,
    pub arm_height: f64,
    pub arm_radius: f64,
    pub arm_start: f64,
    pub elbow_offset: f64,
    pub arm_end: f64,
    /// Half-width of the weight blend band around each interior joint.
    pub blend_band: f64,
    /// Minimum clearance between any two capsules.
    pub clearance: f64,
}

impl Default for HumanoidSpec {
    fn default() -> Self {
        Self {
            segments: 32,
            torso_radius: 0.14,
            torso_bottom: 0.98,
            torso_top: 1.38,
            spine_height: 1.10,
            chest_height: 1.26,
            head_radius: 0.09,
            head_bottom: 1.63,
            head_top: 1.67,
            neck_height: 1.54,
            hip_offset: 0.09,
            leg_radius: 0.065,
            leg_top: 0.76,
            knee_height: 0.42,
            leg_bottom: 0.10,
            arm_height: 1.40,
            arm_radius: 0.045,
            arm_start: 0.265,
            elbow_offset: 0.525,
            arm_end: 0.78,
            blend_band: 0.05,
            clearance: 0.005,
        }
    }
}

struct Part {
    name: &'static str,
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    /// Joints along the part in chain order, with the axial coordinate at
    /// which each joint after the first takes over.
    chain: Vec<usize>,
    boundaries: Vec<f64>,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Perpendicular frame `(e1, e2)` with `e1 × e2 = u`.
fn frame(u: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if u[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let e2 = cross3(u, helper);
    let l = norm3(e2);
    let e2 = [e2[0] / l, e2[1] / l, e2[2] / l];
    let e1 = cross3(e2, u);
    (e1, e2)
}

/// Closed capsule surface with outward counter-clockwise winding.
fn capsule(a: [f64; 3], b: [f64; 3], r: f64, around: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let axis = sub3(b, a);
    let len = norm3(axis);
    let u = [axis[0] / len, axis[1] / len, axis[2] / len];
    let (e1, e2) = frame(u);
    let spacing = 2.0 * PI * r / around as f64;
    let cap_rings = ((FRAC_PI_2 * r) / spacing).ceil().max(2.0) as usize;
    let body_rings = (len / spacing).ceil().max(1.0) as usize;
    // (axial offset from a, ring radius), bottom pole to top pole.
    let mut profile = vec![(-r, 0.0)];
    for i in 1..=cap_rings {
        let phi = -FRAC_PI_2 + FRAC_PI_2 * i as f64 / cap_rings as f64;
        profile.push((r * phi.sin(), r * phi.cos()));
    }
    for i in 1..=body_rings {
        profile.push((len * i as f64 / body_rings as f64, r));
    }
    for i in 1..cap_rings {
        let phi = FRAC_PI_2 * i as f64 / cap_rings as f64;
        profile.push((len + r * phi.sin(), r * phi.cos()));
    }
    profile.push((len + r, 0.0));

    let mut verts = Vec::new();
    let mut rings: Vec<Vec<usize>> = Vec::new();
    let at = |h: f64, rad: f64, alpha: f64| -> [f64; 3] {
        let (s, c) = alpha.sin_cos();
        [0, 1, 2].map(|k| a[k] + h * u[k] + rad * (c * e1[k] + s * e2[k]))
    };
    for &(h, rad) in &profile {
        if rad == 0.0 {
            verts.push(at(h, 0.0, 0.0));
            rings.push(vec![verts.len() - 1; around]);
        } else {
            let start = verts.len();
            for j in 0..around {
                verts.push(at(h, rad, 2.0 * PI * j as f64 / around as f64));
            }
            rings.push((start..start + around).collect());
        }
    }
    let mut faces = Vec::new();
    for w in rings.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        for j in 0..around {
            let jn = (j + 1) % around;
            if lo[j] != lo[jn] {
                faces.push([lo[j], lo[jn], hi[jn]]);
            }
            if hi[j] != hi[jn] {
                faces.push([lo[j], hi[jn], hi[j]]);
            }
        }
    }
    (verts, faces)
}

/// Closest distance between segments `p0p1` and `q0q1`.
fn segment_distance(p0: [f64; 3], p1: [f64; 3], q0: [f64; 3], q1: [f64; 3]) -> f64 {
    let d1 = sub3(p1, p0);
    let d2 = sub3(q1, q0);
    let r = sub3(p0, q0);
    let a = dot3(d1, d1);
    let e = dot3(d2, d2);
    let f = dot3(d2, r);
    let c = dot3(d1, r);
    let b = dot3(d1, d2);
    let denom = a * e - b * b;
    let mut s = if denom > 1e-14 {
        ((b * f - c * e) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    let cp = [0, 1, 2].map(|k| p0[k] + d1[k] * s);
    let cq = [0, 1, 2].map(|k| q0[k] + d2[k] * t);
    norm3(sub3(cp, cq))
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

/// Builds the 12-joint capsule humanoid. All arrays are rounded through f32
/// so the model survives a body-file round trip bit-for-bit.
pub fn synth_humanoid(spec: &HumanoidSpec) -> Result<BodyModel, BodyError> {
    let dims = [
        ("torso_radius", spec.torso_radius),
        ("head_radius", spec.head_radius),
        ("leg_radius", spec.leg_radius),
        ("arm_radius", spec.arm_radius),
        ("hip_offset", spec.hip_offset),
        ("blend_band", spec.blend_band),
        ("torso length", spec.torso_top - spec.torso_bottom),
        ("head length", spec.head_top - spec.head_bottom),
        ("leg length", spec.leg_top - spec.leg_bottom),
        ("arm length", spec.arm_end - spec.arm_start),
        ("arm_start", spec.arm_start),
    ];
    for (name, value) in dims {
        if !(value.is_finite() && value > 0.0) {
            return Err(BodyError::Dimension { name, value });
        }
    }
    if spec.segments < 6 {
        return Err(BodyError::Dimension {
            name: "segments",
            value: spec.segments as f64,
        });
    }
    let ordered = [
        (
            "spine_height",
            spec.torso_bottom,
            spec.spine_height,
            spec.chest_height,
        ),
        (
            "chest_height",
            spec.spine_height,
            spec.chest_height,
            spec.torso_top + spec.torso_radius,
        ),
        (
            "knee_height",
            spec.leg_bottom,
            spec.knee_height,
            spec.leg_top,
        ),
        (
            "elbow_offset",
            spec.arm_start,
            spec.elbow_offset,
            spec.arm_end,
        ),
    ];
    for (name, lo, v, hi) in ordered {
        if !(v - spec.blend_band > lo && v + spec.blend_band < hi) {
            return Err(BodyError::Dimension { name, value: v });
        }
    }

    let s = spec;
    let joints: Vec<[f64; 3]> = vec![
        [0.0, 0.0, s.torso_bottom],
        [0.0, 0.0, s.spine_height],
        [0.0, 0.0, s.chest_height],
        [0.0, 0.0, s.neck_height],
        [s.hip_offset, 0.0, s.leg_top],
        [s.hip_offset, 0.0, s.knee_height],
        [-s.hip_offset, 0.0, s.leg_top],
        [-s.hip_offset, 0.0, s.knee_height],
        [s.arm_start, 0.0, s.arm_height],
        [s.elbow_offset, 0.0, s.arm_height],
        [-s.arm_start, 0.0, s.arm_height],
        [-s.elbow_offset, 0.0, s.arm_height],
    ]
    .into_iter()
    .map(|j| j.map(round32))
    .collect();

    let parts = vec![
        Part {
            name: "torso",
            a: [0.0, 0.0, s.torso_bottom],
            b: [0.0, 0.0, s.torso_top],
            radius: s.torso_radius,
            chain: vec![0, 1, 2],
            boundaries: vec![s.spine_height, s.chest_height],
        },
        Part {
            name: "head",
            a: [0.0, 0.0, s.head_bottom],
            b: [0.0, 0.0, s.head_top],
            radius: s.head_radius,
            chain: vec![3],
            boundaries: vec![],
        },
        Part {
            name: "left leg",
            a: [s.hip_offset, 0.0, s.leg_top],
            b: [s.hip_offset, 0.0, s.leg_bottom],
            radius: s.leg_radius,
            chain: vec![4, 5],
            boundaries: vec![-s.knee_height],
        },
        Part {
            name: "right leg",
            a: [-s.hip_offset, 0.0, s.leg_top],
            b: [-s.hip_offset, 0.0, s.leg_bottom],
            radius: s.leg_radius,
            chain: vec![6, 7],
            boundaries: vec![-s.knee_height],
        },
        Part {
            name: "left arm",
            a: [s.arm_start, 0.0, s.arm_height],
            b: [s.arm_end, 0.0, s.arm_height],
            radius: s.arm_radius,
            chain: vec![8, 9],
            boundaries: vec![s.elbow_offset],
        },
        Part {
            name: "right arm",
            a: [-s.arm_start, 0.0, s.arm_height],
            b: [-s.arm_end, 0.0, s.arm_height],
            radius: s.arm_radius,
            chain: vec![10, 11],
            boundaries: vec![s.elbow_offset],
        },
    ];

    let mut clashes = Vec::new();
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            let (p, q) = (&parts[i], &parts[j]);
            let gap = segment_distance(p.a, p.b, q.a, q.b) - p.radius - q.radius;
            if gap < s.clearance {
                clashes.push(format!(
                    "{} and {} are {:.4} m apart (need {} m)",
                    p.name, q.name, gap, s.clearance
                ));
            }
        }
    }
    if !clashes.is_empty() {
        return Err(BodyError::Invalid(clashes));
    }

    let k = HUMANOID_JOINTS.len();
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let mut weights = Vec::new();
    let mut inflate = Vec::new();
    let mut belly = Vec::new();
    for part in &parts {
        let around = ((s.segments as f64 * part.radius / s.torso_radius).round() as usize).max(8);
        let (pv, pf) = capsule(part.a, part.b, part.radius, around);
        let base = verts.len();
        faces.extend(pf.iter().map(|f| f.map(|i| i + base)));
        let axis = sub3(part.b, part.a);
        let l2 = dot3(axis, axis);
        for p in pv {
            let t = (dot3(sub3(p, part.a), axis) / l2).clamp(0.0, 1.0);
            let foot = [0, 1, 2].map(|c| part.a[c] + t * axis[c]);
            let radial = sub3(p, foot);
            let rl = norm3(radial);
            let dir = radial.map(|v| v / rl);
            // Axial coordinate increasing along the chain, matching the
            // boundary convention of each part.
            let coord = match part.name {
                "torso" | "head" => p[2],
                "left leg" | "right leg" => -p[2],
                _ => p[0].abs(),
            };
            let mut row = vec![0.0; k];
            let mut seg = 0;
            while seg < part.boundaries.len() && coord >= part.boundaries[seg] + s.blend_band {
                seg += 1;
            }
            if seg < part.boundaries.len() && coord > part.boundaries[seg] - s.blend_band {
                let t = smoothstep(
                    (coord - part.boundaries[seg] + s.blend_band) / (2.0 * s.blend_band),
                );
                let w_hi = round32(t);
                row[part.chain[seg]] = round32(1.0 - w_hi);
                row[part.chain[seg + 1]] = w_hi;
            } else {
                row[part.chain[seg]] = 1.0;
            }
            weights.extend(row);
            inflate.push(dir.map(|v| round32(0.01 * v)));
            let b = if part.name == "torso" {
                let g = (-((p[2] - s.spine_height) / 0.09).powi(2)).exp();
                0.03 * g * dir[1].max(0.0)
            } else {
                0.0
            };
            belly.push(dir.map(|v| round32(b * v)));
            verts.push(p.map(round32));
        }
    }
    let mesh = TriMesh::new(verts, faces)?;
    let skeleton = Skeleton::new(
        HUMANOID_JOINTS.iter().map(|s| s.to_string()).collect(),
        PARENTS.to_vec(),
        joints,
    )?;
    let n = mesh.vertex_count();
    let weights = BlendWeights::new(n, k, weights)?;
    BodyModel::new(
        "synthetic-humanoid".into(),
        mesh,
        skeleton,
        weights,
        vec![inflate, belly],
        None,
    )
}
