use super::*;
use crate::rig::{global_transforms, skin, Pose};
use std::sync::OnceLock;

fn humanoid() -> &'static BodyModel {
    static BODY: OnceLock<BodyModel> = OnceLock::new();
    BODY.get_or_init(|| synth_humanoid(&HumanoidSpec::default()).unwrap())
}

#[test]
fn default_humanoid_is_valid() {
    let b = humanoid();
    assert_eq!(b.skeleton.len(), 12);
    assert_eq!(b.weights.cols(), 12);
    for i in 0..b.weights.rows() {
        let s: f64 = b.weights.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!(b.weights.max_influences() <= 2);
    assert!(b.mesh.check_nondegenerate().is_ok());
    assert_eq!(b.shape_count(), 2);
    let n = b.mesh.vertex_count();
    assert!((1500..8000).contains(&n), "{n} vertices");
}

#[test]
fn rest_skinning_reproduces_rest_mesh() {
    let b = humanoid();
    let out = skin(
        b.mesh.positions(),
        &Pose::zeros(12),
        &b.weights,
        &b.skeleton,
    )
    .unwrap();
    assert_eq!(out, b.mesh.positions());
}

#[test]
fn elbow_bend_rotates_forearm_rigidly() {
    let b = humanoid();
    let spec = HumanoidSpec::default();
    let elbow = b.skeleton.index_of("l_elbow").unwrap();
    let mut pose = Pose::zeros(12);
    pose.theta[elbow] = [0.0, 0.0, std::f64::consts::FRAC_PI_4];
    let out = skin(b.mesh.positions(), &pose, &b.weights, &b.skeleton).unwrap();
    let g = global_transforms(&b.skeleton, &pose).unwrap()[elbow];
    let mut checked = 0;
    for (i, p) in b.mesh.positions().iter().enumerate() {
        if p[0] > spec.elbow_offset + spec.blend_band + 1e-6 {
            let rp = [0, 1, 2].map(|r| (0..3).map(|c| g[3 * r + c] * p[c]).sum::<f64>() + g[9 + r]);
            for c in 0..3 {
                assert!((out[i][c] - rp[c]).abs() < 1e-12);
            }
            checked += 1;
        } else if p[0] < spec.elbow_offset - spec.blend_band - 1e-6 {
            assert_eq!(out[i], *p);
        }
    }
    assert!(checked > 50);
}

#[test]
fn body_file_round_trip_is_bit_identical() {
    let b = humanoid();
    let bytes = body_to_bytes(b);
    let c = body_from_bytes(&bytes).unwrap();
    assert_eq!(c.mesh.positions(), b.mesh.positions());
    assert_eq!(c.mesh.faces(), b.mesh.faces());
    assert_eq!(c.skeleton, b.skeleton);
    assert_eq!(c.weights, b.weights);
    assert_eq!(c.blendshapes, b.blendshapes);
    assert_eq!(body_to_bytes(&c), bytes);
}

fn data_offset(bytes: &[u8]) -> usize {
    12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize
}

#[test]
fn bad_weight_row_is_reported_by_index() {
    let b = humanoid();
    let mut bytes = body_to_bytes(b);
    let (n, nf, k) = (b.mesh.vertex_count(), b.mesh.face_count(), 12);
    let row = 7;
    let w0 = data_offset(&bytes) + 4 * (3 * n + 3 * nf + 3 * k) + 4 * row * k;
    for c in 0..k {
        let at = w0 + 4 * c;
        let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) * 0.9;
        bytes[at..at + 4].copy_from_slice(&v.to_le_bytes());
    }
    let msg = body_from_bytes(&bytes).unwrap_err().to_string();
    assert!(msg.contains("weight row 7 sums to 0.899"), "{msg}");
}

#[test]
fn truncated_vertex_block_names_offset() {
    let b = humanoid();
    let bytes = body_to_bytes(b);
    let start = data_offset(&bytes);
    let cut = &bytes[..start + 100];
    match body_from_bytes(cut) {
        Err(BodyError::Format(crate::format::FormatError::Truncated { offset, what, .. })) => {
            assert_eq!(offset, start);
            assert_eq!(what, "vertex block");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn shapes_are_linear() {
    let b = humanoid();
    assert_eq!(b.apply_shape(&[0.0, 0.0]).unwrap(), b.mesh.positions());
    let one = b.apply_shape(&[1.0, 0.0]).unwrap();
    let two = b.apply_shape(&[2.0, 0.0]).unwrap();
    for i in 0..one.len() {
        for c in 0..3 {
            let base = b.mesh.positions()[i][c];
            assert_eq!(one[i][c], base + b.blendshapes[0][i][c]);
            let d1 = one[i][c] - base;
            let d2 = two[i][c] - base;
            assert!((d2 - 2.0 * d1).abs() < 1e-15);
        }
    }
    assert!(matches!(
        b.apply_shape(&[1.0]),
        Err(BodyError::ShapeCount {
            expected: 2,
            got: 1
        })
    ));
}

#[test]
fn self_collision_detects_crossed_legs() {
    let b = humanoid();
    let checker = SelfCollision::new(&b.mesh);
    let hip = b.skeleton.index_of("l_hip").unwrap();
    let mut pose = Pose::zeros(12);
    pose.theta[hip] = [0.0, 0.45, 0.0];
    let posed = skin(b.mesh.positions(), &pose, &b.weights, &b.skeleton).unwrap();
    assert!(!checker.check(&posed).is_empty());
    assert!(checker.check(b.mesh.positions()).is_empty());
}

#[test]
fn most_sampled_poses_are_collision_free() {
    let b = humanoid();
    let checker = SelfCollision::new(&b.mesh);
    let pool = synth_pose_pool(&PoseRanges::humanoid(&b.skeleton), 40, 11);
    let bad = pool
        .iter()
        .filter(|p| {
            let posed = skin(b.mesh.positions(), p, &b.weights, &b.skeleton).unwrap();
            !checker.check(&posed).is_empty()
        })
        .count();
    assert!(bad <= 4, "{bad} of 40 poses self-collide");
}

#[test]
fn pose_sampler_examples() {
    let z = Pose::zeros(12);
    let db = sample_pose_database(&[z.clone(), z.clone(), z.clone()], 3, 0.5, 0.85, 1);
    assert_eq!(db.poses.len(), 1);
    assert!(db.warning.is_some());

    let mut r = Pose::zeros(12);
    r.theta[0] = [1.0, 0.0, 0.0];
    let db = sample_pose_database(&[z, r], 2, 0.5, 0.85, 1);
    assert_eq!(db.poses.len(), 1);

    let ranges = PoseRanges {
        ranges: vec![[[-1.0, 1.0]; 3]; 12],
    };
    let pool = synth_pose_pool(&ranges, 10_000, 5);
    let db = sample_pose_database(&pool, 100, 0.5, 0.85, 9);
    assert_eq!(db.poses.len(), 100);
    assert!(db.warning.is_none());
    for i in 0..100 {
        for j in i + 1..100 {
            let d = db.poses[i].distance_without_root(&db.poses[j]);
            assert!(d >= 0.5);
        }
    }
    assert_eq!(db.train().len(), 85);
    assert_eq!(db.validation().len(), 15);
    let again = sample_pose_database(&pool, 100, 0.5, 0.85, 9);
    assert_eq!(again.poses, db.poses);
}

#[test]
fn split_counts_follow_fraction() {
    let ranges = PoseRanges {
        ranges: vec![[[-2.0, 2.0]; 3]; 4],
    };
    let pool = synth_pose_pool(&ranges, 4000, 2);
    let db = sample_pose_database(&pool, 3000, 0.0, 0.85, 3);
    assert_eq!((db.train().len(), db.validation().len()), (2550, 450));
}

#[test]
fn pose_files_round_trip() {
    let pool: Vec<Pose> = synth_pose_pool(&PoseRanges::humanoid(&humanoid().skeleton), 5, 1)
        .into_iter()
        .map(|p| {
            let theta = p.theta.iter().map(|t| t.map(|v| v as f32 as f64)).collect();
            Pose::new(theta, Some([0.5, -0.25, 1.0])).unwrap()
        })
        .collect();
    let bytes = poses_to_bytes(&pool).unwrap();
    assert_eq!(poses_from_bytes(&bytes).unwrap(), pool);

    let row: Vec<String> = pool[0]
        .flat_theta()
        .iter()
        .map(|v| format!("{v:?}"))
        .collect();
    let csv = format!(
        "{}\n{}\n",
        (0..36)
            .map(|i| format!("c{i}"))
            .collect::<Vec<_>>()
            .join(","),
        row.join(",")
    );
    let parsed = parse_pose_csv(&csv, 12).unwrap();
    assert_eq!(parsed[0].theta, pool[0].theta);
    assert_eq!(parsed[0].translation, None);
    let with_t = format!("{},1,2,3\n", row.join(","));
    assert_eq!(
        parse_pose_csv(&with_t, 12).unwrap()[0].translation,
        Some([1.0, 2.0, 3.0])
    );
    let err = parse_pose_csv("1,2,3,4\n", 12).unwrap_err().to_string();
    assert!(err.contains("expected 36 or 39"), "{err}");
}

