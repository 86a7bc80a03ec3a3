use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::body::{synth_humanoid, HumanoidSpec};
use crate::fixtures::{outfit, OutfitSpec};
use crate::rig::skin;
use crate::tensor::rodrigues;

fn humanoid() -> &'static BodyModel {
    static BODY: OnceLock<BodyModel> = OnceLock::new();
    BODY.get_or_init(|| synth_humanoid(&HumanoidSpec::default()).unwrap())
}

fn garment() -> Arc<GarmentTemplate> {
    static G: OnceLock<Arc<GarmentTemplate>> = OnceLock::new();
    G.get_or_init(|| Arc::new(outfit(&OutfitSpec::default()).unwrap()))
        .clone()
}

fn tiny() -> Arc<GarmentTemplate> {
    Arc::new(outfit(&OutfitSpec::tiny()).unwrap())
}

fn randomize(model: &mut PbnsModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..model.params().len() {
        for v in model.params_mut().data_mut(i) {
            *v = scale * rng.random_range(-1.0..1.0);
        }
    }
}

fn random_pose(rng: &mut ChaCha8Rng, k: usize, amp: f64) -> Pose {
    let theta = (0..k)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-amp..amp)))
        .collect();
    Pose::new(theta, None).unwrap()
}

#[test]
fn zero_network_embeds_to_zero() {
    let mut m = PbnsModel::new(tiny(), humanoid(), EmbeddingMode::Mlp, 1).unwrap();
    randomize(&mut m, 2, 0.0);
    assert!(m.embed(&Pose::zeros(12)).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn identity_modes_embed_verbatim() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pose = random_pose(&mut rng, 12, 1.0);
    let m = PbnsModel::new(tiny(), humanoid(), EmbeddingMode::IdentityTheta, 1).unwrap();
    assert_eq!(m.embed(&pose).unwrap(), pose.flat_theta());
    assert_eq!(m.params().len(), 1);
    assert_eq!(m.params().value(0).shape(), [36, 3 * 48]);

    let m = PbnsModel::new(tiny(), humanoid(), EmbeddingMode::IdentityRotmat, 1).unwrap();
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert_eq!(m.embed(&Pose::zeros(12)).unwrap(), eye.repeat(12));
    let x = m.embed(&pose).unwrap();
    assert_eq!(&x[9..18], &rodrigues(pose.theta[1]));
    assert_eq!(m.params().value(0).shape(), [108, 3 * 48]);
}

#[test]
fn deform_basis_and_loop_oracle() {
    let mut m = PbnsModel::new(tiny(), humanoid(), EmbeddingMode::Mlp, 1).unwrap();
    randomize(&mut m, 4, 0.5);
    let n = 48;
    assert!(m.deform(&[0.0; 32]).unwrap().iter().all(|v| *v == [0.0; 3]));
    let d = m.params().value(m.config().psd_index()).clone();
    for k in [0, 7, 31] {
        let mut e = vec![0.0; 32];
        e[k] = 1.0;
        let out = m.deform(&e).unwrap();
        for i in 0..n {
            for c in 0..3 {
                assert_eq!(out[i][c], d.data()[k * 3 * n + 3 * i + c]);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
    let out = m.deform(&x).unwrap();
    for i in 0..n {
        for c in 0..3 {
            let mut s = 0.0;
            for (k, xk) in x.iter().enumerate() {
                s += xk * d.data()[k * 3 * n + 3 * i + c];
            }
            assert!((out[i][c] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_psd_at_rest_reproduces_template() {
    let m = PbnsModel::new(garment(), humanoid(), EmbeddingMode::Mlp, 1).unwrap();
    let out = m.pose_outfit(&Pose::zeros(12)).unwrap();
    assert_eq!(out, garment().positions());
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, true).unwrap();
    let o = m.pose_outfit_var(&mut tape, &vars, &Pose::zeros(12)).unwrap();
    assert_eq!(tape.value(o.posed).to_vec3s(), garment().positions());
}

#[test]
fn zero_psd_one_hot_single_joint_is_rigid() {
    let body = humanoid();
    let t = crate::rig::transfer_weights(
        garment().positions(),
        body.mesh.positions(),
        &body.weights,
        body.nn_cell_size(),
    )
    .unwrap();
    let k = 12;
    let mut one_hot = vec![0.0; t.rows() * k];
    let mut bound = Vec::new();
    for i in 0..t.rows() {
        let j = (0..k).max_by(|&a, &b| t.row(i)[a].total_cmp(&t.row(i)[b])).unwrap();
        one_hot[i * k + j] = 1.0;
        bound.push(j);
    }
    let m = PbnsModel::new(garment(), body, EmbeddingMode::Mlp, 1)
        .unwrap()
        .with_weights(BlendWeights::new(t.rows(), k, one_hot).unwrap())
        .unwrap();
    for joint in ["root", "spine", "l_hip"] {
        let mut pose = Pose::zeros(12);
        pose.theta[body.skeleton.index_of(joint).unwrap()] = [0.3, -0.5, 0.9];
        let g = global_transforms(&body.skeleton, &pose).unwrap();
        let out = m.pose_outfit(&pose).unwrap();
        for (i, (p, q)) in garment().positions().iter().zip(&out).enumerate() {
            let gj = &g[bound[i]];
            for c in 0..3 {
                let want = (0..3).map(|r| gj[3 * c + r] * p[r]).sum::<f64>() + gj[9 + c];
                assert!((q[c] - want).abs() < 1e-10);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn zero_psd_is_plain_skinning(seed in 0u64..1000) {
        let m = PbnsModel::new(garment(), humanoid(), EmbeddingMode::Mlp, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = random_pose(&mut rng, 12, 0.8);
        let want = skin(garment().positions(), &pose, m.transferred_weights(), &humanoid().skeleton).unwrap();
        prop_assert_eq!(m.pose_outfit(&pose).unwrap(), want);
    }
}

#[test]
fn batched_inference_is_bit_identical_to_single() {
    let mut m = PbnsModel::new(garment(), humanoid(), EmbeddingMode::Mlp, 9).unwrap();
    let psd = m.config().psd_index();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for v in m.params_mut().data_mut(psd) {
        *v = rng.random_range(-0.01..0.01);
    }
    let poses: Vec<Pose> = (0..7).map(|_| random_pose(&mut rng, 12, 0.8)).collect();
    let batch = m.pose_outfits(&poses).unwrap();
    for (p, b) in poses.iter().zip(&batch) {
        assert_eq!(&m.pose_outfit(p).unwrap(), b);
    }
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false).unwrap();
    let o = m.pose_outfit_var(&mut tape, &vars, &poses[3]).unwrap();
    let dev = tape
        .value(o.posed)
        .to_vec3s()
        .iter()
        .zip(&batch[3])
        .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
        .fold(0.0, f64::max);
    assert!(dev < 1e-12, "{dev}");
}

#[test]
fn parameter_counts_for_fixture() {
    let m = PbnsModel::new(garment(), humanoid(), EmbeddingMode::Mlp, 1).unwrap();
    let d = m.describe();
    assert_eq!(d["mlp_params"], (36 * 32 + 32) + 3 * (32 * 32 + 32));
    assert_eq!(d["psd_params"], 32 * 2016 * 3);
    assert_eq!(d["garment"]["layers"], 2);
    assert_eq!(d["total_params"], 4352 + 193_536);
}

#[test]
fn trainable_weights_start_near_transfer() {
    let g = Arc::new((*garment()).clone().with_trainable_weights(true));
    let m = PbnsModel::new(g, humanoid(), EmbeddingMode::Mlp, 1).unwrap();
    assert!(m.has_trainable_weights());
    let w = m.skin_weights().unwrap();
    let t = m.transferred_weights();
    let k = 12;
    for i in 0..w.rows() {
        for j in 0..k {
            let (a, b) = (w.row(i)[j], t.row(i)[j]);
            assert!((a - b).abs() < 0.01, "vertex {i} joint {j}: {a} vs {b}");
            if b > 0.0 {
                for q in humanoid().skeleton.neighborhood(j) {
                    assert!(w.row(i)[q] > 0.0);
                }
            }
        }
    }
}

fn sample_checkpoint(m: &PbnsModel) -> Checkpoint {
    let mut opt = AdamState::new(m.params());
    opt.step = 17;
    opt.m[0][3] = 0.25;
    opt.v.last_mut().unwrap()[1] = 1e-300;
    m.to_checkpoint(Some(opt))
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let g = Arc::new((*garment()).clone().with_trainable_weights(true));
    let mut m = PbnsModel::new(g.clone(), humanoid(), EmbeddingMode::Mlp, 1).unwrap();
    randomize(&mut m, 11, 0.3);
    let ck = sample_checkpoint(&m);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let m2 = PbnsModel::from_checkpoint(&back, g, humanoid(), false).unwrap();
    assert_eq!(m2.params(), m.params());
    assert_eq!(m2.params().hash(), m.params().hash());
}

#[test]
fn checkpoint_rejects_other_garment_naming_both_hashes() {
    let m = PbnsModel::new(garment(), humanoid(), EmbeddingMode::Mlp, 1).unwrap();
    let ck = m.to_checkpoint(None);
    let other = tiny();
    // The tiny outfit has a different vertex count, so only the hash check
    // is exercised when forcing is off.
    let err = PbnsModel::from_checkpoint(&ck, other.clone(), humanoid(), false).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains(m.garment_hash()) && msg.contains(&other.content_hash()), "{msg}");

    let g = garment();
    let moved = g
        .with_pinned(vec![false; g.vertex_count()])
        .map(Arc::new)
        .unwrap();
    assert!(matches!(
        PbnsModel::from_checkpoint(&ck, moved.clone(), humanoid(), false),
        Err(ModelError::HashMismatch { what: "garment", .. })
    ));
    assert!(PbnsModel::from_checkpoint(&ck, moved, humanoid(), true).is_ok());
}

#[test]
fn old_checkpoint_version_is_explicit_error() {
    #[derive(serde::Serialize)]
    struct Old {
        version: u32,
    }
    let bytes = crate::format::ContainerWriter::new(CHECKPOINT_MAGIC, &Old { version: 0 }).finish();
    match Checkpoint::from_bytes(&bytes) {
        Err(e @ ModelError::Version { found: 0, expected: 1 }) => {
            assert!(e.to_string().contains("version 0"))
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let m = PbnsModel::new(tiny(), humanoid(), EmbeddingMode::Mlp, 1).unwrap();
    let bytes = m.to_checkpoint(None).to_bytes();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
        Err(ModelError::Format(crate::format::FormatError::Truncated { .. }))
    ));
}

#[test]
fn garment_sidecar_round_trip_keeps_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("outfit.json");
    save_garment(&path, &garment()).unwrap();
    let back = load_garment(&path).unwrap();
    assert_eq!(back.content_hash(), garment().content_hash());
    assert_eq!(back.layers(), garment().layers());
    assert!(dir.path().join("outfit.obj").exists());
}

#[test]
fn garment_invariants_are_enforced() {
    let g = garment();
    let n = g.vertex_count();
    let err = GarmentTemplate::new(
        "x".into(),
        g.mesh().clone(),
        vec![2; n],
        vec![0.0; n],
        vec![false; n],
        false,
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("layer 0 has no vertices"), "{err}");
    assert!(err.contains("fabric multiplier at vertex 0"), "{err}");
}
