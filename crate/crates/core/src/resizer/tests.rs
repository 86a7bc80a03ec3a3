use std::sync::OnceLock;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::body::{synth_humanoid, HumanoidSpec};
use crate::fixtures::{outfit, OutfitSpec};
use crate::model::PbnsModel;

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

fn random_field(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect()
}

#[test]
fn copy_of_offset_body_transfers_index_for_index() {
    let b = humanoid();
    let shifted: Vec<[f64; 3]> = b
        .mesh
        .positions()
        .iter()
        .map(|p| [p[0] + 1e-4, p[1], p[2]])
        .collect();
    let n = shifted.len();
    let mesh = TriMesh::new(shifted, b.mesh.faces().to_vec()).unwrap();
    let g = GarmentTemplate::new("copy".into(), mesh, vec![0; n], vec![1.0; n], vec![false; n], false)
        .unwrap();
    let copied = copy_blendshapes(&g, b).unwrap();
    assert_eq!(copied.len(), 2);
    assert_eq!(copied[0], b.blendshapes[0]);
    assert_eq!(copied[1], b.blendshapes[1]);
}

#[test]
fn body_without_blendshapes_is_rejected() {
    let mut b = humanoid().clone();
    b.blendshapes.clear();
    assert!(matches!(transfer_blendshapes(&garment(), &b), Err(ModelError::Config(_))));
    assert!(ResizeModel::new(garment(), &b, 0).is_err());
}

#[test]
fn smoothing_fixes_constant_fields() {
    let g = garment();
    let c = vec![[0.3, -0.2, 0.05]; g.vertex_count()];
    let s = smooth(&c, g.mesh(), SMOOTH_ITERATIONS, SMOOTH_LAMBDA);
    for v in s {
        for k in 0..3 {
            assert!((v[k] - c[0][k]).abs() < 1e-15);
        }
    }
}

#[test]
fn one_pass_matches_edge_list_oracle() {
    let g = garment();
    let mesh = g.mesh();
    let f = random_field(g.vertex_count(), 4);
    let got = smooth_once(&f, mesh.vertex_neighbors(), 0.5);

    let mut deg = vec![0usize; f.len()];
    for e in mesh.edges() {
        deg[e[0]] += 1;
        deg[e[1]] += 1;
    }
    let mut want = f.clone();
    for e in mesh.edges() {
        let (a, b) = (e[0], e[1]);
        let w = 0.5 / deg[a].max(deg[b]) as f64;
        for c in 0..3 {
            want[a][c] += w * (f[b][c] - f[a][c]);
            want[b][c] += w * (f[a][c] - f[b][c]);
        }
    }
    let mut same_degree = 0;
    for i in 0..f.len() {
        for c in 0..3 {
            assert!((got[i][c] - want[i][c]).abs() < 1e-12);
        }
        // Where every neighbour shares the degree, the pass is a blend of
        // the vertex and its neighbour average.
        let nb = &mesh.vertex_neighbors()[i];
        if nb.iter().all(|&j| deg[j] == deg[i]) {
            same_degree += 1;
            for c in 0..3 {
                let avg = nb.iter().map(|&j| f[j][c]).sum::<f64>() / nb.len() as f64;
                assert!((got[i][c] - (0.5 * f[i][c] + 0.5 * avg)).abs() < 1e-12);
            }
        }
    }
    assert!(same_degree > f.len() / 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn smoothing_conserves_the_mean(seed in 0u64..1000) {
        let g = garment();
        let f = random_field(g.vertex_count(), seed);
        let s = smooth(&f, g.mesh(), SMOOTH_ITERATIONS, SMOOTH_LAMBDA);
        for c in 0..3 {
            let m0: f64 = f.iter().map(|v| v[c]).sum::<f64>() / f.len() as f64;
            let m1: f64 = s.iter().map(|v| v[c]).sum::<f64>() / s.len() as f64;
            prop_assert!((m0 - m1).abs() < 1e-9);
        }
    }

    #[test]
    fn deformed_rest_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -1.0f64..1.0) {
        let m = ResizeModel::new(tiny(), humanoid(), 0).unwrap();
        let g = m.garment();
        let bs = m.blendshapes();
        let t = g.positions();
        let pa = deformed_rest(g, bs, &[a, 0.0], [0.0, c]);
        let pb = deformed_rest(g, bs, &[b, c], [0.0, 0.0]);
        let pab = deformed_rest(g, bs, &[a + b, c], [0.0, c]);
        for i in 0..t.len() {
            for k in 0..3 {
                prop_assert!((pa[i][k] + pb[i][k] - t[i][k] - pab[i][k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rest_edge_estimate_examples() {
    let m = ResizeModel::new(garment(), humanoid(), 0).unwrap();
    let g = m.garment();
    let bs = m.blendshapes();
    assert_eq!(rest_edge_estimate(g, bs, &[0.0, 0.0], [0.0, 0.0]), g.rest_edges());
    assert_eq!(rest_edge_estimate(g, bs, &[0.7, -0.3], [-0.7, 0.3]), g.rest_edges());

    let direct: Vec<[f64; 3]> = g
        .positions()
        .iter()
        .zip(&bs[0])
        .map(|(p, d)| [p[0] + 1.5 * d[0], p[1] + 1.5 * d[1], p[2] + 1.5 * d[2]])
        .collect();
    let want = edge_lengths(g.mesh(), &direct);
    let got = rest_edge_estimate(g, bs, &[1.0, 0.0], [0.5, 0.0]);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
    // Longer β vectors are truncated to two components.
    assert_eq!(
        rest_edge_estimate(g, bs, &[1.0, 0.0, 9.0], [0.5, 0.0]),
        got
    );
}

#[test]
fn looser_gamma_lengthens_edges() {
    let m = ResizeModel::new(garment(), humanoid(), 0).unwrap();
    let mean = |g1: f64| {
        let e = rest_edge_estimate(m.garment(), m.blendshapes(), &[0.0, 0.0], [g1, 0.0]);
        e.iter().sum::<f64>() / e.len() as f64
    };
    let probes: Vec<f64> = [-1.0, -0.5, 0.0, 0.5, 1.0].iter().map(|&g| mean(g)).collect();
    for w in probes.windows(2) {
        assert!(w[1] > w[0], "{probes:?}");
    }
}

#[test]
fn zero_psd_returns_the_template() {
    let m = ResizeModel::new(garment(), humanoid(), 3).unwrap();
    for beta in [[0.0, 0.0], [1.5, -0.4], [-2.0, 1.0]] {
        let s = ResizeSample { beta: beta.to_vec(), gamma: [0.3, -0.1] };
        assert_eq!(m.forward(&s).unwrap(), garment().positions());
    }
    let bad = ResizeSample { beta: vec![0.0], gamma: [0.0, 0.0] };
    assert!(m.forward(&bad).is_err());
}

#[test]
fn tightness_range_validation_and_sampling() {
    let r = TightnessRange::humanoid();
    r.validate(2).unwrap();
    assert!(r.validate(3).is_err());
    let mut bad = r.clone();
    bad.gamma[0] = [1.0, -1.0];
    assert!(bad.validate(2).is_err());
    let a = r.samples(50, 7);
    assert_eq!(a, r.samples(50, 7));
    for s in &a {
        for (v, [lo, hi]) in s.beta.iter().zip(&r.beta) {
            assert!(v >= lo && v < hi);
        }
        for (v, [lo, hi]) in s.gamma.iter().zip(&r.gamma) {
            assert!(v >= lo && v < hi);
        }
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch: 4,
        epochs,
        warmup_steps: 2,
        workers: Some(2),
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let mut m = ResizeModel::new(tiny(), humanoid(), 1).unwrap();
    let h = m.params().hash();
    let val = TightnessRange::humanoid().samples(4, 1);
    train_resizer(&mut m, humanoid(), &TightnessRange::humanoid(), 8, &val, EnergyWeights::default(), &quick(0), &RunSink::default(), None).unwrap();
    assert_eq!(m.params().hash(), h);
}

#[test]
fn resizer_training_is_seeded_and_round_trips() {
    let range = TightnessRange::humanoid();
    let val = range.samples(4, 1);
    let run = || {
        let mut m = ResizeModel::new(tiny(), humanoid(), 1).unwrap();
        train_resizer(&mut m, humanoid(), &range, 8, &val, EnergyWeights::default(), &quick(2), &RunSink::default(), None).unwrap();
        m
    };
    let (a, b) = (run(), run());
    assert_eq!(a.params().hash(), b.params().hash());
    assert_ne!(a.params().hash(), ResizeModel::new(tiny(), humanoid(), 1).unwrap().params().hash());

    let bytes = a.to_checkpoint(None).to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.mode, CheckpointMode::Resize);
    let back = ResizeModel::from_checkpoint(&ck, tiny(), humanoid(), false).unwrap();
    assert_eq!(back.params().hash(), a.params().hash());
    let s = &val[0];
    assert_eq!(back.forward(s).unwrap(), a.forward(s).unwrap());

    // Pose and resize checkpoints are not interchangeable.
    assert!(matches!(
        PbnsModel::from_checkpoint(&ck, tiny(), humanoid(), false),
        Err(ModelError::Mode { .. })
    ));
    let pose = PbnsModel::new(tiny(), humanoid(), EmbeddingMode::Mlp, 0).unwrap();
    assert!(matches!(
        ResizeModel::from_checkpoint(&pose.to_checkpoint(None), tiny(), humanoid(), false),
        Err(ModelError::Mode { .. })
    ));
}

#[test]
fn validation_reports_per_sample_means() {
    let m = ResizeModel::new(tiny(), humanoid(), 1).unwrap();
    let val = TightnessRange::humanoid().samples(3, 2);
    let all = validate_resizer(&m, humanoid(), &val, EnergyWeights::default()).unwrap();
    let each: Vec<_> = val
        .iter()
        .map(|s| validate_resizer(&m, humanoid(), std::slice::from_ref(s), EnergyWeights::default()).unwrap())
        .collect();
    let mean = each.iter().map(|r| r.total).sum::<f64>() / 3.0;
    assert!((all.total - mean).abs() < 1e-12);
    assert_eq!(all.samples, 3);
}
