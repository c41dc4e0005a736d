//! Model-level invariants and checkpoint robustness.

use otdr_core::checkpoint::{read_checkpoint, save_checkpoint, CheckpointMeta, FORMAT_VERSION};
use otdr_core::dcae::{Dcae, DcaeArch};
use otdr_core::denoiser::{predict, Windows};
use otdr_core::faultnet::{FaultNet, FaultNetArch};
use otdr_core::train::Network;
use otdr_core::CoreError;
use otdr_tensor::{Graph, Tensor};
use proptest::prelude::*;

fn meta(model: &str) -> CheckpointMeta {
    CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: model.into(),
        arch: serde_json::Value::Null,
        config_hash: "h".into(),
        seed: 0,
        normalization: "window_max".into(),
        training: serde_json::Value::Null,
        metrics: serde_json::Value::Null,
        blocks: vec![],
    }
}

/// Shares the forward weights with the backward direction.
fn tied_faultnet(seed: u64, hidden: usize, len: usize) -> FaultNet {
    let arch = FaultNetArch {
        hidden,
        input_len: len,
        ..FaultNetArch::default()
    };
    let mut net = FaultNet::new(arch, seed).unwrap();
    let ps = net.params_mut();
    for part in ["w_ih", "w_hh", "b"] {
        let src = ps.id(&format!("lstm_fwd.{part}")).unwrap();
        let dst = ps.id(&format!("lstm_bwd.{part}")).unwrap();
        let v = ps.get(src).value.clone();
        ps.get_mut(dst).value = v;
    }
    net
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn bilstm_directions_swap_under_time_reversal(seed in any::<u64>(), x in prop::collection::vec(0.0f64..1.0, 12)) {
        let (t, h) = (12, 5);
        let net = tied_faultnet(seed, h, t);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        let run = |v: &[f64]| {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(vec![1, t, 1], v.to_vec()).unwrap());
            let out = net.bilstm_forward(&mut g, xv).unwrap();
            g.value(out).data().to_vec()
        };
        let a = run(&x);
        let b = run(&rev);
        for step in 0..t {
            let back = t - 1 - step;
            for k in 0..h {
                let fwd_a = a[step * 2 * h + k];
                let bwd_b = b[back * 2 * h + h + k];
                prop_assert!((fwd_a - bwd_b).abs() < 1e-12, "{} vs {}", fwd_a, bwd_b);
            }
        }
    }

    #[test]
    fn dcae_output_shape_and_range(seed in 0u64..1000, depth in prop::sample::select(vec![3usize, 5, 7])) {
        let arch = DcaeArch::with_depth(depth).unwrap();
        let len = arch.input_len;
        let m = Dcae::new(arch, seed).unwrap();
        let x: Vec<f64> = (0..3 * len).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect();
        let y = m.denoise_windows(&x).unwrap();
        prop_assert_eq!(y.len(), x.len());
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.otdrck");
    let model = Dcae::new(DcaeArch::default(), 3).unwrap();
    save_checkpoint(&path, &model, &meta("dcae")).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] ^= 0xFF;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(CoreError::Format { offset: 0, .. })));

    for cut in [4, 12, 40, bytes.len() - 3] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(CoreError::Format { .. })), "cut at {cut}");
    }

    let mut long = bytes.clone();
    long.extend_from_slice(&[0, 0, 0, 0]);
    std::fs::write(&path, &long).unwrap();
    assert!(read_checkpoint(&path).is_err());
}

#[test]
fn checkpoint_restores_bit_exact_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.otdrck");
    let model = Dcae::new(DcaeArch::default(), 21).unwrap();
    save_checkpoint(&path, &model, &meta("dcae")).unwrap();
    let mut other = Dcae::new(DcaeArch::default(), 22).unwrap();
    read_checkpoint(&path).unwrap().restore_into(&mut other).unwrap();
    let x: Vec<f64> = (0..400).map(|i| (i as f64 * 0.37).sin().abs()).collect();
    let a = predict(&model, Windows::new(&x, 100).unwrap()).unwrap();
    let b = predict(&other, Windows::new(&x, 100).unwrap()).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));

    // a checkpoint of one architecture does not load into another
    let mut wrong = FaultNet::new(FaultNetArch::default(), 0).unwrap();
    assert!(read_checkpoint(&path).unwrap().restore_into(&mut wrong).is_err());
}
