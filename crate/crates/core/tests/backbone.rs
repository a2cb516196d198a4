use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleepssl::backbone::{BackboneKind, Model, ModelSpec, TeKind, TeMode, FE_PREFIX};
use sleepssl_nn::{Checkpoint, Graph, Tensor};

const FS: u32 = 10;
const BACKBONES: [BackboneKind; 3] = [BackboneKind::Cnn1d, BackboneKind::DeepSleepNet, BackboneKind::AttnSleep];
const TES: [TeKind; 3] = [TeKind::BilstmResidual, TeKind::CausalAttention, TeKind::Identity];

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(), shape).unwrap()
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

#[test]
fn every_backbone_composes_with_every_temporal_encoder() {
    for b in BACKBONES {
        for te in TES {
            let spec = ModelSpec::desk(b, FS).with_te(te);
            let m = Model::build(&spec, 1).unwrap();
            let x = random(&[3, spec.input_len], 2);
            let y = m.predict_logits(&x, 3).unwrap();
            assert_eq!(y.shape(), &[3, 5], "{b} + {te:?}");
            assert!(y.data().iter().all(|v| v.is_finite()), "{b} + {te:?}");
            let f = m.encode(&x).unwrap();
            assert_eq!(f.shape(), &[3, m.dims().timesteps, m.dims().m1]);
        }
    }
}

#[test]
fn te_modes_resolve_per_backbone() {
    for b in BACKBONES {
        assert_eq!(TeMode::Native.resolve(b), b.native_te());
        assert_eq!(TeMode::None.resolve(b), TeKind::Identity);
        assert_ne!(TeMode::Swapped.resolve(b), b.native_te());
    }
}

#[test]
fn initialization_is_a_function_of_the_seed() {
    for b in BACKBONES {
        let spec = ModelSpec::desk(b, FS);
        let a = Model::build(&spec, 5).unwrap().full_checkpoint().unwrap();
        let same = Model::build(&spec, 5).unwrap().full_checkpoint().unwrap();
        let other = Model::build(&spec, 6).unwrap().full_checkpoint().unwrap();
        assert_eq!(a, same);
        assert_ne!(a.tensors, other.tensors);
    }
}

#[test]
fn evaluation_is_independent_of_batching() {
    for b in BACKBONES {
        let spec = ModelSpec::desk(b, FS);
        let m = Model::build(&spec, 3).unwrap();
        let x = random(&[5, spec.input_len], 4);
        let whole = m.predict_logits(&x, 5).unwrap();
        let single = m.predict_logits(&x, 1).unwrap();
        assert!(close(whole.data(), single.data(), 1e-4), "{b}");
    }
}

#[test]
fn causal_attention_ignores_the_future() {
    for b in BACKBONES {
        let spec = ModelSpec::desk(b, FS).with_te(TeKind::CausalAttention);
        let m = Model::build(&spec, 7).unwrap();
        let dims = m.dims();
        let t_cut = dims.timesteps / 2;
        let f = random(&[1, dims.timesteps, dims.m1], 8);
        // Random (not constant) so layer normalization cannot cancel it.
        let noise = random(&[1, dims.timesteps, dims.m1], 9);
        let mut g2 = f.clone();
        for i in t_cut * dims.m1..dims.timesteps * dims.m1 {
            g2.data_mut()[i] += noise.data()[i];
        }
        let run = |input: &Tensor| {
            let mut g = Graph::eval(m.store());
            let v = g.input(input.clone());
            let s = m.temporal_sequence(&mut g, v);
            g.value(s).clone()
        };
        let (ya, yb) = (run(&f), run(&g2));
        let width = ya.shape()[2];
        let prefix = t_cut * width;
        assert!(close(&ya.data()[..prefix], &yb.data()[..prefix], 1e-5), "{b}: past outputs moved");
        assert!(!close(&ya.data()[prefix..], &yb.data()[prefix..], 1e-5), "{b}: future outputs did not move");
    }
}

#[test]
fn encoder_checkpoints_hold_only_feature_extractor_tensors() {
    for b in BACKBONES {
        let m = Model::build(&ModelSpec::desk(b, FS), 0).unwrap();
        let ck = m.encoder_checkpoint().unwrap();
        assert!(!ck.tensors.is_empty());
        assert!(ck.tensors.iter().all(|t| t.name.starts_with(FE_PREFIX)));
    }
}

#[test]
fn encoder_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    for b in BACKBONES {
        let spec = ModelSpec::desk(b, FS);
        let src = Model::build(&spec, 11).unwrap();
        let path = dir.path().join(format!("{b}.ckpt"));
        src.encoder_checkpoint().unwrap().save(&path).unwrap();
        // A different temporal encoder still accepts the feature extractor.
        let mut dst = Model::build(&spec.clone().with_te(TeKind::Identity), 12).unwrap();
        dst.load_encoder(&Checkpoint::load(&path).unwrap()).unwrap();
        let x = random(&[2, spec.input_len], 13);
        assert_eq!(src.encode(&x).unwrap(), dst.encode(&x).unwrap());
    }
}

#[test]
fn mismatched_encoders_are_rejected() {
    let ck = Model::build(&ModelSpec::desk(BackboneKind::Cnn1d, FS), 0).unwrap().encoder_checkpoint().unwrap();
    let mut other = Model::build(&ModelSpec::desk(BackboneKind::AttnSleep, FS), 0).unwrap();
    assert!(other.load_encoder(&ck).is_err());
    let mut wider = Model::build(&ModelSpec::full(BackboneKind::Cnn1d, FS), 0).unwrap();
    assert!(wider.load_encoder(&ck).is_err());
}

#[test]
fn full_models_at_100_hz_order_by_size() {
    let total = |b| Model::build(&ModelSpec::full(b, 100), 0).unwrap().count_parameters().total;
    let (dsn, attn, cnn) = (total(BackboneKind::DeepSleepNet), total(BackboneKind::AttnSleep), total(BackboneKind::Cnn1d));
    assert!(dsn > attn && attn > cnn, "{dsn} {attn} {cnn}");
}
