use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::*;

fn frames(config: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(0.0, 1.0);
    let shape = [config.frames, config.channels, config.image_size[0], config.image_size[1]];
    Tensor::from_fn(&shape, |_| u.sample(&mut rng))
}

fn conv(i: usize, o: usize, k: usize) -> usize {
    i * o * k * k + o
}

#[test]
fn default_parameter_count_golden() {
    // extractor: three stride-2 stages with residual blocks, 1x1 projection
    let extractor = conv(1, 8, 3) + 2 * conv(8, 8, 3)
        + conv(8, 16, 3) + 2 * conv(16, 16, 3)
        + conv(16, 32, 3) + 2 * conv(32, 32, 3)
        + conv(32, 32, 1);
    assert_eq!(extractor, 31_248);
    let embeddings = 16 * 32 + 4 * 32;
    let layer = 2 * 2 * 32 + 4 * (32 * 32 + 32) + (32 * 128 + 128) + (128 * 32 + 32);
    let heatmap = conv(32, 16, 4) + conv(16, 16, 4) + conv(16, 16, 1);
    let lifting = conv(16, 16, 3) + conv(16, 32, 3) + (512 * 128 + 128) + (128 * 48 + 48);
    let slice = extractor + embeddings + 2 * layer + heatmap + lifting;
    assert_eq!(slice, 148_704);

    let config = ModelConfig::default();
    let fmt = EgoStan::new(config.clone(), 0).unwrap();
    let sl = EgoStan::new(config.with_variant(Variant::Slice), 0).unwrap();
    let avg = EgoStan::new(config.with_variant(Variant::Avg), 0).unwrap();
    assert_eq!(sl.param_count(), slice);
    assert_eq!(avg.param_count(), slice);
    assert_eq!(fmt.param_count(), 149_216);
    assert_eq!(fmt.param_count() - sl.param_count(), config.fmt_tokens * config.d_model);
}

#[test]
fn variants_share_all_weights_but_the_feature_map_tokens() {
    let config = ModelConfig::tiny();
    let fmt = EgoStan::new(config.clone(), 5).unwrap();
    let slice = EgoStan::new(config.with_variant(Variant::Slice), 5).unwrap();
    for (name, t) in slice.registry().iter() {
        assert_eq!(fmt.registry().by_name(name).unwrap(), t, "{name}");
    }
    assert!(fmt.registry().by_name("fmt_tokens").is_some());
}

#[test]
fn forward_shapes_and_determinism() {
    let config = ModelConfig::tiny();
    for variant in Variant::ALL {
        let model = EgoStan::new(config.with_variant(variant), 1).unwrap();
        let x = frames(&config, 2);
        let out = model.forward(&x).unwrap();
        assert_eq!(out.heatmaps.shape(), &[4, 4, 3]);
        assert_eq!(out.pose.shape(), &[3, 3]);
        assert_eq!(model.forward(&x).unwrap(), out);
    }
}

#[test]
fn sequence_lengths_follow_the_variant() {
    let config = ModelConfig::default();
    for (variant, len) in [(Variant::Fmt, 80), (Variant::Slice, 64), (Variant::Avg, 64)] {
        let model = EgoStan::new(config.with_variant(variant), 0).unwrap();
        let mut tape = Tape::new();
        let p = model.registry().bind_frozen(&mut tape);
        let x = tape.constant(&frames(&config, 0));
        let f = model.extract_features(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(f), &[4, 32, 4, 4]);
        let seq = model.tokenize_sequence(&mut tape, &p, f).unwrap();
        assert_eq!(tape.shape(seq.tokens), &[len, 32]);
        assert_eq!(seq.layout.len(), len);
        let enc = model.encode(&mut tape, &p, seq).unwrap();
        assert_eq!(tape.shape(enc.tokens), &[len, 32]);
    }
    let base = EgoStan::baseline(&config, 0).unwrap();
    assert_eq!(base.config().sequence_len(), 16);
}

#[test]
fn single_frame_slice_equals_single_frame_avg() {
    let config = ModelConfig::tiny().with_frames(1);
    let slice = EgoStan::new(config.with_variant(Variant::Slice), 3).unwrap();
    let avg = EgoStan::new(config.with_variant(Variant::Avg), 3).unwrap();
    let x = frames(&config, 4);
    assert_eq!(slice.forward(&x).unwrap(), avg.forward(&x).unwrap());
}

#[test]
fn extractor_weights_are_shared_across_frames() {
    let config = ModelConfig::tiny();
    let model = EgoStan::new(config.clone(), 2).unwrap();
    let x = frames(&config, 5);
    let mut tape = Tape::new();
    let p = model.registry().bind_frozen(&mut tape);
    let xv = tape.constant(&x);
    let all = model.extract_features(&mut tape, &p, xv).unwrap();
    let all = tape.value(all).to_vec();

    let single = EgoStan::new(config.with_frames(1), 2).unwrap();
    let per = all.len() / config.frames;
    for t in 0..config.frames {
        let one = Tensor::new(vec![1, 1, 16, 16], x.values()[t * 256..(t + 1) * 256].to_vec()).unwrap();
        let mut tape = Tape::new();
        let p = single.registry().bind_frozen(&mut tape);
        let v = tape.constant(&one);
        let f = single.extract_features(&mut tape, &p, v).unwrap();
        assert_eq!(tape.value(f), &all[t * per..(t + 1) * per]);
    }
}

#[test]
fn slice_output_ignores_older_frames_without_mixing() {
    // with zero attention and FFN output projections the encoder is the
    // identity, so slice output must not depend on earlier frames
    let config = ModelConfig::tiny().with_variant(Variant::Slice);
    let mut model = EgoStan::new(config.clone(), 6).unwrap();
    for name in ["encoder0.attn.output.weight", "encoder0.attn.output.bias", "encoder0.ffn_out.weight", "encoder0.ffn_out.bias"] {
        let id = model.registry().id(name).unwrap_or_else(|| panic!("{name}"));
        model.registry_mut().get_mut(id).values_mut().fill(0.0);
    }
    let a = frames(&config, 7);
    let mut b = a.clone();
    b.values_mut()[..256].iter_mut().for_each(|v| *v = 1.0 - *v);
    assert_eq!(model.forward(&a).unwrap(), model.forward(&b).unwrap());
}

#[test]
fn feature_map_tokens_receive_gradient() {
    let config = ModelConfig::tiny();
    let model = EgoStan::new(config.clone(), 8).unwrap();
    let mut tape = Tape::new();
    let p = model.registry().bind(&mut tape);
    let x = tape.constant(&frames(&config, 9));
    let out = model.forward_on(&mut tape, &p, x).unwrap();
    let loss = tape.sum_all(out.pose).unwrap();
    let grads = tape.backward(loss).unwrap();
    let k = model.feature_map_tokens().unwrap().table.table;
    let g = grads.get(p.var(k)).unwrap();
    assert!(g.iter().any(|v| *v != 0.0));
}

#[test]
fn baseline_forward_requires_single_frame_slice() {
    let config = ModelConfig::tiny();
    let base = EgoStan::baseline(&config, 0).unwrap();
    let x = frames(&config.single_frame(), 1);
    let frame = x.reshaped(&[1, 16, 16]).unwrap();
    assert_eq!(base.baseline_forward(&frame).unwrap(), base.forward(&x).unwrap());
    let full = EgoStan::new(config, 0).unwrap();
    assert!(full.baseline_forward(&frame).is_err());
}

#[test]
fn wrong_input_shape_is_an_error() {
    let config = ModelConfig::tiny();
    let model = EgoStan::new(config.clone(), 0).unwrap();
    let err = model.forward(&Tensor::zeros(&[3, 1, 16, 16])).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let config = ModelConfig::tiny();
    let model = EgoStan::new(config.clone(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let back = EgoStan::load(&path).unwrap();
    let x = frames(&config, 12);
    assert_eq!(back.forward(&x).unwrap(), model.forward(&x).unwrap());
    assert_eq!(back.config(), model.config());

    let ckpt = model.checkpoint().unwrap();
    let other = EgoStan::new(config.with_variant(Variant::Slice), 0).unwrap();
    let mut reg = other.registry().clone();
    assert!(ckpt.apply_to(&mut reg).is_err());
}
