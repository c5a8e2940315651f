//! Neural layers on top of [`crate::autodiff`], with named parameter
//! accounting and checkpointing.

mod checkpoint;
mod layers;
mod registry;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{
    Conv2d, Deconv2d, Embedding, EncoderLayer, LayerNorm, LayerSpec, Linear, MultiHeadAttention, ResidualBlock,
    EMBEDDING_INIT_STD,
};
pub(crate) use layers::gaussian;
pub use registry::{BoundParams, ParamId, ParameterRegistry};

/// Total number of scalar parameters in `registry`.
pub fn param_count(registry: &ParameterRegistry) -> usize {
    registry.param_count()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn tokens(s: usize, d: usize, seed: u64) -> Tensor {
        gaussian(&[s, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_and_layer_norm_counts() {
        let mut reg = ParameterRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut reg, &mut rng, "lin", 4, 3).unwrap();
        assert_eq!(param_count(&reg), 15);
        assert_eq!(lin.spec().param_count(), 15);

        let mut reg = ParameterRegistry::new();
        LayerNorm::new(&mut reg, "ln", 8).unwrap();
        assert_eq!(param_count(&reg), 16);
        assert_eq!(LayerSpec::LayerNorm { width: 8 }.param_count(), 16);
    }

    #[test]
    fn layer_specs_match_registered_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reg = ParameterRegistry::new();
        let layer = EncoderLayer::new(&mut reg, &mut rng, "enc", 16, 4, 64).unwrap();
        assert_eq!(reg.param_count(), layer.spec.param_count());

        let mut reg = ParameterRegistry::new();
        ResidualBlock::new(&mut reg, &mut rng, "res", 8).unwrap();
        assert_eq!(reg.param_count(), LayerSpec::ResidualBlock { channels: 8, kernel: 3 }.param_count());

        let mut reg = ParameterRegistry::new();
        let de = Deconv2d::new(&mut reg, &mut rng, "de", 8, 4, 4, 2, 1).unwrap();
        assert_eq!(reg.param_count(), de.spec.param_count());
    }

    #[test]
    fn spec_invariants_are_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut reg = ParameterRegistry::new();
        assert!(MultiHeadAttention::new(&mut reg, &mut rng, "mha", 10, 3).is_err());
        assert!(EncoderLayer::new(&mut reg, &mut rng, "enc", 16, 4, 8).is_err());
        assert!(matches!(
            reg.register("x", Tensor::zeros(&[1])).and_then(|_| reg.register("x", Tensor::zeros(&[1]))),
            Err(crate::Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut reg = ParameterRegistry::new();
        let mha = MultiHeadAttention::new(&mut reg, &mut rng, "mha", 16, 4).unwrap();
        for seed in 0..5 {
            let mut tape = Tape::new();
            let p = reg.bind(&mut tape);
            let x = tape.constant(&tokens(7, 16, seed));
            let (out, w) = mha.forward_with_weights(&mut tape, &p, x).unwrap();
            assert_eq!(tape.shape(out), &[7, 16]);
            assert_eq!(tape.shape(w), &[4, 7, 7]);
            for row in tape.value(w).chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut reg = ParameterRegistry::new();
        let mha = MultiHeadAttention::new(&mut reg, &mut rng, "mha", 8, 2).unwrap();
        let row = tokens(1, 8, 9);
        let x = Tensor::from_fn(&[5, 8], |i| row.values()[i % 8]);
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let xv = tape.constant(&x);
        let out = mha.forward(&mut tape, &p, xv).unwrap();
        let v = tape.value(out);
        for r in 1..5 {
            assert_eq!(&v[r * 8..(r + 1) * 8], &v[..8]);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut reg = ParameterRegistry::new();
        let mha = MultiHeadAttention::new(&mut reg, &mut rng, "mha", 8, 2).unwrap();
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let x = tape.constant(&tokens(1, 8, 1));
        let (_, w) = mha.forward_with_weights(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(w), &[1.0, 1.0]);
    }

    #[test]
    fn zero_output_projections_make_encoder_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut reg = ParameterRegistry::new();
        let enc = EncoderLayer::new(&mut reg, &mut rng, "enc", 64, 4, 256).unwrap();
        for id in [enc.attention.output.weight, enc.attention.output.bias, enc.ffn_out.weight, enc.ffn_out.bias] {
            reg.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = tokens(12, 64, 2);
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let xv = tape.constant(&x);
        let y = enc.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.shape(y), &[12, 64]);
        assert_eq!(tape.value(y), x.values());
    }

    #[test]
    fn encoder_preserves_shape_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut reg = ParameterRegistry::new();
        let enc = EncoderLayer::new(&mut reg, &mut rng, "enc", 64, 8, 256).unwrap();
        let count = reg.param_count();
        let x = tokens(12, 64, 3);
        let run = || {
            let mut tape = Tape::new();
            let p = reg.bind(&mut tape);
            let xv = tape.constant(&x);
            let y = enc.forward(&mut tape, &p, xv).unwrap();
            assert_eq!(tape.shape(y), &[12, 64]);
            tape.value(y).to_vec()
        };
        assert_eq!(run(), run());
        assert_eq!(reg.param_count(), count);
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut reg = ParameterRegistry::new();
        EncoderLayer::new(&mut reg, &mut rng, "enc", 8, 2, 32).unwrap();
        let ckpt = Checkpoint::from_registry(&reg, "{\"k\":1}");
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap(), ckpt);

        let mut fresh = ParameterRegistry::new();
        EncoderLayer::new(&mut fresh, &mut ChaCha8Rng::seed_from_u64(99), "enc", 8, 2, 32).unwrap();
        assert_ne!(fresh, reg);
        back.apply_to(&mut fresh).unwrap();
        assert_eq!(
            fresh.iter().map(|(_, t)| t.values().to_vec()).collect::<Vec<_>>(),
            reg.iter().map(|(_, t)| t.values().to_vec()).collect::<Vec<_>>()
        );

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut other = ParameterRegistry::new();
        EncoderLayer::new(&mut other, &mut rng, "enc", 16, 2, 32).unwrap();
        assert!(back.apply_to(&mut other).is_err());
    }
}
