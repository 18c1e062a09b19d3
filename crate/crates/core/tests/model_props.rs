use kernel_attn::attention::AttentionKind;
use kernel_attn::data::{gen_matching, gen_text_classification, Batch, Example, Schema, SeqBatch};
use kernel_attn::harness::train::{accuracy, evaluate};
use kernel_attn::harness::verify::tiny_model_config;
use kernel_attn::kernels::{KernelSpec, KernelVariant};
use kernel_attn::model::{Model, ModelConfig};
use kernel_attn::rng;
use kernel_attn::{Error, Graph};

fn config(variant: KernelVariant, head: Schema) -> ModelConfig {
    let mut c = tiny_model_config(variant, 1);
    c.vocab_size = 40;
    c.max_len = 32;
    c.d_model = 16;
    c.kernel = KernelSpec::new(variant, 1, 8);
    c.classes = 2;
    c.head = head;
    c
}

#[test]
fn small_gradient_step_reduces_loss() {
    let mut decreased = 0;
    for trial in 0..100u64 {
        let variant = KernelVariant::ALL[trial as usize % 4];
        let model = Model::<f64>::build(config(variant, Schema::Classify), trial).unwrap();
        let data = gen_text_classification(trial, 8, 20, 40, 2, 3).unwrap();
        let refs: Vec<&Example> = data.examples.iter().collect();
        let batch = Batch::from_examples(&refs, 32);

        let loss_of = |m: &Model<f64>| {
            let mut g = Graph::new();
            let vars = m.bind(&mut g, true);
            let l = m.loss(&mut g, &vars, &batch, None).unwrap();
            let value = g.value(l.total).item().unwrap();
            (value, g.backward(l.total).unwrap())
        };
        let (before, grads) = loss_of(&model);
        let mut stepped = model.clone();
        for id in model.params().ids() {
            let g = grads.get(id).unwrap();
            let p = stepped.params_mut().get_mut(id);
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= 1e-3 * d;
            }
        }
        let (after, _) = loss_of(&stepped);
        assert!(before.is_finite() && after.is_finite());
        decreased += (after < before) as usize;
    }
    assert!(decreased >= 95, "loss decreased in {decreased}/100 trials");
}

#[test]
fn untrained_model_is_at_chance_and_deterministic() {
    let model = Model::<f32>::build(config(KernelVariant::Oglu, Schema::Classify), 4).unwrap();
    let data = gen_text_classification(11, 2000, 24, 40, 2, 3).unwrap();
    let a = evaluate(&model, &data, 128).unwrap();
    assert!((a.accuracy - 0.5).abs() <= 0.05, "{}", a.accuracy);
    assert_eq!(a, evaluate(&model, &data, 128).unwrap());
    assert_eq!(evaluate(&model, &data, 7).unwrap().count, 2000);
}

#[test]
fn oracle_predictions_score_one() {
    let labels = [0, 1, 1, 0, 2];
    assert_eq!(accuracy(&labels, &labels), 1.0);
    assert_eq!(accuracy(&[0, 0, 1, 0, 2], &labels), 0.8);
}

#[test]
fn schema_mismatch_is_a_config_error() {
    let model = Model::<f32>::build(config(KernelVariant::Oglu, Schema::Classify), 4).unwrap();
    let pairs = gen_matching(1, 10, 24, 40, 3).unwrap();
    assert!(matches!(evaluate(&model, &pairs, 4), Err(Error::Config { .. })));
}

#[test]
fn linear_equals_quadratic_end_to_end() {
    for variant in KernelVariant::ALL {
        for depth in 1..=3 {
            let mut c = config(variant, Schema::Classify);
            c.kernel = KernelSpec::new(variant, depth, 8);
            c.n_layers = 2;
            c.eps = 0.0;
            let lin = Model::<f64>::build(c, depth as u64).unwrap();
            let quad = lin.with_attention(AttentionKind::KernelQuadratic).unwrap();
            let seqs = SeqBatch::from_sequences([&[3u32, 9, 4, 1, 30, 2][..], &[7, 7], &[39, 1, 2, 3]], 32);
            let gap = lin
                .forward_classify(&seqs)
                .unwrap()
                .max_abs_diff(&quad.forward_classify(&seqs).unwrap())
                .unwrap();
            assert!(gap <= 1e-8, "{variant:?}/{depth}: {gap:e}");
        }
    }
    let lin = Model::<f64>::build(config(KernelVariant::Glu, Schema::Classify), 0).unwrap();
    assert!(lin.with_attention(AttentionKind::Softmax).is_err());
}

#[test]
fn matching_encodes_each_side_independently() {
    let model = Model::<f64>::build(config(KernelVariant::Aoglu, Schema::Match), 2).unwrap();
    let a = SeqBatch::from_sequences([&[4u32, 5, 6, 7][..], &[8, 9]], 32);
    let b = SeqBatch::from_sequences([&[10u32, 11][..], &[12, 13, 14, 15, 16]], 32);
    let ab = model.forward_match(&a, &b).unwrap();
    let ba = model.forward_match(&b, &a).unwrap();
    assert_eq!(ab.shape(), &[2, 2]);
    assert_ne!(ab, ba);
    // the encoder output of a sequence does not depend on its partner
    let ua = model.encode_values(&a).unwrap();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let _ = model.encode(&mut g, &vars, &b, None).unwrap();
    let again = model.encode(&mut g, &vars, &a, None).unwrap();
    assert_eq!(g.value(again), &ua);
}

#[test]
fn dropout_changes_training_forward_only() {
    let mut c = config(KernelVariant::LinearSoftplus, Schema::Classify);
    c.dropout = 0.3;
    let model = Model::<f32>::build(c, 1).unwrap();
    let seqs = SeqBatch::from_sequences([&[1u32, 2, 3, 4, 5][..]], 32);
    let plain = model.forward_classify(&seqs).unwrap();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let mut r = rng::seeded(3);
    let noisy = model.classify_logits(&mut g, &vars, &seqs, Some(&mut r)).unwrap();
    assert_ne!(g.value(noisy), &plain);
    assert_eq!(model.forward_classify(&seqs).unwrap(), plain);
}
