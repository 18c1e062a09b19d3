use kernel_attn::data::listops::{evaluate, gen_listops};
use kernel_attn::data::tsv::to_tsv;
use kernel_attn::data::{gen_matching, gen_text_classification, PAD};

#[test]
fn listops_labels_match_evaluator_on_ten_thousand_samples() {
    let d = gen_listops(2024, 10_000, 128, 5).unwrap();
    for ex in &d.examples {
        assert_eq!(evaluate(&ex.tokens).unwrap() as usize, ex.label, "{:?}", ex.tokens);
        assert!(ex.tokens.len() <= 128);
    }
    let hist = d.label_histogram();
    assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
}

#[test]
fn generators_are_pure_and_never_emit_padding() {
    let runs = || {
        [
            to_tsv(&gen_listops(5, 300, 64, 3).unwrap()),
            to_tsv(&gen_text_classification(5, 300, 48, 50, 4, 3).unwrap()),
            to_tsv(&gen_matching(5, 300, 48, 50, 3).unwrap()),
        ]
    };
    let (a, b) = (runs(), runs());
    assert_eq!(a, b);
    for d in [
        gen_listops(6, 200, 64, 3).unwrap(),
        gen_text_classification(6, 200, 48, 50, 4, 3).unwrap(),
        gen_matching(6, 200, 48, 50, 3).unwrap(),
    ] {
        for ex in &d.examples {
            assert!(!ex.tokens.contains(&PAD));
            assert!(ex.pair.iter().all(|p| !p.contains(&PAD)));
        }
    }
}

#[test]
fn listops_stream_is_frozen() {
    // first expression for seed 0; guards the generator against silent drift
    let d = gen_listops(0, 1, 32, 3).unwrap();
    let text = kernel_attn::data::listops::render(&d.examples[0].tokens);
    assert_eq!(text, "[MED 5 0 5 8 4 1 9 5 0 6 [MIN 5 8 1 7 5 9 7 5]]");
    // MIN gives 1; the eleven MED arguments sort to 0 0 1 1 4 5 5 5 6 8 9
    assert_eq!(d.examples[0].label, 5);
}
