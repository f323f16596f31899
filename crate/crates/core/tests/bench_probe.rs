use gpitlab_core::losses::*;
use gpitlab_core::recognizer::{RecognizerConfig, RecognizerParams};
use gpitlab_core::separator::{SeparatorConfig, SeparatorParams};
use gpitlab_core::signals::*;
use gpitlab_core::tensor::{Tape, Tensor};
use std::time::Instant;

#[test]
fn bench_probe() {
    let bank = SymbolBank::new(8, 800, 8000);
    let spec = DatasetSpec {
        split: Split::Train, items: 16, speakers: 2, seq_len: (3, 10),
        mixing_snr_db: (0.0, 5.0), noise_snr_db: (-6.0, 3.0),
        tsl_limit_s: Some(1.0), master_seed: 5, rir: RirSpec::default_at(8000),
        noise_shape: NoiseShape::ambient_default(),
    };
    let sep = SeparatorParams::init(SeparatorConfig::default());
    let rec = RecognizerParams::init(RecognizerConfig {
        alphabet: 8, window: 256, hop: 128, features: 32, hidden: 32, seed: 11,
    });

    // data generation cost
    let t0 = Instant::now();
    let items: Vec<_> = (0..16).map(|i| generate_mixture(&bank, &spec, i, 0).unwrap()).collect();
    eprintln!("gen: {:.1} ms/item", t0.elapsed().as_secs_f64() * 1000.0 / 16.0);

    // pit-sisdr step (pretraining)
    let t0 = Instant::now();
    for (ex, _) in &items {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, ex.len()], ex.x.clone()).unwrap());
        let bound = sep.bind(&tape, true);
        let ests = bound.forward(x).unwrap();
        let (loss, _) = pit_loss(&tape, &ex.refs, &ests, &SisdrPair).unwrap();
        tape.backward(loss).unwrap();
        let _ = sep.params.grads(&bound.vars).unwrap();
    }
    eprintln!("pit-sisdr step: {:.1} ms/item", t0.elapsed().as_secs_f64() * 1000.0 / 16.0);

    // gpit-ae step (fine-tuning)
    let t0 = Instant::now();
    for (ex, _) in &items {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, ex.len()], ex.x.clone()).unwrap());
        let bound = sep.bind(&tape, true);
        let ests = bound.forward(x).unwrap();
        let (loss, _) = gpit_loss(&tape, &ex.refs, &ests, &SisdrPair, &AePair::new(&rec)).unwrap();
        tape.backward(loss).unwrap();
        let _ = sep.params.grads(&bound.vars).unwrap();
    }
    eprintln!("gpit-ae step: {:.1} ms/item", t0.elapsed().as_secs_f64() * 1000.0 / 16.0);

    // recognizer ctc training step
    let t0 = Instant::now();
    for i in 0..16 {
        let (utt, wave) = generate_clean(&bank, 7, Split::Train, i, 0, (3, 10), (0.3, 1.0), 800);
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, wave.len()], wave).unwrap());
        let bound = rec.bind(&tape, true);
        let logits = bound.encode(x).unwrap();
        let loss = gpitlab_core::recognizer::ctc_loss(logits, &utt.symbols, 8).unwrap();
        tape.backward(loss).unwrap();
        let _ = rec.params.grads(&bound.vars).unwrap();
    }
    eprintln!("ctc step: {:.1} ms/item", t0.elapsed().as_secs_f64() * 1000.0 / 16.0);

    // eval cost: separate + decode 5 waveforms
    let t0 = Instant::now();
    for (ex, _) in &items {
        let ests = sep.separate(&ex.x).unwrap();
        for e in &ests { let _ = rec.encode(e).unwrap(); }
        for r in &ex.refs { let _ = rec.encode(r).unwrap(); }
        let _ = rec.encode(&ex.x).unwrap();
    }
    eprintln!("eval: {:.1} ms/item", t0.elapsed().as_secs_f64() * 1000.0 / 16.0);
}
