use std::time::Instant;

use trusttune::model::{masked_accuracy, pretrain, EncoderConfig, EncoderParams, PretrainConfig};
use trusttune::rng::{stream, Stream};
use trusttune::tasks::generate_corpus;

#[test]
fn default_pretraining_beats_chance_fivefold() {
    let enc = EncoderConfig::default();
    let cfg = PretrainConfig::default();
    let all = generate_corpus(enc.vocab_size, enc.max_len, cfg.corpus_size + 500, 0).unwrap();
    let (corpus, held_out) = all.split_at(cfg.corpus_size);
    let init = EncoderParams::init(enc.clone(), &mut stream(0, Stream::Init)).unwrap();
    let t = Instant::now();
    let out = pretrain(&init, &cfg, corpus, 0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let before = masked_accuracy(&init, held_out, cfg.mask_rate, 0).unwrap();
    let after = masked_accuracy(&out.params, held_out, cfg.mask_rate, 0).unwrap();
    let head: f64 = out.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = out.losses[out.losses.len() - 20..].iter().sum::<f64>() / 20.0;
    eprintln!("pretrain {secs:.1}s loss {head:.3} -> {tail:.3} acc {before:.3} -> {after:.3}");
    assert!(tail < head);
    assert!(after > 5.0 / enc.vocab_size as f64, "masked accuracy {after}");
}
