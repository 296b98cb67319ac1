use trusttune::autodiff::check_gradients;
use trusttune::model::{embed, run_blocks, EncoderConfig, EncoderParams, Pooling};
use trusttune::rng::{stream, Stream};

fn tiny(pooling: Pooling) -> EncoderParams {
    let cfg = EncoderConfig {
        vocab_size: 8,
        dim: 4,
        blocks: 2,
        ffn_dim: 6,
        max_len: 5,
        pooling,
        position_encoding: true,
    };
    let mut p = EncoderParams::init(cfg, &mut stream(5, Stream::Init)).unwrap();
    // Move layer-norm parameters off their initial values so their gradients are generic.
    for (k, t) in p.tensors_mut().into_iter().enumerate() {
        for (j, v) in t.values_mut().iter_mut().enumerate() {
            *v += 0.05 * (((k * 7 + j * 3) % 11) as f64 - 5.0) / 5.0;
        }
    }
    p
}

#[test]
fn tied_masked_loss_gradients_match_finite_differences() {
    let p = tiny(Pooling::FirstToken);
    let tensors: Vec<_> = p.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let batch: [&[u32]; 2] = [&[0, 1, 4, 5], &[0, 6, 1, 3]];
    let err = check_gradients(
        |g, ids| {
            let vars = p.vars_from(ids);
            let (x, m) = embed(g, &vars, &p.config, &batch, None)?;
            let h = run_blocks(g, &vars, &p.config, x, m)?;
            let hm = g.gather_rows(h, &[1, 6])?;
            let et = g.transpose(vars.embedding)?;
            let logits = g.matmul(hm, et)?;
            let lp = g.log_softmax(logits)?;
            let picked = g.pick_cols(lp, &[3, 7])?;
            let s = g.mean(picked)?;
            g.scale(s, -1.0)
        },
        &tensors,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "max relative error {err}");
}
