use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::SsmBlock;
use super::*;
use crate::numerics::grad_check;
use crate::tokenizer::TOR;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random, shape-consistent scan inputs with strictly positive dt.
fn scan_inputs(
    r: &mut ChaCha8Rng,
    t_len: usize,
    di: usize,
    n: usize,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    (
        rand_tensor(r, &[t_len, di], -1.0, 1.0),
        rand_tensor(r, &[di, n], -1.0, 1.0),
        rand_tensor(r, &[t_len, n], -1.0, 1.0),
        rand_tensor(r, &[t_len, n], -1.0, 1.0),
        rand_tensor(r, &[t_len, di], 0.001, 0.8),
        rand_tensor(r, &[di], -1.0, 1.0),
    )
}

fn run_scan(
    x: &Tensor<f64>,
    a_log: &Tensor<f64>,
    b: &Tensor<f64>,
    c: &Tensor<f64>,
    dt: &Tensor<f64>,
    d: &Tensor<f64>,
) -> crate::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xs = tape.constant(x.clone());
    let al = tape.constant(a_log.clone());
    let bt = tape.constant(b.clone());
    let ct = tape.constant(c.clone());
    let dts = tape.constant(dt.clone());
    let ds = tape.constant(d.clone());
    let y = selective_scan(&mut tape, xs, al, bt, ct, dts, ds)?;
    Ok(tape.detach(y))
}

#[test]
fn scan_zero_input_zero_output() {
    let mut r = rng(1);
    let (_, a_log, b, c, dt, d) = scan_inputs(&mut r, 6, 3, 4);
    let x = Tensor::zeros(&[6, 3]);
    let y = run_scan(&x, &a_log, &b, &c, &dt, &d).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn scan_single_step_closed_form() {
    let mut r = rng(2);
    let (x, a_log, b, c, dt, d) = scan_inputs(&mut r, 1, 2, 3);
    let y = run_scan(&x, &a_log, &b, &c, &dt, &d).unwrap();
    // y_1 = C_1 . (dt_1 * B_1 * x_1) + D * x_1 exactly (h_0 = 0)
    for ci in 0..2 {
        let mut want = d.data()[ci] * x.at(0, ci);
        for si in 0..3 {
            want += c.at(0, si) * dt.at(0, ci) * b.at(0, si) * x.at(0, ci);
        }
        let got = y.at(0, ci);
        assert!((got - want).abs() < 1e-12, "channel {ci}: {got} vs {want}");
    }
}

#[test]
fn scan_matches_reference_oracle_t32() {
    let mut r = rng(3);
    let (x, a_log, b, c, dt, d) = scan_inputs(&mut r, 32, 5, 4);
    let y = run_scan(&x, &a_log, &b, &c, &dt, &d).unwrap();
    let want = reference_scan(&x, &a_log, &b, &c, &dt, &d);
    for (got, expect) in y.data().iter().zip(want.data()) {
        assert!((got - expect).abs() < 1e-5);
    }
}

#[test]
fn scan_rejects_non_positive_dt() {
    let mut r = rng(4);
    let (x, a_log, b, c, mut dt, d) = scan_inputs(&mut r, 4, 2, 2);
    dt.data_mut()[3] = 0.0;
    let err = run_scan(&x, &a_log, &b, &c, &dt, &d).unwrap_err();
    assert!(err.to_string().contains("strictly positive"), "{err}");
}

#[test]
fn scan_rejects_length_mismatch() {
    let mut r = rng(5);
    let (x, a_log, b, c, dt, d) = scan_inputs(&mut r, 4, 2, 2);
    let short_b = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    let err = run_scan(&x, &a_log, &short_b, &c, &dt, &d).unwrap_err();
    assert!(matches!(err, crate::Error::Shape { op: "selective_scan", .. }), "{err}");
    drop((b, dt, d, c));
}

#[test]
fn scan_gradients_match_finite_differences() {
    let mut r = rng(6);
    let (x, a_log, b, c, dt_raw, d) = scan_inputs(&mut r, 7, 3, 4);
    let mut store = ParamStore::new();
    store.insert("x", x);
    store.insert("a_log", a_log);
    store.insert("b", b);
    store.insert("c", c);
    store.insert("dt_raw", dt_raw); // softplus on tape keeps dt positive
    store.insert("d", d);
    let report = grad_check(
        &store,
        |s, tape| {
            let xs = tape.param(s, "x");
            let al = tape.param(s, "a_log");
            let bt = tape.param(s, "b");
            let ct = tape.param(s, "c");
            let dtr = tape.param(s, "dt_raw");
            let ds = tape.param(s, "d");
            let dt = tape.softplus(dtr);
            let y = selective_scan(tape, xs, al, bt, ct, dt, ds)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{}", report.table());
}

fn toy_cfg(arch: Architecture) -> EmbedderConfig {
    EmbedderConfig {
        d_emb: 16,
        n_layers: 2,
        d_state: 4,
        expansion: 2,
        conv_kernel: 3,
        architecture: arch,
    }
}

#[test]
fn ssm_block_is_strictly_causal() {
    let cfg = toy_cfg(Architecture::Ssm);
    let blk = SsmBlock::new("embedder.layers.0".into(), cfg);
    let mut store = ParamStore::<f64>::new();
    blk.init_params(&mut store, &mut rng(7));

    let mut r = rng(8);
    let base = rand_tensor(&mut r, &[10, 16], -1.0, 1.0);
    let mut perturbed = base.clone();
    let j = 6;
    for cidx in 0..16 {
        let v = perturbed.at(j, cidx) + 0.5;
        perturbed.data_mut()[j * 16 + cidx] = v;
    }

    let run = |input: &Tensor<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = blk.forward(&store, &mut tape, x).unwrap();
        tape.detach(y)
    };
    let ya = run(&base);
    let yb = run(&perturbed);
    for t in 0..j {
        for cidx in 0..16 {
            assert_eq!(ya.at(t, cidx).to_bits(), yb.at(t, cidx).to_bits(), "leak at t={t}");
        }
    }
    assert_ne!(ya.row(j), yb.row(j));
}

#[test]
fn zeroed_out_projection_makes_block_identity() {
    let cfg = toy_cfg(Architecture::Ssm);
    let blk = SsmBlock::new("embedder.layers.0".into(), cfg);
    let mut store = ParamStore::<f64>::new();
    blk.init_params(&mut store, &mut rng(9));
    store.group_mut("embedder.layers.0.out_proj.w").unwrap().tensor = Tensor::zeros(&[32, 16]);

    let mut r = rng(10);
    let input = rand_tensor(&mut r, &[5, 16], -1.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = blk.forward(&store, &mut tape, x).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn ssm_block_gradients_match_finite_differences() {
    let cfg = EmbedderConfig {
        d_emb: 8,
        n_layers: 1,
        d_state: 3,
        expansion: 2,
        conv_kernel: 2,
        architecture: Architecture::Ssm,
    };
    let blk = SsmBlock::new("embedder.layers.0".into(), cfg);
    let mut store = ParamStore::<f64>::new();
    blk.init_params(&mut store, &mut rng(11));
    let mut r = rng(12);
    let input = rand_tensor(&mut r, &[5, 8], -1.0, 1.0);
    let report = grad_check(
        &store,
        |s, tape| {
            let x = tape.constant(input.clone());
            let y = blk.forward(s, tape, x)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean(sq))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{}", report.table());
}

fn embedder_with_store(arch: Architecture) -> (Embedder, ParamStore<f64>) {
    let emb = Embedder::new(toy_cfg(arch));
    let mut store = ParamStore::new();
    emb.init_params(&mut store, &mut rng(13));
    (emb, store)
}

#[test]
fn no_tor_tokens_empty_positions() {
    let (emb, store) = embedder_with_store(Architecture::Ssm);
    let mut tape = Tape::new();
    let out = emb.embed_sequence(&store, &mut tape, &[1, 2, 3], None).unwrap();
    assert!(out.tor_positions.is_empty());
    assert_eq!(out.seq_len, 3);
}

#[test]
fn stage2_style_positions_follow_image_and_question() {
    let (emb, store) = embedder_with_store(Architecture::Ssm);
    let mut tape = Tape::new();
    let img = tape.constant(Tensor::<f64>::zeros(&[16, 16]));
    let mut tokens: Vec<TokenId> = vec![10, 11, 12, 13, 14];
    tokens.extend(std::iter::repeat_n(TOR, 10));
    let out = emb.embed_sequence(&store, &mut tape, &tokens, Some(img)).unwrap();
    assert_eq!(out.tor_positions, (21..31).collect::<Vec<_>>());
    assert_eq!(tape.shape(out.features), &[31, 16]);
}

#[test]
fn empty_input_rejected() {
    let (emb, store) = embedder_with_store(Architecture::Ssm);
    let mut tape = Tape::new();
    let err = emb.embed_sequence(&store, &mut tape, &[], None).unwrap_err();
    assert!(err.to_string().contains("empty input"));
}

/// Causality probe: the feature at a tor position reacts to earlier
/// rationale tokens and is bit-identical under later-token changes.
#[test]
fn tor_feature_causality_probe() {
    for arch in [Architecture::Ssm, Architecture::Transformer] {
        let (emb, store) = embedder_with_store(arch);
        let run = |tokens: &[TokenId]| {
            let mut tape = Tape::new();
            let out = emb.embed_sequence(&store, &mut tape, tokens, None).unwrap();
            let pos = out.tor_positions[0];
            tape.value(out.features).row(pos).to_vec()
        };
        // rationale: a b <tor> c d -> tor at index 2
        let base: Vec<TokenId> = vec![97, 98, TOR, 99, 100];
        let earlier_changed: Vec<TokenId> = vec![96, 98, TOR, 99, 100];
        let later_changed: Vec<TokenId> = vec![97, 98, TOR, 99, 101];
        let f_base = run(&base);
        assert_ne!(f_base, run(&earlier_changed), "{arch:?}: earlier token must matter");
        let f_later = run(&later_changed);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&f_base), bits(&f_later), "{arch:?}: later token must not leak");
    }
}

#[test]
fn extraction_selects_rows_verbatim() {
    let (emb, store) = embedder_with_store(Architecture::Ssm);
    let proj = TorProjector::new(16, 24);
    let mut store = store;
    proj.init_params(&mut store, &mut rng(14));

    let mut tape = Tape::new();
    let tokens: Vec<TokenId> = vec![TOR, 40, 41, TOR, 42, TOR];
    let out = emb.embed_sequence(&store, &mut tape, &tokens, None).unwrap();
    assert_eq!(out.tor_positions, vec![0, 3, 5]);
    let tor = proj.extract_and_project(&store, &mut tape, &out).unwrap();
    assert_eq!(tor.k, 3);
    let feats = tape.value(out.features).clone();
    let raw = tape.value(tor.raw);
    for (row, &pos) in out.tor_positions.iter().enumerate() {
        assert_eq!(raw.row(row), feats.row(pos));
    }
    assert_eq!(tape.shape(tor.projected), &[3, 24]);
}

#[test]
fn extraction_requires_tor_positions() {
    let (emb, mut store) = embedder_with_store(Architecture::Ssm);
    let proj = TorProjector::new(16, 24);
    proj.init_params(&mut store, &mut rng(15));
    let mut tape = Tape::new();
    let out = emb.embed_sequence(&store, &mut tape, &[1, 2, 3], None).unwrap();
    assert!(matches!(
        proj.extract_and_project(&store, &mut tape, &out),
        Err(crate::Error::Extraction(_))
    ));
}

#[test]
fn tor_projector_gradients() {
    let proj = TorProjector::new(6, 10);
    let mut store = ParamStore::<f64>::new();
    proj.init_params(&mut store, &mut rng(16));
    let mut r = rng(17);
    let features = rand_tensor(&mut r, &[5, 6], -1.0, 1.0);
    let report = grad_check(
        &store,
        |s, tape| {
            let f = tape.variable(features.clone());
            let out = EmbedderOutput { features: f, tor_positions: vec![0, 2, 4], seq_len: 5 };
            let tor = proj.extract_and_project(s, tape, &out)?;
            let sq = tape.mul(tor.projected, tor.projected)?;
            Ok(tape.mean(sq))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{}", report.table());
}

#[test]
fn transformer_swap_preserves_interface() {
    let (emb, store) = embedder_with_store(Architecture::Transformer);
    let mut tape = Tape::new();
    let tokens: Vec<TokenId> = vec![5, TOR, 6, TOR, 7];
    let out = emb.embed_sequence(&store, &mut tape, &tokens, None).unwrap();
    assert_eq!(out.tor_positions, vec![1, 3]);
    assert_eq!(tape.shape(out.features), &[5, 16]);
}

#[test]
fn transformer_block_gradients() {
    let cfg = EmbedderConfig {
        d_emb: 8,
        n_layers: 1,
        d_state: 4,
        expansion: 2,
        conv_kernel: 4,
        architecture: Architecture::Transformer,
    };
    let blk = super::block::TransformerBlock::new("embedder.layers.0".into(), cfg);
    let mut store = ParamStore::<f64>::new();
    blk.init_params(&mut store, &mut rng(18));
    let mut r = rng(19);
    let input = rand_tensor(&mut r, &[4, 8], -1.0, 1.0);
    let report = grad_check(
        &store,
        |s, tape| {
            let x = tape.constant(input.clone());
            let y = blk.forward(s, tape, x)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean(sq))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{}", report.table());
}
