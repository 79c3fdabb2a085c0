use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::check_fn;

fn window(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..cfg.channels * cfg.window_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(cfg.channels, cfg.window_len, data).unwrap()
}

fn bands(cfg: &ModelConfig, seed: u64) -> Vec<Tensor<f64>> {
    (0..cfg.num_branches).map(|b| window(cfg, seed * 100 + b as u64 + 1)).collect()
}

// plain nested-loop reference for the raw-only path
mod naive {
    use super::*;

    pub type M = Vec<Vec<f64>>;

    fn p(m: &MbmdModel<f64>, name: &str) -> M {
        let t = m.params().by_name(name).unwrap_or_else(|| panic!("missing {name}"));
        (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
    }

    fn lin(x: &M, w: &M, b: &M) -> M {
        x.iter().map(|row| (0..w[0].len()).map(|j| b[0][j] + row.iter().zip(w).map(|(xi, wr)| xi * wr[j]).sum::<f64>()).collect()).collect()
    }

    fn ln(x: &M, g: &M, b: &M) -> M {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                row.iter().enumerate().map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[0][j] + b[0][j]).collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn ffn(m: &MbmdModel<f64>, x: &M, pre: &str) -> M {
        let h: M = lin(x, &p(m, &format!("{pre}.w1")), &p(m, &format!("{pre}.b1")))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        lin(&h, &p(m, &format!("{pre}.w2")), &p(m, &format!("{pre}.b2")))
    }

    fn add(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
    }

    fn attention(m: &MbmdModel<f64>, x: &M, pre: &str) -> M {
        let h = ln(x, &p(m, &format!("{pre}.ln.g")), &p(m, &format!("{pre}.ln.b")));
        let q = lin(&h, &p(m, &format!("{pre}.wq")), &p(m, &format!("{pre}.bq")));
        let k = lin(&h, &p(m, &format!("{pre}.wk")), &p(m, &format!("{pre}.bk")));
        let v = lin(&h, &p(m, &format!("{pre}.wv")), &p(m, &format!("{pre}.bv")));
        let t = x.len();
        let d = x[0].len();
        let heads = m.config().num_heads;
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; t];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..t {
                let s: Vec<f64> = (0..t).map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()).collect();
                let a = crate::losses::softmax(&s);
                for c in cols.clone() {
                    out[i][c] = (0..t).map(|j| a[j] * v[j][c]).sum();
                }
            }
        }
        add(x, &lin(&out, &p(m, &format!("{pre}.wo")), &p(m, &format!("{pre}.bo"))))
    }

    pub fn logits(m: &MbmdModel<f64>, w: &Tensor<f64>) -> Vec<f64> {
        let cfg = m.config();
        let pp = cfg.patch_size;
        let toks: M = w.data().chunks(pp).map(<[f64]>::to_vec).collect();
        let pos = p(m, "pos");
        let mut x = add(&lin(&toks, &p(m, "patch.w"), &p(m, "patch.b")), &pos);
        let b = cfg.branches();
        let weights = match cfg.ensemble_mode {
            EnsembleMode::WaveletAttention if b > 0 => crate::losses::softmax(&p(m, "wavelet.w")[0]),
            _ => vec![1.0 / b.max(1) as f64; b.max(1)],
        };
        for (i, kind) in cfg.blocks().into_iter().enumerate() {
            x = attention(m, &x, &format!("block{i}.attn"));
            let h = ln(&x, &p(m, &format!("block{i}.ffn.ln.g")), &p(m, &format!("block{i}.ffn.ln.b")));
            let f = match kind {
                BlockKind::Traditional => ffn(m, &h, &format!("block{i}.ffn")),
                BlockKind::MultiBranch => {
                    let mut acc = vec![vec![0.0; cfg.embed_dim]; x.len()];
                    for (e, we) in weights.iter().enumerate() {
                        let o = ffn(m, &h, &format!("block{i}.expert{e}"));
                        for (ar, orow) in acc.iter_mut().zip(&o) {
                            for (a, v) in ar.iter_mut().zip(orow) {
                                *a += we * v;
                            }
                        }
                    }
                    acc
                }
            };
            x = add(&x, &f);
        }
        let x = ln(&x, &p(m, "final.ln.g"), &p(m, "final.ln.b"));
        let pooled: Vec<f64> = (0..cfg.embed_dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64).collect();
        let mut z = vec![0.0; cfg.num_classes];
        for (h, we) in weights.iter().enumerate() {
            let o = lin(&vec![pooled.clone()], &p(m, &format!("head{h}.w")), &p(m, &format!("head{h}.b")));
            for (zz, v) in z.iter_mut().zip(&o[0]) {
                *zz += we * v;
            }
        }
        z
    }
}

fn randomize(m: &mut MbmdModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

#[test]
fn patchify_is_channel_major_reshape() {
    let w = Tensor::matrix(2, 8, (0..16).map(f64::from).collect()).unwrap();
    let t = patchify(&w, 4).unwrap();
    assert_eq!(t.shape(), &[4, 4]);
    assert_eq!(t.row_slice(2), &[8.0, 9.0, 10.0, 11.0]);
    assert!(patchify(&w, 3).is_err());
}

#[test]
fn forward_matches_straight_line_reference() {
    for mode in [EnsembleMode::WaveletAttention, EnsembleMode::Average] {
        for pattern in ["TM", "TT", "MM"] {
            let cfg = ModelConfig { ensemble_mode: mode, block_pattern: pattern.into(), ..ModelConfig::micro() };
            let mut m = MbmdModel::<f64>::new(cfg.clone(), 7).unwrap();
            randomize(&mut m, 11);
            let x = window(&cfg, 3);
            let got = m.forward_infer(&[&x]).unwrap();
            let want = naive::logits(&m, &x);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{pattern} {mode:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn output_shapes() {
    let cfg = ModelConfig { concat_head: true, ..ModelConfig::micro() };
    let m = MbmdModel::<f64>::new(cfg.clone(), 1).unwrap();
    let xs: Vec<_> = (0..3).map(|i| window(&cfg, i)).collect();
    let bs: Vec<_> = (0..3).map(|i| bands(&cfg, i)).collect();
    let raw: Vec<_> = xs.iter().collect();
    let bref: Vec<Vec<_>> = bs.iter().map(|s| s.iter().collect()).collect();
    let mut g = Graph::new();
    let out = m.forward_train(&mut g, &raw, &bref).unwrap();
    assert_eq!(g.value(out.z_data).shape(), &[3, 2]);
    assert_eq!(out.z_branch.len(), 2);
    assert_eq!(out.reps.len(), 3);
    assert_eq!(g.value(out.reps[1]).shape(), &[3, 8]);
    assert_eq!(g.value(out.concat_logits.unwrap()).shape(), &[3, 2]);
    assert_eq!(g.value(out.wavelet_w.unwrap()).shape(), &[1, 2]);
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = ModelConfig::micro();
    let m = MbmdModel::<f64>::new(cfg.clone(), 1).unwrap();
    let short = Tensor::<f64>::zeros(&[1, 32]);
    assert!(matches!(m.forward_infer(&[&short]), Err(ModelError::Shape(_))));
    let x = window(&cfg, 0);
    let one_band = vec![vec![&x]];
    let mut g = Graph::new();
    assert!(matches!(m.forward_train(&mut g, &[&x], &one_band), Err(ModelError::BandCount { expected: 2, got: 1 })));
    assert!(m.forward_infer(&[]).is_err());
    assert!(matches!(m.stream_param_names(Stream::Band(5)), Err(ModelError::UnknownStream(5))));
}

fn train_outputs(m: &MbmdModel<f64>, xs: &[Tensor<f64>], bs: &[Vec<Tensor<f64>>]) -> ForwardOutputs {
    let raw: Vec<_> = xs.iter().collect();
    let bref: Vec<Vec<_>> = bs.iter().map(|s| s.iter().collect()).collect();
    let mut g = Graph::new();
    let out = m.forward_train(&mut g, &raw, &bref).unwrap();
    MbmdModel::outputs(&g, &out)
}

#[test]
fn streams_are_isolated() {
    let cfg = ModelConfig::micro();
    let mut m = MbmdModel::<f64>::new(cfg.clone(), 2).unwrap();
    randomize(&mut m, 5);
    let xs = vec![window(&cfg, 1), window(&cfg, 2)];
    let bs = vec![bands(&cfg, 1), bands(&cfg, 2)];
    let base = train_outputs(&m, &xs, &bs);

    let mut bs2 = bs.clone();
    bs2[0][1] = window(&cfg, 99);
    let moved = train_outputs(&m, &xs, &bs2);
    assert_eq!(base.z_data, moved.z_data);
    assert_eq!(base.z_branch[0], moved.z_branch[0]);
    assert_eq!(base.z_branch[1][1], moved.z_branch[1][1], "other samples untouched");
    assert_ne!(base.z_branch[1][0], moved.z_branch[1][0]);

    let mut xs2 = xs.clone();
    xs2[1] = window(&cfg, 77);
    let moved = train_outputs(&m, &xs2, &bs);
    assert_eq!(base.z_branch, moved.z_branch);
    assert_eq!(base.z_data[0], moved.z_data[0]);
    assert_ne!(base.z_data[1], moved.z_data[1]);
}

#[test]
fn inference_does_not_need_bands() {
    for mode in [EnsembleMode::WaveletAttention, EnsembleMode::Average, EnsembleMode::GateNetwork] {
        let cfg = ModelConfig { ensemble_mode: mode, ..ModelConfig::micro() };
        let mut m = MbmdModel::<f64>::new(cfg.clone(), 3).unwrap();
        randomize(&mut m, 8);
        let xs = vec![window(&cfg, 4), window(&cfg, 5)];
        let train = train_outputs(&m, &xs, &[bands(&cfg, 4), bands(&cfg, 5)]);
        let infer = m.forward_infer(&[&xs[0], &xs[1]]).unwrap();
        for (r, row) in train.z_data.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((infer.at(r, c) - v).abs() < 1e-12, "{mode:?}");
            }
        }
        // batching does not leak across samples
        let single = m.forward_infer(&[&xs[1]]).unwrap();
        assert!(single.row_slice(0).iter().zip(infer.row_slice(1)).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn wavelet_attention_is_shift_invariant() {
    let cfg = ModelConfig::micro();
    let mut m = MbmdModel::<f64>::new(cfg.clone(), 4).unwrap();
    randomize(&mut m, 9);
    let x = window(&cfg, 6);
    let a = m.forward_infer(&[&x]).unwrap();
    for v in m.params_mut().by_name_mut("wavelet.w").unwrap().data_mut() {
        *v += 3.25;
    }
    let b = m.forward_infer(&[&x]).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn zero_attention_vector_equals_average() {
    let cfg = ModelConfig::micro();
    let wav = MbmdModel::<f64>::new(cfg.clone(), 12).unwrap();
    let avg = MbmdModel::<f64>::new(ModelConfig { ensemble_mode: EnsembleMode::Average, ..cfg.clone() }, 12).unwrap();
    assert!(wav.params().by_name("wavelet.w").unwrap().data().iter().all(|&v| v == 0.0));
    for (name, t) in avg.params().iter() {
        assert_eq!(t, wav.params().by_name(name).unwrap(), "{name}");
    }
    let x = window(&cfg, 1);
    let a = wav.forward_infer(&[&x]).unwrap();
    let b = avg.forward_infer(&[&x]).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
    assert_eq!(wav.wavelet_weights().unwrap(), vec![0.5, 0.5]);
}

#[test]
fn gate_network_starts_uniform() {
    let cfg = ModelConfig { ensemble_mode: EnsembleMode::GateNetwork, ..ModelConfig::micro() };
    let m = MbmdModel::<f64>::new(cfg.clone(), 3).unwrap();
    let xs = [window(&cfg, 1), window(&cfg, 2)];
    let raw: Vec<_> = xs.iter().collect();
    let mut g = Graph::new();
    let out = m.forward(&mut g, &StreamBatch { raw, bands: None }).unwrap();
    let gate = g.value(out.gate.unwrap());
    assert_eq!(gate.shape(), &[2, 2]);
    assert!(gate.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
}

#[test]
fn vanilla_pattern_is_single_stream() {
    let cfg = ModelConfig { block_pattern: "TT".into(), ..ModelConfig::micro() };
    let m = MbmdModel::<f64>::new(cfg.clone(), 3).unwrap();
    assert!(m.params().by_name("head1.w").is_none());
    assert!(m.params().by_name("wavelet.w").is_none());
    assert!(m.wavelet_weights().is_none());
    let x = window(&cfg, 1);
    let b = bands(&cfg, 1);
    let mut g = Graph::new();
    let out = m.forward_train(&mut g, &[&x], &[b.iter().collect()]).unwrap();
    assert!(out.z_branch.is_empty());
    assert_eq!(out.reps.len(), 1);
}

#[test]
fn shared_parameters_receive_gradient_from_every_stream() {
    let cfg = ModelConfig::micro();
    let mut m = MbmdModel::<f64>::new(cfg.clone(), 5).unwrap();
    randomize(&mut m, 1);
    let x = window(&cfg, 1);
    let b = bands(&cfg, 1);
    for branch in 0..cfg.num_branches {
        let mut g = Graph::new();
        let out = m.forward_train(&mut g, &[&x], &[b.iter().collect()]).unwrap();
        let loss = g.sum(out.z_branch[branch]).unwrap();
        let grads = g.backward(loss).unwrap();
        let touched = m.stream_param_names(Stream::Band(branch)).unwrap();
        for (i, name) in m.params().names().iter().enumerate() {
            let nonzero = grads.get(out.params[i]).is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
            let head = name.starts_with(&format!("head{branch}."));
            let final_ln = name.starts_with("final.");
            assert_eq!(nonzero, touched.contains(name) || head || final_ln, "branch {branch}: {name}");
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for mode in [EnsembleMode::WaveletAttention, EnsembleMode::GateNetwork] {
        let cfg = ModelConfig { ensemble_mode: mode, concat_head: true, dropout: 0.2, ..ModelConfig::micro() };
        let mut m = MbmdModel::<f64>::new(cfg.clone(), 21).unwrap();
        randomize(&mut m, 2);
        let xs = [window(&cfg, 1), window(&cfg, 2)];
        let bs = [bands(&cfg, 1), bands(&cfg, 2)];
        let raw: Vec<_> = xs.iter().collect();
        let bref: Vec<Vec<_>> = bs.iter().map(|s| s.iter().collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe: Vec<f64> = (0..4 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let inputs = m.params().tensors().to_vec();
        let res = check_fn(&inputs, 1e-5, Some(17), |g, vars| {
            let batch = StreamBatch { raw: raw.clone(), bands: Some(bref.clone()) };
            let out = m.forward_with_params(g, &batch, vars.to_vec()).map_err(|e| DiffError::Contract(e.to_string()))?;
            let mut terms = vec![out.z_data];
            terms.extend(&out.z_branch);
            terms.push(out.concat_logits.unwrap());
            let cat = g.concat(&terms, 0)?;
            let probe = g.input(Tensor::matrix(8, 2, probe.clone())?)?;
            let prod = g.mul(cat, probe)?;
            g.sum(prod)
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-4, "{mode:?}: {res:?}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig { ensemble_mode: EnsembleMode::GateNetwork, ..ModelConfig::micro() };
    let m = MbmdModel::<f32>::new(cfg.clone(), 9).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back: MbmdModel<f32> = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back.config(), &cfg);
    for ((n1, a), (n2, b)) in m.params().iter().zip(back.params().iter()) {
        assert_eq!(n1, n2);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let x = window(&cfg, 1).cast::<f32>();
    assert_eq!(m.forward_infer(&[&x]).unwrap(), back.forward_infer(&[&x]).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let loaded: MbmdModel<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.params().names(), m.params().names());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = MbmdModel::<f32>::new(ModelConfig::micro(), 9).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(read_checkpoint::<f32>(&mut bad_magic.as_slice()).is_err());
    let truncated = &buf[..buf.len() - 3];
    assert!(read_checkpoint::<f32>(&mut &truncated[..]).is_err());
    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(read_checkpoint::<f32>(&mut trailing.as_slice()).is_err());
}
