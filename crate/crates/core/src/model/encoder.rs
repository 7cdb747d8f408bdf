//! Pre-normalization transformer encoder over `[CLS; tokens] + pos_enc`,
//! plus the linear reconstruction head and the per-symptom MLP heads.

use super::params::{is_encoder_tensor, ParamStore};
use super::tape::{Tape, Var};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::tokenizer::{MaskPlan, Symptom};

/// Encoder output for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentOutput {
    /// `seq_positions x d_model`; row 0 is the CLS slot.
    pub embeddings: Matrix,
    /// Per layer, attention probabilities as `[head][query][key]`.
    pub attention: Vec<Vec<f64>>,
}

impl LatentOutput {
    pub fn cls(&self) -> &[f64] {
        self.embeddings.row(0)
    }

    pub fn token(&self, t: usize) -> &[f64] {
        self.embeddings.row(t + 1)
    }
}

fn fetch(tape: &mut Tape, store: &ParamStore, name: &str, frozen: bool) -> Result<Var> {
    if frozen && is_encoder_tensor(name) {
        tape.frozen_param(store, name)
    } else {
        tape.param(store, name)
    }
}

fn check(tape: &Tape, v: Var, context: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(context))
    }
}

/// Project a stacked `(batch * tokens) x input_dim` feature matrix and add
/// CLS rows and positional encodings.
pub fn embed(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, features: &Matrix, frozen: bool) -> Result<Var> {
    let per = cfg.tokens_per_sequence();
    if features.cols != cfg.input_dim || features.rows % per != 0 {
        return Err(Error::Validation(format!(
            "features {:?} do not stack {per}-token sequences of width {}",
            features.shape(),
            cfg.input_dim
        )));
    }
    let x = tape.input(features.clone());
    let w = fetch(tape, store, "proj.w", frozen)?;
    let b = fetch(tape, store, "proj.b", frozen)?;
    let tokens = tape.linear(x, w, b);
    let cls = fetch(tape, store, "cls", frozen)?;
    let pos = fetch(tape, store, "pos_enc", frozen)?;
    let out = tape.assemble(tokens, cls, pos);
    check(tape, out, "projection")?;
    Ok(out)
}

/// `n_layers` pre-norm blocks and the final layer norm over blocks of
/// `seq` rows. Returns the output and each layer's attention node.
pub fn transformer_blocks(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    mut x: Var,
    seq: usize,
    frozen: bool,
) -> Result<(Var, Vec<Var>)> {
    let mut attn_nodes = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        let g1 = fetch(tape, store, &p("ln1.gain"), frozen)?;
        let b1 = fetch(tape, store, &p("ln1.bias"), frozen)?;
        let h = tape.layer_norm(x, g1, b1, cfg.layernorm_eps);
        let mut qkv = [h; 3];
        for (slot, name) in qkv.iter_mut().zip(["q", "k", "v"]) {
            let w = fetch(tape, store, &p(&format!("attn.{name}.w")), frozen)?;
            let b = fetch(tape, store, &p(&format!("attn.{name}.b")), frozen)?;
            *slot = tape.linear(h, w, b);
        }
        let a = tape.attention(qkv[0], qkv[1], qkv[2], cfg.n_heads, seq);
        attn_nodes.push(a);
        let wo = fetch(tape, store, &p("attn.o.w"), frozen)?;
        let bo = fetch(tape, store, &p("attn.o.b"), frozen)?;
        let a = tape.linear(a, wo, bo);
        x = tape.add(x, a);

        let g2 = fetch(tape, store, &p("ln2.gain"), frozen)?;
        let b2 = fetch(tape, store, &p("ln2.bias"), frozen)?;
        let h = tape.layer_norm(x, g2, b2, cfg.layernorm_eps);
        let w1 = fetch(tape, store, &p("ff.w1"), frozen)?;
        let fb1 = fetch(tape, store, &p("ff.b1"), frozen)?;
        let w2 = fetch(tape, store, &p("ff.w2"), frozen)?;
        let fb2 = fetch(tape, store, &p("ff.b2"), frozen)?;
        let f = tape.linear(h, w1, fb1);
        let f = tape.relu(f);
        let f = tape.linear(f, w2, fb2);
        x = tape.add(x, f);
        check(tape, x, &format!("layer{l}"))?;
    }
    let g = fetch(tape, store, "final_ln.gain", frozen)?;
    let b = fetch(tape, store, "final_ln.bias", frozen)?;
    let out = tape.layer_norm(x, g, b, cfg.layernorm_eps);
    check(tape, out, "final_ln")?;
    Ok((out, attn_nodes))
}

/// Full encoder on a batch of stacked sequences. Output rows are
/// `(batch * seq_positions) x d_model`.
pub fn encode_batch(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    features: &Matrix,
    frozen: bool,
) -> Result<(Var, Vec<Var>)> {
    let x = embed(tape, store, cfg, features, frozen)?;
    transformer_blocks(tape, store, cfg, x, cfg.seq_positions, frozen)
}

/// Reconstruction of every token row (CLS dropped).
pub fn reconstruct_batch(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, hidden: Var) -> Result<Var> {
    let tokens = tape.drop_first(hidden, cfg.seq_positions);
    let w = tape.param(store, "recon.w")?;
    let b = tape.param(store, "recon.b")?;
    Ok(tape.linear(tokens, w, b))
}

/// `w2 · relu(w1 · x + b1) + b2` on every row of `rows`.
pub fn regress_batch(tape: &mut Tape, store: &ParamStore, rows: Var, symptom: Symptom) -> Result<Var> {
    if !store.has_head(symptom) {
        return Err(Error::UnknownSymptom(symptom.name().to_string()));
    }
    let p = |n: &str| format!("head.{}.{n}", symptom.name());
    let w1 = tape.param(store, &p("w1"))?;
    let b1 = tape.param(store, &p("b1"))?;
    let w2 = tape.param(store, &p("w2"))?;
    let b2 = tape.param(store, &p("b2"))?;
    let h = tape.linear(rows, w1, b1);
    let h = tape.relu(h);
    Ok(tape.linear(h, w2, b2))
}

/// Encode one `tokens x input_dim` sequence. Rows listed in `mask` are
/// zeroed before projection (a no-op when they already are).
pub fn encoder_forward(
    features: &Matrix,
    mask: Option<&MaskPlan>,
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<LatentOutput> {
    if features.rows != cfg.tokens_per_sequence() {
        return Err(Error::Validation(format!(
            "expected {} tokens, got {}",
            cfg.tokens_per_sequence(),
            features.rows
        )));
    }
    let mut x = features.clone();
    if let Some(plan) = mask {
        for &t in &plan.masked_indices {
            x.row_mut(t).fill(0.0);
        }
    }
    let mut tape = Tape::new();
    let (out, attn) = encode_batch(&mut tape, store, cfg, &x, true)?;
    Ok(LatentOutput {
        embeddings: tape.value(out).clone(),
        attention: attn
            .iter()
            .map(|a| tape.attention_probs(*a).expect("attention node").to_vec())
            .collect(),
    })
}

/// Affine map of token rows (CLS excluded) back to feature space.
pub fn reconstruction_head(latent: &LatentOutput, store: &ParamStore) -> Result<Matrix> {
    let w = store.require("recon.w")?;
    let b = store.require("recon.b")?;
    let (d, out_dim) = w.matrix_shape();
    let e = &latent.embeddings;
    if e.cols != d {
        return Err(Error::Validation(format!("latent width {} vs recon input {d}", e.cols)));
    }
    let mut out = Matrix::zeros(e.rows - 1, out_dim);
    crate::tensor::gemm(e.rows - 1, d, out_dim, 1.0, &e.data[d..], false, &w.data, false, 0.0, &mut out.data);
    for row in out.data.chunks_exact_mut(out_dim) {
        for (o, bv) in row.iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Score one embedding row with a symptom head.
pub fn regression_head(latent_row: &[f64], store: &ParamStore, symptom: Symptom) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(Matrix::from_vec(1, latent_row.len(), latent_row.to_vec()));
    let y = regress_batch(&mut tape, store, x, symptom)?;
    Ok(tape.value(y).data[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{init_head, init_params, Tensor};

    #[test]
    fn shape_contract() {
        let cfg = ModelConfig::default();
        let s = init_params(&cfg, 3).unwrap();
        let x = Matrix::from_vec(15, 125, (0..15 * 125).map(|i| (i as f64 * 0.01).sin()).collect());
        let out = encoder_forward(&x, None, &s, &cfg).unwrap();
        assert_eq!(out.embeddings.shape(), (16, 64));
        assert_eq!(out.attention.len(), 2);
        for layer in &out.attention {
            assert_eq!(layer.len(), 4 * 16 * 16);
            for row in layer.chunks_exact(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let again = encoder_forward(&x, None, &s, &cfg).unwrap();
        assert_eq!(out, again);
        let rec = reconstruction_head(&out, &s).unwrap();
        assert_eq!(rec.shape(), (15, 125));
    }

    #[test]
    fn zero_query_key_weights_give_uniform_attention() {
        let cfg = ModelConfig::default();
        let mut s = init_params(&cfg, 3).unwrap();
        for l in 0..cfg.n_layers {
            for n in ["q", "k"] {
                s.get_mut(&format!("layer{l}.attn.{n}.w")).unwrap().data.fill(0.0);
            }
        }
        let out = encoder_forward(&Matrix::zeros(15, 125), None, &s, &cfg).unwrap();
        for layer in &out.attention {
            assert!(layer.iter().all(|p| (p - 1.0 / 16.0).abs() < 1e-15));
        }
    }

    #[test]
    fn mask_plan_zeroes_rows() {
        let cfg = ModelConfig::default();
        let s = init_params(&cfg, 4).unwrap();
        let x = Matrix::from_vec(15, 125, (0..15 * 125).map(|i| (i % 7) as f64).collect());
        let plan = MaskPlan {
            masked_indices: vec![1, 2, 3, 8, 9],
            seed_used: 0,
        };
        let mut zeroed = x.clone();
        for &t in &plan.masked_indices {
            zeroed.row_mut(t).fill(0.0);
        }
        assert_eq!(
            encoder_forward(&x, Some(&plan), &s, &cfg).unwrap(),
            encoder_forward(&zeroed, None, &s, &cfg).unwrap()
        );
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let cfg = ModelConfig {
            input_dim: 5,
            d_model: 8,
            d_ff: 6,
            n_heads: 2,
            n_layers: 2,
            seq_positions: 5,
            layernorm_eps: 1e-5,
        };
        let s = init_params(&cfg, 11).unwrap();
        let x = Matrix::from_vec(4, 5, (0..20).map(|i| (i as f64 * 0.7).cos()).collect());
        let perm = [2usize, 0, 3, 1];
        let mut xp = Matrix::zeros(4, 5);
        for (i, &p) in perm.iter().enumerate() {
            xp.row_mut(i).copy_from_slice(x.row(p));
        }
        let run = |m: &Matrix| {
            let mut tape = Tape::new();
            let xi = tape.input(m.clone());
            let w = tape.param(&s, "proj.w").unwrap();
            let b = tape.param(&s, "proj.b").unwrap();
            let h = tape.linear(xi, w, b);
            let (out, _) = transformer_blocks(&mut tape, &s, &cfg, h, 4, false).unwrap();
            tape.value(out).clone()
        };
        let a = run(&x);
        let b = run(&xp);
        for (i, &p) in perm.iter().enumerate() {
            for (u, v) in b.row(i).iter().zip(a.row(p)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    fn naive_affine(x: &[f64], rows: usize, d: usize, w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * out_dim];
        for i in 0..rows {
            for j in 0..out_dim {
                let mut acc = b[j];
                for k in 0..d {
                    acc += x[i * d + k] * w[k * out_dim + j];
                }
                out[i * out_dim + j] = acc;
            }
        }
        out
    }

    #[test]
    fn reconstruction_head_cases() {
        let cfg = ModelConfig::default();
        let mut s = init_params(&cfg, 1).unwrap();
        let zero = LatentOutput {
            embeddings: Matrix::zeros(16, 64),
            attention: vec![],
        };
        assert!(reconstruction_head(&zero, &s).unwrap().data.iter().all(|&v| v == 0.0));

        let latent = LatentOutput {
            embeddings: Matrix::from_vec(16, 64, (0..16 * 64).map(|i| (i as f64 * 0.13).sin()).collect()),
            attention: vec![],
        };
        s.get_mut("recon.b").unwrap().data = (0..125).map(|i| i as f64 * 0.01).collect();
        let got = reconstruction_head(&latent, &s).unwrap();
        let want = naive_affine(
            &latent.embeddings.data[64..],
            15,
            64,
            &s.get("recon.w").unwrap().data,
            &s.get("recon.b").unwrap().data,
            125,
        );
        for (a, b) in got.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }

        // Identity weights with d_model = 125 pass token rows through.
        let mut ident = ParamStore::new();
        let mut w = Tensor::zeros(&[125, 125]);
        for i in 0..125 {
            w.data[i * 125 + i] = 1.0;
        }
        ident.insert("recon.w", w);
        ident.insert("recon.b", Tensor::zeros(&[125]));
        let wide = LatentOutput {
            embeddings: Matrix::from_vec(16, 125, (0..16 * 125).map(|i| i as f64).collect()),
            attention: vec![],
        };
        let pass = reconstruction_head(&wide, &ident).unwrap();
        assert_eq!(pass.data, wide.embeddings.data[125..].to_vec());
    }

    #[test]
    fn regression_head_cases() {
        let cfg = ModelConfig::default();
        let mut s = init_params(&cfg, 1).unwrap();
        assert!(matches!(
            regression_head(&[0.0; 64], &s, Symptom::Dyskinesia),
            Err(Error::UnknownSymptom(_))
        ));
        init_head(&mut s, &cfg, Symptom::Dyskinesia, 32, 0);
        for (n, t) in s.iter_mut() {
            if n.starts_with("head.") {
                t.data.fill(0.0);
            }
        }
        assert_eq!(regression_head(&[0.0; 64], &s, Symptom::Dyskinesia).unwrap(), 0.0);

        let mut toy = ParamStore::new();
        toy.insert("head.bradykinesia.w1", Tensor { shape: vec![2, 2], data: vec![1.0, 0.0, 0.0, 1.0] });
        toy.insert("head.bradykinesia.b1", Tensor::zeros(&[2]));
        toy.insert("head.bradykinesia.w2", Tensor { shape: vec![2, 1], data: vec![1.0, 1.0] });
        toy.insert("head.bradykinesia.b2", Tensor::zeros(&[1]));
        assert_eq!(regression_head(&[-1.0, 2.0], &toy, Symptom::Bradykinesia).unwrap(), 2.0);

        toy.get_mut("head.bradykinesia.b2").unwrap().data[0] = 0.75;
        assert_eq!(regression_head(&[-1.0, -2.0], &toy, Symptom::Bradykinesia).unwrap(), 0.75);
    }

    #[test]
    fn non_finite_parameters_name_the_stage() {
        let cfg = ModelConfig::default();
        let mut s = init_params(&cfg, 1).unwrap();
        s.get_mut("layer1.ff.b2").unwrap().data[0] = f64::INFINITY;
        let err = encoder_forward(&Matrix::zeros(15, 125), None, &s, &cfg).unwrap_err();
        match err {
            Error::Numeric { context } => assert_eq!(context, "layer1"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
