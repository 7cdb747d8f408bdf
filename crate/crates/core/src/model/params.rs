use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tokenizer::Symptom;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) when viewed as a matrix; vectors are a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[0], other[1..].iter().product()),
        }
    }
}

/// Named tensors in canonical insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamSubset {
    /// Projection, positional encoding, CLS, transformer layers, final norm.
    Encoder,
    Recon,
    Heads,
    All,
    Names(Vec<String>),
}

impl ParamSubset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "encoder" => Ok(ParamSubset::Encoder),
            "recon" => Ok(ParamSubset::Recon),
            "heads" => Ok(ParamSubset::Heads),
            "all" => Ok(ParamSubset::All),
            other => Err(Error::UnknownSubset(other.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        match self {
            ParamSubset::Encoder => is_encoder_tensor(name),
            ParamSubset::Recon => name.starts_with("recon."),
            ParamSubset::Heads => name.starts_with("head."),
            ParamSubset::All => true,
            ParamSubset::Names(names) => names.iter().any(|n| n == name),
        }
    }
}

pub(crate) fn is_encoder_tensor(name: &str) -> bool {
    !name.starts_with("recon.") && !name.starts_with("head.")
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::State(format!("parameter `{name}` missing from store")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    /// Names and shapes match exactly, in order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, ta), (b, tb))| a == b && ta.shape == tb.shape)
    }

    pub fn has_head(&self, symptom: Symptom) -> bool {
        self.contains(&format!("head.{}.w1", symptom.name()))
    }
}

/// Sum of element counts over a subset. Unknown names are errors.
pub fn param_count(store: &ParamStore, subset: &ParamSubset) -> Result<usize> {
    if let ParamSubset::Names(names) = subset {
        return names
            .iter()
            .map(|n| store.require(n).map(Tensor::numel).map_err(|_| Error::UnknownSubset(n.clone())))
            .sum();
    }
    Ok(store
        .iter()
        .filter(|(n, _)| subset.contains(n))
        .map(|(_, t)| t.numel())
        .sum())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor {
        shape: shape.to_vec(),
        data: (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-bound..=bound))
            .collect(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], sd: f64) -> Tensor {
    let dist = Normal::new(0.0, sd).expect("valid sd");
    Tensor {
        shape: shape.to_vec(),
        data: (0..shape.iter().product::<usize>()).map(|_| dist.sample(rng)).collect(),
    }
}

fn linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, w_name: &str, b_name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.{w_name}"), uniform(rng, &[fan_in, fan_out], fan_in));
    store.insert(format!("{prefix}.{b_name}"), Tensor::zeros(&[fan_out]));
}

/// Fresh encoder plus reconstruction head. Weights are `x·W` oriented
/// (`[fan_in, fan_out]`).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let d = cfg.d_model;
    linear(&mut s, &mut rng, "proj", "w", "b", cfg.input_dim, d);
    s.insert("pos_enc", gaussian(&mut rng, &[cfg.seq_positions, d], 0.02));
    s.insert("cls", gaussian(&mut rng, &[d], 0.02));
    for l in 0..cfg.n_layers {
        let p = format!("layer{l}");
        for ln in ["ln1", "ln2"] {
            s.insert(format!("{p}.{ln}.gain"), Tensor::filled(&[d], 1.0));
            s.insert(format!("{p}.{ln}.bias"), Tensor::zeros(&[d]));
        }
        for proj in ["q", "k", "v", "o"] {
            linear(&mut s, &mut rng, &format!("{p}.attn.{proj}"), "w", "b", d, d);
        }
        linear(&mut s, &mut rng, &format!("{p}.ff"), "w1", "b1", d, cfg.d_ff);
        linear(&mut s, &mut rng, &format!("{p}.ff"), "w2", "b2", cfg.d_ff, d);
    }
    s.insert("final_ln.gain", Tensor::filled(&[d], 1.0));
    s.insert("final_ln.bias", Tensor::zeros(&[d]));
    linear(&mut s, &mut rng, "recon", "w", "b", d, cfg.input_dim);
    Ok(s)
}

/// Add (or replace) a two-layer regression head for one symptom.
pub fn init_head(store: &mut ParamStore, cfg: &ModelConfig, symptom: Symptom, hidden: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
    let p = format!("head.{}", symptom.name());
    linear(store, &mut rng, &p, "w1", "b1", cfg.d_model, hidden);
    linear(store, &mut rng, &p, "w2", "b2", hidden, 1);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(store: &ParamStore, prefix: &str) -> usize {
        store.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    #[test]
    fn paper_config_encoder_count() {
        let s = init_params(&ModelConfig::default(), 0).unwrap();
        assert_eq!(param_count(&s, &ParamSubset::Encoder).unwrap(), 51_456);
        assert_eq!(count(&s, "proj."), 8_064);
        assert_eq!(count(&s, "pos_enc"), 1_024);
        assert_eq!(count(&s, "cls"), 64);
        assert_eq!(count(&s, "layer0."), 21_088);
        assert_eq!(count(&s, "layer1."), 21_088);
        assert_eq!(count(&s, "layer0.attn."), 16_640);
        assert_eq!(count(&s, "layer0.ff."), 4_192);
        assert_eq!(count(&s, "layer0.ln"), 256);
        assert_eq!(count(&s, "final_ln."), 128);
        assert_eq!(param_count(&s, &ParamSubset::Recon).unwrap(), 8_125);
        assert_eq!(param_count(&s, &ParamSubset::Names(vec![])).unwrap(), 0);
    }

    #[test]
    fn toy_config_encoder_count() {
        let s = init_params(&ModelConfig::toy(), 0).unwrap();
        assert_eq!(param_count(&s, &ParamSubset::Encoder).unwrap(), 154);
        assert_eq!(count(&s, "proj."), 16);
        assert_eq!(count(&s, "pos_enc"), 8);
        assert_eq!(count(&s, "cls"), 4);
        assert_eq!(count(&s, "layer0."), 118);
        assert_eq!(count(&s, "final_ln."), 8);
    }

    #[test]
    fn unknown_subset() {
        assert!(matches!(ParamSubset::parse("decoder"), Err(Error::UnknownSubset(_))));
        let s = init_params(&ModelConfig::toy(), 0).unwrap();
        assert!(param_count(&s, &ParamSubset::Names(vec!["nope".into()])).is_err());
    }

    #[test]
    fn init_is_deterministic_and_follows_scheme() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, 5).unwrap();
        assert_eq!(a, init_params(&cfg, 5).unwrap());
        assert_ne!(a, init_params(&cfg, 6).unwrap());
        let bound = (1.0f64 / 125.0).sqrt();
        assert!(a.get("proj.w").unwrap().data.iter().all(|v| v.abs() <= bound));
        assert!(a.get("proj.b").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(a.get("layer1.ln2.gain").unwrap().data.iter().all(|&v| v == 1.0));
        let pos = &a.get("pos_enc").unwrap().data;
        let sd = (pos.iter().map(|v| v * v).sum::<f64>() / pos.len() as f64).sqrt();
        assert!((sd - 0.02).abs() < 0.003);
    }

    #[test]
    fn heads_are_outside_encoder_count() {
        let cfg = ModelConfig::default();
        let mut s = init_params(&cfg, 1).unwrap();
        init_head(&mut s, &cfg, Symptom::Bradykinesia, 32, 9);
        assert!(s.has_head(Symptom::Bradykinesia));
        assert!(!s.has_head(Symptom::Dyskinesia));
        assert_eq!(param_count(&s, &ParamSubset::Encoder).unwrap(), 51_456);
        assert_eq!(param_count(&s, &ParamSubset::Heads).unwrap(), 64 * 32 + 32 + 32 + 1);
    }
}
