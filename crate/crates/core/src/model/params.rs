use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::adcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

struct Layout {
    d: usize,
    ff: usize,
    items: Vec<(String, (usize, usize), Init)>,
}

impl Layout {
    fn push(&mut self, name: String, shape: (usize, usize), init: Init) {
        self.items.push((name, shape, init));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{prefix}.w"), (fan_in, fan_out), Init::Xavier);
        self.push(format!("{prefix}.b"), (1, fan_out), Init::Zeros);
    }

    fn norm(&mut self, prefix: &str) {
        self.push(format!("{prefix}.g"), (1, self.d), Init::Ones);
        self.push(format!("{prefix}.b"), (1, self.d), Init::Zeros);
    }

    fn attention(&mut self, prefix: &str) {
        for part in ["q", "k", "v", "o"] {
            self.push(format!("{prefix}.w{part}"), (self.d, self.d), Init::Xavier);
            self.push(format!("{prefix}.b{part}"), (1, self.d), Init::Zeros);
        }
    }

    fn feed_forward(&mut self, prefix: &str) {
        self.linear(&format!("{prefix}.ff1"), self.d, self.ff);
        self.linear(&format!("{prefix}.ff2"), self.ff, self.d);
    }
}

/// Name, shape and initializer of every tensor implied by a config.
fn layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = cfg.hidden;
    let mut l = Layout {
        d,
        ff: cfg.ff_dim,
        items: Vec::new(),
    };
    l.linear("embed.proj", cfg.downsample * cfg.feature_dim, d);
    for (stack, n) in [("gls", cfg.gls_layers), ("txt", cfg.txt_layers)] {
        for i in 0..n {
            let p = format!("{stack}.{i}");
            l.norm(&format!("{p}.ln1"));
            l.attention(&format!("{p}.attn"));
            l.norm(&format!("{p}.ln2"));
            l.feed_forward(&p);
        }
        if n > 0 {
            l.norm(&format!("{stack}.ln"));
        }
    }
    for i in 0..cfg.dec_layers {
        let p = format!("dec.{i}");
        l.norm(&format!("{p}.ln1"));
        l.attention(&format!("{p}.self"));
        l.norm(&format!("{p}.ln2"));
        l.attention(&format!("{p}.cross"));
        l.norm(&format!("{p}.ln3"));
        l.feed_forward(&p);
    }
    l.norm("dec.ln");
    l.push("dec.embed".into(), (cfg.text_vocab + 2, d), Init::Xavier);
    l.linear("dec.out", d, cfg.decoder_classes());
    l.linear("gls_ctc", d, cfg.gloss_vocab + 1);
    if cfg.has_txt_ctc() {
        l.linear("txt_ctc", d, cfg.text_vocab + 1);
    }
    l.items
}

/// Named tensor table; iteration order is the lexicographic name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Xavier-uniform weights scaled by `init_gain`, zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut specs = layout(cfg);
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, (r, c), init) in specs {
            let t = match init {
                Init::Zeros => Tensor::zeros(r, c),
                Init::Ones => Tensor::full(r, c, 1.0),
                Init::Xavier => {
                    let a = cfg.init_gain * (6.0 / (r + c) as f64).sqrt();
                    let data = (0..r * c).map(|_| rng.random_range(-a..a)).collect();
                    Tensor::from_vec(r, c, data).expect("shape from layout")
                }
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// Expected `(name, shape)` pairs for `cfg`, sorted by name.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let mut v: Vec<_> = layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect();
        v.sort();
        v
    }

    /// Builds a table from loaded tensors, checking names and shapes against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self, ModelError> {
        let expected = Self::expected_shapes(cfg);
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(ModelError::MissingTensor(name.clone())),
                Some(t) if t.shape() != *shape => {
                    return Err(ModelError::Shape {
                        name: name.clone(),
                        expected: *shape,
                        found: t.shape(),
                    })
                }
                Some(t) if !t.is_finite() => return Err(ModelError::NonFinite(name.clone())),
                _ => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.iter().any(|(n, _)| n == *k)) {
            return Err(ModelError::UnexpectedTensor(extra.clone()));
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> std::collections::btree_map::Iter<'_, String, Tensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}
