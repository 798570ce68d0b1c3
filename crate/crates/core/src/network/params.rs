use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::NetworkConfig;
use crate::diff::{Checkpoint, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Attention pooling parameters: scores are `tanh(x W + b) . u`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionIdx {
    pub w: usize,
    pub b: usize,
    pub u: usize,
}

/// GRU parameters with gates packed as `[update | reset | candidate]`.
#[derive(Clone, Copy, Debug)]
pub struct GruIdx {
    pub w_x: usize,
    pub w_h: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SelfAttentionIdx {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Positions of every parameter group inside [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub token: AttentionIdx,
    pub gru_fwd: GruIdx,
    pub gru_bwd: GruIdx,
    /// `k` entries with article attention, one shared entry otherwise.
    pub sentence: Vec<AttentionIdx>,
    pub interaction_b: SelfAttentionIdx,
    pub interaction_a: SelfAttentionIdx,
    pub heads_b: Vec<HeadIdx>,
    pub heads_a: Vec<HeadIdx>,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        self.specs.push(Spec {
            name,
            shape: shape.to_vec(),
            fan_in,
        });
        self.specs.len() - 1
    }

    fn attention(&mut self, prefix: &str, d_in: usize, d_att: usize) -> AttentionIdx {
        AttentionIdx {
            w: self.add(format!("{prefix}.w"), &[d_in, d_att], d_in),
            b: self.add(format!("{prefix}.b"), &[d_att], d_in),
            u: self.add(format!("{prefix}.u"), &[d_att, 1], d_att),
        }
    }

    fn gru(&mut self, prefix: &str, d_in: usize, h: usize) -> GruIdx {
        GruIdx {
            w_x: self.add(format!("{prefix}.w_x"), &[d_in, 3 * h], d_in),
            w_h: self.add(format!("{prefix}.w_h"), &[h, 3 * h], h),
            b: self.add(format!("{prefix}.b"), &[3 * h], h),
        }
    }

    fn self_attention(&mut self, prefix: &str, w: usize, inner: usize) -> SelfAttentionIdx {
        SelfAttentionIdx {
            q: self.add(format!("{prefix}.q"), &[w, inner], w),
            k: self.add(format!("{prefix}.k"), &[w, inner], w),
            v: self.add(format!("{prefix}.v"), &[w, inner], w),
            o: self.add(format!("{prefix}.o"), &[inner, w], inner),
        }
    }

    fn head(&mut self, prefix: &str, w: usize, hidden: usize) -> HeadIdx {
        HeadIdx {
            w1: self.add(format!("{prefix}.w1"), &[w, hidden], w),
            b1: self.add(format!("{prefix}.b1"), &[hidden], w),
            w2: self.add(format!("{prefix}.w2"), &[hidden, 1], hidden),
            b2: self.add(format!("{prefix}.b2"), &[1], hidden),
        }
    }
}

fn build(config: &NetworkConfig) -> (Layout, Vec<Spec>) {
    let mut b = Builder { specs: Vec::new() };
    let wb = config.width_b();
    let wa = config.width_a();
    let inner = config.attention_inner();
    let token = b.attention("token_attention", config.d_e, config.d_att_tok);
    let gru_fwd = b.gru("gru.forward", config.d_e, config.d_gru);
    let gru_bwd = b.gru("gru.backward", config.d_e, config.d_gru);
    let sentence = if config.article_attention {
        (0..config.k)
            .map(|i| b.attention(&format!("article_attention.{i}"), wb, config.d_att_sent))
            .collect()
    } else {
        vec![b.attention("shared_attention", wb, config.d_att_sent)]
    };
    let interaction_b = b.self_attention("interaction_b", wb, inner);
    let interaction_a = b.self_attention("interaction_a", wa, inner);
    let heads_b = (0..config.k)
        .map(|i| b.head(&format!("head_b.{i}"), wb, config.d_cls))
        .collect();
    let heads_a = (0..config.k)
        .map(|i| b.head(&format!("head_a.{i}"), wa, config.d_cls))
        .collect();
    (
        Layout {
            token,
            gru_fwd,
            gru_bwd,
            sentence,
            interaction_b,
            interaction_a,
            heads_b,
            heads_a,
        },
        b.specs,
    )
}

/// All trainable tensors of the network, in a fixed order derived from the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: NetworkConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters recorded as leaves on one tape.
pub struct BoundParams<'a> {
    pub layout: Layout,
    pub config: &'a NetworkConfig,
    pub vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

impl ModelParams {
    /// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, specs) = build(config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            let n: usize = spec.shape.iter().product();
            let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
            tensors.push(Tensor::new(spec.shape, values)?);
            names.push(spec.name);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// All-zero parameters; handy for hand-built instances in tests.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let (_, specs) = build(config);
        Ok(Self {
            config: config.clone(),
            names: specs.iter().map(|s| s.name.clone()).collect(),
            tensors: specs.iter().map(|s| Tensor::zeros(&s.shape)).collect(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        build(&self.config).0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape, requires_grad: bool) -> BoundParams<'a> {
        BoundParams {
            layout: self.layout(),
            config: &self.config,
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    /// Same config with tensors replaced; shapes must match the layout.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Schema(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Schema(format!(
                    "{}: shape {:?}, expected {:?}",
                    self.names[i],
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors,
        })
    }

    pub fn config_sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".config.json");
        PathBuf::from(s)
    }

    /// Writes the checkpoint to `path` and the network config next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_tensors(self.names.iter().map(String::as_str).zip(&self.tensors)).save(path)?;
        let sidecar = Self::config_sidecar(path);
        let json = serde_json::to_string_pretty(&self.config)?;
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = Self::config_sidecar(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let config: NetworkConfig = serde_json::from_str(&text)?;
        let template = Self::zeros(&config)?;
        let entries = Checkpoint::load(path)?.tensors()?;
        if entries.len() != template.names.len() {
            return Err(Error::Schema(format!(
                "{}: {} tensors, config implies {}",
                path.display(),
                entries.len(),
                template.names.len()
            )));
        }
        let mut tensors = Vec::with_capacity(entries.len());
        for ((name, t), expected) in entries.into_iter().zip(&template.names) {
            if &name != expected {
                return Err(Error::Schema(format!(
                    "{}: found parameter {name}, expected {expected}",
                    path.display()
                )));
            }
            tensors.push(t);
        }
        template.with_tensors(tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            k: 3,
            d_e: 4,
            d_att_tok: 3,
            d_gru: 2,
            d_att_sent: 3,
            heads: 2,
            d_cls: 3,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = ModelParams::init(&tiny(), 1).unwrap();
        let idx = p.index_of("gru.forward.w_x").unwrap();
        let bound = 1.0 / 2.0; // fan_in = d_e = 4
        assert!(p.tensors()[idx].values().iter().all(|v| v.abs() <= bound));
        assert_eq!(p.tensors()[idx].shape(), &[4, 6]);
    }

    #[test]
    fn shared_attention_replaces_per_article() {
        let with = ModelParams::zeros(&tiny()).unwrap();
        let without = ModelParams::zeros(&NetworkConfig {
            article_attention: false,
            ..tiny()
        })
        .unwrap();
        assert_eq!(with.layout().sentence.len(), 3);
        assert_eq!(without.layout().sentence.len(), 1);
        assert!(without.index_of("shared_attention.w").is_some());
    }

    #[test]
    fn task_a_heads_read_full_width() {
        let p = ModelParams::zeros(&tiny()).unwrap();
        let i = p.index_of("head_a.2.w1").unwrap();
        assert_eq!(p.tensors()[i].shape(), &[9, 3]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let p = ModelParams::init(&tiny(), 7).unwrap();
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
    }

    #[test]
    fn load_rejects_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ModelParams::init(&tiny(), 7).unwrap().save(&path).unwrap();
        let other = NetworkConfig { k: 4, ..tiny() };
        fs::write(
            ModelParams::config_sidecar(&path),
            serde_json::to_string(&other).unwrap(),
        )
        .unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Schema(_))));
    }
}
