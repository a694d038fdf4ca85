use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::MicroTransformerConfig;
use crate::gradtape::{Tape, Tensor, Var};
use crate::rng;

/// Per-layer parameter slots, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Ln1Gain,
    Ln1Bias,
    /// `[d, 3d]`, fused query/key/value projection.
    Qkv,
    /// `[d, d]`.
    AttnOut,
    Ln2Gain,
    Ln2Bias,
    /// `[d, 4d]`.
    MlpIn,
    /// `[4d, d]`.
    MlpOut,
}

impl Slot {
    pub const ALL: [Slot; 8] = [
        Slot::Ln1Gain,
        Slot::Ln1Bias,
        Slot::Qkv,
        Slot::AttnOut,
        Slot::Ln2Gain,
        Slot::Ln2Bias,
        Slot::MlpIn,
        Slot::MlpOut,
    ];

    /// The quantized projections.
    pub const LINEAR: [Slot; 4] = [Slot::Qkv, Slot::AttnOut, Slot::MlpIn, Slot::MlpOut];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Ln1Gain => "ln1.gain",
            Slot::Ln1Bias => "ln1.bias",
            Slot::Qkv => "attn.qkv",
            Slot::AttnOut => "attn.out",
            Slot::Ln2Gain => "ln2.gain",
            Slot::Ln2Bias => "ln2.bias",
            Slot::MlpIn => "mlp.in",
            Slot::MlpOut => "mlp.out",
        }
    }
}

const GLOBAL_HEAD: usize = 2;

/// Index arithmetic over the flat parameter list.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    layers: usize,
}

impl Layout {
    pub fn new(layers: usize) -> Self {
        Self { layers }
    }

    pub fn tok_emb(&self) -> usize {
        0
    }

    pub fn pos_emb(&self) -> usize {
        1
    }

    pub fn layer(&self, layer: usize, slot: Slot) -> usize {
        GLOBAL_HEAD + layer * Slot::ALL.len() + slot as usize
    }

    pub fn final_gain(&self) -> usize {
        GLOBAL_HEAD + self.layers * Slot::ALL.len()
    }

    pub fn final_bias(&self) -> usize {
        self.final_gain() + 1
    }

    pub fn lm_head(&self) -> usize {
        self.final_gain() + 2
    }

    pub fn len(&self) -> usize {
        self.final_gain() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    /// Names and shapes for `cfg`, in storage order.
    pub fn spec(cfg: &MicroTransformerConfig) -> Vec<(String, Vec<usize>)> {
        let (d, v, n) = (cfg.d_model, cfg.vocab, cfg.seq_len);
        let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![n, d])];
        for l in 0..cfg.layers {
            for slot in Slot::ALL {
                let shape = match slot {
                    Slot::Ln1Gain | Slot::Ln1Bias | Slot::Ln2Gain | Slot::Ln2Bias => vec![d],
                    Slot::Qkv => vec![d, 3 * d],
                    Slot::AttnOut => vec![d, d],
                    Slot::MlpIn => vec![d, 4 * d],
                    Slot::MlpOut => vec![4 * d, d],
                };
                out.push((format!("layers.{l}.{}", slot.name()), shape));
            }
        }
        out.push(("final.gain".into(), vec![d]));
        out.push(("final.bias".into(), vec![d]));
        out.push(("lm_head".into(), vec![d, v]));
        out
    }

    /// Seeded initialization, rounded to 32-bit storage precision.
    pub fn init(cfg: &MicroTransformerConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "init");
        let residual_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let (names, shapes): (Vec<String>, Vec<Vec<usize>>) = Self::spec(cfg).into_iter().unzip();
        let tensors = names
            .iter()
            .zip(&shapes)
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let std = if name.ends_with("gain") {
                    return Tensor::new(shape.clone(), vec![1.0; len]).expect("finite");
                } else if name.ends_with("bias") {
                    return Tensor::zeros(shape);
                } else if name.ends_with("emb") {
                    0.5
                } else {
                    let fan_in = shape[0] as f64;
                    let base = 1.0 / fan_in.sqrt();
                    if name.ends_with("attn.out") || name.ends_with("mlp.out") {
                        base * residual_scale
                    } else {
                        base
                    }
                };
                sample(&mut r, shape, std)
            })
            .collect();
        Self { names, tensors }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        debug_assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape`, as trainable parameters or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// `p <- f32(p - lr * g)` for every tensor with a gradient.
    pub fn sgd_step(&mut self, grads: &[Option<Tensor>], lr: f64) {
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                let data = p.data().iter().zip(g.data()).map(|(w, d)| (w - lr * d) as f32 as f64).collect();
                *p = Tensor::new(p.shape().to_vec(), data).expect("finite update");
            }
        }
    }

    /// Overwrites one element; used by gradient checks.
    pub fn with_element(&self, index: usize, elem: usize, value: f64) -> Self {
        let mut out = self.clone();
        let t = &out.tensors[index];
        let mut data = t.data().to_vec();
        data[elem] = value;
        out.tensors[index] = Tensor::new(t.shape().to_vec(), data).expect("finite");
        out
    }
}

fn sample(r: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| normal.sample(r) as f32 as f64).collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}
