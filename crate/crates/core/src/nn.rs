//! Parameter storage with seeded initialization, plus small layers whose
//! candle built-ins lack a backward pass.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var, D};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// 64-bit FNV-1a, used to derive per-parameter seeds from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Mixes a base seed with a label into an independent stream seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    fnv1a(label.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Named trainable parameters. Each parameter is initialized from an RNG
/// seeded by `(seed, name)`, so construction order never changes values.
#[derive(Clone)]
pub struct ParamStore {
    varmap: VarMap,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("params", &self.len())
            .finish()
    }
}

struct SeededBackend {
    varmap: VarMap,
    seed: u64,
}

fn sample_init(init: Init, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| {
        (0..n)
            .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<_>>()
    };
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| {
        (0..n).map(|_| rng.gen_range(lo..up)).collect::<Vec<_>>()
    };
    match init {
        Init::Const(v) => vec![v; n],
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
            match dist {
                NormalOrUniform::Normal => normal(rng, 0.0, std),
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
            }
        }
    }
}

impl SimpleBackend for SeededBackend {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().unwrap();
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!(
                    "parameter `{name}` requested as {s:?} but stored as {:?}",
                    var.shape()
                );
            }
            return Ok(var.as_tensor().clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name));
        let values = sample_init(h, &s, &mut rng);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _: DType, _: &Device) -> candle_core::Result<Tensor> {
        candle_core::bail!("parameter `{name}` must be requested with a shape")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().unwrap().contains_key(name)
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            varmap: VarMap::new(),
            seed,
            dtype,
            device: device.clone(),
        }
    }

    pub fn builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(
            Box::new(SeededBackend {
                varmap: self.varmap.clone(),
                seed: self.seed,
            }),
            self.dtype,
            self.device.clone(),
        )
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.varmap.data().lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters keyed by name, in lexicographic order.
    pub fn named_vars(&self) -> BTreeMap<String, Var> {
        self.varmap
            .data()
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_values().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }

    /// Flattened copy of every parameter, in name order.
    pub fn snapshot(&self) -> candle_core::Result<Vec<(String, Vec<f32>)>> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| {
                let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
                Ok((k, flat))
            })
            .collect()
    }

    pub fn all_finite(&self) -> candle_core::Result<bool> {
        for (_, values) in self.snapshot()? {
            if values.iter().any(|v| !v.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Layer normalization over the last dimension built from differentiable ops.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    x * candle_nn::ops::sigmoid(x)?
}
