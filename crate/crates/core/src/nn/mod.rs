//! Small neural-network toolkit over candle tensors: a seeded parameter
//! store, the handful of layers the models use, and training helpers.
//!
//! candle's own CPU `randn` cannot be seeded, so every random draw here goes
//! through a ChaCha8 generator owned by the caller.

mod layers;
mod resize;

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use layers::{
    attention, group_norm, instance_norm, Conv2d, GroupNorm, LayerNorm, Linear, ResBlock, SelfAttention2d,
};
pub use resize::{bilinear_matrix, resize_bilinear};

use crate::container::Container;
use crate::error::{Error, Result};

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
}

/// Named trainable variables, created in a fixed order from a seeded RNG.
pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.borrow().contains_key(&name) {
            return Err(Error::invalid(format!("parameter `{name}` created twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = {
            let mut rng = self.rng.borrow_mut();
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![c; n],
                Init::Normal(std) => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect(),
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.vars.borrow_mut().insert(name, v);
        Ok(out)
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.borrow().values().cloned().collect()
    }

    /// Variables whose names start with any of `prefixes`.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .borrow()
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    /// Writes every variable as an f32 array named `{prefix}{name}`.
    pub fn save_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        for (name, v) in self.vars.borrow().iter() {
            let values = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            c.put_f32(&format!("{prefix}{name}"), v.dims(), &values)?;
        }
        Ok(())
    }

    /// Overwrites every variable from a container; all names must be present
    /// with matching shapes.
    pub fn load_from(&self, c: &Container, prefix: &str) -> Result<()> {
        for (name, v) in self.vars.borrow().iter() {
            let key = format!("{prefix}{name}");
            let (shape, values) = c.get_f32(&key)?;
            if shape != v.dims() {
                return Err(Error::Container(format!(
                    "parameter `{key}` has shape {shape:?} in the checkpoint, model expects {:?}",
                    v.dims()
                )));
            }
            v.set(&Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> ParamPath<'a> {
        ParamPath {
            store: self.store,
            prefix: format!("{}{}.", self.prefix, name),
        }
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.create(format!("{}{}", self.prefix, name), shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn(rng: &mut impl Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Fails with a diagnostic when a tensor holds NaN or infinity.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(k) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("{what}: non-finite value {} at flat index {k}", v[k])));
    }
    Ok(())
}

/// Stacks images into a `B × 3 × H × W` batch.
pub fn images_to_tensor(images: &[&crate::imaging::RgbImage], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::invalid("images in a batch must share a size"));
        }
        data.extend(img.to_chw());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `B × 3 × H × W` batch back into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<crate::imaging::RgbImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::dim("image channels", 3, c));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    (0..b)
        .map(|i| crate::imaging::RgbImage::from_chw(h, w, &flat[i * 3 * h * w..(i + 1) * 3 * h * w]))
        .collect()
}

/// Adam (AdamW with zero weight decay) over the given variables.
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<candle_nn::AdamW> {
    use candle_nn::Optimizer;
    Ok(candle_nn::AdamW::new(
        vars,
        candle_nn::ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

/// Line-delimited JSON training log.
pub struct TrainLog {
    out: Option<std::io::BufWriter<std::fs::File>>,
    pub history: Vec<serde_json::Value>,
}

impl TrainLog {
    pub fn new(path: Option<&std::path::Path>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                Some(std::io::BufWriter::new(std::fs::File::create(p)?))
            }
            None => None,
        };
        Ok(Self {
            out,
            history: Vec::new(),
        })
    }

    pub fn record(&mut self, entry: serde_json::Value) -> Result<()> {
        use std::io::Write;
        if let Some(f) = self.out.as_mut() {
            writeln!(f, "{entry}")?;
            f.flush()?;
        }
        self.history.push(entry);
        Ok(())
    }

    /// Values of one numeric field across the history.
    pub fn series(&self, key: &str) -> Vec<f64> {
        self.history.iter().filter_map(|e| e.get(key).and_then(|v| v.as_f64())).collect()
    }
}

/// Trailing moving average with the given window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}
