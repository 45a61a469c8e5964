//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters and running statistics live in a [`ParamStore`] keyed by dotted
//! path so that checkpoints, the optimizer and gradient checks can address
//! them by name. Layers hold cheap clones of the underlying variables; updates
//! made through the store are visible to every layer immediately.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DropError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    /// He-uniform bound for a ReLU network layer with the given fan-in.
    pub fn kaiming(fan_in: usize) -> Self {
        Init::Uniform((6.0 / fan_in.max(1) as f64).sqrt())
    }

    /// Default bound for linear projections.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: Mutex<BTreeMap<String, Var>>,
    buffers: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Arc<Self> {
        Arc::new(Self {
            dtype,
            device: Device::Cpu,
            params: Mutex::new(BTreeMap::new()),
            buffers: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(self: &Arc<Self>) -> Scope {
        Scope {
            store: Arc::clone(self),
            prefix: String::new(),
        }
    }

    fn materialize(&self, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => {
                let mut rng = self.rng.lock().expect("param rng poisoned");
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn insert(
        map: &Mutex<BTreeMap<String, Var>>,
        name: String,
        var: Var,
    ) -> Result<Var> {
        let mut map = map.lock().expect("param map poisoned");
        if map.contains_key(&name) {
            return Err(DropError::Internal(format!("duplicate parameter `{name}`")));
        }
        map.insert(name, var.clone());
        Ok(var)
    }

    /// Trainable parameters in name order.
    pub fn params(&self) -> Vec<(String, Var)> {
        let map = self.params.lock().expect("param map poisoned");
        map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Non-trainable state (batch-norm running statistics) in name order.
    pub fn buffers(&self) -> Vec<(String, Var)> {
        let map = self.buffers.lock().expect("buffer map poisoned");
        map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn param(&self, name: &str) -> Option<Var> {
        self.params.lock().expect("param map poisoned").get(name).cloned()
    }

    pub fn buffer(&self, name: &str) -> Option<Var> {
        self.buffers.lock().expect("buffer map poisoned").get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// A named position inside a [`ParamStore`], analogous to a path prefix.
#[derive(Debug, Clone)]
pub struct Scope {
    store: Arc<ParamStore>,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: Arc::clone(&self.store),
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let var = self.store.materialize(shape, init)?;
        let var = ParamStore::insert(&self.store.params, self.path(name), var)?;
        Ok(var.as_tensor().clone())
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let var = self.store.materialize(shape, init)?;
        ParamStore::insert(&self.store.buffers, self.path(name), var)
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    /// Edge replication. A width-constant input stays width-constant.
    Replicate,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    padding_mode: Padding,
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding_mode: Padding,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = scope.param(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            Init::kaiming(fan_in),
        )?;
        let bias = if bias {
            Some(scope.param("bias", &[out_channels], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            padding_mode,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match self.padding_mode {
            Padding::Zeros => x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?,
            Padding::Replicate => {
                let p = self.padding;
                let padded = if p > 0 {
                    x.pad_with_same(2, p, p)?.pad_with_same(3, p, p)?
                } else {
                    x.clone()
                };
                padded.conv2d(&self.weight, 0, self.stride, 1, 1)?
            }
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Per-channel batch normalization over `[B, C]` or `[B, C, H, W]` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("weight", &[channels], Init::Ones)?,
            beta: scope.param("bias", &[channels], Init::Zeros)?,
            running_mean: scope.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: scope.buffer("running_var", &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let rank = x.rank();
        let channels = self.gamma.elem_count();
        if rank < 2 || x.dim(1)? != channels {
            return Err(DropError::Dimension(format!(
                "batch norm over {channels} channels got input {:?}",
                x.dims()
            )));
        }
        let stat_shape: Vec<usize> = (0..rank).map(|i| if i == 1 { channels } else { 1 }).collect();
        let (mean, var) = if train {
            // Channels first, everything else flattened.
            let flat = x.transpose(0, 1)?.contiguous()?.reshape((channels, ()))?;
            let n = flat.dim(1)?;
            let mean = flat.mean_keepdim(1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(1)?;
            let unbiased = if n > 1 {
                var.affine(n as f64 / (n as f64 - 1.0), 0.0)?
            } else {
                var.clone()
            };
            let m = self.momentum;
            let new_mean = (self.running_mean.as_tensor().detach().affine(1.0 - m, 0.0)?
                + mean.flatten_all()?.detach().affine(m, 0.0)?)?;
            let new_var = (self.running_var.as_tensor().detach().affine(1.0 - m, 0.0)?
                + unbiased.flatten_all()?.detach().affine(m, 0.0)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean.reshape(stat_shape.as_slice())?, var.reshape(stat_shape.as_slice())?)
        } else {
            (
                self.running_mean.as_tensor().reshape(stat_shape.as_slice())?,
                self.running_var.as_tensor().reshape(stat_shape.as_slice())?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(stat_shape.as_slice())?)?
            .broadcast_add(&self.beta.reshape(stat_shape.as_slice())?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = scope.param("weight", &[out_dim, in_dim], Init::fan_in(in_dim))?;
        let bias = if bias {
            Some(scope.param("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// `x` has shape `[..., in_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| DropError::Dimension("linear on scalar".into()))?;
        let flat = x.reshape(((), in_dim))?;
        let y = flat.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("nonempty") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Corner-aligned linear interpolation weights, row `i` mapping output `i`
/// onto the input axis. Shape `[n_out, n_in]`, row-major.
pub fn bilinear_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        if n_in == 1 || n_out == 1 {
            m[i * n_in] = 1.0;
            continue;
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let frac = pos - lo as f64;
        m[i * n_in + lo] += 1.0 - frac;
        if frac > 0.0 {
            m[i * n_in + lo + 1] += frac;
        }
    }
    m
}

/// Area-averaging weights: output cell `j` averages the input interval it
/// covers, with fractional overlap at the edges. Shape `[n_out, n_in]`.
pub fn area_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for j in 0..n_out {
        let start = j as f64 * scale;
        let end = (j + 1) as f64 * scale;
        for i in (start.floor() as usize)..(end.ceil() as usize).min(n_in) {
            let overlap = (end.min(i as f64 + 1.0) - start.max(i as f64)).max(0.0);
            m[j * n_in + i] = overlap / scale;
        }
    }
    m
}

/// Applies `[h_out, h_in]` and `[w_out, w_in]` weight matrices to the last two
/// axes of a `[B, C, H, W]` tensor. Differentiable.
pub fn resize_separable(
    x: &Tensor,
    h_weights: &[f64],
    h_out: usize,
    w_weights: &[f64],
    w_out: usize,
) -> Result<Tensor> {
    let (b, c, h_in, w_in) = x.dims4()?;
    if h_weights.len() != h_out * h_in || w_weights.len() != w_out * w_in {
        return Err(DropError::Internal("resize weight shape mismatch".into()));
    }
    let dtype = x.dtype();
    let dev = x.device();
    let wt = Tensor::from_slice(w_weights, (w_out, w_in), dev)?.to_dtype(dtype)?;
    let ht = Tensor::from_slice(h_weights, (h_out, h_in), dev)?.to_dtype(dtype)?;
    let y = x
        .contiguous()?
        .reshape((b * c * h_in, w_in))?
        .matmul(&wt.t()?)?
        .reshape((b, c, h_in, w_out))?;
    let y = y
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b * c * w_out, h_in))?
        .matmul(&ht.t()?)?
        .reshape((b, c, w_out, h_out))?
        .transpose(2, 3)?
        .contiguous()?;
    Ok(y)
}

/// Corner-aligned bilinear resize of `[B, C, H, W]`.
pub fn bilinear_resize(x: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (_, _, h_in, w_in) = x.dims4()?;
    if (h_in, w_in) == (h_out, w_out) {
        return Ok(x.clone());
    }
    resize_separable(
        x,
        &bilinear_weights(h_in, h_out),
        h_out,
        &bilinear_weights(w_in, w_out),
        w_out,
    )
}

/// Mass-preserving area downsample of `[B, C, H, W]`.
pub fn area_resize(x: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (_, _, h_in, w_in) = x.dims4()?;
    if (h_in, w_in) == (h_out, w_out) {
        return Ok(x.clone());
    }
    resize_separable(
        x,
        &area_weights(h_in, h_out),
        h_out,
        &area_weights(w_in, w_out),
        w_out,
    )
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(dim)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

/// Numerically stable log-softmax along `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(dim)?.detach())?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Reads a scalar tensor as `f64` regardless of its dtype.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// `true` when every element is finite.
pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (n_in, n_out) in [(1, 4), (2, 4), (4, 8), (3, 7), (5, 5)] {
            let m = bilinear_weights(n_in, n_out);
            for i in 0..n_out {
                let s: f64 = m[i * n_in..(i + 1) * n_in].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            // Corners map onto corners.
            assert_eq!(m[0], 1.0);
            assert_eq!(m[(n_out - 1) * n_in + n_in - 1], 1.0);
        }
    }

    #[test]
    fn area_weights_preserve_mass() {
        for (n_in, n_out) in [(4, 2), (8, 4), (6, 4), (5, 2)] {
            let m = area_weights(n_in, n_out);
            let total: f64 = m.iter().sum();
            assert!((total * n_in as f64 / n_out as f64 - n_in as f64).abs() < 1e-9);
            for j in 0..n_out {
                let s: f64 = m[j * n_in..(j + 1) * n_in].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_resize_identity_and_constant() -> Result<()> {
        let x = Tensor::full(2.5f64, (1, 2, 3, 2), &Device::Cpu)?;
        let y = bilinear_resize(&x, 6, 4)?;
        for v in y.flatten_all()?.to_vec1::<f64>()? {
            assert!((v - 2.5).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() -> Result<()> {
        let store = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm::new(&store.root().pp("bn"), 2)?;
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (2, 2), &Device::Cpu)?;
        // Fresh running stats are (0, 1): eval is nearly the identity.
        let y = bn.forward(&x, false)?.flatten_all()?.to_vec1::<f64>()?;
        for (a, b) in y.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
        let y = bn.forward(&x, true)?.to_vec2::<f64>()?;
        assert!((y[0][0] + y[1][0]).abs() < 1e-9);
        let rm = store.buffer("bn.running_mean").unwrap().as_tensor().to_vec1::<f64>()?;
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 0.3).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn replicate_padding_keeps_width_constant() -> Result<()> {
        let store = ParamStore::new(DType::F64, 3);
        let conv = Conv2d::new(&store.root().pp("c"), 1, 3, 3, 1, Padding::Replicate, true)?;
        let rows: Vec<f64> = (0..5).flat_map(|h| std::iter::repeat(h as f64).take(4)).collect();
        let x = Tensor::from_vec(rows, (1, 1, 5, 4), &Device::Cpu)?;
        let y = conv.forward(&x)?.squeeze(0)?.to_vec3::<f64>()?;
        for ch in y {
            for row in ch {
                assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
            }
        }
        Ok(())
    }
}
