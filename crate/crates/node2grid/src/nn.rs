//! The three-layer grid network with analytic forward and backward passes.
//!
//! Layer-wise propagation over a batch of `k x 1 x f` grids:
//!
//! ```text
//! x  = Conv(G)                      depthwise 1-D conv, stride 1, no padding,
//!                                   one shared kernel across all f channels
//! x' = x + mean(att_heads) . x      grid-level attention: element-wise product
//!                                   with a residual add; filters shared across
//!                                   channels, h heads averaged
//! z  = flatten(act(x'))
//! h  = dropout(act(W1' z + b1))
//! y  = W2' h + b2                   logits
//! ```
//!
//! The conv output keeps all `f` channels and has length `m = k - n_ker + 1`,
//! matching the attention filter length. Dropout uses the inverted-scaling
//! convention and per-sample seeds, so batch parallelism cannot change
//! results; eval mode is the identity. All floating-point work is generic
//! over `f32`/`f64` — training runs single precision, gradient checks double.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis, NdFloat};
use num_traits::FromPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Scalar type the network runs on.
pub trait Real: NdFloat + FromPrimitive {
    const BYTE_WIDTH: u32;
}
impl Real for f32 {
    const BYTE_WIDTH: u32 = 4;
}
impl Real for f64 {
    const BYTE_WIDTH: u32 = 8;
}

/// Shorthand for pulling f64 constants into the working precision.
#[inline]
pub(crate) fn r<F: Real>(x: f64) -> F {
    F::from(x).expect("f64 constant representable")
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("attention is disabled (h = 0)")]
    NoAttention,
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskHead {
    SoftmaxSingleLabel,
    SigmoidMultiLabel,
}

/// Where dropout applies: after the conv/attention block activation, after
/// the first FC activation, or only the latter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutSites {
    Fc1Only,
    ConvAndFc1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    /// Conv kernel size; output length is k - n_ker + 1.
    pub n_ker: usize,
    /// Attention head count; 0 disables the attention path.
    pub heads: usize,
    pub d_hidden: usize,
    pub dropout_rate: f64,
    pub dropout_sites: DropoutSites,
    pub task_head: TaskHead,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n_ker: 1,
            heads: 50,
            d_hidden: 64,
            dropout_rate: 0.5,
            dropout_sites: DropoutSites::Fc1Only,
            task_head: TaskHead::SoftmaxSingleLabel,
            activation: Activation::Relu,
        }
    }
}

/// Which regularizer a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Conv + FC weights: the lambda term (or decoupled weight decay).
    NetWeight,
    /// Attention filters: the lambda_att term.
    AttentionWeight,
    /// Never regularized.
    Bias,
}

/// All learnable tensors plus the shape/config metadata needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub net: NetConfig,
    pub k: usize,
    pub f: usize,
    pub classes: usize,
    /// n_ker weights, shared across all f channels.
    pub conv_w: Array1<F>,
    /// Single conv bias (length 1).
    pub conv_b: Array1<F>,
    /// heads x (k - n_ker + 1) attention filter bank.
    pub att: Array2<F>,
    /// (conv_len * f) x d_hidden.
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    /// d_hidden x classes.
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn conv_len(&self) -> usize {
        self.k - self.net.n_ker + 1
    }

    pub fn flat_dim(&self) -> usize {
        self.conv_len() * self.f
    }

    /// Same shapes, all zeros; the gradient container.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            net: self.net,
            k: self.k,
            f: self.f,
            classes: self.classes,
            conv_w: Array1::zeros(self.conv_w.raw_dim()),
            conv_b: Array1::zeros(self.conv_b.raw_dim()),
            att: Array2::zeros(self.att.raw_dim()),
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    /// Every learnable tensor with its name and regularizer role, in
    /// declaration order. The coverage here defines the regularizer
    /// partition and the checkpoint layout.
    pub fn tensors(&self) -> Vec<(&'static str, ParamRole, &[F])> {
        vec![
            ("conv_w", ParamRole::NetWeight, self.conv_w.as_slice().unwrap()),
            ("conv_b", ParamRole::Bias, self.conv_b.as_slice().unwrap()),
            ("att", ParamRole::AttentionWeight, self.att.as_slice().unwrap()),
            ("w1", ParamRole::NetWeight, self.w1.as_slice().unwrap()),
            ("b1", ParamRole::Bias, self.b1.as_slice().unwrap()),
            ("w2", ParamRole::NetWeight, self.w2.as_slice().unwrap()),
            ("b2", ParamRole::Bias, self.b2.as_slice().unwrap()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ParamRole, &mut [F])> {
        vec![
            ("conv_w", ParamRole::NetWeight, self.conv_w.as_slice_mut().unwrap()),
            ("conv_b", ParamRole::Bias, self.conv_b.as_slice_mut().unwrap()),
            ("att", ParamRole::AttentionWeight, self.att.as_slice_mut().unwrap()),
            ("w1", ParamRole::NetWeight, self.w1.as_slice_mut().unwrap()),
            ("b1", ParamRole::Bias, self.b1.as_slice_mut().unwrap()),
            ("w2", ParamRole::NetWeight, self.w2.as_slice_mut().unwrap()),
            ("b2", ParamRole::Bias, self.b2.as_slice_mut().unwrap()),
        ]
    }
}

fn validate_config(cfg: &NetConfig, k: usize, f: usize, classes: usize) -> Result<(), NetError> {
    if cfg.n_ker == 0 || cfg.n_ker > k {
        return Err(NetError::InvalidConfig(format!("n_ker {} not in 1..={}", cfg.n_ker, k)));
    }
    if cfg.d_hidden == 0 || classes == 0 || f == 0 {
        return Err(NetError::InvalidConfig("zero-sized layer".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout_rate) {
        return Err(NetError::InvalidConfig(format!(
            "dropout_rate {} not in [0, 1)",
            cfg.dropout_rate
        )));
    }
    Ok(())
}

/// Fresh parameters. FC weights use fan-based uniform draws
/// (limit = sqrt(6 / (fan_in + fan_out))); the depthwise conv kernel starts
/// at the identity-flavored 1/n_ker with zero bias so the first activations
/// cannot collapse on non-negative features; attention filters start at
/// zero, which makes the initial network exactly the attention-free one.
pub fn init_params<F: Real, R: Rng>(
    cfg: &NetConfig,
    k: usize,
    f: usize,
    classes: usize,
    rng: &mut R,
) -> Result<ModelParams<F>, NetError> {
    validate_config(cfg, k, f, classes)?;
    let m = k - cfg.n_ker + 1;
    let flat = m * f;

    let conv_w = Array1::from_elem(cfg.n_ker, r::<F>(1.0 / cfg.n_ker as f64));
    let conv_b = Array1::zeros(1);
    let att = Array2::zeros((cfg.heads, m));

    let mut uniform = |rows: usize, cols: usize| -> Array2<F> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| r::<F>((rng.random::<f64>() * 2.0 - 1.0) * limit))
    };
    let w1 = uniform(flat, cfg.d_hidden);
    let w2 = uniform(cfg.d_hidden, classes);

    Ok(ModelParams {
        net: *cfg,
        k,
        f,
        classes,
        conv_w,
        conv_b,
        att,
        w1,
        b1: Array1::zeros(cfg.d_hidden),
        w2,
        b2: Array1::zeros(classes),
    })
}

/// Element-wise mean of the attention filter bank; the values the
/// attention inspector reports.
pub fn mean_attention<F: Real>(params: &ModelParams<F>) -> Result<Array1<F>, NetError> {
    if params.net.heads == 0 {
        return Err(NetError::NoAttention);
    }
    Ok(params.att.mean_axis(Axis(0)).expect("heads > 0"))
}

/// Everything backward needs from the forward pass.
pub struct ForwardCache<F> {
    /// Conv output, B x m x f.
    xl: Array3<F>,
    /// Post-attention pre-activation, B x m x f.
    xprime: Array3<F>,
    /// Inverted-scaling multiplier applied after the conv activation.
    conv_mask: Option<Array3<F>>,
    /// Flattened conv block output actually fed to fc1, B x (m*f).
    z: Array2<F>,
    /// fc1 pre-activation, B x d.
    pre1: Array2<F>,
    /// fc1 output after activation and dropout, B x d.
    h1: Array2<F>,
    fc1_mask: Option<Array2<F>>,
}

fn activate<F: Real>(cfg: &NetConfig, x: &mut Array3<F>) {
    match cfg.activation {
        Activation::Relu => x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() }),
        Activation::Tanh => x.mapv_inplace(|v| v.tanh()),
    }
}

fn activate2<F: Real>(cfg: &NetConfig, x: &mut Array2<F>) {
    match cfg.activation {
        Activation::Relu => x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() }),
        Activation::Tanh => x.mapv_inplace(|v| v.tanh()),
    }
}

fn deriv_from_pre<F: Real>(cfg: &NetConfig, pre: F) -> F {
    match cfg.activation {
        Activation::Relu => {
            if pre > F::zero() {
                F::one()
            } else {
                F::zero()
            }
        }
        Activation::Tanh => {
            let t = pre.tanh();
            F::one() - t * t
        }
    }
}

fn dropout_mask<F: Real>(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<F> {
    let keep = r::<F>(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
        .collect()
}

/// Run the network over a batch of grids (B x k x f).
///
/// `dropout_seeds`: one seed per sample turns training-mode dropout on;
/// `None` is eval mode (deterministic, dropout off). Masks depend only on
/// the seeds, so a finite-difference probe re-running forward with the same
/// seeds sees a frozen network.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    grids: ArrayView3<'_, F>,
    dropout_seeds: Option<&[u64]>,
) -> Result<(Array2<F>, ForwardCache<F>), NetError> {
    let (batch, k, f) = grids.dim();
    if k != params.k || f != params.f {
        return Err(NetError::ShapeMismatch(format!(
            "grids are {}x{}x{}, model expects k={} f={}",
            batch, k, f, params.k, params.f
        )));
    }
    if let Some(seeds) = dropout_seeds {
        if seeds.len() != batch {
            return Err(NetError::ShapeMismatch(format!(
                "{} dropout seeds for batch of {}",
                seeds.len(),
                batch
            )));
        }
    }
    let cfg = &params.net;
    let m = params.conv_len();

    // Depthwise conv, stride 1, no padding: one kernel shared by all
    // channels, so each output row is a windowed combination of grid rows.
    let mut xl = Array3::from_elem((batch, m, f), params.conv_b[0]);
    for j in 0..cfg.n_ker {
        let window = grids.slice(s![.., j..j + m, ..]);
        xl.scaled_add(params.conv_w[j], &window);
    }

    // Attention residual: x' = x + mean(att) . x, broadcast over channels.
    let xprime = if cfg.heads > 0 {
        let factor = mean_attention(params)?.mapv(|a| a + F::one());
        let factor = factor.insert_axis(Axis(0)).insert_axis(Axis(2));
        &xl * &factor
    } else {
        xl.clone()
    };

    let mut xact = xprime.clone();
    activate(cfg, &mut xact);

    let train = dropout_seeds.is_some() && cfg.dropout_rate > 0.0;
    let mut sample_rngs: Vec<ChaCha8Rng> = match dropout_seeds {
        Some(seeds) if train => seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect(),
        _ => Vec::new(),
    };

    let conv_mask = if train && cfg.dropout_sites == DropoutSites::ConvAndFc1 {
        let mut mask = Array3::zeros((batch, m, f));
        for (b, rng) in sample_rngs.iter_mut().enumerate() {
            let values = dropout_mask::<F>(rng, m * f, cfg.dropout_rate);
            mask.slice_mut(s![b, .., ..])
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&values);
        }
        xact *= &mask;
        Some(mask)
    } else {
        None
    };

    let z = xact.into_shape_with_order((batch, m * f)).expect("standard layout");

    let mut pre1 = z.dot(&params.w1);
    pre1 += &params.b1;
    let mut h1 = pre1.clone();
    activate2(cfg, &mut h1);

    let fc1_mask = if train {
        let mut mask = Array2::zeros((batch, cfg.d_hidden));
        for (b, rng) in sample_rngs.iter_mut().enumerate() {
            let values = dropout_mask::<F>(rng, cfg.d_hidden, cfg.dropout_rate);
            mask.row_mut(b).as_slice_mut().unwrap().copy_from_slice(&values);
        }
        h1 *= &mask;
        Some(mask)
    } else {
        None
    };

    let mut logits = h1.dot(&params.w2);
    logits += &params.b2;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("logits"));
    }

    Ok((logits, ForwardCache { xl, xprime, conv_mask, z, pre1, h1, fc1_mask }))
}

/// Exact gradients of the forward computation for every parameter tensor,
/// given the loss gradient at the logits.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    grids: ArrayView3<'_, F>,
    cache: &ForwardCache<F>,
    dlogits: &Array2<F>,
) -> Result<ModelParams<F>, NetError> {
    let (batch, k, f) = grids.dim();
    let m = params.conv_len();
    if cache.z.dim() != (batch, m * f) || dlogits.dim() != (batch, params.classes) {
        return Err(NetError::ShapeMismatch(format!(
            "cache/batch mismatch: batch {}, cache {:?}, dlogits {:?}",
            batch,
            cache.z.dim(),
            dlogits.dim()
        )));
    }
    if k != params.k || f != params.f {
        return Err(NetError::ShapeMismatch("grids do not match model".into()));
    }
    let cfg = &params.net;
    let mut grads = params.zeros_like();

    // fc2
    grads.w2 = cache.h1.t().dot(dlogits);
    grads.b2 = dlogits.sum_axis(Axis(0));

    // fc1
    let mut dh1 = dlogits.dot(&params.w2.t());
    if let Some(mask) = &cache.fc1_mask {
        dh1 *= mask;
    }
    let dpre1 = {
        let mut d = dh1;
        d.zip_mut_with(&cache.pre1, |g, &p| *g = *g * deriv_from_pre(cfg, p));
        d
    };
    grads.w1 = cache.z.t().dot(&dpre1);
    grads.b1 = dpre1.sum_axis(Axis(0));

    // Back through flatten + conv-site dropout + activation.
    let dz = dpre1.dot(&params.w1.t());
    let mut dxact = dz.into_shape_with_order((batch, m, f)).expect("standard layout");
    if let Some(mask) = &cache.conv_mask {
        dxact *= mask;
    }
    let mut dxprime = dxact;
    dxprime.zip_mut_with(&cache.xprime, |g, &p| *g = *g * deriv_from_pre(cfg, p));

    // Attention: x' = (1 + a) . x with a the head mean, so every head gets
    // the same gradient da / h.
    let dxl = if cfg.heads > 0 {
        let da = (&dxprime * &cache.xl).sum_axis(Axis(0)).sum_axis(Axis(1));
        let per_head = da.mapv(|v| v / r::<F>(cfg.heads as f64));
        for mut row in grads.att.rows_mut() {
            row.assign(&per_head);
        }
        let factor = mean_attention(params)?.mapv(|a| a + F::one());
        let factor = factor.insert_axis(Axis(0)).insert_axis(Axis(2));
        &dxprime * &factor
    } else {
        dxprime
    };

    // Conv kernel and bias.
    for j in 0..cfg.n_ker {
        let window = grids.slice(s![.., j..j + m, ..]);
        grads.conv_w[j] = (&dxl * &window).sum();
    }
    grads.conv_b[0] = dxl.sum();

    Ok(grads)
}

const CKPT_MAGIC: &[u8; 4] = b"N2GC";
const CKPT_VERSION: u32 = 1;

/// A checkpoint read back from disk, in whichever precision it was trained.
pub enum Checkpoint {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

fn head_tag(t: TaskHead) -> u32 {
    match t {
        TaskHead::SoftmaxSingleLabel => 0,
        TaskHead::SigmoidMultiLabel => 1,
    }
}

fn sites_tag(s: DropoutSites) -> u32 {
    match s {
        DropoutSites::Fc1Only => 0,
        DropoutSites::ConvAndFc1 => 1,
    }
}

fn act_tag(a: Activation) -> u32 {
    match a {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    }
}

/// Write a self-describing checkpoint: header (shapes + config), then the
/// parameter tensors in declaration order, little-endian.
pub fn write_checkpoint<F: Real>(path: &Path, params: &ModelParams<F>) -> Result<(), NetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    let cfg = &params.net;
    let fields = [
        CKPT_VERSION,
        F::BYTE_WIDTH,
        params.k as u32,
        params.f as u32,
        params.classes as u32,
        cfg.n_ker as u32,
        cfg.heads as u32,
        cfg.d_hidden as u32,
        sites_tag(cfg.dropout_sites),
        head_tag(cfg.task_head),
        act_tag(cfg.activation),
    ];
    for v in fields {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&cfg.dropout_rate.to_le_bytes())?;
    for (_, _, slice) in params.tensors() {
        for &x in slice {
            let x: f64 = x.to_f64().unwrap();
            match F::BYTE_WIDTH {
                4 => w.write_all(&(x as f32).to_le_bytes())?,
                _ => w.write_all(&x.to_le_bytes())?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_params<F: Real>(
    reader: &mut impl Read,
    net: NetConfig,
    k: usize,
    f: usize,
    classes: usize,
) -> Result<ModelParams<F>, NetError> {
    let mut params = ModelParams {
        net,
        k,
        f,
        classes,
        conv_w: Array1::zeros(net.n_ker),
        conv_b: Array1::zeros(1),
        att: Array2::zeros((net.heads, k - net.n_ker + 1)),
        w1: Array2::zeros(((k - net.n_ker + 1) * f, net.d_hidden)),
        b1: Array1::zeros(net.d_hidden),
        w2: Array2::zeros((net.d_hidden, classes)),
        b2: Array1::zeros(classes),
    };
    for (_, _, slice) in params.tensors_mut() {
        for x in slice {
            *x = match F::BYTE_WIDTH {
                4 => {
                    let mut buf = [0u8; 4];
                    reader.read_exact(&mut buf)?;
                    r::<F>(f32::from_le_bytes(buf) as f64)
                }
                _ => {
                    let mut buf = [0u8; 8];
                    reader.read_exact(&mut buf)?;
                    r::<F>(f64::from_le_bytes(buf))
                }
            };
        }
    }
    Ok(params)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(NetError::BadCheckpoint(format!("bad magic {:02x?}", magic)));
    }
    let mut fields = [0u32; 11];
    for v in fields.iter_mut() {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        *v = u32::from_le_bytes(buf);
    }
    if fields[0] != CKPT_VERSION {
        return Err(NetError::BadCheckpoint(format!("unsupported version {}", fields[0])));
    }
    let mut rate = [0u8; 8];
    r.read_exact(&mut rate)?;
    let net = NetConfig {
        n_ker: fields[5] as usize,
        heads: fields[6] as usize,
        d_hidden: fields[7] as usize,
        dropout_rate: f64::from_le_bytes(rate),
        dropout_sites: if fields[8] == 0 { DropoutSites::Fc1Only } else { DropoutSites::ConvAndFc1 },
        task_head: if fields[9] == 0 {
            TaskHead::SoftmaxSingleLabel
        } else {
            TaskHead::SigmoidMultiLabel
        },
        activation: if fields[10] == 0 { Activation::Relu } else { Activation::Tanh },
    };
    let (k, f, classes) = (fields[2] as usize, fields[3] as usize, fields[4] as usize);
    match fields[1] {
        4 => Ok(Checkpoint::F32(read_params::<f32>(&mut r, net, k, f, classes)?)),
        8 => Ok(Checkpoint::F64(read_params::<f64>(&mut r, net, k, f, classes)?)),
        w => Err(NetError::BadCheckpoint(format!("unsupported precision width {}", w))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn small_cfg() -> NetConfig {
        NetConfig { heads: 3, d_hidden: 5, dropout_rate: 0.0, ..NetConfig::default() }
    }

    fn random_grids(batch: usize, k: usize, f: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((batch, k, f), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn init_is_seed_reproducible() {
        let cfg = small_cfg();
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let pa: ModelParams<f64> = init_params(&cfg, 8, 3, 4, &mut a).unwrap();
        let pb: ModelParams<f64> = init_params(&cfg, 8, 3, 4, &mut b).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn conv_shapes_follow_kernel_size() {
        let cfg = NetConfig { n_ker: 1, heads: 2, d_hidden: 4, dropout_rate: 0.0, ..NetConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params: ModelParams<f64> = init_params(&cfg, 8, 3, 2, &mut rng).unwrap();
        assert_eq!(params.conv_len(), 8);
        assert_eq!(params.att.dim(), (2, 8));
        let grids = random_grids(1, 8, 3, 1);
        let (logits, cache) = forward(&params, grids.view(), None).unwrap();
        assert_eq!(logits.dim(), (1, 2));
        assert_eq!(cache.xl.dim(), (1, 8, 3));
    }

    #[test]
    fn zero_attention_bank_is_identity() {
        // Same rng stream: attention bank consumes no draws, so the h = 0
        // network has identical FC weights.
        let with = small_cfg();
        let without = NetConfig { heads: 0, ..with };
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let pa: ModelParams<f64> = init_params(&with, 6, 2, 3, &mut a).unwrap();
        let pb: ModelParams<f64> = init_params(&without, 6, 2, 3, &mut b).unwrap();
        let grids = random_grids(4, 6, 2, 9);
        let (la, _) = forward(&pa, grids.view(), None).unwrap();
        let (lb, _) = forward(&pb, grids.view(), None).unwrap();
        for (x, y) in la.iter().zip(lb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let cfg = NetConfig { dropout_rate: 0.5, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params: ModelParams<f64> = init_params(&cfg, 5, 3, 4, &mut rng).unwrap();
        let grids = random_grids(3, 5, 3, 2);
        let (a, _) = forward(&params, grids.view(), None).unwrap();
        let (b, _) = forward(&params, grids.view(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_seeds_freeze_the_masks() {
        let cfg = NetConfig {
            dropout_rate: 0.5,
            dropout_sites: DropoutSites::ConvAndFc1,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params: ModelParams<f64> = init_params(&cfg, 5, 3, 4, &mut rng).unwrap();
        let grids = random_grids(3, 5, 3, 5);
        let seeds = [1u64, 2, 3];
        let (a, _) = forward(&params, grids.view(), Some(&seeds)).unwrap();
        let (b, _) = forward(&params, grids.view(), Some(&seeds)).unwrap();
        assert_eq!(a, b);
        let (c, _) = forward(&params, grids.view(), Some(&[4, 5, 6])).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn attention_gradient_identical_across_heads() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params: ModelParams<f64> = init_params(&cfg, 6, 2, 3, &mut rng).unwrap();
        // Non-zero bank so the residual path is active.
        params.att.mapv_inplace(|_| 0.25);
        let grids = random_grids(2, 6, 2, 8);
        let (logits, cache) = forward(&params, grids.view(), None).unwrap();
        let dlogits = logits.mapv(|_| 1.0);
        let grads = backward(&params, grids.view(), &cache, &dlogits).unwrap();
        let first = grads.att.row(0).to_owned();
        for row in grads.att.rows() {
            assert_eq!(row, first.view());
        }
    }

    #[test]
    fn zero_upstream_gradient_means_zero_param_gradients() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let params: ModelParams<f64> = init_params(&cfg, 4, 2, 3, &mut rng).unwrap();
        let grids = random_grids(2, 4, 2, 3);
        let (logits, cache) = forward(&params, grids.view(), None).unwrap();
        let dlogits = logits.mapv(|_| 0.0);
        let grads = backward(&params, grids.view(), &cache, &dlogits).unwrap();
        for (_, _, slice) in grads.tensors() {
            assert!(slice.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn mean_attention_matches_direct_sum() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params: ModelParams<f64> = init_params(&cfg, 6, 2, 3, &mut rng).unwrap();
        params.att = Array::from_shape_fn((3, 6), |(h, i)| (h * 10 + i) as f64 * 0.1);
        let mean = mean_attention(&params).unwrap();
        for i in 0..6 {
            let direct: f64 = (0..3).map(|h| params.att[[h, i]]).sum::<f64>() / 3.0;
            assert!((mean[i] - direct).abs() < 1e-15);
        }

        let single = NetConfig { heads: 1, ..cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p1: ModelParams<f64> = init_params(&single, 6, 2, 3, &mut rng).unwrap();
        p1.att.row_mut(0).assign(&Array::linspace(0.0, 1.0, 6));
        assert_eq!(mean_attention(&p1).unwrap(), p1.att.row(0).to_owned());

        let none = NetConfig { heads: 0, ..cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p0: ModelParams<f64> = init_params(&none, 6, 2, 3, &mut rng).unwrap();
        assert!(matches!(mean_attention(&p0), Err(NetError::NoAttention)));
    }

    #[test]
    fn fc_init_variance_tracks_fan_formula() {
        let cfg = NetConfig { d_hidden: 100, heads: 0, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let params: ModelParams<f64> = init_params(&cfg, 10, 10, 10, &mut rng).unwrap();
        // w1 is 100x100 = 10k draws; uniform(-l, l) has variance l^2 / 3.
        let n = params.w1.len() as f64;
        let mean: f64 = params.w1.iter().sum::<f64>() / n;
        let var: f64 = params.w1.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let target = 2.0 / (params.flat_dim() + cfg.d_hidden) as f64;
        assert!((var - target).abs() < 0.2 * target, "var {} target {}", var, target);
    }

    #[test]
    fn checkpoint_round_trip_exact() {
        let cfg = NetConfig { dropout_rate: 0.5, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut params: ModelParams<f32> = init_params(&cfg, 7, 4, 3, &mut rng).unwrap();
        params.att.mapv_inplace(|_| 0.125);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &params).unwrap();
        match read_checkpoint(&path).unwrap() {
            Checkpoint::F32(back) => assert_eq!(back, params),
            Checkpoint::F64(_) => panic!("expected f32 checkpoint"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = NetConfig { n_ker: 9, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            init_params::<f64, _>(&cfg, 8, 3, 4, &mut rng),
            Err(NetError::InvalidConfig(_))
        ));
        let cfg = NetConfig { dropout_rate: 1.0, ..small_cfg() };
        assert!(matches!(
            init_params::<f64, _>(&cfg, 8, 3, 4, &mut rng),
            Err(NetError::InvalidConfig(_))
        ));
    }
}
