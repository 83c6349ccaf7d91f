//! Feed-forward tanh network imitating the MPC law, trained with Adam on
//! sampled (state, MPC input) pairs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{check_dim, MampcError, Result};
use crate::mpc::{MpcController, MpcSpec, MpcStatus};
use crate::sets::BoxSet;
use crate::{InputVec, Real, StateVec};

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationDataset<T: Real> {
    pub states: Vec<StateVec<T>>,
    /// MPC input deviations.
    pub labels: Vec<InputVec<T>>,
    pub sampling_box: BoxSet<T>,
    /// Box the labels live in; sets the output scaling.
    pub label_box: BoxSet<T>,
}

impl<T: Real> ImitationDataset<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Draws states uniformly from `sampling_box` and labels them with the MPC
/// input. Infeasible draws are discarded; gives up after `10·size` draws.
pub fn sample_dataset<T: Real>(spec: &MpcSpec<T>, sampling_box: &BoxSet<T>, size: usize, seed: u64) -> Result<ImitationDataset<T>> {
    check_dim("sampling box", spec.n(), sampling_box.dim())?;
    if size == 0 {
        return Err(MampcError::Dataset("dataset size must be positive".into()));
    }
    if (0..sampling_box.dim()).any(|i| !sampling_box.lower()[i].is_finite() || !sampling_box.upper()[i].is_finite()) {
        return Err(MampcError::Dataset("sampling box must be bounded".into()));
    }
    let mut ctl = MpcController::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (spec.n(), spec.m());
    let mut states = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    let mut u = vec![T::zero(); m];
    let cap = size.saturating_mul(10);
    let mut draws = 0usize;
    while states.len() < size {
        if draws >= cap {
            return Err(MampcError::Dataset(format!(
                "only {} feasible samples after {cap} draws",
                states.len()
            )));
        }
        draws += 1;
        let x = DVector::from_fn(n, |i, _| {
            let (lo, hi) = (sampling_box.lower()[i], sampling_box.upper()[i]);
            lo + (hi - lo) * T::lit(rng.random::<f64>())
        });
        ctl.reset();
        let (status, _) = ctl.control_into(x.as_slice(), &mut u)?;
        if status == MpcStatus::Optimal {
            states.push(x);
            labels.push(DVector::from_column_slice(&u));
        }
    }
    Ok(ImitationDataset {
        states,
        labels,
        sampling_box: sampling_box.clone(),
        label_box: spec.input_box.clone(),
    })
}

/// Hyperbolic tangent through a single `exp`; absolute error stays at the
/// rounding level of 1.
#[inline]
fn tanh<T: Real>(x: T) -> T {
    let a = x.abs();
    if a < T::lit(1e-4) {
        return x - x * x * x / T::lit(3.0);
    }
    let e = (T::lit(-2.0) * a).exp();
    ((T::one() - e) / (T::one() + e)).copysign(x)
}

/// Per-coordinate scale from a box: half-width, or 1 where the box is
/// degenerate or unbounded.
fn box_scales<T: Real>(b: &BoxSet<T>) -> (DVector<T>, DVector<T>) {
    let mut center = b.center();
    let mut half = b.half_widths();
    for i in 0..b.dim() {
        if !half[i].is_finite() || half[i] <= T::zero() {
            half[i] = T::one();
        }
        if !center[i].is_finite() {
            center[i] = T::zero();
        }
    }
    (center, half)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy<T: Real> {
    sizes: Vec<usize>,
    weights: Vec<DMatrix<T>>,
    biases: Vec<DVector<T>>,
    in_center: DVector<T>,
    in_scale: DVector<T>,
    out_offset: DVector<T>,
    out_scale: DVector<T>,
}

/// Activation buffers for allocation-free evaluation.
#[derive(Debug, Clone)]
pub struct MlpScratch<T: Real> {
    a: Vec<T>,
    b: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient<T: Real> {
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
}

impl<T: Real> MlpGradient<T> {
    pub fn flat(&self, idx: usize) -> T {
        flat_get(&self.weights, &self.biases, idx)
    }
}

fn flat_locate<T: Real>(weights: &[DMatrix<T>], idx: usize) -> (usize, Option<(usize, usize)>, usize) {
    let mut rem = idx;
    for (l, w) in weights.iter().enumerate() {
        if rem < w.len() {
            return (l, Some((rem / w.ncols(), rem % w.ncols())), 0);
        }
        rem -= w.len();
        if rem < w.nrows() {
            return (l, None, rem);
        }
        rem -= w.nrows();
    }
    panic!("parameter index {idx} out of range");
}

fn flat_get<T: Real>(weights: &[DMatrix<T>], biases: &[DVector<T>], idx: usize) -> T {
    match flat_locate(weights, idx) {
        (l, Some((r, c)), _) => weights[l][(r, c)],
        (l, None, i) => biases[l][i],
    }
}

impl<T: Real> MlpPolicy<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], input_box: &BoxSet<T>, output_box: &BoxSet<T>, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(sizes, input_box, output_box)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut p.weights {
            let limit = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            for v in w.iter_mut() {
                *v = T::lit(rng.random_range(-limit..limit));
            }
        }
        Ok(p)
    }

    pub fn zeros(sizes: &[usize], input_box: &BoxSet<T>, output_box: &BoxSet<T>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(MampcError::InvalidParameter {
                name: "architecture".into(),
                reason: format!("need at least input and output layers of nonzero width, got {sizes:?}"),
            });
        }
        check_dim("network input", sizes[0], input_box.dim())?;
        check_dim("network output", sizes[sizes.len() - 1], output_box.dim())?;
        let (in_center, in_scale) = box_scales(input_box);
        let (_, out_scale) = box_scales(output_box);
        let out = sizes[sizes.len() - 1];
        Ok(Self {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: sizes.windows(2).map(|w| DVector::zeros(w[1])).collect(),
            in_center,
            in_scale,
            out_offset: DVector::zeros(out),
            out_scale,
        })
    }

    /// Network from explicit parameters; used for hand-built policies.
    pub fn from_parts(
        weights: Vec<DMatrix<T>>,
        biases: Vec<DVector<T>>,
        in_center: DVector<T>,
        in_scale: DVector<T>,
        out_offset: DVector<T>,
        out_scale: DVector<T>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(MampcError::InvalidParameter {
                name: "layers".into(),
                reason: "need matching, non-empty weight and bias lists".into(),
            });
        }
        let mut sizes = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            check_dim("layer input", sizes[sizes.len() - 1], w.ncols())?;
            check_dim("layer bias", w.nrows(), b.len())?;
            sizes.push(w.nrows());
        }
        check_dim("input normalization", sizes[0], in_center.len())?;
        check_dim("input normalization", sizes[0], in_scale.len())?;
        check_dim("output scaling", sizes[sizes.len() - 1], out_offset.len())?;
        check_dim("output scaling", sizes[sizes.len() - 1], out_scale.len())?;
        if in_scale.iter().any(|v| !(*v > T::zero())) || out_scale.iter().any(|v| !(*v > T::zero())) {
            return Err(MampcError::InvalidParameter {
                name: "scales".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(Self {
            sizes,
            weights,
            biases,
            in_center,
            in_scale,
            out_offset,
            out_scale,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len() + w.nrows()).sum()
    }

    /// Parameters are ordered layer by layer, weights row-major then biases.
    pub fn param(&self, idx: usize) -> T {
        flat_get(&self.weights, &self.biases, idx)
    }

    pub fn set_param(&mut self, idx: usize, v: T) {
        match flat_locate(&self.weights, idx) {
            (l, Some((r, c)), _) => self.weights[l][(r, c)] = v,
            (l, None, i) => self.biases[l][i] = v,
        }
    }

    pub fn scratch(&self) -> MlpScratch<T> {
        let w = *self.sizes.iter().max().unwrap_or(&1);
        MlpScratch {
            a: vec![T::zero(); w],
            b: vec![T::zero(); w],
        }
    }

    pub fn forward_into(&self, x: &[T], s: &mut MlpScratch<T>, out: &mut [T]) {
        let n0 = self.sizes[0];
        for i in 0..n0 {
            s.a[i] = (x[i] - self.in_center[i]) / self.in_scale[i];
        }
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let rows = w.nrows();
            let acc = &mut s.b[..rows];
            acc.copy_from_slice(b.as_slice());
            for (col, &a) in w.as_slice().chunks_exact(rows).zip(&s.a) {
                for (v, &wi) in acc.iter_mut().zip(col) {
                    *v += wi * a;
                }
            }
            if l != last {
                acc.iter_mut().for_each(|v| *v = tanh(*v));
            }
            std::mem::swap(&mut s.a, &mut s.b);
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.out_offset[i] + self.out_scale[i] * s.a[i];
        }
    }

    pub fn forward(&self, x: &StateVec<T>) -> Result<InputVec<T>> {
        check_dim("network input", self.input_dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MampcError::NonFinite("network input"));
        }
        let mut out = DVector::zeros(self.output_dim());
        let mut s = self.scratch();
        self.forward_into(x.as_slice(), &mut s, out.as_mut_slice());
        Ok(out)
    }

    fn normalized_batch(&self, states: &[&StateVec<T>], labels: &[&InputVec<T>]) -> (DMatrix<T>, DMatrix<T>) {
        let bsz = states.len();
        let x = DMatrix::from_fn(self.input_dim(), bsz, |i, j| (states[j][i] - self.in_center[i]) / self.in_scale[i]);
        let y = DMatrix::from_fn(self.output_dim(), bsz, |i, j| (labels[j][i] - self.out_offset[i]) / self.out_scale[i]);
        (x, y)
    }

    fn forward_batch(&self, x: DMatrix<T>) -> Vec<DMatrix<T>> {
        let mut acts = vec![x];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &acts[acts.len() - 1];
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l != last {
                z.apply(|v| *v = tanh(*v));
            }
            acts.push(z);
        }
        acts
    }

    /// Mean squared error in normalized output units and its gradient.
    pub fn loss_gradient(&self, states: &[&StateVec<T>], labels: &[&InputVec<T>]) -> (T, MlpGradient<T>) {
        let (x, y) = self.normalized_batch(states, labels);
        let acts = self.forward_batch(x);
        let out = &acts[acts.len() - 1];
        let diff = out - &y;
        let count = T::lit(diff.len() as f64);
        let loss = diff.norm_squared() / count;
        let mut delta = diff * (T::lit(2.0) / count);
        let layers = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); layers];
        let mut gb = vec![DVector::zeros(0); layers];
        for l in (0..layers).rev() {
            gw[l] = &delta * acts[l].transpose();
            gb[l] = delta.column_sum();
            if l > 0 {
                let mut back = self.weights[l].transpose() * &delta;
                back.zip_apply(&acts[l], |d, a| *d *= T::one() - a * a);
                delta = back;
            }
        }
        (loss, MlpGradient { weights: gw, biases: gb })
    }

    pub fn loss(&self, states: &[&StateVec<T>], labels: &[&InputVec<T>]) -> T {
        if states.is_empty() {
            return T::zero();
        }
        let (x, y) = self.normalized_batch(states, labels);
        let acts = self.forward_batch(x);
        let diff = &acts[acts.len() - 1] - &y;
        diff.norm_squared() / T::lit(diff.len() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "mampc-mlp {BLOB_VERSION}\nlayers {}\nactivation tanh\nscalar f64-le\n--\n",
            self.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
        )
        .into_bytes();
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        let mut put = |v: T| out.extend_from_slice(&v.as_f64().to_le_bytes());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    put(w[(r, c)]);
                }
            }
            b.iter().for_each(|&v| put(v));
        }
        for v in [&self.in_center, &self.in_scale, &self.out_offset, &self.out_scale] {
            v.iter().for_each(|&x| put(x));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| MampcError::Blob(m.to_string());
        if bytes.len() < 32 {
            return Err(bad("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let sep = b"\n--\n";
        let split = body
            .windows(sep.len())
            .position(|w| w == sep)
            .ok_or_else(|| bad("missing header terminator"))?;
        let header = std::str::from_utf8(&body[..split]).map_err(|_| bad("header is not UTF-8"))?;
        if !header.starts_with("mampc-mlp ") {
            return Err(bad("not a policy blob"));
        }
        let mut rd = Reader {
            buf: &body[split + sep.len()..],
        };
        if rd.take(4)? != BLOB_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = rd.u32()?;
        if version != BLOB_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = rd.u32()? as usize;
        if !(2..=64).contains(&count) {
            return Err(bad("implausible layer count"));
        }
        let sizes: Vec<usize> = (0..count).map(|_| rd.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let header_sizes = header
            .lines()
            .find_map(|l| l.strip_prefix("layers "))
            .map(|l| l.split_whitespace().map(|t| t.parse::<usize>().unwrap_or(0)).collect::<Vec<_>>());
        if header_sizes.as_deref() != Some(&sizes[..]) {
            return Err(bad("header and body disagree on layer sizes"));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let mut m = DMatrix::zeros(w[1], w[0]);
            for r in 0..w[1] {
                for c in 0..w[0] {
                    m[(r, c)] = rd.real()?;
                }
            }
            let b = DVector::from_iterator(w[1], (0..w[1]).map(|_| rd.real()).collect::<Result<Vec<T>>>()?);
            weights.push(m);
            biases.push(b);
        }
        let (n, m) = (sizes[0], sizes[count - 1]);
        let mut vecn = |len: usize| -> Result<DVector<T>> {
            Ok(DVector::from_vec((0..len).map(|_| rd.real()).collect::<Result<Vec<T>>>()?))
        };
        let in_center = vecn(n)?;
        let in_scale = vecn(n)?;
        let out_offset = vecn(m)?;
        let out_scale = vecn(m)?;
        if !rd.buf.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Self::from_parts(weights, biases, in_center, in_scale, out_offset, out_scale)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| MampcError::Blob(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MampcError::Blob(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

const BLOB_MAGIC: &[u8; 4] = b"MLPB";
const BLOB_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(MampcError::Blob("truncated body".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn real<T: Real>(&mut self) -> Result<T> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(MampcError::Blob("non-finite parameter".into()));
        }
        Ok(T::lit(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig<T: Real> {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 256,
            learning_rate: T::lit(1e-3),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Per-epoch losses; index 0 is before any update.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve<T: Real> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
}

impl<T: Real> LossCurve<T> {
    pub fn initial(&self) -> T {
        self.train[0]
    }

    pub fn last(&self) -> T {
        self.train[self.train.len() - 1]
    }
}

/// Output affine map from the mean and standard deviation of the training
/// labels. Coordinates with no spread keep the box scale.
fn fit_output_scaling<T: Real>(net: &mut MlpPolicy<T>, data: &ImitationDataset<T>, idx: &[usize]) {
    if idx.is_empty() {
        return;
    }
    let k = T::lit(idx.len() as f64);
    for j in 0..net.output_dim() {
        let mean = idx.iter().fold(T::zero(), |a, &i| a + data.labels[i][j]) / k;
        let var = idx.iter().fold(T::zero(), |a, &i| a + (data.labels[i][j] - mean).powi(2)) / k;
        let sd = var.sqrt();
        if sd > T::zero() && sd.is_finite() {
            net.out_offset[j] = mean;
            net.out_scale[j] = sd;
        }
    }
}

pub fn train_imitation<T: Real>(data: &ImitationDataset<T>, sizes: &[usize], cfg: &TrainConfig<T>) -> Result<(MlpPolicy<T>, LossCurve<T>)> {
    if data.is_empty() {
        return Err(MampcError::Training("empty dataset".into()));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(MampcError::Training("batch size must be positive and validation fraction in [0, 1)".into()));
    }
    check_dim("dataset labels", data.states.len(), data.labels.len())?;
    let mut net = MlpPolicy::new(sizes, &data.sampling_box, &data.label_box, cfg.seed)?;
    for (x, u) in data.states.iter().zip(&data.labels) {
        check_dim("dataset state", net.input_dim(), x.len())?;
        check_dim("dataset label", net.output_dim(), u.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if data.len() >= 2 {
        ((data.len() as f64 * cfg.validation_fraction).round() as usize).min(data.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    fit_output_scaling(&mut net, data, &train_idx);
    let val_x: Vec<&StateVec<T>> = val_idx.iter().map(|&i| &data.states[i]).collect();
    let val_y: Vec<&InputVec<T>> = val_idx.iter().map(|&i| &data.labels[i]).collect();
    let full_loss = |net: &MlpPolicy<T>, idx: &[usize]| {
        let xs: Vec<&StateVec<T>> = idx.iter().map(|&i| &data.states[i]).collect();
        let ys: Vec<&InputVec<T>> = idx.iter().map(|&i| &data.labels[i]).collect();
        net.loss(&xs, &ys)
    };
    let mut curve = LossCurve {
        train: vec![full_loss(&net, &train_idx)],
        validation: vec![net.loss(&val_x, &val_y)],
    };
    let mut m_w: Vec<DMatrix<T>> = net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    let mut v_w = m_w.clone();
    let mut m_b: Vec<DVector<T>> = net.biases.iter().map(|b| DVector::zeros(b.len())).collect();
    let mut v_b = m_b.clone();
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let mut step = 0i32;
    for _ in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let xs: Vec<&StateVec<T>> = chunk.iter().map(|&i| &data.states[i]).collect();
            let ys: Vec<&InputVec<T>> = chunk.iter().map(|&i| &data.labels[i]).collect();
            let (_, grad) = net.loss_gradient(&xs, &ys);
            step += 1;
            let c1 = T::one() - b1.powi(step);
            let c2 = T::one() - b2.powi(step);
            let lr = cfg.learning_rate;
            let eps = cfg.epsilon;
            let update = |p: &mut T, g: T, m: &mut T, v: &mut T| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            for l in 0..net.weights.len() {
                for idx in 0..net.weights[l].len() {
                    update(&mut net.weights[l][idx], grad.weights[l][idx], &mut m_w[l][idx], &mut v_w[l][idx]);
                }
                for idx in 0..net.biases[l].len() {
                    update(&mut net.biases[l][idx], grad.biases[l][idx], &mut m_b[l][idx], &mut v_b[l][idx]);
                }
            }
        }
        curve.train.push(full_loss(&net, &train_idx));
        curve.validation.push(net.loss(&val_x, &val_y));
    }
    if curve.train.iter().any(|v| !v.is_finite()) {
        return Err(MampcError::Training("loss diverged".into()));
    }
    Ok((net, curve))
}
