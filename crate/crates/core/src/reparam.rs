//! Structural re-parameterization of a three-branch block.
//!
//! Each branch is `BN(conv(x))` (or `BN(x)` for the shortcut). Folding the
//! batch norm into the convolution, padding 1×1 kernels to 3×3 and summing
//! yields one 3×3 convolution with bias whose output equals the sum of the
//! active branches. All convolutions are stride 1 with "same" zero padding.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::profiles::LayerProfile;
use crate::scalar::Scalar;
use crate::strategy::{FusionStrategy, StrategyTable};

/// Bytes per stored value.
pub const VALUE_BYTES: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReparamError {
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("MissingBranch: strategy {strategy} needs a {branch} branch")]
    MissingBranch { strategy: FusionStrategy, branch: &'static str },
    #[error("InvalidBranch: {0}")]
    InvalidBranch(String),
}

type Result<T, E = ReparamError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Conv3x3,
    Conv1x1,
    Identity,
}

impl BranchKind {
    pub fn kernel_size(self) -> usize {
        match self {
            BranchKind::Conv3x3 => 3,
            BranchKind::Conv1x1 | BranchKind::Identity => 1,
        }
    }
}

/// Per-output-channel batch normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNorm<T> {
    /// `gamma = 1, beta = 0, mean = 0, var = 1 - eps`: the identity transform.
    pub fn identity(channels: usize, eps: T) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            mean: vec![T::zero(); channels],
            var: vec![T::one() - eps; channels],
            eps,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Multiplier `γ/√(var+ε)` for channel `o`.
    fn scale(&self, o: usize) -> T {
        self.gamma[o] / (self.var[o] + self.eps).sqrt()
    }
}

/// One branch of a block: an optional convolution followed by batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec<T> {
    pub kind: BranchKind,
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out_ch, in_ch, k, k]`, row-major. `None` for the shortcut.
    pub weights: Option<Vec<T>>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> BranchSpec<T> {
    pub fn conv(kind: BranchKind, in_ch: usize, out_ch: usize, weights: Vec<T>, bn: BatchNorm<T>) -> Result<Self> {
        let spec = BranchSpec {
            kind,
            in_ch,
            out_ch,
            weights: Some(weights),
            bn,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity(channels: usize, bn: BatchNorm<T>) -> Result<Self> {
        let spec = BranchSpec {
            kind: BranchKind::Identity,
            in_ch: channels,
            out_ch: channels,
            weights: None,
            bn,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(ReparamError::InvalidBranch("channel counts must be ≥ 1".into()));
        }
        match (self.kind, &self.weights) {
            (BranchKind::Identity, None) => {
                if self.in_ch != self.out_ch {
                    return Err(ReparamError::ShapeMismatch(format!(
                        "identity branch needs in_ch == out_ch, got {} and {}",
                        self.in_ch, self.out_ch
                    )));
                }
            }
            (BranchKind::Identity, Some(_)) => {
                return Err(ReparamError::InvalidBranch("identity branch carries no weights".into()))
            }
            (kind, Some(w)) => {
                let k = kind.kernel_size();
                let expected = self.out_ch * self.in_ch * k * k;
                if w.len() != expected {
                    return Err(ReparamError::ShapeMismatch(format!(
                        "{kind:?} weights have {} values, expected {expected}",
                        w.len()
                    )));
                }
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(ReparamError::InvalidBranch("non-finite weight".into()));
                }
            }
            (kind, None) => return Err(ReparamError::InvalidBranch(format!("{kind:?} branch needs weights"))),
        }
        let bn = &self.bn;
        let c = self.out_ch;
        if bn.channels() != c || bn.beta.len() != c || bn.mean.len() != c || bn.var.len() != c {
            return Err(ReparamError::ShapeMismatch(format!("batch norm must have {c} channels")));
        }
        if bn.eps.is_nan() || bn.eps <= T::zero() {
            return Err(ReparamError::InvalidBranch("batch norm eps must be > 0".into()));
        }
        if bn.var.iter().any(|v| v.is_nan() || *v < T::zero()) {
            return Err(ReparamError::InvalidBranch("batch norm variance must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Convolution weights, materializing the shortcut as a Dirac 1×1 kernel.
    fn kernel(&self) -> Vec<T> {
        match &self.weights {
            Some(w) => w.clone(),
            None => {
                let c = self.out_ch;
                let mut w = vec![T::zero(); c * c];
                for o in 0..c {
                    w[o * c + o] = T::one();
                }
                w
            }
        }
    }
}

/// A branch after batch-norm folding: a plain convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedBranch<T> {
    pub kernel_size: usize,
    pub out_ch: usize,
    pub in_ch: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// A dense 3×3 convolution with bias, `[out_ch, in_ch, 3, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel3x3<T> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Kernel3x3<T> {
    pub fn zeros(out_ch: usize, in_ch: usize) -> Self {
        Kernel3x3 {
            out_ch,
            in_ch,
            weights: vec![T::zero(); out_ch * in_ch * 9],
            bias: vec![T::zero(); out_ch],
        }
    }

    /// Element-wise sum of two kernels of the same shape.
    pub fn add(&self, other: &Kernel3x3<T>) -> Result<Kernel3x3<T>> {
        if self.out_ch != other.out_ch || self.in_ch != other.in_ch {
            return Err(ReparamError::ShapeMismatch(format!(
                "cannot add {}×{} kernel to {}×{} kernel",
                other.out_ch, other.in_ch, self.out_ch, self.in_ch
            )));
        }
        Ok(Kernel3x3 {
            out_ch: self.out_ch,
            in_ch: self.in_ch,
            weights: self.weights.iter().zip(&other.weights).map(|(a, b)| *a + *b).collect(),
            bias: self.bias.iter().zip(&other.bias).map(|(a, b)| *a + *b).collect(),
        })
    }

    pub fn forward(&self, x: &Tensor3<T>) -> Tensor3<T> {
        conv2d(x, &self.weights, self.out_ch, 3, Some(&self.bias))
    }
}

/// `W' = W·γ/√(var+ε)` per output channel, `b' = β − γ·mean/√(var+ε)`.
pub fn fold_bn<T: Scalar>(branch: &BranchSpec<T>) -> FoldedBranch<T> {
    let k = branch.kind.kernel_size();
    let per_out = branch.in_ch * k * k;
    let mut weights = branch.kernel();
    let mut bias = Vec::with_capacity(branch.out_ch);
    for o in 0..branch.out_ch {
        let scale = branch.bn.scale(o);
        for w in &mut weights[o * per_out..(o + 1) * per_out] {
            *w = *w * scale;
        }
        bias.push(branch.bn.beta[o] - branch.bn.mean[o] * scale);
    }
    FoldedBranch {
        kernel_size: k,
        out_ch: branch.out_ch,
        in_ch: branch.in_ch,
        weights,
        bias,
    }
}

/// Places each 1×1 value at the centre of a zero 3×3 window.
pub fn pad_1x1_to_3x3<T: Scalar>(weights: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); weights.len() * 9];
    for (i, w) in weights.iter().enumerate() {
        out[i * 9 + 4] = *w;
    }
    out
}

fn folded_as_3x3<T: Scalar>(folded: FoldedBranch<T>) -> Kernel3x3<T> {
    let weights = if folded.kernel_size == 1 {
        pad_1x1_to_3x3(&folded.weights)
    } else {
        folded.weights
    };
    Kernel3x3 {
        out_ch: folded.out_ch,
        in_ch: folded.in_ch,
        weights,
        bias: folded.bias,
    }
}

/// Sums the folded, padded kernels of `branches` into one 3×3 convolution.
pub fn fuse_branches<T: Scalar>(branches: &[&BranchSpec<T>]) -> Result<Kernel3x3<T>> {
    let first = branches
        .first()
        .ok_or_else(|| ReparamError::InvalidBranch("nothing to fuse".into()))?;
    let mut acc = Kernel3x3::zeros(first.out_ch, first.in_ch);
    for branch in branches {
        branch.validate()?;
        acc = acc.add(&folded_as_3x3(fold_bn(branch)))?;
    }
    Ok(acc)
}

/// The three-branch block: 3×3 conv, optional 1×1 conv, optional shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct RepBlock<T> {
    pub conv3x3: BranchSpec<T>,
    pub conv1x1: Option<BranchSpec<T>>,
    pub shortcut: Option<BranchSpec<T>>,
}

impl<T: Scalar> RepBlock<T> {
    /// Branches active under `strategy`.
    pub fn active(&self, strategy: FusionStrategy) -> Result<Vec<&BranchSpec<T>>> {
        let mut out = vec![&self.conv3x3];
        if strategy.has_shortcut() {
            out.push(self.shortcut.as_ref().ok_or(ReparamError::MissingBranch {
                strategy,
                branch: "shortcut",
            })?);
        }
        if strategy.has_1x1() {
            out.push(self.conv1x1.as_ref().ok_or(ReparamError::MissingBranch {
                strategy,
                branch: "1x1",
            })?);
        }
        Ok(out)
    }

    /// Reference multi-branch output: the sum of every active branch.
    pub fn forward(&self, strategy: FusionStrategy, x: &Tensor3<T>) -> Result<Tensor3<T>> {
        let branches = self.active(strategy)?;
        let mut acc = branch_forward(branches[0], x);
        for b in &branches[1..] {
            let y = branch_forward(b, x);
            for (a, v) in acc.data.iter_mut().zip(y.data) {
                *a = *a + v;
            }
        }
        Ok(acc)
    }
}

/// Fuses the branches selected by `strategy` into one 3×3 kernel.
pub fn fuse<T: Scalar>(block: &RepBlock<T>, strategy: FusionStrategy) -> Result<Kernel3x3<T>> {
    fuse_branches(&block.active(strategy)?)
}

// ---------------------------------------------------------------------------
// Reference evaluation

/// Activation tensor in `[channels, height, width]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Stride-1 convolution with zero padding `k / 2` (shape preserving).
pub fn conv2d<T: Scalar>(x: &Tensor3<T>, weights: &[T], out_ch: usize, k: usize, bias: Option<&[T]>) -> Tensor3<T> {
    let (h, w, in_ch) = (x.height, x.width, x.channels);
    let pad = (k / 2) as isize;
    let mut y = Tensor3::zeros(out_ch, h, w);
    for o in 0..out_ch {
        let b = bias.map_or(T::zero(), |b| b[o]);
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = b;
                for i in 0..in_ch {
                    let kbase = (o * in_ch + i) * k * k;
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc + weights[kbase + ky * k + kx] * x.at(i, iy as usize, ix as usize);
                        }
                    }
                }
                y.data[(o * h + oy) * w + ox] = acc;
            }
        }
    }
    y
}

pub fn batch_norm<T: Scalar>(x: &Tensor3<T>, bn: &BatchNorm<T>) -> Tensor3<T> {
    let plane = x.height * x.width;
    let mut y = x.clone();
    for c in 0..x.channels {
        let denom = (bn.var[c] + bn.eps).sqrt();
        for v in &mut y.data[c * plane..(c + 1) * plane] {
            *v = bn.gamma[c] * (*v - bn.mean[c]) / denom + bn.beta[c];
        }
    }
    y
}

/// Unfused branch output `BN(conv(x))`, or `BN(x)` for the shortcut.
pub fn branch_forward<T: Scalar>(branch: &BranchSpec<T>, x: &Tensor3<T>) -> Tensor3<T> {
    match &branch.weights {
        Some(w) => batch_norm(&conv2d(x, w, branch.out_ch, branch.kind.kernel_size(), None), &branch.bn),
        None => batch_norm(x, &branch.bn),
    }
}

/// `max|a − b| / max|b|`, the max-norm relative error of `a` against `b`.
pub fn max_relative_error<T: Scalar>(a: &Tensor3<T>, b: &Tensor3<T>) -> T {
    let diff = a
        .data
        .iter()
        .zip(&b.data)
        .fold(T::zero(), |m, (x, y)| m.max((*x - *y).abs()));
    let scale = b.max_abs();
    if scale > T::zero() {
        diff / scale
    } else {
        diff
    }
}

// ---------------------------------------------------------------------------
// Costs

/// FLOPs and bytes of one block executed in multi-branch form under
/// `strategy`.
///
/// A multiply-accumulate counts as 2 FLOPs and the shortcut as one add per
/// output element. Bytes are 4 per weight of every active convolution plus
/// one read of the input and one write of the output; the branches share the
/// input tensor and accumulate into the same output.
pub fn strategy_costs<T: Scalar>(in_ch: usize, out_ch: usize, h: usize, w: usize, strategy: FusionStrategy) -> (T, T) {
    let (ci, co, hw) = (T::of(in_ch as f64), T::of(out_ch as f64), T::of((h * w) as f64));
    let two = T::of(2.0);
    let nine = T::of(9.0);
    let value = T::of(VALUE_BYTES);

    let mut flops = two * nine * ci * co * hw;
    let mut weights = nine * ci * co;
    if strategy.has_1x1() {
        flops = flops + two * ci * co * hw;
        weights = weights + ci * co;
    }
    if strategy.has_shortcut() {
        flops = flops + co * hw;
    }
    let bytes = value * (weights + ci * hw + co * hw);
    (flops, bytes)
}

/// Layer profile of a shape-preserving block with all four strategies costed.
pub fn repblock_layer<T: Scalar>(index: usize, in_ch: usize, out_ch: usize, h: usize, w: usize) -> LayerProfile<T> {
    let costs = StrategyTable::from_fn(|s| strategy_costs::<T>(in_ch, out_ch, h, w, s));
    LayerProfile {
        index,
        flops: StrategyTable::from_fn(|s| costs[s].0),
        bytes: StrategyTable::from_fn(|s| costs[s].1),
        output_activation_bytes: T::of(VALUE_BYTES * (out_ch * h * w) as f64),
        fusible: true,
    }
}

// ---------------------------------------------------------------------------
// Randomized equivalence

fn uniform<T: Scalar, R: Rng>(rng: &mut R, lo: f64, hi: f64) -> T {
    T::of(rng.random_range(lo..hi))
}

fn random_bn<T: Scalar, R: Rng>(rng: &mut R, channels: usize) -> BatchNorm<T> {
    BatchNorm {
        gamma: (0..channels).map(|_| uniform(rng, 0.5, 1.5)).collect(),
        beta: (0..channels).map(|_| uniform(rng, -0.5, 0.5)).collect(),
        mean: (0..channels).map(|_| uniform(rng, -0.5, 0.5)).collect(),
        var: (0..channels).map(|_| uniform(rng, 0.1, 2.0)).collect(),
        eps: T::of(1e-5),
    }
}

/// A block with random weights and batch-norm statistics on every branch.
pub fn random_block<T: Scalar, R: Rng>(rng: &mut R, channels: usize) -> RepBlock<T> {
    let weights = |rng: &mut R, n: usize| -> Vec<T> { (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect() };
    let c = channels;
    let w3 = weights(rng, c * c * 9);
    let bn3 = random_bn(rng, c);
    let w1 = weights(rng, c * c);
    let bn1 = random_bn(rng, c);
    let bns = random_bn(rng, c);
    RepBlock {
        conv3x3: BranchSpec::conv(BranchKind::Conv3x3, c, c, w3, bn3).expect("valid random branch"),
        conv1x1: Some(BranchSpec::conv(BranchKind::Conv1x1, c, c, w1, bn1).expect("valid random branch")),
        shortcut: Some(BranchSpec::identity(c, bns).expect("valid random branch")),
    }
}

pub fn random_input<T: Scalar, R: Rng>(rng: &mut R, channels: usize, h: usize, w: usize) -> Tensor3<T> {
    Tensor3 {
        channels,
        height: h,
        width: w,
        data: (0..channels * h * w).map(|_| uniform(rng, -1.0, 1.0)).collect(),
    }
}

/// Channel counts exercised by [`fusion_check`].
pub const CHECK_CHANNELS: [usize; 3] = [1, 4, 16];
/// Spatial sizes exercised by [`fusion_check`].
pub const CHECK_SPATIAL: [usize; 3] = [5, 8, 16];

/// Worst fused-vs-branch-sum error seen for one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionCheck {
    pub strategy: FusionStrategy,
    pub trials: usize,
    pub max_rel_err: f64,
}

/// Runs `trials` randomized equivalence trials per strategy, cycling through
/// the channel and spatial sizes, and reports the worst relative error.
pub fn fusion_check(seed: u64, trials: usize) -> Vec<FusionCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FusionStrategy::ALL
        .iter()
        .map(|&strategy| {
            let mut worst = 0.0_f64;
            for t in 0..trials {
                let c = CHECK_CHANNELS[t % CHECK_CHANNELS.len()];
                let s = CHECK_SPATIAL[(t / CHECK_CHANNELS.len()) % CHECK_SPATIAL.len()];
                let block: RepBlock<f64> = random_block(&mut rng, c);
                let x = random_input(&mut rng, c, s, s);
                let fused = fuse(&block, strategy).expect("random block has every branch");
                let reference = block.forward(strategy, &x).expect("random block has every branch");
                worst = worst.max(max_relative_error(&fused.forward(&x), &reference));
            }
            FusionCheck {
                strategy,
                trials,
                max_rel_err: worst,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use FusionStrategy::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Independent direct convolution: explicit zero-padded copy of the input.
    fn padded_conv(x: &Tensor3<f64>, w: &[f64], out_ch: usize, k: usize) -> Tensor3<f64> {
        let p = k / 2;
        let (hp, wp) = (x.height + 2 * p, x.width + 2 * p);
        let mut padded = vec![0.0; x.channels * hp * wp];
        for c in 0..x.channels {
            for yy in 0..x.height {
                for xx in 0..x.width {
                    padded[(c * hp + yy + p) * wp + xx + p] = x.at(c, yy, xx);
                }
            }
        }
        let mut out = Tensor3::zeros(out_ch, x.height, x.width);
        for o in 0..out_ch {
            for yy in 0..x.height {
                for xx in 0..x.width {
                    let mut s = 0.0;
                    for c in 0..x.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                s += w[((o * x.channels + c) * k + ky) * k + kx] * padded[(c * hp + yy + ky) * wp + xx + kx];
                            }
                        }
                    }
                    out.data[(o * x.height + yy) * x.width + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn reference_conv_matches_padded_oracle() {
        let mut r = rng(1);
        for (c, k) in [(1, 3), (3, 3), (4, 1)] {
            let x: Tensor3<f64> = random_input(&mut r, c, 6, 5);
            let w: Vec<f64> = (0..c * c * k * k).map(|_| r.random_range(-1.0..1.0)).collect();
            let a = conv2d(&x, &w, c, k, None);
            let b = padded_conv(&x, &w, c, k);
            assert!(max_relative_error(&a, &b) < 1e-14);
        }
    }

    #[test]
    fn identity_bn_leaves_kernel() {
        let w: Vec<f64> = vec![0.3, -1.2, 0.7, 0.0, 1.0, 2.0, -0.5, 0.25, 0.125];
        let b = BranchSpec::conv(BranchKind::Conv3x3, 1, 1, w.clone(), BatchNorm::identity(1, 1e-5)).unwrap();
        let f = fold_bn(&b);
        for (a, e) in f.weights.iter().zip(&w) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(f.bias, vec![0.0]);
    }

    #[test]
    fn scale_shift_bn() {
        let eps = 1e-5_f64;
        let bn = BatchNorm {
            gamma: vec![2.0, 2.0],
            beta: vec![1.0, 1.0],
            mean: vec![0.0, 0.0],
            var: vec![1.0 - eps, 1.0 - eps],
            eps,
        };
        let b = BranchSpec::conv(BranchKind::Conv1x1, 2, 2, vec![1.0, 0.0, 0.0, 1.0], bn).unwrap();
        let f = fold_bn(&b);
        for (a, e) in f.weights.iter().zip([2.0, 0.0, 0.0, 2.0]) {
            assert!((a - e).abs() < 1e-14);
        }
        assert_eq!(f.bias, vec![1.0, 1.0]);
    }

    #[test]
    fn folded_branch_matches_bn_of_conv() {
        let mut r = rng(2);
        for trial in 0..50 {
            let c = [1, 3, 4][trial % 3];
            let block: RepBlock<f64> = random_block(&mut r, c);
            let x = random_input(&mut r, c, 7, 6);
            for branch in [&block.conv3x3, block.conv1x1.as_ref().unwrap(), block.shortcut.as_ref().unwrap()] {
                let f = fold_bn(branch);
                let folded = conv2d(&x, &f.weights, f.out_ch, f.kernel_size, Some(&f.bias));
                let reference = batch_norm(&padded_conv(&x, &branch.kernel(), c, f.kernel_size), &branch.bn);
                assert!(max_relative_error(&folded, &reference) < 1e-5);
            }
        }
    }

    #[test]
    fn pad_places_center() {
        let p = pad_1x1_to_3x3(&[5.0]);
        assert_eq!(p, vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(pad_1x1_to_3x3(&[0.0_f64; 4]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn padded_1x1_conv_equals_original() {
        let mut r = rng(3);
        for _ in 0..20 {
            let c = r.random_range(1..5);
            let x: Tensor3<f64> = random_input(&mut r, c, 5, 7);
            let w: Vec<f64> = (0..c * c).map(|_| r.random_range(-1.0..1.0)).collect();
            let a = padded_conv(&x, &w, c, 1);
            let b = padded_conv(&x, &pad_1x1_to_3x3(&w), c, 3);
            let diff = a.data.iter().zip(&b.data).fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(diff <= 1e-6);
        }
    }

    #[test]
    fn singleton_fuse_is_the_3x3_branch() {
        let w: Vec<f64> = (0..4 * 4 * 9).map(|i| (i as f64 * 0.37).sin()).collect();
        let block = RepBlock {
            conv3x3: BranchSpec::conv(BranchKind::Conv3x3, 4, 4, w.clone(), BatchNorm::identity(4, 1e-5)).unwrap(),
            conv1x1: None,
            shortcut: None,
        };
        let k = fuse(&block, S3).unwrap();
        for (a, e) in k.weights.iter().zip(&w) {
            assert!((a - e).abs() < 1e-14);
        }
        assert!(k.bias.iter().all(|b| *b == 0.0));
        assert_eq!(
            fuse(&block, S3Ss).unwrap_err(),
            ReparamError::MissingBranch {
                strategy: S3Ss,
                branch: "shortcut"
            }
        );
    }

    #[test]
    fn full_fusion_matches_branch_sum() {
        let mut r = rng(4);
        for trial in 0..100 {
            let c = [1, 4, 8][trial % 3];
            let s = [5, 8, 11][(trial / 3) % 3];
            let block: RepBlock<f64> = random_block(&mut r, c);
            let x = random_input(&mut r, c, s, s);
            let fused = fuse(&block, S3SsS1).unwrap();
            let reference = block.forward(S3SsS1, &x).unwrap();
            assert!(max_relative_error(&fused.forward(&x), &reference) <= 1e-5);
        }
    }

    #[test]
    fn opposite_branches_cancel() {
        let w: Vec<f64> = (0..2 * 2 * 9).map(|i| i as f64 - 10.0).collect();
        let neg: Vec<f64> = w.iter().map(|v| -v).collect();
        let a = BranchSpec::conv(BranchKind::Conv3x3, 2, 2, w, BatchNorm::identity(2, 1e-5)).unwrap();
        let b = BranchSpec::conv(BranchKind::Conv3x3, 2, 2, neg, BatchNorm::identity(2, 1e-5)).unwrap();
        let k = fuse_branches(&[&a, &b]).unwrap();
        assert!(k.weights.iter().all(|v| *v == 0.0));
        assert!(k.bias.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_detected() {
        let a = BranchSpec::conv(BranchKind::Conv3x3, 2, 2, vec![0.0; 36], BatchNorm::identity(2, 1e-5)).unwrap();
        let b = BranchSpec::conv(BranchKind::Conv3x3, 3, 2, vec![0.0; 54], BatchNorm::identity(2, 1e-5)).unwrap();
        assert!(matches!(fuse_branches(&[&a, &b]), Err(ReparamError::ShapeMismatch(_))));
        assert!(matches!(
            BranchSpec::conv(BranchKind::Conv3x3, 2, 2, vec![0.0; 35], BatchNorm::identity(2, 1e-5)),
            Err(ReparamError::ShapeMismatch(_))
        ));
        let bad_identity = BranchSpec {
            kind: BranchKind::Identity,
            in_ch: 2,
            out_ch: 3,
            weights: None,
            bn: BatchNorm::identity(3, 1e-5),
        };
        assert!(matches!(bad_identity.validate(), Err(ReparamError::ShapeMismatch(_))));
    }

    #[test]
    fn fuse_is_additive() {
        let mut r = rng(5);
        let block: RepBlock<f64> = random_block(&mut r, 3);
        let one = block.conv1x1.as_ref().unwrap();
        let short = block.shortcut.as_ref().unwrap();
        let union = fuse_branches(&[&block.conv3x3, one, short]).unwrap();
        let parts = fuse_branches(&[&block.conv3x3]).unwrap().add(&fuse_branches(&[one, short]).unwrap()).unwrap();
        for (a, b) in union.weights.iter().zip(&parts.weights) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in union.bias.iter().zip(&parts.bias) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_fusion_is_close() {
        let mut r = rng(6);
        let block: RepBlock<f32> = random_block(&mut r, 4);
        let x = random_input(&mut r, 4, 8, 8);
        let fused = fuse(&block, S3SsS1).unwrap();
        let reference = block.forward(S3SsS1, &x).unwrap();
        assert!(max_relative_error(&fused.forward(&x), &reference) < 1e-4);
    }

    /// Counts multiply-accumulates by walking every kernel tap.
    fn loop_count_macs(ci: usize, co: usize, h: usize, w: usize, k: usize) -> u64 {
        let mut n = 0u64;
        for _o in 0..co {
            for _y in 0..h {
                for _x in 0..w {
                    for _i in 0..ci {
                        for _t in 0..k * k {
                            n += 1;
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn strategy_cost_examples() {
        let (f, _) = strategy_costs::<f64>(1, 1, 1, 1, S3);
        assert_eq!(f, 18.0);
        let (f, _) = strategy_costs::<f64>(64, 64, 56, 56, S3S1);
        let macs = loop_count_macs(64, 64, 56, 56, 3) + loop_count_macs(64, 64, 56, 56, 1);
        assert_eq!(f, 2.0 * macs as f64);
        assert_eq!(f, 2.0 * 10.0 * 64.0 * 64.0 * 56.0 * 56.0);
    }

    #[test]
    fn costs_monotone_and_fusion_lowers_intensity() {
        for (ci, h) in [(1, 1), (3, 7), (16, 16), (64, 56), (512, 7)] {
            let costs: Vec<(f64, f64)> = FusionStrategy::ALL.iter().map(|&s| strategy_costs(ci, ci, h, h, s)).collect();
            for lo in FusionStrategy::ALL {
                for hi in FusionStrategy::ALL {
                    if lo.is_subset_of(hi) {
                        assert!(costs[hi.ordinal()].0 >= costs[lo.ordinal()].0);
                        assert!(costs[hi.ordinal()].1 >= costs[lo.ordinal()].1);
                    }
                }
            }
            let fused = costs[S3.ordinal()].0 / costs[S3.ordinal()].1;
            for s in [S3Ss, S3S1, S3SsS1] {
                let multi = costs[s.ordinal()].0 / costs[s.ordinal()].1;
                assert!(fused < multi, "ci={ci} h={h} {s}");
            }
        }
    }

    #[test]
    fn repblock_layer_is_valid_profile() {
        let l: LayerProfile<f64> = repblock_layer(0, 8, 8, 14, 14);
        assert!(l.fusible);
        assert_eq!(l.output_activation_bytes, 4.0 * 8.0 * 14.0 * 14.0);
        assert!(l.flops[S3] < l.flops[S3SsS1]);
    }

    #[test]
    fn fusion_check_is_reproducible() {
        let a = fusion_check(9, 6);
        assert_eq!(a, fusion_check(9, 6));
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|c| c.max_rel_err <= 1e-5));
    }
}
