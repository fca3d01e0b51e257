//! Convolution layer with a learned, continuous filter size.
//!
//! The size `k` is a positive real bracketed by the odd integers
//! `k_minus <= k < k_plus = k_minus + 2`. Only the upper-bound filter bank
//! (size `k_plus`) is stored: the lower-bound filter is its inner
//! `k_minus x k_minus` block, and the outermost one-pixel ring is the
//! difference between the two. The forward pass convolves once with the
//! composite filter (ring scaled by the interpolation weight `alpha`),
//! which reproduces the interpolation between the two bound filters'
//! activations exactly. When an update pushes `k` across an interval
//! boundary, the stored bank is expanded by edge replication or shrunk by
//! cropping.

use crate::error::{Error, Result};
use crate::ops::{conv2d_same, conv2d_same_backward};
use crate::rng::Stream;
use crate::tensor::{FilterBank, Tensor};

/// A continuous filter size with its integer bounds and interpolation weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousFilterSize {
    k: f64,
    k_minus: usize,
    k_plus: usize,
    alpha: f64,
}

impl ContinuousFilterSize {
    pub fn k(&self) -> f64 {
        self.k
    }
    pub fn k_minus(&self) -> usize {
        self.k_minus
    }
    pub fn k_plus(&self) -> usize {
        self.k_plus
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Integer bounds and interpolation weight of a continuous size `k >= 1`:
/// `k_plus = floor((k+1)/2)*2 + 1`, `k_minus = k_plus - 2`,
/// `alpha = (k - k_minus) / 2`.
pub fn bounds_of(k: f64) -> Result<ContinuousFilterSize> {
    if !(k >= 1.0) || !k.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "filter size k must be a finite real >= 1, got {k}"
        )));
    }
    let half = ((k + 1.0) / 2.0).floor() as usize;
    let k_plus = half * 2 + 1;
    let k_minus = k_plus - 2;
    let alpha = (k - k_minus as f64) / 2.0;
    Ok(ContinuousFilterSize {
        k,
        k_minus,
        k_plus,
        alpha,
    })
}

/// Grow a bank by one ring (size `s -> s+2`), filling the new border by
/// replicating the nearest edge value of the original filter. The original
/// filter is preserved bit-exactly as the inner block.
pub fn expand_filters(filters: &FilterBank) -> FilterBank {
    let s = filters.size;
    let t = s + 2;
    let mut out = FilterBank::zeros(filters.out_channels, filters.in_channels, t)
        .expect("odd size stays odd under +2");
    for co in 0..filters.out_channels {
        for ci in 0..filters.in_channels {
            let src = filters.tap_slice(co, ci);
            let dst_base = out.at(co, ci, 0, 0);
            for y in 0..t {
                let sy = (y as isize - 1).clamp(0, s as isize - 1) as usize;
                for x in 0..t {
                    let sx = (x as isize - 1).clamp(0, s as isize - 1) as usize;
                    out.weights.data[dst_base + y * t + x] = src[sy * s + sx];
                }
            }
        }
    }
    out
}

/// Zero the outermost ring of a bank, keeping its storage size. The result
/// acts as the size `s-2` filter padded with zeros.
pub fn shrink_filters(filters: &FilterBank) -> Result<FilterBank> {
    if filters.size < 3 {
        return Err(Error::InvalidArgument(
            "cannot shrink a 1x1 filter below the minimum size".into(),
        ));
    }
    let mut out = filters.clone();
    zero_ring_in_place(&mut out);
    Ok(out)
}

fn zero_ring_in_place(filters: &mut FilterBank) {
    let s = filters.size;
    for co in 0..filters.out_channels {
        for ci in 0..filters.in_channels {
            let base = filters.at(co, ci, 0, 0);
            for x in 0..s {
                filters.weights.data[base + x] = 0.0;
                filters.weights.data[base + (s - 1) * s + x] = 0.0;
            }
            for y in 0..s {
                filters.weights.data[base + y * s] = 0.0;
                filters.weights.data[base + y * s + s - 1] = 0.0;
            }
        }
    }
}

/// Extract the inner `(s-2) x (s-2)` block of each filter as its own bank.
pub fn crop_filters(filters: &FilterBank) -> Result<FilterBank> {
    if filters.size < 3 {
        return Err(Error::InvalidArgument(
            "cannot crop a 1x1 filter below the minimum size".into(),
        ));
    }
    let s = filters.size;
    let t = s - 2;
    let mut out = FilterBank::zeros(filters.out_channels, filters.in_channels, t)?;
    for co in 0..filters.out_channels {
        for ci in 0..filters.in_channels {
            let src = filters.tap_slice(co, ci);
            let dst_base = out.at(co, ci, 0, 0);
            for y in 0..t {
                for x in 0..t {
                    out.weights.data[dst_base + y * t + x] = src[(y + 1) * s + x + 1];
                }
            }
        }
    }
    Ok(out)
}

/// Gradients produced by one backward pass through the layer.
#[derive(Debug, Clone)]
pub struct OfsGrads {
    pub filters: Tensor,
    pub bias: Vec<f64>,
    pub size: f64,
    pub input: Option<Tensor>,
}

/// Convolution layer whose filter size is itself a trained parameter.
///
/// All output channels share one size. The stored weight array is always
/// the upper-bound bank at size `k_plus`.
#[derive(Debug, Clone)]
pub struct OfsConvLayer {
    upper: FilterBank,
    bias: Vec<f64>,
    size: ContinuousFilterSize,
    k_min_clamp: f64,
    k_max_clamp: f64,
    momentum_filters: Tensor,
    momentum_bias: Vec<f64>,
    momentum_size: f64,
    cached_input: Option<Tensor>,
}

impl OfsConvLayer {
    /// Fresh layer with weights drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` and zero biases.
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        initial_k: f64,
        k_min_clamp: f64,
        k_max_clamp: f64,
        init: &mut Stream,
    ) -> Result<Self> {
        if !(k_min_clamp >= 1.0) || !(k_max_clamp >= k_min_clamp) {
            return Err(Error::InvalidArgument(format!(
                "size clamp range must satisfy 1 <= min <= max, got [{k_min_clamp}, {k_max_clamp}]"
            )));
        }
        if initial_k < k_min_clamp || initial_k > k_max_clamp {
            return Err(Error::InvalidArgument(format!(
                "initial k {initial_k} outside clamp range [{k_min_clamp}, {k_max_clamp}]"
            )));
        }
        let size = bounds_of(initial_k)?;
        let s = size.k_plus;
        let fan_in = (in_channels * s * s) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = out_channels * in_channels * s * s;
        let data: Vec<f64> = (0..n).map(|_| init.uniform_in(-bound, bound)).collect();
        let upper = FilterBank::new(
            out_channels,
            in_channels,
            s,
            Tensor::new(vec![out_channels, in_channels, s, s], data)?,
        )?;
        Ok(OfsConvLayer {
            momentum_filters: Tensor::zeros(upper.weights.shape.clone()),
            momentum_bias: vec![0.0; out_channels],
            upper,
            bias: vec![0.0; out_channels],
            size,
            k_min_clamp,
            k_max_clamp,
            momentum_size: 0.0,
            cached_input: None,
        })
    }

    /// Rebuild a layer from checkpointed state.
    pub fn from_state(
        upper: FilterBank,
        bias: Vec<f64>,
        k: f64,
        k_min_clamp: f64,
        k_max_clamp: f64,
        momentum_filters: Tensor,
        momentum_bias: Vec<f64>,
        momentum_size: f64,
    ) -> Result<Self> {
        let size = bounds_of(k)?;
        if upper.size != size.k_plus {
            return Err(Error::shape(
                "OfsConvLayer::from_state",
                format!("upper bank size {}", size.k_plus),
                format!("{}", upper.size),
            ));
        }
        if momentum_filters.shape != upper.weights.shape
            || bias.len() != upper.out_channels
            || momentum_bias.len() != upper.out_channels
        {
            return Err(Error::shape(
                "OfsConvLayer::from_state",
                format!("buffers matching {:?}", upper.weights.shape),
                format!("{:?}", momentum_filters.shape),
            ));
        }
        Ok(OfsConvLayer {
            upper,
            bias,
            size,
            k_min_clamp,
            k_max_clamp,
            momentum_filters,
            momentum_bias,
            momentum_size,
            cached_input: None,
        })
    }

    pub fn size(&self) -> &ContinuousFilterSize {
        &self.size
    }
    pub fn clamp_range(&self) -> (f64, f64) {
        (self.k_min_clamp, self.k_max_clamp)
    }
    pub fn upper(&self) -> &FilterBank {
        &self.upper
    }
    /// Mutable view of the upper-bank weights; the shape must be preserved.
    pub fn upper_weights_mut(&mut self) -> &mut Tensor {
        &mut self.upper.weights
    }
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }
    pub fn momentum_filters(&self) -> &Tensor {
        &self.momentum_filters
    }
    pub fn momentum_bias(&self) -> &[f64] {
        &self.momentum_bias
    }
    pub fn momentum_size(&self) -> f64 {
        self.momentum_size
    }
    pub fn out_channels(&self) -> usize {
        self.upper.out_channels
    }
    pub fn in_channels(&self) -> usize {
        self.upper.in_channels
    }

    fn cached(&self, op: &'static str) -> Result<&Tensor> {
        self.cached_input.as_ref().ok_or(Error::NoForwardCache(op))
    }

    /// Iterate flat weight-array offsets on the outermost ring.
    fn ring_offsets(&self) -> impl Iterator<Item = usize> + '_ {
        let s = self.upper.size;
        let planes = self.upper.out_channels * self.upper.in_channels;
        (0..planes).flat_map(move |p| {
            let base = p * s * s;
            (0..s * s).filter_map(move |i| {
                let (y, x) = (i / s, i % s);
                if y == 0 || y == s - 1 || x == 0 || x == s - 1 {
                    Some(base + i)
                } else {
                    None
                }
            })
        })
    }

    /// The single filter realizing the continuous size: inner block copied
    /// from the upper bank, outermost ring scaled by `alpha`.
    pub fn composite_filter(&self) -> FilterBank {
        let mut comp = self.upper.clone();
        let alpha = self.size.alpha;
        for off in self.ring_offsets().collect::<Vec<_>>() {
            comp.weights.data[off] *= alpha;
        }
        comp
    }

    /// One same-padded convolution with the composite filter. Caches the
    /// input for the gradient accessors.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let comp = self.composite_filter();
        let out = conv2d_same(input, &comp, &self.bias)?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    /// Reference forward pass: two convolutions (upper bank, and the cropped
    /// lower bank) interpolated by `alpha`, sharing the bias. Exists to check
    /// the single-convolution path against; not used for training.
    pub fn forward_interp_oracle(&self, input: &Tensor) -> Result<Tensor> {
        let alpha = self.size.alpha;
        let y_plus = conv2d_same(input, &self.upper, &self.bias)?;
        let lower = crop_filters(&self.upper)?;
        let y_minus = conv2d_same(input, &lower, &self.bias)?;
        let data = y_plus
            .data
            .iter()
            .zip(&y_minus.data)
            .map(|(&p, &m)| alpha * p + (1.0 - alpha) * m)
            .collect();
        Tensor::new(y_plus.shape.clone(), data)
    }

    /// d loss / d k, summed over batch, channels, and positions: each
    /// activation contributes its ring-only response divided by
    /// `k_plus - k_minus = 2`.
    pub fn grad_size(&self, upstream: &Tensor) -> Result<f64> {
        let input = self.cached("grad_size")?;
        let mut ring = self.upper.clone();
        let s = ring.size;
        for co in 0..ring.out_channels {
            for ci in 0..ring.in_channels {
                let base = ring.at(co, ci, 0, 0);
                for y in 1..s - 1 {
                    for x in 1..s - 1 {
                        ring.weights.data[base + y * s + x] = 0.0;
                    }
                }
            }
        }
        let ring_response = conv2d_same(input, &ring, &vec![0.0; ring.out_channels])?;
        if ring_response.shape != upstream.shape {
            return Err(Error::shape(
                "grad_size upstream",
                format!("{:?}", ring_response.shape),
                format!("{:?}", upstream.shape),
            ));
        }
        let mut acc = 0.0;
        for (&u, &r) in upstream.data.iter().zip(&ring_response.data) {
            acc += u * r;
        }
        Ok(acc / 2.0)
    }

    /// d loss / d upper-bank weights: the standard weight gradient at size
    /// `k_plus`, with ring coordinates scaled by `alpha` (the ring only
    /// reaches the activation through the `alpha`-weighted difference term).
    pub fn grad_filters(&self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cached("grad_filters")?;
        let (_, mut gw, _) = conv2d_same_backward(input, &self.upper, upstream, false)?;
        let alpha = self.size.alpha;
        for off in self.ring_offsets().collect::<Vec<_>>() {
            gw.data[off] *= alpha;
        }
        Ok(gw)
    }

    /// d loss / d input: transposed convolution with the composite filter.
    pub fn grad_input(&self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cached("grad_input")?;
        let comp = self.composite_filter();
        let (gin, _, _) = conv2d_same_backward(input, &comp, upstream, true)?;
        Ok(gin.expect("input grad requested"))
    }

    /// d loss / d bias, per output channel.
    pub fn grad_bias(&self, upstream: &Tensor) -> Result<Vec<f64>> {
        self.cached("grad_bias")?;
        let (b, c, h, w) = upstream.dims4("grad_bias upstream")?;
        let mut gb = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = upstream.at4(bi, ci, 0, 0);
                gb[ci] += upstream.data[base..base + h * w].iter().sum::<f64>();
            }
        }
        Ok(gb)
    }

    /// All gradients in one pass, sharing the convolution backward work.
    pub fn backward(&self, upstream: &Tensor, want_input_grad: bool) -> Result<OfsGrads> {
        let input = self.cached("backward")?;
        let comp = self.composite_filter();
        let (gin, mut gw, gb) = conv2d_same_backward(input, &comp, upstream, want_input_grad)?;
        let alpha = self.size.alpha;
        for off in self.ring_offsets().collect::<Vec<_>>() {
            gw.data[off] *= alpha;
        }
        let gsize = self.grad_size(upstream)?;
        Ok(OfsGrads {
            filters: gw,
            bias: gb,
            size: gsize,
            input: gin,
        })
    }

    /// Momentum-SGD update of weights and biases. Transformations, when
    /// needed, run after this per the update ordering.
    pub fn apply_sgd(
        &mut self,
        grad_filters: &Tensor,
        grad_bias: &[f64],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for ((w, v), &g) in self
            .upper
            .weights
            .data
            .iter_mut()
            .zip(&mut self.momentum_filters.data)
            .zip(&grad_filters.data)
        {
            *v = momentum * *v + g + weight_decay * *w;
            *w -= lr * *v;
        }
        for ((b, v), &g) in self
            .bias
            .iter_mut()
            .zip(&mut self.momentum_bias)
            .zip(grad_bias)
        {
            *v = momentum * *v + g;
            *b -= lr * *v;
        }
    }

    /// Momentum-SGD step on the size parameter; returns the clamped new k.
    /// Does not touch bounds or filters: follow with [`transform_if_needed`].
    ///
    /// [`transform_if_needed`]: OfsConvLayer::transform_if_needed
    pub fn sgd_step_size(&mut self, grad: f64, gamma: f64, momentum: f64) -> f64 {
        self.momentum_size = momentum * self.momentum_size + grad;
        (self.size.k - gamma * self.momentum_size).clamp(self.k_min_clamp, self.k_max_clamp)
    }

    /// Adopt `k_new`, expanding or shrinking the stored bank one interval at
    /// a time until `k_new` lies inside `[k_minus, k_plus)`, then recompute
    /// `alpha`. Expansion edge-replicates weights and zero-fills the new
    /// ring's momentum; shrinking crops both.
    pub fn transform_if_needed(&mut self, k_new: f64) -> Result<()> {
        let k_new = k_new.clamp(self.k_min_clamp, self.k_max_clamp);
        let mut k_minus = self.size.k_minus;
        let mut k_plus = self.size.k_plus;
        while k_new >= k_plus as f64 {
            self.upper = expand_filters(&self.upper);
            self.momentum_filters = pad_ring_with_zeros(&self.momentum_filters);
            k_minus = k_plus;
            k_plus += 2;
        }
        while k_new < k_minus as f64 {
            self.upper = crop_filters(&self.upper)?;
            self.momentum_filters = crop_ring(&self.momentum_filters);
            k_plus = k_minus;
            k_minus -= 2;
        }
        debug_assert!(k_minus as f64 <= k_new && k_new < k_plus as f64);
        debug_assert_eq!(self.upper.size, k_plus);
        self.size = ContinuousFilterSize {
            k: k_new,
            k_minus,
            k_plus,
            alpha: (k_new - k_minus as f64) / 2.0,
        };
        Ok(())
    }

    /// Move k inside the current interval (used by finite-difference probes).
    pub fn set_size_within_interval(&mut self, k: f64) -> Result<()> {
        let (lo, hi) = (self.size.k_minus as f64, self.size.k_plus as f64);
        if !(k >= lo && k < hi) {
            return Err(Error::InvalidArgument(format!(
                "k {k} outside the current interval [{lo}, {hi})"
            )));
        }
        self.size.k = k;
        self.size.alpha = (k - lo) / 2.0;
        Ok(())
    }
}

/// Pad a (Cout, Cin, s, s) momentum tensor to s+2 with zeros on the new ring.
fn pad_ring_with_zeros(m: &Tensor) -> Tensor {
    let (co, ci, s, _) = (m.shape[0], m.shape[1], m.shape[2], m.shape[3]);
    let t = s + 2;
    let mut out = Tensor::zeros(vec![co, ci, t, t]);
    for p in 0..co * ci {
        for y in 0..s {
            for x in 0..s {
                out.data[p * t * t + (y + 1) * t + x + 1] = m.data[p * s * s + y * s + x];
            }
        }
    }
    out
}

/// Crop a (Cout, Cin, s, s) momentum tensor to its inner (s-2) block.
fn crop_ring(m: &Tensor) -> Tensor {
    let (co, ci, s, _) = (m.shape[0], m.shape[1], m.shape[2], m.shape[3]);
    let t = s - 2;
    let mut out = Tensor::zeros(vec![co, ci, t, t]);
    for p in 0..co * ci {
        for y in 0..t {
            for x in 0..t {
                out.data[p * t * t + y * t + x] = m.data[p * s * s + (y + 1) * s + x + 1];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer_with_upper(upper: Vec<f64>, s: usize, k: f64) -> OfsConvLayer {
        let bank = FilterBank::new(1, 1, s, Tensor::new(vec![1, 1, s, s], upper).unwrap()).unwrap();
        let mom = Tensor::zeros(bank.weights.shape.clone());
        OfsConvLayer::from_state(bank, vec![0.0], k, 1.0, 11.0, mom, vec![0.0], 0.0).unwrap()
    }

    #[test]
    fn bounds_of_reference_points() {
        let b = bounds_of(4.0).unwrap();
        assert_eq!((b.k_minus(), b.k_plus()), (3, 5));
        assert_eq!(b.alpha(), 0.5);

        let b = bounds_of(5.0).unwrap();
        assert_eq!((b.k_minus(), b.k_plus()), (5, 7));
        assert_eq!(b.alpha(), 0.0);

        let b = bounds_of(6.3).unwrap();
        assert_eq!((b.k_minus(), b.k_plus()), (5, 7));
        assert!((b.alpha() - 0.65).abs() < 1e-12);

        let b = bounds_of(1.0).unwrap();
        assert_eq!((b.k_minus(), b.k_plus()), (1, 3));
        assert_eq!(b.alpha(), 0.0);
    }

    #[test]
    fn bounds_of_rejects_k_below_one() {
        assert!(bounds_of(0.99).is_err());
        assert!(bounds_of(f64::NAN).is_err());
    }

    #[test]
    fn composite_at_alpha_zero_zeroes_the_ring() {
        let layer = layer_with_upper((1..=9).map(f64::from).collect(), 3, 1.0);
        let comp = layer.composite_filter();
        assert_eq!(
            comp.weights.data,
            vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn composite_at_half_alpha_halves_the_ring() {
        let layer = layer_with_upper(vec![1.0; 9], 3, 2.0);
        let comp = layer.composite_filter();
        assert_eq!(
            comp.weights.data,
            vec![0.5, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 0.5]
        );
    }

    #[test]
    fn forward_zero_filters_emits_bias() {
        let mut layer = layer_with_upper(vec![0.0; 25], 5, 4.0);
        layer.bias_mut()[0] = 0.7;
        let input = Tensor::filled(vec![1, 1, 4, 4], 3.3);
        let out = layer.forward(&input).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn forward_at_alpha_zero_matches_lower_filter_conv() {
        let weights: Vec<f64> = (0..25).map(|i| (i as f64) * 0.1 - 1.2).collect();
        let mut layer = layer_with_upper(weights, 5, 3.0);
        let mut input = Tensor::zeros(vec![1, 1, 6, 6]);
        for (i, v) in input.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 23) as f64 / 11.0 - 1.0;
        }
        let out = layer.forward(&input).unwrap();
        let lower = crop_filters(layer.upper()).unwrap();
        let direct = conv2d_same(&input, &lower, &[0.0]).unwrap();
        for (a, b) in out.data.iter().zip(&direct.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_ops_require_forward_first() {
        let layer = layer_with_upper(vec![1.0; 9], 3, 2.0);
        let up = Tensor::zeros(vec![1, 1, 4, 4]);
        assert!(layer.grad_size(&up).is_err());
        assert!(layer.grad_filters(&up).is_err());
        assert!(layer.grad_input(&up).is_err());
        assert!(layer.grad_bias(&up).is_err());
    }

    #[test]
    fn grad_size_zero_ring_gives_zero() {
        let mut weights = vec![0.0; 25];
        for y in 1..4 {
            for x in 1..4 {
                weights[y * 5 + x] = 0.9;
            }
        }
        let mut layer = layer_with_upper(weights, 5, 4.0);
        let mut input = Tensor::zeros(vec![1, 1, 8, 8]);
        for (i, v) in input.data.iter_mut().enumerate() {
            *v = (i as f64).sin();
        }
        let out = layer.forward(&input).unwrap();
        let up = Tensor::filled(out.shape.clone(), 1.0);
        assert_eq!(layer.grad_size(&up).unwrap(), 0.0);
    }

    #[test]
    fn grad_size_single_ring_tap_is_half_weight() {
        // Ring weight c at tap (0,0); input 1 at the one point that tap
        // reads for activation (5,5); upstream 1 at that activation only.
        let c = 1.3;
        let mut weights = vec![0.0; 25];
        weights[0] = c;
        let mut layer = layer_with_upper(weights, 5, 4.0);
        let mut input = Tensor::zeros(vec![1, 1, 9, 9]);
        input.data[3 * 9 + 3] = 1.0;
        let out = layer.forward(&input).unwrap();
        let mut up = Tensor::zeros(out.shape.clone());
        up.data[5 * 9 + 5] = 1.0;
        let g = layer.grad_size(&up).unwrap();
        assert!((g - c / 2.0).abs() < 1e-15, "{g}");
    }

    #[test]
    fn grad_filters_ring_is_zero_at_alpha_zero() {
        let weights: Vec<f64> = (0..25).map(|i| i as f64 * 0.3 - 3.0).collect();
        let mut layer = layer_with_upper(weights, 5, 3.0);
        let mut input = Tensor::zeros(vec![1, 1, 7, 7]);
        for (i, v) in input.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.7).cos();
        }
        let out = layer.forward(&input).unwrap();
        let up = Tensor::filled(out.shape.clone(), 0.5);
        let gw = layer.grad_filters(&up).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let on_ring = y == 0 || y == 4 || x == 0 || x == 4;
                let g = gw.data[y * 5 + x];
                if on_ring {
                    assert_eq!(g, 0.0);
                } else {
                    assert_ne!(g, 0.0);
                }
            }
        }
    }

    #[test]
    fn sgd_step_size_examples() {
        let mut layer = layer_with_upper(vec![0.0; 25], 5, 4.0);
        let k = layer.sgd_step_size(0.0, 0.1, 0.0);
        assert_eq!(k, 4.0);

        let mut layer = layer_with_upper(vec![0.0; 25], 5, 4.0);
        let k = layer.sgd_step_size(2.0, 0.1, 0.0);
        assert!((k - 3.8).abs() < 1e-15);

        let mut layer = layer_with_upper(vec![0.0; 25], 5, 4.0);
        layer.momentum_size = 1.0;
        let k = layer.sgd_step_size(2.0, 0.1, 0.9);
        assert!((layer.momentum_size() - 2.9).abs() < 1e-15);
        assert!((k - 3.71).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_size_clamps_to_range() {
        let mut layer = layer_with_upper(vec![0.0; 25], 5, 4.0);
        assert_eq!(layer.sgd_step_size(1000.0, 1.0, 0.0), 1.0);
        let mut layer = layer_with_upper(vec![0.0; 25], 5, 4.0);
        assert_eq!(layer.sgd_step_size(-1000.0, 1.0, 0.0), 11.0);
    }

    #[test]
    fn expand_1x1_replicates_everywhere() {
        let bank = FilterBank::new(1, 1, 1, Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap()).unwrap();
        let big = expand_filters(&bank);
        assert_eq!(big.size, 3);
        assert!(big.weights.data.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn expand_3x3_edge_replication() {
        let bank = FilterBank::new(
            1,
            1,
            3,
            Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap(),
        )
        .unwrap();
        let big = expand_filters(&bank);
        assert_eq!(big.size, 5);
        assert_eq!(&big.weights.data[0..5], &[1.0, 1.0, 2.0, 3.0, 3.0]);
        assert_eq!(&big.weights.data[20..25], &[7.0, 7.0, 8.0, 9.0, 9.0]);
        // Inner block is the original, untouched.
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(big.weights.data[(y + 1) * 5 + x + 1], (y * 3 + x + 1) as f64);
            }
        }
    }

    #[test]
    fn shrink_3x3_keeps_only_center() {
        let bank = FilterBank::new(
            1,
            1,
            3,
            Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap(),
        )
        .unwrap();
        let s = shrink_filters(&bank).unwrap();
        assert_eq!(
            s.weights.data,
            vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn shrink_rejects_minimum_size() {
        let bank = FilterBank::new(1, 1, 1, Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
        assert!(shrink_filters(&bank).is_err());
    }

    #[test]
    fn shrink_then_expand_preserves_inner_block() {
        let vals: Vec<f64> = (0..25).map(|i| i as f64 * 1.01).collect();
        let bank = FilterBank::new(1, 1, 5, Tensor::new(vec![1, 1, 5, 5], vals.clone()).unwrap()).unwrap();
        let round = expand_filters(&crop_filters(&bank).unwrap());
        assert_eq!(round.size, 5);
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(round.weights.data[y * 5 + x], vals[y * 5 + x]);
            }
        }
    }

    #[test]
    fn transform_expand_event() {
        let weights: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let mut layer = layer_with_upper(weights.clone(), 5, 4.0);
        layer.transform_if_needed(5.1).unwrap();
        assert_eq!(layer.size().k_minus(), 5);
        assert_eq!(layer.size().k_plus(), 7);
        assert!((layer.size().alpha() - 0.05).abs() < 1e-12);
        assert_eq!(layer.upper().size, 7);
        // Old upper is the new inner block.
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(layer.upper().weights.data[(y + 1) * 7 + x + 1], weights[y * 5 + x]);
            }
        }
        assert_eq!(layer.momentum_filters().shape, vec![1, 1, 7, 7]);
    }

    #[test]
    fn transform_shrink_event() {
        let weights: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let mut layer = layer_with_upper(weights.clone(), 5, 4.0);
        layer.transform_if_needed(2.9).unwrap();
        assert_eq!(layer.size().k_minus(), 1);
        assert_eq!(layer.size().k_plus(), 3);
        assert!((layer.size().alpha() - 0.95).abs() < 1e-12);
        assert_eq!(layer.upper().size, 3);
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(layer.upper().weights.data[y * 3 + x], weights[(y + 1) * 5 + x + 1]);
            }
        }
    }

    #[test]
    fn transform_inside_interval_only_updates_alpha() {
        let weights: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let mut layer = layer_with_upper(weights.clone(), 5, 4.0);
        layer.transform_if_needed(4.2).unwrap();
        assert_eq!(layer.size().k_minus(), 3);
        assert_eq!(layer.size().k_plus(), 5);
        assert!((layer.size().alpha() - 0.6).abs() < 1e-12);
        assert_eq!(layer.upper().weights.data, weights);
    }

    #[test]
    fn transform_crosses_multiple_intervals_when_needed() {
        let mut layer = layer_with_upper(vec![1.0; 25], 5, 4.0);
        layer.transform_if_needed(9.4).unwrap();
        assert_eq!(layer.size().k_minus(), 9);
        assert_eq!(layer.size().k_plus(), 11);
        assert_eq!(layer.upper().size, 11);
        let b = bounds_of(9.4).unwrap();
        assert_eq!(b.k_minus(), layer.size().k_minus());
        assert_eq!(b.k_plus(), layer.size().k_plus());

        layer.transform_if_needed(1.0).unwrap();
        assert_eq!(layer.size().k_minus(), 1);
        assert_eq!(layer.size().k_plus(), 3);
        assert_eq!(layer.upper().size, 3);
    }

    #[test]
    fn transform_expand_at_exact_boundary_starts_new_interval() {
        let mut layer = layer_with_upper(vec![1.0; 25], 5, 4.0);
        layer.transform_if_needed(5.0).unwrap();
        assert_eq!(layer.size().k_minus(), 5);
        assert_eq!(layer.size().k_plus(), 7);
        assert_eq!(layer.size().alpha(), 0.0);
    }
}
