//! Finite-difference gradient verification.
//!
//! Touches only the forward path (`Network::batch_loss`), never the
//! analytic backward code it is checking: a central difference
//! `(loss(+h) - loss(-h)) / 2h` per perturbed coordinate, with the
//! perturbed value restored bit-exactly afterwards.
//!
//! Rectifier kinks make central differences invalid (the analytic gradient
//! is still fine). A perturbation that flips any rectifier mask between the
//! two probe evaluations is detected through the forward pass's mask digest
//! and the coordinate is excluded from the check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, LayerGrads, Network};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// What to perturb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Flat index into a layer's weight array (upper bank for learned-size
    /// convs).
    FilterWeight { layer: usize, index: usize },
    Bias { layer: usize, channel: usize },
    /// Flat index into the probe input tensor.
    Input { index: usize },
    /// The continuous filter size of a learned-size layer.
    SizeK { layer: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTarget {
    pub kind: TargetKind,
    pub h: f64,
}

/// Central difference of a scalar function at `x`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn get_weight(net: &Network, layer: usize, index: usize) -> Result<f64> {
    match &net.layers()[layer] {
        Layer::OfsConv(l) => Ok(l.upper().weights.data[index]),
        Layer::Conv(l) => Ok(l.filters.weights.data[index]),
        Layer::Linear(l) => Ok(l.weights.data[index]),
        _ => Err(Error::InvalidArgument(format!("layer {layer} has no weights"))),
    }
}

fn set_weight(net: &mut Network, layer: usize, index: usize, v: f64) -> Result<()> {
    match &mut net.layers_mut()[layer] {
        Layer::OfsConv(l) => l.upper_weights_mut().data[index] = v,
        Layer::Conv(l) => l.filters.weights.data[index] = v,
        Layer::Linear(l) => l.weights.data[index] = v,
        _ => return Err(Error::InvalidArgument(format!("layer {layer} has no weights"))),
    }
    Ok(())
}

fn get_bias(net: &Network, layer: usize, channel: usize) -> Result<f64> {
    match &net.layers()[layer] {
        Layer::OfsConv(l) => Ok(l.bias()[channel]),
        Layer::Conv(l) => Ok(l.bias[channel]),
        Layer::Linear(l) => Ok(l.bias[channel]),
        _ => Err(Error::InvalidArgument(format!("layer {layer} has no bias"))),
    }
}

fn set_bias(net: &mut Network, layer: usize, channel: usize, v: f64) -> Result<()> {
    match &mut net.layers_mut()[layer] {
        Layer::OfsConv(l) => l.bias_mut()[channel] = v,
        Layer::Conv(l) => l.bias[channel] = v,
        Layer::Linear(l) => l.bias[channel] = v,
        _ => return Err(Error::InvalidArgument(format!("layer {layer} has no bias"))),
    }
    Ok(())
}

/// Outcome of one finite-difference probe.
#[derive(Debug, Clone, Copy)]
pub struct FdProbe {
    pub derivative: f64,
    /// A rectifier mask differed between the two evaluations.
    pub kink_crossed: bool,
}

/// Central-difference derivative of the batch loss with respect to one
/// target. Restores the perturbed value exactly. A size probe whose
/// interval `[k-h, k+h]` leaves `[k_minus, k_plus)` is rejected: the
/// activation is only piecewise linear in k.
pub fn finite_diff(
    net: &mut Network,
    input: &mut Tensor,
    labels: &[u8],
    target: &PerturbationTarget,
) -> Result<FdProbe> {
    let h = target.h;
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }

    let (mut probe, original): (Box<dyn FnMut(&mut Network, &mut Tensor, f64) -> Result<f64>>, f64) =
        match target.kind {
            TargetKind::FilterWeight { layer, index } => {
                let orig = get_weight(net, layer, index)?;
                (
                    Box::new(move |n, _x, v| {
                        set_weight(n, layer, index, v)?;
                        Ok(v)
                    }),
                    orig,
                )
            }
            TargetKind::Bias { layer, channel } => {
                let orig = get_bias(net, layer, channel)?;
                (
                    Box::new(move |n, _x, v| {
                        set_bias(n, layer, channel, v)?;
                        Ok(v)
                    }),
                    orig,
                )
            }
            TargetKind::Input { index } => {
                let orig = input.data[index];
                (
                    Box::new(move |_n, x, v| {
                        x.data[index] = v;
                        Ok(v)
                    }),
                    orig,
                )
            }
            TargetKind::SizeK { layer } => {
                let l = match &net.layers()[layer] {
                    Layer::OfsConv(l) => l,
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "layer {layer} has no learned size"
                        )))
                    }
                };
                let k = l.size().k();
                let (lo, hi) = (l.size().k_minus() as f64, l.size().k_plus() as f64);
                if !(k - h >= lo && k + h < hi) {
                    return Err(Error::InvalidArgument(format!(
                        "size probe [{}, {}] crosses the interval [{lo}, {hi})",
                        k - h,
                        k + h
                    )));
                }
                (
                    Box::new(move |n, _x, v| {
                        match &mut n.layers_mut()[layer] {
                            Layer::OfsConv(l) => l.set_size_within_interval(v)?,
                            _ => unreachable!(),
                        }
                        Ok(v)
                    }),
                    k,
                )
            }
        };

    probe(net, input, original + h)?;
    let loss_plus = net.batch_loss(input, labels)?;
    let sig_plus = net.last_mask_sig();

    probe(net, input, original - h)?;
    let loss_minus = net.batch_loss(input, labels)?;
    let sig_minus = net.last_mask_sig();

    probe(net, input, original)?;

    Ok(FdProbe {
        derivative: (loss_plus - loss_minus) / (2.0 * h),
        kink_crossed: sig_plus != sig_minus,
    })
}

/// Options for [`check_report`].
#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Weight coordinates to subsample (all if fewer exist).
    pub weight_samples: usize,
    /// Input coordinates to subsample.
    pub input_samples: usize,
    /// Seed of the coordinate-subsampling stream.
    pub seed: u64,
    /// Debug switch: doubles the analytic size gradient so the report must
    /// flag the size parameter.
    pub corrupt_size_grad: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            h: 1e-5,
            tolerance: 1e-4,
            weight_samples: 200,
            input_samples: 200,
            seed: 0,
            corrupt_size_grad: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckEntry {
    pub target: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradReport {
    pub entries: Vec<CheckEntry>,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_target: Option<String>,
    pub tolerance: f64,
    pub h: f64,
    pub pass: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn weight_len(layer: &Layer) -> usize {
    match layer {
        Layer::OfsConv(l) => l.upper().weights.numel(),
        Layer::Conv(l) => l.filters.weights.numel(),
        Layer::Linear(l) => l.weights.numel(),
        _ => 0,
    }
}

fn bias_len(layer: &Layer) -> usize {
    match layer {
        Layer::OfsConv(l) => l.bias().len(),
        Layer::Conv(l) => l.bias.len(),
        Layer::Linear(l) => l.bias.len(),
        _ => 0,
    }
}

/// Sweep every learned size and every bias, plus random subsamples of the
/// weight and input coordinates, comparing analytic gradients against
/// central differences. Passes iff the worst relative error stays within
/// `opts.tolerance`.
pub fn check_report(
    net: &mut Network,
    input: &Tensor,
    labels: &[u8],
    opts: &CheckOptions,
) -> Result<GradReport> {
    let total_params: usize = net.layers().iter().map(|l| weight_len(l) + bias_len(l)).sum();
    if total_params > 10_000 {
        return Err(Error::InvalidArgument(format!(
            "check_report is meant for small networks (<= 10000 parameters), got {total_params}"
        )));
    }

    let mut x = input.clone();
    let (_, grads) = net.forward_backward(&x, labels, true)?;
    let input_grad = grads.input.as_ref().expect("input grad requested");

    let analytic_of = |kind: &TargetKind| -> f64 {
        match *kind {
            TargetKind::FilterWeight { layer, index } => match &grads.layers[layer] {
                LayerGrads::OfsConv { filters, .. } => filters.data[index],
                LayerGrads::Conv { filters, .. } => filters.data[index],
                LayerGrads::Linear { weights, .. } => weights.data[index],
                LayerGrads::Stateless => unreachable!("weight target on stateless layer"),
            },
            TargetKind::Bias { layer, channel } => match &grads.layers[layer] {
                LayerGrads::OfsConv { bias, .. } => bias[channel],
                LayerGrads::Conv { bias, .. } => bias[channel],
                LayerGrads::Linear { bias, .. } => bias[channel],
                LayerGrads::Stateless => unreachable!("bias target on stateless layer"),
            },
            TargetKind::SizeK { layer } => {
                let g = match &grads.layers[layer] {
                    LayerGrads::OfsConv { size, .. } => *size,
                    _ => unreachable!("size target on non-learned layer"),
                };
                if opts.corrupt_size_grad {
                    2.0 * g
                } else {
                    g
                }
            }
            TargetKind::Input { index } => input_grad.data[index],
        }
    };

    // Target list: all sizes, all biases, sampled weights, sampled inputs.
    let mut targets: Vec<TargetKind> = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        if matches!(layer, Layer::OfsConv(_)) {
            targets.push(TargetKind::SizeK { layer: i });
        }
        for ch in 0..bias_len(layer) {
            targets.push(TargetKind::Bias { layer: i, channel: ch });
        }
    }
    let mut sampler = Stream::new(opts.seed).derive("gradcheck");
    let mut weight_coords: Vec<(usize, usize)> = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        for j in 0..weight_len(layer) {
            weight_coords.push((i, j));
        }
    }
    sampler.shuffle(&mut weight_coords);
    for &(layer, index) in weight_coords.iter().take(opts.weight_samples) {
        targets.push(TargetKind::FilterWeight { layer, index });
    }
    let mut input_coords: Vec<usize> = (0..x.numel()).collect();
    sampler.shuffle(&mut input_coords);
    for &index in input_coords.iter().take(opts.input_samples) {
        targets.push(TargetKind::Input { index });
    }

    let mut entries = Vec::with_capacity(targets.len());
    let mut max_rel_err = 0.0f64;
    let mut worst_target = None;
    let mut checked = 0usize;
    let mut skipped = 0usize;

    for kind in targets {
        let desc = describe(&kind);
        let analytic = analytic_of(&kind);
        let target = PerturbationTarget { kind, h: opts.h };
        match finite_diff(net, &mut x, labels, &target) {
            Ok(probe) if probe.kink_crossed => {
                skipped += 1;
                entries.push(CheckEntry {
                    target: desc,
                    analytic,
                    numeric: probe.derivative,
                    rel_err: f64::NAN,
                    skipped: Some("rectifier kink crossed".into()),
                });
            }
            Ok(probe) => {
                let err = rel_err(analytic, probe.derivative);
                checked += 1;
                if err > max_rel_err {
                    max_rel_err = err;
                    worst_target = Some(entries.len());
                }
                entries.push(CheckEntry {
                    target: desc,
                    analytic,
                    numeric: probe.derivative,
                    rel_err: err,
                    skipped: None,
                });
            }
            Err(e) => {
                skipped += 1;
                entries.push(CheckEntry {
                    target: desc,
                    analytic,
                    numeric: f64::NAN,
                    rel_err: f64::NAN,
                    skipped: Some(e.to_string()),
                });
            }
        }
    }

    let worst_target = worst_target.map(|i| entries[i].target.clone());
    Ok(GradReport {
        entries,
        checked,
        skipped,
        max_rel_err,
        worst_target,
        tolerance: opts.tolerance,
        h: opts.h,
        pass: max_rel_err <= opts.tolerance,
    })
}

fn describe(kind: &TargetKind) -> String {
    match kind {
        TargetKind::FilterWeight { layer, index } => format!("layer{layer}.weight[{index}]"),
        TargetKind::Bias { layer, channel } => format!("layer{layer}.bias[{channel}]"),
        TargetKind::Input { index } => format!("input[{index}]"),
        TargetKind::SizeK { layer } => format!("layer{layer}.size_k"),
    }
}
